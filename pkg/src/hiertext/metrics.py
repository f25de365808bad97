"""
Evaluation of hierarchical models: per-level accuracy with true parents,
overall (free-running) accuracy, P/R/F1 at the leaf level, and the label
ranking measures coverage error and ranking loss in flat (leaf-only) and
hierarchical (all levels' labels) form.
"""
import logging
from dataclasses import dataclass
from typing import FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.metrics import precision_recall_fscore_support

from .corpus import Document
from .schemas import Averaging, EvalReport, RLossSemantics
from .taxonomy import categories_at
from .trainer import HierarchicalModel, PathPrediction, encode_level, predict_paths

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RankedPrediction:
    """
    A score for every label of a universe plus the set of relevant labels.
    """
    labels: Tuple[str, ...]
    scores: np.ndarray
    relevant: FrozenSet[str]

    def __post_init__(self):
        if len(self.labels) != len(self.scores):
            raise ValueError("one score per label required")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")
        if not self.relevant:
            raise ValueError("relevant label set must be non-empty")
        unknown = self.relevant - set(self.labels)
        if unknown:
            raise ValueError(f"relevant labels not in universe: {sorted(unknown)}")

    def ranks(self) -> np.ndarray:
        # r(c) = |{k : s_k >= s_c}|
        return np.sum(self.scores[None, :] >= self.scores[:, None], axis=1)

    def relevant_mask(self) -> np.ndarray:
        return np.array([label in self.relevant for label in self.labels])


def rank(pred: RankedPrediction, label: str) -> int:
    """
    Number of labels (the label itself included) scored at least as high.
    """
    if label not in pred.labels:
        raise ValueError(f"unknown label {label!r}")
    score = pred.scores[pred.labels.index(label)]
    return int(np.sum(pred.scores >= score))


def coverage_error(preds: Sequence[RankedPrediction]) -> float:
    """
    Mean over instances of (worst rank among relevant labels - 1).
    """
    if not preds:
        raise ValueError("coverage_error needs at least one prediction")
    depths = [pred.ranks()[pred.relevant_mask()].max() - 1 for pred in preds]
    return float(np.mean(depths))


def ranking_loss(preds: Sequence[RankedPrediction], semantics: RLossSemantics = "as_printed") -> float:
    """
    Mean normalized count of relevant x irrelevant label pairs.

    `as_printed` counts pairs where the relevant label has the strictly
    better (smaller) rank; `prose` counts pairs where the irrelevant label
    does.
    """
    if not preds:
        raise ValueError("ranking_loss needs at least one prediction")
    values = []
    for pred in preds:
        mask = pred.relevant_mask()
        if mask.all():
            raise ValueError("ranking_loss needs at least one irrelevant label")
        ranks = pred.ranks()
        rel, irr = ranks[mask], ranks[~mask]
        if semantics == "as_printed":
            pairs = np.sum(rel[:, None] < irr[None, :])
        elif semantics == "prose":
            pairs = np.sum(rel[:, None] > irr[None, :])
        else:
            raise ValueError(f"unknown ranking-loss semantics {semantics!r}")
        values.append(pairs / (len(rel) * len(irr)))
    return float(np.mean(values))


def precision_recall_f1(
    predictions: Sequence[int],
    truths: Sequence[int],
    num_classes: int,
    average: Averaging = "macro",
) -> Tuple[float, float, float]:
    """
    Precision, recall and F1 over the classes present in `truths`, with
    0/0 defined as 0.
    """
    predictions, truths = np.asarray(predictions), np.asarray(truths)
    for name, values in (("prediction", predictions), ("truth", truths)):
        if values.size and (values.min() < 0 or values.max() >= num_classes):
            raise ValueError(f"{name} class index out of range 0..{num_classes - 1}")
    if truths.size == 0:
        return 0.0, 0.0, 0.0
    p, r, f, _ = precision_recall_fscore_support(
        truths, predictions, labels=np.unique(truths), average=average, zero_division=0
    )
    return float(p), float(r), float(f)


def level_accuracy(model: HierarchicalModel, docs: Sequence[Document], level: int, batch_size: int = 64) -> float:
    """
    Accuracy at one level when the input carries the TRUE parent label.
    """
    clf = model.classifiers[level - 1]
    batch = encode_level(
        docs, level, model.taxonomy, model.embeddings, model.config.max_len,
        joint_embedding=model.config.use_joint_embedding,
    )
    correct = 0
    for start in range(0, len(batch), batch_size):
        chunk = batch.take(range(start, min(start + batch_size, len(batch))))
        predicted, _ = clf.predict(chunk)
        correct += int(np.sum(predicted == chunk.targets))
    return correct / len(docs)


def overall_accuracy(
    model: HierarchicalModel,
    docs: Sequence[Document],
    paths: Optional[Sequence[PathPrediction]] = None,
) -> float:
    """
    Leaf accuracy when every level consumes the PREDICTED parent label.
    """
    paths = paths if paths is not None else predict_paths(model, docs)
    return float(np.mean([p.path[-1] == d.path[-1] for p, d in zip(paths, docs)]))


def free_running_level_accuracy(
    docs: Sequence[Document], paths: Sequence[PathPrediction], levels: int
) -> List[float]:
    return [
        float(np.mean([p.path[j] == d.path[j] for p, d in zip(paths, docs)]))
        for j in range(levels)
    ]


def assemble_hierarchical_scores(
    model: HierarchicalModel,
    doc: Document,
    prediction: Optional[PathPrediction] = None,
) -> RankedPrediction:
    """
    Union of every level's categories scored by the concatenated
    free-running softmax rows; the relevant set is the true path.
    """
    prediction = prediction or predict_paths(model, [doc])[0]
    labels = tuple(
        node for level in range(1, model.taxonomy.level_count + 1)
        for node in categories_at(model.taxonomy, level)
    )
    return RankedPrediction(
        labels=labels,
        scores=np.concatenate(prediction.probabilities),
        relevant=frozenset(doc.path),
    )


def flat_scores(
    model: HierarchicalModel,
    doc: Document,
    prediction: Optional[PathPrediction] = None,
) -> RankedPrediction:
    """
    Leaf-level scores only, with the true leaf as the relevant label.
    """
    prediction = prediction or predict_paths(model, [doc])[0]
    leaves = tuple(categories_at(model.taxonomy, model.taxonomy.level_count))
    return RankedPrediction(labels=leaves, scores=prediction.probabilities[-1], relevant=frozenset(doc.path[-1:]))


def _ranking_loss_if_defined(
    preds: Sequence[RankedPrediction], semantics: RLossSemantics
) -> Optional[float]:
    # a single-label universe has no irrelevant label to pair with
    if len(preds[0].labels) < 2:
        return None
    return ranking_loss(preds, semantics)


def evaluate(
    model: HierarchicalModel,
    docs: Sequence[Document],
    average: Averaging = "macro",
    rloss_semantics: RLossSemantics = "as_printed",
) -> EvalReport:
    """
    Compute every evaluation quantity for `docs`.
    """
    if not docs:
        raise ValueError("cannot evaluate on an empty document set")
    tax = model.taxonomy
    levels = tax.level_count
    paths = predict_paths(model, docs)

    leaf_index = {node: i for i, node in enumerate(categories_at(tax, levels))}
    predicted_leaves = [leaf_index[p.path[-1]] for p in paths]
    true_leaves = [leaf_index[d.path[-1]] for d in docs]
    precision, recall, f1 = precision_recall_f1(predicted_leaves, true_leaves, len(leaf_index), average)

    flat = [flat_scores(model, d, p) for d, p in zip(docs, paths)]
    hierarchical = [assemble_hierarchical_scores(model, d, p) for d, p in zip(docs, paths)]

    report = EvalReport(
        num_documents=len(docs),
        level_accuracy=[level_accuracy(model, docs, j) for j in range(1, levels + 1)],
        free_running_level_accuracy=free_running_level_accuracy(docs, paths, levels),
        overall_accuracy=overall_accuracy(model, docs, paths),
        precision=precision,
        recall=recall,
        f1=f1,
        averaging=average,
        flat_coverage_error=coverage_error(flat),
        flat_ranking_loss=_ranking_loss_if_defined(flat, rloss_semantics),
        hierarchical_coverage_error=coverage_error(hierarchical),
        hierarchical_ranking_loss=_ranking_loss_if_defined(hierarchical, rloss_semantics),
        rloss_semantics=rloss_semantics,
    )
    logger.info(
        "Evaluation complete",
        extra={"documents": len(docs), "overall_accuracy": round(report.overall_accuracy, 4)},
    )
    return report
