"""
Level-by-level training: each level's classifier is trained on inputs
composed with the true parent label, its ONLSTM is initialized from the
previous level's trained ONLSTM, and Adam runs with reduce-on-plateau
learning-rate decay and early stopping on validation loss.
"""
import copy
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import onlstm
from .classifier import LevelClassifier
from .corpus import Document, EmbeddingMatrix, LevelBatch, compose_level_input, encode_batch
from .numeric import AdamState, SeedStreams, adam_step
from .onlstm import ONLSTMParams
from .schemas import EpochRecord, TrainConfig
from .taxonomy import Taxonomy, categories_at, class_index

logger = logging.getLogger(__name__)


class PlateauScheduler:
    """
    Divide the learning rate by `factor` once the monitored loss has not
    improved for `patience` consecutive epochs, never going below `min_lr`.
    """

    def __init__(self, init_lr: float, factor: float, patience: int, min_lr: float):
        self.lr = init_lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best = np.inf
        self.wait = 0

    def on_epoch_end(self, epoch: int, metric: float) -> bool:
        """
        Returns True when `metric` improved on the best value so far.
        """
        if metric < self.best:
            self.best = metric
            self.wait = 0
            return True
        self.wait += 1
        if self.wait >= self.patience and self.lr > self.min_lr:
            new_lr = max(self.lr / self.factor, self.min_lr)
            logger.info(
                "Reducing learning rate",
                extra={"epoch": epoch, "old_lr": self.lr, "new_lr": new_lr},
            )
            self.lr = new_lr
            self.wait = 0
        return False


class EarlyStopping:
    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.wait = 0

    def should_stop(self, metric: float) -> bool:
        if metric < self.best:
            self.best = metric
            self.wait = 0
            return False
        self.wait += 1
        return self.wait >= self.patience


@dataclass
class TrainHistory:
    level: int
    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    initial_onlstm_digest: str = ""
    final_onlstm_digest: str = ""

    @property
    def lrs(self) -> List[float]:
        return [r.lr for r in self.records if r.epoch > 0]

    @property
    def best_val_loss(self) -> float:
        return min(r.val_loss for r in self.records)

    @property
    def epochs_to_best(self) -> int:
        return self.best_epoch

    @property
    def epochs_run(self) -> int:
        return max(r.epoch for r in self.records)


@dataclass
class HierarchicalModel:
    taxonomy: Taxonomy
    embeddings: EmbeddingMatrix
    classifiers: List[LevelClassifier]
    config: TrainConfig
    histories: List[TrainHistory] = field(default_factory=list)


@dataclass
class PathPrediction:
    doc_id: str
    path: Tuple[str, ...]
    probabilities: List[np.ndarray]

    @property
    def top_probabilities(self) -> List[float]:
        return [float(p.max()) for p in self.probabilities]


def level_sequences(
    docs: Sequence[Document],
    level: int,
    tax: Taxonomy,
    parent_ids: Optional[Sequence[str]] = None,
    joint_embedding: bool = True,
) -> Tuple[List[List[str]], List[str]]:
    """
    Token sequences for one level. Parents default to each document's
    true path; without joint embedding every level sees the bare text.
    """
    if level < 1 or level > tax.level_count:
        raise ValueError(f"level must be in 1..{tax.level_count}, got {level}")
    sequences, parent_labels = [], []
    for i, doc in enumerate(docs):
        if level == 1 or not joint_embedding:
            label = ""
            sequences.append(compose_level_input(doc, 1, ""))
        else:
            parent = parent_ids[i] if parent_ids is not None else doc.path[level - 2]
            label = tax.label_of(parent)
            sequences.append(compose_level_input(doc, level, label))
        parent_labels.append(label)
    return sequences, parent_labels


def encode_level(
    docs: Sequence[Document],
    level: int,
    tax: Taxonomy,
    embeddings: EmbeddingMatrix,
    max_len: int,
    parent_ids: Optional[Sequence[str]] = None,
    joint_embedding: bool = True,
    with_targets: bool = True,
) -> LevelBatch:
    sequences, parent_labels = level_sequences(docs, level, tax, parent_ids, joint_embedding)
    targets = [doc.path[level - 1] for doc in docs] if with_targets else None
    return encode_batch(
        sequences, embeddings.vocabulary, max_len, level,
        class_index(tax, level), targets=targets, parent_labels=parent_labels,
    )


def make_batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    """
    A seeded permutation cut into mini-batches; a trailing batch of one
    example is merged into the previous batch.
    """
    order = rng.permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def evaluate_level(clf: LevelClassifier, batch: LevelBatch, batch_size: int = 64) -> Tuple[float, float]:
    """
    Evaluation-mode mean cross-entropy and accuracy over an encoded set.
    """
    total_loss, correct = 0.0, 0
    for start in range(0, len(batch), batch_size):
        chunk = batch.take(range(start, min(start + batch_size, len(batch))))
        probs = clf.forward(chunk, training=False).probabilities
        rows = np.arange(len(chunk))
        total_loss += float(-np.sum(np.log(np.maximum(probs[rows, chunk.targets], 1e-12))))
        correct += int(np.sum(np.argmax(probs, axis=1) == chunk.targets))
    return total_loss / len(batch), correct / len(batch)


def transfer_parameters(src: LevelClassifier) -> ONLSTMParams:
    """
    Deep copy of the trained ONLSTM weights, the only parameters carried
    to the next level.
    """
    return src.onlstm.copy()


def build_classifier(
    level: int,
    tax: Taxonomy,
    embeddings: EmbeddingMatrix,
    cfg: TrainConfig,
    rng: np.random.Generator,
    init_onlstm: Optional[ONLSTMParams] = None,
) -> LevelClassifier:
    n = cfg.hidden_size_for(level)
    if init_onlstm is not None:
        if (init_onlstm.input_size, init_onlstm.hidden_size) != (embeddings.dim, n):
            raise ValueError(
                f"cannot transfer ONLSTM of shape d={init_onlstm.input_size}, "
                f"n={init_onlstm.hidden_size} into level {level} (d={embeddings.dim}, n={n})"
            )
        params = init_onlstm.copy()
    else:
        params = onlstm.init_params(embeddings.dim, n, rng)
    return LevelClassifier(
        level=level,
        embeddings=embeddings,
        class_ids=categories_at(tax, level),
        onlstm_params=params,
        mlp_units=cfg.mlp_units_for(level),
        rng=rng,
        input_dropout=cfg.input_dropout,
        hidden_dropout=cfg.hidden_dropout,
        bn_momentum=cfg.bn_momentum,
        bn_eps=cfg.bn_eps,
    )


def train_level(
    level: int,
    train_docs: Sequence[Document],
    val_docs: Sequence[Document],
    tax: Taxonomy,
    embeddings: EmbeddingMatrix,
    init_onlstm: Optional[ONLSTMParams],
    cfg: TrainConfig,
    streams: Optional[SeedStreams] = None,
) -> Tuple[LevelClassifier, TrainHistory]:
    """
    Train one level's classifier with teacher forcing and return it with
    the parameters of its best validation epoch restored.

    Epoch 0 scores the freshly built (or transferred) model before any
    update, and counts as a candidate best epoch.
    """
    if level < 1 or level > tax.level_count:
        raise ValueError(f"level must be in 1..{tax.level_count}, got {level}")
    if not train_docs or not val_docs:
        raise ValueError("training and validation documents must be non-empty")
    streams = streams or SeedStreams(cfg.seed)

    clf = build_classifier(level, tax, embeddings, cfg, streams.stream("init", level), init_onlstm)
    train_batch = encode_level(
        train_docs, level, tax, embeddings, cfg.max_len, joint_embedding=cfg.use_joint_embedding
    )
    val_batch = encode_level(
        val_docs, level, tax, embeddings, cfg.max_len, joint_embedding=cfg.use_joint_embedding
    )

    history = TrainHistory(level=level, initial_onlstm_digest=clf.onlstm.digest())
    params = clf.parameters()
    adam = AdamState.for_params(params)
    scheduler = PlateauScheduler(
        cfg.initial_lr, cfg.lr_decay_factor, cfg.plateau_patience_epochs,
        min_lr=cfg.initial_lr / cfg.lr_decay_factor,
    )
    stopper = EarlyStopping(cfg.early_stop_patience)

    val_loss, val_acc = evaluate_level(clf, val_batch, cfg.batch_size)
    history.records.append(
        EpochRecord(
            level=level, epoch=0, lr=scheduler.lr, val_loss=val_loss, val_acc=val_acc,
            onlstm_digest=history.initial_onlstm_digest,
        )
    )
    scheduler.on_epoch_end(0, val_loss)
    stopper.should_stop(val_loss)
    best_loss, best_state = val_loss, copy.deepcopy(clf.state_tensors())

    for epoch in range(1, cfg.max_epochs + 1):
        lr = scheduler.lr
        dropout_rng = streams.stream("dropout", level, epoch)
        total = 0.0
        for idx in make_batches(len(train_batch), cfg.batch_size, streams.stream("shuffle", level, epoch)):
            clf.zero_grad()
            total += clf.loss_and_grads(train_batch.take(idx), dropout_rng)
            adam_step(params, adam, lr)
        train_loss = total / len(train_batch)

        val_loss, val_acc = evaluate_level(clf, val_batch, cfg.batch_size)
        history.records.append(
            EpochRecord(level=level, epoch=epoch, lr=lr, train_loss=train_loss, val_loss=val_loss, val_acc=val_acc)
        )
        logger.info(
            "Epoch complete",
            extra={
                "level": level, "epoch": epoch, "lr": lr, "train_loss": round(train_loss, 6),
                "val_loss": round(val_loss, 6), "val_acc": round(val_acc, 4),
            },
        )

        if val_loss < best_loss:
            best_loss, best_state = val_loss, copy.deepcopy(clf.state_tensors())
            history.best_epoch = epoch
        scheduler.on_epoch_end(epoch, val_loss)
        if stopper.should_stop(val_loss):
            logger.info("Early stopping", extra={"level": level, "epoch": epoch, "best_epoch": history.best_epoch})
            break

    clf.load_state_tensors(best_state)
    history.final_onlstm_digest = clf.onlstm.digest()
    best = history.records[history.best_epoch]
    history.records[history.best_epoch] = best.model_copy(update={"onlstm_digest": history.final_onlstm_digest})
    return clf, history


def train_hierarchy(
    train_docs: Sequence[Document],
    val_docs: Sequence[Document],
    tax: Taxonomy,
    embeddings: EmbeddingMatrix,
    cfg: TrainConfig,
    streams: Optional[SeedStreams] = None,
) -> HierarchicalModel:
    """
    Train levels 1..L in order, handing each level's ONLSTM to the next
    when fine-tuning is enabled.
    """
    streams = streams or SeedStreams(cfg.seed)
    classifiers: List[LevelClassifier] = []
    histories: List[TrainHistory] = []
    carried: Optional[ONLSTMParams] = None

    for level in range(1, tax.level_count + 1):
        logger.info(
            "Training level",
            extra={
                "level": level, "classes": len(categories_at(tax, level)),
                "fine_tuning": carried is not None, "joint_embedding": cfg.use_joint_embedding,
            },
        )
        clf, history = train_level(level, train_docs, val_docs, tax, embeddings, carried, cfg, streams)
        classifiers.append(clf)
        histories.append(history)
        carried = transfer_parameters(clf) if cfg.use_fine_tuning else None

    return HierarchicalModel(
        taxonomy=tax, embeddings=embeddings, classifiers=classifiers, config=cfg, histories=histories
    )


def predict_paths(model: HierarchicalModel, docs: Sequence[Document], batch_size: int = 64) -> List[PathPrediction]:
    """
    Free-running prediction: each level after the first is composed with
    the label the previous level predicted, not the true one.
    """
    if not docs:
        return []
    tax, cfg = model.taxonomy, model.config
    paths: List[List[str]] = [[] for _ in docs]
    probabilities: List[List[np.ndarray]] = [[] for _ in docs]
    parents: Optional[List[str]] = None

    for clf in model.classifiers:
        batch = encode_level(
            docs, clf.level, tax, model.embeddings, cfg.max_len,
            parent_ids=parents, joint_embedding=cfg.use_joint_embedding, with_targets=False,
        )
        for start in range(0, len(batch), batch_size):
            rows = range(start, min(start + batch_size, len(batch)))
            predicted, probs = clf.predict(batch.take(rows))
            for offset, row in enumerate(rows):
                paths[row].append(clf.class_ids[predicted[offset]])
                probabilities[row].append(probs[offset])
        parents = [p[-1] for p in paths]

    return [
        PathPrediction(doc_id=doc.doc_id, path=tuple(path), probabilities=probs)
        for doc, path, probs in zip(docs, paths, probabilities)
    ]


def predict_path(model: HierarchicalModel, doc: Document) -> PathPrediction:
    return predict_paths(model, [doc])[0]


def history_records(histories: Sequence[TrainHistory]) -> List[Dict]:
    return [r.model_dump() for h in histories for r in h.records]
