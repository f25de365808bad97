"""
Command-line entry points: train, evaluate, predict, gen-synth and
count-params.

Exit codes: 0 success, 1 runtime failure (the message names the failing
stage), 2 usage or configuration error.
"""
import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from typing import Dict, List, Optional, Sequence

from dotenv import load_dotenv

from .classifier import count_level_params
from .config import ConfigError, resolve_config
from .corpus import (
    Document,
    build_vocabulary,
    detect_embedding_dim,
    generate_synthetic_corpus,
    load_embeddings,
    read_corpus,
    split_documents,
    write_corpus,
    write_embeddings,
)
from .metrics import evaluate
from .numeric import SeedStreams
from .persistence import (
    file_sha256,
    load_model,
    save_model,
    write_eval_report,
    write_metrics_log,
    write_run_manifest,
)
from .schemas import PredictInput, PredictionRecord, RunManifest
from .taxonomy import read_taxonomy, validate_path, write_taxonomy
from .trainer import predict_paths, train_hierarchy

load_dotenv()

logger = logging.getLogger("hiertext")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class StageError(RuntimeError):
    """
    A pipeline stage (load, train, save, evaluate, predict, generate)
    failed; `cause` holds the original exception.
    """

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def stage(name: str):
    """
    Wrap one pipeline stage so any failure surfaces as a StageError naming
    it. Missing input files and config errors pass through untouched; the
    caller reports them as usage errors.
    """
    try:
        yield
    except (ConfigError, StageError):
        raise
    except FileNotFoundError:
        logger.error("Input file missing", extra={"stage": name})
        raise
    except Exception as exc:
        logger.exception("Stage failed", extra={"stage": name})
        raise StageError(name, exc) from exc


def _int_list(value: str) -> List[int]:
    try:
        return [int(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}")


def _add_train_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--initial-lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--hidden-size", type=int)
    p.add_argument("--mlp-units", type=int)
    p.add_argument("--val-fraction", type=float)


def build_parser() -> argparse.ArgumentParser:
    """
    Build the argument parser with one subcommand per pipeline entry point.

    Training hyperparameter flags default to None so that, when omitted,
    the config file or TrainConfig defaults apply.
    """
    parser = argparse.ArgumentParser(
        prog="hiertext",
        description="Hierarchical text classification with per-level ONLSTM classifiers",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a hierarchical model")
    train.add_argument("--taxonomy", required=True)
    train.add_argument("--corpus", required=True)
    train.add_argument("--embeddings", required=True)
    train.add_argument("--embedding-dim", type=int)
    train.add_argument("--out", required=True, help="model bundle path")
    train.add_argument("--no-fine-tuning", action="store_true")
    train.add_argument("--no-joint-embedding", action="store_true")
    _add_train_overrides(train)

    ev = sub.add_parser("evaluate", help="evaluate a trained model")
    ev.add_argument("--model", required=True)
    ev.add_argument("--embeddings", required=True)
    ev.add_argument("--corpus", required=True)
    ev.add_argument("--out-dir", default=".")
    ev.add_argument("--config")
    ev.add_argument("--average", choices=["macro", "micro"])
    ev.add_argument("--rloss-semantics", choices=["as_printed", "prose"])

    pr = sub.add_parser("predict", help="predict label paths for raw documents")
    pr.add_argument("--model", required=True)
    pr.add_argument("--embeddings", required=True)
    pr.add_argument("--input", required=True, help='JSON lines of {"id", "text"}')

    gen = sub.add_parser("gen-synth", help="write a synthetic taxonomy, corpus and embeddings")
    gen.add_argument("--out-dir", required=True)
    gen.add_argument("--branching", type=_int_list, default=[3, 3])
    gen.add_argument("--docs-per-leaf", type=int, default=50)
    gen.add_argument("--signal-tokens", type=int, default=5)
    gen.add_argument("--noise-vocab", type=int, default=50)
    gen.add_argument("--doc-len", type=int, default=20)
    gen.add_argument("--dim", type=int, default=16)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--shared-child-signals", action="store_true")

    cp = sub.add_parser("count-params", help="per-level trainable parameter counts")
    source = cp.add_mutually_exclusive_group(required=True)
    source.add_argument("--taxonomy")
    source.add_argument("--level-classes", type=_int_list)
    cp.add_argument("--embedding-dim", type=int, default=300)
    cp.add_argument("--hidden-size", type=int)
    cp.add_argument("--mlp-units", type=int)
    cp.add_argument("--config")
    return parser


def cmd_train(args: argparse.Namespace) -> int:
    """
    Train one classifier per taxonomy level and write the run artifacts.

    Writes, next to the bundle named by `--out`:
    - the model bundle itself
    - metrics.jsonl, one record per level and epoch
    - run_manifest.json with the resolved config, seed, ablations and
      SHA-256 of every input file

    Returns:
        EXIT_OK on success. Failures surface as StageError or usage errors.
    """
    overrides = {
        "seed": args.seed, "initial_lr": args.initial_lr, "batch_size": args.batch_size,
        "max_epochs": args.max_epochs, "max_len": args.max_len, "hidden_size": args.hidden_size,
        "mlp_units": args.mlp_units, "val_fraction": args.val_fraction,
        "use_fine_tuning": False if args.no_fine_tuning else None,
        "use_joint_embedding": False if args.no_joint_embedding else None,
    }
    cfg = resolve_config(args.config, overrides).train

    with stage("load"):
        tax = read_taxonomy(args.taxonomy)
        docs = read_corpus(args.corpus, tax)
        dim = args.embedding_dim or detect_embedding_dim(args.embeddings)
        vocab = build_vocabulary(docs, tax, cfg.min_count)
        embeddings = load_embeddings(args.embeddings, vocab, dim)

    with stage("train"):
        train_docs, val_docs = split_documents(docs, cfg.val_fraction, cfg.seed)
        model = train_hierarchy(train_docs, val_docs, tax, embeddings, cfg, SeedStreams(cfg.seed))

    with stage("save"):
        out_dir = os.path.dirname(os.path.abspath(args.out))
        metrics_path = os.path.join(out_dir, "metrics.jsonl")
        manifest_path = os.path.join(out_dir, "run_manifest.json")
        save_model(model, args.out)
        write_metrics_log(metrics_path, model.histories)

        inputs = {"taxonomy": args.taxonomy, "corpus": args.corpus, "embeddings": args.embeddings}
        if args.config:
            inputs["config"] = args.config
        manifest = RunManifest(
            command="train",
            seed=cfg.seed,
            config=cfg.model_dump(),
            ablations={"no_fine_tuning": not cfg.use_fine_tuning, "no_joint_embedding": not cfg.use_joint_embedding},
            input_hashes={name: file_sha256(path) for name, path in inputs.items()},
            outputs={"model": args.out, "metrics": metrics_path},
        )
        write_run_manifest(manifest_path, manifest)

    logger.info("Training run complete", extra={"model": args.out, "levels": len(model.classifiers)})
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    """
    Evaluate a saved model on a labelled corpus.

    Documents marked split=test are used when any exist, otherwise the whole
    corpus. The report is written to <out-dir>/eval_report.jsonl and printed
    as a table.
    """
    resolved = resolve_config(
        args.config, {"average": args.average, "rloss_semantics": args.rloss_semantics}
    )

    with stage("load"):
        model = load_model(args.model, args.embeddings)
        docs = read_corpus(args.corpus, model.taxonomy)
        test_docs = [d for d in docs if d.split == "test"] or docs

    with stage("evaluate"):
        report = evaluate(model, test_docs, resolved.average, resolved.rloss_semantics)
        os.makedirs(args.out_dir, exist_ok=True)
        write_eval_report(os.path.join(args.out_dir, "eval_report.jsonl"), report)

    print(report.to_table())
    return EXIT_OK


def read_predict_inputs(path: str) -> List[Document]:
    """
    Read JSON-lines {"id", "text"} records for prediction.

    Extra fields such as a gold path are ignored. Blank lines are skipped.

    Raises:
        FileNotFoundError: if `path` does not exist.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Input file not found: {path}")
    docs = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                record = PredictInput.model_validate_json(line)
                docs.append(Document.from_text(record.id, record.text))
    return docs


def cmd_predict(args: argparse.Namespace) -> int:
    """
    Predict a label path for every input document and print one
    PredictionRecord JSON line each, flagging paths that are not
    taxonomy edges all the way down.
    """
    with stage("load"):
        model = load_model(args.model, args.embeddings)
        docs = read_predict_inputs(args.input)

    with stage("predict"):
        records = [
            PredictionRecord(
                id=p.doc_id,
                path=list(p.path),
                top_probabilities=p.top_probabilities,
                edge_consistent=validate_path(model.taxonomy, p.path),
            )
            for p in predict_paths(model, docs)
        ]

    for record in records:
        print(json.dumps(record.model_dump()))
    logger.info("Predicted paths", extra={"documents": len(records)})
    return EXIT_OK


def cmd_gen_synth(args: argparse.Namespace) -> int:
    """
    Write a synthetic taxonomy, corpus and embedding file to `--out-dir`.
    """
    with stage("generate"):
        tax, docs, embeddings = generate_synthetic_corpus(
            branching=args.branching,
            docs_per_leaf=args.docs_per_leaf,
            signal_tokens_per_class=args.signal_tokens,
            noise_vocab=args.noise_vocab,
            doc_len=args.doc_len,
            seed=args.seed,
            shared_child_signals=args.shared_child_signals,
            dim=args.dim,
        )
        os.makedirs(args.out_dir, exist_ok=True)
        write_taxonomy(os.path.join(args.out_dir, "taxonomy.jsonl"), tax)
        write_corpus(os.path.join(args.out_dir, "corpus.jsonl"), docs)
        write_embeddings(os.path.join(args.out_dir, "embeddings.txt"), embeddings)
    logger.info("Wrote synthetic fixture set", extra={"out_dir": args.out_dir, "documents": len(docs)})
    return EXIT_OK


def parameter_table(level_classes: Sequence[int], d: int, cfg) -> List[Dict[str, int]]:
    """
    Per-level parameter breakdown (onlstm, batch_norm, mlp, total) for the
    given class counts, honouring per-level size overrides in `cfg`.
    """
    rows = []
    for level, classes in enumerate(level_classes, start=1):
        counts = count_level_params(d, cfg.hidden_size_for(level), cfg.mlp_units_for(level), classes)
        rows.append({"level": level, "classes": classes, **counts})
    return rows


def cmd_count_params(args: argparse.Namespace) -> int:
    """
    Print the trainable parameter table, with class counts taken from a
    taxonomy file or given directly via --level-classes.
    """
    cfg = resolve_config(
        args.config, {"hidden_size": args.hidden_size, "mlp_units": args.mlp_units}
    ).train
    with stage("load"):
        level_classes = read_taxonomy(args.taxonomy).level_sizes() if args.taxonomy else args.level_classes

    rows = parameter_table(level_classes, args.embedding_dim, cfg)
    header = ["level", "classes", "onlstm", "batch_norm", "mlp", "total"]
    print("  ".join(f"{h:>12}" for h in header))
    for row in rows:
        print("  ".join(f"{row[h]:>12}" for h in header))
    print(f"{'all levels':>12}  {sum(r['total'] for r in rows):>12}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "gen-synth": cmd_gen_synth,
    "count-params": cmd_count_params,
}


def configure_logging() -> None:
    """
    Configure root logging on stderr; the level comes from
    HIERTEXT_LOG_LEVEL (default INFO).
    """
    logging.basicConfig(
        level=os.getenv("HIERTEXT_LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s | %(levelname)s | %(name)s | %(message)s",
        stream=sys.stderr,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse `argv`, run the selected subcommand and map failures to exit codes.

    Returns:
        EXIT_OK (0), EXIT_RUNTIME (1) for a failed stage, or EXIT_USAGE (2)
        for bad arguments, configuration errors and missing input files.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE

    configure_logging()
    try:
        return COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        print(f"hiertext: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"hiertext: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"hiertext: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        # pydantic validation of the merged config
        print(f"hiertext: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
