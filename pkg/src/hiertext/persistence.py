"""
Deterministic on-disk form of trained hierarchical models plus the
metrics log, evaluation report and run manifest writers.

A model bundle is a plain-text header of versioned key=value metadata
followed by length-prefixed little-endian tensor blocks, each carrying its
name, shape, element width and a SHA-256 checksum.
"""
import hashlib
import json
import logging
import os
import struct
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from .classifier import LevelClassifier
from .corpus import EmbeddingDimensionError, EmbeddingMatrix, Vocabulary, load_embeddings
from .onlstm import ONLSTMParams
from .schemas import EvalReport, RunManifest, TaxonomyRecord, TrainConfig
from .taxonomy import categories_at, taxonomy_from_records
from .trainer import HierarchicalModel, TrainHistory, history_records

logger = logging.getLogger(__name__)

MAGIC = "HIERTEXT-BUNDLE"
FORMAT_VERSION = 1
END_HEADER = b"END-HEADER\n"
BLOCK_MAGIC = b"TNSR"
ELEMENT_WIDTH = 8


class BundleError(ValueError):
    """
    Raised when a model bundle is malformed or truncated.
    """


class BundleVersionError(BundleError):
    """Bundle written by an incompatible format version."""


class ChecksumError(BundleError):
    """A tensor block's SHA-256 does not match its contents."""


class FingerprintError(BundleError):
    """
    The embeddings supplied at load time differ from the ones the model was
    trained with.
    """


def _canonical(value) -> str:
    return json.dumps(value, sort_keys=True, separators=(",", ":"))


def file_sha256(path: str) -> str:
    """
    Hex SHA-256 of a file's bytes, read in 1 MiB chunks.
    """
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def embedding_fingerprint(embeddings: EmbeddingMatrix) -> Dict[str, object]:
    """
    Identify an embedding matrix by the SHA-256 of its little-endian float64
    bytes plus its shape.

    Returns:
        {"sha256": str, "rows": int, "dim": int}
    """
    data = np.ascontiguousarray(embeddings.vectors, dtype="<f8").tobytes()
    rows, dim = embeddings.vectors.shape
    return {"sha256": hashlib.sha256(data).hexdigest(), "rows": rows, "dim": dim}


def _encode_block(name: str, value: np.ndarray) -> bytes:
    name_bytes = name.encode("utf-8")
    shape = struct.pack(f"<B{value.ndim}Q", value.ndim, *value.shape)
    payload = np.ascontiguousarray(value, dtype="<f8").tobytes()
    digest = hashlib.sha256(name_bytes + shape + payload).digest()
    return b"".join([
        BLOCK_MAGIC,
        struct.pack("<H", len(name_bytes)), name_bytes,
        b"f", struct.pack("<B", ELEMENT_WIDTH),
        shape,
        struct.pack("<Q", len(payload)), payload,
        digest,
    ])


def _read(data: bytes, offset: int, size: int) -> Tuple[bytes, int]:
    if offset + size > len(data):
        raise BundleError("bundle file is truncated")
    return data[offset : offset + size], offset + size


def _decode_block(data: bytes, offset: int) -> Tuple[str, np.ndarray, int]:
    magic, offset = _read(data, offset, 4)
    if magic != BLOCK_MAGIC:
        raise BundleError(f"bad tensor block marker at byte {offset - 4}")
    raw, offset = _read(data, offset, 2)
    name_bytes, offset = _read(data, offset, struct.unpack("<H", raw)[0])
    kind, offset = _read(data, offset, 1)
    raw, offset = _read(data, offset, 1)
    width = struct.unpack("<B", raw)[0]
    if kind != b"f" or width != ELEMENT_WIDTH:
        raise BundleError(f"unsupported element type {kind!r} width {width}")
    raw_ndim, offset = _read(data, offset, 1)
    ndim = struct.unpack("<B", raw_ndim)[0]
    raw_dims, offset = _read(data, offset, 8 * ndim)
    shape = struct.unpack(f"<{ndim}Q", raw_dims)
    raw, offset = _read(data, offset, 8)
    length = struct.unpack("<Q", raw)[0]
    if length != int(np.prod(shape, dtype=np.int64)) * width:
        raise BundleError(f"tensor {name_bytes!r} payload does not match shape {shape}")
    payload, offset = _read(data, offset, length)
    digest, offset = _read(data, offset, 32)
    if hashlib.sha256(name_bytes + raw_ndim + raw_dims + payload).digest() != digest:
        raise ChecksumError(f"checksum mismatch in tensor {name_bytes.decode('utf-8', 'replace')!r}")
    value = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    return name_bytes.decode("utf-8"), value, offset


def save_model(model: HierarchicalModel, path: str) -> None:
    """
    Write a model bundle. Saving the same model twice yields identical bytes.

    Layout: a text header of sorted key=canonical-JSON lines ending in
    END-HEADER, then one checksummed block per tensor, named
    level<j>/<tensor> and ordered by level, then name.
    """
    tensors: List[Tuple[str, np.ndarray]] = []
    levels = []
    for clf in model.classifiers:
        levels.append({
            "level": clf.level,
            "class_ids": clf.class_ids,
            "hidden_size": clf.onlstm.hidden_size,
            "mlp_units": clf.mlp_units,
            "input_dropout": clf.input_dropout,
            "hidden_dropout": clf.hidden_dropout,
            "bn_momentum": clf.bn_momentum,
            "bn_eps": clf.bn_eps,
        })
        for name, value in sorted(clf.state_tensors().items()):
            tensors.append((f"level{clf.level}/{name}", value))

    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.model_dump(),
        "embedding": embedding_fingerprint(model.embeddings),
        "taxonomy": [r.model_dump() for r in model.taxonomy.export_records()],
        "vocabulary": model.embeddings.vocabulary.tokens,
        "levels": levels,
        "tensor_count": len(tensors),
    }
    lines = [MAGIC] + [f"{key}={_canonical(header[key])}" for key in sorted(header)]

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("utf-8"))
        f.write(END_HEADER)
        for name, value in tensors:
            f.write(_encode_block(name, value))
    logger.info("Saved model bundle", extra={"path": str(path), "tensors": len(tensors)})


def _parse_header(data: bytes) -> Tuple[Dict[str, object], int]:
    end = data.find(b"\n" + END_HEADER)
    if end < 0:
        raise BundleError("bundle header is truncated")
    lines = data[:end].decode("utf-8").split("\n")
    if lines[0] != MAGIC:
        raise BundleError("not a model bundle")
    header = {}
    for line in lines[1:]:
        key, _, value = line.partition("=")
        header[key] = json.loads(value)
    if header.get("format_version") != FORMAT_VERSION:
        raise BundleVersionError(
            f"bundle format version {header.get('format_version')}, expected {FORMAT_VERSION}"
        )
    return header, end + 1 + len(END_HEADER)


def load_model(path: str, embedding_source: Union[str, EmbeddingMatrix]) -> HierarchicalModel:
    """
    Read a bundle and re-attach the frozen embeddings, which must match
    the recorded fingerprint.

    Args:
        path:
            Bundle written by save_model.
        embedding_source:
            Either an EmbeddingMatrix or a GloVe-format file, which is
            loaded against the bundle's vocabulary.

    Raises:
        FileNotFoundError: if the bundle does not exist.
        BundleVersionError: on an unsupported format version.
        ChecksumError: if any tensor block fails its digest.
        FingerprintError: if the embeddings do not match.
        BundleError: on truncation, trailing bytes or missing tensors.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Model bundle not found: {path}")
    with open(path, "rb") as f:
        data = f.read()

    header, offset = _parse_header(data)
    vocab = Vocabulary(header["vocabulary"][2:])
    expected = header["embedding"]

    if isinstance(embedding_source, EmbeddingMatrix):
        embeddings = embedding_source
    else:
        try:
            embeddings = load_embeddings(embedding_source, vocab, expected["dim"])
        except EmbeddingDimensionError as exc:
            raise FingerprintError(f"embedding file does not match the bundle: {exc}") from exc
    if embedding_fingerprint(embeddings) != expected:
        raise FingerprintError("embedding fingerprint does not match the bundle")

    tensors: Dict[str, np.ndarray] = {}
    for _ in range(header["tensor_count"]):
        name, value, offset = _decode_block(data, offset)
        tensors[name] = value
    if offset != len(data):
        raise BundleError("trailing bytes after the last tensor block")

    tax = taxonomy_from_records(TaxonomyRecord.model_validate(r) for r in header["taxonomy"])
    config = TrainConfig.model_validate(header["config"])
    classifiers = []
    for meta in header["levels"]:
        level = meta["level"]
        if meta["class_ids"] != categories_at(tax, level):
            raise BundleError(f"level {level} class ids do not match the taxonomy")
        prefix = f"level{level}/"
        own = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
        try:
            clf = LevelClassifier(
                level=level,
                embeddings=embeddings,
                class_ids=meta["class_ids"],
                onlstm_params=ONLSTMParams.from_tensors(own),
                mlp_units=meta["mlp_units"],
                input_dropout=meta["input_dropout"],
                hidden_dropout=meta["hidden_dropout"],
                bn_momentum=meta["bn_momentum"],
                bn_eps=meta["bn_eps"],
            )
            clf.load_state_tensors(own)
        except KeyError as exc:
            raise BundleError(f"level {level} is missing tensor {exc}") from exc
        except ValueError as exc:
            raise BundleError(f"level {level}: {exc}") from exc
        classifiers.append(clf)

    logger.info("Loaded model bundle", extra={"path": str(path), "levels": len(classifiers)})
    return HierarchicalModel(taxonomy=tax, embeddings=embeddings, classifiers=classifiers, config=config)


def write_metrics_log(path: str, histories: Sequence[TrainHistory]) -> None:
    """
    Write one JSON line per (level, epoch), epoch 0 first for each level.
    """
    with open(path, "w", encoding="utf-8") as f:
        for record in history_records(histories):
            f.write(_canonical(record) + "\n")


def write_eval_report(path: str, report: EvalReport) -> None:
    """
    Write the report as a single canonical JSON line.
    """
    with open(path, "w", encoding="utf-8") as f:
        f.write(_canonical(report.model_dump()) + "\n")


def read_eval_report(path: str) -> EvalReport:
    with open(path, "r", encoding="utf-8") as f:
        return EvalReport.model_validate_json(f.readline())


def write_run_manifest(path: str, manifest: RunManifest) -> None:
    """
    Write the manifest as indented, key-sorted JSON.
    """
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(manifest.model_dump(), sort_keys=True, indent=2) + "\n")
