"""
Tests for model bundles and run artifacts: canonical serialization,
bit-exact round trips, checksum, version and fingerprint errors, and the
metrics log, evaluation report and run manifest writers.
"""
import json

import numpy as np
import pytest

from hiertext.corpus import EmbeddingMatrix, generate_synthetic_corpus, split_documents, write_embeddings
from hiertext.metrics import evaluate
from hiertext.persistence import (
    BundleError,
    BundleVersionError,
    ChecksumError,
    FingerprintError,
    embedding_fingerprint,
    file_sha256,
    load_model,
    read_eval_report,
    save_model,
    write_eval_report,
    write_metrics_log,
    write_run_manifest,
)
from hiertext.schemas import RunManifest, TrainConfig
from hiertext.trainer import predict_paths, train_hierarchy


@pytest.fixture(scope="module")
def trained():
    """
    A briefly trained [2, 2] model, its embeddings and held-out documents.
    """

    tax, docs, emb = generate_synthetic_corpus(
        branching=[2, 2], docs_per_leaf=6, signal_tokens_per_class=3,
        noise_vocab=8, doc_len=10, seed=9, dim=6,
    )
    cfg = TrainConfig(hidden_size=6, mlp_units=5, batch_size=6, max_epochs=2, seed=9)
    train, val = split_documents(docs, 0.25, seed=9)
    return train_hierarchy(train, val, tax, emb, cfg), val


@pytest.fixture
def bundle(tmp_path, trained):
    model, _ = trained
    path = tmp_path / "model.bundle"
    save_model(model, str(path))
    return path


def test_save_is_canonical(tmp_path, trained, bundle):
    """
    Saving the same model twice produces identical bytes with the format
    marker first.
    """
    model, _ = trained
    again = tmp_path / "again.bundle"

    save_model(model, str(again))

    assert bundle.read_bytes() == again.read_bytes()
    assert bundle.read_bytes().startswith(b"HIERTEXT-BUNDLE\n")


def test_round_trip_is_bit_exact(trained, bundle):
    """
    Expected behavior:
    - Every tensor of every level is bit-identical after loading
    - Free-running predictions and probability rows match bitwise
    - The evaluation report is identical
    """

    model, docs = trained

    loaded = load_model(str(bundle), model.embeddings)

    assert loaded.config == model.config
    assert loaded.taxonomy == model.taxonomy
    for a, b in zip(model.classifiers, loaded.classifiers):
        assert a.class_ids == b.class_ids
        for name, value in a.state_tensors().items():
            np.testing.assert_array_equal(b.state_tensors()[name], value)

    for p, q in zip(predict_paths(model, docs), predict_paths(loaded, docs)):
        assert p.path == q.path
        for row_p, row_q in zip(p.probabilities, q.probabilities):
            np.testing.assert_array_equal(row_p, row_q)
    assert evaluate(model, docs) == evaluate(loaded, docs)


def test_load_from_embedding_file(tmp_path, trained, bundle):
    """
    Embeddings can be re-supplied as a GloVe file instead of a matrix.
    """
    model, _ = trained
    vectors = tmp_path / "vectors.txt"
    write_embeddings(str(vectors), model.embeddings)

    loaded = load_model(str(bundle), str(vectors))

    np.testing.assert_array_equal(loaded.embeddings.vectors, model.embeddings.vectors)


def test_tampered_tensor_byte_fails_checksum(trained, bundle):
    """
    Flipping one payload byte is caught by that block's digest.
    """
    model, _ = trained
    data = bytearray(bundle.read_bytes())
    # last payload byte of the last tensor block, just before its digest
    data[-33] ^= 0xFF
    bundle.write_bytes(bytes(data))

    with pytest.raises(ChecksumError):
        load_model(str(bundle), model.embeddings)


def test_truncated_bundle(trained, bundle):
    """
    A bundle cut short is a BundleError.
    """
    model, _ = trained
    bundle.write_bytes(bundle.read_bytes()[:-10])

    with pytest.raises(BundleError):
        load_model(str(bundle), model.embeddings)


def test_version_mismatch(trained, bundle):
    """
    An unknown format version is refused.
    """
    model, _ = trained
    bundle.write_bytes(bundle.read_bytes().replace(b"format_version=1\n", b"format_version=2\n", 1))

    with pytest.raises(BundleVersionError):
        load_model(str(bundle), model.embeddings)


def test_wrong_embeddings_fail_fingerprint(tmp_path, trained, bundle):
    """
    Expected behavior:
    - Same shape but different values is a fingerprint error
    - A file of a different dimension is a fingerprint error too
    """

    model, _ = trained
    shifted = model.embeddings.vectors.copy()
    shifted[2:] += 1.0
    other = EmbeddingMatrix(vocabulary=model.embeddings.vocabulary, vectors=shifted)
    with pytest.raises(FingerprintError):
        load_model(str(bundle), other)

    wrong_dim = tmp_path / "wrong.txt"
    wrong_dim.write_text("label-root 1.0 2.0\n", encoding="utf-8")
    with pytest.raises(FingerprintError):
        load_model(str(bundle), str(wrong_dim))


def test_missing_bundle(tmp_path, trained):
    model, _ = trained
    with pytest.raises(FileNotFoundError):
        load_model(str(tmp_path / "absent.bundle"), model.embeddings)


def test_embedding_fingerprint_fields(trained):
    """
    The fingerprint records the matrix shape and a hex SHA-256.
    """
    model, _ = trained

    fp = embedding_fingerprint(model.embeddings)

    assert fp["rows"] == len(model.embeddings.vocabulary)
    assert fp["dim"] == 6
    assert len(fp["sha256"]) == 64


def test_metrics_log_and_eval_report(tmp_path, trained):
    """
    Expected behavior:
    - The metrics log holds one line per recorded epoch, level 1 epoch 0 first
    - An eval report reads back equal to what was written
    """

    model, docs = trained
    log = tmp_path / "metrics.jsonl"
    report_path = tmp_path / "eval_report.jsonl"

    write_metrics_log(str(log), model.histories)
    report = evaluate(model, docs)
    write_eval_report(str(report_path), report)

    lines = [json.loads(line) for line in log.read_text(encoding="utf-8").splitlines()]
    assert len(lines) == sum(len(h.records) for h in model.histories)
    assert lines[0]["level"] == 1 and lines[0]["epoch"] == 0
    assert read_eval_report(str(report_path)) == report


def test_run_manifest(tmp_path):
    """
    The manifest is written as JSON with the inputs' SHA-256 and refuses a
    seed that disagrees with its config.
    """
    source = tmp_path / "input.txt"
    source.write_text("abc", encoding="utf-8")
    manifest = RunManifest(
        command="train",
        seed=3,
        config=TrainConfig(seed=3).model_dump(),
        ablations={"no_fine_tuning": True, "no_joint_embedding": False},
        input_hashes={"corpus": file_sha256(str(source))},
    )
    path = tmp_path / "run_manifest.json"

    write_run_manifest(str(path), manifest)

    data = json.loads(path.read_text(encoding="utf-8"))
    assert data["seed"] == 3
    assert data["input_hashes"]["corpus"] == (
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    )
    with pytest.raises(ValueError):
        RunManifest(command="train", seed=1, config={"seed": 2}, ablations={}, input_hashes={})
