"""
Tests for level-by-level training: the plateau scheduler and early
stopping, mini-batching, ONLSTM parameter transfer between levels, the
joint-embedding ablation, learning-rate schedule conformance, synthetic
overfitting and seeded determinism.
"""
import numpy as np
import pytest

from hiertext import trainer
from hiertext.corpus import generate_synthetic_corpus, split_documents
from hiertext.metrics import free_running_level_accuracy, level_accuracy, overall_accuracy
from hiertext.numeric import SeedStreams
from hiertext.schemas import TrainConfig
from hiertext.taxonomy import validate_path
from hiertext.trainer import (
    EarlyStopping,
    PlateauScheduler,
    build_classifier,
    encode_level,
    evaluate_level,
    make_batches,
    predict_paths,
    train_hierarchy,
    train_level,
)


@pytest.fixture(scope="module")
def small_corpus():
    """
    A two-level [2, 2] synthetic hierarchy with 8-dimensional embeddings.

    Purpose:
    - Cheap enough to train several times per test
    - Used for transfer, schedule and determinism checks
    """

    tax, docs, emb = generate_synthetic_corpus(
        branching=[2, 2], docs_per_leaf=8, signal_tokens_per_class=3,
        noise_vocab=10, doc_len=10, seed=3, dim=8,
    )
    train, val = split_documents(docs, 0.25, seed=3)
    return tax, train, val, emb


def _small_config(**overrides):
    values = dict(hidden_size=8, mlp_units=8, batch_size=8, max_epochs=3, seed=11)
    values.update(overrides)
    return TrainConfig(**values)


@pytest.fixture(scope="module")
def overfit_model():
    """
    Trains the [3, 3] synthetic hierarchy once (d=16, n=32, u=16, seed 7,
    at most 50 epochs) and returns the model with the documents it saw.
    """

    tax, docs, emb = generate_synthetic_corpus(
        branching=[3, 3], docs_per_leaf=50, signal_tokens_per_class=5,
        noise_vocab=50, doc_len=20, seed=7, dim=16,
    )
    cfg = TrainConfig(
        hidden_size=32, mlp_units=16, max_epochs=50, seed=7,
        batch_size=16, initial_lr=2e-3,
    )
    train, val = split_documents(docs, cfg.val_fraction, cfg.seed)
    model = train_hierarchy(train, val, tax, emb, cfg)
    return model, train


def test_plateau_scheduler_decays_after_patience():
    """
    Expected behavior:
    - Improvement resets the wait counter
    - After `patience` epochs without improvement the LR is divided by
      the factor, and never drops below the floor
    """

    sched = PlateauScheduler(1e-3, 10.0, 2, min_lr=1e-4)

    assert sched.on_epoch_end(0, 1.0) is True
    assert sched.on_epoch_end(1, 1.0) is False
    assert sched.lr == 1e-3
    sched.on_epoch_end(2, 1.0)
    assert sched.lr == 1e-4
    for epoch in range(3, 8):
        sched.on_epoch_end(epoch, 2.0)
    assert sched.lr == 1e-4
    assert sched.on_epoch_end(8, 0.5) is True


def test_early_stopping_patience():
    stopper = EarlyStopping(3)

    assert stopper.should_stop(1.0) is False
    assert [stopper.should_stop(1.0) for _ in range(3)] == [False, False, True]


def test_make_batches_merges_singleton_tail():
    """
    Nine examples in batches of four become [4, 5], never a batch of one.
    """
    rng = np.random.default_rng(0)

    batches = make_batches(9, 4, rng)

    assert [len(b) for b in batches] == [4, 5]
    assert sorted(np.concatenate(batches).tolist()) == list(range(9))


def test_level_inputs_with_and_without_joint_embedding(small_corpus):
    """
    With joint embedding the level-2 input starts with the parent label
    token; without it the bare text is used. Targets are the same.
    """
    tax, train, _, emb = small_corpus

    joint = encode_level(train[:3], 2, tax, emb, 64, joint_embedding=True)
    bare = encode_level(train[:3], 2, tax, emb, 64, joint_embedding=False)

    label_token = emb.vocabulary.lookup(tax.label_of(train[0].path[0]))
    assert joint.tokens[0, 0] == label_token
    assert bare.tokens[0, 0] != label_token
    assert joint.targets.tolist() == bare.targets.tolist()


def test_epoch_zero_record_and_best_restore(small_corpus):
    """
    Expected behavior:
    - The first metrics record is epoch 0 with no training loss
    - The restored parameters reproduce the best recorded validation loss
    """

    tax, train, val, emb = small_corpus
    cfg = _small_config()

    clf, history = train_level(1, train, val, tax, emb, None, cfg)

    assert history.records[0].epoch == 0
    assert history.records[0].train_loss is None
    assert all(r.train_loss is not None for r in history.records[1:])
    val_batch = encode_level(val, 1, tax, emb, cfg.max_len)
    loss, _ = evaluate_level(clf, val_batch, cfg.batch_size)
    assert loss == pytest.approx(history.best_val_loss, abs=1e-12)
    assert history.records[history.epochs_to_best].val_loss == history.best_val_loss


def test_fine_tuning_transfers_onlstm_exactly(small_corpus):
    """
    With fine-tuning, level 2 starts from bit-identical copies of level 1's
    restored ONLSTM tensors; without it, level 2 starts fresh.
    """

    tax, train, val, emb = small_corpus

    tuned = train_hierarchy(train, val, tax, emb, _small_config(use_fine_tuning=True))
    cold = train_hierarchy(train, val, tax, emb, _small_config(use_fine_tuning=False))

    level1, level2 = tuned.histories
    assert level2.initial_onlstm_digest == level1.final_onlstm_digest
    assert level2.records[0].onlstm_digest == level1.records[level1.best_epoch].onlstm_digest
    assert tuned.classifiers[1].onlstm is not tuned.classifiers[0].onlstm
    assert cold.histories[1].initial_onlstm_digest != cold.histories[0].final_onlstm_digest


def test_transfer_rejects_shape_mismatch(small_corpus):
    """
    An ONLSTM cannot be carried into a level with a different hidden size.
    """
    tax, train, val, emb = small_corpus
    cfg = _small_config(level_hidden_sizes=[8, 6])

    with pytest.raises(ValueError):
        train_hierarchy(train, val, tax, emb, cfg)


def test_lr_schedule_with_frozen_validation_loss(monkeypatch, small_corpus):
    """
    A validation loss that never changes yields lr 1e-3 for epochs 1-2 and
    1e-4 from epoch 3 on.
    """

    tax, train, val, emb = small_corpus
    monkeypatch.setattr(trainer, "evaluate_level", lambda clf, batch, batch_size=64: (1.0, 0.5))
    cfg = _small_config(max_epochs=6, early_stop_patience=10)

    _, history = train_level(1, train, val, tax, emb, None, cfg)

    assert history.lrs == [1e-3, 1e-3, 1e-4, 1e-4, 1e-4, 1e-4]
    assert history.epochs_to_best == 0


def test_early_stop_with_frozen_validation_loss(monkeypatch, small_corpus):
    """
    With a validation loss that never improves, training stops after
    early_stop_patience epochs.
    """
    tax, train, val, emb = small_corpus
    monkeypatch.setattr(trainer, "evaluate_level", lambda clf, batch, batch_size=64: (1.0, 0.5))

    _, history = train_level(1, train, val, tax, emb, None, _small_config(max_epochs=20, early_stop_patience=5))

    assert history.epochs_run == 5


def test_training_is_deterministic(small_corpus):
    """
    Two seeded runs give identical epoch records and bit-identical tensors.
    """
    tax, train, val, emb = small_corpus
    cfg = _small_config()

    first = train_hierarchy(train, val, tax, emb, cfg, SeedStreams(cfg.seed))
    second = train_hierarchy(train, val, tax, emb, cfg, SeedStreams(cfg.seed))

    assert trainer.history_records(first.histories) == trainer.history_records(second.histories)
    for a, b in zip(first.classifiers, second.classifiers):
        for name, value in a.state_tensors().items():
            np.testing.assert_array_equal(value, b.state_tensors()[name])


def test_predict_paths_shape(small_corpus):
    """
    Expected behavior:
    - One prediction per document, in order
    - One probability row per level, each a distribution
    - predict_path agrees with the batched form
    """

    tax, train, val, emb = small_corpus
    model = train_hierarchy(train, val, tax, emb, _small_config(max_epochs=1))

    paths = predict_paths(model, val)

    assert [p.doc_id for p in paths] == [d.doc_id for d in val]
    for p in paths:
        assert len(p.path) == 2
        assert [len(row) for row in p.probabilities] == tax.level_sizes()
        assert all(abs(row.sum() - 1.0) < 1e-12 for row in p.probabilities)
        assert all(0.0 < v <= 1.0 for v in p.top_probabilities)
        assert validate_path(tax, p.path) in (True, False)
    assert trainer.predict_path(model, val[0]).path == paths[0].path
    assert predict_paths(model, []) == []


def test_build_classifier_copies_transferred_weights(small_corpus):
    """
    The transferred ONLSTM is copied, not shared: editing the new level
    leaves the source untouched.
    """
    tax, _, _, emb = small_corpus
    cfg = _small_config()
    source = build_classifier(1, tax, emb, cfg, np.random.default_rng(0))

    target = build_classifier(2, tax, emb, cfg, np.random.default_rng(1), source.onlstm)

    assert target.onlstm.digest() == source.onlstm.digest()
    target.onlstm.W["forget"].value[0, 0] += 1.0
    assert target.onlstm.digest() != source.onlstm.digest()


def test_synthetic_overfit(overfit_model):
    """
    On the [3, 3] fixture the model fits its training documents.

    Expected behavior:
    - Teacher-forced accuracy >= 0.99 at both levels
    - Free-running (overall) accuracy >= 0.95
    - At most 50 epochs per level
    """

    model, docs = overfit_model

    assert level_accuracy(model, docs, 1) >= 0.99
    assert level_accuracy(model, docs, 2) >= 0.99
    assert overall_accuracy(model, docs) >= 0.95
    assert all(h.epochs_run <= 50 for h in model.histories)


def test_overfit_true_parents_dominate_and_paths_are_consistent(overfit_model):
    """
    Purpose:
    - Composing with the true parent never loses to composing with a
      predicted one, and per-level predictions chain along taxonomy edges

    Expected behavior:
    - For every level, accuracy with true parents >= free-running accuracy
    - At least 95% of predicted training paths are edge-consistent
    """

    model, docs = overfit_model
    tax = model.taxonomy
    paths = predict_paths(model, docs)

    free = free_running_level_accuracy(docs, paths, tax.level_count)
    for level in range(1, tax.level_count + 1):
        assert level_accuracy(model, docs, level) >= free[level - 1]

    consistent = sum(validate_path(tax, p.path) for p in paths)
    assert consistent / len(paths) >= 0.95


def test_joint_embedding_ablation_gap():
    """
    When child signals are shared across branches, only the prepended
    parent label can disambiguate a level-2 category, so joint embedding
    must beat bare text by at least 10 accuracy points on held-out
    documents.
    """

    tax, docs, emb = generate_synthetic_corpus(
        branching=[2, 2], docs_per_leaf=30, signal_tokens_per_class=3,
        noise_vocab=10, doc_len=12, seed=5, shared_child_signals=True, dim=8,
    )
    train, val = split_documents(docs, 0.2, seed=5)

    accuracies = {}
    for joint in (True, False):
        cfg = TrainConfig(
            hidden_size=16, mlp_units=16, batch_size=16, max_epochs=30, seed=5,
            initial_lr=3e-3, use_joint_embedding=joint,
        )
        clf, _ = train_level(2, train, val, tax, emb, None, cfg)
        batch = encode_level(val, 2, tax, emb, cfg.max_len, joint_embedding=joint)
        _, accuracies[joint] = evaluate_level(clf, batch, cfg.batch_size)

    assert accuracies[True] - accuracies[False] >= 0.10
