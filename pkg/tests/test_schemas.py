"""
Tests for Pydantic schema validation of file records, the training
configuration, evaluation reports and run manifests.
"""
import pytest
from pydantic import ValidationError

from hiertext.schemas import CorpusRecord, EpochRecord, EvalReport, PredictInput, RunManifest, TaxonomyRecord, TrainConfig


def _report(**overrides):
    values = dict(
        num_documents=4,
        level_accuracy=[1.0, 0.75],
        free_running_level_accuracy=[1.0, 0.5],
        overall_accuracy=0.5,
        precision=0.5,
        recall=0.5,
        f1=0.5,
        flat_coverage_error=1.25,
        flat_ranking_loss=0.1,
        hierarchical_coverage_error=2.0,
        hierarchical_ranking_loss=0.2,
    )
    values.update(overrides)
    return EvalReport(**values)


def test_taxonomy_record_root_has_null_parent():
    record = TaxonomyRecord(id="root", label="Root")

    assert record.parent is None


def test_records_reject_extra_fields():
    """
    extra='forbid' should reject unknown fields on file records.
    """
    with pytest.raises(ValidationError):
        TaxonomyRecord(id="a", label="A", parent="root", depth=1)
    with pytest.raises(ValidationError):
        CorpusRecord(id="d", text="t", path=["a"], source="web")


def test_corpus_record_split_values():
    """
    Only train, val and test are accepted as split values.
    """
    assert CorpusRecord(id="d", text="t", path=["a"], split="test").split == "test"
    with pytest.raises(ValidationError):
        CorpusRecord(id="d", text="t", path=["a"], split="holdout")


def test_predict_input_ignores_extra_fields():
    """
    Prediction inputs may carry extra fields such as a gold path.
    """
    record = PredictInput.model_validate({"id": "q", "text": "hello", "path": ["a"]})

    assert record.id == "q"


def test_train_config_defaults():
    """
    Defaults match the reference training setup.
    """
    cfg = TrainConfig()

    assert cfg.initial_lr == 1e-3
    assert cfg.batch_size == 64
    assert cfg.plateau_patience_epochs == 2
    assert cfg.lr_decay_factor == 10.0
    assert cfg.hidden_size == 512
    assert cfg.mlp_units == 500
    assert cfg.input_dropout == 0.25
    assert cfg.hidden_dropout == 0.5
    assert cfg.use_joint_embedding and cfg.use_fine_tuning


def test_train_config_per_level_sizes():
    """
    Per-level overrides apply to the levels they list; later levels fall
    back to the global size.
    """
    cfg = TrainConfig(hidden_size=16, level_hidden_sizes=[8], level_mlp_units=[4, 6])

    assert cfg.hidden_size_for(1) == 8
    assert cfg.hidden_size_for(2) == 16
    assert cfg.mlp_units_for(2) == 6


@pytest.mark.parametrize(
    "field, value",
    [("batch_size", 1), ("input_dropout", 1.0), ("lr_decay_factor", 1.0), ("seed", -1), ("level_hidden_sizes", [0])],
)
def test_train_config_rejects_invalid_values(field, value):
    with pytest.raises(ValidationError):
        TrainConfig(**{field: value})


def test_epoch_record_bounds():
    """
    Levels start at 1 and accuracy is a rate.
    """
    EpochRecord(level=1, epoch=0, lr=1e-3, val_loss=0.7, val_acc=0.5)
    with pytest.raises(ValidationError):
        EpochRecord(level=0, epoch=1, lr=1e-3, val_loss=0.7, val_acc=0.5)
    with pytest.raises(ValidationError):
        EpochRecord(level=1, epoch=1, lr=1e-3, val_loss=0.7, val_acc=1.5)


def test_eval_report_validation_and_table():
    """
    Expected behavior:
    - The table shows true-parent and predicted-parent rows per level
    - The ranking-loss rows name the semantics used
    - Out-of-range rates and unknown averaging modes are rejected
    """

    report = _report()

    table = report.to_table()

    assert "level 2 accuracy (true parent)" in table
    assert "level 2 accuracy (predicted parent)" in table
    assert "ranking loss (flat, as_printed)" in table
    with pytest.raises(ValidationError):
        _report(level_accuracy=[1.2])
    with pytest.raises(ValidationError):
        _report(averaging="weighted")


def test_run_manifest_seed_must_match_config():
    RunManifest(command="train", seed=3, config={"seed": 3}, ablations={}, input_hashes={})
    with pytest.raises(ValidationError):
        RunManifest(command="train", seed=3, config={"seed": 4}, ablations={}, input_hashes={})
