"""
Defines Pydantic schemas for every record that crosses a file boundary
(taxonomy, corpus, metrics log, predictions, evaluation reports, run
manifests) and the validated training configuration.
"""
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

Split = Literal["train", "val", "test"]
Averaging = Literal["macro", "micro"]
RLossSemantics = Literal["as_printed", "prose"]


class TaxonomyRecord(BaseModel):
    """
    One line of the taxonomy file. The root record has a null parent.
    """
    model_config = ConfigDict(extra="forbid")

    id: str = Field(..., min_length=1)
    label: str
    parent: Optional[str] = None


class CorpusRecord(BaseModel):
    """
    One line of the corpus file: a document with its label path
    from level 1 down to the leaf.
    """
    model_config = ConfigDict(extra="forbid")

    id: str = Field(..., min_length=1)
    text: str
    path: List[str] = Field(default_factory=list)
    split: Optional[Split] = None


class PredictInput(BaseModel):
    model_config = ConfigDict(extra="ignore")

    id: str = Field(..., min_length=1)
    text: str


class TrainConfig(BaseModel):
    """
    Hyperparameters of a level-by-level training run.

    Defaults follow the WOS-like setup: Adam at 1e-3, batch 64, LR divided
    by 10 after 2 epochs without validation-loss improvement, 512 hidden
    ONLSTM units with 0.25 input dropout and a 500-unit MLP with 0.5 dropout.
    """
    model_config = ConfigDict(extra="forbid")

    initial_lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(64, ge=2)
    plateau_patience_epochs: int = Field(2, ge=1)
    lr_decay_factor: float = Field(10.0, gt=1)
    early_stop_patience: int = Field(5, ge=1)
    max_epochs: int = Field(100, ge=0)
    seed: int = Field(0, ge=0)
    max_len: int = Field(256, ge=1)
    min_count: int = Field(1, ge=1)
    val_fraction: float = Field(0.1, gt=0, lt=1)

    use_joint_embedding: bool = True
    use_fine_tuning: bool = True

    hidden_size: int = Field(512, ge=1)
    mlp_units: int = Field(500, ge=1)
    level_hidden_sizes: Optional[List[int]] = None
    level_mlp_units: Optional[List[int]] = None

    input_dropout: float = Field(0.25, ge=0, lt=1)
    hidden_dropout: float = Field(0.5, ge=0, lt=1)
    bn_momentum: float = Field(0.1, gt=0, le=1)
    bn_eps: float = Field(1e-5, gt=0)

    @field_validator("level_hidden_sizes", "level_mlp_units")
    @classmethod
    def sizes_positive(cls, sizes: Optional[List[int]]) -> Optional[List[int]]:
        """
        Per-level overrides must be positive when given.
        """
        if sizes is not None and any(s < 1 for s in sizes):
            raise ValueError("per-level sizes must be >= 1")
        return sizes

    def hidden_size_for(self, level: int) -> int:
        if self.level_hidden_sizes and level <= len(self.level_hidden_sizes):
            return self.level_hidden_sizes[level - 1]
        return self.hidden_size

    def mlp_units_for(self, level: int) -> int:
        if self.level_mlp_units and level <= len(self.level_mlp_units):
            return self.level_mlp_units[level - 1]
        return self.mlp_units


class EpochRecord(BaseModel):
    """
    One line of the metrics log. Epoch 0 is the untrained (or transferred)
    model, scored before the first update, so it has no training loss.
    The epoch-0 and best-epoch records carry the ONLSTM tensor digest.
    """
    model_config = ConfigDict(extra="forbid")

    level: int = Field(..., ge=1)
    epoch: int = Field(..., ge=0)
    lr: float
    train_loss: Optional[float] = None
    val_loss: float
    val_acc: float = Field(..., ge=0, le=1)
    onlstm_digest: Optional[str] = None


class PredictionRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str
    path: List[str]
    top_probabilities: List[float]
    edge_consistent: bool


def _fmt_optional(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.5f}"


class EvalReport(BaseModel):
    """
    Full evaluation of a hierarchical model on a document set.

    Coverage error and ranking loss are reported twice: over the leaf level
    only (flat) and over the union of all levels' labels (hierarchical).
    A ranking loss is None when its label universe has a single label.
    """
    model_config = ConfigDict(extra="forbid")

    num_documents: int = Field(..., ge=0)
    level_accuracy: List[float]
    free_running_level_accuracy: List[float]
    overall_accuracy: float = Field(..., ge=0, le=1)
    precision: float = Field(..., ge=0, le=1)
    recall: float = Field(..., ge=0, le=1)
    f1: float = Field(..., ge=0, le=1)
    averaging: Averaging = "macro"
    flat_coverage_error: float = Field(..., ge=0)
    flat_ranking_loss: Optional[float] = Field(..., ge=0, le=1)
    hierarchical_coverage_error: float = Field(..., ge=0)
    hierarchical_ranking_loss: Optional[float] = Field(..., ge=0, le=1)
    rloss_semantics: RLossSemantics = "as_printed"

    @field_validator("level_accuracy", "free_running_level_accuracy")
    @classmethod
    def rates_in_unit_interval(cls, rates: List[float]) -> List[float]:
        """
        Every accuracy entry is a rate.
        """
        if any(r < 0 or r > 1 for r in rates):
            raise ValueError("accuracies must lie in [0, 1]")
        return rates

    def to_table(self) -> str:
        """
        Render the report as a fixed-width text table.
        """
        rows = [("documents", str(self.num_documents))]
        for j, acc in enumerate(self.level_accuracy, start=1):
            rows.append((f"level {j} accuracy (true parent)", f"{acc:.4f}"))
        for j, acc in enumerate(self.free_running_level_accuracy, start=1):
            rows.append((f"level {j} accuracy (predicted parent)", f"{acc:.4f}"))
        rows += [
            ("overall accuracy", f"{self.overall_accuracy:.4f}"),
            (f"precision ({self.averaging})", f"{self.precision:.4f}"),
            (f"recall ({self.averaging})", f"{self.recall:.4f}"),
            (f"f1 ({self.averaging})", f"{self.f1:.4f}"),
            ("coverage error (flat)", f"{self.flat_coverage_error:.4f}"),
            (f"ranking loss (flat, {self.rloss_semantics})", _fmt_optional(self.flat_ranking_loss)),
            ("coverage error (hierarchical)", f"{self.hierarchical_coverage_error:.4f}"),
            (
                f"ranking loss (hierarchical, {self.rloss_semantics})",
                _fmt_optional(self.hierarchical_ranking_loss),
            ),
        ]
        width = max(len(name) for name, _ in rows)
        return "\n".join(f"{name.ljust(width)}  {value}" for name, value in rows)


class RunManifest(BaseModel):
    """
    Everything needed to reproduce a run: the resolved configuration,
    the seed, and content hashes of every input file.
    """
    model_config = ConfigDict(extra="forbid")

    command: str
    seed: int
    config: Dict[str, object]
    ablations: Dict[str, bool]
    input_hashes: Dict[str, str]
    outputs: Dict[str, str] = Field(default_factory=dict)

    @model_validator(mode="after")
    def seed_echoed(self) -> "RunManifest":
        """
        The seed in the config echo must match the recorded seed.
        """
        if "seed" in self.config and self.config["seed"] != self.seed:
            raise ValueError("config seed does not match manifest seed")
        return self
