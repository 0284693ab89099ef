"""Request/response models of the service API.

Model and optimizer settings are optional everywhere: unset model fields
are derived from the dataset container, unset optimizer fields fall back
to the defaults or to a named preset.
"""

from __future__ import annotations

from pydantic import BaseModel, Field


class ModelSettings(BaseModel):
    """Optional overrides for the network architecture."""

    num_joints: int | None = None
    frames: int | None = None
    in_channels: int | None = None
    channel_plan: list[int] | None = None
    rtr_layers: int | None = Field(default=None, ge=1)
    heads: int | None = Field(default=None, ge=1)
    num_classes: int | None = Field(default=None, ge=2)
    mlp_hidden: int | None = Field(default=None, ge=1)
    tcn_kernel: int | None = None
    partition_strategy: str | None = None
    adaptive_gcn: bool | None = None
    relative_positions: bool | None = None
    ffn_multiplier: int | None = Field(default=None, ge=1)
    drop_attention_p: float | None = Field(default=None, ge=0.0, lt=1.0)


class TrainSettings(BaseModel):
    """Optional overrides for the optimization settings."""

    batch_size: int | None = Field(default=None, ge=1)
    epochs: int | None = Field(default=None, ge=0)
    warmup_steps: int | None = Field(default=None, ge=1)
    lr_start: float | None = Field(default=None, gt=0.0)
    lr_peak: float | None = Field(default=None, gt=0.0)
    decay_gamma: float | None = Field(default=None, gt=0.0, lt=1.0)
    momentum: float | None = Field(default=None, ge=0.0, lt=1.0)
    weight_decay: float | None = Field(default=None, ge=0.0)
    augment_max_angle: float | None = Field(default=None, ge=0.0)
    drop_attention_p: float | None = Field(default=None, ge=0.0, lt=1.0)
    seed: int | None = None


class HealthResponse(BaseModel):
    status: str
    version: str


class GenerateDataRequest(BaseModel):
    out_dir: str
    classes: int = Field(default=4, ge=1)
    per_class: int = Field(default=25, ge=1)
    joints: int = Field(default=5, ge=2)
    frames: int = Field(default=6, ge=2)
    seed: int = 7
    noise: float = Field(default=0.05, ge=0.0)


class GenerateDataResponse(BaseModel):
    out_dir: str
    num_samples: int
    classes: list[str]
    split_sizes: dict[str, int]


class TrainRequest(BaseModel):
    dataset_dir: str
    out_dir: str
    preset: str | None = None
    model: ModelSettings | None = None
    train: TrainSettings | None = None
    seed: int | None = None
    modality: str = Field(default="joint", pattern="^(joint|bone)$")
    quiet: bool = True


class TrainResponse(BaseModel):
    checkpoint_dir: str
    history_csv: str
    config_json: str
    epochs_run: int
    final_train_acc: float | None = None
    final_val_acc: float | None = None


class EvaluateRequest(BaseModel):
    checkpoint_dir: str
    dataset_dir: str
    split: str = "test"
    out_dir: str
    modality: str = Field(default="joint", pattern="^(joint|bone)$")


class EvaluateResponse(BaseModel):
    accuracy: float
    num_samples: int
    metrics_json: str
    confusion_csv: str
    config_json: str


class GradCheckRequest(BaseModel):
    eps: float = Field(default=1e-4, gt=0.0)
    threshold: float = Field(default=1e-3, gt=0.0)
    seed: int = 0
    profile: str = Field(default="tiny", pattern="^(tiny|micro)$")
    out_dir: str | None = None


class GradCheckEntryModel(BaseModel):
    name: str
    size: int
    max_rel_error: float


class GradCheckResponse(BaseModel):
    passed: bool
    max_rel_error: float
    threshold: float
    entries: list[GradCheckEntryModel]
    report_json: str | None = None


class ExportAttentionRequest(BaseModel):
    checkpoint_dir: str
    dataset_dir: str
    sample_index: int = Field(default=0, ge=0)
    out_dir: str


class ExportAttentionResponse(BaseModel):
    out_path: str
    num_records: int
    config_json: str
