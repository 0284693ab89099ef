"""FastAPI service wrapping the core package.

Every run endpoint is synchronous (desk-scale jobs), deterministic given
the request, and echoes its effective configuration as ``config.json``
into the output directory so runs are replayable. Input mistakes map to
HTTP 400/422, runtime failures (divergence, non-finite values) to 500.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException

from .. import __version__
from ..data import (
    DataError,
    Dataset,
    bone_view,
    load_dataset,
    load_dataset_graph,
    save_dataset,
    synth_dataset,
)
from ..gradcheck import run_gradient_check
from ..model import (
    ModelConfig,
    ModelError,
    build_model,
    export_attention,
    load_checkpoint,
    save_checkpoint,
)
from ..tensor import NonFiniteError, ShapeError
from ..training import (
    PRESETS,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    train,
    write_history_csv,
)
from .schemas import (
    EvaluateRequest,
    EvaluateResponse,
    ExportAttentionRequest,
    ExportAttentionResponse,
    GenerateDataRequest,
    GenerateDataResponse,
    GradCheckEntryModel,
    GradCheckRequest,
    GradCheckResponse,
    HealthResponse,
    ModelSettings,
    TrainRequest,
    TrainResponse,
    TrainSettings,
)


def derive_model_config(dataset: Dataset, settings: ModelSettings | None) -> ModelConfig:
    """Desk-scale architecture matched to a dataset, with user overrides."""
    config = ModelConfig(
        num_joints=dataset.num_joints,
        frames=dataset.frames,
        in_channels=dataset.channels,
        channel_plan=[8, 8],
        rtr_layers=1,
        heads=2,
        num_classes=dataset.num_classes,
        mlp_hidden=16,
        tcn_kernel=3,
    )
    if settings is not None:
        overrides = {k: v for k, v in settings.model_dump().items() if v is not None}
        config = replace(config, **overrides)
    return config


def resolve_train_config(preset: str | None, settings: TrainSettings | None,
                         seed: int | None) -> TrainConfig:
    if preset is not None:
        if preset not in PRESETS:
            raise HTTPException(400, f"unknown preset {preset!r}; have {sorted(PRESETS)}")
        config = replace(PRESETS[preset])
    else:
        config = TrainConfig()
    if settings is not None:
        overrides = {k: v for k, v in settings.model_dump().items() if v is not None}
        config = replace(config, **overrides)
    if seed is not None:
        config = replace(config, seed=seed)
    return config


def _echo_config(out_dir: Path, command: str, request: dict, resolved: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.json"
    path.write_text(json.dumps(
        {"command": command, "request": request, "resolved": resolved},
        indent=2, sort_keys=True) + "\n")
    return path


def _load_dataset_or_400(path: str) -> Dataset:
    try:
        return load_dataset(path)
    except (DataError, FileNotFoundError) as exc:
        raise HTTPException(400, f"cannot load dataset: {exc}") from exc


def _load_checkpoint_or_400(path: str):
    try:
        return load_checkpoint(path)
    except (ModelError, FileNotFoundError) as exc:
        raise HTTPException(400, f"cannot load checkpoint: {exc}") from exc


def create_app() -> FastAPI:
    app = FastAPI(
        title="relayformer service",
        description="Skeleton action recognition with relay-node relative "
                    "transformers: dataset generation, training, evaluation, "
                    "gradient checking and attention export.",
        version=__version__,
    )

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    @app.post("/datasets/generate", response_model=GenerateDataResponse)
    def generate_data(request: GenerateDataRequest) -> GenerateDataResponse:
        try:
            dataset = synth_dataset(request.classes, request.per_class,
                                    request.joints, request.frames,
                                    seed=request.seed, noise=request.noise)
            out = save_dataset(dataset, request.out_dir)
        except (DataError, OSError) as exc:
            raise HTTPException(400, str(exc)) from exc
        _echo_config(Path(request.out_dir), "gen-data",
                     request.model_dump(), {})
        return GenerateDataResponse(
            out_dir=str(out),
            num_samples=len(dataset.samples),
            classes=dataset.label_names,
            split_sizes={k: len(v) for k, v in dataset.splits.items()},
        )

    @app.post("/runs/train", response_model=TrainResponse)
    def run_train(request: TrainRequest) -> TrainResponse:
        dataset = _load_dataset_or_400(request.dataset_dir)
        graph = load_dataset_graph(request.dataset_dir)
        if request.modality == "bone":
            dataset = bone_view(dataset, graph)
        model_cfg = derive_model_config(dataset, request.model)
        train_cfg = resolve_train_config(request.preset, request.train, request.seed)
        out_dir = Path(request.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        try:
            model = build_model(model_cfg, graph=graph, seed=train_cfg.seed)
            history = train(model, dataset, train_cfg, quiet=request.quiet)
        except (ModelError, ShapeError, ValueError) as exc:
            raise HTTPException(400, str(exc)) from exc
        except (TrainingDiverged, NonFiniteError) as exc:
            raise HTTPException(500, f"training aborted: {exc}") from exc
        checkpoint_dir = out_dir / "checkpoint"
        save_checkpoint(model, checkpoint_dir)
        history_csv = out_dir / "history.csv"
        write_history_csv(history, history_csv)
        config_json = _echo_config(
            out_dir, "train", request.model_dump(),
            {"model": asdict(model_cfg), "train": asdict(train_cfg),
             "modality": request.modality},
        )
        return TrainResponse(
            checkpoint_dir=str(checkpoint_dir),
            history_csv=str(history_csv),
            config_json=str(config_json),
            epochs_run=len(history),
            final_train_acc=history[-1].train_acc if history else None,
            final_val_acc=history[-1].val_acc if history else None,
        )

    @app.post("/runs/evaluate", response_model=EvaluateResponse)
    def run_evaluate(request: EvaluateRequest) -> EvaluateResponse:
        model = _load_checkpoint_or_400(request.checkpoint_dir)
        dataset = _load_dataset_or_400(request.dataset_dir)
        if request.modality == "bone":
            dataset = bone_view(dataset, load_dataset_graph(request.dataset_dir))
        if (dataset.num_joints, dataset.channels) != \
                (model.config.num_joints, model.config.in_channels):
            raise HTTPException(
                400,
                f"checkpoint expects ({model.config.num_joints} joints, "
                f"{model.config.in_channels} channels); dataset has "
                f"({dataset.num_joints}, {dataset.channels})")
        try:
            metrics = evaluate(model, dataset, split=request.split)
        except DataError as exc:
            raise HTTPException(400, str(exc)) from exc
        except NonFiniteError as exc:
            raise HTTPException(500, str(exc)) from exc
        out_dir = Path(request.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_json = out_dir / "metrics.json"
        metrics_json.write_text(json.dumps(metrics.to_dict(), indent=2) + "\n")
        confusion_csv = out_dir / "confusion.csv"
        with open(confusion_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([""] + dataset.label_names)
            for name, row in zip(dataset.label_names, metrics.confusion):
                writer.writerow([name] + [int(x) for x in row])
        config_json = _echo_config(out_dir, "eval", request.model_dump(), {})
        return EvaluateResponse(
            accuracy=metrics.accuracy,
            num_samples=int(metrics.confusion.sum()),
            metrics_json=str(metrics_json),
            confusion_csv=str(confusion_csv),
            config_json=str(config_json),
        )

    @app.post("/runs/gradcheck", response_model=GradCheckResponse)
    def run_gradcheck(request: GradCheckRequest) -> GradCheckResponse:
        config = None  # default: the tiny verification model
        if request.profile == "micro":
            config = ModelConfig(num_joints=3, frames=3, in_channels=3,
                                 channel_plan=[2], rtr_layers=1, heads=2,
                                 num_classes=2, mlp_hidden=2, tcn_kernel=1)
        report = run_gradient_check(config=config, seed=request.seed,
                                    eps=request.eps, threshold=request.threshold)
        report_json = None
        if request.out_dir is not None:
            out_dir = Path(request.out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            path = out_dir / "gradcheck.json"
            path.write_text(json.dumps({
                "passed": report.passed,
                "threshold": report.threshold,
                "max_rel_error": report.max_rel_error,
                "entries": [asdict(e) for e in report.entries],
            }, indent=2) + "\n")
            _echo_config(out_dir, "gradcheck", request.model_dump(), {})
            report_json = str(path)
        return GradCheckResponse(
            passed=report.passed,
            max_rel_error=report.max_rel_error,
            threshold=report.threshold,
            entries=[GradCheckEntryModel(**asdict(e)) for e in report.entries],
            report_json=report_json,
        )

    @app.post("/runs/export-attention", response_model=ExportAttentionResponse)
    def run_export_attention(request: ExportAttentionRequest) -> ExportAttentionResponse:
        model = _load_checkpoint_or_400(request.checkpoint_dir)
        dataset = _load_dataset_or_400(request.dataset_dir)
        if request.sample_index >= len(dataset.samples):
            raise HTTPException(
                400, f"sample index {request.sample_index} out of range "
                     f"(dataset has {len(dataset.samples)} samples)")
        sample = dataset.samples[request.sample_index]
        from ..data import resample_frames

        clip = resample_frames(sample.coordinates, model.config.frames)
        try:
            records = export_attention(model, np.ascontiguousarray(clip.transpose(2, 1, 0)))
        except (ShapeError, NonFiniteError) as exc:
            raise HTTPException(500, str(exc)) from exc
        out_dir = Path(request.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        out_path = out_dir / "attention.json"
        out_path.write_text(json.dumps(records, indent=2) + "\n")
        config_json = _echo_config(out_dir, "export-attention",
                                   request.model_dump(), {})
        return ExportAttentionResponse(
            out_path=str(out_path),
            num_records=len(records),
            config_json=str(config_json),
        )

    return app


app = create_app()
