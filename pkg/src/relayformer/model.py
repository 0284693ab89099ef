"""Full two-stream network: shared graph-convolution trunk, spatial and
temporal relative-transformer streams, pooled fusion and a classifier
head; plus checkpoint round-trips, bone-modality features and score-level
ensembling.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tz
from .graphconv import FeatureTrunk
from .module import Module
from .rtr import AttentionRecorder, RelPosParams, RelativeTransformerStream
from .tensor import NonFiniteError, ShapeError, Tensor
from .topology import (
    SkeletonGraph,
    build_adjacency,
    build_skeleton_graph,
    neighbor_table_spatial,
    temporal_ring_table,
)


class ModelError(ValueError):
    """Raised for invalid configurations or malformed checkpoints."""


@dataclass
class ModelConfig:
    """Architecture plan. Every field is serializable and the parameter
    count is a pure function of this object plus the skeleton."""

    num_joints: int = 25
    frames: int = 18
    in_channels: int = 3
    channel_plan: list[int] = field(default_factory=lambda: [64, 64, 64, 128, 128, 128, 256, 256, 256])
    rtr_layers: int = 3
    heads: int = 8
    num_classes: int = 60
    mlp_hidden: int = 256
    tcn_kernel: int = 9
    partition_strategy: str = "spatial"
    adaptive_gcn: bool = False
    relative_positions: bool = False
    ffn_multiplier: int = 4
    drop_attention_p: float = 0.0

    def validate(self) -> "ModelConfig":
        if self.num_classes < 2:
            raise ModelError(f"need at least 2 classes, got {self.num_classes}")
        if not self.channel_plan:
            raise ModelError("channel plan is empty")
        for width in self.channel_plan:
            if width % self.heads != 0:
                raise ModelError(
                    f"stage width {width} not divisible by {self.heads} heads")
        if self.tcn_kernel % 2 == 0:
            raise ModelError(f"temporal kernel must be odd, got {self.tcn_kernel}")
        return self


def tiny_config(num_classes: int = 4, num_joints: int = 5, frames: int = 6) -> ModelConfig:
    """Desk-scale configuration used by gradient checks and fast tests."""
    return ModelConfig(
        num_joints=num_joints, frames=frames, in_channels=3,
        channel_plan=[8, 8], rtr_layers=1, heads=2,
        num_classes=num_classes, mlp_hidden=16, tcn_kernel=3,
    )


class ActionRecognizer(Module):
    """Trunk -> parallel streams -> pooled fusion -> classifier logits."""

    def __init__(self, config: ModelConfig, graph: SkeletonGraph,
                 rng: np.random.Generator):
        super().__init__()
        config.validate()
        if graph.num_joints != config.num_joints:
            raise ModelError(
                f"config expects {config.num_joints} joints, skeleton has {graph.num_joints}")
        self.config = config
        self.graph = graph
        adjacency = build_adjacency(graph, config.partition_strategy)
        self.trunk = self.child("trunk", FeatureTrunk(
            config.in_channels, config.num_joints, config.channel_plan,
            adjacency, rng, kernel_size=config.tcn_kernel,
            adaptive=config.adaptive_gcn,
        ))
        channels = self.trunk.out_channels
        self.out_frames = self.trunk.out_frames(config.frames)
        if self.out_frames < 2:
            raise ModelError(
                f"trunk reduces {config.frames} frames to {self.out_frames}; "
                "the temporal ring needs at least 2")
        spatial_table = neighbor_table_spatial(graph, include_self=True)
        self.spatial_stream = self.child("spatial", RelativeTransformerStream(
            channels, config.rtr_layers, config.heads, spatial_table,
            include_self_slot=False, stream_name="S",
            joint_block="SJU", relay_block="SRU", rng=rng,
            ffn_multiplier=config.ffn_multiplier,
        ))
        ring = temporal_ring_table(self.out_frames)
        rel_pos = None
        if config.relative_positions:
            rel_pos = RelPosParams(channels, self.out_frames - 1, rng)
        self.temporal_stream = self.child("temporal", RelativeTransformerStream(
            channels, config.rtr_layers, config.heads, ring,
            include_self_slot=True, stream_name="T",
            joint_block="TJU", relay_block="TRU", rng=rng,
            rel_pos=rel_pos, ffn_multiplier=config.ffn_multiplier,
        ))
        self.stream_channels = channels
        hidden = config.mlp_hidden
        scale = np.sqrt(2.0 / (4 * channels))
        self.head_w1 = self.param("head_w1", rng.normal(0.0, scale, (4 * channels, hidden)))
        self.head_b1 = self.param("head_b1", np.zeros(hidden))
        # zero-initialized output layer: an untrained model predicts uniformly
        self.head_w2 = self.param("head_w2", np.zeros((hidden, config.num_classes)))
        self.head_b2 = self.param("head_b2", np.zeros(config.num_classes))

    def forward(self, batch: Tensor, rng: np.random.Generator | None = None,
                recorder: AttentionRecorder | None = None) -> Tensor:
        """Class logits ``(B, num_classes)`` for a ``(B, C, V, T)`` batch."""
        b, c, v, t = batch.shape
        cfg = self.config
        if (c, v, t) != (cfg.in_channels, cfg.num_joints, cfg.frames):
            raise ShapeError(
                f"batch shape {batch.shape} does not match configured "
                f"({cfg.in_channels}, {cfg.num_joints}, {cfg.frames})")
        features = self.trunk.forward(batch)
        t_out = self.out_frames
        channels = self.stream_channels

        drop_p = cfg.drop_attention_p if self.training else 0.0
        if drop_p > 0.0 and rng is None:
            raise ModelError("drop attention is active: forward needs an rng")

        per_frame = tz.reshape(tz.permute(features, (0, 3, 2, 1)), (b * t_out, v, channels))
        s_nodes, s_relay = self.spatial_stream.forward(
            per_frame, drop_p=drop_p, rng=rng, recorder=recorder)
        per_joint = tz.reshape(tz.permute(features, (0, 2, 3, 1)), (b * v, t_out, channels))
        t_nodes, t_relay = self.temporal_stream.forward(
            per_joint, drop_p=drop_p, rng=rng, recorder=recorder)

        s_pool = tz.reduce_mean(tz.reshape(s_nodes, (b, t_out * v, channels)), axis=1)
        s_relay_pool = tz.reduce_mean(tz.reshape(s_relay, (b, t_out, channels)), axis=1)
        t_pool = tz.reduce_mean(tz.reshape(t_nodes, (b, v * t_out, channels)), axis=1)
        t_relay_pool = tz.reduce_mean(tz.reshape(t_relay, (b, v, channels)), axis=1)
        fused = tz.concat([s_pool, s_relay_pool, t_pool, t_relay_pool], axis=1)

        hidden = tz.relu(tz.linear(fused, self.head_w1, self.head_b1))
        logits = tz.linear(hidden, self.head_w2, self.head_b2)
        if not np.all(np.isfinite(logits.data)):
            raise NonFiniteError("forward produced non-finite logits")
        return logits

    def predict_proba(self, batch: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        """Class probabilities; rows are softmax-normalized."""
        return tz.softmax(self.forward(batch, rng=rng))


def build_model(config: ModelConfig, graph: SkeletonGraph | None = None,
                seed: int = 0, dtype=np.float32) -> ActionRecognizer:
    """Deterministically initialized network; same seed, same bits."""
    if graph is None:
        graph = default_graph(config.num_joints)
    rng = np.random.default_rng(seed)
    model = ActionRecognizer(config, graph, rng)
    model.astype(dtype)
    return model


def default_graph(num_joints: int) -> SkeletonGraph:
    from .topology import chain_skeleton, ntu_skeleton

    if num_joints == 25:
        return ntu_skeleton()
    return chain_skeleton(num_joints)


def expected_parameter_count(config: ModelConfig, graph: SkeletonGraph) -> int:
    """Closed-form audit of the trainable parameter count.

    Derived from the config arithmetic alone; tests compare it against the
    actual sum over allocated arrays.
    """
    cfg = config.validate()
    v = graph.num_joints
    k = 1 if cfg.partition_strategy == "uniform" else 3
    total = 2 * cfg.in_channels * v  # input normalization
    prev = cfg.in_channels
    for width in cfg.channel_plan:
        total += k * prev * width            # propagation channel maps
        if cfg.adaptive_gcn:
            embed = max(1, width // 4)
            total += k * v * v               # free adjacency components
            total += 2 * k * prev * embed    # similarity embeddings
        total += 2 * width                   # norm after graph conv
        total += width * cfg.tcn_kernel      # temporal filter taps
        total += 2 * width                   # norm after temporal conv
        prev = width
    c = prev
    ffn = 2 * c + c * (cfg.ffn_multiplier * c) + (cfg.ffn_multiplier * c) \
        + (cfg.ffn_multiplier * c) * c + c
    per_layer = 2 * (2 * c + 4 * c * c + ffn)  # joint + relay update sets
    total += 2 * cfg.rtr_layers * per_layer    # both streams
    if cfg.relative_positions:
        t_out = _frames_after_plan(cfg)
        total += 3 * c * c + (2 * (t_out - 1) + 1) * c + 2 * c
    total += 4 * c * cfg.mlp_hidden + cfg.mlp_hidden
    total += cfg.mlp_hidden * cfg.num_classes + cfg.num_classes
    return total


def _frames_after_plan(cfg: ModelConfig) -> int:
    t = cfg.frames
    prev = cfg.in_channels
    for i, width in enumerate(cfg.channel_plan):
        if i > 0 and width != prev:
            t = -(-t // 2)
        prev = width
    return t


# -- bone modality and score fusion --------------------------------------------


def bone_features(sequence: np.ndarray, graph: SkeletonGraph) -> np.ndarray:
    """Joint-difference features along the rooted bone orientation.

    ``sequence`` is ``(T, V, C)``; each joint becomes its offset from its
    parent, and the root becomes zero. Invariant to global translation.
    """
    seq = np.asarray(sequence)
    if seq.ndim != 3 or seq.shape[1] != graph.num_joints:
        raise ShapeError(
            f"bone_features: expected (T, {graph.num_joints}, C), got {seq.shape}")
    parents = graph.bone_parents()
    return seq - seq[:, parents, :]


def ensemble_scores(p1: np.ndarray, p2: np.ndarray) -> np.ndarray:
    """Mean of two per-class probability matrices, renormalized per row."""
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    if p1.shape != p2.shape:
        raise ShapeError(f"ensemble_scores: shapes {p1.shape} and {p2.shape} differ")
    mixed = 0.5 * (p1 + p2)
    return mixed / mixed.sum(axis=1, keepdims=True)


# -- checkpoints ----------------------------------------------------------------

CHECKPOINT_FORMAT = "relayformer-checkpoint/1"
_METADATA_FILE = "metadata.json"
_BLOB_FILE = "params.bin"


def save_checkpoint(model: ActionRecognizer, path: str | Path) -> None:
    """Write ``metadata.json`` plus one flat little-endian float32 blob."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for kind, items in (("param", model.named_parameters()),
                        ("buffer", model.named_buffers())):
        for name, value in items:
            data = (value.data if isinstance(value, Tensor) else value)
            flat = np.ascontiguousarray(data, dtype="<f4").reshape(-1)
            entries.append({
                "name": name, "kind": kind,
                "shape": list(data.shape), "offset": offset, "length": int(flat.size),
            })
            chunks.append(flat.tobytes())
            offset += flat.size
    metadata = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "skeleton": {
            "V": model.graph.num_joints,
            "edges": [list(e) for e in model.graph.edges],
            "center": model.graph.center_joint,
        },
        "entries": entries,
        "blob": _BLOB_FILE,
    }
    (path / _METADATA_FILE).write_text(json.dumps(metadata, indent=2) + "\n")
    (path / _BLOB_FILE).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> ActionRecognizer:
    """Rebuild the model a checkpoint describes and restore every array."""
    path = Path(path)
    meta_path = path / _METADATA_FILE
    if not meta_path.exists():
        raise ModelError(f"no checkpoint at {path}")
    metadata = json.loads(meta_path.read_text())
    if metadata.get("format") != CHECKPOINT_FORMAT:
        raise ModelError(f"unsupported checkpoint format {metadata.get('format')!r}")
    config = ModelConfig(**metadata["config"])
    sk = metadata["skeleton"]
    graph = build_skeleton_graph(sk["V"], sk["edges"], sk["center"])
    model = ActionRecognizer(config, graph, np.random.default_rng(0))
    model.astype(np.float32)
    blob = np.frombuffer((path / _BLOB_FILE).read_bytes(), dtype="<f4")
    arrays = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    for entry in metadata["entries"]:
        piece = blob[entry["offset"]: entry["offset"] + entry["length"]]
        shaped = piece.reshape(entry["shape"]).astype(np.float32)
        if entry["kind"] == "param":
            if entry["name"] not in arrays:
                raise ModelError(f"checkpoint names unknown parameter {entry['name']!r}")
            arrays[entry["name"]].data[...] = shaped
        else:
            if entry["name"] not in buffers:
                raise ModelError(f"checkpoint names unknown buffer {entry['name']!r}")
            buffers[entry["name"]][...] = shaped
    return model


# -- attention-response export ---------------------------------------------------


def export_attention(model: ActionRecognizer, sample: np.ndarray) -> list[dict]:
    """Attention weights of every update block on one ``(C, V, T)`` sample.

    One record per (stream, layer, head, query node). Joint-update records
    carry the query node in ``frame_or_joint`` and the owning graph
    instance (the frame for the spatial stream, the joint track for the
    temporal one) in ``instance``; relay-update records identify the relay
    by its instance directly. Weight vectors include the relay slot and
    exact zeros on padded slots, and always sum to 1.
    """
    sample = np.asarray(sample, dtype=np.float32)
    if sample.ndim != 3:
        raise ShapeError(f"export_attention: expected (C, V, T), got {sample.shape}")
    was_training = model.training
    model.eval()
    recorder = AttentionRecorder()
    try:
        model.forward(Tensor(sample[None]), recorder=recorder)
    finally:
        model.train(was_training)
    records: list[dict] = []
    for tap in recorder.taps:
        instances, heads, rows, _slots = tap.weights.shape
        relay_block = tap.block in ("SRU", "TRU")
        for inst in range(instances):
            for head in range(heads):
                for row in range(rows):
                    record = {
                        "stream": tap.stream,
                        "layer": tap.layer,
                        "head": head,
                        "block": tap.block,
                        "frame_or_joint": inst if relay_block else row,
                        "weights": [float(w) for w in tap.weights[inst, head, row]],
                    }
                    if not relay_block:
                        record["instance"] = inst
                    records.append(record)
    return records
