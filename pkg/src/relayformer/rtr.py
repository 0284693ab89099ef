"""Relative-transformer update blocks over spatial and temporal skeleton
graphs.

Each stream alternates two attention blocks per layer: a joint-node update,
where every node attends over its local constituency (graph neighbors,
itself and the relay node), and a relay-node update, where the per-graph
relay attends over itself and every node. The relay is a virtual node
initialized to the mean of its constituency, giving each node a two-hop
path to every other node without quadratic attention.

Layout convention: node features are ``(B', N, C)`` where ``B'`` indexes
independent graph instances (one per frame for the spatial stream, one per
joint track for the temporal stream); relay features are ``(B', C)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as tz
from .module import Module
from .tensor import ShapeError, Tensor
from .topology import NeighborTable


# -- small public building blocks ---------------------------------------------


def relay_init(features: Tensor) -> Tensor:
    """Mean of a constituency: ``(batch, C, n)`` -> ``(batch, C)``."""
    if features.ndim != 3 or features.shape[2] < 1:
        raise ShapeError(f"relay_init: need (batch, C, n>=1), got {features.shape}")
    return tz.reduce_mean(features, axis=2)


def attention_scores(query: Tensor, keys: Tensor, scale: float,
                     mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product weights of one query over ``(m, d_k)`` keys.

    Masked slots get exactly zero weight; a fully masked row is an error.
    """
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ShapeError("attention_scores: every key slot is masked")
    logits = tz.mul(tz.reduce_sum(tz.mul(keys, tz.reshape(query, (1, -1))), axis=1), scale)
    if mask is not None:
        logits = tz.masked_fill(logits, ~mask)
    return tz.softmax(logits)


def drop_attention(logits: Tensor, p: float, training: bool,
                   rng: np.random.Generator | None = None,
                   valid: np.ndarray | None = None) -> Tensor:
    """Randomly mask key slots of an attention-logit array to the softmax
    kill value during training.

    Each slot along the last axis is dropped independently with probability
    ``p``. Rows whose surviving valid slots would vanish are redrawn, so a
    following softmax is always well defined. Identity in eval mode or at
    ``p == 0``.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"drop_attention: p must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return logits
    if rng is None:
        raise ValueError("drop_attention: rng is required in training mode")
    if valid is None:
        valid = np.ones(logits.shape, dtype=bool)
    valid = np.broadcast_to(np.asarray(valid, dtype=bool), logits.shape)
    drop = rng.random(logits.shape) < p
    alive = (~drop & valid).any(axis=-1)
    while not alive.all():
        redraw = rng.random(logits.shape) < p
        drop = np.where(alive[..., None], drop, redraw)
        alive = (~drop & valid).any(axis=-1)
    return tz.masked_fill(logits, drop)


# -- relative positional scoring ----------------------------------------------


class RelPosParams(Module):
    """Content/position score decomposition parameters.

    Holds one learned encoding per signed offset in ``[-(T-1), T-1]``, the
    shared query and key projections, and two global bias vectors (one for
    the content term, one for the position term).
    """

    def __init__(self, channels: int, max_offset: int, rng: np.random.Generator):
        super().__init__()
        self.channels = channels
        self.max_offset = max_offset
        scale = 1.0 / np.sqrt(channels)
        self.w_q = self.param("w_q", rng.normal(0.0, scale, (channels, channels)))
        self.w_k_content = self.param(
            "w_k_content", rng.normal(0.0, scale, (channels, channels)))
        self.w_k_position = self.param(
            "w_k_position", rng.normal(0.0, scale, (channels, channels)))
        self.encodings = self.param(
            "encodings", rng.normal(0.0, scale, (2 * max_offset + 1, channels)))
        self.content_bias = self.param("content_bias", np.zeros(channels))
        self.position_bias = self.param("position_bias", np.zeros(channels))

    def encoding_for(self, offset: int) -> Tensor:
        if abs(offset) > self.max_offset:
            raise ShapeError(
                f"relative offset {offset} outside table [-{self.max_offset}, {self.max_offset}]")
        return tz.take(self.encodings, np.array([offset + self.max_offset]), axis=0)


def rel_pos_score(i: int, j: int, content_i: Tensor, content_j: Tensor,
                  params: RelPosParams) -> Tensor:
    """Attention logit between positions ``i`` and ``j`` built purely from
    content embeddings and the relative offset ``i - j``.

    The four terms: content-content, content-position, bias-content and
    bias-position. Only the offset enters, never the absolute positions.
    """
    rel = params.encoding_for(i - j)
    ci = tz.reshape(content_i, (1, params.channels))
    cj = tz.reshape(content_j, (1, params.channels))
    q = tz.matmul(ci, params.w_q)
    key_c = tz.matmul(cj, params.w_k_content)
    key_p = tz.matmul(rel, params.w_k_position)
    u = tz.reshape(params.content_bias, (1, params.channels))
    v = tz.reshape(params.position_bias, (1, params.channels))
    score = (
        tz.reduce_sum(tz.mul(q, key_c))
        + tz.reduce_sum(tz.mul(q, key_p))
        + tz.reduce_sum(tz.mul(u, key_c))
        + tz.reduce_sum(tz.mul(v, key_p))
    )
    return score


# -- masked multi-head attention core ------------------------------------------


class UpdateAttention(Module):
    """Projection weights of one node-update block."""

    def __init__(self, channels: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if channels % heads != 0:
            raise ShapeError(f"channels {channels} not divisible by {heads} heads")
        self.channels = channels
        self.heads = heads
        self.head_dim = channels // heads
        scale = 1.0 / np.sqrt(channels)
        self.w_q = self.param("w_q", rng.normal(0.0, scale, (channels, channels)))
        self.w_k = self.param("w_k", rng.normal(0.0, scale, (channels, channels)))
        self.w_v = self.param("w_v", rng.normal(0.0, scale, (channels, channels)))
        self.w_o = self.param("w_o", rng.normal(0.0, scale, (channels, channels)))

    def identity_(self) -> "UpdateAttention":
        """Overwrite all projections with the identity (test hook)."""
        eye = np.eye(self.channels, dtype=self.w_q.dtype)
        for w in (self.w_q, self.w_k, self.w_v, self.w_o):
            w.data[...] = eye
        return self


def _split_heads(x: Tensor, heads: int, head_dim: int) -> Tensor:
    b, n, _ = x.shape
    return tz.permute(tz.reshape(x, (b, n, heads, head_dim)), (0, 2, 1, 3))


def masked_node_attention(
    queries: Tensor,
    sources: Tensor,
    slots: np.ndarray,
    slot_mask: np.ndarray,
    params: UpdateAttention,
    extra_logits: Callable[[Tensor], Tensor] | None = None,
    drop_p: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
    on_weights: Callable[[np.ndarray], None] | None = None,
) -> Tensor:
    """Multi-head attention of each query node over its slot constituency.

    ``slots[n, s]`` indexes rows of ``sources`` for query node ``n``;
    padded slots carry ``slot_mask[n, s] == False`` and receive exactly
    zero weight and zero gradient. ``extra_logits`` may add position terms
    to the content logits (given the per-head queries). ``on_weights`` sees
    the softmax weights as a plain array, for attention-response export.
    """
    b, n, c = queries.shape
    m = sources.shape[1]
    heads, head_dim = params.heads, params.head_dim
    s = slots.shape[1]
    q = _split_heads(tz.matmul(queries, params.w_q), heads, head_dim)
    k = _split_heads(tz.matmul(sources, params.w_k), heads, head_dim)
    v = _split_heads(tz.matmul(sources, params.w_v), heads, head_dim)

    flat = np.clip(slots.reshape(-1), 0, m - 1)
    k_g = tz.reshape(tz.take(k, flat, axis=2), (b, heads, n, s, head_dim))
    v_g = tz.reshape(tz.take(v, flat, axis=2), (b, heads, n, s, head_dim))

    q5 = tz.reshape(q, (b, heads, n, 1, head_dim))
    logits = tz.mul(tz.reduce_sum(tz.mul(q5, k_g), axis=4), 1.0 / np.sqrt(head_dim))
    if extra_logits is not None:
        logits = tz.add(logits, extra_logits(q))
    logits = drop_attention(logits, drop_p, training, rng, valid=slot_mask[None, None])
    logits = tz.masked_fill(logits, ~slot_mask[None, None])
    weights = tz.softmax(logits)
    if on_weights is not None:
        on_weights(weights.data)

    mixed = tz.reduce_sum(tz.mul(tz.reshape(weights, (b, heads, n, s, 1)), v_g), axis=3)
    merged = tz.reshape(tz.permute(mixed, (0, 2, 1, 3)), (b, n, c))
    return tz.matmul(merged, params.w_o)


# -- the four node-update operations -------------------------------------------


def _with_relay_row(nodes: Tensor, relay: Tensor) -> Tensor:
    b, _, c = nodes.shape
    return tz.concat([nodes, tz.reshape(relay, (b, 1, c))], axis=1)


def update_joint_nodes(
    nodes: Tensor,
    relay: Tensor,
    table: NeighborTable,
    params: UpdateAttention,
    include_self_slot: bool = False,
    rel_pos: RelPosParams | None = None,
    drop_p: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
    on_weights: Callable[[np.ndarray], None] | None = None,
) -> Tensor:
    """One joint-node update: every node attends over its table neighbors,
    itself and the relay.

    The spatial table already lists each joint in its own row, so
    ``include_self_slot`` stays False; the temporal ring table does not, so
    the temporal stream appends an explicit self slot. The relay is always
    appended as the last slot. With ``rel_pos`` set, position terms are
    added to the logits of frame slots (the relay has no position).
    """
    b, n, c = nodes.shape
    if table.num_nodes != n:
        raise ShapeError(f"table covers {table.num_nodes} nodes, features have {n}")
    sources = _with_relay_row(nodes, relay)
    columns = [table.index]
    mask_cols = [table.mask]
    if include_self_slot:
        columns.append(np.arange(n, dtype=np.int64)[:, None])
        mask_cols.append(np.ones((n, 1), dtype=bool))
    columns.append(np.full((n, 1), n, dtype=np.int64))  # relay row
    mask_cols.append(np.ones((n, 1), dtype=bool))
    slots = np.concatenate(columns, axis=1)
    slot_mask = np.concatenate(mask_cols, axis=1)

    extra = None
    if rel_pos is not None:
        extra = _relative_position_logits(slots, slot_mask, n, rel_pos, params)
    return masked_node_attention(
        nodes, sources, slots, slot_mask, params,
        extra_logits=extra, drop_p=drop_p, training=training, rng=rng,
        on_weights=on_weights,
    )


def _relative_position_logits(slots: np.ndarray, slot_mask: np.ndarray, n: int,
                              rel_pos: RelPosParams, params: UpdateAttention):
    """Position term builder for frame-indexed slots.

    Returns a closure mapping per-head queries ``(B, H, N, d_k)`` to logit
    additions ``(B, H, N, S)``: ``(q + bias) . (R_offset W_position)`` per
    slot, zeroed on the relay slot and on padding.
    """
    query_index = np.arange(n, dtype=np.int64)[:, None]
    offsets = query_index - slots
    frame_slot = slot_mask & (slots < n)
    offsets = np.clip(offsets, -rel_pos.max_offset, rel_pos.max_offset)
    heads, head_dim = params.heads, params.head_dim

    def extra(q: Tensor) -> Tensor:
        pos_keys = tz.matmul(rel_pos.encodings, rel_pos.w_k_position)
        pos_keys = tz.reshape(pos_keys, (2 * rel_pos.max_offset + 1, heads, head_dim))
        gathered = tz.take(pos_keys, offsets.reshape(-1) + rel_pos.max_offset, axis=0)
        gathered = tz.permute(
            tz.reshape(gathered, (n, slots.shape[1], heads, head_dim)), (2, 0, 1, 3))
        bias = tz.reshape(rel_pos.position_bias, (1, heads, 1, 1, head_dim))
        q5 = tz.reshape(q, (q.shape[0], heads, n, 1, head_dim))
        term = tz.reduce_sum(tz.mul(tz.add(q5, bias), gathered), axis=4)
        return tz.mul(term, Tensor(frame_slot.astype(term.dtype)))

    return extra


def update_relay_node(
    relay: Tensor,
    nodes: Tensor,
    params: UpdateAttention,
    drop_p: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
    on_weights: Callable[[np.ndarray], None] | None = None,
) -> Tensor:
    """One relay-node update: the relay attends over itself and all nodes."""
    b, n, c = nodes.shape
    sources = tz.concat([tz.reshape(relay, (b, 1, c)), nodes], axis=1)
    slots = np.arange(n + 1, dtype=np.int64)[None, :]
    slot_mask = np.ones((1, n + 1), dtype=bool)
    out = masked_node_attention(
        tz.reshape(relay, (b, 1, c)), sources, slots, slot_mask, params,
        drop_p=drop_p, training=training, rng=rng, on_weights=on_weights,
    )
    return tz.reshape(out, (b, c))


# -- feed-forward and stream assembly ------------------------------------------


class LayerNorm(Module):
    def __init__(self, channels: int):
        super().__init__()
        self.gamma = self.param("gamma", np.ones(channels))
        self.beta = self.param("beta", np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return tz.layer_norm(x, self.gamma, self.beta)


class FeedForward(Module):
    """Position-wise two-layer map with pre-normalization and residual.

    Zero weights make this an exact identity, which keeps composition
    tests simple.
    """

    def __init__(self, channels: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.norm = self.child("norm", LayerNorm(channels))
        self.w1 = self.param("w1", rng.normal(0.0, _ffn_scale(channels), (channels, hidden)))
        self.b1 = self.param("b1", np.zeros(hidden))
        self.w2 = self.param("w2", rng.normal(0.0, _ffn_scale(hidden), (hidden, channels)))
        self.b2 = self.param("b2", np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        hidden = tz.relu(tz.linear(self.norm.forward(x), self.w1, self.b1))
        return tz.add(x, tz.linear(hidden, self.w2, self.b2))


def _ffn_scale(fan_in: int) -> float:
    return float(np.sqrt(2.0 / fan_in))


def ffn_apply(x: Tensor, ffn: FeedForward) -> Tensor:
    return ffn.forward(x)


@dataclass
class AttentionTap:
    """One recorded attention readout: softmax weights of a single block."""

    stream: str
    layer: int
    block: str
    weights: np.ndarray  # (instances, heads, rows, slots)


@dataclass
class AttentionRecorder:
    taps: list[AttentionTap] = field(default_factory=list)

    def hook(self, stream: str, layer: int, block: str):
        def on_weights(w: np.ndarray) -> None:
            self.taps.append(AttentionTap(stream, layer, block, w.copy()))
        return on_weights


class RtrLayer(Module):
    """One update layer: joint attention, joint feed-forward, relay
    attention, relay feed-forward, each wrapped in pre-norm residuals.

    The relay update sees the already-updated joints but the previous
    relay value.
    """

    def __init__(self, channels: int, heads: int, ffn_hidden: int,
                 rng: np.random.Generator):
        super().__init__()
        self.joint_norm = self.child("joint_norm", LayerNorm(channels))
        self.joint_attn = self.child("joint_attn", UpdateAttention(channels, heads, rng))
        self.joint_ffn = self.child("joint_ffn", FeedForward(channels, ffn_hidden, rng))
        self.relay_norm = self.child("relay_norm", LayerNorm(channels))
        self.relay_attn = self.child("relay_attn", UpdateAttention(channels, heads, rng))
        self.relay_ffn = self.child("relay_ffn", FeedForward(channels, ffn_hidden, rng))


class RelativeTransformerStream(Module):
    """A stack of update layers over one fixed node topology.

    ``joint_block``/``relay_block`` name the attention taps for export
    ("SJU"/"SRU" spatially, "TJU"/"TRU" temporally).
    """

    def __init__(self, channels: int, num_layers: int, heads: int,
                 table: NeighborTable, include_self_slot: bool,
                 stream_name: str, joint_block: str, relay_block: str,
                 rng: np.random.Generator,
                 rel_pos: RelPosParams | None = None,
                 ffn_multiplier: int = 4):
        super().__init__()
        if num_layers < 1:
            raise ShapeError(f"stream needs at least one layer, got {num_layers}")
        self.table = table
        self.include_self_slot = include_self_slot
        self.stream_name = stream_name
        self.joint_block = joint_block
        self.relay_block = relay_block
        self.layers = self.add_children("layer", [
            RtrLayer(channels, heads, ffn_multiplier * channels, rng)
            for _ in range(num_layers)
        ])
        self.rel_pos = rel_pos
        if rel_pos is not None:
            self.child("rel_pos", rel_pos)

    def forward(self, nodes: Tensor, drop_p: float = 0.0,
                rng: np.random.Generator | None = None,
                recorder: AttentionRecorder | None = None) -> tuple[Tensor, Tensor]:
        """Run all update layers; returns (node features, relay feature).

        ``nodes`` is ``(B', N, C)``; the relay starts as the constituency
        mean and ends as ``(B', C)``.
        """
        relay = relay_init(tz.permute(nodes, (0, 2, 1)))
        training = self.training
        for index, layer in enumerate(self.layers):
            tap = (lambda block: recorder.hook(self.stream_name, index, block)) \
                if recorder is not None else (lambda block: None)
            normed_nodes = layer.joint_norm.forward(nodes)
            normed_relay = layer.joint_norm.forward(relay)
            nodes = tz.add(nodes, update_joint_nodes(
                normed_nodes, normed_relay, self.table, layer.joint_attn,
                include_self_slot=self.include_self_slot, rel_pos=self.rel_pos,
                drop_p=drop_p, training=training, rng=rng,
                on_weights=tap(self.joint_block),
            ))
            nodes = layer.joint_ffn.forward(nodes)
            relay_q = layer.relay_norm.forward(relay)
            nodes_kv = layer.relay_norm.forward(nodes)
            relay = tz.add(relay, update_relay_node(
                relay_q, nodes_kv, layer.relay_attn,
                drop_p=drop_p, training=training, rng=rng,
                on_weights=tap(self.relay_block),
            ))
            relay = layer.relay_ffn.forward(relay)
        return nodes, relay
