"""Brute-force attention oracle.

Re-computes every node update with explicit nested Python loops over
batch instances, heads, nodes, constituency members and channel
coordinates: per-node dot products, a plain softmax over the real
constituency only, and a weighted sum. No index tables, no masking
tricks, no batched linear algebra. Intentionally slow and entirely
independent of the vectorized implementation it checks.
"""

from __future__ import annotations

import math

import numpy as np

from .rtr import RelPosParams, UpdateAttention
from .topology import NeighborTable


def _project(vec: np.ndarray, weight: np.ndarray) -> list[float]:
    """Row-vector times matrix, one coordinate at a time."""
    out = []
    for col in range(weight.shape[1]):
        acc = 0.0
        for c in range(weight.shape[0]):
            acc += float(vec[c]) * float(weight[c, col])
        out.append(acc)
    return out


def _dot(a, b) -> float:
    return sum(float(x) * float(y) for x, y in zip(a, b))


def _softmax(scores: list[float]) -> list[float]:
    exps = [math.exp(s) for s in scores]
    total = sum(exps)
    return [e / total for e in exps]


def _attend_one(query_vec, member_vecs, params: UpdateAttention,
                extra_scores=None) -> np.ndarray:
    """Multi-head attention of one query over an explicit member list."""
    heads, dk = params.heads, params.head_dim
    w_q = params.w_q.data
    w_k = params.w_k.data
    w_v = params.w_v.data
    w_o = params.w_o.data
    concat: list[float] = []
    for h in range(heads):
        lo, hi = h * dk, (h + 1) * dk
        q = _project(query_vec, w_q)[lo:hi]
        scores = []
        for m, member in enumerate(member_vecs):
            k = _project(member, w_k)[lo:hi]
            s = _dot(q, k) / math.sqrt(dk)
            if extra_scores is not None:
                s += extra_scores(h, q, m)
            scores.append(s)
        weights = _softmax(scores)
        head_out = [0.0] * dk
        for w, member in zip(weights, member_vecs):
            v = _project(member, w_v)[lo:hi]
            for d in range(dk):
                head_out[d] += w * v[d]
        concat.extend(head_out)
    return np.array(_project(np.array(concat), w_o))


def joint_update_oracle(
    nodes: np.ndarray,
    relay: np.ndarray,
    table: NeighborTable,
    params: UpdateAttention,
    include_self_slot: bool = False,
    rel_pos: RelPosParams | None = None,
) -> np.ndarray:
    """Loop evaluation of a joint-node update.

    ``nodes`` is ``(B, N, C)``, ``relay`` ``(B, C)``. The constituency of
    node x is its masked-in table row, plus x itself when the table does
    not already contain it, plus the relay.
    """
    b, n, c = nodes.shape
    out = np.zeros_like(nodes)
    for bi in range(b):
        for x in range(n):
            members = []
            offsets = []
            for j in range(table.max_neighbors):
                if table.mask[x, j]:
                    y = int(table.index[x, j])
                    members.append(nodes[bi, y])
                    offsets.append(x - y)
            if include_self_slot:
                members.append(nodes[bi, x])
                offsets.append(0)
            members.append(relay[bi])
            offsets.append(None)

            extra = None
            if rel_pos is not None:
                w_pos = rel_pos.w_k_position.data
                enc = rel_pos.encodings.data
                bias = rel_pos.position_bias.data
                dk = params.head_dim

                def extra(h, q, m, offsets=offsets, w_pos=w_pos, enc=enc,
                          bias=bias, dk=dk):
                    if offsets[m] is None:
                        return 0.0
                    off = max(-rel_pos.max_offset, min(rel_pos.max_offset, offsets[m]))
                    key = _project(enc[off + rel_pos.max_offset], w_pos)[h * dk:(h + 1) * dk]
                    biased = [qd + float(bias[h * dk + d]) for d, qd in enumerate(q)]
                    return _dot(biased, key)

            out[bi, x] = _attend_one(nodes[bi, x], members, params, extra)
    return out


def relay_update_oracle(
    relay: np.ndarray,
    nodes: np.ndarray,
    params: UpdateAttention,
) -> np.ndarray:
    """Loop evaluation of a relay-node update: the relay attends over
    itself followed by every node."""
    b, n, c = nodes.shape
    out = np.zeros_like(relay)
    for bi in range(b):
        members = [relay[bi]] + [nodes[bi, y] for y in range(n)]
        out[bi] = _attend_one(relay[bi], members, params)
    return out
