"""Graph-convolution trunk: spatial feature propagation plus temporal
convolution, stacked into the feature extractor both transformer streams
share.

Features flow as ``(B, C, V, T)``: batch, channels, joints, frames. The
spatial convolution propagates along normalized adjacency partitions and
mixes channels per partition; the temporal convolution is a per-channel
1-d filter along frames with symmetric zero padding.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tz
from .module import Module
from .tensor import ShapeError, Tensor
from .topology import AdjacencySet


def _he_scale(fan_in: int) -> float:
    return float(np.sqrt(2.0 / fan_in))


class GraphConv(Module):
    """Per-partition feature propagation and channel mixing.

    Output is the sum over partitions of (propagated features) x (trainable
    channel map). With ``adaptive=True`` each partition's propagation
    matrix gains a free trainable component and a data-dependent one,
    computed as a row-softmax similarity between two learned embeddings of
    the input.
    """

    def __init__(self, in_channels: int, out_channels: int, adjacency: AdjacencySet,
                 rng: np.random.Generator, adaptive: bool = False):
        super().__init__()
        if not adjacency.normalized:
            raise ShapeError("GraphConv: adjacency set has no normalized matrices")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.partitions = [Tensor(m) for m in adjacency.normalized]
        k = len(self.partitions)
        scale = _he_scale(in_channels * k)
        self.weights = [
            self.param(f"weight.{i}", rng.normal(0.0, scale, (in_channels, out_channels)))
            for i in range(k)
        ]
        self.adaptive = adaptive
        if adaptive:
            v = adjacency.normalized[0].shape[0]
            embed = max(1, out_channels // 4)
            self.embed_dim = embed
            self.free_adj = [
                self.param(f"free_adj.{i}", np.zeros((v, v))) for i in range(k)
            ]
            e_scale = _he_scale(in_channels)
            self.theta = [
                self.param(f"theta.{i}", rng.normal(0.0, e_scale, (in_channels, embed)))
                for i in range(k)
            ]
            self.phi = [
                self.param(f"phi.{i}", rng.normal(0.0, e_scale, (in_channels, embed)))
                for i in range(k)
            ]

    def astype(self, dtype):
        super().astype(dtype)
        self.partitions = [Tensor(p.data.astype(dtype)) for p in self.partitions]
        return self

    def _similarity(self, x_btvc: Tensor, k: int) -> Tensor:
        """Row-softmax of embedded pairwise products, one matrix per sample."""
        b, t, v, _ = x_btvc.shape
        theta = tz.matmul(x_btvc, self.theta[k])
        phi = tz.matmul(x_btvc, self.phi[k])
        # flatten frames into the embedding so similarity is per sample
        theta = tz.reshape(tz.permute(theta, (0, 2, 1, 3)), (b, v, t * self.embed_dim))
        phi = tz.reshape(tz.permute(phi, (0, 2, 1, 3)), (b, v, t * self.embed_dim))
        scores = tz.matmul(theta, tz.transpose(phi))
        return tz.softmax(scores)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ShapeError(
                f"GraphConv: expected {self.in_channels} channels, got {x.shape[1]}"
            )
        b, _, v, t = x.shape
        if v != self.partitions[0].shape[0]:
            raise ShapeError(
                f"GraphConv: graph has {self.partitions[0].shape[0]} joints, input has {v}"
            )
        x_btvc = tz.permute(x, (0, 3, 2, 1))
        out: Tensor | None = None
        for k, weight in enumerate(self.weights):
            adj = self.partitions[k]
            if self.adaptive:
                adj = tz.add(tz.add(adj, self.free_adj[k]), self._similarity(x_btvc, k))
                adj = tz.reshape(adj, (b, 1, v, v))
            propagated = tz.matmul(adj, x_btvc)
            mixed = tz.matmul(propagated, weight)
            out = mixed if out is None else tz.add(out, mixed)
        return tz.permute(out, (0, 3, 2, 1))


class TemporalConv(Module):
    """Depthwise 1-d convolution along frames.

    Kernel size must be odd; symmetric zero padding keeps ``ceil(T /
    stride)`` output frames.
    """

    def __init__(self, channels: int, kernel_size: int, stride: int,
                 rng: np.random.Generator):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ShapeError(f"TemporalConv: kernel size must be odd, got {kernel_size}")
        self.channels = channels
        self.kernel_size = kernel_size
        self.stride = stride
        init = np.zeros((channels, kernel_size))
        init[:, kernel_size // 2] = 1.0  # start as identity-in-time
        init += rng.normal(0.0, 0.1 / kernel_size, init.shape)
        self.weight = self.param("weight", init)

    def forward(self, x: Tensor) -> Tensor:
        b, c, v, t = x.shape
        pad = (self.kernel_size - 1) // 2
        t_out = -(-t // self.stride)
        if pad:
            zeros = Tensor(np.zeros((b, c, v, pad), dtype=x.dtype))
            x = tz.concat([zeros, x, zeros], axis=3)
        out: Tensor | None = None
        base = np.arange(t_out) * self.stride
        for j in range(self.kernel_size):
            tap = tz.take(x, base + j, axis=3)
            w_j = tz.reshape(tz.take(self.weight, np.array([j]), axis=1), (1, c, 1, 1))
            term = tz.mul(tap, w_j)
            out = term if out is None else tz.add(out, term)
        return out


class BatchNorm(Module):
    """Channel batch normalization for ``(B, C, V, T)`` features."""

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        shape = (1, channels, 1, 1)
        self.gamma = self.param("gamma", np.ones(shape))
        self.beta = self.param("beta", np.zeros(shape))
        self.running_mean = self.buffer("running_mean", np.zeros(shape))
        self.running_var = self.buffer("running_var", np.ones(shape))

    def forward(self, x: Tensor) -> Tensor:
        return tz.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            axes=(0, 2, 3), training=self.training,
            momentum=self.momentum, eps=self.eps,
        )


class InputNorm(Module):
    """Batch normalization of raw coordinates, one statistic per
    (channel, joint) pair."""

    def __init__(self, channels: int, joints: int):
        super().__init__()
        shape = (1, channels * joints, 1)
        self.gamma = self.param("gamma", np.ones(shape))
        self.beta = self.param("beta", np.zeros(shape))
        self.running_mean = self.buffer("running_mean", np.zeros(shape))
        self.running_var = self.buffer("running_var", np.ones(shape))

    def forward(self, x: Tensor) -> Tensor:
        b, c, v, t = x.shape
        flat = tz.reshape(x, (b, c * v, t))
        normed = tz.batch_norm(
            flat, self.gamma, self.beta, self.running_mean, self.running_var,
            axes=(0, 2), training=self.training,
        )
        return tz.reshape(normed, (b, c, v, t))


class SpatialTemporalBlock(Module):
    """One trunk stage: graph conv, norm, ReLU, temporal conv, norm, ReLU,
    with an identity residual when the shape is preserved."""

    def __init__(self, in_channels: int, out_channels: int, adjacency: AdjacencySet,
                 rng: np.random.Generator, kernel_size: int = 9, stride: int = 1,
                 adaptive: bool = False):
        super().__init__()
        self.gcn = self.child("gcn", GraphConv(in_channels, out_channels, adjacency, rng, adaptive))
        self.bn1 = self.child("bn1", BatchNorm(out_channels))
        self.tcn = self.child("tcn", TemporalConv(out_channels, kernel_size, stride, rng))
        self.bn2 = self.child("bn2", BatchNorm(out_channels))
        self.residual = in_channels == out_channels and stride == 1

    def forward(self, x: Tensor) -> Tensor:
        y = tz.relu(self.bn1.forward(self.gcn.forward(x)))
        y = self.bn2.forward(self.tcn.forward(y))
        if self.residual:
            y = tz.add(y, x)
        return tz.relu(y)


class FeatureTrunk(Module):
    """Input normalization plus a stack of spatial-temporal blocks.

    The frame count is halved (stride 2) at every stage whose channel
    width differs from the previous stage.
    """

    def __init__(self, in_channels: int, joints: int, channel_plan: list[int],
                 adjacency: AdjacencySet, rng: np.random.Generator,
                 kernel_size: int = 9, adaptive: bool = False):
        super().__init__()
        self.input_norm = self.child("input_norm", InputNorm(in_channels, joints))
        blocks = []
        prev = in_channels
        for width in channel_plan:
            stride = 2 if (blocks and width != prev) else 1
            blocks.append(SpatialTemporalBlock(
                prev, width, adjacency, rng,
                kernel_size=kernel_size, stride=stride, adaptive=adaptive,
            ))
            prev = width
        self.blocks = self.add_children("block", blocks)
        self.out_channels = prev

    def out_frames(self, in_frames: int) -> int:
        t = in_frames
        for block in self.blocks:
            t = -(-t // block.tcn.stride)
        return t

    def forward(self, x: Tensor) -> Tensor:
        y = self.input_norm.forward(x)
        for block in self.blocks:
            y = block.forward(y)
        return y
