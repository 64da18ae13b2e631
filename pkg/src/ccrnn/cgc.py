"""Coupled layer-wise graph convolution with multi-level attention aggregation.

Each convolution layer diffuses the node signal through an adjacency that is
never materialized: the adjacency of layer m is the product E1^(m) E2^(m)T of
two N x L embeddings, and diffusion applies the factors right-to-left so the
cost stays O(K N L F) instead of O(K N^2 F). Layer 1 owns the only directly
trained embeddings; deeper layers derive theirs through a shared affine
coupling. The outputs of all layers are combined by softmax attention over
per-layer scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graphgen import FactorPair
from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat,
    matmul,
    mul,
    reshape,
    softmax,
    transpose_last,
)


@dataclass
class CouplingParams:
    """Shared affine map deriving the next layer's embeddings from this one's."""

    w: Tensor  # L x L, identity at initialization
    b: Tensor  # L, zero at initialization

    @staticmethod
    def identity(rank: int, name: str = "coupling") -> "CouplingParams":
        return CouplingParams(
            w=Tensor(np.eye(rank), requires_grad=True, name=f"{name}.w"),
            b=Tensor(np.zeros(rank), requires_grad=True, name=f"{name}.b"),
        )


@dataclass
class CgcLayerParams:
    """Diffusion filter weights for one layer: K+1 matrices of dim_in x beta."""

    thetas: list[Tensor]

    @property
    def order(self) -> int:
        return len(self.thetas) - 1


@dataclass
class AggregationParams:
    """Scores layer outputs (flattened to N*beta) with one shared linear map."""

    w_alpha: Tensor  # (N*beta) x 1
    b_alpha: Tensor  # (1,)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape if shape is not None else (fan_in, fan_out))


class CoupledStructure:
    """Base embedding pair evolved layer to layer by affine couplings."""

    def __init__(self, base: FactorPair, couplings: list[CouplingParams]):
        self.base = base
        self.couplings = couplings

    @property
    def num_layers(self) -> int:
        return len(self.couplings) + 1

    def layer_factors(self) -> list[tuple[Tensor, Tensor]]:
        factors = [(self.base.e1, self.base.e2)]
        for coupling in self.couplings:
            e1, e2 = factors[-1]
            factors.append(couple_embeddings(e1, e2, coupling))
        return factors

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.e1": self.base.e1, f"{prefix}.e2": self.base.e2}
        for m, c in enumerate(self.couplings):
            out[f"{prefix}.coupling{m}.w"] = c.w
            out[f"{prefix}.coupling{m}.b"] = c.b
        return out


class IndependentStructure:
    """One freely trained embedding pair per layer; no coupling (ablation)."""

    def __init__(self, pairs: list[FactorPair]):
        self.pairs = pairs

    @property
    def num_layers(self) -> int:
        return len(self.pairs)

    def layer_factors(self) -> list[tuple[Tensor, Tensor]]:
        return [(p.e1, p.e2) for p in self.pairs]

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for m, p in enumerate(self.pairs):
            out[f"{prefix}.layer{m}.e1"] = p.e1
            out[f"{prefix}.layer{m}.e2"] = p.e2
        return out


@dataclass
class CgcStack:
    """M convolution layers over a (possibly shared) graph structure."""

    structure: CoupledStructure | IndependentStructure
    layers: list[CgcLayerParams]
    aggregation: AggregationParams

    @property
    def num_layers(self) -> int:
        return len(self.layers)


def couple_embeddings(e1: Tensor, e2: Tensor, coupling: CouplingParams) -> tuple[Tensor, Tensor]:
    """Apply the shared affine map to both embedding factors."""
    if e1.shape[1] != coupling.w.shape[0]:
        raise ShapeError(f"embedding width {e1.shape} does not match coupling {coupling.w.shape}")
    return (
        add(matmul(e1, coupling.w), coupling.b),
        add(matmul(e2, coupling.w), coupling.b),
    )


def propagate_layer(z: Tensor, e1: Tensor, e2: Tensor, layer: CgcLayerParams) -> Tensor:
    """Diffuse `z` through powers of the implied adjacency and apply filters.

    Computed as S_0 = Z, S_{i+1} = E1 (E2^T S_i), output sum_i S_i theta_i.
    The N x N adjacency is never formed.
    """
    if z.shape[-1] != layer.thetas[0].shape[0]:
        raise ShapeError(
            f"signal width {z.shape} does not match filter {layer.thetas[0].shape}"
        )
    e2_t = transpose_last(e2)
    s = z
    out = matmul(s, layer.thetas[0])
    for theta in layer.thetas[1:]:
        s = matmul(e1, matmul(e2_t, s))
        out = add(out, matmul(s, theta))
    return out


def cgc_forward(
    x: Tensor,
    stack: CgcStack,
    layer_factors: list[tuple[Tensor, Tensor]] | None = None,
) -> list[Tensor]:
    """Run all layers, collecting every layer's output for aggregation.

    `layer_factors` lets a caller that evaluates several stacks over the same
    structure (the three GRU gates) derive the per-layer embeddings once.
    """
    if layer_factors is None:
        layer_factors = stack.structure.layer_factors()
    if len(layer_factors) != stack.num_layers:
        raise ShapeError(
            f"{len(layer_factors)} factor pairs for {stack.num_layers} layers"
        )
    outputs: list[Tensor] = []
    z = x
    for (e1, e2), layer in zip(layer_factors, stack.layers):
        z = propagate_layer(z, e1, e2, layer)
        outputs.append(z)
    return outputs


def aggregate_levels(zs: list[Tensor], agg: AggregationParams) -> Tensor:
    """Softmax-weighted sum of the layer outputs.

    Each output is flattened to a station*feature vector, scored by the shared
    linear map, and the scores are normalized across layers.
    """
    if not zs:
        raise ShapeError("no layer outputs to aggregate")
    shape = zs[0].shape
    if any(z.shape != shape for z in zs):
        raise ShapeError(f"layer outputs disagree in shape: {[z.shape for z in zs]}")
    unbatched = len(shape) == 2
    n, beta = shape[-2], shape[-1]
    batch = 1 if unbatched else int(np.prod(shape[:-2]))

    flats = [reshape(z, (batch, n * beta)) for z in zs]
    scores = concat([add(matmul(f, agg.w_alpha), agg.b_alpha) for f in flats], axis=1)
    alpha = softmax(scores, axis=-1)  # (batch, M)

    stacked = concat([reshape(f, (batch, 1, n * beta)) for f in flats], axis=1)
    h = matmul(reshape(alpha, (batch, 1, len(zs))), stacked)
    return reshape(h, (n, beta) if unbatched else shape)


def attention_weights(zs: list[Tensor], agg: AggregationParams) -> np.ndarray:
    """The normalized per-layer attention scores (for inspection and tests)."""
    shape = zs[0].shape
    n, beta = shape[-2], shape[-1]
    batch = 1 if len(shape) == 2 else int(np.prod(shape[:-2]))
    flats = [reshape(z, (batch, n * beta)) for z in zs]
    scores = concat([add(matmul(f, agg.w_alpha), agg.b_alpha) for f in flats], axis=1)
    return softmax(scores, axis=-1).data


def init_layers(
    dim_in: int, beta: int, m_layers: int, k_hops: int, rng: np.random.Generator
) -> list[CgcLayerParams]:
    """Fresh filter weights: layer 1 maps dim_in -> beta, deeper layers beta -> beta."""
    layers = []
    for m in range(m_layers):
        width = dim_in if m == 0 else beta
        thetas = [
            Tensor(glorot(rng, width, beta), requires_grad=True, name=f"layer{m}.theta{i}")
            for i in range(k_hops + 1)
        ]
        layers.append(CgcLayerParams(thetas=thetas))
    return layers


def init_aggregation(n: int, beta: int) -> AggregationParams:
    """Zero-initialized scoring: uniform attention at the first step."""
    return AggregationParams(
        w_alpha=Tensor(np.zeros((n * beta, 1)), requires_grad=True, name="agg.w"),
        b_alpha=Tensor(np.zeros(1), requires_grad=True, name="agg.b"),
    )


def stack_named_parameters(stack: CgcStack, prefix: str, include_structure: bool = True) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    if include_structure:
        out.update(stack.structure.named_parameters(f"{prefix}.graph"))
    for m, layer in enumerate(stack.layers):
        for i, theta in enumerate(layer.thetas):
            out[f"{prefix}.layer{m}.theta{i}"] = theta
    out[f"{prefix}.agg.weight"] = stack.aggregation.w_alpha
    out[f"{prefix}.agg.bias"] = stack.aggregation.b_alpha
    return out


def count_parameters(named: dict[str, Tensor], trainable_only: bool = True) -> int:
    """Total scalar count over distinct tensors (shared tensors counted once)."""
    seen: set[int] = set()
    total = 0
    for t in named.values():
        if id(t) in seen or (trainable_only and not t.requires_grad):
            continue
        seen.add(id(t))
        total += t.size
    return total
