"""Dense-network machinery written directly against numpy.

Linear stacks with LeakyReLU activations, hand-derived backprop, cosine
similarity with gradients, Adam, and a central-finite-difference gradient
checker. Everything runs in float64; weights use the (out, in) convention
and inputs may carry arbitrary leading batch axes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, NumericalError, ZeroNormError

# Negative slope is not pinned by the architecture itself; 0.2 is the
# prevailing convention in style-mapper networks.
DEFAULT_NEGATIVE_SLOPE = 0.2


def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x >= 0.0, x, slope * x)


def _leaky_grad(pre: np.ndarray, slope: float) -> np.ndarray:
    return np.where(pre >= 0.0, 1.0, slope)


@dataclass
class LinearLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray    # (out,)
    leaky: bool = True

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise DimensionError("layer expects a 2-d weight and 1-d bias")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise DimensionError(
                f"bias length {self.bias.shape[0]} does not match "
                f"weight rows {self.weight.shape[0]}"
            )

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class LinearStack:
    """An ordered chain of linear layers, each optionally LeakyReLU-activated."""

    layers: list[LinearLayer]
    negative_slope: float = DEFAULT_NEGATIVE_SLOPE

    def __post_init__(self):
        if not self.layers:
            raise DimensionError("stack needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise DimensionError(
                    f"layer dims do not chain: {a.out_dim} -> {b.in_dim}"
                )
        for layer in self.layers:
            if not (np.isfinite(layer.weight).all() and np.isfinite(layer.bias).all()):
                raise NumericalError("stack weights must be finite")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim


@dataclass
class StackCache:
    """Per-layer inputs and pre-activations kept for the backward pass."""

    inputs: list[np.ndarray]
    preacts: list[np.ndarray]


@dataclass
class LayerGrad:
    weight: np.ndarray
    bias: np.ndarray


def init_stack(dims: Sequence[int], rng: np.random.Generator,
               negative_slope: float = DEFAULT_NEGATIVE_SLOPE) -> LinearStack:
    """Build a stack of len(dims)-1 LeakyReLU layers with Kaiming-uniform weights.

    Fan-in scaling uses the configured slope so pre-activation variance stays
    level through the chain; biases start at zero.
    """
    if len(dims) < 2:
        raise DimensionError("need at least an input and an output dim")
    layers = []
    gain_sq = 2.0 / (1.0 + negative_slope ** 2)
    for fan_in, fan_out in zip(dims, dims[1:]):
        bound = np.sqrt(3.0 * gain_sq / fan_in)
        weight = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append(LinearLayer(weight, np.zeros(fan_out), leaky=True))
    return LinearStack(layers, negative_slope)


def stack_forward(stack: LinearStack, x: np.ndarray) -> tuple[np.ndarray, StackCache]:
    """Run x of shape (..., in_dim) through the stack; cache for backward."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != stack.in_dim:
        raise DimensionError(
            f"input dim {x.shape[-1]} does not match stack input {stack.in_dim}"
        )
    inputs, preacts = [], []
    h = x
    for layer in stack.layers:
        inputs.append(h)
        z = h @ layer.weight.T + layer.bias
        preacts.append(z)
        h = leaky_relu(z, stack.negative_slope) if layer.leaky else z
    return h, StackCache(inputs, preacts)


def stack_backward(stack: LinearStack, cache: StackCache,
                   d_out: np.ndarray) -> tuple[np.ndarray, list[LayerGrad]]:
    """Exact gradients of a scalar loss through the stack.

    ``d_out`` is dL/dy with the same shape as the forward output. Returns
    dL/dx and per-layer parameter gradients, summed over all batch axes.
    """
    d_out = np.asarray(d_out, dtype=np.float64)
    if d_out.shape[-1] != stack.out_dim:
        raise DimensionError(
            f"gradient dim {d_out.shape[-1]} does not match stack output "
            f"{stack.out_dim}"
        )
    if len(cache.inputs) != len(stack.layers):
        raise DimensionError("cache does not match stack depth")
    grads: list[LayerGrad] = []
    g = d_out
    for layer, x_in, z in zip(reversed(stack.layers), reversed(cache.inputs),
                              reversed(cache.preacts)):
        if layer.leaky:
            g = g * _leaky_grad(z, stack.negative_slope)
        g_flat = g.reshape(-1, layer.out_dim)
        d_w = g_flat.T @ x_in.reshape(-1, layer.in_dim)
        d_b = g_flat.sum(axis=0)
        g = g @ layer.weight
        grads.append(LayerGrad(d_w, d_b))
    grads.reverse()
    return g, grads


@dataclass
class CosineResult:
    value: float
    grad_a: np.ndarray
    grad_b: np.ndarray


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Plain cosine similarity, clipped into [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroNormError("cosine of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_sim(a: np.ndarray, b: np.ndarray) -> CosineResult:
    """Cosine similarity with analytic gradients wrt both arguments.

    d cos / da = b / (|a||b|) - cos * a / |a|^2, and symmetrically for b.
    The gradient is orthogonal to its own argument (scale invariance).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError("cosine_sim expects two equal-length vectors")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroNormError("cosine of a zero vector is undefined")
    value = float(np.clip(a @ b / (na * nb), -1.0, 1.0))
    grad_a = b / (na * nb) - (value / (na * na)) * a
    grad_b = a / (na * nb) - (value / (nb * nb)) * b
    return CosineResult(value, grad_a, grad_b)


@dataclass
class AdamState:
    """First/second moment accumulators shaped like the parameter list."""

    lr: float
    beta1: float
    beta2: float
    eps: float
    step: int
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def init_adam(params: Sequence[np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    return AdamState(
        lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0,
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
    )


def adam_step(state: AdamState, params: Sequence[np.ndarray],
              grads: Sequence[np.ndarray],
              names: Sequence[str] | None = None) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(state.m) or len(params) != len(grads):
        raise DimensionError("params, grads and moments must align")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise DimensionError(f"shape mismatch in parameter block {i}")
        if not np.isfinite(g).all():
            label = names[i] if names is not None else f"block {i}"
            raise NumericalError(f"non-finite gradient in {label}")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


LossFn = Callable[[Sequence[np.ndarray]], tuple[float, list[np.ndarray]]]


def grad_check(loss_fn: LossFn, params: Sequence[np.ndarray],
               h: float = 1e-6, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Compare analytic gradients of ``loss_fn`` against central differences.

    ``loss_fn(params) -> (loss, grads)`` must be deterministic; perturbations
    are applied to the arrays in place and restored. Returns the maximum of
    |analytic - fd| / max(1, |analytic|) over the checked coordinates (all of
    them unless ``max_coords`` caps the sample).
    """
    _, grads = loss_fn(params)
    coords: list[tuple[int, tuple[int, ...]]] = [
        (i, idx) for i, p in enumerate(params) for idx in np.ndindex(p.shape)
    ]
    if max_coords is not None and max_coords < len(coords):
        if rng is None:
            rng = np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in pick]
    worst = 0.0
    for i, idx in coords:
        orig = params[i][idx]
        params[i][idx] = orig + h
        up, _ = loss_fn(params)
        params[i][idx] = orig - h
        down, _ = loss_fn(params)
        params[i][idx] = orig
        fd = (up - down) / (2.0 * h)
        ana = grads[i][idx]
        worst = max(worst, abs(ana - fd) / max(1.0, abs(ana)))
    return worst
