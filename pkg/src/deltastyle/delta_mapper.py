"""Coarse-to-fine mapper from embedding deltas to style-space edit directions.

The network has nine sub-modules arranged in three columns:

  Style     column: one stack per level, applied to the source style code.
            Coarse and medium levels hold several per-layer vectors of equal
            width; one shared stack maps each vector in the group. The fine
            level is a single flat vector.
  Condition column: one stack per level, fed the concatenation of the
            condition vector and the source image embedding (2 * clip_dim).
  Fusion    column: per level, the style features are concatenated
            feature-wise with the (group-broadcast) condition embedding and
            mapped back to the level's width.

Level outputs are joined back into one style-sized edit direction. Every
stack is 4x(Linear, LeakyReLU); where a stack changes width, the first layer
projects to the output width and the rest stay square.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .numerics import (
    DEFAULT_NEGATIVE_SLOPE,
    LayerGrad,
    LinearStack,
    StackCache,
    init_stack,
    stack_backward,
    stack_forward,
)

STACK_LAYERS = 4

# Fixed sub-module order used for parameter flattening, optimizer state and
# checkpoint serialization.
STACK_ORDER = (
    "style_coarse", "style_medium", "style_fine",
    "cond_coarse", "cond_medium", "cond_fine",
    "fusion_coarse", "fusion_medium", "fusion_fine",
)


@dataclass(frozen=True)
class StyleLayout:
    """Partition of the style vector into coarse/medium/fine groups."""

    coarse_layers: int
    coarse_dim: int
    medium_layers: int
    medium_dim: int
    fine_channels: int

    def __post_init__(self):
        for name in ("coarse_layers", "coarse_dim", "medium_layers",
                     "medium_dim", "fine_channels"):
            if getattr(self, name) < 1:
                raise DimensionError(f"layout field {name} must be >= 1")

    @property
    def coarse_channels(self) -> int:
        return self.coarse_layers * self.coarse_dim

    @property
    def medium_channels(self) -> int:
        return self.medium_layers * self.medium_dim

    @property
    def total_channels(self) -> int:
        return self.coarse_channels + self.medium_channels + self.fine_channels


# FFHQ-scale StyleGAN2 preset: 26 style layers grouped 3/4/rest, 6048 channels.
PAPER_LAYOUT = StyleLayout(3, 512, 4, 512, 2464)
# Desk-scale preset used by the synthetic world and fast tests.
TINY_LAYOUT = StyleLayout(3, 32, 4, 32, 128)
# Micro preset for exhaustive gradient checks.
MICRO_LAYOUT = StyleLayout(2, 4, 2, 4, 8)

PAPER_CLIP_DIM = 512
TINY_CLIP_DIM = 64
MICRO_CLIP_DIM = 8


def split_style(s: np.ndarray, layout: StyleLayout
                ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split (..., total) style vectors into coarse/medium/fine groups.

    Coarse comes back as (..., coarse_layers, coarse_dim), medium likewise,
    fine stays flat. join_style inverts exactly.
    """
    s = np.asarray(s)
    if s.shape[-1] != layout.total_channels:
        raise DimensionError(
            f"style length {s.shape[-1]} does not match layout total "
            f"{layout.total_channels}"
        )
    lead = s.shape[:-1]
    cc, mc = layout.coarse_channels, layout.medium_channels
    coarse = s[..., :cc].reshape(*lead, layout.coarse_layers, layout.coarse_dim)
    medium = s[..., cc:cc + mc].reshape(*lead, layout.medium_layers,
                                        layout.medium_dim)
    fine = s[..., cc + mc:]
    return coarse, medium, fine


def join_style(coarse: np.ndarray, medium: np.ndarray, fine: np.ndarray
               ) -> np.ndarray:
    """Concatenate the three groups back into flat style vectors."""
    lead = fine.shape[:-1]
    return np.concatenate(
        [coarse.reshape(*lead, -1), medium.reshape(*lead, -1), fine], axis=-1
    )


@dataclass
class MapperParams:
    """All nine sub-module stacks plus the dims they were built for."""

    layout: StyleLayout
    clip_dim: int
    style_coarse: LinearStack
    style_medium: LinearStack
    style_fine: LinearStack
    cond_coarse: LinearStack
    cond_medium: LinearStack
    cond_fine: LinearStack
    fusion_coarse: LinearStack
    fusion_medium: LinearStack
    fusion_fine: LinearStack

    def __post_init__(self):
        lay = self.layout
        expect = {
            "style_coarse": (lay.coarse_dim, lay.coarse_dim),
            "style_medium": (lay.medium_dim, lay.medium_dim),
            "style_fine": (lay.fine_channels, lay.fine_channels),
            "cond_coarse": (2 * self.clip_dim, lay.coarse_dim),
            "cond_medium": (2 * self.clip_dim, lay.medium_dim),
            "cond_fine": (2 * self.clip_dim, lay.fine_channels),
            "fusion_coarse": (2 * lay.coarse_dim, lay.coarse_dim),
            "fusion_medium": (2 * lay.medium_dim, lay.medium_dim),
            "fusion_fine": (2 * lay.fine_channels, lay.fine_channels),
        }
        for name, (in_dim, out_dim) in expect.items():
            stack: LinearStack = getattr(self, name)
            if stack.in_dim != in_dim or stack.out_dim != out_dim:
                raise DimensionError(
                    f"{name} is {stack.in_dim}->{stack.out_dim}, layout "
                    f"requires {in_dim}->{out_dim}"
                )

    def stacks(self) -> list[LinearStack]:
        return [getattr(self, name) for name in STACK_ORDER]


def _stack_dims(in_dim: int, out_dim: int) -> list[int]:
    return [in_dim] + [out_dim] * STACK_LAYERS


def init_mapper_params(layout: StyleLayout, clip_dim: int,
                       rng: np.random.Generator,
                       negative_slope: float = DEFAULT_NEGATIVE_SLOPE
                       ) -> MapperParams:
    """Freshly initialized mapper for the given layout and embedding width."""
    if clip_dim < 1:
        raise DimensionError("clip_dim must be >= 1")

    def make(in_dim: int, out_dim: int) -> LinearStack:
        return init_stack(_stack_dims(in_dim, out_dim), rng, negative_slope)

    cond_in = 2 * clip_dim
    return MapperParams(
        layout=layout,
        clip_dim=clip_dim,
        style_coarse=make(layout.coarse_dim, layout.coarse_dim),
        style_medium=make(layout.medium_dim, layout.medium_dim),
        style_fine=make(layout.fine_channels, layout.fine_channels),
        cond_coarse=make(cond_in, layout.coarse_dim),
        cond_medium=make(cond_in, layout.medium_dim),
        cond_fine=make(cond_in, layout.fine_channels),
        fusion_coarse=make(2 * layout.coarse_dim, layout.coarse_dim),
        fusion_medium=make(2 * layout.medium_dim, layout.medium_dim),
        fusion_fine=make(2 * layout.fine_channels, layout.fine_channels),
    )


def param_list(params: MapperParams) -> list[np.ndarray]:
    """Flat list of parameter arrays in the fixed serialization order."""
    out: list[np.ndarray] = []
    for stack in params.stacks():
        for layer in stack.layers:
            out.append(layer.weight)
            out.append(layer.bias)
    return out


def param_labels(params: MapperParams) -> list[str]:
    out = []
    for name, stack in zip(STACK_ORDER, params.stacks()):
        for k in range(len(stack.layers)):
            out.append(f"{name}.layer{k}.weight")
            out.append(f"{name}.layer{k}.bias")
    return out


def count_params(params: MapperParams) -> int:
    return sum(int(p.size) for p in param_list(params))


@dataclass
class MapperActivations:
    """Intermediate features and stack caches kept for the backward pass."""

    single: bool
    style_groups: tuple[np.ndarray, np.ndarray, np.ndarray]
    cond_input: np.ndarray
    style_features: tuple[np.ndarray, np.ndarray, np.ndarray]
    cond_features: tuple[np.ndarray, np.ndarray, np.ndarray]
    fusion_inputs: tuple[np.ndarray, np.ndarray, np.ndarray]
    style_caches: tuple[StackCache, StackCache, StackCache]
    cond_caches: tuple[StackCache, StackCache, StackCache]
    fusion_caches: tuple[StackCache, StackCache, StackCache]


@dataclass
class MapperGrads:
    """Parameter gradients (param_list order) plus input gradients."""

    params: list[np.ndarray]
    d_style: np.ndarray
    d_image: np.ndarray
    d_cond: np.ndarray


def _as_batch(name: str, x: np.ndarray, dim: int, single: bool) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if not single:
            raise DimensionError(f"{name}: mixed single/batch inputs")
        x = x[None, :]
    elif x.ndim != 2:
        raise DimensionError(f"{name}: expected a vector or a batch of rows")
    if x.shape[-1] != dim:
        raise DimensionError(f"{name}: got width {x.shape[-1]}, expected {dim}")
    return x


def mapper_forward(params: MapperParams, s1: np.ndarray, i1: np.ndarray,
                   cond: np.ndarray) -> tuple[np.ndarray, MapperActivations]:
    """Predict a style edit direction from a source code and a condition.

    ``cond`` holds an image-embedding difference during training and a
    text-embedding difference at inference; the topology is identical.
    Inputs may be single vectors or batches of rows (all three alike).
    """
    single = np.asarray(s1).ndim == 1
    s1 = _as_batch("s1", s1, params.layout.total_channels, single)
    i1 = _as_batch("i1", i1, params.clip_dim, single)
    cond = _as_batch("cond", cond, params.clip_dim, single)
    if not (s1.shape[0] == i1.shape[0] == cond.shape[0]):
        raise DimensionError("batch sizes of s1, i1 and cond differ")

    groups = split_style(s1, params.layout)
    cond_input = np.concatenate([cond, i1], axis=-1)

    e_s, s_caches = [], []
    for stack, group in zip(
            (params.style_coarse, params.style_medium, params.style_fine),
            groups):
        feat, cache = stack_forward(stack, group)
        e_s.append(feat)
        s_caches.append(cache)

    e_i, c_caches = [], []
    for stack in (params.cond_coarse, params.cond_medium, params.cond_fine):
        feat, cache = stack_forward(stack, cond_input)
        e_i.append(feat)
        c_caches.append(cache)

    # Condition embeddings are replicated across each group's layer axis and
    # concatenated feature-wise with the style features.
    fusion_in = []
    for level, (feat_s, feat_i) in enumerate(zip(e_s, e_i)):
        if level < 2:
            tiled = np.broadcast_to(
                feat_i[:, None, :], feat_s.shape
            )
            fusion_in.append(np.concatenate([feat_s, tiled], axis=-1))
        else:
            fusion_in.append(np.concatenate([feat_s, feat_i], axis=-1))

    out, f_caches = [], []
    for stack, fin in zip(
            (params.fusion_coarse, params.fusion_medium, params.fusion_fine),
            fusion_in):
        o, cache = stack_forward(stack, fin)
        out.append(o)
        f_caches.append(cache)

    delta = join_style(out[0], out[1], out[2])
    acts = MapperActivations(
        single=single,
        style_groups=tuple(groups),
        cond_input=cond_input,
        style_features=tuple(e_s),
        cond_features=tuple(e_i),
        fusion_inputs=tuple(fusion_in),
        style_caches=tuple(s_caches),
        cond_caches=tuple(c_caches),
        fusion_caches=tuple(f_caches),
    )
    return (delta[0] if single else delta), acts


def mapper_backward(params: MapperParams, acts: MapperActivations,
                    d_delta: np.ndarray) -> MapperGrads:
    """Backpropagate dL/d(edit direction) through all nine stacks."""
    d_delta = np.asarray(d_delta, dtype=np.float64)
    if acts.single:
        d_delta = d_delta[None, :]
    lay = params.layout
    if d_delta.shape[-1] != lay.total_channels:
        raise DimensionError("gradient width does not match layout")

    d_groups_out = split_style(d_delta, lay)
    stack_grads: dict[str, list[LayerGrad]] = {}
    d_style_groups = []
    d_cond_input = np.zeros_like(acts.cond_input)

    fusion_names = ("fusion_coarse", "fusion_medium", "fusion_fine")
    style_names = ("style_coarse", "style_medium", "style_fine")
    cond_names = ("cond_coarse", "cond_medium", "cond_fine")
    widths = (lay.coarse_dim, lay.medium_dim, lay.fine_channels)

    for level in range(3):
        fus_stack = getattr(params, fusion_names[level])
        d_fin, g_fus = stack_backward(fus_stack, acts.fusion_caches[level],
                                      d_groups_out[level])
        stack_grads[fusion_names[level]] = g_fus
        w = widths[level]
        d_es = d_fin[..., :w]
        d_ei = d_fin[..., w:]
        if level < 2:
            d_ei = d_ei.sum(axis=1)  # undo broadcast over the layer axis

        sty_stack = getattr(params, style_names[level])
        d_group, g_sty = stack_backward(sty_stack, acts.style_caches[level],
                                        d_es)
        stack_grads[style_names[level]] = g_sty
        d_style_groups.append(d_group)

        con_stack = getattr(params, cond_names[level])
        d_ci, g_con = stack_backward(con_stack, acts.cond_caches[level], d_ei)
        stack_grads[cond_names[level]] = g_con
        d_cond_input += d_ci

    d_style = join_style(*d_style_groups)
    d_cond = d_cond_input[..., :params.clip_dim]
    d_image = d_cond_input[..., params.clip_dim:]

    flat: list[np.ndarray] = []
    for name in STACK_ORDER:
        for g in stack_grads[name]:
            flat.append(g.weight)
            flat.append(g.bias)

    if acts.single:
        d_style, d_image, d_cond = d_style[0], d_image[0], d_cond[0]
    return MapperGrads(params=flat, d_style=d_style, d_image=d_image,
                       d_cond=d_cond)


def naive_forward(params: MapperParams, s1: np.ndarray, i1: np.ndarray,
                  cond: np.ndarray) -> tuple[np.ndarray, MapperActivations]:
    """Same topology as mapper_forward; only the condition semantics differ.

    Here ``cond`` is a full target embedding (an image embedding while
    training, a raw text embedding at inference) rather than a difference.
    """
    return mapper_forward(params, s1, i1, cond)
