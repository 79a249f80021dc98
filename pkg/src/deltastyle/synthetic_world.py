"""A fully known generator/encoder stand-in used as the desk-scale oracle.

The world is linear at heart: a style code passes through a generator matrix
into feature space and a projector matrix into embedding space, then gets
unit-normalized like a contrastive image encoder would. Attributes are sparse
style directions with disjoint supports; their embedding-space responses
double as text directions, and all text embeddings share a constant offset so
the raw image/text clusters sit apart while difference vectors line up. That
reproduces, in a measurable form, the cross-modal alignment that makes
training on image deltas transfer to text deltas.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .delta_mapper import TINY_LAYOUT, StyleLayout
from .errors import ConfigError, UnknownAttributeError, ZeroNormError

DEFAULT_ATTRIBUTE_NAMES = (
    "smile", "eyeglasses", "bangs", "blond_hair",
    "beard", "young", "makeup", "hat",
)


@dataclass(frozen=True)
class WorldConfig:
    layout: StyleLayout = TINY_LAYOUT
    clip_dim: int = 64
    feature_dim: int = 96
    n_attributes: int = 8
    support_size: int = 8
    attribute_names: tuple[str, ...] | None = None
    # Amplitude an active attribute adds along its style direction.
    activation_level: float = 1.0
    attribute_probability: float = 0.5
    # Shared style offset all records sit on. Large relative to attribute
    # amplitudes, so embedding differences stay in the near-linear regime and
    # single-attribute image deltas land at text-delta scale.
    style_offset_scale: float = 12.0
    # Isotropic per-record style variation unrelated to any attribute.
    base_style_scale: float = 0.015
    image_noise: float = 0.01
    # Text model: unit base direction, per-attribute term scale, gap offset
    # as a fraction of the (unit) embedding norm.
    text_base_scale: float = 1.0
    text_attr_scale: float = 0.28
    gap_scale: float = 0.5
    # How tightly a support's generator columns cluster around the shared
    # attribute direction (residual fraction).
    support_coherence: float = 0.35
    # Optional mild nonlinearity in feature space; 0 keeps the oracle exact.
    tanh_mix: float = 0.0

    @property
    def style_dim(self) -> int:
        return self.layout.total_channels

    def names(self) -> tuple[str, ...]:
        if self.attribute_names is not None:
            if len(self.attribute_names) != self.n_attributes:
                raise ConfigError("attribute_names length mismatch")
            return self.attribute_names
        if self.n_attributes <= len(DEFAULT_ATTRIBUTE_NAMES):
            return DEFAULT_ATTRIBUTE_NAMES[:self.n_attributes]
        extra = tuple(f"attr{i}" for i in
                      range(len(DEFAULT_ATTRIBUTE_NAMES), self.n_attributes))
        return DEFAULT_ATTRIBUTE_NAMES + extra


@dataclass(frozen=True)
class Attribute:
    name: str
    style_direction: np.ndarray  # (style_dim,) unit norm, sparse
    support: np.ndarray          # sorted channel indices
    text_direction: np.ndarray   # (clip_dim,) unit norm


@dataclass(frozen=True)
class SyntheticWorld:
    config: WorldConfig
    seed: int
    generator: np.ndarray     # (feature_dim, style_dim)
    projector: np.ndarray     # (clip_dim, feature_dim)
    attributes: tuple[Attribute, ...]
    gap_offset: np.ndarray    # (clip_dim,)
    text_base: np.ndarray     # (clip_dim,)
    style_offset: np.ndarray  # (style_dim,)

    @property
    def style_dim(self) -> int:
        return self.generator.shape[1]

    @property
    def clip_dim(self) -> int:
        return self.projector.shape[0]

    def attribute(self, name: str) -> Attribute:
        for attr in self.attributes:
            if attr.name == name:
                return attr
        raise UnknownAttributeError(
            f"unknown attribute {name!r}; world knows "
            f"{[a.name for a in self.attributes]}")

    def response_map(self) -> np.ndarray:
        """Composed (clip_dim, style_dim) linear map, the analytic oracle."""
        return self.projector @ self.generator


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def gen_world(config: WorldConfig, seed: int) -> SyntheticWorld:
    """Deterministically build a world from a seed."""
    style_dim = config.style_dim
    needed = config.n_attributes * config.support_size
    if needed > style_dim:
        raise ConfigError(
            f"infeasible support allocation: {config.n_attributes} attributes"
            f" x {config.support_size} channels > {style_dim} style channels")
    if config.gap_scale <= 0:
        raise ConfigError("gap_scale must be positive; the offset must exist")
    names = config.names()

    rng = np.random.default_rng([seed])
    channels = rng.permutation(style_dim)[:needed]
    supports = channels.reshape(config.n_attributes, config.support_size)

    # Generator columns: unit vectors; a support's columns cluster around a
    # shared feature direction (sign-matched with the style direction) so the
    # channels of one attribute respond coherently in embedding space.
    generator = rng.normal(size=(config.feature_dim, style_dim))
    generator /= np.linalg.norm(generator, axis=0, keepdims=True)

    rho = config.support_coherence
    attr_specs = []
    for k in range(config.n_attributes):
        support = np.sort(supports[k])
        common = _unit(rng.normal(size=config.feature_dim))
        signs = rng.choice((-1.0, 1.0), size=config.support_size)
        direction = np.zeros(style_dim)
        direction[support] = signs / np.sqrt(config.support_size)
        for ch, sign in zip(support, signs):
            residual = _unit(rng.normal(size=config.feature_dim))
            generator[:, ch] = _unit(sign * common + rho * residual)
        attr_specs.append((names[k], direction, support))

    projector = rng.normal(size=(config.clip_dim, config.feature_dim))
    projector /= np.sqrt(config.feature_dim)

    response = projector @ generator
    attributes = []
    for name, direction, support in attr_specs:
        text_dir = _unit(response @ direction)
        attributes.append(Attribute(
            name=name,
            style_direction=direction,
            support=support,
            text_direction=text_dir,
        ))

    gap_offset = config.gap_scale * _unit(rng.normal(size=config.clip_dim))
    text_base = config.text_base_scale * _unit(rng.normal(size=config.clip_dim))

    # The shared offset is attribute-neutral in embedding space: its response
    # is projected off the attribute response directions, so flipping an
    # attribute moves the embedding tangentially rather than radially.
    directions = np.stack([a.style_direction for a in attributes])
    raw_offset = _unit(rng.normal(size=style_dim))
    responses = (response @ directions.T)
    coef, *_ = np.linalg.lstsq(responses, response @ raw_offset, rcond=None)
    style_offset = (config.style_offset_scale
                    * _unit(raw_offset - directions.T @ coef))
    return SyntheticWorld(
        config=config, seed=seed, generator=generator, projector=projector,
        attributes=tuple(attributes), gap_offset=gap_offset,
        text_base=text_base, style_offset=style_offset,
    )


def _features(world: SyntheticWorld, styles: np.ndarray) -> np.ndarray:
    lin = styles @ world.generator.T
    mix = world.config.tanh_mix
    if mix > 0:
        lin = (1.0 - mix) * lin + mix * np.tanh(lin)
    return lin


def image_embed(world: SyntheticWorld, styles: np.ndarray,
                rng: np.random.Generator | None = None) -> np.ndarray:
    """Unit-norm embeddings for style codes; pass a generator to add noise."""
    styles = np.asarray(styles, dtype=np.float64)
    squeeze = styles.ndim == 1
    if squeeze:
        styles = styles[None, :]
    raw = _features(world, styles) @ world.projector.T
    if rng is not None and world.config.image_noise > 0:
        raw = raw + rng.normal(0.0, world.config.image_noise, size=raw.shape)
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    if (norms == 0).any():
        raise ZeroNormError("style code maps to a zero embedding")
    out = raw / norms
    return out[0] if squeeze else out


def text_embed(world: SyntheticWorld, attrs=(),
               normalized: bool = True) -> np.ndarray:
    """Embedding for a prompt mentioning ``attrs``; empty means the bare category.

    The un-normalized variant is base + sum(attr directions) + gap, so the gap
    cancels exactly in differences; the normalized variant mirrors a real
    contrastive encoder.
    """
    attrs = tuple(attrs)
    if len(set(attrs)) != len(attrs):
        raise UnknownAttributeError(f"duplicate attributes in {attrs}")
    total = world.text_base + world.gap_offset
    scale = world.config.text_attr_scale
    for name in attrs:
        total = total + scale * world.attribute(name).text_direction
    return _unit(total) if normalized else total


@dataclass(frozen=True)
class SampleBatch:
    styles: np.ndarray  # (n, style_dim) float64
    images: np.ndarray  # (n, clip_dim) float64, unit rows
    active: np.ndarray  # (n, n_attributes) bool


def sample_records(world: SyntheticWorld, n: int, seed: int) -> SampleBatch:
    """Draw n records: attribute on/off pattern, base variation, noisy embed."""
    if n < 1:
        raise ConfigError("need at least one record")
    cfg = world.config
    rng = np.random.default_rng([seed])
    active = rng.random((n, cfg.n_attributes)) < cfg.attribute_probability
    base = rng.normal(0.0, cfg.base_style_scale, size=(n, world.style_dim))
    directions = np.stack([a.style_direction for a in world.attributes])
    styles = (world.style_offset + base
              + cfg.activation_level * (active.astype(np.float64)
                                        @ directions))
    images = image_embed(world, styles, rng=rng)
    return SampleBatch(styles=styles, images=images, active=active)


def gen_dataset(world: SyntheticWorld, n: int, seed: int):
    """Materialize records as a storable dataset (float32 containers)."""
    from .embedding_store import EmbeddingDataset

    batch = sample_records(world, n, seed)
    return EmbeddingDataset(images=batch.images.astype(np.float32),
                            styles=batch.styles.astype(np.float32))


def oracle_direction(world: SyntheticWorld, attrs,
                     s: np.ndarray | None = None) -> np.ndarray:
    """Ground-truth style change for turning the named attributes on.

    The generator is linear, so the direction is independent of the source
    code; ``s`` is accepted for signature symmetry with learned predictors.
    """
    attrs = tuple(attrs)
    if not attrs:
        raise UnknownAttributeError("oracle direction needs at least one attribute")
    out = np.zeros(world.style_dim)
    for name in attrs:
        out += world.config.activation_level * world.attribute(name).style_direction
    return out


def least_squares_map(delta_images: np.ndarray, delta_styles: np.ndarray
                      ) -> np.ndarray:
    """Global linear baseline: least-squares solve of delta-embedding -> delta-style.

    Returns the (style_dim, clip_dim) matrix M minimizing ||dI @ M.T - dS||.
    On noiseless un-normalized linear data this recovers the pseudo-inverse
    of the world's composed response map.
    """
    delta_images = np.asarray(delta_images, dtype=np.float64)
    delta_styles = np.asarray(delta_styles, dtype=np.float64)
    if delta_images.shape[0] != delta_styles.shape[0]:
        raise ConfigError("need equally many image and style deltas")
    solution, *_ = np.linalg.lstsq(delta_images, delta_styles, rcond=None)
    return solution.T


def fit_delta_baseline(dataset, pairs: int, seed: int) -> np.ndarray:
    """least_squares_map over record pairs sampled from a stored dataset."""
    from .training import sample_pairs

    rng = np.random.default_rng([seed, 0x15])
    j, k = sample_pairs(dataset.n, pairs, rng)
    images = dataset.images.astype(np.float64)
    styles = dataset.styles.astype(np.float64)
    return least_squares_map(images[k] - images[j], styles[k] - styles[j])


def export_text_table(world: SyntheticWorld, subsets, template):
    """Whole-prompt embedding table for the given attribute subsets.

    The bare-category prompt is always included; entry names are the rendered
    prompts, so lookups at inference go through the exact same strings.
    """
    from .embedding_store import TextTable

    rendered: list[str] = []
    vectors: list[np.ndarray] = []

    def add(subset) -> None:
        name = template.render(subset)
        if name in rendered:
            return
        rendered.append(name)
        vectors.append(text_embed(world, subset).astype(np.float32))

    add(())
    for subset in subsets:
        add(tuple(subset))
    return TextTable(tuple(rendered), np.stack(vectors))


def with_noise(world: SyntheticWorld, image_noise: float) -> SyntheticWorld:
    """Same world with a different image-noise level (e.g. 0 for probing)."""
    return replace(world, config=replace(world.config, image_noise=image_noise))
