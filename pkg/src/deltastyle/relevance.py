"""Per-channel CLIP-space response estimation and edit-direction filtering.

Each style channel is probed symmetrically (+/- delta) through an image
encoder; the unit-normalized mean response is that channel's row. Scoring a
text direction against the rows tells which channels plausibly express it,
and channels scoring under the disentanglement threshold are zeroed out of a
predicted edit.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, DimensionError, ZeroNormError

# Rows whose mean response stays under this norm are recorded as dead.
DEAD_CHANNEL_NORM = 1e-9

# Threshold used in the FFHQ-scale setting with 512-wide embeddings.
PAPER_BETA = 0.03
PAPER_BETA_CLIP_DIM = 512


@dataclass(frozen=True)
class FilterConfig:
    """Disentanglement threshold and a global strength scale."""

    beta: float = PAPER_BETA
    strength: float = 1.0

    def __post_init__(self):
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")


@dataclass
class RelevanceMatrix:
    """Unit-norm (or zero) CLIP-space response direction per style channel."""

    rows: np.ndarray  # (style_dim, clip_dim) float32
    probe: float
    samples_per_channel: int

    def __post_init__(self):
        rows = np.array(self.rows, dtype="<f4", order="C", copy=True)
        if rows.ndim != 2:
            raise DimensionError("relevance rows must form a 2-d matrix")
        rows.flags.writeable = False
        self.rows = rows

    @property
    def style_dim(self) -> int:
        return self.rows.shape[0]

    @property
    def clip_dim(self) -> int:
        return self.rows.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, RelevanceMatrix):
            return NotImplemented
        return (self.rows.shape == other.rows.shape
                and self.rows.tobytes() == other.rows.tobytes()
                and self.probe == other.probe
                and self.samples_per_channel == other.samples_per_channel)


Encoder = Callable[[np.ndarray], np.ndarray]


def probe_samples(style_dim: int, count: int, seed: int,
                  center: np.ndarray | None = None,
                  scale: float = 1.0) -> np.ndarray:
    """Isotropic Gaussian style codes around ``center`` for probing.

    Structured sample sets (real codes) concentrate embedding directions and
    bias the projected responses; isotropic probing keeps the per-channel
    rows close to the encoder's true column directions.
    """
    rng = np.random.default_rng([seed, 0x5A])
    out = rng.normal(0.0, scale, size=(count, style_dim))
    if center is not None:
        out = out + np.asarray(center, dtype=np.float64)
    return out


def default_probe_magnitude(style_samples: np.ndarray) -> float:
    """Scale-aware default: a tenth of the median per-channel spread."""
    spread = np.median(np.std(style_samples.astype(np.float64), axis=0))
    if spread <= 0:
        raise ConfigError("style samples have no spread; pass probe explicitly")
    return 0.1 * float(spread)


def estimate_relevance(encoder: Encoder, style_samples: np.ndarray,
                       probe: float | None = None,
                       samples_per_channel: int = 256,
                       seed: int = 0) -> RelevanceMatrix:
    """Probe every style channel through ``encoder`` and collect responses.

    ``encoder`` maps a (m, style_dim) batch of style codes to (m, clip_dim)
    unit-norm embeddings and must be deterministic. For each channel c, m
    sample codes are drawn (per-channel seeded, so channels are independent
    and order-free) and the mean of encoder(s + d*e_c) - encoder(s - d*e_c)
    is normalized into row c; rows with negligible response come back zero.
    """
    samples = np.asarray(style_samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] < 1:
        raise DimensionError("style_samples must be a non-empty matrix")
    if samples_per_channel < 1:
        raise ConfigError("samples_per_channel must be >= 1")
    if probe is None:
        probe = default_probe_magnitude(samples)
    if probe <= 0:
        raise ConfigError("probe magnitude must be positive")

    n, style_dim = samples.shape
    clip_dim = np.asarray(encoder(samples[:1])).shape[1]
    rows = np.zeros((style_dim, clip_dim), dtype=np.float64)
    for c in range(style_dim):
        rng = np.random.default_rng([seed, c])
        idx = rng.integers(0, n, size=samples_per_channel)
        base = samples[idx]
        up = base.copy()
        up[:, c] += probe
        down = base.copy()
        down[:, c] -= probe
        diff = np.asarray(encoder(up)) - np.asarray(encoder(down))
        mean = diff.mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm >= DEAD_CHANNEL_NORM:
            rows[c] = mean / norm
    return RelevanceMatrix(rows=rows, probe=float(probe),
                           samples_per_channel=samples_per_channel)


def channel_relevance(matrix: RelevanceMatrix, delta_t: np.ndarray
                      ) -> np.ndarray:
    """Cosine of every channel's response row against a text direction."""
    delta_t = np.asarray(delta_t, dtype=np.float64)
    if delta_t.shape != (matrix.clip_dim,):
        raise DimensionError(
            f"delta_t has shape {delta_t.shape}, matrix expects "
            f"({matrix.clip_dim},)")
    norm = np.linalg.norm(delta_t)
    if norm == 0.0:
        raise ZeroNormError("channel relevance of a zero text delta")
    scores = matrix.rows.astype(np.float64) @ (delta_t / norm)
    return np.clip(scores, -1.0, 1.0)


def apply_filter(delta_s: np.ndarray, scores: np.ndarray,
                 config: FilterConfig) -> np.ndarray:
    """Zero channels scoring strictly under beta; scale the survivors.

    Ties (|score| == beta) are kept. With strength 1 the operation is
    idempotent, monotone in beta, and equivariant under positive scaling of
    the edit direction.
    """
    delta_s = np.asarray(delta_s, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if delta_s.shape != scores.shape:
        raise DimensionError("edit direction and scores must align")
    keep = np.abs(scores) >= config.beta
    return np.where(keep, config.strength * delta_s, 0.0)


def beta_for_clip_dim(clip_dim: int, beta: float = PAPER_BETA) -> float:
    """Rescale the published threshold to another embedding width.

    Chance-level |cosine| between a fixed direction and an unrelated response
    row scales like 1/sqrt(clip_dim), so holding the threshold's position
    relative to that noise floor means multiplying by
    sqrt(512 / clip_dim).
    """
    if clip_dim < 1:
        raise ConfigError("clip_dim must be >= 1")
    return beta * float(np.sqrt(PAPER_BETA_CLIP_DIM / clip_dim))
