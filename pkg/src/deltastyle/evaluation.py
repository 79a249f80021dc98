"""Desk-scale metrics: alignment gap statistics, oracle accuracy, leakage,
mode comparison, and a 2-D PCA export for plotting.

Everything here is a pure, deterministic function of its inputs; reports are
plain dataclasses with CSV writers so downstream tooling stays optional.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .delta_mapper import MapperParams, mapper_forward
from .errors import ConfigError, DimensionError
from .relevance import FilterConfig, RelevanceMatrix, apply_filter, channel_relevance
from .synthetic_world import SyntheticWorld, sample_records, text_embed
from .training import TrainConfig, config_for_mode, split_indices, train


def _row_cosines(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise DimensionError("paired matrices must have equal 2-d shapes")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if (na == 0).any() or (nb == 0).any():
        raise ConfigError("zero rows have no direction to compare")
    return np.clip(np.einsum("bd,bd->b", a, b) / (na * nb), -1.0, 1.0)


@dataclass(frozen=True)
class GapStats:
    raw_mean: float
    raw_std: float
    delta_mean: float
    delta_std: float

    @property
    def margin(self) -> float:
        return self.delta_mean - self.raw_mean


def gap_stats(images: np.ndarray, texts: np.ndarray,
              delta_images: np.ndarray, delta_texts: np.ndarray) -> GapStats:
    """Mean/std cosine of raw (image, text) pairs vs difference pairs."""
    if len(images) < 2 or len(delta_images) < 2:
        raise ConfigError("gap statistics need at least two pairs of each kind")
    raw = _row_cosines(images, texts)
    delta = _row_cosines(delta_images, delta_texts)
    return GapStats(
        raw_mean=float(raw.mean()), raw_std=float(raw.std()),
        delta_mean=float(delta.mean()), delta_std=float(delta.std()),
    )


def direction_accuracy(pred: np.ndarray, true: np.ndarray) -> float:
    """Cosine between a predicted and a ground-truth edit direction."""
    return float(_row_cosines(np.asarray(pred)[None, :],
                              np.asarray(true)[None, :])[0])


def leakage(delta: np.ndarray, support: np.ndarray) -> float:
    """Fraction of squared edit magnitude landing outside the support.

    ``support`` holds channel indices. An all-zero edit leaks nothing.
    """
    delta = np.asarray(delta, dtype=np.float64)
    total = float(np.sum(delta * delta))
    if total == 0.0:
        return 0.0
    inside = float(np.sum(delta[np.asarray(support, dtype=int)] ** 2))
    return (total - inside) / total


def cross_source_variance(outputs: np.ndarray) -> float:
    """Total variance of edited outputs across source inputs.

    Collapse toward a single "average" result shows up as a small value:
    it is the mean squared distance of each row from the mean row.
    """
    outputs = np.asarray(outputs, dtype=np.float64)
    centered = outputs - outputs.mean(axis=0, keepdims=True)
    return float(np.mean(np.sum(centered * centered, axis=1)))


# --------------------------------------------------------------------------
# attribute-level evaluation of a trained mapper


@dataclass(frozen=True)
class AttributeMetrics:
    name: str
    accuracy: float
    leakage: float
    variance: float


@dataclass(frozen=True)
class EditReport:
    per_attribute: tuple[AttributeMetrics, ...]

    @property
    def accuracy(self) -> float:
        return float(np.mean([m.accuracy for m in self.per_attribute]))

    @property
    def mean_leakage(self) -> float:
        return float(np.mean([m.leakage for m in self.per_attribute]))

    @property
    def variance(self) -> float:
        return float(np.mean([m.variance for m in self.per_attribute]))


def attribute_edit_report(params: MapperParams, world: SyntheticWorld,
                          styles: np.ndarray, images: np.ndarray,
                          mode: str = "delta",
                          matrix: RelevanceMatrix | None = None,
                          filter_config: FilterConfig | None = None
                          ) -> EditReport:
    """Edit every source toward each attribute and score against the oracle.

    In delta mode the condition is the text difference; in naive mode it is
    the raw target-prompt embedding, mirroring how each model was trained.
    """
    styles = np.asarray(styles, dtype=np.float64)
    images = np.asarray(images, dtype=np.float64)
    n = styles.shape[0]
    source_text = text_embed(world, ())
    rows = []
    for attr in world.attributes:
        target_text = text_embed(world, (attr.name,))
        delta_t = target_text - source_text
        cond = delta_t if mode == "delta" else target_text
        preds, _ = mapper_forward(params, styles, images,
                                  np.broadcast_to(cond, (n, cond.size)))
        if filter_config is not None and matrix is not None:
            scores = channel_relevance(matrix, delta_t)
            preds = np.stack([apply_filter(p, scores, filter_config)
                              for p in preds])
        oracle = attr.style_direction
        accs = _row_cosines(preds, np.broadcast_to(oracle, preds.shape))
        leaks = [leakage(p, attr.support) for p in preds]
        rows.append(AttributeMetrics(
            name=attr.name,
            accuracy=float(accs.mean()),
            leakage=float(np.mean(leaks)),
            variance=cross_source_variance(styles + preds),
        ))
    return EditReport(tuple(rows))


# --------------------------------------------------------------------------
# delta vs naive comparison


@dataclass(frozen=True)
class ModeRow:
    mode: str
    accuracy: float
    leakage: float
    variance: float


@dataclass(frozen=True)
class CompareReport:
    rows: tuple[ModeRow, ...]

    def row(self, mode: str) -> ModeRow:
        for r in self.rows:
            if r.mode == mode:
                return r
        raise KeyError(mode)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["mode", "accuracy", "leakage",
                             "cross_source_variance"])
            for r in self.rows:
                writer.writerow([r.mode, repr(r.accuracy), repr(r.leakage),
                                 repr(r.variance)])


def compare_modes(world: SyntheticWorld, dataset, config: TrainConfig,
                  eval_sources: int = 32) -> CompareReport:
    """Train both modes under identical budgets/seeds and score them.

    Sources for scoring come from the held-out split (or the tail of the
    dataset when no split is configured).
    """
    styles = dataset.styles.astype(np.float64)
    images = dataset.images.astype(np.float64)
    _, val_idx = split_indices(dataset.n, config.val_fraction, config.seed)
    pool = val_idx if val_idx.size >= eval_sources else np.arange(dataset.n)
    chosen = pool[:eval_sources]
    rows = []
    for mode in ("delta", "naive"):
        ckpt, _ = train(config_for_mode(config, mode), dataset=dataset)
        report = attribute_edit_report(ckpt.params, world,
                                       styles[chosen], images[chosen],
                                       mode=mode)
        rows.append(ModeRow(mode=mode, accuracy=report.accuracy,
                            leakage=report.mean_leakage,
                            variance=report.variance))
    return CompareReport(tuple(rows))


# --------------------------------------------------------------------------
# gap-statistics sampling and PCA export


@dataclass(frozen=True)
class GapSamples:
    images: np.ndarray
    texts: np.ndarray
    delta_images: np.ndarray
    delta_texts: np.ndarray


def world_gap_samples(world: SyntheticWorld, records: int, pairs: int,
                      seed: int) -> GapSamples:
    """Paired embeddings plus difference pairs drawn from the world.

    Pairs of records sharing the exact attribute set have no text direction
    (their prompts coincide), so those are dropped from the delta sets.
    """
    from .training import sample_pairs

    batch = sample_records(world, records, seed)
    names = [a.name for a in world.attributes]
    texts = np.stack([
        text_embed(world, tuple(n for n, on in zip(names, row) if on))
        for row in batch.active
    ])
    rng = np.random.default_rng([seed, 101])
    j, k = sample_pairs(records, pairs, rng)
    keep = (batch.active[j] != batch.active[k]).any(axis=1)
    return GapSamples(
        images=batch.images,
        texts=texts,
        delta_images=batch.images[k[keep]] - batch.images[j[keep]],
        delta_texts=texts[k[keep]] - texts[j[keep]],
    )


@dataclass(frozen=True)
class ProjectionResult:
    labels: tuple[str, ...]
    coords: tuple[np.ndarray, ...]   # one (n_i, 2) block per input set
    explained_variance_ratio: np.ndarray

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["set", "row", "x", "y"])
            for label, block in zip(self.labels, self.coords):
                for i, (x, y) in enumerate(block):
                    writer.writerow([label, i, repr(float(x)),
                                     repr(float(y))])


def export_projection(sets: Sequence[tuple[str, np.ndarray]],
                      path: str | Path | None = None) -> ProjectionResult:
    """Project labeled embedding sets onto their two leading principal axes.

    All sets share one centering and one basis so their relative geometry is
    preserved. Component signs are fixed by making each axis's largest-loading
    coordinate positive, keeping the export reproducible.
    """
    if not sets:
        raise ConfigError("nothing to project")
    blocks = [np.asarray(m, dtype=np.float64) for _, m in sets]
    stacked = np.vstack(blocks)
    if stacked.shape[0] < 2:
        raise ConfigError("projection needs at least two points")
    centered = stacked - stacked.mean(axis=0, keepdims=True)
    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    basis = vt[:2].copy()
    if basis.shape[0] < 2:
        basis = np.vstack([basis, np.zeros_like(basis[0])])
    for axis in range(2):
        lead = np.argmax(np.abs(basis[axis]))
        if basis[axis][lead] < 0:
            basis[axis] = -basis[axis]
    coords_all = centered @ basis.T
    power = singular ** 2
    ratio = (power / power.sum() if power.sum() > 0
             else np.zeros_like(power))
    out, start = [], 0
    for block in blocks:
        out.append(coords_all[start:start + len(block)])
        start += len(block)
    result = ProjectionResult(
        labels=tuple(label for label, _ in sets),
        coords=tuple(out),
        explained_variance_ratio=ratio[:2],
    )
    if path is not None:
        result.write_csv(path)
    return result
