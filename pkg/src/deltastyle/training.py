"""Text-free training loop over paired embedding records.

Pairs of records are sampled; the difference of their image embeddings (or,
in naive mode, the raw target embedding) conditions the mapper, which is
supervised toward the true style difference with an L2 + cosine objective and
updated with Adam. All randomness is drawn from per-purpose streams keyed by
(seed, stream, step), so an interrupted run resumed from a checkpoint
reproduces the uninterrupted trajectory bit for bit.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .delta_mapper import (
    TINY_CLIP_DIM,
    TINY_LAYOUT,
    PAPER_CLIP_DIM,
    PAPER_LAYOUT,
    MapperParams,
    StyleLayout,
    init_mapper_params,
    mapper_backward,
    mapper_forward,
    param_labels,
    param_list,
)
from .errors import (
    ConfigError,
    DegenerateBatchError,
    NumericalError,
    ValidationError,
)
from .numerics import DEFAULT_NEGATIVE_SLOPE, AdamState, adam_step, init_adam

# Sub-stream tags for the seeded generators.
_STREAM_INIT = 0
_STREAM_SPLIT = 1
_STREAM_VAL = 2
_STREAM_SAMPLE = 3

MODES = ("delta", "naive")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "delta"
    batch_size: int = 64
    steps: int = 5000
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    layout: StyleLayout = TINY_LAYOUT
    clip_dim: int = TINY_CLIP_DIM
    negative_slope: float = DEFAULT_NEGATIVE_SLOPE
    rec_weight: float = 1.0
    sim_weight: float = 1.0
    val_fraction: float = 0.05
    val_pairs: int = 256
    dataset_path: str | None = None
    checkpoint_every: int = 0  # 0 disables periodic snapshots

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")

    def digest(self) -> int:
        """Identity of the parameter trajectory this config produces.

        Covers everything that shapes the trained weights; step count,
        snapshot cadence and file paths are deliberately excluded so a run
        can be resumed past its original horizon.
        """
        from .embedding_store import fnv1a

        lay = self.layout
        text = "\n".join(
            f"{k}={v}" for k, v in sorted({
                "mode": self.mode,
                "batch_size": self.batch_size,
                "learning_rate": repr(self.learning_rate),
                "beta1": repr(self.beta1),
                "beta2": repr(self.beta2),
                "eps": repr(self.eps),
                "seed": self.seed,
                "layout": (f"{lay.coarse_layers}x{lay.coarse_dim}+"
                           f"{lay.medium_layers}x{lay.medium_dim}+"
                           f"{lay.fine_channels}"),
                "clip_dim": self.clip_dim,
                "negative_slope": repr(self.negative_slope),
                "rec_weight": repr(self.rec_weight),
                "sim_weight": repr(self.sim_weight),
                "val_fraction": repr(self.val_fraction),
                "val_pairs": self.val_pairs,
            }.items())
        )
        return fnv1a(text.encode("utf-8"))


def tiny_preset(**overrides) -> TrainConfig:
    """Desk-scale defaults; the published rate diverges at this scale."""
    return TrainConfig(**overrides)


def paper_preset(**overrides) -> TrainConfig:
    """Published setting: 6048-channel layout, lr 0.5, batch 64."""
    base = dict(layout=PAPER_LAYOUT, clip_dim=PAPER_CLIP_DIM,
                learning_rate=0.5, batch_size=64)
    base.update(overrides)
    return TrainConfig(**base)


# --------------------------------------------------------------------------
# pair sampling


def sample_pairs(n: int, count: int, rng: np.random.Generator
                 ) -> tuple[np.ndarray, np.ndarray]:
    """``count`` ordered pairs (j, k), j != k, uniform over all such pairs."""
    if n < 2:
        raise ValidationError("pair sampling needs at least 2 records")
    j = rng.integers(0, n, size=count)
    k = rng.integers(0, n - 1, size=count)
    k = k + (k >= j)
    return j, k


def sample_pair(n: int, rng: np.random.Generator) -> tuple[int, int]:
    j, k = sample_pairs(n, 1, rng)
    return int(j[0]), int(k[0])


# --------------------------------------------------------------------------
# loss


@dataclass
class LossResult:
    value: float
    grad: np.ndarray
    rec: float
    sim: float


def _batch_loss(pred: np.ndarray, target: np.ndarray,
                rec_weight: float, sim_weight: float):
    """Vectorized L2 + (1 - cosine) loss with analytic gradients per row.

    Callers guarantee nonzero target rows. A bitwise-equal row costs exactly
    zero; a zero prediction contributes the L2 subgradient only (its cosine
    is treated as zero with no gradient).
    """
    diff = pred - target
    rec = np.linalg.norm(diff, axis=1)
    pn = np.linalg.norm(pred, axis=1)
    tn = np.linalg.norm(target, axis=1)
    dot = np.einsum("bd,bd->b", pred, target)
    safe_pn = np.where(pn == 0.0, 1.0, pn)
    cos = np.clip(dot / (safe_pn * tn), -1.0, 1.0)
    cos = np.where(pn == 0.0, 0.0, cos)
    cos = np.where(rec == 0.0, 1.0, cos)
    sim = 1.0 - cos
    loss = rec_weight * rec + sim_weight * sim

    safe_rec = np.where(rec == 0.0, 1.0, rec)
    g_rec = np.where(rec[:, None] == 0.0, 0.0, diff / safe_rec[:, None])
    g_cos = (target / (safe_pn * tn)[:, None]
             - (cos / (safe_pn * safe_pn))[:, None] * pred)
    g_cos = np.where(pn[:, None] == 0.0, 0.0, g_cos)
    grad = rec_weight * g_rec - sim_weight * g_cos
    # Subgradient at the exact minimum; also scrubs rounding residue from
    # the two cosine terms cancelling.
    grad = np.where(rec[:, None] == 0.0, 0.0, grad)
    return loss, grad, rec, sim


def compute_loss(pred: np.ndarray, target: np.ndarray,
                 rec_weight: float = 1.0, sim_weight: float = 1.0
                 ) -> LossResult:
    """Reconstruction-plus-similarity loss for a single direction pair."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 1:
        raise ConfigError("compute_loss expects two equal-length vectors")
    if np.linalg.norm(target) == 0.0:
        raise DegenerateBatchError(
            "degenerate pair: the true style change is zero")
    loss, grad, rec, sim = _batch_loss(pred[None, :], target[None, :],
                                       rec_weight, sim_weight)
    return LossResult(float(loss[0]), grad[0], float(rec[0]), float(sim[0]))


# --------------------------------------------------------------------------
# stepping


@dataclass
class PairBatch:
    s1: np.ndarray
    i1: np.ndarray
    s2: np.ndarray
    i2: np.ndarray
    j: np.ndarray
    k: np.ndarray


@dataclass
class StepStats:
    loss: float
    rec: float
    sim: float
    skipped: int
    effective: int


def train_step(params: MapperParams, batch: PairBatch, mode: str,
               adam: AdamState, rec_weight: float = 1.0,
               sim_weight: float = 1.0, step: int | None = None) -> StepStats:
    """One optimizer step over a batch; loss is reported pre-update.

    Pairs whose true style change is exactly zero are skipped and counted;
    if nothing survives the step fails with "empty effective batch".
    """
    target = batch.s2 - batch.s1
    keep = np.linalg.norm(target, axis=1) > 0.0
    skipped = int((~keep).sum())
    if not keep.any():
        raise DegenerateBatchError(
            f"empty effective batch: all {len(keep)} sampled pairs are "
            f"degenerate" + (f" at step {step}" if step is not None else ""))
    s1, i1 = batch.s1[keep], batch.i1[keep]
    s2, i2 = batch.s2[keep], batch.i2[keep]
    target = target[keep]
    cond = (i2 - i1) if mode == "delta" else i2

    pred, acts = mapper_forward(params, s1, i1, cond)
    losses, grad_rows, rec, sim = _batch_loss(pred, target,
                                              rec_weight, sim_weight)
    effective = int(keep.sum())
    loss = float(losses.mean())
    if not np.isfinite(loss):
        bad = batch.j[keep][~np.isfinite(losses)]
        raise NumericalError(
            f"non-finite loss"
            + (f" at step {step}" if step is not None else "")
            + f"; offending source indices {bad[:8].tolist()}")
    grads = mapper_backward(params, acts, grad_rows / effective)
    adam_step(adam, param_list(params), grads.params,
              names=param_labels(params))
    return StepStats(loss=loss, rec=float(rec.mean()), sim=float(sim.mean()),
                     skipped=skipped, effective=effective)


# --------------------------------------------------------------------------
# history


@dataclass
class TrainHistory:
    steps: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    rec: list[float] = field(default_factory=list)
    sim: list[float] = field(default_factory=list)
    val_cosine: dict[int, float] = field(default_factory=dict)
    skipped_pairs: int = 0

    def append(self, step: int, stats: StepStats) -> None:
        self.steps.append(step)
        self.loss.append(stats.loss)
        self.rec.append(stats.rec)
        self.sim.append(stats.sim)
        self.skipped_pairs += stats.skipped

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "L", "L_rec", "L_sim", "val_cosine"])
            for i, step in enumerate(self.steps):
                val = self.val_cosine.get(step, "")
                writer.writerow([step, repr(self.loss[i]), repr(self.rec[i]),
                                 repr(self.sim[i]),
                                 repr(val) if val != "" else ""])


# --------------------------------------------------------------------------
# full runs


def split_indices(n: int, val_fraction: float, seed: int
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle split; validation is dropped entirely if it can't
    hold two records."""
    perm = np.random.default_rng([seed, _STREAM_SPLIT]).permutation(n)
    v = int(round(n * val_fraction))
    if v < 2:
        return perm, perm[:0]
    if n - v < 2:
        raise ValidationError("dataset too small for the requested split")
    return perm[v:], perm[:v]


def _validation_cosines(params: MapperParams, styles: np.ndarray,
                        images: np.ndarray, pairs, mode: str) -> np.ndarray:
    j, k = pairs
    s1, s2 = styles[j], styles[k]
    i1, i2 = images[j], images[k]
    target = s2 - s1
    cond = (i2 - i1) if mode == "delta" else i2
    pred, _ = mapper_forward(params, s1, i1, cond)
    pn = np.linalg.norm(pred, axis=1)
    tn = np.linalg.norm(target, axis=1)
    ok = (pn > 0) & (tn > 0)
    dot = np.einsum("bd,bd->b", pred, target)
    return np.clip(dot[ok] / (pn[ok] * tn[ok]), -1.0, 1.0)


def validation_cosine(params: MapperParams, styles: np.ndarray,
                      images: np.ndarray, pairs, mode: str) -> float:
    vals = _validation_cosines(params, styles, images, pairs, mode)
    return float(vals.mean()) if vals.size else float("nan")


def train(config: TrainConfig, dataset=None, resume_from=None,
          checkpoint_path: str | Path | None = None):
    """Run (or resume) a training job; returns (Checkpoint, TrainHistory).

    ``resume_from`` may be a Checkpoint or a path to one; it must carry
    trainer state and have been produced by a trajectory-equivalent config.
    With ``checkpoint_path`` set, a resumable snapshot lands there every
    ``config.checkpoint_every`` steps and at the end.
    """
    from .embedding_store import (
        Checkpoint,
        read_checkpoint,
        read_datasets,
        validate,
        write_checkpoint,
    )

    if dataset is None:
        if config.dataset_path is None:
            raise ConfigError("no dataset given and config carries no path")
        # Comma-separated paths concatenate, so differently sourced record
        # sets (e.g. inverted real images plus sampled fakes) can be mixed.
        dataset = read_datasets(config.dataset_path)
    report = validate(dataset)
    if not report.ok:
        raise ValidationError(f"dataset invalid: {report.summary()}")
    if dataset.style_dim != config.layout.total_channels:
        raise ConfigError(
            f"dataset style_dim {dataset.style_dim} does not match layout "
            f"total {config.layout.total_channels}")
    if dataset.clip_dim != config.clip_dim:
        raise ConfigError(
            f"dataset clip_dim {dataset.clip_dim} does not match config "
            f"{config.clip_dim}")

    digest = config.digest()
    if resume_from is not None:
        ckpt = (resume_from if isinstance(resume_from, Checkpoint)
                else read_checkpoint(resume_from))
        if ckpt.config_digest != digest:
            raise ConfigError(
                "resume checkpoint was produced by a different configuration")
        if ckpt.trainer_state is None:
            raise ConfigError("resume checkpoint carries no trainer state")
        params = ckpt.params
        adam = ckpt.trainer_state
        start_step = adam.step
    else:
        rng = np.random.default_rng([config.seed, _STREAM_INIT])
        params = init_mapper_params(config.layout, config.clip_dim, rng,
                                    config.negative_slope)
        adam = init_adam(param_list(params), lr=config.learning_rate,
                         beta1=config.beta1, beta2=config.beta2,
                         eps=config.eps)
        start_step = 0
    if start_step > config.steps:
        raise ConfigError(
            f"checkpoint is already at step {start_step}, past the requested "
            f"{config.steps}")

    styles = dataset.styles.astype(np.float64)
    images = dataset.images.astype(np.float64)
    train_idx, val_idx = split_indices(dataset.n, config.val_fraction,
                                       config.seed)
    val_pairs = None
    if val_idx.size >= 2 and config.val_pairs > 0:
        vrng = np.random.default_rng([config.seed, _STREAM_VAL])
        vj, vk = sample_pairs(val_idx.size, config.val_pairs, vrng)
        val_pairs = (val_idx[vj], val_idx[vk])
    epoch_steps = max(1, int(np.ceil(train_idx.size / config.batch_size)))

    history = TrainHistory()
    for step in range(start_step, config.steps):
        rng = np.random.default_rng([config.seed, _STREAM_SAMPLE, step])
        j_local, k_local = sample_pairs(train_idx.size, config.batch_size, rng)
        j, k = train_idx[j_local], train_idx[k_local]
        batch = PairBatch(s1=styles[j], i1=images[j],
                          s2=styles[k], i2=images[k], j=j, k=k)
        stats = train_step(params, batch, config.mode, adam,
                           config.rec_weight, config.sim_weight, step=step)
        history.append(step, stats)
        done = step + 1
        if val_pairs is not None and (done % epoch_steps == 0
                                      or done == config.steps):
            history.val_cosine[step] = validation_cosine(
                params, styles, images, val_pairs, config.mode)
        if (checkpoint_path is not None and config.checkpoint_every > 0
                and done % config.checkpoint_every == 0
                and done != config.steps):
            write_checkpoint(checkpoint_path, Checkpoint(
                params=params, seed=config.seed, config_digest=digest,
                trainer_state=adam))

    checkpoint = Checkpoint(params=params, seed=config.seed,
                            config_digest=digest, trainer_state=adam)
    if checkpoint_path is not None:
        write_checkpoint(checkpoint_path, checkpoint)
    return checkpoint, history


def config_for_mode(config: TrainConfig, mode: str) -> TrainConfig:
    return replace(config, mode=mode)
