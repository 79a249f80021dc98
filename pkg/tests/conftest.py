"""Shared fixtures. The heavy session fixture trains both mapper modes on
the default synthetic world once and is reused by inference and acceptance
tests; request it only from tests that genuinely need trained weights."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import pytest

import deltastyle as ds
from deltastyle import evaluation as ev
from deltastyle import relevance as rel
from deltastyle import synthetic_world as sw
from deltastyle.training import split_indices

WORLD_SEED = 11
DATASET_SEED = 21
TRAIN_SEED = 101
RELEVANCE_SEED = 3
ACCEPTANCE_STEPS = 5000


@dataclass
class TrainedBundle:
    world: sw.SyntheticWorld
    dataset: ds.EmbeddingDataset
    styles: np.ndarray        # float64 view of the dataset
    images: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    delta_config: ds.TrainConfig
    delta_checkpoint: ds.Checkpoint
    delta_history: ds.TrainHistory
    naive_checkpoint: ds.Checkpoint
    naive_history: ds.TrainHistory
    matrix: rel.RelevanceMatrix
    table: ds.TextTable
    template: ds.PromptTemplate
    train_seconds: float


@pytest.fixture(scope="session")
def tiny_world() -> sw.SyntheticWorld:
    return sw.gen_world(sw.WorldConfig(), WORLD_SEED)


@pytest.fixture(scope="session")
def trained(tiny_world) -> TrainedBundle:
    world = tiny_world
    dataset = sw.gen_dataset(world, 10000, seed=DATASET_SEED)
    config = ds.TrainConfig(mode="delta", steps=ACCEPTANCE_STEPS,
                            batch_size=64, seed=TRAIN_SEED)
    t0 = time.perf_counter()
    delta_ckpt, delta_hist = ds.train(config, dataset=dataset)
    train_seconds = time.perf_counter() - t0
    naive_ckpt, naive_hist = ds.train(
        ds.TrainConfig(mode="naive", steps=ACCEPTANCE_STEPS, batch_size=64,
                       seed=TRAIN_SEED),
        dataset=dataset)

    clean = sw.with_noise(world, 0.0)
    center = dataset.styles.astype(np.float64).mean(axis=0)
    matrix = rel.estimate_relevance(
        lambda s: sw.image_embed(clean, s),
        rel.probe_samples(world.style_dim, 2048, RELEVANCE_SEED,
                          center=center),
        seed=RELEVANCE_SEED)

    template = ds.PromptTemplate()
    names = [a.name for a in world.attributes]
    subsets = [(n,) for n in names]
    subsets += [(a, b) for i, a in enumerate(names) for b in names[i + 1:]]
    table = sw.export_text_table(world, subsets, template)

    train_idx, val_idx = split_indices(dataset.n, config.val_fraction,
                                       config.seed)
    return TrainedBundle(
        world=world,
        dataset=dataset,
        styles=dataset.styles.astype(np.float64),
        images=dataset.images.astype(np.float64),
        train_idx=train_idx,
        val_idx=val_idx,
        delta_config=config,
        delta_checkpoint=delta_ckpt,
        delta_history=delta_hist,
        naive_checkpoint=naive_ckpt,
        naive_history=naive_hist,
        matrix=matrix,
        table=table,
        template=template,
        train_seconds=train_seconds,
    )


@pytest.fixture(scope="session")
def delta_edit_report(trained) -> ev.EditReport:
    src = trained.val_idx[:16]
    return ev.attribute_edit_report(
        trained.delta_checkpoint.params, trained.world,
        trained.styles[src], trained.images[src])
