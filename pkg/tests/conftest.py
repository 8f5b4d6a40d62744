"""Shared fixtures: frozen toy models and the cached synthetic benchmark."""

from dataclasses import replace

import numpy as np
import pytest

from hyperrec import dataio, evalkit, trainer
from hyperrec.objective import TripletBatch
from hyperrec.trainer import TrainConfig

# Benchmark recipe: 200 users / 500 items / 10k interactions, unit skew.
BENCH_DATA_SEED = 20240809
BENCH_CFG = TrainConfig()  # stock hyperparameters, 30 epochs
BENCH_SEEDS = (1, 2, 3)

TOY_SEED = 12345


def make_toy_gradient_setup(seed=TOY_SEED):
    """Random small model, batch and config for derivative checking.

    All attention parameters (including both bias terms) are drawn nonzero
    so every tensor has a gradient well above finite-difference noise.
    """
    rng = np.random.default_rng(seed)
    dim, feat_dim, n_users, n_items, n_triplets, width = 8, 6, 5, 10, 3, 4
    params = {
        "user": rng.normal(0, 0.1, (n_users, dim)),
        "item": rng.normal(0, 0.1, (n_items, dim)),
        "item_aux": rng.normal(0, 0.1, (n_items, dim)),
        "w_user": rng.normal(0, 0.3, (dim, dim)),
        "w_item": rng.normal(0, 0.3, (dim, dim)),
        "w_aux": rng.normal(0, 0.3, (dim, dim)),
        "w_feat": rng.normal(0, 0.3, (dim, feat_dim)),
        "b_hidden": rng.normal(0, 0.3, dim),
        "w_out": rng.normal(0, 0.3, dim),
        "b_out": np.asarray(rng.normal(0, 0.3)),
        "basepoint": rng.normal(0, 0.05, dim),
    }
    neighbors = rng.integers(0, n_items, (n_triplets, width))
    mask = np.ones((n_triplets, width))
    mask[0, 3] = 0.0
    mask[2, 2:] = 0.0
    batch = TripletBatch(
        users=np.array([0, 1, 2]),
        pos=np.array([1, 2, 3]),
        neg=np.array([4, 5, 6]),
        neighbors=neighbors,
        neighbor_mask=mask,
        neighbor_feats=rng.normal(0, 1.0, (n_triplets, width, feat_dim)),
    )
    cfg = TrainConfig(dim=dim, gamma=0.5, reg_lambda=0.01, margin=0.5,
                      curvature=1.0, neighbors=width)
    return params, batch, cfg


@pytest.fixture(scope="session")
def toy_gradient_setup():
    return make_toy_gradient_setup()


@pytest.fixture(scope="session")
def tiny_split():
    """Small but trainable dataset for fast integration tests."""
    dataset, store = dataio.synth_generate(
        users=30, items=60, interactions=1200, skew=1.0, seed=99
    )
    return dataio.chrono_split(dataset), store


@pytest.fixture(scope="session")
def benchmark_split():
    dataset, store = dataio.synth_generate(
        users=200, items=500, interactions=10_000, skew=1.0, seed=BENCH_DATA_SEED
    )
    return dataio.chrono_split(dataset), store


@pytest.fixture(scope="session")
def bench_run(benchmark_split):
    """Memoized train + test evaluation on the benchmark.

    Heavy acceptance criteria share trained models through this cache, so a
    (variant, seed, overrides) combination trains exactly once per session.
    """
    split, store = benchmark_split
    cache: dict = {}

    def run(variant="complete", seed=1, **overrides):
        key = (variant, seed, tuple(sorted(overrides.items())))
        if key not in cache:
            cfg = replace(BENCH_CFG, variant=variant, seed=seed, **overrides)
            result = trainer.train(split, store, cfg)
            wiring = trainer.apply_variant(cfg)
            report = evalkit.evaluate(result.tables, split, store, cfg,
                                      which="test", wiring=wiring)
            cache[key] = (result, report, cfg)
        return cache[key]

    return run
