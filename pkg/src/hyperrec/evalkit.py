"""Evaluation: per-user AUC over sampled negatives, ablation and
hyperparameter orchestration, and trained-embedding analysis.

The protocol is implicit-feedback AUC: for each user with at least one
warm test positive, score the positives against negatives sampled
uniformly (seeded per user) from the items the user never interacted
with, and count the fraction of correctly ordered pairs, ties at half
weight.  Cold users and items (absent from the training split) are
skipped and counted, never scored.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import hypgeo
from .dataio import SplitDataset, VisualFeatureStore, build_history
from .errors import ConfigError, HyperRecError, InvalidInputError
from .model import (
    COMPLETE,
    EmbeddingTables,
    VariantWiring,
    attention_temperature,
    user_representation,
)

HISTOGRAM_BINS = 50

# Stream labels keeping per-user generators independent of each other.
_NEGATIVE_STREAM = 0x4E
_NEIGHBOR_STREAM = 0x55


def auc_user(scores_pos, scores_neg) -> Optional[float]:
    """Fraction of (positive, negative) pairs ranked correctly; ties count 0.5.

    Computed through midrank sums, which agrees exactly with the pairwise
    double loop.  An empty side returns None so callers can skip the user.
    """
    sp = np.asarray(scores_pos, dtype=np.float64)
    sn = np.asarray(scores_neg, dtype=np.float64)
    if sp.size == 0 or sn.size == 0:
        return None
    ranks = _average_ranks(np.concatenate([sp, sn]))
    rank_sum = float(np.sum(ranks[: sp.size]))
    n_pos, n_neg = sp.size, sn.size
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the mean rank of their group."""
    n = x.size
    order = np.argsort(x, kind="mergesort")
    sorted_x = x[order]
    new_group = np.empty(n, dtype=bool)
    new_group[0] = True
    new_group[1:] = sorted_x[1:] != sorted_x[:-1]
    group_id = np.cumsum(new_group) - 1
    starts = np.flatnonzero(new_group)
    ends = np.append(starts[1:], n)
    group_rank = (starts + ends - 1) / 2.0 + 1.0
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = group_rank[group_id]
    return ranks


@dataclass
class AucReport:
    mean_auc: float
    per_user: dict[int, float]
    evaluated: int
    skipped: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "mean_auc": self.mean_auc,
                "evaluated_users": self.evaluated,
                "skipped_users": self.skipped,
                "per_user": {str(k): v for k, v in sorted(self.per_user.items())},
            },
            sort_keys=True,
        )

    def to_text(self) -> str:
        lines = [
            f"{'mean AUC':<16}{self.mean_auc:.6f}",
            f"{'evaluated':<16}{self.evaluated}",
            f"{'skipped':<16}{self.skipped}",
        ]
        return "\n".join(lines)


def _mapped_item_table(tables: EmbeddingTables, c: float, wiring: VariantWiring):
    if wiring.hyperbolic:
        return hypgeo.exp_map(tables.basepoint, tables.item, c)
    return np.asarray(tables.item, dtype=np.float64)


def _scores_against(
    tables: EmbeddingTables,
    mapped_items: np.ndarray,
    profile: np.ndarray,
    ids: np.ndarray,
    c: float,
    wiring: VariantWiring,
) -> np.ndarray:
    if wiring.hyperbolic:
        mapped_user = hypgeo.exp_map(tables.basepoint, profile, c)
        return -hypgeo.hyp_distance(mapped_user, mapped_items[ids], c)
    gap = mapped_items[ids] - profile
    return -np.sum(gap * gap, axis=-1)


def evaluate(
    tables: EmbeddingTables,
    split: SplitDataset,
    features: VisualFeatureStore,
    cfg,
    *,
    which: str = "test",
    wiring: VariantWiring = COMPLETE,
    neg_per_user: Optional[int] = None,
    seed: Optional[int] = None,
    threads: int = 1,
    exhaustive: bool = False,
) -> AucReport:
    """Mean per-user AUC on the requested split."""
    if which not in ("valid", "test"):
        raise InvalidInputError(f"which must be 'valid' or 'test', got {which!r}")
    target = split.test if which == "test" else split.valid
    eval_seed = int(cfg.seed if seed is None else seed)
    n_negatives = int(cfg.neg_per_user if neg_per_user is None else neg_per_user)
    if n_negatives <= 0:
        raise InvalidInputError(f"neg_per_user must be positive, got {n_negatives}")

    n_users = split.dataset.n_users
    train_history = build_history(split.train, n_users)
    warm_items = np.unique(split.train.items)
    warm = np.zeros(split.dataset.n_items, dtype=bool)
    warm[warm_items] = True
    tau = attention_temperature(tables.dim)
    mapped_items = _mapped_item_table(tables, cfg.curvature, wiring)

    targets_by_user: dict[int, list[int]] = {}
    for u, i in zip(target.users.tolist(), target.items.tolist()):
        targets_by_user.setdefault(u, []).append(i)

    skipped = 0
    jobs: list[tuple[int, np.ndarray, np.ndarray]] = []
    for u in sorted(targets_by_user):
        if train_history[u].size == 0:
            skipped += 1  # cold user
            continue
        target_items = np.unique(np.asarray(targets_by_user[u], dtype=np.int64))
        positives = target_items[warm[target_items]]
        if positives.size == 0:
            skipped += 1  # every positive is a cold item
            continue
        excluded = np.concatenate([train_history[u], target_items])
        pool = warm_items[np.isin(warm_items, excluded, invert=True)]
        if pool.size == 0:
            skipped += 1  # no negatives available
            continue
        if exhaustive or n_negatives >= pool.size:
            negatives = pool
        else:
            neg_rng = np.random.default_rng([eval_seed, _NEGATIVE_STREAM, u])
            negatives = neg_rng.choice(pool, size=n_negatives, replace=False)
        jobs.append((u, positives, negatives))

    def score_user(job) -> tuple[int, Optional[float]]:
        u, positives, negatives = job
        rng = np.random.default_rng([eval_seed, _NEIGHBOR_STREAM, u])
        profile = user_representation(
            tables, train_history, features, u,
            exclude=None, limit=cfg.neighbors, tau=tau, rng=rng, wiring=wiring,
        )
        ids = np.concatenate([positives, negatives])
        scores = _scores_against(tables, mapped_items, profile, ids, cfg.curvature, wiring)
        return u, auc_user(scores[: positives.size], scores[positives.size :])

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool_:
            results = list(pool_.map(score_user, jobs))
    else:
        results = [score_user(j) for j in jobs]

    per_user: dict[int, float] = {}
    for u, auc in results:
        if auc is None:
            skipped += 1
        else:
            per_user[u] = auc
    mean = float(np.mean(list(per_user.values()))) if per_user else float("nan")
    return AucReport(mean, per_user, evaluated=len(per_user), skipped=skipped)


# --- orchestration -----------------------------------------------------------


def run_ablations(
    split: SplitDataset,
    features: VisualFeatureStore,
    base_cfg,
    seeds: Optional[Sequence[int]] = None,
    *,
    threads: int = 1,
) -> list[dict]:
    """Train and score every ablation variant over the given seeds."""
    from . import trainer

    if seeds is None:
        seeds = [base_cfg.seed + k for k in range(3)]
    rows: list[dict] = []
    for variant in trainer.VARIANTS:
        per_seed: list[float] = []
        failures: list[str] = []
        for s in seeds:
            cfg = replace(base_cfg, variant=variant, seed=int(s))
            try:
                result = trainer.train(split, features, cfg, threads=threads)
                report = evaluate(
                    result.tables, split, features, cfg,
                    which="test", wiring=trainer.apply_variant(cfg), threads=threads,
                )
                per_seed.append(report.mean_auc)
            except HyperRecError as exc:
                failures.append(f"seed {s}: {exc}")
        row = {
            "variant": variant,
            "seeds": list(map(int, seeds)),
            "per_seed_auc": per_seed,
            "mean_auc": float(np.mean(per_seed)) if per_seed else float("nan"),
            "std_auc": float(np.std(per_seed)) if per_seed else float("nan"),
            "failures": failures,
        }
        rows.append(row)
    return rows


def ablation_table_text(rows: list[dict]) -> str:
    header = f"{'variant':<16}{'mean AUC':>10}{'std':>10}"
    lines = [header]
    for row in rows:
        lines.append(
            f"{row['variant']:<16}{row['mean_auc']:>10.4f}{row['std_auc']:>10.4f}"
        )
    return "\n".join(lines)


SWEEPABLE = ("gamma", "curvature")


def sweep(
    split: SplitDataset,
    features: VisualFeatureStore,
    base_cfg,
    param: str,
    values: Sequence[float],
    *,
    threads: int = 1,
) -> list[dict]:
    """One full train + test evaluation per value, fixed seed."""
    from . import trainer

    if param not in SWEEPABLE:
        raise ConfigError(f"sweep parameter must be one of {SWEEPABLE}, got {param!r}")
    if len(values) == 0:
        raise InvalidInputError("sweep needs at least one value")
    points: list[dict] = []
    for value in values:
        cfg = replace(base_cfg, **{param: float(value)})
        point = {"param": param, "value": float(value)}
        try:
            result = trainer.train(split, features, cfg, threads=threads)
            report = evaluate(
                result.tables, split, features, cfg,
                which="test", wiring=trainer.apply_variant(cfg), threads=threads,
            )
            point["auc"] = report.mean_auc
        except HyperRecError as exc:
            point["auc"] = float("nan")
            point["error"] = str(exc)
        points.append(point)
    return points


# --- embedding analysis --------------------------------------------------------


@dataclass
class EmbeddingAnalysis:
    user_norms: np.ndarray
    item_norms: np.ndarray
    bin_edges: np.ndarray  # HISTOGRAM_BINS + 1 edges over [0, ball radius)
    user_hist: np.ndarray
    item_hist: np.ndarray
    pearson_r: float
    zero_variance: bool
    mean_user_norm: float
    mean_item_norm: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "pearson_r": None if np.isnan(self.pearson_r) else self.pearson_r,
                "zero_variance": self.zero_variance,
                "mean_user_norm": self.mean_user_norm,
                "mean_item_norm": self.mean_item_norm,
                "bins": HISTOGRAM_BINS,
            },
            sort_keys=True,
        )


def analyze_embeddings(
    tables: EmbeddingTables,
    split: SplitDataset,
    features: VisualFeatureStore,
    cfg,
    *,
    wiring: VariantWiring = COMPLETE,
    seed: Optional[int] = None,
) -> EmbeddingAnalysis:
    """Norm distributions of mapped users/items and the norm-popularity link."""
    eval_seed = int(cfg.seed if seed is None else seed)
    c = cfg.curvature
    n_users = split.dataset.n_users
    train_history = build_history(split.train, n_users)
    tau = attention_temperature(tables.dim)

    profiles = np.empty((n_users, tables.dim))
    for u in range(n_users):
        rng = np.random.default_rng([eval_seed, _NEIGHBOR_STREAM, u])
        profiles[u] = user_representation(
            tables, train_history, features, u,
            exclude=None, limit=cfg.neighbors, tau=tau, rng=rng, wiring=wiring,
        )
    mapped_users = hypgeo.exp_map(tables.basepoint, profiles, c)
    mapped_items = hypgeo.exp_map(tables.basepoint, tables.item, c)
    user_norms = np.linalg.norm(mapped_users, axis=-1)
    item_norms = np.linalg.norm(mapped_items, axis=-1)

    radius = 1.0 / np.sqrt(c)
    edges = np.linspace(0.0, radius, HISTOGRAM_BINS + 1)
    user_hist, _ = np.histogram(user_norms, bins=edges)
    item_hist, _ = np.histogram(item_norms, bins=edges)

    counts = np.bincount(split.train.items, minlength=split.dataset.n_items)
    popularity = np.log1p(counts.astype(np.float64))
    zero_variance = bool(np.std(item_norms) == 0.0 or np.std(popularity) == 0.0)
    if zero_variance:
        r = float("nan")
    else:
        r = float(np.corrcoef(item_norms, popularity)[0, 1])
    return EmbeddingAnalysis(
        user_norms=user_norms,
        item_norms=item_norms,
        bin_edges=edges,
        user_hist=user_hist,
        item_hist=item_hist,
        pearson_r=r,
        zero_variance=zero_variance,
        mean_user_norm=float(np.mean(user_norms)),
        mean_item_norm=float(np.mean(item_norms)),
    )


def histogram_csv(analysis: EmbeddingAnalysis, path) -> None:
    """bin_left,bin_right,user_count,item_count rows for external plotting."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("bin_left,bin_right,user_count,item_count\n")
        for k in range(HISTOGRAM_BINS):
            fh.write(
                f"{float(analysis.bin_edges[k])!r},{float(analysis.bin_edges[k + 1])!r},"
                f"{int(analysis.user_hist[k])},{int(analysis.item_hist[k])}\n"
            )
