"""Training loop: triplet sampling, adaptive-moment optimizer with decoupled
weight decay, ablation wiring, checkpointing.

One training thread owns the tables; every random draw flows through
generators seeded from the config, so identical config + seed + data give
bit-identical results.
"""

from __future__ import annotations

import io
import json
import math
import struct
import time
import typing
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import hypgeo
from .dataio import Interactions, SplitDataset, VisualFeatureStore, build_history
from .errors import ConfigError, FormatError, NumericError
from .model import TENSOR_NAMES, EmbeddingTables, VariantWiring, init_tables
from .objective import TripletBatch, total_loss_and_grad

CHECKPOINT_MAGIC = b"HVACF01"

VARIANTS = (
    "complete",
    "euclidean",
    "no-adj",
    "no-aggregation",
    "no-attention",
    "attn-no-visual",
    "attn-no-v",
    "attn-no-p",
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Hyperparameter grids exposed by the sweep command.
LR_GRID = (0.01, 0.001, 0.0001)
REG_GRID = (0.1, 0.01, 0.001)


@dataclass(frozen=True)
class TrainConfig:
    dim: int = 50
    curvature: float = 1.0
    gamma: float = 0.5
    reg_lambda: float = 0.01
    margin: float = 0.5
    neighbors: int = 32
    lr: float = 0.001
    batch: int = 512
    epochs: int = 30
    seed: int = 0
    variant: str = "complete"
    weight_decay: float = 0.0
    neg_per_user: int = 100

    def validate(self) -> "TrainConfig":
        if self.dim <= 0:
            raise ConfigError(f"dim must be positive, got {self.dim}")
        if self.curvature <= 0:
            raise ConfigError(f"curvature must be positive, got {self.curvature}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be non-negative, got {self.gamma}")
        if self.reg_lambda < 0:
            raise ConfigError(f"reg_lambda must be non-negative, got {self.reg_lambda}")
        if self.margin <= 0:
            raise ConfigError(f"margin must be positive, got {self.margin}")
        if self.neighbors <= 0:
            raise ConfigError(f"neighbors must be positive, got {self.neighbors}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch <= 0:
            raise ConfigError(f"batch must be positive, got {self.batch}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.neg_per_user <= 0:
            raise ConfigError(f"neg_per_user must be positive, got {self.neg_per_user}")
        if self.variant not in VARIANTS:
            raise ConfigError(
                f"unknown variant {self.variant!r}; valid variants: {', '.join(VARIANTS)}"
            )
        return self

    def with_overrides(self, overrides: dict[str, str]) -> "TrainConfig":
        """Apply string key=value overrides with per-field type coercion."""
        hints = typing.get_type_hints(TrainConfig)
        values = asdict(self)
        for key, raw in overrides.items():
            if key not in values:
                raise ConfigError(
                    f"unknown config key {key!r}; valid keys: {', '.join(sorted(values))}"
                )
            kind = hints[key]
            try:
                values[key] = kind(raw)
            except ValueError:
                raise ConfigError(
                    f"cannot parse {key}={raw!r} as {kind.__name__}"
                ) from None
        return TrainConfig(**values).validate()

    def canonical_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))


def apply_variant(cfg: TrainConfig) -> VariantWiring:
    """Translate the ablation name into forward-pass wiring."""
    v = cfg.variant
    if v not in VARIANTS:
        raise ConfigError(
            f"unknown variant {v!r}; valid variants: {', '.join(VARIANTS)}"
        )
    if v == "complete":
        return VariantWiring()
    if v == "euclidean":
        return VariantWiring(hyperbolic=False, adjustment=False)
    if v == "no-adj":
        return VariantWiring(adjustment=False)
    if v == "no-aggregation":
        return VariantWiring(aggregation=False)
    if v == "no-attention":
        return VariantWiring(uniform_attention=True)
    if v == "attn-no-visual":
        return VariantWiring(use_visual=False)
    if v == "attn-no-v":
        return VariantWiring(use_item_term=False)
    return VariantWiring(use_aux_term=False)  # attn-no-p


# --- sampling ----------------------------------------------------------------


def sample_triplet_batch(
    train: Interactions,
    history_sets: Sequence[set[int]],
    n_items: int,
    count: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """Draw (user, positive) uniformly from train rows and negatives by rejection.

    Users whose positive set covers the whole catalog cannot yield a negative;
    those draws are replaced and counted in the returned skip counter.
    """
    if len(train) == 0:
        raise ConfigError("training split is empty")
    skipped = 0
    idx = rng.integers(0, len(train), size=count)
    users = train.users[idx].copy()
    pos = train.items[idx].copy()
    for k in range(count):
        attempts = 0
        while len(history_sets[users[k]]) >= n_items:
            j = int(rng.integers(0, len(train)))
            users[k] = train.users[j]
            pos[k] = train.items[j]
            skipped += 1
            attempts += 1
            if attempts > 10_000:
                raise ConfigError("no user with an available negative item")
    neg = rng.integers(0, n_items, size=count)
    pending = [k for k in range(count) if int(neg[k]) in history_sets[users[k]]]
    while pending:
        draws = rng.integers(0, n_items, size=len(pending))
        neg[pending] = draws
        pending = [k for k in pending if int(neg[k]) in history_sets[users[k]]]
    return users, pos, neg, skipped


def draw_neighbor_batch(
    history: Sequence[np.ndarray],
    users: np.ndarray,
    exclude: np.ndarray,
    limit: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-triplet neighbor samples, padded to a common width of at least 1."""
    count = users.shape[0]
    samples: list[np.ndarray] = []
    width = 1
    for k in range(count):
        pool = history[users[k]]
        pool = pool[pool != exclude[k]]
        if pool.size > limit:
            pool = rng.choice(pool, size=limit, replace=False)
        samples.append(pool)
        width = max(width, pool.size)
    neighbors = np.zeros((count, width), dtype=np.int64)
    mask = np.zeros((count, width), dtype=np.float64)
    for k, pool in enumerate(samples):
        neighbors[k, : pool.size] = pool
        mask[k, : pool.size] = 1.0
    return neighbors, mask


def assemble_batch(
    train: Interactions,
    history: Sequence[np.ndarray],
    history_sets: Sequence[set[int]],
    features: VisualFeatureStore,
    n_items: int,
    count: int,
    limit: int,
    rng: np.random.Generator,
) -> tuple[TripletBatch, int]:
    users, pos, neg, skipped = sample_triplet_batch(train, history_sets, n_items, count, rng)
    neighbors, mask = draw_neighbor_batch(history, users, pos, limit, rng)
    feats = np.asarray(features.rows, dtype=np.float64)[neighbors]
    return TripletBatch(users, pos, neg, neighbors, mask, feats), skipped


# --- optimizer ----------------------------------------------------------------


@dataclass
class OptimizerState:
    first: dict[str, np.ndarray]
    second: dict[str, np.ndarray]
    step: int = 0


def init_optimizer(tables: EmbeddingTables) -> OptimizerState:
    return OptimizerState(
        first={name: np.zeros_like(t) for name, t in tables.named()},
        second={name: np.zeros_like(t) for name, t in tables.named()},
    )


def optimizer_step(
    tables: EmbeddingTables,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    weight_decay: float,
    curvature: float,
) -> None:
    """Adaptive-moment update with bias correction, then decoupled decay,
    then reprojection of the basepoint into the ball."""
    state.step += 1
    t = state.step
    correct1 = 1.0 - ADAM_BETA1**t
    correct2 = 1.0 - ADAM_BETA2**t
    for name, tensor in tables.named():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for tensor '{name}'")
        m = state.first[name]
        v = state.second[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        update = (m / correct1) / (np.sqrt(v / correct2) + ADAM_EPS)
        tensor -= lr * update
        if weight_decay:
            tensor -= lr * weight_decay * tensor
    tables.basepoint[...] = hypgeo.project_to_ball(tables.basepoint, curvature)


# --- training loop --------------------------------------------------------------


@dataclass
class TrainResult:
    tables: EmbeddingTables  # best validation checkpoint
    final_tables: EmbeddingTables
    history: list[dict]
    best_epoch: int
    best_val_auc: float
    diverged: bool = False
    skipped_triplets: int = 0
    train_seconds: float = 0.0


def train(
    split: SplitDataset,
    features: VisualFeatureStore,
    cfg: TrainConfig,
    *,
    loss_stream: Optional[io.TextIOBase] = None,
    threads: int = 1,
) -> TrainResult:
    """Run the full epoch loop and keep the best validation checkpoint."""
    from . import evalkit  # local import; evalkit calls back into this module

    started = time.perf_counter()
    cfg.validate()
    if features.count < split.dataset.n_items:
        raise ConfigError(
            f"feature store has {features.count} rows but the dataset has "
            f"{split.dataset.n_items} items"
        )
    wiring = apply_variant(cfg)
    n_users = split.dataset.n_users
    n_items = split.dataset.n_items
    tables = init_tables(n_users, n_items, cfg.dim, features.dim,
                         np.random.default_rng([cfg.seed, 0]))
    history_arrays = build_history(split.train, n_users)
    history_sets = [set(a.tolist()) for a in history_arrays]
    train_rng = np.random.default_rng([cfg.seed, 1])
    state = init_optimizer(tables)

    best_tables: Optional[EmbeddingTables] = None
    best_epoch = 0
    best_val = -math.inf
    history: list[dict] = []
    diverged = False
    skipped_total = 0
    step_counter = 0

    n_train = len(split.train)
    steps = max(1, math.ceil(n_train / cfg.batch)) if cfg.epochs > 0 else 0

    for epoch in range(1, cfg.epochs + 1):
        sums = {"hyp": 0.0, "adj": 0.0, "reg": 0.0, "total": 0.0, "active": 0.0}
        for s in range(steps):
            size = cfg.batch if s < steps - 1 else n_train - cfg.batch * (steps - 1)
            size = max(1, size)
            batch, skipped = assemble_batch(
                split.train, history_arrays, history_sets, features,
                n_items, size, cfg.neighbors, train_rng,
            )
            skipped_total += skipped
            try:
                breakdown, grads = total_loss_and_grad(tables, batch, cfg, wiring)
            except NumericError:
                diverged = True
                break
            if not math.isfinite(breakdown.total):
                diverged = True
                break
            try:
                optimizer_step(tables, grads, state, cfg.lr, cfg.weight_decay, cfg.curvature)
            except NumericError:
                diverged = True
                break
            if loss_stream is not None:
                loss_stream.write(breakdown.json_line(step_counter) + "\n")
            step_counter += 1
            sums["hyp"] += breakdown.hyp
            sums["adj"] += breakdown.adj
            sums["reg"] += breakdown.reg
            sums["total"] += breakdown.total
            sums["active"] += breakdown.margin_active_fraction
        if diverged:
            break
        report = evalkit.evaluate(
            tables, split, features, cfg,
            which="valid", wiring=wiring, threads=threads,
        )
        val_auc = report.mean_auc
        history.append(
            {
                "epoch": epoch,
                "val_auc": val_auc,
                "hyp": sums["hyp"] / steps,
                "adj": sums["adj"] / steps,
                "reg": sums["reg"] / steps,
                "total": sums["total"] / steps,
                "active": sums["active"] / steps,
            }
        )
        if math.isfinite(val_auc) and val_auc > best_val:
            best_val = val_auc
            best_epoch = epoch
            best_tables = tables.copy()

    if best_tables is None:
        best_tables = tables.copy()
        best_epoch = len(history)
        best_val = history[-1]["val_auc"] if history else math.nan
    return TrainResult(
        tables=best_tables,
        final_tables=tables,
        history=history,
        best_epoch=best_epoch,
        best_val_auc=best_val,
        diverged=diverged,
        skipped_triplets=skipped_total,
        train_seconds=time.perf_counter() - started,
    )


# --- checkpoint container --------------------------------------------------------


def save_checkpoint(path, tables: EmbeddingTables, cfg: TrainConfig) -> None:
    """Versioned binary container: magic, config JSON, then named f32 tensors."""
    blob = cfg.canonical_json().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        named = list(tables.named())
        fh.write(struct.pack("<I", len(named)))
        for name, tensor in named:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", tensor.ndim))
            for d in tensor.shape:
                fh.write(struct.pack("<I", d))
            fh.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[EmbeddingTables, TrainConfig]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad magic, not a checkpoint")

        def read_u32() -> int:
            raw = fh.read(4)
            if len(raw) != 4:
                raise FormatError(f"{path}: truncated checkpoint")
            return struct.unpack("<I", raw)[0]

        cfg_blob = fh.read(read_u32())
        cfg = TrainConfig(**json.loads(cfg_blob.decode("utf-8")))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(read_u32()):
            name = fh.read(read_u32()).decode("utf-8")
            dims = tuple(read_u32() for _ in range(read_u32()))
            expect = int(np.prod(dims, dtype=np.int64)) if dims else 1
            raw = fh.read(expect * 4)
            if len(raw) != expect * 4:
                raise FormatError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float64)
    missing = set(TENSOR_NAMES) - set(tensors)
    if missing:
        raise FormatError(f"{path}: checkpoint missing tensors {sorted(missing)}")
    return EmbeddingTables(**tensors), cfg
