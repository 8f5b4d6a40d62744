"""Embedding tables, neighbor-attentive user aggregation and item scoring.

The learned state is a flat collection of dense tensors: one embedding per
user, two embeddings per item (a ranking embedding and an auxiliary
embedding used when aggregating a user's purchase history), the two-layer
attention network that scores each neighbor, and the learnable basepoint of
the exponential map.  Scoring is read-only and may run concurrently;
training mutates tables under a single writer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from . import hypgeo
from .errors import ContractViolationError, InvalidInputError


def attention_temperature(dim: int) -> float:
    """Softmax temperature used by the attention head: sqrt(embedding dim)."""
    return float(np.sqrt(dim))


TENSOR_NAMES = (
    "user",
    "item",
    "item_aux",
    "w_user",
    "w_item",
    "w_aux",
    "w_feat",
    "b_hidden",
    "w_out",
    "b_out",
    "basepoint",
)


@dataclass
class EmbeddingTables:
    """Every trainable tensor of the model."""

    user: np.ndarray  # (n_users, dim)
    item: np.ndarray  # (n_items, dim)
    item_aux: np.ndarray  # (n_items, dim)
    w_user: np.ndarray  # (dim, dim)
    w_item: np.ndarray  # (dim, dim)
    w_aux: np.ndarray  # (dim, dim)
    w_feat: np.ndarray  # (dim, feat_dim)
    b_hidden: np.ndarray  # (dim,)
    w_out: np.ndarray  # (dim,)
    b_out: np.ndarray  # ()
    basepoint: np.ndarray  # (dim,)

    @property
    def n_users(self) -> int:
        return self.user.shape[0]

    @property
    def n_items(self) -> int:
        return self.item.shape[0]

    @property
    def dim(self) -> int:
        return self.user.shape[1]

    @property
    def feat_dim(self) -> int:
        return self.w_feat.shape[1]

    def named(self) -> Iterator[tuple[str, np.ndarray]]:
        """Tensors in a fixed order; the checkpoint and optimizer rely on it."""
        for name in TENSOR_NAMES:
            yield name, getattr(self, name)

    def copy(self) -> "EmbeddingTables":
        return EmbeddingTables(**{name: tensor.copy() for name, tensor in self.named()})

    def asdict(self) -> dict[str, np.ndarray]:
        return dict(self.named())


def init_tables(
    n_users: int, n_items: int, dim: int, feat_dim: int, rng: np.random.Generator
) -> EmbeddingTables:
    """Small-norm uniform init; keeps early mapped points near the ball center."""
    emb_scale = 0.01 / np.sqrt(dim)

    def table(rows):
        return rng.uniform(-emb_scale, emb_scale, size=(rows, dim))

    def linear(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return EmbeddingTables(
        user=table(n_users),
        item=table(n_items),
        item_aux=table(n_items),
        w_user=linear(dim, (dim, dim)),
        w_item=linear(dim, (dim, dim)),
        w_aux=linear(dim, (dim, dim)),
        w_feat=linear(feat_dim, (dim, feat_dim)),
        b_hidden=np.zeros(dim),
        w_out=np.zeros(dim),
        b_out=np.zeros(()),
        basepoint=np.zeros(dim),
    )


@dataclass(frozen=True)
class VariantWiring:
    """Which parts of the forward pass are active."""

    hyperbolic: bool = True  # False: squared Euclidean ranking, no ball mapping
    adjustment: bool = True  # False: the distance-consistency loss is dropped
    aggregation: bool = True  # False: the user profile is the raw user embedding
    uniform_attention: bool = False  # True: neighbors weighted 1/|sample|
    use_visual: bool = True  # visual-feature term in the attention net
    use_item_term: bool = True  # ranking-embedding term in the attention net
    use_aux_term: bool = True  # auxiliary-embedding term in the attention net


COMPLETE = VariantWiring()


def sample_neighbors(
    history: Sequence[np.ndarray],
    user: int,
    exclude: Optional[int],
    limit: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Uniform sample without replacement from the user's positives minus ``exclude``.

    Pools no larger than ``limit`` are returned whole.
    """
    if user < 0 or user >= len(history):
        raise InvalidInputError(f"unknown user {user}")
    if limit <= 0:
        raise InvalidInputError(f"neighbor count must be positive, got {limit}")
    pool = history[user]
    if exclude is not None:
        pool = pool[pool != exclude]
    if pool.size <= limit:
        return pool.copy()
    return rng.choice(pool, size=limit, replace=False)


def attention_logits(
    tables: EmbeddingTables,
    user: int,
    item_ids: np.ndarray,
    visual: np.ndarray,
    wiring: VariantWiring = COMPLETE,
) -> np.ndarray:
    """Pre-softmax attention scores for the given neighbor items.

    score_l = w_out . relu(W_u u + W_v v_l + W_p p_l + W_f E_l + b_hidden) + b_out
    """
    item_ids = np.asarray(item_ids, dtype=np.int64)
    visual = np.asarray(visual, dtype=np.float64)
    if visual.ndim == 1:
        visual = visual[None, :]
    if visual.shape[-1] != tables.feat_dim:
        raise InvalidInputError(
            f"visual feature dim {visual.shape[-1]} does not match model {tables.feat_dim}"
        )
    if visual.shape[0] != item_ids.shape[0]:
        raise InvalidInputError("one visual feature row is required per item")
    pre = tables.user[user] @ tables.w_user.T + tables.b_hidden
    pre = np.broadcast_to(pre, (item_ids.shape[0], tables.dim)).copy()
    if wiring.use_item_term:
        pre += tables.item[item_ids] @ tables.w_item.T
    if wiring.use_aux_term:
        pre += tables.item_aux[item_ids] @ tables.w_aux.T
    if wiring.use_visual:
        pre += visual @ tables.w_feat.T
    hidden = np.maximum(pre, 0.0)
    return hidden @ tables.w_out + float(tables.b_out)


def attention_logit(
    tables: EmbeddingTables,
    user: int,
    item: int,
    visual: np.ndarray,
    wiring: VariantWiring = COMPLETE,
) -> float:
    """Attention score of a single neighbor item."""
    return float(attention_logits(tables, user, np.array([item]), visual, wiring)[0])


def attention_weights(logits: np.ndarray, tau: float) -> np.ndarray:
    """Temperature-scaled softmax with max subtraction; empty input stays empty."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        return np.zeros(0)
    if not np.isfinite(tau) or tau <= 0:
        raise InvalidInputError(f"temperature must be positive, got {tau}")
    if not np.all(np.isfinite(logits)):
        raise InvalidInputError("non-finite attention logits")
    scaled = logits / tau
    scaled = scaled - np.max(scaled)
    e = np.exp(scaled)
    return e / np.sum(e)


def aggregate_user(
    tables: EmbeddingTables,
    user: int,
    sample: np.ndarray,
    weights: np.ndarray,
) -> np.ndarray:
    """Blend the user embedding with the attention-weighted neighbor embeddings.

    profile = (u + sum_l alpha_l p_l) / 2, falling back to u / 2 when the
    sample is empty.
    """
    sample = np.asarray(sample, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    if sample.shape != weights.shape:
        raise ContractViolationError(
            f"sample size {sample.shape} does not match weights {weights.shape}"
        )
    base = tables.user[user]
    if sample.size == 0:
        return base / 2.0
    return (base + weights @ tables.item_aux[sample]) / 2.0


def user_representation(
    tables: EmbeddingTables,
    history: Sequence[np.ndarray],
    features,
    user: int,
    *,
    exclude: Optional[int],
    limit: int,
    tau: float,
    rng: np.random.Generator,
    wiring: VariantWiring = COMPLETE,
) -> np.ndarray:
    """Full aggregation pipeline for one user: sample, score, blend."""
    if not wiring.aggregation:
        return np.asarray(tables.user[user], dtype=np.float64)
    sample = sample_neighbors(history, user, exclude, limit, rng)
    if sample.size == 0:
        weights = np.zeros(0)
    elif wiring.uniform_attention:
        weights = np.full(sample.size, 1.0 / sample.size)
    else:
        logits = attention_logits(tables, user, sample, features.rows[sample], wiring)
        weights = attention_weights(logits, tau)
    return aggregate_user(tables, user, sample, weights)


def score_item(tables: EmbeddingTables, agg_user: np.ndarray, item: int, c: float) -> float:
    """Negated ball distance between the mapped user profile and mapped item."""
    mapped_user = hypgeo.exp_map(tables.basepoint, agg_user, c)
    mapped_item = hypgeo.exp_map(tables.basepoint, tables.item[item], c)
    return -float(hypgeo.hyp_distance(mapped_user, mapped_item, c))


def score_items(
    tables: EmbeddingTables,
    agg_user: np.ndarray,
    item_ids: np.ndarray,
    c: float,
    wiring: VariantWiring = COMPLETE,
) -> np.ndarray:
    """Scores for many candidate items at once; higher is better."""
    item_ids = np.asarray(item_ids, dtype=np.int64)
    rows = tables.item[item_ids]
    if wiring.hyperbolic:
        mapped_user = hypgeo.exp_map(tables.basepoint, agg_user, c)
        mapped_items = hypgeo.exp_map(tables.basepoint, rows, c)
        return -hypgeo.hyp_distance(mapped_user, mapped_items, c)
    gap = hypgeo.euclid_distance(agg_user, rows)
    return -(gap * gap)


def rank_items(
    tables: EmbeddingTables,
    history: Sequence[np.ndarray],
    features,
    user: int,
    candidates: np.ndarray,
    *,
    c: float,
    limit: int,
    tau: float,
    rng: np.random.Generator,
    wiring: VariantWiring = COMPLETE,
) -> np.ndarray:
    """Candidates ordered by descending score; ties broken by ascending item id."""
    candidates = np.asarray(candidates, dtype=np.int64)
    if candidates.size == 0:
        raise InvalidInputError("candidate list is empty")
    profile = user_representation(
        tables, history, features, user,
        exclude=None, limit=limit, tau=tau, rng=rng, wiring=wiring,
    )
    scores = score_items(tables, profile, candidates, c, wiring)
    order = np.lexsort((candidates, -scores))
    return candidates[order]


def export_embeddings(
    tables: EmbeddingTables,
    dataset,
    history: Sequence[np.ndarray],
    features,
    path,
    *,
    c: float,
    limit: int,
    seed: int,
    wiring: VariantWiring = COMPLETE,
) -> None:
    """Write mapped ball coordinates as TSV rows: kind, external id, coords."""
    tau = attention_temperature(tables.dim)
    with open(path, "w", encoding="utf-8") as fh:
        for u in range(tables.n_users):
            rng = np.random.default_rng([seed, 0x55, u])
            profile = user_representation(
                tables, history, features, u,
                exclude=None, limit=limit, tau=tau, rng=rng, wiring=wiring,
            )
            mapped = hypgeo.exp_map(tables.basepoint, profile, c)
            coords = "\t".join(repr(float(v)) for v in mapped)
            fh.write(f"user\t{dataset.user_ids[u]}\t{coords}\n")
        mapped_items = hypgeo.exp_map(tables.basepoint, tables.item, c)
        for i in range(tables.n_items):
            coords = "\t".join(repr(float(v)) for v in mapped_items[i])
            fh.write(f"item\t{dataset.item_ids[i]}\t{coords}\n")
