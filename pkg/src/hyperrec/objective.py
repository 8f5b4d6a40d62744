"""Multi-task training objective.

Three components, summed (not averaged) over the batch:

* a squared-distance triplet hinge on the ranking geometry,
* an adjustment penalty on the relative gap between the ball distance of
  mapped pairs and the Euclidean distance of their pre-images,
* an L2 penalty over every trainable tensor.

The differentiable path is recorded on a :mod:`hyperrec.grad` tape; the
formulas mirror :mod:`hyperrec.hypgeo` exactly so that scoring and training
agree to machine precision.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import grad, hypgeo
from .errors import InvalidInputError
from .model import COMPLETE, EmbeddingTables, VariantWiring, attention_temperature

# Denominator floor for the adjustment ratio when a pair degenerates.
EPS_ADJ = 1e-9


@dataclass(frozen=True)
class Triplet:
    """One training example: a user, a purchased item, a non-purchased item."""

    user: int
    pos: int
    neg: int


@dataclass
class TripletBatch:
    """A batch of triplets plus the per-triplet neighbor samples.

    ``neighbors`` is padded to a fixed width of at least one column;
    ``neighbor_mask`` holds 1.0 for real entries and 0.0 for padding.
    ``neighbor_feats`` carries the visual feature row of each padded slot.
    """

    users: np.ndarray  # (B,) int
    pos: np.ndarray  # (B,) int
    neg: np.ndarray  # (B,) int
    neighbors: np.ndarray  # (B, L) int
    neighbor_mask: np.ndarray  # (B, L) float
    neighbor_feats: np.ndarray  # (B, L, feat_dim) float

    def __len__(self) -> int:
        return int(self.users.shape[0])

    def triplets(self) -> list[Triplet]:
        return [
            Triplet(int(u), int(j), int(k))
            for u, j, k in zip(self.users, self.pos, self.neg)
        ]


@dataclass
class LossBreakdown:
    hyp: float
    adj: float
    reg: float
    total: float
    margin_active_fraction: float

    def json_line(self, step: int) -> str:
        return json.dumps(
            {
                "step": step,
                "hyp": self.hyp,
                "adj": self.adj,
                "reg": self.reg,
                "total": self.total,
                "active": self.margin_active_fraction,
            }
        )


# --- tape-side geometry ---------------------------------------------------


def mobius_add_var(x, y, c: float) -> grad.Var:
    """Gyrovector addition on the tape; mirrors hypgeo.mobius_add sans projection."""
    dotxy = grad.dot(x, y, keepdims=True)
    xx = grad.dot(x, x, keepdims=True)
    yy = grad.dot(y, y, keepdims=True)
    num = grad.add(
        grad.mul(1.0 + 2.0 * c * dotxy + c * yy, x),
        grad.mul(1.0 - c * xx, y),
    )
    den = 1.0 + 2.0 * c * dotxy + (c * c) * grad.mul(xx, yy)
    return grad.div(num, grad.maximum(den, 1e-15))


def exp_map_var(q, z, c: float) -> grad.Var:
    """Exponential map on the tape; zero tangents flow gradient through q only."""
    sqrt_c = float(np.sqrt(c))
    qq = grad.dot(q, q, keepdims=True)
    lam = grad.div(2.0, 1.0 - c * qq)
    zn = grad.norm(z, keepdims=True)
    gain = grad.div(
        grad.tanh(grad.mul(0.5 * sqrt_c, grad.mul(lam, zn))),
        grad.maximum(grad.mul(sqrt_c, zn), 1e-150),
    )
    return mobius_add_var(q, grad.mul(gain, z), c)


def hyp_distance_var(x, y, c: float) -> grad.Var:
    """Ball distance on the tape with the same atanh clamp as the kernel."""
    sqrt_c = float(np.sqrt(c))
    diff = mobius_add_var(grad.neg(x), y, c)
    arg = grad.clip(grad.mul(sqrt_c, grad.norm(diff)), 0.0, 1.0 - hypgeo.EPS_ATANH)
    return grad.mul(2.0 / sqrt_c, grad.atanh(arg))


# --- plain-ndarray views of the loss pieces --------------------------------


def hyp_triplet_loss(agg_user, v_pos, v_neg, c: float, margin: float, basepoint=None) -> float:
    """[margin + d^2(h(u~), h(v+)) - d^2(h(u~), h(v-))]_+ for one triplet."""
    if margin <= 0:
        raise InvalidInputError(f"margin must be positive, got {margin}")
    q = np.zeros_like(np.asarray(agg_user, dtype=float)) if basepoint is None else basepoint
    mapped_user = hypgeo.exp_map(q, agg_user, c)
    dp = hypgeo.hyp_distance(mapped_user, hypgeo.exp_map(q, v_pos, c), c)
    dn = hypgeo.hyp_distance(mapped_user, hypgeo.exp_map(q, v_neg, c), c)
    return float(max(0.0, margin + dp * dp - dn * dn))


def adj_term(x, y, c: float, basepoint=None) -> float:
    """Relative gap between the mapped-pair ball distance and the raw L2 distance."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    q = np.zeros_like(x) if basepoint is None else basepoint
    d_ball = hypgeo.hyp_distance(hypgeo.exp_map(q, x, c), hypgeo.exp_map(q, y, c), c)
    d_flat = hypgeo.euclid_distance(x, y)
    return float(max(0.0, abs(d_ball - d_flat) / max(d_flat, EPS_ADJ)))


def reg_norm(tables: EmbeddingTables) -> float:
    """Sum of squared entries over every trainable tensor."""
    return float(sum(np.sum(t * t) for _, t in tables.named()))


# --- the full batch program ------------------------------------------------


@dataclass
class LossTerms:
    """Tape variables for each loss component plus derived statistics."""

    total: grad.Var
    hyp: grad.Var
    adj: Optional[grad.Var]
    reg: grad.Var
    margin_active_fraction: float


def _attention_alpha(params, batch: TripletBatch, tau: float, wiring: VariantWiring) -> grad.Var:
    """Masked softmax attention over the padded neighbor axis."""
    n_batch, width = batch.neighbors.shape
    mask = batch.neighbor_mask

    user_rows = grad.gather(params["user"], batch.users)
    pre = grad.reshape(
        grad.matmul(user_rows, grad.transpose(params["w_user"])), (n_batch, 1, -1)
    )
    if wiring.use_item_term:
        item_lin = grad.matmul(params["item"], grad.transpose(params["w_item"]))
        pre = grad.add(pre, grad.gather(item_lin, batch.neighbors))
    if wiring.use_aux_term:
        aux_lin = grad.matmul(params["item_aux"], grad.transpose(params["w_aux"]))
        pre = grad.add(pre, grad.gather(aux_lin, batch.neighbors))
    if wiring.use_visual:
        flat = batch.neighbor_feats.reshape(n_batch * width, -1)
        feat_lin = grad.matmul(flat, grad.transpose(params["w_feat"]))
        pre = grad.add(pre, grad.reshape(feat_lin, (n_batch, width, -1)))
    pre = grad.add(pre, params["b_hidden"])

    hidden = grad.relu(pre)
    dim = grad.value_of(params["w_out"]).shape[0]
    logits_flat = grad.matmul(
        grad.reshape(hidden, (n_batch * width, dim)),
        grad.reshape(params["w_out"], (dim, 1)),
    )
    logits = grad.add(grad.reshape(logits_flat, (n_batch, width)), params["b_out"])

    scaled = grad.mul(logits, 1.0 / tau)
    live = mask > 0.0
    row_max = np.where(
        live.any(axis=1, keepdims=True),
        np.max(np.where(live, scaled.value, -np.inf), axis=1, keepdims=True),
        0.0,
    )
    kept = grad.mul(grad.exp(grad.sub(scaled, row_max)), mask)
    denom = grad.reduce_sum(kept, axis=1, keepdims=True)
    empty_fix = (~live.any(axis=1, keepdims=True)).astype(np.float64)
    return grad.div(kept, grad.add(denom, empty_fix))


def build_loss(
    tape: grad.Tape,
    params: dict[str, grad.Var],
    batch: TripletBatch,
    cfg,
    wiring: VariantWiring = COMPLETE,
) -> LossTerms:
    """Record the batch loss on ``tape`` from the named parameter leaves."""
    if len(batch) == 0:
        raise InvalidInputError("empty triplet batch")
    if batch.neighbors.ndim != 2 or batch.neighbors.shape[1] == 0:
        raise InvalidInputError("neighbor array must be padded to at least one column")
    c = float(cfg.curvature)

    u = grad.gather(params["user"], batch.users)  # (B, D)
    if wiring.aggregation:
        neighbor_rows = grad.gather(params["item_aux"], batch.neighbors)  # (B, L, D)
        if wiring.uniform_attention:
            counts = batch.neighbor_mask.sum(axis=1, keepdims=True)
            alpha = batch.neighbor_mask / np.where(counts > 0.0, counts, 1.0)
            weighted = grad.mul(neighbor_rows, alpha[:, :, None])
        else:
            tau = attention_temperature(grad.value_of(params["user"]).shape[1])
            alpha = _attention_alpha(params, batch, tau, wiring)
            weighted = grad.mul(
                neighbor_rows, grad.reshape(alpha, (*batch.neighbors.shape, 1))
            )
        profile = grad.mul(grad.add(u, grad.reduce_sum(weighted, axis=1)), 0.5)
    else:
        profile = u

    v_pos = grad.gather(params["item"], batch.pos)
    v_neg = grad.gather(params["item"], batch.neg)

    if wiring.hyperbolic:
        q = params["basepoint"]
        mapped_user = exp_map_var(q, profile, c)
        d_pos = hyp_distance_var(mapped_user, exp_map_var(q, v_pos, c), c)
        d_neg = hyp_distance_var(mapped_user, exp_map_var(q, v_neg, c), c)
    else:
        d_pos = grad.norm(grad.sub(profile, v_pos))
        d_neg = grad.norm(grad.sub(profile, v_neg))

    hinge = grad.relu(
        grad.add(float(cfg.margin), grad.sub(grad.square(d_pos), grad.square(d_neg)))
    )
    loss_hyp = grad.reduce_sum(hinge)
    active = float(np.mean(hinge.value > 0.0))

    loss_adj = None
    if wiring.adjustment and cfg.gamma != 0.0:
        flat_pos = grad.norm(grad.sub(profile, v_pos))
        flat_neg = grad.norm(grad.sub(profile, v_neg))
        gap_pos = grad.relu(
            grad.div(grad.absolute(grad.sub(d_pos, flat_pos)), grad.maximum(flat_pos, EPS_ADJ))
        )
        gap_neg = grad.relu(
            grad.div(grad.absolute(grad.sub(d_neg, flat_neg)), grad.maximum(flat_neg, EPS_ADJ))
        )
        loss_adj = grad.reduce_sum(grad.add(gap_pos, gap_neg))

    loss_reg = None
    for name in params:
        term = grad.reduce_sum(grad.square(params[name]))
        loss_reg = term if loss_reg is None else grad.add(loss_reg, term)

    total = loss_hyp
    if loss_adj is not None:
        total = grad.add(total, grad.mul(float(cfg.gamma), loss_adj))
    total = grad.add(total, grad.mul(float(cfg.reg_lambda), loss_reg))
    return LossTerms(total, loss_hyp, loss_adj, loss_reg, active)


def total_loss(
    tables: EmbeddingTables,
    batch: TripletBatch,
    cfg,
    wiring: VariantWiring = COMPLETE,
) -> LossBreakdown:
    """Loss components for one batch; pure given tables and batch."""
    breakdown, _ = total_loss_and_grad(tables, batch, cfg, wiring, want_grad=False)
    return breakdown


def total_loss_and_grad(
    tables: EmbeddingTables,
    batch: TripletBatch,
    cfg,
    wiring: VariantWiring = COMPLETE,
    want_grad: bool = True,
) -> tuple[LossBreakdown, Optional[grad.GradientMap]]:
    """Loss components plus the gradient of the total w.r.t. every tensor."""
    tape = grad.Tape()
    params = {name: tape.leaf(tensor, name=name) for name, tensor in tables.named()}
    terms = build_loss(tape, params, batch, cfg, wiring)
    breakdown = LossBreakdown(
        hyp=float(terms.hyp.value),
        adj=0.0 if terms.adj is None else float(terms.adj.value),
        reg=float(terms.reg.value),
        total=float(terms.total.value),
        margin_active_fraction=terms.margin_active_fraction,
    )
    grads = grad.backward(tape, terms.total) if want_grad else None
    return breakdown, grads
