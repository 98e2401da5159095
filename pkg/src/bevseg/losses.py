"""Composite segmentation losses for multi-label BEV grids.

All losses take per-class probabilities ``p`` (a tape Tensor of shape
(C, H, W), values in (0, 1), typically a squashed logit map) and a constant
binary ground-truth stack ``g`` of the same shape.  Classes are
non-exclusive: each channel is its own binary problem.

The heavy lifting (sorting for the Jaccard surrogate, distance transforms
for the boundary term) happens in plain numpy outside the tape; only the
terms that actually need gradients are recorded.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from bevseg.autodiff import ops
from bevseg.autodiff.tensor import Tensor
from bevseg.errors import ConfigError, NumericError
from bevseg.grid import DistanceMap

_PROB_EPS = 1e-6


def _check_pg(p: Tensor, g: np.ndarray) -> np.ndarray:
    if not isinstance(p, Tensor):
        raise TypeError("predictions must be a Tensor")
    g = np.asarray(g)
    if p.ndim != 3 or g.shape != p.shape:
        raise ValueError(f"expected matching (C, H, W) stacks, got {p.shape} and {g.shape}")
    if not np.isfinite(p.data).all():
        raise NumericError("predicted probabilities contain non-finite values")
    if g.dtype != np.float64 and g.dtype != np.float32:
        g = g.astype(np.float64)
    return g


# ---------------------------------------------------------------------------
# individual terms


def focal_loss(p: Tensor, g: np.ndarray, gamma: float = 3.0, alpha: float = 0.25) -> Tensor:
    """Two-sided focal loss, averaged over every class and cell.

    Positives contribute ``-alpha * (1-p)^gamma * log(p)``, negatives the
    mirrored ``-(1-alpha) * p^gamma * log(1-p)``.  Probabilities are clamped
    away from {0, 1} before the logs.
    """
    g = _check_pg(p, g)
    pc = ops.clamp(p, _PROB_EPS, 1.0 - _PROB_EPS)
    pos = ops.mul(ops.mul(ops.pow_scalar(1.0 - pc, gamma), ops.log(pc)), alpha * g)
    neg = ops.mul(ops.mul(ops.pow_scalar(pc, gamma), ops.log(1.0 - pc)), (1.0 - alpha) * (1.0 - g))
    return ops.neg(ops.tmean(pos + neg))


def dice_loss(p: Tensor, g: np.ndarray, epsilon: float = 1e-6) -> Tensor:
    """Soft dice with squared-probability denominator, averaged over classes.

    ``1 - (2*sum(p*g) + eps) / (sum(p^2) + sum(g^2) + eps)`` per class; the
    epsilon makes an all-empty class score a perfect 0 loss.
    """
    g = _check_pg(p, g)
    inter = ops.tsum(ops.mul(p, g), axis=(1, 2))
    denom = ops.tsum(ops.mul(p, p), axis=(1, 2)) + g.sum(axis=(1, 2))
    dice = ops.div(inter * 2.0 + epsilon, denom + epsilon)
    return ops.tmean(1.0 - dice)


def lovasz_loss(p: Tensor, g: np.ndarray) -> Tensor:
    """Lovász extension of the per-class Jaccard loss, averaged over classes.

    Errors ``m = |g - p|`` are sorted descending (ties broken by cell index);
    the weight on the i-th largest error is the discrete jump of
    ``1 - Jaccard`` when that cell joins the error set.  The weights are
    constants of the evaluation point, so the recorded graph is just a
    weighted sum of ``p``.  For an all-background class the convention
    degenerates to the largest predicted probability.
    """
    g = _check_pg(p, g)
    c, h, w = p.shape
    n = h * w
    coef = np.empty((c, n), dtype=np.float64)
    const = 0.0
    pd = p.data.reshape(c, n)
    gd = g.reshape(c, n)
    for ci in range(c):
        gc = gd[ci]
        m = np.where(gc > 0.5, 1.0 - pd[ci], pd[ci])
        order = np.argsort(-m, kind="stable")
        gs = gc[order]
        total = gs.sum()
        inter = total - np.cumsum(gs)
        union = total + np.cumsum(1.0 - gs)
        jacc = 1.0 - inter / union
        dj = np.diff(jacc, prepend=0.0)
        wfull = np.empty(n, dtype=np.float64)
        wfull[order] = dj
        # m = g + (1 - 2g) * p, so sum(m * w) splits into a constant and a p-term
        coef[ci] = wfull * (1.0 - 2.0 * gc)
        const += float((wfull * gc).sum())
    coef_t = Tensor(coef.reshape(p.shape).astype(p.dtype))
    return (ops.tsum(ops.mul(p, coef_t)) + const) * (1.0 / c)


def affinity_components(p: Tensor, g: np.ndarray):
    """Per-class log precision / recall / specificity with soft predictions.

    Each component is the log of a mass ratio clamped to ``[1e-6, 1]``.  A
    component whose denominator is zero (class absent, class predicted
    nowhere, or class covering everything) is skipped: it contributes 0 and
    its activity flag is False.  Returns ``(P, R, S, active)`` where the
    first three are (C,) tensors and ``active`` maps component name to a
    boolean (C,) array.
    """
    g = _check_pg(p, g)
    n_pos = g.sum(axis=(1, 2))
    n_neg = (1.0 - g).sum(axis=(1, 2))
    phat_sum = p.data.sum(axis=(1, 2))
    act_p = (n_pos > 0) & (phat_sum > 0)
    act_r = n_pos > 0
    act_s = n_neg > 0

    tp = ops.tsum(ops.mul(p, g), axis=(1, 2))
    pred = ops.tsum(p, axis=(1, 2))
    tn = ops.tsum(ops.mul(1.0 - p, 1.0 - g), axis=(1, 2))

    def log_ratio(num, den_t, den_guard, active):
        safe_den = ops.clamp(den_t, _PROB_EPS, None) if den_t is not None else None
        ratio = ops.div(num, safe_den) if den_t is not None else num * (1.0 / den_guard)
        clamped = ops.clamp(ratio, _PROB_EPS, 1.0)
        return ops.mul(ops.log(clamped), active.astype(np.float64))

    comp_p = log_ratio(tp, pred, None, act_p)
    comp_r = log_ratio(tp, None, np.where(act_r, n_pos, 1.0), act_r)
    comp_s = log_ratio(tn, None, np.where(act_s, n_neg, 1.0), act_s)
    return comp_p, comp_r, comp_s, {"P": act_p, "R": act_r, "S": act_s}


def sem_scal_loss(p: Tensor, g: np.ndarray) -> Tensor:
    """Scene-class affinity on the semantic channels: ``-(1/C) * sum(P+R+S)``."""
    comp_p, comp_r, comp_s, _ = affinity_components(p, g)
    c = p.shape[0]
    return ops.tsum(comp_p + comp_r + comp_s) * (-1.0 / c)


def occupancy_probability(p: Tensor) -> Tensor:
    """Soft any-class occupancy: ``1 - prod_c (1 - p_c)`` per cell.

    Computed as ``1 - exp(sum_c log(1 - p_c))`` so it stays a streamed sum
    on the tape; probabilities are clamped below 1 first.
    """
    pc = ops.clamp(p, None, 1.0 - _PROB_EPS)
    log_miss = ops.log(1.0 - pc)
    return 1.0 - ops.exp(ops.tsum(log_miss, axis=0))


def geo_scal_loss(p: Tensor, g: np.ndarray) -> Tensor:
    """Scene-class affinity on geometric occupancy.

    The class dimension collapses to the two occupancy states (occupied,
    empty): predicted occupancy is the soft union over classes, ground truth
    the hard union, and both states run through the same log-P/R/S sum.
    """
    g = _check_pg(p, g)
    p_occ = occupancy_probability(p)  # (H, W)
    g_occ = g.max(axis=0)
    h, w = g_occ.shape
    p_states = ops.reshape(ops.concat_channels(
        ops.reshape(p_occ, (1, 1, h, w)),
        ops.reshape(1.0 - p_occ, (1, 1, h, w))), (2, h, w))
    g_states = np.stack([g_occ, 1.0 - g_occ])
    comp_p, comp_r, comp_s, _ = affinity_components(p_states, g_states)
    return ops.tsum(comp_p + comp_r + comp_s) * (-1.0 / 2.0)


def boundary_loss(p: Tensor, dmap: DistanceMap, normalized: bool = True) -> Tensor:
    """Mean of probability times signed boundary distance, over classes and cells.

    With raw distances the far field dominates; the normalized variant damps
    positives by the map's ``alpha``.  Either way the term is linear in ``p``
    and can go negative (interior mass is rewarded).
    """
    if not isinstance(p, Tensor):
        raise TypeError("predictions must be a Tensor")
    d = dmap.normalized() if normalized else dmap.values
    if d.shape != p.shape:
        raise ValueError(f"distance map shape {d.shape} does not match predictions {p.shape}")
    return ops.tmean(ops.mul(p, d.astype(p.dtype)))


# ---------------------------------------------------------------------------
# configuration and the weighted total


@dataclass
class LossConfig:
    """Term weights, shape parameters, and enable flags for the composite loss."""

    lambda_focal: float = 7.0
    lambda_dice: float = 10.75
    lambda_lovasz: float = 7.5
    lambda_sem: float = 1.0
    lambda_geo: float = 2.5
    lambda_norm_bound: float = 1.25
    gamma: float = 3.0
    alpha_focal: float = 0.25
    epsilon_dice: float = 1e-6
    boundary_alpha: float = 0.1
    boundary_m_alpha: float = 1.0
    enable_focal: bool = True
    enable_dice: bool = True
    enable_lovasz: bool = True
    enable_sem: bool = True
    enable_geo: bool = True
    enable_boundary: bool = True
    normalized_boundary: bool = True

    def __post_init__(self):
        for f in fields(self):
            if f.name.startswith("lambda_") and getattr(self, f.name) < 0:
                raise ConfigError(f"{f.name} must be non-negative")
        if self.gamma < 0:
            raise ConfigError("gamma must be non-negative")
        if not 0.0 <= self.alpha_focal <= 1.0:
            raise ConfigError("alpha_focal must lie in [0, 1]")
        if self.epsilon_dice <= 0:
            raise ConfigError("epsilon_dice must be positive")
        if self.boundary_alpha < 0 or self.boundary_m_alpha < 0:
            raise ConfigError("boundary scaling factors must be non-negative")

    @classmethod
    def focal_only(cls) -> "LossConfig":
        return cls(enable_dice=False, enable_lovasz=False, enable_sem=False,
                   enable_geo=False, enable_boundary=False)

    def enabled_terms(self) -> list[str]:
        return [name for name in TERM_ORDER if getattr(self, f"enable_{_FLAG[name]}")]

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown loss config keys: {sorted(extra)}")
        return cls(**d)


TERM_ORDER = ("focal", "dice", "lovasz", "sem_scal", "geo_scal", "norm_bound")
_FLAG = {"focal": "focal", "dice": "dice", "lovasz": "lovasz",
         "sem_scal": "sem", "geo_scal": "geo", "norm_bound": "boundary"}


@dataclass
class LossBreakdown:
    """Unweighted and weighted values of each enabled term, plus the tape total."""

    terms: dict[str, float]
    weighted: dict[str, float]
    total: float
    tensor: Tensor = field(repr=False, default=None)

    def worst_term(self) -> str | None:
        bad = [k for k, v in self.terms.items() if not np.isfinite(v)]
        return bad[0] if bad else None


def total_loss(p: Tensor, g: np.ndarray, cfg: LossConfig, dmap: DistanceMap | None = None) -> LossBreakdown:
    """Weighted sum of the enabled terms.

    The boundary term needs per-class distance fields; pass a precomputed
    ``dmap`` to amortize them across steps, otherwise they are derived from
    ``g`` on the spot (with the config's scaling parameters).
    """
    g = _check_pg(p, g)
    if cfg.enable_boundary and dmap is None:
        dmap = DistanceMap.from_masks(g, alpha=cfg.boundary_alpha, m_alpha=cfg.boundary_m_alpha)

    values: dict[str, Tensor] = {}
    if cfg.enable_focal:
        values["focal"] = focal_loss(p, g, gamma=cfg.gamma, alpha=cfg.alpha_focal)
    if cfg.enable_dice:
        values["dice"] = dice_loss(p, g, epsilon=cfg.epsilon_dice)
    if cfg.enable_lovasz:
        values["lovasz"] = lovasz_loss(p, g)
    if cfg.enable_sem:
        values["sem_scal"] = sem_scal_loss(p, g)
    if cfg.enable_geo:
        values["geo_scal"] = geo_scal_loss(p, g)
    if cfg.enable_boundary:
        values["norm_bound"] = boundary_loss(p, dmap, normalized=cfg.normalized_boundary)
    if not values:
        raise ConfigError("no loss terms enabled")

    lam = {"focal": cfg.lambda_focal, "dice": cfg.lambda_dice, "lovasz": cfg.lambda_lovasz,
           "sem_scal": cfg.lambda_sem, "geo_scal": cfg.lambda_geo, "norm_bound": cfg.lambda_norm_bound}
    total = None
    for name in TERM_ORDER:
        if name not in values:
            continue
        term = ops.mul(values[name], lam[name])
        total = term if total is None else total + term
    terms = {k: float(v.data) for k, v in values.items()}
    weighted = {k: terms[k] * lam[k] for k in terms}
    return LossBreakdown(terms=terms, weighted=weighted, total=float(total.data), tensor=total)
