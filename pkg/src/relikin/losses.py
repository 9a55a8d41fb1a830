"""Training objectives on ``(..., T, L, 3)`` landmark tensors in meters.

Every term averages only over valid landmarks (padded slots are masked
out). Leading batch axes are averaged like frames.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad

DEFAULT_WEIGHTS = {"nll": 1.0, "vel": 1.0, "acc": 0.5, "angle": 1.0, "pos": 1.0}
DEGENERATE_SEGMENT_M = 1e-9


def _valid(validity, L: int) -> np.ndarray:
    v = np.asarray(validity, dtype=bool)
    if v.shape != (L,):
        raise ValueError(f"validity must have shape ({L},), got {v.shape}")
    if not v.any():
        raise ValueError("no valid landmarks")
    return v


def _masked_mean(x: ad.Tensor, weights: np.ndarray) -> ad.Tensor:
    """Mean of ``x`` over entries where the broadcast 0/1 ``weights`` is 1."""
    w = np.broadcast_to(weights, x.shape)
    count = float(w.sum())
    return ad.mul(ad.reduce_sum(ad.mul(x, w)), 1.0 / count)


def _residual(pred, target) -> ad.Tensor:
    pred = ad.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ad.ShapeError("loss", pred.shape, target.shape)
    return ad.sub(target, pred)


def gaussian_nll(mean, log_var, target, validity) -> ad.Tensor:
    """0.5 * mean over valid (t, l, d) of (y - mu)^2 / sigma^2 + ln sigma^2."""
    r = _residual(mean, target)
    lv = ad.as_tensor(log_var)
    if lv.shape != r.shape:
        raise ad.ShapeError("gaussian_nll", lv.shape, r.shape)
    mask = _valid(validity, r.shape[-2])[:, None].astype(float)
    term = ad.add(ad.mul(ad.square(r), ad.exp(ad.mul(lv, -1.0))), lv)
    return ad.mul(_masked_mean(term, mask), 0.5)


def mse_loss(pred, target, validity) -> ad.Tensor:
    """Elementwise squared error averaged like :func:`gaussian_nll`."""
    r = _residual(pred, target)
    mask = _valid(validity, r.shape[-2])[:, None].astype(float)
    return _masked_mean(ad.square(r), mask)


def velocity_loss(pred, target, validity) -> ad.Tensor:
    r = _residual(pred, target)
    if r.shape[-3] < 2:
        raise ValueError("velocity_loss needs T >= 2")
    mask = _valid(validity, r.shape[-2])[:, None].astype(float)
    d = ad.sub(r[..., 1:, :, :], r[..., :-1, :, :])
    return _masked_mean(ad.square(d), mask)


def acceleration_loss(pred, target, validity) -> ad.Tensor:
    r = _residual(pred, target)
    if r.shape[-3] < 3:
        raise ValueError("acceleration_loss needs T >= 3")
    mask = _valid(validity, r.shape[-2])[:, None].astype(float)
    d2 = ad.add(ad.sub(r[..., 2:, :, :], ad.mul(r[..., 1:-1, :, :], 2.0)), r[..., :-2, :, :])
    return _masked_mean(ad.square(d2), mask)


def position_loss(pred, target, validity) -> ad.Tensor:
    """Mean Euclidean landmark distance over valid (t, l), in meters."""
    r = _residual(pred, target)
    mask = _valid(validity, r.shape[-2]).astype(float)
    dist = ad.sqrt(ad.reduce_sum(ad.square(r), axis=-1))
    return _masked_mean(dist, mask)


def _np_angles(points: np.ndarray, a, b, c):
    u = points[..., a, :] - points[..., b, :]
    v = points[..., c, :] - points[..., b, :]
    cross = np.cross(u, v)
    ang = np.arctan2(np.linalg.norm(cross, axis=-1), np.sum(u * v, axis=-1))
    ok = (np.linalg.norm(u, axis=-1) >= DEGENERATE_SEGMENT_M) & (
        np.linalg.norm(v, axis=-1) >= DEGENERATE_SEGMENT_M)
    return ang, ok


def angle_loss(pred, target, triplets: Sequence[tuple[int, int, int]], validity,
               return_skipped: bool = False):
    """Mean |angle(pred) - angle(target)| in radians over frames and triplets.

    The angle for ``(a, b, c)`` sits at ``b`` between segments b->a and
    b->c. Frames where any segment is shorter than 1e-9 m are skipped.
    An empty triplet list contributes 0.
    """
    pred = ad.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ad.ShapeError("angle_loss", pred.shape, target.shape)
    valid = _valid(validity, target.shape[-2])
    trip = np.asarray(triplets, dtype=int).reshape(-1, 3)
    if len(trip) == 0:
        return (ad.Tensor(0.0), 0) if return_skipped else ad.Tensor(0.0)
    if not valid[trip].all():
        raise ValueError("angle triplet references an invalid landmark")
    a, b, c = trip[:, 0], trip[:, 1], trip[:, 2]

    tgt_ang, tgt_ok = _np_angles(target, a, b, c)
    _, pred_ok = _np_angles(pred.value, a, b, c)
    ok = tgt_ok & pred_ok
    skipped = int(ok.size - ok.sum())
    if not ok.any():
        raise ValueError("angle_loss: every triplet is degenerate")

    pb = pred[..., b, :]
    u = ad.sub(pred[..., a, :], pb)
    v = ad.sub(pred[..., c, :], pb)
    i1, i2 = [1, 2, 0], [2, 0, 1]
    cross = ad.sub(ad.mul(u[..., i1], v[..., i2]), ad.mul(u[..., i2], v[..., i1]))
    sin_part = ad.sqrt(ad.reduce_sum(ad.square(cross), axis=-1))
    cos_part = ad.reduce_sum(ad.mul(u, v), axis=-1)
    diff = ad.abs_(ad.sub(ad.atan2(sin_part, cos_part), tgt_ang))
    loss = _masked_mean(diff, ok.astype(float))
    return (loss, skipped) if return_skipped else loss


def loss_terms(mean, log_var, target, validity, triplets=(), weights=None) -> dict[str, ad.Tensor]:
    """Unweighted terms. ``nll`` is the Gaussian NLL, or MSE without ``log_var``."""
    weights = DEFAULT_WEIGHTS if weights is None else weights
    terms = {}
    if log_var is None:
        terms["nll"] = mse_loss(mean, target, validity)
    else:
        terms["nll"] = gaussian_nll(mean, log_var, target, validity)
    zero = ad.Tensor(0.0)
    terms["vel"] = velocity_loss(mean, target, validity) if weights.get("vel") else zero
    terms["acc"] = acceleration_loss(mean, target, validity) if weights.get("acc") else zero
    terms["angle"] = angle_loss(mean, target, triplets, validity) if weights.get("angle") else zero
    terms["pos"] = position_loss(mean, target, validity) if weights.get("pos") else zero
    return terms


def combine(terms: dict[str, ad.Tensor], weights) -> ad.Tensor:
    total = None
    for key in ("nll", "vel", "acc", "angle", "pos"):
        w = float(weights.get(key, 0.0))
        if w == 0.0:
            continue
        part = terms[key] if w == 1.0 else ad.mul(terms[key], w)
        total = part if total is None else ad.add(total, part)
    return ad.Tensor(0.0) if total is None else total


def composite_loss(mean, log_var, target, validity, weights=None, triplets=()) -> ad.Tensor:
    """Likelihood term plus weighted velocity, acceleration, angle and position terms."""
    weights = DEFAULT_WEIGHTS if weights is None else weights
    return combine(loss_terms(mean, log_var, target, validity, triplets, weights), weights)
