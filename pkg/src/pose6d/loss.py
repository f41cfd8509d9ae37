"""Composite training loss on label grids and its analytic gradient.

``total = lambda_pt * L_pt + L_conf + lambda_id * L_id`` where ``L_conf``
already carries the per-slot object / no-object weights. Every term is a
mean: ``L_pt`` over responsible slots and their 18 coordinate channels,
``L_conf`` over all S*S*A slots, ``L_id`` over responsible slots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gridcodec import (
    CLASS0, CONF, N_COORDS, N_POINTS, ACTIVATED, GridSpec, LabelGrid,
    confidence, confidence_derivative,
)

PROB_FLOOR = 1e-12
SIMPLEX_TOL = 1e-6


@dataclass(frozen=True)
class LossWeights:
    lambda_pt: float = 1.0
    lambda_conf_obj: float = 5.0
    lambda_conf_noobj: float = 0.1
    lambda_id: float = 1.0

    def __post_init__(self):
        if min(self.lambda_pt, self.lambda_conf_obj, self.lambda_conf_noobj, self.lambda_id) < 0:
            raise ValueError("loss weights must be non-negative")

    @classmethod
    def pretraining(cls) -> "LossWeights":
        """Warm-up weights with the confidence term switched off."""
        return cls(lambda_conf_obj=0.0, lambda_conf_noobj=0.0)


@dataclass
class LossBreakdown:
    total: float
    pt: float
    conf: float
    id: float
    grad_pt: np.ndarray
    grad_conf: np.ndarray
    grad_id: np.ndarray

    @property
    def gradient(self) -> np.ndarray:
        return self.grad_pt + self.grad_conf + self.grad_id


def _check(pred: LabelGrid, target: LabelGrid, mask, spec: GridSpec, check_simplex: bool):
    if pred.spec != spec or target.spec != spec:
        raise ValueError("prediction, target and spec disagree")
    if pred.space != ACTIVATED or target.space != ACTIVATED:
        raise ValueError("loss expects activated-space grids")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != spec.shape[:3]:
        raise ValueError(f"mask shape {mask.shape} != {spec.shape[:3]}")
    if check_simplex:
        probs = pred.data[..., CLASS0:]
        sums = probs.sum(axis=-1)
        # an all-zero class vector marks an empty slot and is allowed
        empty = np.all(probs == 0.0, axis=-1)
        if np.any(~empty & (np.abs(sums - 1.0) > SIMPLEX_TOL)) or np.any(probs < 0):
            raise ValueError("prediction class vector is not on the simplex")
    return mask


def _point_distances(pred: np.ndarray, target: np.ndarray, stride: float) -> tuple:
    # both grids share the cell, so pixel deltas are stride * offset deltas
    delta = (pred[:, :N_COORDS] - target[:, :N_COORDS]).reshape(-1, N_POINTS, 2) * stride
    return np.linalg.norm(delta, axis=-1), delta


def target_confidence(pred: LabelGrid, target: LabelGrid, mask) -> np.ndarray:
    """On-the-fly confidence targets: mean point confidence on mask slots, 0 elsewhere."""
    spec = pred.spec
    mask = np.asarray(mask, dtype=bool)
    out = np.zeros(spec.shape[:3])
    if mask.any():
        d, _ = _point_distances(pred.data[mask], target.data[mask], spec.stride)
        c = confidence(d, spec.alpha, spec.d_th, spec.raw_confidence)
        out[mask] = np.mean(c, axis=-1)
    return out


def compute_loss(pred: LabelGrid, target: LabelGrid, mask, w: LossWeights | None = None,
                 spec: GridSpec | None = None, *, stop_gradient: bool = True,
                 frozen_target_conf: np.ndarray | None = None,
                 check_simplex: bool = True) -> LossBreakdown:
    """Loss value and per-term gradients w.r.t. the activated prediction.

    With ``stop_gradient`` the confidence target is treated as a constant;
    otherwise its dependence on the predicted coordinates is differentiated
    too. ``frozen_target_conf`` overrides the on-the-fly targets.
    """
    w = w or LossWeights()
    spec = spec or pred.spec
    mask = _check(pred, target, mask, spec, check_simplex)
    P, T = pred.data, target.data
    n_slots = spec.S * spec.S * spec.A
    n_resp = int(mask.sum())

    grad_pt = np.zeros_like(P)
    grad_conf = np.zeros_like(P)
    grad_id = np.zeros_like(P)

    # coordinates
    if n_resp:
        diff = P[mask][:, :N_COORDS] - T[mask][:, :N_COORDS]
        pt = float(np.sum(diff**2) / (n_resp * N_COORDS))
        g = np.zeros((n_resp, spec.D))
        g[:, :N_COORDS] = 2.0 * diff / (n_resp * N_COORDS)
        grad_pt[mask] = w.lambda_pt * g
    else:
        pt = 0.0

    # confidence
    tc = target_confidence(pred, target, mask) if frozen_target_conf is None \
        else np.asarray(frozen_target_conf, dtype=np.float64)
    lam = np.where(mask, w.lambda_conf_obj, w.lambda_conf_noobj)
    err = P[..., CONF] - tc
    conf = float(np.sum(lam * err**2) / n_slots)
    grad_conf[..., CONF] = 2.0 * lam * err / n_slots
    if not stop_gradient and n_resp and frozen_target_conf is None:
        d, delta = _point_distances(P[mask], T[mask], spec.stride)
        dc_dd = confidence_derivative(d, spec.alpha, spec.d_th, spec.raw_confidence)
        safe = np.where(d > 0, d, 1.0)
        # d d / d offset = stride * delta_px / d, zero where d == 0
        dd_doff = np.where((d > 0)[..., None], delta * spec.stride / safe[..., None], 0.0)
        dtc = (dc_dd[..., None] * dd_doff / N_POINTS).reshape(n_resp, N_COORDS)
        g = np.zeros((n_resp, spec.D))
        g[:, :N_COORDS] = -(2.0 * w.lambda_conf_obj * err[mask] / n_slots)[:, None] * dtc
        grad_conf[mask] += g

    # classification
    if n_resp:
        probs = P[mask][:, CLASS0:]
        tprobs = T[mask][:, CLASS0:]
        clamped = np.clip(probs, PROB_FLOOR, 1.0)
        ce = -np.sum(np.where(tprobs > 0, tprobs * np.log(clamped), 0.0), axis=-1)
        ident = float(np.mean(ce))
        # at the clamp kinks (p == floor, p == 1) the clamped side is taken
        inside = (probs > PROB_FLOOR) & (probs < 1.0)
        g = np.zeros((n_resp, spec.D))
        g[:, CLASS0:] = np.where(inside, -tprobs / clamped, 0.0) / n_resp
        grad_id[mask] = w.lambda_id * g
    else:
        ident = 0.0

    total = w.lambda_pt * pt + conf + w.lambda_id * ident
    return LossBreakdown(total, pt, conf, ident, grad_pt, grad_conf, grad_id)


def loss_gradient(pred: LabelGrid, target: LabelGrid, mask, w: LossWeights | None = None,
                  spec: GridSpec | None = None, *, stop_gradient: bool = True) -> np.ndarray:
    return compute_loss(pred, target, mask, w, spec, stop_gradient=stop_gradient).gradient
