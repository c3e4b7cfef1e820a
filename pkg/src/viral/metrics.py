"""Absolute trajectory error with nearest-timestamp association."""
from __future__ import annotations

import numpy as np

from .geometry import InvalidArgument

ALIGNMENTS = ("none", "yaw+translation")


def associate(est_t, gt_t, tol: float = 0.01):
    """Index pairs (i_est, i_gt) of nearest ground-truth stamps within ``tol`` seconds."""
    est_t = np.asarray(est_t, dtype=float)
    gt_t = np.asarray(gt_t, dtype=float)
    if len(gt_t) == 0 or len(est_t) == 0:
        return np.zeros(0, int), np.zeros(0, int)
    order = np.argsort(gt_t, kind="stable")
    g = gt_t[order]
    k = np.clip(np.searchsorted(g, est_t), 1, len(g) - 1) if len(g) > 1 else np.zeros(len(est_t), int)
    if len(g) > 1:
        left = k - 1
        k = np.where(np.abs(g[left] - est_t) <= np.abs(g[k] - est_t), left, k)
    ok = np.abs(g[k] - est_t) <= tol
    return np.flatnonzero(ok), order[k[ok]]


def align_yaw_translation(est: np.ndarray, gt: np.ndarray):
    """Yaw angle and translation minimizing ||R_z(yaw) est + t - gt||^2."""
    ce, cg = est.mean(axis=0), gt.mean(axis=0)
    a, b = est - ce, gt - cg
    s = np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
    c = np.sum(a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1])
    yaw = float(np.arctan2(s, c))
    R = np.array([[np.cos(yaw), -np.sin(yaw), 0.0], [np.sin(yaw), np.cos(yaw), 0.0], [0.0, 0.0, 1.0]])
    return R, cg - R @ ce


def ate(est_t, est_p, gt_t, gt_p, align: str = "none", tol: float = 0.01) -> float:
    """RMSE of position differences after association (and optional 4-DoF alignment)."""
    if align not in ALIGNMENTS:
        raise InvalidArgument(f"unknown alignment {align!r}")
    ie, ig = associate(est_t, gt_t, tol)
    if len(ie) == 0:
        raise InvalidArgument("estimate and ground truth do not overlap in time")
    E = np.asarray(est_p, dtype=float).reshape(-1, 3)[ie]
    G = np.asarray(gt_p, dtype=float).reshape(-1, 3)[ig]
    if align == "yaw+translation" and len(E) >= 2:
        R, t = align_yaw_translation(E, G)
        E = E @ R.T + t
    return float(np.sqrt(np.mean(np.sum((E - G) ** 2, axis=1))))
