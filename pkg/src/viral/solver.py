"""Robust nonlinear least squares on manifolds (Gauss-Newton / Levenberg-Marquardt).

A :class:`Problem` holds parameter blocks and residual blocks.  Each residual
block wraps a :class:`Factor` that evaluates a *batch* of samples at once:
residuals of shape ``(n, d)`` and one Jacobian ``(n, d, k_j)`` per parameter
block, taken with respect to the block's local (tangent) coordinates.  The
robust loss is applied per sample on ``s = ||r_i||^2``.

The total cost is ``0.5 * sum(rho(s))``, Ceres-style.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import quat_exp, quat_multiply, quat_to_matrix, right_jacobian_inv, so3_log

log = logging.getLogger(__name__)


class EvaluationError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# manifolds


class Manifold:
    global_size: int
    local_size: int

    def plus(self, x: np.ndarray, dx: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def minus(self, x: np.ndarray, x0: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def minus_jacobian(self, x: np.ndarray, x0: np.ndarray) -> np.ndarray:
        """d minus(plus(x, d), x0) / dd at d = 0."""
        raise NotImplementedError


class Euclidean(Manifold):
    def __init__(self, n: int):
        self.global_size = self.local_size = n

    def plus(self, x, dx):
        return x + dx

    def minus(self, x, x0):
        return x - x0

    def minus_jacobian(self, x, x0):
        return np.eye(self.local_size)


class _RotationLeading(Manifold):
    """Quaternion followed by a Euclidean tail; right perturbation on the rotation."""

    def __init__(self, tail: int):
        self.tail = tail
        self.global_size = 4 + tail
        self.local_size = 3 + tail

    def plus(self, x, dx):
        out = np.empty(self.global_size)
        q = quat_multiply(x[:4], quat_exp(dx[:3]))
        out[:4] = q / np.linalg.norm(q)
        out[4:] = x[4:] + dx[3:]
        return out

    def minus(self, x, x0):
        out = np.empty(self.local_size)
        out[:3] = so3_log(quat_to_matrix(x0[:4]).T @ quat_to_matrix(x[:4]))
        out[3:] = x[4:] - x0[4:]
        return out

    def minus_jacobian(self, x, x0):
        J = np.eye(self.local_size)
        J[:3, :3] = right_jacobian_inv(self.minus(x, x0)[:3])
        return J


class PoseManifold(_RotationLeading):
    """(qw, qx, qy, qz, tx, ty, tz); tangent (dtheta, dt)."""

    def __init__(self):
        super().__init__(3)


class NavStateManifold(_RotationLeading):
    """(q, p, v, bg, ba); tangent (dtheta, dp, dv, dbg, dba)."""

    def __init__(self):
        super().__init__(12)


POSE = PoseManifold()
NAVSTATE = NavStateManifold()


# --------------------------------------------------------------------------
# robust losses


@dataclass(frozen=True)
class RobustLoss:
    kind: str = "none"  # none | huber | arctan
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("none", "huber", "arctan"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.scale <= 0:
            raise ValueError("loss scale must be positive")


NO_LOSS = RobustLoss()


def huber(delta: float) -> RobustLoss:
    return RobustLoss("huber", delta)


def arctan(c: float) -> RobustLoss:
    return RobustLoss("arctan", c)


def apply_robust_loss(loss: RobustLoss, s):
    """Return (rho, rho', rho'') evaluated at squared norm ``s``."""
    s = np.asarray(s, dtype=float)
    if loss.kind == "none":
        return s.copy(), np.ones_like(s), np.zeros_like(s)
    if loss.kind == "huber":
        b = loss.scale**2
        outer = s > b
        root = np.sqrt(np.where(outer, s, 1.0))
        rho = np.where(outer, 2.0 * loss.scale * root - b, s)
        rho1 = np.where(outer, loss.scale / root, 1.0)
        rho2 = np.where(outer, -0.5 * rho1 / np.where(outer, s, 1.0), 0.0)
        return rho, rho1, rho2
    # arctan
    b = loss.scale**2
    u = s / b
    rho = b * np.arctan(u)
    rho1 = 1.0 / (1.0 + u * u)
    rho2 = -2.0 * u / (b * (1.0 + u * u) ** 2)
    return rho, rho1, rho2


def _correct(loss: RobustLoss, r: np.ndarray, Js: list[np.ndarray] | None):
    """Triggs correction: rescale residuals/Jacobians so that the Gauss-Newton
    model of the robustified cost matches to second order."""
    s = np.einsum("nd,nd->n", r, r)
    rho, rho1, rho2 = apply_robust_loss(loss, s)
    if loss.kind == "none":
        return rho, r, Js
    sqrt_rho1 = np.sqrt(rho1)
    mask = (s > 0) & (rho2 > 0)
    safe_s = np.where(mask, s, 1.0)
    alpha = np.where(mask, 1.0 - np.sqrt(np.maximum(1.0 + 2.0 * safe_s * rho2 / rho1, 0.0)), 0.0)
    scaling = np.where(mask, sqrt_rho1 / (1.0 - alpha), sqrt_rho1)
    alpha_sq = np.where(mask, alpha / safe_s, 0.0)
    rc = r * scaling[:, None]
    if Js is None:
        return rho, rc, None
    out = []
    for J in Js:
        if np.any(alpha_sq):
            rtJ = np.einsum("nd,ndk->nk", r, J)
            J = J - alpha_sq[:, None, None] * np.einsum("nd,nk->ndk", r, rtJ)
        out.append(J * sqrt_rho1[:, None, None])
    return rho, rc, out


# --------------------------------------------------------------------------
# problem definition


class Factor:
    """A batch of residual samples over an ordered list of parameter blocks.

    Factors whose samples each touch only a few of many blocks may also define
    ``evaluate_compact(values) -> (r, Js)`` with per-sample Jacobians in a layout
    of their choosing, and ``accumulate(H, g, r, Js, offsets)`` adding
    J^T J and J^T r into the normal equations; ``linearize`` then uses them.
    """

    name = "factor"

    def evaluate(self, values: list[np.ndarray], jacobians: bool = True):
        raise NotImplementedError


@dataclass(eq=False)
class ParameterBlock:
    value: np.ndarray
    manifold: Manifold
    constant: bool = False
    name: str = ""

    def __post_init__(self):
        self.value = np.array(self.value, dtype=float).reshape(self.manifold.global_size)


@dataclass(eq=False)
class ResidualBlock:
    factor: Factor
    blocks: list[ParameterBlock]
    loss: RobustLoss = NO_LOSS


@dataclass
class SolveOptions:
    method: str = "lm"  # lm | gn
    max_iterations: int = 8
    function_tolerance: float = 1e-6
    gradient_tolerance: float = 1e-10
    parameter_tolerance: float = 1e-10
    initial_damping: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 0.5
    min_damping: float = 1e-12
    max_damping: float = 1e8
    model_agreement: float = 1e-3  # |actual/predicted - 1| below which the next LM step is undamped


@dataclass
class SolveReport:
    initial_cost: float
    final_cost: float
    iterations: int
    termination: str
    cost_history: list[float] = field(default_factory=list)

    @property
    def monotone(self) -> bool:
        return all(b <= a for a, b in zip(self.cost_history, self.cost_history[1:]))

    def to_dict(self) -> dict:
        return {
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "iterations": self.iterations,
            "termination": self.termination,
            "cost_history": list(self.cost_history),
        }


class Problem:
    def __init__(self):
        self.blocks: list[ParameterBlock] = []
        self.residuals: list[ResidualBlock] = []
        self._ids: set[int] = set()

    def add_block(self, value, manifold: Manifold | None = None, constant: bool = False, name: str = "") -> ParameterBlock:
        value = np.asarray(value, dtype=float)
        if manifold is None:
            manifold = Euclidean(value.size)
        block = ParameterBlock(value, manifold, constant, name)
        self.blocks.append(block)
        self._ids.add(id(block))
        return block

    def add_residual(self, factor: Factor, blocks: list[ParameterBlock], loss: RobustLoss = NO_LOSS) -> ResidualBlock:
        for b in blocks:
            if id(b) not in self._ids:
                raise ValueError(f"residual {factor.name} references a block not in the problem")
        rb = ResidualBlock(factor, list(blocks), loss)
        self.residuals.append(rb)
        return rb

    def cost(self) -> float:
        return _evaluate_cost(self.residuals)


def _evaluate_cost(residuals: list[ResidualBlock]) -> float:
    total = 0.0
    for rb in residuals:
        r, _ = rb.factor.evaluate([b.value for b in rb.blocks], jacobians=False)
        if r.size == 0:
            continue
        if not np.all(np.isfinite(r)):
            return math.inf
        rho, _, _ = apply_robust_loss(rb.loss, np.einsum("nd,nd->n", r, r))
        total += 0.5 * float(rho.sum())
    return total


def linearize(residuals: list[ResidualBlock], offsets: dict[int, int], size: int, check: bool = False):
    """Accumulate cost, normal matrix H = J^T J and gradient g = J^T r over ``residuals``."""
    H = np.zeros((size, size))
    g = np.zeros(size)
    cost = 0.0
    for rb in residuals:
        compact = hasattr(rb.factor, "evaluate_compact")
        values = [b.value for b in rb.blocks]
        r, Js = rb.factor.evaluate_compact(values) if compact else rb.factor.evaluate(values, jacobians=True)
        if r.size == 0:
            continue
        if check and not (np.all(np.isfinite(r)) and all(np.all(np.isfinite(J)) for J in Js)):
            raise EvaluationError(f"non-finite residual or Jacobian in factor {rb.factor.name!r}")
        rho, rc, Jc = _correct(rb.loss, r, Js)
        cost += 0.5 * float(rho.sum())
        if compact:
            rb.factor.accumulate(H, g, rc, Jc, [offsets.get(id(b)) for b in rb.blocks])
            continue
        rf = rc.reshape(-1)
        idx = []
        for b, J in zip(rb.blocks, Jc):
            o = offsets.get(id(b))
            if o is not None:
                idx.append((o, J.reshape(rf.size, -1)))
        for i, (oa, Ja) in enumerate(idx):
            ka = Ja.shape[1]
            g[oa : oa + ka] += Ja.T @ rf
            for ob, Jb in idx[i:]:
                kb = Jb.shape[1]
                blk = Ja.T @ Jb
                H[oa : oa + ka, ob : ob + kb] += blk
                if ob != oa:
                    H[ob : ob + kb, oa : oa + ka] += blk.T
    return cost, H, g


def _solve_linear(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        L = np.linalg.cholesky(A)
        y = np.linalg.solve(L, b)
        return np.linalg.solve(L.T, y)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(A, b, rcond=None)[0]


def _free_layout(problem: Problem):
    offsets: dict[int, int] = {}
    free: list[ParameterBlock] = []
    size = 0
    used = {id(b) for rb in problem.residuals for b in rb.blocks}
    for b in problem.blocks:
        if b.constant or id(b) not in used:
            continue
        offsets[id(b)] = size
        free.append(b)
        size += b.manifold.local_size
    return offsets, free, size


def solve(problem: Problem, options: SolveOptions | None = None) -> SolveReport:
    opts = options or SolveOptions()
    offsets, free, size = _free_layout(problem)
    if size == 0:
        c = problem.cost()
        return SolveReport(c, c, 0, "no_free_parameters", [c])

    cost, H, g = linearize(problem.residuals, offsets, size, check=True)
    initial = cost
    history = [cost]
    mu = opts.initial_damping
    termination = "max_iterations"
    iterations = 0

    def step_to(dx):
        saved = [b.value for b in free]
        for b in free:
            o = offsets[id(b)]
            b.value = b.manifold.plus(b.value, dx[o : o + b.manifold.local_size])
        return saved

    def restore(saved):
        for b, v in zip(free, saved):
            b.value = v

    for it in range(opts.max_iterations):
        iterations = it + 1
        if np.max(np.abs(g)) < opts.gradient_tolerance:
            termination = "gradient"
            iterations = it
            break
        if opts.method == "gn":
            dx = _solve_linear(H, -g)
            accepted = False
            scale = 1.0
            for _ in range(12):
                saved = step_to(scale * dx)
                new_cost = problem.cost()
                if new_cost <= cost:
                    accepted = True
                    break
                restore(saved)
                scale *= 0.5
            if not accepted:
                termination = "no_descent"
                break
        else:
            D = np.clip(np.diag(H), 1e-6, 1e32)
            dx = _solve_linear(H + mu * np.diag(D), -g)
            xnorm = math.sqrt(sum(float(b.value @ b.value) for b in free))
            if np.linalg.norm(dx) <= opts.parameter_tolerance * (xnorm + opts.parameter_tolerance):
                termination = "parameter"
                break
            saved = step_to(dx)
            new_cost = problem.cost()
            if not (new_cost < cost) or not math.isfinite(new_cost):
                restore(saved)
                mu = min(mu * opts.damping_up, opts.max_damping)
                if mu >= opts.max_damping:
                    termination = "damping"
                    break
                continue
            # when the quadratic model predicted the decrease, damping only slows convergence
            predicted = -(g @ dx + 0.5 * dx @ H @ dx)
            exact = predicted > 0 and abs((cost - new_cost) / predicted - 1.0) < opts.model_agreement
            mu = opts.min_damping if exact else max(mu * opts.damping_down, opts.min_damping)
        rel = (cost - new_cost) / max(cost, 1e-300)
        cost, H, g = linearize(problem.residuals, offsets, size)
        history.append(cost)
        if rel < opts.function_tolerance:
            termination = "function"
            break
    return SolveReport(initial, cost, iterations, termination, history)


# --------------------------------------------------------------------------
# marginalization


class LinearPrior(Factor):
    """Gaussian prior ``r = J (x [-] x0) + r0`` with fixed Jacobian ``J``."""

    name = "prior"

    def __init__(self, J: np.ndarray, r0: np.ndarray, x0: list[np.ndarray], manifolds: list[Manifold]):
        self.J = np.asarray(J, dtype=float)
        self.r0 = np.asarray(r0, dtype=float)
        self.x0 = [np.array(x, dtype=float) for x in x0]
        self.manifolds = manifolds
        self.cols = np.cumsum([0] + [m.local_size for m in manifolds])

    def evaluate(self, values, jacobians=True):
        delta = np.concatenate([m.minus(x, x0) for m, x, x0 in zip(self.manifolds, values, self.x0)])
        r = (self.J @ delta + self.r0)[None, :]
        if not jacobians:
            return r, None
        Js = []
        for i, (m, x, x0) in enumerate(zip(self.manifolds, values, self.x0)):
            Ji = self.J[:, self.cols[i] : self.cols[i + 1]] @ m.minus_jacobian(x, x0)
            Js.append(Ji[None])
        return r, Js


def information_to_prior(H: np.ndarray, b: np.ndarray, eps: float = 1e-8):
    """Factor an information matrix / gradient pair into (J, r0) with J^T J = H, J^T r0 = b."""
    H = 0.5 * (H + H.T)
    w, U = np.linalg.eigh(H)
    if w.size == 0:
        return np.zeros((0, 0)), np.zeros(0), True
    keep = w > eps * max(w.max(), 1.0)
    indefinite = w.min() < -1e-6 * max(abs(w).max(), 1.0)
    sw = np.sqrt(w[keep])
    J = sw[:, None] * U[:, keep].T
    r0 = (U[:, keep].T @ b) / sw
    return J, r0, not indefinite


def schur_complement(H: np.ndarray, b: np.ndarray, marg: int):
    """Eliminate the first ``marg`` variables of (H, b)."""
    Hmm = 0.5 * (H[:marg, :marg] + H[:marg, :marg].T)
    w, U = np.linalg.eigh(Hmm)
    inv_w = np.where(w > 1e-8 * max(w.max(), 1e-300), 1.0 / np.where(w > 0, w, 1.0), 0.0)
    Hmm_inv = (U * inv_w) @ U.T
    Hrm = H[marg:, :marg]
    Hr = H[marg:, marg:] - Hrm @ Hmm_inv @ Hrm.T
    br = b[marg:] - Hrm @ Hmm_inv @ b[:marg]
    return Hr, br


def marginal_prior(
    residuals: list[ResidualBlock],
    departing: list[ParameterBlock],
    fallback_sigmas: dict[int, np.ndarray] | None = None,
):
    """Marginalize ``departing`` blocks out of ``residuals`` at the current values.

    Returns ``(LinearPrior, kept_blocks)`` or ``None`` when nothing remains
    coupled.  On an indefinite reduced system the prior falls back to a
    diagonal prior with the sigmas in ``fallback_sigmas`` (keyed by block id).
    """
    dep_ids = {id(b) for b in departing}
    touching = [rb for rb in residuals if any(id(b) in dep_ids for b in rb.blocks)]
    kept: list[ParameterBlock] = []
    seen = set(dep_ids)
    for rb in touching:
        for b in rb.blocks:
            if id(b) not in seen and not b.constant:
                seen.add(id(b))
                kept.append(b)
    if not kept:
        return None
    offsets = {}
    size = 0
    for b in list(departing) + kept:
        offsets[id(b)] = size
        size += b.manifold.local_size
    marg = sum(b.manifold.local_size for b in departing)
    _, H, g = linearize(touching, offsets, size)
    Hr, br = schur_complement(H, g, marg)
    J, r0, ok = information_to_prior(Hr, br)
    if not ok:
        log.warning("indefinite marginal information; using diagonal fallback prior")
        sig = np.concatenate(
            [
                (fallback_sigmas or {}).get(id(b), np.full(b.manifold.local_size, 1e3))
                for b in kept
            ]
        )
        J = np.diag(1.0 / sig)
        r0 = np.zeros(sig.size)
    if J.shape[0] == 0:
        return None
    prior = LinearPrior(J, r0, [b.value for b in kept], [b.manifold for b in kept])
    return prior, kept


def covariance(problem: Problem, blocks: list[ParameterBlock]) -> np.ndarray:
    """Marginal covariance of ``blocks`` (tangent coordinates) at the current estimate."""
    offsets, free, size = _free_layout(problem)
    _, H, _ = linearize(problem.residuals, offsets, size)
    cov = np.linalg.inv(H)
    idx = np.concatenate([np.arange(offsets[id(b)], offsets[id(b)] + b.manifold.local_size) for b in blocks])
    return cov[np.ix_(idx, idx)]
