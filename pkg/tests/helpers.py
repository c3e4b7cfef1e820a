import numpy as np

from viral.geometry import exp_so3
from viral.solver import NAVSTATE


def numeric_jacobian(fun, values, manifolds, i, eps=1e-6):
    """Central differences of ``fun(values)`` w.r.t. the tangent of block ``i``."""
    m = manifolds[i]
    cols = []
    for k in range(m.local_size):
        d = np.zeros(m.local_size)
        d[k] = eps
        plus = list(values)
        minus = list(values)
        plus[i] = m.plus(values[i], d)
        minus[i] = m.plus(values[i], -d)
        cols.append((np.ravel(fun(plus)) - np.ravel(fun(minus))) / (2 * eps))
    return np.stack(cols, axis=-1)


def rel_err(analytic, numeric):
    analytic = np.reshape(analytic, numeric.shape)
    return np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)


def random_rotation(rng, scale=np.pi):
    v = rng.normal(size=3)
    v = v / np.linalg.norm(v) * rng.uniform(0, scale)
    return exp_so3(v)


def random_navstate(rng, bias_scale=0.05):
    q = random_rotation(rng).quat
    return np.concatenate([q, rng.normal(size=3) * 3, rng.normal(size=3), rng.normal(size=3) * bias_scale * 0.1,
                           rng.normal(size=3) * bias_scale])


def perturb_navstate(x, rng, scale=0.05):
    return NAVSTATE.plus(x, rng.normal(size=15) * scale)
