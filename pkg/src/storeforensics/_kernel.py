"""Compiled Metropolis-within-Gibbs sweep used by :mod:`inference`.

Factors whose probes all succeeded (``y == n``) contribute
``n * log A``, and ``log A`` splits into per-component ``log X`` terms and
per-group ``log(1 - prod(1 - X))`` terms.  Those factors are therefore
folded into weights ``w_serial`` (per variable) and ``w_group`` (per
distinct redundancy group); only factors with failures are evaluated one by
one.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

EPS = 1e-12
# logit bound; keeps X and 1 - X away from zero
Z_MAX = 30.0


@njit(cache=True)
def _log_expit(z):
    if z >= 0:
        return -math.log1p(math.exp(-z))
    return z - math.log1p(math.exp(z))


@njit(cache=True)
def factor_loglik(x, f, serial, groups, n, y):
    a = 1.0
    for s in range(serial.shape[1]):
        a *= x[serial[f, s]]
    for g in range(groups.shape[1]):
        miss = 1.0
        for m in range(groups.shape[2]):
            miss *= 1.0 - x[groups[f, g, m]]
        a *= 1.0 - miss
    if a < EPS:
        a = EPS
    elif a > 1.0 - EPS:
        a = 1.0 - EPS
    out = 0.0
    if y[f] > 0:
        out += y[f] * math.log(a)
    if n[f] > y[f]:
        out += (n[f] - y[f]) * math.log1p(-a)
    return out


@njit(cache=True)
def all_loglik(x, serial, groups, n, y, out):
    for f in range(serial.shape[0]):
        out[f] = factor_loglik(x, f, serial, groups, n, y)


@njit(cache=True)
def _group_miss(x, members, g):
    miss = 1.0
    for m in range(members.shape[1]):
        miss *= 1.0 - x[members[g, m]]
    return miss


@njit(cache=True, inline="always")
def _update(v, jump, log_u, x, z, ll, accepted, serial, groups, n, y, vf_ptr, vf_idx,
            alpha, beta, scratch, w_serial, members, w_group, vg_ptr, vg_idx):
    z_old = z[v]
    z_new = z_old + jump
    if z_new > Z_MAX or z_new < -Z_MAX:
        return
    x_old = x[v]
    x_new = 1.0 / (1.0 + math.exp(-z_new))
    lx_new, lx_old = _log_expit(z_new), _log_expit(z_old)
    delta = ((alpha[v] + w_serial[v]) * (lx_new - lx_old)
             + beta[v] * (_log_expit(-z_new) - _log_expit(-z_old)))
    for k in range(vg_ptr[v], vg_ptr[v + 1]):
        g = vg_idx[k]
        miss_old = _group_miss(x, members, g)
        x[v] = x_new
        miss_new = _group_miss(x, members, g)
        x[v] = x_old
        delta += w_group[g] * (math.log1p(-miss_new) - math.log1p(-miss_old))
    x[v] = x_new
    lo, hi = vf_ptr[v], vf_ptr[v + 1]
    for k in range(lo, hi):
        f = vf_idx[k]
        new = factor_loglik(x, f, serial, groups, n, y)
        scratch[k - lo] = new
        delta += new - ll[f]
    if log_u < delta:
        z[v] = z_new
        accepted[v] += 1.0
        for k in range(lo, hi):
            ll[vf_idx[k]] = scratch[k - lo]
    else:
        x[v] = x_old


@njit(cache=True)
def sweep_block(x, z, ll, step, accepted, noise, log_u, draws, record_from,
                serial, groups, n, y, vf_ptr, vf_idx, alpha, beta, scratch,
                w_serial, members, w_group, vg_ptr, vg_idx):
    """Run ``noise.shape[0]`` sweeps for one chain, updating state in place.

    Each sweep gives every variable ``noise.shape[1]`` Metropolis updates.
    ``ll`` caches the log-likelihood of the individually evaluated factors.
    Sweep ``b`` is stored in ``draws[b - record_from]`` when
    ``b >= record_from``.  Proposals beyond ``|z| > Z_MAX`` are rejected,
    which truncates the target to a range carrying negligible mass.
    """
    nv = z.shape[0]
    for b in range(noise.shape[0]):
        for v in range(nv):
            for r in range(noise.shape[1]):
                _update(v, step[v] * noise[b, r, v], log_u[b, r, v], x, z, ll, accepted,
                        serial, groups, n, y, vf_ptr, vf_idx, alpha, beta, scratch,
                        w_serial, members, w_group, vg_ptr, vg_idx)
        if b >= record_from:
            for v in range(nv):
                draws[b - record_from, v] = x[v]


def warmup() -> None:
    """Trigger compilation on a tiny problem."""
    x = np.array([0.5, 1.0, 0.0])
    serial = np.array([[0]], dtype=np.intp)
    groups = np.full((1, 1, 1), 1, dtype=np.intp)
    n, y = np.array([1.0]), np.array([0.0])
    ll = np.zeros(1)
    ptr = np.array([0, 1], dtype=np.intp)
    idx = np.array([0], dtype=np.intp)
    all_loglik(x, serial, groups, n, y, ll)
    sweep_block(x, np.zeros(1), ll, np.ones(1), np.zeros(1), np.zeros((1, 1, 1)),
                np.zeros((1, 1, 1)), np.zeros((1, 1)), 0, serial, groups, n, y, ptr, idx, np.ones(1), np.ones(1),
                np.zeros(1), np.zeros(1), np.full((1, 1), 2, dtype=np.intp), np.zeros(1),
                np.array([0, 0], dtype=np.intp), np.zeros(0, dtype=np.intp))
