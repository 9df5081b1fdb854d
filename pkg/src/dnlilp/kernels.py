"""Gated-product kernels shared by every neural logic layer.

Both neuron types reduce to ``P[b, k] = prod_a (1 - m[k, a] * u[b, a])``:
a conjunction uses ``u = 1 - x`` and returns ``P``; a disjunction uses
``u = x`` and returns ``1 - P``.
"""

import numpy as np
from numba import njit


# fastmath lets the product loops vectorize; products of exact 0/1 factors
# stay exact under any association order
@njit(cache=True, fastmath=True)
def gated_product(u, m):
    B, n = u.shape
    K = m.shape[0]
    out = np.empty((B, K))
    for b in range(B):
        ub = u[b]
        for k in range(K):
            mk = m[k]
            p = 1.0
            for a in range(n):
                p *= 1.0 - mk[a] * ub[a]
            out[b, k] = p
    return out


# below this a product may have lost factors to underflow
_SAFE_PRODUCT = 1e-250


@njit(cache=True, fastmath=True)
def gated_product_grad(u, m, g):
    """Gradients of ``sum(g * P)`` w.r.t. ``u`` and ``m``.

    The product of the other factors is ``P / factor`` while ``P`` is safely
    away from underflow; otherwise prefix/suffix products are used, which
    also handle exact zeros without division.
    """
    B, n = u.shape
    K = m.shape[0]
    du = np.zeros((B, n))
    dm = np.zeros((K, n))
    f = np.empty(n)
    prefix = np.empty(n)
    for b in range(B):
        ub = u[b]
        dub = du[b]
        for k in range(K):
            gk = g[b, k]
            if gk == 0.0:
                continue
            mk = m[k]
            dmk = dm[k]
            p = 1.0
            for a in range(n):
                f[a] = 1.0 - mk[a] * ub[a]
                p *= f[a]
            if p > _SAFE_PRODUCT:
                t = gk * p
                for a in range(n):
                    r = t / f[a]
                    dub[a] -= r * mk[a]
                    dmk[a] -= r * ub[a]
            else:
                q = 1.0
                for a in range(n):
                    prefix[a] = q
                    q *= f[a]
                s = gk
                for a in range(n - 1, -1, -1):
                    r = prefix[a] * s
                    dub[a] -= r * mk[a]
                    dmk[a] -= r * ub[a]
                    s *= f[a]
    return du, dm


@njit(cache=True, fastmath=True)
def gated_product_grad_scatter(u, m, g, idx, sign, out):
    """As :func:`gated_product_grad`, but ``sign[a] * du[b, a]`` is added to
    ``out[idx[b, a]]`` instead of being returned; returns ``dm``."""
    B, n = u.shape
    K = m.shape[0]
    dm = np.zeros((K, n))
    f = np.empty(n)
    prefix = np.empty(n)
    dub = np.empty(n)
    r = np.empty(n)
    for b in range(B):
        ub = u[b]
        dub[:] = 0.0
        touched = False
        for k in range(K):
            gk = g[b, k]
            if gk == 0.0:
                continue
            touched = True
            mk = m[k]
            dmk = dm[k]
            p = 1.0
            for a in range(n):
                f[a] = 1.0 - mk[a] * ub[a]
                p *= f[a]
            if p > _SAFE_PRODUCT:
                t = gk * p
                for a in range(n):
                    r[a] = t / f[a]
            else:
                q = 1.0
                for a in range(n):
                    prefix[a] = q
                    q *= f[a]
                s = gk
                for a in range(n - 1, -1, -1):
                    r[a] = prefix[a] * s
                    s *= f[a]
            # separate loops, one output each, so they vectorize
            for a in range(n):
                dub[a] -= r[a] * mk[a]
            for a in range(n):
                dmk[a] -= r[a] * ub[a]
        if touched:
            ib = idx[b]
            for a in range(n):
                out[ib[a]] += sign[a] * dub[a]
    return dm


def gated_product_reference(u, m):
    """Plain numpy version, used as a check on the compiled kernel."""
    return np.prod(1.0 - m[None, :, :] * u[:, None, :], axis=-1)


def prod_except(factors: np.ndarray, axis: int = -1) -> np.ndarray:
    """Product of all other entries along ``axis`` (exact with zeros)."""
    f = np.moveaxis(factors, axis, -1)
    ones = np.ones(f.shape[:-1] + (1,))
    left = np.cumprod(np.concatenate([ones, f[..., :-1]], axis=-1), axis=-1)
    right = np.cumprod(np.concatenate([ones, f[..., :0:-1]], axis=-1), axis=-1)[..., ::-1]
    return np.moveaxis(left * right, -1, axis)
