"""Shared test oracles: brute-force references and finite differences.

Everything here is deliberately written as plain loops or direct numpy,
independent of the implementation under test.
"""

import numpy as np


def conv2d_loops(x, kernel, bias, stride=1, padding=0):
    """Nested-loop cross-correlation reference."""
    b, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    xp = np.zeros((b, cin, hp, wp))
    xp[:, :, padding:padding + h, padding:padding + w] = x
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out = np.zeros((b, cout, ho, wo))
    for bi in range(b):
        for oi in range(cout):
            for hi in range(ho):
                for wi in range(wo):
                    acc = bias[oi]
                    for ci in range(cin):
                        for i in range(kh):
                            for j in range(kw):
                                acc += (xp[bi, ci, hi * stride + i, wi * stride + j]
                                        * kernel[oi, ci, i, j])
                    out[bi, oi, hi, wi] = acc
    return out


def linear_loops(x, weight, bias):
    """Triple-loop affine map reference."""
    b, n = x.shape
    m = weight.shape[0]
    out = np.zeros((b, m))
    for bi in range(b):
        for mi in range(m):
            acc = bias[mi]
            for ni in range(n):
                acc += x[bi, ni] * weight[mi, ni]
            out[bi, mi] = acc
    return out


def broadcast_mul_loops(a, b):
    """Nested-loop product of a 4-D map with a size-1-stretched 4-D map."""
    out = np.zeros_like(a)
    for bi in range(a.shape[0]):
        for ci in range(a.shape[1]):
            for hi in range(a.shape[2]):
                for wi in range(a.shape[3]):
                    out[bi, ci, hi, wi] = a[bi, ci, hi, wi] * b[
                        bi if b.shape[0] > 1 else 0,
                        ci if b.shape[1] > 1 else 0,
                        hi if b.shape[2] > 1 else 0,
                        wi if b.shape[3] > 1 else 0,
                    ]
    return out


def finite_diff_grads(scalar_fn, arrays, step=1e-5):
    """Central-difference gradients of scalar_fn w.r.t. each array.

    scalar_fn takes no arguments and must read the arrays by reference;
    entries are perturbed in place and restored.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = scalar_fn()
            flat[i] = orig - step
            fm = scalar_fn()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric, floor=1e-6):
    """Worst per-element relative error, with a floor protecting near-zeros."""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def grad_rel_err(analytic, numeric):
    """Worst absolute error relative to the gradient's own scale.

    Central differences carry absolute noise proportional to the loss
    magnitude, so near-zero elements of a large gradient tensor cannot
    be held to a per-element relative bound; the tensor norm is the
    meaningful yardstick for whole-model checks.
    """
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    if a.size == 0:
        return 0.0
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)), 1e-12)
    return float(np.max(np.abs(a - n)) / scale)
