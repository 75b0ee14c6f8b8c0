"""Hot inner loops for local SGD.

Every kernel body is restricted to the numpy subset that numba's ``@njit``
accepts, so the same source runs compiled (numba lane) or interpreted
(numpy lane); see :mod:`fedskew.backend`.

Kernels never draw randomness themselves: batch orders and gradient noise
are produced by the caller from seeded streams, which keeps results
independent of the lane and of worker scheduling.

All kernels return ``(max_sq_grad_norm, bad_step)`` where ``bad_step`` is
the first step index at which a parameter left the trust region
(non-finite or above ``PARAM_LIMIT`` in magnitude), or -1 when none did.
"""

from __future__ import annotations

import numpy as np

from .backend import jit_kernel

PARAM_LIMIT = 1e12


def _quadratic_sgd(A, b, w0, rates, noise, iterates, grads):
    # w <- w - eta_s * (A w - b + noise_s), recording every iterate/gradient.
    d = w0.shape[0]
    n_steps = rates.shape[0]
    for j in range(d):
        iterates[0, j] = w0[j]
    gmax = 0.0
    bad = -1
    for s in range(n_steps):
        g = np.dot(A, iterates[s])
        sq = 0.0
        for j in range(d):
            g[j] = g[j] - b[j] + noise[s, j]
            grads[s, j] = g[j]
            sq += g[j] * g[j]
        if sq > gmax:
            gmax = sq
        eta = rates[s]
        ok = True
        for j in range(d):
            v = iterates[s, j] - eta * g[j]
            iterates[s + 1, j] = v
            if not np.isfinite(v) or abs(v) > PARAM_LIMIT:
                ok = False
        if not ok and bad < 0:
            bad = s
    return gmax, bad


def _softmax_sgd(X, y, W, b, orders, rates, batch_size):
    # Mini-batch SGD on mean cross-entropy of a linear softmax model.
    # orders: one row per epoch of sample indices to visit, in order;
    # batches are contiguous slices of each row (last short slice kept).
    d = X.shape[1]
    n_visit = orders.shape[1]
    k = W.shape[1]
    gmax = 0.0
    bad = -1
    step = 0
    for e in range(orders.shape[0]):
        start = 0
        while start < n_visit:
            stop = min(start + batch_size, n_visit)
            m = stop - start
            Xb = np.empty((m, d))
            for r in range(m):
                idx = orders[e, start + r]
                for c in range(d):
                    Xb[r, c] = X[idx, c]
            logits = np.dot(Xb, W)
            delta = np.empty((m, k))
            for r in range(m):
                row_max = logits[r, 0] + b[0]
                for c in range(k):
                    logits[r, c] += b[c]
                    if logits[r, c] > row_max:
                        row_max = logits[r, c]
                total = 0.0
                for c in range(k):
                    delta[r, c] = np.exp(logits[r, c] - row_max)
                    total += delta[r, c]
                for c in range(k):
                    delta[r, c] /= total
                delta[r, y[orders[e, start + r]]] -= 1.0
            gW = np.dot(Xb.T, delta)
            sq = 0.0
            eta = rates[step]
            ok = True
            for c in range(k):
                gb = 0.0
                for r in range(m):
                    gb += delta[r, c]
                gb /= m
                sq += gb * gb
                v = b[c] - eta * gb
                b[c] = v
                if not np.isfinite(v) or abs(v) > PARAM_LIMIT:
                    ok = False
            for j in range(d):
                for c in range(k):
                    g = gW[j, c] / m
                    sq += g * g
                    v = W[j, c] - eta * g
                    W[j, c] = v
                    if not np.isfinite(v) or abs(v) > PARAM_LIMIT:
                        ok = False
            if sq > gmax:
                gmax = sq
            if not ok and bad < 0:
                bad = step
            step += 1
            start = stop
    return gmax, bad


def _mlp_sgd(X, y, W1, b1, W2, b2, orders, rates, batch_size):
    # Mini-batch SGD on mean cross-entropy of a one-hidden-layer ReLU MLP.
    d = X.shape[1]
    n_visit = orders.shape[1]
    h = W1.shape[1]
    k = W2.shape[1]
    gmax = 0.0
    bad = -1
    step = 0
    for e in range(orders.shape[0]):
        start = 0
        while start < n_visit:
            stop = min(start + batch_size, n_visit)
            m = stop - start
            Xb = np.empty((m, d))
            for r in range(m):
                idx = orders[e, start + r]
                for c in range(d):
                    Xb[r, c] = X[idx, c]
            Z = np.dot(Xb, W1)
            H = np.empty((m, h))
            for r in range(m):
                for c in range(h):
                    Z[r, c] += b1[c]
                    H[r, c] = Z[r, c] if Z[r, c] > 0.0 else 0.0
            logits = np.dot(H, W2)
            delta = np.empty((m, k))
            for r in range(m):
                row_max = logits[r, 0] + b2[0]
                for c in range(k):
                    logits[r, c] += b2[c]
                    if logits[r, c] > row_max:
                        row_max = logits[r, c]
                total = 0.0
                for c in range(k):
                    delta[r, c] = np.exp(logits[r, c] - row_max)
                    total += delta[r, c]
                for c in range(k):
                    delta[r, c] /= total
                delta[r, y[orders[e, start + r]]] -= 1.0
            # Backprop through the hidden layer; ReLU mask from Z.
            gW2 = np.dot(H.T, delta)
            dH = np.dot(delta, W2.T)
            for r in range(m):
                for c in range(h):
                    if Z[r, c] <= 0.0:
                        dH[r, c] = 0.0
            gW1 = np.dot(Xb.T, dH)
            sq = 0.0
            eta = rates[step]
            ok = True
            for c in range(k):
                gb = 0.0
                for r in range(m):
                    gb += delta[r, c]
                gb /= m
                sq += gb * gb
                v = b2[c] - eta * gb
                b2[c] = v
                if not np.isfinite(v) or abs(v) > PARAM_LIMIT:
                    ok = False
            for c in range(h):
                gb = 0.0
                for r in range(m):
                    gb += dH[r, c]
                gb /= m
                sq += gb * gb
                v = b1[c] - eta * gb
                b1[c] = v
                if not np.isfinite(v) or abs(v) > PARAM_LIMIT:
                    ok = False
            for j in range(h):
                for c in range(k):
                    g = gW2[j, c] / m
                    sq += g * g
                    v = W2[j, c] - eta * g
                    W2[j, c] = v
                    if not np.isfinite(v) or abs(v) > PARAM_LIMIT:
                        ok = False
            for j in range(d):
                for c in range(h):
                    g = gW1[j, c] / m
                    sq += g * g
                    v = W1[j, c] - eta * g
                    W1[j, c] = v
                    if not np.isfinite(v) or abs(v) > PARAM_LIMIT:
                        ok = False
            if sq > gmax:
                gmax = sq
            if not ok and bad < 0:
                bad = step
            step += 1
            start = stop
    return gmax, bad


quadratic_sgd = jit_kernel(_quadratic_sgd)
softmax_sgd = jit_kernel(_softmax_sgd)
mlp_sgd = jit_kernel(_mlp_sgd)
