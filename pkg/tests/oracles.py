"""Independent reference computations used only by the tests.

Each one avoids the code path it checks: plain loops instead of BLAS,
Jacobi rotations instead of power iteration, and so on.
"""

from __future__ import annotations

import math

import numpy as np


def naive_matmul(a, b):
    rows, inner = len(a), len(a[0])
    cols = len(b[0])
    out = [[0.0] * cols for _ in range(rows)]
    for i in range(rows):
        for j in range(cols):
            acc = 0.0
            for t in range(inner):
                acc += a[i][t] * b[t][j]
            out[i][j] = acc
    return np.array(out)


def jacobi_singular_values(a, sweeps=100, tol=1e-15):
    """One-sided Jacobi: rotate column pairs until mutually orthogonal."""
    u = np.array(a, dtype=np.float64, copy=True)
    if u.shape[0] < u.shape[1]:
        u = u.T.copy()
    ncol = u.shape[1]
    for _ in range(sweeps):
        off = 0.0
        for p in range(ncol - 1):
            for q in range(p + 1, ncol):
                alpha = float(u[:, p] @ u[:, p])
                beta = float(u[:, q] @ u[:, q])
                gamma = float(u[:, p] @ u[:, q])
                if abs(gamma) <= tol * math.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                off = max(off, abs(gamma) / math.sqrt(alpha * beta))
                zeta = (beta - alpha) / (2 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1 + zeta * zeta))
                c = 1 / math.sqrt(1 + t * t)
                s = c * t
                up, uq = u[:, p].copy(), u[:, q].copy()
                u[:, p] = c * up - s * uq
                u[:, q] = s * up + c * uq
        if off <= tol:
            break
    return np.sort(np.linalg.norm(u, axis=0))[::-1]


def recall_brute(scores, train_items, test_items, K):
    """Recall@K by explicit enumeration of the ranking."""
    cand = [j for j in range(len(scores)) if j not in set(train_items)]
    cand.sort(key=lambda j: (-scores[j], j))
    top = set(cand[:K])
    return sum(1 for j in test_items if j in top) / min(K, len(test_items))


def cross_entropy_cells(G, targets):
    """Mean of -log G[target] with plain Python loops."""
    total, count = 0.0, 0
    for b in range(len(targets)):
        for j in range(len(targets[b])):
            total -= math.log(max(G[b][j][targets[b][j]], 1e-30))
            count += 1
    return total / count


def mp_forward_loss(enc_w, dec_w, onehot, targets, dps=40):
    """Mean cross-entropy of a conv-dense / expand-conv autoencoder in mpmath.

    Handles exactly one encoder conv, one encoder dense layer, an expand layer
    and any number of decoder convs; weights are (out, in) nested lists and no
    biases are used.
    """
    import mpmath as mp

    mp.mp.dps = dps
    relu = lambda v: v if v > 0 else mp.mpf(0)
    conv, dense = enc_w
    expand, *convs = dec_w
    n = len(onehot[0])
    total = mp.mpf(0)
    for x, t in zip(onehot, targets):
        h = [[relu(mp.fsum(mp.mpf(conv[o][c]) * x[j][c] for c in range(len(x[j]))))
              for o in range(len(conv))] for j in range(n)]
        flat = [v for row in h for v in row]
        z = [relu(mp.fsum(mp.mpf(dense[o][q]) * flat[q] for q in range(len(flat))))
             for o in range(len(dense))]
        K = len(expand) // n
        rows = [[mp.fsum(mp.mpf(expand[j * K + o][q]) * z[q] for q in range(len(z)))
                 for o in range(K)] for j in range(n)]
        for li, w in enumerate(convs):
            rows = [[relu(v) for v in row] for row in rows]
            rows = [[mp.fsum(mp.mpf(w[o][c]) * row[c] for c in range(len(row)))
                     for o in range(len(w))] for row in rows]
        for j in range(n):
            lse = mp.log(mp.fsum(mp.exp(v) for v in rows[j]))
            total += lse - rows[j][t[j]]
    return total / (len(onehot) * n)


def param_count_bound_mp(du, delta, N, m, r, D2, beta, nu, L, chi):
    """Parameter-counting bound typed in directly from its closed form."""
    import mpmath as mp

    mp.mp.dps = 40
    du, delta, N, beta, nu, chi = map(mp.mpf, (du, delta, N, beta, nu, chi))
    P = m * r + D2
    return (3 * du**2 * mp.sqrt(mp.log(2 / delta) / (2 * N))
            + 16 * du**2 / N
            + du**2 * mp.sqrt(48 * P * (beta + nu * L) / N)
            + du**2 * mp.sqrt(P * mp.log(72 * N * (chi + beta) * (chi + 1) + 1) / N))


def norm_bound_mp(du, delta, N, m, r, D2, n, chi, a, s):
    """Norm-based bound typed in directly from its closed form."""
    import mpmath as mp

    mp.mp.dps = 40
    du, delta, N, chi = map(mp.mpf, (du, delta, N, chi))
    a = [mp.mpf(x) for x in a]
    s = [mp.mpf(x) for x in s]
    L = len(s)
    prod = mp.fprod(s)
    S = max(mp.fprod(s[l:]) for l in range(L))
    amax = max(a)
    mix = mp.fsum((a[l] / s[l]) ** (mp.mpf(2) / 3) for l in range(L)) ** mp.mpf(1.5)
    inner = 600 * N * chi * prod + 1
    out = 3 * du**2 * mp.sqrt(mp.log(2 / delta) / (2 * N)) + 16 * du**2 / N
    out += 48 * du**2 * chi**2 * mp.sqrt(m * r / N) * mp.sqrt(mp.log(inner))
    out += (1584 * du**2 * chi * prod * mix * mp.sqrt(r / N)
            * mp.sqrt(mp.log(D2 * n * (17 * N * amax * S + 7) * inner)))
    return out


def brute_force_bayes(p_cell, N):
    """Minimise the per-entry population loss over the simplex numerically.

    Logits parametrise the simplex; scipy's BFGS does the search.
    """
    from scipy.optimize import minimize

    p_cell = np.asarray(p_cell, dtype=float)

    def loss(z):
        z = z - z.max()
        logG = z - np.log(np.exp(z).sum())
        return float((p_cell * (logG[0] - logG[1:])).sum() - logG[0] / N)

    res = minimize(loss, np.zeros(p_cell.size + 1), method="BFGS",
                   options={"gtol": 1e-12, "maxiter": 10_000})
    z = res.x - res.x.max()
    return np.exp(z) / np.exp(z).sum()
