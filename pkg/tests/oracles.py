"""Slow, independent reference implementations used only by the tests.

Everything here is written with explicit Python loops or textbook
algorithms that share no code with the package.
"""

from __future__ import annotations

import math


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def gauss_inverse(A):
    """Inverse by Gauss-Jordan elimination with partial pivoting."""
    n = len(A)
    M = [[float(A[i][j]) for j in range(n)] + [1.0 if i == j else 0.0 for j in range(n)] for i in range(n)]
    for col in range(n):
        piv = max(range(col, n), key=lambda r: abs(M[r][col]))
        if M[piv][col] == 0.0:
            raise ZeroDivisionError("singular matrix")
        M[col], M[piv] = M[piv], M[col]
        p = M[col][col]
        M[col] = [v / p for v in M[col]]
        for r in range(n):
            if r != col and M[r][col] != 0.0:
                f = M[r][col]
                M[r] = [a - f * b for a, b in zip(M[r], M[col])]
    return [row[n:] for row in M]


def matmul(A, B):
    n, k, m = len(A), len(B), len(B[0])
    return [[sum(A[i][l] * B[l][j] for l in range(k)) for j in range(m)] for i in range(n)]


def transpose(A):
    return [list(col) for col in zip(*A)]


def charpoly(A):
    """Coefficients ``c`` with ``det(x I - A) = sum_k c[k] x^(n-k)`` (Faddeev-LeVerrier)."""
    n = len(A)
    coeffs = [1.0]
    M = [[0.0] * n for _ in range(n)]
    for k in range(1, n + 1):
        # M_k = A M_{k-1} + c_{k-1} I
        AM = matmul(A, M)
        M = [[AM[i][j] + (coeffs[-1] if i == j else 0.0) for j in range(n)] for i in range(n)]
        AM = matmul(A, M)
        c = -sum(AM[i][i] for i in range(n)) / k
        coeffs.append(c)
    return coeffs


def poly_eval(coeffs, x):
    acc = 0.0
    for c in coeffs:
        acc = acc * x + c
    return acc


def largest_singular_value(M, grid: int = 4000, iters: int = 200):
    """Largest singular value from the characteristic polynomial of ``M^T M``.

    The largest root of the polynomial lies in ``[tr/n, tr]``; a grid scan
    locates the last sign change and bisection refines it.
    """
    G = matmul(transpose(M), M)
    n = len(G)
    c = charpoly(G)
    tr = sum(G[i][i] for i in range(n))
    if tr == 0.0:
        return 0.0
    lo, hi = tr / n, tr * (1.0 + 1e-12)
    xs = [lo + (hi - lo) * i / grid for i in range(grid + 1)]
    vals = [poly_eval(c, x) for x in xs]
    a, b = lo, hi
    for i in range(grid, 0, -1):
        if vals[i - 1] == 0.0:
            return math.sqrt(xs[i - 1])
        if (vals[i - 1] > 0) != (vals[i] > 0):
            a, b = xs[i - 1], xs[i]
            break
    fa = poly_eval(c, a)
    for _ in range(iters):
        mid = 0.5 * (a + b)
        fm = poly_eval(c, mid)
        if (fm > 0) == (fa > 0):
            a, fa = mid, fm
        else:
            b = mid
    return math.sqrt(0.5 * (a + b))


# ---------------------------------------------------------------------------
# Kernels and attention
# ---------------------------------------------------------------------------


def dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def rbf(a, b, sigma):
    return math.exp(-sum((x - y) ** 2 for x, y in zip(a, b)) / (2.0 * sigma * sigma))


def softmax_attention_loop(q, K, V, temperature):
    """``sum_l v_l exp(k_l . q / T) / sum_l exp(k_l . q / T)`` term by term."""
    w = [math.exp(dot(k, q) / temperature) for k in K]
    z = sum(w)
    d = len(V[0])
    return [sum(w[l] * V[l][j] for l in range(len(K))) / z for j in range(d)]


def ffn_loop(X, A_x, A_s):
    L, d, ds = len(X), len(X[0]), len(A_x[0])
    out = []
    for i in range(L):
        hidden = [max(0.0, sum(X[i][k] * A_x[k][j] for k in range(d))) for j in range(ds)]
        out.append([sum(hidden[j] * A_s[j][m] for j in range(ds)) + X[i][m] for m in range(d)])
    return out


# ---------------------------------------------------------------------------
# Bound arithmetic, written out straight-line from the formulas
# ---------------------------------------------------------------------------


def _ratio(a, b):
    if b == 0.0:
        return 0.0 if a == 0.0 else math.inf
    return a / b


def layer_constants_ref(layer):
    """Returns a dict with the per-layer constants of one budget layer."""
    h = len(layer["omega_v"])
    w_v = 0.0
    r_v = 0.0
    r_qk = 0.0
    w_qk = 0.0
    for i in range(h):
        w_v = w_v + layer["omega_v"][i]
        r_v = r_v + layer["R_v"][i]
        r_qk = r_qk + (layer["R_q"][i] + layer["R_k"][i])
        s = layer["omega_q"][i] + layer["omega_k"][i]
        if s > w_qk:
            w_qk = s
    a_t = 1.0 + layer["alpha_x"] * layer["alpha_sigma"]
    w_t = 1.0 + w_v
    g = a_t if a_t >= w_t else w_t
    f = layer["alpha_x"] * layer["R_sigma"] + layer["alpha_sigma"] * layer["R_x"]
    k = max(_ratio(f, a_t), _ratio(r_v, w_t), _ratio(r_qk, w_qk * w_v))
    z = w_qk * w_qk * r_v / w_t
    return {"omega_v": w_v, "omega_qk": w_qk, "R_v": r_v, "R_qk": r_qk, "alpha_tilde": a_t,
            "omega_tilde_v": w_t, "gamma": g, "kappa": k, "zeta": z, "ffn_coef": f}


def radii_ref(consts, R0):
    T = len(consts)
    R = [R0]
    for t in range(T):
        R.append(R[t] * (consts[t]["omega_tilde_v"] * consts[t]["alpha_tilde"]))
    rho = [consts[t]["omega_tilde_v"] + consts[t]["omega_qk"] * consts[t]["omega_qk"] * consts[t]["omega_v"]
           * (R[t] * R[t]) for t in range(T)]
    rmha = [consts[t]["R_v"] + consts[t]["omega_qk"] * consts[t]["R_qk"] * (R[t] * R[t]) for t in range(T)]

    def tail(start):
        p = 1.0
        for tau in range(start, T):
            p = p * (rho[tau] / consts[tau]["omega_tilde_v"])
        return p

    total = 0.0
    for t in range(T - 1):
        total = total + (rmha[t] / rho[t]) * tail(t + 1)
    for t in range(T):
        total = total + (consts[t]["ffn_coef"] / consts[t]["alpha_tilde"]) * tail(t + 1)
    return R, rho, rmha, total


def covering_ref(D, h, T, RT, Rtrans, eps):
    return (4 + h) * D * D * T * math.log1p(2.0 * RT * Rtrans / eps)


def rademacher_ref(D, h, T, RT, Rtrans, n):
    return 12.0 * D * math.sqrt((4 + h) * T) * (2.0 * math.sqrt(2.0) + math.sqrt(math.log1p(2.0 * RT * Rtrans))) \
        / (2.0 * math.sqrt(n))


def generalization_ref(terms, n, delta):
    s = 0.0
    for r in terms:
        s = s + r
    return 2.0 * math.sqrt(2.0) * s + 3.0 * math.sqrt(math.log(2.0 / delta) / (2.0 * n))
