"""Small dense linear algebra: Jacobi eigendecomposition, Lyapunov/Riccati
solves, negative-semidefinite projection, and pivoted Gaussian elimination.

Everything here targets the tiny matrices of the certification pipeline
(dimension <= ~40), so clarity and determinism win over asymptotics: the
Lyapunov solve is the O(n^6) Kronecker-vectorized linear system and the
eigendecomposition is cyclic Jacobi.
"""

from __future__ import annotations

import numpy as np


class LinalgError(Exception):
    pass


class NotSquare(LinalgError):
    pass


class NonFinite(LinalgError):
    pass


class SingularSystem(LinalgError):
    pass


class NoStabilizingInit(LinalgError):
    pass


def _as_square(a, name="matrix") -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise NotSquare(f"{name} must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFinite(f"{name} has non-finite entries")
    return a


def sym_eig(s) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues descending, eigenvectors as columns).  The input is
    symmetrized first; off-diagonal mass is annihilated in sweeps until the
    largest off-diagonal entry drops below 1e-12 (absolute, relative to the
    matrix scale).
    """
    s = _as_square(s, "S")
    n = s.shape[0]
    a = 0.5 * (s + s.T)
    v = np.eye(n)
    if n == 1:
        return a[0, :1].copy(), v
    scale = max(1.0, float(np.max(np.abs(a))))
    tol = 1e-12 * scale
    for _ in range(60):
        off = np.abs(a - np.diag(np.diag(a))).max()
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= tol * 1e-4:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                sn = t * c
                rot_p = c * a[:, p] - sn * a[:, q]
                rot_q = sn * a[:, p] + c * a[:, q]
                a[:, p], a[:, q] = rot_p, rot_q
                rot_p = c * a[p, :] - sn * a[q, :]
                rot_q = sn * a[p, :] + c * a[q, :]
                a[p, :], a[q, :] = rot_p, rot_q
                rot_p = c * v[:, p] - sn * v[:, q]
                rot_q = sn * v[:, p] + c * v[:, q]
                v[:, p], v[:, q] = rot_p, rot_q
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


def linsolve(a, b) -> np.ndarray:
    """Solve a x = b by Gaussian elimination with partial pivoting."""
    a = _as_square(a, "A")
    b = np.asarray(b, dtype=float)
    n = a.shape[0]
    vec = b.ndim == 1
    rhs = b.reshape(n, -1).copy()
    m = a.copy()
    scale = max(1.0, float(np.max(np.abs(a))))
    for k in range(n):
        piv = k + int(np.argmax(np.abs(m[k:, k])))
        if abs(m[piv, k]) < 1e-14 * scale:
            raise SingularSystem(f"pivot {k} is numerically zero")
        if piv != k:
            m[[k, piv]] = m[[piv, k]]
            rhs[[k, piv]] = rhs[[piv, k]]
        factors = m[k + 1 :, k] / m[k, k]
        m[k + 1 :, k:] -= factors[:, None] * m[k, k:]
        rhs[k + 1 :] -= factors[:, None] * rhs[k]
    x = np.zeros_like(rhs)
    for k in range(n - 1, -1, -1):
        x[k] = (rhs[k] - m[k, k + 1 :] @ x[k + 1 :]) / m[k, k]
    return x[:, 0] if vec else x


def solve_lyapunov(a, q) -> np.ndarray:
    """Solve A^T P + P A = -Q for symmetric P via the Kronecker-vectorized system.

    A must be Hurwitz for the equation to be well posed; this is checked
    post-hoc through the residual (and surfaces as SingularSystem otherwise).
    """
    a = _as_square(a, "A")
    q = _as_square(q, "Q")
    n = a.shape[0]
    if q.shape[0] != n:
        raise NotSquare("A and Q dimensions differ")
    kron = np.kron(np.eye(n), a.T) + np.kron(a.T, np.eye(n))
    p_vec = linsolve(kron, -q.reshape(-1, order="F").astype(float))
    p = p_vec.reshape(n, n, order="F")
    p = 0.5 * (p + p.T)
    resid = a.T @ p + p @ a + q
    if np.linalg.norm(resid, "fro") > 1e-9 * (1.0 + np.linalg.norm(q, "fro")):
        raise SingularSystem("Lyapunov residual too large; A may not be Hurwitz")
    # for PSD Q a Hurwitz A yields PSD P; an indefinite P exposes instability
    w, _ = sym_eig(p)
    if w[-1] < -1e-10 * (1.0 + abs(w[0])):
        raise SingularSystem("Lyapunov solution is indefinite; A is not Hurwitz")
    return p


def is_hurwitz(a) -> bool:
    """Hurwitz test via the Lyapunov criterion: A^T P + P A = -I with P > 0."""
    try:
        p = solve_lyapunov(a, np.eye(np.asarray(a).shape[0]))
    except (SingularSystem, NotSquare, NonFinite):
        return False
    w, _ = sym_eig(p)
    return bool(w[-1] > 0.0)


def solve_care(a, b, q, rw) -> tuple[np.ndarray, np.ndarray]:
    """Solve the continuous algebraic Riccati equation by Kleinman-Newton.

    Returns (P, K) with A^T P + P A - P B Rw^-1 B^T P + Q = 0 and
    K = Rw^-1 B^T P.  Each Newton step is one Lyapunov solve on the current
    closed loop; the initial stabilizing gain is K0 = 0 when A is Hurwitz,
    else a pole-shift heuristic over shifts c in {1, 2, 4, 8}.
    """
    a = _as_square(a, "A")
    q = _as_square(q, "Q")
    b = np.asarray(b, dtype=float)
    if b.ndim == 1:
        b = b[:, None]
    rw = np.asarray(rw, dtype=float)
    if rw.ndim == 0:
        rw = rw[None, None]
    elif rw.ndim == 1:
        rw = np.diag(rw)
    n, m = b.shape
    rw_inv = linsolve(rw, np.eye(m))

    k = np.zeros((m, n))
    if not is_hurwitz(a):
        # Bass construction: for beta beyond the spectral abscissa, the
        # shifted-Lyapunov (Gramian-form) solve gives a stabilizing gain
        # K = B^T Z^-1 whenever (A, B) is controllable
        k = None
        scale = 1.0 + np.linalg.norm(a, "fro")
        for c in (1.0, 2.0, 4.0, 8.0):
            beta = c * scale
            try:
                z = solve_lyapunov(-(a + beta * np.eye(n)).T, 2.0 * b @ b.T + 1e-12 * np.eye(n))
                cand = b.T @ linsolve(z, np.eye(n))
            except SingularSystem:
                continue
            if is_hurwitz(a - b @ cand):
                k = cand
                break
        if k is None:
            raise NoStabilizingInit("pole-shift search found no stabilizing gain")

    p = np.zeros((n, n))
    for _ in range(60):
        a_cl = a - b @ k
        p_next = solve_lyapunov(a_cl, q + k.T @ rw @ k)
        k = rw_inv @ b.T @ p_next
        if np.linalg.norm(p_next - p, "fro") <= 1e-13 * (1.0 + np.linalg.norm(p_next, "fro")):
            p = p_next
            break
        p = p_next
    resid = a.T @ p + p @ a - p @ b @ rw_inv @ b.T @ p + q
    if np.linalg.norm(resid, "fro") > 1e-8:
        raise SingularSystem("CARE residual did not converge")
    return p, rw_inv @ b.T @ p


def nsd_project(s) -> np.ndarray:
    """Nearest (Frobenius) negative-semidefinite matrix: clip positive eigenvalues."""
    s = _as_square(s, "S")
    w, v = sym_eig(s)
    w = np.minimum(w, 0.0)
    return v @ np.diag(w) @ v.T
