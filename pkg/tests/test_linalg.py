import numpy as np
import pytest
import scipy.linalg as sla

from netlyap import linalg as la


def test_sym_eig_diagonal():
    w, v = la.sym_eig(np.diag([1.0, 2.0]))
    assert np.allclose(w, [2.0, 1.0])


def test_sym_eig_permutation():
    w, v = la.sym_eig(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert np.allclose(w, [1.0, -1.0])


def test_sym_eig_reconstruction_and_orthonormality():
    rng = np.random.default_rng(4)
    s = rng.normal(size=(8, 8))
    s = s + s.T
    w, v = la.sym_eig(s)
    scale = 1.0 + np.linalg.norm(s)
    assert np.linalg.norm(v @ np.diag(w) @ v.T - s, "fro") < 1e-8 * scale
    assert np.linalg.norm(v.T @ v - np.eye(8)) < 1e-10
    resid = s @ v - v @ np.diag(w)
    assert np.max(np.abs(resid)) < 1e-8 * scale
    assert np.all(np.diff(w) <= 1e-12)


def test_sym_eig_trace_identity():
    rng = np.random.default_rng(5)
    for _ in range(20):
        n = int(rng.integers(2, 12))
        s = rng.normal(size=(n, n))
        s = s + s.T
        w, _ = la.sym_eig(s)
        assert abs(np.sum(w) - np.trace(s)) < 1e-8 * (1.0 + np.linalg.norm(s))


def test_sym_eig_rejects_bad_input():
    with pytest.raises(la.NotSquare):
        la.sym_eig(np.zeros((2, 3)))
    with pytest.raises(la.NonFinite):
        la.sym_eig(np.array([[np.nan, 0.0], [0.0, 1.0]]))


def test_linsolve_identity_and_diagonal():
    b = np.array([1.0, -2.0, 3.0])
    assert np.allclose(la.linsolve(np.eye(3), b), b)
    x = la.linsolve(np.diag([2.0, 4.0]), np.array([2.0, 8.0]))
    assert np.allclose(x, [1.0, 2.0])


def test_linsolve_residual_oracle():
    rng = np.random.default_rng(6)
    a = rng.normal(size=(10, 10)) + 10.0 * np.eye(10)
    b = rng.normal(size=10)
    x = la.linsolve(a, b)
    assert np.max(np.abs(a @ x - b)) < 1e-10 * (1.0 + np.max(np.abs(b)))


def test_linsolve_singular():
    with pytest.raises(la.SingularSystem):
        la.linsolve(np.array([[1.0, 1.0], [1.0, 1.0]]), np.array([1.0, 0.0]))


def test_solve_lyapunov_scalar_and_diagonal():
    p = la.solve_lyapunov(np.array([[-1.0]]), np.array([[1.0]]))
    assert np.allclose(p, [[0.5]])
    p = la.solve_lyapunov(-np.eye(2), np.eye(2))
    assert np.allclose(p, 0.5 * np.eye(2))


def test_solve_lyapunov_residual_oracle():
    a = np.array([[-1.0, 1.0], [0.0, -2.0]])
    q = np.eye(2)
    p = la.solve_lyapunov(a, q)
    resid = a.T @ p + p @ a + q
    assert np.linalg.norm(resid, "fro") < 1e-9 * (1.0 + np.linalg.norm(q, "fro"))
    p_scipy = sla.solve_continuous_lyapunov(a.T, -q)
    assert np.allclose(p, p_scipy, atol=1e-10)


def test_solve_lyapunov_non_hurwitz():
    with pytest.raises(la.SingularSystem):
        la.solve_lyapunov(np.array([[1.0]]), np.array([[1.0]]))


def test_solve_care_scalar_cases():
    p, k = la.solve_care(np.array([[0.0]]), np.array([[1.0]]),
                         np.array([[1.0]]), np.array([[1.0]]))
    assert np.allclose(p, [[1.0]]) and np.allclose(k, [[1.0]])
    p, k = la.solve_care(np.array([[-1.0]]), np.array([[0.0]]),
                         np.array([[1.0]]), np.array([[1.0]]))
    assert np.allclose(p, [[0.5]]) and np.allclose(k, [[0.0]])


def test_solve_care_double_integrator():
    a = np.array([[0.0, 1.0], [0.0, 0.0]])
    b = np.array([[0.0], [1.0]])
    p, k = la.solve_care(a, b, np.eye(2), np.array([[1.0]]))
    resid = a.T @ p + p @ a - p @ b @ b.T @ p + np.eye(2)
    assert np.linalg.norm(resid, "fro") < 1e-8
    p_scipy = sla.solve_continuous_are(a, b, np.eye(2), np.array([[1.0]]))
    assert np.allclose(p, p_scipy, atol=1e-8)
    # closed loop must be Hurwitz, checked via a Lyapunov solve succeeding
    assert la.is_hurwitz(a - b @ k)


def test_solve_care_random_instances_closed_loop_hurwitz():
    # mildly unstable instances, within reach of the pole-shift initializer
    rng = np.random.default_rng(7)
    for _ in range(5):
        n = int(rng.integers(2, 5))
        a = rng.normal(size=(n, n)) - 0.5 * np.eye(n)
        b = rng.normal(size=(n, 2))
        p, k = la.solve_care(a, b, np.eye(n), np.eye(2))
        resid = a.T @ p + p @ a - p @ b @ np.linalg.solve(np.eye(2), b.T @ p) + np.eye(n)
        assert np.linalg.norm(resid, "fro") < 1e-8
        assert la.is_hurwitz(a - b @ k)


def test_solve_care_reports_failed_initialization():
    # strongly unstable plant with weak input authority: the bounded
    # pole-shift search is allowed to give up, never to fall back silently
    a = np.diag([3.0, 5.0, 9.0]) + np.triu(np.ones((3, 3)), 1) * 4.0
    b = np.array([[0.0], [0.0], [1e-6]])
    with pytest.raises(la.NoStabilizingInit):
        la.solve_care(a, b, np.eye(3), np.array([[1.0]]))


def test_nsd_project_examples():
    assert np.allclose(la.nsd_project(np.diag([1.0, -2.0])), np.diag([0.0, -2.0]))
    assert np.allclose(la.nsd_project(-np.eye(3)), -np.eye(3))


def test_nsd_project_random_is_nsd_and_near_optimal():
    rng = np.random.default_rng(8)
    s = rng.normal(size=(5, 5))
    s = s + s.T
    proj = la.nsd_project(s)
    w, _ = la.sym_eig(proj)
    assert w[0] <= 1e-10
    best = np.linalg.norm(s - proj, "fro")
    # the projection must beat random NSD perturbation candidates
    for _ in range(1000):
        cand = proj + 0.1 * rng.normal(size=(5, 5))
        cand = la.nsd_project(0.5 * (cand + cand.T))
        assert np.linalg.norm(s - cand, "fro") >= best - 1e-9


def test_nsd_project_idempotent():
    rng = np.random.default_rng(9)
    s = rng.normal(size=(6, 6))
    s = s + s.T
    once = la.nsd_project(s)
    twice = la.nsd_project(once)
    assert np.max(np.abs(once - twice)) < 1e-10
