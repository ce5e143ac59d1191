import io

import numpy as np
import pytest
import scipy.sparse as sp

from condreg.errors import InputError
from condreg.sdp import (
    BlockSpec,
    SdpProblem,
    SdpSolution,
    SolveOptions,
    certify,
    dump_problem,
    solve,
)


def sym2x2():
    # u = (X11, X12, X22)
    return BlockSpec("X", np.array([[0, 1], [1, 2]]))


def test_block_spec_validation():
    with pytest.raises(InputError):
        BlockSpec("bad", np.array([[0, 1], [2, 3]]))  # not symmetric
    with pytest.raises(InputError):
        BlockSpec("bad", np.array([[0, 1, 2]]))  # not square
    assert sym2x2().dim == 2


def test_problem_validation():
    blk = sym2x2()
    with pytest.raises(InputError):
        SdpProblem(n_u=2, blocks=[blk])  # block index out of range
    with pytest.raises(InputError):
        SdpProblem(n_u=3, blocks=[blk], q=[-1.0, 0.0, 0.0])
    with pytest.raises(InputError):
        SdpProblem(n_u=3, blocks=[blk], A=sp.csr_matrix((1, 3)), b=[0.0])


def test_min_x12_correlation_extreme_point():
    # minimize X12 s.t. X11 = X22 = 1, X PSD -> objective -1
    A = sp.csr_matrix(np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]))
    p = SdpProblem(n_u=3, blocks=[sym2x2()], A=A, b=[1.0, 1.0], c=[0.0, 1.0, 0.0])
    sol = solve(p)
    assert sol.status == "optimal"
    assert abs(sol.objective - (-1.0)) <= 1e-6
    assert abs(sol.u[1] - (-1.0)) <= 1e-5
    assert certify(sol, p, tol=1e-6)


def test_forced_offdiagonal_infeasible():
    # X11 = X22 = 1, X12 = 2 contradicts |X12| <= 1
    A = sp.csr_matrix(np.eye(3))
    p = SdpProblem(n_u=3, blocks=[sym2x2()], A=A, b=[1.0, 2.0, 1.0])
    sol = solve(p, SolveOptions(max_iters=5000))
    assert sol.status == "infeasible"
    assert not certify(sol, p, tol=1e-6)


def test_min_x11_schur_bound():
    # minimize X11 s.t. X12 = 1, X22 = 2 -> X11 = 1/2 at rank-1 boundary
    A = sp.csr_matrix(np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]))
    p = SdpProblem(n_u=3, blocks=[sym2x2()], A=A, b=[1.0, 2.0], c=[1.0, 0.0, 0.0])
    sol = solve(p)
    assert sol.status == "optimal"
    assert abs(sol.objective - 0.5) <= 1e-6
    assert certify(sol, p, tol=1e-6)


def test_feasibility_status_without_objective():
    A = sp.csr_matrix(np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]))
    p = SdpProblem(n_u=3, blocks=[sym2x2()], A=A, b=[1.0, 1.0])
    sol = solve(p)
    assert sol.status == "feasible"
    assert certify(sol, p, tol=1e-6)


def test_inequality_via_slack():
    # minimize X11 s.t. X11 >= 3 (i.e. -X11 <= -3)
    G = sp.csr_matrix(np.array([[-1.0, 0.0, 0.0]]))
    p = SdpProblem(
        n_u=3,
        blocks=[sym2x2()],
        A=sp.csr_matrix(np.array([[0.0, 0.0, 1.0]])),
        b=[1.0],
        G=G,
        h=[-3.0],
        c=[1.0, 0.0, 0.0],
    )
    sol = solve(p)
    assert sol.status == "optimal"
    assert abs(sol.objective - 3.0) <= 1e-5
    assert certify(sol, p, tol=1e-5)


def test_diagonal_quadratic_objective():
    # minimize (X11 - 2)^2 like term: q X11^2 + c X11 with X11 free but PSD
    # q=1, c=-4 -> unconstrained argmin at X11 = 2
    blk = BlockSpec("X", np.array([[0]]))
    p = SdpProblem(n_u=1, blocks=[blk], c=[-4.0], q=[1.0])
    sol = solve(p)
    assert sol.status == "optimal"
    assert abs(sol.u[0] - 2.0) <= 1e-6


def test_certify_rejects_violated_equality():
    A = sp.csr_matrix(np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]))
    p = SdpProblem(n_u=3, blocks=[sym2x2()], A=A, b=[1.0, 1.0])
    sol = solve(p)
    bad = SdpSolution(
        u=sol.u + np.array([10 * 1e-6, 0.0, 0.0]),
        status=sol.status,
        primal_residual=sol.primal_residual,
        min_block_eig=sol.min_block_eig,
        objective=sol.objective,
        iterations=sol.iterations,
    )
    assert certify(sol, p, tol=1e-6)
    assert not certify(bad, p, tol=1e-6)


def test_certify_accepts_planted_point():
    # hand-built feasible point, never touched by solve()
    A = sp.csr_matrix(np.array([[1.0, 0.0, 0.0]]))
    p = SdpProblem(n_u=3, blocks=[sym2x2()], A=A, b=[1.0])
    planted = SdpSolution(
        u=np.array([1.0, 0.5, 0.5]),
        status="optimal",
        primal_residual=0.0,
        min_block_eig=0.0,
        objective=0.0,
        iterations=0,
    )
    assert certify(planted, p, tol=1e-9)


def test_determinism_bitwise():
    A = sp.csr_matrix(np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]))
    p = SdpProblem(n_u=3, blocks=[sym2x2()], A=A, b=[1.0, 1.0], c=[0.0, 1.0, 0.0])
    s1 = solve(p, SolveOptions(seed=7))
    s2 = solve(p, SolveOptions(seed=7))
    assert np.array_equal(s1.u, s2.u)
    assert s1.iterations == s2.iterations
    assert s1.objective == s2.objective


def test_random_init_seed_changes_start_not_answer():
    A = sp.csr_matrix(np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]))
    p = SdpProblem(n_u=3, blocks=[sym2x2()], A=A, b=[1.0, 1.0], c=[0.0, 1.0, 0.0])
    s1 = solve(p, SolveOptions(init="random", seed=1))
    s2 = solve(p, SolveOptions(init="random", seed=2))
    assert abs(s1.objective - s2.objective) <= 1e-5


def test_equalities_exact_after_final_u_step():
    A = sp.csr_matrix(np.array([[1.0, 1.0, 1.0], [0.0, 0.0, 1.0]]))
    p = SdpProblem(n_u=3, blocks=[sym2x2()], A=A, b=[2.0, 1.0], c=[1.0, 0.0, 0.0])
    sol = solve(p)
    assert np.abs(A @ sol.u - np.array([2.0, 1.0])).max() < 1e-11


def test_dump_problem_round_readable():
    p = SdpProblem(
        n_u=3,
        blocks=[sym2x2()],
        A=sp.csr_matrix(np.array([[1.0, 0.0, 0.0]])),
        b=[1.0],
        c=[0.0, 1.0, 0.0],
    )
    buf = io.StringIO()
    dump_problem(p, buf)
    text = buf.getvalue()
    assert text.startswith("NU 3\n")
    assert "BLOCK X 2" in text
    assert "ENTRY 0 0 1 1" in text
    assert "OBJLIN 1 1.0" in text
