import numpy as np
import pytest

from conftest import dense_solve, laplace_system, partition_for
from ras_testbed.convergence import DetectorConfig
from ras_testbed.errors import NoConvergenceError, NotSPDError, InvalidArgumentError
from ras_testbed.partition import PartitionMap
from ras_testbed.problem import LinearSystem, laplace_2d
from ras_testbed.solver import (
    SolverConfig,
    gather,
    local_iterate,
    reset,
    run_async,
    run_sync,
    run_sync_reference,
    setup,
    solve,
)
from ras_testbed.sparse import CsrMatrix
from ras_testbed.transport import InProcessTransport

TRACE = SolverConfig(record_trace=True)


def single(system):
    return PartitionMap(np.zeros(system.n, dtype=int), 1, "external")


def test_config_validation():
    for bad in (dict(tau=0), dict(max_iter=0), dict(cg_rel_tol=-1), dict(mode="x"),
                dict(local_solver="lu")):
        with pytest.raises(InvalidArgumentError):
            SolverConfig(**bad)


# --- setup ---------------------------------------------------------------

def test_setup_single_subdomain():
    s = laplace_system(6)
    (rt,) = setup(s, single(s), 2, SolverConfig())
    assert rt.problem.local_matrix.equals(s.matrix)
    assert rt.update_count == 0 and not rt.x_local.any() and rt.ghost_values.size == 0


def test_setup_quadrant_dimensions():
    s = laplace_system(8)
    rts = setup(s, partition_for(s, "regular2d", 4), 1, SolverConfig())
    assert len(rts) == 4
    assert [rt.problem.num_local for rt in rts] == [24] * 4


def test_setup_factors_reproduce_local_matrices():
    s = laplace_system(10)
    for rt in setup(s, partition_for(s, "rcb", 4), 2, SolverConfig()):
        L = rt.factor.lower_factor
        A = rt.problem.local_matrix.to_dense()
        assert np.linalg.norm(L @ L.T - A) / np.linalg.norm(A) <= 1e-12


def test_setup_reports_non_spd_subdomain():
    a = laplace_2d(4).to_dense()
    a[15, 15] = -4.0
    s = LinearSystem(CsrMatrix.from_dense(a), np.ones(16))
    with pytest.raises(NotSPDError) as info:
        setup(s, partition_for(s, "regular1d", 2), 0, SolverConfig())
    assert info.value.subdomain == 1


# --- local iteration ------------------------------------------------------

@pytest.mark.parametrize("local_solver", ["direct", "cg"])
def test_local_iterate_single_subdomain_solves_system(local_solver):
    s = laplace_system(8)
    cfg = SolverConfig(local_solver=local_solver)
    (rt,) = setup(s, single(s), 0, cfg)
    x = local_iterate(rt, cfg)
    np.testing.assert_allclose(x, dense_solve(s), atol=1e-8)
    assert rt.update_count == 1


@pytest.mark.parametrize("local_solver", ["direct", "cg"])
def test_local_iterate_fixed_point(local_solver):
    s = laplace_system(12, seed=4)
    cfg = SolverConfig(local_solver=local_solver, cg_rel_tol=1e-13)
    x_star = dense_solve(s)
    rts = setup(s, partition_for(s, "rcb", 4), 2, cfg)
    reset(rts, x_star)
    for rt in rts:
        x = local_iterate(rt, cfg)
        np.testing.assert_allclose(x, x_star[rt.problem.local_to_global], rtol=0, atol=1e-10)


def test_local_iterate_zero_data():
    s = LinearSystem(laplace_2d(6), np.zeros(36))
    rts = setup(s, partition_for(s, "regular1d", 3), 1, SolverConfig())
    for rt in rts:
        assert not local_iterate(rt, SolverConfig()).any()


def test_cg_iteration_limit_is_recorded_not_raised():
    s = laplace_system(8)
    cfg = SolverConfig(local_solver="cg", cg_max_iters=1)
    (rt,) = setup(s, single(s), 0, cfg)
    local_iterate(rt, cfg)
    assert rt.cg_failures == 1 and rt.update_count == 1


# --- gather ----------------------------------------------------------------

def test_gather_takes_owner_values():
    s = laplace_system(6)
    pm = partition_for(s, "regular1d", 2)
    rts = setup(s, pm, 2, SolverConfig())
    for rt in rts:
        rt.x_local = np.full(rt.problem.num_local, float(rt.subdomain_id + 1))
    sol = gather(rts, pm)
    np.testing.assert_array_equal(sol.contributor, pm.owner)
    np.testing.assert_array_equal(sol.x, pm.owner + 1.0)


def test_gather_single():
    s = laplace_system(4)
    (rt,) = rts = setup(s, single(s), 0, SolverConfig())
    rt.x_local = np.arange(16.0)
    np.testing.assert_array_equal(gather(rts).x, np.arange(16.0))


# --- lock-step runs --------------------------------------------------------

def test_sync_single_subdomain_one_iteration():
    s = laplace_system(8)
    sol, m = solve(s, single(s), 0, SolverConfig())
    assert m.iterations == 1 and m.update_counts == [1] and m.verified


def test_sync_solution_matches_dense_oracle():
    s = laplace_system(16)
    sol, m = solve(s, partition_for(s, "regular2d", 4), 2, SolverConfig())
    x_star = dense_solve(s)
    assert m.verified and m.update_spread["spread"] == 0
    assert np.max(np.abs(sol.x - x_star)) / np.max(np.abs(x_star)) <= 1e-5
    np.testing.assert_array_equal(sol.contributor, partition_for(s, "regular2d", 4).owner)


def test_sync_is_deterministic():
    s = laplace_system(16)
    rts = setup(s, partition_for(s, "regular1d", 2), 2, TRACE)
    runs = []
    for _ in range(5):
        reset(rts)
        sol, m = run_sync(rts, TRACE)
        runs.append((m.iterations, [tuple(rt.trace) for rt in rts], sol.x.tobytes()))
    assert all(r == runs[0] for r in runs)


@pytest.mark.parametrize("scheme, P, gamma", [("regular1d", 2, 2), ("rcb", 4, 1), ("regular2d", 4, 4)])
@pytest.mark.parametrize("detector", ["decentralized", "centralized"])
def test_sync_equals_reference_oracle(scheme, P, gamma, detector):
    s = laplace_system(16, seed=2)
    cfg = SolverConfig(record_trace=True, detector=DetectorConfig(detector))
    rts = setup(s, partition_for(s, scheme, P), gamma, cfg)
    sol, m = run_sync(rts, cfg)
    traces = [list(rt.trace) for rt in rts]
    reset(rts)
    sol_ref, m_ref = run_sync_reference(rts, cfg)
    assert m.iterations == m_ref.iterations
    assert traces == [rt.trace for rt in rts]
    assert sol.x.tobytes() == sol_ref.x.tobytes()


@pytest.mark.parametrize("detector, bound", [("decentralized", 2), ("centralized", 3)])
def test_fixed_point_terminates_within_detection_bound(detector, bound):
    # decentralized on two subdomains: 2 rounds; a height-1 tree: up, decide, down
    s = laplace_system(16, seed=5)
    x_star = dense_solve(s)
    cfg = SolverConfig(detector=DetectorConfig(detector))
    rts = setup(s, partition_for(s, "regular1d", 2), 2, cfg)
    reset(rts, x_star)
    sol, m = run_sync(rts, cfg)
    assert m.verified and m.iterations <= bound
    np.testing.assert_allclose(sol.x, x_star, rtol=0, atol=1e-10)


def test_fixed_point_async_stays_put():
    # no round structure here; the start value must survive and terminate
    s = laplace_system(16, seed=5)
    x_star = dense_solve(s)
    cfg = SolverConfig(mode="async")
    rts = setup(s, partition_for(s, "regular1d", 2), 2, cfg)
    reset(rts, x_star)
    sol, m = run_async(rts, cfg)
    assert m.terminated and m.verified
    np.testing.assert_allclose(sol.x, x_star, rtol=0, atol=1e-10)


def test_sync_max_iter_raises_with_metrics():
    s = laplace_system(16)
    cfg = SolverConfig(max_iter=3)
    with pytest.raises(NoConvergenceError) as info:
        solve(s, partition_for(s, "regular1d", 4), 1, cfg)
    m = info.value.metrics
    assert m.update_counts == [3] * 4 and not m.terminated and m.error
    assert info.value.solution.x.shape == (256,)


def test_sync_with_cg_local_solver():
    s = laplace_system(16)
    sol, m = solve(s, partition_for(s, "rcb", 4), 2, SolverConfig(local_solver="cg"))
    assert m.verified and sum(m.cg_failures) == 0


def test_worker_failure_reports_root_cause():
    class Faulty(InProcessTransport):
        def exchange_sync(self, me, iteration, outgoing):
            if me == 1 and iteration == 3:
                raise RuntimeError("link down")
            return super().exchange_sync(me, iteration, outgoing)

    s = laplace_system(12)
    rts = setup(s, partition_for(s, "regular1d", 3), 1, SolverConfig())
    t = Faulty.from_plans([rt.plan for rt in rts], timeout=10)
    with pytest.raises(RuntimeError, match="link down"):
        run_sync(rts, SolverConfig(), transport=t)


def test_phase_timers_recorded():
    s = laplace_system(16)
    _, m = solve(s, partition_for(s, "rcb", 4), 2, SolverConfig())
    for timers in m.phase_timers:
        assert set(timers) == {"local_solve", "boundary_exchange", "convergence_check", "other"}
        assert all(v >= 0 for v in timers.values())
        assert timers["local_solve"] > 0
    assert m.time_to_solution > 0


# --- asynchronous runs ------------------------------------------------------

def test_async_single_subdomain_matches_sync():
    s = laplace_system(8)
    x_sync, m_sync = solve(s, single(s), 0, SolverConfig())
    x_async, m_async = solve(s, single(s), 0, SolverConfig(mode="async"))
    assert m_async.update_counts == [1]
    assert x_sync.x.tobytes() == x_async.x.tobytes()


@pytest.mark.parametrize("detector", ["decentralized", "centralized"])
@pytest.mark.parametrize("skip", [False, True])
def test_async_runs_verify(detector, skip):
    s = laplace_system(32, seed=1)
    cfg = SolverConfig(mode="async", detector=DetectorConfig(detector), skip_stale_solves=skip)
    sol, m = solve(s, partition_for(s, "rcb", 4), 4, cfg)
    assert m.terminated and m.verified
    assert min(m.update_counts) >= 1
    np.testing.assert_array_equal(sol.contributor, partition_for(s, "rcb", 4).owner)
    assert all(f > 0 for f in m.flushes)


@pytest.mark.parametrize("confirm", [1, 3])
def test_async_confirmation_depth(confirm):
    s = laplace_system(24, seed=2)
    cfg = SolverConfig(mode="async", confirm_checks=confirm)
    _, m = solve(s, partition_for(s, "regular1d", 3), 2, cfg)
    assert m.terminated and m.verified
    # a subdomain cannot report converged before it has confirmed that many times
    assert min(m.update_counts) >= confirm


def test_confirm_checks_must_be_positive():
    with pytest.raises(InvalidArgumentError):
        SolverConfig(confirm_checks=0)


def test_async_max_iter_raises():
    s = laplace_system(16)
    with pytest.raises(NoConvergenceError) as info:
        solve(s, partition_for(s, "regular1d", 4), 1, SolverConfig(mode="async", max_iter=2))
    assert max(info.value.metrics.update_counts) <= 2
