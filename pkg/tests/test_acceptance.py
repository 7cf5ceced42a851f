"""Acceptance criteria, one test each, each printing a PASS/FAIL line.

The Burgers and Vlasov desk-scale pipelines are run once into
``$MOMENTFLOW_ACCEPTANCE_DIR`` (default ``runs/acceptance``) and resumed on
later invocations; stage wall times come from the recorded ``timings.json``.
Criteria 4 and 8 take tens of minutes on a cold cache.
"""
import os
import time
from pathlib import Path

import numpy as np
import pytest
import scipy.linalg as sla

from momentflow import colora, filtered, formats, harness, pde_ref
from momentflow import galerkin as gk
from momentflow.colora import GaussianBelief

ROOT = Path(os.environ.get("MOMENTFLOW_ACCEPTANCE_DIR",
                           Path(__file__).resolve().parents[1] / "runs" / "acceptance"))

pytestmark = pytest.mark.slow
ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def verdict(request, capsys):
    def report(n, ok, detail):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        with capsys.disabled():
            print("\n" + line)
        request.config.stash.setdefault(ACCEPTANCE_KEY, []).append(line)
        assert ok, line
    return report


def run_desk(pde):
    cfg = harness.desk_config(pde, output_dir=str(ROOT / pde))
    pipe = harness.Pipeline(cfg)
    pipe.run()
    return pipe


@pytest.fixture(scope="module")
def burgers_run():
    return run_desk("burgers")


@pytest.fixture(scope="module")
def vlasov_run():
    return run_desk("vlasov")


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


# -- 1 ----------------------------------------------------------------------


def test_c1_linear_exactness(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    p, mu = 10, 0.05
    model = gk.FourierFeatureModel(p, mix=np.eye(p) + 0.2 * rng.normal(size=(p, p)))
    colloc = gk.CollocationSet.equidistant_1d(64)
    Phi = model.feature_matrix(colloc.points)
    A = np.linalg.solve(Phi.T @ Phi, Phi.T @ (mu * model.feature_matrix_xx(colloc.points)))
    m0 = rng.normal(size=p)
    L = rng.normal(size=(p, p))
    S0 = 0.1 * (L @ L.T + 0.1 * np.eye(p))
    states = filtered.fng_solve(model, GaussianBelief(m0, S0), mu, 1e-3, 1000,
                                "rk4", colloc, gk.get_pde("heat"), lam=0.0)
    E = sla.expm(A)
    e_m = rel(states[-1].mean, E @ m0)
    e_S = rel(states[-1].cov, E @ S0 @ E.T)
    wall = time.perf_counter() - t0
    verdict(1, e_m < 1e-6 and e_S < 1e-6 and wall < 10,
            f"mean rel {e_m:.2e}, cov rel {e_S:.2e}, {wall:.1f} s")


# -- 2 ----------------------------------------------------------------------


def fd_grad_online(model, theta, x, h=1e-6):
    cols = []
    for j in range(model.p):
        e = np.zeros(model.p)
        e[j] = h
        cols.append((colora.forward(model, theta + e, x)
                     - colora.forward(model, theta - e, x)) / (2 * h))
    return np.column_stack(cols)


def fd_spatial(model, theta, x, h=1e-3):
    def f(z):
        return colora.forward(model, theta, z)
    d1 = (-f(x + 2 * h) + 8 * f(x + h) - 8 * f(x - h) + f(x - 2 * h)) / (12 * h)
    d2 = (-f(x + 2 * h) + 16 * f(x + h) - 30 * f(x) + 16 * f(x - h)
          - f(x - 2 * h)) / (12 * h ** 2)
    return d1, d2


def fd_velocity_jacobian(model, theta, mu, colloc, pde, h=1e-5):
    cols = []
    for j in range(model.p):
        e = np.zeros(model.p)
        e[j] = h * max(1.0, abs(theta[j]))
        up = gk.velocity(model, theta + e, mu, colloc, pde).v
        dn = gk.velocity(model, theta - e, mu, colloc, pde).v
        cols.append((up - dn) / (2 * e[j]))
    return np.column_stack(cols)


def test_c2_derivative_suite(burgers_run, verdict):
    t0 = time.perf_counter()
    cfg = burgers_run.cfg
    model, hyper = burgers_run.load_model()
    rng = np.random.default_rng(2)
    colloc = cfg.collocation()
    pde = cfg.pde_rhs()
    x = rng.uniform(-0.95, 0.95, (32, 1))
    worst = {"grad_online": 0.0, "spatial_derivs": 0.0, "velocity_jacobian": 0.0}
    for _ in range(20):
        t = rng.uniform(0, cfg.data.T)
        mu = float(np.exp(rng.uniform(*np.log(cfg.data.mu_range))))
        b = colora.hyper_eval(hyper, t, mu)
        theta = filtered.sample_weights(b, 1, rng)[0]
        worst["grad_online"] = max(worst["grad_online"], rel(
            colora.grad_online(model, theta, x), fd_grad_online(model, theta, x)))
        _, dq, d2q = colora.spatial_derivs(model, theta, x)
        d1, d2 = fd_spatial(model, theta, x)
        worst["spatial_derivs"] = max(worst["spatial_derivs"], rel(dq[0], d1),
                                      rel(d2q[0], d2))
        A = filtered.velocity_jacobian(model, theta, mu, colloc, pde)
        worst["velocity_jacobian"] = max(worst["velocity_jacobian"], rel(
            A, fd_velocity_jacobian(model, theta, mu, colloc, pde)))
    wall = time.perf_counter() - t0
    ok = (worst["grad_online"] < 1e-6 and worst["spatial_derivs"] < 1e-4
          and worst["velocity_jacobian"] < 1e-4 and wall < 60)
    verdict(2, ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
            + f", {wall:.1f} s")


# -- 3 ----------------------------------------------------------------------


def test_c3_zero_covariance_degeneracy(burgers_run, verdict):
    cfg = burgers_run.cfg
    model, hyper = burgers_run.load_model()
    m0 = burgers_run.initial_belief(hyper).mean
    mu, dt, K = cfg.online.mu_test, 1e-3, 500
    states = filtered.fng_solve(model, GaussianBelief(m0, np.zeros((model.p,) * 2)),
                                mu, dt, K, "rk4", cfg.collocation(), cfg.pde_rhs())
    traj = gk.ng_solve(model, m0, mu, dt, K, cfg.collocation(), cfg.pde_rhs())
    means = np.array([s.mean for s in states])
    n_diff = int(np.sum(means != traj))
    verdict(3, n_diff == 0, f"{K} steps, {n_diff} differing entries")


# -- 4 ----------------------------------------------------------------------


def test_c4_burgers_agreement(burgers_run, verdict):
    rep = formats.read_json(burgers_run.path("compare", "report.json"))["fng_vs_reference"]
    times = burgers_run.stage_times()
    wall = sum(times.get(s, np.inf) for s in
               ("gen-data", "pretrain", "solve-fng", "ensemble", "compare"))
    ok = (max(rep["mean_rel_l2"]) < 0.10 and max(rep["width_rel_diff"]) < 0.30
          and wall < 1800)
    verdict(4, ok, f"t={rep['times']} mean {[f'{v:.2e}' for v in rep['mean_rel_l2']]}, "
                   f"width {np.round(rep['width_rel_diff'], 4).tolist()}, {wall:.0f} s")


# -- 5 ----------------------------------------------------------------------


def test_c5_ensemble_size_monotonicity(burgers_run, verdict):
    cfg = burgers_run.cfg
    model, hyper = burgers_run.load_model()
    ref = burgers_run.ensemble_summaries(cfg.uq.reference_size)
    seeds = [harness.stage_seed(cfg.seed, f"size-study-{i}") for i in range(5)]
    dev = harness.ensemble_size_study(model, burgers_run.initial_belief(hyper), cfg,
                                      [5, 50], seeds, ref, cfg.uq.times)
    verdict(5, dev[5] > dev[50], f"width deviation M=5 {dev[5]:.3f}, M=50 {dev[50]:.3f}")


# -- 6 ----------------------------------------------------------------------


def test_c6_speedup(burgers_run, verdict):
    table = formats.read_json(burgers_run.path("bench", "runtime.json"))
    speedup = table["speedup"]["100"]
    scaling = table["ensemble"]["100"]["median"] / table["ensemble"]["25"]["median"]
    ok = speedup >= 5 and 3 <= scaling <= 5 and table["workers"] == 1
    verdict(6, ok, f"fng {table['fng']['median']:.2f} s, speedup vs M=100 "
                   f"{speedup:.1f}x, M=100/M=25 {scaling:.2f}")


# -- 7 ----------------------------------------------------------------------


def test_c7_psd_projection(verdict):
    rng = np.random.default_rng(7)
    P = filtered.psd_project(np.diag([1.0, -2.0]))
    diag_ok = bool(np.max(np.abs(P - np.diag([1.0, 0.0]))) <= 1e-15)
    idem, min_eig = 0.0, np.inf
    for _ in range(1000):
        n = rng.integers(2, 9)
        X = rng.normal(size=(n, n))
        P = filtered.psd_project(X + X.T)
        PP = filtered.psd_project(P)
        idem = max(idem, np.max(np.abs(PP - P)) / max(1.0, np.max(np.abs(P))))
        # eigenvalues of an exact PSD matrix computed in floating point
        min_eig = min(min_eig, np.linalg.eigvalsh(P).min() / max(1.0, np.linalg.norm(P, 2)))
    ok = diag_ok and idem <= 1e-14 and min_eig >= -1e-14
    verdict(7, ok, f"diag(1,-2) ok={diag_ok}, idempotence {idem:.1e}, "
                   f"min scaled eigenvalue {min_eig:.1e}")


# -- 8 ----------------------------------------------------------------------


def test_c8_vlasov_agreement(vlasov_run, verdict):
    rep = formats.read_json(vlasov_run.path("compare", "report.json"))["fng_vs_reference"]
    times = vlasov_run.stage_times()
    wall = sum(times.get(s, np.inf) for s in
               ("gen-data", "pretrain", "solve-fng", "ensemble", "compare"))
    ok = (rep["mean_rel_l2"][-1] < 0.10 and rep["var_correlation"][-1] > 0.8
          and wall < 3600)
    verdict(8, ok, f"t={rep['times'][-1]} mean {rep['mean_rel_l2'][-1]:.2e}, "
                   f"variance correlation {rep['var_correlation'][-1]:.4f}, {wall:.0f} s")


# -- 9 ----------------------------------------------------------------------


def test_c9_reference_solvers(verdict):
    g = pde_ref.Grid1D(128)
    q = pde_ref.burgers_ic(g.centers)
    mass = 0.0
    for _ in range(50):
        q1 = pde_ref.rk4_step(lambda s: pde_ref.burgers_rhs(s, 0.01, g.dx), q, 1e-3)
        mass = max(mass, abs(q1.sum() - q.sum()) / abs(q.sum()))
        q = q1

    sols = {}
    for n in (128, 256, 512):
        gn = pde_ref.Grid1D(n)
        sols[n] = pde_ref.integrate(lambda s, gn=gn: pde_ref.burgers_rhs(s, 0.05, gn.dx),
                                    pde_ref.burgers_ic(gn.centers), 0.5,
                                    pde_ref.burgers_dt(0.05, gn.dx))

    def coarsen(v):
        return 0.5 * (v[0::2] + v[1::2])

    e1 = np.sqrt(2 / 128 * np.sum((coarsen(sols[256]) - sols[128]) ** 2))
    e2 = np.sqrt(2 / 256 * np.sum((coarsen(sols[512]) - sols[256]) ** 2))
    space = e1 / e2

    errs = [abs(pde_ref.integrate(lambda y: -y, np.array([1.0]), 1.0, dt)[0] - np.exp(-1))
            for dt in (0.1, 0.05)]
    time_ratio = errs[0] / errs[1]

    g2 = pde_ref.Grid2D(64, 64)
    X, V = np.meshgrid(g2.x, g2.v, indexing="ij")
    f0 = pde_ref.vlasov_ic(X, V)
    f1 = pde_ref.rk4_step(lambda s: pde_ref.vlasov_rhs(s, 0.375, g2), f0, 1e-3)
    drift = abs(f1.sum() - f0.sum()) / abs(f0.sum())

    ok = mass < 1e-12 and 3.5 <= space <= 4.5 and 12 <= time_ratio <= 20 and drift < 1e-12
    verdict(9, ok, f"Burgers mass/step {mass:.1e}, space ratio {space:.2f}, "
                   f"RK4 ratio {time_ratio:.2f}, Vlasov drift {drift:.1e}")


# -- 10 ---------------------------------------------------------------------


def artifacts(root):
    out = {}
    for p in sorted(root.rglob("*")):
        rel_path = p.relative_to(root).as_posix()
        if p.is_file() and rel_path not in harness.TIMING_FILES:
            out[rel_path] = p.read_bytes()
    d = formats.read_json(root / "config.json")
    d.pop("output_dir")
    out["config.json"] = repr(sorted(d.items())).encode()
    return out


def test_c10_determinism(tiny_config, tmp_path, verdict):
    a = tiny_config
    b = harness.ExperimentConfig.from_dict({**a.to_dict(), "output_dir": str(tmp_path / "b")})
    ra = artifacts(harness.run_pipeline(a))
    rb = artifacts(harness.run_pipeline(b))
    differing = sorted(k for k in ra.keys() | rb.keys() if ra.get(k) != rb.get(k))
    verdict(10, not differing, f"{len(ra)} artifacts compared, differing: {differing or 'none'}")


# -- trained-model invariants (no criterion number) ---------------------------


def test_trained_model_rk4_order(burgers_run):
    cfg = burgers_run.cfg
    model, hyper = burgers_run.load_model()
    m0 = burgers_run.initial_belief(hyper).mean
    T = 0.1

    def solve(n):
        return gk.ng_solve(model, m0, cfg.online.mu_test, T / n, n, cfg.collocation(),
                           cfg.pde_rhs())[-1]

    ref = solve(320)
    e = [np.linalg.norm(solve(n) - ref) for n in (10, 20)]
    assert 12 <= e[0] / e[1] <= 20, e


def test_trained_model_ng_stays_finite(burgers_run):
    cfg = burgers_run.cfg
    model, hyper = burgers_run.load_model()
    m0 = burgers_run.initial_belief(hyper).mean
    traj = gk.ng_solve(model, m0, cfg.online.mu_test, 1e-2, 100, cfg.collocation(),
                       cfg.pde_rhs())
    assert np.all(np.isfinite(traj))
    q = colora.forward(model, traj[-1], cfg.eval_points())
    assert np.all(np.isfinite(q)) and np.abs(q).max() < 10
