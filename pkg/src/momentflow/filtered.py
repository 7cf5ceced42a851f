"""Gaussian moment propagation for Neural Galerkin weights.

The online weights are treated as a Gaussian ``N(m, S)``.  Linearising the
velocity at the mean closes the moment hierarchy:

    dm/dt = v(m),        dS/dt = A S + S A^T,    A = grad_theta v(m).

``A`` is obtained by pushing ``p`` forward-mode directions through the whole
velocity evaluation (assembly and least-squares solve).  The module also
provides the sampling utilities and the ensemble baseline these moments are
compared against.
"""
from __future__ import annotations

import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import colora
from . import diffcore as dc
from . import galerkin
from .colora import GaussianBelief

log = logging.getLogger(__name__)

INTEGRATORS = ("euler", "rk4")


@dataclass
class MomentState:
    t: float
    belief: GaussianBelief

    def __post_init__(self):
        b = self.belief
        if not (np.all(np.isfinite(b.mean)) and np.all(np.isfinite(b.cov))):
            raise FloatingPointError(f"moment state at t={self.t} is not finite")

    @property
    def mean(self):
        return self.belief.mean

    @property
    def cov(self):
        return self.belief.cov


# ---------------------------------------------------------------------------
# Linearised velocity
# ---------------------------------------------------------------------------


def velocity_and_jacobian(model, theta, mu, colloc, pde, lam=None):
    """``(v(theta), grad_theta v(theta))`` from one batched forward-mode pass.

    The primal part of the pass performs exactly the same arithmetic as
    :func:`momentflow.galerkin.velocity`, so ``v`` agrees with it bit for bit.
    """
    theta = np.asarray(theta, dtype=float)
    p = theta.shape[0]
    # the singleton axis leaves room for inner direction axes
    seed = dc.Dual(theta, np.eye(p).reshape(p, 1, 1, p))
    ev = galerkin.velocity(model, seed, mu, colloc, pde, lam)
    v = ev.v
    if not dc._is_jet(v):
        return np.asarray(v, dtype=float), np.zeros((p, p))
    return v.val, v.tan.reshape(p, p).T


def velocity_jacobian(model, theta, mu, colloc, pde, lam=None):
    """``p x p`` matrix whose column ``j`` is ``d v / d theta_j``."""
    return velocity_and_jacobian(model, theta, mu, colloc, pde, lam)[1]


def jacobian_by_normal_equations(model, theta, mu, colloc, pde, lam=None):
    """Reference Jacobian from the differentiated normal equations.

    Solves ``(J'J + lam I) dv_j = d(J'f)_j - d(J'J)_j v - dlam_j v`` with
    explicitly formed matrices.  Only the assembly is differentiated by
    forward mode.  ``dlam_j`` is zero when ``lam`` is given.
    """
    theta = np.asarray(theta, dtype=float)
    p = theta.shape[0]
    seed = dc.Dual(theta, np.eye(p).reshape(p, 1, 1, p))
    J, f = galerkin.assemble(model, seed, mu, colloc, pde)
    J0, f0 = dc.primal(J), dc.primal(f)
    N = J0.shape[0]
    dJ = J.tan.reshape(p, N, p) if dc._is_jet(J) else np.zeros((p, N, p))
    df = f.tan.reshape(p, N) if dc._is_jet(f) else np.zeros((p, N))
    dlam = np.zeros(p)
    if lam is None:
        lam = galerkin.default_lambda(J0)
        # d tr(J'J) = 2 tr(J' dJ)
        dlam = np.array([2 * galerkin.LAMBDA_SCALE * np.trace(J0.T @ dJ[j]) / p
                         for j in range(p)])
    M = J0.T @ J0 + lam * np.eye(p)
    v = np.linalg.solve(M, J0.T @ f0)
    out = np.empty((p, p))
    for j in range(p):
        dF = dJ[j].T @ f0 + J0.T @ df[j]
        dM = dJ[j].T @ J0 + J0.T @ dJ[j] + dlam[j] * np.eye(p)
        out[:, j] = np.linalg.solve(M, dF - dM @ v)
    return out


def moment_rhs(A, cov):
    """``A S + S A^T``; symmetric whenever ``S`` is."""
    AS = A @ cov
    return AS + AS.T


def fng_rhs(model, state, mu, colloc, pde, lam=None):
    """Time derivatives ``(dm, dS)`` of the filtered equations at ``state``."""
    v, A = velocity_and_jacobian(model, state.mean, mu, colloc, pde, lam)
    return v, moment_rhs(A, state.cov)


# ---------------------------------------------------------------------------
# Time integration
# ---------------------------------------------------------------------------


def _symmetrize(S):
    return 0.5 * (S + S.T)


def fng_step(model, mean, cov, mu, dt, colloc, pde, lam=None,
             integrator="rk4"):
    """One step of the joint mean/covariance system.

    The Jacobian is re-evaluated at every stage mean.  The stage arithmetic
    for the mean matches :func:`momentflow.pde_ref.rk4_step` exactly.
    """
    def rhs(m, S):
        v, A = velocity_and_jacobian(model, m, mu, colloc, pde, lam)
        return v, moment_rhs(A, S)

    if integrator == "euler":
        k1m, k1S = rhs(mean, cov)
        return mean + dt * k1m, _symmetrize(cov + dt * k1S)
    if integrator != "rk4":
        raise ValueError(f"unknown integrator {integrator!r}")
    k1m, k1S = rhs(mean, cov)
    k2m, k2S = rhs(mean + 0.5 * dt * k1m, cov + 0.5 * dt * k1S)
    k3m, k3S = rhs(mean + 0.5 * dt * k2m, cov + 0.5 * dt * k2S)
    k4m, k4S = rhs(mean + dt * k3m, cov + dt * k3S)
    m_new = mean + (dt / 6.0) * (k1m + 2.0 * k2m + 2.0 * k3m + k4m)
    S_new = cov + (dt / 6.0) * (k1S + 2.0 * k2S + 2.0 * k3S + k4S)
    return m_new, _symmetrize(S_new)


def fng_solve(model, belief0, mu, dt, K, integrator="rk4", colloc=None,
              pde=None, lam=None, callback=None):
    """Integrate the filtered equations for ``K`` steps of size ``dt``.

    Returns ``K + 1`` :class:`MomentState` objects starting with ``belief0``.
    The covariance is symmetrised after every step; it is not projected onto
    the PSD cone (see :func:`psd_project`, which is meant for sampling).
    """
    if integrator not in INTEGRATORS:
        raise ValueError(f"unknown integrator {integrator!r}")
    if K < 0:
        raise ValueError("K must be non-negative")
    if dt <= 0 and K > 0:
        raise ValueError("dt must be positive")
    if colloc is None or pde is None:
        raise ValueError("colloc and pde are required")
    mean = np.array(belief0.mean, dtype=float)
    cov = _symmetrize(np.array(belief0.cov, dtype=float))
    states = [MomentState(0.0, GaussianBelief(mean, cov))]
    for k in range(K):
        mean, cov = fng_step(model, mean, cov, mu, dt, colloc, pde, lam,
                             integrator)
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise FloatingPointError(f"filtered state non-finite at step {k + 1}")
        states.append(MomentState((k + 1) * dt, GaussianBelief(mean, cov)))
        if callback is not None:
            callback(states[-1])
    return states


def moments_to_array(states):
    """Rows ``(t, m, vec(S))`` for the belief trajectory blob."""
    return np.array([np.concatenate([[s.t], s.mean, s.cov.ravel()])
                     for s in states])


def moments_from_array(arr):
    arr = np.atleast_2d(np.asarray(arr, dtype=float))
    n = arr.shape[1] - 1
    p = int(round((-1 + np.sqrt(1 + 4 * n)) / 2))
    if p + p * p != n:
        raise ValueError("array does not hold (t, mean, cov) rows")
    return [MomentState(float(r[0]), GaussianBelief(r[1:1 + p],
                                                    r[1 + p:].reshape(p, p)))
            for r in arr]


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def psd_project(S):
    """Nearest symmetric PSD matrix: symmetrise, then clamp eigenvalues at 0."""
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError("expected a square matrix")
    w, V = np.linalg.eigh(_symmetrize(S))
    out = (V * np.maximum(w, 0.0)) @ V.T
    return _symmetrize(out)


def sqrt_psd(S):
    """Symmetric square root of the PSD projection of ``S``."""
    w, V = np.linalg.eigh(_symmetrize(np.asarray(S, dtype=float)))
    return _symmetrize((V * np.sqrt(np.maximum(w, 0.0))) @ V.T)


def stream(seed, index):
    """Counter-based generator keyed by ``(seed, index)``."""
    return np.random.Generator(np.random.Philox(
        np.random.SeedSequence([int(seed), int(index)])))


def standard_draws(seed, n, p, start=0):
    """``n x p`` standard normals; row ``i`` comes from stream ``start + i``."""
    return np.array([stream(seed, start + i).standard_normal(p)
                     for i in range(n)]).reshape(n, p)


def sample_weights(belief, n, rng):
    """``n`` draws ``m + S^{1/2} xi``.

    ``rng`` is either an integer seed, in which case sample ``i`` uses the
    keyed stream ``(seed, i)``, or a numpy Generator.
    """
    p = belief.p
    if isinstance(rng, (int, np.integer)):
        xi = standard_draws(rng, n, p)
    else:
        xi = np.random.default_rng(rng).standard_normal((n, p))
    L = sqrt_psd(belief.cov)
    return belief.mean + xi @ L.T


def evaluate_fields(model, thetas, points):
    """Network output for each weight vector, shape ``(n, N)``."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    return colora.forward(model, thetas[:, None, :], points)


def quantile_interval(field_samples, level=0.95):
    """Pointwise empirical quantiles at ``(1 - level)/2`` and ``(1 + level)/2``.

    Quantiles use the inverse of the empirical CDF, so the bounds are always
    sample values.  Fewer than 20 samples only trigger a warning.
    """
    X = np.asarray(field_samples, dtype=float)
    if X.shape[0] < 2:
        raise ValueError("need at least two samples")
    if X.shape[0] < 20:
        warnings.warn(f"quantile interval from only {X.shape[0]} samples",
                      stacklevel=2)
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    a = 0.5 * (1.0 - level)
    lo = np.quantile(X, a, axis=0, method="inverted_cdf")
    hi = np.quantile(X, 1.0 - a, axis=0, method="inverted_cdf")
    return lo, hi


@dataclass
class FieldSummary:
    """Pointwise statistics of sampled fields on an evaluation grid."""

    points: np.ndarray
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    var: np.ndarray

    @classmethod
    def from_samples(cls, points, fields, level=0.95):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            lo, hi = quantile_interval(fields, level)
        return cls(np.asarray(points, dtype=float), fields.mean(axis=0), lo, hi,
                   fields.var(axis=0, ddof=1))

    @property
    def width(self):
        return self.upper - self.lower


def summarize_belief(model, belief, points, n=100, seed=0, level=0.95):
    """Sample ``n`` weights from the projected belief and summarise fields."""
    proj = GaussianBelief(belief.mean, psd_project(belief.cov))
    thetas = sample_weights(proj, n, int(seed))
    return FieldSummary.from_samples(points,
                                     evaluate_fields(model, thetas, points),
                                     level)


# ---------------------------------------------------------------------------
# Ensemble baseline
# ---------------------------------------------------------------------------


class EnsembleError(FloatingPointError):
    def __init__(self, msg, failures):
        super().__init__(msg)
        self.failures = failures


@dataclass
class EnsembleRun:
    members: np.ndarray          # (M, K + 1, p)
    seed: int
    belief0: GaussianBelief
    dt: float = 0.0
    failures: dict = field(default_factory=dict)

    @property
    def M(self):
        return self.members.shape[0]

    def weights_at(self, k):
        return self.members[:, k, :]


def _member(args):
    model, theta0, mu, dt, K, colloc, pde, lam, integrator = args
    return galerkin.ng_solve(model, theta0, mu, dt, K, colloc, pde, lam,
                             integrator=integrator)


def ensemble_solve(model, belief0, mu, dt, K, M, seed, colloc=None, pde=None,
                   lam=None, workers=1, integrator="rk4"):
    """``M`` Neural Galerkin trajectories from draws of ``belief0``.

    Member ``i`` starts from the keyed draw ``(seed, i)``, so runs are
    reproducible under any schedule and share draws with
    :func:`sample_weights` called with the same integer seed.
    """
    if M < 1:
        raise ValueError("M must be at least 1")
    if colloc is None or pde is None:
        raise ValueError("colloc and pde are required")
    proj = GaussianBelief(belief0.mean, psd_project(belief0.cov))
    theta0 = sample_weights(proj, M, int(seed))
    jobs = [(model, theta0[i], mu, dt, K, colloc, pde, lam, integrator)
            for i in range(M)]
    failures, trajs = {}, [None] * M
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            futures = [pool.submit(_member, j) for j in jobs]
            for i, fut in enumerate(futures):
                try:
                    trajs[i] = fut.result()
                except (FloatingPointError, np.linalg.LinAlgError) as exc:
                    failures[i] = str(exc)
    else:
        for i, j in enumerate(jobs):
            try:
                trajs[i] = _member(j)
            except (FloatingPointError, np.linalg.LinAlgError) as exc:
                failures[i] = str(exc)
    if failures:
        raise EnsembleError(f"{len(failures)} of {M} ensemble members failed; "
                            f"first: member {min(failures)}: "
                            f"{failures[min(failures)]}", failures)
    return EnsembleRun(np.array(trajs), int(seed), belief0, dt)


def summarize_ensemble(model, run, k, points, level=0.95):
    return FieldSummary.from_samples(
        points, evaluate_fields(model, run.weights_at(k), points), level)
