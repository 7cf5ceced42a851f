"""Neural Galerkin dynamics for the online weights.

The velocity ``v(theta)`` is the minimiser of ``||J v - f||^2 + lam ||v||^2``
where row ``i`` of ``J`` is the online-weight gradient of the network at
collocation point ``x_i`` and ``f_i`` is the PDE right-hand side evaluated on
the network.  Everything here accepts forward-mode jets for ``theta``, which
is how :mod:`momentflow.filtered` differentiates the velocity.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from . import colora
from . import diffcore as dc
from . import pde_ref

log = logging.getLogger(__name__)


class SingularSystemError(np.linalg.LinAlgError):
    """The least-squares system is numerically rank deficient."""

    def __init__(self, msg, condition):
        super().__init__(msg)
        self.condition = condition


# ---------------------------------------------------------------------------
# Right-hand sides evaluated on a parametrisation
# ---------------------------------------------------------------------------


class BurgersPDE:
    """``f = -q q_x + mu q_xx``."""

    name = "burgers"
    order = 2

    def __call__(self, points, q, dq, d2q, mu):
        return -(q * dq[0]) + mu * d2q[0]


class VlasovPDE:
    """``f = -v q_x + phi_x(x; mu) q_v`` with ``points = (x, v)``."""

    name = "vlasov"
    order = 1

    def __call__(self, points, q, dq, d2q, mu):
        x, v = points[:, 0], points[:, 1]
        return -(v * dq[0]) + pde_ref.vlasov_field(x, mu) * dq[1]


class HeatPDE:
    """``f = mu q_xx``; the linear test problem."""

    name = "heat"
    order = 2

    def __call__(self, points, q, dq, d2q, mu):
        return mu * d2q[0]


PDES = {"burgers": BurgersPDE, "vlasov": VlasovPDE, "heat": HeatPDE}


def get_pde(name):
    try:
        return PDES[name]()
    except KeyError:
        raise ValueError(f"unknown pde {name!r}") from None


# ---------------------------------------------------------------------------
# Parametrisations
# ---------------------------------------------------------------------------


class ColoraParametrization:
    """Adapter giving a :class:`~momentflow.colora.ColoraModel` the
    ``forward`` / ``grad_online`` / ``spatial_derivs`` interface."""

    def __init__(self, model):
        self.model = model

    @property
    def p(self):
        return self.model.p

    @property
    def input_dim(self):
        return self.model.input_dim

    def forward(self, theta, x):
        return colora.forward(self.model, theta, x)

    def grad_online(self, theta, x):
        return colora.grad_online(self.model, theta, x)

    def spatial_derivs(self, theta, x, order=2):
        return colora.spatial_derivs(self.model, theta, x, order)


class FourierFeatureModel:
    """Linear parametrisation ``q(theta, x) = sum_k theta_k phi_k(x)``.

    The features are ``sin(pi k x)``, ``cos(pi k x)`` for ``k = 1..p/2``,
    optionally mixed by an invertible matrix so the Galerkin operator is not
    diagonal.
    """

    def __init__(self, p=10, mix=None):
        if p % 2:
            raise ValueError("p must be even")
        self.p = p
        self.input_dim = 1
        self.freqs = np.pi * np.arange(1, p // 2 + 1)
        self.mix = np.eye(p) if mix is None else np.asarray(mix, dtype=float)

    def features(self, x):
        z = x[..., 0:1] * self.freqs
        return dc.sin(z), dc.cos(z)

    def forward(self, theta, x):
        x = np.asarray(x, dtype=float) if not dc._is_jet(x) else x
        c = theta @ self.mix.T
        h = self.p // 2
        s, co = self.features(x)
        return (s * c[..., None, :h]).sum(-1) + (co * c[..., None, h:]).sum(-1)

    def grad_online(self, theta, x):
        seed = dc.Dual(theta, np.eye(self.p))
        return dc.swapaxes(self.forward(seed, x).tan, -1, -2)

    def spatial_derivs(self, theta, x, order=2):
        x = np.asarray(x, dtype=float)
        out = self.forward(theta, dc.Dual2(x, np.ones_like(x),
                                           np.zeros_like(x)))
        return out.val, [out.d1], [out.d2] if order == 2 else None

    # hand-written feature matrices used by test oracles
    def feature_matrix(self, x):
        z = np.asarray(x, dtype=float)[:, 0:1] * self.freqs
        return np.hstack([np.sin(z), np.cos(z)]) @ self.mix

    def feature_matrix_xx(self, x):
        z = np.asarray(x, dtype=float)[:, 0:1] * self.freqs
        k2 = self.freqs ** 2
        return np.hstack([-k2 * np.sin(z), -k2 * np.cos(z)]) @ self.mix


def as_parametrization(model):
    if isinstance(model, colora.ColoraModel):
        return ColoraParametrization(model)
    return model


# ---------------------------------------------------------------------------
# Collocation, assembly and the velocity
# ---------------------------------------------------------------------------


@dataclass
class CollocationSet:
    points: np.ndarray  # (N, d)

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if self.points.shape[0] == 1 and self.points.shape[1] > 1:
            self.points = self.points.T
        if len(np.unique(self.points, axis=0)) != len(self.points):
            raise ValueError("collocation points must be distinct")

    @property
    def N(self):
        return len(self.points)

    @classmethod
    def equidistant_1d(cls, n, lo=-1.0, hi=1.0):
        return cls(np.linspace(lo, hi, n, endpoint=False)[:, None])

    @classmethod
    def equidistant_2d(cls, nx, nv):
        return cls(pde_ref.Grid2D(nx, nv).points())


@dataclass
class VelocityEval:
    J: np.ndarray
    f: np.ndarray
    v: np.ndarray
    residual_norm: float
    lam: float


def assemble(model, theta, mu, colloc, pde):
    """Batch gradient ``J`` (N x p) and batch right-hand side ``f`` (N)."""
    par = as_parametrization(model)
    if colloc.N < par.p:
        raise ValueError(f"need at least p={par.p} collocation points")
    x = colloc.points
    J = par.grad_online(theta, x)
    q, dq, d2q = par.spatial_derivs(theta, x, pde.order)
    f = pde(x, q, dq, d2q, mu)
    bad = ~np.isfinite(dc.primal(f))
    bad |= ~np.all(np.isfinite(dc.primal(J)), axis=-1)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise FloatingPointError(f"non-finite assembly at collocation point {i}")
    return J, f


LAMBDA_SCALE = 1e-10


def default_lambda(J):
    J = dc.primal(J)
    return LAMBDA_SCALE * float(np.einsum("ij,ij->", J, J)) / J.shape[1]


def default_lambda_tangent(J):
    """Directional derivatives of :func:`default_lambda`, one per tangent direction.

    Returns ``None`` for a plain array.
    """
    if not dc._is_jet(J):
        return None
    N, p = J.val.shape
    dJ = J.tan.reshape(-1, N, p)
    return 2 * LAMBDA_SCALE * np.einsum("knp,np->k", dJ, J.val) / p


def _lstsq_primal(J, f, lam):
    N, p = J.shape
    if lam > 0:
        A = np.vstack([J, np.sqrt(lam) * np.eye(p)])
        rhs = np.concatenate([f, np.zeros(p)])
    else:
        A, rhs = J, f
    Q, R = np.linalg.qr(A)
    d = np.abs(np.diag(R))
    if lam == 0 and (d.min() <= 1e-13 * d.max()):
        cond = np.inf if d.min() == 0 else d.max() / d.min()
        raise SingularSystemError(
            f"least-squares system is singular (condition ~{cond:.3g}); "
            "retry with lam > 0", cond)
    v = sla.solve_triangular(R, Q.T @ rhs)
    return v, R


def solve_lstsq(J, f, lam, dlam=None):
    """Solve ``min ||J v - f||^2 + lam ||v||^2``.

    ``J`` and ``f`` may be first-order jets (with leading direction axes on
    their tangents); the tangent of ``v`` then follows from differentiating
    the normal equations,
    ``(J'J + lam I) dv = dJ'(f - J v) + J'(df - dJ v) - dlam v``,
    reusing the triangular factor of the primal solve.  ``dlam`` holds the
    derivative of ``lam`` along each tangent direction (zero if omitted).
    """
    if not (dc._is_jet(J) or dc._is_jet(f)):
        v, R = _lstsq_primal(J, f, lam)
        return v, R
    tag = (J if dc._is_jet(J) else f).tag
    J0 = J.val if dc._is_jet(J) else J
    f0 = f.val if dc._is_jet(f) else f
    v, R = _lstsq_primal(J0, f0, lam)
    N, p = J0.shape
    dJ = J.tan.reshape(-1, N, p) if dc._is_jet(J) else np.zeros((1, N, p))
    df = f.tan.reshape(-1, N) if dc._is_jet(f) else np.zeros((1, N))
    r = f0 - J0 @ v
    rhs = np.einsum("knp,n->kp", dJ, r) + (df - dJ @ v) @ J0
    if dlam is not None:
        rhs -= np.outer(dlam, v)
    y = sla.solve_triangular(R, rhs.T, trans="T")
    dv = sla.solve_triangular(R, y).T
    return dc.Dual(v, dv, tag), R


def velocity(model, theta, mu, colloc, pde, lam=None):
    """Evaluate the Neural Galerkin velocity at ``theta``."""
    J, f = assemble(model, theta, mu, colloc, pde)
    dlam = None
    if lam is None:
        # lam depends on theta through J; its derivative enters dv
        lam, dlam = default_lambda(J), default_lambda_tangent(J)
    if lam < 0:
        raise ValueError("lam must be non-negative")
    v, _ = solve_lstsq(J, f, lam, dlam)
    J0, f0, v0 = dc.primal(J), dc.primal(f), dc.primal(v)
    res = float(np.linalg.norm(J0 @ v0 - f0))
    return VelocityEval(J=J, f=f, v=v, residual_norm=res, lam=lam)


def velocity_field(model, mu, colloc, pde, lam=None):
    """``theta -> v(theta)`` as a plain callable."""
    def rhs(theta):
        return velocity(model, theta, mu, colloc, pde, lam).v
    return rhs


def ng_step(model, theta, mu, dt, colloc, pde, lam=None):
    """One RK4 step of ``d theta / dt = v(theta)``."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    if dt == 0:
        return np.array(theta, dtype=float)
    return pde_ref.rk4_step(velocity_field(model, mu, colloc, pde, lam),
                            np.asarray(theta, dtype=float), dt)


def ng_solve(model, theta0, mu, dt, n_steps, colloc, pde, lam=None,
             integrator="rk4"):
    """Trajectory of ``n_steps`` fixed steps, shape ``(n_steps + 1, p)``."""
    rhs = velocity_field(model, mu, colloc, pde, lam)
    if integrator == "rk4":
        def step(th):
            return pde_ref.rk4_step(rhs, th, dt)
    elif integrator == "euler":
        def step(th):
            return th + dt * rhs(th)
    else:
        raise ValueError(f"unknown integrator {integrator!r}")
    traj = [np.array(theta0, dtype=float)]
    for k in range(n_steps):
        nxt = step(traj[-1])
        if not np.all(np.isfinite(nxt)):
            raise FloatingPointError(f"Neural Galerkin state non-finite at step {k + 1}")
        traj.append(nxt)
    return np.array(traj)


def fit_initial_weights(model, q0, colloc, steps=2000, lr=1e-2, polish=20,
                        theta_init=None):
    """Fit online weights to initial-condition samples by mean squared error.

    Adam from the zero vector, followed by a few damped Gauss-Newton steps;
    the best iterate is returned as ``(theta, mse)``.
    """
    par = as_parametrization(model)
    x = colloc.points
    q0 = np.asarray(q0, dtype=float)
    theta = np.zeros(par.p) if theta_init is None else np.array(theta_init, float)

    def misfit(th):
        return float(np.mean((par.forward(th, x) - q0) ** 2))

    best, best_err = theta.copy(), misfit(theta)
    m = np.zeros_like(theta)
    s = np.zeros_like(theta)
    b1, b2, eps = 0.9, 0.999, 1e-8
    for k in range(1, steps + 1):
        res = par.forward(theta, x) - q0
        g = 2.0 * par.grad_online(theta, x).T @ res / len(x)
        m = b1 * m + (1 - b1) * g
        s = b2 * s + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** k)) / (np.sqrt(s / (1 - b2 ** k)) + eps)
        err = misfit(theta)
        if err < best_err:
            best, best_err = theta.copy(), err
    theta = best.copy()
    damp = 1e-3
    for _ in range(polish):
        res = par.forward(theta, x) - q0
        J = par.grad_online(theta, x)
        H = J.T @ J
        reg = damp * max(np.trace(H) / len(theta), 1e-300)
        step = np.linalg.solve(H + reg * np.eye(len(theta)), J.T @ res)
        cand = theta - step
        err = misfit(cand)
        if err < best_err:
            best, best_err, theta = cand.copy(), err, cand
            damp *= 0.3
        else:
            damp *= 10.0
    return best, best_err
