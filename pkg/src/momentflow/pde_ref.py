"""High-fidelity reference solvers and training-data generation.

* 1D viscous Burgers on the periodic domain [-1, 1): conservative finite
  volumes with a local Lax-Friedrichs flux on centrally reconstructed
  interface values and a second-order diffusion stencil.
* 2D Vlasov in (x, v) on [-1, 1)^2, periodic in both directions, with
  fourth-order central differences.

Both are advanced with classical RK4.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import formats

log = logging.getLogger(__name__)

VLASOV_ALPHA = 0.2
VLASOV_BETA = 0.1
VLASOV_GAMMA = 8e-3
VLASOV_X0 = -0.2
VLASOV_V0 = 0.0

BURGERS_AMPLITUDE = 0.8
BURGERS_X1 = -0.2
BURGERS_SIGMA = 0.2

DT_RANGE = (1e-4, 3e-3)


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Grid1D:
    n_cells: int

    @property
    def dx(self):
        return 2.0 / self.n_cells

    @property
    def centers(self):
        return -1.0 + (np.arange(self.n_cells) + 0.5) * self.dx


@dataclass(frozen=True)
class Grid2D:
    """Periodic node grid on [-1, 1)^2; arrays are indexed ``[ix, iv]``."""

    n_x: int
    n_v: int

    @property
    def dx(self):
        return 2.0 / self.n_x

    @property
    def dv(self):
        return 2.0 / self.n_v

    @property
    def x(self):
        return -1.0 + np.arange(self.n_x) * self.dx

    @property
    def v(self):
        return -1.0 + np.arange(self.n_v) * self.dv

    def points(self):
        """All nodes as an ``(n_x * n_v, 2)`` array in row-major order."""
        X, V = np.meshgrid(self.x, self.v, indexing="ij")
        return np.column_stack([X.ravel(), V.ravel()])


# ---------------------------------------------------------------------------
# Burgers
# ---------------------------------------------------------------------------


def burgers_ic(x, amplitude=BURGERS_AMPLITUDE, x1=BURGERS_X1,
               sigma=BURGERS_SIGMA):
    x = np.asarray(x, dtype=float)
    return amplitude * np.exp(-((x - x1) ** 2) / sigma ** 2)


def _llf_flux(q):
    """Numerical flux at interfaces i+1/2 for 0.5 q^2, periodic."""
    qm1 = np.roll(q, 1)
    qp1 = np.roll(q, -1)
    qp2 = np.roll(q, -2)
    # centred slopes, no limiter
    left = q + 0.25 * (qp1 - qm1)
    right = qp1 - 0.25 * (qp2 - q)
    a = np.maximum(np.abs(left), np.abs(right))
    return 0.25 * (left * left + right * right) - 0.5 * a * (right - left)


def burgers_convection(q, dx):
    flux = _llf_flux(q)
    return -(flux - np.roll(flux, 1)) / dx


def burgers_rhs(q, mu, dx):
    """Semi-discrete right-hand side of ``q_t + (q^2/2)_x = mu q_xx``."""
    if mu <= 0:
        raise ValueError("viscosity must be positive")
    q = np.asarray(q, dtype=float)
    diffusion = (np.roll(q, -1) - 2.0 * q + np.roll(q, 1)) / (dx * dx)
    return burgers_convection(q, dx) + mu * diffusion


def burgers_dt(mu, dx, dt_range=DT_RANGE):
    """Stable RK4 step for a viscosity, clamped to the admissible range."""
    return float(np.clip(0.2 * dx * dx / mu, *dt_range))


# ---------------------------------------------------------------------------
# Vlasov
# ---------------------------------------------------------------------------


def vlasov_field(x, mu, alpha=VLASOV_ALPHA, beta=VLASOV_BETA):
    """External force term ``phi_x(x; mu)``."""
    s = np.pi * (np.asarray(x, dtype=float) + mu)
    return (4.0 * alpha * np.pi * np.sin(s) * np.cos(s) ** 3
            - beta * np.pi * np.cos(np.pi * np.asarray(x, dtype=float)))


def vlasov_ic(x, v, gamma=VLASOV_GAMMA, x0=VLASOV_X0, v0=VLASOV_V0):
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    arg = (np.sin(0.5 * np.pi * (x - x0)) ** 2
           + np.sin(0.5 * np.pi * (v - v0)) ** 2)
    return np.exp(-arg / (np.pi * gamma)) / (2.0 * np.pi * gamma)


def d4(q, h, axis):
    """Fourth-order central first derivative with periodic wrap."""
    return (8.0 * (np.roll(q, -1, axis) - np.roll(q, 1, axis))
            - (np.roll(q, -2, axis) - np.roll(q, 2, axis))) / (12.0 * h)


def vlasov_rhs(q, mu, grid, phi=None):
    """``-v q_x + phi_x(x; mu) q_v`` on a :class:`Grid2D`.

    ``phi`` overrides the force evaluated on the x nodes (used in tests).
    """
    if phi is None:
        phi = vlasov_field(grid.x, mu)
    qx = d4(q, grid.dx, 0)
    qv = d4(q, grid.dv, 1)
    return -grid.v[None, :] * qx + phi[:, None] * qv


# ---------------------------------------------------------------------------
# Time stepping
# ---------------------------------------------------------------------------


def rk4_step(rhs, state, dt):
    """One classical fourth-order Runge-Kutta step of ``y' = rhs(y)``."""
    k1 = rhs(state)
    k2 = rhs(state + 0.5 * dt * k1)
    k3 = rhs(state + 0.5 * dt * k2)
    k4 = rhs(state + dt * k3)
    return state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(rhs, state, t_end, dt):
    """Fixed-step RK4 from 0 to ``t_end``; the last step is shortened."""
    n = max(1, int(math.ceil(t_end / dt - 1e-9)))
    h = t_end / n
    for _ in range(n):
        state = rk4_step(rhs, state, h)
    return state


# ---------------------------------------------------------------------------
# Training data
# ---------------------------------------------------------------------------


@dataclass
class TrajectoryField:
    mu: float
    times: np.ndarray
    values: np.ndarray  # (K+1, n_train)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise ValueError("times must start at 0 and strictly increase")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"non-finite snapshot values for mu={self.mu}")


@dataclass
class DataConfig:
    pde: str = "burgers"
    mu_range: tuple = (1e-3, 1e-1)
    m: int = 34
    K: int = 100
    T: float = 2.0
    n_cells: int = 256          # Burgers grid
    n_x: int = 64               # Vlasov grid
    n_v: int = 64
    train_stride: int = 1       # Omega_train = every stride-th grid node
    dt: float | None = None     # None: Burgers uses burgers_dt, Vlasov 1e-4
    seed: int = 0


@dataclass
class TrainingDataset:
    pde: str
    mus: np.ndarray
    points: np.ndarray          # (n_train, d) coordinates of Omega_train
    train_indices: np.ndarray   # flat grid indices of Omega_train
    trajectories: list = field(default_factory=list)
    grid_dims: tuple = ()
    K: int = 0
    T: float = 0.0
    seed: int = 0

    @property
    def times(self):
        return self.trajectories[0].times

    def __len__(self):
        return sum(tr.values.size for tr in self.trajectories)

    def entries(self):
        """Flatten to ``(t, mu, x..., q)`` rows."""
        rows = []
        n = len(self.points)
        for tr in self.trajectories:
            for k, t in enumerate(tr.times):
                block = np.empty((n, 3 + self.points.shape[1]))
                block[:, 0] = t
                block[:, 1] = tr.mu
                block[:, 2:-1] = self.points
                block[:, -1] = tr.values[k]
                rows.append(block)
        return np.concatenate(rows)

    # persistence --------------------------------------------------------
    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = []
        for i, tr in enumerate(self.trajectories):
            name = f"traj_{i:03d}.ngfd"
            formats.write_blob(out / name, tr.values)
            files.append({"file": name, "mu": tr.mu,
                          "times": [float(t) for t in tr.times]})
        formats.write_json(out / "manifest.json", {
            "format": "ngfd-dataset", "version": 1,
            "pde": self.pde,
            "parameters": [float(m) for m in self.mus],
            "grid_dims": list(self.grid_dims),
            "K": self.K, "T": self.T,
            "train_indices": [int(i) for i in self.train_indices],
            "seed": self.seed,
            "trajectories": files,
        })
        return out

    @classmethod
    def load(cls, out_dir):
        out = Path(out_dir)
        man = formats.read_json(out / "manifest.json")
        grid_dims = tuple(man["grid_dims"])
        idx = np.asarray(man["train_indices"], dtype=int)
        trajs = [TrajectoryField(e["mu"], np.asarray(e["times"]),
                                 formats.read_blob(out / e["file"]))
                 for e in man["trajectories"]]
        return cls(pde=man["pde"], mus=np.asarray(man["parameters"]),
                   points=grid_points(man["pde"], grid_dims)[idx],
                   train_indices=idx, trajectories=trajs, grid_dims=grid_dims,
                   K=man["K"], T=man["T"], seed=man["seed"])


def grid_points(pde, grid_dims):
    if pde == "burgers":
        return Grid1D(grid_dims[0]).centers[:, None]
    if pde == "vlasov":
        return Grid2D(*grid_dims).points()
    raise ValueError(f"unknown pde {pde!r}")


def train_indices(pde, grid_dims, stride):
    if pde == "burgers":
        return np.arange(0, grid_dims[0], stride)
    ix = np.arange(0, grid_dims[0], stride)
    iv = np.arange(0, grid_dims[1], stride)
    return (ix[:, None] * grid_dims[1] + iv[None, :]).ravel()


def parameter_grid(lo, hi, m):
    """Equidistant parameters including both endpoints."""
    return np.linspace(lo, hi, m) if m > 1 else np.array([float(lo)])


def solve_trajectory(cfg, mu):
    """Reference solution at ``K + 1`` equidistant snapshot times."""
    if cfg.K < 1:
        raise ValueError("K must be at least 1")
    if cfg.pde == "burgers":
        grid = Grid1D(cfg.n_cells)
        state = burgers_ic(grid.centers)
        dt = cfg.dt or burgers_dt(mu, grid.dx)

        def rhs(q):
            return burgers_rhs(q, mu, grid.dx)
    elif cfg.pde == "vlasov":
        grid = Grid2D(cfg.n_x, cfg.n_v)
        X, V = np.meshgrid(grid.x, grid.v, indexing="ij")
        state = vlasov_ic(X, V)
        dt = cfg.dt or 1e-4
        phi = vlasov_field(grid.x, mu)

        def rhs(q):
            return vlasov_rhs(q, mu, grid, phi)
    else:
        raise ValueError(f"unknown pde {cfg.pde!r}")
    interval = cfg.T / cfg.K
    n_sub = max(1, int(math.ceil(interval / dt - 1e-9)))
    h = interval / n_sub
    times = interval * np.arange(cfg.K + 1)
    snaps = [state.ravel().copy()]
    for k in range(cfg.K):
        for _ in range(n_sub):
            state = rk4_step(rhs, state, h)
        if not np.all(np.isfinite(state)):
            raise FloatingPointError(
                f"reference solution blew up at mu={mu}, t={times[k + 1]}")
        snaps.append(state.ravel().copy())
    return times, np.array(snaps)


def generate_training_set(cfg, workers=1):
    """Solve every training trajectory and collect snapshots on Omega_train."""
    mus = parameter_grid(cfg.mu_range[0], cfg.mu_range[1], cfg.m)
    dims = (cfg.n_cells,) if cfg.pde == "burgers" else (cfg.n_x, cfg.n_v)
    idx = train_indices(cfg.pde, dims, cfg.train_stride)
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            sols = list(pool.map(solve_trajectory, [cfg] * len(mus), mus))
    else:
        sols = [solve_trajectory(cfg, mu) for mu in mus]
    trajs = []
    for mu, (times, snaps) in zip(mus, sols):
        log.info("solved %s trajectory mu=%.6g", cfg.pde, mu)
        trajs.append(TrajectoryField(float(mu), times, snaps[:, idx]))
    return TrainingDataset(pde=cfg.pde, mus=mus,
                           points=grid_points(cfg.pde, dims)[idx],
                           train_indices=idx, trajectories=trajs,
                           grid_dims=dims, K=cfg.K, T=cfg.T, seed=cfg.seed)
