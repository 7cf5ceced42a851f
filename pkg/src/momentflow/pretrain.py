"""Offline training of a CoLoRA network together with its hyper-network.

Two objectives are available.  The deterministic one regresses the
hyper-network mean onto the data with a pointwise relative squared error.
The Bayesian one maximises an evidence lower bound for a diagonal Gaussian
belief over the online weights, with Monte Carlo likelihood terms and a
closed-form Gaussian KL to the standard normal prior.

Gradients come from the reverse-mode tape in :mod:`momentflow.diffcore`;
the optimiser is Adam.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import colora
from . import diffcore as dc

log = logging.getLogger(__name__)

REL_EPS = 1e-6


class TrainingDivergedError(FloatingPointError):
    """Raised when the objective becomes non-finite.

    ``model`` and ``hyper`` hold the last weights with a finite objective.
    """

    def __init__(self, msg, model, hyper, epoch):
        super().__init__(msg)
        self.model = model
        self.hyper = hyper
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs: int = 300
    learning_rate: float = 1e-3
    batch_size: int = 4096
    mc_samples: int = 10
    sigma_noise: float = 0.01
    prior: str = "standard_normal"
    seed: int = 0
    mode: str = "bayesian"
    kl_mode: str = "closed"          # "closed" or "mc"
    width: int = 64
    n_layers: int = 5
    rank: int = 16
    activation: str = "tanh"
    hyper_width: int = 64
    hyper_layers: int = 4
    init_std: float = 0.1

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be at least 1")
        if not self.sigma_noise > 0:
            raise ValueError("sigma_noise must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.mode not in ("bayesian", "deterministic"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.kl_mode not in ("closed", "mc"):
            raise ValueError(f"unknown kl_mode {self.kl_mode!r}")
        if self.prior != "standard_normal":
            raise ValueError("only the standard normal prior is supported")

    def to_dict(self):
        return asdict(self)


@dataclass
class Batch:
    """Training entries ``(t, mu, x, q)``.

    ``group_size`` is the number of spatial points sharing each entry's
    ``(t, mu)`` pair; it spreads the per-snapshot KL term over the entries.
    """

    t: np.ndarray
    mu: np.ndarray
    x: np.ndarray
    q: np.ndarray
    group_size: int = 1

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).ravel()
        self.mu = np.asarray(self.mu, dtype=float).ravel()
        self.q = np.asarray(self.q, dtype=float).ravel()
        if len(self.q) == 0:
            raise ValueError("batch is empty")
        self.x = np.asarray(self.x, dtype=float).reshape(len(self.q), -1)
        if not (len(self.t) == len(self.mu) == len(self.q)):
            raise ValueError("batch columns have different lengths")
        for name in ("t", "mu", "x", "q"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"batch column {name} has non-finite values")

    def __len__(self):
        return len(self.q)

    @classmethod
    def from_rows(cls, rows, group_size=1):
        rows = np.asarray(rows, dtype=float)
        return cls(rows[:, 0], rows[:, 1], rows[:, 2:-1], rows[:, -1], group_size)


# ---------------------------------------------------------------------------
# Objectives on raw parameters (arrays or tape variables)
# ---------------------------------------------------------------------------


def _hyper_split(hw, hb, hyper, batch):
    z = hyper.scale_inputs(batch.t, batch.mu)
    out = colora.hyper_network(hw, hb, z)
    p = hyper.p
    return out[..., :p], out[..., p:]


def _deterministic(params, hw, hb, hyper, batch, activation):
    mean, _ = _hyper_split(hw, hb, hyper, batch)
    qhat = colora.network(params, mean, batch.x, activation)
    denom = np.maximum(batch.q ** 2, REL_EPS)
    guarded = int(np.count_nonzero(batch.q ** 2 < REL_EPS))
    return ((batch.q - qhat) ** 2 / denom).sum(), guarded


def gaussian_kl(mean, std):
    """``KL(N(mean, diag(std^2)) || N(0, I))`` summed over the last axis."""
    return 0.5 * (std ** 2 + mean ** 2 - 1.0 - 2.0 * dc.log(std)).sum(-1)


def _elbo(params, hw, hb, hyper, batch, cfg, xi, n_total, activation):
    mean, eta = _hyper_split(hw, hb, hyper, batch)
    std = dc.softplus(eta)
    theta = mean + std * xi                       # (S, B, p)
    qhat = colora.network(params, theta, batch.x, activation)
    S, B = xi.shape[0], len(batch)
    ll = -(1.0 / cfg.sigma_noise ** 2) * ((batch.q - qhat) ** 2).sum() / S
    if cfg.kl_mode == "closed":
        kl = gaussian_kl(mean, std).sum()
    else:
        # log q(Theta) - log prior(Theta), shared constants cancel
        logq = (-0.5 * xi ** 2).sum() - S * dc.log(std).sum()
        logp = (-0.5 * theta ** 2).sum()
        kl = (logq - logp) / S
    scale = n_total / B
    return scale * (ll - kl / batch.group_size)


# ---------------------------------------------------------------------------
# Public objective evaluations on model objects
# ---------------------------------------------------------------------------


def deterministic_loss(model, hypernet, batch, return_guard_count=False):
    """Sum of pointwise relative squared errors of the mean prediction.

    Denominators are ``max(q^2, 1e-6)``; the number of entries where the
    guard is active is returned as well when requested.
    """
    loss, guarded = _deterministic(colora.model_params(model), hypernet.weights,
                                   hypernet.biases, hypernet, batch,
                                   model.activation)
    loss = float(loss)
    if guarded:
        log.debug("relative-error guard active on %d entries", guarded)
    return (loss, guarded) if return_guard_count else loss


def log_likelihood(model, theta, x, y, sigma_noise):
    """``-(1/sigma^2) * sum (y - q(theta, x))^2``, unnormalised."""
    if not sigma_noise > 0:
        raise ValueError("sigma_noise must be positive")
    qhat = colora.forward(model, np.asarray(theta, dtype=float), x)
    return float(-np.sum((np.asarray(y, dtype=float) - qhat) ** 2)
                 / sigma_noise ** 2)


def draw_noise(rng, mc_samples, n, p):
    return rng.standard_normal((mc_samples, n, p))


def elbo(model, hypernet, batch, cfg, rng, n_total=None, xi=None):
    """Monte Carlo ELBO estimate on a batch.

    ``n_total`` is the dataset size used to rescale the batch sum (defaults
    to the batch size).  Passing ``xi`` fixes the standard normal draws.
    """
    if cfg.mode != "bayesian":
        raise ValueError("elbo requires mode='bayesian'")
    if xi is None:
        xi = draw_noise(np.random.default_rng(rng), cfg.mc_samples, len(batch),
                        hypernet.p)
    n_total = len(batch) if n_total is None else n_total
    val = float(_elbo(colora.model_params(model), hypernet.weights,
                      hypernet.biases, hypernet, batch, cfg, xi, n_total,
                      model.activation))
    if not np.isfinite(val):
        raise FloatingPointError("ELBO is not finite")
    return val


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _flatten(model, hyper):
    arrays = list(model.arrays().values())
    return arrays + list(hyper.weights) + list(hyper.biases)


def _unflatten(model, hyper, flat):
    names = list(model.arrays())
    new_model = colora.ColoraModel.from_arrays(
        dict(zip(names, flat[:len(names)])), model.n_layers, model.activation)
    k = len(names)
    n = len(hyper.weights)
    new_hyper = colora.HyperNet([a.copy() for a in flat[k:k + n]],
                                [a.copy() for a in flat[k + n:k + 2 * n]],
                                hyper.in_lo.copy(), hyper.in_hi.copy())
    return new_model, new_hyper


def _tape_structure(model, hyper, leaves):
    L = model.n_layers
    params = [tuple(leaves[4 * i:4 * i + 4]) for i in range(L + 1)]
    k = 4 * (L + 1)
    n = len(hyper.weights)
    return params, leaves[k:k + n], leaves[k + n:k + 2 * n]


def loss_and_grad(model, hyper, batch, cfg, xi=None, n_total=None):
    """Objective to minimise and its gradient over all trainable arrays.

    For the Bayesian mode the objective is ``-ELBO``.
    """
    tape = dc.Tape()
    leaves = [tape.var(a) for a in _flatten(model, hyper)]
    params, hw, hb = _tape_structure(model, hyper, leaves)
    with np.errstate(over="raise", invalid="raise", divide="raise"):
        if cfg.mode == "bayesian":
            out = -_elbo(params, hw, hb, hyper, batch, cfg, xi,
                         len(batch) if n_total is None else n_total,
                         model.activation)
        else:
            out, _ = _deterministic(params, hw, hb, hyper, batch,
                                    model.activation)
    grads = tape.grad(out, leaves)
    return float(out.value), grads


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.k = 0

    def step(self, params, grads):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.k += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.k, 1.0 - b2 ** self.k
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            out.append(p - self.lr * (self.m[i] / c1)
                       / (np.sqrt(self.v[i] / c2) + self.eps))
        return out


def init_networks(input_dim, t_range, mu_range, cfg):
    """Initial CoLoRA network and hyper-network."""
    seeds = np.random.SeedSequence([cfg.seed, 0]).spawn(2)
    model = colora.init_colora(input_dim, cfg.width, cfg.n_layers, cfg.rank,
                               cfg.activation, np.random.default_rng(seeds[0]))
    hyper = colora.init_hypernet(model.p, cfg.hyper_width, cfg.hyper_layers,
                                 tuple(map(float, t_range)),
                                 tuple(map(float, mu_range)),
                                 cfg.init_std, np.random.default_rng(seeds[1]))
    return model, hyper


def train(dataset, cfg, model=None, hyper=None, progress=None):
    """Train on ``dataset``; returns ``(model, hyper, log_rows)``.

    ``log_rows`` holds one dict per epoch with the mean batch objective and
    the elapsed wall time.  Results depend only on ``cfg.seed``.
    """
    rows = dataset.entries()
    if len(rows) == 0:
        raise ValueError("dataset is empty")
    if model is None or hyper is None:
        times = dataset.times
        model, hyper = init_networks(
            dataset.points.shape[1], (times[0], times[-1]),
            (np.min(dataset.mus), np.max(dataset.mus)), cfg)
    return train_rows(rows, len(dataset.points), cfg, model, hyper, progress)


def train_rows(rows, group_size, cfg, model, hyper, progress=None):
    """Optimise on ``(t, mu, x..., q)`` rows starting from the given networks."""
    rows = np.asarray(rows, dtype=float)
    group = group_size
    n_total = len(rows)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    noise_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    opt = Adam(cfg.learning_rate)
    flat = [a.copy() for a in _flatten(model, hyper)]
    history = []
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n_total)
        total, count = 0.0, 0
        for start in range(0, n_total, cfg.batch_size):
            batch = Batch.from_rows(rows[order[start:start + cfg.batch_size]],
                                    group)
            xi = (draw_noise(noise_rng, cfg.mc_samples, len(batch), hyper.p)
                  if cfg.mode == "bayesian" else None)
            cur_model, cur_hyper = _unflatten(model, hyper, flat)
            try:
                val, grads = loss_and_grad(cur_model, cur_hyper, batch, cfg, xi,
                                           n_total)
            except FloatingPointError as exc:
                val, grads = np.nan, None
                reason = str(exc)
            else:
                reason = "objective is not finite"
            if grads is None or not np.isfinite(val) or not all(
                    np.all(np.isfinite(g)) for g in grads):
                raise TrainingDivergedError(
                    f"training diverged in epoch {epoch}: {reason}",
                    cur_model, cur_hyper, epoch)
            flat = opt.step(flat, grads)
            total += val
            count += 1
        history.append({"epoch": epoch, "loss": total / count,
                        "wall_time": time.perf_counter() - t0})
        if progress is not None:
            progress(history[-1])
        log.info("epoch %d loss %.6g", epoch, total / count)
    model, hyper = _unflatten(model, hyper, flat)
    return model, hyper, history
