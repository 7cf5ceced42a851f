"""CoLoRA networks, their hyper-network, and Gaussian weight beliefs.

A hidden CoLoRA layer maps ``y -> W y + theta_l * A (B y) + b``; the output
layer is ``w.y + theta_{L+1} * a * (B.y) + b``.  Only the ``p = L + 1``
scalars ``theta`` are online weights; everything else is offline.

Network code is written against :mod:`momentflow.diffcore` so the same
functions evaluate on arrays, forward-mode jets, and tape variables.  Online
weights have shape ``(..., p)`` and coordinates ``(..., d)``; leading axes
broadcast.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import formats


@dataclass
class ColoraLayer:
    W: np.ndarray  # (width, in)
    A: np.ndarray  # (width, r)
    B: np.ndarray  # (r, in)
    b: np.ndarray  # (width,)

    @property
    def rank(self):
        return self.A.shape[1]


@dataclass
class OutputLayer:
    w: np.ndarray  # (width,)
    A: np.ndarray  # scalar, stored as shape ()
    B: np.ndarray  # (width,)
    b: np.ndarray  # scalar


ACTIVATIONS = {"tanh": dc.tanh, "sin": dc.sin, "relu": dc.relu,
               "sigmoid": dc.sigmoid}


@dataclass
class ColoraModel:
    layers: list
    output: OutputLayer
    activation: str = "tanh"

    @property
    def input_dim(self):
        return self.layers[0].W.shape[1]

    @property
    def width(self):
        return self.layers[0].W.shape[0]

    @property
    def rank(self):
        return self.layers[0].rank

    @property
    def n_layers(self):
        return len(self.layers)

    @property
    def p(self):
        return len(self.layers) + 1

    def arrays(self):
        """Offline weights by name in declaration order."""
        out = {}
        for i, lay in enumerate(self.layers):
            for k in ("W", "A", "B", "b"):
                out[f"layer{i}.{k}"] = getattr(lay, k)
        for k in ("w", "A", "B", "b"):
            out[f"out.{k}"] = getattr(self.output, k)
        return out

    def flat_offline(self):
        return np.concatenate([np.ravel(a) for a in self.arrays().values()])

    @classmethod
    def from_arrays(cls, arrays, n_layers, activation="tanh"):
        layers = [ColoraLayer(*(np.asarray(arrays[f"layer{i}.{k}"], dtype=float)
                                for k in ("W", "A", "B", "b")))
                  for i in range(n_layers)]
        output = OutputLayer(*(np.asarray(arrays[f"out.{k}"], dtype=float)
                               for k in ("w", "A", "B", "b")))
        return cls(layers, output, activation)

    def manifest(self):
        return {"kind": "colora", "input_dim": self.input_dim,
                "n_layers": self.n_layers, "width": self.width,
                "rank": self.rank, "activation": self.activation, "p": self.p}


def init_colora(input_dim=1, width=64, n_layers=5, rank=16, activation="tanh",
                rng=None):
    """Uniform 1/sqrt(fan_in) weights; ``A`` starts at zero."""
    rng = np.random.default_rng(rng)
    layers = []
    fan_in = input_dim
    for _ in range(n_layers):
        s = 1.0 / np.sqrt(fan_in)
        layers.append(ColoraLayer(
            W=rng.uniform(-s, s, (width, fan_in)),
            A=np.zeros((width, rank)),
            B=rng.uniform(-s, s, (rank, fan_in)),
            b=rng.uniform(-s, s, width)))
        fan_in = width
    s = 1.0 / np.sqrt(width)
    output = OutputLayer(w=rng.uniform(-s, s, width), A=np.zeros(()),
                         B=rng.uniform(-s, s, width), b=np.zeros(()))
    return ColoraModel(layers, output, activation)


def network(params, theta, x, activation="tanh"):
    """Evaluate a CoLoRA network from raw parameters.

    ``params`` is ``[(W, A, B, b), ..., (w, a, B, b)]`` with entries that may
    be arrays or tape variables.
    """
    act = ACTIVATIONS[activation]
    y = x
    *hidden, (w, a, Bo, bo) = params
    for i, (W, A, B, b) in enumerate(hidden):
        th = theta[..., i:i + 1]
        y = act(y @ W.T + th * ((y @ B.T) @ A.T) + b)
    return y @ w + theta[..., len(hidden)] * (a * (y @ Bo)) + bo


def model_params(model):
    params = [(lay.W, lay.A, lay.B, lay.b) for lay in model.layers]
    o = model.output
    params.append((o.w, o.A, o.B, o.b))
    return params


def _check_theta(model, theta):
    n = dc.primal(theta).shape[-1]
    if n != model.p:
        raise ValueError(f"online weight vector has length {n}, expected "
                         f"p = {model.p}")


def forward(model, theta, x):
    """Network output ``q(theta, x)``; ``x`` is ``(..., d)``."""
    _check_theta(model, theta)
    if not dc._is_jet(x):
        x = np.asarray(x, dtype=float)
    if dc.primal(x).shape[-1] != model.input_dim:
        raise ValueError(f"coordinates have dimension {dc.primal(x).shape[-1]}, expected "
                         f"{model.input_dim}")
    return network(model_params(model), theta, x, model.activation)


def grad_online(model, theta, x):
    """Per-point gradient with respect to the online weights, ``(N, p)``.

    One forward-mode pass with all ``p`` unit directions batched.
    """
    _check_theta(model, theta)
    p = model.p
    seed = dc.Dual(theta, np.eye(p).reshape(p, 1, p))
    out = forward(model, seed, x)
    return dc.swapaxes(out.tan, -1, -2)


def spatial_derivs(model, theta, x, order=2):
    """Value plus first (and second) derivatives in each input coordinate.

    Returns ``(q, dq, d2q)`` with ``dq[k]`` the derivative along coordinate
    ``k`` and ``d2q`` None when ``order == 1``.  Components are arrays, or
    jets when ``theta`` is itself a jet.
    """
    _check_theta(model, theta)
    x = np.asarray(x, dtype=float)
    d = model.input_dim
    if order == 1:
        # one single-direction pass per coordinate keeps tangent axes aligned
        q, dq = None, []
        for k in range(d):
            e = np.zeros_like(x)
            e[..., k] = 1.0
            out = forward(model, theta, dc.Dual(x, e))
            if q is None:
                q = out.val
            dq.append(out.tan)
        return q, dq, None
    q, dq, d2q = None, [], []
    for k in range(d):
        e = np.zeros_like(x)
        e[..., k] = 1.0
        out = forward(model, theta, dc.Dual2(x, e, np.zeros_like(x)))
        if q is None:
            q = out.val
        dq.append(out.d1)
        d2q.append(out.d2)
    return q, dq, d2q


# ---------------------------------------------------------------------------
# Hyper-network and beliefs
# ---------------------------------------------------------------------------


def softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


@dataclass
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)
        p = self.mean.shape[0]
        if self.cov.shape != (p, p):
            raise ValueError(f"covariance must be {p}x{p}")
        if not np.allclose(self.cov, self.cov.T, rtol=1e-10, atol=1e-14):
            raise ValueError("covariance must be symmetric")

    @property
    def p(self):
        return self.mean.shape[0]


HYPER_ACTIVATIONS = ("relu", "sigmoid", "relu")


@dataclass
class HyperNet:
    """Fully connected ``(t, mu) -> [mean, eta]`` with ``2p`` outputs.

    Inputs are affinely mapped to ``[-1, 1]`` with the fixed training-domain
    bounds ``in_lo``/``in_hi`` before the first layer.
    """

    weights: list
    biases: list
    in_lo: np.ndarray = field(default_factory=lambda: np.zeros(2))
    in_hi: np.ndarray = field(default_factory=lambda: np.ones(2))

    @property
    def p(self):
        return self.biases[-1].shape[0] // 2

    def arrays(self):
        out = {"in_lo": np.asarray(self.in_lo, float),
               "in_hi": np.asarray(self.in_hi, float)}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"hyper{i}.W"] = W
            out[f"hyper{i}.b"] = b
        return out

    @classmethod
    def from_arrays(cls, arrays):
        n = sum(1 for k in arrays if k.startswith("hyper") and k.endswith(".W"))
        return cls([np.asarray(arrays[f"hyper{i}.W"]) for i in range(n)],
                   [np.asarray(arrays[f"hyper{i}.b"]) for i in range(n)],
                   np.asarray(arrays["in_lo"]), np.asarray(arrays["in_hi"]))

    def scale_inputs(self, t, mu):
        z = np.stack(np.broadcast_arrays(np.asarray(t, float),
                                         np.asarray(mu, float)), axis=-1)
        lo, hi = np.asarray(self.in_lo), np.asarray(self.in_hi)
        span = np.where(hi > lo, hi - lo, 1.0)
        return 2.0 * (z - lo) / span - 1.0


def init_hypernet(p, width=64, n_layers=4, t_range=(0.0, 1.0),
                  mu_range=(0.0, 1.0), init_std=0.1, rng=None):
    rng = np.random.default_rng(rng)
    dims = [2] + [width] * (n_layers - 1) + [2 * p]
    weights, biases = [], []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        s = 1.0 / np.sqrt(a)
        if i == len(dims) - 2:
            s *= 0.01
        weights.append(rng.uniform(-s, s, (b, a)))
        biases.append(np.zeros(b))
    biases[-1][p:] = softplus_inv(init_std)
    return HyperNet(weights, biases,
                    np.array([t_range[0], mu_range[0]], float),
                    np.array([t_range[1], mu_range[1]], float))


def hyper_network(weights, biases, z):
    """Raw hyper-network on scaled inputs ``z``; works on tape variables."""
    y = z
    for W, b, act in zip(weights[:-1], biases[:-1], HYPER_ACTIVATIONS):
        y = dc.relu(y @ W.T + b) if act == "relu" else dc.sigmoid(y @ W.T + b)
    return y @ weights[-1].T + biases[-1]


def hyper_outputs(h, t, mu):
    """``(mean, eta)`` arrays for broadcastable ``t`` and ``mu``."""
    out = hyper_network(h.weights, h.biases, h.scale_inputs(t, mu))
    return out[..., :h.p], out[..., h.p:]


def hyper_eval(h, t, mu):
    """Gaussian belief with diagonal covariance ``softplus(eta)^2``."""
    mean, eta = hyper_outputs(h, float(t), float(mu))
    return GaussianBelief(mean, np.diag(dc.softplus(eta) ** 2))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model, hyper=None, extra=None):
    arrays = dict(model.arrays())
    manifest = {"version": 1, "model": model.manifest(),
                "hyper": None if hyper is None else {
                    "n_layers": len(hyper.weights), "p": hyper.p,
                    "width": hyper.weights[0].shape[0],
                    "activations": list(HYPER_ACTIVATIONS) + ["linear"]}}
    if extra:
        manifest["extra"] = extra
    if hyper is not None:
        arrays.update(hyper.arrays())
    return formats.write_checkpoint(path, manifest, arrays)


def load_checkpoint(path):
    """Return ``(model, hyper, extra)``; ``hyper`` is None if absent."""
    manifest, arrays = formats.read_checkpoint(path)
    m = manifest["model"]
    model = ColoraModel.from_arrays(arrays, m["n_layers"], m["activation"])
    hyper = HyperNet.from_arrays(arrays) if manifest["hyper"] else None
    return model, hyper, manifest.get("extra", {})
