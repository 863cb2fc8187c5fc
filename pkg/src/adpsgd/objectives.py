"""Toy training tasks: a noisy quadratic, L2-regularised logistic regression,
and a one-hidden-layer tanh network.

Every objective evaluates loss and gradient on a :class:`SampleBatch` of
indices into its :class:`Dataset`.  Batches are drawn with replacement from
the training split, matching the i.i.d. sampling model of decentralized SGD.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import InvalidStateError

LOGISTIC_L2 = 1e-4


@dataclass(frozen=True)
class SampleBatch:
    indices: np.ndarray

    @property
    def size(self) -> int:
        return len(self.indices)


@dataclass
class Dataset:
    features: np.ndarray
    targets: np.ndarray
    train_index: np.ndarray
    heldout_index: np.ndarray
    spec: dict = field(default_factory=dict)

    @property
    def n_train(self) -> int:
        return len(self.train_index)

    def train_batch(self) -> SampleBatch:
        return SampleBatch(self.train_index)

    def heldout_batch(self) -> SampleBatch:
        return SampleBatch(self.heldout_index)


@dataclass
class Objective:
    """Loss and gradient over batches of a fixed dataset.

    ``mu`` and ``sigma`` are reported where they are known analytically, for
    use with :func:`adpsgd.mixing.adpsgd_rate_bound`.
    """

    name: str
    dimension: int
    dataset: Dataset
    _loss: Callable[[np.ndarray, np.ndarray], float]
    _grad: Callable[[np.ndarray, np.ndarray], np.ndarray]
    _heldout: Callable[[np.ndarray], float]
    init: Callable[[np.random.Generator], np.ndarray]
    optimum: Optional[np.ndarray] = None
    mu: Optional[float] = None
    sigma: Optional[float] = None
    hessian: Optional[np.ndarray] = None
    accuracy: Optional[Callable[..., float]] = None

    def loss(self, w: np.ndarray, batch: SampleBatch) -> float:
        return self._loss(w, batch.indices)

    def gradient(self, w: np.ndarray, batch: SampleBatch) -> np.ndarray:
        return self._grad(w, batch.indices)

    def heldout_loss(self, w: np.ndarray) -> float:
        return self._heldout(w)

    def train_loss(self, w: np.ndarray) -> float:
        return self._loss(w, self.dataset.train_index)


def _split(n: int, heldout_fraction: float, rng: np.random.Generator):
    order = rng.permutation(n)
    n_held = max(1, int(round(n * heldout_fraction)))
    return np.sort(order[n_held:]), np.sort(order[:n_held])


def sample_batch(ds: Dataset, M: int, rng: np.random.Generator) -> SampleBatch:
    """``M`` training indices drawn uniformly with replacement."""
    if M < 1:
        raise ValueError(f"batch size must be >= 1, got {M}")
    if ds.n_train == 0:
        raise InvalidStateError("cannot sample from an empty training split")
    return SampleBatch(ds.train_index[rng.integers(0, ds.n_train, size=M)])


def make_quadratic(
    D: int,
    condition_number: float,
    noise_sigma: float,
    seed: int,
    N: int = 4096,
    heldout_fraction: float = 0.1,
):
    """Quadratic bowl ``0.5 (w - w*)^T A (w - w*)`` with additive gradient noise.

    Each sample carries a noise vector ``xi`` and contributes
    ``0.5 (w-w*)^T A (w-w*) + xi^T (w - w*)``, so a batch gradient is
    ``A (w - w*) + mean(xi)``.  The noise vectors are centred over the training
    split, which keeps ``w*`` the exact minimiser of the empirical loss.
    Heldout loss is the noise-free bowl.
    """
    if D < 1 or condition_number < 1 or noise_sigma < 0:
        raise ValueError("need D >= 1, condition_number >= 1, noise_sigma >= 0")
    rng = np.random.default_rng(seed)
    eigs = np.geomspace(1.0, condition_number, D)
    q, _ = np.linalg.qr(rng.standard_normal((D, D)))
    a = (q * eigs) @ q.T
    a = 0.5 * (a + a.T)
    w_star = rng.standard_normal(D)
    train, held = _split(N, heldout_fraction, rng)
    xi = noise_sigma * rng.standard_normal((N, D))
    xi[train] -= xi[train].mean(axis=0)
    ds = Dataset(
        xi,
        np.zeros(N),
        train,
        held,
        dict(kind="quadratic", D=D, condition_number=condition_number, noise_sigma=noise_sigma, seed=seed, N=N),
    )

    def bowl(w):
        d = w - w_star
        return 0.5 * float(d @ a @ d)

    def loss(w, idx):
        return bowl(w) + float(xi[idx].mean(axis=0) @ (w - w_star))

    def grad(w, idx):
        return a @ (w - w_star) + xi[idx].mean(axis=0)

    def init(rng):
        return np.zeros(D)

    obj = Objective(
        "quadratic",
        D,
        ds,
        loss,
        grad,
        bowl,
        init,
        optimum=w_star.copy(),
        mu=float(np.linalg.eigvalsh(a)[-1]),
        sigma=float(noise_sigma),
        hessian=a,
    )
    return obj, ds


def make_logistic(D: int, N: int, seed: int, heldout_fraction: float = 0.2, label_noise: float = 0.05):
    """Binary logistic regression on a noisy linearly separable problem."""
    if D < 1 or N < 10:
        raise ValueError("need D >= 1 and N >= 10")
    rng = np.random.default_rng(seed)
    w_true = rng.standard_normal(D)
    x = rng.standard_normal((N, D))
    y = (x @ w_true > 0).astype(float)
    flip = rng.random(N) < label_noise
    y[flip] = 1.0 - y[flip]
    train, held = _split(N, heldout_fraction, rng)
    ds = Dataset(x, y, train, held, dict(kind="logistic", D=D, N=N, seed=seed))
    sign = 2.0 * y - 1.0

    def loss(w, idx):
        margins = sign[idx] * (x[idx] @ w)
        return float(np.mean(np.logaddexp(0.0, -margins))) + 0.5 * LOGISTIC_L2 * float(w @ w)

    def grad(w, idx):
        margins = sign[idx] * (x[idx] @ w)
        # d/dm log(1 + e^{-m}) = -sigmoid(-m)
        coef = -sign[idx] * _sigmoid(-margins)
        return x[idx].T @ coef / len(idx) + LOGISTIC_L2 * w

    def init(rng):
        return np.zeros(D)

    return Objective("logistic", D, ds, loss, grad, lambda w: loss(w, held), init), ds


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class MLPShapes:
    def __init__(self, d_in, hidden, classes):
        self.d_in, self.hidden, self.classes = d_in, hidden, classes
        self.sizes = [hidden * d_in, hidden, classes * hidden, classes]
        self.dimension = sum(self.sizes)

    def unpack(self, w):
        o = np.cumsum([0] + self.sizes)
        w1 = w[o[0] : o[1]].reshape(self.hidden, self.d_in)
        b1 = w[o[1] : o[2]]
        w2 = w[o[2] : o[3]].reshape(self.classes, self.hidden)
        b2 = w[o[3] : o[4]]
        return w1, b1, w2, b2

    def pack(self, w1, b1, w2, b2):
        return np.concatenate([w1.ravel(), b1, w2.ravel(), b2])


def make_mlp(
    D_in: int,
    H: int,
    classes: int,
    N: int,
    seed: int,
    separation: float = 4.0,
    heldout_fraction: float = 0.2,
    init_scale: float = 0.5,
):
    """Tanh MLP with softmax cross-entropy on Gaussian clusters, one per class."""
    if min(D_in, H, classes, N) < 1:
        raise ValueError("all MLP dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    centers = separation * rng.standard_normal((classes, D_in)) / np.sqrt(D_in)
    y = rng.integers(0, classes, size=N)
    x = centers[y] + rng.standard_normal((N, D_in))
    train, held = _split(N, heldout_fraction, rng)
    ds = Dataset(x, y.astype(float), train, held, dict(kind="mlp", D_in=D_in, H=H, classes=classes, N=N, seed=seed))
    shapes = MLPShapes(D_in, H, classes)
    yi = y.astype(np.int64)

    def forward(w, idx):
        w1, b1, w2, b2 = shapes.unpack(w)
        h = np.tanh(x[idx] @ w1.T + b1)
        logits = h @ w2.T + b2
        logits = logits - logits.max(axis=1, keepdims=True)
        logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        return h, logp

    def loss(w, idx):
        _, logp = forward(w, idx)
        return float(-np.mean(logp[np.arange(len(idx)), yi[idx]]))

    def grad(w, idx):
        w1, b1, w2, b2 = shapes.unpack(w)
        h, logp = forward(w, idx)
        n = len(idx)
        dlogits = np.exp(logp)
        dlogits[np.arange(n), yi[idx]] -= 1.0
        dlogits /= n
        gw2 = dlogits.T @ h
        gb2 = dlogits.sum(axis=0)
        dh = (dlogits @ w2) * (1.0 - h * h)
        gw1 = dh.T @ x[idx]
        gb1 = dh.sum(axis=0)
        return shapes.pack(gw1, gb1, gw2, gb2)

    def init(rng):
        w1 = init_scale * rng.standard_normal((H, D_in)) / np.sqrt(D_in)
        w2 = init_scale * rng.standard_normal((classes, H)) / np.sqrt(H)
        return shapes.pack(w1, np.zeros(H), w2, np.zeros(classes))

    def accuracy(w, idx=None):
        idx = train if idx is None else idx
        _, logp = forward(w, idx)
        return float(np.mean(logp.argmax(axis=1) == yi[idx]))

    obj = Objective("mlp", shapes.dimension, ds, loss, grad, lambda w: loss(w, held), init, accuracy=accuracy)
    return obj, ds


def finite_difference_gradient(f: Callable[[np.ndarray], float], w: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of ``f`` at ``w``."""
    g = np.zeros_like(w)
    for j in range(len(w)):
        e = np.zeros_like(w)
        e[j] = eps
        g[j] = (f(w + e) - f(w - e)) / (2 * eps)
    return g


def gradient_check(obj: Objective, points: int, rng: np.random.Generator, batch_size: int = 16, scale: float = 1.0) -> float:
    """Worst relative error between analytic and central-difference gradients."""
    worst = 0.0
    for _ in range(points):
        w = scale * rng.standard_normal(obj.dimension)
        batch = sample_batch(obj.dataset, batch_size, rng)
        g = obj.gradient(w, batch)
        fd = finite_difference_gradient(lambda v: obj.loss(v, batch), w)
        rel = np.linalg.norm(g - fd) / max(np.linalg.norm(g), np.linalg.norm(fd), 1e-12)
        worst = max(worst, float(rel))
    return worst


def build_objective(spec: dict):
    """Construct an objective from a flat spec dict (as parsed from a run config)."""
    kind = spec["kind"]
    if kind == "quadratic":
        return make_quadratic(
            int(spec["D"]),
            float(spec["condition_number"]),
            float(spec["noise_sigma"]),
            int(spec["data_seed"]),
            N=int(spec["N"]),
            heldout_fraction=float(spec["heldout_fraction"]),
        )
    if kind == "logistic":
        return make_logistic(int(spec["D"]), int(spec["N"]), int(spec["data_seed"]), heldout_fraction=float(spec["heldout_fraction"]))
    if kind == "mlp":
        return make_mlp(
            int(spec["D_in"]),
            int(spec["H"]),
            int(spec["classes"]),
            int(spec["N"]),
            int(spec["data_seed"]),
            separation=float(spec["separation"]),
            heldout_fraction=float(spec["heldout_fraction"]),
            init_scale=float(spec["init_scale"]),
        )
    raise ValueError(f"unknown objective kind {kind!r}")
