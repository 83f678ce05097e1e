"""
Fully connected autoencoder with an optional kernel-alignment code loss.

Hidden layers (code layer included) use the logistic sigmoid; the output
layer is linear. Training minimizes

    L = (1 - lam) * L_r + lam * L_c

where ``L_r`` is the per-element mean squared reconstruction error and
``L_c = || C/||C||_F - K/||K||_F ||_F`` compares the Gram matrix of the
mini-batch codes with the matching block of a prior kernel. Gradients are
computed by hand (no autodiff) and checked against finite differences in
the test suite.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DataFormatError, NumericalError
from .mts import atomic_write_text

logger = logging.getLogger(__name__)

__all__ = [
    "Autoencoder",
    "TrainConfig",
    "TrainHistory",
    "init_network",
    "encode",
    "decode",
    "reconstruction_loss",
    "code_loss",
    "total_loss",
    "gradients",
    "train",
]


def sigmoid(z):
    # tanh form: one ufunc call, no overflow for large |z|
    return 0.5 + 0.5 * np.tanh(0.5 * z)


@dataclass(eq=False)
class Autoencoder:
    layer_sizes: list[int]
    weights: list[np.ndarray]  # layer l maps sizes[l] -> sizes[l+1]; shape (in, out)
    biases: list[np.ndarray]

    hidden_activation = "sigmoid"
    output_activation = "linear"

    def __post_init__(self):
        _check_sizes(self.layer_sizes)
        self.layer_sizes = [int(s) for s in self.layer_sizes]
        if len(self.weights) != len(self.layer_sizes) - 1:
            raise ValueError("one weight matrix per layer transition expected")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_sizes[l], self.layer_sizes[l + 1])
            if W.shape != shape or b.shape != (shape[1],):
                raise ValueError(f"layer {l}: expected W{shape}, b({shape[1]},)")

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def n_encoder_layers(self):
        return self.n_layers // 2

    @property
    def input_dim(self):
        return self.layer_sizes[0]

    @property
    def code_dim(self):
        return self.layer_sizes[self.n_encoder_layers]

    @property
    def encoder_params(self):
        k = self.n_encoder_layers
        return self.weights[:k], self.biases[:k]

    @property
    def decoder_params(self):
        k = self.n_encoder_layers
        return self.weights[k:], self.biases[k:]

    def copy(self):
        return Autoencoder(list(self.layer_sizes), [W.copy() for W in self.weights],
                           [b.copy() for b in self.biases])

    def params(self):
        return self.weights + self.biases

    def to_dict(self):
        return {
            "layer_sizes": self.layer_sizes,
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["layer_sizes"]),
                   [np.asarray(W, dtype=np.float64).reshape(a, b) for W, a, b in
                    zip(d["weights"], d["layer_sizes"][:-1], d["layer_sizes"][1:])],
                   [np.asarray(b, dtype=np.float64) for b in d["biases"]])

    def save(self, path, train_config=None):
        doc = self.to_dict()
        if train_config is not None:
            doc["train_config"] = asdict(train_config)
        atomic_write_text(path, json.dumps(doc))

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_dict(json.load(fh))
        except FileNotFoundError:
            raise DataFormatError(f"checkpoint not found: {path}") from None
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"{path}: malformed checkpoint ({exc})") from None


def _check_sizes(sizes):
    sizes = list(sizes)
    if len(sizes) < 3 or len(sizes) % 2 == 0:
        raise ValueError(f"layer sizes must be an odd-length list of >= 3 entries, got {sizes}")
    if sizes != sizes[::-1]:
        raise ValueError(f"layer sizes must be symmetric around the code layer, got {sizes}")
    if any(s < 1 for s in sizes):
        raise ValueError("layer sizes must be positive")
    if sizes[len(sizes) // 2] >= sizes[0]:
        raise ValueError("code layer must be narrower than the input")


def mirrored_sizes(input_dim, hidden):
    """``[d_in, *hidden]`` mirrored into a full encoder-decoder layer list."""
    enc = [int(input_dim)] + [int(h) for h in hidden]
    return enc + enc[-2::-1]


def init_network(layer_sizes, seed=0):
    """Uniform(-a, a) weights with a = sqrt(6 / (fan_in + fan_out)); zero biases."""
    _check_sizes(layer_sizes)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-a, a, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Autoencoder(list(layer_sizes), weights, biases)


# --------------------------------------------------------------------------
# Forward pass
# --------------------------------------------------------------------------

def _check_input(X, dim, what):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != dim:
        raise ValueError(f"{what}: expected N x {dim} matrix, got shape {X.shape}")
    return X


def _forward(ae, X):
    """Activations of every layer, input first."""
    acts = [X]
    h = X
    last = ae.n_layers - 1
    for l, (W, b) in enumerate(zip(ae.weights, ae.biases)):
        z = h @ W + b
        h = z if l == last else sigmoid(z)
        acts.append(h)
    return acts


def encode(ae, X):
    h = _check_input(X, ae.input_dim, "encode")
    for W, b in zip(*ae.encoder_params):
        h = sigmoid(h @ W + b)
    return h


def decode(ae, codes):
    h = _check_input(codes, ae.code_dim, "decode")
    Ws, bs = ae.decoder_params
    for l, (W, b) in enumerate(zip(Ws, bs)):
        z = h @ W + b
        h = z if l == len(Ws) - 1 else sigmoid(z)
    return h


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------

def reconstruction_loss(X, X_rec):
    """Mean over samples and dimensions of the squared error."""
    X, X_rec = np.asarray(X, dtype=np.float64), np.asarray(X_rec, dtype=np.float64)
    if X.shape != X_rec.shape:
        raise ValueError(f"shape mismatch {X.shape} vs {X_rec.shape}")
    return float(np.mean((X - X_rec) ** 2))


def _normalized(M):
    norm = np.linalg.norm(M)
    return (M / norm if norm > 0 else np.zeros_like(M)), norm


def _check_kernel_block(K, n):
    K = np.asarray(K, dtype=np.float64)
    if K.shape != (n, n):
        raise ValueError(f"kernel block must be {n} x {n}, got {K.shape}")
    if np.max(np.abs(K - K.T), initial=0.0) > 1e-9:
        raise ValueError("kernel block is not symmetric")
    return K


def code_loss(codes, K):
    """Normalized Frobenius distance between the code Gram matrix and ``K``."""
    codes = np.asarray(codes, dtype=np.float64)
    if codes.shape[0] < 2:
        raise ValueError("code loss needs at least 2 samples")
    K = _check_kernel_block(K, codes.shape[0])
    return _code_loss(codes, K)


def _code_loss(codes, K):
    A, _ = _normalized(codes @ codes.T)
    B, _ = _normalized(K)
    return float(np.linalg.norm(A - B))


def total_loss(X, X_rec, codes, K, lam):
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    lr = reconstruction_loss(X, X_rec)
    lc = code_loss(codes, K) if lam > 0 else 0.0
    return (1.0 - lam) * lr + lam * lc


def _code_loss_grad(codes, K):
    """L_c and dL_c/dcodes."""
    C = codes @ codes.T
    A, c_norm = _normalized(C)
    B, _ = _normalized(K)
    D = A - B
    lc = np.linalg.norm(D)
    if lc == 0 or c_norm == 0:
        return float(lc), np.zeros_like(codes)
    gA = D / lc
    gC = (gA - A * np.sum(gA * A)) / c_norm
    return float(lc), (gC + gC.T) @ codes


# --------------------------------------------------------------------------
# Backpropagation
# --------------------------------------------------------------------------

@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def params(self):
        return self.weights + self.biases


def loss_and_gradients(ae, X, K, lam, check=True):
    """Total loss, its parts ``(L_r, L_c)`` and analytic gradients on a batch."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if check:
        X = _check_input(X, ae.input_dim, "gradients")
    n = X.shape[0]
    acts = _forward(ae, X)
    X_rec = acts[-1]
    lr = float(np.mean((X_rec - X) ** 2))

    grad_out = (1.0 - lam) * 2.0 * (X_rec - X) / X.size
    lc = 0.0
    k_code = ae.n_encoder_layers
    code_grad = None
    if lam > 0:
        if n < 2:
            raise ValueError("batches must hold >= 2 samples when lambda > 0")
        if check:
            K = _check_kernel_block(K, n)
        lc, dcodes = _code_loss_grad(acts[k_code], K)
        code_grad = lam * dcodes

    dWs = [None] * ae.n_layers
    dbs = [None] * ae.n_layers
    delta = grad_out  # dL/dz of the linear output layer
    for l in range(ae.n_layers - 1, -1, -1):
        dWs[l] = acts[l].T @ delta
        dbs[l] = delta.sum(axis=0)
        if l == 0:
            break
        da = delta @ ae.weights[l].T
        if l == k_code and code_grad is not None:
            da = da + code_grad
        h = acts[l]
        delta = da * h * (1.0 - h)
    loss = (1.0 - lam) * lr + lam * lc
    return loss, (lr, lc), Gradients(dWs, dbs)


def gradients(ae, X, K, lam):
    """Exact gradients of the total loss w.r.t. every weight and bias."""
    return loss_and_gradients(ae, X, K, lam)[2]


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.5
    batch_size: int = 32
    epochs: int = 500
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.batch_size < 1 or (self.lam > 0 and self.batch_size < 2):
            raise ValueError("batch_size must be >= 2 when lambda > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    recon: list[float] = field(default_factory=list)
    code: list[float] = field(default_factory=list)
    initial_loss: float | None = None
    val_recon: float | None = None

    def to_csv(self):
        lines = ["epoch,loss,recon,code"]
        for e, (a, b, c) in enumerate(zip(self.loss, self.recon, self.code)):
            lines.append(f"{e},{a!r},{b!r},{c!r}")
        return "\n".join(lines) + "\n"


class Adam:
    def __init__(self, params, lr, beta1, beta2, eps):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    n_batches = max(1, -(-n // batch_size))
    return np.array_split(order, n_batches)


def _full_losses(ae, X, K, lam):
    acts = _forward(ae, X)
    lr = float(np.mean((acts[-1] - X) ** 2))
    lc = _code_loss(acts[ae.n_encoder_layers], K) if K is not None else 0.0
    return (1.0 - lam) * lr + lam * lc, lr, lc


def train(ae, X, K, cfg, X_val=None, batch_hook=None):
    """Mini-batch Adam training; returns a new trained network and its history.

    For batch ``m`` the code loss compares that batch's code Gram matrix with
    ``K[idx][:, idx]`` (batch order). ``K`` is never read when ``cfg.lam == 0``
    except for the logged per-epoch ``L_c``. ``batch_hook(epoch, idx, K_batch)``
    is called for every batch, for instrumentation.
    """
    X = _check_input(X, ae.input_dim, "train")
    n = X.shape[0]
    if K is not None:
        K = np.asarray(K, dtype=np.float64)
        if K.shape != (n, n):
            raise ValueError(f"prior kernel must be {n} x {n}, got {K.shape}")
        K = _check_kernel_block(K, n)
    if cfg.lam > 0 and K is None:
        raise ValueError("lambda > 0 requires a prior kernel")

    net = ae.copy()
    params = net.params()
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    history = TrainHistory(initial_loss=_full_losses(net, X, K, cfg.lam)[0])

    # overflow is expected when the step size diverges; it is caught below
    with np.errstate(over="ignore", invalid="ignore"):
        return _train_loop(net, params, opt, rng, X, K, cfg, history, X_val, batch_hook)


def _train_loop(net, params, opt, rng, X, K, cfg, history, X_val, batch_hook):
    n = X.shape[0]
    for epoch in range(cfg.epochs):
        for idx in _batches(n, cfg.batch_size, rng):
            Kb = K[np.ix_(idx, idx)] if cfg.lam > 0 else None
            if batch_hook is not None:
                batch_hook(epoch, idx, Kb)
            loss, _, grads = loss_and_gradients(net, X[idx], Kb, cfg.lam, check=False)
            if not np.isfinite(loss):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}; try a smaller learning rate "
                    f"(current {cfg.learning_rate})")
            opt.step(params, grads.params())
        total, lr, lc = _full_losses(net, X, K, cfg.lam)
        if not np.isfinite(total):
            raise NumericalError(
                f"non-finite training loss after epoch {epoch}; try a smaller learning rate "
                f"(current {cfg.learning_rate})")
        history.loss.append(total)
        history.recon.append(lr)
        history.code.append(lc)

    if X_val is not None:
        X_val = _check_input(X_val, net.input_dim, "validation")
        history.val_recon = reconstruction_loss(X_val, _forward(net, X_val)[-1])
    return net, history
