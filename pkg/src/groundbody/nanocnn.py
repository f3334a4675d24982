"""Small LeNet-style binary classifier written directly in numpy.

Layout: conv(k1) -> ReLU -> maxpool 2 -> conv(k2) -> ReLU -> maxpool 2 ->
FC(hidden) -> ReLU -> FC(2) -> softmax. Valid convolutions, stride 1.
Class 0 is "casualty", class 1 "non-casualty".
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateDataset, LengthMismatch, ShapeError

CLASSES = ("casualty", "non-casualty")
PARAM_ORDER = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b")
FORMAT = "groundbody-cnn"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class Arch:
    size: int = 28
    c1: int = 8
    k1: int = 5
    c2: int = 16
    k2: int = 5
    hidden: int = 128
    classes: int = 2

    def feature_side(self) -> int:
        s = (self.size - self.k1 + 1) // 2
        return (s - self.k2 + 1) // 2

    def shapes(self) -> dict:
        f = self.feature_side()
        if f < 1:
            raise ShapeError(f"architecture {self} collapses the {self.size}px input")
        return {
            "conv1_w": (self.c1, 1, self.k1, self.k1), "conv1_b": (self.c1,),
            "conv2_w": (self.c2, self.c1, self.k2, self.k2), "conv2_b": (self.c2,),
            "fc1_w": (self.hidden, self.c2 * f * f), "fc1_b": (self.hidden,),
            "fc2_w": (self.classes, self.hidden), "fc2_b": (self.classes,),
        }


@dataclass
class CnnModel:
    params: dict
    arch: Arch = field(default_factory=Arch)

    @classmethod
    def init(cls, seed: int = 0, arch: Arch = Arch()) -> "CnnModel":
        """Fan-in scaled uniform weights (He-uniform bound), zero biases."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in arch.shapes().items():
            if name.endswith("_b"):
                params[name] = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:]))
                bound = np.sqrt(6.0 / fan_in)
                params[name] = rng.uniform(-bound, bound, size=shape)
        return cls(params, arch)

    @classmethod
    def zeros(cls, arch: Arch = Arch()) -> "CnnModel":
        return cls({k: np.zeros(s) for k, s in arch.shapes().items()}, arch)

    def copy(self) -> "CnnModel":
        return CnnModel({k: v.copy() for k, v in self.params.items()}, self.arch)

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    # ------------------------------------------------------------------ I/O
    def to_bytes(self, hyperparameters: dict | None = None) -> bytes:
        header = {
            "format": FORMAT,
            "version": FORMAT_VERSION,
            "arch": asdict(self.arch),
            "order": list(PARAM_ORDER),
            "shapes": {k: list(self.params[k].shape) for k in PARAM_ORDER},
            "dtype": "<f4",
            "hyperparameters": hyperparameters or {},
        }
        blob = b"".join(self.params[k].astype("<f4").tobytes() for k in PARAM_ORDER)
        head = json.dumps(header).encode()
        return struct.pack("<I", len(head)) + head + blob

    @classmethod
    def from_bytes(cls, data: bytes) -> "CnnModel":
        (n,) = struct.unpack_from("<I", data)
        header = json.loads(data[4:4 + n])
        if header.get("format") != FORMAT or header.get("version") != FORMAT_VERSION:
            raise ValueError("not a groundbody-cnn v1 model file")
        arch = Arch(**header["arch"])
        offset = 4 + n
        params = {}
        for k in header["order"]:
            shape = tuple(header["shapes"][k])
            count = int(np.prod(shape))
            params[k] = np.frombuffer(data, "<f4", count, offset).astype(np.float64).reshape(shape)
            offset += 4 * count
        if offset != len(data):
            raise ValueError("trailing bytes after parameter blob")
        return cls(params, arch)

    @staticmethod
    def read_header(data: bytes) -> dict:
        (n,) = struct.unpack_from("<I", data)
        return json.loads(data[4:4 + n])


# --------------------------------------------------------------------------- layers

def _conv_forward(x, w, b):
    n, c, h, _ = x.shape
    f, _, k, _ = w.shape
    ho = h - k + 1
    cols = sliding_window_view(x, (k, k), axis=(2, 3))  # n, c, ho, wo, k, k
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * ho, c * k * k)
    out = cols @ w.reshape(f, -1).T + b
    return out.reshape(n, ho, ho, f).transpose(0, 3, 1, 2), cols


def _conv_backward(dout, x, w, cols):
    n, c, h, _ = x.shape
    f, _, k, _ = w.shape
    ho = h - k + 1
    d = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (d.T @ cols).reshape(w.shape)
    db = d.sum(axis=0)
    dcols = (d @ w.reshape(f, -1)).reshape(n, ho, ho, c, k, k)
    dx = np.zeros_like(x)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + ho, j:j + ho] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx, dw, db


def maxpool_forward(x):
    """2x2 / stride 2 max-pool. Returns output and the flat argmax within each window."""
    n, c, h, w = x.shape
    win = x[:, :, :h // 2 * 2, :w // 2 * 2].reshape(n, c, h // 2, 2, w // 2, 2)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0], arg


def maxpool_backward(dout, arg, shape):
    """Route each pooled gradient to its window's argmax only."""
    n, c, h, w = shape
    dwin = np.zeros(dout.shape + (4,))
    np.put_along_axis(dwin, arg[..., None], dout[..., None], axis=-1)
    dwin = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(shape)
    dx[:, :, :h // 2 * 2, :w // 2 * 2] = dwin.reshape(n, c, h // 2 * 2, w // 2 * 2)
    return dx


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent_grad(logits, y):
    """Mean cross-entropy and its gradient w.r.t. the logits (softmax - onehot) / N."""
    p = softmax(logits)
    n = len(y)
    loss = -np.log(np.maximum(p[np.arange(n), y], 1e-300)).mean()
    g = p.copy()
    g[np.arange(n), y] -= 1.0
    return loss, g / n


# --------------------------------------------------------------------------- network

def _as_batch(x, size):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1:] != (1, size, size):
        raise ShapeError(f"expected {size}x{size} patches, got shape {np.shape(x)}")
    return x


def forward_logits(model: CnnModel, x, keep_cache: bool = False):
    p = model.params
    x = _as_batch(x, model.arch.size)
    z1, cols1 = _conv_forward(x, p["conv1_w"], p["conv1_b"])
    a1 = np.maximum(z1, 0)
    q1, arg1 = maxpool_forward(a1)
    z2, cols2 = _conv_forward(q1, p["conv2_w"], p["conv2_b"])
    a2 = np.maximum(z2, 0)
    q2, arg2 = maxpool_forward(a2)
    feat = q2.reshape(len(x), -1)
    z3 = feat @ p["fc1_w"].T + p["fc1_b"]
    a3 = np.maximum(z3, 0)
    logits = a3 @ p["fc2_w"].T + p["fc2_b"]
    if keep_cache:
        return logits, (x, z1, cols1, a1, q1, arg1, z2, cols2, a2, arg2, feat, z3, a3)
    return logits


def forward(model: CnnModel, patch) -> np.ndarray:
    """Class probabilities ``(casualty, non-casualty)`` for one patch or a batch."""
    single = np.ndim(patch) == 2
    probs = softmax(forward_logits(model, patch))
    return probs[0] if single else probs


def loss_and_grads(model: CnnModel, x, y):
    p = model.params
    y = np.asarray(y, dtype=np.int64)
    logits, cache = forward_logits(model, x, keep_cache=True)
    x, z1, cols1, a1, q1, arg1, z2, cols2, a2, arg2, feat, z3, a3 = cache
    loss, dlog = softmax_xent_grad(logits, y)
    g = {"fc2_w": dlog.T @ a3, "fc2_b": dlog.sum(axis=0)}
    dz3 = (dlog @ p["fc2_w"]) * (z3 > 0)
    g["fc1_w"] = dz3.T @ feat
    g["fc1_b"] = dz3.sum(axis=0)
    dq2 = (dz3 @ p["fc1_w"]).reshape(len(x), p["conv2_w"].shape[0], *arg2.shape[2:])
    dz2 = maxpool_backward(dq2, arg2, a2.shape) * (z2 > 0)
    dq1, g["conv2_w"], g["conv2_b"] = _conv_backward(dz2, q1, p["conv2_w"], cols2)
    dz1 = maxpool_backward(dq1, arg1, a1.shape) * (z1 > 0)
    _, g["conv1_w"], g["conv1_b"] = _conv_backward(dz1, x, p["conv1_w"], cols1)
    return loss, g


def batch_loss(model: CnnModel, x, y) -> float:
    return softmax_xent_grad(forward_logits(model, x), np.asarray(y))[0]


def _tail_losses(z3, fc2_w, fc2_b, y):
    """Losses and hidden activation patterns for a stack of hidden pre-activations (P, N, H)."""
    a3 = np.maximum(z3, 0)
    logits = a3 @ fc2_w.T + fc2_b
    logits = logits - logits.max(axis=-1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=-1, keepdims=True))
    return -logp[:, np.arange(len(y)), y].mean(axis=1), z3 > 0


def _loss_pattern(p, y, x=None, q1=None):
    """Loss plus every ReLU sign / pool argmax decision taken on the way."""
    pattern = []
    if x is not None:
        z1, _ = _conv_forward(x, p["conv1_w"], p["conv1_b"])
        q1, arg1 = maxpool_forward(np.maximum(z1, 0))
        pattern += [z1 > 0, arg1]
    z2, _ = _conv_forward(q1, p["conv2_w"], p["conv2_b"])
    q2, arg2 = maxpool_forward(np.maximum(z2, 0))
    z3 = q2.reshape(len(y), -1) @ p["fc1_w"].T + p["fc1_b"]
    loss, signs = _tail_losses(z3[None], p["fc2_w"], p["fc2_b"], y)
    return loss[0], pattern + [z2 > 0, arg2, signs[0]]


def _same(a, b):
    return all(np.array_equal(u, v) for u, v in zip(a, b))


def gradient_check(model: CnnModel, batch, epsilon: float = 1e-4, min_epsilon: float = 1e-9,
                   floor: float = 1e-6):
    """Max relative error between backprop and central differences over every parameter.

    ``batch`` is ``(patches, labels)``. Each parameter is perturbed by
    ``+-epsilon`` and the loss re-evaluated from the first layer the
    parameter touches. When the two evaluations take different ReLU/max-pool
    branches the loss is not differentiable inside the interval, so epsilon is
    shrunk tenfold for that parameter (down to ``min_epsilon``). Relative
    error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps gradients
    that are zero (dead units) or below the central-difference rounding noise
    (~1e-12 at epsilon 1e-4) from dividing by ~0.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x, y = batch
    x = _as_batch(x, model.arch.size)
    y = np.asarray(y, dtype=np.int64)
    _, analytic = loss_and_grads(model, x, y)
    p = {k: v.copy() for k, v in model.params.items()}
    _, cache = forward_logits(model, x, keep_cache=True)
    q1, feat, z3 = cache[4], cache[10], cache[11]

    def rel(a, n):
        return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)

    def scalar_fd(name, i, start_from_x):
        w = p[name].reshape(-1)
        old = w[i]
        eps = epsilon
        while True:
            w[i] = old + eps
            lp, pp = _loss_pattern(p, y, x if start_from_x else None, None if start_from_x else q1)
            w[i] = old - eps
            lm, pm = _loss_pattern(p, y, x if start_from_x else None, None if start_from_x else q1)
            w[i] = old
            if _same(pp, pm) or eps / 10 < min_epsilon:
                return (lp - lm) / (2 * eps)
            eps /= 10

    worst = 0.0
    # conv layers: one perturbation at a time
    for name, from_x in (("conv1_w", True), ("conv1_b", True), ("conv2_w", False), ("conv2_b", False)):
        a = analytic[name].reshape(-1)
        for i in range(a.size):
            worst = max(worst, float(rel(a[i], scalar_fd(name, i, from_x))))

    # fc2: the hidden activations are fixed, perturb one weight at a time
    for name in ("fc2_w", "fc2_b"):
        a = analytic[name].reshape(-1)
        w = p[name].reshape(-1)
        for k in range(a.size):
            old = w[k]
            w[k] = old + epsilon
            lp = _tail_losses(z3[None], p["fc2_w"], p["fc2_b"], y)[0][0]
            w[k] = old - epsilon
            lm = _tail_losses(z3[None], p["fc2_w"], p["fc2_b"], y)[0][0]
            w[k] = old
            worst = max(worst, float(rel(a[k], (lp - lm) / (2 * epsilon))))

    # fc1: a perturbation of row i only moves hidden unit i, so all the
    # perturbations of one row are evaluated together as a stack
    nin = feat.shape[1]
    for i in range(z3.shape[1]):
        shifts = np.vstack([feat.T, np.ones((1, len(y)))])  # weights of row i, then bias i
        stack = np.repeat(z3[None], nin + 1, axis=0)
        up, down = stack.copy(), stack
        up[:, :, i] += epsilon * shifts
        down[:, :, i] -= epsilon * shifts
        lp, sp = _tail_losses(up, p["fc2_w"], p["fc2_b"], y)
        lm, sm = _tail_losses(down, p["fc2_w"], p["fc2_b"], y)
        num = (lp - lm) / (2 * epsilon)
        for j in np.flatnonzero((sp != sm).any(axis=(1, 2))):
            num[j] = scalar_fd("fc1_w", i * nin + j, False) if j < nin else scalar_fd("fc1_b", i, False)
        worst = max(worst, float(rel(analytic["fc1_w"][i], num[:nin]).max()))
        worst = max(worst, float(rel(analytic["fc1_b"][i], num[nin])))
    return worst


# --------------------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    balance: bool = True

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


def _class_index(labels) -> np.ndarray:
    out = []
    for v in labels:
        if isinstance(v, str):
            out.append(CLASSES.index(v))
        else:
            out.append(int(v))
    return np.asarray(out, dtype=np.int64)


def balance_classes(y, rng) -> np.ndarray:
    """Indices that down-sample the majority class to the minority count."""
    idx0, idx1 = np.flatnonzero(y == 0), np.flatnonzero(y == 1)
    k = min(len(idx0), len(idx1))
    keep = np.concatenate([rng.choice(idx0, k, replace=False) if len(idx0) > k else idx0,
                           rng.choice(idx1, k, replace=False) if len(idx1) > k else idx1])
    return np.sort(keep)


def train(model: CnnModel, patches, labels, config: TrainConfig = TrainConfig()):
    """Mini-batch SGD with momentum on cross-entropy.

    ``patches`` are (N, 28, 28) values in [0, 1]. Returns the trained copy
    and the per-epoch mean loss.
    """
    x = _as_batch(patches, model.arch.size)
    y = _class_index(labels)
    if len(x) != len(y):
        raise LengthMismatch(f"{len(x)} patches, {len(y)} labels")
    if len(y) == 0 or not ((y == 0).any() and (y == 1).any()):
        raise DegenerateDataset("training data must contain both classes")
    rng = np.random.default_rng(config.seed)
    if config.balance:
        keep = balance_classes(y, rng)
        x, y = x[keep], y[keep]
    model = model.copy()
    vel = {k: np.zeros_like(v) for k, v in model.params.items()}
    history = []
    for _ in range(config.epochs):
        order = rng.permutation(len(y))
        total = 0.0
        for start in range(0, len(y), config.batch_size):
            b = order[start:start + config.batch_size]
            loss, grads = loss_and_grads(model, x[b], y[b])
            total += loss * len(b)
            for k in PARAM_ORDER:
                vel[k] = config.momentum * vel[k] - config.lr * grads[k]
                model.params[k] += vel[k]
        history.append(total / len(y))
    return model, history


def predict(model: CnnModel, patches, batch: int = 256) -> np.ndarray:
    """Casualty probability for each patch."""
    x = _as_batch(patches, model.arch.size)
    out = [forward(model, x[i:i + batch])[:, 0] for i in range(0, len(x), batch)]
    return np.concatenate(out) if out else np.zeros(0)


# --------------------------------------------------------------------------- metrics

@dataclass(frozen=True)
class Metrics:
    accuracy: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def confusion(self) -> tuple:
        return (self.tp, self.fp, self.fn, self.tn)

    def to_json(self) -> dict:
        return asdict(self)


def compute_metrics(predictions, labels) -> Metrics:
    """Confusion counts with casualty as the positive class.

    Accepts class names or class indices (0 = casualty).
    """
    pred, true = _class_index(predictions), _class_index(labels)
    if len(pred) != len(true):
        raise LengthMismatch(f"{len(pred)} predictions vs {len(true)} labels")
    tp = int(((pred == 0) & (true == 0)).sum())
    fp = int(((pred == 0) & (true == 1)).sum())
    fn = int(((pred == 1) & (true == 0)).sum())
    tn = int(((pred == 1) & (true == 1)).sum())
    total = tp + fp + fn + tn
    acc = (tp + tn) / total if total else 0.0
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return Metrics(acc, f1, tp, fp, fn, tn)
