"""Small numpy network engine for the Siamese fingerprint verifier.

Images are carried as float64 arrays in NHWC layout. Every layer has an
explicit forward and backward pass; there is no autodiff.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LAYER_KINDS = ("Conv2D", "MaxPool2D", "Dense", "Dropout", "ReLU", "Flatten")


class ShapeError(ValueError):
    """Raised when an array does not match the shape a layer expects."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0
    kernel: int = 3
    units: int = 0
    p: float = 0.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "Conv2D" and (self.filters < 1 or self.kernel < 1):
            raise ValueError("Conv2D needs filters >= 1 and kernel >= 1")
        if self.kind == "Dense" and self.units < 1:
            raise ValueError("Dense needs units >= 1")
        if self.kind == "Dropout" and not 0.0 <= self.p < 1.0:
            raise ValueError(f"dropout p must lie in [0, 1), got {self.p}")


def table1_stack(dropout: float = 0.5) -> tuple[LayerSpec, ...]:
    """Client-side trunk: two conv/pool stages and a 128-unit embedding."""
    return (
        LayerSpec("Conv2D", filters=32, kernel=3),
        LayerSpec("ReLU"),
        LayerSpec("MaxPool2D"),
        LayerSpec("Conv2D", filters=64, kernel=3),
        LayerSpec("ReLU"),
        LayerSpec("MaxPool2D"),
        LayerSpec("Flatten"),
        LayerSpec("Dense", units=128),
        LayerSpec("ReLU"),
        LayerSpec("Dropout", p=dropout),
    )


class ParamSlot(NamedTuple):
    layer: str
    name: str
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass
class ParamVector:
    """Flat parameter vector plus the (layer, name, shape) layout it follows."""

    values: np.ndarray
    layout: tuple[ParamSlot, ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        expected = sum(slot.size for slot in self.layout)
        if self.values.shape != (expected,):
            raise ShapeError(
                f"parameter vector has shape {self.values.shape}, layout needs ({expected},)"
            )

    def __len__(self) -> int:
        return self.values.size

    def offsets(self) -> dict[tuple[str, str], slice]:
        out, start = {}, 0
        for slot in self.layout:
            out[(slot.layer, slot.name)] = slice(start, start + slot.size)
            start += slot.size
        return out

    def block(self, layer: str, name: str) -> np.ndarray:
        """Reshaped view (not a copy) of one parameter block."""
        for slot, sl in zip(self.layout, self.offsets().values()):
            if slot.layer == layer and slot.name == name:
                return self.values[sl].reshape(slot.shape)
        raise KeyError((layer, name))

    def check_compatible(self, other: "ParamVector") -> None:
        if self.layout != other.layout:
            raise ShapeError("parameter layouts differ; vectors cannot be combined")

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(np.array(values, dtype=np.float64), self.layout)

    def copy(self) -> "ParamVector":
        return self.with_values(self.values)


@dataclass(frozen=True)
class SiameseModel:
    """Shared trunk ending in the embedding, with a contrastive or softmax head.

    Both images of a pair go through the same trunk with the same
    parameters, so there is only one set of weights.
    """

    input_size: int = 128
    layers: tuple[LayerSpec, ...] = field(default_factory=table1_stack)
    head: str = "contrastive"
    margin: float = 1.0
    num_classes: int = 10

    def __post_init__(self):
        if self.head not in ("contrastive", "classifier"):
            raise ValueError(f"head must be 'contrastive' or 'classifier', got {self.head!r}")
        if self.margin <= 0:
            raise ValueError("contrastive margin must be positive")
        if self.input_size < 1:
            raise ValueError("input_size must be positive")
        self.layout()  # validates that the stack fits the input size

    def layer_names(self) -> list[str]:
        counts: dict[str, int] = {}
        names = []
        for spec in self.layers:
            counts[spec.kind] = counts.get(spec.kind, 0) + 1
            names.append(f"{spec.kind.lower()}{counts[spec.kind]}")
        return names

    def layout(self) -> tuple[ParamSlot, ...]:
        h = w = self.input_size
        c = 1
        flat = None
        slots: list[ParamSlot] = []
        for name, spec in zip(self.layer_names(), self.layers):
            if spec.kind == "Conv2D":
                if flat is not None:
                    raise ShapeError("Conv2D after Flatten")
                if spec.kernel > h or spec.kernel > w:
                    raise ShapeError(f"{name}: kernel {spec.kernel} larger than {h}x{w} input")
                slots.append(ParamSlot(name, "W", (spec.filters, c, spec.kernel, spec.kernel)))
                slots.append(ParamSlot(name, "b", (spec.filters,)))
                h, w, c = h - spec.kernel + 1, w - spec.kernel + 1, spec.filters
            elif spec.kind == "MaxPool2D":
                if flat is not None:
                    raise ShapeError("MaxPool2D after Flatten")
                h, w = h // 2, w // 2
                if h == 0 or w == 0:
                    raise ShapeError(f"{name}: input too small to pool")
            elif spec.kind == "Flatten":
                flat = h * w * c
            elif spec.kind == "Dense":
                if flat is None:
                    raise ShapeError("Dense layer needs a Flatten before it")
                slots.append(ParamSlot(name, "W", (flat, spec.units)))
                slots.append(ParamSlot(name, "b", (spec.units,)))
                flat = spec.units
        if flat is None:
            raise ShapeError("layer stack never flattens to an embedding")
        if self.head == "classifier":
            slots.append(ParamSlot("head", "W", (flat, self.num_classes)))
            slots.append(ParamSlot("head", "b", (self.num_classes,)))
        return tuple(slots)

    @property
    def embedding_dim(self) -> int:
        dims = [spec.units for spec in self.layers if spec.kind == "Dense"]
        return dims[-1] if dims else self.layout()[-1].shape[0]

    def init_params(self, rng: np.random.Generator) -> ParamVector:
        """He-uniform weights, zero biases."""
        layout = self.layout()
        chunks = []
        for slot in layout:
            if slot.name == "b":
                chunks.append(np.zeros(slot.size))
                continue
            fan_in = int(np.prod(slot.shape[1:])) if len(slot.shape) == 4 else slot.shape[0]
            limit = np.sqrt(6.0 / fan_in)
            chunks.append(rng.uniform(-limit, limit, size=slot.size))
        return ParamVector(np.concatenate(chunks), layout)


# ---------------------------------------------------------------------------
# Layer primitives
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    n, h, w, c = x.shape
    win = sliding_window_view(x, (k, k), axis=(1, 2))  # (N, H', W', C, k, k)
    return win.reshape(n * (h - k + 1) * (w - k + 1), c * k * k)


def conv2d(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Valid, stride-1 convolution (cross-correlation).

    x is (N, H, W, C), kernels (F, C, k, k), bias (F,). Returns (N, H-k+1, W-k+1, F).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be (N, H, W, C), got {x.shape}")
    f, c, kh, kw = kernels.shape
    if kh != kw:
        raise ShapeError("only square kernels are supported")
    n, h, w, cin = x.shape
    if cin != c:
        raise ShapeError(f"conv2d input has {cin} channels, kernels expect {c}")
    if kh > h or kw > w:
        raise ShapeError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    return _conv2d_cols(x, kernels, bias)[0]


def _conv2d_cols(x, kernels, bias):
    f, _, k, _ = kernels.shape
    n, h, w, _ = x.shape
    cols = _im2col(x, k)
    out = cols @ kernels.reshape(f, -1).T + bias
    return out.reshape(n, h - k + 1, w - k + 1, f), cols


def _conv2d_backward(dout, x_shape, cols, kernels, need_dx=True):
    f, c, k, _ = kernels.shape
    n, h, w, _ = x_shape
    d2 = dout.reshape(-1, f)
    dk = (d2.T @ cols).reshape(kernels.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dk, db
    ho, wo = h - k + 1, w - k + 1
    dcols = (d2 @ kernels.reshape(f, -1)).reshape(n, ho, wo, c, k, k)
    dx = np.zeros(x_shape)
    for i in range(k):
        for j in range(k):
            dx[:, i : i + ho, j : j + wo, :] += dcols[..., i, j]
    return dx, dk, db


def _quadrants(x, h2, w2):
    return (
        x[:, 0 : 2 * h2 : 2, 0 : 2 * w2 : 2],
        x[:, 0 : 2 * h2 : 2, 1 : 2 * w2 : 2],
        x[:, 1 : 2 * h2 : 2, 0 : 2 * w2 : 2],
        x[:, 1 : 2 * h2 : 2, 1 : 2 * w2 : 2],
    )


def maxpool2d(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 max pooling with stride 2 on (N, H, W, C); odd edges are dropped.

    Returns the pooled array and, per output cell, the row-major index (0..3)
    of the first maximal element in its window.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d input must be (N, H, W, C), got {x.shape}")
    _, h, w, _ = x.shape
    h2, w2 = h // 2, w // 2
    if x.size == 0 or h2 == 0 or w2 == 0:
        raise ShapeError(f"cannot pool an input of shape {x.shape}")
    q0, q1, q2, q3 = _quadrants(x, h2, w2)
    out = np.maximum(np.maximum(q0, q1), np.maximum(q2, q3))
    # first match wins, which is the row-major tie-break
    idx = np.where(q0 == out, 0, np.where(q1 == out, 1, np.where(q2 == out, 2, 3)))
    return out, idx


def _maxpool2d_backward(dout, idx, in_shape):
    _, h, w, _ = in_shape
    h2, w2 = h // 2, w // 2
    dx = np.zeros(in_shape)
    for k, view in enumerate(_quadrants(dx, h2, w2)):
        view[...] = dout * (idx == k)
    return dx


# ---------------------------------------------------------------------------
# Model forward / backward
# ---------------------------------------------------------------------------


def _as_batch(model: SiameseModel, images) -> tuple[np.ndarray, bool]:
    x = np.asarray(images, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (model.input_size, model.input_size):
        raise ShapeError(
            f"expected image(s) of size {model.input_size}x{model.input_size}, got {x.shape}"
        )
    return x[..., None], single


def _trunk_forward(model, params, x, rng, tied_halves=False):
    """Run the layer stack; dropout is active only when rng is given.

    With tied_halves the batch is two stacked branches of the same pairs and
    each pair gets one dropout mask shared by both of its images.
    """
    caches = []
    for name, spec in zip(model.layer_names(), model.layers):
        if spec.kind == "Conv2D":
            kernels = params.block(name, "W")
            if x.ndim != 4 or x.shape[3] != kernels.shape[1]:
                raise ShapeError(f"{name}: input {x.shape} does not fit kernels {kernels.shape}")
            shape = x.shape
            x, cols = _conv2d_cols(x, kernels, params.block(name, "b"))
            caches.append((shape, cols))
        elif spec.kind == "ReLU":
            mask = x > 0
            caches.append(mask)
            x = x * mask
        elif spec.kind == "MaxPool2D":
            shape = x.shape
            x, idx = maxpool2d(x)
            caches.append((idx, shape))
        elif spec.kind == "Flatten":
            caches.append(x.shape)
            x = x.reshape(x.shape[0], -1)
        elif spec.kind == "Dense":
            caches.append(x)
            x = x @ params.block(name, "W") + params.block(name, "b")
        elif spec.kind == "Dropout":
            if rng is None or spec.p == 0.0:
                caches.append(None)
            else:
                shape = (x.shape[0] // 2, *x.shape[1:]) if tied_halves else x.shape
                keep = (rng.random(shape) >= spec.p) / (1.0 - spec.p)
                if tied_halves:
                    keep = np.concatenate([keep, keep])
                caches.append(keep)
                x = x * keep
    return x, caches


def _trunk_backward(model, params, caches, dout):
    grads: dict[tuple[str, str], np.ndarray] = {}
    first_param_layer = next(
        (i for i, s in enumerate(model.layers) if s.kind in ("Conv2D", "Dense")), 0
    )
    names = model.layer_names()
    for i in range(len(model.layers) - 1, -1, -1):
        spec, name, cache = model.layers[i], names[i], caches[i]
        if spec.kind == "Conv2D":
            dx, dk, db = _conv2d_backward(
                dout, *cache, params.block(name, "W"), need_dx=i > first_param_layer
            )
            grads[(name, "W")], grads[(name, "b")] = dk, db
            dout = dx
        elif spec.kind == "ReLU":
            dout = dout * cache
        elif spec.kind == "MaxPool2D":
            idx, shape = cache
            dout = _maxpool2d_backward(dout, idx, shape)
        elif spec.kind == "Flatten":
            dout = dout.reshape(cache)
        elif spec.kind == "Dense":
            grads[(name, "W")] = cache.T @ dout
            grads[(name, "b")] = dout.sum(axis=0)
            dout = dout @ params.block(name, "W").T if i > first_param_layer else None
        elif spec.kind == "Dropout":
            if cache is not None:
                dout = dout * cache
        if dout is None:
            break
    return grads


def forward(
    model: SiameseModel,
    params: ParamVector,
    image,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Embed one (H, W) image or a batch (N, H, W). Dropout runs only in train mode."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train" and rng is None:
        raise ValueError("train mode needs an rng for the dropout masks")
    x, single = _as_batch(model, image)
    emb, _ = _trunk_forward(model, params, x, rng if mode == "train" else None)
    return emb[0] if single else emb


def embed(model, params, images, batch_size: int = 256) -> np.ndarray:
    """Eval-mode embeddings for many images, chunked to bound memory."""
    images = np.asarray(images, dtype=np.float64)
    out = [
        forward(model, params, images[i : i + batch_size])
        for i in range(0, len(images), batch_size)
    ]
    return np.concatenate(out) if out else np.zeros((0, model.embedding_dim))


def logits(model, params, images, mode="eval", rng=None) -> np.ndarray:
    if model.head != "classifier":
        raise ValueError("logits() needs a model with the classifier head")
    emb = forward(model, params, images, mode, rng)
    return emb @ params.block("head", "W") + params.block("head", "b")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def contrastive_loss(d_a, d_b, y, margin: float = 1.0):
    """Mean of y*d^2 + (1-y)*max(0, margin-d)^2 with d the Euclidean distance.

    Accepts single embeddings (1-D) or batches (N, D). Returns the loss and
    the gradients with respect to both embeddings.
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    a = np.asarray(d_a, dtype=np.float64)
    b = np.asarray(d_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"embedding shapes differ: {a.shape} vs {b.shape}")
    single = a.ndim == 1
    if single:
        a, b = a[None], b[None]
    y = np.broadcast_to(np.asarray(y, dtype=np.float64), (a.shape[0],))
    n = a.shape[0]
    diff = a - b
    dist = np.sqrt(np.sum(diff * diff, axis=1))
    hinge = np.maximum(0.0, margin - dist)
    loss = np.sum(y * dist**2 + (1 - y) * hinge**2) / n
    # d/d(a) of (margin-d)^2 is -2(margin-d) * diff/d; zero where the hinge is off or d == 0
    safe = np.where(dist > 0, dist, 1.0)
    coef = y * 2.0 - (1 - y) * 2.0 * hinge / safe * (dist > 0)
    grad_a = coef[:, None] * diff / n
    if single:
        return float(loss), grad_a[0], -grad_a[0]
    return float(loss), grad_a, -grad_a


def softmax_xent(logit_values, label):
    """Mean cross-entropy of softmax(logits) against integer labels.

    Works on a single logit vector with an int label, or a (N, K) batch.
    """
    z = np.asarray(logit_values, dtype=np.float64)
    single = z.ndim == 1
    if single:
        z = z[None]
    labels = np.atleast_1d(np.asarray(label))
    k = z.shape[1]
    if labels.shape != (z.shape[0],):
        raise ShapeError("one label per logit row is required")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"label out of range for {k} classes")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=1))
    rows = np.arange(z.shape[0])
    loss = np.mean(log_norm - shifted[rows, labels])
    probs = np.exp(shifted - log_norm[:, None])
    probs[rows, labels] -= 1.0
    grad = probs / z.shape[0]
    return float(loss), (grad[0] if single else grad)


# ---------------------------------------------------------------------------
# Batches, loss + gradient
# ---------------------------------------------------------------------------


@dataclass
class PairBatch:
    a: np.ndarray  # (N, H, W)
    b: np.ndarray
    y: np.ndarray  # (N,) of 0/1

    def __len__(self):
        return len(self.y)


@dataclass
class LabeledBatch:
    images: np.ndarray  # (N, H, W)
    labels: np.ndarray  # (N,) ints

    def __len__(self):
        return len(self.labels)


def backward(model: SiameseModel, params: ParamVector, batch, rng=None):
    """Mean loss over the batch and its exact gradient as a ParamVector.

    With rng=None dropout is off; otherwise one set of masks is drawn and
    used for both the forward and backward pass.
    """
    if isinstance(batch, PairBatch):
        if model.head != "contrastive":
            raise ValueError("pair batches need the contrastive head")
        xa, _ = _as_batch(model, batch.a)
        xb, _ = _as_batch(model, batch.b)
        n = xa.shape[0]
        # both branches share one trunk call, so their gradients add up
        emb, caches = _trunk_forward(model, params, np.concatenate([xa, xb]), rng, True)
        loss, ga, gb = contrastive_loss(emb[:n], emb[n:], batch.y, model.margin)
        grads = _trunk_backward(model, params, caches, np.concatenate([ga, gb]))
    elif isinstance(batch, LabeledBatch):
        if model.head != "classifier":
            raise ValueError("labeled batches need the classifier head")
        x, _ = _as_batch(model, batch.images)
        emb, caches = _trunk_forward(model, params, x, rng)
        w_head = params.block("head", "W")
        z = emb @ w_head + params.block("head", "b")
        loss, gz = softmax_xent(z, batch.labels)
        grads = {("head", "W"): emb.T @ gz, ("head", "b"): gz.sum(axis=0)}
        grads.update(_trunk_backward(model, params, caches, gz @ w_head.T))
    else:
        raise TypeError(f"unsupported batch type {type(batch).__name__}")
    flat = np.concatenate([grads[(s.layer, s.name)].ravel() for s in params.layout])
    return loss, params.with_values(flat)


def batch_loss(model, params, batch, rng=None) -> float:
    """Loss only; same conventions as backward()."""
    return _loss_and_pattern(model, params, batch, rng)[0]


def _loss_and_pattern(model, params, batch, rng=None):
    # The pattern collects every piecewise-linear switch (ReLU masks, pool
    # winners, active hinges); finite differences are only valid while it holds.
    if isinstance(batch, PairBatch):
        xa, _ = _as_batch(model, batch.a)
        xb, _ = _as_batch(model, batch.b)
        emb, caches = _trunk_forward(model, params, np.concatenate([xa, xb]), rng, True)
        n = xa.shape[0]
        loss = contrastive_loss(emb[:n], emb[n:], batch.y, model.margin)[0]
        dist = np.sqrt(np.sum((emb[:n] - emb[n:]) ** 2, axis=1))
        extra = [dist < model.margin]
    else:
        x, _ = _as_batch(model, batch.images)
        emb, caches = _trunk_forward(model, params, x, rng)
        z = emb @ params.block("head", "W") + params.block("head", "b")
        loss = softmax_xent(z, batch.labels)[0]
        extra = []
    pattern = []
    for spec, cache in zip(model.layers, caches):
        if spec.kind == "ReLU":
            pattern.append(cache)
        elif spec.kind == "MaxPool2D":
            pattern.append(cache[0])
    return loss, pattern + extra


def _same_pattern(p, q) -> bool:
    return all(np.array_equal(a, b) for a, b in zip(p, q))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 0.001

    @classmethod
    def fresh(cls, size: int, lr: float = 0.001, **kwargs) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), lr=lr, **kwargs)


def adam_step(state: AdamState, params: ParamVector, grad: ParamVector) -> ParamVector:
    """One bias-corrected Adam update; mutates the moment estimates in state."""
    g = grad.values if isinstance(grad, ParamVector) else np.asarray(grad, dtype=np.float64)
    if g.shape != params.values.shape or state.m.shape != params.values.shape:
        raise ShapeError(
            f"Adam length mismatch: params {params.values.shape}, grad {g.shape}, state {state.m.shape}"
        )
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * g
    state.v = state.beta2 * state.v + (1 - state.beta2) * g * g
    m_hat = state.m / (1 - state.beta1**state.t)
    v_hat = state.v / (1 - state.beta2**state.t)
    return params.with_values(params.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))


# ---------------------------------------------------------------------------
# Finite-difference gradient check
# ---------------------------------------------------------------------------


@dataclass
class GradcheckReport:
    errors: dict[str, float]  # worst relative error per "layer.name" block
    tolerance: float
    checked: dict[str, int]
    kinks: dict[str, int] = field(default_factory=dict)

    @property
    def failing(self) -> list[str]:
        return [k for k, e in self.errors.items() if not e < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failing

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)

    def lines(self) -> list[str]:
        out = []
        for key, err in self.errors.items():
            status = "PASS" if err < self.tolerance else "FAIL"
            out.append(
                f"{key:<12} n={self.checked[key]:<5d} kinks={self.kinks.get(key, 0):<3d} "
                f"max_rel_err={err:.3e} {status}"
            )
        return out


def relative_error(analytic, numeric, floor: float = 1e-6):
    """|a - n| / max(|a|, |n|, floor); the floor keeps vanishing gradients from dividing by ~0."""
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def gradcheck(
    model: SiameseModel,
    params: ParamVector,
    batch,
    tolerance: float = 1e-4,
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    dropout_seed: int | None = None,
    analytic: ParamVector | None = None,
) -> GradcheckReport:
    """Compare backward() against central differences, block by block.

    dropout_seed=None disables dropout; an int freezes one mask for every
    evaluation. max_coords samples that many coordinates per block.
    Coordinates whose +-h probe flips a ReLU, pool winner, or hinge are
    non-differentiable there; they are counted as kinks and left out of the
    error.
    ``analytic`` overrides the gradient under test (for fault injection).
    """

    def rng():
        return None if dropout_seed is None else np.random.default_rng(dropout_seed)

    if analytic is None:
        _, analytic = backward(model, params, batch, rng())
    _, base_pattern = _loss_and_pattern(model, params, batch, rng())
    pick = np.random.default_rng(seed)
    errors, checked, kinks = {}, {}, {}
    work = params.copy()
    for slot, sl in zip(params.layout, params.offsets().values()):
        coords = np.arange(sl.start, sl.stop)
        if max_coords is not None and coords.size > max_coords:
            coords = np.sort(pick.choice(coords, size=max_coords, replace=False))
        numeric = np.empty(coords.size)
        smooth = np.ones(coords.size, dtype=bool)
        for k, i in enumerate(coords):
            orig = work.values[i]
            work.values[i] = orig + h
            up, p_up = _loss_and_pattern(model, work, batch, rng())
            work.values[i] = orig - h
            down, p_down = _loss_and_pattern(model, work, batch, rng())
            work.values[i] = orig
            numeric[k] = (up - down) / (2 * h)
            smooth[k] = _same_pattern(p_up, base_pattern) and _same_pattern(p_down, base_pattern)
        key = f"{slot.layer}.{slot.name}"
        err = relative_error(analytic.values[coords][smooth], numeric[smooth])
        errors[key] = float(np.max(err, initial=0.0))
        checked[key] = int(smooth.sum())
        kinks[key] = int((~smooth).sum())
    return GradcheckReport(errors, tolerance, checked, kinks)


def random_pair_batch(model: SiameseModel, n: int, rng: np.random.Generator) -> PairBatch:
    s = model.input_size
    return PairBatch(
        rng.random((n, s, s)), rng.random((n, s, s)), (np.arange(n) % 2).astype(float)
    )


def stack_pairs(pairs: Sequence) -> PairBatch:
    """Build a PairBatch from objects with .a, .b, .y attributes."""
    return PairBatch(
        np.stack([p.a for p in pairs]),
        np.stack([p.b for p in pairs]),
        np.array([p.y for p in pairs], dtype=np.float64),
    )
