"""The detection network: a four-layer tanh ConvNet with two dense heads.

Layer stack for a 51x51 input (valid convolutions, floor max-pooling)::

    conv1 5x5x32 tanh   47x47   -> pool 2x2 23x23 -> dropout 0.25
    conv2 3x3x64 tanh   21x21   -> pool 2x2 10x10 -> dropout 0.25
    conv3 3x3x64 tanh    8x8    -> dropout 0.125
    conv4 3x3x64 tanh    6x6    -> dropout 0.125
    flatten 2304 -> sigmoid(1) notehead probability
                 -> relu(4)    box offsets

Everything is plain numpy: forward and backward passes, the weighted
cross-entropy + MSE loss, Adam, and a small versioned weights file. Arrays are
NHWC; ``params`` is a dict of arrays whose dtype sets the compute precision.
"""
from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

INPUT_SIZE = 51
CONV_LAYERS = (
    # name, kernel, in channels, out channels, pool after, dropout after
    ("conv1", 5, 1, 32, True, 0.25),
    ("conv2", 3, 32, 64, True, 0.25),
    ("conv3", 3, 64, 64, False, 0.125),
    ("conv4", 3, 64, 64, False, 0.125),
)
CLIP_EPS = 1e-7


def spatial_trace(size: int = INPUT_SIZE) -> list[int]:
    """Feature-map side length after every conv and pool, starting with the input."""
    trace = [size]
    for _, k, _, _, pool, _ in CONV_LAYERS:
        size = size - k + 1
        trace.append(size)
        if pool:
            size //= 2
            trace.append(size)
    return trace


FLAT_SIZE = spatial_trace()[-1] ** 2 * CONV_LAYERS[-1][3]


def param_shapes() -> dict[str, tuple[int, ...]]:
    shapes = {}
    for name, k, cin, cout, _, _ in CONV_LAYERS:
        shapes[f"{name}_w"] = (k, k, cin, cout)
        shapes[f"{name}_b"] = (cout,)
    shapes["clf_w"] = (FLAT_SIZE, 1)
    shapes["clf_b"] = (1,)
    shapes["bbox_w"] = (FLAT_SIZE, 4)
    shapes["bbox_b"] = (4,)
    return shapes


PARAM_SHAPES = param_shapes()


def parameter_count() -> int:
    return int(sum(np.prod(s) for s in PARAM_SHAPES.values()))


def init_params(seed=0, dtype=np.float32) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = {}
    for name, shape in PARAM_SHAPES.items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        if len(shape) == 4:
            receptive = shape[0] * shape[1]
            fan_in, fan_out = receptive * shape[2], receptive * shape[3]
        else:
            fan_in, fan_out = shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return params


def zeros_like_params(params):
    return {k: np.zeros_like(v) for k, v in params.items()}


# ---------------------------------------------------------------------------
# Layers


def _conv_forward(x, w, b):
    n, h, wd, c = x.shape
    k = w.shape[0]
    ho, wo = h - k + 1, wd - k + 1
    windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    # (N, Ho, Wo, C, k, k) -> rows ordered (ky, kx, c) to match w.reshape
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)
    out = cols @ w.reshape(k * k * c, -1) + b
    return out.reshape(n, ho, wo, -1), cols


def _conv_backward(dout, cols, x_shape, w, need_dx=True):
    n, h, wd, c = x_shape
    k, f = w.shape[0], w.shape[3]
    ho, wo = h - k + 1, wd - k + 1
    d2 = dout.reshape(-1, f)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ w.reshape(-1, f).T).reshape(n, ho, wo, k, k, c)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, i : i + ho, j : j + wo, :] += dcols[:, :, :, i, j, :]
    return dx, dw, db


def _pool_forward(x):
    n, h, w, c = x.shape
    ho, wo = h // 2, w // 2
    blocks = x[:, : 2 * ho, : 2 * wo, :].reshape(n, ho, 2, wo, 2, c).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(n, ho, wo, c, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(dout, idx, x_shape):
    n, h, w, c = x_shape
    ho, wo = h // 2, w // 2
    g = np.zeros((n, ho, wo, c, 4), dtype=dout.dtype)
    np.put_along_axis(g, idx[..., None], dout[..., None], axis=-1)
    g = g.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * ho, 2 * wo, c)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    dx[:, : 2 * ho, : 2 * wo, :] = g
    return dx


def _dropout_masks(batch_shape_fn, dropout_seed, dtype):
    rng = np.random.default_rng(dropout_seed)
    masks = []
    for shape, rate in batch_shape_fn:
        keep = rng.random(shape) >= rate
        masks.append(keep.astype(dtype) / dtype(1.0 - rate))
    return masks


def _check_batch(params, batch):
    batch = np.asarray(batch)
    if batch.ndim == 3:
        batch = batch[..., None]
    if batch.ndim != 4 or batch.shape[1:] != (INPUT_SIZE, INPUT_SIZE, 1):
        raise ValueError(f"expected (N, {INPUT_SIZE}, {INPUT_SIZE}) patches, got {batch.shape}")
    for name, shape in PARAM_SHAPES.items():
        if params[name].shape != shape:
            raise ValueError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
    return batch.astype(params["conv1_w"].dtype, copy=False)


def _forward(params, batch, mode, dropout_seed):
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = _check_batch(params, batch)
    dtype = x.dtype.type
    cache = {"input_shape": x.shape}
    masks = None
    if mode == "train":
        shapes = []
        size = INPUT_SIZE
        for name, k, _, cout, pool, rate in CONV_LAYERS:
            size = size - k + 1
            if pool:
                size //= 2
            shapes.append(((x.shape[0], size, size, cout), rate))
        masks = _dropout_masks(shapes, dropout_seed, dtype)
    layers = []
    for i, (name, _, _, _, pool, _) in enumerate(CONV_LAYERS):
        z, cols = _conv_forward(x, params[f"{name}_w"], params[f"{name}_b"])
        a = np.tanh(z)
        rec = {"x_shape": x.shape, "cols": cols, "a": a}
        if pool:
            a_pooled, idx = _pool_forward(a)
            rec["pool_idx"] = idx
            a = a_pooled
        if masks is not None:
            rec["mask"] = masks[i]
            a = a * masks[i]
        layers.append(rec)
        x = a
    cache["out_shape"] = x.shape
    flat = x.reshape(x.shape[0], -1)
    z_clf = flat @ params["clf_w"] + params["clf_b"]
    z_box = flat @ params["bbox_w"] + params["bbox_b"]
    p = 1.0 / (1.0 + np.exp(-z_clf[:, 0]))
    b_hat = np.maximum(z_box, 0)
    cache.update(layers=layers, flat=flat, z_clf=z_clf[:, 0], z_box=z_box)
    return p, b_hat, cache


def forward(params, batch, mode="infer", dropout_seed=None):
    """Notehead probabilities ``p`` (N,) and box offsets ``b_hat`` (N, 4)."""
    p, b_hat, _ = _forward(params, batch, mode, dropout_seed)
    return p, b_hat


def predict(params, patches, chunk=128):
    """Inference-mode forward pass in memory-bounded chunks."""
    n = len(patches)
    p = np.empty(n, dtype=np.float64)
    b = np.empty((n, 4), dtype=np.float64)
    for s in range(0, n, chunk):
        p[s : s + chunk], b[s : s + chunk] = forward(params, patches[s : s + chunk])
    return p, b


@dataclass(frozen=True)
class LossWeights:
    lambda_bb: float = 0.02

    def __post_init__(self):
        if self.lambda_bb < 0:
            raise ValueError("lambda_bb must be non-negative")


def loss(p, b_hat, c, b, weights: LossWeights = LossWeights()):
    """Returns ``(total, cross_entropy, weighted_mse)``, each a batch mean."""
    p = np.clip(np.asarray(p, dtype=np.float64), CLIP_EPS, 1 - CLIP_EPS)
    c = np.asarray(c, dtype=np.float64)
    ce = float(np.mean(-c * np.log(p) - (1 - c) * np.log(1 - p)))
    mse = weights.lambda_bb * float(np.mean((np.asarray(b_hat, dtype=np.float64) - b) ** 2))
    return ce + mse, ce, mse


def backward(params, batch, c, b, mode="train", dropout_seed=None, weights: LossWeights = LossWeights()):
    """Exact gradients of :func:`loss` for every parameter.

    Returns ``(grads, (total, ce, mse))``. The forward pass is recomputed with
    the same ``mode`` and ``dropout_seed``.
    """
    p, b_hat, cache = _forward(params, batch, mode, dropout_seed)
    dtype = cache["flat"].dtype
    n = p.shape[0]
    c = np.asarray(c, dtype=dtype).reshape(n)
    b = np.asarray(b, dtype=dtype).reshape(n, 4)
    losses = loss(p, b_hat, c, b, weights)

    # sigmoid + clipped log: d/dz is (p - c) / n inside the clip, 0 outside
    inside = (p > CLIP_EPS) & (p < 1 - CLIP_EPS)
    d_clf = ((p - c) / n * inside).astype(dtype)[:, None]
    d_box = (weights.lambda_bb * 2.0 / (4 * n) * (b_hat - b) * (cache["z_box"] > 0)).astype(dtype)

    flat = cache["flat"]
    grads = {
        "clf_w": flat.T @ d_clf,
        "clf_b": d_clf.sum(axis=0),
        "bbox_w": flat.T @ d_box,
        "bbox_b": d_box.sum(axis=0),
    }
    dx = d_clf @ params["clf_w"].T + d_box @ params["bbox_w"].T
    layers = cache["layers"]
    dx = dx.reshape(cache["out_shape"])
    for i in reversed(range(len(CONV_LAYERS))):
        name, _, _, _, pool, _ = CONV_LAYERS[i]
        rec = layers[i]
        if "mask" in rec:
            dx = dx * rec["mask"]
        if pool:
            dx = _pool_backward(dx, rec["pool_idx"], rec["a"].shape)
        dz = dx * (1 - rec["a"] ** 2)
        dx, dw, db = _conv_backward(dz, rec["cols"], rec["x_shape"], params[f"{name}_w"], need_dx=i > 0)
        grads[f"{name}_w"] = dw
        grads[f"{name}_b"] = db
    return grads, losses


# ---------------------------------------------------------------------------
# Optimisation


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name}")
        if params[name].shape != g.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {params[name].shape}")
    state.step += 1
    t = state.step
    correct1 = 1 - state.beta1**t
    correct2 = 1 - state.beta2**t
    for name, g in grads.items():
        m = state.m.setdefault(name, np.zeros_like(params[name]))
        v = state.v.setdefault(name, np.zeros_like(params[name]))
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        m_hat = m / correct1
        v_hat = v / correct2
        params[name] -= (state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(params[name].dtype)
    return params, state


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    lr: float = 1e-3
    lambda_bb: float = 0.02


def evaluate_loss(params, samples, weights: LossWeights = LossWeights(), chunk=256):
    p, b_hat = predict(params, samples.X, chunk)
    return loss(p, b_hat, samples.c, samples.b, weights)[0]


def train(samples, config: TrainConfig = TrainConfig(), validation=None, on_epoch=None):
    """Fit the network with Adam on minibatches.

    All randomness (init, shuffling, dropout) comes from ``config.seed``.
    With a validation set the weights of the best validation epoch are
    returned, otherwise the final ones. Each epoch appends a record with the
    inference-mode training loss to the returned log.
    """
    if len(samples) == 0:
        raise ValueError("no training samples")
    rng = np.random.default_rng(config.seed)
    params = init_params(rng)
    state = AdamState(lr=config.lr)
    weights = LossWeights(config.lambda_bb)
    history = []
    best = (np.inf, None)
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(len(samples))
        batch_losses = []
        for s in range(0, len(order), config.batch_size):
            idx = np.sort(order[s : s + config.batch_size])
            seed = int(rng.integers(2**63))
            grads, (total, _, _) = backward(
                params, samples.X[idx], samples.c[idx], samples.b[idx], "train", seed, weights
            )
            adam_step(params, grads, state)
            batch_losses.append(total)
        record = {
            "epoch": epoch,
            "batch_loss": float(np.mean(batch_losses)),
            "train_loss": float(evaluate_loss(params, samples, weights)),
        }
        if validation is not None and len(validation):
            record["val_loss"] = float(evaluate_loss(params, validation, weights))
            if record["val_loss"] < best[0]:
                best = (record["val_loss"], {k: v.copy() for k, v in params.items()})
        record["wall_time"] = time.perf_counter() - start
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
    if best[1] is not None:
        params = best[1]
    return params, history


# ---------------------------------------------------------------------------
# Weights file: b"MNETv1", uint32 header length, JSON header, float32 LE payload


class WeightsFormatError(ValueError):
    pass


class WeightsVersionError(WeightsFormatError):
    pass


class WeightsShapeError(WeightsFormatError):
    pass


class WeightsTruncatedError(WeightsFormatError):
    pass


MAGIC = b"MNETv1"


def save_weights(params, path) -> None:
    header = json.dumps({"dtype": "<f4", "params": [[k, list(PARAM_SHAPES[k])] for k in PARAM_SHAPES]})
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", len(header)) + header.encode())
        for name in PARAM_SHAPES:
            fh.write(np.ascontiguousarray(params[name], dtype="<f4").tobytes())


def load_weights(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise WeightsVersionError(f"{path}: bad magic {data[:len(MAGIC)]!r}, expected {MAGIC!r}")
    pos = len(MAGIC)
    if len(data) < pos + 4:
        raise WeightsTruncatedError(f"{path}: header length missing")
    (size,) = struct.unpack_from("<I", data, pos)
    pos += 4
    try:
        header = json.loads(data[pos : pos + size])
    except ValueError:
        raise WeightsTruncatedError(f"{path}: header unreadable") from None
    pos += size
    entries = header.get("params", [])
    names = [e[0] for e in entries]
    if names != list(PARAM_SHAPES):
        raise WeightsShapeError(f"{path}: parameter list {names} does not match the architecture")
    params = {}
    for name, shape in entries:
        if tuple(shape) != PARAM_SHAPES[name]:
            layer = name.rsplit("_", 1)[0]
            raise WeightsShapeError(f"{path}: {layer} has shape {shape}, expected {list(PARAM_SHAPES[name])}")
        count = int(np.prod(shape))
        end = pos + 4 * count
        if end > len(data):
            raise WeightsTruncatedError(f"{path}: payload ends inside {name}")
        params[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
        pos = end
    if pos != len(data):
        raise WeightsFormatError(f"{path}: {len(data) - pos} trailing bytes")
    return params
