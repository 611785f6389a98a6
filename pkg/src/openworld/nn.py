"""Minimal dense-tensor CNN engine: layers, exact reverse-mode gradients, SGD.

Arrays are channels-last (H, W, C), batched internally as (B, H, W, C).
Convolution is valid cross-correlation implemented as im2col + GEMM with
reusable scratch buffers; everything else is plain numpy. Networks default
to float32; pass dtype=np.float64 when checking gradients.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

SIGMOID_CLAMP = 60.0
LOG_FLOOR = 1e-30

KINDS = ("conv2d", "maxpool", "relu", "dropout", "dense", "sigmoid-output", "softmax-output")


class DimensionError(ValueError):
    """Shape or axis mismatch between tensors."""


class ParameterError(ValueError):
    """Invalid hyperparameter or malformed operand (e.g. non-one-hot target)."""


class StateError(RuntimeError):
    """Forward/backward pairing violated."""


class TrainingError(RuntimeError):
    """Non-finite loss or gradient during optimization."""


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer; only fields for `kind` are used."""

    kind: str
    kernel: int = 3
    filters: int = 1
    stride: int = 1
    window: int = 2
    rate: float = 0.0
    units: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d":
            if self.kernel < 1 or self.filters < 1 or self.stride < 1:
                raise ParameterError("conv2d needs kernel, filters, stride >= 1")
        elif self.kind == "maxpool":
            if self.window < 1:
                raise ParameterError("maxpool window must be >= 1")
        elif self.kind == "dropout":
            if not 0.0 <= self.rate < 1.0:
                raise ParameterError(f"dropout rate must be in [0,1), got {self.rate}")
        elif self.kind in ("dense", "sigmoid-output", "softmax-output"):
            if self.units < 1:
                raise ParameterError(f"{self.kind} units must be >= 1, got {self.units}")

    def output_shape(self, in_shape: tuple) -> tuple:
        """Shape algebra; raises DimensionError instead of failing mid-training."""
        if self.kind == "conv2d":
            if len(in_shape) != 3:
                raise DimensionError(f"conv2d expects H x W x C input, got {in_shape}")
            h, w, _ = in_shape
            if h < self.kernel or w < self.kernel:
                raise DimensionError(
                    f"conv2d kernel {self.kernel} exceeds input axes (H={h}, W={w})")
            ho = (h - self.kernel) // self.stride + 1
            wo = (w - self.kernel) // self.stride + 1
            return (ho, wo, self.filters)
        if self.kind == "maxpool":
            if len(in_shape) != 3:
                raise DimensionError(f"maxpool expects H x W x C input, got {in_shape}")
            h, w, c = in_shape
            if self.window > h or self.window > w:
                raise DimensionError(
                    f"pool window {self.window} exceeds input axes (H={h}, W={w})")
            return (h // self.window, w // self.window, c)
        if self.kind in ("relu", "dropout"):
            return in_shape
        if self.kind in ("dense", "sigmoid-output", "softmax-output"):
            return (self.units,)
        raise ParameterError(self.kind)


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Elementwise logistic with inputs clamped to +/-SIGMOID_CLAMP."""
    z = np.clip(z, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    return 1.0 / (1.0 + np.exp(-z))


def glorot_uniform(rng: np.random.Generator, shape, fan_in, fan_out, dtype):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# batched kernels

def _scratch(pool, key, shape, dtype, zero=False):
    """Reusable buffer from a dict pool; big fresh allocations page-fault badly."""
    buf = None if pool is None else pool.get(key)
    if buf is None or buf.shape != tuple(shape) or buf.dtype != dtype:
        buf = np.zeros(shape, dtype=dtype) if zero else np.empty(shape, dtype=dtype)
        if pool is not None:
            pool[key] = buf
    elif zero:
        buf.fill(0)
    return buf


def _im2col(x, kernel, stride, out=None):
    b, h, w, c = x.shape
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    shape = (b, ho, wo, kernel, kernel, c)
    if out is None or out.shape != shape or out.dtype != x.dtype:
        out = np.empty(shape, dtype=x.dtype)
    for i in range(kernel):
        for j in range(kernel):
            out[:, :, :, i, j, :] = x[:, i:i + (ho - 1) * stride + 1:stride,
                                      j:j + (wo - 1) * stride + 1:stride, :]
    return out


def conv2d_forward_batch(x, kernels, bias, stride=1, pool=None, tag=""):
    b, h, w, cin = x.shape
    kh, kw, kcin, cout = kernels.shape
    if kh != kw:
        raise DimensionError("only square kernels are supported")
    if cin != kcin:
        raise DimensionError(f"input channels {cin} != kernel channels {kcin}")
    if h < kh or w < kw:
        raise DimensionError(f"kernel {kh} exceeds input axes (H={h}, W={w})")
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    cols = _im2col(x, kh, stride,
                   out=None if pool is None else pool.get(tag + "cols"))
    if pool is not None:
        pool[tag + "cols"] = cols
    b_, ho, wo = cols.shape[:3]
    flat = cols.reshape(b_ * ho * wo, kh * kw * cin)
    out = _scratch(pool, tag + "gemm", (flat.shape[0], cout), x.dtype)
    np.matmul(flat, kernels.reshape(kh * kw * cin, cout), out=out)
    out += bias
    return out.reshape(b_, ho, wo, cout), cols


def conv2d_backward_batch(dout, cols, kernels, x_shape, stride=1, need_dx=True,
                          pool=None):
    """Gradients of valid cross-correlation: (dkernels, dbias, dx)."""
    b, h, w, cin = x_shape
    kh, kw, _, cout = kernels.shape
    _, ho, wo, _ = dout.shape
    flat_cols = cols.reshape(b * ho * wo, kh * kw * cin)
    flat_dout = np.ascontiguousarray(dout.reshape(b * ho * wo, cout))
    dkernels = (flat_cols.T @ flat_dout).reshape(kh, kw, cin, cout)
    dbias = flat_dout.sum(axis=0)
    if not need_dx:
        return dkernels, dbias, None

    # dx: full correlation of the (dilated) output gradient with flipped kernels
    dil_h = (ho - 1) * stride + 1
    dil_w = (wo - 1) * stride + 1
    padded = _scratch(pool, "pad", (b, dil_h + 2 * (kh - 1), dil_w + 2 * (kw - 1), cout),
                      dout.dtype, zero=True)
    padded[:, kh - 1:kh - 1 + dil_h:stride, kw - 1:kw - 1 + dil_w:stride, :] = dout
    flipped = kernels[::-1, ::-1].transpose(0, 1, 3, 2)  # (kh, kw, cout, cin)
    dx_used, _ = conv2d_forward_batch(padded, np.ascontiguousarray(flipped),
                                      np.zeros(cin, dtype=dout.dtype), stride=1,
                                      pool=pool, tag="dx")
    h_used = dil_h + kh - 1
    w_used = dil_w + kw - 1
    if h_used == h and w_used == w:
        return dkernels, dbias, dx_used
    dx = np.zeros(x_shape, dtype=dout.dtype)
    dx[:, :h_used, :w_used, :] = dx_used
    return dkernels, dbias, dx


def maxpool_forward_batch(x, window):
    b, h, w, c = x.shape
    if window > h or window > w:
        raise DimensionError(f"pool window {window} exceeds input axes (H={h}, W={w})")
    ho, wo = h // window, w // window
    cropped = x[:, :ho * window, :wo * window, :]
    tiles = cropped.reshape(b, ho, window, wo, window, c)
    tiles = tiles.transpose(0, 1, 3, 5, 2, 4).reshape(b, ho, wo, c, window * window)
    idx = tiles.argmax(axis=-1)
    out = np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool_backward_batch(dout, idx, window, x_shape):
    b, h, w, c = x_shape
    ho, wo = h // window, w // window
    flat = np.zeros((b, ho, wo, c, window * window), dtype=dout.dtype)
    np.put_along_axis(flat, idx[..., None], dout[..., None], axis=-1)
    tiles = flat.reshape(b, ho, wo, c, window, window).transpose(0, 1, 4, 2, 5, 3)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    dx[:, :ho * window, :wo * window, :] = tiles.reshape(b, ho * window, wo * window, c)
    return dx


# ---------------------------------------------------------------------------
# layers

class Layer:
    spec: LayerSpec

    def params(self) -> dict:
        return {}

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError


class Conv2D(Layer):
    def __init__(self, kernels, bias, stride=1):
        kh, kw, cin, cout = kernels.shape
        self.kernels = kernels
        self.bias = bias
        self.stride = stride
        self.spec = LayerSpec("conv2d", kernel=kh, filters=cout, stride=stride)
        self._pool = {}  # scratch buffers, reused across steps
        self._cols = None
        self._x_shape = None

    def params(self):
        return {"kernels": self.kernels, "bias": self.bias}

    def forward(self, x, train=False, rng=None):
        out, cols = conv2d_forward_batch(x, self.kernels, self.bias, self.stride,
                                         pool=self._pool)
        if train:
            self._cols = cols
            self._x_shape = x.shape
        return out

    def backward(self, dout, need_dx=True):
        if self._x_shape is None:
            raise StateError("conv2d backward without a paired training forward")
        dk, db, dx = conv2d_backward_batch(dout, self._cols, self.kernels,
                                           self._x_shape, self.stride,
                                           need_dx=need_dx, pool=self._pool)
        self._x_shape = None
        return {"kernels": dk, "bias": db}, dx


class MaxPool2D(Layer):
    def __init__(self, window):
        self.window = window
        self.spec = LayerSpec("maxpool", window=window)
        self._idx = None
        self._x_shape = None

    def forward(self, x, train=False, rng=None):
        out, idx = maxpool_forward_batch(x, self.window)
        if train:
            self._idx = idx
            self._x_shape = x.shape
        return out

    def backward(self, dout):
        if self._x_shape is None:
            raise StateError("maxpool backward without a paired training forward")
        dx = maxpool_backward_batch(dout, self._idx, self.window, self._x_shape)
        self._idx = None
        self._x_shape = None
        return {}, dx


class ReLU(Layer):
    def __init__(self):
        self.spec = LayerSpec("relu")
        self._mask = None

    def forward(self, x, train=False, rng=None):
        if train:
            self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, dout):
        if self._mask is None:
            raise StateError("relu backward without a paired training forward")
        dx = dout * self._mask
        self._mask = None
        return {}, dx


class Dropout(Layer):
    """Inverted dropout: survivors scaled by 1/(1-rate); identity in eval mode."""

    def __init__(self, rate):
        if not 0.0 <= rate < 1.0:
            raise ParameterError(f"dropout rate must be in [0,1), got {rate}")
        self.rate = rate
        self.spec = LayerSpec("dropout", rate=rate)
        self._mask = None

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0.0:
            if train:
                self._mask = np.ones(1, dtype=x.dtype)  # identity marker
            return x
        if rng is None:
            raise ParameterError("training-mode dropout needs an rng")
        keep = 1.0 - self.rate
        mask = (rng.random(x.shape) >= self.rate).astype(x.dtype) / keep
        self._mask = mask
        return x * mask

    def backward(self, dout):
        if self._mask is None:
            raise StateError("dropout backward without a paired training forward")
        dx = dout * self._mask
        self._mask = None
        return {}, dx


class Dense(Layer):
    """Affine map; flattens non-vector inputs and restores the shape on backward."""

    def __init__(self, weights, bias):
        self.weights = weights  # (m, n)
        self.bias = bias        # (m,)
        self.spec = LayerSpec("dense", units=weights.shape[0])
        self._x_flat = None
        self._x_shape = None

    def params(self):
        return {"weights": self.weights, "bias": self.bias}

    def forward(self, x, train=False, rng=None):
        b = x.shape[0]
        flat = x.reshape(b, -1)
        if flat.shape[1] != self.weights.shape[1]:
            raise DimensionError(
                f"dense input length {flat.shape[1]} != weight columns {self.weights.shape[1]}")
        if train:
            self._x_flat = flat
            self._x_shape = x.shape
        return flat @ self.weights.T + self.bias

    def backward(self, dout):
        if self._x_flat is None:
            raise StateError("dense backward without a paired training forward")
        dw = dout.T @ self._x_flat
        db = dout.sum(axis=0)
        dx = (dout @ self.weights).reshape(self._x_shape)
        self._x_flat = None
        self._x_shape = None
        return {"weights": dw, "bias": db}, dx


class OutputHead(Layer):
    """Dense layer plus sigmoid (per-class, one-vs-rest) or softmax activation.

    The activation backward is fused into the loss (see bce_loss / softmax_ce_loss),
    so backward() expects the gradient w.r.t. the logits.
    """

    def __init__(self, weights, bias, activation="sigmoid"):
        if activation not in ("sigmoid", "softmax"):
            raise ParameterError(f"unknown output activation {activation!r}")
        self.dense = Dense(weights, bias)
        self.activation = activation
        kind = "sigmoid-output" if activation == "sigmoid" else "softmax-output"
        self.spec = LayerSpec(kind, units=weights.shape[0])
        self.logits = None

    def params(self):
        return self.dense.params()

    @property
    def weights(self):
        return self.dense.weights

    @property
    def bias(self):
        return self.dense.bias

    def forward(self, x, train=False, rng=None):
        z = self.dense.forward(x, train=train, rng=rng)
        self.logits = z if train else None
        if self.activation == "sigmoid":
            return sigmoid(z)
        return softmax(z)

    def backward(self, dlogits):
        return self.dense.backward(dlogits)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# losses (batched; single-sample wrappers at the bottom of the module)

def _check_one_hot(targets):
    ok = np.all((targets == 0) | (targets == 1)) and np.all(targets.sum(axis=-1) == 1)
    if not ok:
        raise ParameterError("target must be one-hot")


def bce_loss_batch(scores, targets):
    """Mean binary cross-entropy over classes and batch; gradient w.r.t. logits.

    Log arguments are floored at LOG_FLOOR so saturated sigmoid scores (exactly
    0.0 or 1.0 in float32) never produce an infinite loss.
    """
    _check_one_hot(targets)
    if scores.shape != targets.shape:
        raise DimensionError(f"scores {scores.shape} vs targets {targets.shape}")
    b, k = scores.shape
    s = scores.astype(np.float64)
    term = (targets * np.log(np.maximum(s, LOG_FLOOR)) +
            (1.0 - targets) * np.log(np.maximum(1.0 - s, LOG_FLOOR)))
    loss = -term.sum() / (b * k)
    dlogits = (scores - targets) / (b * k)
    return float(loss), dlogits.astype(scores.dtype)


def softmax_ce_loss_batch(probs, targets):
    _check_one_hot(targets)
    b = probs.shape[0]
    p = probs.astype(np.float64)
    loss = -(targets * np.log(np.maximum(p, LOG_FLOOR))).sum() / b
    dlogits = (probs - targets) / b
    return float(loss), dlogits.astype(probs.dtype)


# ---------------------------------------------------------------------------
# network

@dataclass
class Network:
    """Feed-forward stack ending in an OutputHead.

    Mutable while training (single owner); treat as immutable once trained.
    """

    layers: list
    input_shape: tuple
    arch: str = "custom"
    dtype: type = np.float32
    shape_chain: list = field(default_factory=list)
    _train_ready: bool = field(default=False, repr=False)

    @property
    def num_classes(self) -> int:
        return self.layers[-1].spec.units

    @property
    def head(self) -> OutputHead:
        return self.layers[-1]

    def forward(self, x, train=False, rng=None):
        if x.shape[1:] != tuple(self.input_shape):
            raise DimensionError(
                f"input shape {x.shape[1:]} != network input {tuple(self.input_shape)}")
        out = np.ascontiguousarray(x, dtype=self.dtype)
        for layer in self.layers:
            out = layer.forward(out, train=train, rng=rng)
        self._train_ready = train
        return out

    def backward(self, dlogits):
        """Propagate a logit gradient; requires a paired train-mode forward."""
        if not self._train_ready:
            raise StateError("backward without a paired training-mode forward")
        grads = [None] * len(self.layers)
        grad = dlogits.astype(self.dtype)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if i == 0 and isinstance(layer, Conv2D):
                layer_grads, grad = layer.backward(grad, need_dx=False)
            else:
                layer_grads, grad = layer.backward(grad)
            grads[i] = layer_grads
        self._train_ready = False
        return grads

    def loss_and_gradients(self, x, targets, rng=None):
        """Train-mode forward plus fused loss backward; returns (loss, grads)."""
        scores = self.forward(x, train=True, rng=rng)
        if scores.shape[1] != targets.shape[1]:
            raise DimensionError(
                f"output width {scores.shape[1]} != target length {targets.shape[1]}")
        if self.head.activation == "sigmoid":
            loss, dlogits = bce_loss_batch(scores, targets)
        else:
            loss, dlogits = softmax_ce_loss_batch(scores, targets)
        return loss, self.backward(dlogits)

    def predict_scores(self, x):
        return self.forward(x, train=False)

    def param_count(self) -> int:
        return sum(int(p.size) for layer in self.layers for p in layer.params().values())

    def copy(self) -> "Network":
        clone = build_network([l.spec for l in self.layers], self.input_shape,
                              seed=0, arch=self.arch, dtype=self.dtype)
        for mine, theirs in zip(clone.layers, self.layers):
            for name, p in theirs.params().items():
                mine.params()[name][...] = p
        return clone


def build_network(specs, input_shape, seed=None, rng=None, arch="custom", dtype=np.float32):
    """Construct and initialize a Network, validating the whole shape chain."""
    if rng is None:
        rng = np.random.default_rng(seed)
    layers = []
    chain = [tuple(input_shape)]
    shape = tuple(input_shape)
    for spec in specs:
        out_shape = spec.output_shape(shape)
        if any(d < 1 for d in out_shape):
            raise DimensionError(f"{spec.kind} collapses shape {shape} to {out_shape}")
        if spec.kind == "conv2d":
            cin = shape[2]
            fan_in = spec.kernel * spec.kernel * cin
            fan_out = spec.kernel * spec.kernel * spec.filters
            kernels = glorot_uniform(rng, (spec.kernel, spec.kernel, cin, spec.filters),
                                     fan_in, fan_out, dtype)
            layers.append(Conv2D(kernels, np.zeros(spec.filters, dtype=dtype), spec.stride))
        elif spec.kind == "maxpool":
            layers.append(MaxPool2D(spec.window))
        elif spec.kind == "relu":
            layers.append(ReLU())
        elif spec.kind == "dropout":
            layers.append(Dropout(spec.rate))
        elif spec.kind in ("dense", "sigmoid-output", "softmax-output"):
            n_in = int(np.prod(shape))
            w = glorot_uniform(rng, (spec.units, n_in), n_in, spec.units, dtype)
            b = np.zeros(spec.units, dtype=dtype)
            if spec.kind == "dense":
                layers.append(Dense(w, b))
            else:
                act = "sigmoid" if spec.kind == "sigmoid-output" else "softmax"
                layers.append(OutputHead(w, b, activation=act))
        shape = out_shape
        chain.append(shape)
    if not isinstance(layers[-1], OutputHead):
        raise ParameterError("network must end in a sigmoid-output or softmax-output layer")
    return Network(layers=layers, input_shape=tuple(input_shape), arch=arch,
                   dtype=dtype, shape_chain=chain)


# ---------------------------------------------------------------------------
# optimizer

class SGD:
    """Momentum SGD: v = momentum*v - lr*grad; param += v."""

    def __init__(self, lr=0.01, momentum=0.9):
        if lr < 0:
            raise ParameterError(f"lr must be >= 0, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ParameterError(f"momentum must be in [0,1), got {momentum}")
        self.lr = lr
        self.momentum = momentum
        self._velocity = None

    def step(self, network: Network, grads):
        if self._velocity is None:
            self._velocity = [{name: np.zeros_like(p) for name, p in layer.params().items()}
                              for layer in network.layers]
        for i, (layer, layer_grads) in enumerate(zip(network.layers, grads)):
            for name, p in layer.params().items():
                g = layer_grads[name]
                if g.shape != p.shape:
                    raise DimensionError(
                        f"gradient shape {g.shape} != param shape {p.shape} "
                        f"in layer {i} ({layer.spec.kind})")
                if not np.all(np.isfinite(g)):
                    raise TrainingError(
                        f"non-finite gradient in layer {i} ({layer.spec.kind}) param {name!r}")
                v = self._velocity[i][name]
                v *= self.momentum
                v -= self.lr * g
                p += v
        return network


# ---------------------------------------------------------------------------
# binary serialization: magic "OWNN", version u16, arch tag, layer table,
# per-parameter shape headers and little-endian float32 data.

MAGIC = b"OWNN"
FORMAT_VERSION = 1
_KIND_CODES = {k: i + 1 for i, k in enumerate(KINDS)}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


class FormatError(ValueError):
    """Corrupt or unsupported network file."""


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<B", len(raw)) + raw


def _read_str(buf, off):
    (n,) = struct.unpack_from("<B", buf, off)
    off += 1
    return buf[off:off + n].decode("utf-8"), off + n


def save_network(network: Network, path):
    out = bytearray()
    out += MAGIC
    out += struct.pack("<H", FORMAT_VERSION)
    out += _pack_str(network.arch)
    out += struct.pack("<B", len(network.input_shape))
    for d in network.input_shape:
        out += struct.pack("<I", d)
    out += struct.pack("<H", len(network.layers))
    for layer in network.layers:
        spec = layer.spec
        out += struct.pack("<B", _KIND_CODES[spec.kind])
        out += struct.pack("<HHHd", spec.kernel, spec.stride, spec.window, spec.rate)
        out += struct.pack("<I", spec.units if spec.kind != "conv2d" else spec.filters)
        params = layer.params()
        out += struct.pack("<B", len(params))
        for name, p in params.items():
            out += _pack_str(name)
            out += struct.pack("<B", p.ndim)
            for d in p.shape:
                out += struct.pack("<I", d)
            out += np.ascontiguousarray(p, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def load_network(path) -> Network:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    off = 4
    (version,) = struct.unpack_from("<H", buf, off)
    off += 2
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    arch, off = _read_str(buf, off)
    (ndim,) = struct.unpack_from("<B", buf, off)
    off += 1
    input_shape = []
    for _ in range(ndim):
        (d,) = struct.unpack_from("<I", buf, off)
        off += 4
        input_shape.append(d)
    (n_layers,) = struct.unpack_from("<H", buf, off)
    off += 2
    specs = []
    layer_params = []
    for _ in range(n_layers):
        (code,) = struct.unpack_from("<B", buf, off)
        off += 1
        if code not in _CODE_KINDS:
            raise FormatError(f"unknown layer code {code} at offset {off - 1}")
        kind = _CODE_KINDS[code]
        kernel, stride, window, rate = struct.unpack_from("<HHHd", buf, off)
        off += struct.calcsize("<HHHd")
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        kwargs = dict(kernel=kernel, stride=stride, window=window, rate=rate)
        if kind == "conv2d":
            kwargs["filters"] = count
        else:
            kwargs["units"] = count
        specs.append(LayerSpec(kind, **kwargs))
        (n_params,) = struct.unpack_from("<B", buf, off)
        off += 1
        params = {}
        for _ in range(n_params):
            name, off = _read_str(buf, off)
            (pnd,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = []
            for _ in range(pnd):
                (d,) = struct.unpack_from("<I", buf, off)
                off += 4
                shape.append(d)
            nbytes = int(np.prod(shape)) * 4
            arr = np.frombuffer(buf[off:off + nbytes], dtype="<f4").reshape(shape).copy()
            off += nbytes
            params[name] = arr
        layer_params.append(params)
    net = build_network(specs, tuple(input_shape), seed=0, arch=arch, dtype=np.float32)
    for layer, params in zip(net.layers, layer_params):
        own = layer.params()
        if set(own) != set(params):
            raise FormatError(f"parameter set mismatch in a {layer.spec.kind} layer")
        for name, arr in params.items():
            if own[name].shape != arr.shape:
                raise FormatError(f"parameter shape mismatch for {name}")
            own[name][...] = arr
    return net


# ---------------------------------------------------------------------------
# single-sample wrappers matching the per-operation contracts

def conv2d_forward(x, kernels, bias, stride=1):
    if x.ndim != 3:
        raise DimensionError(f"expected H x W x C input, got shape {x.shape}")
    out, _ = conv2d_forward_batch(x[None], kernels, bias, stride)
    return out[0]


def maxpool_forward(x, window):
    if x.ndim != 3:
        raise DimensionError(f"expected H x W x C input, got shape {x.shape}")
    out, _ = maxpool_forward_batch(x[None], window)
    return out[0]


def dropout_forward(x, rate, mode="train", rng=None):
    layer = Dropout(rate)
    return layer.forward(np.asarray(x), train=(mode == "train"), rng=rng)


def dense_forward(x, weights, bias):
    x = np.asarray(x)
    if x.ndim != 1:
        raise DimensionError(f"expected a vector, got shape {x.shape}")
    if weights.shape[1] != x.shape[0]:
        raise DimensionError(
            f"input length {x.shape[0]} != weight columns {weights.shape[1]}")
    return weights @ x + bias


def sigmoid_output(logits):
    return sigmoid(np.asarray(logits))


def bce_loss(scores, target):
    loss, dlogits = bce_loss_batch(np.asarray(scores)[None], np.asarray(target)[None])
    return loss, dlogits[0]


def backward(network: Network, x, target, rng=None):
    """Loss plus exact gradients for a single sample (adds the batch axis)."""
    loss, grads = network.loss_and_gradients(x[None], np.asarray(target)[None], rng=rng)
    return loss, grads


def sgd_step(network: Network, grads, lr, momentum=0.0, optimizer=None):
    opt = optimizer or SGD(lr=lr, momentum=momentum)
    opt.step(network, grads)
    return network
