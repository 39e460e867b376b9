"""Coarse-to-fine field mapping network, written directly in numpy.

Tensors are ``(batch, channels, height, width)``. The network reads a
normalized coarse-field patch, widens it with two stride-1 convolutions,
concatenates both encoder outputs (U-Net skip) and upsamples with stride-2
transposed convolutions. After every upsampling stage the fine density patch,
average-pooled to that stage's resolution, is appended as an extra channel.
A final stride-1 convolution with ReLU gives the nonnegative fine patch.
"""
from __future__ import annotations

import copy
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .fragmap import FragmentBatch, FragmentSpec, NormalizationFactors, block_mean

KERNEL = 3
CONV = "conv"
TCONV = "transposed_conv"
INJECT = "concat_injection"
_KIND_CODES = {CONV: 0, TCONV: 1, INJECT: 2}
_ACT_CODES = {"relu": 0, "linear": 1}


class ModelFileError(ValueError):
    pass


class FingerprintMismatch(ModelFileError):
    pass


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------- layers

def _pad(x, mode):
    if mode == "zeros":
        return np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    if mode == "circular":
        return np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="wrap")
    raise ValueError(f"unknown padding {mode!r}")


def _scatter_taps(z, stride, h_out, w_out):
    """Sum ``z[n, i, j, o, a, b]`` into ``out[n, o, a + s*i, b + s*j]``."""
    n, h, w, o = z.shape[:4]
    full = np.zeros((n, o, stride * (h - 1) + KERNEL, stride * (w - 1) + KERNEL))
    zt = np.ascontiguousarray(z.transpose(0, 3, 4, 5, 1, 2))
    for a in range(KERNEL):
        for b in range(KERNEL):
            full[:, :, a:a + stride * (h - 1) + 1:stride,
                 b:b + stride * (w - 1) + 1:stride] += zt[:, :, a, b]
    return full[:, :, 1:1 + h_out, 1:1 + w_out]


def _gather_taps(y, stride, h, w):
    """Windows ``y_pad[n, c, a + s*i, b + s*j]`` as ``(n, c, h, w, 3, 3)``.

    ``y`` is zero-padded by one on the top/left and enough on the
    bottom/right to make every window exist.
    """
    need_h = stride * (h - 1) + KERNEL
    need_w = stride * (w - 1) + KERNEL
    yp = np.zeros(y.shape[:2] + (need_h, need_w))
    hh = min(y.shape[2], need_h - 1)
    ww = min(y.shape[3], need_w - 1)
    yp[:, :, 1:1 + hh, 1:1 + ww] = y[:, :, :hh, :ww]
    return sliding_window_view(yp, (KERNEL, KERNEL), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d(x, w, b, stride=1, padding="zeros"):
    """3x3 convolution (cross-correlation), padding 1.

    ``w`` is ``(out, in, 3, 3)``; output size is ``ceil(H / stride)``.
    """
    n, c, h, wd = x.shape
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    win = sliding_window_view(_pad(x, padding), (KERNEL, KERNEL), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    return y + b[None, :, None, None]


def conv2d_backward(x, w, dy, stride=1):
    """Gradients ``(dx, dw, db)`` of :func:`conv2d` with zero padding."""
    n, c, h, wd = x.shape
    ho, wo = dy.shape[2:]
    win = sliding_window_view(_pad(x, "zeros"), (KERNEL, KERNEL), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    dw = np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3]))
    db = dy.sum(axis=(0, 2, 3))
    dwin = np.tensordot(dy, w, axes=([1], [0]))          # (n, ho, wo, c, 3, 3)
    dx = _scatter_taps(dwin, stride, h, wd)
    return dx, dw, db


def tconv2d(x, w, b, stride=2):
    """3x3 transposed convolution, padding 1, output ``stride * H``.

    ``w`` is ``(in, out, 3, 3)``. This is the adjoint of :func:`conv2d`
    with the same stride, plus an output padding of ``stride - 1``.
    """
    n, c, h, wd = x.shape
    z = np.tensordot(x, w, axes=([1], [0]))             # (n, h, w, out, 3, 3)
    y = _scatter_taps(z, stride, stride * h, stride * wd)
    return y + b[None, :, None, None]


def tconv2d_backward(x, w, dy, stride=2):
    n, c, h, wd = x.shape
    win = _gather_taps(dy, stride, h, wd)                 # (n, out, h, w, 3, 3)
    dx = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    dw = np.tensordot(x, win, axes=([0, 2, 3], [0, 2, 3]))
    db = dy.sum(axis=(0, 2, 3))
    return dx, dw, db


def relu(z):
    return np.maximum(z, 0.0)


def pool_density(density, size):
    """Average-pool ``(n, fp, fp)`` density patches to ``(n, 1, size, size)``."""
    fp = density.shape[-1]
    return block_mean(density, fp // size)[:, None]


# ---------------------------------------------------------------- model

@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int
    out_channels: int
    stride: int = 1
    activation: str = "relu"
    kernel: int = KERNEL

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kernel != KERNEL:
            raise ValueError("only 3x3 kernels are supported")
        if self.stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        if self.activation not in _ACT_CODES:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.kind == INJECT and self.out_channels != self.in_channels + 1:
            raise ValueError("density injection adds exactly one channel")

    @property
    def weight_shape(self):
        if self.kind == CONV:
            return (self.out_channels, self.in_channels, KERNEL, KERNEL)
        if self.kind == TCONV:
            return (self.in_channels, self.out_channels, KERNEL, KERNEL)
        return None

    @property
    def n_params(self) -> int:
        shape = self.weight_shape
        if shape is None:
            return 0
        return int(np.prod(shape)) + self.out_channels


def _act(z, spec):
    return relu(z) if spec.activation == "relu" else z


def _act_grad(dy, z, spec):
    return dy * (z > 0) if spec.activation == "relu" else dy


@dataclass
class MapNetModel:
    encoder: list
    decoder: list
    head: LayerSpec
    skips: tuple
    fingerprint: tuple          # (coarse_patch, fine_patch, ratio)
    norm: NormalizationFactors
    params: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        expected = self.n_params
        if self.params is None:
            self.params = np.zeros(expected)
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        if self.params.shape != (expected,):
            raise ModelFileError(
                f"parameter vector has {self.params.size} entries, layer specs need {expected}")

    @property
    def layers(self) -> list:
        return list(self.encoder) + list(self.decoder) + [self.head]

    @property
    def n_params(self) -> int:
        return sum(s.n_params for s in self.layers)

    @property
    def coarse_patch(self) -> int:
        return self.fingerprint[0]

    @property
    def fine_patch(self) -> int:
        return self.fingerprint[1]

    def copy(self) -> "MapNetModel":
        return copy.deepcopy(self)

    def _views(self, params):
        """Per-layer ``(w, b)`` views into ``params`` (``None`` for injections)."""
        out, off = [], 0
        for spec in self.layers:
            shape = spec.weight_shape
            if shape is None:
                out.append(None)
                continue
            nw = int(np.prod(shape))
            w = params[off:off + nw].reshape(shape)
            b = params[off + nw:off + nw + spec.out_channels]
            off += nw + spec.out_channels
            out.append((w, b))
        return out

    def check_inputs(self, coarse, density):
        cp, fp = self.coarse_patch, self.fine_patch
        if coarse.ndim != 3 or coarse.shape[1:] != (cp, cp):
            raise ValueError(f"coarse patches must be (n, {cp}, {cp}), got {coarse.shape}")
        if density.shape != (coarse.shape[0], fp, fp):
            raise ValueError(
                f"density patches must be ({coarse.shape[0]}, {fp}, {fp}), got {density.shape}")

    def _run(self, coarse, density, params, keep):
        views = self._views(params)
        tape = []
        h = coarse[:, None].astype(np.float64)
        enc_out = []
        k = 0
        for spec in self.encoder:
            w, b = views[k]
            z = conv2d(h, w, b, spec.stride)
            if keep:
                tape.append((h, z))
            h = _act(z, spec)
            enc_out.append(h)
            k += 1
        h = np.concatenate([enc_out[i] for i in self.skips], axis=1)
        for spec in self.decoder:
            if spec.kind == INJECT:
                h = np.concatenate([h, pool_density(density, h.shape[-1])], axis=1)
                if keep:
                    tape.append(None)
            else:
                w, b = views[k]
                z = (tconv2d(h, w, b, spec.stride) if spec.kind == TCONV
                     else conv2d(h, w, b, spec.stride))
                if keep:
                    tape.append((h, z))
                h = _act(z, spec)
            k += 1
        w, b = views[k]
        z = conv2d(h, w, b, self.head.stride)
        if keep:
            tape.append((h, z))
        y = _act(z, self.head)[:, 0]
        return y, tape

    def forward(self, coarse, density, params=None):
        """Predict normalized fine patches ``(n, fp, fp)`` from normalized coarse patches."""
        coarse = np.asarray(coarse, dtype=np.float64)
        density = np.asarray(density, dtype=np.float64)
        single = coarse.ndim == 2
        if single:
            coarse, density = coarse[None], density[None]
        self.check_inputs(coarse, density)
        y, _ = self._run(coarse, density, self.params if params is None else params, False)
        return y[0] if single else y

    def predict(self, coarse, density, chunk=256):
        out = [self.forward(coarse[i:i + chunk], density[i:i + chunk])
               for i in range(0, len(coarse), chunk)]
        return np.concatenate(out) if out else np.zeros((0, self.fine_patch, self.fine_patch))

    def loss_and_gradient(self, batch: FragmentBatch, params=None):
        """Mean squared error over batch and pixels, and its gradient."""
        if batch.fine is None:
            raise ValueError("batch has no target fine patches")
        params = self.params if params is None else params
        self.check_inputs(batch.coarse, batch.density)
        y, tape = self._run(batch.coarse, batch.density, params, True)
        diff = y - batch.fine
        loss = float(np.mean(diff ** 2))
        grad = np.zeros_like(params)
        gviews = self._views(grad)
        views = self._views(params)

        dh = (2.0 / diff.size) * diff[:, None]
        layers = self.layers
        k = len(layers) - 1
        h, z = tape[k]
        dz = _act_grad(dh, z, self.head)
        dh, gw, gb = conv2d_backward(h, views[k][0], dz, self.head.stride)
        gviews[k][0][...] = gw
        gviews[k][1][...] = gb
        for k in range(len(self.encoder) + len(self.decoder) - 1, len(self.encoder) - 1, -1):
            spec = layers[k]
            if spec.kind == INJECT:
                dh = dh[:, :spec.in_channels]
                continue
            h, z = tape[k]
            dz = _act_grad(dh, z, spec)
            back = tconv2d_backward if spec.kind == TCONV else conv2d_backward
            dh, gw, gb = back(h, views[k][0], dz, spec.stride)
            gviews[k][0][...] = gw
            gviews[k][1][...] = gb

        # split the decoder input back onto the encoder outputs
        d_enc = [None] * len(self.encoder)
        off = 0
        for i in self.skips:
            ch = self.encoder[i].out_channels
            part = dh[:, off:off + ch]
            d_enc[i] = part if d_enc[i] is None else d_enc[i] + part
            off += ch
        carry = None
        for k in range(len(self.encoder) - 1, -1, -1):
            spec = self.encoder[k]
            g = d_enc[k]
            if carry is not None:
                g = carry if g is None else g + carry
            if g is None:
                carry = None
                continue
            h, z = tape[k]
            dz = _act_grad(g, z, spec)
            carry, gw, gb = conv2d_backward(h, views[k][0], dz, spec.stride)
            gviews[k][0][...] = gw
            gviews[k][1][...] = gb
        return loss, grad


def build_model(fspec: FragmentSpec, channels_base: int = 16, *, seed: int = 0,
                norm: NormalizationFactors | None = None) -> MapNetModel:
    """Construct and He-initialise the network for ``fspec``'s patch geometry."""
    up = fspec.fine_patch // fspec.coarse_patch
    if fspec.fine_patch % fspec.coarse_patch or up < 2 or up & (up - 1):
        raise ValueError(f"fine/coarse patch ratio {up} is not a power of two >= 2")
    stages = int(np.log2(up))
    b = channels_base
    encoder = [LayerSpec(CONV, 1, b), LayerSpec(CONV, b, 2 * b)]
    skips = (0, 1)
    c_in = b + 2 * b
    decoder = []
    for k in range(1, stages + 1):
        c_out = max(1, (2 * b) >> k)
        decoder.append(LayerSpec(TCONV, c_in, c_out, stride=2))
        decoder.append(LayerSpec(INJECT, c_out, c_out + 1))
        c_in = c_out + 1
    head = LayerSpec(CONV, c_in, 1, stride=1, activation="relu")
    if norm is None:
        norm = NormalizationFactors(1.0, 1.0)
    model = MapNetModel(encoder, decoder, head, skips, fspec.fingerprint, norm)
    model.params = he_init(model, seed)
    return model


def he_init(model: MapNetModel, seed: int) -> np.ndarray:
    """He-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = np.zeros(model.n_params)
    views = model._views(params)
    for spec, v in zip(model.layers, views):
        if v is None:
            continue
        fan_in = spec.in_channels * KERNEL * KERNEL / spec.stride ** 2 if spec.kind == TCONV \
            else spec.in_channels * KERNEL * KERNEL
        limit = np.sqrt(6.0 / fan_in)
        v[0][...] = rng.uniform(-limit, limit, size=v[0].shape)
    return params


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    steps: int = 1000
    batch_size: int = 64
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be nonnegative")


class Adam:
    def __init__(self, n, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def train(model: MapNetModel, data: FragmentBatch, cfg: TrainConfig, *, callback=None):
    """ADAM on seeded random minibatches. Returns ``(trained copy, loss history)``."""
    n = len(data)
    if n == 0:
        raise ValueError("no training fragments")
    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.n_params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    bs = min(cfg.batch_size, n)
    losses = np.empty(cfg.steps)
    first = None
    for step in range(cfg.steps):
        idx = np.sort(rng.choice(n, size=bs, replace=False))
        loss, grad = model.loss_and_gradient(data.take(idx))
        if first is None:
            first = max(loss, 1e-300)
        if not np.isfinite(loss) or loss > 1e6 * first:
            raise TrainingDiverged(f"loss {loss:g} at step {step} (initial {first:g})")
        opt.step(model.params, grad)
        losses[step] = loss
        if callback is not None:
            callback(step, loss)
    return model, losses


def smoothed(losses, window=50):
    """Means of the first and last ``window`` entries."""
    losses = np.asarray(losses)
    w = max(1, min(window, len(losses) // 2 or 1))
    return float(losses[:w].mean()), float(losses[-w:].mean())


# ---------------------------------------------------------------- file format
#
# "MNET1" | u32 version | u32 n_layers | u32 n_skips | per layer:
# u8 section (0 enc, 1 dec, 2 head), u8 kind, u32 in, u32 out, u8 kernel,
# u8 stride, u8 activation | per skip: u32 index | u32 coarse_patch,
# u32 fine_patch, u32 ratio | f64 coarse factor, f64 fine factor |
# u64 n_params | f64[n_params] | u32 crc32(body). All little-endian.

MAGIC = b"MNET1"
VERSION = 1
_LAYER = struct.Struct("<BBIIBBB")
_KINDS = {v: k for k, v in _KIND_CODES.items()}
_ACTS = {v: k for k, v in _ACT_CODES.items()}


def model_bytes(model: MapNetModel) -> bytes:
    sections = [(0, s) for s in model.encoder] + [(1, s) for s in model.decoder] + [(2, model.head)]
    head = [MAGIC, struct.pack("<III", VERSION, len(sections), len(model.skips))]
    for sec, s in sections:
        head.append(_LAYER.pack(sec, _KIND_CODES[s.kind], s.in_channels, s.out_channels,
                                s.kernel, s.stride, _ACT_CODES[s.activation]))
    head.append(struct.pack(f"<{len(model.skips)}I", *model.skips))
    head.append(struct.pack("<III", *model.fingerprint))
    head.append(struct.pack("<dd", model.norm.coarse, model.norm.fine))
    head.append(struct.pack("<Q", model.params.size))
    body = model.params.astype("<f8").tobytes()
    return b"".join(head) + body + struct.pack("<I", zlib.crc32(body))


def save_model(model: MapNetModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_bytes(model))


def model_from_bytes(raw: bytes, fspec: FragmentSpec | None = None) -> MapNetModel:
    try:
        if raw[:5] != MAGIC:
            raise ModelFileError("not a model file (bad magic)")
        off = 5
        version, n_layers, n_skips = struct.unpack_from("<III", raw, off)
        off += 12
        if version != VERSION:
            raise ModelFileError(f"unsupported model file version {version}")
        enc, dec, head = [], [], None
        for _ in range(n_layers):
            sec, kind, cin, cout, kern, stride, act = _LAYER.unpack_from(raw, off)
            off += _LAYER.size
            spec = LayerSpec(_KINDS[kind], cin, cout, stride, _ACTS[act], kern)
            if sec == 0:
                enc.append(spec)
            elif sec == 1:
                dec.append(spec)
            else:
                head = spec
        skips = struct.unpack_from(f"<{n_skips}I", raw, off)
        off += 4 * n_skips
        fingerprint = struct.unpack_from("<III", raw, off)
        off += 12
        coarse_f, fine_f = struct.unpack_from("<dd", raw, off)
        off += 16
        (n_params,) = struct.unpack_from("<Q", raw, off)
        off += 8
    except (struct.error, KeyError, ValueError) as exc:
        if isinstance(exc, ModelFileError):
            raise
        raise ModelFileError(f"corrupt model header: {exc}") from exc
    body = raw[off:off + 8 * n_params]
    if len(body) != 8 * n_params or len(raw) != off + 8 * n_params + 4:
        raise ModelFileError("corrupt model file (truncated or trailing bytes)")
    (crc,) = struct.unpack_from("<I", raw, off + 8 * n_params)
    if zlib.crc32(body) != crc:
        raise ModelFileError("corrupt model file (checksum mismatch)")
    if head is None:
        raise ModelFileError("corrupt model file (no output layer)")
    if fspec is not None and tuple(fspec.fingerprint) != tuple(fingerprint):
        raise FingerprintMismatch(
            f"model was built for patches {fingerprint}, caller expects {fspec.fingerprint}")
    params = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return MapNetModel(enc, dec, head, tuple(skips), tuple(fingerprint),
                       NormalizationFactors(coarse_f, fine_f), params)


def load_model(path, fspec: FragmentSpec | None = None) -> MapNetModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read(), fspec)
