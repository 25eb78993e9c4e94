"""Trainable keypoint codec: dense encoder, Gray-coded uniform quantizer,
dense decoder, and an incremental second stage for HARQ.

Encoder: widths [2n, 512, 256, m], relu/relu/sigmoid, so each of the m
symbols lives in (0, 1). Each symbol is quantized to quant_bits bits
(default 2, i.e. 160 bits per frame at m = 80). Decoder mirrors it with
widths [m, 512, 256, 2n] and relu/relu/tanh.

Training minimizes ||k - k_hat||^2 / (2n) with the quantizer (and any bit
flips injected between quantize and dequantize) treated as identity in the
backward pass, clipped to [0, 1]: the straight-through estimator.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import phy
from .kpstream import KeypointFrame, KeypointStream

HIDDEN_WIDTHS = (512, 256)
DEFAULT_M = 80
DEFAULT_QUANT_BITS = 2


class TrainingError(RuntimeError):
    """Training aborted (diverged loss or invalid model state)."""


# --- activations -----------------------------------------------------------

def _act_forward(name, x):
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-x))
    if name == "tanh":
        return np.tanh(x)
    raise ValueError(f"unknown activation {name!r}")


def _act_grad_from_output(name, y):
    if name == "relu":
        return (y > 0.0).astype(np.float64)
    if name == "sigmoid":
        return y * (1.0 - y)
    if name == "tanh":
        return 1.0 - y * y
    raise ValueError(f"unknown activation {name!r}")


class Mlp:
    """Plain fully connected stack operating on (batch, features) arrays."""

    def __init__(self, widths, acts, rng=None):
        if len(acts) != len(widths) - 1:
            raise ValueError("need one activation per layer")
        self.widths = list(widths)
        self.acts = list(acts)
        self.Ws = []
        self.bs = []
        if rng is None:
            rng = np.random.default_rng(0)
        for fan_in, fan_out, act in zip(widths[:-1], widths[1:], acts):
            if act == "relu":
                W = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            else:
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                W = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            self.Ws.append(W)
            self.bs.append(np.zeros(fan_out))

    def forward(self, x):
        for W, b, act in zip(self.Ws, self.bs, self.acts):
            x = _act_forward(act, x @ W + b)
        return x

    def forward_cached(self, x):
        outs = [x]
        for W, b, act in zip(self.Ws, self.bs, self.acts):
            outs.append(_act_forward(act, outs[-1] @ W + b))
        return outs[-1], outs

    def backward(self, outs, grad_out):
        """Gradients for every (W, b) plus the gradient w.r.t. the input."""
        grads = [None] * len(self.Ws)
        g = grad_out
        for i in range(len(self.Ws) - 1, -1, -1):
            g = g * _act_grad_from_output(self.acts[i], outs[i + 1])
            dW = outs[i].T @ g
            db = g.sum(axis=0)
            grads[i] = (dW, db)
            g = g @ self.Ws[i].T
        return grads, g

    def params(self):
        out = []
        for W, b in zip(self.Ws, self.bs):
            out += [W, b]
        return out

    def copy(self):
        return copy.deepcopy(self)


class Adam:
    def __init__(self, params, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# --- quantizer --------------------------------------------------------------

_clamp_events = 0


def quant_clamp_count() -> int:
    """Debug counter: inputs seen outside [0, 1] (clamped, not an error)."""
    return _clamp_events


def reset_quant_clamp_count() -> None:
    global _clamp_events
    _clamp_events = 0


def _gray_encode(idx):
    return idx ^ (idx >> 1)


def _gray_decode(gray):
    idx = gray.copy() if isinstance(gray, np.ndarray) else gray
    idx = idx ^ (idx >> 1)
    idx = idx ^ (idx >> 2)
    idx = idx ^ (idx >> 4)
    return idx


def quantize_array(values, bits: int = DEFAULT_QUANT_BITS) -> np.ndarray:
    """Uniform 2^bits-level quantization of values in [0, 1].

    Levels sit at j/(2^bits - 1); nearest-level rounding with ties toward
    the lower level; the level index is emitted in Gray code, MSB first.
    Output shape is values.shape + (bits,).
    """
    global _clamp_events
    v = np.asarray(values, dtype=np.float64)
    oob = int(np.count_nonzero((v < 0.0) | (v > 1.0)))
    if oob:
        _clamp_events += oob
        v = np.clip(v, 0.0, 1.0)
    q = (1 << bits) - 1
    idx = np.ceil(v * q - 0.5).astype(np.int64)  # ties go to the lower level
    idx = np.clip(idx, 0, q)
    gray = _gray_encode(idx)
    shifts = np.arange(bits - 1, -1, -1)
    return ((gray[..., None] >> shifts) & 1).astype(np.uint8)


def dequantize_array(bit_groups, bits: int = DEFAULT_QUANT_BITS) -> np.ndarray:
    """Inverse of quantize_array: bit groups (..., bits) back to level values."""
    b = np.asarray(bit_groups, dtype=np.int64)
    if b.shape[-1] != bits:
        raise ValueError(f"last axis must have {bits} bits, got {b.shape[-1]}")
    shifts = np.arange(bits - 1, -1, -1)
    gray = (b << shifts).sum(axis=-1)
    idx = _gray_decode(gray)
    return idx.astype(np.float64) / ((1 << bits) - 1)


def quantize(v: float, bits: int = DEFAULT_QUANT_BITS) -> tuple:
    """Scalar quantization; returns the Gray-coded bit tuple, MSB first."""
    return tuple(int(x) for x in quantize_array(np.array(v), bits))


def dequantize(bit_tuple) -> float:
    """Scalar dequantization of a Gray-coded bit tuple."""
    bits = len(bit_tuple)
    return float(dequantize_array(np.asarray(bit_tuple), bits))


# --- model ------------------------------------------------------------------

@dataclass
class CodecModel:
    """Encoder/decoder stacks plus quantizer config; enc2/dec2 hold the
    optional incremental stage (dec2 consumes both stages' symbols)."""

    n: int
    m: int
    quant_bits: int
    enc: Mlp
    dec: Mlp
    enc2: Mlp | None = None
    dec2: Mlp | None = None

    @property
    def bits_per_frame(self) -> int:
        return self.m * self.quant_bits

    @property
    def has_stage2(self) -> bool:
        return self.enc2 is not None and self.dec2 is not None

    @staticmethod
    def build(n: int = 10, m: int = DEFAULT_M, quant_bits: int = DEFAULT_QUANT_BITS,
              seed: int = 0) -> "CodecModel":
        rng = np.random.default_rng(seed)
        enc = Mlp([2 * n, *HIDDEN_WIDTHS, m], ["relu", "relu", "sigmoid"], rng)
        dec = Mlp([m, *HIDDEN_WIDTHS, 2 * n], ["relu", "relu", "tanh"], rng)
        return CodecModel(n=n, m=m, quant_bits=quant_bits, enc=enc, dec=dec)

    def add_stage2(self, seed: int = 0) -> None:
        rng = np.random.default_rng(seed)
        # the incremental encoder starts from the trained first-stage weights
        self.enc2 = self.enc.copy()
        self.dec2 = Mlp([2 * self.m, *HIDDEN_WIDTHS, 2 * self.n],
                        ["relu", "relu", "tanh"], rng)

    def copy(self) -> "CodecModel":
        return copy.deepcopy(self)


def stage1_hash(model: CodecModel) -> str:
    """SHA-256 over the first-stage weights; detects accidental mutation."""
    h = hashlib.sha256()
    for arr in model.enc.params() + model.dec.params():
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def _frame_to_vec(frame, n):
    if isinstance(frame, KeypointFrame):
        if frame.n != n:
            raise ValueError(f"frame has n={frame.n}, model expects {n}")
        return frame.flat()
    v = np.asarray(frame, dtype=np.float64).reshape(-1)
    if v.size != 2 * n:
        raise ValueError(f"expected {2 * n} coordinates, got {v.size}")
    return v


def encode(model: CodecModel, frame) -> np.ndarray:
    """Frame -> m*quant_bits transmit bits."""
    x = _frame_to_vec(frame, model.n)
    z = model.enc.forward(x[None, :])[0]
    return quantize_array(z, model.quant_bits).reshape(-1)


def encode_stage2(model: CodecModel, frame) -> np.ndarray:
    """Frame -> the incremental m*quant_bits bits."""
    if not model.has_stage2:
        raise TrainingError("model has no trained stage-2")
    x = _frame_to_vec(frame, model.n)
    z = model.enc2.forward(x[None, :])[0]
    return quantize_array(z, model.quant_bits).reshape(-1)


def decode(model: CodecModel, bits, stage: str = "first") -> KeypointFrame:
    """Received bits -> keypoint frame. stage='first' consumes
    m*quant_bits bits; stage='combined' consumes twice that and uses the
    stage-2 decoder on both stages' symbols."""
    bits = np.asarray(bits, dtype=np.uint8).reshape(-1)
    if stage == "first":
        expect = model.bits_per_frame
        net = model.dec
    elif stage == "combined":
        if not model.has_stage2:
            raise TrainingError("model has no trained stage-2")
        expect = 2 * model.bits_per_frame
        net = model.dec2
    else:
        raise ValueError(f"unknown stage {stage!r}")
    if bits.size != expect:
        raise ValueError(f"stage {stage!r} needs {expect} bits, got {bits.size}")
    v = dequantize_array(bits.reshape(-1, model.quant_bits), model.quant_bits)
    y = net.forward(v[None, :])[0]
    return KeypointFrame(y.reshape(-1, 2))


def decode_flat(model: CodecModel, bits, stage: str = "first") -> np.ndarray:
    """decode() without the frame wrapper, for hot loops."""
    bits = np.asarray(bits, dtype=np.uint8).reshape(-1)
    v = dequantize_array(bits.reshape(-1, model.quant_bits), model.quant_bits)
    net = model.dec if stage == "first" else model.dec2
    return net.forward(v[None, :])[0]


# --- training ---------------------------------------------------------------

@dataclass
class OfdmTrainSpec:
    """Train through the fading channel: per batch one realization is drawn
    and bits flip with the closed-form per-position 16-QAM probabilities.

    Either a fixed noise_power or a uniform snr_db_range sampled per batch.
    """

    noise_power: float | None = None
    snr_db_range: tuple | None = None
    L: int = phy.DEFAULT_SUBCHANNELS
    num_taps: int = 3
    pdp_decay: float = 1.0
    use_csi: bool = False
    powers: np.ndarray | None = None

    def __post_init__(self):
        if (self.noise_power is None) == (self.snr_db_range is None):
            raise ValueError("set exactly one of noise_power, snr_db_range")

    def draw_noise_power(self, rng) -> float:
        if self.noise_power is not None:
            return self.noise_power
        lo, hi = self.snr_db_range
        return 10.0 ** (-rng.uniform(lo, hi) / 10.0)

    def draw_channel(self, rng) -> phy.ChannelRealization:
        return phy.realize_channel(rng, L=self.L, num_taps=self.num_taps,
                                   pdp_decay=self.pdp_decay,
                                   noise_power=self.draw_noise_power(rng))

    def subchannel_snrs(self, ch: phy.ChannelRealization) -> np.ndarray:
        rho = np.ones(self.L) if self.powers is None else self.powers
        snrs = np.abs(ch.gains) ** 2 * rho / ch.noise_power
        if self.use_csi:
            snrs = snrs[phy.sort_csi(ch).order]
        return snrs

    def bit_flip_probs(self, nbits: int, rng) -> np.ndarray:
        snrs = self.subchannel_snrs(self.draw_channel(rng))
        sym = np.arange((nbits + 3) // 4)
        sub_snr = snrs[sym % self.L]
        probs = np.empty((sym.size, 4))
        for s, snr in enumerate(sub_snr):
            p1, p2 = phy.qam16_bit_error_probs(snr)
            probs[s] = (p1, p2, p1, p2)
        return probs.reshape(-1)[:nbits]


@dataclass
class TrainConfig:
    """Adam settings and the training-time bit error model.

    train_ber: a fixed flip probability, or an inclusive (lo, hi) range
    sampled uniformly per batch. channel: optional OfdmTrainSpec that
    replaces the BSC with fading-derived flip probabilities.
    """

    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 64
    epochs: int = 200
    train_ber: float | tuple = 0.0
    seed: int = 0
    val_fraction: float = 0.1
    channel: OfdmTrainSpec | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        bers = self.train_ber if isinstance(self.train_ber, tuple) else (self.train_ber,)
        for b in bers:
            if not 0.0 <= b <= 0.5:
                raise ValueError(f"train_ber must be in [0, 0.5], got {b}")

    def batch_flip_probs(self, nbits: int, rng):
        """Per-bit flip probabilities for one batch (scalar or array)."""
        if self.channel is not None:
            return self.channel.bit_flip_probs(nbits, rng)
        if isinstance(self.train_ber, tuple):
            lo, hi = self.train_ber
            return rng.uniform(lo, hi)
        return self.train_ber


@dataclass
class TrainResult:
    model: CodecModel
    history: list  # rows of (epoch, train_loss, val_loss)


def _streams_to_matrix(streams) -> np.ndarray:
    if not streams:
        raise ValueError("streams must be nonempty")
    mats = [s.as_array() if isinstance(s, KeypointStream) else np.asarray(s) for s in streams]
    return np.concatenate(mats, axis=0)


def _split_train_val(X, val_fraction, rng):
    idx = rng.permutation(X.shape[0])
    n_val = max(1, int(round(val_fraction * X.shape[0])))
    return X[idx[n_val:]], X[idx[:n_val]]


def _corrupt(bits, probs, rng):
    if np.isscalar(probs):
        if probs == 0.0:
            return bits
        flips = rng.random(bits.shape) < probs
    else:
        flips = rng.random(bits.shape) < probs[None, :]
    return bits ^ flips.astype(np.uint8)


def _mse_loss(y, target, n):
    d = y - target
    return float(np.mean(np.sum(d * d, axis=1) / (2 * n)))


def train_stage1(model: CodecModel, streams, cfg: TrainConfig) -> TrainResult:
    """Train encoder and decoder through quantization and bit flips.

    Returns a new model; the input model is left untouched. The quantizer
    and the flip channel are identity in the backward pass (flips are
    forward-only noise).
    """
    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    X = _streams_to_matrix(streams)
    Xtr, Xval = _split_train_val(X, cfg.val_fraction, rng)
    n, m, qb = model.n, model.m, model.quant_bits
    nbits = m * qb

    opt = Adam(model.enc.params() + model.dec.params(),
               lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    # fixed validation corruption so val_loss is a function of weights only
    val_rng = np.random.default_rng(cfg.seed + 1)
    val_probs = cfg.batch_flip_probs(nbits, val_rng)
    val_flips = (val_rng.random((Xval.shape[0], nbits)) <
                 (val_probs if np.isscalar(val_probs) else val_probs[None, :]))
    val_flips = val_flips.astype(np.uint8)

    def eval_val():
        z = model.enc.forward(Xval)
        bits = quantize_array(z, qb).reshape(Xval.shape[0], nbits) ^ val_flips
        v = dequantize_array(bits.reshape(Xval.shape[0], m, qb), qb)
        return _mse_loss(model.dec.forward(v), Xval, n)

    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(Xtr.shape[0])
        losses = []
        for start in range(0, Xtr.shape[0], cfg.batch_size):
            xb = Xtr[order[start:start + cfg.batch_size]]
            B = xb.shape[0]
            z, enc_outs = model.enc.forward_cached(xb)
            bits = quantize_array(z, qb).reshape(B, nbits)
            bits = _corrupt(bits, cfg.batch_flip_probs(nbits, rng), rng)
            v = dequantize_array(bits.reshape(B, m, qb), qb)
            y, dec_outs = model.dec.forward_cached(v)
            loss = _mse_loss(y, xb, n)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            losses.append(loss)
            dy = (y - xb) / (n * B)
            dec_grads, dv = model.dec.backward(dec_outs, dy)
            dz = dv * ((z >= 0.0) & (z <= 1.0))  # straight-through clip
            enc_grads, _ = model.enc.backward(enc_outs, dz)
            flat = [g for pair in enc_grads + dec_grads for g in pair]
            opt.step(flat)
        history.append((epoch, float(np.mean(losses)), eval_val()))
    return TrainResult(model=model, history=history)


def train_stage2(model: CodecModel, streams, cfg: TrainConfig) -> TrainResult:
    """Train the incremental encoder and the combined decoder; the
    first-stage weights are frozen (bit-identical before and after)."""
    if model.enc is None or model.dec is None:
        raise TrainingError("stage-1 must be trained first")
    model = model.copy()
    if not model.has_stage2:
        model.add_stage2(seed=cfg.seed + 7)
    frozen = stage1_hash(model)

    rng = np.random.default_rng(cfg.seed)
    X = _streams_to_matrix(streams)
    Xtr, Xval = _split_train_val(X, cfg.val_fraction, rng)
    n, m, qb = model.n, model.m, model.quant_bits
    nbits = m * qb

    opt = Adam(model.enc2.params() + model.dec2.params(),
               lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    val_rng = np.random.default_rng(cfg.seed + 1)
    vp = cfg.batch_flip_probs(2 * nbits, val_rng)
    val_flips = (val_rng.random((Xval.shape[0], 2 * nbits)) <
                 (vp if np.isscalar(vp) else vp[None, :])).astype(np.uint8)

    def eval_val():
        b1 = quantize_array(model.enc.forward(Xval), qb).reshape(Xval.shape[0], nbits)
        b2 = quantize_array(model.enc2.forward(Xval), qb).reshape(Xval.shape[0], nbits)
        bits = np.concatenate([b1, b2], axis=1) ^ val_flips
        v = dequantize_array(bits.reshape(Xval.shape[0], 2 * m, qb), qb)
        return _mse_loss(model.dec2.forward(v), Xval, n)

    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(Xtr.shape[0])
        losses = []
        for start in range(0, Xtr.shape[0], cfg.batch_size):
            xb = Xtr[order[start:start + cfg.batch_size]]
            B = xb.shape[0]
            z1 = model.enc.forward(xb)
            b1 = quantize_array(z1, qb).reshape(B, nbits)
            z2, enc2_outs = model.enc2.forward_cached(xb)
            b2 = quantize_array(z2, qb).reshape(B, nbits)
            bits = np.concatenate([b1, b2], axis=1)
            bits = _corrupt(bits, cfg.batch_flip_probs(2 * nbits, rng), rng)
            v = dequantize_array(bits.reshape(B, 2 * m, qb), qb)
            y, dec2_outs = model.dec2.forward_cached(v)
            loss = _mse_loss(y, xb, n)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            losses.append(loss)
            dy = (y - xb) / (n * B)
            dec2_grads, dv = model.dec2.backward(dec2_outs, dy)
            dz2 = dv[:, m:] * ((z2 >= 0.0) & (z2 <= 1.0))
            enc2_grads, _ = model.enc2.backward(enc2_outs, dz2)
            flat = [g for pair in enc2_grads + dec2_grads for g in pair]
            opt.step(flat)
        history.append((epoch, float(np.mean(losses)), eval_val()))

    if stage1_hash(model) != frozen:
        raise TrainingError("stage-1 weights changed during stage-2 training")
    return TrainResult(model=model, history=history)


# --- gradient check ---------------------------------------------------------

def grad_check(model: CodecModel, frame, epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients
    of the MSE loss on the quantizer-bypassed path (quantizer = identity)."""
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must be in [1e-7, 1e-3]")
    x = _frame_to_vec(frame, model.n)[None, :]
    n = model.n

    # flattened 1-D forward keeps the finite-difference loop affordable
    layers = [(W, b, act) for net in (model.enc, model.dec)
              for W, b, act in zip(net.Ws, net.bs, net.acts)]
    x1 = x[0]

    def loss():
        h = x1
        for W, b, act in layers:
            h = h @ W + b
            if act == "relu":
                h = np.maximum(h, 0.0)
            elif act == "sigmoid":
                h = 1.0 / (1.0 + np.exp(-h))
            else:
                h = np.tanh(h)
        d = h - x1
        return float(d @ d) / (2 * n)

    z, enc_outs = model.enc.forward_cached(x)
    y, dec_outs = model.dec.forward_cached(z)
    dy = (y - x) / n
    dec_grads, dv = model.dec.backward(dec_outs, dy)
    enc_grads, _ = model.enc.backward(enc_outs, dv)
    analytic = [g for pair in enc_grads + dec_grads for g in pair]
    params = model.enc.params() + model.dec.params()

    max_rel = 0.0
    for p, g in zip(params, analytic):
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + epsilon
            lp = loss()
            flat_p[i] = orig - epsilon
            lm = loss()
            flat_p[i] = orig
            fd = (lp - lm) / (2 * epsilon)
            a = flat_g[i]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
            if rel > max_rel:
                max_rel = rel
    return max_rel


# --- constellation-mode codecs ----------------------------------------------

@dataclass
class SymbolCodec:
    """Codec whose m outputs feed the channel as constellation symbols.

    mode='qam16': sigmoid outputs quantized to bits, carried as 16-QAM.
    mode='full_resolution': tanh outputs transmitted directly as I/Q reals.
    mode='quantized_resolution': quantized bits mapped through the learned
    (alpha, beta) two-parameter constellation; the receiver keeps soft reals.
    powers holds the learned per-subchannel transmit powers (mean 1).
    """

    n: int
    m: int
    mode: str
    enc: Mlp
    dec: Mlp
    alpha: float = 2.0
    beta: float = 1.0
    powers: np.ndarray | None = None
    quant_bits: int = DEFAULT_QUANT_BITS

    @staticmethod
    def build(mode: str, n: int = 10, m: int = 160, seed: int = 0) -> "SymbolCodec":
        rng = np.random.default_rng(seed)
        out_act = "tanh" if mode == "full_resolution" else "sigmoid"
        enc = Mlp([2 * n, *HIDDEN_WIDTHS, m], ["relu", "relu", out_act], rng)
        dec = Mlp([m, *HIDDEN_WIDTHS, 2 * n], ["relu", "relu", "tanh"], rng)
        return SymbolCodec(n=n, m=m, mode=mode, enc=enc, dec=dec)

    def constellation(self) -> "phy.ConstellationMode":
        return phy.ConstellationMode(self.mode, alpha=self.alpha, beta=self.beta,
                                     powers=self.powers)

    def copy(self) -> "SymbolCodec":
        return copy.deepcopy(self)


@dataclass
class SymbolTrainConfig:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 64
    epochs: int = 200
    seed: int = 0
    val_fraction: float = 0.1
    snr_db_range: tuple = (0.0, 14.0)
    L: int = phy.DEFAULT_SUBCHANNELS
    num_taps: int = 3
    pdp_decay: float = 1.0
    use_csi: bool = True
    learn_powers: bool = True
    power_grid: tuple = (0.5, 0.75, 1.0, 1.5, 2.0)
    power_update_every: int = 20


def _symbol_noise(B, m, rng, cfg, powers):
    """Equalized per-real-symbol noise for one batch: draws a realization,
    maps real-symbol positions to subchannels, returns N(0, sigma^2/(2|h|^2 rho))."""
    noise_power = 10.0 ** (-rng.uniform(*cfg.snr_db_range) / 10.0)
    ch = phy.realize_channel(rng, L=cfg.L, num_taps=cfg.num_taps,
                             pdp_decay=cfg.pdp_decay, noise_power=noise_power)
    rho = np.ones(cfg.L) if powers is None else powers
    g2 = np.abs(ch.gains) ** 2 * rho
    if cfg.use_csi:
        g2 = g2[phy.sort_csi(ch).order]
    cplx = np.arange(m // 2)
    per_real_var = np.repeat(noise_power / (2.0 * g2[cplx % cfg.L]), 2)
    return rng.standard_normal((B, m)) * np.sqrt(per_real_var)[None, :]


def train_symbol_codec(codec: SymbolCodec, streams, cfg: SymbolTrainConfig) -> TrainResult:
    """End-to-end training of a constellation-mode codec through the fading
    channel. alpha/beta get exact gradients; the quantizer is straight-through;
    per-subchannel powers are refined by coordinate descent on a grid."""
    codec = codec.copy()
    if codec.m % 2 != 0:
        raise ValueError("m must be even (I/Q pairing)")
    rng = np.random.default_rng(cfg.seed)
    X = _streams_to_matrix(streams)
    Xtr, Xval = _split_train_val(X, cfg.val_fraction, rng)
    n, m, qb = codec.n, codec.m, codec.quant_bits
    if cfg.learn_powers and codec.powers is None:
        codec.powers = np.ones(cfg.L)

    opt = Adam(codec.enc.params() + codec.dec.params(),
               lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    ab_opt = Adam([np.array([codec.alpha]), np.array([codec.beta])], lr=1e-3) \
        if codec.mode == "quantized_resolution" else None

    def forward(xb, powers, noise_rng, collect=False):
        """Returns (loss, caches) for one batch under one channel draw."""
        B = xb.shape[0]
        if codec.mode == "full_resolution":
            s, enc_outs = codec.enc.forward_cached(xb)
            v = s + _symbol_noise(B, m, noise_rng, cfg, powers)
            aux = None
        elif codec.mode == "quantized_resolution":
            z, enc_outs = codec.enc.forward_cached(xb)
            bits = quantize_array(z, qb)  # (B, m, qb)
            c = 2.0 * bits.astype(np.float64) - 1.0
            s = codec.alpha * c[:, :, 0] + codec.beta * c[:, :, 1]
            v = s + _symbol_noise(B, m, noise_rng, cfg, powers)
            aux = (z, c)
        else:  # qam16: hard-decided bits, dequantized at the receiver
            z, enc_outs = codec.enc.forward_cached(xb)
            bits = quantize_array(z, qb).reshape(B, m * qb)
            spec = OfdmTrainSpec(snr_db_range=cfg.snr_db_range, L=cfg.L,
                                 num_taps=cfg.num_taps, pdp_decay=cfg.pdp_decay,
                                 use_csi=cfg.use_csi, powers=powers)
            probs = spec.bit_flip_probs(m * qb, noise_rng)
            flips = (noise_rng.random(bits.shape) < probs[None, :]).astype(np.uint8)
            v = dequantize_array((bits ^ flips).reshape(B, m, qb), qb)
            aux = (z,)
        y, dec_outs = codec.dec.forward_cached(v)
        loss = _mse_loss(y, xb, n)
        if not collect:
            return loss, None
        return loss, (enc_outs, dec_outs, y, aux)

    def val_loss(powers):
        # averaged over a few frozen channel draws so power updates compare
        # candidates on identical noise
        return float(np.mean([
            forward(Xval, powers, np.random.default_rng(cfg.seed + 90 + i))[0]
            for i in range(4)
        ]))

    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(Xtr.shape[0])
        losses = []
        for start in range(0, Xtr.shape[0], cfg.batch_size):
            xb = Xtr[order[start:start + cfg.batch_size]]
            B = xb.shape[0]
            loss, (enc_outs, dec_outs, y, aux) = forward(xb, codec.powers, rng, collect=True)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            losses.append(loss)
            dy = (y - xb) / (n * B)
            dec_grads, dv = codec.dec.backward(dec_outs, dy)
            if codec.mode == "full_resolution":
                enc_grads, _ = codec.enc.backward(enc_outs, dv)
            elif codec.mode == "quantized_resolution":
                z, c = aux
                da = float(np.sum(dv * c[:, :, 0]))
                db = float(np.sum(dv * c[:, :, 1]))
                dz = dv * (codec.alpha + codec.beta) * ((z >= 0.0) & (z <= 1.0))
                enc_grads, _ = codec.enc.backward(enc_outs, dz)
                ab_opt.step([np.array([da]), np.array([db])])
                codec.alpha = float(ab_opt.params[0][0])
                codec.beta = float(ab_opt.params[1][0])
            else:
                (z,) = aux
                dz = dv * ((z >= 0.0) & (z <= 1.0))
                enc_grads, _ = codec.enc.backward(enc_outs, dz)
            opt.step([g for pair in enc_grads + dec_grads for g in pair])

        if (cfg.learn_powers and codec.mode != "qam16"
                and (epoch + 1) % cfg.power_update_every == 0):
            for l in range(cfg.L):
                best_p, best_l = codec.powers.copy(), val_loss(codec.powers)
                for mult in cfg.power_grid:
                    cand = codec.powers.copy()
                    cand[l] = mult
                    cand = cand * (cfg.L / cand.sum())
                    cl = val_loss(cand)
                    if cl < best_l:
                        best_p, best_l = cand, cl
                codec.powers = best_p
        history.append((epoch, float(np.mean(losses)), val_loss(codec.powers)))
    return TrainResult(model=codec, history=history)


def symbol_codec_mse(codec: SymbolCodec, frames, noise_power: float, seed=0,
                     L: int = phy.DEFAULT_SUBCHANNELS, num_taps: int = 3,
                     pdp_decay: float = 1.0, use_csi: bool = True) -> np.ndarray:
    """Per-frame keypoint MSE through the actual symbol-level channel, one
    fresh realization per frame. The qam16 mode keeps uniform power (the
    conventional reference); symbol modes use the codec's learned powers."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    X = np.asarray(frames, dtype=np.float64)
    mode = codec.constellation()
    out = np.empty(X.shape[0])
    for i, x in enumerate(X):
        ch = phy.realize_channel(rng, L=L, num_taps=num_taps, pdp_decay=pdp_decay,
                                 noise_power=noise_power)
        if codec.mode == "full_resolution":
            s = codec.enc.forward(x[None, :])[0]
            v = phy.transmit_symbols(s, ch, mode, use_csi=use_csi, seed=rng)
        elif codec.mode == "quantized_resolution":
            z = codec.enc.forward(x[None, :])[0]
            bits = quantize_array(z, codec.quant_bits).reshape(-1)
            v = phy.transmit_symbols(bits, ch, mode, use_csi=use_csi, seed=rng)
        else:
            z = codec.enc.forward(x[None, :])[0]
            bits = quantize_array(z, codec.quant_bits).reshape(-1)
            rx, _ = phy.transmit_bits(bits, ch, phy.ConstellationMode("qam16"),
                                      use_csi=use_csi, seed=rng)
            v = dequantize_array(rx.reshape(-1, codec.quant_bits), codec.quant_bits)
        y = codec.dec.forward(v[None, :])[0]
        d = y - x
        out[i] = float(np.sum(d * d) / (2 * codec.n))
    return out


# --- persistence ------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _write_mlp(fh, name: str, net: Mlp) -> None:
    fh.write(f"stack {name} {len(net.Ws)}\n")
    for W, b, act in zip(net.Ws, net.bs, net.acts):
        fh.write(f"layer {W.shape[0]} {W.shape[1]} {act}\n")
        for row in W:
            fh.write(" ".join(_fmt(v) for v in row) + "\n")
        fh.write(" ".join(_fmt(v) for v in b) + "\n")


def _read_mlp(lines, pos):
    head = lines[pos].split()
    if head[0] != "stack":
        raise ValueError(f"expected stack header, got {lines[pos]!r}")
    name, nlayers = head[1], int(head[2])
    pos += 1
    net = Mlp.__new__(Mlp)
    net.Ws, net.bs, net.acts, net.widths = [], [], [], []
    for _ in range(nlayers):
        _, fin, fout, act = lines[pos].split()
        fin, fout = int(fin), int(fout)
        pos += 1
        W = np.array([[float(v) for v in lines[pos + r].split()] for r in range(fin)])
        pos += fin
        b = np.array([float(v) for v in lines[pos].split()])
        pos += 1
        if W.shape != (fin, fout) or b.shape != (fout,):
            raise ValueError(f"stack {name}: bad layer shape")
        net.Ws.append(W)
        net.bs.append(b)
        net.acts.append(act)
    net.widths = [net.Ws[0].shape[0]] + [W.shape[1] for W in net.Ws]
    return name, net, pos


def save_model(model: CodecModel, path) -> None:
    """Self-describing text format (.svcmodel): header then row-major
    full-precision decimal weights."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("svclink-model 1\n")
        fh.write("kind codec\n")
        fh.write(f"n {model.n}\nm {model.m}\nquant_bits {model.quant_bits}\n")
        fh.write(f"has_stage2 {int(model.has_stage2)}\n")
        _write_mlp(fh, "enc", model.enc)
        _write_mlp(fh, "dec", model.dec)
        if model.has_stage2:
            _write_mlp(fh, "enc2", model.enc2)
            _write_mlp(fh, "dec2", model.dec2)
        fh.write("end\n")


def load_model(path) -> CodecModel:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if lines[0] != "svclink-model 1" or lines[1] != "kind codec":
        raise ValueError(f"{path}: not a codec model file")
    meta = {}
    pos = 2
    while " " in lines[pos] and lines[pos].split()[0] in ("n", "m", "quant_bits", "has_stage2"):
        k, v = lines[pos].split()
        meta[k] = int(v)
        pos += 1
    nets = {}
    while lines[pos] != "end":
        name, net, pos = _read_mlp(lines, pos)
        nets[name] = net
    return CodecModel(n=meta["n"], m=meta["m"], quant_bits=meta["quant_bits"],
                      enc=nets["enc"], dec=nets["dec"],
                      enc2=nets.get("enc2"), dec2=nets.get("dec2"))


def save_symbol_codec(codec: SymbolCodec, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("svclink-model 1\n")
        fh.write("kind symbol_codec\n")
        fh.write(f"mode {codec.mode}\n")
        fh.write(f"n {codec.n}\nm {codec.m}\nquant_bits {codec.quant_bits}\n")
        fh.write(f"alpha {_fmt(codec.alpha)}\nbeta {_fmt(codec.beta)}\n")
        if codec.powers is None:
            fh.write("powers none\n")
        else:
            fh.write("powers " + " ".join(_fmt(v) for v in codec.powers) + "\n")
        _write_mlp(fh, "enc", codec.enc)
        _write_mlp(fh, "dec", codec.dec)
        fh.write("end\n")


def load_symbol_codec(path) -> SymbolCodec:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if lines[0] != "svclink-model 1" or lines[1] != "kind symbol_codec":
        raise ValueError(f"{path}: not a symbol codec file")
    fields = {}
    pos = 2
    while not lines[pos].startswith("stack"):
        k, v = lines[pos].split(" ", 1)
        fields[k] = v
        pos += 1
    nets = {}
    while lines[pos] != "end":
        name, net, pos = _read_mlp(lines, pos)
        nets[name] = net
    powers = None if fields["powers"] == "none" else \
        np.array([float(v) for v in fields["powers"].split()])
    return SymbolCodec(n=int(fields["n"]), m=int(fields["m"]), mode=fields["mode"],
                       enc=nets["enc"], dec=nets["dec"], alpha=float(fields["alpha"]),
                       beta=float(fields["beta"]), powers=powers,
                       quant_bits=int(fields["quant_bits"]))


def save_history_csv(history, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        for epoch, tr, val in history:
            fh.write(f"{epoch},{_fmt(tr)},{_fmt(val)}\n")
