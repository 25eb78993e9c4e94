"""Channel and modulation layer.

Models a frequency-selective Rayleigh channel as L parallel flat-fading
OFDM subchannels (gains = DFT of an exponential-PDP tap vector), carries
bits over Gray-mapped unit-energy 16-QAM or keypoint symbols over learned
constellations, and supports CSI-sorted subchannel permutations with
per-subchannel transmit powers.

The receiver equalizes with perfect knowledge of the gains; the transmitter
only ever sees the sorted subchannel order (the CSI feedback).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_SUBCHANNELS = 16

# Gray-coded 4-PAM: bit pair (b0 b1) -> level, unit-average-power after /sqrt(10).
_PAM_LEVELS = np.array([-3.0, -1.0, 3.0, 1.0])  # index = b0*2 + b1
_PAM_SCALE = 1.0 / math.sqrt(10.0)
# level value (-3,-1,1,3) -> bit pair
_PAM_DEMAP = {-3: (0, 0), -1: (0, 1), 1: (1, 1), 3: (1, 0)}
_PAM_DEMAP_BITS = np.array([_PAM_DEMAP[v] for v in (-3, -1, 1, 3)], dtype=np.uint8)


def _qfunc(x):
    return 0.5 * math.erfc(x / math.sqrt(2.0))


def qam16_ber(snr: float) -> float:
    """Exact Gray 16-QAM bit error probability at linear symbol SNR."""
    if snr <= 0:
        return 0.5
    x = math.sqrt(snr / 5.0)
    return 0.75 * _qfunc(x) + 0.5 * _qfunc(3 * x) - 0.25 * _qfunc(5 * x)


def qam16_bit_error_probs(snr: float) -> tuple[float, float]:
    """Per-bit error probabilities (first, second bit of each axis pair)."""
    if snr <= 0:
        return 0.5, 0.5
    x = math.sqrt(snr / 5.0)
    p_first = 0.5 * (_qfunc(x) + _qfunc(3 * x))
    p_second = 0.5 * (2 * _qfunc(x) + _qfunc(3 * x) - _qfunc(5 * x))
    return p_first, p_second


@dataclass
class ChannelRealization:
    """Per-subchannel complex gains plus the common noise power (linear)."""

    gains: np.ndarray
    noise_power: float

    def __post_init__(self):
        self.gains = np.asarray(self.gains, dtype=np.complex128)
        if self.gains.ndim != 1 or self.gains.size < 1:
            raise ValueError("gains must be a nonempty vector")
        if self.noise_power <= 0:
            raise ValueError("noise_power must be positive")

    @property
    def L(self) -> int:
        return self.gains.size

    def snrs(self, powers=None) -> np.ndarray:
        """Per-subchannel |h|^2 * rho / sigma^2."""
        rho = np.ones(self.L) if powers is None else np.asarray(powers, dtype=np.float64)
        return np.abs(self.gains) ** 2 * rho / self.noise_power


def realize_channel(seed, L: int = DEFAULT_SUBCHANNELS, num_taps: int = 3,
                    pdp_decay: float = 1.0, noise_power: float = 1e-12) -> ChannelRealization:
    """Draw one multipath realization.

    Taps are i.i.d. circularly-symmetric complex Gaussian with exponentially
    decaying variances normalized to unit total power, so E[|h_l|^2] = 1.
    seed may be an integer or a numpy Generator.
    """
    if num_taps < 1 or L < 1:
        raise ValueError("L and num_taps must be >= 1")
    if num_taps > L:
        raise ValueError(f"num_taps ({num_taps}) must not exceed L ({L})")
    if pdp_decay <= 0:
        raise ValueError("pdp_decay must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    var = np.exp(-np.arange(num_taps) / pdp_decay)
    var /= var.sum()
    taps = np.sqrt(var / 2.0) * (rng.standard_normal(num_taps) + 1j * rng.standard_normal(num_taps))
    gains = np.fft.fft(taps, n=L)
    return ChannelRealization(gains=gains, noise_power=noise_power)


@dataclass
class CsiPermutation:
    """Subchannel order sorted by descending |h|^2; ties keep the lower index."""

    order: np.ndarray

    def __post_init__(self):
        self.order = np.asarray(self.order, dtype=np.int64)
        if sorted(self.order.tolist()) != list(range(self.order.size)):
            raise ValueError("order must be a permutation of 0..L-1")

    @property
    def L(self) -> int:
        return self.order.size


def sort_csi(ch: ChannelRealization) -> CsiPermutation:
    g2 = np.abs(ch.gains) ** 2
    return CsiPermutation(order=np.argsort(-g2, kind="stable"))


def apply_perm(symbols, perm: CsiPermutation) -> np.ndarray:
    """Reorder a symbol vector so block i (positions i mod L) rides the i-th
    best subchannel. Length must be a multiple of L."""
    x = np.asarray(symbols)
    if x.size % perm.L != 0:
        raise ValueError(f"symbol count {x.size} not a multiple of L={perm.L}")
    grid = x.reshape(-1, perm.L)
    out = np.empty_like(grid)
    out[:, perm.order] = grid
    return out.reshape(x.shape)


def invert_perm(symbols, perm: CsiPermutation) -> np.ndarray:
    x = np.asarray(symbols)
    if x.size % perm.L != 0:
        raise ValueError(f"symbol count {x.size} not a multiple of L={perm.L}")
    grid = x.reshape(-1, perm.L)
    return grid[:, perm.order].reshape(x.shape)


@dataclass
class ConstellationMode:
    """Modulation selector.

    qam16: Gray-mapped unit-energy 16-QAM on bits.
    full_resolution: encoder reals transmitted directly as I/Q pairs.
    quantized_resolution: bit pairs mapped to alpha*c1 + beta*c2 with
    centered bits c = 2b - 1, a learned 16-point constellation.
    powers: per-subchannel transmit powers rho (mean 1 keeps the budget).
    """

    mode: str = "qam16"
    alpha: float = 2.0
    beta: float = 1.0
    powers: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in ("qam16", "full_resolution", "quantized_resolution"):
            raise ValueError(f"unknown constellation mode {self.mode!r}")
        if self.powers is not None:
            self.powers = np.asarray(self.powers, dtype=np.float64)
            if np.any(self.powers <= 0):
                raise ValueError("powers must be positive")
            if self.powers.mean() > 1.0 + 1e-9:
                raise ValueError("mean(powers) must not exceed the unit budget")

    def rho(self, L: int) -> np.ndarray:
        if self.powers is None:
            return np.ones(L)
        if self.powers.size != L:
            raise ValueError(f"powers has length {self.powers.size}, channel has L={L}")
        return self.powers


def qam16_modulate(bits) -> np.ndarray:
    """4 bits per symbol: (b0 b1) -> I level, (b2 b3) -> Q level, Gray mapped."""
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.size % 4 != 0:
        raise ValueError("bit count must be a multiple of 4 for 16-QAM")
    quads = bits.reshape(-1, 4)
    i_lvl = _PAM_LEVELS[quads[:, 0] * 2 + quads[:, 1]]
    q_lvl = _PAM_LEVELS[quads[:, 2] * 2 + quads[:, 3]]
    return (i_lvl + 1j * q_lvl) * _PAM_SCALE


def qam16_demodulate(symbols) -> np.ndarray:
    """Per-axis nearest-level hard decision (the ML rule after equalization)."""
    s = np.asarray(symbols) / _PAM_SCALE
    out = np.empty((s.size, 4), dtype=np.uint8)
    for axis, vals in ((0, s.real), (2, s.imag)):
        idx = np.digitize(vals, [-2.0, 0.0, 2.0])  # -> level index into (-3,-1,1,3)
        out[:, axis:axis + 2] = _PAM_DEMAP_BITS[idx]
    return out.reshape(-1)


def _pad_to_grid(values, L):
    pad = (-len(values)) % L
    if pad:
        values = np.concatenate([values, np.zeros(pad, dtype=values.dtype)])
    return values, pad


def _channel_pass(tx, ch: ChannelRealization, rho, use_csi, rng):
    """Common OFDM leg: permute, scale, add noise, equalize, unpermute.

    tx is a complex vector already padded to a multiple of L; position j
    rides subchannel j mod L (round-robin).
    """
    perm = sort_csi(ch) if use_csi else None
    if perm is not None:
        tx = apply_perm(tx, perm)
    grid = tx.reshape(-1, ch.L)
    amp = ch.gains * np.sqrt(rho)
    noise = math.sqrt(ch.noise_power / 2.0) * (
        rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)
    )
    rx = grid * amp[None, :] + noise
    eq = (rx / amp[None, :]).reshape(-1)
    if perm is not None:
        eq = invert_perm(eq, perm)
    return eq


def transmit_bits(bits, ch: ChannelRealization, mode: ConstellationMode | None = None,
                  use_csi: bool = False, seed=0):
    """Carry a bit vector over the fading channel as 16-QAM.

    Returns (received_bits, flip_mask). The realized BER is flip_mask.mean().
    """
    mode = mode or ConstellationMode("qam16")
    if mode.mode != "qam16":
        raise ValueError("transmit_bits requires the qam16 mode")
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.size % 4 != 0:
        raise ValueError("bit count must be a multiple of 4 for 16-QAM")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    syms = qam16_modulate(bits)
    padded, pad = _pad_to_grid(syms, ch.L)
    eq = _channel_pass(padded, ch, mode.rho(ch.L), use_csi, rng)
    if pad:
        eq = eq[:-pad]
    rx_bits = qam16_demodulate(eq)
    flip_mask = rx_bits != bits
    return rx_bits, flip_mask


def bsc(bits, ber: float, seed=0) -> np.ndarray:
    """Binary symmetric channel: i.i.d. flips with probability ber."""
    if not 0.0 <= ber <= 0.5:
        raise ValueError(f"ber must be in [0, 0.5], got {ber}")
    bits = np.asarray(bits, dtype=np.uint8)
    if ber == 0.0:
        return bits.copy()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    flips = rng.random(bits.size) < ber
    return bits ^ flips.astype(np.uint8)


def quantized_symbols(bits, alpha: float, beta: float) -> np.ndarray:
    """Map bit pairs to real symbols alpha*c1 + beta*c2, c = 2b - 1."""
    bits = np.asarray(bits, dtype=np.float64)
    if bits.size % 2 != 0:
        raise ValueError("bit count must be even")
    c = 2.0 * bits.reshape(-1, 2) - 1.0
    return alpha * c[:, 0] + beta * c[:, 1]


def transmit_symbols(values, ch: ChannelRealization, mode: ConstellationMode,
                     use_csi: bool = False, seed=0) -> np.ndarray:
    """Carry learned-constellation symbols; returns equalized soft reals.

    full_resolution: values are m reals (m even), paired into I/Q.
    quantized_resolution: values are 2m bits, mapped through (alpha, beta)
    first; the receiver still returns the m soft reals without a decision.
    """
    if mode.mode == "qam16":
        raise ValueError("use transmit_bits for the qam16 mode")
    if mode.mode == "quantized_resolution":
        reals = quantized_symbols(values, mode.alpha, mode.beta)
    else:
        reals = np.asarray(values, dtype=np.float64)
    if reals.size % 2 != 0:
        raise ValueError("real symbol count must be even to form I/Q pairs")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    cplx = reals[0::2] + 1j * reals[1::2]
    padded, pad = _pad_to_grid(cplx, ch.L)
    eq = _channel_pass(padded, ch, mode.rho(ch.L), use_csi, rng)
    if pad:
        eq = eq[:-pad]
    out = np.empty(reals.size)
    out[0::2] = eq.real
    out[1::2] = eq.imag
    return out


def average_qam16_ber(noise_power: float, L: int = DEFAULT_SUBCHANNELS,
                      num_taps: int = 3, pdp_decay: float = 1.0,
                      powers=None, n_realizations: int = 2000, seed: int = 0) -> float:
    """Ensemble-average 16-QAM BER from the closed form, no bit-level sim."""
    rng = np.random.default_rng(seed)
    rho = np.ones(L) if powers is None else np.asarray(powers, dtype=np.float64)
    total = 0.0
    for _ in range(n_realizations):
        ch = realize_channel(rng, L=L, num_taps=num_taps, pdp_decay=pdp_decay,
                             noise_power=noise_power)
        snrs = np.abs(ch.gains) ** 2 * rho / noise_power
        total += float(np.mean([qam16_ber(s) for s in snrs]))
    return total / n_realizations


def save_constellation(mode: ConstellationMode, path) -> None:
    """Persist the learned constellation parameters (alpha, beta, powers)."""
    def fmt(x):
        return format(float(x), ".17g")

    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("svclink-model 1\n")
        fh.write("kind constellation\n")
        fh.write(f"mode {mode.mode}\n")
        fh.write(f"alpha {fmt(mode.alpha)}\nbeta {fmt(mode.beta)}\n")
        if mode.powers is None:
            fh.write("powers none\n")
        else:
            fh.write("powers " + " ".join(fmt(v) for v in mode.powers) + "\n")
        fh.write("end\n")


def load_constellation(path) -> ConstellationMode:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if lines[0] != "svclink-model 1" or lines[1] != "kind constellation":
        raise ValueError(f"{path}: not a constellation file")
    fields = dict(ln.split(" ", 1) for ln in lines[2:] if ln != "end")
    powers = None if fields["powers"] == "none" else \
        np.array([float(v) for v in fields["powers"].split()])
    return ConstellationMode(fields["mode"], alpha=float(fields["alpha"]),
                             beta=float(fields["beta"]), powers=powers)


def calibrate_noise_for_ber(target_ber: float, L: int = DEFAULT_SUBCHANNELS,
                            num_taps: int = 3, pdp_decay: float = 1.0,
                            n_realizations: int = 2000, seed: int = 0) -> float:
    """Noise power sigma^2 whose ensemble-average 16-QAM BER hits the target."""
    if not 0.0 < target_ber < 0.5:
        raise ValueError("target_ber must be in (0, 0.5)")
    lo, hi = -6.0, 4.0  # log10 sigma^2 bracket
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        ber = average_qam16_ber(10.0 ** mid, L=L, num_taps=num_taps,
                                pdp_decay=pdp_decay, n_realizations=n_realizations,
                                seed=seed)
        if ber < target_ber:
            lo = mid
        else:
            hi = mid
    return 10.0 ** (0.5 * (lo + hi))
