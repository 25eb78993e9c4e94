"""GF(256) Reed-Solomon with errors-and-erasures decoding, plus CRC-32.

Field: GF(2^8) generated by x^8 + x^4 + x^3 + x^2 + 1 (0x11D), primitive
element alpha = 2. Codewords are systematic: the first k symbols are the
info block, followed by n-k parity symbols. Symbol index i carries the
coefficient of x^(n-1-i), so the locator of position i is alpha^(n-1-i).

Decoding succeeds whenever 2*errors + erasures <= n - k.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_PRIM_POLY = 0x11D

# exp table doubled so products of two logs never need a mod.
_EXP = np.zeros(510, dtype=np.int64)
_LOG = np.zeros(256, dtype=np.int64)
_x = 1
for _i in range(255):
    _EXP[_i] = _x
    _LOG[_x] = _i
    _x <<= 1
    if _x & 0x100:
        _x ^= _PRIM_POLY
_EXP[255:510] = _EXP[0:255]


def gf_mul(a: int, b: int) -> int:
    if a == 0 or b == 0:
        return 0
    return int(_EXP[_LOG[a] + _LOG[b]])


def gf_div(a: int, b: int) -> int:
    if b == 0:
        raise ZeroDivisionError("GF(256) division by zero")
    if a == 0:
        return 0
    return int(_EXP[(_LOG[a] - _LOG[b]) % 255])


def gf_pow(base: int, exponent: int) -> int:
    if base == 0:
        return 0
    return int(_EXP[(_LOG[base] * exponent) % 255])


def _gf_mul_vec(a, b):
    """Elementwise GF(256) product of integer arrays (broadcastable)."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    out = _EXP[_LOG[a] + _LOG[b]]
    return np.where((a == 0) | (b == 0), 0, out)


def _gf_poly_mul(p, q):
    """Product of ascending-order coefficient arrays."""
    if len(q) > len(p):
        p, q = q, p
    out = np.zeros(len(p) + len(q) - 1, dtype=np.int64)
    for j, c in enumerate(q):  # iterate the shorter factor
        if c:
            out[j:j + len(p)] ^= _gf_mul_vec(p, c)
    return out


def _gf_poly_eval_many(coeffs, log_points):
    """Evaluate an ascending-order polynomial at points alpha^log_points."""
    coeffs = np.asarray(coeffs, dtype=np.int64)
    k = np.arange(len(coeffs), dtype=np.int64)
    powers = _EXP[np.outer(k, log_points) % 255]
    terms = _gf_mul_vec(coeffs[:, None], powers)
    return np.bitwise_xor.reduce(terms, axis=0)


import functools


@functools.lru_cache(maxsize=None)
def rs_code(n: int, k: int) -> "RsCode":
    """Shared RsCode instances; construction precomputes per-code tables."""
    return RsCode(n, k)


@dataclass
class RsCode:
    """RS(n, k) over GF(256); corrects 2e + f <= n - k errata."""

    n: int
    k: int

    def __post_init__(self):
        if not (1 <= self.k < self.n <= 255):
            raise ValueError(f"need 1 <= k < n <= 255, got n={self.n} k={self.k}")
        self._gen_desc = self._generator()
        # log of alpha^(j * (n-1-i)) for the syndrome inner products
        j = np.arange(self.nsym, dtype=np.int64)[:, None]
        deg = (self.n - 1 - np.arange(self.n, dtype=np.int64))[None, :]
        self._synd_log = (j * deg) % 255

    @property
    def nsym(self) -> int:
        return self.n - self.k

    def _generator(self):
        # g(x) = prod_{j=0}^{nsym-1} (x - alpha^j), returned descending (monic first)
        g = np.array([1], dtype=np.int64)
        for j in range(self.nsym):
            g = _gf_poly_mul(g, np.array([_EXP[j], 1], dtype=np.int64))
        return g[::-1].copy()

    def _syndromes(self, received):
        terms = np.where(
            received[None, :] == 0,
            0,
            _EXP[_LOG[received[None, :]] + self._synd_log],
        )
        return np.bitwise_xor.reduce(terms, axis=1)


def rs_encode(code: RsCode, info) -> np.ndarray:
    """Systematic encoding: returns the n-symbol codeword [info | parity]."""
    info = np.asarray(info, dtype=np.int64)
    if info.shape != (code.k,):
        raise ValueError(f"info must have length k={code.k}, got {info.shape}")
    if np.any(info < 0) or np.any(info > 255):
        raise ValueError("symbols must be octets")
    gtail = code._gen_desc[1:]
    rem = np.zeros(code.nsym, dtype=np.int64)
    for s in info:
        factor = int(s) ^ int(rem[0])
        rem[:-1] = rem[1:]
        rem[-1] = 0
        if factor:
            rem ^= _gf_mul_vec(gtail, factor)
    return np.concatenate([info, rem])


def _berlekamp_massey(synd):
    """Error locator (ascending coefficients) and its LFSR length L."""
    c = np.zeros(len(synd) + 1, dtype=np.int64)
    b = np.zeros(len(synd) + 1, dtype=np.int64)
    c[0] = b[0] = 1
    L, m, bb = 0, 1, 1
    for i in range(len(synd)):
        d = int(synd[i])
        if L > 0:
            d ^= int(np.bitwise_xor.reduce(_gf_mul_vec(c[1:L + 1], synd[i - L:i][::-1])))
        if d == 0:
            m += 1
        elif 2 * L <= i:
            t = c.copy()
            scale = gf_div(d, bb)
            c[m:] ^= _gf_mul_vec(b[:len(b) - m], scale)
            L = i + 1 - L
            b = t
            bb = d
            m = 1
        else:
            scale = gf_div(d, bb)
            c[m:] ^= _gf_mul_vec(b[:len(b) - m], scale)
            m += 1
    return c[:L + 1], L


def rs_decode(code: RsCode, received, erasure_mask=None):
    """Errors-and-erasures decoding.

    received: n symbols; positions flagged in erasure_mask may hold anything.
    Returns (info, ok). ok is False when the errata exceed the code's radius
    or the corrected word fails the syndrome recheck; info is then the
    systematic prefix of the uncorrected input.
    """
    received = np.asarray(received, dtype=np.int64)
    if received.shape != (code.n,):
        raise ValueError(f"received must have length n={code.n}")
    if erasure_mask is None:
        erase_pos = np.array([], dtype=np.int64)
    else:
        erasure_mask = np.asarray(erasure_mask, dtype=bool)
        if erasure_mask.shape != (code.n,):
            raise ValueError("erasure_mask must have length n")
        erase_pos = np.nonzero(erasure_mask)[0]

    failed = (received[:code.k].copy(), False)
    nsym = code.nsym
    f = len(erase_pos)
    if f > nsym:
        return failed

    synd = code._syndromes(received)
    if not synd.any():
        return received[:code.k].copy(), True

    # Erasure locator Gamma(x) = prod (1 + X_e x), ascending.
    gamma = np.array([1], dtype=np.int64)
    erase_log = (code.n - 1 - erase_pos) % 255
    for lg in erase_log:
        gamma = _gf_poly_mul(gamma, np.array([1, _EXP[lg]], dtype=np.int64))

    # Forney syndromes: strip erasure contributions, leaving an error-only LFSR.
    fsynd = synd.copy()
    for lg in erase_log:
        x = int(_EXP[lg])
        fsynd[:-1] = _gf_mul_vec(fsynd[:-1], x) ^ fsynd[1:]
    fsynd = fsynd[:nsym - f] if f else fsynd

    if len(fsynd) and fsynd.any():
        lam, L = _berlekamp_massey(fsynd)
        if 2 * L + f > nsym or len(lam) - 1 != L:
            return failed
    else:
        lam = np.array([1], dtype=np.int64)

    psi = _gf_poly_mul(lam, gamma)

    # Chien search: position i is errata iff Psi(X_i^{-1}) = 0.
    deg = (code.n - 1 - np.arange(code.n, dtype=np.int64))
    inv_log = (-deg) % 255
    values = _gf_poly_eval_many(psi, inv_log)
    errata_pos = np.nonzero(values == 0)[0]
    if len(errata_pos) != len(psi) - 1:
        return failed

    # Errata evaluator Omega = S * Psi mod x^nsym.
    omega = _gf_poly_mul(synd, psi)[:nsym]

    # Forney magnitudes: e_i = X_i * Omega(X_i^{-1}) / Psi'(X_i^{-1}).
    deriv = psi[1::2]  # odd-power terms survive the GF(2) derivative
    deriv_coeffs = np.zeros(max(len(psi) - 1, 1), dtype=np.int64)
    deriv_coeffs[0::2] = deriv
    pos_log = (code.n - 1 - errata_pos) % 255
    ipos_log = (-pos_log) % 255
    om = _gf_poly_eval_many(omega, ipos_log)
    dv = _gf_poly_eval_many(deriv_coeffs, ipos_log)
    if np.any(dv == 0):
        return failed
    corrected = received.copy()
    for p, lg, o, d in zip(errata_pos, pos_log, om, dv):
        mag = gf_mul(int(_EXP[lg]), gf_div(int(o), int(d)))
        corrected[p] ^= mag

    if code._syndromes(corrected).any():
        return failed
    return corrected[:code.k].copy(), True


# ---------------------------------------------------------------------------
# CRC-32 (IEEE 802.3): poly 0x04C11DB7, reflected, init/xorout all-ones.
# Bit vectors are processed in stream order; packing bits to bytes LSB-first
# makes this identical to the usual byte-wise CRC-32 (e.g. zlib.crc32).
# ---------------------------------------------------------------------------

_CRC_POLY_REFLECTED = 0xEDB88320


def crc32(payload_bits) -> int:
    """CRC-32 of a bit vector, returned as an unsigned 32-bit value."""
    crc = 0xFFFFFFFF
    for b in np.asarray(payload_bits, dtype=np.uint8).tolist():
        crc = (crc >> 1) ^ _CRC_POLY_REFLECTED if (crc ^ b) & 1 else crc >> 1
    return crc ^ 0xFFFFFFFF


def crc_check(payload_bits, tag: int) -> bool:
    return crc32(payload_bits) == (tag & 0xFFFFFFFF)


def crc_tag_bits(tag: int) -> np.ndarray:
    """Serialize a CRC value to 32 bits, LSB first."""
    return np.array([(tag >> i) & 1 for i in range(32)], dtype=np.uint8)


def crc_tag_from_bits(bits) -> int:
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.shape != (32,):
        raise ValueError("CRC tag needs exactly 32 bits")
    return int(sum(int(b) << i for i, b in enumerate(bits)))


def bits_to_octets(bits) -> np.ndarray:
    """Pack bits to octets, LSB first within each octet."""
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.size % 8 != 0:
        raise ValueError("bit count must be a multiple of 8")
    weights = 1 << np.arange(8, dtype=np.int64)
    return (bits.reshape(-1, 8) * weights).sum(axis=1).astype(np.int64)


def octets_to_bits(octets) -> np.ndarray:
    """Unpack octets to bits, LSB first within each octet."""
    octets = np.asarray(octets, dtype=np.int64)
    return ((octets[:, None] >> np.arange(8)) & 1).astype(np.uint8).reshape(-1)
