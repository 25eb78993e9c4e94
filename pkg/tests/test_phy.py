import math

import numpy as np
import pytest

from svclink import phy


def _qfunc(x):
    return 0.5 * math.erfc(x / math.sqrt(2.0))


def qam16_ber_oracle(snr):
    """Closed-form Gray 16-QAM bit error rate, derived from per-axis 4-PAM
    decision regions (independent of the simulator path)."""
    x = math.sqrt(snr / 5.0)
    return 0.75 * _qfunc(x) + 0.5 * _qfunc(3 * x) - 0.25 * _qfunc(5 * x)


def test_realize_deterministic():
    a = phy.realize_channel(5, L=16, num_taps=3)
    b = phy.realize_channel(5, L=16, num_taps=3)
    assert np.array_equal(a.gains, b.gains)


def test_single_tap_is_flat():
    ch = phy.realize_channel(9, L=16, num_taps=1)
    mags = np.abs(ch.gains)
    assert np.allclose(mags, mags[0])


def test_unit_average_gain():
    # Parseval: unit total tap power -> E[|h_l|^2] = 1, within 2% over 1e4 draws
    rng = np.random.default_rng(0)
    total = 0.0
    n = 10_000
    for _ in range(n):
        total += float(np.mean(np.abs(phy.realize_channel(rng, L=16, num_taps=3).gains) ** 2))
    assert abs(total / n - 1.0) < 0.02


def test_realize_argument_errors():
    with pytest.raises(ValueError):
        phy.realize_channel(0, L=4, num_taps=5)
    with pytest.raises(ValueError):
        phy.realize_channel(0, L=0)
    with pytest.raises(ValueError):
        phy.realize_channel(0, pdp_decay=0.0)


def test_sort_csi_descending_and_stable_ties():
    ch = phy.realize_channel(3, L=16, num_taps=3, noise_power=1.0)
    order = phy.sort_csi(ch).order
    g2 = np.abs(ch.gains) ** 2
    assert np.all(np.diff(g2[order]) <= 1e-15)
    # flat channel: all gains tie -> identity permutation (lower index first)
    flat = phy.realize_channel(4, L=8, num_taps=1, noise_power=1.0)
    assert np.array_equal(phy.sort_csi(flat).order, np.arange(8))


def test_perm_round_trip():
    rng = np.random.default_rng(1)
    for _ in range(50):
        ch = phy.realize_channel(rng, L=16, num_taps=3, noise_power=1.0)
        perm = phy.sort_csi(ch)
        x = rng.standard_normal(16 * 4)
        assert np.allclose(phy.invert_perm(phy.apply_perm(x, perm), perm), x)


def test_perm_descending_gains_identity():
    gains = np.linspace(2.0, 0.5, 8).astype(complex)
    perm = phy.sort_csi(phy.ChannelRealization(gains, 1.0))
    assert np.array_equal(perm.order, np.arange(8))
    x = np.arange(16.0)
    assert np.array_equal(phy.apply_perm(x, perm), x)


def test_perm_length_mismatch():
    perm = phy.CsiPermutation(np.arange(8))
    with pytest.raises(ValueError):
        phy.apply_perm(np.zeros(12), perm)


def test_qam16_round_trip_and_energy():
    rng = np.random.default_rng(2)
    bits = rng.integers(0, 2, 4096).astype(np.uint8)
    syms = phy.qam16_modulate(bits)
    assert np.array_equal(phy.qam16_demodulate(syms), bits)
    assert np.mean(np.abs(syms) ** 2) == pytest.approx(1.0, abs=0.05)


def test_qam16_demapper_is_ml():
    # hard per-axis nearest-level decision == brute-force minimum distance
    rng = np.random.default_rng(3)
    all_bits = np.array([[b >> 3 & 1, b >> 2 & 1, b >> 1 & 1, b & 1] for b in range(16)],
                        dtype=np.uint8)
    constellation = phy.qam16_modulate(all_bits.reshape(-1))
    for _ in range(500):
        z = rng.normal(0, 0.7) + 1j * rng.normal(0, 0.7)
        fast = phy.qam16_demodulate(np.array([z]))
        brute = all_bits[np.argmin(np.abs(constellation - z))]
        assert np.array_equal(fast, brute)


def test_transmit_bits_noiseless():
    rng = np.random.default_rng(4)
    bits = rng.integers(0, 2, 640).astype(np.uint8)
    ch = phy.realize_channel(7, L=16, num_taps=3, noise_power=1e-12)
    rx, mask = phy.transmit_bits(bits, ch, seed=1)
    assert mask.sum() == 0
    assert np.array_equal(rx, bits)


def test_transmit_bits_deterministic():
    bits = np.random.default_rng(5).integers(0, 2, 320).astype(np.uint8)
    ch = phy.realize_channel(8, L=16, num_taps=3, noise_power=0.05)
    _, m1 = phy.transmit_bits(bits, ch, seed=42)
    _, m2 = phy.transmit_bits(bits, ch, seed=42)
    assert np.array_equal(m1, m2)


def test_transmit_bits_length_check():
    ch = phy.realize_channel(0, noise_power=1.0)
    with pytest.raises(ValueError):
        phy.transmit_bits(np.zeros(6, dtype=np.uint8), ch)


def test_qam_ber_matches_closed_form():
    rng = np.random.default_rng(6)
    for snr_db in (8.0, 11.0, 14.0):
        snr = 10 ** (snr_db / 10)
        ch = phy.ChannelRealization(gains=np.ones(16, complex), noise_power=1.0 / snr)
        bits = rng.integers(0, 2, 200_000).astype(np.uint8)
        _, mask = phy.transmit_bits(bits, ch, seed=int(snr_db))
        th = qam16_ber_oracle(snr)
        assert abs(mask.mean() - th) / th < 0.10


def test_bsc_zero_identity():
    bits = np.random.default_rng(7).integers(0, 2, 1000).astype(np.uint8)
    assert np.array_equal(phy.bsc(bits, 0.0, 1), bits)


def test_bsc_flip_rate():
    rng = np.random.default_rng(8)
    bits = rng.integers(0, 2, 10 ** 6).astype(np.uint8)
    rate = float((phy.bsc(bits, 0.05, 3) ^ bits).mean())
    assert abs(rate - 0.05) < 0.001


def test_bsc_half_decorrelates():
    rng = np.random.default_rng(9)
    bits = rng.integers(0, 2, 10 ** 6).astype(np.uint8)
    out = phy.bsc(bits, 0.5, 4)
    r = np.corrcoef(bits.astype(float), out.astype(float))[0, 1]
    assert abs(r) < 0.01


def test_bsc_validates_probability():
    with pytest.raises(ValueError):
        phy.bsc(np.zeros(4, dtype=np.uint8), 0.6, 0)


def test_quantized_constellation_geometry():
    # alpha=2, beta=1 with centered bits reproduces the 16-QAM level set
    pairs = np.array([0, 0, 0, 1, 1, 0, 1, 1], dtype=np.uint8)
    vals = phy.quantized_symbols(pairs, 2.0, 1.0)
    assert sorted(vals.tolist()) == [-3.0, -1.0, 1.0, 3.0]


def test_transmit_symbols_noiseless_identity():
    reals = np.random.default_rng(10).uniform(-1, 1, 64)
    ch = phy.ChannelRealization(gains=np.ones(16, complex), noise_power=1e-18)
    out = phy.transmit_symbols(reals, ch, phy.ConstellationMode("full_resolution"), seed=1)
    assert np.allclose(out, reals, atol=1e-7)


def test_transmit_symbols_equalized_noise_variance():
    # equalized noise on subchannel l has variance sigma^2 / (|h_l|^2 rho_l)
    rng = np.random.default_rng(11)
    ch = phy.realize_channel(12, L=4, num_taps=3, noise_power=0.02)
    mode = phy.ConstellationMode("full_resolution", powers=np.array([1.5, 1.0, 0.75, 0.75]))
    sent = np.zeros(8 * 10_000)
    out = phy.transmit_symbols(sent, ch, mode, use_csi=False, seed=rng)
    err = out.reshape(-1, 8)  # 4 complex subchannels = 8 reals per row
    g2 = np.abs(ch.gains) ** 2
    for l in range(4):
        per_axis = np.concatenate([err[:, 2 * l], err[:, 2 * l + 1]])
        expect = ch.noise_power / (g2[l] * mode.powers[l]) / 2.0
        assert np.var(per_axis) == pytest.approx(expect, rel=0.05)


def test_transmit_power_accounting():
    # average transmitted energy per complex symbol on subchannel l is rho_l
    rng = np.random.default_rng(13)
    powers = np.array([2.0, 1.0, 0.5, 0.5])
    mode = phy.ConstellationMode("qam16", powers=powers)
    ch = phy.realize_channel(14, L=4, num_taps=3, noise_power=1e-12)
    bits = rng.integers(0, 2, 4 * 4000).astype(np.uint8)
    syms = phy.qam16_modulate(bits)
    grid = syms.reshape(-1, 4)
    tx_power = np.mean(np.abs(grid * np.sqrt(powers)[None, :]) ** 2, axis=0)
    assert np.allclose(tx_power, powers, rtol=0.05)


def test_csi_sorting_orders_bit_error_rates():
    # with sorted subchannels, early symbol blocks see better SNR
    rng = np.random.default_rng(15)
    early = late = 0
    for t in range(300):
        ch = phy.realize_channel(rng, L=16, num_taps=3, noise_power=0.05)
        bits = rng.integers(0, 2, 640).astype(np.uint8)
        _, mask = phy.transmit_bits(bits, ch, use_csi=True, seed=rng)
        per_symbol = mask.reshape(-1, 4).sum(axis=1)
        blocks = per_symbol.reshape(-1, 16)
        early += blocks[:, :4].sum()
        late += blocks[:, -4:].sum()
    assert early < late


def test_constellation_mode_validation():
    with pytest.raises(ValueError):
        phy.ConstellationMode("qam17")
    with pytest.raises(ValueError):
        phy.ConstellationMode("qam16", powers=np.array([2.0, 2.0]))
    with pytest.raises(ValueError):
        phy.ConstellationMode("qam16", powers=np.array([-1.0, 1.0]))
    mode = phy.ConstellationMode("qam16")
    with pytest.raises(ValueError):
        phy.transmit_symbols(np.zeros(8), phy.realize_channel(0, noise_power=1.0), mode)


def test_constellation_save_load(tmp_path):
    mode = phy.ConstellationMode("quantized_resolution", alpha=1.7, beta=0.6,
                                 powers=np.linspace(1.5, 0.5, 16))
    path = tmp_path / "const.svcmodel"
    phy.save_constellation(mode, path)
    loaded = phy.load_constellation(path)
    assert loaded.mode == mode.mode
    assert loaded.alpha == mode.alpha and loaded.beta == mode.beta
    assert np.array_equal(loaded.powers, mode.powers)


def test_calibrate_noise_for_ber():
    s2 = phy.calibrate_noise_for_ber(0.05, n_realizations=300, seed=1)
    achieved = phy.average_qam16_ber(s2, n_realizations=300, seed=1)
    assert achieved == pytest.approx(0.05, rel=0.02)
