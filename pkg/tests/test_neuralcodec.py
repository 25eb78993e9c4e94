import numpy as np
import pytest

from svclink import kpstream as kp
from svclink import neuralcodec as nc
from svclink import phy


def tiny_model(seed=0, n=2, m=4):
    """Small stacks so gradient checks stay fast; same code paths as the
    full-size model."""
    rng = np.random.default_rng(seed)
    enc = nc.Mlp([2 * n, 16, 8, m], ["relu", "relu", "sigmoid"], rng)
    dec = nc.Mlp([m, 16, 8, 2 * n], ["relu", "relu", "tanh"], rng)
    return nc.CodecModel(n=n, m=m, quant_bits=2, enc=enc, dec=dec)


def small_streams(count=6, frames=40, n=4):
    return [kp.synth_stream(100 + s, n, frames) for s in range(count)]


# --- quantizer ----------------------------------------------------------------

def test_quantize_endpoints():
    assert nc.quantize(0.0, 2) == (0, 0)
    assert nc.dequantize((0, 0)) == 0.0
    # index 3 in Gray code is 10
    assert nc.quantize(1.0, 2) == (1, 0)
    assert nc.dequantize((1, 0)) == 1.0


def test_quantize_nearest_level():
    # 0.34 is nearest to 1/3 (index 1 -> Gray 01)
    assert nc.quantize(0.34, 2) == (0, 1)
    assert nc.dequantize((0, 1)) == pytest.approx(1 / 3)


def test_quantize_ties_toward_lower():
    assert nc.quantize(1 / 6, 2) == (0, 0)
    assert nc.quantize(0.5, 2) == (0, 1)


def test_dequantize_quantize_error_bound():
    for bits in (1, 2, 3, 4):
        v = np.linspace(0.0, 1.0, 2001)
        back = nc.dequantize_array(nc.quantize_array(v, bits), bits)
        bound = 1.0 / (2 * ((1 << bits) - 1))
        assert np.max(np.abs(back - v)) <= bound + 1e-12


def test_quantize_clamps_and_counts():
    nc.reset_quant_clamp_count()
    out = nc.quantize_array(np.array([-0.2, 0.5, 1.3]), 2)
    assert nc.quant_clamp_count() == 2
    assert np.array_equal(out[0], (0, 0))
    assert np.array_equal(out[2], (1, 0))
    nc.reset_quant_clamp_count()


def test_gray_single_flip_moves_one_cyclic_step():
    # 2-bit Gray code: flipping either bit lands on a cyclically adjacent
    # level, exhaustively over all levels and bit positions
    for level in range(4):
        base = nc.quantize(level / 3, 2)
        for pos in range(2):
            flipped = list(base)
            flipped[pos] ^= 1
            level2 = round(nc.dequantize(tuple(flipped)) * 3)
            assert min((level - level2) % 4, (level2 - level) % 4) == 1


def test_gray_adjacent_levels_differ_one_bit():
    for bits in (2, 3, 4):
        q = (1 << bits) - 1
        codes = [nc.quantize(i / q, bits) for i in range(q + 1)]
        for a, b in zip(codes, codes[1:]):
            assert sum(x != y for x, y in zip(a, b)) == 1


# --- encode / decode ------------------------------------------------------------

def test_encode_default_lengths():
    model = nc.CodecModel.build(seed=1)
    frame = kp.synth_stream(5, 10, 5).frames[2]
    bits = nc.encode(model, frame)
    assert bits.shape == (160,)
    assert set(np.unique(bits)) <= {0, 1}


def test_encode_deterministic():
    model = nc.CodecModel.build(seed=1)
    frame = kp.synth_stream(5, 10, 5).frames[2]
    assert np.array_equal(nc.encode(model, frame), nc.encode(model, frame))


def test_encode_dimension_mismatch():
    model = tiny_model(n=2)
    with pytest.raises(ValueError):
        nc.encode(model, np.zeros(6))


def test_decode_zero_bits_fixed_frame():
    model = nc.CodecModel.build(seed=2)
    a = nc.decode(model, np.zeros(160, dtype=np.uint8))
    b = nc.decode(model, np.zeros(160, dtype=np.uint8))
    assert a == b
    assert a.n == 10


def test_decode_wrong_length():
    model = nc.CodecModel.build(seed=2)
    with pytest.raises(ValueError):
        nc.decode(model, np.zeros(159, dtype=np.uint8))
    with pytest.raises(nc.TrainingError):
        nc.decode(model, np.zeros(320, dtype=np.uint8), "combined")


def test_single_bit_flip_total():
    model = tiny_model(seed=3)
    frame = np.array([0.1, -0.2, 0.3, 0.0])
    bits = nc.encode(model, frame)
    base = nc.decode(model, bits)
    for pos in range(bits.size):
        flipped = bits.copy()
        flipped[pos] ^= 1
        out = nc.decode(model, flipped)  # must not raise
        assert np.all(np.abs(out.coords) <= 1.0)
    assert base.n == 2


def test_encoder_output_range():
    model = nc.CodecModel.build(seed=4)
    x = kp.synth_stream(6, 10, 3).frames[0].flat()
    z = model.enc.forward(x[None, :])[0]
    assert np.all((z > 0.0) & (z < 1.0))
    y = model.dec.forward(np.full((1, 80), 0.5))[0]
    assert np.all(np.abs(y) < 1.0)


# --- training -------------------------------------------------------------------

def test_train_decreases_loss_and_is_deterministic():
    streams = small_streams()
    model = tiny_model(n=4, m=8)
    cfg = nc.TrainConfig(epochs=20, batch_size=32, train_ber=0.0, seed=9)
    res1 = nc.train_stage1(model, streams, cfg)
    res2 = nc.train_stage1(model, streams, cfg)
    hist = np.array([h[1] for h in res1.history])
    assert np.median(hist[-10:]) < np.median(hist[:10])
    for a, b in zip(res1.model.enc.params(), res2.model.enc.params()):
        assert np.array_equal(a, b)
    # original model untouched
    assert not np.array_equal(model.enc.Ws[0], res1.model.enc.Ws[0])


def test_train_with_ber_range():
    streams = small_streams(4, 30)
    res = nc.train_stage1(tiny_model(n=4, m=8), streams,
                          nc.TrainConfig(epochs=4, train_ber=(0.0, 0.1), seed=1))
    assert len(res.history) == 4


def test_train_rejects_bad_config():
    with pytest.raises(ValueError):
        nc.TrainConfig(train_ber=0.7)
    with pytest.raises(ValueError):
        nc.TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        nc.train_stage1(tiny_model(), [], nc.TrainConfig(epochs=1))


def test_stage2_freezes_stage1():
    streams = small_streams()
    cfg = nc.TrainConfig(epochs=6, train_ber=0.0, seed=5)
    stage1 = nc.train_stage1(tiny_model(n=4, m=8), streams, cfg).model
    before = nc.stage1_hash(stage1)
    res = nc.train_stage2(stage1, streams,
                          nc.TrainConfig(epochs=6, train_ber=(0.0, 0.1), seed=6))
    assert nc.stage1_hash(res.model) == before
    assert res.model.has_stage2


def test_stage2_bits_and_combined_decode():
    streams = small_streams()
    stage1 = nc.train_stage1(tiny_model(n=4, m=8), streams,
                             nc.TrainConfig(epochs=4, seed=7)).model
    model = nc.train_stage2(stage1, streams,
                            nc.TrainConfig(epochs=4, train_ber=(0, 0.05), seed=8)).model
    x = streams[0].frames[1]
    b2 = nc.encode_stage2(model, x)
    assert b2.shape == (16,)  # m * quant_bits for the tiny model
    both = np.concatenate([nc.encode(model, x), b2])
    out = nc.decode(model, both, "combined")
    assert out.n == 4


def test_stage2_requires_stage1_artifacts():
    model = tiny_model()
    with pytest.raises(nc.TrainingError):
        nc.encode_stage2(model, np.zeros(4))


def test_ofdm_train_spec_flip_probs():
    spec = nc.OfdmTrainSpec(noise_power=0.05, use_csi=True)
    rng = np.random.default_rng(3)
    probs = spec.bit_flip_probs(160, rng)
    assert probs.shape == (160,)
    assert np.all((probs >= 0) & (probs <= 0.5))
    # CSI sorting: earlier symbol blocks ride better subchannels on average
    many = np.mean([spec.bit_flip_probs(640, rng).reshape(-1, 4).mean(axis=1)
                    .reshape(-1, 16).mean(axis=0) for _ in range(200)], axis=0)
    assert many[0] < many[-1]
    with pytest.raises(ValueError):
        nc.OfdmTrainSpec()
    with pytest.raises(ValueError):
        nc.OfdmTrainSpec(noise_power=0.1, snr_db_range=(0, 10))


# --- gradient check -------------------------------------------------------------

def test_grad_check_small_model():
    model = tiny_model(seed=11)
    frame = np.random.default_rng(0).uniform(-0.5, 0.5, 4)
    assert nc.grad_check(model, frame, 1e-5) < 1e-4


def test_grad_check_zero_weight_model():
    model = tiny_model(seed=12)
    for net in (model.enc, model.dec):
        for W, b in zip(net.Ws, net.bs):
            W[:] = 0.0
            b[:] = 0.0
    err = nc.grad_check(model, np.array([0.2, -0.1, 0.05, 0.3]), 1e-5)
    assert np.isfinite(err)
    assert err < 1e-4


def test_grad_check_epsilon_scaling():
    model = tiny_model(seed=13)
    frame = np.random.default_rng(1).uniform(-0.5, 0.5, 4)
    e1 = nc.grad_check(model, frame, 2e-5)
    e2 = nc.grad_check(model, frame, 1e-5)
    assert e2 <= 4 * max(e1, 1e-12) + 1e-9


def test_grad_check_epsilon_bounds():
    with pytest.raises(ValueError):
        nc.grad_check(tiny_model(), np.zeros(4), 1e-2)


# --- persistence ----------------------------------------------------------------

def test_model_save_load_bit_exact(tmp_path):
    streams = small_streams(3, 20)
    model = nc.train_stage1(tiny_model(n=4, m=8), streams,
                            nc.TrainConfig(epochs=2, seed=3)).model
    model = nc.train_stage2(model, streams,
                            nc.TrainConfig(epochs=2, train_ber=(0, 0.1), seed=4)).model
    path = tmp_path / "codec.svcmodel"
    nc.save_model(model, path)
    loaded = nc.load_model(path)
    assert loaded.n == model.n and loaded.m == model.m
    assert loaded.has_stage2
    for a, b in zip(loaded.enc.params() + loaded.dec.params()
                    + loaded.enc2.params() + loaded.dec2.params(),
                    model.enc.params() + model.dec.params()
                    + model.enc2.params() + model.dec2.params()):
        assert np.array_equal(a, b)
    # identical bytes when saved twice
    path2 = tmp_path / "codec2.svcmodel"
    nc.save_model(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_history_csv(tmp_path):
    res = nc.train_stage1(tiny_model(n=4, m=8), small_streams(3, 20),
                          nc.TrainConfig(epochs=3, seed=2))
    path = tmp_path / "loss.csv"
    nc.save_history_csv(res.history, path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "epoch,train_loss,val_loss"
    assert len(lines) == 4


def test_symbol_codec_save_load(tmp_path):
    codec = nc.SymbolCodec.build("quantized_resolution", n=4, m=16, seed=5)
    codec.alpha, codec.beta = 1.9, 0.8
    codec.powers = np.linspace(1.4, 0.6, 16)
    path = tmp_path / "sym.svcmodel"
    nc.save_symbol_codec(codec, path)
    loaded = nc.load_symbol_codec(path)
    assert loaded.mode == codec.mode
    assert loaded.alpha == codec.alpha and loaded.beta == codec.beta
    assert np.array_equal(loaded.powers, codec.powers)
    x = np.random.default_rng(0).uniform(-0.5, 0.5, (1, 8))
    assert np.array_equal(loaded.enc.forward(x), codec.enc.forward(x))


def test_symbol_codec_training_smoke():
    streams = small_streams(4, 30)
    for mode in ("full_resolution", "quantized_resolution", "qam16"):
        codec = nc.SymbolCodec.build(mode, n=4, m=8, seed=6)
        cfg = nc.SymbolTrainConfig(epochs=3, seed=7, L=4, power_update_every=2,
                                   snr_db_range=(6.0, 6.0))
        res = nc.train_symbol_codec(codec, streams, cfg)
        assert len(res.history) == 3
        assert np.isfinite(res.history[-1][2])
        if mode != "qam16":
            assert res.model.powers is not None
            assert res.model.powers.mean() == pytest.approx(1.0)
