import numpy as np
import pytest

from svclink import kpstream as kp


def test_synth_deterministic():
    a = kp.synth_stream(7, 10, 100, "smooth")
    b = kp.synth_stream(7, 10, 100, "smooth")
    assert a == b
    assert np.array_equal(a.as_array(), b.as_array())


def test_synth_call_order_invariance():
    first = kp.synth_stream(3, 10, 50)
    kp.synth_stream(99, 4, 20, "jittery")  # unrelated call in between
    second = kp.synth_stream(3, 10, 50)
    assert first == second


def test_synth_coords_clamped():
    s = kp.synth_stream(7, 10, 100, "smooth")
    arr = s.as_array()
    assert arr.shape == (100, 20)
    assert np.all(np.abs(arr) <= 1.0)


def test_synth_jittery_clamped_and_distinct():
    s = kp.synth_stream(7, 10, 100, "jittery")
    assert np.all(np.abs(s.as_array()) <= 1.0)
    assert not np.array_equal(s.as_array(), kp.synth_stream(7, 10, 100, "smooth").as_array())


def test_smooth_adjacent_akd_bound():
    # oracle: max over every adjacent pair; the generator bounds per-axis
    # deltas by 0.03, so AKD <= sqrt(2)*0.03 < 0.06
    for seed in (7, 8, 9):
        s = kp.synth_stream(seed, 10, 100, "smooth")
        worst = max(kp.akd(a, b) for a, b in zip(s.frames, s.frames[1:]))
        assert worst <= 0.06


def test_smooth_delta_bound():
    s = kp.synth_stream(11, 10, 80, "smooth")
    arr = s.as_array()
    assert np.abs(np.diff(arr, axis=0)).max() <= kp.SMOOTH_DELTA_BOUND + 1e-12


def test_synth_argument_errors():
    with pytest.raises(ValueError):
        kp.synth_stream(1, 10, 1)
    with pytest.raises(ValueError):
        kp.synth_stream(1, 0, 10)
    with pytest.raises(ValueError):
        kp.synth_stream(1, 10, 10, "wobbly")


def test_akd_identity():
    f = kp.synth_stream(1, 10, 5).frames[0]
    assert kp.akd(f, f) == 0.0


def test_akd_345_triangle():
    a = kp.KeypointFrame(np.array([[0.0, 0.0]]))
    b = kp.KeypointFrame(np.array([[0.3, 0.4]]))
    assert kp.akd(a, b) == pytest.approx(0.5)


def test_akd_two_point_hand_computed():
    # distances are 0.1 and 0.1, mean 0.1
    a = kp.KeypointFrame(np.array([[0.0, 0.0], [1.0, 1.0]]))
    b = kp.KeypointFrame(np.array([[0.0, 0.1], [1.0, 0.9]]))
    assert kp.akd(a, b) == pytest.approx(0.1)


def test_akd_mismatched_n():
    a = kp.KeypointFrame(np.zeros((2, 2)))
    b = kp.KeypointFrame(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        kp.akd(a, b)


def test_akd_metric_properties():
    rng = np.random.default_rng(0)
    frames = [kp.KeypointFrame(rng.uniform(-1, 1, (6, 2))) for _ in range(30)]
    for _ in range(200):
        a, b, c = (frames[i] for i in rng.integers(0, len(frames), 3))
        dab, dba = kp.akd(a, b), kp.akd(b, a)
        assert dab == pytest.approx(dba)
        assert dab >= 0.0
        assert kp.akd(a, c) <= dab + kp.akd(b, c) + 1e-12
    f = frames[0]
    assert kp.akd(f, kp.KeypointFrame(f.coords.copy())) == 0.0


def test_frame_invariants():
    with pytest.raises(kp.StreamError):
        kp.KeypointFrame(np.array([[1.5, 0.0]]))
    with pytest.raises(kp.StreamError):
        kp.KeypointFrame(np.zeros((0, 2)))
    with pytest.raises(kp.StreamError):
        kp.KeypointFrame(np.zeros((3, 3)))


def test_stream_invariants():
    f = kp.KeypointFrame(np.zeros((2, 2)))
    with pytest.raises(kp.StreamError):
        kp.KeypointStream([f])
    g = kp.KeypointFrame(np.zeros((3, 2)))
    with pytest.raises(kp.StreamError):
        kp.KeypointStream([f, g])


def test_save_load_round_trip(tmp_path):
    s = kp.synth_stream(42, 10, 25, "jittery")
    path = tmp_path / "stream.csv"
    kp.save_stream(s, path)
    loaded = kp.load_stream(path)
    assert loaded == s
    assert np.array_equal(loaded.as_array(), s.as_array())


def test_load_rejects_out_of_range(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("frame,x1,y1\n0,0.5,0.5\n1,1.5,0.0\n")
    with pytest.raises(kp.StreamError, match=":3.*range"):
        kp.load_stream(path)


def test_load_rejects_empty(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    with pytest.raises(kp.StreamError, match="length >= 2"):
        kp.load_stream(path)


def test_load_rejects_single_frame(tmp_path):
    path = tmp_path / "one.csv"
    path.write_text("frame,x1,y1\n0,0.1,0.2\n")
    with pytest.raises(kp.StreamError, match="length >= 2"):
        kp.load_stream(path)


def test_load_rejects_malformed_row_with_line_number(tmp_path):
    path = tmp_path / "mal.csv"
    path.write_text("frame,x1,y1\n0,0.1,0.2\n1,0.1\n")
    with pytest.raises(kp.StreamError, match=":3"):
        kp.load_stream(path)


def test_load_rejects_non_numeric(tmp_path):
    path = tmp_path / "nan.csv"
    path.write_text("frame,x1,y1\n0,0.1,0.2\n1,abc,0.2\n")
    with pytest.raises(kp.StreamError, match=":3"):
        kp.load_stream(path)


def test_load_rejects_bad_header(tmp_path):
    path = tmp_path / "hdr.csv"
    path.write_text("x1,y1\n0.1,0.2\n")
    with pytest.raises(kp.StreamError, match="header"):
        kp.load_stream(path)


def test_akd_threshold_constant():
    # 5 pixels on a 256-wide frame, normalized by 2/256
    assert kp.AKD_ACCEPT_THRESHOLD == pytest.approx(5 * 2 / 256)
