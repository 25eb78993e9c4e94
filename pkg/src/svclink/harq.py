"""HARQ session machinery for three schemes.

rs_irharq: blocks of 3 frames (3 x 160 codec bits + 32-bit CRC = 64 info
octets) protected by RS(255, 64); 127 symbols go out first, the remaining
128 as incremental redundancy, then full retransmissions. The CRC is the
ACK source.

svc_harq: per frame, 160 stage-1 bits; a learned fluency detector compares
the decode against the previous accepted decode and NACKs trigger 160
incremental stage-2 bits (combined 320-bit decode), then full
retransmissions of both stages.

svc_csi_harq: identical, except the first transmission rides CSI-sorted
subchannels while the incremental stage deliberately ignores CSI.

ACK feedback is instantaneous and error-free. Every transmitted payload
bit is accounted in HarqSession.bits_used.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import fec, neuralcodec, phy
from .kpstream import AKD_ACCEPT_THRESHOLD, KeypointFrame, KeypointStream, akd_flat

RS_BLOCK_FRAMES = 3
DEFAULT_MAX_ROUNDS = 4

_STATES = ("Idle", "AwaitAck", "Incremental", "Retransmit", "Done")


class SessionStateError(RuntimeError):
    """Illegal HARQ state transition."""


class HarqSession:
    """Per-frame (or per-block) transmission state machine.

    Legal flow: Idle -> AwaitAck -> Done, or -> Incremental -> AwaitAck ->
    Done, or -> Retransmit -> AwaitAck -> ... capped at max_rounds
    transmissions, after which the session is forced Done.
    """

    def __init__(self, scheme: str, max_rounds: int = DEFAULT_MAX_ROUNDS):
        if max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        self.scheme = scheme
        self.max_rounds = max_rounds
        self.state = "Idle"
        self.tx_count = 0
        self.bits_used = 0
        self.ack_history: list[bool] = []
        self.tx_sizes: list[int] = []

    def start_tx(self, nbits: int) -> None:
        if self.state not in ("Idle", "Incremental", "Retransmit"):
            raise SessionStateError(f"cannot transmit from state {self.state}")
        if self.tx_count >= self.max_rounds:
            raise SessionStateError("round cap exceeded")
        self.tx_count += 1
        self.bits_used += int(nbits)
        self.tx_sizes.append(int(nbits))
        self.state = "AwaitAck"

    def ack(self, ok: bool) -> None:
        if self.state != "AwaitAck":
            raise SessionStateError(f"unexpected ACK in state {self.state}")
        self.ack_history.append(bool(ok))
        if ok or self.tx_count >= self.max_rounds:
            self.state = "Done"
        elif self.tx_count == 1:
            self.state = "Incremental"
        else:
            self.state = "Retransmit"

    @property
    def done(self) -> bool:
        return self.state == "Done"

    @property
    def delivered_ok(self) -> bool:
        return bool(self.ack_history) and self.ack_history[-1]

    def audit_bits(self, first_tx_bits: int, incremental_bits: int) -> bool:
        """Replay ack_history against the scheme's bit schedule."""
        expected = []
        for i, _ in enumerate(self.ack_history):
            if i == 0:
                expected.append(first_tx_bits)
            elif i == 1:
                expected.append(incremental_bits)
            else:
                expected.append(first_tx_bits + incremental_bits)
        return expected == self.tx_sizes and sum(expected) == self.bits_used


@dataclass
class TrialRecord:
    """One simulated frame's outcome."""

    stream_id: str
    frame: int
    scheme: str
    ber_or_snr: float
    rounds: int
    bits_used: float
    akd: float
    detector_score: float
    accepted: bool

    CSV_HEADER = "stream_id,frame,scheme,ber_or_snr,rounds,bits_used,akd,detector_score,accepted"

    def csv_row(self) -> str:
        return ",".join([
            self.stream_id, str(self.frame), self.scheme,
            format(self.ber_or_snr, ".10g"), str(self.rounds),
            format(self.bits_used, ".10g"), format(self.akd, ".10g"),
            format(self.detector_score, ".10g"), str(int(self.accepted)),
        ])


def write_trial_records(path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(TrialRecord.CSV_HEADER + "\n")
        for r in records:
            fh.write(r.csv_row() + "\n")


@dataclass
class LinkChannel:
    """Channel used by the session runners.

    kind='bsc' flips bits i.i.d. at probability ber. kind='ofdm' draws a
    fresh multipath realization per transmission (new time slot) and
    carries the bits as 16-QAM across the subchannels.
    """

    kind: str = "bsc"
    ber: float = 0.0
    noise_power: float = 1e-12
    L: int = phy.DEFAULT_SUBCHANNELS
    num_taps: int = 3
    pdp_decay: float = 1.0
    powers: np.ndarray | None = None
    label: float | None = None  # sweep-axis value recorded in TrialRecords

    def __post_init__(self):
        if self.kind not in ("bsc", "ofdm"):
            raise ValueError(f"unknown channel kind {self.kind!r}")

    @property
    def axis_value(self) -> float:
        if self.label is not None:
            return self.label
        if self.kind == "bsc":
            return self.ber
        return float(-10.0 * np.log10(self.noise_power))

    def send(self, bits, use_csi: bool, rng) -> np.ndarray:
        if self.kind == "bsc":
            return phy.bsc(bits, self.ber, rng)
        ch = phy.realize_channel(rng, L=self.L, num_taps=self.num_taps,
                                 pdp_decay=self.pdp_decay, noise_power=self.noise_power)
        mode = phy.ConstellationMode("qam16", powers=self.powers)
        rx, _ = phy.transmit_bits(bits, ch, mode, use_csi=use_csi, seed=rng)
        return rx


# --- fluency detector --------------------------------------------------------

def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class FluencyDetector:
    """One logistic unit over the squared per-coordinate differences between
    the candidate decode and the previous accepted decode."""

    weights: np.ndarray
    bias: float = 0.0
    threshold: float = 0.5

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)

    @staticmethod
    def build(n: int) -> "FluencyDetector":
        return FluencyDetector(weights=np.zeros(2 * n), bias=0.0)

    def score(self, features) -> float:
        return float(_sigmoid(np.asarray(features) @ self.weights + self.bias))

    def judge(self, reference, candidate, true_frame=None):
        """(score, accept) for a candidate decode; true_frame is ignored
        (present so oracle detectors can share the interface)."""
        feats = fluency_features(reference, candidate)
        s = self.score(feats)
        return s, s > self.threshold


@dataclass
class OracleDetector:
    """Benchmark detector that cheats with the true frame; accepts iff the
    true AKD is inside the acceptance band."""

    threshold: float = AKD_ACCEPT_THRESHOLD

    def judge(self, reference, candidate, true_frame=None):
        if true_frame is None:
            raise ValueError("oracle detector needs the true frame")
        a = akd_flat(np.asarray(true_frame).reshape(-1), np.asarray(candidate).reshape(-1))
        return -a, a < self.threshold


def fluency_features(prev_flat, cur_flat) -> np.ndarray:
    d = np.asarray(cur_flat, dtype=np.float64) - np.asarray(prev_flat, dtype=np.float64)
    return d * d


FLUENCY_BER_GRID = tuple(round(0.02 * i, 2) for i in range(11))  # 0, 0.02, ..., 0.2


def make_fluency_dataset(model, streams, ber_grid=FLUENCY_BER_GRID, seed: int = 0):
    """Run the stage-1 codec over a BER grid and label each consecutive-decode
    pair by whether the current frame's true AKD stays inside the band."""
    rng = np.random.default_rng(seed)
    feats, labels = [], []
    for ber in ber_grid:
        for stream in streams:
            X = stream.as_array()
            prev = None
            for i, x in enumerate(X):
                bits = neuralcodec.encode(model, x)
                y = neuralcodec.decode_flat(model, phy.bsc(bits, ber, rng))
                if prev is not None:
                    feats.append(fluency_features(prev, y))
                    labels.append(1.0 if akd_flat(x, y) < AKD_ACCEPT_THRESHOLD else 0.0)
                prev = y
    return np.asarray(feats), np.asarray(labels)


def train_fluency(detector: FluencyDetector, features, labels,
                  max_iter: int = 300) -> FluencyDetector:
    """Cross-entropy logistic regression (L-BFGS) on labeled feature rows."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ValueError("features must be (N, 2n) with one label per row")
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("labeled set must contain both classes")

    def objective(theta):
        w, b = theta[:-1], theta[-1]
        z = X @ w + b
        # stable log-sigmoid cross-entropy
        loss = np.mean(np.logaddexp(0.0, z) - y * z)
        p = _sigmoid(z)
        g = (p - y) / y.size
        return loss, np.concatenate([X.T @ g, [g.sum()]])

    theta0 = np.zeros(X.shape[1] + 1)
    res = optimize.minimize(objective, theta0, jac=True, method="L-BFGS-B",
                            options={"maxiter": max_iter})
    return FluencyDetector(weights=res.x[:-1], bias=float(res.x[-1]),
                           threshold=detector.threshold)


def roc_auc(labels, scores) -> float:
    """Rank-based AUC (Mann-Whitney), ties averaged."""
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need both classes for AUC")
    from scipy.stats import rankdata

    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


# --- scheme runners ----------------------------------------------------------

def _as_flat_frames(stream):
    if isinstance(stream, KeypointStream):
        return stream.as_array(), stream.stream_id
    X = np.asarray(stream, dtype=np.float64)
    return X, ""


def _run_svc_session(model, detector, stream, ch: LinkChannel, rng,
                     max_rounds: int, use_csi_round1: bool, scheme: str):
    if not model.has_stage2:
        raise neuralcodec.TrainingError(f"{scheme} needs a trained stage-2 codec")
    X, stream_id = _as_flat_frames(stream)
    nbits = model.bits_per_frame
    delivered = [X[0]]  # first frame is shared knowledge, zero session bits
    reference = X[0]
    records = []
    for i in range(1, X.shape[0]):
        x = X[i]
        session = HarqSession(scheme, max_rounds)
        bits1 = neuralcodec.encode(model, x)
        bits2 = None
        rx1 = ch.send(bits1, use_csi_round1, rng)
        session.start_tx(nbits)
        cand = neuralcodec.decode_flat(model, rx1, "first")
        score, accepted = detector.judge(reference, cand, x)
        session.ack(accepted)
        best_score, best = score, cand

        if not accepted and session.state == "Incremental":
            bits2 = neuralcodec.encode_stage2(model, x)
            rx2 = ch.send(bits2, False, rng)
            session.start_tx(nbits)
            cand = neuralcodec.decode_flat(model, np.concatenate([rx1, rx2]), "combined")
            score, accepted = detector.judge(reference, cand, x)
            session.ack(accepted)
            if score > best_score:
                best_score, best = score, cand

        while not accepted and session.state == "Retransmit":
            if bits2 is None:
                bits2 = neuralcodec.encode_stage2(model, x)
            rx1 = ch.send(bits1, use_csi_round1, rng)
            rx2 = ch.send(bits2, False, rng)
            session.start_tx(2 * nbits)
            cand = neuralcodec.decode_flat(model, np.concatenate([rx1, rx2]), "combined")
            score, accepted = detector.judge(reference, cand, x)
            session.ack(accepted)
            if score > best_score:
                best_score, best = score, cand

        out = cand if accepted else best
        delivered.append(out)
        if accepted:
            reference = out
        records.append(TrialRecord(
            stream_id=stream_id, frame=i, scheme=scheme,
            ber_or_snr=ch.axis_value, rounds=session.tx_count,
            bits_used=float(session.bits_used), akd=akd_flat(x, out),
            detector_score=float(best_score if not accepted else score),
            accepted=accepted,
        ))
    frames = [KeypointFrame(np.clip(v, -1.0, 1.0).reshape(-1, 2)) for v in delivered]
    return KeypointStream(frames, stream_id=stream_id or "decoded"), records


def run_svc_harq(model, detector, stream, ch: LinkChannel, rng,
                 max_rounds: int = DEFAULT_MAX_ROUNDS):
    """Semantic HARQ: fluency-detector ACKs, stage-2 incremental bits, then
    full retransmissions. Returns (decoded stream, TrialRecords)."""
    return _run_svc_session(model, detector, stream, ch, rng, max_rounds,
                            use_csi_round1=False, scheme="svc_harq")


def run_svc_csi_harq(model, detector, stream, ch: LinkChannel, rng,
                     max_rounds: int = DEFAULT_MAX_ROUNDS):
    """Like run_svc_harq, but the first transmission (and the stage-1 part of
    retransmissions) rides CSI-sorted subchannels; the incremental stage
    ignores CSI so it stays robust under mismatched channels."""
    if ch.kind != "ofdm":
        raise ValueError("svc_csi_harq needs an OFDM channel")
    return _run_svc_session(model, detector, stream, ch, rng, max_rounds,
                            use_csi_round1=True, scheme="svc_csi_harq")


def run_svc(model, stream, ch: LinkChannel, rng, use_csi: bool = False,
            stage: str = "first", scheme: str = "svc"):
    """No-feedback baseline: fixed bits per frame (160 for stage='first',
    320 for stage='combined'), no detector, no retransmission."""
    X, stream_id = _as_flat_frames(stream)
    delivered = [X[0]]
    records = []
    for i in range(1, X.shape[0]):
        x = X[i]
        bits1 = neuralcodec.encode(model, x)
        rx = ch.send(bits1, use_csi, rng)
        nbits = bits1.size
        if stage == "combined":
            bits2 = neuralcodec.encode_stage2(model, x)
            rx = np.concatenate([rx, ch.send(bits2, False, rng)])
            nbits += bits2.size
        y = neuralcodec.decode_flat(model, rx, stage)
        delivered.append(y)
        records.append(TrialRecord(
            stream_id=stream_id, frame=i, scheme=scheme, ber_or_snr=ch.axis_value,
            rounds=1, bits_used=float(nbits), akd=akd_flat(x, y),
            detector_score=float("nan"), accepted=True,
        ))
    frames = [KeypointFrame(np.clip(v, -1.0, 1.0).reshape(-1, 2)) for v in delivered]
    return KeypointStream(frames, stream_id=stream_id or "decoded"), records


def run_rs_irharq(frame_block, ch: LinkChannel, model, rng,
                  max_rounds: int = DEFAULT_MAX_ROUNDS,
                  first_tx_symbols: int = 127, code: fec.RsCode | None = None):
    """Conventional baseline on a 3-frame block.

    Payload: 3 x 160 stage-1 bits + CRC-32 = 64 info octets -> RS(255, 64).
    Round 1 sends first_tx_symbols symbols (untransmitted ones decode as
    erasures); a CRC failure triggers the remaining symbols, then full
    retransmissions. With first_tx_symbols == 255 the incremental round
    degenerates to a fresh full copy. Returns (decoded frames, records).
    """
    code = code or fec.rs_code(255, 64)
    if not 1 <= first_tx_symbols <= code.n:
        raise ValueError("first_tx_symbols must be in [1, n]")
    X, stream_id = _as_flat_frames(frame_block)
    if X.shape[0] != RS_BLOCK_FRAMES:
        raise ValueError(f"rs_irharq runs on blocks of {RS_BLOCK_FRAMES} frames")
    nbits = model.bits_per_frame
    payload = np.concatenate([neuralcodec.encode(model, x) for x in X])
    tag_bits = fec.crc_tag_bits(fec.crc32(payload))
    info = fec.bits_to_octets(np.concatenate([payload, tag_bits]))
    if info.size != code.k:
        raise ValueError(f"payload+CRC is {info.size} octets, code expects k={code.k}")
    codeword = fec.rs_encode(code, info)

    session = HarqSession("rs_irharq", max_rounds)
    received = np.zeros(code.n, dtype=np.int64)
    erased = np.ones(code.n, dtype=bool)

    def attempt():
        info_hat, _ = fec.rs_decode(code, received, erased)
        bits_hat = fec.octets_to_bits(info_hat)
        payload_hat = bits_hat[:payload.size]
        ok = fec.crc_check(payload_hat, fec.crc_tag_from_bits(bits_hat[payload.size:payload.size + 32]))
        return payload_hat, ok

    rx = ch.send(fec.octets_to_bits(codeword[:first_tx_symbols]), False, rng)
    received[:first_tx_symbols] = fec.bits_to_octets(rx)
    erased[:first_tx_symbols] = False
    session.start_tx(first_tx_symbols * 8)
    payload_hat, ok = attempt()
    session.ack(ok)

    if not ok and session.state == "Incremental":
        remaining = code.n - first_tx_symbols
        if remaining > 0:
            rx = ch.send(fec.octets_to_bits(codeword[first_tx_symbols:]), False, rng)
            received[first_tx_symbols:] = fec.bits_to_octets(rx)
            session.start_tx(remaining * 8)
        else:
            rx = ch.send(fec.octets_to_bits(codeword), False, rng)
            received[:] = fec.bits_to_octets(rx)
            session.start_tx(code.n * 8)
        erased[:] = False
        payload_hat, ok = attempt()
        session.ack(ok)

    while not ok and session.state == "Retransmit":
        rx = ch.send(fec.octets_to_bits(codeword), False, rng)
        received[:] = fec.bits_to_octets(rx)
        erased[:] = False
        session.start_tx(code.n * 8)
        payload_hat, ok = attempt()
        session.ack(ok)

    decoded, records = [], []
    bits_per_frame = session.bits_used / RS_BLOCK_FRAMES
    for i in range(RS_BLOCK_FRAMES):
        y = neuralcodec.decode_flat(model, payload_hat[i * nbits:(i + 1) * nbits])
        decoded.append(KeypointFrame(np.clip(y, -1.0, 1.0).reshape(-1, 2)))
        records.append(TrialRecord(
            stream_id=stream_id, frame=i, scheme="rs_irharq",
            ber_or_snr=ch.axis_value, rounds=session.tx_count,
            bits_used=bits_per_frame, akd=akd_flat(X[i], y),
            detector_score=1.0 if ok else 0.0, accepted=ok,
        ))
    return decoded, records


# --- detector persistence ----------------------------------------------------

def save_detector(det: FluencyDetector, path) -> None:
    from .neuralcodec import _fmt

    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("svclink-model 1\n")
        fh.write("kind fluency\n")
        fh.write(f"inputs {det.weights.size}\n")
        fh.write(f"threshold {_fmt(det.threshold)}\n")
        fh.write("w " + " ".join(_fmt(v) for v in det.weights) + "\n")
        fh.write(f"b {_fmt(det.bias)}\n")
        fh.write("end\n")


def load_detector(path) -> FluencyDetector:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if lines[0] != "svclink-model 1" or lines[1] != "kind fluency":
        raise ValueError(f"{path}: not a fluency detector file")
    fields = dict(ln.split(" ", 1) for ln in lines[2:] if ln != "end")
    w = np.array([float(v) for v in fields["w"].split()])
    if w.size != int(fields["inputs"]):
        raise ValueError(f"{path}: weight count mismatch")
    return FluencyDetector(weights=w, bias=float(fields["b"]),
                           threshold=float(fields["threshold"]))
