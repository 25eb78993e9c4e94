"""Experiment orchestration and the svclink CLI.

Subcommands:
  train     -> .svcmodel artifacts (codec, fluency detector, constellation)
  sweep     -> aggregate CSV over a BER or SNR grid
  validate  -> run the invariant suite, print one line per property

Config files are INI-style key/value sections; environment variables never
override them. Every trial is reproducible in isolation: trial t at grid
point g runs with seed = base_seed XOR sha256(repr(g), t), so rerunning a
sweep yields byte-identical CSV output.

Exit codes: 0 ok, 2 config error, 3 missing artifact, 4 validation failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import fec, harq, kpstream, neuralcodec, phy

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_VALIDATION = 4

SCHEMES = ("svc", "svc_harq", "rs_irharq", "svc_csi", "svc_csi_harq")


class ConfigError(ValueError):
    pass


def stable_seed(base_seed: int, grid_value, trial: int) -> int:
    """Process-stable per-trial seed: base XOR sha256(grid, trial)."""
    digest = hashlib.sha256(f"{grid_value!r}|{trial}".encode()).digest()
    return (base_seed ^ int.from_bytes(digest[:8], "big")) & 0x7FFFFFFFFFFFFFFF


class RunningStat:
    """One-pass (Welford) mean/std accumulator; merge order never matters
    for the totals because updates are count-weighted."""

    def __init__(self):
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0

    def add(self, x: float) -> None:
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)

    @property
    def std(self) -> float:
        return float(np.sqrt(self.m2 / self.count)) if self.count else 0.0


@dataclass
class ExperimentConfig:
    schemes: list = field(default_factory=lambda: ["svc_harq"])
    trials: int = 50
    base_seed: int = 1234
    frames_per_trial: int = 12
    max_rounds: int = 4

    channel_kind: str = "bsc"          # bsc | ofdm
    ber_grid: list = field(default_factory=lambda: [0.0, 0.02, 0.04, 0.06, 0.08, 0.1])
    snr_grid: list | None = None       # dB, for constellation sweeps
    subchannels: int = phy.DEFAULT_SUBCHANNELS
    taps: int = 3
    pdp_decay: float = 1.0

    codec_path: str = ""
    detector_path: str = ""
    constellation_path: str = ""

    stream_n: int = kpstream.DEFAULT_NUM_KEYPOINTS
    stream_file: str = ""

    train_ber: float | tuple = 0.0
    stage2_ber: tuple = (0.0, 0.1)
    epochs: int = 200
    stage2_epochs: int = 120
    constellation_epochs: int = 60
    batch_size: int = 64
    train_seed: int = 7
    train_streams: int = 200
    train_frames: int = 30
    m: int = neuralcodec.DEFAULT_M
    quant_bits: int = neuralcodec.DEFAULT_QUANT_BITS

    out_dir: str = "out"

    def validate(self) -> None:
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if not self.schemes:
            raise ConfigError("at least one scheme required")
        for s in self.schemes:
            if s not in SCHEMES:
                raise ConfigError(f"unknown scheme {s!r} (choose from {SCHEMES})")
        if self.channel_kind not in ("bsc", "ofdm"):
            raise ConfigError(f"unknown channel kind {self.channel_kind!r}")
        grid = self.snr_grid if self.snr_grid is not None else self.ber_grid
        if not grid:
            raise ConfigError("grid must be nonempty")
        if self.frames_per_trial < 2:
            raise ConfigError("frames_per_trial must be >= 2")
        for path in (self.stream_file,):
            if path and not os.path.exists(path):
                raise ConfigError(f"referenced file missing: {path}")


def _parse_floats(text: str) -> list:
    return [float(v) for v in text.replace(",", " ").split()]


def load_config(path) -> ExperimentConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.read(path)
    cfg = ExperimentConfig()
    run = parser["run"] if parser.has_section("run") else {}
    if "schemes" in run:
        cfg.schemes = [s.strip() for s in run["schemes"].split(",") if s.strip()]
    cfg.trials = int(run.get("trials", cfg.trials))
    cfg.base_seed = int(run.get("base_seed", cfg.base_seed))
    cfg.frames_per_trial = int(run.get("frames_per_trial", cfg.frames_per_trial))
    cfg.max_rounds = int(run.get("max_rounds", cfg.max_rounds))
    cfg.out_dir = run.get("out_dir", cfg.out_dir)

    ch = parser["channel"] if parser.has_section("channel") else {}
    cfg.channel_kind = ch.get("kind", cfg.channel_kind)
    if "ber_grid" in ch:
        cfg.ber_grid = _parse_floats(ch["ber_grid"])
    if "snr_grid" in ch:
        cfg.snr_grid = _parse_floats(ch["snr_grid"])
    cfg.subchannels = int(ch.get("subchannels", cfg.subchannels))
    cfg.taps = int(ch.get("taps", cfg.taps))
    cfg.pdp_decay = float(ch.get("pdp_decay", cfg.pdp_decay))

    codec = parser["codec"] if parser.has_section("codec") else {}
    cfg.codec_path = codec.get("model", cfg.codec_path)
    cfg.detector_path = codec.get("detector", cfg.detector_path)
    cfg.constellation_path = codec.get("constellation", cfg.constellation_path)

    st = parser["stream"] if parser.has_section("stream") else {}
    cfg.stream_n = int(st.get("n", cfg.stream_n))
    cfg.stream_file = st.get("file", cfg.stream_file)

    tr = parser["train"] if parser.has_section("train") else {}
    if "train_ber" in tr:
        vals = _parse_floats(tr["train_ber"])
        cfg.train_ber = vals[0] if len(vals) == 1 else tuple(vals)
    if "stage2_ber" in tr:
        cfg.stage2_ber = tuple(_parse_floats(tr["stage2_ber"]))
    cfg.epochs = int(tr.get("epochs", cfg.epochs))
    cfg.stage2_epochs = int(tr.get("stage2_epochs", cfg.stage2_epochs))
    cfg.constellation_epochs = int(tr.get("constellation_epochs", cfg.constellation_epochs))
    cfg.batch_size = int(tr.get("batch_size", cfg.batch_size))
    cfg.train_seed = int(tr.get("seed", cfg.train_seed))
    cfg.train_streams = int(tr.get("streams", cfg.train_streams))
    cfg.train_frames = int(tr.get("frames", cfg.train_frames))
    cfg.m = int(tr.get("m", cfg.m))
    cfg.quant_bits = int(tr.get("quant_bits", cfg.quant_bits))

    cfg.validate()
    return cfg


# --- train ------------------------------------------------------------------

def training_streams(cfg: ExperimentConfig):
    return [kpstream.synth_stream(1000 + s, cfg.stream_n, cfg.train_frames)
            for s in range(cfg.train_streams)]


def cmd_train(cfg: ExperimentConfig) -> int:
    """Produce codec.svcmodel (stage 1 + stage 2), fluency.svcmodel, and
    constellation.svcmodel plus loss-history CSVs in out_dir."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    streams = training_streams(cfg)

    base = neuralcodec.CodecModel.build(n=cfg.stream_n, m=cfg.m,
                                        quant_bits=cfg.quant_bits, seed=cfg.train_seed)
    res1 = neuralcodec.train_stage1(base, streams, neuralcodec.TrainConfig(
        epochs=cfg.epochs, batch_size=cfg.batch_size, train_ber=cfg.train_ber,
        seed=cfg.train_seed + 10))
    neuralcodec.save_history_csv(res1.history, os.path.join(cfg.out_dir, "loss_stage1.csv"))

    res2 = neuralcodec.train_stage2(res1.model, streams, neuralcodec.TrainConfig(
        epochs=cfg.stage2_epochs, batch_size=cfg.batch_size, train_ber=cfg.stage2_ber,
        seed=cfg.train_seed + 20))
    neuralcodec.save_history_csv(res2.history, os.path.join(cfg.out_dir, "loss_stage2.csv"))
    codec_path = os.path.join(cfg.out_dir, "codec.svcmodel")
    neuralcodec.save_model(res2.model, codec_path)

    fl_streams = [kpstream.synth_stream(3000 + s, cfg.stream_n, 40) for s in range(8)]
    feats, labels = harq.make_fluency_dataset(res2.model, fl_streams, seed=cfg.train_seed + 30)
    det = harq.train_fluency(harq.FluencyDetector.build(cfg.stream_n), feats, labels)
    harq.save_detector(det, os.path.join(cfg.out_dir, "fluency.svcmodel"))

    sym = neuralcodec.SymbolCodec.build("quantized_resolution", n=cfg.stream_n,
                                        m=2 * cfg.m, seed=cfg.train_seed)
    res3 = neuralcodec.train_symbol_codec(sym, streams, neuralcodec.SymbolTrainConfig(
        epochs=cfg.constellation_epochs, batch_size=cfg.batch_size,
        seed=cfg.train_seed + 40, L=cfg.subchannels, num_taps=cfg.taps,
        pdp_decay=cfg.pdp_decay))
    neuralcodec.save_history_csv(res3.history, os.path.join(cfg.out_dir, "loss_constellation.csv"))
    phy.save_constellation(res3.model.constellation(),
                           os.path.join(cfg.out_dir, "constellation.svcmodel"))

    print(f"wrote codec.svcmodel fluency.svcmodel constellation.svcmodel to {cfg.out_dir}")
    return EXIT_OK


# --- sweep ------------------------------------------------------------------

def _link_channel(cfg: ExperimentConfig, grid_value: float) -> harq.LinkChannel:
    if cfg.channel_kind == "bsc":
        return harq.LinkChannel("bsc", ber=grid_value, label=grid_value)
    noise = phy.calibrate_noise_for_ber(grid_value, L=cfg.subchannels, num_taps=cfg.taps,
                                        pdp_decay=cfg.pdp_decay, n_realizations=500,
                                        seed=cfg.base_seed) if grid_value > 0 else 1e-12
    return harq.LinkChannel("ofdm", noise_power=noise, L=cfg.subchannels,
                            num_taps=cfg.taps, pdp_decay=cfg.pdp_decay, label=grid_value)


def _trial_stream(cfg: ExperimentConfig, grid_value, trial: int):
    seed = stable_seed(cfg.base_seed, grid_value, trial)
    return kpstream.synth_stream(seed, cfg.stream_n, cfg.frames_per_trial)


def run_scheme_point(scheme: str, cfg: ExperimentConfig, model, detector,
                     grid_value: float):
    """All trials of one scheme at one grid point; returns TrialRecords."""
    ch = _link_channel(cfg, grid_value)
    records = []
    for t in range(cfg.trials):
        rng = np.random.default_rng(stable_seed(cfg.base_seed + 1, grid_value, t))
        stream = _trial_stream(cfg, grid_value, t)
        if scheme == "svc":
            _, recs = harq.run_svc(model, stream, ch, rng)
        elif scheme == "svc_csi":
            _, recs = harq.run_svc(model, stream, ch, rng, use_csi=True, scheme="svc_csi")
        elif scheme == "svc_harq":
            _, recs = harq.run_svc_harq(model, detector, stream, ch, rng,
                                        max_rounds=cfg.max_rounds)
        elif scheme == "svc_csi_harq":
            _, recs = harq.run_svc_csi_harq(model, detector, stream, ch, rng,
                                            max_rounds=cfg.max_rounds)
        elif scheme == "rs_irharq":
            X = stream.as_array()
            recs = []
            for b in range(X.shape[0] // harq.RS_BLOCK_FRAMES):
                block = X[b * harq.RS_BLOCK_FRAMES:(b + 1) * harq.RS_BLOCK_FRAMES]
                _, r = harq.run_rs_irharq(block, ch, model, rng, max_rounds=cfg.max_rounds)
                recs += r
        else:
            raise ConfigError(f"unknown scheme {scheme!r}")
        records += recs
    return records


def cmd_sweep(cfg: ExperimentConfig, out_path: str, records_path: str | None = None) -> int:
    if not cfg.codec_path or not os.path.exists(cfg.codec_path):
        print(f"missing codec model: {cfg.codec_path!r}", file=sys.stderr)
        return EXIT_MISSING
    model = neuralcodec.load_model(cfg.codec_path)
    detector = None
    needs_det = any(s in ("svc_harq", "svc_csi_harq") for s in cfg.schemes)
    if needs_det:
        if not cfg.detector_path or not os.path.exists(cfg.detector_path):
            print(f"missing detector model: {cfg.detector_path!r}", file=sys.stderr)
            return EXIT_MISSING
        detector = harq.load_detector(cfg.detector_path)

    grid = cfg.snr_grid if cfg.snr_grid is not None else cfg.ber_grid
    lines = ["scheme,ber_or_snr,trials,frames,mean_akd,std_akd,mean_bits_per_frame,"
             "std_bits_per_frame,mean_rounds,accept_rate"]
    all_records = []
    for scheme in cfg.schemes:
        for g in grid:
            recs = run_scheme_point(scheme, cfg, model, detector, g)
            all_records += recs
            akd, bits = RunningStat(), RunningStat()
            rounds, accepted = RunningStat(), RunningStat()
            for r in recs:
                akd.add(r.akd)
                bits.add(r.bits_used)
                rounds.add(r.rounds)
                accepted.add(1.0 if r.accepted else 0.0)
            lines.append(",".join([
                scheme, format(g, ".10g"), str(cfg.trials), str(akd.count),
                format(akd.mean, ".10g"), format(akd.std, ".10g"),
                format(bits.mean, ".10g"), format(bits.std, ".10g"),
                format(rounds.mean, ".10g"), format(accepted.mean, ".10g"),
            ]))
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    if records_path:
        harq.write_trial_records(records_path, all_records)
    print(f"wrote {out_path} ({len(lines) - 1} rows)")
    return EXIT_OK


# --- validate ---------------------------------------------------------------

def _check_rs_radius(trials: int, rng, fault: str | None):
    code = fec.RsCode(255, 64)
    small = fec.RsCode(15, 7)
    if fault == "rs_table":
        # test hook: corrupt one generator coefficient so encode/decode
        # round trips break while every other property stays intact
        code._gen_desc = code._gen_desc.copy()
        code._gen_desc[5] ^= 0x17
    cases = [(code, 95, 0), (code, 31, 128), (code, 0, 191), (code, 50, 91)]
    cases += [(small, e, f) for e in range(0, 5) for f in range(0, 9 - 2 * e, 2)]
    count = ok = 0
    for cd, e, f in cases:
        for _ in range(max(1, trials // 10) if cd.n == 255 else trials):
            info = rng.integers(0, 256, cd.k)
            cw = fec.rs_encode(cd, info)
            r = cw.copy()
            perm = rng.permutation(cd.n)
            er = perm[:f]
            ep = perm[f:f + e]
            mask = np.zeros(cd.n, bool)
            mask[er] = True
            r[er] = rng.integers(0, 256, f)
            for p in ep:
                old = r[p]
                while r[p] == old:
                    r[p] = int(rng.integers(0, 256))
            dec, good = fec.rs_decode(cd, r, mask)
            count += 1
            ok += int(good and np.array_equal(dec, info))
    return ok, count


def _check_crc(trials: int, rng):
    count = ok = 0
    # named check value
    bits = fec.octets_to_bits(np.frombuffer(b"123456789", dtype=np.uint8))
    count += 1
    ok += int(fec.crc32(bits) == 0xCBF43926)
    for _ in range(trials):
        n = int(rng.integers(8, 1025))
        payload = rng.integers(0, 2, n).astype(np.uint8)
        tag = fec.crc32(payload)
        count += 1
        ok += int(fec.crc_check(payload, tag))
        flip = payload.copy()
        flip[int(rng.integers(0, n))] ^= 1
        count += 1
        ok += int(not fec.crc_check(flip, tag))
        burst_len = int(rng.integers(1, 33))
        start = int(rng.integers(0, max(1, n - burst_len)))
        burst = payload.copy()
        pattern = rng.integers(0, 2, burst_len).astype(np.uint8)
        pattern[0] = 1
        pattern[-1] = 1
        burst[start:start + burst_len] ^= pattern
        count += 1
        ok += int(not fec.crc_check(burst, tag))
    return ok, count


def _check_quantizer():
    count = ok = 0
    for bits in (1, 2, 3):
        q = (1 << bits) - 1
        for i in range(q + 1):
            v = i / q
            tup = neuralcodec.quantize(v, bits)
            count += 1
            ok += int(neuralcodec.dequantize(tup) == v)
    # 2-bit Gray adjacency: any single-bit flip moves exactly one level step
    # on the cyclic level ring
    for lvl in range(4):
        base = neuralcodec.quantize(lvl / 3, 2)
        for pos in range(2):
            flipped = list(base)
            flipped[pos] ^= 1
            lvl2 = round(neuralcodec.dequantize(tuple(flipped)) * 3)
            dist = min((lvl - lvl2) % 4, (lvl2 - lvl) % 4)
            count += 1
            ok += int(dist == 1)
    return ok, count


def _check_permutations(trials: int, rng):
    count = ok = 0
    for _ in range(trials):
        ch = phy.realize_channel(rng, L=16, num_taps=3, noise_power=1.0)
        perm = phy.sort_csi(ch)
        x = rng.standard_normal(64)
        count += 1
        ok += int(np.allclose(phy.invert_perm(phy.apply_perm(x, perm), perm), x))
        g2 = np.abs(ch.gains) ** 2
        count += 1
        ok += int(np.all(np.diff(g2[perm.order]) <= 1e-12))
    return ok, count


def _check_grad(rng):
    model = neuralcodec.CodecModel.build(n=3, m=8, seed=5)
    frame = rng.uniform(-0.5, 0.5, 6)
    err = neuralcodec.grad_check(model, frame, 1e-5)
    return int(err < 1e-4), 1


def _check_qam(rng):
    count = ok = 0
    for snr_db in (8.0, 10.0, 12.0, 14.0):
        snr = 10 ** (snr_db / 10)
        ch = phy.ChannelRealization(gains=np.ones(16, complex), noise_power=1.0 / snr)
        bits = rng.integers(0, 2, 200_000).astype(np.uint8)
        _, mask = phy.transmit_bits(bits, ch, seed=rng)
        mc = mask.mean()
        th = phy.qam16_ber(snr)
        count += 1
        ok += int(abs(mc - th) / th < 0.10)
    return ok, count


def cmd_validate(trials: int = 1000, seed: int = 0, fault: str | None = None) -> int:
    """Run the invariant suite; prints one pass/fail line (with counts) per
    property. fault is a test hook that injects a known corruption."""
    rng = np.random.default_rng(seed)
    checks = [
        ("rs_radius", lambda: _check_rs_radius(trials, rng, fault)),
        ("crc_properties", lambda: _check_crc(min(trials, 300), rng)),
        ("quantizer_exhaustive", _check_quantizer),
        ("csi_permutations", lambda: _check_permutations(min(trials, 200), rng)),
        ("grad_check", lambda: _check_grad(rng)),
        ("qam16_ber_closed_form", lambda: _check_qam(rng)),
    ]
    failures = 0
    for name, fn in checks:
        ok, count = fn()
        status = "PASS" if ok == count else "FAIL"
        if ok != count:
            failures += 1
        print(f"{status} {name}: {ok}/{count}")
    return EXIT_OK if failures == 0 else EXIT_VALIDATION


# --- CLI ---------------------------------------------------------------------

def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="svclink",
                                     description="semantic keypoint link simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train codec, detector, constellation")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--out")

    p_sweep = sub.add_parser("sweep", help="run a grid sweep, write CSV")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--seed", type=int)
    p_sweep.add_argument("--out", default="sweep.csv")
    p_sweep.add_argument("--records", help="also dump per-frame TrialRecords CSV")
    p_sweep.add_argument("--trials", type=int)
    p_sweep.add_argument("--scheme", help="override schemes (comma separated)")

    p_val = sub.add_parser("validate", help="run the invariant suite")
    p_val.add_argument("--trials", type=int, default=1000)
    p_val.add_argument("--seed", type=int, default=0)

    args = parser.parse_args(argv)

    if args.command == "validate":
        return cmd_validate(trials=args.trials, seed=args.seed)

    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.base_seed = args.seed
            cfg.train_seed = args.seed
        if getattr(args, "trials", None):
            cfg.trials = args.trials
        if getattr(args, "scheme", None):
            cfg.schemes = [s.strip() for s in args.scheme.split(",")]
        if args.command == "train" and args.out:
            cfg.out_dir = args.out
        cfg.validate()
    except (ConfigError, KeyError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "train":
        return cmd_train(cfg)
    return cmd_sweep(cfg, args.out, args.records)


if __name__ == "__main__":
    sys.exit(main())
