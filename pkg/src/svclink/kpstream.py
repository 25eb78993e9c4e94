"""Keypoint streams: synthesis, CSV persistence, and the AKD fidelity metric.

A keypoint frame is an ordered set of n 2-D coordinates in [-1, 1],
the payload unit everything downstream compresses and transports.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Acceptance band for "fluent" motion: 5 pixels on a 256x256 frame,
# expressed in normalized units (5 * 2/256).
AKD_ACCEPT_THRESHOLD = 0.0390625

# Multiply normalized AKD by this to get pixels on a 256x256 frame.
PIXELS_PER_UNIT = 128.0

DEFAULT_NUM_KEYPOINTS = 10

# Per-frame, per-axis coordinate motion bound of the smooth synthetic profile.
SMOOTH_DELTA_BOUND = 0.03
JITTER_AMPLITUDE = 0.01


class StreamError(ValueError):
    """Invalid keypoint stream construction or parsing."""


@dataclass(frozen=True)
class KeypointFrame:
    """One frame of n keypoints, coords shape (n, 2), all values in [-1, 1]."""

    coords: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.float64)
        if c.ndim != 2 or c.shape[1] != 2 or c.shape[0] < 1:
            raise StreamError(f"coords must have shape (n, 2), got {c.shape}")
        if np.any(np.abs(c) > 1.0) or not np.all(np.isfinite(c)):
            raise StreamError("coordinates must lie in [-1, 1]")
        c.setflags(write=False)
        object.__setattr__(self, "coords", c)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    def flat(self) -> np.ndarray:
        """Row-major flattening (x1, y1, ..., xn, yn)."""
        return self.coords.reshape(-1)

    @staticmethod
    def from_flat(values: np.ndarray) -> "KeypointFrame":
        v = np.asarray(values, dtype=np.float64)
        if v.size % 2 != 0:
            raise StreamError("flat keypoint vector must have even length")
        return KeypointFrame(v.reshape(-1, 2))

    def __eq__(self, other):
        if not isinstance(other, KeypointFrame):
            return NotImplemented
        return np.array_equal(self.coords, other.coords)


@dataclass
class KeypointStream:
    """Ordered keypoint frames with a shared n. frame_rate and stream_id are
    metadata only and do not participate in equality."""

    frames: list[KeypointFrame]
    frame_rate: float = 25.0
    stream_id: str = ""

    def __post_init__(self):
        if len(self.frames) < 2:
            raise StreamError("length >= 2 required")
        n = self.frames[0].n
        for i, f in enumerate(self.frames):
            if f.n != n:
                raise StreamError(f"frame {i} has n={f.n}, expected {n}")

    @property
    def n(self) -> int:
        return self.frames[0].n

    def __len__(self) -> int:
        return len(self.frames)

    def as_array(self) -> np.ndarray:
        """All frames flattened, shape (num_frames, 2n)."""
        return np.stack([f.flat() for f in self.frames])

    def __eq__(self, other):
        if not isinstance(other, KeypointStream):
            return NotImplemented
        return len(self.frames) == len(other.frames) and all(
            a == b for a, b in zip(self.frames, other.frames)
        )


def akd(a: KeypointFrame, b: KeypointFrame) -> float:
    """Average keypoint distance: mean Euclidean distance between paired
    keypoints, in normalized units (multiply by PIXELS_PER_UNIT for pixels
    on a 256x256 frame)."""
    if a.n != b.n:
        raise ValueError(f"frames have different n: {a.n} vs {b.n}")
    return float(np.mean(np.linalg.norm(a.coords - b.coords, axis=1)))


def akd_flat(a: np.ndarray, b: np.ndarray) -> float:
    """akd() on flat (2n,) coordinate vectors; avoids frame wrapping in hot loops."""
    d = (a - b).reshape(-1, 2)
    return float(np.mean(np.sqrt(np.sum(d * d, axis=1))))


def canonical_layout(n: int) -> np.ndarray:
    """Fixed face-like keypoint arrangement: n points on an ellipse. Streams
    vary around it, which keeps the synthetic family on a compact manifold
    (like real facial landmarks around a canonical face)."""
    theta = 2.0 * np.pi * np.arange(n) / n
    return np.stack([0.45 * np.cos(theta), 0.55 * np.sin(theta)], axis=1)


IDENTITY_SPREAD = 0.10


def synth_stream(seed: int, n: int, num_frames: int, motion_profile: str = "smooth",
                 frame_rate: float = 25.0) -> KeypointStream:
    """Deterministic synthetic facial-motion stand-in.

    Each stream offsets the canonical layout by a per-keypoint identity
    draw, then keypoints share a global sinusoidal drift plus small
    per-point wiggles, scaled so every per-frame coordinate delta is at
    most SMOOTH_DELTA_BOUND. The jittery profile adds bounded uniform noise
    (+-JITTER_AMPLITUDE). Coordinates are clamped to [-1, 1]; clamping is
    1-Lipschitz so it cannot enlarge deltas.
    """
    if num_frames < 2:
        raise ValueError(f"num_frames must be >= 2, got {num_frames}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if motion_profile not in ("smooth", "jittery"):
        raise ValueError(f"unknown motion_profile {motion_profile!r}")

    rng = np.random.default_rng(seed)
    t = np.arange(num_frames, dtype=np.float64)

    base = canonical_layout(n) + rng.uniform(-IDENTITY_SPREAD, IDENTITY_SPREAD, size=(n, 2))

    # Global drift shared by all keypoints (dominant, so the stream is
    # compressible like a face translating as a whole).
    motion = np.zeros((num_frames, n, 2))
    for axis in range(2):
        g = np.zeros(num_frames)
        for _ in range(3):
            freq = rng.uniform(0.01, 0.08)
            amp = rng.uniform(0.5, 1.0)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            g += amp * np.sin(2.0 * np.pi * freq * t + phase)
        motion[:, :, axis] += g[:, None]

    # Small per-keypoint deviations on top of the shared drift.
    for j in range(n):
        for axis in range(2):
            freq = rng.uniform(0.02, 0.12)
            amp = rng.uniform(0.05, 0.15)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            motion[:, j, axis] += amp * np.sin(2.0 * np.pi * freq * t + phase)

    deltas = np.abs(np.diff(motion, axis=0))
    max_delta = float(deltas.max()) if deltas.size else 0.0
    target = SMOOTH_DELTA_BOUND * rng.uniform(0.6, 1.0)
    scale = target / max_delta if max_delta > 0 else 0.0
    coords = np.clip(base[None, :, :] + scale * motion, -1.0, 1.0)

    if motion_profile == "jittery":
        coords = coords + rng.uniform(-JITTER_AMPLITUDE, JITTER_AMPLITUDE, size=coords.shape)
        coords = np.clip(coords, -1.0, 1.0)

    frames = [KeypointFrame(coords[i]) for i in range(num_frames)]
    return KeypointStream(frames, frame_rate=frame_rate,
                          stream_id=f"synth-{seed}-{n}-{num_frames}-{motion_profile}")


def _csv_header(n: int) -> str:
    cols = ["frame"]
    for j in range(1, n + 1):
        cols += [f"x{j}", f"y{j}"]
    return ",".join(cols)


def save_stream(stream: KeypointStream, path) -> None:
    """Write the CSV form: header frame,x1,y1,...,xn,yn then one row per
    frame, full-precision decimal coordinates, LF line endings."""
    lines = [_csv_header(stream.n)]
    for i, f in enumerate(stream.frames):
        lines.append(",".join([str(i)] + [repr(float(v)) for v in f.flat()]))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_stream(path) -> KeypointStream:
    """Parse the CSV form back into a stream. Errors name the offending line."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        raise StreamError(f"{path}: empty file, length >= 2 required")

    header = lines[0].split(",")
    if header[0] != "frame" or len(header) < 3 or (len(header) - 1) % 2 != 0:
        raise StreamError(f"{path}:1: malformed header {lines[0]!r}")
    n = (len(header) - 1) // 2
    if header != _csv_header(n).split(","):
        raise StreamError(f"{path}:1: malformed header {lines[0]!r}")

    frames = []
    for lineno, ln in enumerate(lines[1:], start=2):
        fields = ln.split(",")
        if len(fields) != 1 + 2 * n:
            raise StreamError(
                f"{path}:{lineno}: expected {1 + 2 * n} fields, got {len(fields)}"
            )
        try:
            vals = np.array([float(v) for v in fields[1:]], dtype=np.float64)
        except ValueError as exc:
            raise StreamError(f"{path}:{lineno}: non-numeric coordinate ({exc})") from None
        if np.any(np.abs(vals) > 1.0) or not np.all(np.isfinite(vals)):
            raise StreamError(f"{path}:{lineno}: coordinate out of range [-1, 1]")
        frames.append(KeypointFrame.from_flat(vals))

    if len(frames) < 2:
        raise StreamError(f"{path}: length >= 2 required, got {len(frames)} frame(s)")
    import os

    return KeypointStream(frames, stream_id=os.path.splitext(os.path.basename(str(path)))[0])
