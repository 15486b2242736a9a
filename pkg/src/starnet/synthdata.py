"""Deterministic synthetic phase-labeled videos.

Each video walks through all phases in order; a phase is a contiguous run
of frames whose only reliable signature is *motion*: a Gaussian blob drifts
with a per-phase velocity (speed, direction, optional oscillation) over a
noisy background. With ``overlap`` = 1.0 the static appearance of every
phase is identically distributed, so a frame-local classifier has nothing
to latch onto beyond the label prior, while any motion-aware model can do
far better. Lowering ``overlap`` mixes in a per-phase appearance cue.

On-disk format per video: magic ``STARVID1``, then N, H, W, C as u32
little-endian, then frame-major float64 pixels laid out [N, C, H, W]
row-major. Labels ride alongside as a ``frame_index,phase`` CSV, and a JSON
manifest records the seed, grammar, train/test split and per-file CRC32s.
"""
from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

MAGIC = b"STARVID1"


class FormatError(ValueError):
    """A persisted artifact does not parse as its declared format."""


class ChecksumError(ValueError):
    """Stored checksum does not match the bytes on disk."""


@dataclass(frozen=True)
class PhaseMotion:
    """Blob velocity signature: pixels/frame speed, heading in radians,
    and an optional direction flip every ``flip_period`` frames."""
    speed: float
    angle: float
    flip_period: int = 0


@dataclass(frozen=True)
class PhaseGrammar:
    """Per-phase durations, motion signatures and appearance overlap."""
    num_phases: int = 8
    durations: tuple = ((24, 44), (13, 27), (18, 34), (10, 22),
                        (15, 31), (12, 26), (18, 36), (10, 20))
    motions: tuple = (
        PhaseMotion(0.0, 0.0),
        PhaseMotion(0.45, 0.0),
        PhaseMotion(0.9, 1.57),
        PhaseMotion(1.4, 0.75),
        PhaseMotion(2.0, 2.4),
        PhaseMotion(2.7, 4.0, flip_period=7),
        PhaseMotion(3.5, 3.1),
        PhaseMotion(4.4, 5.5, flip_period=4),
    )
    overlap: float = 1.0
    frame_size: int = 32
    img_channels: int = 1
    blob_sigma: float = 2.0
    blob_amplitude: float = 0.75
    noise_sigma: float = 0.03
    background: float = 0.2

    def __post_init__(self):
        if len(self.durations) != self.num_phases or len(self.motions) != self.num_phases:
            raise ValueError("durations and motions must list every phase")
        for lo, hi in self.durations:
            if not 1 <= lo <= hi:
                raise ValueError(f"bad duration bounds ({lo}, {hi})")
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError(f"overlap must be in [0, 1], got {self.overlap}")

    @property
    def weights(self) -> np.ndarray:
        """Expected per-phase frame shares implied by the durations."""
        mean = np.array([(lo + hi) / 2.0 for lo, hi in self.durations])
        return mean / mean.sum()

    def blob_amplitude_for(self, phase: int) -> float:
        # overlap 1.0 collapses every phase onto the same appearance
        if self.num_phases == 1:
            return self.blob_amplitude
        spread = 2.0 * phase / (self.num_phases - 1) - 1.0
        return self.blob_amplitude * (1.0 + 0.5 * (1.0 - self.overlap) * spread)


@dataclass(frozen=True)
class PhaseSequence:
    """One video: frames in [0,1], per-frame phase labels, identity."""
    frames: np.ndarray   # [N, C, H, W] float64
    labels: np.ndarray   # [N] int64
    video_id: str
    seed: int

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[0] != self.labels.shape[0]:
            raise ValueError("frames [N,C,H,W] and labels [N] must align")
        if np.any(np.diff(self.labels) < 0):
            raise ValueError("labels must be monotone non-decreasing")
        if self.frames.min() < 0.0 or self.frames.max() > 1.0:
            raise ValueError("pixel intensities must lie in [0, 1]")

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])


def default_grammar(overlap: float = 1.0) -> PhaseGrammar:
    return PhaseGrammar(overlap=overlap)


def _margin(grammar: PhaseGrammar) -> float:
    # keep the blob fully on screen so its pixel-value histogram is
    # position-invariant
    return 3.0 * grammar.blob_sigma + 1.0


def _advance(pos: np.ndarray, vel: np.ndarray, lo: float, hi: float):
    pos = pos + vel
    vel = vel.copy()
    for i in range(2):
        if pos[i] < lo:
            pos[i] = 2 * lo - pos[i]
            vel[i] = -vel[i]
        elif pos[i] > hi:
            pos[i] = 2 * hi - pos[i]
            vel[i] = -vel[i]
    return pos, vel


def render_frame(pos: np.ndarray, phase: int, grammar: PhaseGrammar,
                 rng: np.random.Generator) -> np.ndarray:
    """Background noise plus a Gaussian blob at ``pos`` (y, x)."""
    s = grammar.frame_size
    yy, xx = np.mgrid[0:s, 0:s]
    d2 = (yy - pos[0]) ** 2 + (xx - pos[1]) ** 2
    blob = grammar.blob_amplitude_for(phase) * np.exp(-d2 / (2.0 * grammar.blob_sigma ** 2))
    noise = rng.normal(0.0, grammar.noise_sigma,
                       (grammar.img_channels, s, s))
    return np.clip(grammar.background + noise + blob[None], 0.0, 1.0)


def generate_video(grammar: PhaseGrammar, seed_seq, video_id: str,
                   seed_label: int = 0) -> PhaseSequence:
    """All phases in order 0..C-1, duration sampled per phase."""
    rng = np.random.default_rng(seed_seq)
    lo = _margin(grammar)
    hi = grammar.frame_size - 1 - lo
    pos = rng.uniform(lo, hi, size=2)
    frames, labels = [], []
    for phase in range(grammar.num_phases):
        dmin, dmax = grammar.durations[phase]
        duration = int(rng.integers(dmin, dmax + 1))
        motion = grammar.motions[phase]
        vel = motion.speed * np.array([math.sin(motion.angle),
                                       math.cos(motion.angle)])
        for j in range(duration):
            if motion.flip_period and j > 0 and j % motion.flip_period == 0:
                vel = -vel
            frames.append(render_frame(pos, phase, grammar, rng))
            labels.append(phase)
            pos, vel = _advance(pos, vel, lo, hi)
    return PhaseSequence(np.stack(frames), np.array(labels, dtype=np.int64),
                         video_id, seed_label)


# ---------------------------------------------------------------------------
# disk format

def write_video(path, frames: np.ndarray) -> int:
    """Write one video file; returns the CRC32 of the file bytes."""
    n, c, h, w = frames.shape
    blob = MAGIC + struct.pack("<4I", n, h, w, c)
    blob += np.ascontiguousarray(frames, dtype="<f8").tobytes()
    path = Path(path)
    path.write_bytes(blob)
    return zlib.crc32(blob) & 0xFFFFFFFF


def _decode_video(raw: bytes, label: str) -> np.ndarray:
    if len(raw) < len(MAGIC) + 16 or raw[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{label}: bad magic, not a video file")
    n, h, w, c = struct.unpack("<4I", raw[8:24])
    expected = 24 + n * c * h * w * 8
    if len(raw) != expected:
        raise FormatError(f"{label}: truncated, expected {expected} bytes, "
                          f"got {len(raw)}")
    pixels = np.frombuffer(raw[24:], dtype="<f8").reshape(n, c, h, w)
    return pixels.astype(np.float64)


def read_video(path) -> np.ndarray:
    return _decode_video(Path(path).read_bytes(), str(path))


def _labels_csv(labels: np.ndarray) -> str:
    lines = ["frame_index,phase"]
    lines += [f"{i},{int(p)}" for i, p in enumerate(labels)]
    return "\n".join(lines) + "\n"


def _parse_labels_csv(text: str) -> np.ndarray:
    lines = text.strip().splitlines()
    if not lines or lines[0] != "frame_index,phase":
        raise FormatError("labels csv: missing header")
    out = []
    for i, line in enumerate(lines[1:]):
        idx, phase = line.split(",")
        if int(idx) != i:
            raise FormatError(f"labels csv: frame index {idx} out of order")
        out.append(int(phase))
    return np.array(out, dtype=np.int64)


def generate_dataset(grammar: PhaseGrammar, num_videos: int, seed: int,
                     out_dir, train_fraction: float = 0.7) -> dict:
    """Write videos, label CSVs and the manifest; returns the manifest.

    Fully determined by (grammar, num_videos, seed): per-video RNG streams
    are spawned from the master seed, and the train/test split is drawn
    from its own stream.
    """
    out_dir = Path(out_dir)
    (out_dir / "videos").mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(num_videos)
    split_rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5EED)))
    order = split_rng.permutation(num_videos)
    n_train = int(round(train_fraction * num_videos))
    train_set = set(int(v) for v in order[:n_train])

    manifest = {
        "format": "stardata-v1",
        "seed": int(seed),
        "num_videos": int(num_videos),
        "train_fraction": train_fraction,
        "grammar": asdict(grammar),
        "train_videos": [],
        "test_videos": [],
        "videos": {},
    }
    for v in range(num_videos):
        vid = f"video_{v:04d}"
        seq = generate_video(grammar, children[v], vid, seed_label=seed)
        rel = f"videos/{vid}.starvid"
        crc = write_video(out_dir / rel, seq.frames)
        labels_rel = f"videos/{vid}_labels.csv"
        csv_text = _labels_csv(seq.labels)
        (out_dir / labels_rel).write_text(csv_text)
        manifest["videos"][vid] = {
            "file": rel,
            "crc32": crc,
            "labels": labels_rel,
            "labels_crc32": zlib.crc32(csv_text.encode()) & 0xFFFFFFFF,
            "frames": seq.num_frames,
        }
        (manifest["train_videos"] if v in train_set
         else manifest["test_videos"]).append(vid)
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest


@dataclass
class Dataset:
    grammar: PhaseGrammar
    videos: dict
    train_ids: list
    test_ids: list

    @property
    def train_videos(self) -> list:
        return [self.videos[v] for v in self.train_ids]

    @property
    def test_videos(self) -> list:
        return [self.videos[v] for v in self.test_ids]


def _grammar_from_dict(d: dict) -> PhaseGrammar:
    d = dict(d)
    d["durations"] = tuple(tuple(x) for x in d["durations"])
    d["motions"] = tuple(PhaseMotion(**m) for m in d["motions"])
    return PhaseGrammar(**d)


def load_dataset(root) -> Dataset:
    """Read a generated dataset back, verifying every stored CRC32."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"{root}: no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != "stardata-v1":
        raise FormatError(f"{root}: unknown dataset format {manifest.get('format')!r}")
    grammar = _grammar_from_dict(manifest["grammar"])
    videos = {}
    for vid, entry in manifest["videos"].items():
        raw = (root / entry["file"]).read_bytes()
        if zlib.crc32(raw) & 0xFFFFFFFF != entry["crc32"]:
            raise ChecksumError(f"{entry['file']}: CRC mismatch, file corrupted")
        csv_bytes = (root / entry["labels"]).read_bytes()
        if zlib.crc32(csv_bytes) & 0xFFFFFFFF != entry["labels_crc32"]:
            raise ChecksumError(f"{entry['labels']}: CRC mismatch, file corrupted")
        frames = _decode_video(raw, entry["file"])
        labels = _parse_labels_csv(csv_bytes.decode())
        videos[vid] = PhaseSequence(frames, labels, vid, manifest["seed"])
    return Dataset(grammar, videos,
                   list(manifest["train_videos"]), list(manifest["test_videos"]))
