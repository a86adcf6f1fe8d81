"""Synthetic IQ frames, rotation augmentation, the IQF frame file and dataset splits."""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError

MODULATIONS = ("BPSK", "QPSK", "8PSK", "PAM4", "16QAM", "64QAM")
ANALOG = ("WBFM", "AM-DSB", "AM-SSB")
NOISELESS_SNR = 32767  # i16 tag stored for frames generated without noise


def _qam(m):
    side = int(math.isqrt(m))
    levels = np.arange(-(side - 1), side, 2, dtype=float)
    pts = (levels[:, None] + 1j * levels[None, :]).reshape(-1)
    return pts


def constellation(name):
    """Unit-average-power constellation points for ``name``."""
    key = name.upper()
    if key == "BPSK":
        pts = np.array([1.0 + 0j, -1.0 + 0j])
    elif key == "QPSK":
        pts = np.exp(1j * (np.pi / 4 + np.pi / 2 * np.arange(4)))
    elif key == "8PSK":
        pts = np.exp(2j * np.pi * np.arange(8) / 8)
    elif key == "PAM4":
        pts = np.array([-3.0, -1.0, 1.0, 3.0]) + 0j
    elif key == "16QAM":
        pts = _qam(16)
    elif key == "64QAM":
        pts = _qam(64)
    else:
        raise ConfigError(f"unsupported modulation {name!r} (digital only: {', '.join(MODULATIONS)})")
    return pts / np.sqrt(np.mean(np.abs(pts) ** 2))


@dataclass
class Frame:
    iq: np.ndarray  # (2, K) float32, I row then Q row
    label: int
    snr_db: int


@dataclass
class LabelMap:
    names: list[str]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise FormatError(f"duplicate label names in {self.names}")

    def index(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigError(f"label {name!r} not in label map {self.names}") from None

    def __len__(self):
        return len(self.names)

    def __getitem__(self, i):
        return self.names[i]


@dataclass
class FrameSet:
    """A batch of frames stored column-wise: ``iq[N, 2, K]``, ``labels[N]``, ``snr_db[N]``."""

    iq: np.ndarray
    labels: np.ndarray
    snr_db: np.ndarray
    label_map: LabelMap | None = None

    def __post_init__(self):
        self.iq = np.asarray(self.iq, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.snr_db = np.asarray(self.snr_db, dtype=np.int64)
        if not (len(self.iq) == len(self.labels) == len(self.snr_db)):
            raise FormatError("iq, labels and snr_db have different lengths")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return Frame(self.iq[i], int(self.labels[i]), int(self.snr_db[i]))
        return FrameSet(self.iq[i], self.labels[i], self.snr_db[i], self.label_map)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def frame_length(self):
        return self.iq.shape[2]

    @classmethod
    def concat(cls, parts, label_map=None):
        parts = list(parts)
        return cls(np.concatenate([p.iq for p in parts]),
                   np.concatenate([p.labels for p in parts]),
                   np.concatenate([p.snr_db for p in parts]),
                   label_map or parts[0].label_map)


@dataclass
class GenSpec:
    modulation: str
    snr_db: float | None = 10.0  # None: noiseless
    sps: int = 1
    frames: int = 1
    seed: int = 0
    frame_length: int = 128
    phase_offset: float = 0.0
    cfo: float = 0.0  # cycles per sample
    label: int = 0


def generate(spec: GenSpec) -> FrameSet:
    """Frames of ``modulation`` through an AWGN channel at ``snr_db``.

    Noise variance per complex sample is ``10**(-snr_db/10)`` against unit
    signal power, split equally between I and Q.
    """
    pts = constellation(spec.modulation)
    if spec.sps < 1 or spec.frames < 0 or spec.frame_length < 1:
        raise ConfigError(f"invalid generation spec {spec}")
    rng = np.random.default_rng(spec.seed)
    k = spec.frame_length
    n_sym = -(-k // spec.sps)
    symbols = pts[rng.integers(0, len(pts), size=(spec.frames, n_sym))]
    s = np.repeat(symbols, spec.sps, axis=1)[:, :k]
    n = np.arange(k)
    s = s * np.exp(1j * (spec.phase_offset + 2 * np.pi * spec.cfo * n))
    noiseless = spec.snr_db is None or math.isinf(spec.snr_db)
    if not noiseless:
        sigma = math.sqrt(10.0 ** (-spec.snr_db / 10.0) / 2.0)
        s = s + sigma * (rng.standard_normal(s.shape) + 1j * rng.standard_normal(s.shape))
    iq = np.stack([s.real, s.imag], axis=1)
    snr_tag = NOISELESS_SNR if noiseless else int(round(spec.snr_db))
    return FrameSet(iq, np.full(spec.frames, spec.label), np.full(spec.frames, snr_tag))


def generate_dataset(mods, snrs, frames_per_cell, sps=1, seed=0, frame_length=128) -> FrameSet:
    """One cell per (modulation, snr); each cell draws from its own child seed."""
    names = [m.upper() for m in mods]
    for m in names:
        if m not in MODULATIONS:
            raise ConfigError(f"unsupported modulation {m!r} (digital only: {', '.join(MODULATIONS)})")
    label_map = LabelMap(names)
    children = np.random.SeedSequence(seed).spawn(len(names) * len(snrs))
    parts = []
    for i, name in enumerate(names):
        for j, snr in enumerate(snrs):
            child = children[i * len(snrs) + j]
            parts.append(generate(GenSpec(name, snr, sps, frames_per_cell,
                                          int(child.generate_state(1)[0]), frame_length, label=i)))
    return FrameSet.concat(parts, label_map)


# --- rotation augmentation ------------------------------------------------------

ROTATIONS = (0.0, math.pi / 2, math.pi, 3 * math.pi / 2)
# exact integer matrices for the four quarter-turns; avoids cos(pi/2) ~ 6e-17
_QUARTER_TURNS = {
    0: ((1, 0), (0, 1)),
    1: ((0, -1), (1, 0)),
    2: ((-1, 0), (0, -1)),
    3: ((0, 1), (-1, 0)),
}


def rotate(iq, theta):
    """Rotate ``iq[..., 2, K]`` by ``theta`` in the I/Q plane."""
    iq = np.asarray(iq)
    quarter = theta / (math.pi / 2)
    if abs(quarter - round(quarter)) < 1e-12:
        (a, b), (c, d) = _QUARTER_TURNS[int(round(quarter)) % 4]
    else:
        a, b, c, d = math.cos(theta), -math.sin(theta), math.sin(theta), math.cos(theta)
    i, q = iq[..., 0, :], iq[..., 1, :]
    return np.stack([a * i + b * q, c * i + d * q], axis=-2).astype(iq.dtype, copy=False)


def rotate_augment(frames: FrameSet) -> FrameSet:
    """Four copies of every frame, rotated by 0, pi/2, pi and 3pi/2 (in that order per frame)."""
    rotated = np.stack([rotate(frames.iq, th) for th in ROTATIONS], axis=1)  # (N, 4, 2, K)
    n = len(frames)
    return FrameSet(rotated.reshape(n * 4, 2, -1),
                    np.repeat(frames.labels, 4), np.repeat(frames.snr_db, 4), frames.label_map)


# --- IQF file -------------------------------------------------------------------

IQF_MAGIC = b"IQF1"


def _record_dtype(k):
    return np.dtype([("label", "<u1"), ("snr", "<i2"), ("i", "<f4", (k,)), ("q", "<f4", (k,))])


def write_iqf(frames: FrameSet, label_map: LabelMap, path):
    if len(frames) and (frames.labels.min() < 0 or frames.labels.max() >= len(label_map)):
        raise FormatError(f"label index outside label map of size {len(label_map)}")
    if len(label_map) > 256:
        raise FormatError("IQF stores label indices as u8; at most 256 labels")
    k = frames.frame_length if len(frames) else 0
    header = [IQF_MAGIC, struct.pack("<IIH", len(frames), k, len(label_map))]
    for name in label_map.names:
        raw = name.encode("utf-8")
        header.append(struct.pack("<H", len(raw)) + raw)
    rec = np.empty(len(frames), dtype=_record_dtype(k))
    rec["label"] = frames.labels
    rec["snr"] = frames.snr_db
    rec["i"] = frames.iq[:, 0, :]
    rec["q"] = frames.iq[:, 1, :]
    crc = 0
    with open(path, "wb") as f:
        for chunk in header:
            f.write(chunk)
            crc = zlib.crc32(chunk, crc)
        body = rec.tobytes()
        f.write(body)
        crc = zlib.crc32(body, crc)
        f.write(struct.pack("<I", crc))


def _read_exact(f, n, what, crc):
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"IQF file truncated while reading {what}")
    return data, zlib.crc32(data, crc)


def read_iqf(path, chunk_frames=4096):
    """Returns ``(frames, label_map)``. Records are streamed into one preallocated array."""
    with open(path, "rb") as f:
        magic, crc = _read_exact(f, 4, "magic", 0)
        if magic != IQF_MAGIC:
            raise FormatError(f"bad IQF magic {magic!r}")
        raw, crc = _read_exact(f, 10, "header", crc)
        count, k, n_labels = struct.unpack("<IIH", raw)
        names = []
        for _ in range(n_labels):
            raw, crc = _read_exact(f, 2, "label length", crc)
            (n,) = struct.unpack("<H", raw)
            raw, crc = _read_exact(f, n, "label name", crc)
            names.append(raw.decode("utf-8"))
        label_map = LabelMap(names)
        dt = _record_dtype(k)
        iq = np.empty((count, 2, k), dtype=np.float32)
        labels = np.empty(count, dtype=np.int64)
        snr = np.empty(count, dtype=np.int64)
        for start in range(0, count, chunk_frames):
            n = min(chunk_frames, count - start)
            raw, crc = _read_exact(f, n * dt.itemsize, "frames", crc)
            rec = np.frombuffer(raw, dtype=dt)
            iq[start:start + n, 0] = rec["i"]
            iq[start:start + n, 1] = rec["q"]
            labels[start:start + n] = rec["label"]
            snr[start:start + n] = rec["snr"]
        raw = f.read(4)
        if len(raw) != 4:
            raise FormatError("IQF file truncated (missing checksum)")
        if struct.unpack("<I", raw)[0] != crc:
            raise FormatError("IQF checksum mismatch")
        if f.read(1):
            raise FormatError("trailing bytes after IQF checksum")
    if count and labels.max() >= n_labels:
        raise FormatError(f"label index {labels.max()} outside label map of size {n_labels}")
    return FrameSet(iq, labels, snr, label_map), label_map


# --- split ----------------------------------------------------------------------

def _allocate(n, ratios):
    """Integer counts summing to n, largest-remainder rounding."""
    exact = [n * r for r in ratios]
    counts = [math.floor(e) for e in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split(frames: FrameSet, ratios=(0.35, 0.15, 0.5), seed=0):
    """Stratified (label, snr) split into train/val/test. Deterministic under ``seed``."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    cells = np.stack([frames.labels, frames.snr_db], axis=1)
    keys, inverse = np.unique(cells, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    for cell in range(len(keys)):
        idx = np.flatnonzero(inverse == cell)
        idx = idx[rng.permutation(len(idx))]
        n_tr, n_va, _ = _allocate(len(idx), ratios)
        parts[0].append(idx[:n_tr])
        parts[1].append(idx[n_tr:n_tr + n_va])
        parts[2].append(idx[n_tr + n_va:])
    return tuple(frames[np.sort(np.concatenate(p)) if p else np.array([], dtype=np.int64)]
                 for p in parts)
