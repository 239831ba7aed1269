"""Feature/label ingestion, normalization, synthetic task generation, batching.

Utterance file layout (little-endian): magic "IAKF", u32 version=1,
u32 id length, UTF-8 id, u32 T, u32 D, u8 has-labels, T*D float32 features
(row-major), then T u32 labels when present. A dataset is a directory with a
``manifest.txt`` listing one utterance filename per line.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError

UTTERANCE_MAGIC = b"IAKF"
UTTERANCE_VERSION = 1
MANIFEST_NAME = "manifest.txt"

CMVN_EPS = 1e-8


@dataclass
class Utterance:
    id: str
    features: np.ndarray  # [T, D] float32
    labels: Optional[np.ndarray] = None  # [T] int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise DataError(f"utterance {self.id!r}: features must be [T>=1, D], "
                            f"got shape {self.features.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.uint32)
            if self.labels.shape != (self.features.shape[0],):
                raise DataError(f"utterance {self.id!r}: {self.labels.shape[0] if self.labels.ndim else 0} "
                                f"labels for {self.features.shape[0]} frames")

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class Batch:
    features: np.ndarray      # [B, Tmax, D]
    labels: np.ndarray        # [B, Tmax] (zero-filled padding)
    lengths: np.ndarray       # [B]
    ids: list[str]

    @property
    def padding_mask(self) -> np.ndarray:
        """[B, Tmax] boolean, True on valid frames."""
        t = np.arange(self.features.shape[1])[None, :]
        return t < self.lengths[:, None]

    @property
    def num_valid_frames(self) -> int:
        return int(self.lengths.sum())


def cmvn_utterance(features: np.ndarray, eps: float = CMVN_EPS) -> np.ndarray:
    """Per-utterance, per-dimension mean subtraction and variance normalization."""
    features = np.asarray(features, dtype=np.float32)
    mean = features.mean(axis=0, keepdims=True)
    var = features.var(axis=0, keepdims=True)
    return ((features - mean) / np.sqrt(var + eps)).astype(np.float32)


# ---------------------------------------------------------------------------
# File format

def write_utterance(path, utt: Utterance) -> None:
    id_bytes = utt.id.encode("utf-8")
    t_len, dim = utt.features.shape
    with open(path, "wb") as fh:
        fh.write(UTTERANCE_MAGIC)
        fh.write(struct.pack("<II", UTTERANCE_VERSION, len(id_bytes)))
        fh.write(id_bytes)
        fh.write(struct.pack("<IIB", t_len, dim, 1 if utt.labels is not None else 0))
        fh.write(np.ascontiguousarray(utt.features, dtype="<f4").tobytes())
        if utt.labels is not None:
            fh.write(np.ascontiguousarray(utt.labels, dtype="<u4").tobytes())


def read_utterance(path) -> Utterance:
    with open(path, "rb") as fh:
        raw = fh.read()

    def take(n, what):
        nonlocal offset
        if offset + n > len(raw):
            raise DataError(f"{path}: truncated payload ({what})")
        chunk = raw[offset:offset + n]
        offset += n
        return chunk

    offset = 0
    if take(4, "magic") != UTTERANCE_MAGIC:
        raise DataError(f"{path}: malformed header (bad magic)")
    version, id_len = struct.unpack("<II", take(8, "version/id length"))
    if version != UTTERANCE_VERSION:
        raise DataError(f"{path}: malformed header (unsupported version {version})")
    try:
        utt_id = take(id_len, "id").decode("utf-8")
    except UnicodeDecodeError as e:
        raise DataError(f"{path}: malformed header (bad id bytes)") from e
    t_len, dim, has_labels = struct.unpack("<IIB", take(9, "dims"))
    if t_len < 1 or dim < 1:
        raise DataError(f"{path}: malformed header (T={t_len}, D={dim})")
    if has_labels not in (0, 1):
        raise DataError(f"{path}: malformed header (label flag {has_labels})")
    feats = np.frombuffer(take(t_len * dim * 4, "features"),
                          dtype="<f4").reshape(t_len, dim)
    labels = None
    if has_labels:
        labels = np.frombuffer(take(t_len * 4, "labels"), dtype="<u4")
    if offset != len(raw):
        raise DataError(f"{path}: trailing bytes after payload")
    return Utterance(utt_id, feats.copy(), None if labels is None else labels.copy())


def write_dataset(directory, utterances: Sequence[Utterance]) -> Path:
    """Write one file per utterance plus a manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    seen = set()
    for utt in utterances:
        if utt.id in seen:
            raise DataError(f"duplicate utterance id {utt.id!r}")
        seen.add(utt.id)
        name = f"{utt.id}.utt"
        write_utterance(directory / name, utt)
        names.append(name)
    manifest = directory / MANIFEST_NAME
    manifest.write_text("".join(n + "\n" for n in names))
    return manifest


def load_dataset(path) -> list[Utterance]:
    """path: a manifest file or a directory containing one."""
    path = Path(path)
    manifest = path / MANIFEST_NAME if path.is_dir() else path
    if not manifest.exists():
        raise DataError(f"{manifest}: manifest not found")
    utterances = []
    seen = set()
    for line in manifest.read_text().splitlines():
        name = line.strip()
        if not name:
            continue
        utt = read_utterance(manifest.parent / name)
        if utt.id in seen:
            raise DataError(f"duplicate utterance id {utt.id!r} in {manifest}")
        seen.add(utt.id)
        utterances.append(utt)
    return utterances


# ---------------------------------------------------------------------------
# Synthetic frame-classification task

def synthetic_label_rule(features: np.ndarray, num_classes: int) -> np.ndarray:
    """The documented label rule; the generator and any test share this oracle.

    local part:  c_t = 1 if x[t-1,0] + x[t,0] + x[t+1,0] > 0 else 0, where
                 channel 0 carries +-1 spikes and missing neighbors count as 0
                 (so the sum is an odd integer away from the edges and the
                 decision has margin >= 1),
    global part: g = 1 if the anchor channel (last feature dim) is positive at
                 its single high-magnitude frame, else 0,
    label_t = (c_t + g * (num_classes // 2)) mod num_classes.

    Correct prediction therefore needs both the local 3-frame context and the
    content of one distant anchor frame.
    """
    spikes = np.pad(features[:, 0].astype(np.float64), (1, 1))
    local_sum = spikes[:-2] + spikes[1:-1] + spikes[2:]
    local = (local_sum > 0).astype(np.int64)
    anchor_channel = features[:, -1]
    anchor_frame = int(np.argmax(np.abs(anchor_channel)))
    g = 1 if anchor_channel[anchor_frame] > 0 else 0
    return ((local + g * (num_classes // 2)) % num_classes).astype(np.uint32)


def generate_synthetic_task(num_utts: int, t_range: tuple[int, int], dim: int,
                            num_classes: int, seed: int) -> list[Utterance]:
    """Deterministic synthetic dataset exercising both conv-scale and
    whole-sequence context (see synthetic_label_rule)."""
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    if dim < 2:
        raise ConfigError(f"need at least 2 feature dims (spike + anchor "
                          f"channels), got {dim}")
    lo, hi = t_range
    if lo < 3 or hi < lo:
        raise ConfigError(f"bad t_range {t_range}; need 3 <= lo <= hi")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0xDA,)))
    utterances = []
    for u in range(num_utts):
        t_len = int(rng.integers(lo, hi + 1))
        feats = rng.standard_normal((t_len, dim)).astype(np.float32)
        feats[:, 0] = np.where(rng.random(t_len) < 0.5, -1.0, 1.0)  # spike channel
        anchor_frame = int(rng.integers(0, t_len))
        g_sign = 1.0 if rng.random() < 0.5 else -1.0
        feats[:, -1] *= 0.25  # keep the anchor channel quiet elsewhere
        feats[anchor_frame, -1] = 6.0 * g_sign
        labels = synthetic_label_rule(feats, num_classes)
        utterances.append(Utterance(f"synth-{seed}-{u:05d}", feats, labels))
    return utterances


# ---------------------------------------------------------------------------
# Batching

def make_batches(utterances: Sequence[Utterance], frames_per_batch: int,
                 seed: int) -> list[Batch]:
    """Length-bucketed, seed-shuffled batches; every utterance exactly once.

    Budget is padded frames: a batch of B utterances with max length Tmax
    costs B * Tmax <= frames_per_batch.
    """
    if not utterances:
        return []
    longest = max(utterances, key=lambda u: u.num_frames)
    if longest.num_frames > frames_per_batch:
        raise ConfigError(f"utterance {longest.id!r} has {longest.num_frames} frames, "
                          f"more than frames_per_batch={frames_per_batch}")
    by_length = sorted(utterances, key=lambda u: (u.num_frames, u.id))
    groups: list[list[Utterance]] = []
    current: list[Utterance] = []
    for utt in by_length:
        tmax = utt.num_frames  # sorted ascending, so this is the group max
        if current and (len(current) + 1) * tmax > frames_per_batch:
            groups.append(current)
            current = []
        current.append(utt)
    if current:
        groups.append(current)

    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0xBA,)))
    rng.shuffle(groups)

    batches = []
    for group in groups:
        tmax = max(u.num_frames for u in group)
        dim = group[0].features.shape[1]
        feats = np.zeros((len(group), tmax, dim), dtype=np.float32)
        labels = np.zeros((len(group), tmax), dtype=np.uint32)
        lengths = np.zeros(len(group), dtype=np.int64)
        ids = []
        for b, u in enumerate(group):
            feats[b, :u.num_frames] = u.features
            if u.labels is not None:
                labels[b, :u.num_frames] = u.labels
            lengths[b] = u.num_frames
            ids.append(u.id)
        batches.append(Batch(feats, labels, lengths, ids))
    return batches


def validation_split(utterances: Sequence[Utterance], seed: int,
                     fraction_denominator: int = 10) -> tuple[list[Utterance], list[Utterance]]:
    """Deterministic train/validation split by seeded hash of utterance id."""
    train, val = [], []
    for utt in utterances:
        digest = hashlib.sha256(f"{seed}:{utt.id}".encode("utf-8")).digest()
        bucket = int.from_bytes(digest[:8], "little") % fraction_denominator
        (val if bucket == 0 else train).append(utt)
    return train, val
