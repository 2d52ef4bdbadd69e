"""Feature files, manifests, normalisation statistics, checkpoints and fixtures.

Byte layouts are documented in docs/FORMATS.md.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

FEATURE_MAGIC = b"SIPF"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIIIIB")  # magic, version, L, T, D, element size
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}

MANIFEST_FORMAT = "mambasip-manifest"
MANIFEST_VERSION = 1

CHECKPOINT_MAGIC = b"SIPC"
CHECKPOINT_VERSION = 1

STD_FLOOR = 1e-8


class FormatError(ValueError):
    """A file does not follow its documented layout."""


# --- feature files ---------------------------------------------------------

def write_features(path: str | Path, feats: np.ndarray) -> None:
    """Write an (L, T, D) array as a little-endian SIPF file (32- or 64-bit)."""
    feats = np.asarray(feats)
    if feats.ndim != 3 or 0 in feats.shape:
        raise ValueError(f"features must be a non-empty (L, T, D) array, got shape {feats.shape}")
    if feats.dtype not in (np.float32, np.float64):
        feats = feats.astype(np.float32)
    if not np.isfinite(feats).all():
        raise ValueError("features contain non-finite values")
    el = feats.dtype.itemsize
    header = _FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, *feats.shape, el)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(feats, dtype=_DTYPES[el]).tobytes())


def read_features(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    return parse_features(raw, str(path))


def parse_features(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    hsize = _FEATURE_HEADER.size
    if len(raw) < hsize:
        raise FormatError(f"{source}: header truncated at offset {len(raw)} (need {hsize} bytes)")
    magic, version, n_layers, n_frames, dim, el = _FEATURE_HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r} at offset 0")
    if version != FEATURE_VERSION:
        raise FormatError(f"{source}: unsupported version {version} at offset 4")
    if el not in _DTYPES:
        raise FormatError(f"{source}: unknown precision code {el} at offset 20")
    if 0 in (n_layers, n_frames, dim):
        raise FormatError(f"{source}: empty dimension in header (L={n_layers}, T={n_frames}, D={dim})")
    expected = n_layers * n_frames * dim * el
    actual = len(raw) - hsize
    if actual != expected:
        raise FormatError(f"{source}: payload at offset {hsize} is {actual} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype=_DTYPES[el], offset=hsize).reshape(n_layers, n_frames, dim)
    if not np.isfinite(data).all():
        raise FormatError(f"{source}: payload contains non-finite values")
    return data.astype(_DTYPES[el].newbyteorder("="))


# --- manifest --------------------------------------------------------------

@dataclass
class ManifestEntry:
    id: str
    left: str
    label: float
    audiogram_left: list[float]
    right: str | None = None
    audiogram_right: list[float] | None = None
    split: str = "train"

    def to_json(self) -> dict:
        return {
            "id": self.id, "split": self.split, "label": self.label,
            "left": self.left, "audiogram_left": self.audiogram_left,
            "right": self.right, "audiogram_right": self.audiogram_right,
        }


def _entry_from_json(obj: dict, where: str) -> ManifestEntry:
    if not isinstance(obj, dict):
        raise FormatError(f"{where}: record is not an object")
    missing = {"id", "left", "label", "audiogram_left"} - set(obj)
    if missing:
        raise FormatError(f"{where}: missing fields {sorted(missing)}")
    unknown = set(obj) - {"id", "left", "label", "audiogram_left", "right", "audiogram_right", "split"}
    if unknown:
        raise FormatError(f"{where}: unknown fields {sorted(unknown)}")
    label = obj["label"]
    if not isinstance(label, (int, float)) or isinstance(label, bool) or not 0.0 <= label <= 100.0:
        raise FormatError(f"{where}: label {label!r} outside [0, 100]")

    def audiogram(key):
        a = obj.get(key)
        if a is None:
            return None
        if not isinstance(a, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in a):
            raise FormatError(f"{where}: {key} must be a list of numbers")
        if any(not -10.0 <= v <= 120.0 for v in a):
            raise FormatError(f"{where}: {key} thresholds must lie in [-10, 120] dB HL")
        return [float(v) for v in a]

    if (obj.get("right") is None) != (obj.get("audiogram_right") is None):
        raise FormatError(f"{where}: right features and right audiogram must be given together")
    return ManifestEntry(
        id=str(obj["id"]), left=str(obj["left"]), label=float(label),
        audiogram_left=audiogram("audiogram_left"),
        right=None if obj.get("right") is None else str(obj["right"]),
        audiogram_right=audiogram("audiogram_right"),
        split=str(obj.get("split", "train")),
    )


def load_manifest(path: str | Path, check_files: bool = True) -> list[ManifestEntry]:
    """Parse a JSON-lines manifest; the first non-empty line is the schema header.

    Feature paths are resolved relative to the manifest's directory.
    """
    path = Path(path)
    root = path.parent
    entries: list[ManifestEntry] = []
    header_seen = False
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        where = f"{path}:{lineno}"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{where}: malformed record ({exc.msg})") from None
        if not header_seen:
            if not isinstance(obj, dict) or obj.get("format") != MANIFEST_FORMAT:
                raise FormatError(f"{where}: expected header line with format {MANIFEST_FORMAT!r}")
            if obj.get("version") != MANIFEST_VERSION:
                raise FormatError(f"{where}: unsupported manifest version {obj.get('version')!r}")
            header_seen = True
            continue
        entry = _entry_from_json(obj, where)
        if check_files:
            for rel in (entry.left, entry.right):
                if rel is not None and not (root / rel).is_file():
                    raise FormatError(f"{where}: feature file {rel} not found")
        entries.append(entry)
    return entries


def write_manifest(path: str | Path, entries: Iterable[ManifestEntry]) -> None:
    lines = [json.dumps({"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION})]
    lines += [json.dumps(e.to_json()) for e in entries]
    Path(path).write_text("\n".join(lines) + "\n")


def select_split(entries: Sequence[ManifestEntry], split: str | None) -> list[ManifestEntry]:
    return list(entries) if split is None else [e for e in entries if e.split == split]


# --- normalisation statistics --------------------------------------------

@dataclass
class NormStats:
    mean: np.ndarray   # (L, D)
    std: np.ndarray    # (L, D), floored at STD_FLOOR
    source: str = ""

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as f:
            np.savez(f, mean=self.mean, std=self.std, source=np.array(self.source))

    @classmethod
    def load(cls, path: str | Path) -> "NormStats":
        with np.load(path, allow_pickle=False) as z:
            if set(z.files) != {"mean", "std", "source"}:
                raise FormatError(f"{path}: not a normalisation statistics file")
            stats = cls(z["mean"], z["std"], str(z["source"]))
        if stats.mean.shape != stats.std.shape or (stats.std < STD_FLOOR).any():
            raise FormatError(f"{path}: inconsistent statistics")
        return stats


def feature_paths(entries: Sequence[ManifestEntry], root: str | Path) -> list[Path]:
    root = Path(root)
    out = []
    for e in entries:
        out.append(root / e.left)
        if e.right is not None:
            out.append(root / e.right)
    return out


def compute_norm_stats(entries: Sequence[ManifestEntry], root: str | Path, source: str = "train") -> NormStats:
    """Per-layer, per-dim mean and population std over every frame of every listed file.

    Files are merged one at a time (Chan et al. pairwise update) in manifest order.
    """
    paths = feature_paths(entries, root)
    if not paths:
        raise ValueError("compute_norm_stats needs at least one sample")
    n = 0
    mean = m2 = None
    for p in paths:
        x = read_features(p).astype(np.float64)
        k = x.shape[1]
        x_mean = x.mean(axis=1)
        x_m2 = ((x - x_mean[:, None, :]) ** 2).sum(axis=1)
        if mean is None:
            n, mean, m2 = k, x_mean, x_m2
            continue
        if x_mean.shape != mean.shape:
            raise FormatError(f"{p}: shape {x.shape} inconsistent with earlier files")
        delta = x_mean - mean
        total = n + k
        mean = mean + delta * (k / total)
        m2 = m2 + x_m2 + delta ** 2 * (n * k / total)
        n = total
    std = np.maximum(np.sqrt(m2 / n), STD_FLOOR)
    return NormStats(mean, std, source)


# --- in-memory datasets -----------------------------------------------------

@dataclass
class Batch:
    feats_l: np.ndarray                 # (B, L, T, D)
    audiogram_l: np.ndarray             # (B, F)
    labels: np.ndarray                  # (B,)
    feats_r: np.ndarray | None = None
    audiogram_r: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Dataset:
    ids: list[str]
    feats_l: list[np.ndarray]
    audiogram_l: list[np.ndarray]
    labels: np.ndarray
    feats_r: list[np.ndarray] | None = None
    audiogram_r: list[np.ndarray] | None = None
    name: str = ""

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def binaural(self) -> bool:
        return self.feats_r is not None

    def batches(self, indices: Sequence[int]) -> list[Batch]:
        """Stack the given samples, one :class:`Batch` per distinct feature shape (in first-seen order)."""
        groups: dict[tuple, list[int]] = {}
        for i in indices:
            groups.setdefault(self.feats_l[i].shape, []).append(i)
        out = []
        for idx in groups.values():
            out.append(Batch(
                feats_l=np.stack([self.feats_l[i] for i in idx]),
                audiogram_l=np.stack([self.audiogram_l[i] for i in idx]),
                labels=self.labels[idx],
                feats_r=None if self.feats_r is None else np.stack([self.feats_r[i] for i in idx]),
                audiogram_r=None if self.audiogram_r is None else np.stack([self.audiogram_r[i] for i in idx]),
            ))
        return out


def load_dataset(entries: Sequence[ManifestEntry], root: str | Path, stats: NormStats | None = None,
                 binaural: bool = False, name: str = "", dtype=np.float32) -> Dataset:
    from .model import normalize_features

    root = Path(root)

    def feats(rel):
        x = read_features(root / rel)
        if stats is not None:
            x = normalize_features(x, stats)
        return x.astype(dtype)

    if binaural and any(e.right is None for e in entries):
        raise FormatError("binaural dataset needs right-ear features for every entry")
    return Dataset(
        ids=[e.id for e in entries],
        feats_l=[feats(e.left) for e in entries],
        audiogram_l=[np.asarray(e.audiogram_left, dtype=dtype) for e in entries],
        labels=np.array([e.label for e in entries], dtype=np.float64),
        feats_r=[feats(e.right) for e in entries] if binaural else None,
        audiogram_r=[np.asarray(e.audiogram_right, dtype=dtype) for e in entries] if binaural else None,
        name=name,
    )


# --- checkpoints ---------------------------------------------------------

@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer: dict | None = None   # {"step": int, "m": {...}, "v": {...}}


def _write_tensors(buf: io.BytesIO, tensors: Mapping[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4")
        key = name.encode()
        buf.write(struct.pack("<H", len(key)))
        buf.write(key)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw, self.pos, self.source = raw, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.source}: truncated at offset {self.pos} (need {n} more bytes)")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def tensors(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (n,) = self.unpack("<H")
            name = self.take(n).decode()
            (ndim,) = self.unpack("<B")
            shape = self.unpack(f"<{ndim}I") if ndim else ()
            size = math.prod(shape) * 4
            out[name] = np.frombuffer(self.take(size), dtype="<f4").reshape(shape).astype(np.float32)
        return out


def write_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg = json.dumps(ckpt.config, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    _write_tensors(buf, ckpt.params)
    _write_tensors(buf, ckpt.buffers)
    if ckpt.optimizer is None:
        buf.write(struct.pack("<B", 0))
    else:
        buf.write(struct.pack("<BI", 1, ckpt.optimizer["step"]))
        _write_tensors(buf, ckpt.optimizer["m"])
        _write_tensors(buf, ckpt.optimizer["v"])
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path: str | Path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes(), str(path))
    if r.take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version} at offset 4")
    (n,) = r.unpack("<I")
    config = json.loads(r.take(n).decode())
    params = r.tensors()
    buffers = r.tensors()
    (has_opt,) = r.unpack("<B")
    optimizer = None
    if has_opt:
        (step,) = r.unpack("<I")
        optimizer = {"step": step, "m": r.tensors(), "v": r.tensors()}
    if r.pos != len(r.raw):
        raise FormatError(f"{path}: {len(r.raw) - r.pos} trailing bytes at offset {r.pos}")
    return Checkpoint(config, params, buffers, optimizer)


# --- synthetic fixtures -------------------------------------------------------

@dataclass(frozen=True)
class FixtureSpec:
    n_train: int = 64
    n_val: int = 16
    n_test: int = 32
    layers: int = 4
    frames: int = 40
    d_in: int = 32
    n_freqs: int = 8
    n_listeners: int = 8
    binaural: bool = True
    signal: float = 1.0      # feature gain of the planted latent
    clarity_weight: float = 3.0
    hearing_weight: float = 1.5


def planted_label(clarity: np.ndarray, hearing_loss: np.ndarray, spec: FixtureSpec) -> np.ndarray:
    """100 * sigmoid(w_c * clarity - w_h * (hearing_loss - 0.5)); clarity in [-1, 1], loss in [0, 1]."""
    z = spec.clarity_weight * clarity - spec.hearing_weight * (hearing_loss - 0.5)
    return 100.0 / (1.0 + np.exp(-z))


def fixture_pattern(seed: int, spec: FixtureSpec) -> np.ndarray:
    """(L, D) direction along which the planted latent enters the features; mean 1 per layer."""
    rng = np.random.default_rng([seed, 1])
    return 1.0 + 0.5 * rng.standard_normal((spec.layers, spec.d_in))


def planted_statistic(feats: np.ndarray, pattern: np.ndarray) -> float:
    """Least-squares estimate of the latent from one ear's (L, T, D) features."""
    m = feats.mean(axis=1)
    return float((m * pattern).sum() / (pattern * pattern).sum())


def gen_fixtures(out_dir: str | Path, seed: int, spec: FixtureSpec = FixtureSpec()) -> list[ManifestEntry]:
    """Write a manifest plus feature files whose labels follow :func:`planted_label`.

    Each sample has a clarity latent c ~ U(-1, 1) added to the features as
    ``signal * c * pattern`` (plus unit Gaussian noise, and a slow temporal
    envelope so the mean over frames carries the signal); each listener has a
    sloping audiogram whose average loss enters the label. Same seed and
    spec give identical bytes.
    """
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    pattern = fixture_pattern(seed, spec)
    freqs = np.arange(spec.n_freqs) / max(spec.n_freqs - 1, 1)

    def audiogram(loss):
        a = loss * 80.0 * (0.6 + 0.8 * freqs) + rng.normal(0.0, 3.0, spec.n_freqs)
        return np.clip(np.round(a, 1), -10.0, 120.0)

    listeners = []
    for _ in range(spec.n_listeners):
        loss = rng.uniform(0.0, 1.0)
        left = audiogram(loss)
        right = audiogram(float(np.clip(loss + rng.normal(0.0, 0.05), 0.0, 1.0)))
        listeners.append((left, right))

    t = np.arange(spec.frames) / spec.frames
    entries = []
    splits = ["train"] * spec.n_train + ["val"] * spec.n_val + ["test"] * spec.n_test
    for i, split in enumerate(splits):
        clarity = rng.uniform(-1.0, 1.0)
        left_aud, right_aud = listeners[int(rng.integers(spec.n_listeners))]
        envelope = 1.0 + 0.5 * np.sin(2 * np.pi * (t + rng.uniform()))
        gain_l = rng.uniform(0.7, 1.3)
        sid = f"s{i:05d}"
        files = {}
        for ear, gain in (("L", gain_l), ("R", 2.0 - gain_l)):
            if ear == "R" and not spec.binaural:
                break
            noise = rng.standard_normal((spec.layers, spec.frames, spec.d_in))
            x = noise + spec.signal * clarity * pattern[:, None, :] * (envelope[None, :, None] * gain)
            rel = f"features/{sid}_{ear}.sipf"
            write_features(out / rel, x.astype(np.float32))
            files[ear] = rel
        # hearing loss of the better ear (lower mean threshold) drives the label
        loss = min(left_aud.mean(), right_aud.mean() if spec.binaural else np.inf) / 80.0
        label = float(np.round(planted_label(np.array(clarity), np.array(loss), spec), 4))
        entries.append(ManifestEntry(
            id=sid, split=split, label=label,
            left=files["L"], audiogram_left=[float(v) for v in left_aud],
            right=files.get("R"), audiogram_right=[float(v) for v in right_aud] if spec.binaural else None,
        ))
    write_manifest(out / "manifest.jsonl", entries)
    return entries
