"""Multi-view signal records, preprocessing, viewpoint encoding and storage.

On-disk layout of a dataset directory::

    manifest.json   version, n, L, k, label_names, records[{id, labels, offset, split}]
    signals.f32le   little-endian float32, row-major [record][view][sample]

Offsets in the manifest count floats, not bytes.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage, signal

TARGET_RATE = 500.0
TARGET_LENGTH = 512
MANIFEST_VERSION = 1

# (theta, phi) per view, in the order I, II, III, aVR, aVL, aVF, V1..V6.
DEFAULT_VIEWPOINTS: tuple[tuple[float, float], ...] = (
    (math.pi / 2, math.pi / 2),
    (5 * math.pi / 6, math.pi / 2),
    (5 * math.pi / 6, -math.pi / 2),
    (math.pi / 3, -math.pi / 2),
    (math.pi / 3, math.pi / 2),
    (math.pi, math.pi / 2),
    (math.pi / 2, -math.pi / 18),
    (math.pi / 2, math.pi / 18),
    (19 * math.pi / 36, math.pi / 12),
    (11 * math.pi / 20, math.pi / 6),
    (8 * math.pi / 15, math.pi / 3),
    (8 * math.pi / 15, math.pi / 2),
)
VIEW_NAMES = ("I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6")
DEFAULT_LABEL_NAMES = ("notch", "axis", "wide")


class DegenerateAmplitudeError(ValueError):
    pass


class DatasetCorruptionError(IOError):
    pass


@dataclass
class MultiViewRecord:
    signals: np.ndarray  # (n, L)
    labels: np.ndarray  # (k,) in {0, 1}
    id: str = ""


# --------------------------------------------------------------------------
# viewpoints


def _wrap_phi(phi: float) -> float:
    if not -math.pi <= phi < 2 * math.pi:
        raise ValueError(f"azimuth {phi!r} outside [-pi, 2pi)")
    return phi + 2 * math.pi if phi < 0 else phi


def encode_viewpoints(angles: Sequence[tuple[float, float]]) -> np.ndarray:
    """Map (theta, phi) pairs to rows ``(cos theta, cos(phi / 2))``.

    Negative azimuths (as used by the standard lead table) are wrapped into
    [0, 2pi) first so that mirrored leads get distinct codes.
    """
    out = np.empty((len(angles), 2), dtype=np.float64)
    for p, (theta, phi) in enumerate(angles):
        if not (math.isfinite(theta) and math.isfinite(phi)):
            raise ValueError(f"non-finite viewpoint at row {p}")
        if not 0.0 <= theta <= math.pi:
            raise ValueError(f"polar angle {theta!r} outside [0, pi] at row {p}")
        out[p, 0] = math.cos(theta)
        out[p, 1] = math.cos(_wrap_phi(phi) / 2)
    return out


def view_directions(angles: Sequence[tuple[float, float]]) -> np.ndarray:
    """Unit vectors (n, 3) for each viewpoint."""
    th = np.array([a[0] for a in angles])
    ph = np.array([a[1] for a in angles])
    return np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], axis=1)


@dataclass(frozen=True)
class ViewpointTable:
    angles: tuple[tuple[float, float], ...] = DEFAULT_VIEWPOINTS

    @property
    def encoding(self) -> np.ndarray:
        return encode_viewpoints(self.angles)

    def __len__(self) -> int:
        return len(self.angles)


# --------------------------------------------------------------------------
# preprocessing


def resample_linear(raw: np.ndarray, raw_rate: float, rate: float = TARGET_RATE) -> np.ndarray:
    n_raw = raw.shape[1]
    duration = (n_raw - 1) / raw_rate
    n_out = int(math.floor(duration * rate + 1e-9)) + 1
    t_out = np.arange(n_out) / rate
    t_in = np.arange(n_raw) / raw_rate
    return np.stack([np.interp(t_out, t_in, row) for row in raw])


def pad_or_truncate(x: np.ndarray, length: int = TARGET_LENGTH) -> np.ndarray:
    if x.shape[1] >= length:
        return x[:, :length].copy()
    tail = np.repeat(x[:, -1:], length - x.shape[1], axis=1)
    return np.concatenate([x, tail], axis=1)


def denoise(x: np.ndarray, rate: float = TARGET_RATE, cutoff: float = 0.5) -> np.ndarray:
    """5-sample moving median, then a first-order RC high-pass at ``cutoff`` Hz."""
    x = ndimage.median_filter(x, size=(1, 5), mode="nearest")
    rc = 1.0 / (2 * math.pi * cutoff)
    alpha = rc / (rc + 1.0 / rate)
    b = np.array([alpha, -alpha])
    a = np.array([1.0, -alpha])
    # steady state for a signal that sat at x[0] before the record started
    zi = signal.lfilter_zi(b, a)[None, :] * x[:, :1]
    y, _ = signal.lfilter(b, a, x, axis=1, zi=zi)
    return y


def minmax_scale(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if not hi > lo:
        raise DegenerateAmplitudeError("degenerate amplitude")
    return (x - lo) / (hi - lo)


def preprocess_signals(raw: np.ndarray, raw_rate: float, *, denoise_signal: bool = True) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] < 2:
        raise ValueError(f"expected (n, L_raw>=2) array, got shape {raw.shape}")
    if not raw_rate > 0:
        raise ValueError("raw_rate must be positive")
    if raw.max() == raw.min():
        raise DegenerateAmplitudeError("degenerate amplitude")
    x = raw if raw_rate == TARGET_RATE else resample_linear(raw, raw_rate)
    x = pad_or_truncate(x)
    if denoise_signal:
        x = denoise(x)
    return minmax_scale(x)


def preprocess_record(raw: np.ndarray, raw_rate: float, labels=None, id: str = "",
                      *, denoise_signal: bool = True) -> MultiViewRecord:
    x = preprocess_signals(raw, raw_rate, denoise_signal=denoise_signal)
    lab = np.zeros(0, dtype=np.uint8) if labels is None else np.asarray(labels, dtype=np.uint8)
    return MultiViewRecord(signals=x, labels=lab, id=id)


# --------------------------------------------------------------------------
# in-memory dataset, manifest and splitting


@dataclass
class SignalDataset:
    signals: np.ndarray  # (N, n, L) float32
    labels: np.ndarray  # (N, k) uint8
    ids: list[str]
    label_names: tuple[str, ...] = DEFAULT_LABEL_NAMES
    splits: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.signals = np.ascontiguousarray(self.signals, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 2:
            self.labels = self.labels.reshape(len(self.signals), -1)
        if len(self.labels) != len(self.signals):
            raise ValueError("labels and signals differ in record count")
        if not self.splits:
            self.splits = ["all"] * len(self.signals)
        if len(self.ids) != len(self.signals) or len(self.splits) != len(self.signals):
            raise ValueError("ids/splits length mismatch")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("record ids must be unique")

    def __len__(self) -> int:
        return len(self.signals)

    def __getitem__(self, i: int) -> MultiViewRecord:
        return MultiViewRecord(self.signals[i], self.labels[i], self.ids[i])

    def __iter__(self) -> Iterator[MultiViewRecord]:
        return (self[i] for i in range(len(self)))

    @property
    def n(self) -> int:
        return self.signals.shape[1]

    @property
    def length(self) -> int:
        return self.signals.shape[2]

    @property
    def k(self) -> int:
        return self.labels.shape[1]

    def subset(self, index, split: str | None = None) -> "SignalDataset":
        index = np.asarray(index, dtype=np.int64)
        splits = [split or self.splits[i] for i in index]
        return SignalDataset(self.signals[index], self.labels[index], [self.ids[i] for i in index],
                             self.label_names, splits)

    def manifest(self) -> dict:
        per = self.n * self.length
        return {
            "version": MANIFEST_VERSION,
            "n": self.n,
            "L": self.length,
            "k": self.k,
            "label_names": list(self.label_names),
            "records": [
                {"id": rid, "labels": [int(v) for v in lab], "offset": i * per, "split": sp}
                for i, (rid, lab, sp) in enumerate(zip(self.ids, self.labels, self.splits))
            ],
        }


def split_dataset(ds: SignalDataset, fraction: float, seed: int) -> tuple[SignalDataset, SignalDataset]:
    """Stratified random split; each distinct label vector is one stratum.

    The train size is ``round(fraction * N)``, apportioned over strata by
    largest remainder, so every label count lands within one record of its
    proportional share.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    if len(ds) == 0:
        raise ValueError("cannot split an empty dataset")
    rng = np.random.default_rng(seed)
    keys = [tuple(row) for row in ds.labels.tolist()]
    strata: dict[tuple, list[int]] = {}
    for i, key in enumerate(keys):
        strata.setdefault(key, []).append(i)
    order = sorted(strata)
    quota = np.array([fraction * len(strata[s]) for s in order])
    take = np.floor(quota).astype(int)
    remaining = int(round(fraction * len(ds))) - int(take.sum())
    if remaining > 0:
        frac_part = quota - take
        # ties resolved by a seeded shuffle, not by stratum order
        jitter = rng.random(len(order))
        rank = np.lexsort((jitter, -frac_part))
        take[rank[:remaining]] += 1
    train_idx, test_idx = [], []
    for s, t in zip(order, take):
        members = np.array(strata[s])
        rng.shuffle(members)
        train_idx.extend(members[:t].tolist())
        test_idx.extend(members[t:].tolist())
    train_idx.sort()
    test_idx.sort()
    return ds.subset(train_idx, "train"), ds.subset(test_idx, "test")


def halve_dataset(ds: SignalDataset, seed: int) -> tuple[SignalDataset, SignalDataset]:
    """Two halves with per-label-vector counts as equal as possible."""
    return split_dataset(ds, 0.5, seed)


# --------------------------------------------------------------------------
# storage


def save_dataset(ds: SignalDataset, path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    ds.signals.astype("<f4").tofile(path / "signals.f32le")
    with open(path / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(ds.manifest(), fh, indent=1)
    return path


def load_dataset(path: str | Path) -> SignalDataset:
    path = Path(path)
    mpath, spath = path / "manifest.json", path / "signals.f32le"
    if not mpath.exists() or not spath.exists():
        raise FileNotFoundError(f"{path} must contain manifest.json and signals.f32le")
    with open(mpath, encoding="utf-8") as fh:
        man = json.load(fh)
    if man.get("version") != MANIFEST_VERSION:
        raise DatasetCorruptionError(f"unsupported manifest version {man.get('version')!r}")
    n, L, k = int(man["n"]), int(man["L"]), int(man["k"])
    records = man["records"]
    per = n * L
    raw = np.fromfile(spath, dtype="<f4")
    if raw.size * 4 != spath.stat().st_size or raw.size != len(records) * per:
        raise DatasetCorruptionError(
            f"signals.f32le holds {spath.stat().st_size} bytes, manifest expects {len(records) * per * 4}")
    offsets = [int(r["offset"]) for r in records]
    if any(o != i * per for i, o in enumerate(offsets)):
        raise DatasetCorruptionError("record offsets do not match the signal layout")
    labels = np.array([r["labels"] for r in records], dtype=np.uint8).reshape(len(records), k)
    return SignalDataset(
        signals=raw.reshape(len(records), n, L),
        labels=labels,
        ids=[str(r["id"]) for r in records],
        label_names=tuple(man["label_names"]),
        splits=[r.get("split", "all") for r in records],
    )
