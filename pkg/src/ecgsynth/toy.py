"""Synthetic multi-view beats projected from a latent 3-D dipole trajectory.

Every record is one beat at 500 Hz, 512 samples long. The dipole is the sum
of three Gaussian loops (P, QRS, T). A loop with centre ``t0``, width ``s``,
main direction ``u`` and secondary direction ``e`` is::

    amp * (g(t) * u + curl * s * g'(t) * e),   g(t) = exp(-(t - t0)^2 / (2 s^2))

View ``p`` is the dot product of the dipole with the unit vector of its
viewpoint, so all views of a record lie in a 3-dimensional row space.

Conditions (label index: effect):

0  ``notch``  zero-integral Ricker dip just after the QRS complex, 20 samples
   after the R peak, width 2.5 samples; its support (to 1e-10) lies inside
   ``NOTCH_WINDOW``.
1  ``axis``   the whole loop is rotated by 0.7 rad about the sagittal axis.
2  ``wide``   the T loop is 1.6x wider.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import (
    DEFAULT_LABEL_NAMES,
    DEFAULT_VIEWPOINTS,
    SignalDataset,
    TARGET_LENGTH,
    TARGET_RATE,
    preprocess_signals,
    view_directions,
)

R_PEAK = 200
NOTCH_OFFSET = 20
NOTCH_WIDTH = 2.5
NOTCH_DEPTH = 0.35
NOTCH_WINDOW = (R_PEAK + NOTCH_OFFSET - 20, R_PEAK + NOTCH_OFFSET + 20)  # 40 samples
AXIS_ROTATION = 0.7
T_WIDENING = 1.6
NOISE_STD = 0.01

# nominal (centre, width, amplitude, curl) per loop
_LOBES = {
    "P": (80.0, 12.0, 0.15, 0.4),
    "QRS": (float(R_PEAK), 5.0, 1.0, 0.6),
    "T": (360.0, 25.0, 0.3, 0.3),
}
_JITTER = {"P": 4.0, "QRS": 3.0, "T": 8.0}
# nominal main directions (pointing roughly left-inferior-anterior)
_BASE_DIRS = {
    "P": (0.6, 0.3, -0.5),
    "QRS": (0.7, 0.4, -0.6),
    "T": (0.6, 0.5, -0.4),
}


@dataclass
class ToyBeat:
    centres: dict[str, float]
    widths: dict[str, float]
    amps: dict[str, float]
    curls: dict[str, float]
    mains: dict[str, np.ndarray]
    seconds: dict[str, np.ndarray]
    labels: np.ndarray


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _rot_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)


def sample_beat(rng: np.random.Generator, labels) -> ToyBeat:
    """Draw per-record beat parameters. The draws do not depend on ``labels``,
    so the same stream yields matched healthy/diseased counterparts."""
    labels = np.asarray(labels, dtype=np.uint8)
    centres, widths, amps, curls, mains, seconds = {}, {}, {}, {}, {}, {}
    scale = rng.uniform(0.8, 1.2)
    for name, (t0, s, a, curl) in _LOBES.items():
        centres[name] = t0 + rng.uniform(-_JITTER[name], _JITTER[name])
        widths[name] = s * rng.uniform(0.9, 1.1)
        amps[name] = a * scale * rng.uniform(0.85, 1.15)
        curls[name] = curl * rng.uniform(0.8, 1.2)
        u = _unit(np.asarray(_BASE_DIRS[name]) + rng.normal(0.0, 0.15, 3))
        e = rng.normal(0.0, 1.0, 3)
        e = _unit(e - e.dot(u) * u)
        mains[name], seconds[name] = u, e
    if len(labels) > 1 and labels[1]:
        rot = _rot_x(AXIS_ROTATION)
        mains = {k: rot @ v for k, v in mains.items()}
        seconds = {k: rot @ v for k, v in seconds.items()}
    if len(labels) > 2 and labels[2]:
        widths["T"] *= T_WIDENING
    return ToyBeat(centres, widths, amps, curls, mains, seconds, labels)


def ricker(x: np.ndarray) -> np.ndarray:
    return (1.0 - x * x) * np.exp(-0.5 * x * x)


def dipole_trajectory(beat: ToyBeat, length: int = TARGET_LENGTH) -> np.ndarray:
    """Latent dipole, shape (3, length)."""
    t = np.arange(length, dtype=np.float64)
    traj = np.zeros((3, length))
    for name in _LOBES:
        t0, s = beat.centres[name], beat.widths[name]
        g = np.exp(-0.5 * ((t - t0) / s) ** 2)
        dg = -(t - t0) / s**2 * g
        traj += beat.amps[name] * (np.outer(beat.mains[name], g)
                                   + beat.curls[name] * s * np.outer(beat.seconds[name], dg))
    if len(beat.labels) > 0 and beat.labels[0]:
        x = (t - (beat.centres["QRS"] + NOTCH_OFFSET)) / NOTCH_WIDTH
        traj -= NOTCH_DEPTH * beat.amps["QRS"] * np.outer(beat.mains["QRS"], ricker(x))
    return traj


def project(traj: np.ndarray, angles=DEFAULT_VIEWPOINTS) -> np.ndarray:
    """Clean view signals (n, L) before noise and preprocessing."""
    return view_directions(angles) @ traj


def synth_record(rng: np.random.Generator, labels, angles=DEFAULT_VIEWPOINTS,
                 noise_std: float = NOISE_STD) -> np.ndarray:
    beat = sample_beat(rng, labels)
    clean = project(dipole_trajectory(beat), angles)
    noisy = clean + rng.normal(0.0, noise_std, clean.shape)
    return preprocess_signals(noisy, TARGET_RATE)


def synth_toy_dataset(count: int, seed: int, disease_mix=(0.2, 0.2, 0.2),
                      angles=DEFAULT_VIEWPOINTS, noise_std: float = NOISE_STD,
                      label_names=DEFAULT_LABEL_NAMES) -> SignalDataset:
    """``count`` toy records. Each record carries at most one condition:
    condition j with probability ``disease_mix[j]``, none with the remainder.
    Record ``i`` depends only on ``(seed, i)``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    mix = np.asarray(disease_mix, dtype=np.float64)
    if mix.ndim != 1 or np.any(mix < 0) or np.any(mix > 1) or mix.sum() > 1 + 1e-12:
        raise ValueError("disease_mix entries must lie in [0, 1] and sum to at most 1")
    edges = np.cumsum(mix)
    k = len(mix)
    names = tuple(label_names)[:k] if len(label_names) >= k else tuple(f"c{j}" for j in range(k))
    signals = np.empty((count, len(angles), TARGET_LENGTH), dtype=np.float32)
    labels = np.zeros((count, k), dtype=np.uint8)
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        j = int(np.searchsorted(edges, rng.random(), side="right"))
        if j < k:
            labels[i, j] = 1
        signals[i] = synth_record(rng, labels[i], angles, noise_std)
    ids = [f"toy-{seed}-{i:06d}" for i in range(count)]
    return SignalDataset(signals, labels, ids, names)
