"""Evaluation metrics built on top of the feature extractor.

* relative FID: FID(fake, X2) / FID(X1, X2) for two matched real halves
* leave-one-out 1-NN two-sample accuracy on raw signals
* multi-view consistency under a triplet-trained view embedder
* rFID sensitivity to cumulative noise, erasure and blur
* PR-AUC of a small classifier with and without generated augmentation
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from sklearn.metrics import average_precision_score
from torch import nn

from ..dataset import SignalDataset, halve_dataset
from ..generator import Generator, generate
from .fid import GaussianSummary, fid_from_summaries, summarize
from .inception import Inception1d, extract_features

log = logging.getLogger(__name__)


class DegenerateSplitError(ValueError):
    pass


# --------------------------------------------------------------------------
# relative FID


@dataclass
class RFID:
    value: float
    numerator: float
    denominator: float


def rfid_from_features(fake, x1, x2) -> RFID:
    """``FID(fake, X2) / FID(X1, X2)`` from precomputed features.

    Each argument may be a feature matrix or a :class:`GaussianSummary`.
    """
    s2 = x2 if isinstance(x2, GaussianSummary) else summarize(x2)
    s1 = x1 if isinstance(x1, GaussianSummary) else summarize(x1)
    sf = fake if isinstance(fake, GaussianSummary) else summarize(fake)
    den = fid_from_summaries(s1, s2)
    # roundoff floor, relative to the feature variance of the two halves
    spread = s1.trace() + s2.trace() - (s1.jitter * s1.dim + s2.jitter * s2.dim)
    if not den > 1e-12 * spread:
        raise DegenerateSplitError("FID between the two real halves is zero")
    num = fid_from_summaries(sf, s2)
    return RFID(num / den, num, den)


def rfid(fake_signals, x1_signals, x2_signals, extractor: Inception1d) -> RFID:
    feats = [extract_features(extractor, s) for s in (fake_signals, x1_signals, x2_signals)]
    return rfid_from_features(*feats)


def sample_like(G: Generator, theta: torch.Tensor, labels, seed: int, conditional: bool = True,
                batch_size: int = 64) -> np.ndarray:
    """One generated record per row of ``labels`` (conditions match C_X)."""
    gen = torch.Generator().manual_seed(seed)
    dtype = next(G.parameters()).dtype
    c = torch.as_tensor(np.asarray(labels), dtype=dtype)
    if not conditional:
        c = torch.zeros_like(c)
    z = torch.randn(c.shape[0], G.cfg.z_dim, generator=gen, dtype=dtype)
    return generate(G, z, c, theta.to(dtype), batch_size).float().numpy()


# --------------------------------------------------------------------------
# 1-NN two-sample test


def onnc(real, fake) -> float:
    """Leave-one-out 1-NN real/fake accuracy with Euclidean distance.

    Samples are flattened. When several neighbours tie for nearest and any
    of them is fake, the prediction is "fake".
    """
    r = np.asarray(real, dtype=np.float64).reshape(len(real), -1)
    f = np.asarray(fake, dtype=np.float64).reshape(len(fake), -1)
    if len(r) != len(f):
        raise ValueError("real and fake sets must have the same size")
    if len(r) == 0:
        raise ValueError("empty sets")
    x = np.concatenate([r, f])
    is_fake = np.r_[np.zeros(len(r), bool), np.ones(len(f), bool)]
    sq = np.einsum("ij,ij->i", x, x)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d2, np.inf)
    # Gram distances are only approximate; re-score near-minimal candidates exactly
    tol = 1e-9 * (sq.max() + 1.0)
    correct = 0
    for i in range(len(x)):
        cand = np.flatnonzero(d2[i] <= d2[i].min() + tol)
        exact = ((x[cand] - x[i]) ** 2).sum(axis=1)
        nearest = cand[exact == exact.min()]
        pred_fake = bool(is_fake[nearest].any())
        correct += pred_fake == is_fake[i]
    return correct / len(x)


# --------------------------------------------------------------------------
# multi-view consistency


class TripletEmbedder(nn.Module):
    """Four strided conv blocks on a single view, then a unit-norm embedding."""

    def __init__(self, channels=(16, 32, 64, 64), embed_dim: int = 64):
        super().__init__()
        layers, c_in = [], 1
        for c in channels:
            layers += [nn.Conv1d(c_in, c, 7, stride=2, padding=3), nn.ReLU()]
            c_in = c
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(c_in, embed_dim)

    def forward(self, x):
        """x: (B, L) -> (B, embed_dim)"""
        h = self.body(x.unsqueeze(1)).mean(dim=-1)
        return F.normalize(self.head(h), dim=-1)


def train_embedder(signals, steps: int = 2000, batch: int = 32, margin: float = 1.0,
                   lr: float = 1e-3, seed: int = 0) -> TripletEmbedder:
    """Triplets: two views of one record against a view of another record."""
    x = torch.as_tensor(np.asarray(signals), dtype=torch.float32)
    N, n, _ = x.shape
    if n < 2 or N < 2:
        raise ValueError("need at least two records with two views each")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = TripletEmbedder()
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    loss_fn = nn.TripletMarginLoss(margin=margin)
    for _ in range(steps):
        rec = rng.integers(0, N, batch)
        other = (rec + rng.integers(1, N, batch)) % N
        va = rng.integers(0, n, batch)
        vp = (va + rng.integers(1, n, batch)) % n
        vn = rng.integers(0, n, batch)
        anchor, pos, neg = x[rec, va], x[rec, vp], x[other, vn]
        emb = model(torch.cat([anchor, pos, neg]))
        loss = loss_fn(*emb.split(batch))
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    return model


@torch.no_grad()
def consistency_distance(signals, embedder: TripletEmbedder, batch_size: int = 64) -> float:
    """Mean over records of the mean pairwise embedding distance among views."""
    x = torch.as_tensor(np.asarray(signals), dtype=torch.float32)
    if x.ndim != 3 or x.shape[1] < 2:
        raise ValueError("consistency needs records with at least two views")
    N, n, L = x.shape
    total = 0.0
    for i in range(0, N, batch_size):
        chunk = x[i:i + batch_size]
        emb = embedder(chunk.reshape(-1, L)).view(chunk.shape[0], n, -1)
        d = torch.cdist(emb.double(), emb.double())
        total += float(d.sum()) / (n * (n - 1))
    return total / N


def chimera_records(signals, seed: int = 0) -> np.ndarray:
    """Records whose views come from different source records."""
    x = np.asarray(signals)
    N, n, _ = x.shape
    rng = np.random.default_rng(seed)
    src = np.stack([rng.permutation(N) for _ in range(n)], axis=1)
    return x[src, np.arange(n)[None, :]]


# --------------------------------------------------------------------------
# perturbation sensitivity

TRACKS = ("noise", "erase", "blur")
NOISE_HIGH = 0.0002
ERASE_RUN = 30


def perturb_noise(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return x + rng.uniform(0.0, NOISE_HIGH, size=x.shape)


def perturb_erase(x: np.ndarray, rng: np.random.Generator, run: int = ERASE_RUN) -> np.ndarray:
    """Erase one random run per view and bridge it with a straight line
    between the samples just before and just after the run."""
    out = x.copy()
    L = x.shape[-1]
    flat = out.reshape(-1, L)
    starts = rng.integers(1, L - run, size=flat.shape[0])
    ramp = np.arange(1, run + 1) / (run + 1)
    for row, s in zip(flat, starts):
        lo, hi = row[s - 1], row[s + run]
        row[s:s + run] = lo + (hi - lo) * ramp
    return out


def perturb_blur(x: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    """2 x 2 mean filter over the (view, length) plane, edges replicated."""
    return ndimage.uniform_filter(x, size=(1, 2, 2), mode="nearest")


PERTURBATIONS = {"noise": perturb_noise, "erase": perturb_erase, "blur": perturb_blur}


def perturbation_suite(x1, x2, extractor: Inception1d, steps: int = 20, seed: int = 0,
                       tracks=TRACKS, progress: bool = False) -> dict[str, np.ndarray]:
    """rFID after each cumulative perturbation step of ``x1``.

    Returns ``{track: array of steps + 1 values}``; index 0 is the
    unperturbed value, which is 1.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    base = np.asarray(x1, dtype=np.float64)
    s2 = summarize(extract_features(extractor, x2))
    s1 = summarize(extract_features(extractor, base))
    den = rfid_from_features(s1, s1, s2).denominator
    curves = {}
    for t, name in enumerate(tracks):
        rng = np.random.default_rng([seed, t])
        fn = PERTURBATIONS[name]
        cur = base
        values = [1.0]
        for step in range(1, steps + 1):
            cur = fn(cur, rng)
            feats = extract_features(extractor, cur.astype(np.float32))
            values.append(fid_from_summaries(summarize(feats), s2) / den)
            if progress:
                log.info("%s step %d rfid %.4f", name, step, values[-1])
        curves[name] = np.array(values)
    return curves


def count_inversions(values, rel_tol: float = 0.0) -> tuple[int, float]:
    """Number of decreases in a curve and the largest relative drop."""
    v = np.asarray(values, dtype=np.float64)
    drops = (v[:-1] - v[1:]) / np.abs(v[:-1])
    bad = drops > rel_tol
    return int(bad.sum()), float(drops[bad].max()) if bad.any() else 0.0


# --------------------------------------------------------------------------
# augmentation benefit


class SignalClassifier(nn.Module):
    """Small multi-label 1D conv classifier over all views."""

    def __init__(self, n_views: int = 12, k: int = 3, channels=(32, 64, 64)):
        super().__init__()
        layers, c_in = [], n_views
        for c in channels:
            layers += [nn.Conv1d(c_in, c, 7, stride=2, padding=3), nn.ReLU()]
            c_in = c
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(c_in, k)

    def forward(self, x):
        return self.head(self.body(x).mean(dim=-1))


def train_classifier(signals, labels, steps: int = 600, batch: int = 32, lr: float = 1e-3,
                     seed: int = 0) -> SignalClassifier:
    x = torch.as_tensor(np.asarray(signals), dtype=torch.float32)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.float32)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = SignalClassifier(x.shape[1], y.shape[1])
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    for _ in range(steps):
        idx = torch.from_numpy(rng.integers(0, len(x), batch))
        loss = F.binary_cross_entropy_with_logits(model(x[idx]), y[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    return model


@torch.no_grad()
def pr_auc_table(model: SignalClassifier, ds: SignalDataset) -> dict[str, float]:
    x = torch.from_numpy(ds.signals)
    scores = torch.cat([model(x[i:i + 256]) for i in range(0, len(x), 256)]).numpy()
    out = {}
    for j, name in enumerate(ds.label_names):
        y = ds.labels[:, j]
        if y.any():
            out[name] = float(average_precision_score(y, scores[:, j]))
    return out


def synthesize_augmentation(train: SignalDataset, G: Generator, theta, seed: int = 0,
                            conditional: bool = True) -> SignalDataset:
    """One generated record per training record of each present disease,
    conditioned on that disease alone, which doubles every conditioned class."""
    rows = []
    for j, name in enumerate(train.label_names):
        count = int(train.labels[:, j].sum())
        if count == 0:
            warnings.warn(f"class {name!r} absent from the training set; skipped")
            continue
        rows.append(np.tile(np.eye(train.k, dtype=np.uint8)[j], (count, 1)))
    if not rows:
        raise ValueError("no conditioned class present in the training set")
    labels = np.concatenate(rows)
    signals = sample_like(G, theta, labels, seed, conditional)
    ids = [f"aug-{seed}-{i:06d}" for i in range(len(labels))]
    return SignalDataset(signals, labels, ids, train.label_names, ["augment"] * len(labels))


def augmentation_eval(train: SignalDataset, test: SignalDataset, extra: SignalDataset,
                      steps: int = 600, seed: int = 0) -> dict[str, dict[str, float]]:
    """PR-AUC per disease for a classifier trained on ``train`` and on
    ``train + extra`` with identical initialization and batch schedule."""
    for j, name in enumerate(train.label_names):
        if not train.labels[:, j].any():
            warnings.warn(f"class {name!r} absent from the training set; skipped")
    base = train_classifier(train.signals, train.labels, steps, seed=seed)
    aug_x = np.concatenate([train.signals, extra.signals])
    aug_y = np.concatenate([train.labels, extra.labels])
    aug = train_classifier(aug_x, aug_y, steps, seed=seed)
    present = {n for j, n in enumerate(train.label_names) if train.labels[:, j].any()}
    pick = lambda d: {k: v for k, v in d.items() if k in present}  # noqa: E731
    return {"baseline": pick(pr_auc_table(base, test)), "augmented": pick(pr_auc_table(aug, test))}


# --------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    rfid: float
    fid_numerator: float
    fid_denominator: float
    onnc_accuracy: float
    consistency_distance: float
    consistency_distance_real: float
    pr_auc: dict | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rfid != self.fid_numerator / self.fid_denominator:
            raise ValueError("rfid must equal numerator / denominator")

    def finite(self) -> bool:
        vals = [self.rfid, self.fid_numerator, self.fid_denominator, self.onnc_accuracy,
                self.consistency_distance, self.consistency_distance_real]
        if self.pr_auc:
            vals += [v for table in self.pr_auc.values() for v in table.values()]
        return bool(np.isfinite(vals).all())

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json() + "\n", encoding="utf-8")
        return path

    def table(self) -> str:
        rows = [("rFID", self.rfid), ("  FID(fake, X2)", self.fid_numerator),
                ("  FID(X1, X2)", self.fid_denominator), ("1NNC accuracy", self.onnc_accuracy),
                ("consistency (generated)", self.consistency_distance),
                ("consistency (real)", self.consistency_distance_real)]
        if self.pr_auc:
            for kind, table in self.pr_auc.items():
                for name, v in table.items():
                    rows.append((f"PR-AUC {kind} {name}", v))
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{name:<{width}}  {val:.6f}" for name, val in rows)


def evaluate_sets(x1: np.ndarray, x2: np.ndarray, fake: np.ndarray, extractor: Inception1d,
                  embedder: TripletEmbedder) -> MetricReport:
    """Metrics for ``fake`` against real halves ``x1`` (same conditions as
    ``fake``) and ``x2``."""
    r = rfid(fake, x1, x2, extractor)
    return MetricReport(
        rfid=r.value, fid_numerator=r.numerator, fid_denominator=r.denominator,
        onnc_accuracy=onnc(x1, fake),
        consistency_distance=consistency_distance(fake, embedder),
        consistency_distance_real=consistency_distance(x1, embedder),
    )


def evaluate(G: Generator, theta, test: SignalDataset, extractor: Inception1d, seed: int = 0,
             conditional: bool = True, embedder_steps: int = 2000) -> MetricReport:
    """Split ``test`` into matched halves, generate against the first half's
    conditions, and score. The view embedder is trained on the second half."""

    x1, x2 = halve_dataset(test, seed)
    fake = sample_like(G, theta, x1.labels, seed, conditional)
    embedder = train_embedder(x2.signals, steps=embedder_steps, seed=seed)
    report = evaluate_sets(x1.signals, x2.signals, fake, extractor, embedder)
    report.meta = {"seed": seed, "records_x1": len(x1), "records_x2": len(x2),
                   "embedder_steps": embedder_steps, "conditional": conditional}
    return report
