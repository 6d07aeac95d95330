"""Acceptance suite. Each test records one PASS/FAIL line, listed in the
terminal summary under "acceptance criteria".

The end-to-end tests are slow: the shared 5000-step training run alone takes
about 40 minutes on one CPU thread.
"""
import json
import time

import numpy as np
import pytest
import torch

from helpers import finite_difference_check
from ecgsynth.cli import main as cli_main
from ecgsynth.dataset import ViewpointTable, split_dataset
from ecgsynth.discriminators import (
    ViewDiscriminator,
    crop_window,
    random_permutation_matrix,
    sample_offset,
    shuffle_views,
    view_forward,
    view_input,
)
from ecgsynth.generator import GeneratorConfig, MixupNorm, ProjectionDecoder, generate, project_views
from ecgsynth.metrics.evaluation import (
    consistency_distance,
    count_inversions,
    onnc,
    perturbation_suite,
    rfid,
    rfid_from_features,
    sample_like,
    train_embedder,
)
from ecgsynth.metrics.fid import fid, summarize, fid_from_summaries
from ecgsynth.metrics.inception import extract_features
from ecgsynth.toy import NOTCH_WINDOW, synth_toy_dataset
from ecgsynth.training import Trainer, TrainConfig, d_loss, g_loss_major, g_loss_view, read_loss_log, train, v_loss

THETA = torch.tensor(ViewpointTable().encoding, dtype=torch.float32)


# --------------------------------------------------------------------------
# 1. normalization unit suite


@torch.no_grad()
def test_1_mixup_norm(criterion):
    start = time.perf_counter()
    torch.manual_seed(0)
    norm = MixupNorm(16, 8, 32, style_dim=12, cond_style_dim=6, hidden_dim=10).double()
    z = torch.randn(3, 16, 32, dtype=torch.float64)
    c = torch.randn(3, 8, 32, dtype=torch.float64)
    zs, cs = torch.randn(3, 12, dtype=torch.float64), torch.randn(3, 6, dtype=torch.float64)

    _, parts = norm(z, c, zs, cs, return_parts=True)
    lo = torch.minimum(parts["z_star"], parts["c_star"])
    hi = torch.maximum(parts["z_star"], parts["c_star"])
    convex = float(torch.maximum((lo - parts["h"]).clamp(min=0), (parts["h"] - hi).clamp(min=0)).max())
    half = torch.full((3, 1, 32), 0.5, dtype=torch.float64)
    _, p = norm(z, c, zs, cs, attention_override=half, return_parts=True)
    midpoint = float((p["h"] - 0.5 * (p["z_star"] + p["c_star"])).abs().max())

    zn = norm.normalize(z * 3 + 7)
    mean_err = float(zn.mean(dim=1).abs().max())
    std_err = float((zn.std(dim=1, unbiased=False) - 1).abs().max())

    a0, a1 = torch.zeros_like(half), torch.ones_like(half)
    dep_c = float((norm(z, c, zs, cs, attention_override=a0)
                   - norm(z, c, zs, torch.randn_like(cs) * 5, attention_override=a0)).abs().max())
    dep_z = float((norm(z, c, zs, cs, attention_override=a1)
                   - norm(z, c, torch.randn_like(zs) * 5, cs, attention_override=a1)).abs().max())
    seconds = time.perf_counter() - start

    ok = (convex <= 1e-12 and midpoint <= 1e-12 and mean_err < 1e-6 and std_err < 1e-4
          and dep_c <= 1e-12 and dep_z <= 1e-12 and seconds < 10)
    criterion(1, ok, f"convex {convex:.1e} midpoint {midpoint:.1e} mean {mean_err:.1e} "
                     f"std {std_err:.1e} a=0 {dep_c:.1e} a=1 {dep_z:.1e} in {seconds:.1f}s")
    assert ok


# --------------------------------------------------------------------------
# 2. gradient correctness


def test_2_gradients(criterion, toy_small):
    start = time.perf_counter()
    trainer = Trainer(TrainConfig(seed=0, batch=2), dtype=torch.float64)
    G, D, V, theta = trainer.G, trainer.D, trainer.V, trainer.theta
    x = torch.from_numpy(toy_small.signals[:2].copy()).double()
    c = torch.tensor([[1.0, 0, 0], [0, 0, 0]], dtype=torch.float64)
    z = torch.randn(2, 128, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    gen = torch.Generator().manual_seed(2)
    P, eps = random_permutation_matrix(12, gen, torch.float64), sample_offset(512, 128, gen)
    with torch.no_grad():
        fake_fixed = G(z, c, theta)
    real_crops, target = view_input(x, theta, P, eps, 128)
    fake_crops_fixed, _ = view_input(fake_fixed, theta, P, eps, 128)

    def g_view():
        fake_crops, _ = view_input(G(z, c, theta), theta, P, eps, 128)
        return g_loss_view(V, real_crops, fake_crops)

    rng = np.random.default_rng(0)
    checks = {
        "d_loss/D": (lambda: d_loss(D, x, c, fake_fixed)[0], list(D.parameters())),
        "v_loss/V": (lambda: v_loss(V, real_crops, fake_crops_fixed, target)[0], list(V.parameters())),
        "g_major/G": (lambda: g_loss_major(D, G(z, c, theta), c)[0], list(G.parameters())),
        "g_view/G": (g_view, list(G.parameters())),
    }
    errors = {name: finite_difference_check(fn, params, 7, rng) for name, (fn, params) in checks.items()}
    total = sum(len(e) for e in errors.values())
    worst = max(float(e.max()) for e in errors.values())
    seconds = time.perf_counter() - start
    ok = total >= 25 and worst < 1e-3 and seconds < 120
    detail = " ".join(f"{k} {float(v.max()):.1e}" for k, v in errors.items())
    criterion(2, ok, f"{total} parameters, max rel err {worst:.1e} ({detail}) in {seconds:.0f}s")
    assert ok


# --------------------------------------------------------------------------
# 3. view machinery


def test_3_view_machinery(criterion):
    gen = torch.Generator().manual_seed(0)
    X = torch.rand(2, 12, 512)
    results = {}
    Xs, ts = shuffle_views(X, THETA, torch.eye(12))
    results["identity"] = torch.equal(Xs, X) and torch.equal(ts, THETA)
    inverse, commute = True, True
    for _ in range(20):
        P = random_permutation_matrix(12, gen)
        Xs, ts = shuffle_views(X, THETA, P)
        Xb, tb = shuffle_views(Xs, ts, P.T)
        inverse &= torch.equal(Xb, X) and torch.equal(tb, THETA)
        e = sample_offset(512, 128, gen)
        commute &= torch.equal(crop_window(Xs, e, 128), shuffle_views(crop_window(X, e, 128), THETA, P)[0])
    results["transpose inverse"] = inverse
    results["crop/shuffle commute"] = commute

    torch.manual_seed(1)
    dec = ProjectionDecoder(GeneratorConfig())
    S = torch.randn(2, 32, 512)
    base = project_views(S, THETA, dec)
    equivariant = True
    for _ in range(20):
        perm = torch.randperm(12, generator=gen)
        equivariant &= torch.equal(project_views(S, THETA[perm], dec), base[:, perm])
    results["projection equivariance x20"] = equivariant

    V = ViewDiscriminator()
    crops, _ = view_input(torch.rand(3, 12, 512), THETA, random_permutation_matrix(12, gen), 100, 128)
    out = view_forward(crops, V)
    results["view output (-1,1), length 24"] = out.shape == (3, 24) and bool(out.abs().max() < 1)

    ok = all(results.values())
    criterion(3, ok, ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in results.items()))
    assert ok


# --------------------------------------------------------------------------
# 4. FID oracle


def test_4_fid_oracle(criterion):
    rng = np.random.default_rng(0)
    a = rng.normal(size=(300, 2048))
    self_fid = fid(a, a)

    n = 500
    u = rng.normal(size=n)
    u = (u - u.mean()) / u.std(ddof=1)  # exact unit sample moments
    f1, f2 = np.zeros((n, 2048)), np.zeros((n, 2048))
    f1[:, 0], f2[:, 0] = 0 + 1 * u, 3 + 2 * u
    closed = (0 - 3) ** 2 + 1 + 4 - 2 * (1 * 2)
    folded = fid(f1, f2)

    b = rng.normal(size=(200, 2048)) * rng.uniform(0.5, 2, 2048) + 0.1
    asym = abs(fid(a, b) - fid(b, a))
    ok = self_fid <= 1e-6 and abs(folded - closed) <= 1e-3 and asym <= 1e-8
    criterion(4, ok, f"fid(A,A) {self_fid:.1e}, folded case {folded:.6f} vs {closed}, "
                     f"asymmetry {asym:.1e}")
    assert ok


# --------------------------------------------------------------------------
# 5. rFID controls


def test_5_rfid_controls(criterion, pretrained):
    model, _ = pretrained
    test = synth_toy_dataset(2000, seed=31)
    feats = extract_features(model, test.signals)
    row = {rid: i for i, rid in enumerate(test.ids)}

    x1, x2 = split_dataset(test, 0.5, 0)
    i1, i2 = [row[r] for r in x1.ids], [row[r] for r in x2.ids]
    exact = rfid_from_features(feats[i1], feats[i1], feats[i2]).value
    through_signals = rfid(x1.signals, x1.signals, x2.signals, model).value

    dens = []
    for seed in range(10):
        h1, h2 = split_dataset(test, 0.5, seed)
        s1 = summarize(feats[[row[r] for r in h1.ids]])
        s2 = summarize(feats[[row[r] for r in h2.ids]])
        dens.append(fid_from_summaries(s1, s2))
    dens = np.array(dens)
    rel_std = dens.std(ddof=1) / dens.mean()
    ok = exact == 1.0 and through_signals == 1.0 and rel_std < 0.10
    criterion(5, ok, f"substitution rfid {exact!r} (signals {through_signals!r}); denominator "
                     f"mean {dens.mean():.4g}, relative std {rel_std:.2%} over 10 resplits")
    assert ok


# --------------------------------------------------------------------------
# 6. perturbation sensitivity


def test_6_perturbation(criterion, pretrained):
    model, meta = pretrained
    start = time.perf_counter()
    ds = synth_toy_dataset(1000, seed=41)
    x1, x2 = split_dataset(ds, 0.5, 0)
    curves = perturbation_suite(x1.signals, x2.signals, model, steps=20, seed=0)
    seconds = time.perf_counter() - start + meta["seconds"]

    n_inv, max_drop = count_inversions(curves["noise"])
    noise_ok = n_inv <= 2 and max_drop < 0.05
    blur_ok = curves["blur"][-1] > curves["blur"][1]
    erase_ok = curves["erase"][-1] > curves["erase"][1]
    ok = noise_ok and blur_ok and erase_ok and seconds < 900
    fmt = lambda v: " ".join(f"{x:.3g}" for x in v)  # noqa: E731
    criterion(6, ok, f"noise inversions {n_inv} (max drop {max_drop:.1%}); blur {curves['blur'][1]:.3g}"
                     f" -> {curves['blur'][-1]:.3g}; erase {curves['erase'][1]:.3g} -> "
                     f"{curves['erase'][-1]:.3g}; {seconds:.0f}s including pretraining")
    print("noise", fmt(curves["noise"]))
    print("blur ", fmt(curves["blur"]))
    print("erase", fmt(curves["erase"]))
    assert ok


# --------------------------------------------------------------------------
# 7 and 8. desk-scale training


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    ds = synth_toy_dataset(2000, seed=7)
    cfg = TrainConfig(batch=16, lr=1e-4, beta1=0.5, beta2=0.999, iterations=5000, seed=0,
                      checkpoint_every=1000)
    start = time.perf_counter()
    trainer = train(ds, cfg, out)
    seconds = time.perf_counter() - start
    return {"trainer": trainer, "data": ds, "out": out, "seconds": seconds}


def test_7_desk_training(criterion, desk_run):
    trainer, ds = desk_run["trainer"], desk_run["data"]
    log = read_loss_log(desk_run["out"] / "losses.csv")
    finite = log.shape[0] == 5000 and bool(np.isfinite(log).all())

    real = synth_toy_dataset(500, seed=8)
    fake = sample_like(trainer.G, trainer.theta, real.labels, seed=0)
    fresh = Trainer(TrainConfig(seed=0))
    fake_init = sample_like(fresh.G, fresh.theta, real.labels, seed=0)
    acc, acc_init = onnc(real.signals, fake), onnc(real.signals, fake_init)

    embedder = train_embedder(ds.signals[:1000], steps=2000, seed=0)
    cons_fake = consistency_distance(fake, embedder)
    cons_real = consistency_distance(real.signals, embedder)
    ratio = cons_fake / cons_real

    minutes = desk_run["seconds"] / 60
    ok = finite and acc <= 0.85 and ratio <= 1.5
    criterion(7, ok, f"finite losses {finite}; 1NNC {acc:.3f} (init {acc_init:.3f}, need <= 0.85); "
                     f"consistency {cons_fake:.4f} vs real {cons_real:.4f} = {ratio:.2f}x "
                     f"(need <= 1.5x); training {minutes:.1f} min")
    assert ok


def test_8_conditional_localization(criterion, desk_run):
    trainer = desk_run["trainer"]
    count = 200
    z = torch.randn(count, 128, generator=torch.Generator().manual_seed(1))
    c1 = torch.zeros(count, 3)
    c1[:, 0] = 1
    diff = (generate(trainer.G, z, c1, trainer.theta)
            - generate(trainer.G, z, torch.zeros(count, 3), trainer.theta)).abs()
    profile = diff.mean(dim=(0, 1)).numpy()
    lo, hi = NOTCH_WINDOW
    share = float(profile[lo:hi].sum() / profile.sum())
    peak = int(profile.argmax())
    ok = share >= 0.60
    criterion(8, ok, f"{share:.1%} of the mean |difference| inside samples [{lo}, {hi}) "
                     f"(need >= 60%); peak at sample {peak}")
    assert ok


# --------------------------------------------------------------------------
# 9. determinism of the command-line pipeline


def _pipeline(root):
    def run(*argv):
        assert cli_main([str(a) for a in argv]) == 0

    run("toy-data", "--count", 200, "--split", 0.5, "--seed", 5, "--out", root / "data")
    run("train", "--data", root / "data" / "train", "--iterations", 100, "--checkpoint-every", 50,
        "--seed", 5, "--out", root / "run")
    run("generate", "--ckpt", root / "run" / "ckpt_last.bin", "--count", 50, "--condition", 0,
        "--seed", 5, "--out", root / "gen")
    run("pretrain-extractor", "--limit", 64, "--seed", 5, "--out", root / "ext")
    run("eval", "--ckpt", root / "run" / "ckpt_last.bin", "--data", root / "data" / "test",
        "--extractor", root / "ext" / "extractor.bin", "--embedder-steps", 200, "--seed", 5,
        "--out", root / "eval")


def test_9_determinism(criterion, tmp_path):
    _pipeline(tmp_path / "a")
    _pipeline(tmp_path / "b")
    files = ["data/train/signals.f32le", "data/test/signals.f32le", "run/ckpt_0000050.bin",
             "run/ckpt_last.bin", "run/losses.csv", "gen/signals.f32le", "gen/manifest.json",
             "ext/extractor.bin", "eval/report.json"]
    differing = [f for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    report = json.loads((tmp_path / "a" / "eval" / "report.json").read_text())
    ok = not differing
    criterion(9, ok, f"{len(files) - len(differing)}/{len(files)} artifacts byte-identical"
                     + (f"; differing: {differing}" if differing else "")
                     + f"; rfid {report['rfid']:.4g}")
    assert ok
