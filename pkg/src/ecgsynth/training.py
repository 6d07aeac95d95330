"""Adversarial objectives and the D -> V -> G update schedule."""
from __future__ import annotations

import base64
import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import load_checkpoint, load_module, module_tensors, save_checkpoint
from .dataset import DEFAULT_VIEWPOINTS, SignalDataset, encode_viewpoints
from .discriminators import (
    DiscriminatorConfig,
    MajorDiscriminator,
    ViewDiscriminator,
    random_permutation_matrix,
    sample_offset,
    view_input,
)
from .generator import Generator, GeneratorConfig

log = logging.getLogger(__name__)

LOSS_FIELDS = ("d_loss", "g_adv_loss", "g_aux_loss", "v_loss", "g_view_loss")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch: int = 16
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    iterations: int = 5000
    real_target: float = 1.0  # a
    fake_target: float = 0.0  # b
    seed: int = 0
    conditional: bool = True
    grad_clip: float | None = 10.0
    checkpoint_every: int = 1000
    log_every: int = 100

    def validate(self) -> "TrainConfig":
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.real_target == self.fake_target:
            raise ValueError("real and fake targets must differ")
        if self.batch < 1 or self.iterations < 0:
            raise ValueError("batch must be >= 1 and iterations >= 0")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossReport:
    d_loss: float
    g_adv_loss: float
    g_aux_loss: float
    v_loss: float
    g_view_loss: float
    extras: dict = field(default_factory=dict)

    def as_row(self) -> list[float]:
        return [getattr(self, f) for f in LOSS_FIELDS]

    def finite(self) -> bool:
        return all(math.isfinite(v) for v in self.as_row())


# --------------------------------------------------------------------------
# objectives


def condition_ce(logits: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    """Softmax cross-entropy per sample; rows with an all-zero condition give 0."""
    mass = c.sum(dim=1, keepdim=True)
    target = torch.where(mass > 0, c / mass.clamp(min=1), torch.zeros_like(c))
    return -(target * F.log_softmax(logits, dim=1)).sum(dim=1)


def d_loss(D, real, c, fake, a: float = 1.0, b: float = 0.0):
    """Major discriminator objective; ``fake`` is detached here."""
    r_real, logits = D(real)
    r_fake, _ = D(fake.detach())
    adv = ((r_real - a) ** 2 + (r_fake - b) ** 2).mean()
    ce = condition_ce(logits, c).mean() if logits is not None else adv.new_zeros(())
    return adv + ce, {"d_adv": adv, "d_ce": ce}


def g_loss_major(D, fake, c, a: float = 1.0):
    """Generator's major term: LSGAN toward the real target plus BCE of the
    (frozen) auxiliary classifier against the requested condition."""
    r_fake, logits = D(fake)
    adv = ((r_fake - a) ** 2).mean()
    if logits is None:
        aux = adv.new_zeros(())
    else:
        aux = F.binary_cross_entropy_with_logits(logits, c, reduction="none").sum(dim=1).mean()
    return adv + aux, {"g_adv": adv, "g_aux": aux}


def v_loss(V, real_crops, fake_crops, theta_target):
    """Viewpoint regression on reals minus the real/fake prediction gap."""
    pred_real = V(real_crops)
    pred_fake = V(fake_crops.detach())
    target = theta_target.reshape(theta_target.shape[0], -1) if theta_target.dim() == 3 \
        else theta_target.reshape(1, -1).expand_as(pred_real)
    reg = F.mse_loss(pred_real, target)
    gap = F.mse_loss(pred_real, pred_fake)
    return reg - gap, {"v_reg": reg, "v_gap": gap}


def g_loss_view(V, real_crops, fake_crops):
    with torch.no_grad():
        pred_real = V(real_crops)
    return F.mse_loss(V(fake_crops), pred_real)


# --------------------------------------------------------------------------
# trainer


def _requires_grad(module, flag: bool):
    for p in module.parameters():
        p.requires_grad_(flag)


def _torch_state_b64(gen: torch.Generator) -> str:
    return base64.b64encode(gen.get_state().numpy().tobytes()).decode("ascii")


def _torch_state_from_b64(text: str) -> torch.Tensor:
    return torch.frombuffer(bytearray(base64.b64decode(text)), dtype=torch.uint8)


class Trainer:
    """Holds the three networks, their optimizers and all PRNG state."""

    def __init__(self, train_cfg: TrainConfig | None = None, gen_cfg: GeneratorConfig | None = None,
                 disc_cfg: DiscriminatorConfig | None = None, viewpoints=DEFAULT_VIEWPOINTS,
                 dtype=torch.float32):
        self.cfg = (train_cfg or TrainConfig()).validate()
        self.gen_cfg = gen_cfg or GeneratorConfig()
        self.disc_cfg = disc_cfg or DiscriminatorConfig(k=self.gen_cfg.k)
        self.viewpoints = tuple(tuple(map(float, v)) for v in viewpoints)
        self.dtype = dtype
        torch.manual_seed(self.cfg.seed)
        self.G = Generator(self.gen_cfg).to(dtype)
        self.D = MajorDiscriminator(self.disc_cfg, aux_classifier=self.cfg.conditional).to(dtype)
        self.V = ViewDiscriminator(self.disc_cfg).to(dtype)
        self.theta = torch.tensor(encode_viewpoints(self.viewpoints), dtype=dtype)
        betas = (self.cfg.beta1, self.cfg.beta2)
        self.opt_g = torch.optim.Adam(self.G.parameters(), lr=self.cfg.lr, betas=betas)
        self.opt_d = torch.optim.Adam(self.D.parameters(), lr=self.cfg.lr, betas=betas)
        self.opt_v = torch.optim.Adam(self.V.parameters(), lr=self.cfg.lr, betas=betas)
        self.step_rng = torch.Generator().manual_seed(self.cfg.seed + 1)
        self.data_rng = np.random.default_rng(self.cfg.seed + 2)
        self.step = 0
        self.last_view_draw = None

    # ---------------------------------------------------------------- steps

    def conditions(self, labels: torch.Tensor) -> torch.Tensor:
        if not self.cfg.conditional:
            return torch.zeros_like(labels)
        return labels

    def sample_view_draw(self):
        P = random_permutation_matrix(self.disc_cfg.n_views, self.step_rng, self.dtype)
        eps = sample_offset(self.disc_cfg.length, self.disc_cfg.crop_length, self.step_rng)
        return P, eps

    def _clip(self, module):
        if self.cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(module.parameters(), self.cfg.grad_clip)

    def update_d(self, real, c, fake):
        """Step (1): major discriminator on real vs detached fake."""
        cfg = self.cfg
        self.opt_d.zero_grad(set_to_none=True)
        ld, parts = d_loss(self.D, real, c, fake, cfg.real_target, cfg.fake_target)
        ld.backward()
        self._clip(self.D)
        self.opt_d.step()
        return ld, parts

    def update_v(self, real, fake):
        """Step (2): one (P, eps) draw shared by the real and fake branches."""
        P, eps = self.sample_view_draw()
        self.last_view_draw = (P, eps)
        l, pe = self.disc_cfg.crop_length, self.disc_cfg.pe_channels
        real_crops, theta_real = view_input(real, self.theta, P, eps, l, pe)
        fake_crops, theta_fake = view_input(fake, self.theta, P, eps, l, pe)
        assert torch.equal(theta_real, theta_fake), "real and fake views shuffled differently"
        self.opt_v.zero_grad(set_to_none=True)
        lv, parts = v_loss(self.V, real_crops, fake_crops, theta_real)
        lv.backward()
        self._clip(self.V)
        self.opt_v.step()
        return lv, parts, real_crops, fake_crops

    def update_g(self, fake, c, real_crops, fake_crops):
        """Step (3): generator on the major and view terms with D and V frozen."""
        _requires_grad(self.D, False)
        _requires_grad(self.V, False)
        try:
            self.opt_g.zero_grad(set_to_none=True)
            lg, parts = g_loss_major(self.D, fake, c, self.cfg.real_target)
            lgv = g_loss_view(self.V, real_crops, fake_crops)
            (lg + lgv).backward()
            self._clip(self.G)
            self.opt_g.step()
        finally:
            _requires_grad(self.D, True)
            _requires_grad(self.V, True)
        return lg, parts, lgv

    def train_step(self, real: torch.Tensor, labels: torch.Tensor) -> LossReport:
        real = real.to(self.dtype)
        c = self.conditions(labels.to(self.dtype))
        z = torch.randn(real.shape[0], self.gen_cfg.z_dim, generator=self.step_rng, dtype=self.dtype)
        fake = self.G(z, c, self.theta)
        ld, dparts = self.update_d(real, c, fake)
        lv, vparts, real_crops, fake_crops = self.update_v(real, fake)
        _, gparts, lgv = self.update_g(fake, c, real_crops, fake_crops)
        self.step += 1
        report = LossReport(
            d_loss=ld.item(), g_adv_loss=gparts["g_adv"].item(), g_aux_loss=gparts["g_aux"].item(),
            v_loss=lv.item(), g_view_loss=lgv.item(),
            extras={k: v.item() for k, v in {**dparts, **vparts}.items()},
        )
        if not report.finite():
            raise TrainingDivergedError(f"non-finite loss at step {self.step}: {asdict(report)}")
        return report

    def next_batch(self, ds: SignalDataset):
        idx = self.data_rng.integers(0, len(ds), size=self.cfg.batch)
        x = torch.from_numpy(ds.signals[idx]).to(self.dtype)
        y = torch.from_numpy(ds.labels[idx].astype(np.float32)).to(self.dtype)
        return x, y

    # ---------------------------------------------------------- checkpoints

    def config_dict(self) -> dict:
        return {
            "kind": "ecgsynth-gan",
            "generator": self.gen_cfg.to_dict(),
            "discriminator": self.disc_cfg.to_dict(),
            "conditional": self.cfg.conditional,
            "viewpoints": [list(v) for v in self.viewpoints],
        }

    def save(self, path) -> Path:
        tensors = {}
        tensors.update(module_tensors(self.G, "G"))
        tensors.update(module_tensors(self.D, "D"))
        tensors.update(module_tensors(self.V, "V"))
        opt_meta = {}
        for name, opt in (("optG", self.opt_g), ("optD", self.opt_d), ("optV", self.opt_v)):
            st = opt.state_dict()
            steps = {}
            for pid, s in st["state"].items():
                tensors[f"{name}.{pid}.exp_avg"] = s["exp_avg"]
                tensors[f"{name}.{pid}.exp_avg_sq"] = s["exp_avg_sq"]
                steps[str(pid)] = float(s["step"])
            opt_meta[name] = {"steps": steps, "lr": st["param_groups"][0]["lr"]}
        meta = {
            "step": self.step,
            "train": asdict(self.cfg),
            "optim": opt_meta,
            "step_rng": _torch_state_b64(self.step_rng),
            "data_rng": self.data_rng.bit_generator.state,
        }
        return save_checkpoint(path, tensors, self.config_dict(), meta)

    @classmethod
    def load(cls, path, dtype=torch.float32) -> "Trainer":
        tensors, config, meta = load_checkpoint(path)
        if config.get("kind") != "ecgsynth-gan":
            raise ValueError(f"{path} is not a GAN checkpoint")
        trainer = cls(TrainConfig.from_dict(meta["train"]), GeneratorConfig(**config["generator"]),
                      DiscriminatorConfig(**config["discriminator"]), config["viewpoints"], dtype)
        load_module(trainer.G, tensors, "G")
        load_module(trainer.D, tensors, "D")
        load_module(trainer.V, tensors, "V")
        for name, opt in (("optG", trainer.opt_g), ("optD", trainer.opt_d), ("optV", trainer.opt_v)):
            st = opt.state_dict()
            om = meta["optim"][name]
            state = {}
            for pid_s, step in om["steps"].items():
                pid = int(pid_s)
                state[pid] = {
                    "step": torch.tensor(step),
                    "exp_avg": tensors[f"{name}.{pid}.exp_avg"].to(dtype),
                    "exp_avg_sq": tensors[f"{name}.{pid}.exp_avg_sq"].to(dtype),
                }
            st["state"] = state
            opt.load_state_dict(st)
        trainer.step = int(meta["step"])
        trainer.step_rng.set_state(_torch_state_from_b64(meta["step_rng"]))
        trainer.data_rng.bit_generator.state = meta["data_rng"]
        return trainer


def load_generator(path, dtype=torch.float32):
    """Generator, viewpoint codes and conditional flag from a training checkpoint."""
    tensors, config, meta = load_checkpoint(path)
    G = Generator(GeneratorConfig(**config["generator"])).to(dtype)
    load_module(G, tensors, "G")
    G.eval()
    theta = torch.tensor(encode_viewpoints([tuple(v) for v in config["viewpoints"]]), dtype=dtype)
    return G, theta, bool(config.get("conditional", True))


# --------------------------------------------------------------------------
# loop


def train(ds: SignalDataset, cfg: TrainConfig, out_dir, trainer: Trainer | None = None,
          gen_cfg: GeneratorConfig | None = None, progress: bool = False) -> Trainer:
    """Run ``cfg.iterations`` total steps (resuming from ``trainer.step``).

    Writes ``losses.csv`` and ``ckpt_<step>.bin`` / ``ckpt_last.bin`` under
    ``out_dir``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if trainer is None:
        gen_cfg = gen_cfg or GeneratorConfig(k=ds.k)
        trainer = Trainer(cfg, gen_cfg, DiscriminatorConfig(n_views=ds.n, length=ds.length, k=ds.k))
    if trainer.gen_cfg.k != ds.k:
        raise ValueError(f"model expects k={trainer.gen_cfg.k} conditions, dataset has k={ds.k}")
    if trainer.disc_cfg.n_views != ds.n or trainer.gen_cfg.length != ds.length:
        raise ValueError("dataset shape does not match the model")
    csv_path = out / "losses.csv"
    new_file = trainer.step == 0 or not csv_path.exists()
    if not new_file:
        _truncate_log(csv_path, trainer.step)
    with open(csv_path, "w" if new_file else "a", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(["step", "d_loss", "g_adv", "g_aux", "v_loss", "g_view"])
        while trainer.step < cfg.iterations:
            x, y = trainer.next_batch(ds)
            rep = trainer.train_step(x, y)
            writer.writerow([trainer.step] + [repr(v) for v in rep.as_row()])
            if progress and trainer.step % cfg.log_every == 0:
                log.info("step %d %s", trainer.step, " ".join(f"{v:.4f}" for v in rep.as_row()))
            if cfg.checkpoint_every and trainer.step % cfg.checkpoint_every == 0:
                fh.flush()
                trainer.save(out / f"ckpt_{trainer.step:07d}.bin")
    trainer.save(out / "ckpt_last.bin")
    return trainer


def _truncate_log(csv_path: Path, step: int) -> None:
    rows = list(csv.reader(io.StringIO(csv_path.read_text())))
    keep = [rows[0]] + [r for r in rows[1:] if r and int(r[0]) <= step]
    with open(csv_path, "w", newline="") as fh:
        csv.writer(fh).writerows(keep)


def read_loss_log(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))
