"""1D Inception-v3 feature extractor.

Every 2D operation of Inception-v3 is replaced by its 1D counterpart, keeping
the first (height) dimension of each kernel, stride and padding: a 7x1 kernel
becomes a length-7 kernel and a 1x7 kernel becomes a pointwise one. Input is
12 x 512; global average pooling after the last block gives 2048 features.

Inputs are zero-padded from 512 to 523 samples (5 left, 6 right). As with
the 299-pixel input of the 2D network, every unpadded stride-2 stage then
sees its whole input; at 512 samples the trailing columns fall off the end
of the stem's second pooling layer and never reach the output.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..checkpoint import load_checkpoint, load_module, module_tensors, save_checkpoint
from .patchify import patchify_batch

log = logging.getLogger(__name__)

FEATURE_DIM = 2048
INPUT_PAD = (5, 6)


class MissingExtractorError(FileNotFoundError):
    pass


class MissingCorpusError(FileNotFoundError):
    pass


class BasicConv(nn.Module):
    def __init__(self, c_in, c_out, kernel, stride=1, padding=0):
        super().__init__()
        self.conv = nn.Conv1d(c_in, c_out, kernel, stride=stride, padding=padding, bias=False)
        self.bn = nn.BatchNorm1d(c_out, eps=0.001)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


class InceptionA(nn.Module):
    def __init__(self, c_in, pool_features):
        super().__init__()
        self.b1 = BasicConv(c_in, 64, 1)
        self.b5_1 = BasicConv(c_in, 48, 1)
        self.b5_2 = BasicConv(48, 64, 5, padding=2)
        self.b3_1 = BasicConv(c_in, 64, 1)
        self.b3_2 = BasicConv(64, 96, 3, padding=1)
        self.b3_3 = BasicConv(96, 96, 3, padding=1)
        self.bp = BasicConv(c_in, pool_features, 1)

    def forward(self, x):
        b1 = self.b1(x)
        b5 = self.b5_2(self.b5_1(x))
        b3 = self.b3_3(self.b3_2(self.b3_1(x)))
        bp = self.bp(F.avg_pool1d(x, 3, stride=1, padding=1))
        return torch.cat([b1, b5, b3, bp], 1)


class InceptionB(nn.Module):
    def __init__(self, c_in):
        super().__init__()
        self.b3 = BasicConv(c_in, 384, 3, stride=2)
        self.bd_1 = BasicConv(c_in, 64, 1)
        self.bd_2 = BasicConv(64, 96, 3, padding=1)
        self.bd_3 = BasicConv(96, 96, 3, stride=2)

    def forward(self, x):
        b3 = self.b3(x)
        bd = self.bd_3(self.bd_2(self.bd_1(x)))
        bp = F.max_pool1d(x, 3, stride=2)
        return torch.cat([b3, bd, bp], 1)


class InceptionC(nn.Module):
    # 1x7 kernels collapse to pointwise convs, 7x1 to length-7 convs
    def __init__(self, c_in, c7):
        super().__init__()
        self.b1 = BasicConv(c_in, 192, 1)
        self.b7_1 = BasicConv(c_in, c7, 1)
        self.b7_2 = BasicConv(c7, c7, 1)
        self.b7_3 = BasicConv(c7, 192, 7, padding=3)
        self.bd_1 = BasicConv(c_in, c7, 1)
        self.bd_2 = BasicConv(c7, c7, 7, padding=3)
        self.bd_3 = BasicConv(c7, c7, 1)
        self.bd_4 = BasicConv(c7, c7, 7, padding=3)
        self.bd_5 = BasicConv(c7, 192, 1)
        self.bp = BasicConv(c_in, 192, 1)

    def forward(self, x):
        b1 = self.b1(x)
        b7 = self.b7_3(self.b7_2(self.b7_1(x)))
        bd = self.bd_5(self.bd_4(self.bd_3(self.bd_2(self.bd_1(x)))))
        bp = self.bp(F.avg_pool1d(x, 3, stride=1, padding=1))
        return torch.cat([b1, b7, bd, bp], 1)


class InceptionD(nn.Module):
    def __init__(self, c_in):
        super().__init__()
        self.b3_1 = BasicConv(c_in, 192, 1)
        self.b3_2 = BasicConv(192, 320, 3, stride=2)
        self.b7_1 = BasicConv(c_in, 192, 1)
        self.b7_2 = BasicConv(192, 192, 1)
        self.b7_3 = BasicConv(192, 192, 7, padding=3)
        self.b7_4 = BasicConv(192, 192, 3, stride=2)

    def forward(self, x):
        b3 = self.b3_2(self.b3_1(x))
        b7 = self.b7_4(self.b7_3(self.b7_2(self.b7_1(x))))
        bp = F.max_pool1d(x, 3, stride=2)
        return torch.cat([b3, b7, bp], 1)


class InceptionE(nn.Module):
    def __init__(self, c_in):
        super().__init__()
        self.b1 = BasicConv(c_in, 320, 1)
        self.b3_1 = BasicConv(c_in, 384, 1)
        self.b3_2a = BasicConv(384, 384, 1)
        self.b3_2b = BasicConv(384, 384, 3, padding=1)
        self.bd_1 = BasicConv(c_in, 448, 1)
        self.bd_2 = BasicConv(448, 384, 3, padding=1)
        self.bd_3a = BasicConv(384, 384, 1)
        self.bd_3b = BasicConv(384, 384, 3, padding=1)
        self.bp = BasicConv(c_in, 192, 1)

    def forward(self, x):
        b1 = self.b1(x)
        b3 = self.b3_1(x)
        b3 = torch.cat([self.b3_2a(b3), self.b3_2b(b3)], 1)
        bd = self.bd_2(self.bd_1(x))
        bd = torch.cat([self.bd_3a(bd), self.bd_3b(bd)], 1)
        bp = self.bp(F.avg_pool1d(x, 3, stride=1, padding=1))
        return torch.cat([b1, b3, bd, bp], 1)


@dataclass
class InceptionConfig:
    in_channels: int = 12
    num_classes: int = 10
    dropout: float = 0.5

    def to_dict(self) -> dict:
        return {"in_channels": self.in_channels, "num_classes": self.num_classes,
                "dropout": self.dropout, "arch": "inception1d-v3"}


class Inception1d(nn.Module):
    def __init__(self, cfg: InceptionConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or InceptionConfig()
        self.stem = nn.Sequential(
            BasicConv(cfg.in_channels, 32, 3, stride=2),
            BasicConv(32, 32, 3),
            BasicConv(32, 64, 3, padding=1),
            nn.MaxPool1d(3, stride=2),
            BasicConv(64, 80, 1),
            BasicConv(80, 192, 3),
            nn.MaxPool1d(3, stride=2),
        )
        self.blocks = nn.Sequential(
            InceptionA(192, 32), InceptionA(256, 64), InceptionA(288, 64),
            InceptionB(288),
            InceptionC(768, 128), InceptionC(768, 160), InceptionC(768, 160), InceptionC(768, 192),
            InceptionD(768),
            InceptionE(1280), InceptionE(2048),
        )
        self.dropout = nn.Dropout(cfg.dropout)
        self.fc = nn.Linear(FEATURE_DIM, cfg.num_classes)

    def features(self, x):
        x = F.pad(x, INPUT_PAD)
        return self.blocks(self.stem(x)).mean(dim=-1)

    def forward(self, x):
        return self.fc(self.dropout(self.features(x)))


@torch.no_grad()
def extract_features(model: Inception1d, signals, batch_size: int = 64) -> np.ndarray:
    """(N, 12, 512) -> (N, 2048) float64 features in eval mode."""
    was_training = model.training
    model.eval()
    x = torch.as_tensor(np.asarray(signals), dtype=torch.float32)
    try:
        out = [model.features(x[i:i + batch_size]).double()
               for i in range(0, x.shape[0], batch_size)]
    finally:
        model.train(was_training)
    return torch.cat(out).numpy()


def digits_corpus(limit: int | None = None):
    """Patchified sklearn digits as (N, 12, 512) float32 plus labels.

    The 8x8 gray digits are scaled to [0, 1] and tinted with a random RGB
    color per image (fixed generator, independent of the class) so every
    channel carries signal without leaking the label.
    """
    try:
        from sklearn.datasets import load_digits
        data = load_digits()
    except Exception as exc:  # pragma: no cover - depends on the install
        raise MissingCorpusError(
            "the digits image corpus could not be loaded; install scikit-learn "
            "(pip install scikit-learn) or pass a corpus of RGB images to pretrain_extractor"
        ) from exc
    images = data.images / 16.0
    labels = data.target.astype(np.int64)
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    tints = np.random.default_rng(0).uniform(0.3, 1.0, size=(len(images), 3))
    rgb = images[..., None] * tints[:, None, None, :]
    return patchify_batch(rgb), labels


def pretrain_extractor(corpus=None, epochs: int = 3, batch_size: int = 16, lr: float = 3e-4,
                       seed: int = 0, limit: int | None = None, progress: bool = False):
    """Train the extractor as an image classifier on patchified images.

    ``corpus`` is ``(x, labels)`` with x of shape (N, 12, 512); the digits
    corpus is used when it is None. Returns (model, meta).
    """
    torch.manual_seed(seed)
    if corpus is None:
        x, y = digits_corpus(limit)
    else:
        x, y = corpus
        if len(x) == 0:
            raise MissingCorpusError("the image corpus is empty")
    x = torch.as_tensor(np.asarray(x), dtype=torch.float32)
    y = torch.as_tensor(np.asarray(y), dtype=torch.long)
    num_classes = int(y.max()) + 1
    model = Inception1d(InceptionConfig(in_channels=x.shape[1], num_classes=num_classes))
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    model.train()
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(len(x))
        for i in range(0, len(order), batch_size):
            idx = torch.from_numpy(order[i:i + batch_size])
            if len(idx) < 2:
                continue  # batch norm needs two samples
            loss = F.cross_entropy(model(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        if progress:
            log.info("extractor epoch %d loss %.4f", epoch, float(np.mean(losses[-10:])))
    acc = accuracy(model, x, y)
    meta = {"epochs": epochs, "batch_size": batch_size, "lr": lr, "seed": seed,
            "samples": int(len(x)), "num_classes": num_classes, "train_accuracy": acc,
            "final_loss": losses[-1] if losses else None}
    return model, meta


@torch.no_grad()
def accuracy(model: Inception1d, x, y, batch_size: int = 64) -> float:
    was_training = model.training
    model.eval()
    try:
        pred = torch.cat([model(x[i:i + batch_size]).argmax(1) for i in range(0, len(x), batch_size)])
    finally:
        model.train(was_training)
    return float((pred == y).float().mean())


def save_extractor(model: Inception1d, path, meta: dict | None = None) -> Path:
    return save_checkpoint(path, module_tensors(model, "extractor"), model.cfg.to_dict(), meta)


def load_extractor(path) -> tuple[Inception1d, dict]:
    path = Path(path)
    if not path.exists():
        raise MissingExtractorError(
            f"no feature extractor at {path}; create one with "
            f"`ecgsynth pretrain-extractor --out <dir>` and pass <dir>/extractor.bin")
    tensors, config, meta = load_checkpoint(path)
    cfg = InceptionConfig(config["in_channels"], config["num_classes"], config["dropout"])
    model = Inception1d(cfg)
    load_module(model, tensors, "extractor")
    model.eval()
    return model, meta
