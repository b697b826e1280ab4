"""Autoencoder stacked on the base network: the non-discriminative unsupervised baseline.

The encoder/decoder pair minimises 0.5 * ||phi(x) - f_d(f_e(phi(x)))||^2; it is
pretrained on source features and fine-tuned on target features, and the
encoder output is the adapted representation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from reidtl.data import Dataset
from reidtl.evaluation import extract_features


@dataclass(frozen=True)
class AEConfig:
    hidden: int | None = None  # 512 when D = 1024, else D // 2
    activation: str = "linear"
    pretrain_epochs: int = 200
    finetune_epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0


_ACTIVATIONS = {"linear": nn.Identity, "relu": nn.ReLU, "sigmoid": nn.Sigmoid}


class AutoEncoder(nn.Module):
    def __init__(self, in_dim: int, hidden: int, activation: str = "linear"):
        super().__init__()
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.encoder = nn.Sequential(nn.Linear(in_dim, hidden), _ACTIVATIONS[activation]())
        self.decoder = nn.Linear(hidden, in_dim)

    def forward(self, y):
        return self.decoder(self.encoder(y))


def hidden_width(feature_dim: int, cfg: AEConfig) -> int:
    if cfg.hidden:
        return cfg.hidden
    return 512 if feature_dim == 1024 else max(1, feature_dim // 2)


def reconstruction_cost(ae: AutoEncoder, feats) -> torch.Tensor:
    """Mean over rows of 0.5 * squared reconstruction error."""
    feats = torch.as_tensor(feats, dtype=ae.decoder.weight.dtype)
    if feats.shape[1] != ae.decoder.out_features:
        raise ValueError(f"features are {feats.shape[1]}-d, autoencoder expects {ae.decoder.out_features}")
    return 0.5 * ((feats - ae(feats)) ** 2).sum(dim=1).mean()


def fit_autoencoder(ae: AutoEncoder, feats: np.ndarray, epochs: int, lr: float, batch_size: int,
                    seed: int = 0) -> list[float]:
    gen = torch.Generator().manual_seed(seed)
    x = torch.as_tensor(feats, dtype=ae.decoder.weight.dtype)
    opt = torch.optim.Adam(ae.parameters(), lr=lr)
    losses = []
    for _ in range(epochs):
        perm = torch.randperm(len(x), generator=gen)
        for s in range(0, len(x), batch_size):
            loss = reconstruction_cost(ae, x[perm[s:s + batch_size]])
            opt.zero_grad()
            loss.backward()
            opt.step()
        losses.append(float(reconstruction_cost(ae, x).detach()))
    return losses


class AdaptedExtractor(nn.Module):
    """Base network followed by a frozen encoder; ``embed`` returns the encoder output."""

    extractor_id = "autoencoder"

    def __init__(self, backbone, ae: AutoEncoder):
        super().__init__()
        self.backbone = backbone
        self.ae = ae

    @property
    def feature_dim(self) -> int:
        return self.ae.encoder[0].out_features

    def embed(self, x):
        y, _ = self.backbone(x)
        return self.ae.encoder(y)


def autoencoder_baseline(model, target: Dataset, source: Dataset, cfg: AEConfig | None = None) -> AdaptedExtractor:
    """Pretrain the autoencoder on source features, fine-tune on target, return the encoding extractor."""
    cfg = cfg or AEConfig()
    if len(source) == 0:
        raise ValueError("autoencoder baseline needs source images for pretraining")
    src = extract_features(model, source.records).features
    tgt = extract_features(model, target.records).features
    d = model.feature_dim
    if src.shape[1] != d or tgt.shape[1] != d:
        raise ValueError(f"feature width mismatch: model D={d}, source {src.shape[1]}, target {tgt.shape[1]}")
    hidden = hidden_width(d, cfg)
    dtype = next(model.parameters()).dtype
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        ae = AutoEncoder(d, hidden, cfg.activation).to(dtype)
    fit_autoencoder(ae, src, cfg.pretrain_epochs, cfg.lr, cfg.batch_size, cfg.seed)
    fit_autoencoder(ae, tgt, cfg.finetune_epochs, cfg.lr, cfg.batch_size, cfg.seed + 1)
    for p in ae.parameters():
        p.requires_grad_(False)
    return AdaptedExtractor(model.backbone, ae)
