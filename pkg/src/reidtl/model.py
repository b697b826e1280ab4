"""Two-branch Siamese re-ID network with classification and verification heads.

Both branches run through one backbone instance, so weight sharing is by
construction. Features then pass a loss-specific dropout unit: independent
masks for the identity classifier, one shared mask per pair for the
verification subnet.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

CHECKPOINT_FORMAT = "reidtl-checkpoint"
CHECKPOINT_VERSION = 1
GROUPS = ("backbone", "classification", "verification")


class ShapeError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossConfig:
    verification_weight: float = 3.0
    classification_weight: float = 1.0
    num_aux_heads: int = 0

    def __post_init__(self):
        if self.verification_weight < 0 or self.classification_weight < 0:
            raise ValueError("loss weights must be >= 0")
        if self.verification_weight == 0 and self.classification_weight == 0:
            raise ValueError("loss weights cannot both be zero")
        if self.num_aux_heads not in (0, 2):
            raise ValueError(f"num_aux_heads must be 0 or 2, got {self.num_aux_heads}")


class Backbone(nn.Module):
    """Feature extractor phi: images (B, C, H, W) -> (y of shape (B, D), intermediate taps)."""

    identifier = "abstract"
    out_dim: int
    pretrained: bool = False
    input_shape: tuple[int, int, int] | None = None

    def tap_dims(self) -> list[int]:
        return []

    def config(self) -> dict:
        raise NotImplementedError

    def layer_names(self) -> list[str]:
        raise NotImplementedError

    def responses(self, name: str, x: torch.Tensor) -> torch.Tensor:
        """Activation maps of layer ``name`` for input ``x``."""
        if name not in self.layer_names():
            raise KeyError(f"unknown layer {name!r}; available: {', '.join(self.layer_names())}")
        captured = {}
        layer = dict(self.named_modules())[name]
        handle = layer.register_forward_hook(lambda m, i, o: captured.setdefault("out", o))
        try:
            with torch.no_grad():
                self(x)
        finally:
            handle.remove()
        return captured["out"]

    def check_input(self, x: torch.Tensor) -> None:
        if self.input_shape is not None and tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ShapeError(f"{self.identifier}: expected input (B, {self.input_shape}), got {tuple(x.shape)}")


class ToyBackbone(Backbone):
    """Two conv+pool stages and a linear projection to D. Under 5k parameters at defaults."""

    identifier = "toy"

    def __init__(self, image_size=(16, 8, 3), out_dim: int = 32, widths=(6, 12), num_taps: int = 0):
        super().__init__()
        h, w, c = image_size
        if h % 4 or w % 4:
            raise ShapeError(f"toy backbone needs H and W divisible by 4, got {h}x{w}")
        self.image_size = tuple(image_size)
        self.input_shape = (c, h, w)
        self.out_dim = out_dim
        self.widths = tuple(widths)
        self.num_taps = num_taps
        self.conv1 = nn.Conv2d(c, widths[0], 3, padding=1)
        self.relu1 = nn.ReLU()
        self.conv2 = nn.Conv2d(widths[0], widths[1], 3, padding=1)
        self.relu2 = nn.ReLU()
        self.fc = nn.Linear(widths[1] * (h // 4) * (w // 4), out_dim)

    def tap_dims(self):
        return list(self.widths[: self.num_taps])

    def config(self):
        return {"image_size": list(self.image_size), "out_dim": self.out_dim,
                "widths": list(self.widths), "num_taps": self.num_taps}

    def layer_names(self):
        return ["relu1", "relu2"]

    def forward(self, x):
        self.check_input(x)
        a1 = self.relu1(self.conv1(x))
        h1 = F.max_pool2d(a1, 2)
        a2 = self.relu2(self.conv2(h1))
        h2 = F.max_pool2d(a2, 2)
        y = self.fc(h2.flatten(1))
        taps = [a1.mean(dim=(2, 3)), a2.mean(dim=(2, 3))][: self.num_taps]
        return y, taps


class GoogLeNetBackbone(Backbone):
    """Adapter around torchvision's GoogLeNet: D = 1024 pooled output.

    The two taps sit where the original network hangs its auxiliary
    classifiers (after inception4a and inception4d), globally average pooled.
    ``pretrained=True`` loads ImageNet weights through torchvision, which
    needs them cached or downloadable.
    """

    identifier = "googlenet"

    def __init__(self, pretrained: bool = False, num_taps: int = 2, image_size=None):
        super().__init__()
        from torchvision.models import GoogLeNet_Weights, googlenet

        weights = GoogLeNet_Weights.IMAGENET1K_V1 if pretrained else None
        net = googlenet(weights=weights, aux_logits=False, init_weights=not pretrained,
                        transform_input=False)
        self.net = net
        self.pretrained = pretrained
        self.num_taps = num_taps
        self.out_dim = 1024
        self.image_size = tuple(image_size) if image_size else None
        if image_size:
            h, w, c = image_size
            self.input_shape = (c, h, w)

    def tap_dims(self):
        return [512, 528][: self.num_taps]

    def config(self):
        return {"pretrained": False, "num_taps": self.num_taps,
                "image_size": list(self.image_size) if self.image_size else None}

    def layer_names(self):
        return ["net.conv1", "net.conv2", "net.conv3", "net.inception3a", "net.inception3b",
                "net.inception4a", "net.inception4b", "net.inception4c", "net.inception4d",
                "net.inception4e", "net.inception5a", "net.inception5b"]

    def forward(self, x):
        self.check_input(x)
        n = self.net
        x = n.maxpool1(n.conv1(x))
        x = n.maxpool2(n.conv3(n.conv2(x)))
        x = n.maxpool3(n.inception3b(n.inception3a(x)))
        t1 = n.inception4a(x)
        x = n.inception4d(n.inception4c(n.inception4b(t1)))
        t2 = x
        x = n.maxpool4(n.inception4e(x))
        x = n.inception5b(n.inception5a(x))
        y = torch.flatten(n.avgpool(x), 1)
        taps = [t1.mean(dim=(2, 3)), t2.mean(dim=(2, 3))][: self.num_taps]
        return y, taps


BACKBONES = {"toy": ToyBackbone, "googlenet": GoogLeNetBackbone}


def forward_features(backbone: Backbone, images: torch.Tensor) -> torch.Tensor:
    """One D-vector per image; no dropout is involved."""
    y, _ = backbone(images)
    return y


class DropoutUnit:
    """Bernoulli(p) masks, p being the keep probability.

    ``classification_random`` draws one mask per image; ``verification_pairwise_consistent``
    draws one mask per pair and applies it to both members. The most recent
    masks are kept on ``last_masks``.
    """

    MODES = ("classification_random", "verification_pairwise_consistent")

    def __init__(self, p: float = 0.5, mode: str = "classification_random"):
        if not 0 < p <= 1:
            raise ValueError(f"keep probability must be in (0, 1], got {p}")
        if mode not in self.MODES:
            raise ValueError(f"unknown dropout mode {mode!r}")
        self.p = p
        self.mode = mode
        self.last_masks: torch.Tensor | None = None

    def draw(self, n: int, d: int, like: torch.Tensor, rng: torch.Generator | None) -> torch.Tensor:
        if self.p == 1:
            return torch.ones(n, d, dtype=like.dtype)
        probs = torch.full((n, d), self.p, dtype=like.dtype)
        return torch.bernoulli(probs, generator=rng)


def apply_dropout(unit: DropoutUnit, features: torch.Tensor, pairing=None, rng=None):
    """Masked features r * y.

    Classification mode returns a (B, D) tensor. Pairwise-consistent mode
    needs ``pairing`` (P x 2 indices) and returns the two (P, D) sides, masked
    with the same per-pair mask.
    """
    if unit.mode == "verification_pairwise_consistent":
        if pairing is None:
            raise ValueError("pairwise-consistent dropout needs a pairing")
        pairing = torch.as_tensor(np.asarray(pairing), dtype=torch.long).reshape(-1, 2)
        r = unit.draw(len(pairing), features.shape[1], features, rng)
        unit.last_masks = r
        return r * features[pairing[:, 0]], r * features[pairing[:, 1]]
    r = unit.draw(features.shape[0], features.shape[1], features, rng)
    unit.last_masks = r
    return r * features


class ClassificationSubnet(nn.Module):
    def __init__(self, in_dim: int, num_classes: int):
        super().__init__()
        self.fc = nn.Linear(in_dim, num_classes)

    @property
    def num_classes(self) -> int:
        return self.fc.out_features

    def forward(self, y):
        return self.fc(y)

    def probabilities(self, y):
        return torch.softmax(self.fc(y), dim=1)


class VerificationSubnet(nn.Module):
    """Two-way same/different logits from ReLU(y_i - y_j) -> FC(hidden) -> 2."""

    def __init__(self, in_dim: int, hidden: int = 1024):
        super().__init__()
        self.in_dim = in_dim
        self.fc = nn.Linear(in_dim, hidden)
        self.head = nn.Linear(hidden, 2)

    def forward(self, yi, yj):
        if yi.shape[-1] != self.in_dim or yj.shape[-1] != self.in_dim:
            raise ShapeError(f"verification subnet expects {self.in_dim}-d inputs, "
                             f"got {yi.shape[-1]} and {yj.shape[-1]}")
        return self.head(self.fc(F.relu(yi - yj)))


def verification_logits(subnet: VerificationSubnet, yi, yj):
    return subnet(yi, yj)


@dataclass
class HeadOutput:
    name: str
    class_logits: torch.Tensor | None
    verif_logits: torch.Tensor | None


@dataclass
class ModelOutputs:
    heads: list[HeadOutput]
    features: torch.Tensor
    class_masks: list[torch.Tensor] = field(default_factory=list)
    verif_masks: list[torch.Tensor] = field(default_factory=list)


class ReIDNet(nn.Module):
    """Backbone + dropout unit + ID classification and pairwise verification subnets."""

    def __init__(self, backbone: Backbone, num_classes: int, loss: LossConfig | None = None,
                 keep_prob: float = 0.5, verif_hidden: int = 1024):
        super().__init__()
        self.loss_config = loss or LossConfig()
        n_aux = self.loss_config.num_aux_heads
        if n_aux and len(backbone.tap_dims()) < n_aux:
            raise ShapeError(f"backbone {backbone.identifier} exposes {len(backbone.tap_dims())} "
                             f"taps, loss config wants {n_aux} auxiliary heads")
        self.backbone = backbone
        self.keep_prob = keep_prob
        self.verif_hidden = verif_hidden
        dims = [backbone.out_dim] + backbone.tap_dims()[:n_aux]
        self.head_names = ["main"] + [f"aux{i + 1}" for i in range(n_aux)]
        self.classifiers = nn.ModuleList(ClassificationSubnet(d, num_classes) for d in dims)
        self.verifiers = nn.ModuleList(VerificationSubnet(d, verif_hidden) for d in dims)
        self.cls_dropout = DropoutUnit(keep_prob, "classification_random")
        self.ver_dropout = DropoutUnit(keep_prob, "verification_pairwise_consistent")

    @property
    def num_classes(self) -> int:
        return self.classifiers[0].num_classes

    @property
    def feature_dim(self) -> int:
        return self.backbone.out_dim

    def param_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        groups = {g: [] for g in GROUPS}
        for name, p in self.named_parameters():
            prefix = name.split(".", 1)[0]
            group = {"backbone": "backbone", "classifiers": "classification",
                     "verifiers": "verification"}[prefix]
            groups[group].append((name, p))
        return groups

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """Test-time SIR feature y, dropout off."""
        return forward_features(self.backbone, x)

    def forward(self, x, pairs=None, rng: torch.Generator | None = None, dropout: bool = True):
        y, taps = self.backbone(x)
        feats = [y] + taps[: len(self.head_names) - 1]
        heads, cmasks, vmasks = [], [], []
        for name, feat, clf, ver in zip(self.head_names, feats, self.classifiers, self.verifiers):
            if dropout:
                masked = apply_dropout(self.cls_dropout, feat, rng=rng)
                cmasks.append(self.cls_dropout.last_masks)
            else:
                masked = feat
            class_logits = clf(masked)
            verif_logits = None
            if pairs is not None and len(pairs):
                if dropout:
                    a, b = apply_dropout(self.ver_dropout, feat, pairs, rng=rng)
                    vmasks.append(self.ver_dropout.last_masks)
                else:
                    idx = torch.as_tensor(np.asarray(pairs), dtype=torch.long)
                    a, b = feat[idx[:, 0]], feat[idx[:, 1]]
                verif_logits = ver(a, b)
            heads.append(HeadOutput(name, class_logits, verif_logits))
        return ModelOutputs(heads, y, cmasks, vmasks)

    def replace_classifier(self, num_classes: int, init_scale: float = 0.01, seed: int = 0) -> None:
        """Swap every classification head for a fresh ``num_classes``-way one.

        Weights ~ N(0, init_scale^2), biases zero.
        """
        gen = torch.Generator().manual_seed(seed)
        dtype = next(self.parameters()).dtype
        heads = []
        for old in self.classifiers:
            new = ClassificationSubnet(old.fc.in_features, num_classes).to(dtype)
            with torch.no_grad():
                new.fc.weight.copy_(torch.randn(new.fc.weight.shape, generator=gen, dtype=dtype) * init_scale)
                new.fc.bias.zero_()
            heads.append(new)
        self.classifiers = nn.ModuleList(heads)


def combined_loss(cfg: LossConfig, outputs: ModelOutputs, labels=None, pair_targets=None):
    """Weighted sum over heads of verification and classification cross-entropy.

    Returns (total, breakdown) where breakdown maps ``"<head>/<loss>"`` to the
    unweighted mean loss of that head.
    """
    total = None
    breakdown: dict[str, float] = {}
    for head in outputs.heads:
        terms = []
        if cfg.classification_weight > 0:
            if labels is None or head.class_logits is None:
                raise ValueError(f"head {head.name}: classification enabled but labels missing")
            ce = F.cross_entropy(head.class_logits, torch.as_tensor(labels, dtype=torch.long))
            breakdown[f"{head.name}/classification"] = float(ce.detach())
            terms.append(cfg.classification_weight * ce)
        if cfg.verification_weight > 0:
            if pair_targets is None or head.verif_logits is None:
                raise ValueError(f"head {head.name}: verification enabled but pairs missing")
            bce = F.cross_entropy(head.verif_logits, torch.as_tensor(pair_targets, dtype=torch.long))
            breakdown[f"{head.name}/verification"] = float(bce.detach())
            terms.append(cfg.verification_weight * bce)
        for t in terms:
            total = t if total is None else total + t
    return total, breakdown


def build_model(backbone: str = "toy", num_classes: int = 10, loss: LossConfig | None = None,
                keep_prob: float = 0.5, verif_hidden: int = 1024, seed: int = 0,
                backbone_kwargs: dict | None = None) -> ReIDNet:
    """Construct a ReIDNet with parameters drawn from ``seed``."""
    kwargs = dict(backbone_kwargs or {})
    loss = loss or LossConfig()
    if loss.num_aux_heads and "num_taps" not in kwargs:
        kwargs["num_taps"] = loss.num_aux_heads
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        bb = BACKBONES[backbone](**kwargs)
        return ReIDNet(bb, num_classes, loss, keep_prob=keep_prob, verif_hidden=verif_hidden)


def parameter_hash(model: nn.Module, groups: list[str] | None = None) -> str:
    """SHA-256 over parameter bytes, optionally restricted to named groups."""
    h = hashlib.sha256()
    if groups is None:
        items = list(model.named_parameters())
    else:
        pg = model.param_groups()
        items = [item for g in groups for item in pg[g]]
    for name, p in items:
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model: ReIDNet, path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    groups = {g: {n: state[n] for n, _ in items} for g, items in model.param_groups().items()}
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "backbone": model.backbone.identifier,
        "backbone_config": model.backbone.config(),
        "D": model.feature_dim,
        "N": model.num_classes,
        "keep_prob": model.keep_prob,
        "verif_hidden": model.verif_hidden,
        "loss_config": asdict(model.loss_config),
        "dtype": str(next(model.parameters()).dtype),
        "groups": groups,
        "meta": meta or {},
    }
    # serialise through a buffer so the archive's internal name, and hence the bytes, do not depend on the path
    buf = io.BytesIO()
    torch.save(payload, buf)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path) -> tuple[ReIDNet, dict]:
    """Rebuild a model from a checkpoint. Fails on format, version or shape mismatch."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {payload.get('version')}, "
                              f"this build reads version {CHECKPOINT_VERSION}")
    if payload["backbone"] not in BACKBONES:
        raise CheckpointError(f"{path}: unknown backbone {payload['backbone']!r}")
    bb_cfg = dict(payload["backbone_config"])
    if payload["backbone"] == "toy":
        bb_cfg["image_size"] = tuple(bb_cfg["image_size"])
    bb = BACKBONES[payload["backbone"]](**bb_cfg)
    model = ReIDNet(bb, payload["N"], LossConfig(**payload["loss_config"]),
                    keep_prob=payload["keep_prob"], verif_hidden=payload["verif_hidden"])
    if payload["dtype"] == "torch.float64":
        model = model.double()
    if model.feature_dim != payload["D"]:
        raise CheckpointError(f"{path}: D={payload['D']} but backbone builds D={model.feature_dim}")
    state = {}
    for g in payload["groups"].values():
        state.update(g)
    expected = model.state_dict()
    for name, t in expected.items():
        if name not in state:
            raise CheckpointError(f"{path}: missing parameter {name}")
        if tuple(state[name].shape) != tuple(t.shape):
            raise CheckpointError(f"{path}: {name} has shape {tuple(state[name].shape)}, "
                                  f"model expects {tuple(t.shape)}")
    extra = set(state) - set(expected)
    if extra:
        raise CheckpointError(f"{path}: unexpected parameters {sorted(extra)}")
    model.load_state_dict(state)
    return model, payload["meta"]
