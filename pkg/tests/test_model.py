import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from reidtl.model import (
    CheckpointError,
    DropoutUnit,
    HeadOutput,
    LossConfig,
    ModelOutputs,
    ShapeError,
    ToyBackbone,
    VerificationSubnet,
    apply_dropout,
    build_model,
    combined_loss,
    load_checkpoint,
    parameter_hash,
    save_checkpoint,
)


def _images(n, seed=0, dtype=torch.float32):
    return torch.rand((n, 3, 16, 8), generator=torch.Generator().manual_seed(seed), dtype=dtype)


def test_toy_backbone_shape_and_size():
    bb = ToyBackbone()
    y, taps = bb(_images(5))
    assert y.shape == (5, 32)
    assert taps == []
    assert sum(p.numel() for p in bb.parameters()) < 5000


def test_backbone_rejects_wrong_input():
    with pytest.raises(ShapeError):
        ToyBackbone()(torch.zeros(2, 3, 8, 8))


def test_weight_sharing_is_identity():
    model = build_model(num_classes=4, verif_hidden=8)
    x = _images(4)
    a = model.embed(x[:2])
    b = model.embed(x[2:])
    both = model.embed(x)
    assert torch.equal(torch.cat([a, b]), both)
    assert len({id(m) for m in [model.backbone]}) == 1


@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 1000))
def test_pairwise_dropout_identical_masks(n_pairs, d, seed):
    unit = DropoutUnit(0.5, "verification_pairwise_consistent")
    y = torch.rand((4, d), dtype=torch.float64) + 0.5
    pairs = np.random.default_rng(seed).integers(0, 4, size=(n_pairs, 2))
    a, b = apply_dropout(unit, y, pairs, torch.Generator().manual_seed(seed))
    ra = a / y[pairs[:, 0]]
    rb = b / y[pairs[:, 1]]
    assert torch.equal(ra, rb)
    assert set(ra.unique().tolist()) <= {0.0, 1.0}


def test_dropout_is_unscaled():
    unit = DropoutUnit(0.5)
    y = torch.full((200, 50), 2.0)
    out = apply_dropout(unit, y, rng=torch.Generator().manual_seed(0))
    assert set(out.unique().tolist()) == {0.0, 2.0}
    assert abs(float((out > 0).double().mean()) - 0.5) < 0.02


def test_keep_probability_one_is_identity():
    y = torch.rand(3, 4)
    assert torch.equal(apply_dropout(DropoutUnit(1.0), y), y)


@pytest.mark.parametrize("p", [0.0, 1.5, -0.1])
def test_bad_keep_probability(p):
    with pytest.raises(ValueError):
        DropoutUnit(p)


def test_test_time_embedding_ignores_dropout():
    model = build_model(num_classes=3, verif_hidden=8)
    model.train()
    x = _images(3)
    assert torch.equal(model.embed(x), model.embed(x))


def test_verification_subnet_shape_mismatch():
    sub = VerificationSubnet(8, 4)
    with pytest.raises(ShapeError):
        sub(torch.zeros(2, 8), torch.zeros(2, 6))


def test_verification_subnet_is_asymmetric_through_relu():
    sub = VerificationSubnet(3, 4).double()
    yi = torch.tensor([[1.0, 0.0, 2.0]], dtype=torch.float64)
    yj = torch.tensor([[0.0, 1.0, 0.0]], dtype=torch.float64)
    expected = sub.head(sub.fc(torch.tensor([[1.0, 0.0, 2.0]], dtype=torch.float64)))
    assert torch.allclose(sub(yi, yj), expected)


def test_combined_loss_hand_computed():
    # two heads, three samples, two pairs
    c1 = torch.tensor([[2.0, 0.0], [0.0, 1.0], [1.0, 1.0]], dtype=torch.float64)
    c2 = torch.tensor([[0.5, 0.0], [0.0, 0.0], [3.0, 0.0]], dtype=torch.float64)
    v1 = torch.tensor([[0.0, 1.0], [2.0, 0.0]], dtype=torch.float64)
    v2 = torch.tensor([[1.0, 1.0], [0.0, 3.0]], dtype=torch.float64)
    labels = [0, 1, 1]
    targets = [1, 0]

    def ce(row, k):
        return -row[k] + math.log(sum(math.exp(v) for v in row))

    def mean_ce(logits, ys):
        return sum(ce(r.tolist(), y) for r, y in zip(logits, ys)) / len(ys)

    expected = sum(3 * mean_ce(v, targets) + mean_ce(c, labels) for c, v in ((c1, v1), (c2, v2)))
    out = ModelOutputs([HeadOutput("main", c1, v1), HeadOutput("aux1", c2, v2)], torch.zeros(3, 1))
    total, parts = combined_loss(LossConfig(3.0, 1.0, 2), out, labels, targets)
    assert abs(float(total) - expected) < 1e-12
    assert set(parts) == {"main/classification", "main/verification", "aux1/classification", "aux1/verification"}


def test_single_loss_variants_skip_disabled_terms():
    c = torch.zeros(2, 3)
    out = ModelOutputs([HeadOutput("main", c, None)], torch.zeros(2, 1))
    total, parts = combined_loss(LossConfig(0.0, 1.0), out, [0, 1])
    assert abs(float(total) - math.log(3)) < 1e-6
    assert list(parts) == ["main/classification"]


def test_aux_heads_give_six_losses():
    model = build_model(num_classes=5, loss=LossConfig(num_aux_heads=2), verif_hidden=4)
    x = _images(4)
    out = model(x, pairs=[(0, 1), (2, 3)], rng=torch.Generator().manual_seed(0))
    _, parts = combined_loss(model.loss_config, out, [0, 0, 1, 1], [1, 1])
    assert len(parts) == 6


def test_too_many_aux_heads_rejected():
    from reidtl.model import ReIDNet

    with pytest.raises(ShapeError, match="auxiliary"):
        ReIDNet(ToyBackbone(num_taps=1), 3, LossConfig(num_aux_heads=2))


def _loss_fn(model, x, labels, pairs, targets, seed):
    def fn():
        out = model(x, pairs=pairs, rng=torch.Generator().manual_seed(seed))
        return combined_loss(model.loss_config, out, labels, targets)[0]
    return fn


class ActivationPattern:
    """Records every kink the forward pass goes through: ReLU signs, max-pool winners and the
    sign of y_i - y_j at each verification head. Equal patterns mean the same smooth piece."""

    def __init__(self, model):
        self.current = []
        bb = model.backbone
        self.hooks = [bb.relu1.register_forward_hook(self._relu), bb.relu2.register_forward_hook(self._relu)]
        self.hooks += [v.register_forward_pre_hook(self._verif) for v in model.verifiers]

    def _relu(self, module, args, out):
        self.current.append(args[0] > 0)
        self.current.append(torch.nn.functional.max_pool2d(out, 2, return_indices=True)[1])

    def _verif(self, module, args):
        self.current.append(args[0] > args[1])

    def capture(self, fn):
        self.current = []
        value = fn()
        return value, [t.detach().clone() for t in self.current]

    def remove(self):
        for h in self.hooks:
            h.remove()


def _same(a, b):
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def smooth_central_difference(fn, pattern, x, idx, steps=(1e-4, 1e-5, 1e-6)):
    """Central difference with the largest step that stays on one smooth piece of the loss."""
    _, base = pattern.capture(fn)
    old = x[idx].item()
    for h in steps:
        x[idx] = old + h
        up, p_up = pattern.capture(fn)
        x[idx] = old - h
        down, p_down = pattern.capture(fn)
        x[idx] = old
        if _same(base, p_up) and _same(base, p_down):
            break
    return (float(up) - float(down)) / (2 * h)


def gradient_check(num_coords=100, seed=0):
    """Max relative error between autograd and central differences over random coordinates."""
    model = build_model(num_classes=4, loss=LossConfig(3.0, 1.0, 2), verif_hidden=16, seed=seed,
                        backbone_kwargs={"num_taps": 2}).double()
    x = _images(6, seed, torch.float64)
    labels = torch.tensor([0, 0, 1, 1, 2, 3])
    pairs = np.array([(0, 1), (1, 0), (2, 3), (0, 2), (4, 5), (3, 1)])
    targets = torch.tensor([1, 1, 1, 0, 0, 0])
    fn = _loss_fn(model, x, labels, pairs, targets, seed)
    model.zero_grad()
    fn().backward()
    params = list(model.parameters())
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    pattern = ActivationPattern(model)
    worst = 0.0
    with torch.no_grad():
        for _ in range(num_coords):
            k = rng.choice(len(params), p=sizes / sizes.sum())
            p = params[k]
            idx = tuple(int(rng.integers(s)) for s in p.shape)
            analytic = float(p.grad[idx])
            numeric = smooth_central_difference(fn, pattern, p.data, idx)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
            worst = max(worst, rel)
    pattern.remove()
    return worst


def test_gradient_matches_finite_differences():
    assert gradient_check(num_coords=30, seed=1) < 1e-4


def test_replace_classifier():
    model = build_model(num_classes=5, verif_hidden=4)
    before = parameter_hash(model, ["backbone", "verification"])
    model.replace_classifier(9, init_scale=0.01, seed=3)
    assert model.num_classes == 9
    assert parameter_hash(model, ["backbone", "verification"]) == before
    w = model.classifiers[0].fc.weight
    assert float(model.classifiers[0].fc.bias.detach().abs().max()) == 0.0
    assert 0.005 < float(w.detach().std()) < 0.015


def test_build_model_deterministic():
    assert parameter_hash(build_model(seed=4)) == parameter_hash(build_model(seed=4))
    assert parameter_hash(build_model(seed=4)) != parameter_hash(build_model(seed=5))


def test_checkpoint_round_trip(tmp_path):
    model = build_model(num_classes=6, loss=LossConfig(2.0, 1.0), verif_hidden=8, seed=2)
    save_checkpoint(model, tmp_path / "a.pt", {"iteration": 7})
    loaded, meta = load_checkpoint(tmp_path / "a.pt")
    assert meta == {"iteration": 7}
    assert parameter_hash(loaded) == parameter_hash(model)
    assert loaded.loss_config == model.loss_config
    x = _images(2)
    assert torch.equal(loaded.embed(x), model.embed(x))


def test_checkpoint_bytes_deterministic(tmp_path):
    save_checkpoint(build_model(seed=1), tmp_path / "a.pt")
    save_checkpoint(build_model(seed=1), tmp_path / "b.pt")
    assert (tmp_path / "a.pt").read_bytes() == (tmp_path / "b.pt").read_bytes()


def test_checkpoint_version_mismatch(tmp_path):
    path = save_checkpoint(build_model(), tmp_path / "a.pt")
    payload = torch.load(path, weights_only=False)
    payload["version"] = 99
    torch.save(payload, path)
    with pytest.raises(CheckpointError, match="version 99"):
        load_checkpoint(path)


def test_checkpoint_shape_mismatch(tmp_path):
    path = save_checkpoint(build_model(num_classes=4), tmp_path / "a.pt")
    payload = torch.load(path, weights_only=False)
    payload["N"] = 5
    torch.save(payload, path)
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(path)


def test_checkpoint_not_a_checkpoint(tmp_path):
    torch.save({"hello": 1}, tmp_path / "x.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.pt")
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "missing.pt")


def test_layer_responses():
    bb = ToyBackbone()
    r = bb.responses("relu1", _images(2))
    assert r.shape == (2, 6, 16, 8)
    with pytest.raises(KeyError, match="unknown layer"):
        bb.responses("conv9", _images(1))


def test_zero_image_gives_bias_row():
    model = build_model(num_classes=2, seed=4)
    bb = model.backbone
    with torch.no_grad():
        bb.conv1.bias.zero_()
        bb.conv2.bias.zero_()
    y = model.embed(torch.zeros(3, 3, 16, 8))
    assert torch.equal(y, bb.fc.bias.detach().expand(3, -1))


@pytest.mark.parametrize("seed", range(5))
def test_verification_loss_gradient_wrt_masked_features(seed):
    gen = torch.Generator().manual_seed(seed)
    subnet = VerificationSubnet(8, hidden=6).double()
    yi = torch.randn(1, 8, generator=gen, dtype=torch.float64, requires_grad=True)
    yj = torch.randn(1, 8, generator=gen, dtype=torch.float64)
    target = torch.tensor([seed % 2])

    def loss():
        return torch.nn.functional.cross_entropy(subnet(yi, yj), target)

    loss().backward()
    with torch.no_grad():
        for c in range(8):
            # steer clear of the ReLU kink at yi == yj
            h = min(1e-5, abs(float(yi[0, c] - yj[0, c])) / 4)
            old = float(yi[0, c])
            yi[0, c] = old + h
            up = float(loss())
            yi[0, c] = old - h
            down = float(loss())
            yi[0, c] = old
            numeric = (up - down) / (2 * h)
            analytic = float(yi.grad[0, c])
            assert abs(analytic - numeric) <= 1e-4 * max(abs(analytic), abs(numeric), 1e-6)
