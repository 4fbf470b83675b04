import numpy as np
import pytest
import torch

from fewshot_ssl.model import (
    BackboneConfig,
    ModelBundle,
    ModelConfigError,
    jigsaw_hidden_dim,
    running_stat_buffers,
)
from fewshot_ssl.objectives import combine, cross_entropy, jigsaw_loss, prototype_loss, rotation_loss

from _oracles import central_difference_errors

SMALL = BackboneConfig("small_conv", embed_dim=16, width=4)


def _bundle(cfg=SMALL, seed=0, **heads):
    torch.manual_seed(seed)
    return ModelBundle(cfg, **heads)


def _batch(b, size=32, seed=0, dtype=torch.float32):
    return torch.rand(b, 3, size, size, generator=torch.Generator().manual_seed(seed), dtype=dtype)


def test_embed_shape():
    model = _bundle()
    for b in (1, 3, 7):
        assert model.embed(_batch(b), "train").shape == (b, 16)
    assert model.embed(_batch(5, size=64), "eval").shape == (5, 16)


def test_duplicated_input_gives_identical_rows():
    model = _bundle()
    x = _batch(1)
    out = model.embed(torch.cat([x, x]), "eval")
    torch.testing.assert_close(out[0], out[1], rtol=0, atol=0)


def test_running_stats_eval_independent_of_batch():
    cfg = BackboneConfig("small_conv", 16, "running_stats", 4)
    model = _bundle(cfg)
    with torch.no_grad():
        model.embed(_batch(16, seed=1), "train")  # accumulate some statistics
        model.set_mode("eval")
        x = _batch(6, seed=2)
        together = model.embed(x)
        alone = torch.cat([model.embed(x[i:i + 1]) for i in range(6)])
    torch.testing.assert_close(together, alone, rtol=1e-5, atol=1e-6)


def test_per_batch_policy_has_no_running_buffers():
    model = _bundle(jigsaw_classes=35)
    assert running_stat_buffers(model) == {}
    bns = [m for m in model.modules() if isinstance(m, torch.nn.BatchNorm2d)]
    assert bns and all(not m.track_running_stats for m in bns)


def test_resnet_jigsaw_head_dimensions():
    model = ModelBundle(BackboneConfig("paper_resnet18", 512), jigsaw_classes=35, rotation=True)
    first, _, last = model.jigsaw_head
    assert (first.in_features, first.out_features) == (4608, 4096)
    assert (last.in_features, last.out_features) == (4096, 35)
    widths = [(m.in_features, m.out_features) for m in model.rotation_head if isinstance(m, torch.nn.Linear)]
    assert widths == [(512, 128), (128, 128), (128, 4)]
    assert (model.projection[0].in_features, model.projection[0].out_features) == (512, 512)
    with torch.no_grad():
        assert model.jigsaw_forward(torch.rand(1, 9, 3, 64, 64), "eval").shape == (1, 35)


def test_resnet_requires_512():
    with pytest.raises(ModelConfigError):
        BackboneConfig("paper_resnet18", 64)


def test_small_jigsaw_hidden():
    assert jigsaw_hidden_dim(64) == 512
    assert jigsaw_hidden_dim(512) == 4096


def test_jigsaw_logits_shape_and_batch_equivariance():
    model = _bundle(jigsaw_classes=35)
    tiles = torch.rand(4, 9, 3, 32, 32, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        logits = model.jigsaw_forward(tiles, "eval")
        perm = torch.tensor([2, 0, 3, 1])
        permuted = model.jigsaw_forward(tiles[perm], "eval")
    assert logits.shape == (4, 35) and torch.isfinite(logits).all()
    torch.testing.assert_close(permuted, logits[perm], rtol=1e-5, atol=1e-6)


def test_jigsaw_needs_nine_tiles():
    model = _bundle(jigsaw_classes=35)
    with pytest.raises(ValueError):
        model.jigsaw_forward(torch.rand(2, 8, 3, 32, 32))


def test_rotation_dropout_modes():
    model = _bundle(rotation=True)
    x = _batch(4)
    with torch.no_grad():
        a = model.rotation_forward(x, "eval")
        b = model.rotation_forward(x, "eval")
        assert a.shape == (4, 4)
        torch.testing.assert_close(a, b, rtol=0, atol=0)
        torch.manual_seed(1)
        c = model.rotation_forward(x, "train")
        torch.manual_seed(2)
        d = model.rotation_forward(x, "train")
    assert not torch.equal(c, d)


def test_supervised_head():
    model = _bundle(num_classes=7)
    assert model.supervised_forward(_batch(3), "eval").shape == (3, 7)
    with torch.no_grad():
        model.supervised_head.weight.zero_()
        model.supervised_head.bias.zero_()
        logits = model.supervised_forward(_batch(3), "eval")
    assert (logits == 0).all()
    probs = torch.softmax(logits, 1)
    torch.testing.assert_close(probs, torch.full_like(probs, 1 / 7))


def test_supervised_head_absent_in_episodic_config():
    with pytest.raises(ModelConfigError):
        _bundle().supervised_forward(_batch(2))


def test_only_requested_heads_exist():
    model = _bundle(rotation=True)
    assert model.jigsaw_head is None and model.supervised_head is None
    assert model.rotation_head is not None and model.projection is not None
    assert _bundle().projection is None


def test_ssl_step_moves_shared_embedding():
    model = _bundle(jigsaw_classes=35)
    probe = _batch(2, seed=5)
    before = model.embed(probe, "eval").detach().clone()
    tiles = torch.rand(3, 9, 3, 32, 32, generator=torch.Generator().manual_seed(3))
    opt = torch.optim.SGD(model.parameters(), lr=0.1)
    loss, _ = jigsaw_loss(model.jigsaw_forward(tiles, "train"), [0, 5, 9])
    opt.zero_grad()
    loss.backward()
    assert sum(p.grad.abs().sum() for p in model.backbone.parameters()) > 0
    opt.step()
    after = model.embed(probe, "eval").detach()
    assert not torch.allclose(before, after)


@pytest.mark.parametrize("task", ["jigsaw", "rotation"])
def test_finite_difference_per_head(task):
    model = _bundle(jigsaw_classes=35 if task == "jigsaw" else None, rotation=task == "rotation").double()
    model.set_mode("eval")
    x = _batch(6, dtype=torch.float64)
    labels = np.array([0, 0, 0, 1, 1, 1])
    tiles = torch.rand(2, 9, 3, 32, 32, generator=torch.Generator().manual_seed(9), dtype=torch.float64)

    def loss_fn():
        emb = model.embed(x)
        sup = prototype_loss(emb[[0, 1, 3, 4]], labels[[0, 1, 3, 4]], emb[[2, 5]], labels[[2, 5]])[0]
        if task == "jigsaw":
            ssl = jigsaw_loss(model.jigsaw_forward(tiles), [3, 17])[0]
        else:
            ssl = rotation_loss(model.rotation_forward(x), [0, 1, 2, 3, 0, 1])[0]
        return combine(sup, ssl)

    errors = central_difference_errors(loss_fn, list(model.parameters()), 40, np.random.default_rng(0))
    assert errors.max() < 1e-5


def test_supervised_head_gradient():
    model = _bundle(num_classes=3).double()
    model.set_mode("eval")
    x = _batch(4, dtype=torch.float64)
    errors = central_difference_errors(
        lambda: cross_entropy(model.supervised_forward(x), [0, 1, 2, 0]),
        list(model.parameters()), 30, np.random.default_rng(1),
    )
    assert errors.max() < 1e-5
