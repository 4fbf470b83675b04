"""End-to-end acceptance checks, one test per criterion.

Each test prints a ``criterion N: PASS|FAIL`` line and the lines are repeated
in the terminal summary.  Criterion 8 trains three desk-scale models and takes
roughly a quarter of an hour on one CPU core.
"""
import math
import time

import numpy as np
import pytest
import torch

from fewshot_ssl import trainer
from fewshot_ssl.data import LabeledImage, degrade_low_resolution, make_rotation, sample_episode, split_classes, to_greyscale, to_tensor
from fewshot_ssl.evaluator import EvalReport, confidence_interval, load_saliency_png, saliency, save_saliency_png
from fewshot_ssl.experiments import run_desk_experiment
from fewshot_ssl.model import BackboneConfig, ModelBundle, running_stat_buffers
from fewshot_ssl.objectives import combine, jigsaw_loss, prototype_loss, rotation_loss
from fewshot_ssl.permset import generate_permutation_set, hamming, set_statistics
from fewshot_ssl.seeding import substream, torch_seed
from fewshot_ssl.synthetic import synthetic_images

from _oracles import central_difference_errors, greedy_permutations_bruteforce
from conftest import ACCEPTANCE_LINES


def record(label, ok, detail):
    line = f"criterion {label}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def test_criterion_1_permutation_set():
    t0 = time.perf_counter()
    ps = generate_permutation_set(9, 35)
    seconds = time.perf_counter() - t0
    valid = all(sorted(p) == list(range(9)) for p in ps.perms) and len(set(ps.perms)) == 35 and len(ps) == 35
    recomputed = min(hamming(a, b) for i, a in enumerate(ps.perms) for b in ps.perms[i + 1:])
    oracle_ok = all(
        list(generate_permutation_set(n, c).perms) == greedy_permutations_bruteforce(n, c)
        for n in (2, 3, 4) for c in range(1, math.factorial(n) + 1)
    )
    ok = valid and recomputed == ps.min_hamming == set_statistics(ps.perms)[0] and oracle_ok and seconds < 30
    record("1", ok, f"35 valid={valid}, min_hamming={ps.min_hamming} (recomputed {recomputed}), "
                    f"n<=4 oracle match={oracle_ok}, {seconds:.2f}s")


def test_criterion_2_prototype_loss_oracle():
    t = lambda x: torch.tensor(x, dtype=torch.float64)  # noqa: E731
    loss, _, logits = prototype_loss(t([[0, 0], [0, 2], [4, 0], [4, 2]]), [0, 0, 1, 1], t([[1, 1]]), [0])
    logits_ok = torch.allclose(logits, t([[-1.0, -9.0]]), rtol=0, atol=1e-12)
    ok = logits_ok and abs(loss.item() - 3.355e-4) < 1e-6
    record("2", ok, f"logits={logits.tolist()[0]}, loss={loss.item():.6e}")


def test_criterion_3_gradient_check():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    model = ModelBundle(BackboneConfig("small_conv", 16, width=4), jigsaw_classes=35, rotation=True).double()
    model.set_mode("eval")
    g = torch.Generator().manual_seed(1)
    x = torch.rand(6, 3, 32, 32, generator=g, dtype=torch.float64)
    tiles = torch.rand(2, 9, 3, 32, 32, generator=g, dtype=torch.float64)
    labels = np.array([0, 0, 0, 1, 1, 1])
    s_idx, q_idx = [0, 1, 3, 4], [2, 5]

    def loss_fn():
        emb = model.embed(x)
        sup = prototype_loss(emb[s_idx], labels[s_idx], emb[q_idx], labels[q_idx])[0]
        ssl = jigsaw_loss(model.jigsaw_forward(tiles), [4, 30])[0] + rotation_loss(model.rotation_forward(x), [0, 1, 2, 3, 2, 1])[0]
        return combine(sup, ssl)

    # eps=1e-5: at 1e-6 round-off in the O(1) loss swamps gradients near 1e-5 in magnitude
    errors = central_difference_errors(loss_fn, list(model.parameters()), 120, np.random.default_rng(0), eps=1e-5)
    seconds = time.perf_counter() - t0
    ok = len(errors) >= 100 and errors.max() < 1e-5 and seconds < 300
    record("3", ok, f"{len(errors)} params, max relative error {errors.max():.2e}, {seconds:.1f}s")


def test_criterion_4_episode_sampler():
    rng = np.random.default_rng(0)
    images = [LabeledImage(np.zeros((1, 1, 3), np.float32), c, f"{c}/{i}") for c in range(12) for i in range(25)]
    violations = 0
    for _ in range(1000):
        ep = sample_episode(images, 5, 5, 16, rng)
        classes = {im.class_id for im in ep.support}
        s_ids = [im.source_path for im in ep.support]
        q_ids = [im.source_path for im in ep.query]
        checks = [
            len(classes) == 5 and {im.class_id for im in ep.query} == classes,
            all(sum(im.class_id == c for im in ep.support) == 5 for c in classes),
            all(sum(im.class_id == c for im in ep.query) == 16 for c in classes),
            len(set(s_ids)) == 25 and len(set(q_ids)) == 80 and not set(s_ids) & set(q_ids),
            sorted(set(ep.support_labels())) == list(range(5)),
        ]
        violations += not all(checks)
    record("4", violations == 0, f"{violations} violations in 1000 episodes (5-way 5-shot 16-query)")


def test_criterion_5_confidence_interval():
    mean, ci, _ = confidence_interval([0.5, 1.0])
    ones = EvalReport.from_accuracies([1.0] * 600)
    ok = (abs(mean - 75.0) <= 1e-9 * 75 and abs(ci - 49.0) <= 1e-9 * 49
          and ones.mean_accuracy == 100.0 and ones.ci95 == 0.0
          and EvalReport.from_accuracies([0.5, 1.0]).formatted() == "75.00 ± 49.00")
    record("5", ok, f"{{0.5, 1.0}} -> {mean:.2f} ± {ci:.2f}; all ones -> {ones.formatted()}")


def test_criterion_6_bn_policy(tiny_images):
    cfg = trainer.TrainConfig(
        ssl_task="jigsaw", n_way=2, k_shot=2, m_query=2, episodes=3, width=4, embed_dim=8, image_size=32,
        val_episodes=2, val_n_way=2, val_k_shot=2, val_m_query=2,
    )
    initial = running_stat_buffers(trainer.build_model(cfg, n_permutations=35))
    result = trainer.train(cfg, tiny_images, split_classes(range(6), (1, 1, 1)), generate_permutation_set(9, 35))
    final = running_stat_buffers(result.model)
    unchanged = initial.keys() == final.keys() and all(torch.equal(initial[k], final[k]) for k in initial)
    try:
        trainer.TrainConfig(ssl_task="jigsaw", bn_policy="running_stats")
        rejected = False
    except trainer.ConfigError:
        rejected = True
    record("6", unchanged and rejected,
           f"{len(final)} running-stat buffers after jigsaw training, unchanged={unchanged}; "
           f"running_stats+jigsaw rejected={rejected}")


def _reference_supervised_loop(cfg, images, split):
    """Plain episodic ProtoNet loop written against the building blocks only."""
    torch.manual_seed(torch_seed(cfg.seed, "init"))
    model = ModelBundle(BackboneConfig(cfg.backbone, cfg.embed_dim, cfg.bn_policy, cfg.width))
    torch.manual_seed(torch_seed(cfg.seed, "dropout"))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    rng = substream(cfg.seed, "episode")
    base = [im for im in images if im.class_id in split.base]
    losses = []
    for _ in range(cfg.episodes):
        ep = sample_episode(base, cfg.n_way, cfg.k_shot, cfg.m_query, rng)
        model.train()
        emb = model.backbone(to_tensor([im.image for im in ep.support + ep.query]))
        n = len(ep.support)
        loss = prototype_loss(emb[:n], ep.support_labels(), emb[n:], ep.query_labels(), cfg.n_way)[0]
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return losses, model.state_dict()


def test_criterion_7_ablation_identity(tiny_images):
    split = split_classes(range(6), (1, 1, 1))
    cfg = trainer.TrainConfig(
        n_way=2, k_shot=2, m_query=2, episodes=100, width=4, embed_dim=8, image_size=32, val_every=10_000,
        val_episodes=2, val_n_way=2, val_k_shot=2, val_m_query=2,
    )
    result = trainer.train(cfg, tiny_images, split)
    ref_losses, ref_state = _reference_supervised_loop(cfg, tiny_images, split)
    got_losses = [r["loss_sup"] for r in result.history]
    state = result.model.state_dict()
    same_loss = got_losses == ref_losses
    same_params = state.keys() == ref_state.keys() and all(torch.equal(state[k], ref_state[k]) for k in state)
    record("7", same_loss and same_params,
           f"100-step losses identical={same_loss}, final parameters bit-identical={same_params}")


# -- criterion 8: desk-scale experiment ------------------------------------


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    torch.set_num_threads(1)
    t0 = time.perf_counter()
    summary = run_desk_experiment(tmp_path_factory.mktemp("desk"), episodes=2000, test_episodes=600, seed=0)
    summary["seconds"] = time.perf_counter() - t0
    print(f"desk experiment: {summary['seconds'] / 60:.1f} min")
    return summary


@pytest.mark.slow
def test_criterion_8a_jigsaw_accuracy(desk):
    acc = desk["runs"]["jigsaw"]["ssl_accuracy"]
    record("8a", acc > 3 / 35, f"jigsaw accuracy over the last 100 steps {100 * acc:.1f}% (> {300 / 35:.1f}%)")


@pytest.mark.slow
def test_criterion_8b_rotation_accuracy(desk):
    acc = desk["runs"]["rotation"]["ssl_accuracy"]
    record("8b", acc > 0.5, f"rotation accuracy over the last 100 steps {100 * acc:.1f}% (> 50%)")


@pytest.mark.slow
def test_criterion_8c_report_shape(desk):
    reports = desk["reports"]
    shaped = all(
        r.n_episodes == 600 and len(r.per_episode_accuracies) == 600 and (r.n_way, r.k_shot) == (5, 5)
        and " ± " in r.formatted() and r.ci95 > 0
        for r in reports.values()
    )
    rows = "; ".join(f"{name} {r.formatted()}" for name, r in reports.items())
    record("8c", shaped and set(reports) == {"random_init", "none", "jigsaw", "rotation"}, rows)


@pytest.mark.slow
def test_criterion_8d_baseline_beats_random_init(desk):
    gap = desk["meta_test"]["none"]["mean"] - desk["meta_test"]["random_init"]["mean"]
    record("8d", gap >= 20, f"trained baseline - random init = {gap:.2f} points (>= 20); "
                            f"total desk run {desk['seconds'] / 60:.1f} min")


# -- criteria 9 and 10 ---------------------------------------------------------


def test_criterion_9_degradations():
    image = synthetic_images(n_classes=1, per_class=1, size=64)[0].image
    grey = to_greyscale(image)
    grey_ok = grey.shape == image.shape and np.array_equal(grey[..., 0], grey[..., 1]) and np.array_equal(grey[..., 1], grey[..., 2])
    low = degrade_low_resolution(image, 4)
    const = np.full((64, 48, 3), 0.375, np.float32)
    low_const = degrade_low_resolution(const, 4)
    low_ok = low.shape == image.shape and low_const.shape == const.shape and np.allclose(low_const, const, rtol=0, atol=1e-6)
    twice = make_rotation(make_rotation(image, 2).image, 2).image
    rot_ok = np.array_equal(twice, image)
    record("9", grey_ok and low_ok and rot_ok,
           f"greyscale channels equal={grey_ok}, lowres shape/constant preserved={low_ok}, 180+180 identity={rot_ok}")


def test_criterion_10_saliency(tmp_path):
    rng = np.random.default_rng(0)
    c, h, w = 3, 8, 10
    weight = torch.tensor(rng.normal(size=(5, c * h * w)))

    def linear(x):
        return x.flatten(1) @ weight.T

    smap = saliency(linear, rng.random((h, w, c)), true_class=3)
    expected = np.linalg.norm(weight[3].numpy().reshape(c, h, w), axis=0)
    expected = (expected - expected.min()) / (expected.max() - expected.min())
    err = np.abs(smap.values - expected).max()
    in_range = smap.values.shape == (h, w) and smap.values.min() >= 0 and smap.values.max() <= 1
    loaded = load_saliency_png(save_saliency_png(smap, tmp_path / "s.png"))
    png_ok = loaded.shape == (h, w) and np.abs(loaded - smap.values).max() <= 0.5 / 255 + 1e-12
    record("10", err < 1e-6 and in_range and png_ok,
           f"max error vs analytic |w| {err:.1e}, in [0,1] with shape {smap.values.shape}={in_range}, png round-trip={png_ok}")
