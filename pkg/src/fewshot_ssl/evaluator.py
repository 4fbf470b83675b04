"""Meta-test protocol, standard test accuracy and saliency maps."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from PIL import Image

from .data import Episode, group_by_class, sample_episode, to_tensor
from .model import ModelBundle
from .objectives import accuracy, prototype_logits, prototypes
from .seeding import substream

Z_95 = 1.96


def confidence_interval(accuracies: Sequence[float]) -> tuple[float, float, float]:
    """Mean (%), 95% half-width (%) with the sample std, and the population-std half-width (%)."""
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.size == 0:
        raise ValueError("no accuracies to aggregate")
    mean = 100.0 * acc.mean()
    if acc.size < 2:
        return mean, 0.0, 0.0
    root = math.sqrt(acc.size)
    return mean, 100.0 * Z_95 * acc.std(ddof=1) / root, 100.0 * Z_95 * acc.std(ddof=0) / root


@dataclass
class EvalReport:
    protocol: str
    per_episode_accuracies: list
    mean_accuracy: float
    ci95: float
    n_way: int | None = None
    k_shot: int | None = None
    m_query: int | None = None
    n_episodes: int | None = None
    ci95_population: float | None = None
    std_kind: str = "sample"
    seed: int | None = None
    config: dict = field(default_factory=dict)
    checkpoint_id: str | None = None

    @classmethod
    def from_accuracies(cls, accuracies, protocol: str = "meta_test", **kwargs) -> "EvalReport":
        mean, ci, ci_pop = confidence_interval(accuracies)
        return cls(
            protocol=protocol,
            per_episode_accuracies=[float(a) for a in accuracies],
            mean_accuracy=mean,
            ci95=ci,
            n_episodes=len(accuracies),
            ci95_population=ci_pop,
            **kwargs,
        )

    def formatted(self) -> str:
        if self.protocol == "standard":
            return f"{self.mean_accuracy:.1f}"
        return f"{self.mean_accuracy:.2f} ± {self.ci95:.2f}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["formatted"] = self.formatted()
        return d

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "EvalReport":
        raw = json.loads(Path(path).read_text())
        raw.pop("formatted", None)
        return cls(**raw)


@torch.no_grad()
def episode_accuracy(model: ModelBundle, episode: Episode) -> float:
    """Nearest-prototype accuracy on the episode's queries.

    The support set and the full query set are embedded as two separate
    batches, so under per-batch normalization every query sees statistics of
    the N*M query batch.
    """
    model.set_mode("eval")
    dtype = _dtype(model)
    support = model.embed(to_tensor([s.image for s in episode.support], dtype=dtype))
    query = model.embed(to_tensor([q.image for q in episode.query], dtype=dtype))
    protos = prototypes(support, episode.support_labels(), episode.n_way)
    return accuracy(prototype_logits(query, protos), episode.query_labels())


def _dtype(model) -> torch.dtype:
    return next(model.parameters()).dtype


def meta_test(
    model: ModelBundle,
    novel_images,
    n_way: int = 5,
    k_shot: int = 5,
    m_query: int = 16,
    n_episodes: int = 600,
    seed: int = 0,
    **report_kwargs,
) -> EvalReport:
    """Mean accuracy and 95% CI over ``n_episodes`` episodes drawn from the novel classes.

    Episode ``e`` uses the substream (seed, "episode", e), so the sequence is
    fixed by ``seed`` regardless of evaluation order.
    """
    groups = group_by_class(novel_images)
    accs = []
    for e in range(n_episodes):
        ep = sample_episode(groups, n_way, k_shot, m_query, substream(seed, "episode", e))
        accs.append(episode_accuracy(model, ep))
    return EvalReport.from_accuracies(
        accs, n_way=n_way, k_shot=k_shot, m_query=m_query, seed=seed, **report_kwargs
    )


@torch.no_grad()
def predict(model: ModelBundle, images, batch_size: int = 256) -> np.ndarray:
    model.set_mode("eval")
    preds = []
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        x = to_tensor([im.image for im in chunk], dtype=_dtype(model))
        preds.append(model.supervised_forward(x).argmax(dim=1).numpy())
    return np.concatenate(preds)


def test_standard(model: ModelBundle, test_images, batch_size: int = 256) -> float:
    """Per-image accuracy (%) of the supervised head."""
    if not test_images:
        raise ValueError("empty test set")
    n_classes = model.supervised_head.out_features if model.supervised_head is not None else 0
    labels = np.array([im.class_id for im in test_images])
    if labels.max() >= n_classes:
        raise ValueError(f"test label {labels.max()} outside the classifier's {n_classes} classes")
    return 100.0 * float((predict(model, test_images, batch_size) == labels).mean())


test_standard.__test__ = False  # not a pytest test


# -- saliency ---------------------------------------------------------------


@dataclass
class SaliencyMap:
    values: np.ndarray
    image_id: str = ""
    model_id: str = ""


def normalize_map(magnitude: np.ndarray) -> np.ndarray:
    """Per-image min-max scaling to [0, 1]; an all-zero map stays zero."""
    magnitude = np.asarray(magnitude, dtype=np.float64)
    hi, lo = magnitude.max(), magnitude.min()
    if hi == 0:
        return np.zeros_like(magnitude)
    if hi == lo:
        return magnitude / hi
    return (magnitude - lo) / (hi - lo)


def saliency(
    model: ModelBundle | Callable,
    image: np.ndarray,
    true_class: int,
    image_id: str = "",
    model_id: str = "",
) -> SaliencyMap:
    """Gradient magnitude of the true-class logit with respect to each input pixel.

    ``model`` is a ModelBundle with a supervised head, or any callable mapping
    an NCHW batch to class logits.  Channel gradients are combined with an L2
    norm per pixel.
    """
    if isinstance(model, ModelBundle):
        model.set_mode("eval")
        dtype = _dtype(model)
        logits_fn = model.supervised_forward
    else:
        logits_fn = model
        params = list(getattr(model, "parameters", lambda: [])())
        dtype = params[0].dtype if params else torch.float64
    x = to_tensor([image], dtype=dtype).requires_grad_(True)
    logits = logits_fn(x)
    if not 0 <= true_class < logits.shape[1]:
        raise ValueError(f"true_class {true_class} outside [0, {logits.shape[1]})")
    (grad,) = torch.autograd.grad(logits[0, true_class], x)
    magnitude = grad[0].detach().double().norm(dim=0).numpy()
    return SaliencyMap(normalize_map(magnitude), image_id, model_id)


def save_saliency_png(smap: SaliencyMap | np.ndarray, path) -> Path:
    values = smap.values if isinstance(smap, SaliencyMap) else smap
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(np.clip(values, 0, 1) * 255).astype(np.uint8), mode="L").save(path)
    return path


def load_saliency_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
