"""Episodic and standard training with a shared-batch self-supervised loss."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import (
    ClassSplit,
    LabeledImage,
    check_episode_geometry,
    group_by_class,
    make_jigsaw,
    make_rotation,
    sample_episode,
    select_classes,
    split_images,
    to_tensor,
)
from .evaluator import episode_accuracy, predict
from .model import BackboneConfig, ModelBundle
from .objectives import NonFiniteLossError, combine, cross_entropy, jigsaw_loss, prototype_loss, rotation_loss
from .permset import PermutationSet
from .seeding import substream, torch_seed

CHECKPOINT_FORMAT = "fewshot_ssl.checkpoint"
CHECKPOINT_VERSION = 1

# Fields that determine parameter shapes; a checkpoint must agree on these.
MODEL_FIELDS = ("mode", "ssl_task", "backbone", "embed_dim", "width", "bn_policy")


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    mode: str = "episodic"
    ssl_task: str = "none"
    n_way: int = 5
    k_shot: int = 5
    m_query: int = 16
    episodes: int = 40_000
    epochs: int = 400
    batch_size: int = 16
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    rotation_mode: str = "one_per_image"
    degrade: str = "none"
    backbone: str = "small_conv"
    embed_dim: int = 64
    width: int = 16
    bn_policy: str = ""  # empty: per_batch with SSL or episodic, running_stats otherwise
    image_size: int = 64
    split_ratio: tuple = (2, 1, 1)
    val_every: int = 500
    val_episodes: int = 100
    val_n_way: int = 5
    val_k_shot: int = 5
    val_m_query: int = 16
    data_root: str = ""
    split_file: str = ""
    permset_file: str = ""

    def __post_init__(self):
        self.split_ratio = tuple(self.split_ratio)
        if not self.bn_policy:
            per_batch = self.ssl_task != "none" or self.mode == "episodic"
            self.bn_policy = "per_batch" if per_batch else "running_stats"
        self.validate()

    def validate(self) -> None:
        choices = {
            "mode": ("episodic", "standard"),
            "ssl_task": ("none", "jigsaw", "rotation"),
            "rotation_mode": ("one_per_image", "all_four"),
            "degrade": ("none", "greyscale", "lowres"),
            "bn_policy": ("per_batch", "running_stats"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name}={getattr(self, name)!r}; expected one of {allowed}")
        if self.ssl_task != "none" and self.bn_policy != "per_batch":
            raise ConfigError("self-supervised training requires bn_policy='per_batch'")
        positive = ("n_way", "k_shot", "m_query", "batch_size", "embed_dim", "width", "image_size", "val_every")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.episodes < 0 or self.epochs < 0:
            raise ConfigError("episodes and epochs must be >= 0")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate must be > 0 and weight_decay >= 0")
        BackboneConfig(self.backbone, self.embed_dim, self.bn_policy, self.width)

    @property
    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(self.backbone, self.embed_dim, self.bn_policy, self.width)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_ratio"] = list(self.split_ratio)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def from_json(cls, path, overrides: Sequence[str] = ()) -> "TrainConfig":
        raw = json.loads(Path(path).read_text())
        return cls.from_dict(apply_overrides(raw, overrides))

    def replace(self, **changes) -> "TrainConfig":
        d = self.to_dict()
        d.update(changes)
        if "bn_policy" not in changes and ("ssl_task" in changes or "mode" in changes):
            d["bn_policy"] = ""
        return TrainConfig.from_dict(d)


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    """Apply ``key=value`` strings; values are parsed as JSON when possible."""
    raw = dict(raw)
    types = {f.name: f.type for f in fields(TrainConfig)}
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        if key == "split_ratio":
            raw[key] = [float(v) for v in value.split(",")]
            continue
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        if types[key] == "str" and not isinstance(parsed, str):
            parsed = value
        raw[key] = parsed
    return raw


def build_model(config: TrainConfig, num_classes: int | None = None, n_permutations: int | None = None) -> ModelBundle:
    torch.manual_seed(torch_seed(config.seed, "init"))
    return ModelBundle(
        config.backbone_config,
        num_classes=num_classes if config.mode == "standard" else None,
        jigsaw_classes=n_permutations if config.ssl_task == "jigsaw" else None,
        rotation=config.ssl_task == "rotation",
    )


# -- self-supervised batches --------------------------------------------------


def jigsaw_batch(images, perm_set: PermutationSet, rng: np.random.Generator, dtype=torch.float32):
    samples = [make_jigsaw(im, perm_set, rng) for im in images]
    tiles = torch.stack([to_tensor(s.tiles, dtype) for s in samples])
    return tiles, torch.tensor([s.perm_index for s in samples])


def rotation_batch(images, rng: np.random.Generator, rotation_mode: str = "one_per_image", dtype=torch.float32):
    if rotation_mode == "all_four":
        samples = [make_rotation(im, a) for im in images for a in range(4)]
    else:
        samples = [make_rotation(im, int(a)) for im, a in zip(images, rng.integers(0, 4, size=len(images)))]
    return to_tensor([s.image for s in samples], dtype), torch.tensor([s.angle_index for s in samples])


class SelfSupervision:
    """Derives the self-supervised loss from the images of the supervised batch."""

    def __init__(self, config: TrainConfig, perm_set: PermutationSet | None):
        self.task = config.ssl_task
        self.rotation_mode = config.rotation_mode
        self.perm_set = perm_set
        self.jigsaw_rng = substream(config.seed, "jigsaw")
        self.rotation_rng = substream(config.seed, "rotation")

    def __call__(self, model: ModelBundle, images: Sequence[np.ndarray]):
        dtype = next(model.parameters()).dtype
        if self.task == "jigsaw":
            tiles, labels = jigsaw_batch(images, self.perm_set, self.jigsaw_rng, dtype)
            return jigsaw_loss(model.jigsaw_forward(tiles), labels)
        if self.task == "rotation":
            x, labels = rotation_batch(images, self.rotation_rng, self.rotation_mode, dtype)
            return rotation_loss(model.rotation_forward(x), labels)
        return None


# -- checkpoints ------------------------------------------------------------


@dataclass
class Checkpoint:
    config: TrainConfig
    state_dict: dict
    step: int
    best_val: float | None
    num_classes: int | None = None
    perm_set: PermutationSet | None = None
    permset_file: str = ""
    class_names: list = field(default_factory=list)

    def build_model(self) -> ModelBundle:
        n_perm = len(self.perm_set) if self.perm_set is not None else None
        model = build_model(self.config, self.num_classes, n_perm)
        model.load_state_dict(self.state_dict)
        model.set_mode("eval")
        return model

    def save(self, path) -> Path:
        payload = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "state_dict": self.state_dict,
            "step": self.step,
            "best_val": self.best_val,
            "num_classes": self.num_classes,
            "permset": None if self.perm_set is None else {
                "n": self.perm_set.n_elements,
                "perms": [list(p) for p in self.perm_set.perms],
                "file": self.permset_file,
            },
            "class_names": list(self.class_names),
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, path)
        return path


def load_checkpoint(path, expected_config: TrainConfig | None = None) -> Checkpoint:
    try:
        raw = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(raw, dict) or raw.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if raw.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {raw.get('version')}")
    config = TrainConfig.from_dict(raw["config"])
    if expected_config is not None:
        diff = {k: (getattr(config, k), getattr(expected_config, k)) for k in MODEL_FIELDS
                if getattr(config, k) != getattr(expected_config, k)}
        if diff:
            raise CheckpointError(f"{path}: config mismatch (checkpoint, expected): {diff}")
    perm_set = None
    if raw.get("permset"):
        perm_set = PermutationSet.from_perms(raw["permset"]["perms"], raw["permset"]["n"])
    ckpt = Checkpoint(
        config, raw["state_dict"], raw["step"], raw["best_val"], raw["num_classes"],
        perm_set, raw["permset"]["file"] if raw.get("permset") else "", raw.get("class_names", []),
    )
    try:
        ckpt.build_model()
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not match the stored config: {exc}") from exc
    return ckpt


# -- training ---------------------------------------------------------------


@dataclass
class TrainResult:
    model: ModelBundle
    best: Checkpoint
    last: Checkpoint
    history: list
    steps: int


def validate(model: ModelBundle, val_data, config: TrainConfig) -> float:
    """Episodic: mean accuracy over a fixed list of episodes; standard: per-image accuracy."""
    if not val_data:
        raise ValueError("empty validation set")
    if config.mode == "episodic":
        return float(np.mean([episode_accuracy(model, ep) for ep in val_data]))
    labels = np.array([im.class_id for im in val_data])
    return float((predict(model, val_data) == labels).mean())


def validation_episodes(val_images, config: TrainConfig) -> list:
    groups = group_by_class(val_images)
    rng = substream(config.seed, "validation")
    return [
        sample_episode(groups, config.val_n_way, config.val_k_shot, config.val_m_query, rng)
        for _ in range(config.val_episodes)
    ]


def standard_split(images, config: TrainConfig):
    """(train, val, test) image lists for standard classification, fixed by the config seed."""
    return split_images(images, config.split_ratio, int(substream(config.seed, "split").integers(2**31)))


def _scalar(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


def _state_copy(model) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


class _Logger:
    def __init__(self, out_dir: Path | None, echo: bool):
        self.fh = open(out_dir / "log.jsonl", "w") if out_dir else None
        self.echo = echo
        self.t0 = time.perf_counter()

    def write(self, record: dict) -> None:
        line = {k: record[k] for k in ("step", "loss_total", "loss_sup", "loss_ssl", "acc_sup", "acc_ssl")}
        line["wallclock"] = round(time.perf_counter() - self.t0, 4)
        if "val_acc" in record:
            line["val_acc"] = record["val_acc"]
        text = json.dumps(line)
        if self.fh:
            self.fh.write(text + "\n")
        if self.echo:
            print(text, flush=True)

    def close(self):
        if self.fh:
            self.fh.close()


def train(
    config: TrainConfig,
    images: Sequence[LabeledImage],
    split: ClassSplit | None = None,
    perm_set: PermutationSet | None = None,
    out_dir=None,
    *,
    class_names: Sequence[str] = (),
    echo: bool = False,
    dtype: torch.dtype = torch.float32,
) -> TrainResult:
    """Train per ``config``; each step backpropagates the summed supervised and SSL loss once.

    Episodic mode trains on the base classes of ``split`` and selects the
    model by accuracy on fixed validation episodes from the val classes.
    Standard mode splits each class's images into train/val/test with
    ``config.split_ratio`` and selects by val accuracy.
    """
    config.validate()
    if config.ssl_task == "jigsaw" and perm_set is None:
        raise ConfigError("ssl_task='jigsaw' requires a permutation set")
    if config.ssl_task != "jigsaw":
        perm_set = None
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)

    if config.mode == "episodic":
        if split is None:
            raise ConfigError("episodic training needs a class split")
        base = group_by_class(select_classes(images, split.base))
        check_episode_geometry(base, config.n_way, config.k_shot, config.m_query)
        val_images = select_classes(images, split.val)
        val_data = validation_episodes(val_images, config) if val_images else []
        num_classes = None
    else:
        train_images, val_data, _ = standard_split(images, config)
        if not train_images:
            raise ConfigError("no training images")
        num_classes = max(im.class_id for im in images) + 1

    model = build_model(config, num_classes, len(perm_set) if perm_set else None).to(dtype)
    torch.manual_seed(torch_seed(config.seed, "dropout"))
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    ssl = SelfSupervision(config, perm_set)
    logger = _Logger(out, echo)
    history = []
    best_val, best_state, best_step = None, None, 0

    def make_ckpt(state, step, val):
        return Checkpoint(config, state, step, val, num_classes, perm_set, config.permset_file, list(class_names))

    def step_fn(step, batch, sup_loss_fn):
        model.set_mode("train")
        sources = [im.image for im in batch]
        loss_sup, acc_sup = sup_loss_fn(to_tensor(sources, dtype))
        ssl_out = ssl(model, sources)
        loss_ssl, acc_ssl = ssl_out if ssl_out is not None else (0.0, None)
        try:
            total = combine(loss_sup, loss_ssl)
        except NonFiniteLossError as exc:
            raise TrainingError(f"step {step}: {exc}") from exc
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
        record = {
            "step": step,
            "loss_total": _scalar(total),
            "loss_sup": _scalar(loss_sup),
            "loss_ssl": _scalar(loss_ssl),
            "acc_sup": acc_sup,
            "acc_ssl": acc_ssl,
            "image_ids": [im.source_path for im in batch],
        }
        history.append(record)
        return record

    def maybe_validate(record, step, force):
        nonlocal best_val, best_state, best_step
        if not val_data or not (force or step % config.val_every == 0):
            return
        record["val_acc"] = validate(model, val_data, config)
        if best_val is None or record["val_acc"] > best_val:
            best_val, best_state, best_step = record["val_acc"], _state_copy(model), step

    step = 0
    try:
        if config.mode == "episodic":
            episode_rng = substream(config.seed, "episode")
            n_support = config.n_way * config.k_shot

            for step in range(1, config.episodes + 1):
                ep = sample_episode(base, config.n_way, config.k_shot, config.m_query, episode_rng)
                s_lab, q_lab = ep.support_labels(), ep.query_labels()

                def sup_loss(x):
                    emb = model.embed(x)
                    loss, acc, _ = prototype_loss(emb[:n_support], s_lab, emb[n_support:], q_lab, config.n_way)
                    return loss, acc

                record = step_fn(step, ep.support + ep.query, sup_loss)
                maybe_validate(record, step, step == config.episodes)
                logger.write(record)
        else:
            batch_rng = substream(config.seed, "batch")
            n_batches = math.ceil(len(train_images) / config.batch_size)
            for epoch in range(config.epochs):
                order = batch_rng.permutation(len(train_images))
                for b in range(n_batches):
                    step += 1
                    batch = [train_images[i] for i in order[b * config.batch_size:(b + 1) * config.batch_size]]
                    labels = torch.tensor([im.class_id for im in batch])

                    def sup_loss(x):
                        logits = model.supervised_forward(x)
                        return cross_entropy(logits, labels), float((logits.argmax(1) == labels).double().mean())

                    record = step_fn(step, batch, sup_loss)
                    if b == n_batches - 1:
                        maybe_validate(record, step, True)
                    logger.write(record)
    finally:
        logger.close()

    last = make_ckpt(_state_copy(model), step, best_val)
    best = make_ckpt(best_state, best_step, best_val) if best_state is not None else last
    if out:
        best.save(out / "best.ckpt")
        last.save(out / "last.ckpt")
    return TrainResult(model, best, last, history, step)
