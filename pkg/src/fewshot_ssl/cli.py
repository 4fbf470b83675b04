"""Command line entry point: ``fewshot-ssl <subcommand> ...``."""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

from . import data, evaluator, permset, trainer

MANIFEST = "manifest.json"
DATA_ENV = "FEWSHOT_SSL_DATA"


class CLIError(Exception):
    pass


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _rel(path: Path, root: Path) -> str:
    try:
        return str(Path(path).resolve().relative_to(root.resolve()))
    except ValueError:
        return str(Path(path).resolve())


def update_manifest(directory, artifacts=(), **fields) -> Path:
    """Merge ``fields`` and the content hashes of ``artifacts`` into ``directory/manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / MANIFEST
    manifest = json.loads(path.read_text()) if path.exists() else {"experiment_id": directory.resolve().name}
    for key, value in fields.items():
        if key == "evaluations":
            existing = {e["path"]: e for e in manifest.get("evaluations", [])}
            existing.update({e["path"]: e for e in value})
            manifest["evaluations"] = [existing[k] for k in sorted(existing)]
        else:
            manifest[key] = value
    hashes = manifest.setdefault("artifacts", {})
    for artifact in artifacts:
        hashes[_rel(artifact, directory)] = file_hash(artifact)
    manifest["artifacts"] = dict(sorted(hashes.items()))
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _dataset_root(arg: str | None, config_root: str = "") -> Path:
    root = arg or config_root or os.environ.get(DATA_ENV)
    if not root:
        raise CLIError(f"no dataset root: pass --root, set data_root in the config, or set {DATA_ENV}")
    return Path(root)


def _parse_ratio(text: str) -> tuple[float, ...]:
    try:
        ratio = tuple(float(v) for v in text.split(","))
    except ValueError as exc:
        raise CLIError(f"bad ratio {text!r}") from exc
    if len(ratio) != 3:
        raise CLIError("ratio needs three comma-separated values")
    return ratio


# -- subcommands ------------------------------------------------------------


def cmd_permset(args) -> int:
    ps = permset.generate_permutation_set(
        args.n, args.count, exhaustive=args.exhaustive or None, pool_size=args.pool_size, seed=args.seed
    )
    out = permset.save_permutation_set(ps, args.out)
    update_manifest(out.parent, [out])
    print(f"wrote {len(ps)} permutations of {ps.n_elements} (min hamming {ps.min_hamming}, "
          f"mean {float(ps.mean_hamming):.3f}) to {out}")
    return 0


def cmd_split(args) -> int:
    root = _dataset_root(args.root)
    names = data.list_classes(root)
    split = data.split_classes(range(len(names)), _parse_ratio(args.ratio), args.seed)
    out = Path(args.out)
    data.save_split(split, names, out)
    update_manifest(out.parent, [out], dataset_root=str(root))
    print(f"split {len(names)} classes into base/val/novel = {split.sizes} -> {out}")
    return 0


def _load_run_data(config: trainer.TrainConfig, root: Path):
    names = data.list_classes(root)
    images = data.apply_degradation(data.load_dataset(root, config.image_size), config.degrade)
    return names, images


def cmd_train(args) -> int:
    config = trainer.TrainConfig.from_json(args.config, args.override)
    root = _dataset_root(args.root, config.data_root)
    config = config.replace(data_root=str(root.resolve()))  # lets eval find the data from the checkpoint alone
    out_dir = Path(args.out_dir or Path(args.config).with_suffix(""))
    out_dir.mkdir(parents=True, exist_ok=True)
    names, images = _load_run_data(config, root)

    split = None
    split_path = Path(config.split_file) if config.split_file else out_dir / "split.json"
    if config.mode == "episodic":
        if config.split_file:
            split = data.load_split(split_path, names)
        else:
            split = data.split_classes(range(len(names)), config.split_ratio, config.seed)
            data.save_split(split, names, split_path)

    perm_set, permset_path = None, None
    if config.ssl_task == "jigsaw":
        if config.permset_file:
            permset_path = Path(config.permset_file)
            perm_set = permset.load_permutation_set(permset_path)
        else:
            perm_set = permset.generate_permutation_set(9, 35)
            permset_path = permset.save_permutation_set(perm_set, out_dir / "permset.json")
        config = config.replace(permset_file=str(permset_path))

    result = trainer.train(config, images, split, perm_set, out_dir, class_names=names, echo=args.echo)
    config_echo = out_dir / "config.json"
    config_echo.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    artifacts = [config_echo, out_dir / "best.ckpt", out_dir / "last.ckpt"]
    if split is not None:
        artifacts.append(split_path)
    if permset_path is not None:
        artifacts.append(permset_path)
    update_manifest(
        out_dir,
        artifacts,
        kind="run",
        config_path=str(Path(args.config).resolve()),
        config_hash=hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True).encode()).hexdigest(),
        dataset_root=str(root),
        split_file=str(split_path) if split is not None else None,
        permset_file=str(permset_path) if permset_path else None,
        output_dir=str(out_dir),
        mode=config.mode,
        ssl_task=config.ssl_task,
        degrade=config.degrade,
        steps=result.steps,
        best_val=result.best.best_val,
    )
    print(f"trained {result.steps} steps; best val {result.best.best_val}; checkpoints in {out_dir}")
    return 0


def cmd_eval(args) -> int:
    ckpt_path = Path(args.checkpoint)
    ckpt = trainer.load_checkpoint(ckpt_path)
    config = ckpt.config
    root = _dataset_root(args.root, config.data_root)
    names, images = _load_run_data(config, root)
    model = ckpt.build_model()
    common = dict(config=config.to_dict(), checkpoint_id=file_hash(ckpt_path)[:16])
    if config.mode == "episodic":
        split_path = Path(args.split or config.split_file or ckpt_path.parent / "split.json")
        split = data.load_split(split_path, names)
        novel = data.select_classes(images, split.novel)
        report = evaluator.meta_test(
            model, novel, args.n_way, args.k_shot, args.m_query, args.episodes, args.seed, **common
        )
    else:
        _, _, test = trainer.standard_split(images, config)
        acc = evaluator.test_standard(model, test)
        report = evaluator.EvalReport(
            protocol="standard", per_episode_accuracies=[], mean_accuracy=acc, ci95=0.0, seed=args.seed, **common
        )
    default_name = f"eval_{args.n_way}way.json" if report.protocol == "meta_test" else "eval_standard.json"
    out = Path(args.out or ckpt_path.parent / default_name)
    report.save(out)
    run_dir = ckpt_path.parent
    entry = {
        "path": _rel(out, run_dir),
        "protocol": report.protocol,
        "n_way": report.n_way,
        "k_shot": report.k_shot,
        "mean_accuracy": report.mean_accuracy,
        "ci95": report.ci95,
        "formatted": report.formatted(),
        "checkpoint": ckpt_path.name,
    }
    update_manifest(run_dir, [out], evaluations=[entry])
    label = f"{report.n_way}-way {report.k_shot}-shot" if report.protocol == "meta_test" else "standard"
    print(f"{label}: {report.formatted()} -> {out}")
    return 0


def cmd_saliency(args) -> int:
    ckpt = trainer.load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    image = data.load_image(args.image, args.image_size or ckpt.config.image_size)
    if ckpt.config.degrade != "none":
        image = data.DEGRADATIONS[ckpt.config.degrade](image)
    smap = evaluator.saliency(model, image, args.class_id, image_id=str(args.image), model_id=str(args.checkpoint))
    out = evaluator.save_saliency_png(smap, args.out)
    update_manifest(out.parent, [out])
    print(f"saliency map {smap.values.shape} -> {out}")
    return 0


def _variant(manifest: dict) -> str:
    base = "ProtoNet" if manifest.get("mode") == "episodic" else "Softmax"
    ssl = {"none": "", "jigsaw": " + Jigsaw", "rotation": " + Rotation"}.get(manifest.get("ssl_task", "none"), "")
    degrade = {"greyscale": " (greyscale)", "lowres": " (low-res)"}.get(manifest.get("degrade", "none"), "")
    return base + ssl + degrade


def collect_runs(directory) -> list[dict]:
    rows = []
    for path in sorted(Path(directory).rglob(MANIFEST)):
        manifest = json.loads(path.read_text())
        if manifest.get("kind") != "run":
            continue
        cells = {}
        for ev in manifest.get("evaluations", []):
            column = f"{ev['n_way']}-way {ev['k_shot']}-shot" if ev["protocol"] == "meta_test" else "standard"
            cells[column] = ev["formatted"]
        rows.append({
            "run": manifest.get("experiment_id", path.parent.name),
            "variant": _variant(manifest),
            "dataset": Path(manifest.get("dataset_root") or "?").name,
            "cells": cells,
        })
    return rows


def render_table(rows: list[dict]) -> str:
    columns = sorted({c for r in rows for c in r["cells"]}, key=lambda c: (c == "standard", c))
    header = ["Loss", "Dataset", "Run"] + columns
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for r in sorted(rows, key=lambda r: (r["dataset"], r["variant"], r["run"])):
        cells = [r["variant"], r["dataset"], r["run"]] + [r["cells"].get(c, "-") for c in columns]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    rows = collect_runs(args.input)
    table = render_table(rows)
    out = Path(args.out) if args.out else Path(args.input) / "report.md"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(table)
    out.with_suffix(".json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    print(table, end="")
    return 0


def cmd_synth(args) -> int:
    from .synthetic import write_synthetic_dataset

    root = write_synthetic_dataset(args.out, args.classes, args.per_class, args.size, args.seed)
    print(f"wrote {args.classes} classes x {args.per_class} images to {root}")
    return 0


def cmd_desk(args) -> int:
    from .experiments import run_desk_experiment

    summary = run_desk_experiment(args.out_dir, episodes=args.episodes, test_episodes=args.test_episodes, seed=args.seed)
    for name, r in summary["meta_test"].items():
        print(f"{name:12s} {r['formatted']}")
    for task, r in summary["runs"].items():
        if r["ssl_accuracy"] is not None:
            print(f"{task} task accuracy (last 100 steps): {100 * r['ssl_accuracy']:.1f}%")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fewshot-ssl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("permset", help="generate a jigsaw permutation set")
    p.add_argument("--n", type=int, default=9)
    p.add_argument("--count", type=int, default=35)
    p.add_argument("--out", required=True)
    p.add_argument("--exhaustive", action="store_true")
    p.add_argument("--pool-size", type=int, default=permset.DEFAULT_POOL_SIZE)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_permset)

    p = sub.add_parser("split", help="split dataset classes into base/val/novel")
    p.add_argument("--root")
    p.add_argument("--ratio", default="2,1,1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out-dir")
    p.add_argument("--root")
    p.add_argument("--echo", action="store_true", help="print the per-step log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="meta-test (episodic) or test accuracy (standard)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n-way", type=int, default=5, choices=(5, 20))
    p.add_argument("--k-shot", type=int, default=5)
    p.add_argument("--m-query", type=int, default=16)
    p.add_argument("--episodes", type=int, default=600)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--root")
    p.add_argument("--split")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("saliency", help="gradient saliency map of the true-class logit")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--class", dest="class_id", type=int, required=True)
    p.add_argument("--image-size", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("report", help="tabulate evaluations across runs")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", help="write the procedural texture dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("desk", help="run the desk-scale synthetic experiment")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--episodes", type=int, default=2000)
    p.add_argument("--test-episodes", type=int, default=600)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_desk)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CLIError, data.DataError, permset.PermutationSetError, trainer.ConfigError,
            trainer.CheckpointError, trainer.TrainingError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
