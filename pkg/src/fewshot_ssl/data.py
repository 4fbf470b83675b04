"""Dataset ingestion, class splits, episode sampling and image transforms.

Images are float32 numpy arrays of shape (H, W, C) with values in [0, 1].
"""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .permset import PermutationSet

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}

JIGSAW_CROP = 255
JIGSAW_GRID = 3
JIGSAW_TILE = 64
JIGSAW_SCALE = (0.5, 1.0)
ROTATION_ANGLES = (0, 90, 180, 270)


class DataError(ValueError):
    pass


@dataclass
class LabeledImage:
    image: np.ndarray
    class_id: int
    source_path: str = ""


@dataclass(frozen=True)
class ClassSplit:
    base: frozenset
    val: frozenset
    novel: frozenset

    def __post_init__(self):
        if self.base & self.val or self.base & self.novel or self.val & self.novel:
            raise DataError("class split partitions overlap")

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.base), len(self.val), len(self.novel)


@dataclass
class Episode:
    n_way: int
    k_shot: int
    m_query: int
    support: list
    query: list
    class_map: dict = field(default_factory=dict)

    def support_labels(self) -> np.ndarray:
        return np.array([self.class_map[s.class_id] for s in self.support], dtype=np.int64)

    def query_labels(self) -> np.ndarray:
        return np.array([self.class_map[q.class_id] for q in self.query], dtype=np.int64)


@dataclass
class JigsawSample:
    tiles: list
    perm_index: int


@dataclass
class RotationSample:
    image: np.ndarray
    angle_index: int


# -- loading ----------------------------------------------------------------


def list_classes(root) -> list[str]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    names = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not names:
        raise DataError(f"dataset root {root} has no class subdirectories")
    return names


def resize_shorter_edge(width: int, height: int, size: int) -> tuple[int, int]:
    """Target (width, height) so the shorter edge equals ``size``; the longer edge is truncated."""
    if width <= height:
        return size, max(size, int(height * size / width))
    return max(size, int(width * size / height)), size


def load_image(path, image_size: int) -> np.ndarray:
    """Resize shorter edge to ``image_size`` then center-crop a square."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            w, h = im.size
            tw, th = resize_shorter_edge(w, h, image_size)
            if (tw, th) != (w, h):
                im = im.resize((tw, th), Image.BILINEAR)
            left = (tw - image_size) // 2
            top = (th - image_size) // 2
            im = im.crop((left, top, left + image_size, top + image_size))
            return np.asarray(im, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def load_dataset(root, image_size: int, classes: Sequence[str] | None = None) -> list[LabeledImage]:
    """Load ``root/<class>/<image>`` into memory.

    Class ids follow the lexicographic order of all class directories under
    ``root`` even when only a subset is requested through ``classes``.
    """
    names = list_classes(root)
    wanted = set(names if classes is None else classes)
    unknown = wanted - set(names)
    if unknown:
        raise DataError(f"unknown classes: {sorted(unknown)}")
    out = []
    for class_id, name in enumerate(names):
        if name not in wanted:
            continue
        files = sorted(p for p in (Path(root) / name).iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
        if not files:
            raise DataError(f"class directory '{name}' contains no images")
        for path in files:
            out.append(LabeledImage(load_image(path, image_size), class_id, str(path)))
    return out


# -- splits -----------------------------------------------------------------


def partition_sizes(n: int, ratio: Sequence[float]) -> list[int]:
    """Floor of the ratio-proportional sizes; the remainder goes one by one, first part first."""
    total = float(sum(ratio))
    if total <= 0 or any(r < 0 for r in ratio):
        raise DataError(f"invalid ratio {tuple(ratio)}")
    sizes = [int(np.floor(n * r / total)) for r in ratio]
    i = 0
    while sum(sizes) < n:
        if ratio[i % len(ratio)] > 0:
            sizes[i % len(ratio)] += 1
        i += 1
    return sizes


def split_classes(class_ids: Sequence[int], ratio: Sequence[float] = (2, 1, 1), seed: int = 0) -> ClassSplit:
    ids = sorted(set(int(c) for c in class_ids))
    if len(ids) < 3:
        raise DataError(f"need at least 3 classes to split, got {len(ids)}")
    if len(ratio) != 3:
        raise DataError("ratio must have three entries (base, val, novel)")
    n_base, n_val, _ = partition_sizes(len(ids), ratio)
    order = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
    return ClassSplit(
        frozenset(order[:n_base]),
        frozenset(order[n_base:n_base + n_val]),
        frozenset(order[n_base + n_val:]),
    )


def split_images(images: Sequence[LabeledImage], ratio: Sequence[float] = (2, 1, 1), seed: int = 0):
    """Per-class image split into (train, val, test) for standard classification."""
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    for cid, members in sorted(group_by_class(images).items()):
        sizes = partition_sizes(len(members), ratio)
        order = rng.permutation(len(members))
        start = 0
        for part, size in zip(parts, sizes):
            part.extend(members[i] for i in order[start:start + size])
            start += size
    return parts


def save_split(split: ClassSplit, class_names: Sequence[str], path) -> None:
    payload = {key: sorted(class_names[c] for c in getattr(split, key)) for key in ("base", "val", "novel")}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n")


def load_split(path, class_names: Sequence[str]) -> ClassSplit:
    raw = json.loads(Path(path).read_text())
    index = {name: i for i, name in enumerate(class_names)}
    try:
        parts = [frozenset(index[name] for name in raw[key]) for key in ("base", "val", "novel")]
    except KeyError as exc:
        raise DataError(f"{path}: missing key or unknown class {exc}") from exc
    return ClassSplit(*parts)


def select_classes(images: Sequence[LabeledImage], class_ids) -> list[LabeledImage]:
    keep = set(class_ids)
    return [im for im in images if im.class_id in keep]


# -- episodes ---------------------------------------------------------------


def group_by_class(images: Sequence[LabeledImage]) -> dict[int, list]:
    groups = defaultdict(list)
    for im in images:
        groups[im.class_id].append(im)
    return dict(groups)


def sample_episode(images, n_way: int, k_shot: int, m_query: int, rng: np.random.Generator) -> Episode:
    """Draw an N-way K-shot episode with M queries per class, without replacement."""
    groups = images if isinstance(images, dict) else group_by_class(images)
    classes = sorted(groups)
    if len(classes) < n_way:
        raise DataError(f"{n_way}-way episode needs {n_way} classes, only {len(classes)} available")
    chosen = [classes[i] for i in rng.choice(len(classes), size=n_way, replace=False)]
    support, query = [], []
    for cid in chosen:
        members = groups[cid]
        if len(members) < k_shot + m_query:
            raise DataError(f"class {cid} has {len(members)} images, episode needs {k_shot + m_query}")
        picks = rng.choice(len(members), size=k_shot + m_query, replace=False)
        support.extend(members[i] for i in picks[:k_shot])
        query.extend(members[i] for i in picks[k_shot:])
    return Episode(n_way, k_shot, m_query, support, query, {cid: i for i, cid in enumerate(chosen)})


def check_episode_geometry(images, n_way: int, k_shot: int, m_query: int) -> None:
    groups = images if isinstance(images, dict) else group_by_class(images)
    ok = [c for c, m in groups.items() if len(m) >= k_shot + m_query]
    if len(ok) < n_way:
        raise DataError(
            f"dataset too small for {n_way}-way {k_shot}-shot {m_query}-query episodes: "
            f"{len(ok)} of {len(groups)} classes have >= {k_shot + m_query} images"
        )


# -- transforms -------------------------------------------------------------


def _resize(image: np.ndarray, height: int, width: int, mode: str = "bilinear") -> np.ndarray:
    if image.shape[:2] == (height, width):
        return image
    t = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)[None]
    kwargs = {"align_corners": False} if mode == "bilinear" else {}
    out = F.interpolate(t, size=(height, width), mode=mode, **kwargs)
    return np.clip(out[0].permute(1, 2, 0).numpy(), 0.0, 1.0)


def make_rotation(image: np.ndarray, angle_index: int) -> RotationSample:
    """Rotate counter-clockwise by ``90 * angle_index`` degrees."""
    if angle_index not in (0, 1, 2, 3):
        raise ValueError(f"angle_index must be in 0..3, got {angle_index}")
    return RotationSample(np.ascontiguousarray(np.rot90(image, k=angle_index, axes=(0, 1))), angle_index)


def make_jigsaw(
    image: np.ndarray,
    perm_set: PermutationSet,
    rng: np.random.Generator,
    *,
    crop: int = JIGSAW_CROP,
    grid: int = JIGSAW_GRID,
    tile: int = JIGSAW_TILE,
    scale: tuple[float, float] = JIGSAW_SCALE,
) -> JigsawSample:
    """Shuffled 3x3 puzzle of 64x64 tiles.

    A square window of side ``crop * s`` (``s`` uniform in ``scale``) is cut
    from the image and resized to ``crop``; images whose shorter edge is below
    ``crop`` are upscaled first (bilinear throughout).  Each of the ``grid x grid`` cells yields a
    random ``tile`` crop, and tiles are reordered so that output slot ``i``
    holds raster cell ``perm[i]``.
    """
    if perm_set.n_elements != grid * grid:
        raise ValueError(f"permutation set acts on {perm_set.n_elements} elements, need {grid * grid}")
    cell = crop // grid
    if cell < tile:
        raise ValueError(f"cell size {cell} smaller than tile {tile}")
    h, w = image.shape[:2]
    # Upscaled frame: shorter edge at least ``crop``.  Sampling below maps
    # window pixels straight back to the source, so the upscaled image and
    # the resized window are never materialised.
    up = max(1.0, crop / min(h, w))
    uh, uw = max(crop, int(round(h * up))), max(crop, int(round(w * up)))
    side = int(round(crop * rng.uniform(*scale)))
    top = int(rng.integers(0, uh - side + 1))
    left = int(rng.integers(0, uw - side + 1))
    offsets = []
    for r in range(grid):
        for c in range(grid):
            dy, dx = rng.integers(0, cell - tile + 1, size=2)
            offsets.append((r * cell + int(dy), c * cell + int(dx)))
    perm_index = int(rng.integers(len(perm_set)))

    step = side / crop
    ramp = np.arange(tile) + 0.5
    ys = np.stack([top + (y0 + ramp) * step for y0, _ in offsets]) * (h / uh)
    xs = np.stack([left + (x0 + ramp) * step for _, x0 in offsets]) * (w / uw)
    grid_y = np.broadcast_to((2 * ys / h - 1)[:, :, None], (len(offsets), tile, tile))
    grid_x = np.broadcast_to((2 * xs / w - 1)[:, None, :], (len(offsets), tile, tile))
    sample_grid = torch.from_numpy(np.stack([grid_x, grid_y], axis=-1).astype(np.float32))
    src = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)
    src = src[None].expand(len(offsets), -1, -1, -1)
    tiles = F.grid_sample(src, sample_grid, mode="bilinear", padding_mode="border", align_corners=False)
    raster = tiles.permute(0, 2, 3, 1).clamp(0.0, 1.0).numpy()
    perm = perm_set[perm_index]
    return JigsawSample([np.ascontiguousarray(raster[p]) for p in perm], perm_index)


def degrade_low_resolution(image: np.ndarray, factor: int = 4) -> np.ndarray:
    """Down-sample by ``factor`` (area average) and bilinearly up-sample back."""
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return image.copy()
    h, w = image.shape[:2]
    small = _resize(image, max(1, int(round(h / factor))), max(1, int(round(w / factor))), mode="area")
    return _resize(small, h, w).astype(image.dtype)


LUMA = np.array([0.299, 0.587, 0.114])


def to_greyscale(image: np.ndarray) -> np.ndarray:
    """Luma replicated to three channels; single-channel input is returned unchanged."""
    if image.shape[-1] == 1:
        return image
    luma = (image.astype(np.float64) @ LUMA).astype(image.dtype)
    return np.repeat(luma[..., None], 3, axis=-1)


DEGRADATIONS = {
    "none": lambda im: im,
    "greyscale": to_greyscale,
    "lowres": degrade_low_resolution,
}


def apply_degradation(images: Sequence[LabeledImage], degrade: str) -> list[LabeledImage]:
    if degrade not in DEGRADATIONS:
        raise DataError(f"unknown degradation {degrade!r}; expected one of {sorted(DEGRADATIONS)}")
    if degrade == "none":
        return list(images)
    fn = DEGRADATIONS[degrade]
    return [LabeledImage(fn(im.image), im.class_id, im.source_path) for im in images]


def to_tensor(images: Sequence[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    """Stack HWC arrays into an NCHW tensor; all images must share a shape."""
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ValueError(f"mixed image sizes in batch: {sorted(shapes)}")
    return torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).to(dtype).contiguous()
