"""Annotation I/O, overlapping-tile cropping, and the synthetic scene generator.

Annotations are JSON Lines, one object per line:
    {"image": str, "class": int, "box": [x1, y1, x2, y2]}
with class 1 = small vehicle, 2 = large vehicle. Images are 8-bit RGB PNGs;
a dataset directory holds images/, annotations.jsonl and a manifest.json
listing image entries and their split.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

CLASS_NAMES = {1: "small-vehicle", 2: "large-vehicle"}


@dataclass(frozen=True)
class Annotation:
    image_id: str
    class_id: int
    box: tuple[float, float, float, float]

    def __post_init__(self):
        if self.class_id not in CLASS_NAMES:
            raise ValueError(f"unknown class id {self.class_id}")
        x1, y1, x2, y2 = self.box
        if not (x2 > x1 and y2 > y1):
            raise ValueError(f"annotation box must have positive area: {self.box}")


def write_annotations(path, annotations: list[Annotation]) -> None:
    with open(path, "w") as f:
        for a in annotations:
            f.write(
                json.dumps(
                    {
                        "image": a.image_id,
                        "class": int(a.class_id),
                        "box": [float(v) for v in a.box],
                    }
                )
                + "\n"
            )


def read_annotations(path) -> dict[str, list[Annotation]]:
    """Parse JSONL annotations grouped by image id; malformed lines raise with
    the line number."""
    out: dict[str, list[Annotation]] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                ann = Annotation(obj["image"], int(obj["class"]), tuple(float(v) for v in obj["box"]))
            except (ValueError, KeyError, TypeError) as e:
                raise ValueError(f"{path}:{lineno}: bad annotation line: {e}") from e
            out.setdefault(ann.image_id, []).append(ann)
    return out


# ---------------------------------------------------------------------------
# tiling


@dataclass
class Tile:
    parent_id: str
    ox: int
    oy: int
    image: np.ndarray  # (tile, tile, 3) uint8
    annotations: list[Annotation]


def _tile_origins(dim: int, tile: int, stride: int) -> list[int]:
    if dim <= tile:
        return [0]
    xs = list(range(0, dim - tile + 1, stride))
    if xs[-1] + tile < dim:
        xs.append(dim - tile)  # end-aligned final tile
    return xs


def tile_image(
    image: np.ndarray,
    annotations: list[Annotation],
    tile_size: int = 1024,
    overlap: int = 100,
    keep_fraction: float = 0.5,
    parent_id: str = "",
) -> list[Tile]:
    """Crop into overlapping tiles; tile origins step by tile_size - overlap
    with the last row/column shifted inward so tiles never exceed the image.

    An annotation survives in a tile iff its clipped area exceeds
    keep_fraction of its original area (strict); kept boxes are shifted and
    clipped to tile bounds. Images smaller than the tile are zero-padded.
    """
    if tile_size <= overlap:
        raise ValueError("tile_size must exceed overlap")
    h, w = image.shape[0], image.shape[1]
    stride = tile_size - overlap
    tiles: list[Tile] = []
    for oy in _tile_origins(h, tile_size, stride):
        for ox in _tile_origins(w, tile_size, stride):
            sub = image[oy : oy + tile_size, ox : ox + tile_size]
            if sub.shape[0] < tile_size or sub.shape[1] < tile_size:
                padded = np.zeros((tile_size, tile_size) + image.shape[2:], dtype=image.dtype)
                padded[: sub.shape[0], : sub.shape[1]] = sub
                sub = padded
            kept: list[Annotation] = []
            for a in annotations:
                x1, y1, x2, y2 = a.box
                cx1, cy1 = max(x1, ox), max(y1, oy)
                cx2, cy2 = min(x2, ox + tile_size), min(y2, oy + tile_size)
                if cx2 <= cx1 or cy2 <= cy1:
                    continue
                frac = ((cx2 - cx1) * (cy2 - cy1)) / ((x2 - x1) * (y2 - y1))
                if frac > keep_fraction:
                    kept.append(
                        Annotation(a.image_id, a.class_id, (cx1 - ox, cy1 - oy, cx2 - ox, cy2 - oy))
                    )
            tiles.append(Tile(parent_id or (annotations[0].image_id if annotations else ""), ox, oy, sub, kept))
    return tiles


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    scene_size: int = 128
    small_count: int = 3
    large_count: int = 2
    small_side: tuple[float, float] = (4.0, 10.0)  # short side range, px
    large_side: tuple[float, float] = (10.0, 24.0)
    noise: float = 0.05
    occlusion_prob: float = 0.15
    shadow_prob: float = 0.4
    distractor_count: int = 3


@dataclass
class Scene:
    image_id: str
    image: np.ndarray  # (S,S,3) uint8
    annotations: list[Annotation]
    vehicle_masks: list[np.ndarray] = field(default_factory=list)  # per-vehicle pixel masks


def _rotated_rect_mask(size: int, cx: float, cy: float, w: float, h: float, angle: float) -> np.ndarray:
    """Boolean mask of pixels whose centers fall inside the rotated rectangle."""
    half_w, half_h = w / 2.0, h / 2.0
    ext_x = half_w * abs(np.cos(angle)) + half_h * abs(np.sin(angle))
    ext_y = half_w * abs(np.sin(angle)) + half_h * abs(np.cos(angle))
    x_lo = max(0, int(np.floor(cx - ext_x - 1)))
    x_hi = min(size, int(np.ceil(cx + ext_x + 1)))
    y_lo = max(0, int(np.floor(cy - ext_y - 1)))
    y_hi = min(size, int(np.ceil(cy + ext_y + 1)))
    mask = np.zeros((size, size), dtype=bool)
    if x_hi <= x_lo or y_hi <= y_lo:
        return mask
    ys, xs = np.mgrid[y_lo:y_hi, x_lo:x_hi]
    dx = xs + 0.5 - cx
    dy = ys + 0.5 - cy
    u = dx * np.cos(angle) + dy * np.sin(angle)
    v = -dx * np.sin(angle) + dy * np.cos(angle)
    mask[y_lo:y_hi, x_lo:x_hi] = (np.abs(u) <= half_w) & (np.abs(v) <= half_h)
    return mask


def _rect_extent(w: float, h: float, angle: float) -> tuple[float, float]:
    return (
        w * abs(np.cos(angle)) + h * abs(np.sin(angle)),
        w * abs(np.sin(angle)) + h * abs(np.cos(angle)),
    )


def _axis_coord(size: int, cx: float, cy: float, angle: float) -> np.ndarray:
    """Signed coordinate of each pixel center along the rectangle's long axis."""
    ys, xs = np.mgrid[0:size, 0:size]
    return (xs + 0.5 - cx) * np.cos(angle) + (ys + 0.5 - cy) * np.sin(angle)


def generate_scene(cfg: SynthConfig, index: int) -> Scene:
    """One reproducible scene: noisy background, distractor shapes, shadowed
    and occasionally occluded vehicles. Ground truth is the axis-aligned box
    of each rotated rectangle."""
    rng = np.random.default_rng(cfg.seed ^ index)
    s = cfg.scene_size
    base = rng.uniform(0.55, 0.75)
    img = np.clip(
        base + rng.uniform(-cfg.noise, cfg.noise, (s, s, 3)) + rng.uniform(-0.03, 0.03, (1, 1, 3)),
        0.0,
        1.0,
    )

    # distractors: background-toned blobs that are not vehicles
    for _ in range(cfg.distractor_count):
        dx, dy = rng.uniform(6, s - 6, 2)
        dw, dh = rng.uniform(5, 18, 2)
        ang = rng.uniform(0, np.pi)
        m = _rotated_rect_mask(s, dx, dy, dw, dh, ang)
        img[m] = np.clip(base + rng.uniform(-0.18, 0.18) + rng.uniform(-0.04, 0.04, 3), 0, 1)

    image_id = f"scene_{index:05d}"
    annotations: list[Annotation] = []
    masks: list[np.ndarray] = []
    placed: list[tuple[float, float, float, float]] = []

    specs = [(1, cfg.small_side)] * cfg.small_count + [(2, cfg.large_side)] * cfg.large_count
    for class_id, side_range in specs:
        for _ in range(40):  # placement attempts
            short = rng.uniform(*side_range)
            aspect = rng.uniform(1.7, 2.4) if class_id == 1 else rng.uniform(2.0, 2.8)
            long_side = short * aspect
            angle = rng.uniform(0.0, np.pi)
            ext_x, ext_y = _rect_extent(long_side, short, angle)
            margin_x, margin_y = ext_x / 2 + 1, ext_y / 2 + 1
            if 2 * margin_x >= s or 2 * margin_y >= s:
                continue
            cx = rng.uniform(margin_x, s - margin_x)
            cy = rng.uniform(margin_y, s - margin_y)
            box = (cx - ext_x / 2, cy - ext_y / 2, cx + ext_x / 2, cy + ext_y / 2)
            crowded = False
            for other in placed:
                ix = min(box[2], other[2]) - max(box[0], other[0])
                iy = min(box[3], other[3]) - max(box[1], other[1])
                if ix > 0 and iy > 0:
                    inter = ix * iy
                    union = (
                        (box[2] - box[0]) * (box[3] - box[1])
                        + (other[2] - other[0]) * (other[3] - other[1])
                        - inter
                    )
                    if inter / union > 0.25:
                        crowded = True
                        break
            if crowded:
                continue

            if rng.uniform() < cfg.shadow_prob:
                off = rng.uniform(1.5, 3.5)
                ang_off = rng.uniform(0, 2 * np.pi)
                shadow = _rotated_rect_mask(
                    s, cx + off * np.cos(ang_off), cy + off * np.sin(ang_off), long_side, short, angle
                )
                img[shadow] *= 0.55

            mask = _rotated_rect_mask(s, cx, cy, long_side, short, angle)
            if class_id == 1:
                color = rng.uniform(0.05, 0.35, 3)  # dark compact body
                img[mask] = color
            else:
                cab = rng.uniform(0.05, 0.3, 3)
                body = rng.uniform(0.82, 0.97, 3)  # bright cargo section
                axis = _axis_coord(s, cx, cy, angle)
                cab_zone = mask & (axis < -0.25 * long_side)  # front quarter
                img[mask] = body
                img[cab_zone] = cab

            if rng.uniform() < cfg.occlusion_prob:
                occ_w = long_side * rng.uniform(0.2, 0.35)
                shift = (long_side - occ_w) / 2
                occ_cx = cx + shift * np.cos(angle) * rng.choice([-1.0, 1.0])
                occ_cy = cy + shift * np.sin(angle) * rng.choice([-1.0, 1.0])
                occ = _rotated_rect_mask(s, occ_cx, occ_cy, occ_w, short * 1.3, angle)
                img[occ] = np.clip(base + rng.uniform(-0.08, 0.08, 3), 0, 1)
                mask = mask & ~occ

            placed.append(box)
            annotations.append(Annotation(image_id, class_id, box))
            masks.append(mask)
            break
        else:
            raise RuntimeError(f"could not place a vehicle in scene {index}")

    return Scene(image_id, (img * 255).round().astype(np.uint8), annotations, masks)


def synth_generate(cfg: SynthConfig, n_scenes: int, start_index: int = 0) -> list[Scene]:
    return [generate_scene(cfg, i) for i in range(start_index, start_index + n_scenes)]


# ---------------------------------------------------------------------------
# dataset directories


def write_dataset(path, scenes: list[Scene], splits: list[str], extra: dict | None = None) -> None:
    os.makedirs(os.path.join(path, "images"), exist_ok=True)
    entries = []
    annotations: list[Annotation] = []
    for scene, split in zip(scenes, splits):
        fname = f"images/{scene.image_id}.png"
        Image.fromarray(scene.image).save(os.path.join(path, fname))
        entries.append(
            {
                "id": scene.image_id,
                "file": fname,
                "width": int(scene.image.shape[1]),
                "height": int(scene.image.shape[0]),
                "split": split,
            }
        )
        annotations.extend(scene.annotations)
    write_annotations(os.path.join(path, "annotations.jsonl"), annotations)
    manifest = {"images": entries}
    if extra:
        manifest.update(extra)
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def load_dataset(path, split: str | None = None) -> list[Scene]:
    """Load a dataset directory; returns scenes (masks are not persisted)."""
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.isfile(manifest_path):
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    anns = read_annotations(os.path.join(path, "annotations.jsonl"))
    scenes = []
    for entry in manifest["images"]:
        if split is not None and entry.get("split") != split:
            continue
        img = np.asarray(Image.open(os.path.join(path, entry["file"])).convert("RGB"))
        scenes.append(Scene(entry["id"], img, anns.get(entry["id"], [])))
    return scenes


def scene_training_arrays(scene: Scene) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(image, gt boxes (N,4), gt classes (N,)) for the training loop."""
    boxes = np.array([a.box for a in scene.annotations], dtype=np.float64).reshape(-1, 4)
    classes = np.array([a.class_id for a in scene.annotations], dtype=np.int64)
    return scene.image, boxes, classes
