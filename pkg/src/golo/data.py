"""Synthetic shape scenes, augmentation and a COCO-style dataset layout.

Scenes hold uint8 RGB images ([H, W, 3]) with filled circles, squares and
triangles drawn over a noisy background.  Every shape of side ``s`` placed
at integer ``(x, y)`` has the tight box ``(x, y, s, s)``.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image as PILImage

from golo.config import DataConfig
from golo.errors import GenerationError, ParseError

CATEGORIES = ({"id": 1, "name": "circle"}, {"id": 2, "name": "square"}, {"id": 3, "name": "triangle"})
SUPERSAMPLE = 4
PLACEMENT_RETRIES = 200
MIN_BOX = 2.0


@dataclass
class Scene:
    image: np.ndarray                      # [H, W, 3] uint8
    annotations: list = field(default_factory=list)  # [{"bbox": [x, y, w, h], "category_id": k}]

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def tensor(self) -> np.ndarray:
        """[3, H, W] float image in [0, 1]."""
        return self.image.transpose(2, 0, 1).astype(np.float64) / 255.0

    def boxes(self) -> np.ndarray:
        return np.array([a["bbox"] for a in self.annotations], dtype=np.float64).reshape(-1, 4)

    def labels(self) -> np.ndarray:
        return np.array([a["category_id"] for a in self.annotations], dtype=np.int64)


def _coverage(kind: int, s: int) -> np.ndarray:
    """Anti-aliased [s, s] coverage of a shape filling an s x s box."""
    n = s * SUPERSAMPLE
    c = (np.arange(n) + 0.5) / SUPERSAMPLE
    yy, xx = np.meshgrid(c, c, indexing="ij")
    if kind == 1:
        r = s / 2
        inside = (xx - r) ** 2 + (yy - r) ** 2 <= r * r
    elif kind == 2:
        inside = np.ones_like(xx, dtype=bool)
    else:
        # apex at the top centre, base along the bottom edge
        inside = (yy >= 2 * np.abs(xx - s / 2))
    return inside.reshape(s, SUPERSAMPLE, s, SUPERSAMPLE).mean(axis=(1, 3))


def _overlaps(box, placed, gap: float) -> bool:
    x, y, w, h = box
    for px, py, pw, ph in placed:
        if x < px + pw + gap and px < x + w + gap and y < py + ph + gap and py < y + h + gap:
            return True
    return False


def generate_scene(seed: int, spec: DataConfig, size: Optional[tuple] = None) -> Scene:
    """Render a scene fully determined by ``seed`` and ``spec``."""
    rng = np.random.default_rng(seed)
    h, w = size or (spec.image_size, spec.image_size)
    bg = rng.uniform(0.3, 0.7, size=3)
    img = np.clip(bg + rng.normal(0.0, spec.noise, size=(h, w, 3)), 0.0, 1.0)
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    placed, annotations = [], []
    for _ in range(count):
        kind = int(rng.integers(1, len(CATEGORIES) + 1))
        for _attempt in range(PLACEMENT_RETRIES):
            s = int(rng.integers(spec.min_size, min(spec.max_size, h, w) + 1))
            x, y = int(rng.integers(0, w - s + 1)), int(rng.integers(0, h - s + 1))
            if not _overlaps((x, y, s, s), placed, spec.min_separation):
                break
        else:
            raise GenerationError(f"could not place object {len(placed) + 1} of {count} (seed {seed})")
        sign = np.where(rng.random(3) < 0.5, -1.0, 1.0)
        color = np.clip(bg + sign * rng.uniform(0.25, 0.45, size=3), 0.0, 1.0)
        cov = _coverage(kind, s)[..., None]
        region = img[y:y + s, x:x + s]
        img[y:y + s, x:x + s] = region * (1 - cov) + color * cov
        placed.append((x, y, s, s))
        annotations.append({"bbox": [float(x), float(y), float(s), float(s)], "category_id": kind})
    image = np.round(img * 255).astype(np.uint8)
    return Scene(image, annotations)


def hflip(scene: Scene) -> Scene:
    w = scene.width
    anns = [{**a, "bbox": [w - a["bbox"][0] - a["bbox"][2]] + a["bbox"][1:]} for a in scene.annotations]
    return Scene(np.ascontiguousarray(scene.image[:, ::-1]), anns)


def crop(scene: Scene, x0: int, y0: int, cw: int, ch: int, min_keep: float = 0.25) -> Scene:
    """Cut out a region; boxes keeping under ``min_keep`` of their area are dropped."""
    anns = []
    for a in scene.annotations:
        x, y, w, h = a["bbox"]
        nx1, ny1 = max(x, x0), max(y, y0)
        nx2, ny2 = min(x + w, x0 + cw), min(y + h, y0 + ch)
        if nx2 <= nx1 or ny2 <= ny1:
            continue
        if (nx2 - nx1) * (ny2 - ny1) < min_keep * w * h or min(nx2 - nx1, ny2 - ny1) < MIN_BOX:
            continue
        anns.append({**a, "bbox": [nx1 - x0, ny1 - y0, nx2 - nx1, ny2 - ny1]})
    return Scene(np.ascontiguousarray(scene.image[y0:y0 + ch, x0:x0 + cw]), anns)


def resize(scene: Scene, new_h: int, new_w: int) -> Scene:
    sx, sy = new_w / scene.width, new_h / scene.height
    pil = PILImage.fromarray(scene.image).resize((new_w, new_h), PILImage.BILINEAR)
    anns = [{**a, "bbox": [a["bbox"][0] * sx, a["bbox"][1] * sy, a["bbox"][2] * sx, a["bbox"][3] * sy]}
            for a in scene.annotations]
    return Scene(np.asarray(pil, dtype=np.uint8), anns)


def pad_to_multiple(scene: Scene, multiple: int = 32) -> Scene:
    h, w = scene.height, scene.width
    ph, pw = -(-h // multiple) * multiple, -(-w // multiple) * multiple
    if (ph, pw) == (h, w):
        return scene
    out = np.zeros((ph, pw, 3), dtype=np.uint8)
    out[:h, :w] = scene.image
    return Scene(out, copy.deepcopy(scene.annotations))


def multiscale_size(h: int, w: int, short: int, max_long: int) -> tuple[int, int]:
    scale = short / min(h, w)
    if max(h, w) * scale > max_long:
        scale = max_long / max(h, w)
    return max(1, round(h * scale)), max(1, round(w * scale))


def augment(scene: Scene, seed: int, policy: DataConfig) -> Scene:
    """Random flip, crop and multi-scale resize.

    Without multi-scale the crop is resized back to the input size so that
    image shapes stay fixed; with it the result is padded to multiples of 32.
    """
    rng = np.random.default_rng(seed)
    h, w = scene.height, scene.width
    if rng.random() < policy.flip_prob:
        scene = hflip(scene)
    if rng.random() < policy.crop_prob:
        ch, cw = int(rng.integers(h * 3 // 5, h + 1)), int(rng.integers(w * 3 // 5, w + 1))
        y0, x0 = int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1))
        scene = crop(scene, x0, y0, cw, ch)
        if not policy.multiscale:
            scene = resize(scene, h, w)
    if policy.multiscale:
        short = int(rng.integers(policy.min_short, policy.max_short + 1))
        scene = pad_to_multiple(resize(scene, *multiscale_size(scene.height, scene.width, short,
                                                               policy.max_long)))
    return scene


def scene_seed(root: int, *keys: int) -> int:
    return int(np.random.SeedSequence([root, *keys]).generate_state(1)[0])


def make_dataset(seed: int, spec: DataConfig, count: Optional[int] = None) -> list:
    return [generate_scene(scene_seed(seed, i), spec) for i in range(spec.num_images if count is None else count)]


def save_dataset(directory, scenes: Sequence[Scene]) -> dict:
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    for img_id, scene in enumerate(scenes, start=1):
        name = f"images/{img_id:06d}.png"
        PILImage.fromarray(scene.image).save(root / name)
        images.append({"id": img_id, "file_name": name, "width": scene.width, "height": scene.height})
        for a in scene.annotations:
            annotations.append({"id": len(annotations) + 1, "image_id": img_id,
                                "bbox": list(a["bbox"]), "category_id": a["category_id"]})
    manifest = {"images": images, "annotations": annotations, "categories": list(CATEGORIES)}
    tmp = root / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    tmp.replace(root / "manifest.json")
    return manifest


def _require(obj: dict, key: str, where: str, kind):
    if not isinstance(obj, dict) or key not in obj:
        raise ParseError(f"{where}: missing field '{key}'")
    value = obj[key]
    if not isinstance(value, kind) or isinstance(value, bool):
        raise ParseError(f"{where}: field '{key}' has wrong type {type(value).__name__}")
    return value


def validate_manifest(manifest) -> None:
    if not isinstance(manifest, dict):
        raise ParseError("manifest: expected a JSON object")
    images = _require(manifest, "images", "manifest", list)
    anns = _require(manifest, "annotations", "manifest", list)
    cats = _require(manifest, "categories", "manifest", list)
    cat_ids = {_require(c, "id", f"categories[{i}]", int) for i, c in enumerate(cats)}
    for i, c in enumerate(cats):
        _require(c, "name", f"categories[{i}]", str)
    sizes = {}
    for i, im in enumerate(images):
        where = f"images[{i}]"
        img_id = _require(im, "id", where, int)
        if img_id in sizes:
            raise ParseError(f"{where}: duplicate id {img_id}")
        _require(im, "file_name", where, str)
        sizes[img_id] = (_require(im, "width", where, int), _require(im, "height", where, int))
    seen = set()
    for i, a in enumerate(anns):
        where = f"annotations[{i}]"
        ann_id = _require(a, "id", where, int)
        if ann_id in seen:
            raise ParseError(f"{where}: duplicate id {ann_id}")
        seen.add(ann_id)
        image_id = _require(a, "image_id", where, int)
        if image_id not in sizes:
            raise ParseError(f"{where}: field 'image_id' refers to unknown image {image_id}")
        if _require(a, "category_id", where, int) not in cat_ids:
            raise ParseError(f"{where}: field 'category_id' refers to unknown category")
        bbox = _require(a, "bbox", where, list)
        if len(bbox) != 4 or not all(isinstance(v, (int, float)) and math.isfinite(v) for v in bbox):
            raise ParseError(f"{where}: field 'bbox' must be four finite numbers")


def load_dataset(directory) -> tuple[dict, list]:
    """Read ``manifest.json`` and its PNGs; returns (manifest, scenes in image order)."""
    root = Path(directory)
    text = (root / "manifest.json").read_text(encoding="utf-8")  # missing file -> OSError
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"manifest.json is not valid JSON: {exc}") from exc
    validate_manifest(manifest)
    by_image = {im["id"]: [] for im in manifest["images"]}
    for a in manifest["annotations"]:
        by_image[a["image_id"]].append({"bbox": list(a["bbox"]), "category_id": a["category_id"]})
    scenes = []
    for im in manifest["images"]:
        with PILImage.open(root / im["file_name"]) as pil:
            arr = np.asarray(pil.convert("RGB"), dtype=np.uint8)
        if arr.shape[:2] != (im["height"], im["width"]):
            raise ParseError(f"image {im['id']}: size {arr.shape[1]}x{arr.shape[0]} disagrees with manifest")
        scenes.append(Scene(arr, by_image[im["id"]]))
    return manifest, scenes


def collate(scenes: Sequence[Scene]):
    """Batch scenes into a [B, 3, H, W] array (zero padded) and normalised cxcywh targets."""
    from golo.boxes import xywh_to_cxcywh_normalized
    from golo.losses import Target

    h = max(s.height for s in scenes)
    w = max(s.width for s in scenes)
    h, w = -(-h // 32) * 32, -(-w // 32) * 32
    images = np.zeros((len(scenes), 3, h, w))
    targets = []
    for i, s in enumerate(scenes):
        images[i, :, :s.height, :s.width] = s.tensor()
        boxes = xywh_to_cxcywh_normalized(s.boxes(), w, h) if s.annotations else np.zeros((0, 4))
        targets.append(Target(boxes, s.labels() - 1))
    return images, targets
