"""Procedural aligned visible/thermal scenes with controllable complementarity.

Each object is tagged ``both``, ``visible_only`` or ``thermal_only``. A
visible_only object leaves the thermal channel untouched (and vice versa), so
the mix of tags sets how complementary the two spectra are. Night scenes
scale the visible-channel object contrast by ``night_contrast``.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Protocol

import numpy as np

from .errors import ConfigError
from .io import load_tensor, save_tensor
from .sample import VISIBILITY_TAGS, GroundTruth, SpectralSample, rasterize_boxes

log = logging.getLogger(__name__)

# width/height per class: person, car, bicycle
CLASS_ASPECT = (0.41, 2.0, 1.0)
CLASS_NAMES = ("person", "car", "bicycle")
MAX_PLACEMENT_ATTEMPTS = 100


@dataclass
class SceneSpec:
    image_size: int = 96
    min_objects: int = 1
    max_objects: int = 3
    min_height: int = 16
    max_height: int = 48
    p_both: float = 0.5
    p_visible_only: float = 0.25
    p_thermal_only: float = 0.25
    clutter: float = 0.3
    noise: float = 0.03
    time_of_day: str = "day"
    night_contrast: float = 0.25
    contrast: float = 1.0
    num_classes: int = 1
    seed: int = 0

    def __post_init__(self):
        probs = (self.p_both, self.p_visible_only, self.p_thermal_only)
        if min(probs) < 0 or abs(sum(probs) - 1.0) > 1e-9:
            raise ConfigError(f"visibility probabilities must be nonnegative and sum to 1, got {probs}")
        if self.time_of_day not in ("day", "night"):
            raise ConfigError(f"time_of_day must be 'day' or 'night', got {self.time_of_day!r}")
        if not 1 <= self.num_classes <= len(CLASS_ASPECT):
            raise ConfigError(f"num_classes must be in [1, {len(CLASS_ASPECT)}]")
        if not 0 < self.min_height <= self.max_height:
            raise ConfigError("object height range must satisfy 0 < min_height <= max_height")
        widest = max(CLASS_ASPECT[: self.num_classes])
        if self.max_height >= self.image_size or widest * self.max_height >= self.image_size:
            raise ConfigError("largest object does not fit the image")
        if self.contrast <= 0:
            raise ConfigError("contrast must be positive")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigError("object count range must satisfy 0 <= min_objects <= max_objects")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scene keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _streams(seed: int):
    layout, background, noise = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(layout), np.random.default_rng(background), np.random.default_rng(noise)


def render_background(spec: SceneSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Object-free visible (3, H, W) and thermal (1, H, W) layers for ``seed``."""
    _, rng, _ = _streams(seed)
    n = spec.image_size
    yy, xx = np.mgrid[0:n, 0:n] / (n - 1)

    base = rng.uniform(0.35, 0.6)
    tint = rng.uniform(-0.05, 0.05, size=3)
    gx, gy = rng.uniform(-0.1, 0.1, size=2)
    visible = np.empty((3, n, n))
    for c in range(3):
        visible[c] = base + tint[c] + gx * (xx - 0.5) + gy * (yy - 0.5)

    t_base = rng.uniform(0.15, 0.3)
    tx, ty = rng.uniform(-0.05, 0.05, size=2)
    thermal = (t_base + tx * (xx - 0.5) + ty * (yy - 0.5))[None].copy()

    for _ in range(int(round(spec.clutter * 8))):
        w, h = rng.integers(6, n // 2, size=2)
        x0, y0 = rng.integers(0, n - w), rng.integers(0, n - h)
        color = rng.uniform(0.1, 0.9, size=3)
        visible[:, y0:y0 + h, x0:x0 + w] = 0.5 * visible[:, y0:y0 + h, x0:x0 + w] + 0.5 * color[:, None, None]
    for _ in range(int(round(spec.clutter * 6))):
        # wide or round warm patches, never person-shaped
        h = int(rng.integers(4, 12))
        w = min(int(h * rng.uniform(1.5, 3.0)), n - 1)
        x0, y0 = rng.integers(0, n - w), rng.integers(0, n - h)
        thermal[0, y0:y0 + h, x0:x0 + w] += rng.uniform(0.08, 0.2)
    return visible, thermal


def _ellipse(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:h, 0:w]
    ny = (yy + 0.5 - h / 2) / (h / 2)
    nx = (xx + 0.5 - w / 2) / (w / 2)
    r2 = nx ** 2 + ny ** 2
    return r2 <= 1.0, r2


def _place_objects(spec: SceneSpec, rng: np.random.Generator):
    n = spec.image_size
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    boxes, labels = [], []
    for _ in range(count):
        cls = int(rng.integers(spec.num_classes))
        for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
            h = int(rng.integers(spec.min_height, spec.max_height + 1))
            w = max(3, int(round(h * CLASS_ASPECT[cls] * rng.uniform(0.9, 1.1))))
            if w >= n - 2:
                continue
            x0 = int(rng.integers(1, n - w))
            y0 = int(rng.integers(1, n - h))
            cand = (x0, y0, x0 + w, y0 + h)
            # 2-pixel gap between objects keeps masks separable
            if all(cand[0] >= b[2] + 2 or b[0] >= cand[2] + 2 or cand[1] >= b[3] + 2 or b[1] >= cand[3] + 2
                   for b in boxes):
                boxes.append(cand)
                labels.append(cls)
                break
        else:
            break
    return count, boxes, labels


def generate_scene(spec: SceneSpec, seed: Optional[int] = None) -> SpectralSample:
    """Deterministic in (spec, seed); ``seed`` defaults to ``spec.seed``."""
    seed = spec.seed if seed is None else int(seed)
    layout_rng, _, noise_rng = _streams(seed)
    visible, thermal = render_background(spec, seed)
    n = spec.image_size

    requested, boxes, labels = _place_objects(spec, layout_rng)
    probs = np.array([spec.p_both, spec.p_visible_only, spec.p_thermal_only])
    tags = []
    vis_gain = spec.contrast * (spec.night_contrast if spec.time_of_day == "night" else 1.0)
    for (x0, y0, x1, y1) in boxes:
        tag = VISIBILITY_TAGS[int(layout_rng.choice(3, p=probs / probs.sum()))]
        tags.append(tag)
        h, w = y1 - y0, x1 - x0
        inside, r2 = _ellipse(h, w)
        # draw every random number regardless of tag so layouts stay comparable across mixes
        d_vis = layout_rng.uniform(0.3, 0.45)
        tint = layout_rng.uniform(-0.08, 0.08, size=3)
        tint -= tint.mean()
        stripe_period = int(layout_rng.integers(3, 7))
        d_thr = layout_rng.uniform(0.35, 0.55)
        if tag != "thermal_only":
            region = visible[:, y0:y1, x0:x1]
            sign = -1.0 if region.mean() > 0.5 else 1.0
            stripes = 0.08 * np.where((np.arange(h) // stripe_period) % 2 == 0, 1.0, -1.0)[:, None]
            local = region.mean(axis=(1, 2))[:, None, None]
            fill = local + vis_gain * (sign * d_vis + tint[:, None, None] + stripes[None])
            region[:, inside] = np.broadcast_to(fill, region.shape)[:, inside]
        if tag != "visible_only":
            region = thermal[:, y0:y1, x0:x1]
            hot = region + spec.contrast * d_thr * (1.0 - 0.4 * np.minimum(r2, 1.0))
            region[:, inside] = hot[:, inside]

    if spec.noise > 0:
        visible = visible + noise_rng.normal(0.0, spec.noise, size=visible.shape)
        thermal = thermal + noise_rng.normal(0.0, spec.noise, size=thermal.shape)
    visible = np.clip(visible, 0.0, 1.0).astype(np.float32)[None]
    thermal = np.clip(thermal, 0.0, 1.0).astype(np.float32)[None]

    box_arr = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    mask = rasterize_boxes(box_arr, n, n)[None, None]
    gt = GroundTruth(box_arr, np.array(labels, dtype=np.int64), mask, tuple(tags))
    meta = {"seed": seed, "spec": spec.to_dict()}
    if len(boxes) < requested:
        meta["reduced_from"] = requested
        log.debug("seed %d: placed %d of %d objects", seed, len(boxes), requested)
    return SpectralSample(visible, thermal, gt, meta)


# ---------------------------------------------------------------------------
# on-disk datasets

MANIFEST_NAME = "manifest.tsv"
MANIFEST_COLUMNS = ("id", "split", "seed", "visible", "thermal", "mask", "boxes", "labels", "visibility")


@dataclass
class Manifest:
    path: Path
    spec: SceneSpec
    seed: int
    rows: list

    def split(self, name: str) -> list:
        return [r for r in self.rows if r["split"] == name]

    def digest(self) -> str:
        return hashlib.sha256(self.path.read_bytes()).hexdigest()


def _format_boxes(boxes: np.ndarray) -> str:
    return ";".join(",".join(f"{v:g}" for v in b) for b in boxes)


def _parse_boxes(text: str) -> np.ndarray:
    if not text:
        return np.zeros((0, 4))
    return np.array([[float(v) for v in part.split(",")] for part in text.split(";")])


def split_seeds(seed: int, n_train: int, n_test: int) -> tuple[list, list]:
    """Distinct per-sample seeds, so train and test never share a scene."""
    drawn = np.random.default_rng(seed).choice(2 ** 31 - 1, size=n_train + n_test, replace=False)
    return [int(s) for s in drawn[:n_train]], [int(s) for s in drawn[n_train:]]


def generate_dataset(spec: SceneSpec, n_train: int, n_test: int, seed: int, out_dir) -> Manifest:
    if n_train <= 0 or n_test <= 0:
        raise ConfigError("n_train and n_test must be positive")
    out = Path(out_dir)
    try:
        out.mkdir(exist_ok=True)
        (out / "samples").mkdir(exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc

    train_seeds, test_seeds = split_seeds(seed, n_train, n_test)
    rows = []
    for split, seeds in (("train", train_seeds), ("test", test_seeds)):
        for i, s in enumerate(seeds):
            sid = f"{split}-{i:05d}"
            sample = generate_scene(spec, s)
            paths = {k: f"samples/{sid}_{k}.cfrt" for k in ("visible", "thermal", "mask")}
            save_tensor(out / paths["visible"], sample.visible)
            save_tensor(out / paths["thermal"], sample.thermal)
            save_tensor(out / paths["mask"], sample.gt.mask)
            rows.append({
                "id": sid, "split": split, "seed": s, **paths,
                "boxes": _format_boxes(sample.gt.boxes),
                "labels": ",".join(str(v) for v in sample.gt.labels),
                "visibility": ",".join(sample.gt.visibility),
            })

    path = out / MANIFEST_NAME
    tmp = out / (MANIFEST_NAME + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"# seed\t{seed}\n")
        f.write(f"# spec\t{json.dumps(spec.to_dict(), sort_keys=True)}\n")
        f.write("\t".join(MANIFEST_COLUMNS) + "\n")
        for r in rows:
            f.write("\t".join(str(r[c]) for c in MANIFEST_COLUMNS) + "\n")
    tmp.replace(path)
    return Manifest(path, spec, seed, rows)


def read_manifest(path) -> Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    seed, spec, rows, header = None, None, [], None
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if line.startswith("# seed\t"):
                seed = int(line.split("\t", 1)[1])
            elif line.startswith("# spec\t"):
                spec = SceneSpec.from_dict(json.loads(line.split("\t", 1)[1]))
            elif header is None:
                header = line.split("\t")
            elif line:
                rows.append(dict(zip(header, line.split("\t"))))
    for r in rows:
        r["seed"] = int(r["seed"])
    return Manifest(path, spec, seed, rows)


def load_sample(manifest: Manifest, row: dict) -> SpectralSample:
    root = manifest.path.parent
    boxes = _parse_boxes(row["boxes"])
    labels = [int(v) for v in row["labels"].split(",")] if row["labels"] else []
    tags = tuple(row["visibility"].split(",")) if row["visibility"] else ()
    mask = load_tensor(root / row["mask"]).astype(np.uint8)
    gt = GroundTruth(boxes, labels, mask, tags)
    meta = {"id": row["id"], "seed": row["seed"], "spec": manifest.spec.to_dict() if manifest.spec else None}
    return SpectralSample(load_tensor(root / row["visible"]), load_tensor(root / row["thermal"]), gt, meta)


def load_split(manifest: Manifest, split: str) -> list[SpectralSample]:
    return [load_sample(manifest, r) for r in manifest.split(split)]


class PairConverter(Protocol):
    """Maps a sample id to (visible image path, thermal image path) for external datasets."""

    def __call__(self, sample_id: str) -> tuple[Path, Path]: ...


def load_external_pair(sample_id: str, converter: PairConverter, gt: GroundTruth) -> SpectralSample:
    """Build a sample from real image files located by ``converter``."""
    from PIL import Image

    vis_path, thr_path = converter(sample_id)
    visible = np.asarray(Image.open(vis_path).convert("RGB"), dtype=np.float32) / 255.0
    thermal = np.asarray(Image.open(thr_path).convert("L"), dtype=np.float32) / 255.0
    if visible.shape[:2] != thermal.shape:
        raise ValueError(f"{sample_id}: visible {visible.shape[:2]} and thermal {thermal.shape} sizes differ")
    return SpectralSample(visible.transpose(2, 0, 1)[None], thermal[None, None], gt, {"id": sample_id})
