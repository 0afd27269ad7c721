"""Run configuration, the training loop and test-split evaluation."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .detector import Detector, augment_pair, build_targets, detect_batch, joint_loss, preset
from .detector.model import DetectorConfig
from .errors import ConfigError, NonFiniteError
from .io import load_checkpoint, save_checkpoint
from .metrics import (
    EvalReport,
    binarize_logits,
    dice_score,
    log_average_miss_rate,
    mean_average_precision,
    reasonable_min_height,
    recall_at_fppi,
)
from .optim import SGD
from .sample import SpectralSample
from .synthetic import SceneSpec, generate_dataset, load_split, read_manifest
from .tensor import detect_anomaly

log = logging.getLogger(__name__)

SCENE_KEYS = ("image_size", "min_objects", "max_objects", "min_height", "max_height", "p_both",
              "p_visible_only", "p_thermal_only", "clutter", "noise", "time_of_day", "night_contrast", "contrast")
CHECKPOINT_NAME = "final.cfrt"
LOG_NAME = "train_log.jsonl"
CONFIG_NAME = "config.json"


@dataclass
class RunConfig:
    """Everything a run depends on. Flat keys; unknown keys are rejected on load."""

    # dataset
    data_dir: str = "data"
    n_train: int = 400
    n_test: int = 100
    data_seed: int = 0
    image_size: int = 96
    min_objects: int = 1
    max_objects: int = 3
    min_height: int = 16
    max_height: Optional[int] = None      # None: 48 for pedestrian, 40 for multiclass
    p_both: float = 0.5
    p_visible_only: float = 0.25
    p_thermal_only: float = 0.25
    clutter: float = 0.3
    noise: float = 0.08                  # default difficulty: low contrast and heavy noise keep the
    time_of_day: str = "day"             # task off the accuracy ceiling so fusion choices show
    night_contrast: float = 0.25
    contrast: float = 0.3
    # model
    preset: str = "pedestrian"
    fusion: str = "cfr"                  # loops=0 with fusion=cfr means the average-fusion baseline
    loops: int = 3
    channels: int = 16
    stem_widths: tuple = (8, 16)
    bn_stats_shared_across_loops: bool = True
    # optimizer
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 20
    batch_size: int = 8
    clip_norm: Optional[float] = 10.0
    warmup_steps: int = 50
    lr_decay_epoch: Optional[int] = 15
    augment: bool = True
    # loss and bookkeeping
    seg_weight: float = 1.0
    seed: int = 0
    out_dir: str = "run"
    checkpoint_every: int = 5

    def __post_init__(self):
        self.stem_widths = tuple(self.stem_widths)
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.seg_weight < 0:
            raise ConfigError("seg_weight must be >= 0")
        if self.loops < 0:
            raise ConfigError("loops must be >= 0")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object of flat keys")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stem_widths"] = list(self.stem_widths)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def with_overrides(self, **kw) -> "RunConfig":
        d = self.to_dict()
        d.update({k: v for k, v in kw.items() if v is not None})
        return RunConfig.from_dict(d)

    @property
    def effective_fusion(self) -> str:
        return "average" if self.fusion == "cfr" and self.loops == 0 else self.fusion

    @property
    def label(self) -> str:
        if self.effective_fusion == "cfr":
            return f"CFR_{self.loops}"
        return "Baseline" if self.effective_fusion == "average" else self.effective_fusion

    def detector_config(self) -> DetectorConfig:
        return preset(self.preset, image_size=self.image_size, stem_widths=self.stem_widths,
                      channels=self.channels, fusion=self.effective_fusion, loops=max(self.loops, 1),
                      bn_stats_shared_across_loops=self.bn_stats_shared_across_loops)

    def scene_spec(self) -> SceneSpec:
        d = {k: getattr(self, k) for k in SCENE_KEYS}
        num_classes = self.detector_config().num_classes
        if d["max_height"] is None:
            d["max_height"] = 48 if num_classes == 1 else 40
        return SceneSpec(**d, num_classes=num_classes, seed=self.data_seed)


# ---------------------------------------------------------------------------
# data


def ensure_dataset(cfg: RunConfig):
    """Manifest of ``cfg.data_dir``, generating the dataset if absent."""
    path = Path(cfg.data_dir)
    if not (path / "manifest.tsv").exists():
        return generate_dataset(cfg.scene_spec(), cfg.n_train, cfg.n_test, cfg.data_seed, path)
    return read_manifest(path)


def load_dataset(cfg: RunConfig, split: str) -> list[SpectralSample]:
    path = Path(cfg.data_dir)
    if not (path / "manifest.tsv").exists():
        raise FileNotFoundError(f"no dataset at {path}; run gen-data first")
    return load_split(read_manifest(path), split)


# ---------------------------------------------------------------------------
# training


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, op: str, detail: str = ""):
        self.epoch, self.batch, self.op = epoch, batch, op
        super().__init__(f"non-finite value at epoch {epoch}, batch {batch}, op {op}"
                         + (f" ({detail})" if detail else ""))


@dataclass
class TrainResult:
    model: Detector
    history: list = field(default_factory=list)
    checkpoint: Optional[Path] = None

    @property
    def final_loss(self) -> float:
        return self.history[-1]["loss"]


def learning_rate(cfg: RunConfig, epoch: int, step: int) -> float:
    lr = cfg.lr
    if cfg.warmup_steps and step < cfg.warmup_steps:
        lr *= (step + 1) / cfg.warmup_steps
    if cfg.lr_decay_epoch is not None and epoch >= cfg.lr_decay_epoch:
        lr *= 0.1
    return lr


def make_batch(samples: Sequence[SpectralSample]):
    vis = np.concatenate([s.visible for s in samples])
    thr = np.concatenate([s.thermal for s in samples])
    return vis, thr


def train_step(model: Detector, opt: SGD, batch: Sequence[SpectralSample], seg_weight: float):
    vis, thr = make_batch(batch)
    targets = build_targets([s.gt for s in batch], model.anchors, model.config.downsample)
    opt.zero_grad()
    out = model(vis, thr, training=True)
    terms = joint_loss(out, targets, seg_weight)
    terms.total.backward()
    opt.step()
    return terms


def train(cfg: RunConfig, samples: Optional[Sequence[SpectralSample]] = None, out_dir=None,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train a detector from ``cfg``; writes log and checkpoints when ``out_dir`` is given.

    All randomness (init, shuffling, augmentation) derives from ``cfg.seed``.
    """
    if samples is None:
        samples = load_dataset(cfg, "train")
    samples = list(samples)
    model = Detector(cfg.detector_config(), seed=cfg.seed)
    opt = SGD(model.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay, cfg.clip_norm)
    shuffle_ss, augment_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    augment_rng = np.random.default_rng(augment_ss)

    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / CONFIG_NAME).write_text(cfg.to_json() + "\n", encoding="utf-8")
        (out / LOG_NAME).write_text("", encoding="utf-8")

    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(samples))
        sums = {"loss": 0.0, "det": 0.0, "cls": 0.0, "loc": 0.0, "seg": 0.0}
        n_batches = 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [samples[i] for i in order[start:start + cfg.batch_size]]
            if cfg.augment:
                batch = [augment_pair(s, augment_rng) for s in batch]
            opt.lr = learning_rate(cfg, epoch, step)
            try:
                with detect_anomaly():
                    terms = train_step(model, opt, batch, cfg.seg_weight)
            except NonFiniteError as exc:
                raise TrainingDiverged(epoch, b, exc.op, str(exc)) from exc
            loss = terms.total.item()
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, b, "joint_loss")
            for k, v in (("loss", loss), ("det", terms.det), ("cls", terms.cls), ("loc", terms.loc),
                         ("seg", terms.seg)):
                sums[k] += v
            n_batches += 1
            step += 1
        entry = {"epoch": epoch + 1, "lr": opt.lr, "steps": step,
                 **{k: v / n_batches for k, v in sums.items()}, "seed": cfg.seed}
        history.append(entry)
        log.info("epoch %d loss %.4f det %.4f seg %.4f", epoch + 1, entry["loss"], entry["det"], entry["seg"])
        if out is not None:
            with open(out / LOG_NAME, "a", encoding="utf-8") as f:
                f.write(json.dumps(entry, sort_keys=True) + "\n")
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0 and epoch + 1 < cfg.epochs:
                save_checkpoint(out / f"epoch_{epoch + 1:03d}.cfrt", model.state_dict())
        if on_epoch is not None:
            on_epoch(entry)

    ckpt = None
    if out is not None:
        ckpt = out / CHECKPOINT_NAME
        save_checkpoint(ckpt, model.state_dict())
    return TrainResult(model, history, ckpt)


def load_model(cfg: RunConfig, checkpoint) -> Detector:
    model = Detector(cfg.detector_config(), seed=cfg.seed)
    model.load_state_dict(load_checkpoint(checkpoint))
    return model


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Evaluation:
    report: EvalReport
    detections: list
    masks_t: list
    masks_v: list


def mask_dice_per_loop(masks_t: Sequence[list], masks_v: Sequence[list]) -> list[float]:
    """Mean over images of DICE between the two spectra's binarized masks, one value per loop."""
    if not masks_t or not masks_t[0] or not masks_v[0]:
        return []
    n_loops = len(masks_t[0])
    return [float(np.mean([dice_score(binarize_logits(mt[i]), binarize_logits(mv[i]))
                           for mt, mv in zip(masks_t, masks_v)]))
            for i in range(n_loops)]


def evaluate(model: Detector, samples: Sequence[SpectralSample], config: Optional[dict] = None,
             seed: int = 0, fppi: float = 1.0) -> Evaluation:
    results = detect_batch(list(samples), model)
    dets = [r[0] for r in results]
    masks_t = [r[1] for r in results]
    masks_v = [r[2] for r in results]
    gts = [s.gt for s in samples]
    mAP, per_class = mean_average_precision(dets, gts, model.config.num_classes)
    min_h = reasonable_min_height(model.config.image_size)
    lamr = log_average_miss_rate(dets, gts, min_height=min_h, label=0)
    recall = recall_at_fppi(dets, gts, fppi, label=0, min_height=min_h)
    dice = mask_dice_per_loop(masks_t, masks_v) if model.config.fusion == "cfr" else []
    report = EvalReport(per_class, mAP, lamr, dice, dict(config or {}), seed, recall)
    return Evaluation(report, dets, masks_t, masks_v)
