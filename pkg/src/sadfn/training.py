"""Losses and training stages.

Stages: ``rec`` (Pre-RecNet), ``seg`` (Pre-SegNet), ``sadfn`` (fine-tune the
deep fusion network against frozen pre-trained nets), ``cascade`` (train
the reconstruction net through a frozen segmenter) and ``wos`` (the
segmentation-free control, trained from scratch).

All randomness comes from one integer seed split into named substreams, so
a run is reproducible from its config alone.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .core import Adam, ParamStore, ShapeError, Tensor
from .core.tensor import log
from .metrics import TISSUES, dice, psnr, ssim
from .mri import undersample, zero_filled
from .networks import (
    SADFNSpec,
    desk_spec,
    frozen_taps,
    init_fusion_params,
    init_rec_params,
    init_seg_params,
    init_wos_params,
    full_spec,
    predict_labels,
    rec_net_forward,
    sadfn_forward,
    save_checkpoint,
    seg_net_forward,
    spec_scalars,
    wos_forward,
)
from .phantom import Sample, augment

log_ = logging.getLogger(__name__)

STAGES = ("rec", "seg", "sadfn", "cascade", "wos")
PROB_FLOOR = 1e-12
SUBSTREAMS = {"data": 0, "init": 1, "batch": 2, "mask": 3}


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named purpose (data, init, batch, mask)."""
    if name not in SUBSTREAMS:
        raise KeyError(f"unknown random substream {name!r}")
    return np.random.default_rng([int(seed), SUBSTREAMS[name]])


def substream_seed(seed: int, name: str) -> int:
    return int(substream(seed, name).integers(2 ** 31))


class TrainingDiverged(FloatingPointError):
    """Loss or gradient went non-finite; ``params`` holds the last good snapshot."""

    def __init__(self, message: str, params: ParamStore | None = None, iteration: int = 0):
        super().__init__(message)
        self.params = params
        self.iteration = iteration


class FrozenParameterChanged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: str = "rec"
    iterations: int = 300
    batch_size: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    eval_every: int = 50
    checkpoint_dir: str | None = None
    scale: float = 0.5
    n_blocks: int = 2
    crop: int = 0
    lam: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.eval_every < 0:
            raise ValueError("eval_every must be >= 0")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.crop < 0 or self.crop % 4:
            raise ValueError(f"crop must be a non-negative multiple of 4, got {self.crop}")

    def as_dict(self) -> dict:
        return {k: ("" if v is None else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {k: v for k, v in values.items() if k in cls.__dataclass_fields__}
        if known.get("checkpoint_dir") == "":
            known["checkpoint_dir"] = None
        for k in ("iterations", "batch_size", "seed", "eval_every", "n_blocks", "crop"):
            if k in known:
                known[k] = int(known[k])
        for k in ("lr", "beta1", "beta2", "scale", "lam"):
            if k in known:
                known[k] = float(known[k])
        return cls(**known)


# Full-size reference schedules; desk ones cut iterations for a CPU run.
FULL_SCHEDULES = {
    "rec": dict(iterations=32000, batch_size=4, lr=1e-3, scale=1.0, n_blocks=5),
    "seg": dict(iterations=32000, batch_size=16, lr=1e-3, scale=1.0, n_blocks=5, crop=128),
    "sadfn": dict(iterations=12000, batch_size=4, lr=1e-4, scale=1.0, n_blocks=5),
    "cascade": dict(iterations=12000, batch_size=4, lr=1e-4, scale=1.0, n_blocks=5),
    "wos": dict(iterations=32000, batch_size=4, lr=1e-3, scale=1.0, n_blocks=5),
}
DESK_SCHEDULES = {
    "rec": dict(iterations=300, batch_size=4, lr=1e-3),
    "seg": dict(iterations=300, batch_size=16, lr=1e-3),
    "sadfn": dict(iterations=300, batch_size=4, lr=1e-4),
    "cascade": dict(iterations=300, batch_size=4, lr=1e-4),
    "wos": dict(iterations=300, batch_size=4, lr=1e-3),
}


def full_config(stage: str, seed: int = 0, **overrides) -> TrainConfig:
    return TrainConfig(stage=stage, seed=seed, **{**FULL_SCHEDULES[stage], **overrides})


def desk_config(stage: str, seed: int = 0, **overrides) -> TrainConfig:
    return TrainConfig(stage=stage, seed=seed, **{**DESK_SCHEDULES[stage], **overrides})


def spec_for(cfg: TrainConfig, size: int) -> SADFNSpec:
    if cfg.scale == 1.0 and size == 240:
        return full_spec(cfg.n_blocks)
    return desk_spec(cfg.n_blocks, cfg.scale, size)


# -- losses -------------------------------------------------------------------

def loss_rec(pred: Tensor, target) -> Tensor:
    """Squared error summed over pixels, averaged over the batch."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target)
    if t.ndim == pred.ndim - 1 and pred.shape[-1] == 1:
        t = t[..., None]
    if t.shape != pred.shape:
        raise ShapeError(f"loss_rec: prediction {pred.shape} vs target {t.shape}")
    if pred.ndim < 3 or pred.shape[0] == 0:
        raise ShapeError("loss_rec needs a non-empty batch")
    diff = pred - Tensor(t.astype(pred.dtype))
    return (diff * diff).sum() / pred.shape[0]


def one_hot(labels, n_classes: int = 4) -> np.ndarray:
    lab = np.asarray(labels)
    if lab.size and (lab.min() < 0 or lab.max() >= n_classes):
        raise ValueError(f"labels must lie in 0..{n_classes - 1}, got range "
                         f"{lab.min()}..{lab.max()}")
    return np.eye(n_classes, dtype=np.float32)[lab.astype(np.int64)]


def loss_seg(probs: Tensor, labels) -> Tensor:
    """Pixel-wise cross-entropy summed over batch, pixels and classes."""
    n_classes = probs.shape[-1]
    target = one_hot(labels, n_classes)
    if target.shape != probs.shape:
        raise ShapeError(f"loss_seg: probabilities {probs.shape} vs labels {np.shape(labels)}")
    return -(log(probs, PROB_FLOOR) * Tensor(target.astype(probs.dtype))).sum()


# -- data ---------------------------------------------------------------------

@dataclass
class RecData:
    """Stacked arrays for reconstruction stages: ``(N,H,W,1)`` images."""
    truth: np.ndarray
    x0: np.ndarray
    y: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.truth)

    def take(self, idx) -> "RecData":
        return RecData(self.truth[idx], self.x0[idx], self.y[idx], self.labels[idx])


def prepare(samples, mask) -> RecData:
    if not samples:
        raise ValueError("no samples found")
    truth = np.stack([s.image for s in samples]).astype(np.float32)
    y = undersample(truth, mask)
    x0 = zero_filled(y).astype(np.float32)
    labels = np.stack([s.label for s in samples])
    return RecData(truth[..., None], x0[..., None], y, labels)


def random_crop(sample: Sample, side: int, rng: np.random.Generator) -> Sample:
    h, w = sample.image.shape
    if side > min(h, w):
        raise ShapeError(f"crop {side} larger than image {h}x{w}")
    i = int(rng.integers(h - side + 1))
    j = int(rng.integers(w - side + 1))
    return Sample(sample.image[i:i + side, j:j + side], sample.label[i:i + side, j:j + side])


# -- results ------------------------------------------------------------------

@dataclass
class TrainResult:
    params: ParamStore
    curve: list[dict] = field(default_factory=list)
    columns: tuple = ("iter", "loss", "psnr", "ssim")

    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.curve])

    def last_eval(self) -> dict:
        evals = [r for r in self.curve if r.get(self.columns[2]) is not None]
        return evals[-1] if evals else {}

    def to_csv(self) -> str:
        lines = [",".join(self.columns)]
        for r in self.curve:
            cells = []
            for c in self.columns:
                v = r.get(c)
                if v is None:
                    cells.append("")
                elif c == "iter":
                    cells.append(str(v))
                else:
                    cells.append(f"{v:.9g}")
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())


def _snapshot(params: ParamStore) -> ParamStore:
    """Frozen copy used for evaluation, so no graph is recorded."""
    return params.copy().freeze()


def _train_loop(cfg: TrainConfig, params: ParamStore, n_train: int,
                step_loss: Callable, evaluate: Callable | None, columns: tuple,
                after_step: Callable | None = None,
                checkpoint: Callable | None = None) -> TrainResult:
    """Adam over ``params.trainable()``.

    ``step_loss(idx, rng)`` builds the loss graph for the sampled indices.
    ``evaluate(snapshot)`` returns a dict of the extra curve columns.
    Indices are drawn uniformly with replacement from the batch substream.
    """
    result = TrainResult(params, [], columns)
    if n_train < 1:
        raise ValueError("no samples found")
    rng = substream(cfg.seed, "batch")
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2)
    last_good = params.copy()
    for it in range(1, cfg.iterations + 1):
        idx = rng.integers(0, n_train, size=cfg.batch_size)
        opt.zero_grad()
        loss = step_loss(idx, rng)
        value = float(loss.data)
        if not math.isfinite(value):
            _abort(cfg, last_good, it, f"loss became {value} at iteration {it}")
        loss.backward()
        try:
            opt.step()
        except FloatingPointError as exc:
            _abort(cfg, last_good, it, f"iteration {it}: {exc}")
        if after_step is not None:
            after_step()
        row = {"iter": it, "loss": value}
        if evaluate is not None and cfg.eval_every and (it % cfg.eval_every == 0
                                                        or it == cfg.iterations):
            row.update(evaluate(_snapshot(params)))
            last_good = params.copy()
            if checkpoint is not None:
                checkpoint(params, it)
            log_.info("%s iter %d loss %.6g %s", cfg.stage, it, value,
                      " ".join(f"{k}={v:.4f}" for k, v in row.items() if k not in ("iter", "loss")))
        result.curve.append(row)
    if checkpoint is not None and (cfg.iterations == 0 or not cfg.eval_every):
        checkpoint(params, cfg.iterations)
    return result


def _abort(cfg, last_good: ParamStore, it: int, message: str):
    if cfg.checkpoint_dir:
        save_checkpoint(last_good, Path(cfg.checkpoint_dir), {"stage": cfg.stage,
                                                              "iteration": it - 1})
    raise TrainingDiverged(f"training diverged: {message}", last_good, it)


def _rec_evaluator(forward: Callable, holdout: RecData | None):
    if holdout is None or len(holdout) == 0:
        return None

    def evaluate(snap: ParamStore) -> dict:
        out = forward(snap, holdout).data[..., 0]
        gt = holdout.truth[..., 0]
        return {"psnr": float(np.mean([psnr(o, g) for o, g in zip(out, gt)])),
                "ssim": float(np.mean([ssim(o, g) for o, g in zip(out, gt)]))}
    return evaluate


def _checkpointer(cfg: TrainConfig, scalars: dict, extra_check: Callable | None = None):
    def checkpoint(params: ParamStore, it: int) -> None:
        if extra_check is not None:
            extra_check(it)
        if cfg.checkpoint_dir:
            save_checkpoint(params, Path(cfg.checkpoint_dir), {**scalars, "iteration": it})
    return checkpoint


def _scalars(cfg: TrainConfig, spec_part) -> dict:
    return {"stage": cfg.stage, **spec_scalars(spec_part)}


# -- stages -------------------------------------------------------------------

def pretrain_rec(cfg: TrainConfig, train, mask, holdout=None,
                 params: ParamStore | None = None) -> TrainResult:
    """Pre-RecNet on ``loss_rec``; ``params`` continues from an existing store."""
    data = prepare(train, mask)
    hold = prepare(holdout, mask) if holdout else None
    spec = spec_for(cfg, data.truth.shape[1]).rec
    if params is None:
        params = init_rec_params(spec, substream(cfg.seed, "init"))

    def fwd(ps, d):
        return rec_net_forward(d.x0, d.y, mask, ps, spec)

    def step_loss(idx, rng):
        b = data.take(idx)
        return loss_rec(fwd(params, b), b.truth)

    return _train_loop(cfg, params, len(data), step_loss, _rec_evaluator(fwd, hold),
                       ("iter", "loss", "psnr", "ssim"),
                       checkpoint=_checkpointer(cfg, _scalars(cfg, spec)))


def train_wos(cfg: TrainConfig, train, mask, holdout=None) -> TrainResult:
    """Segmentation-free control network, trained from scratch."""
    data = prepare(train, mask)
    hold = prepare(holdout, mask) if holdout else None
    spec = spec_for(cfg, data.truth.shape[1]).rec
    params = init_wos_params(spec, substream(cfg.seed, "init"))

    def fwd(ps, d):
        return wos_forward(d.x0, d.y, mask, ps, spec)

    def step_loss(idx, rng):
        b = data.take(idx)
        return loss_rec(fwd(params, b), b.truth)

    return _train_loop(cfg, params, len(data), step_loss, _rec_evaluator(fwd, hold),
                       ("iter", "loss", "psnr", "ssim"),
                       checkpoint=_checkpointer(cfg, _scalars(cfg, spec)))


def segment_images(seg_params: ParamStore, spec, images) -> np.ndarray:
    probs, _ = seg_net_forward(np.asarray(images, dtype=np.float32), seg_params, spec)
    return predict_labels(probs)


def dice_by_tissue(pred: np.ndarray, labels: np.ndarray) -> dict:
    return {f"dice_{t.lower()}": float(np.mean([dice(p, g, c) for p, g in zip(pred, labels)]))
            for t, c in TISSUES.items()}


SEG_COLUMNS = ("iter", "loss", "dice_gm", "dice_wm", "dice_csf")


def _seg_evaluator(spec, holdout):
    if not holdout:
        return None
    imgs = np.stack([s.image for s in holdout])
    labs = np.stack([s.label for s in holdout])

    def evaluate(snap: ParamStore) -> dict:
        return dice_by_tissue(segment_images(snap, spec, imgs), labs)
    return evaluate


def pretrain_seg(cfg: TrainConfig, train, holdout=None) -> TrainResult:
    """Pre-SegNet on ``loss_seg`` over augmented random crops.

    Batch-norm running statistics are updated after every step.
    """
    if not train:
        raise ValueError("no samples found")
    size = train[0].image.shape[0]
    spec = spec_for(cfg, size).seg
    side = cfg.crop or size // 2
    params = init_seg_params(spec, substream(cfg.seed, "init"))
    stats: dict = {}

    def step_loss(idx, rng):
        crops = [augment(random_crop(train[i], side, rng), rng) for i in idx]
        imgs = np.stack([c.image for c in crops])
        probs, _ = seg_net_forward(imgs, params, spec, training=True, stats=stats)
        return loss_seg(probs, np.stack([c.label for c in crops]))

    def after_step():
        for k, v in stats.items():
            params.buffers[k] = v
        stats.clear()

    return _train_loop(cfg, params, len(train), step_loss, _seg_evaluator(spec, holdout),
                       SEG_COLUMNS,
                       after_step=after_step,
                       checkpoint=_checkpointer(cfg, _scalars(cfg, spec)))


def _frozen_guard(*pairs):
    """Check that every frozen store still equals its reference copy."""
    def check(it):
        for live, ref, name in pairs:
            if not live.equals(ref):
                raise FrozenParameterChanged(f"{name} changed during fine-tuning "
                                             f"(detected at iteration {it})")
    return check


def finetune_sadfn(cfg: TrainConfig, rec_params: ParamStore, seg_params: ParamStore, train,
                   mask, holdout=None, spec: SADFNSpec | None = None) -> TrainResult:
    """Train the deep fusion network and the 1x1 fusion convolutions only.

    Both pre-trained stores are frozen in place; their bit-identity is
    checked at every evaluation point and at the end.
    """
    rec_params.freeze()
    seg_params.freeze()
    rec_ref, seg_ref = rec_params.copy(), seg_params.copy()
    data = prepare(train, mask)
    hold = prepare(holdout, mask) if holdout else None
    spec = spec or spec_for(cfg, data.truth.shape[1])
    params = init_fusion_params(spec, rec_params, substream(cfg.seed, "init"))

    # the frozen half of the network sees fixed inputs, so compute it once
    taps = frozen_taps(data.x0, data.y, mask, rec_params, seg_params, spec)

    def fwd(ps, d, t=None):
        return sadfn_forward(d.x0, d.y, mask, rec_params, seg_params, ps, spec, taps=t)

    def step_loss(idx, rng):
        b = data.take(idx)
        return loss_rec(fwd(params, b, [t[idx] for t in taps]), b.truth)

    guard = _frozen_guard((rec_params, rec_ref, "Pre-RecNet"), (seg_params, seg_ref, "Pre-SegNet"))
    result = _train_loop(cfg, params, len(data), step_loss, _rec_evaluator(fwd, hold),
                         ("iter", "loss", "psnr", "ssim"),
                         checkpoint=_checkpointer(cfg, {"stage": cfg.stage,
                                                        **spec_scalars(spec.rec)}, guard))
    guard(cfg.iterations)
    return result


def finetune_cascade(cfg: TrainConfig, rec_params: ParamStore, seg_params: ParamStore, train,
                     mask, holdout=None, lam: float | None = None) -> TrainResult:
    """Train a copy of Pre-RecNet on ``loss_rec + lam * loss_seg`` through a frozen segmenter."""
    lam = cfg.lam if lam is None else lam
    if lam < 0:
        raise ValueError("lam must be >= 0")
    seg_params.freeze()
    seg_ref = seg_params.copy()
    params = rec_params.copy().unfreeze()
    data = prepare(train, mask)
    hold = prepare(holdout, mask) if holdout else None
    full = spec_for(cfg, data.truth.shape[1])
    spec = full.rec

    def fwd(ps, d):
        return rec_net_forward(d.x0, d.y, mask, ps, spec)

    def step_loss(idx, rng):
        b = data.take(idx)
        out = fwd(params, b)
        loss = loss_rec(out, b.truth)
        if lam > 0:
            probs, _ = seg_net_forward(out, seg_params, full.seg, training=False)
            loss = loss + loss_seg(probs, b.labels) * lam
        return loss

    guard = _frozen_guard((seg_params, seg_ref, "Pre-SegNet"))
    result = _train_loop(cfg, params, len(data), step_loss, _rec_evaluator(fwd, hold),
                         ("iter", "loss", "psnr", "ssim"),
                         checkpoint=_checkpointer(cfg, _scalars(cfg, spec), guard))
    guard(cfg.iterations)
    return result
