"""Desk-scale end-to-end experiment: data, mask, all training stages and
holdout scores for one seed, with every artifact written to disk."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io import save_tns, write_config
from .metrics import psnr
from .mri import make_mask_cartesian1d
from .networks import bundle_sadfn, desk_spec, load_checkpoint, save_checkpoint, spec_scalars
from .phantom import PhantomConfig, generate_dataset
from .training import (
    desk_config,
    finetune_sadfn,
    prepare,
    pretrain_rec,
    pretrain_seg,
    substream_seed,
    train_wos,
)

DESK_SIZE = 64
DESK_TRAIN = 32
DESK_HOLDOUT = 8
DESK_FRACTION = 0.30


@dataclass
class SeedOutcome:
    seed: int
    zero_filled_psnr: float
    rec_psnr: float
    wos_psnr: float
    sadfn_psnr: float
    dice: dict
    sadfn_curve_psnr: list
    losses: dict = field(default_factory=dict)
    frozen_identical: bool = True
    seconds: float = 0.0

    @property
    def sadfn_minus_wos(self) -> float:
        return self.sadfn_psnr - self.wos_psnr

    def summary(self) -> dict:
        out = {"seed": self.seed, "zero_filled_psnr": f"{self.zero_filled_psnr:.6f}",
               "rec_psnr": f"{self.rec_psnr:.6f}", "wos_psnr": f"{self.wos_psnr:.6f}",
               "sadfn_psnr": f"{self.sadfn_psnr:.6f}",
               "sadfn_minus_wos": f"{self.sadfn_minus_wos:.6f}"}
        out.update({k: f"{v:.6f}" for k, v in self.dice.items()})
        return out


def _holdout_psnr(outputs: np.ndarray, truth: np.ndarray) -> float:
    return float(np.mean([psnr(o, t) for o, t in zip(outputs, truth)]))


def run_desk_seed(seed: int, out_dir=None, iterations: int | None = None,
                  size: int = DESK_SIZE, n_train: int = DESK_TRAIN,
                  n_holdout: int = DESK_HOLDOUT) -> SeedOutcome:
    """Phantoms, 30% Cartesian mask, Pre-RecNet, Pre-SegNet, WOS and SADFN.

    ``iterations`` overrides every stage's desk schedule (for quick runs).
    """
    t0 = time.perf_counter()
    over = {} if iterations is None else {"iterations": iterations}
    data = generate_dataset(PhantomConfig(h=size, w=size, seed=substream_seed(seed, "data")),
                            n_train + n_holdout)
    train, holdout = data[:n_train], data[n_train:]
    mask = make_mask_cartesian1d(size, size, DESK_FRACTION, substream_seed(seed, "mask"))
    hold = prepare(holdout, mask)
    truth = hold.truth[..., 0]
    zf = _holdout_psnr(hold.x0[..., 0], truth)

    spec = desk_spec(size=size)
    d = None if out_dir is None else Path(out_dir)
    rec = pretrain_rec(desk_config("rec", seed, **over), train, mask, holdout)
    seg = pretrain_seg(desk_config("seg", seed, **over), train, holdout)
    wos = train_wos(desk_config("wos", seed, **over), train, mask, holdout)
    if d is not None:
        d.mkdir(parents=True, exist_ok=True)
        save_checkpoint(rec.params, d / "rec_ckpt", {"stage": "rec", **spec_scalars(spec.rec)})
        save_checkpoint(seg.params, d / "seg_ckpt", {"stage": "seg", **spec_scalars(spec.seg)})
        rec_ref, seg_ref = load_checkpoint(d / "rec_ckpt")[0], load_checkpoint(d / "seg_ckpt")[0]
    else:
        rec_ref, seg_ref = rec.params.copy(), seg.params.copy()
    sad = finetune_sadfn(desk_config("sadfn", seed, **over), rec.params, seg.params,
                         train, mask, holdout)
    frozen_ok = rec.params.equals(rec_ref) and seg.params.equals(seg_ref)

    dice = {k: v for k, v in seg.last_eval().items() if k.startswith("dice_")}
    outcome = SeedOutcome(
        seed, zf, rec.last_eval()["psnr"], wos.last_eval()["psnr"], sad.last_eval()["psnr"],
        dice, [r["psnr"] for r in sad.curve if "psnr" in r],
        {"rec": rec.losses(), "seg": seg.losses(), "wos": wos.losses(),
         "sadfn": sad.losses()}, frozen_ok)

    if d is not None:
        mask.save(d / "mask.pgm")
        for name, res in (("rec", rec), ("seg", seg), ("wos", wos), ("sadfn", sad)):
            res.write_csv(d / f"{name}_curve.csv")
        save_checkpoint(wos.params, d / "wos_ckpt", {"stage": "wos", **spec_scalars(spec.rec)})
        save_checkpoint(bundle_sadfn(rec.params, seg.params, sad.params), d / "sadfn_ckpt",
                        {"stage": "sadfn", **spec_scalars(spec)})
        write_config(d / "summary.txt", outcome.summary())
    outcome.seconds = time.perf_counter() - t0
    return outcome


def save_outputs(directory, outputs) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(outputs):
        save_tns(d / f"recon_{i:04d}.tns", np.asarray(img, dtype=np.float32))
