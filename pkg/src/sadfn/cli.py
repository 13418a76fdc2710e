"""Command-line entry point: ``sadfn <subcommand> [flags]``.

Settings resolve as flags over ``--config`` file entries over built-in
defaults. Every subcommand writes ``run.log`` next to its outputs.
"""

from __future__ import annotations

import argparse
import logging
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .core import ShapeError, Tensor
from .experiment import save_outputs
from .io import FormatError, read_config, save_tns, write_config
from .metrics import (
    MetricReport,
    evaluate_report,
    format_table,
    full_sampled_report,
)
from .mri import SamplingMask, make_mask, zero_filled
from .networks import (
    SADFNSpec,
    bundle_sadfn,
    load_checkpoint,
    predict_labels,
    rec_net_forward,
    rec_spec_from_scalars,
    sadfn_forward,
    sadfn_spec_from_scalars,
    save_checkpoint,
    seg_net_forward,
    seg_spec_from_scalars,
    spec_scalars,
    unbundle_sadfn,
    wos_forward,
)
from .phantom import PhantomConfig, dataset_load, dataset_save, generate_dataset, tissue_histograms
from .training import (
    TrainConfig,
    desk_config,
    finetune_cascade,
    finetune_sadfn,
    full_config,
    prepare,
    pretrain_rec,
    pretrain_seg,
    spec_for,
    substream_seed,
    train_wos,
)

log = logging.getLogger("sadfn")


class CommandError(Exception):
    """Failure reported as a one-line diagnostic."""


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def resolve(defaults: dict, args: argparse.Namespace) -> dict:
    """Defaults, then ``--config`` entries, then flags that were given."""
    out = dict(defaults)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise CommandError(f"config file not found: {path}")
        file_vals = read_config(path)
        unknown = sorted(set(file_vals) - set(out))
        if unknown:
            raise CommandError(f"{path}: unknown config keys {unknown}")
        out.update(file_vals)
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


# -- helpers ------------------------------------------------------------------

def _load_data(path) -> list:
    p = Path(path)
    if not p.is_dir():
        raise CommandError(f"no samples found: {p} is not a directory")
    samples = dataset_load(p)
    if not samples:
        raise CommandError(f"no samples found in {p}")
    return samples


def _load_mask(path) -> SamplingMask:
    p = Path(path)
    if not p.exists():
        raise CommandError(f"mask file not found: {p}")
    return SamplingMask.load(p)


def _load_ckpt(path, frozen=None):
    p = Path(path)
    if not (p / "manifest.txt").exists():
        raise CommandError(f"checkpoint not found: {p}")
    return load_checkpoint(p, frozen)


class Model:
    """A loaded reconstruction model: ``model(x0, y, mask) -> image batch``."""

    def __init__(self, path):
        self.path = Path(path)
        params, scalars = _load_ckpt(path, frozen=True)
        self.stage = scalars.get("stage", "rec")
        self.name = {"rec": "Pre-RecNet", "wos": "SADFN-WOS", "sadfn": "SADFN",
                     "cascade": "Liu"}.get(self.stage, self.stage)
        if self.stage == "sadfn":
            self.spec = sadfn_spec_from_scalars(scalars)
            self.rec, self.seg, self.fusion = unbundle_sadfn(params)
            self.fusion.freeze()
        elif self.stage in ("rec", "wos", "cascade"):
            self.spec = rec_spec_from_scalars(scalars)
            self.params = params
        else:
            raise CommandError(f"{path}: stage {self.stage!r} is not a reconstruction model")
        self.n_blocks = self.spec.rec.n_blocks if self.stage == "sadfn" else self.spec.n_blocks

    def forward(self, x0, y, mask, features=None) -> Tensor:
        x0 = np.asarray(x0, dtype=np.float32)
        if self.stage == "sadfn":
            return sadfn_forward(x0, y, mask, self.rec, self.seg, self.fusion, self.spec,
                                 features=features)
        if self.stage == "wos":
            return wos_forward(x0, y, mask, self.params, self.spec)
        return rec_net_forward(x0, y, mask, self.params, self.spec)

    def __call__(self, x0, y, mask) -> np.ndarray:
        return self.forward(x0, y, mask).data[..., 0]


class Segmenter:
    def __init__(self, path):
        params, scalars = _load_ckpt(path, frozen=True)
        if scalars.get("stage") != "seg":
            raise CommandError(f"{path}: not a segmentation checkpoint")
        self.params, self.spec = params, seg_spec_from_scalars(scalars)

    def __call__(self, image) -> np.ndarray:
        probs, _ = seg_net_forward(np.asarray(image, np.float32), self.params, self.spec)
        return predict_labels(probs)[0]


# -- subcommands ----------------------------------------------------------------

DATA_DEFAULTS = {"count": 40, "size": 64, "seed": 0, "sigma": 0.03, "bias_amplitude": 0.05}


def cmd_gen_data(args, cfg):
    pc = PhantomConfig(h=cfg["size"], w=cfg["size"], seed=substream_seed(cfg["seed"], "data"),
                       sigmas={n: float(cfg["sigma"]) for n in ("BG", "GM", "WM", "CSF")},
                       bias_amplitude=float(cfg["bias_amplitude"]))
    samples = generate_dataset(pc, int(cfg["count"]), int(args.start))
    dataset_save(samples, args.out, pc)
    return f"wrote {len(samples)} phantoms to {args.out}"


MASK_DEFAULTS = {"kind": "cartesian1d", "fraction": 0.30, "size": 64, "seed": 0}


def cmd_gen_mask(args, cfg):
    size = int(cfg["size"])
    mask = make_mask(cfg["kind"], size, size, float(cfg["fraction"]),
                     substream_seed(cfg["seed"], "mask"))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    mask.save(out)
    rows = len(mask.rows())
    return f"wrote {mask.kind} mask to {out}: {int(mask.grid.sum())} samples, {rows} full rows"


TRAIN_KEYS = ("iterations", "batch_size", "lr", "beta1", "beta2", "seed", "eval_every",
              "scale", "n_blocks", "crop", "lam")


def _train_config(stage, args) -> TrainConfig:
    base = full_config(stage) if args.full_size else desk_config(stage)
    defaults = {k: v for k, v in base.as_dict().items() if k in TRAIN_KEYS}
    cfg = resolve(defaults, args)
    try:
        return TrainConfig.from_dict({**cfg, "stage": stage, "checkpoint_dir": str(Path(args.out) / "progress")})
    except (TypeError, ValueError) as exc:
        raise CommandError(f"invalid training config: {exc}") from None


def _finish_training(result, args, scalars):
    out = Path(args.out)
    save_checkpoint(result.params, out, scalars)
    result.write_csv(out / "curve.csv")
    last = result.last_eval()
    extra = " ".join(f"{k}={v:.4f}" for k, v in last.items() if k not in ("iter", "loss"))
    return f"saved checkpoint to {out} after {len(result.curve)} iterations {extra}".strip()


def cmd_train_rec(args, tc: TrainConfig):
    train, mask = _load_data(args.data), _load_mask(args.mask)
    holdout = _load_data(args.holdout) if args.holdout else None
    spec = spec_for(tc, train[0].image.shape[0])
    res = pretrain_rec(tc, train, mask, holdout)
    return _finish_training(res, args, {"stage": "rec", **spec_scalars(spec.rec)})


def cmd_train_wos(args, tc: TrainConfig):
    train, mask = _load_data(args.data), _load_mask(args.mask)
    holdout = _load_data(args.holdout) if args.holdout else None
    spec = spec_for(tc, train[0].image.shape[0])
    res = train_wos(tc, train, mask, holdout)
    return _finish_training(res, args, {"stage": "wos", **spec_scalars(spec.rec)})


def cmd_train_seg(args, tc: TrainConfig):
    train = _load_data(args.data)
    holdout = _load_data(args.holdout) if args.holdout else None
    spec = spec_for(tc, train[0].image.shape[0])
    res = pretrain_seg(tc, train, holdout)
    return _finish_training(res, args, {"stage": "seg", **spec_scalars(spec.seg)})


def _pre_nets(args):
    rec, rec_s = _load_ckpt(args.rec, frozen=True)
    seg, seg_s = _load_ckpt(args.seg, frozen=True)
    if rec_s.get("stage") != "rec" or seg_s.get("stage") != "seg":
        raise CommandError("--rec must be a rec checkpoint and --seg a seg checkpoint")
    rspec, sspec = rec_spec_from_scalars(rec_s), seg_spec_from_scalars(seg_s)
    return rec, seg, SADFNSpec(rspec, sspec, rspec.base_channels)


def cmd_finetune_sadfn(args, tc: TrainConfig):
    train, mask = _load_data(args.data), _load_mask(args.mask)
    holdout = _load_data(args.holdout) if args.holdout else None
    rec, seg, spec = _pre_nets(args)
    res = finetune_sadfn(tc, rec, seg, train, mask, holdout, spec)
    res.params = bundle_sadfn(rec, seg, res.params)
    return _finish_training(res, args, {"stage": "sadfn", **spec_scalars(spec)})


def cmd_finetune_cascade(args, tc: TrainConfig):
    train, mask = _load_data(args.data), _load_mask(args.mask)
    holdout = _load_data(args.holdout) if args.holdout else None
    rec, seg, spec = _pre_nets(args)
    res = finetune_cascade(tc, rec, seg, train, mask, holdout)
    return _finish_training(res, args, {"stage": "cascade", **spec_scalars(spec.rec)})


def cmd_reconstruct(args, cfg):
    samples, mask = _load_data(args.data), _load_mask(args.mask)
    model = Model(args.model)
    batch = prepare(samples, mask)
    out = model(batch.x0, batch.y, mask)
    save_outputs(args.out, out)
    return f"wrote {len(out)} reconstructions to {args.out}"


def cmd_evaluate(args, cfg):
    samples, mask = _load_data(args.data), _load_mask(args.mask)
    segment = Segmenter(args.seg)
    reports: list[MetricReport] = [evaluate_report(lambda x0, y, m: x0, segment, samples,
                                                   mask, "ZF", float(cfg["spacing"]))]
    for path in args.model or []:
        model = Model(path)
        reports.append(evaluate_report(lambda x0, y, m, f=model: f(x0[None], y[None], m)[0],
                                       segment, samples, mask, model.name,
                                       float(cfg["spacing"])))
    reports.append(full_sampled_report(segment, samples, spacing=float(cfg["spacing"])))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = format_table(reports, literature=args.literature)
    (out / "table.tsv").write_text(table)
    for rep in reports:
        (out / f"{rep.name}.csv").write_text(rep.to_csv())
    return table.rstrip()


def cmd_histogram(args, cfg):
    samples = _load_data(args.data)
    mask = _load_mask(args.mask) if args.mask else None
    table = tissue_histograms(samples, mask, int(cfg["bins"]))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(table.to_text())
    masses = " ".join(f"{c}={table.mode_mass(c):.3f}" for c in table.counts)
    return f"wrote {out}; mass within 5 bins of the mode: {masses}"


def cmd_dump_features(args, cfg):
    samples, mask = _load_data(args.data), _load_mask(args.mask)
    model = Model(args.model)
    if model.stage != "sadfn":
        raise CommandError(f"{args.model}: dump-features needs a sadfn checkpoint")
    idx = int(args.index)
    if not 0 <= idx < len(samples):
        raise CommandError(f"sample index {idx} out of range 0..{len(samples) - 1}")
    batch = prepare([samples[idx]], mask)
    feats: dict = {}
    model.forward(batch.x0, batch.y, mask, features=feats)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, t in feats.items():
        save_tns(out / f"{name}.tns", t.data[0])
    return f"wrote {len(feats)} feature tensors to {out}"


def cmd_timeit(args, cfg):
    samples, mask = _load_data(args.data), _load_mask(args.mask)
    batch = prepare(samples[:1], mask)
    lines = ["model\tseconds"]
    zf_t = _time(lambda: zero_filled(batch.y), int(cfg["repeat"]))
    lines.append(f"ZF\t{zf_t:.6f}")
    for path in args.model or []:
        model = Model(path)
        t = _time(lambda: model(batch.x0, batch.y, mask), int(cfg["repeat"]))
        lines.append(f"{model.name}\t{t:.6f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    return text.rstrip()


def _time(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(max(1, repeat)):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


# -- parser -------------------------------------------------------------------

def _add_config(p):
    p.add_argument("--config", help="key = value file; flags override its entries")


def _add_train_flags(p, stage):
    d = desk_config(stage)
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--holdout", help="holdout dataset directory for periodic evaluation")
    p.add_argument("--out", required=True, help="checkpoint directory to write")
    p.add_argument("--full-size", action="store_true",
                   help="start from the full-size schedule instead of the desk one")
    p.add_argument("--iterations", type=int, help=f"(default {d.iterations})")
    p.add_argument("--batch-size", type=int, dest="batch_size",
                   help=f"(default {d.batch_size})")
    p.add_argument("--lr", type=float, help=f"(default {d.lr:g})")
    p.add_argument("--beta1", type=float, help=f"(default {d.beta1})")
    p.add_argument("--beta2", type=float, help=f"(default {d.beta2})")
    p.add_argument("--seed", type=int, help="(default 0)")
    p.add_argument("--eval-every", type=int, dest="eval_every",
                   help=f"(default {d.eval_every})")
    p.add_argument("--scale", type=float, help=f"channel width factor (default {d.scale})")
    p.add_argument("--n-blocks", type=int, dest="n_blocks", help=f"(default {d.n_blocks})")
    p.add_argument("--crop", type=int, help="segmentation crop side, 0 = half the image "
                                            "(default 0)")
    p.add_argument("--lam", type=float, help=f"cascade segmentation weight (default {d.lam})")
    _add_config(p)


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show argparse defaults only where the help text has none of its own.

    Flags left unset default to None so that --config values can fill them.
    """

    def _get_help_string(self, action):
        if action.default is None or "(default" in (action.help or ""):
            return action.help
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sadfn", description=__doc__.splitlines()[0],
                                 formatter_class=_HelpFormatter)
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)
    fmt = _HelpFormatter

    p = sub.add_parser("gen-data", help="generate a labeled phantom dataset", formatter_class=fmt)
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--count", type=int, help=f"number of phantoms (default {DATA_DEFAULTS['count']})")
    p.add_argument("--size", type=int, help=f"image side (default {DATA_DEFAULTS['size']})")
    p.add_argument("--seed", type=int, help="(default 0)")
    p.add_argument("--start", type=int, default=0, help="index of the first phantom")
    p.add_argument("--sigma", type=float, help=f"tissue noise (default {DATA_DEFAULTS['sigma']})")
    p.add_argument("--bias-amplitude", type=float, dest="bias_amplitude",
                   help=f"(default {DATA_DEFAULTS['bias_amplitude']})")
    _add_config(p)

    p = sub.add_parser("gen-mask", help="generate an under-sampling mask", formatter_class=fmt)
    p.add_argument("--out", required=True, help="mask .pgm path (a .txt sidecar is written too)")
    p.add_argument("--kind", choices=("cartesian1d", "random2d"),
                   help=f"(default {MASK_DEFAULTS['kind']})")
    p.add_argument("--fraction", type=float, help=f"(default {MASK_DEFAULTS['fraction']})")
    p.add_argument("--size", type=int, help=f"(default {MASK_DEFAULTS['size']})")
    p.add_argument("--seed", type=int, help="(default 0)")
    _add_config(p)

    for name, stage, needs_mask, needs_pre in (
            ("train-rec", "rec", True, False), ("train-seg", "seg", False, False),
            ("train-wos", "wos", True, False), ("finetune-sadfn", "sadfn", True, True),
            ("finetune-cascade", "cascade", True, True)):
        p = sub.add_parser(name, help=f"{stage} training stage", formatter_class=fmt)
        _add_train_flags(p, stage)
        if needs_mask:
            p.add_argument("--mask", required=True, help="mask .pgm")
        if needs_pre:
            p.add_argument("--rec", required=True, help="Pre-RecNet checkpoint")
            p.add_argument("--seg", required=True, help="Pre-SegNet checkpoint")
        p.set_defaults(stage=stage)

    p = sub.add_parser("reconstruct", help="run a model on a dataset", formatter_class=fmt)
    p.add_argument("--model", required=True, help="rec, wos, cascade or sadfn checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True, help="directory for recon_NNNN.tns files")
    _add_config(p)

    p = sub.add_parser("evaluate", help="score models (PSNR/SSIM/Dice/HD95/AVD)",
                       formatter_class=fmt)
    p.add_argument("--data", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--seg", required=True, help="Pre-SegNet checkpoint used for scoring")
    p.add_argument("--model", action="append", help="reconstruction checkpoint (repeatable)")
    p.add_argument("--out", required=True, help="directory for table.tsv and per-model CSVs")
    p.add_argument("--spacing", type=float, help="pixel spacing for HD95 (default 1.0)")
    p.add_argument("--literature", action="store_true",
                   help="append published full-size values for comparison")
    _add_config(p)

    p = sub.add_parser("histogram", help="per-tissue intensity histograms", formatter_class=fmt)
    p.add_argument("--data", required=True)
    p.add_argument("--mask", help="histogram zero-filled reconstructions under this mask")
    p.add_argument("--bins", type=int, help="(default 32)")
    p.add_argument("--out", required=True, help="TSV table path")
    _add_config(p)

    p = sub.add_parser("dump-features", help="write MLFA and fusion-layer tensors",
                       formatter_class=fmt)
    p.add_argument("--model", required=True, help="sadfn checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--index", type=int, default=0, help="sample index")
    p.add_argument("--out", required=True)
    _add_config(p)

    p = sub.add_parser("timeit", help="forward wall time per model", formatter_class=fmt)
    p.add_argument("--data", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--model", action="append", help="checkpoint (repeatable)")
    p.add_argument("--repeat", type=int, help="(default 3)")
    p.add_argument("--out", help="optional TSV path")
    _add_config(p)
    return ap


SIMPLE = {
    "gen-data": (cmd_gen_data, DATA_DEFAULTS),
    "gen-mask": (cmd_gen_mask, MASK_DEFAULTS),
    "reconstruct": (cmd_reconstruct, {}),
    "evaluate": (cmd_evaluate, {"spacing": 1.0}),
    "histogram": (cmd_histogram, {"bins": 32}),
    "dump-features": (cmd_dump_features, {}),
    "timeit": (cmd_timeit, {"repeat": 3}),
}
TRAINING = {
    "train-rec": cmd_train_rec, "train-seg": cmd_train_seg, "train-wos": cmd_train_wos,
    "finetune-sadfn": cmd_finetune_sadfn, "finetune-cascade": cmd_finetune_cascade,
}


def _log_dir(args) -> Path | None:
    out = getattr(args, "out", None)
    if not out:
        return None
    p = Path(out)
    if args.command in ("gen-mask", "histogram", "timeit"):
        return p.parent
    return p


def _write_run_log(args, settings: dict, seconds: float, status: str) -> None:
    d = _log_dir(args)
    if d is None:
        return
    d.mkdir(parents=True, exist_ok=True)
    entries = {"command": args.command, "argv": " ".join(sys.argv[1:]),
               "version": version_string(), "seed": settings.get("seed", ""),
               **{f"config.{k}": v for k, v in settings.items()},
               "status": status, "wall_seconds": f"{seconds:.3f}"}
    write_config(d / "run.log", entries)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    t0 = time.perf_counter()
    settings: dict = {}
    try:
        if args.command in TRAINING:
            tc = _train_config(args.stage, args)
            settings = tc.as_dict()
            message = TRAINING[args.command](args, tc)
        else:
            fn, defaults = SIMPLE[args.command]
            settings = resolve(defaults, args)
            message = fn(args, settings)
    except (CommandError, FormatError, ShapeError, ValueError, KeyError, OSError,
            FloatingPointError, RuntimeError) as exc:
        msg = str(exc).strip("'\"").splitlines()[0] if str(exc) else type(exc).__name__
        print(f"sadfn {args.command}: error: {msg}", file=sys.stderr)
        try:
            _write_run_log(args, settings, time.perf_counter() - t0, f"failed: {msg}")
        except OSError:
            pass
        return 1
    _write_run_log(args, settings, time.perf_counter() - t0, "ok")
    print(message)
    return 0


if __name__ == "__main__":
    sys.exit(main())
