"""Pre-RecNet, Pre-SegNet, the segmentation-aware deep fusion network and
its capacity-matched control (WOS), all on channels-last tensors.

Every forward takes an explicit :class:`ParamStore`; nothing here mutates
parameters. Passing a list as ``trace`` records one :class:`TraceRow` per
layer, which is how shape conformance with the reference layer layouts is checked.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .core import (
    ParamStore,
    ShapeError,
    Tensor,
    batchnorm,
    concat_channels,
    conv2d,
    conv2d_transposed,
    maxpool2,
    relu,
    softmax_channels,
    upsample_bilinear2x,
)
from .io import FormatError, load_tns, save_tns
from .mri import data_fidelity

FULL_WIDTH = 32
N_TAPS = 10
BN_MOMENTUM = 0.9


def scaled(channels: int, scale: float) -> int:
    return max(1, int(round(channels * scale)))


@dataclass
class RecNetSpec:
    n_blocks: int = 5
    base_channels: int = FULL_WIDTH
    size: int = 240


@dataclass
class SegNetSpec:
    ladder: tuple = (32, 64, 128)
    n_classes: int = 4
    size: int = 240

    @property
    def tap_channels(self) -> list[int]:
        a, b, c = self.ladder
        return [a, a, b, b, c, c, b, b, a, a]


@dataclass
class SADFNSpec:
    rec: RecNetSpec = field(default_factory=RecNetSpec)
    seg: SegNetSpec = field(default_factory=SegNetSpec)
    fusion_width: int = FULL_WIDTH
    fusion_depth: int = 4

    def __post_init__(self):
        if self.fusion_width != self.rec.base_channels:
            raise ValueError("fusion width must equal the reconstruction width")
        if not 1 <= self.fusion_depth <= 4:
            raise ValueError("fusion depth must be between 1 and 4")


def full_spec(n_blocks: int = 5) -> SADFNSpec:
    return SADFNSpec(RecNetSpec(n_blocks, 32, 240), SegNetSpec((32, 64, 128), 4, 240), 32)


def desk_spec(n_blocks: int = 2, scale: float = 0.5, size: int = 64) -> SADFNSpec:
    """All widths multiplied by ``scale`` (0.5 gives rec width 16, ladder 16/32/64)."""
    w = scaled(FULL_WIDTH, scale)
    ladder = tuple(scaled(c, scale) for c in (32, 64, 128))
    return SADFNSpec(RecNetSpec(n_blocks, w, size), SegNetSpec(ladder, 4, size), w)


class TraceRow(NamedTuple):
    name: str
    input: tuple
    kernel: tuple | None
    stride: int | None
    filters: int | None
    activation: str | None
    output: tuple


def _shape(t: Tensor) -> tuple:
    s = t.shape[1:]
    return s[:2] if s[-1] == 1 else s


# -- initialisation -----------------------------------------------------------

def _he(rng: np.random.Generator, k: int, cin: int, cout: int, dtype) -> np.ndarray:
    std = np.sqrt(2.0 / (k * k * cin))
    return (rng.standard_normal((k, k, cin, cout)) * std).astype(dtype)


def _add_conv(ps: ParamStore, name: str, rng, k: int, cin: int, cout: int, dtype) -> None:
    ps.add(f"{name}.weight", _he(rng, k, cin, cout, dtype))
    ps.add(f"{name}.bias", np.zeros(cout, dtype=dtype))


def _add_bn(ps: ParamStore, name: str, c: int, dtype) -> None:
    ps.add(f"{name}.bn.gamma", np.ones(c, dtype=dtype))
    ps.add(f"{name}.bn.beta", np.zeros(c, dtype=dtype))
    ps.add_buffer(f"{name}.bn.mean", np.zeros(c, dtype=dtype))
    ps.add_buffer(f"{name}.bn.var", np.ones(c, dtype=dtype))


def rec_layer_widths(spec: RecNetSpec) -> list[tuple[int, int, int]]:
    """(kernel, c_in, c_out) of the five convolutions in one block."""
    f = spec.base_channels
    return [(3, 1, f), (3, f, f), (3, f, f), (3, f, f), (3, f, 1)]


def wos_layer_widths(spec: RecNetSpec) -> list[tuple[int, int, int]]:
    f = spec.base_channels
    layers = []
    cin = 1
    for _ in range(4):
        layers += [(3, cin, 2 * f), (1, 2 * f, f)]
        cin = f
    return layers + [(3, f, 1)]


def init_rec_params(spec: RecNetSpec, rng: np.random.Generator, dtype=np.float32,
                    prefix: str = "") -> ParamStore:
    ps = ParamStore()
    for b in range(spec.n_blocks):
        for i, (k, cin, cout) in enumerate(rec_layer_widths(spec), 1):
            _add_conv(ps, f"{prefix}block{b}.conv{i}", rng, k, cin, cout, dtype)
    return ps


def init_wos_params(spec: RecNetSpec, rng: np.random.Generator, dtype=np.float32) -> ParamStore:
    ps = ParamStore()
    for b in range(spec.n_blocks):
        for i, (k, cin, cout) in enumerate(wos_layer_widths(spec), 1):
            _add_conv(ps, f"block{b}.conv{i}", rng, k, cin, cout, dtype)
    return ps


def _seg_layers(spec: SegNetSpec):
    a, b, c = spec.ladder
    return [("conv1", 3, 1, a), ("conv2", 3, a, a), ("conv3", 3, a, b), ("conv4", 3, b, b),
            ("conv5", 3, b, c), ("conv6", 3, c, c), ("deconv1", 3, c, b),
            ("conv7", 3, 2 * b, b), ("conv8", 3, b, b), ("deconv2", 3, b, a),
            ("conv9", 3, 2 * a, a), ("conv10", 3, a, a)]


def init_seg_params(spec: SegNetSpec, rng: np.random.Generator, dtype=np.float32) -> ParamStore:
    ps = ParamStore()
    for name, k, cin, cout in _seg_layers(spec):
        _add_conv(ps, name, rng, k, cin, cout, dtype)
        _add_bn(ps, name, cout, dtype)
    _add_conv(ps, "conv11", rng, 3, spec.ladder[0], spec.n_classes, dtype)
    return ps


def init_fusion_params(spec: SADFNSpec, rec_params: ParamStore, rng: np.random.Generator,
                       dtype=np.float32) -> ParamStore:
    """Trainable store of the fine-tuning stage.

    The deep fusion network starts as a copy of the pre-trained
    reconstruction weights; every fusion 1x1 convolution starts as a
    pass-through (identity on reconstruction channels, zero on
    segmentation channels), so the untrained SADFN reproduces Pre-RecNet.
    """
    f = spec.fusion_width
    ps = ParamStore()
    for name, t in rec_params.items():
        ps.add(f"dfn.{name}", Tensor(t.data.astype(dtype)))
    _add_conv(ps, "mlfa", rng, 1, sum(spec.seg.tap_channels), f, dtype)
    passthrough = np.zeros((1, 1, 2 * f, f), dtype=dtype)
    passthrough[0, 0, :f, :] = np.eye(f, dtype=dtype)
    for b in range(spec.rec.n_blocks):
        for i in range(1, spec.fusion_depth + 1):
            ps.add(f"fuse.block{b}.conv{i}.weight", passthrough.copy())
            ps.add(f"fuse.block{b}.conv{i}.bias", np.zeros(f, dtype=dtype))
    return ps


# -- forward passes -----------------------------------------------------------

def as_image_tensor(x) -> Tensor:
    """(H,W), (N,H,W) or (N,H,W,1) -> (N,H,W,1) tensor."""
    if isinstance(x, Tensor):
        if x.ndim == 4:
            return x
        if x.ndim == 3:
            return x.reshape(x.shape + (1,))
        return x.reshape((1,) + x.shape + (1,))
    a = np.asarray(x)
    if a.ndim == 2:
        a = a[None]
    if a.ndim == 3:
        a = a[..., None]
    return Tensor(a.astype(np.float32) if a.dtype != np.float64 else a)


def _conv(x, ps: ParamStore, name: str, act: str, trace, label=None, kernel=None):
    w, b = ps[f"{name}.weight"], ps[f"{name}.bias"]
    out = conv2d(x, w, b)
    if act == "ReLU":
        out = relu(out)
    if trace is not None:
        k = w.shape[0]
        trace.append(TraceRow(label or name, _shape(x), (k, k), 1, w.shape[3], act,
                              _shape(out)))
    return out


def rec_block(x: Tensor, y, mask, ps: ParamStore, prefix: str, n_convs: int,
              trace=None, fuse=None) -> Tensor:
    """Conv stack, global residual add, data fidelity.

    ``fuse(i, h)`` (optional) transforms the output of conv ``i`` before
    it feeds the next layer; this is where segmentation features enter.
    """
    h = x
    for i in range(1, n_convs):
        h = _conv(h, ps, f"{prefix}.conv{i}", "ReLU", trace, f"Conv{i}")
        if fuse is not None:
            h = fuse(i, h)
    h = _conv(h, ps, f"{prefix}.conv{n_convs}", "Linear", trace, f"Conv{n_convs}")
    out = data_fidelity(x + h, y, mask)
    if trace is not None:
        trace.append(TraceRow("Data Fidelity", _shape(h), None, None, None, None, _shape(out)))
    return out


def rec_net_forward(x0, y, mask, params: ParamStore, spec: RecNetSpec, trace=None,
                    prefix: str = "") -> Tensor:
    x = as_image_tensor(x0)
    for b in range(spec.n_blocks):
        x = rec_block(x, y, mask, params, f"{prefix}block{b}", 5,
                      trace if b == 0 else None)
    return x


def wos_forward(x0, y, mask, params: ParamStore, spec: RecNetSpec, trace=None) -> Tensor:
    x = as_image_tensor(x0)
    for b in range(spec.n_blocks):
        x = rec_block(x, y, mask, params, f"block{b}", 9, trace if b == 0 else None)
    return x


sadfn_wos_forward = wos_forward


def _seg_stage(x, ps, name, training, stats, trace, label, transposed=False):
    w, b = ps[f"{name}.weight"], ps[f"{name}.bias"]
    out = conv2d_transposed(x, w, b) if transposed else conv2d(x, w, b)
    mean_key, var_key = f"{name}.bn.mean", f"{name}.bn.var"
    out, new = batchnorm(out, ps[f"{name}.bn.gamma"], ps[f"{name}.bn.beta"],
                         ps.buffers[mean_key], ps.buffers[var_key], training, BN_MOMENTUM)
    if training and stats is not None:
        stats[mean_key], stats[var_key] = new
    out = relu(out)
    if trace is not None:
        trace.append(TraceRow(label, _shape(x), (3, 3), 2 if transposed else 1,
                              w.shape[3], "ReLU", _shape(out)))
    return out


def seg_net_forward(img, params: ParamStore, spec: SegNetSpec, training: bool = False,
                    stats: dict | None = None, trace=None):
    """U-Net forward.

    Returns ``(probabilities, taps)`` with probabilities ``(N,H,W,C)`` and
    the ten post-activation outputs of Conv1..Conv10 at native resolution.
    In training mode batch statistics are used and, if ``stats`` is a
    dict, the updated running statistics are written into it.
    """
    x = as_image_tensor(img)
    h, w = x.shape[1:3]
    if h % 4 or w % 4:
        raise ShapeError(f"segmentation input must be divisible by 4, got {h}x{w}")

    def stage(t, name, label, transposed=False):
        return _seg_stage(t, params, name, training, stats, trace, label, transposed)

    def pool(t, label):
        out = maxpool2(t)
        if trace is not None:
            trace.append(TraceRow(label, _shape(t), None, 2, None, None, _shape(out)))
        return out

    t1 = stage(x, "conv1", "Conv1")
    t2 = stage(t1, "conv2", "Conv2")
    t3 = stage(pool(t2, "MaxPool1"), "conv3", "Conv3")
    t4 = stage(t3, "conv4", "Conv4")
    t5 = stage(pool(t4, "MaxPool2"), "conv5", "Conv5")
    t6 = stage(t5, "conv6", "Conv6")
    d1 = stage(t6, "deconv1", "Deconv1", transposed=True)
    t7 = stage(concat_channels(d1, t4), "conv7", "Conv7")
    t8 = stage(t7, "conv8", "Conv8")
    d2 = stage(t8, "deconv2", "Deconv2", transposed=True)
    t9 = stage(concat_channels(d2, t2), "conv9", "Conv9")
    t10 = stage(t9, "conv10", "Conv10")
    logits = _conv(t10, params, "conv11", "Linear", trace, "Conv11")
    probs = softmax_channels(logits)
    if trace is not None:
        trace.append(TraceRow("Softmax", _shape(logits), None, None, None, "Softmax",
                              _shape(logits)[:2]))
    return probs, [t1, t2, t3, t4, t5, t6, t7, t8, t9, t10]


def predict_labels(probs: Tensor) -> np.ndarray:
    """Argmax label map ``(N,H,W)`` from class probabilities."""
    return probs.data.argmax(axis=-1).astype(np.uint8)


def mlfa_aggregate(taps, params: ParamStore, trace=None) -> Tensor:
    """Upsample all taps to full resolution, stack them, compress with 1x1 conv + ReLU."""
    if len(taps) != N_TAPS:
        raise ShapeError(f"expected {N_TAPS} segmentation taps, got {len(taps)}")
    full = max(t.shape[1] for t in taps)
    ups = []
    for t in taps:
        while t.shape[1] < full:
            t = upsample_bilinear2x(t)
        ups.append(t)
    if all(not t.requires_grad for t in ups):
        thick = Tensor(np.concatenate([t.data for t in ups], axis=-1))
    else:
        thick = ups[0]
        for t in ups[1:]:
            thick = concat_channels(thick, t)
    w = params["mlfa.weight"]
    if w.shape[2] != thick.shape[-1]:
        raise ShapeError(f"MLFA weights expect {w.shape[2]} channels, taps give "
                         f"{thick.shape[-1]}")
    return _conv(thick, params, "mlfa", "ReLU", trace, "MLFA")


def fusion_layer(rec_feat: Tensor, seg_feat: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Concatenate reconstruction and segmentation features, 1x1 conv + ReLU."""
    if rec_feat.shape != seg_feat.shape:
        raise ShapeError(f"fusion inputs differ: {rec_feat.shape} vs {seg_feat.shape}")
    if weight.shape[2] != 2 * rec_feat.shape[-1]:
        raise ShapeError(f"fusion weights {weight.shape} do not fit width {rec_feat.shape[-1]}")
    return relu(conv2d(concat_channels(rec_feat, seg_feat), weight, bias))


def check_frozen(*stores: ParamStore) -> None:
    for ps in stores:
        if not ps.all_frozen:
            bad = [k for k, _ in ps.trainable()][:3]
            raise ValueError(f"pre-trained store has trainable entries, e.g. {bad}")


def frozen_taps(x0, y, mask, rec_params: ParamStore, seg_params: ParamStore,
                spec: SADFNSpec) -> list[np.ndarray]:
    """Pre-SegNet taps of the Pre-RecNet output; constant while both are frozen."""
    check_frozen(rec_params, seg_params)
    x_pre = rec_net_forward(x0, y, mask, rec_params, spec.rec)
    _, taps = seg_net_forward(x_pre, seg_params, spec.seg, training=False)
    return [t.data for t in taps]


def segmentation_features(x_pre, seg_params: ParamStore, fusion_params: ParamStore,
                          spec: SADFNSpec, trace=None) -> Tensor:
    _, taps = seg_net_forward(x_pre, seg_params, spec.seg, training=False)
    return mlfa_aggregate(taps, fusion_params, trace)


def sadfn_forward(x0, y, mask, rec_params: ParamStore, seg_params: ParamStore,
                  fusion_params: ParamStore, spec: SADFNSpec, trace=None,
                  features: dict | None = None, taps=None) -> Tensor:
    """Frozen Pre-RecNet -> frozen Pre-SegNet -> MLFA -> deep fusion network.

    ``features``, if a dict, receives the shared MLFA tensor and every
    fused feature map (for inspection / dumps). ``taps`` may carry
    precomputed ``frozen_taps`` output for the same inputs.
    """
    check_frozen(rec_params, seg_params)
    if taps is None:
        x_pre = rec_net_forward(x0, y, mask, rec_params, spec.rec)
        s = segmentation_features(x_pre, seg_params, fusion_params, spec, trace)
    else:
        s = mlfa_aggregate([Tensor(t) for t in taps], fusion_params, trace)
    if features is not None:
        features["mlfa"] = s

    def make_fuse(b):
        def fuse(i, h):
            if i > spec.fusion_depth:
                return h
            name = f"fuse.block{b}.conv{i}"
            out = fusion_layer(h, s, fusion_params[f"{name}.weight"],
                               fusion_params[f"{name}.bias"])
            if trace is not None and b == 0:
                trace.append(TraceRow(f"Fuse{i}", _shape(h)[:2] + (2 * h.shape[-1],),
                                      (1, 1), 1, out.shape[-1], "ReLU", _shape(out)))
            if features is not None:
                features[name] = out
            return out
        return fuse

    x = as_image_tensor(x0)
    for b in range(spec.rec.n_blocks):
        x = rec_block(x, y, mask, fusion_params, f"dfn.block{b}", 5,
                      trace if b == 0 else None, make_fuse(b))
    return x


def bundle_sadfn(rec_params: ParamStore, seg_params: ParamStore,
                 fusion_params: ParamStore) -> ParamStore:
    """One store holding a complete SADFN: ``pre_rec.*``, ``pre_seg.*``, ``fusion.*``."""
    out = ParamStore()
    out.update(rec_params, "pre_rec.")
    out.update(seg_params, "pre_seg.")
    out.update(fusion_params, "fusion.")
    return out


def unbundle_sadfn(bundle: ParamStore) -> tuple[ParamStore, ParamStore, ParamStore]:
    """Inverse of ``bundle_sadfn``; the pre-trained parts come back frozen."""
    parts = []
    for prefix, frozen in (("pre_rec.", True), ("pre_seg.", True), ("fusion.", None)):
        ps = ParamStore()
        for k, t in bundle.items():
            if k.startswith(prefix):
                keep = bundle.is_frozen(k) if frozen is None else frozen
                ps.add(k[len(prefix):], Tensor(t.data), frozen=keep)
        for k, b in bundle.buffers.items():
            if k.startswith(prefix):
                ps.add_buffer(k[len(prefix):], b)
        parts.append(ps)
    return tuple(parts)


def sadfn_spec_from_scalars(s: dict) -> SADFNSpec:
    def sub(prefix):
        return {k[len(prefix):]: v for k, v in s.items() if k.startswith(prefix)}
    return SADFNSpec(rec_spec_from_scalars(sub("rec.")), seg_spec_from_scalars(sub("seg.")),
                     int(s["fusion_width"]), int(s["fusion_depth"]))


def count_fusion_sites(params: ParamStore) -> int:
    return sum(1 for k in params if k.startswith("fuse.") and k.endswith(".weight"))


# -- checkpoints --------------------------------------------------------------

def spec_scalars(spec) -> dict:
    out = {}
    for k, v in asdict(spec).items():
        if isinstance(v, dict):
            out.update({f"{k}.{n}": x for n, x in v.items()})
        else:
            out[k] = v
    return {k: ",".join(map(str, v)) if isinstance(v, (tuple, list)) else v
            for k, v in out.items()}


def save_checkpoint(params: ParamStore, directory, scalars: dict | None = None) -> None:
    """Directory of ``<name>.tns`` files plus ``manifest.txt``.

    Manifest lines are ``spec <key> <value>`` and
    ``param <name> <dims> <trainable|frozen|buffer>``.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = [f"spec {k} {v}" for k, v in (scalars or {}).items()]
    for name, t in params.items():
        save_tns(d / f"{name}.tns", t.data)
        flag = "frozen" if params.is_frozen(name) else "trainable"
        lines.append(f"param {name} {'x'.join(map(str, t.shape)) or '-'} {flag}")
    for name, b in params.buffers.items():
        save_tns(d / f"{name}.tns", b)
        lines.append(f"param {name} {'x'.join(map(str, b.shape))} buffer")
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")


def _parse_scalar(v: str):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    if "," in v:
        return tuple(_parse_scalar(x) for x in v.split(","))
    return v


def load_checkpoint(directory, frozen: bool | None = None) -> tuple[ParamStore, dict]:
    """Read a checkpoint; ``frozen`` overrides the stored flags when given."""
    d = Path(directory)
    man = d / "manifest.txt"
    if not man.exists():
        raise FormatError(f"missing checkpoint manifest {man}")
    ps = ParamStore()
    scalars = {}
    for n, line in enumerate(man.read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "spec" and len(parts) == 3:
            scalars[parts[1]] = _parse_scalar(parts[2])
            continue
        if parts[0] != "param" or len(parts) != 4:
            raise FormatError(f"{man}:{n}: malformed line {line!r}")
        _, name, dims, flag = parts
        arr = load_tns(d / f"{name}.tns")
        expect = () if dims == "-" else tuple(int(x) for x in dims.split("x"))
        if arr.shape != expect:
            raise FormatError(f"{d / (name + '.tns')}: shape {arr.shape}, manifest says {expect}")
        if flag == "buffer":
            ps.add_buffer(name, arr)
        else:
            is_frozen = flag == "frozen" if frozen is None else frozen
            ps.add(name, Tensor(arr), frozen=is_frozen)
    return ps, scalars


def rec_spec_from_scalars(s: dict) -> RecNetSpec:
    return RecNetSpec(int(s["n_blocks"]), int(s["base_channels"]), int(s["size"]))


def seg_spec_from_scalars(s: dict) -> SegNetSpec:
    ladder = s["ladder"]
    ladder = tuple(ladder) if isinstance(ladder, tuple) else (int(ladder),)
    return SegNetSpec(tuple(int(c) for c in ladder), int(s["n_classes"]), int(s["size"]))
