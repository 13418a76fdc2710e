"""Walk through the full-size SADFN layer shapes, from the Pre-SegNet taps
through multilayer feature aggregation to the fused reconstruction block.

Uses random weights at 240x240; takes a few seconds.
"""
import numpy as np

from sadfn.mri import ifft2, make_mask_cartesian1d, undersample
from sadfn.networks import (
    init_fusion_params,
    init_rec_params,
    init_seg_params,
    full_spec,
    sadfn_forward,
)

spec = full_spec(n_blocks=1)
rng = np.random.default_rng(0)
rec = init_rec_params(spec.rec, rng).freeze()
seg = init_seg_params(spec.seg, rng).freeze()
fusion = init_fusion_params(spec, rec, rng)

mask = make_mask_cartesian1d(240, 240, 0.30, seed=1)
y = undersample(rng.random((1, 240, 240)), mask)
x0 = np.real(ifft2(y)).astype(np.float32)

# %% Ten segmentation taps feed the aggregation layer; their widths add to 640.
print("tap widths:", spec.seg.tap_channels, "sum", sum(spec.seg.tap_channels))

# %% The trace lists every layer with its input, kernel, stride, filters and output.
trace = []
sadfn_forward(x0, y, mask, rec, seg, fusion, spec, trace=trace)
for row in trace:
    print(f"{row.name:14s} {str(row.input):18s} -> {str(row.output):16s} "
          f"kernel={row.kernel} filters={row.filters} act={row.activation}")

# %% Fusion starts as a pass-through, so this untrained SADFN equals Pre-RecNet.
print("fusion tensors:", sum(1 for n, _ in fusion.items() if n.startswith("fuse.")))
