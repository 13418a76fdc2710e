import numpy as np
import pytest

from sadfn.core import ParamStore, ShapeError, Tensor, grad_check
from sadfn.io import FormatError
from sadfn.mri import data_fidelity, fft2, make_mask_cartesian1d, undersample, zero_filled
from sadfn.networks import (
    RecNetSpec,
    SADFNSpec,
    SegNetSpec,
    bundle_sadfn,
    count_fusion_sites,
    desk_spec,
    frozen_taps,
    fusion_layer,
    init_fusion_params,
    init_rec_params,
    init_seg_params,
    init_wos_params,
    load_checkpoint,
    mlfa_aggregate,
    full_spec,
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


def problem(size=16, seed=0, batch=1):
    rng = np.random.default_rng(seed)
    m = make_mask_cartesian1d(size, size, 0.3, seed=seed)
    gt = rng.random((batch, size, size))
    y = undersample(gt, m)
    return zero_filled(y).astype(np.float32), y, m


def zero_store(ps):
    for _, t in ps.items():
        t.data[...] = 0
    return ps


@pytest.fixture(scope="module")
def small():
    spec = desk_spec(n_blocks=2, scale=0.25, size=16)
    rng = np.random.default_rng(7)
    rec = init_rec_params(spec.rec, rng).freeze()
    seg = init_seg_params(spec.seg, rng).freeze()
    return spec, rec, seg


# -- specs ----------------------------------------------------------------------

def test_full_size_tap_channel_total():
    assert sum(full_spec().seg.tap_channels) == 640


def test_half_scale_widths():
    spec = desk_spec(scale=0.5)
    assert spec.rec.base_channels == 16
    assert spec.seg.ladder == (16, 32, 64)
    assert sum(spec.seg.tap_channels) == 320


def test_fusion_width_must_match():
    with pytest.raises(ValueError):
        SADFNSpec(RecNetSpec(2, 16, 64), SegNetSpec((16, 32, 64)), 8)


def test_full_size_fusion_sites():
    spec = full_spec()
    rec = init_rec_params(spec.rec, np.random.default_rng(0))
    assert count_fusion_sites(init_fusion_params(spec, rec, np.random.default_rng(0))) == 20


def test_wos_block_capacity_at_least_rec_block():
    spec = full_spec(1).rec
    wos = init_wos_params(spec, np.random.default_rng(0)).n_parameters("block0.")
    rec = init_rec_params(spec, np.random.default_rng(0)).n_parameters("block0.")
    assert wos >= rec
    assert (wos, rec) == (64737, 28353)


# -- reconstruction networks ---------------------------------------------------------

@pytest.mark.parametrize("init", [init_rec_params, init_wos_params])
def test_zero_weights_reduce_to_data_fidelity(init):
    x0, y, m = problem()
    spec = RecNetSpec(1, 4, 16)
    ps = zero_store(init(spec, np.random.default_rng(0)))
    fwd = rec_net_forward if init is init_rec_params else wos_forward
    out = fwd(x0, y, m, ps, spec)
    expect = data_fidelity(Tensor(x0[..., None]), y, m)
    np.testing.assert_allclose(out.data, expect.data, atol=1e-7)


def test_rec_output_measured_consistency():
    x0, y, m = problem(batch=2)
    spec = RecNetSpec(2, 4, 16)
    out = rec_net_forward(x0, y, m, init_rec_params(spec, np.random.default_rng(1)), spec)
    k = np.where(m.grid, fft2(out.data[..., 0].astype(np.float64)), 0)
    np.testing.assert_allclose(k, y, atol=1e-6)


def test_unbound_parameter_rejected():
    x0, y, m = problem()
    with pytest.raises(KeyError, match="unbound"):
        rec_net_forward(x0, y, m, ParamStore(), RecNetSpec(1, 4, 16))


def test_forward_deterministic():
    x0, y, m = problem()
    spec = RecNetSpec(2, 4, 16)
    ps = init_rec_params(spec, np.random.default_rng(1))
    a = rec_net_forward(x0, y, m, ps, spec).data
    b = rec_net_forward(x0, y, m, ps, spec).data
    np.testing.assert_array_equal(a, b)


# -- segmentation network --------------------------------------------------------------

def test_seg_probabilities_and_taps(small):
    spec, _, seg = small
    img = np.random.default_rng(2).random((2, 16, 16))
    probs, taps = seg_net_forward(img, seg, spec.seg)
    assert probs.shape == (2, 16, 16, 4)
    np.testing.assert_allclose(probs.data.sum(-1), 1.0, atol=1e-6)
    assert [t.shape[1] for t in taps] == [16, 16, 8, 8, 4, 4, 8, 8, 16, 16]
    assert [t.shape[-1] for t in taps] == spec.seg.tap_channels
    assert predict_labels(probs).shape == (2, 16, 16)


def test_seg_indivisible_rejected(small):
    spec, _, seg = small
    with pytest.raises(ShapeError, match="divisible by 4"):
        seg_net_forward(np.zeros((1, 18, 18)), seg, spec.seg)


def test_seg_degenerate_uniform():
    spec = SegNetSpec((4, 8, 16), 4, 16)
    ps = zero_store(init_seg_params(spec, np.random.default_rng(0)))
    probs, _ = seg_net_forward(np.random.default_rng(1).random((1, 16, 16)), ps, spec)
    np.testing.assert_allclose(probs.data, 0.25, atol=1e-7)


def test_seg_training_mode_reports_stats(small):
    spec, _, seg = small
    stats = {}
    seg_net_forward(np.random.default_rng(3).random((2, 16, 16)), seg, spec.seg,
                    training=True, stats=stats)
    assert len(stats) == 2 * 12
    assert not np.array_equal(stats["conv1.bn.mean"], seg.buffers["conv1.bn.mean"])


# -- MLFA and fusion -------------------------------------------------------------------

def test_mlfa_zero_taps_gives_relu_bias(small):
    spec, rec, _ = small
    fus = init_fusion_params(spec, rec, np.random.default_rng(0))
    fus["mlfa.bias"].data[:] = np.linspace(-1, 1, spec.fusion_width)
    taps = [Tensor(np.zeros((1, 16 // f, 16 // f, c), np.float32))
            for f, c in zip([1, 1, 2, 2, 4, 4, 2, 2, 1, 1], spec.seg.tap_channels)]
    out = mlfa_aggregate(taps, fus)
    assert out.shape == (1, 16, 16, spec.fusion_width)
    np.testing.assert_allclose(out.data[0, 3, 3], np.maximum(fus["mlfa.bias"].data, 0))


def test_mlfa_wrong_tap_count(small):
    spec, rec, _ = small
    fus = init_fusion_params(spec, rec, np.random.default_rng(0))
    with pytest.raises(ShapeError, match="10"):
        mlfa_aggregate([Tensor(np.zeros((1, 4, 4, 2)))] * 9, fus)


def test_fusion_passthrough_is_relu_of_rec():
    rng = np.random.default_rng(5)
    f = 4
    w = np.zeros((1, 1, 2 * f, f))
    w[0, 0, :f] = np.eye(f)
    rec, seg = Tensor(rng.normal(size=(1, 6, 6, f))), Tensor(rng.normal(size=(1, 6, 6, f)))
    out = fusion_layer(rec, seg, Tensor(w), Tensor(np.zeros(f)))
    np.testing.assert_array_equal(out.data, np.maximum(rec.data, 0))


def test_fusion_depends_on_seg_features():
    rng = np.random.default_rng(6)
    w, b = Tensor(rng.normal(size=(1, 1, 8, 4))), Tensor(rng.normal(size=4))
    rec = Tensor(rng.normal(size=(1, 5, 5, 4)))
    a = fusion_layer(rec, Tensor(rng.normal(size=(1, 5, 5, 4))), w, b).data
    c = fusion_layer(rec, Tensor(rng.normal(size=(1, 5, 5, 4))), w, b).data
    assert not np.allclose(a, c)


def test_fusion_width_mismatch():
    with pytest.raises(ShapeError):
        fusion_layer(Tensor(np.zeros((1, 4, 4, 4))), Tensor(np.zeros((1, 4, 4, 3))),
                     Tensor(np.zeros((1, 1, 8, 4))), Tensor(np.zeros(4)))


# -- SADFN ------------------------------------------------------------------------------

def test_sadfn_passthrough_equals_rec(small):
    spec, rec, seg = small
    fus = init_fusion_params(spec, rec, np.random.default_rng(0))
    for seed in range(3):
        x0, y, m = problem(seed=seed, batch=2)
        a = sadfn_forward(x0, y, m, rec, seg, fus, spec).data
        b = rec_net_forward(x0, y, m, rec, spec.rec).data
        np.testing.assert_allclose(a, b, atol=1e-6)


def test_sadfn_rejects_trainable_prenets(small):
    spec, rec, seg = small
    fus = init_fusion_params(spec, rec, np.random.default_rng(0))
    loose = rec.copy().unfreeze()
    x0, y, m = problem()
    with pytest.raises(ValueError, match="trainable"):
        sadfn_forward(x0, y, m, loose, seg, fus, spec)


def test_sadfn_cached_taps_match(small):
    spec, rec, seg = small
    fus = init_fusion_params(spec, rec, np.random.default_rng(0))
    fus["mlfa.weight"].data[...] = np.random.default_rng(1).normal(
        size=fus["mlfa.weight"].shape) * 0.1
    x0, y, m = problem(batch=2)
    taps = frozen_taps(x0, y, m, rec, seg, spec)
    a = sadfn_forward(x0, y, m, rec, seg, fus, spec).data
    b = sadfn_forward(x0, y, m, rec, seg, fus, spec, taps=taps).data
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_sadfn_features_dump(small):
    spec, rec, seg = small
    fus = init_fusion_params(spec, rec, np.random.default_rng(0))
    x0, y, m = problem()
    feats = {}
    sadfn_forward(x0, y, m, rec, seg, fus, spec, features=feats)
    assert "mlfa" in feats and len(feats) == 1 + 4 * spec.rec.n_blocks


def test_sadfn_gradients_reach_only_fusion(small):
    spec, rec, seg = small
    fus = init_fusion_params(spec, rec, np.random.default_rng(0))
    x0, y, m = problem()
    out = sadfn_forward(x0, y, m, rec, seg, fus, spec)
    (out * out).sum().backward()
    assert all(t.grad is None for _, t in rec.items())
    assert all(t.grad is None for _, t in seg.items())
    assert fus["mlfa.weight"].grad is not None
    assert fus["dfn.block0.conv1.weight"].grad is not None


def test_sadfn_grad_check_small():
    spec = desk_spec(n_blocks=1, scale=0.125, size=8)
    rng = np.random.default_rng(11)
    rec = init_rec_params(spec.rec, rng, dtype=np.float64).freeze()
    seg = init_seg_params(spec.seg, rng, dtype=np.float64).freeze()
    fus = init_fusion_params(spec, rec, rng, dtype=np.float64)
    for name in ("fuse.block0.conv2.weight", "fuse.block0.conv2.bias"):
        fus[name].data[...] += rng.normal(size=fus[name].shape) * 0.1
    x0, y, m = problem(size=8, seed=3)
    x0 = x0.astype(np.float64)
    names = ["mlfa.weight", "fuse.block0.conv2.weight", "dfn.block0.conv3.weight"]
    weights = rng.normal(size=(1, 8, 8, 1))

    def loss(*ts):
        for n, t in zip(names, ts):
            fus._params[n] = t
        return (sadfn_forward(x0, y, m, rec, seg, fus, spec) * Tensor(weights)).sum()

    err = grad_check(loss, [fus[n] for n in names], eps=1e-6, max_coords=40)
    assert err < 1e-3


# -- checkpoints ---------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, small):
    spec, rec, seg = small
    save_checkpoint(seg, tmp_path / "seg", {"stage": "seg", **spec_scalars(spec.seg)})
    back, scalars = load_checkpoint(tmp_path / "seg")
    assert back.equals(seg)
    assert back.all_frozen
    assert seg_spec_from_scalars(scalars) == spec.seg
    save_checkpoint(rec, tmp_path / "rec", spec_scalars(spec.rec))
    assert rec_spec_from_scalars(load_checkpoint(tmp_path / "rec")[1]) == spec.rec


def test_checkpoint_frozen_override(tmp_path, small):
    spec, rec, _ = small
    save_checkpoint(rec, tmp_path / "rec")
    back, _ = load_checkpoint(tmp_path / "rec", frozen=False)
    assert not back.all_frozen and len(back.trainable()) == len(rec)


def test_checkpoint_shape_mismatch(tmp_path, small):
    _, rec, _ = small
    save_checkpoint(rec, tmp_path / "rec")
    man = tmp_path / "rec" / "manifest.txt"
    man.write_text(man.read_text().replace("3x3x1x8", "3x3x2x8", 1))
    with pytest.raises(FormatError, match="shape"):
        load_checkpoint(tmp_path / "rec")


def test_sadfn_bundle_round_trip(tmp_path, small):
    spec, rec, seg = small
    fus = init_fusion_params(spec, rec, np.random.default_rng(0))
    save_checkpoint(bundle_sadfn(rec, seg, fus), tmp_path / "s", spec_scalars(spec))
    params, scalars = load_checkpoint(tmp_path / "s")
    r, s, f = unbundle_sadfn(params)
    assert r.equals(rec) and s.equals(seg) and f.equals(fus)
    assert sadfn_spec_from_scalars(scalars) == spec
