"""Branch fusion: every pass checked against an independent functional
oracle (run the branches, run the merged conv, compare outputs)."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fmvit import tensor as T
from fmvit.blocks import CFB, RepConv, bundle_1x1, bundle_asym, bundle_dw, make_cfb_spec
from fmvit.errors import MergeError, VerificationError
from fmvit.model import build_model, calibrate_bn
from fmvit.reparam import (BN_ASSUMPTION, expand_groups, fold_bn,
                           fold_identity_branch, fuse_model, fuse_repconv,
                           merge_asymmetric, merge_parallel_branches,
                           pad_kernel, verify_equivalence)
from fmvit.nn import BatchNorm2d
from fmvit.tensor import ConvSpec, Tensor


def rnd(rng, *shape, dtype=np.float32):
    return Tensor(rng.standard_normal(shape).astype(dtype))


# ---------------------------------------------------------------------------
# elementary passes


def test_pad_kernel_centers_and_rejects():
    w = np.arange(6, dtype=np.float64).reshape(1, 1, 3, 2)
    with pytest.raises(MergeError):
        pad_kernel(w, 1, 2)               # shrink
    with pytest.raises(MergeError):
        pad_kernel(w, 4, 2)               # odd parity difference
    out = pad_kernel(np.ones((1, 1, 1, 1)), 3, 3)
    assert out.shape == (1, 1, 3, 3)
    assert out[0, 0, 1, 1] == 1 and out.sum() == 1


def test_expand_groups_preserves_function():
    rng = np.random.default_rng(0)
    for in_c, out_c, g_from, g_to in ((8, 8, 4, 2), (8, 8, 8, 1),
                                      (12, 6, 3, 1), (16, 16, 4, 4)):
        spec_from = ConvSpec(in_c, out_c, 3, 3, 1, g_from, False)
        spec_to = ConvSpec(in_c, out_c, 3, 3, 1, g_to, False)
        w = rnd(rng, *spec_from.weight_shape)
        w2 = expand_groups(w.data, g_from, g_to, in_c, out_c)
        x = rnd(rng, 2, in_c, 6, 6)
        a = T.conv2d(x, spec_from, w)
        b = T.conv2d(x, spec_to, Tensor(w2))
        np.testing.assert_allclose(a.data, b.data, atol=1e-6)
    with pytest.raises(MergeError):
        expand_groups(np.zeros((8, 2, 1, 1)), 4, 3, 8, 8)   # 3 does not divide 4


def test_fold_bn_closed_form():
    rng = np.random.default_rng(1)
    c = 6
    w = rng.standard_normal((c, 3, 3, 3))
    gamma = rng.standard_normal(c) + 2.0
    beta = rng.standard_normal(c)
    mean = rng.standard_normal(c)
    var = np.abs(rng.standard_normal(c)) + 0.5
    eps = 1e-5
    wf, bf = fold_bn(w, None, gamma, beta, mean, var, eps)
    spec = ConvSpec(3, c, 3, 3, 1, 1, False)
    fused = ConvSpec(3, c, 3, 3, 1, 1, True)
    x = rnd(rng, 2, 3, 5, 5)
    y = T.conv2d(x, spec, Tensor(w.astype(np.float32)))
    yn = (y.data - mean.reshape(1, -1, 1, 1)) / np.sqrt(var.reshape(1, -1, 1, 1) + eps)
    yn = yn * gamma.reshape(1, -1, 1, 1) + beta.reshape(1, -1, 1, 1)
    y2 = T.conv2d(x, fused, Tensor(wf.astype(np.float32)), Tensor(bf.astype(np.float32)))
    np.testing.assert_allclose(y2.data, yn, atol=1e-5)


def test_fold_identity_branch_is_identity():
    rng = np.random.default_rng(2)
    for groups in (1, 2, 8):
        base = ConvSpec(8, 8, 1, 1, 1, groups, False)
        w = fold_identity_branch(8, base)
        x = rnd(rng, 2, 8, 4, 4)
        y = T.conv2d(x, base, Tensor(w.astype(np.float32)))
        np.testing.assert_allclose(y.data, x.data, atol=1e-7)
    with pytest.raises(MergeError):
        fold_identity_branch(8, ConvSpec(8, 8, 1, 1, 2, 1, False))
    with pytest.raises(MergeError):
        fold_identity_branch(4, ConvSpec(8, 8, 1, 1, 1, 1, False))


def test_merge_parallel_branches_additivity():
    rng = np.random.default_rng(3)
    base = ConvSpec(8, 8, 3, 3, 1, 1, False)
    branches = []
    for spec in (base, ConvSpec(8, 8, 1, 1, 1, 2, False),
                 ConvSpec(8, 8, 3, 3, 1, 4, False)):
        branches.append((spec, rng.standard_normal(spec.weight_shape), None))
    fused_spec, wf, bf = merge_parallel_branches(base, branches)
    assert bf is None
    x = rnd(rng, 2, 8, 6, 6)
    want = sum(T.conv2d(x, s, Tensor(w.astype(np.float32))).data for s, w, _ in branches)
    got = T.conv2d(x, fused_spec, Tensor(wf.astype(np.float32)))
    np.testing.assert_allclose(got.data, want, atol=1e-5)


def test_merge_rejections_name_the_condition():
    base = ConvSpec(8, 8, 3, 3, 1, 2, False)
    w = np.zeros(ConvSpec(8, 8, 3, 3, 1, 2, False).weight_shape)
    cases = [
        (ConvSpec(8, 4, 3, 3, 1, 2, False), "channels"),
        (ConvSpec(8, 8, 3, 3, 2, 2, False), "stride"),
        (ConvSpec(8, 8, 3, 3, 1, 1, False), "groups"),
        (ConvSpec(8, 8, 5, 5, 1, 2, False), "kernel"),
    ]
    for spec, word in cases:
        with pytest.raises(MergeError, match=word):
            merge_parallel_branches(base, [(spec, np.zeros(spec.weight_shape), None)])
    with pytest.raises(MergeError, match="no branches"):
        merge_parallel_branches(base, [])


def test_merge_asymmetric():
    rng = np.random.default_rng(4)
    wf = rng.standard_normal((4, 3, 3, 3))
    wc = rng.standard_normal((4, 3, 3, 1))
    wr = rng.standard_normal((4, 3, 1, 3))
    merged = merge_asymmetric(wf, wc, wr)
    spec3 = ConvSpec(3, 4, 3, 3, 1, 1, False)
    x = rnd(rng, 1, 3, 5, 5)
    want = (T.conv2d(x, spec3, Tensor(wf.astype(np.float32))).data
            + T.conv2d(x, ConvSpec(3, 4, 3, 1, 1, 1, False), Tensor(wc.astype(np.float32))).data
            + T.conv2d(x, ConvSpec(3, 4, 1, 3, 1, 1, False), Tensor(wr.astype(np.float32))).data)
    got = T.conv2d(x, spec3, Tensor(merged.astype(np.float32)))
    np.testing.assert_allclose(got.data, want, atol=1e-5)


# ---------------------------------------------------------------------------
# module-level fusion


@pytest.mark.parametrize("make", [
    lambda rng: RepConv(bundle_1x1(8, 16), rng=rng),
    lambda rng: RepConv(bundle_dw(8), identity="bn", rng=rng),
    lambda rng: RepConv(bundle_asym(3, 8, 3, stride=2), rng=rng),
    lambda rng: RepConv(bundle_1x1(8, 8), identity="plain", rng=rng),
    lambda rng: RepConv(bundle_1x1(8, 8, bn=False, extras_n=2), rng=rng),
])
def test_fuse_repconv_equivalence(make):
    rng = np.random.default_rng(5)
    mod = make(np.random.default_rng(6))
    # non-trivial norm statistics
    for _, m in mod.named_modules():
        if isinstance(m, BatchNorm2d):
            m.running_mean[...] = rng.standard_normal(m.running_mean.shape) * 0.1
            m.running_var[...] = np.abs(rng.standard_normal(m.running_var.shape)) + 0.5
    mod.eval()
    fused = fuse_repconv(mod)
    x = rnd(rng, 2, mod.spec.base.in_channels, 8, 8)
    np.testing.assert_allclose(mod(x).data, fused(x).data, atol=2e-5)


def test_fuse_model_structure_and_idempotence():
    model = build_model("nano", classes=8, seed=0)
    rng = np.random.default_rng(7)
    calibrate_bn(model, rnd(rng, 2, 3, 32, 32))
    fused = fuse_model(model)
    kinds = {type(m).__name__ for _, m in fused.named_modules()}
    assert "RepConv" not in kinds and "BatchNorm2d" not in kinds
    assert fused.deployed and not model.deployed
    assert len(fused.fusion_passes) > 0
    again = fuse_model(fused)
    s1, s2 = fused.state_dict(), again.state_dict()
    assert set(s1) == set(s2)
    for k in s1:
        np.testing.assert_array_equal(s1[k], s2[k])
    assert len(again.fusion_passes) == 0


def test_verify_equivalence_self_and_perturbed():
    # calibration batch of 4: batch of 2 leaves the 1x1-spatial stage with
    # variance from two values per channel, and the folded gains blow up
    model = build_model("nano", classes=8, seed=1)
    rng = np.random.default_rng(8)
    calibrate_bn(model, rnd(rng, 4, 3, 64, 64))
    rep = verify_equivalence(model, model, n_samples=3, tolerance=1e-3,
                             seed=0, input_hw=64)
    assert rep.verdict == "pass" and rep.max_residual == 0.0
    assert rep.assumption == BN_ASSUMPTION
    assert "end_to_end" in rep.residuals

    fused = fuse_model(model)
    rep2 = verify_equivalence(model, fused, n_samples=4, tolerance=1e-3,
                              seed=0, input_hw=64)
    assert rep2.verdict == "pass"

    # a perturbation the size of a weight is caught
    bad = fuse_model(model)
    first_conv = next(m for _, m in bad.named_modules()
                      if type(m).__name__ == "Conv2d")
    first_conv.weight.data[0] += 0.05
    rep3 = verify_equivalence(model, bad, n_samples=4, tolerance=1e-3,
                              seed=0, input_hw=64)
    assert rep3.verdict == "fail"


def test_verify_rejects_incompatible_models():
    a = build_model("nano", classes=8, seed=0)
    b = build_model("nano", classes=9, seed=0)
    with pytest.raises(VerificationError):
        verify_equivalence(a, b, n_samples=1, input_hw=32)


# ---------------------------------------------------------------------------
# block-level equivalence with norms in play


def test_cfb_fuses_after_calibration():
    rng = np.random.default_rng(9)
    spec = make_cfb_spec(8)
    mod = CFB(spec, rng=np.random.default_rng(10))
    x = rnd(rng, 4, 8, 8, 8)
    mod.train(True)
    mod(x)          # adopt some statistics
    mod.eval()
    fused = fuse_model(mod)
    y1, y2 = mod(x), fused(x)
    assert np.abs(y1.data - y2.data).max() < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1),
       st.sampled_from([(8, 8), (8, 16), (12, 12), (16, 8)]),
       st.sampled_from([0, 1, 2, 3]))
def test_random_bundles_fuse_exactly(seed, channels, extras_n):
    """Any constructible 1x1/dw bundle fuses to a conv computing the same map."""
    in_c, out_c = channels
    rng = np.random.default_rng(seed)
    if in_c == out_c and seed % 2:
        mod = RepConv(bundle_dw(in_c), identity="bn", rng=rng)
    else:
        mod = RepConv(bundle_1x1(in_c, out_c, extras_n=extras_n), rng=rng)
    x = rnd(rng, 2, in_c, 6, 6)
    mod.train(True)
    mod(x)
    mod.eval()
    fused = fuse_repconv(mod)
    np.testing.assert_allclose(mod(x).data, fused(x).data, atol=2e-5)
