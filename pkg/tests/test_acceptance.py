"""Acceptance run: one test per delivered contract, each printing a single
pass/fail line with the measured value next to its tolerance.

The checks certify, in order: bundle-merge additivity, whole-model fusion
equivalence for every published size, the shared-projection attention
identity, backward-pass correctness against finite differences, the
structural comparison with the published T configuration, training-then-
fusing prediction preservation, the ablation-lattice parameter relations,
the spectrum tooling, and serialization round trips. Slower than the unit
files by design; the fusion and training checks dominate.
"""

import sys

import numpy as np
import pytest

from fmvit import tensor as T
from fmvit.analyzer import (branch_spectrum_report, count_flops, count_params,
                            fourier_spectrum, shape_trace)
from fmvit.blocks import (CFB, FMB, GMLP, RLMHSA, AttnOnlyBlock, PatchEmbed,
                          RepConv, StdMHSA, Stem, bundle_1x1, bundle_asym,
                          bundle_dw, make_cfb_spec, make_fmb_spec,
                          make_gmlp_spec, make_rlmhsa_spec)
from fmvit.errors import WeightFormatError
from fmvit.io import (load_weights, parse_model_spec, save_weights,
                      serialize_model_spec, write_weights)
from fmvit.model import build_model, calibrate_bn
from fmvit.reparam import fuse_model, merge_parallel_branches, verify_equivalence
from fmvit.tensor import ConvSpec, GradTape, Tensor, backward
from fmvit.trainer import (ConvBaseline, TrainConfig, ablation_suite,
                           evaluate, generate_dataset, prediction_match, train)


def _report(num: int, ok: bool, detail: str) -> None:
    # bypass capture so the line shows up in a plain pytest run
    print(f"[check {num}] {'PASS' if ok else 'FAIL'} {detail}",
          file=sys.__stdout__, flush=True)


# ---------------------------------------------------------------------------
# 1: bundle-merge additivity over randomized geometries


def test_01_bundle_merge_additivity():
    """A merged bundle computes the sum of its branches, across kernel
    sizes, group counts, strides, and branch mixes."""
    worst, count = 0.0, 0
    for c in (4, 8, 16):
        for g in sorted({1, 2, 4, c}):
            for k in (1, 3, 5):
                for draw in range(7):
                    seed = ((c * 41 + g) * 13 + k) * 17 + draw
                    rng = np.random.default_rng(seed)
                    out_c = c * int(rng.integers(1, 3))
                    stride = int(rng.integers(1, 3))
                    # branch groups: any divisor of the channel count that
                    # the base group count divides
                    legal_g = [d for d in range(g, c + 1) if c % d == 0 and d % g == 0]
                    legal_k = [kk for kk in (1, 3, 5) if kk <= k]
                    branches = []
                    for _ in range(int(rng.integers(2, 5))):
                        bk = int(rng.choice(legal_k))
                        bg = int(rng.choice(legal_g))
                        has_bias = bool(rng.integers(2))
                        spec = ConvSpec(c, out_c, bk, bk, stride, bg, has_bias)
                        w = rng.standard_normal(spec.weight_shape) * 0.5
                        b = rng.standard_normal(out_c) * 0.1 if has_bias else None
                        branches.append((spec, w, b))
                    base = ConvSpec(c, out_c, k, k, stride, g, False)
                    fused_spec, w_m, b_m = merge_parallel_branches(base, branches)

                    x = Tensor(rng.standard_normal((1, c, 8, 8)))
                    got = T.conv2d(x, fused_spec, Tensor(w_m),
                                   Tensor(b_m) if b_m is not None else None).data
                    want = np.zeros_like(got)
                    for spec, w, b in branches:
                        want = want + T.conv2d(x, spec, Tensor(w),
                                               Tensor(b) if b is not None else None).data
                    worst = max(worst, float(np.abs(got - want).max()))
                    count += 1
    ok = worst < 1e-5 and count >= 200
    _report(1, ok, f"bundle additivity over {count} random geometries: "
                   f"max |merged - branch sum| = {worst:.1e} (tol 1e-5)")
    assert ok


# ---------------------------------------------------------------------------
# 2: whole-model fusion equivalence for every published size


def test_02_full_model_fusion_equivalence():
    """Each size builds with random weights, fuses, and verifies end to end
    on 100 seeded full-resolution inputs.

    Both forms run in float64 (weights cast before fusing) so the check
    measures the merge algebra itself; at float32 the one-time rounding of
    the stored fused weights is amplified past tolerance in the deeper
    sizes by saturated attention softmaxes, even though every layer-local
    residual stays at rounding level.
    """
    results, fails = [], []
    worst = 0.0
    for i, name in enumerate(("T", "S", "M", "B", "L")):
        model = build_model(name, classes=16, seed=i)
        rng = np.random.default_rng(100 + i)
        calibrate_bn(model, Tensor(rng.standard_normal((2, 3, 224, 224)).astype(np.float32)))
        model.cast(np.float64)
        fused = fuse_model(model)
        rep = verify_equivalence(model, fused, n_samples=100, tolerance=1e-3,
                                 seed=i, input_hw=224, dtype=np.float64)
        e2e = rep.residuals["end_to_end"]
        worst = max(worst, e2e)
        results.append(f"{name}={e2e:.1e}")
        if rep.verdict != "pass":
            fails.append(name)
    ok = not fails
    _report(2, ok, "fusion equivalence for T/S/M/B/L over 100 seeded 224x224 inputs "
                   f"each (float64 forms): worst end-to-end residual {worst:.1e} "
                   f"(tol 1e-3); " + ", ".join(results))
    assert ok, f"failing sizes: {fails}"


# ---------------------------------------------------------------------------
# 3: shared-projection attention equals the expanded form


def test_03_shared_projection_attention_identity():
    """Factorized attention (queries raw, one shared map for keys and
    values) matches standard attention instantiated with W_q = I and
    W_k = W_v = W; attention rows are a probability distribution."""
    worst, worst_row = 0.0, 0.0
    dims = (32, 64, 96, 128)
    rng = np.random.default_rng(303)
    for case in range(100):
        d = dims[case % 4]
        m_tokens = int(rng.integers(1, 65))
        mode = "paper_literal" if case % 2 == 0 else "scaled_by_sqrt_d"
        mod = RLMHSA(make_rlmhsa_spec(d, scale_mode=mode),
                     rng=np.random.default_rng(case))
        # both sides in float64 so the residual is the form difference
        # alone, not the working-precision rounding of one side
        mod.cast(np.float64)
        x = Tensor(rng.standard_normal((1, d, m_tokens, 1)))
        got = mod(x).data[0, :, :, 0].T                             # (M, d) tokens

        # recover the shared map by pushing the basis through it
        eye = np.zeros((1, d, d, 1))
        eye[0, np.arange(d), np.arange(d), 0] = 1.0
        w_mat = mod.proj(Tensor(eye)).data[0, :, :, 0]

        xt = x.data[0, :, :, 0].T
        kv = xt @ w_mat.T                                           # K' = V' = XW
        scale = mod.spec.scale
        head = mod.spec.dim // mod.spec.heads
        outs = []
        for h in range(mod.spec.heads):
            sl = slice(h * head, (h + 1) * head)
            scores = xt[:, sl] @ kv[:, sl].T * scale                # Q = X
            ex = np.exp(scores - scores.max(axis=-1, keepdims=True))
            outs.append((ex / ex.sum(axis=-1, keepdims=True)) @ kv[:, sl])
            # row sums of the attention matrix at working precision
            s32 = Tensor(scores.astype(np.float32)[None, None])
            rows = T.softmax_lastdim(s32).data.sum(axis=-1)
            worst_row = max(worst_row, float(np.abs(rows - 1.0).max()))
        want = np.concatenate(outs, axis=1)
        worst = max(worst, float(np.abs(got - want).max()))
    ok = worst < 1e-5 and worst_row < 1e-6
    _report(3, ok, "shared-projection attention vs expanded form, 100 random cases "
                   f"(tokens <= 64, width <= 128): max output diff {worst:.1e} "
                   f"(tol 1e-5); max |row sum - 1| = {worst_row:.1e} (tol 1e-6)")
    assert ok


# ---------------------------------------------------------------------------
# 4: backward pass vs central finite differences, per block type


def _grad_worst_error(module, x, seed, n_coords=12, step=1e-5):
    """Max relative error of tape gradients against sampled central
    differences, over the input and every parameter tensor.

    Two validity guards on the finite-difference oracle. First, central
    differences assume local smoothness: a perturbed weight shifts every
    relu pre-activation in the block, so coordinates that straddle a kink
    are detected by halving the step (smooth estimates reproduce to
    O(step^2)) and skipped. Second, some directions are exactly flat (a
    norm layer downstream removes constant per-channel shifts, so shift
    parameters ahead of it cannot move the loss); there both sides are
    evaluation noise, so each coordinate's denominator is floored at 0.1%
    of the block's largest sampled gradient magnitude.
    """
    module.cast(np.float64)
    rng = np.random.default_rng(seed)
    rmat = rng.standard_normal(module(x).shape)

    def loss_value():
        return float((module(x).data * rmat).sum())

    def central(flat, idx, h):
        orig = flat[idx]
        flat[idx] = orig + h
        fp = loss_value()
        flat[idx] = orig - h
        fm = loss_value()
        flat[idx] = orig
        return (fp - fm) / (2 * h)

    with GradTape() as tape:
        tape.watch(x)
        for p in module.parameters():
            tape.watch(p)
        loss = T.sum_all(T.mul(module(x), Tensor(rmat)))
    grads = backward(tape, loss)

    sampled = []                             # (analytic, fd) per kept coordinate
    tensors = [("input", x)] + list(module.named_parameters())
    for name, t in tensors:
        g = grads.get(id(t))
        assert g is not None, f"no gradient reached {name}"
        flat = t.data.reshape(-1)
        idxs = rng.choice(flat.size, size=min(2 * n_coords, flat.size), replace=False)
        kept = 0
        for idx in idxs:
            if kept == n_coords:
                break
            fd = central(flat, idx, step)
            fd_half = central(flat, idx, step / 2)
            if abs(fd - fd_half) > 1e-3 * max(abs(fd), abs(fd_half), 1e-3):
                continue                     # nonsmooth here, estimate invalid
            sampled.append((float(g.data.reshape(-1)[idx]), fd))
            kept += 1
        assert kept, f"{name}: no smooth coordinate found"
    scale = max(abs(fd) for _, fd in sampled)
    floor = max(1e-3 * scale, 1e-8)
    return max(abs(a - fd) / max(abs(fd), floor) for a, fd in sampled)


def test_04_gradients_match_finite_differences():
    """Every block type backpropagates correctly at small widths (attention
    blocks at the minimum legal width of one head)."""
    mk = np.random.default_rng
    cases = [
        ("bundle-1x1", RepConv(bundle_1x1(6, 8), rng=mk(40)), (2, 6, 6, 6)),
        ("bundle-dw-id", RepConv(bundle_dw(6), identity="bn", rng=mk(41)), (2, 6, 6, 6)),
        ("bundle-asym-s2", RepConv(bundle_asym(4, 6, 3, stride=2), rng=mk(42)), (2, 4, 8, 8)),
        ("patch-embed", PatchEmbed(5, 7, downsample=True, rng=mk(43)), (2, 5, 8, 8)),
        ("gmlp", GMLP(make_gmlp_spec(6, 6), rng=mk(44)), (2, 6, 6, 6)),
        ("cfb", CFB(make_cfb_spec(6), rng=mk(45)), (2, 6, 6, 6)),
        ("shared-attn", RLMHSA(make_rlmhsa_spec(32), rng=mk(46)), (2, 32, 4, 4)),
        ("std-attn", StdMHSA(32, rng=mk(47)), (2, 32, 4, 4)),
        ("fmb", FMB(make_fmb_spec(8, 32, 24, 4), rng=mk(48)), (2, 8, 8, 8)),
        ("attn-only", AttnOnlyBlock(8, 32, 8, make_gmlp_spec(32, 32),
                                    RLMHSA(make_rlmhsa_spec(32), rng=mk(49)),
                                    rng=mk(49)), (2, 8, 8, 8)),
        ("stem", Stem(3, (6, 6, 8), rng=mk(50)), (2, 3, 8, 8)),
    ]
    errs, fails = [], []
    for name, module, dims in cases:
        seed = sum(map(ord, name))
        x = Tensor(np.random.default_rng(seed).standard_normal(dims))
        err = _grad_worst_error(module, x, seed=seed)
        errs.append(f"{name}={err:.1e}")
        if err >= 1e-3:
            fails.append(name)
    ok = not fails
    _report(4, ok, "backward vs central differences for every block type: "
                   f"worst relative error per block (tol 1e-3): " + ", ".join(errs))
    assert ok, f"failing blocks: {fails}"


# ---------------------------------------------------------------------------
# 5: structural comparison against the published T configuration


def test_05_structure_against_published_table():
    """The T model reproduces the published resolution schedule exactly;
    parameter and MAC totals are reported next to the published 2.0 M and
    0.3 G with an interpretation classification, not a hard gate."""
    model = build_model("T", classes=1000, seed=0)
    trace = dict(shape_trace(model, (1, 3, 224, 224)))
    res = [trace[f"stages.{i}"][2] for i in range(4)]
    ok_trace = res == [56, 28, 14, 7]

    fused = fuse_model(model)
    params = count_params(fused).total_params
    macs = count_flops(fused, (1, 3, 224, 224)).total_macs
    print("[check 5] note: the mixing-block channel rule is read as an "
          "(input, attention, output) triple with the attention width a "
          "multiple of 32; totals below count the deployed form",
          file=sys.__stdout__, flush=True)

    def classify(got, published):
        rel = (got - published) / published
        word = "consistent" if abs(rel) <= 0.25 else "interpretation deviation"
        return rel, word

    p_rel, p_word = classify(params, 2.0e6)
    m_rel, m_word = classify(macs, 0.3e9)
    ok = ok_trace
    _report(5, ok, f"T structure: stage maps {'/'.join(map(str, res))} match the "
                   f"1/4..1/32 schedule; deployed params {params:,} vs 2.0M "
                   f"({p_rel:+.1%}, {p_word}); MACs {macs / 1e9:.4f}G vs 0.3G "
                   f"({m_rel:+.1%}, {m_word})")
    assert ok
    assert params > 0 and macs > 0


# ---------------------------------------------------------------------------
# 6: training then fusing preserves predictions


def test_06_train_then_fuse_preserves_predictions():
    """The smallest model learns the synthetic texture task (the plain conv
    baseline certifies the task is learnable first) and fusing afterwards
    leaves its predictions intact."""
    ds = generate_dataset(7, 256, 8, (3, 32, 32), "gabor-texture-classes")

    baseline = ConvBaseline(8, rng=np.random.default_rng(5))
    train(baseline, ds, TrainConfig(steps=200, batch_size=32, lr=0.02,
                                    optimizer="adamw-lite", warmup_steps=20,
                                    weight_decay=0.01, seed=2))
    base_acc = evaluate(baseline, ds).accuracy

    model = build_model("nano", classes=8, seed=1)
    calibrate_bn(model, Tensor(ds.images[:32]))
    train(model, ds, TrainConfig(steps=400, batch_size=32, lr=0.002,
                                 optimizer="adamw-lite", warmup_steps=50,
                                 weight_decay=0.01, seed=1))
    acc = evaluate(model, ds).accuracy
    fused = fuse_model(model)
    match = prediction_match(model, fused, ds)

    ok = base_acc >= 0.8 and acc >= 0.90 and match >= 0.999
    _report(6, ok, f"train-then-fuse on the seeded 8-class task: conv baseline "
                   f"{base_acc:.3f} (learnability floor 0.8), trained model {acc:.3f} "
                   f"(floor 0.90), fused prediction match {match:.4f} (floor 0.999)")
    assert ok


# ---------------------------------------------------------------------------
# 7: ablation lattice parameter relations


def test_07_ablation_lattice_relations():
    """Shared-projection attention deploys strictly fewer attention
    parameters than the three-projection standard; toggling the branched
    MLP changes training structure only, so both fuse to the same count."""
    rows = {r.name: r for r in ablation_suite("nano", classes=8)}
    std, shared, with_mlp = rows["attn-baseline"], rows["shared-attn"], rows["shared-attn+mlp"]
    fewer = shared.attn_params < std.attn_params
    equal = shared.deployed_params == with_mlp.deployed_params
    ok = fewer and equal
    _report(7, ok, f"ablation lattice: deployed attention params {shared.attn_params:,} "
                   f"(shared projection) < {std.attn_params:,} (standard); deployed totals "
                   f"with/without the branched mlp {with_mlp.deployed_params:,} == "
                   f"{shared.deployed_params:,}")
    assert ok


# ---------------------------------------------------------------------------
# 8: spectrum tooling


def test_08_spectrum_tooling():
    """Energy bookkeeping closes, analytic cases land in the right bins,
    and the five-tap report is deterministic. The frequency split between
    attention and conv taps is reported, not asserted."""
    rng = np.random.default_rng(88)
    worst_rel = 0.0
    for c, h, w in ((3, 16, 16), (5, 7, 9), (2, 24, 12)):
        prof = fourier_spectrum(Tensor(rng.standard_normal((1, c, h, w)).astype(np.float32)))
        rel = abs(prof.energy_spatial - prof.energy_spectral) / prof.energy_spatial
        worst_rel = max(worst_rel, rel)

    const = fourier_spectrum(Tensor(np.full((1, 2, 8, 8), 3.0, dtype=np.float32)))
    dc_exact = const.radial_bins[0] == 1.0 and const.low_freq_ratio == 1.0
    ii, jj = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
    checker = ((-1.0) ** (ii + jj)).astype(np.float32)[None, None]
    nyq_exact = fourier_spectrum(Tensor(checker)).radial_bins[-1] == 1.0

    model = build_model("nano", classes=8, seed=3)
    gen = np.random.default_rng(9)
    calibrate_bn(model, Tensor(gen.standard_normal((4, 3, 64, 64)).astype(np.float32)))
    x = Tensor(gen.standard_normal((1, 3, 64, 64)).astype(np.float32))
    rep1 = branch_spectrum_report(model, x)
    rep2 = branch_spectrum_report(model, x)
    deterministic = len(rep1) == len(rep2) and all(
        a.branch_id == b.branch_id and np.array_equal(a.radial_bins, b.radial_bins)
        for a, b in zip(rep1, rep2))
    attn_lfr = float(np.mean([p.low_freq_ratio for p in rep1 if p.kind == "attention"]))
    conv_lfr = float(np.mean([p.low_freq_ratio for p in rep1 if p.kind == "cfb"]))

    ok = worst_rel < 1e-4 and dc_exact and nyq_exact and deterministic
    _report(8, ok, f"spectrum tooling: spatial/spectral energy agree to {worst_rel:.1e} "
                   f"(tol 1e-4 relative); constant -> first bin exact; checkerboard -> "
                   f"last bin exact; five-tap report deterministic; attention-tap "
                   f"low-frequency ratio {attn_lfr:.3f} vs conv taps {conv_lfr:.3f} "
                   f"(reported, not asserted)")
    assert ok


# ---------------------------------------------------------------------------
# 9: serialization round trips


def test_09_serialization_round_trips(tmp_path):
    """Weight containers survive a load/store cycle byte for byte, refuse
    corrupted payloads, and the text spec parses back to itself."""
    model = build_model("nano", classes=8, seed=4)
    p1, p2 = tmp_path / "a.fmvw", tmp_path / "b.fmvw"
    save_weights(model, p1)
    raw = p1.read_bytes()
    form, entries = load_weights(p1)
    write_weights(p2, form, entries)
    byte_identical = p2.read_bytes() == raw

    corrupt = bytearray(raw)
    corrupt[len(corrupt) // 2] ^= 0x40
    p3 = tmp_path / "c.fmvw"
    p3.write_bytes(bytes(corrupt))
    try:
        load_weights(p3)
        crc_detected = False
    except WeightFormatError as e:
        crc_detected = "checksum" in str(e)

    variant_text = ("schema_version 1\nvariant nano\nclasses 8\n"
                    "scale_mode scaled_by_sqrt_d\n")
    table_text = ("schema_version 1\nclasses 10\nstem 8 8 16\n"
                  "stage cfb channels=16,16,16 blocks=1\n"
                  "stage cfb channels=24,24,24 blocks=1\n"
                  "stage fmb channels=24,32,48 fm=8 blocks=1\n"
                  "stage fmb channels=48,64,64 fm=16 blocks=1\n")
    spec_identity = True
    for text in (variant_text, table_text):
        ms = parse_model_spec(text)
        spec_identity = spec_identity and parse_model_spec(serialize_model_spec(ms)) == ms

    ok = byte_identical and crc_detected and spec_identity
    _report(9, ok, f"serialization: weight round trip byte-identical={byte_identical}; "
                   f"checksum corruption detected={crc_detected}; spec text "
                   f"round-trip identity={spec_identity}")
    assert ok
