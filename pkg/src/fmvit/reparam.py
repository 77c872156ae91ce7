"""Weight-space fusion: collapse every training-form bundle into a single
convolution and certify that nothing changed.

The rewrite order per bundle is fixed: fold each branch's batch norm into
its conv (running statistics, i.e. deployment semantics), express an
identity branch as a Dirac kernel, then bring every branch to the base
geometry (group expansion, then centered kernel padding) and sum. Output
equality holds exactly in real arithmetic; float32 storage makes it exact
to rounding, which verify_equivalence measures.

All fold arithmetic runs in float64 and is cast to the model dtype once at
the end.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .blocks import RepConv
from .errors import MergeError, ShapeError, SpecError, VerificationError
from .nn import BatchNorm2d, Conv2d, Module, ModuleList
from .tensor import ConvSpec, Tensor

BN_ASSUMPTION = "batch norm folded per branch (running statistics)"


# ---------------------------------------------------------------------------
# elementary rewrites


def pad_kernel(weight: np.ndarray, to_kh: int, to_kw: int) -> np.ndarray:
    """Center a kernel in a zero field of the target size."""
    kh, kw = weight.shape[-2:]
    if to_kh < kh or to_kw < kw:
        raise MergeError(f"cannot pad kernel {kh}x{kw} down to {to_kh}x{to_kw}")
    if (to_kh - kh) % 2 or (to_kw - kw) % 2:
        raise MergeError(
            f"kernel {kh}x{kw} cannot be centered in {to_kh}x{to_kw}: size difference is odd"
        )
    ph, pw = (to_kh - kh) // 2, (to_kw - kw) // 2
    if ph == 0 and pw == 0:
        return weight.copy()
    pad = [(0, 0)] * (weight.ndim - 2) + [(ph, ph), (pw, pw)]
    return np.pad(weight, pad)


def expand_groups(weight: np.ndarray, from_groups: int, to_groups: int,
                  in_c: int, out_c: int) -> np.ndarray:
    """Re-lay a groups=from_groups kernel as groups=to_groups.

    Requires to_groups | from_groups; the result computes the same function,
    with zeros in every cross-subgroup position.
    """
    if from_groups % to_groups:
        raise MergeError(f"target groups {to_groups} must divide source groups {from_groups}")
    for g, name in ((from_groups, "source"), (to_groups, "target")):
        if in_c % g or out_c % g:
            raise MergeError(f"{name} groups {g} must divide channels {in_c}->{out_c}")
    if weight.shape[:2] != (out_c, in_c // from_groups):
        raise MergeError(
            f"weight shape {weight.shape} does not match groups={from_groups} layout"
        )
    if from_groups == to_groups:
        return weight.copy()
    src_w = in_c // from_groups
    dst_w = in_c // to_groups
    out = np.zeros((out_c,) + (dst_w,) + weight.shape[2:], dtype=weight.dtype)
    src_per_out = out_c // from_groups
    dst_per_out = out_c // to_groups
    for o in range(out_c):
        off = (o // src_per_out) * src_w - (o // dst_per_out) * dst_w
        out[o, off : off + src_w] = weight[o]
    return out


def fold_bn(conv_weight: np.ndarray, conv_bias: np.ndarray | None,
            gamma: np.ndarray, beta: np.ndarray, mean: np.ndarray,
            var: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Absorb a per-channel affine normalization into the preceding conv."""
    c = conv_weight.shape[0]
    for name, v in (("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)):
        if v.shape != (c,):
            raise SpecError(f"{name} length {v.shape} != out channels {c}")
    if np.any(var < 0):
        raise SpecError("variance must be non-negative")
    scale = gamma.astype(np.float64) / np.sqrt(var.astype(np.float64) + eps)
    w = conv_weight.astype(np.float64) * scale.reshape((-1,) + (1,) * (conv_weight.ndim - 1))
    b = np.zeros(c, dtype=np.float64) if conv_bias is None else conv_bias.astype(np.float64)
    b = beta.astype(np.float64) + (b - mean.astype(np.float64)) * scale
    return w, b


def fold_identity_branch(channels: int, base: ConvSpec) -> np.ndarray:
    """The identity map as a 1x1 kernel in the base group layout."""
    if base.in_channels != base.out_channels:
        raise MergeError("identity branch requires equal in/out channels")
    if base.in_channels != channels:
        raise MergeError(f"identity channels {channels} != conv channels {base.in_channels}")
    if base.stride != 1:
        raise MergeError("identity branch requires stride 1")
    group_w = channels // base.groups
    w = np.zeros((channels, group_w, 1, 1), dtype=np.float64)
    for o in range(channels):
        w[o, o % group_w, 0, 0] = 1.0
    return w


def merge_parallel_branches(base_spec: ConvSpec,
                            branches: list[tuple[ConvSpec, np.ndarray, np.ndarray | None]]
                            ) -> tuple[ConvSpec, np.ndarray, np.ndarray | None]:
    """Sum parallel convolutions into one at the base geometry.

    Every branch is validated against the base envelope; violations raise
    with the specific condition named. Branch biases (from folded norms)
    are summed.
    """
    if not branches:
        raise MergeError("bundle has no branches")
    kh, kw, g = base_spec.kernel_h, base_spec.kernel_w, base_spec.groups
    acc_w = np.zeros(base_spec.weight_shape, dtype=np.float64)
    acc_b = np.zeros(base_spec.out_channels, dtype=np.float64)
    any_bias = False
    for i, (spec, w, b) in enumerate(branches):
        tag = f"branch {i}"
        if (spec.in_channels, spec.out_channels) != (base_spec.in_channels, base_spec.out_channels):
            raise MergeError(f"{tag}: channels {spec.in_channels}->{spec.out_channels} differ from base")
        if spec.stride != base_spec.stride:
            raise MergeError(f"{tag}: stride {spec.stride} differs from base {base_spec.stride}")
        if spec.groups < g or spec.groups % g:
            raise MergeError(f"{tag}: groups {spec.groups} is not a multiple of base groups {g}")
        if spec.kernel_h > kh or spec.kernel_w > kw:
            raise MergeError(f"{tag}: kernel {spec.kernel_h}x{spec.kernel_w} exceeds base {kh}x{kw}")
        if (kh - spec.kernel_h) % 2 or (kw - spec.kernel_w) % 2:
            raise MergeError(f"{tag}: kernel parity does not allow centered embedding")
        expanded = expand_groups(w.astype(np.float64), spec.groups, g,
                                 spec.in_channels, spec.out_channels)
        acc_w += pad_kernel(expanded, kh, kw)
        if b is not None:
            acc_b += b.astype(np.float64)
            any_bias = True
    fused_spec = ConvSpec(base_spec.in_channels, base_spec.out_channels, kh, kw,
                          base_spec.stride, g, any_bias)
    return fused_spec, acc_w, (acc_b if any_bias else None)


def merge_asymmetric(w_full: np.ndarray, w_col: np.ndarray, w_row: np.ndarray) -> np.ndarray:
    """Sum a kxk kernel with (k,1) and (1,k) kernels padded to its size."""
    kh, kw = w_full.shape[-2:]
    for w, name in ((w_col, "column"), (w_row, "row")):
        if w.shape[:2] != w_full.shape[:2]:
            raise MergeError(f"{name} kernel channel layout differs from the full kernel")
    return w_full + pad_kernel(w_col, kh, kw) + pad_kernel(w_row, kh, kw)


# ---------------------------------------------------------------------------
# module-level fusion


def _branch_triples(mod: RepConv) -> list[tuple[ConvSpec, np.ndarray, np.ndarray | None]]:
    """Extract (spec, weight, bias) per branch with batch norms folded."""
    triples = []
    convs = [(mod.base, mod.base_bn)] + [
        (conv, mod.extra_bns[i] if mod.extra_bns is not None else None)
        for i, conv in enumerate(mod.extras)
    ]
    for conv, bn in convs:
        w = conv.weight.data.astype(np.float64)
        b = conv.bias.data.astype(np.float64) if conv.bias is not None else None
        if bn is not None:
            w, b = fold_bn(w, b, bn.gamma.data, bn.beta.data,
                           bn.running_mean, bn.running_var, bn.eps)
        triples.append((conv.spec, w, b))
    if mod.identity != "none":
        w = fold_identity_branch(mod.spec.base.in_channels, mod.spec.base)
        spec = ConvSpec(mod.spec.base.in_channels, mod.spec.base.out_channels, 1, 1,
                        1, mod.spec.base.groups, False)
        if mod.identity == "bn":
            bn = mod.id_bn
            w, b = fold_bn(w, None, bn.gamma.data, bn.beta.data,
                           bn.running_mean, bn.running_var, bn.eps)
            triples.append((spec, w, b))
        else:
            triples.append((spec, w, None))
    return triples


def fuse_repconv(mod: RepConv) -> Conv2d:
    """Collapse a parallel bundle into one convolution."""
    dtype = mod.base.weight.data.dtype
    fused_spec, w, b = merge_parallel_branches(mod.spec.base, _branch_triples(mod))
    out = Conv2d(fused_spec)
    # rebind rather than fill in place: the source bundle's precision wins,
    # not the fresh conv's default
    out.weight.data = np.ascontiguousarray(w.astype(dtype))
    if b is not None:
        out.bias.data = np.ascontiguousarray(b.astype(dtype))
    out.train(False)
    return out


def _passes_for(mod: RepConv) -> list[str]:
    passes = []
    if mod.spec.per_branch_bn or mod.identity == "bn":
        passes.append("fold_bn")
    if mod.identity != "none":
        passes.append("fold_identity")
    if any(e.groups != mod.spec.base.groups for e in mod.spec.extras):
        passes.append("expand_groups")
    if any((e.kernel_h, e.kernel_w) != (mod.spec.base.kernel_h, mod.spec.base.kernel_w)
           for e in mod.spec.extras) or mod.identity != "none":
        passes.append("pad_kernel")
    passes.append("merge_parallel")
    return passes


def _replace_child(parent: Module, name: str, new: Module):
    parent._modules[name] = new
    object.__setattr__(parent, name, new)
    if isinstance(parent, ModuleList):
        parent._items[int(name)] = new


def fuse_model(model):
    """Return the deployed form of a model: every bundle a single conv, no
    batch-norm modules anywhere. The input model is left untouched; the
    result carries the applied passes in .fusion_passes. Fusing an
    already-deployed model returns an equal copy (idempotent).
    """
    fused = copy.deepcopy(model)
    log: list[tuple[str, str]] = []
    for path, mod in list(fused.named_modules()):
        for child_name, child in list(mod._modules.items()):
            if isinstance(child, RepConv):
                child_path = f"{path}.{child_name}" if path else child_name
                try:
                    replacement = fuse_repconv(child)
                except MergeError as e:
                    raise MergeError(f"{child_path}: {e}") from None
                _replace_child(mod, child_name, replacement)
                for p in _passes_for(child):
                    log.append((p, child_path))
    for path, mod in fused.named_modules():
        if isinstance(mod, (RepConv, BatchNorm2d)):
            raise MergeError(f"{path}: structure not collapsed by fusion")
    fused.train(False)
    if hasattr(fused, "deployed"):
        fused.deployed = True
    fused.fusion_passes = log
    return fused


# ---------------------------------------------------------------------------
# equivalence certification


@dataclass
class FusionReport:
    passes_applied: list[tuple[str, str]]
    residuals: dict[str, float]
    samples: int
    tolerance: float
    assumption: str = BN_ASSUMPTION
    notes: list[str] = field(default_factory=list)

    @property
    def verdict(self) -> str:
        return "pass" if all(r < self.tolerance for r in self.residuals.values()) else "fail"

    @property
    def max_residual(self) -> float:
        return max(self.residuals.values()) if self.residuals else 0.0


def _paired_layers(model_a, model_b) -> list[tuple[str, Module, Module]]:
    """Same-path conv layers to compare one-to-one.

    A training-form bundle pairs with the single conv that replaced it; a
    bundle's internal convs are skipped (the bundle is the unit). Plain
    convs pair with plain convs, so a model also verifies against itself.
    """
    mods_b = dict(model_b.named_modules())
    pairs = []
    covered: list[str] = []
    for path, mod in model_a.named_modules():
        if any(path.startswith(p + ".") for p in covered):
            continue
        if not isinstance(mod, (RepConv, Conv2d)):
            continue
        other = mods_b.get(path)
        if other is None or not isinstance(other, (RepConv, Conv2d)):
            raise VerificationError(f"{path}: no comparable layer in the second model")
        covered.append(path)
        pairs.append((path, mod, other))
    return pairs


def _max_abs_diff(a: Tensor, b: Tensor) -> float:
    if a.shape != b.shape:
        raise VerificationError(f"output shapes differ: {a.shape} vs {b.shape}")
    return float(np.abs(a.data.astype(np.float64) - b.data.astype(np.float64)).max())


def verify_equivalence(model_a, model_b, n_samples: int = 100, tolerance: float = 1e-3,
                       seed: int = 0, input_hw: int = 224, batch: int | None = None,
                       dtype: type = np.float32) -> FusionReport:
    """Compare two models on seeded random inputs.

    Residuals are layer-local (each paired conv layer evaluated on the same
    input, taken from the first model's forward pass) plus the end-to-end
    output difference, all max abs over every sample. Both models run in
    inference mode (running statistics), the regime fusion preserves.

    `dtype` sets the input precision. The f32 default matches deployment;
    pass float64 (with both models cast) to check the merge algebra itself,
    free of the single rounding the stored fused weights pick up.
    """
    if getattr(model_a, "classes", None) != getattr(model_b, "classes", None):
        raise VerificationError(
            f"output signatures differ: {getattr(model_a, 'classes', '?')} vs "
            f"{getattr(model_b, 'classes', '?')} classes"
        )
    if n_samples < 1:
        raise VerificationError("need at least one sample")
    model_a.train(False)
    model_b.train(False)
    if batch is None:
        batch = 2 if input_hw >= 128 else (8 if input_hw >= 64 else 16)

    pairs = _paired_layers(model_a, model_b)
    residuals: dict[str, float] = {path: 0.0 for path, _, _ in pairs}
    residuals["end_to_end"] = 0.0

    def compare_hook(path: str, twin: Module):
        def hook(mod, args, out):
            # forward() directly: the twin may be this very module when a
            # model is checked against itself, and its hook must not re-fire
            r = _max_abs_diff(out, twin.forward(args[0]))
            residuals[path] = max(residuals[path], r)
        return hook

    for path, mod, twin in pairs:
        mod._call_hook = compare_hook(path, twin)
    rng = np.random.default_rng(seed)
    try:
        done = 0
        while done < n_samples:
            n = min(batch, n_samples - done)
            x = Tensor(rng.standard_normal((n, 3, input_hw, input_hw)).astype(dtype))
            out_a = model_a(x)
            out_b = model_b(x)
            residuals["end_to_end"] = max(residuals["end_to_end"], _max_abs_diff(out_a, out_b))
            done += n
    finally:
        for _, mod, _ in pairs:
            mod._call_hook = None
    passes = getattr(model_b, "fusion_passes", getattr(model_a, "fusion_passes", []))
    return FusionReport(passes_applied=list(passes), residuals=residuals,
                        samples=n_samples, tolerance=tolerance)
