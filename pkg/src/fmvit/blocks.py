"""Building blocks in their training (multi-branch) form.

Every parallel-conv structure here is a RepConv bundle: a base convolution
plus extra branches that the reparam module later collapses into the base
geometry. Blocks therefore never special-case deployment; fusion swaps the
bundles for single convolutions and the surrounding graph (adds, concats,
ReLU, pooling, attention arithmetic) is already deployment-shaped.

Channel conventions: bundles with batch norm carry no conv bias (the norm
supplies the affine part); attention projections are bias-free so a zero
input maps to a zero output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError, SpecError
from .nn import BatchNorm2d, Conv2d, Module, ModuleList
from .tensor import ConvSpec, Tensor

HEAD_DIM = 32  # attention head width, fixed


# ---------------------------------------------------------------------------
# branch bundles


@dataclass(frozen=True)
class BranchSpec:
    """A base conv plus parallel extras that merge into the base geometry."""

    base: ConvSpec
    extras: tuple[ConvSpec, ...] = ()
    per_branch_bn: bool = True

    def __post_init__(self):
        b = self.base
        for e in self.extras:
            if (e.in_channels, e.out_channels) != (b.in_channels, b.out_channels):
                raise SpecError("extra branch channel counts must match the base")
            if e.stride != b.stride:
                raise SpecError("extra branch stride must match the base")
            if e.groups < b.groups or e.groups % b.groups:
                raise SpecError(
                    f"extra groups {e.groups} must be a multiple of base groups {b.groups}"
                )
            if e.kernel_h > b.kernel_h or e.kernel_w > b.kernel_w:
                raise SpecError("extra kernel must not exceed the base kernel")
            if (b.kernel_h - e.kernel_h) % 2 or (b.kernel_w - e.kernel_w) % 2:
                raise SpecError("kernel size difference must be even for centered embedding")
            if self.per_branch_bn and e.has_bias:
                raise SpecError("branches with batch norm must not carry a conv bias")
        if self.per_branch_bn and b.has_bias:
            raise SpecError("branches with batch norm must not carry a conv bias")

    @property
    def branch_count(self) -> int:
        return 1 + len(self.extras)


def default_extra_groups(in_c: int, out_c: int, base_groups: int = 1, n: int = 2,
                         prefer: tuple | None = None) -> tuple[int, ...]:
    """Pick up to n distinct extra group counts for a bundle.

    Preference order: 2, then the full common channel divisor, then the
    largest remaining valid divisors. Valid means: divides both channel
    counts and is a positive multiple of the base group count. An explicit
    prefer list is honored first, skipping entries a given bundle cannot
    support.
    """
    limit = math.gcd(in_c, out_c)
    valid = [g for g in range(1, limit + 1) if limit % g == 0 and g % base_groups == 0]
    picks = []
    for want in (prefer if prefer is not None else (2, limit)):
        if want in valid and want not in picks:
            picks.append(want)
    for g in sorted(valid, reverse=True):
        if len(picks) >= n:
            break
        if g not in picks:
            picks.append(g)
    return tuple(sorted(picks[:n]))


def bundle_1x1(in_c: int, out_c: int, stride: int = 1, extras_n: int = 2,
               bn: bool = True, bias: bool = False,
               groups_prefer: tuple | None = None) -> BranchSpec:
    """1x1 bundle with multi-group extras (channel-mixing convolutions)."""
    base = ConvSpec(in_c, out_c, 1, 1, stride, 1, bias)
    extras = tuple(
        ConvSpec(in_c, out_c, 1, 1, stride, g, bias)
        for g in default_extra_groups(in_c, out_c, 1, extras_n, groups_prefer)
    )
    return BranchSpec(base, extras, per_branch_bn=bn)


def bundle_dw(channels: int, k: int = 3, stride: int = 1, pointwise_extra: bool = True) -> BranchSpec:
    """Depthwise k x k bundle with an optional depthwise 1x1 extra."""
    base = ConvSpec(channels, channels, k, k, stride, channels, False)
    extras = (ConvSpec(channels, channels, 1, 1, stride, channels, False),) if pointwise_extra else ()
    return BranchSpec(base, extras, per_branch_bn=True)


def bundle_asym(in_c: int, out_c: int, k: int = 3, stride: int = 1) -> BranchSpec:
    """k x k bundle with (k,1) and (1,k) edge-extraction extras."""
    base = ConvSpec(in_c, out_c, k, k, stride, 1, False)
    extras = (
        ConvSpec(in_c, out_c, k, 1, stride, 1, False),
        ConvSpec(in_c, out_c, 1, k, stride, 1, False),
    )
    return BranchSpec(base, extras, per_branch_bn=True)


class RepConv(Module):
    """Parallel conv branches summed, optionally with an identity branch.

    identity is one of "none", "plain" (x itself), "bn" (batch-normed x);
    the identity branch requires matching channels and stride 1.
    """

    def __init__(self, spec: BranchSpec, identity: str = "none", rng: np.random.Generator | None = None):
        super().__init__()
        if identity not in ("none", "plain", "bn"):
            raise SpecError(f"unknown identity kind {identity!r}")
        b = spec.base
        if identity != "none" and (b.in_channels != b.out_channels or b.stride != 1):
            raise SpecError("identity branch requires equal channels and stride 1")
        self.spec = spec
        self.identity = identity
        rng = rng or np.random.default_rng(0)
        self.base = Conv2d(b, rng)
        self.extras = ModuleList([Conv2d(e, rng) for e in spec.extras])
        if spec.per_branch_bn:
            self.base_bn = BatchNorm2d(b.out_channels)
            self.extra_bns = ModuleList([BatchNorm2d(b.out_channels) for _ in spec.extras])
        else:
            self.base_bn = None
            self.extra_bns = None
        self.id_bn = BatchNorm2d(b.out_channels) if identity == "bn" else None

    def forward(self, x: Tensor) -> Tensor:
        y = self.base(x)
        if self.base_bn is not None:
            y = self.base_bn(y)
        for i, conv in enumerate(self.extras):
            e = conv(x)
            if self.extra_bns is not None:
                e = self.extra_bns[i](e)
            y = T.add(y, e)
        if self.identity == "plain":
            y = T.add(y, x)
        elif self.identity == "bn":
            y = T.add(y, self.id_bn(x))
        return y


# ---------------------------------------------------------------------------
# patch embedding


class PatchEmbed(Module):
    """Stage adaptor: optional 2x2 average-pool halving, then a 1x1 bundle.

    Exact identity when channels match and no downsampling is requested.
    """

    def __init__(self, in_c: int, out_c: int, downsample: bool = False,
                 extras_n: int = 2, rng: np.random.Generator | None = None,
                 groups_prefer: tuple | None = None):
        super().__init__()
        self.in_c = in_c
        self.out_c = out_c
        self.downsample = downsample
        if downsample or in_c != out_c:
            self.conv = RepConv(bundle_1x1(in_c, out_c, extras_n=extras_n,
                                           groups_prefer=groups_prefer), rng=rng)
        else:
            self.conv = None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_c:
            raise ShapeError(f"patch embed expects {self.in_c} channels, got {x.shape[1]}")
        if self.downsample:
            x = T.avg_pool2d(x, 2, 2)
        if self.conv is not None:
            x = self.conv(x)
        return x


# ---------------------------------------------------------------------------
# gMLP


@dataclass(frozen=True)
class GMLPSpec:
    width_in: int
    hidden: int
    width_out: int
    conv1_branches: BranchSpec
    conv2_branches: BranchSpec
    mid_dw: ConvSpec | None = None
    shortcut: bool = True

    def __post_init__(self):
        for bundle, name in ((self.conv1_branches, "conv1"), (self.conv2_branches, "conv2")):
            for cs in (bundle.base,) + bundle.extras:
                if (cs.kernel_h, cs.kernel_w) != (1, 1):
                    raise SpecError(f"{name} bundle kernels must all be 1x1")
        c1, c2 = self.conv1_branches.base, self.conv2_branches.base
        if (c1.in_channels, c1.out_channels) != (self.width_in, self.hidden):
            raise SpecError("conv1 bundle geometry disagrees with widths")
        if (c2.in_channels, c2.out_channels) != (self.hidden, self.width_out):
            raise SpecError("conv2 bundle geometry disagrees with widths")
        if self.mid_dw is not None:
            m = self.mid_dw
            if not (m.groups == m.in_channels == m.out_channels == self.hidden):
                raise SpecError("mid conv must be depthwise at the hidden width")
            if m.stride != 1:
                raise SpecError("mid conv must keep resolution")


def make_gmlp_spec(width_in: int, width_out: int | None = None, expansion: int = 2,
                   extras_n: int = 2, mid_dw: bool = True, shortcut: bool = True,
                   groups_prefer: tuple | None = None) -> GMLPSpec:
    width_out = width_in if width_out is None else width_out
    hidden = expansion * width_in
    return GMLPSpec(
        width_in=width_in,
        hidden=hidden,
        width_out=width_out,
        conv1_branches=bundle_1x1(width_in, hidden, extras_n=extras_n,
                                  groups_prefer=groups_prefer),
        conv2_branches=bundle_1x1(hidden, width_out, extras_n=extras_n,
                                  groups_prefer=groups_prefer),
        mid_dw=ConvSpec(hidden, hidden, 3, 3, 1, hidden, False) if mid_dw else None,
        shortcut=shortcut,
    )


class GMLP(Module):
    """Channel MLP from 1x1 bundles: bundle -> ReLU -> optional depthwise
    3x3 with shortcut -> bundle. Fuses to two (or three) plain convs.
    """

    def __init__(self, spec: GMLPSpec, rng: np.random.Generator | None = None):
        super().__init__()
        self.spec = spec
        self.conv1 = RepConv(spec.conv1_branches, rng=rng)
        if spec.mid_dw is not None:
            mid_bundle = BranchSpec(spec.mid_dw, (), per_branch_bn=True)
            self.mid = RepConv(mid_bundle, identity="plain" if spec.shortcut else "none", rng=rng)
        else:
            self.mid = None
        self.conv2 = RepConv(spec.conv2_branches, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.spec.width_in:
            raise ShapeError(f"mlp expects {self.spec.width_in} channels, got {x.shape[1]}")
        h = T.relu(self.conv1(x))
        if self.mid is not None:
            h = self.mid(h)
        return self.conv2(h)


# ---------------------------------------------------------------------------
# CFB


@dataclass(frozen=True)
class CFBSpec:
    channels: int
    dw_branches: BranchSpec
    mlp: GMLPSpec

    def __post_init__(self):
        b = self.dw_branches.base
        if not (b.groups == b.in_channels == b.out_channels == self.channels):
            raise SpecError("token mixer must be depthwise at the block width")
        if b.stride != 1:
            raise SpecError("token mixer must keep resolution")
        if self.mlp.width_in != self.channels or self.mlp.width_out != self.channels:
            raise SpecError("mlp must preserve the block width")


def make_cfb_spec(channels: int, dw_kernel: int = 3, expansion: int = 2,
                  extras_n: int = 2, mid_dw: bool = True,
                  groups_prefer: tuple | None = None) -> CFBSpec:
    return CFBSpec(
        channels=channels,
        dw_branches=bundle_dw(channels, dw_kernel),
        mlp=make_gmlp_spec(channels, channels, expansion, extras_n, mid_dw,
                           groups_prefer=groups_prefer),
    )


class CFB(Module):
    """Residual conv block: depthwise token mixer, then a channel MLP.

    The mixer bundle carries the residual as its identity-BN branch, so the
    whole mixer (including the skip) fuses into one depthwise convolution.
    """

    def __init__(self, spec: CFBSpec, rng: np.random.Generator | None = None):
        super().__init__()
        self.spec = spec
        self.mixer = RepConv(spec.dw_branches, identity="bn", rng=rng)
        self.mlp = GMLP(spec.mlp, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.spec.channels:
            raise ShapeError(f"block expects {self.spec.channels} channels, got {x.shape[1]}")
        h = self.mixer(x)
        return T.add(h, self.mlp(h))


# ---------------------------------------------------------------------------
# attention


@dataclass(frozen=True)
class RLMHSASpec:
    dim: int
    heads: int
    shared_proj: BranchSpec
    scale_mode: str = "paper_literal"

    def __post_init__(self):
        if self.dim % HEAD_DIM:
            raise SpecError(f"attention width {self.dim} must be divisible by {HEAD_DIM}")
        if self.heads != self.dim // HEAD_DIM:
            raise SpecError("head count must equal width / head size")
        if self.scale_mode not in ("paper_literal", "scaled_by_sqrt_d"):
            raise SpecError(f"unknown scale_mode {self.scale_mode!r}")
        b = self.shared_proj.base
        if (b.in_channels, b.out_channels, b.kernel_h, b.kernel_w) != (self.dim, self.dim, 1, 1):
            raise SpecError("shared projection must be a square 1x1 map")
        if b.has_bias or self.shared_proj.per_branch_bn:
            raise SpecError("shared projection must be bias-free")

    @property
    def scale(self) -> float:
        return 1.0 if self.scale_mode == "paper_literal" else 1.0 / math.sqrt(HEAD_DIM)


def make_rlmhsa_spec(dim: int, extras_n: int = 2, scale_mode: str = "paper_literal",
                     groups_prefer: tuple | None = None) -> RLMHSASpec:
    proj = bundle_1x1(dim, dim, extras_n=extras_n, bn=False, bias=False,
                      groups_prefer=groups_prefer)
    return RLMHSASpec(dim=dim, heads=dim // HEAD_DIM, shared_proj=proj, scale_mode=scale_mode)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """(N, C, H, W) -> (N, heads, M, C/heads) token layout."""
    n, c, h, w = x.shape
    return T.transpose(T.reshape(x, (n, heads, c // heads, h * w)), (0, 1, 3, 2))


def _merge_heads(x: Tensor, h: int, w: int) -> Tensor:
    n, heads, m, hd = x.shape
    return T.reshape(T.transpose(x, (0, 1, 3, 2)), (n, heads * hd, h, w))


def _head_attention(q: Tensor, k: Tensor, v: Tensor, scale: float) -> Tensor:
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))
    if scale != 1.0:
        scores = T.scale(scores, scale)
    return T.matmul(T.softmax_lastdim(scores), v)


class RLMHSA(Module):
    """Self-attention with one shared projection: keys and values are both
    XW while queries are the raw input, so a single matrix serves all roles.
    """

    def __init__(self, spec: RLMHSASpec, rng: np.random.Generator | None = None):
        super().__init__()
        self.spec = spec
        self.proj = RepConv(spec.shared_proj, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        if c != self.spec.dim:
            raise ShapeError(f"attention expects width {self.spec.dim}, got {c}")
        kv = self.proj(x)
        q = _split_heads(x, self.spec.heads)
        kvh = _split_heads(kv, self.spec.heads)
        out = _head_attention(q, kvh, kvh, self.spec.scale)
        return _merge_heads(out, h, w)


class StdMHSA(Module):
    """Conventional attention with separate query/key/value projections."""

    def __init__(self, dim: int, scale_mode: str = "paper_literal",
                 rng: np.random.Generator | None = None):
        super().__init__()
        if dim % HEAD_DIM:
            raise SpecError(f"attention width {dim} must be divisible by {HEAD_DIM}")
        self.dim = dim
        self.heads = dim // HEAD_DIM
        self.scale = 1.0 if scale_mode == "paper_literal" else 1.0 / math.sqrt(HEAD_DIM)
        spec = ConvSpec(dim, dim, 1, 1, 1, 1, False)
        rng = rng or np.random.default_rng(0)
        self.q_proj = Conv2d(spec, rng)
        self.k_proj = Conv2d(spec, rng)
        self.v_proj = Conv2d(spec, rng)

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        if c != self.dim:
            raise ShapeError(f"attention expects width {self.dim}, got {c}")
        q = _split_heads(self.q_proj(x), self.heads)
        k = _split_heads(self.k_proj(x), self.heads)
        v = _split_heads(self.v_proj(x), self.heads)
        return _merge_heads(_head_attention(q, k, v, self.scale), h, w)


# ---------------------------------------------------------------------------
# FMB


@dataclass(frozen=True)
class FMBSpec:
    in_channels: int
    fm_channels: int
    hf_stages: tuple[CFBSpec, CFBSpec, CFBSpec]
    lf_stage: RLMHSASpec
    out_channels: int
    mlp: GMLPSpec
    pe_extras_n: int = 2                    # branch config for the internal adaptors
    pe_groups_prefer: tuple | None = None

    def __post_init__(self):
        if len(self.hf_stages) != 3:
            raise SpecError("exactly three high-frequency stages required")
        for s in self.hf_stages:
            if s.channels != self.fm_channels:
                raise SpecError("every high-frequency stage must run at the split width")
        cw = self.concat_width
        if self.mlp.width_in != cw or self.mlp.width_out != cw:
            raise SpecError("mlp must preserve the concatenation width for the residual")

    @property
    def concat_width(self) -> int:
        return self.in_channels + 4 * self.fm_channels


def make_fmb_spec(in_channels: int, attn_dim: int, out_channels: int, fm_channels: int,
                  expansion: int = 2, extras_n: int = 2, mid_dw: bool = True,
                  scale_mode: str = "paper_literal",
                  groups_prefer: tuple | None = None) -> FMBSpec:
    cfb = lambda: make_cfb_spec(fm_channels, 3, expansion, extras_n, mid_dw, groups_prefer)
    concat = in_channels + 4 * fm_channels
    return FMBSpec(
        in_channels=in_channels,
        fm_channels=fm_channels,
        hf_stages=(cfb(), cfb(), cfb()),
        lf_stage=make_rlmhsa_spec(attn_dim, extras_n, scale_mode, groups_prefer),
        out_channels=out_channels,
        mlp=make_gmlp_spec(concat, concat, expansion, extras_n, mid_dw,
                           groups_prefer=groups_prefer),
        pe_extras_n=extras_n,
        pe_groups_prefer=groups_prefer,
    )


class FMB(Module):
    """Multi-branch mixing block: three cascaded conv stages produce
    progressively filtered local features, an attention stage produces the
    global feature, and everything (plus the input) is concatenated and
    pushed through a residual MLP.

    Set collect_taps to capture the five concatenated streams (attention
    output, block input, three conv-stage outputs) in last_taps.
    """

    def __init__(self, spec: FMBSpec, rng: np.random.Generator | None = None,
                 attention_cls=None):
        super().__init__()
        self.spec = spec
        self.collect_taps = False
        self.last_taps: list[tuple[str, str, Tensor]] | None = None
        pe = lambda a, b: PatchEmbed(a, b, extras_n=spec.pe_extras_n, rng=rng,
                                     groups_prefer=spec.pe_groups_prefer)
        self.pe_in = pe(spec.in_channels, spec.fm_channels)
        self.f1 = CFB(spec.hf_stages[0], rng=rng)
        self.f2 = CFB(spec.hf_stages[1], rng=rng)
        self.f3 = CFB(spec.hf_stages[2], rng=rng)
        self.attn_pre = pe(spec.fm_channels, spec.lf_stage.dim)
        if attention_cls is None:
            self.attn = RLMHSA(spec.lf_stage, rng=rng)
        else:
            self.attn = attention_cls(spec.lf_stage.dim, spec.lf_stage.scale_mode, rng=rng)
        self.attn_post = pe(spec.lf_stage.dim, spec.fm_channels)
        self.mlp = GMLP(spec.mlp, rng=rng)
        if spec.out_channels != spec.concat_width:
            self.proj_out = pe(spec.concat_width, spec.out_channels)
        else:
            self.proj_out = None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"block expects {self.spec.in_channels} channels, got {x.shape[1]}")
        z1 = self.f1(self.pe_in(x))
        z2 = self.f2(z1)
        z3 = self.f3(z2)
        z4 = self.attn_post(self.attn(self.attn_pre(z3)))
        z = T.concat_channels([x, z1, z2, z3, z4])
        y = T.add(z, self.mlp(z))
        if self.proj_out is not None:
            y = self.proj_out(y)
        if self.collect_taps:
            self.last_taps = [
                ("f1", "attention", z4),
                ("f2", "input", x),
                ("f3", "cfb", z1),
                ("f4", "cfb", z2),
                ("f5", "cfb", z3),
            ]
        return y


class AttnOnlyBlock(Module):
    """Ablation stand-in for FMB: attention output fed straight into the
    residual MLP, no multi-branch concatenation.
    """

    def __init__(self, in_channels: int, attn_dim: int, out_channels: int,
                 mlp: GMLPSpec, attention,
                 rng: np.random.Generator | None = None, extras_n: int = 2,
                 groups_prefer: tuple | None = None):
        super().__init__()
        if mlp.width_in != attn_dim or mlp.width_out != attn_dim:
            raise SpecError("mlp must preserve the attention width for the residual")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.pe_in = PatchEmbed(in_channels, attn_dim, extras_n=extras_n, rng=rng,
                                groups_prefer=groups_prefer)
        self.attn = attention
        self.mlp = GMLP(mlp, rng=rng)
        self.pe_out = PatchEmbed(attn_dim, out_channels, extras_n=extras_n, rng=rng,
                                 groups_prefer=groups_prefer)

    def forward(self, x: Tensor) -> Tensor:
        h = self.attn(self.pe_in(x))
        h = T.add(h, self.mlp(h))
        return self.pe_out(h)


# ---------------------------------------------------------------------------
# stem


class Stem(Module):
    """Input reduction to 1/4 resolution: a 3x3 stride-2 bundle with row and
    column edge-extraction extras, a depthwise 3x3 stride-2, then a 1x1
    channel-mixing bundle; ReLU after each.
    """

    def __init__(self, in_c: int, channels: tuple[int, int, int],
                 extras_n: int = 2, rng: np.random.Generator | None = None,
                 groups_prefer: tuple | None = None):
        super().__init__()
        c1, c2, c3 = channels
        if c2 != c1:
            raise SpecError("depthwise stage keeps the channel count, so c2 must equal c1")
        self.channels = channels
        self.conv1 = RepConv(bundle_asym(in_c, c1, 3, stride=2), rng=rng)
        self.dw = RepConv(BranchSpec(ConvSpec(c1, c2, 3, 3, 2, c1, False)), rng=rng)
        self.conv3 = RepConv(bundle_1x1(c2, c3, extras_n=extras_n,
                                        groups_prefer=groups_prefer), rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        if h % 4 or w % 4:
            raise ShapeError(f"stem needs spatial dims divisible by 4, got {h}x{w}")
        x = T.relu(self.conv1(x))
        x = T.relu(self.dw(x))
        return T.relu(self.conv3(x))
