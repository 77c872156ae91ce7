"""Variant table and whole-model assembly.

A model is: stem (1/4 resolution) -> four stages -> global average pool ->
linear classifier. Stage 1 stacks residual conv blocks; stages 2-4 stack
multi-frequency blocks behind an average-pool downsampling patch embed, so
the spatial schedule is 1/4, 1/8, 1/16, 1/32 of the input.

Stage channel triples are read as (block input, attention width, block
output); when consecutive conv blocks change width, a 1x1 patch embed
adapter is inserted between them, and repeated multi-frequency blocks chain
their widths (first block input -> output, later blocks output -> output).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import (
    FMB,
    AttnOnlyBlock,
    CFB,
    PatchEmbed,
    StdMHSA,
    Stem,
    make_cfb_spec,
    make_fmb_spec,
    make_gmlp_spec,
)
from .errors import SpecError
from .nn import BatchNorm2d, Linear, Module, ModuleList
from .tensor import Tensor


@dataclass(frozen=True)
class StageSpec:
    kind: str                       # "cfb" or "fmb"
    pe_channels: int                # patch-embed output width
    downsample: bool
    channels: tuple[int, int, int]  # (input, inner, output)
    fm_channels: int                # split width; 0 for cfb stages
    blocks: int

    def __post_init__(self):
        if self.kind not in ("cfb", "fmb"):
            raise SpecError(f"unknown stage kind {self.kind!r}")
        if self.blocks < 1:
            raise SpecError("stage needs at least one block")
        if self.kind == "fmb" and self.fm_channels < 1:
            raise SpecError("fmb stage needs a positive split width")
        if self.channels[0] != self.pe_channels:
            raise SpecError("stage input width must match its patch embed output")
        # conv stages walk the triple one block at a time
        if self.kind == "cfb" and self.channels[min(self.blocks - 1, 2)] != self.channels[2]:
            raise SpecError("conv stage has too few blocks to reach its output width")


@dataclass(frozen=True)
class VariantSpec:
    name: str
    stem_channels: tuple[int, int, int]
    stages: tuple[StageSpec, ...]

    def __post_init__(self):
        if len(self.stages) != 4:
            raise SpecError("a variant has exactly four stages")
        for i, s in enumerate(self.stages):
            if i == 0 and s.downsample:
                raise SpecError("stage 1 runs at stem resolution")
            if i > 0 and not s.downsample:
                raise SpecError("stages 2-4 each halve the resolution")

    @property
    def out_channels(self) -> int:
        return self.stages[-1].channels[2]


def _stage(kind, pe, ds, triple, fm, blocks) -> StageSpec:
    return StageSpec(kind, pe, ds, triple, fm, blocks)


_TABLE: dict[str, VariantSpec] = {
    "T": VariantSpec("T", (32, 32, 32), (
        _stage("cfb", 32, False, (32, 32, 32), 0, 3),
        _stage("fmb", 32, True, (32, 64, 80), 16, 1),
        _stage("fmb", 80, True, (80, 128, 160), 32, 1),
        _stage("fmb", 160, True, (160, 192, 320), 64, 1),
    )),
    "S": VariantSpec("S", (48, 48, 48), (
        _stage("cfb", 48, False, (48, 48, 48), 0, 3),
        _stage("fmb", 48, True, (48, 96, 160), 32, 1),
        _stage("fmb", 160, True, (160, 192, 320), 64, 1),
        _stage("fmb", 320, True, (320, 384, 640), 128, 1),
    )),
    "M": VariantSpec("M", (64, 64, 64), (
        _stage("cfb", 64, False, (64, 96, 96), 0, 3),
        _stage("fmb", 96, True, (96, 128, 160), 32, 1),
        _stage("fmb", 160, True, (160, 320, 480), 96, 1),
        _stage("fmb", 480, True, (480, 512, 960), 192, 1),
    )),
    "B": VariantSpec("B", (64, 64, 64), (
        _stage("cfb", 64, False, (64, 96, 96), 0, 3),
        _stage("fmb", 96, True, (96, 256, 320), 64, 1),
        _stage("fmb", 320, True, (320, 384, 480), 96, 2),
        _stage("fmb", 480, True, (480, 640, 1280), 256, 1),
    )),
    "L": VariantSpec("L", (64, 64, 64), (
        _stage("cfb", 64, False, (64, 96, 96), 0, 6),
        _stage("fmb", 96, True, (96, 256, 320), 64, 1),
        _stage("fmb", 320, True, (320, 384, 480), 96, 5),
        _stage("fmb", 480, True, (480, 640, 1280), 256, 1),
    )),
    # toy variant sized for CPU training runs
    "nano": VariantSpec("nano", (16, 16, 16), (
        _stage("cfb", 16, False, (16, 16, 16), 0, 1),
        _stage("fmb", 16, True, (16, 32, 32), 8, 1),
        _stage("fmb", 32, True, (32, 32, 64), 8, 1),
        _stage("fmb", 64, True, (64, 64, 128), 16, 1),
    )),
}


def variant_names() -> tuple[str, ...]:
    return tuple(_TABLE)


def variant_spec(name: str) -> VariantSpec:
    try:
        return _TABLE[name]
    except KeyError:
        raise SpecError(f"unknown variant {name!r}; choose from {', '.join(_TABLE)}") from None


def _cfb_widths(triple: tuple[int, int, int], blocks: int) -> list[int]:
    """Per-block widths for a conv stage: the triple, last value repeated."""
    return [triple[min(i, 2)] for i in range(blocks)]


class Stage(Module):
    """One resolution level: a patch embed followed by blocks (with 1x1
    adapters wherever consecutive conv blocks change width)."""

    def __init__(self, ops):
        super().__init__()
        self.ops = ModuleList(ops)

    def forward(self, x: Tensor) -> Tensor:
        for op in self.ops:
            x = op(x)
        return x


class Model(Module):
    def __init__(self, variant: VariantSpec, classes: int, stem: Stem,
                 stages: list[Stage], head: Linear):
        super().__init__()
        self.variant = variant
        self.classes = classes
        self.deployed = False
        self.stem = stem
        self.stages = ModuleList(stages)
        self.head = head

    def forward(self, x: Tensor) -> Tensor:
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
        return self.head(T.global_avg_pool(x))

    def fmb_blocks(self):
        """(path, block) pairs for every multi-frequency block, in order."""
        return [(name, m) for name, m in self.named_modules() if isinstance(m, FMB)]


def build_model(variant: str | VariantSpec, classes: int = 1000, seed: int = 0,
                extras_n: int = 2, mid_dw: bool = True,
                scale_mode: str = "paper_literal",
                use_fmb: bool = True, use_gmlp: bool = True,
                use_rlmhsa: bool = True,
                extra_groups: tuple | None = None) -> Model:
    """Assemble a training-form model.

    The use_* switches exist for the ablation harness: without gmlp, MLPs
    drop their extra branches and mid conv; without rlmhsa, attention uses
    three separate projections; without fmb, stages 2-4 use attention-only
    blocks instead of multi-frequency blocks. extra_groups overrides the
    preferred group counts for the channel-mixing extras.
    """
    spec = variant_spec(variant) if isinstance(variant, str) else variant
    if classes < 1:
        raise SpecError("class count must be positive")
    rng = np.random.default_rng(seed)
    if not use_gmlp:
        extras_n, mid_dw = 0, False

    stem = Stem(3, spec.stem_channels, extras_n=extras_n, rng=rng,
                groups_prefer=extra_groups)
    prev = spec.stem_channels[2]
    stages = []
    for st in spec.stages:
        ops: list[Module] = [PatchEmbed(prev, st.pe_channels, downsample=st.downsample,
                                        extras_n=extras_n, rng=rng,
                                        groups_prefer=extra_groups)]
        width = st.pe_channels
        if st.kind == "cfb":
            for w in _cfb_widths(st.channels, st.blocks):
                if w != width:
                    ops.append(PatchEmbed(width, w, extras_n=extras_n, rng=rng,
                                          groups_prefer=extra_groups))
                    width = w
                ops.append(CFB(make_cfb_spec(w, 3, 2, extras_n, mid_dw, extra_groups), rng=rng))
        else:
            in_c, attn_dim, out_c = st.channels
            for b in range(st.blocks):
                block_in = in_c if b == 0 else out_c
                if use_fmb:
                    fspec = make_fmb_spec(block_in, attn_dim, out_c, st.fm_channels,
                                          2, extras_n, mid_dw, scale_mode, extra_groups)
                    attn_cls = None if use_rlmhsa else StdMHSA
                    ops.append(FMB(fspec, rng=rng, attention_cls=attn_cls))
                else:
                    if use_rlmhsa:
                        from .blocks import RLMHSA, make_rlmhsa_spec
                        attn = RLMHSA(make_rlmhsa_spec(attn_dim, extras_n, scale_mode,
                                                       extra_groups), rng=rng)
                    else:
                        attn = StdMHSA(attn_dim, scale_mode, rng=rng)
                    mlp = make_gmlp_spec(attn_dim, attn_dim, 2, extras_n, mid_dw,
                                         groups_prefer=extra_groups)
                    ops.append(AttnOnlyBlock(block_in, attn_dim, out_c, mlp, attn, rng=rng,
                                             extras_n=extras_n, groups_prefer=extra_groups))
                width = out_c
        stages.append(Stage(ops))
        prev = st.channels[2]

    head = Linear(spec.out_channels, classes, rng=rng)
    return Model(spec, classes, stem, stages, head)


def calibrate_bn(model: Model, x: Tensor) -> Model:
    """Adopt batch statistics from one forward pass as the running stats.

    Freshly initialized batch-norm buffers (mean 0, var 1) do not describe
    the activations a randomly weighted multi-branch model actually
    produces, so inference-mode outputs drift out of float32 range at real
    input sizes. One calibration pass pins every layer's running stats to
    observed values; training updates them further as usual.
    """
    was_training = model.training
    bns = [m for _, m in model.named_modules() if isinstance(m, BatchNorm2d)]
    saved = [bn.momentum for bn in bns]
    for bn in bns:
        bn.momentum = 1.0
    model.train(True)
    try:
        model(x)
    finally:
        for bn, mom in zip(bns, saved):
            bn.momentum = mom
        model.train(was_training)
    return model
