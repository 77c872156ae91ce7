"""Static and dynamic model analysis: parameter census, MAC accounting,
shape tracing, and radial Fourier profiles of selected feature maps.

Cost accounting walks a real forward pass through call hooks, so reported
shapes and counts always describe the graph as executed. MACs follow the
vision-literature convention (one multiply-accumulate per kernel tap);
pure additions (pooling, residual sums, branch sums, biases) are kept in a
separate adds column. The doubled-FLOPs figure is reported alongside.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import FMB, CFB, GMLP, PatchEmbed, RepConv, RLMHSA, StdMHSA, AttnOnlyBlock
from .errors import ShapeError, SpecError
from .nn import BatchNorm2d, Conv2d, Linear, Module
from .tensor import Tensor

SPECTRUM_BINS = 16
LOW_FREQ_CUTOFF = 0.25  # fraction of the per-axis limit frequency


# ---------------------------------------------------------------------------
# cost reports


@dataclass
class CostRow:
    path: str
    kind: str
    params: int
    buffers: int           # running statistics, reported separately
    macs: int
    adds: int
    out_dims: tuple


@dataclass
class CostReport:
    rows: list[CostRow]
    convention: str = "MACs (headline); 2xMACs secondary"

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_buffers(self) -> int:
        return sum(r.buffers for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def total_adds(self) -> int:
        return sum(r.adds for r in self.rows)

    @property
    def total_macs_x2(self) -> int:
        return 2 * self.total_macs


def _own_params(mod: Module) -> int:
    return sum(p.data.size for p in mod._parameters.values())


def _own_buffers(mod: Module) -> int:
    return sum(b.size for b in mod._buffers.values())


def count_params(model: Module) -> CostReport:
    """Static parameter census; one row per module owning state."""
    rows = []
    for path, mod in model.named_modules():
        p, b = _own_params(mod), _own_buffers(mod)
        if p or b:
            rows.append(CostRow(path or "(root)", type(mod).__name__, p, b, 0, 0, ()))
    return CostReport(rows)


def _conv_macs(mod: Conv2d, out_shape) -> int:
    s = mod.spec
    n, _, ho, wo = out_shape
    return n * s.out_channels * ho * wo * (s.in_channels // s.groups) * s.kernel_h * s.kernel_w


def _attention_matmul_macs(heads: int, head_dim: int, out_shape) -> int:
    n, c, h, w = out_shape
    m = h * w
    # scores (M x M over head_dim) and the weighted sum (M x head_dim over M)
    return n * heads * 2 * m * m * head_dim


def _module_counts(mod: Module, args, out) -> tuple[int, int]:
    """(macs, adds) attributable to this module's own arithmetic."""
    if isinstance(mod, Conv2d):
        macs = _conv_macs(mod, out.shape)
        adds = int(np.prod(out.shape)) if mod.bias is not None else 0
        return macs, adds
    if isinstance(mod, BatchNorm2d):
        return int(np.prod(out.shape)), 0  # one scale-and-shift per element
    if isinstance(mod, Linear):
        n = int(np.prod(out.shape[:-1]))
        return n * mod.in_features * mod.out_features, n * mod.out_features
    if isinstance(mod, (RLMHSA, StdMHSA)):
        heads = mod.spec.heads if isinstance(mod, RLMHSA) else mod.heads
        dim = mod.spec.dim if isinstance(mod, RLMHSA) else mod.dim
        return _attention_matmul_macs(heads, dim // heads, out.shape), 0
    if isinstance(mod, RepConv):
        # branch summation (child convs/norms report their own work)
        n_extra = len(mod.spec.extras) + (1 if mod.identity != "none" else 0)
        return 0, n_extra * int(np.prod(out.shape))
    if isinstance(mod, PatchEmbed) and mod.downsample:
        n, c, h, w = args[0].shape
        return 0, n * c * (h // 2) * (w // 2) * 3  # 2x2 mean: 3 adds per cell
    if isinstance(mod, CFB):
        return 0, int(np.prod(out.shape))  # the residual sum
    if isinstance(mod, FMB):
        n, _, h, w = args[0].shape
        return 0, n * mod.spec.concat_width * h * w  # residual at concat width
    if isinstance(mod, AttnOnlyBlock):
        n, _, h, w = args[0].shape
        return 0, n * mod.pe_in.out_c * h * w
    return 0, 0


def count_flops(model: Module, input_dims: tuple) -> CostReport:
    """MAC/add accounting from a forward pass at the given input dims."""
    rows: list[CostRow] = []

    def hook(mod, args, out):
        macs, adds = _module_counts(mod, args, out)
        p, b = _own_params(mod), _own_buffers(mod)
        if macs or adds or p or b:
            path = paths[id(mod)]
            rows.append(CostRow(path, type(mod).__name__, p, b, macs, adds,
                                tuple(out.shape)))

    paths = {}
    hooked = []
    was_training = model.training    # a train-mode pass would touch norm stats
    model.train(False)
    for path, mod in model.named_modules():
        paths[id(mod)] = path or "(root)"
        if mod._call_hook is None:
            mod._call_hook = hook
            hooked.append(mod)
    try:
        model(Tensor(np.zeros(input_dims, dtype=np.float32)))
    finally:
        for mod in hooked:
            mod._call_hook = None
        model.train(was_training)

    # the classifier head pools globally before its linear layer; account
    # for that reduction from the last spatial row
    spatial = [r for r in rows if len(r.out_dims) == 4]
    if hasattr(model, "head") and spatial:
        n, c, h, w = spatial[-1].out_dims
        pool = CostRow("head_pool", "GlobalAvgPool", 0, 0, 0,
                       n * c * (h * w - 1), (n, c))
        at = next((i for i, r in enumerate(rows) if r.path == "head"), len(rows))
        rows.insert(at, pool)
    return CostReport(rows)


def shape_trace(model: Module, input_dims: tuple) -> list[tuple[str, tuple]]:
    """Every module's output dims, in execution (completion) order."""
    trace: list[tuple[str, tuple]] = []
    paths = {}

    def hook(mod, args, out):
        if isinstance(out, Tensor):
            trace.append((paths[id(mod)], tuple(out.shape)))

    hooked = []
    was_training = model.training
    model.train(False)
    for path, mod in model.named_modules():
        paths[id(mod)] = path or "(root)"
        if mod._call_hook is None:
            mod._call_hook = hook
            hooked.append(mod)
    try:
        model(Tensor(np.zeros(input_dims, dtype=np.float32)))
    except ShapeError as e:
        last = trace[-1][0] if trace else "(input)"
        raise ShapeError(f"after {last}: {e}") from None
    finally:
        for mod in hooked:
            mod._call_hook = None
        model.train(was_training)
    return trace


# ---------------------------------------------------------------------------
# Fourier profiles


@dataclass
class SpectrumProfile:
    branch_id: str
    kind: str                      # attention | input | cfb | feature
    radial_bins: np.ndarray        # energy fractions, SPECTRUM_BINS entries
    low_freq_ratio: float
    energy_spatial: float          # sum of squares in the spatial domain
    energy_spectral: float         # Parseval-normalized spectral energy
    dims: tuple
    cutoff: float = LOW_FREQ_CUTOFF

    def __post_init__(self):
        self.radial_bins = np.asarray(self.radial_bins, dtype=np.float64)


def fourier_spectrum(feature: Tensor, branch_id: str = "f", kind: str = "feature") -> SpectrumProfile:
    """Radially binned 2-D power spectrum of one feature map.

    Power is channel-averaged; radii are normalized per axis so the limit
    frequency sits at 1.0 on each axis (sqrt(2) in the corner); bins are
    linear over that range. A zero feature is reported as pure direct
    current by convention.
    """
    data = feature.data
    if data.ndim == 3:
        data = data[None]
    if data.ndim != 4 or data.shape[0] != 1:
        raise SpecError(f"expected a single feature map, got dims {feature.shape}")
    _, c, h, w = data.shape
    if h < 2 or w < 2:
        raise SpecError(f"spatial dims {h}x{w} too small for a spectrum")

    x = data[0].astype(np.float64)
    f = np.fft.fftshift(np.fft.fft2(x), axes=(-2, -1))
    power = (np.abs(f) ** 2).mean(axis=0)

    fy = np.fft.fftshift(np.fft.fftfreq(h)) * 2.0   # per-axis limit -> 1.0
    fx = np.fft.fftshift(np.fft.fftfreq(w)) * 2.0
    r = np.hypot(fy[:, None], fx[None, :])
    rmax = np.sqrt(2.0)
    idx = np.minimum((r / rmax * SPECTRUM_BINS).astype(int), SPECTRUM_BINS - 1)

    bins = np.zeros(SPECTRUM_BINS, dtype=np.float64)
    np.add.at(bins, idx.ravel(), power.ravel())
    total = bins.sum()
    low = float(power[r < LOW_FREQ_CUTOFF].sum())

    energy_spatial = float((x ** 2).sum())
    energy_spectral = float(power.sum() * c / (h * w))
    if total > 0:
        bins = bins / total
        low_ratio = low / total
    else:
        bins = np.zeros(SPECTRUM_BINS)
        bins[0] = 1.0
        low_ratio = 1.0
    return SpectrumProfile(branch_id, kind, bins, float(low_ratio),
                           energy_spatial, energy_spectral, (c, h, w))


def branch_spectrum_report(model: Module, x: Tensor) -> list[SpectrumProfile]:
    """Profiles for the five tapped streams inside every multi-branch
    mixing block: attention output, block input, and the three conv-stage
    outputs, labeled f1..f5 per block.
    """
    if x.shape[0] != 1:
        raise SpecError("spectrum taps need a single input sample")
    fmbs = [(path, m) for path, m in model.named_modules() if isinstance(m, FMB)]
    if not fmbs:
        raise SpecError("model has no multi-frequency blocks to tap")
    was_training = model.training
    model.train(False)
    for _, m in fmbs:
        m.collect_taps = True
    try:
        model(x)
    finally:
        for _, m in fmbs:
            m.collect_taps = False
        model.train(was_training)
    profiles = []
    for path, m in fmbs:
        if not m.last_taps:
            continue
        for tap_id, tap_kind, feat in m.last_taps:
            profiles.append(fourier_spectrum(feat, branch_id=f"{path}:{tap_id}", kind=tap_kind))
        m.last_taps = None
    return profiles
