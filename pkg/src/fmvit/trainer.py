"""Toy-scale training: synthetic labeled datasets, two small optimizers
with a cosine schedule, an evaluation loop, and the block-ablation suite.

Everything here is deterministic given its seeds. Datasets are rendered
procedurally so any run can regenerate them bit for bit; training batches
come from seeded permutation epochs, so a (seed, dataset, config) triple
always reproduces the same weight trajectory.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .blocks import RLMHSA, StdMHSA
from .errors import SpecError, TrainingDiverged
from .nn import Conv2d, Linear, Module
from .tensor import ConvSpec, GradTape, Tensor, backward

GENERATOR_KINDS = ("gabor-texture-classes", "colored-shape-classes")
OPTIMIZERS = ("sgd-momentum", "adamw-lite")


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthDataset:
    """Procedurally rendered classification set.

    Labels are assigned round-robin, so every class count is balanced to
    within one sample. Images are float32 NCHW; labels int64.
    """
    seed: int
    n_samples: int
    n_classes: int
    image_dims: tuple       # (channels, height, width)
    generator_kind: str
    images: np.ndarray = field(compare=False, repr=False, default=None)
    labels: np.ndarray = field(compare=False, repr=False, default=None)

    def __post_init__(self):
        if self.n_samples < 1 or self.n_classes < 2:
            raise SpecError("need at least 1 sample and 2 classes")
        if self.generator_kind not in GENERATOR_KINDS:
            raise SpecError(f"unknown generator kind {self.generator_kind!r}")
        c, h, w = self.image_dims
        if self.generator_kind == "colored-shape-classes" and c != 3:
            raise SpecError("shape classes are color-coded and need 3 channels")
        if h < 8 or w < 8:
            raise SpecError(f"images of {h}x{w} are too small to render")

    def checksum(self) -> int:
        crc = zlib.crc32(self.images.tobytes())
        return zlib.crc32(self.labels.tobytes(), crc)

    def batches(self, batch_size: int, seed: int):
        """Endless stream of (images, labels) drawn from seeded
        permutation epochs."""
        rng = np.random.default_rng(seed)
        order = np.array([], dtype=np.int64)
        while True:
            while order.size < batch_size:
                order = np.concatenate([order, rng.permutation(self.n_samples)])
            idx, order = order[:batch_size], order[batch_size:]
            yield self.images[idx], self.labels[idx]


def _render_gabor(rng, cls, n_classes, dims):
    """Oriented sinusoid textures: class selects orientation and carrier
    frequency, so texture frequency alone separates the classes."""
    c, h, w = dims
    n_orient = max(1, (n_classes + 1) // 2)
    theta = math.pi * (cls // 2) / n_orient + rng.normal(0.0, 0.05)
    freq = (2.5, 6.0)[cls % 2]
    phase = rng.uniform(0.0, 2.0 * math.pi)
    ys = np.linspace(-1.0, 1.0, h, dtype=np.float64)
    xs = np.linspace(-1.0, 1.0, w, dtype=np.float64)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    carrier = np.cos(2.0 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
    img = 0.7 * np.broadcast_to(carrier, (c, h, w)).copy()
    img += 0.25 * rng.standard_normal((c, h, w))
    return img.astype(np.float32)


_SHAPE_COLORS = ((1.0, 0.25, 0.25), (0.25, 0.55, 1.0), (0.35, 1.0, 0.35),
                 (1.0, 0.9, 0.2), (0.9, 0.3, 1.0), (0.3, 1.0, 0.9))


def _render_shape(rng, cls, n_classes, dims):
    """Filled global shapes on a noise floor: class selects the outline and
    the color, so coarse structure alone separates the classes."""
    c, h, w = dims
    shape_idx = cls % 4
    color = _SHAPE_COLORS[(cls // 4) % len(_SHAPE_COLORS)]
    cy = rng.uniform(-0.15, 0.15)
    cx = rng.uniform(-0.15, 0.15)
    r = rng.uniform(0.34, 0.38)
    ys = np.linspace(-1.0, 1.0, h, dtype=np.float64)
    xs = np.linspace(-1.0, 1.0, w, dtype=np.float64)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    dy, dx = yy - cy, xx - cx
    if shape_idx == 0:
        mask = np.hypot(dy, dx) < r
    elif shape_idx == 1:
        mask = np.maximum(np.abs(dy), np.abs(dx)) < r
    elif shape_idx == 2:
        mask = (np.abs(dy) + np.abs(dx)) < r
    else:
        d = np.hypot(dy, dx)
        mask = (d < r) & (d > 0.5 * r)
    img = 0.2 * rng.standard_normal((3, h, w))
    for ch in range(3):
        img[ch][mask] += 1.1 * color[ch]
    return img.astype(np.float32)


def generate_dataset(seed: int, n_samples: int, n_classes: int,
                     image_dims: tuple = (3, 32, 32),
                     generator_kind: str = "gabor-texture-classes") -> SynthDataset:
    """Render the full dataset; the same arguments always produce the same
    bytes."""
    ds = SynthDataset(seed, n_samples, n_classes, tuple(image_dims), generator_kind)
    rng = np.random.default_rng(seed)
    render = _render_gabor if generator_kind == "gabor-texture-classes" else _render_shape
    labels = np.arange(n_samples, dtype=np.int64) % n_classes
    images = np.empty((n_samples,) + tuple(image_dims), dtype=np.float32)
    for i in range(n_samples):
        images[i] = render(rng, int(labels[i]), n_classes, image_dims)
    object.__setattr__(ds, "images", images)
    object.__setattr__(ds, "labels", labels)
    return ds


# ---------------------------------------------------------------------------
# optimizers and schedule


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch_size: int
    lr: float
    optimizer: str = "sgd-momentum"
    momentum: float = 0.9
    weight_decay: float = 0.0
    warmup_steps: int = 0
    seed: int = 0
    eval_every: int = 50

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise SpecError("steps and batch_size must be positive")
        if self.lr < 0:
            raise SpecError("learning rate must not be negative")
        if not 0 <= self.warmup_steps <= self.steps:
            raise SpecError("warmup must fit inside the step budget")
        if self.optimizer not in OPTIMIZERS:
            raise SpecError(f"unknown optimizer {self.optimizer!r}")
        if self.eval_every < 0:
            raise SpecError("eval_every must be nonnegative (0 disables)")

    def lr_at(self, step: int) -> float:
        """Linear warmup, then a cosine decay to zero at the final step."""
        if step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        span = max(1, self.steps - self.warmup_steps)
        prog = (step - self.warmup_steps) / span
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * prog))


class _SgdMomentum:
    def __init__(self, params, momentum, weight_decay):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {id(p): np.zeros_like(p.data) for p in params}

    def step(self, params, grads, lr):
        for p in params:
            g = grads[id(p)].data.astype(np.float32)
            if self.weight_decay and p.data.ndim > 1:
                g = g + self.weight_decay * p.data
            v = self.velocity[id(p)]
            v *= self.momentum
            v += g
            p.data -= lr * v


class _AdamWLite:
    """Adam moments with decoupled decay; fixed betas, no variants."""

    beta1, beta2, eps = 0.9, 0.999, 1e-8

    def __init__(self, params, momentum, weight_decay):
        self.weight_decay = weight_decay
        self.m = {id(p): np.zeros_like(p.data) for p in params}
        self.v = {id(p): np.zeros_like(p.data) for p in params}
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p in params:
            g = grads[id(p)].data.astype(np.float32)
            m, v = self.m[id(p)], self.v[id(p)]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay and p.data.ndim > 1:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


_OPTIMIZER_CLS = {"sgd-momentum": _SgdMomentum, "adamw-lite": _AdamWLite}


# ---------------------------------------------------------------------------
# train and evaluate


def train(model: Module, dataset: SynthDataset, config: TrainConfig) -> list[dict]:
    """Cross-entropy training loop; returns one history row per step with
    the step index, schedule lr, batch loss, and batch accuracy. Every
    `eval_every` steps the row also carries whole-dataset accuracy,
    measured in inference mode so running statistics are untouched.

    Aborts with TrainingDiverged when the loss stops being finite or blows
    past twenty times its starting point.
    """
    params = list(model.parameters())
    opt = _OPTIMIZER_CLS[config.optimizer](params, config.momentum, config.weight_decay)
    stream = dataset.batches(config.batch_size, config.seed)
    model.train(True)
    history = []
    ceiling = None
    try:
        for step in range(config.steps):
            xb, yb = next(stream)
            lr = config.lr_at(step)
            with GradTape() as tape:
                for p in params:
                    tape.watch(p)
                logits = model(Tensor(xb))
                loss = T.cross_entropy(logits, yb)
            loss_val = float(loss.item())
            if ceiling is None:
                ceiling = 20.0 * max(1.0, loss_val)
            if not math.isfinite(loss_val) or loss_val > ceiling:
                raise TrainingDiverged(f"loss {loss_val:.3g} at step {step}")
            grads = backward(tape, loss)
            opt.step(params, grads, lr)
            acc = float((np.argmax(logits.data, axis=1) == yb).mean())
            row = {"step": step, "lr": lr, "loss": loss_val, "acc": acc}
            if config.eval_every and (step + 1) % config.eval_every == 0:
                model.train(False)
                row["eval_acc"] = evaluate(model, dataset).accuracy
                model.train(True)
            history.append(row)
    finally:
        model.train(False)
    return history


@dataclass
class EvalResult:
    accuracy: float
    mean_loss: float
    n_samples: int


def evaluate(model: Module, dataset: SynthDataset, batch_size: int = 64) -> EvalResult:
    """Argmax accuracy and mean cross-entropy over the whole set."""
    was_training = model.training
    model.train(False)
    correct, loss_sum = 0, 0.0
    try:
        for lo in range(0, dataset.n_samples, batch_size):
            xb = dataset.images[lo:lo + batch_size]
            yb = dataset.labels[lo:lo + batch_size]
            logits = model(Tensor(xb))
            loss = T.cross_entropy(logits, yb)
            loss_sum += float(loss.item()) * len(yb)
            correct += int((np.argmax(logits.data, axis=1) == yb).sum())
    finally:
        model.train(was_training)
    return EvalResult(correct / dataset.n_samples, loss_sum / dataset.n_samples,
                      dataset.n_samples)


def prediction_match(model_a: Module, model_b: Module, dataset: SynthDataset,
                     batch_size: int = 64) -> float:
    """Fraction of samples on which both models pick the same label."""
    for m in (model_a, model_b):
        m.train(False)
    same = 0
    for lo in range(0, dataset.n_samples, batch_size):
        xb = Tensor(dataset.images[lo:lo + batch_size])
        a = np.argmax(model_a(xb).data, axis=1)
        b = np.argmax(model_b(xb).data, axis=1)
        same += int((a == b).sum())
    return same / dataset.n_samples


class ConvBaseline(Module):
    """Two strided conv layers and a linear head. Used as a learnability
    reference: if this cannot fit the dataset, the dataset is at fault."""

    def __init__(self, classes: int, in_channels: int = 3,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.conv1 = Conv2d(ConvSpec(in_channels, 16, 3, 3, 2, 1, True), rng)
        self.conv2 = Conv2d(ConvSpec(16, 32, 3, 3, 2, 1, True), rng)
        self.head = Linear(32, classes, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = T.relu(self.conv1(x))
        h = T.relu(self.conv2(h))
        return self.head(T.global_avg_pool(h))


# ---------------------------------------------------------------------------
# ablation suite


@dataclass
class AblationRow:
    name: str
    use_fmb: bool
    use_gmlp: bool
    use_rlmhsa: bool
    train_params: int
    deployed_params: int
    attn_params: int
    macs: int
    accuracy: float | None


_LATTICE = (
    ("attn-baseline", dict(use_fmb=False, use_gmlp=False, use_rlmhsa=False)),
    ("shared-attn", dict(use_fmb=False, use_gmlp=False, use_rlmhsa=True)),
    ("shared-attn+mlp", dict(use_fmb=False, use_gmlp=True, use_rlmhsa=True)),
    ("full", dict(use_fmb=True, use_gmlp=True, use_rlmhsa=True)),
)


def _attention_params(model: Module) -> int:
    total = 0
    for _, mod in model.named_modules():
        if isinstance(mod, (RLMHSA, StdMHSA)):
            total += sum(p.data.size for p in mod.parameters())
    return total


def ablation_suite(variant: str = "nano", classes: int = 8,
                   dataset: SynthDataset | None = None,
                   config: TrainConfig | None = None,
                   input_dims: tuple = (1, 3, 64, 64),
                   toggles=None, seed: int = 0) -> list[AblationRow]:
    """Build, fuse, and cost every design point on the block-ablation
    ladder; optionally train each point on the given dataset.

    All arms are built without the mid depthwise MLP stage so that the
    branch-set toggle changes training-time structure only; fused deployed
    counts for the two shared-attention rows then coincide by design.
    """
    from .analyzer import count_flops, count_params
    from .model import build_model, calibrate_bn
    from .reparam import fuse_model

    if toggles is None:
        toggles = _LATTICE
    rows = []
    for name, flags in toggles:
        if set(flags) != {"use_fmb", "use_gmlp", "use_rlmhsa"} or \
                not all(isinstance(v, bool) for v in flags.values()):
            raise SpecError(f"ablation arm {name!r} must set exactly the three block toggles")
        model = build_model(variant, classes=classes, seed=seed, mid_dw=False, **flags)
        train_params = count_params(model).total_params
        accuracy = None
        if dataset is not None:
            if config is None:
                raise SpecError("a dataset without a training config is unusable")
            train(model, dataset, config)
            accuracy = evaluate(model, dataset).accuracy
        else:
            rng = np.random.default_rng(seed)
            calib = Tensor(rng.standard_normal(
                (2,) + tuple(input_dims[1:])).astype(np.float32))
            calibrate_bn(model, calib)
        fused = fuse_model(model)
        rows.append(AblationRow(
            name=name, **flags,
            train_params=train_params,
            deployed_params=count_params(fused).total_params,
            attn_params=_attention_params(fused),
            macs=count_flops(fused, input_dims).total_macs,
            accuracy=accuracy))
    return rows
