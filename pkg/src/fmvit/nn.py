"""Minimal module system over the tensor core.

Modules own parameters (trainable Tensors) and buffers (plain ndarrays such
as batch-norm running statistics), discover children by attribute order, and
expose flat dotted-name state dicts. Training/eval mode toggles batch-norm
statistics only; nothing here is stochastic at inference.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeError, SpecError
from .tensor import ConvSpec, Tensor


class Module:
    def __init__(self):
        self._parameters: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._modules: dict[str, "Module"] = {}
        self.training = True
        self._call_hook = None  # fn(module, args, out), used by verification

    # -- registration via attribute assignment ---------------------------
    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self.__dict__.setdefault("_modules", {})[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self.__dict__.setdefault("_parameters", {})[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    # -- traversal --------------------------------------------------------
    def named_modules(self, prefix: str = ""):
        yield prefix, self
        for name, child in self._modules.items():
            sub = f"{prefix}.{name}" if prefix else name
            yield from child.named_modules(sub)

    def named_parameters(self, prefix: str = ""):
        for name, mod in self.named_modules(prefix):
            for pname, p in mod._parameters.items():
                yield (f"{name}.{pname}" if name else pname), p

    def named_buffers(self, prefix: str = ""):
        for name, mod in self.named_modules(prefix):
            for bname, b in mod._buffers.items():
                yield (f"{name}.{bname}" if name else bname), b

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def train(self, mode: bool = True):
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    # -- state ------------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own_params = dict(self.named_parameters())
        own_buffers = dict(self.named_buffers())
        expected = set(own_params) | set(own_buffers)
        got = set(state)
        if expected != got:
            missing = sorted(expected - got)
            extra = sorted(got - expected)
            raise SpecError(f"state dict mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own_params.items():
            src = np.asarray(state[name])
            if src.shape != p.data.shape:
                raise ShapeError(f"{name}: stored shape {src.shape} != model shape {p.data.shape}")
            p.data[...] = src.astype(p.data.dtype)
        for name, b in own_buffers.items():
            src = np.asarray(state[name])
            if src.shape != b.shape:
                raise ShapeError(f"{name}: stored shape {src.shape} != model shape {b.shape}")
            b[...] = src.astype(b.dtype)

    def cast(self, dtype):
        """Convert all parameters and float buffers in place (for float64 checks)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        for _, m in self.named_modules():
            for bname, b in list(m._buffers.items()):
                if np.issubdtype(b.dtype, np.floating):
                    nb = b.astype(dtype)
                    m._buffers[bname] = nb
                    object.__setattr__(m, bname, nb)
        return self

    def __call__(self, *args, **kwargs):
        out = self.forward(*args, **kwargs)
        if self._call_hook is not None:
            self._call_hook(self, args, out)
        return out

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._items: list[Module] = []
        for m in mods:
            self.append(m)

    def append(self, mod: Module):
        self._modules[str(len(self._items))] = mod
        self._items.append(mod)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def kaiming_uniform(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    """He-style uniform draw: U(-b, b) with b = sqrt(6 / fan_in)."""
    if fan_in <= 0:
        raise SpecError("fan_in must be positive")
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator | None = None):
        super().__init__()
        self.spec = spec
        rng = rng or np.random.default_rng(0)
        fan_in = (spec.in_channels // spec.groups) * spec.kernel_h * spec.kernel_w
        self.weight = Tensor(kaiming_uniform(spec.weight_shape, fan_in, rng), requires_grad=True)
        if spec.has_bias:
            bound = 1.0 / np.sqrt(fan_in)
            self.bias = Tensor(
                rng.uniform(-bound, bound, size=(spec.out_channels,)).astype(np.float32),
                requires_grad=True,
            )
        else:
            self.bias = None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.spec, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            eps=self.eps,
            training=self.training,
            momentum=self.momentum,
        )


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(kaiming_uniform((out_features, in_features), in_features, rng), requires_grad=True)
        bound = 1.0 / np.sqrt(in_features)
        self.bias = Tensor(rng.uniform(-bound, bound, size=(out_features,)).astype(np.float32), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)
