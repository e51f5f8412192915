"""Named parameters, module tree, and deterministic per-name initialization.

Every parameter's initial value is drawn from an RNG seeded by
hash(global_seed, dotted_name), so two models built from the same seed share
base weights regardless of which optional submodules (adapters) exist. Names
are assigned by `finalize()` after the tree is assembled; `initialize(seed)`
then fills values per each parameter's init spec.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .nnops import BatchNormState, batchnorm2d, conv2d
from .tensor import Tensor, gelu, reshape


class Parameter:
    """A named, optionally trainable tensor."""

    __slots__ = ("name", "tensor", "trainable", "init_spec")

    def __init__(self, shape, init_spec, dtype=np.float32):
        self.name = ""
        self.tensor = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
        self.trainable = True
        self.init_spec = init_spec

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape}, trainable={self.trainable})"


def _name_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _init_value(spec, shape, rng: np.random.Generator) -> np.ndarray:
    kind = spec[0]
    if kind == "zeros":
        return np.zeros(shape)
    if kind == "ones":
        return np.ones(shape)
    if kind == "const":
        return np.full(shape, spec[1])
    if kind == "vector":
        return np.array(spec[1], dtype=np.float64).reshape(shape)
    if kind == "normal":
        return rng.normal(0.0, spec[1], size=shape)
    if kind == "kaiming":
        fan_in = spec[1]
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    raise ValueError(f"unknown init spec {spec!r}")


class Module:
    """Tree node owning parameters, submodules, and BN states."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = ""):
        for k, p in self._params.items():
            yield (f"{prefix}.{k}" if prefix else k), p
        for k, m in self._children.items():
            yield from m.named_parameters(f"{prefix}.{k}" if prefix else k)

    def named_bn_states(self, prefix: str = ""):
        if isinstance(self, BatchNorm2d):
            yield prefix, self.state
        for k, m in self._children.items():
            yield from m.named_bn_states(f"{prefix}.{k}" if prefix else k)

    def modules(self):
        yield self
        for m in self._children.values():
            yield from m.modules()

    def finalize(self, prefix: str = "") -> None:
        """Assign dotted names; must run once after assembly."""
        seen = set()
        for name, p in self.named_parameters(prefix):
            if name in seen:
                raise ValueError(f"duplicate parameter name {name}")
            seen.add(name)
            p.name = name

    def initialize(self, seed: int, dtype=np.float32) -> None:
        """Fill every parameter from its init spec, keyed by (seed, name)."""
        for name, p in self.named_parameters():
            if not name:
                raise RuntimeError("initialize() called before finalize()")
            rng = np.random.default_rng(_name_seed(seed, name))
            p.tensor.data = _init_value(p.init_spec, p.tensor.shape, rng).astype(dtype)
        for _, st in self.named_bn_states():
            st.running_mean = np.zeros_like(st.running_mean)
            st.running_var = np.ones_like(st.running_var)

    def set_mode(self, mode: str) -> None:
        for m in self.modules():
            if isinstance(m, BatchNorm2d):
                m.mode = mode

    def set_bn_updates(self, enabled: bool) -> None:
        for m in self.modules():
            if isinstance(m, BatchNorm2d):
                m.update_running = enabled


class ModuleList(Module):
    def __init__(self, items=()):
        super().__init__()
        self._items = []
        for it in items:
            self.append(it)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __getitem__(self, i):
        return self._items[i]

    def __len__(self):
        return len(self._items)


class Conv2d(Module):
    """Convolution layer; default kaiming init on fan-in, zero bias."""

    def __init__(self, cin: int, cout: int, k: int, stride: int = 1,
                 padding: int | None = None, groups: int = 1, bias: bool = True,
                 init: str = "kaiming", init_std: float = 0.0, bias_init: float = 0.0,
                 dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.groups = groups
        fan_in = (cin // groups) * k * k
        spec = {"kaiming": ("kaiming", fan_in), "zeros": ("zeros",),
                "normal": ("normal", init_std)}[init]
        self.weight = Parameter((cout, cin // groups, k, k), spec, dtype)
        bias_spec = ("zeros",) if bias_init == 0.0 else ("const", bias_init)
        self.bias = Parameter((cout,), bias_spec, dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight.tensor,
                      None if self.bias is None else self.bias.tensor,
                      stride=self.stride, padding=self.padding, groups=self.groups)


class Linear(Module):
    """Dense layer on (B, Cin) tensors, computed as a 1x1 convolution."""

    def __init__(self, cin: int, cout: int, init: str = "kaiming",
                 init_std: float = 0.0, bias_init=None, dtype=np.float32):
        super().__init__()
        self.cin, self.cout = cin, cout
        spec = {"kaiming": ("kaiming", cin), "zeros": ("zeros",),
                "normal": ("normal", init_std)}[init]
        self.weight = Parameter((cout, cin, 1, 1), spec, dtype)
        bias_spec = ("zeros",) if bias_init is None else ("vector", tuple(bias_init))
        self.bias = Parameter((cout,), bias_spec, dtype)

    def forward(self, x: Tensor) -> Tensor:
        B = x.shape[0]
        y = conv2d(reshape(x, (B, self.cin, 1, 1)), self.weight.tensor, self.bias.tensor)
        return reshape(y, (B, self.cout))


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.state = BatchNormState(channels, momentum, eps, dtype)
        self.gamma = _wrap_bn_param(self.state.gamma, ("ones",))
        self.beta = _wrap_bn_param(self.state.beta, ("zeros",))
        self.mode = "train"
        self.update_running = True

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm2d(x, self.state, self.mode, update_running=self.update_running)


def _wrap_bn_param(tensor: Tensor, spec) -> Parameter:
    p = Parameter.__new__(Parameter)
    p.name = ""
    p.tensor = tensor
    p.trainable = True
    p.init_spec = spec
    return p


class ConvBNAct(Module):
    """conv -> BN -> GELU, the stem/transition building block."""

    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(cin, cout, k, stride=stride, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return gelu(self.bn.forward(self.conv.forward(x)))
