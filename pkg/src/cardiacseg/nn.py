"""Layer modules: parameter registration, dotted naming, and state export.

``Module`` tracks child parameters and submodules in declaration order,
which fixes both the checkpoint entry order and the dotted parameter
paths (e.g. ``enc1.conv1.weight``).  Modules are containers only; all
math lives in :mod:`cardiacseg.ops` and :mod:`cardiacseg.attention`.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import ops
from .attention import (
    AdditiveAttentionParams,
    cross_additive_attention,
    additive_attention,
    map_from_tokens,
    tokens_from_map,
)
from .errors import ConfigError, ValidationError
from .tensor import Parameter, Tensor, get_default_dtype


class Module:
    """Base container for parameters and submodules."""

    def __init__(self):
        object.__setattr__(self, "_children", OrderedDict())

    def __setattr__(self, name, value):
        if isinstance(value, (Parameter, Module)):
            self._children[name] = value
        object.__setattr__(self, name, value)

    # -- traversal ------------------------------------------------------------

    def named_parameters(self, prefix: str = ""):
        for name, child in self._children.items():
            path = f"{prefix}{name}"
            if isinstance(child, Parameter):
                yield path, child
            else:
                yield from child.named_parameters(prefix=path + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self, prefix: str = ""):
        yield prefix, self
        for name, child in self._children.items():
            if isinstance(child, Module):
                yield from child.modules(prefix=f"{prefix}{name}.")

    def assign_names(self) -> None:
        """Set each parameter's name to its dotted path (unique by construction)."""
        seen = set()
        for path, p in self.named_parameters():
            if path in seen:
                raise ConfigError(f"duplicate parameter path {path!r}")
            seen.add(path)
            p.name = path

    # -- persistent state -----------------------------------------------------

    def extra_state(self) -> "OrderedDict[str, np.ndarray]":
        """Non-learnable arrays to persist (overridden by stateful layers)."""
        return OrderedDict()

    def load_extra_state(self, state: dict) -> None:
        if state:
            raise ValidationError(f"unexpected extra state keys {sorted(state)}")

    def named_state(self, prefix: str = ""):
        """Parameters and buffers in a stable order, as (path, array) pairs."""
        for name, child in self._children.items():
            path = f"{prefix}{name}"
            if isinstance(child, Parameter):
                yield path, child.value.data
            else:
                yield from child.named_state(prefix=path + ".")
        for key, arr in self.extra_state().items():
            yield f"{prefix}{key}", arr

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict(self.named_state())

    def load_state(self, mapping: dict) -> None:
        expected = [name for name, _ in self.named_state()]
        missing = sorted(set(expected) - set(mapping))
        surplus = sorted(set(mapping) - set(expected))
        if missing or surplus:
            raise ValidationError(
                f"state mismatch: missing {missing[:5]}{'...' if len(missing) > 5 else ''}, "
                f"unexpected {surplus[:5]}{'...' if len(surplus) > 5 else ''}"
            )
        for path, p in self.named_parameters():
            arr = np.asarray(mapping[path])
            if arr.shape != p.shape:
                raise ValidationError(f"shape mismatch for {path!r}: {arr.shape} vs {p.shape}")
            p.set_value(arr)
        for prefix, module in self.modules():
            keys = module.extra_state().keys()
            if keys:
                module.load_extra_state({k: np.asarray(mapping[f"{prefix}{k}"]) for k in keys})


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, padding: int = 0,
                 rng: np.random.Generator | None = None, dtype=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        dtype = dtype or get_default_dtype()
        std = np.sqrt(2.0 / (cin * k * k))
        self.weight = Parameter(rng.normal(0.0, std, size=(cout, cin, k, k)), dtype=dtype)
        self.bias = Parameter(np.zeros(cout), dtype=dtype)
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight.value, self.bias.value, self.stride, self.padding)


class ConvTranspose2d(Module):
    """Stride-2 upsampling that halves the channel count."""

    def __init__(self, cin: int, rng: np.random.Generator | None = None, dtype=None):
        super().__init__()
        if cin % 2 != 0:
            raise ConfigError(f"upsampling needs an even channel count, got {cin}")
        rng = rng or np.random.default_rng(0)
        dtype = dtype or get_default_dtype()
        std = np.sqrt(2.0 / cin)
        self.weight = Parameter(rng.normal(0.0, std, size=(cin, cin // 2, 2, 2)), dtype=dtype)
        self.bias = Parameter(np.zeros(cin // 2), dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.transposed_conv2d(x, self.weight.value, self.bias.value, stride=2)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, dtype=None):
        super().__init__()
        dtype = dtype or get_default_dtype()
        self.gamma = Parameter(np.ones(channels), dtype=dtype)
        self.beta = Parameter(np.zeros(channels), dtype=dtype)
        self.eps = eps
        self.stats = ops.RunningStats(channels, momentum=momentum, dtype=dtype)

    def forward(self, x: Tensor, mode: str) -> Tensor:
        return ops.batch_norm2d(x, self.gamma.value, self.beta.value, self.eps, mode, self.stats)

    def extra_state(self):
        dt = self.gamma.dtype
        return OrderedDict(
            running_mean=self.stats.mean.astype(dt, copy=True),
            running_var=self.stats.var.astype(dt, copy=True),
            batches=np.array([self.stats.batches], dtype=dt),
        )

    def load_extra_state(self, state):
        self.stats.mean[...] = state["running_mean"]
        self.stats.var[...] = state["running_var"]
        self.stats.batches = int(round(float(state["batches"][0])))


class ConvBlock(Module):
    """Two 3x3 convolutions, each followed by batch norm and ReLU."""

    def __init__(self, cin: int, cout: int, rng=None, dtype=None):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, 3, 1, 1, rng, dtype)
        self.bn1 = BatchNorm2d(cout, dtype=dtype)
        self.conv2 = Conv2d(cout, cout, 3, 1, 1, rng, dtype)
        self.bn2 = BatchNorm2d(cout, dtype=dtype)

    def forward(self, x: Tensor, mode: str) -> Tensor:
        x = ops.relu(self.bn1.forward(self.conv1.forward(x), mode))
        return ops.relu(self.bn2.forward(self.conv2.forward(x), mode))


class Downsample(Module):
    """Stride-2 2x2 convolution: halves the spatial extents, doubles channels."""

    def __init__(self, cin: int, rng=None, dtype=None):
        super().__init__()
        self.conv = Conv2d(cin, 2 * cin, 2, stride=2, padding=0, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv.forward(x)


class AttentionBlock(Module):
    """Additive attention applied to one NCHW feature map."""

    def __init__(self, d: int, rng=None, dtype=None):
        super().__init__()
        p = AdditiveAttentionParams.init(d, rng or np.random.default_rng(0), dtype)
        self.wq, self.wk, self.w_attn = p.wq, p.wk, p.w_attn
        self.w_out, self.b_out = p.w_out, p.b_out
        self.gamma, self.beta = p.gamma, p.beta
        self._view = p

    def forward(self, x: Tensor) -> Tensor:
        return map_from_tokens(additive_attention(tokens_from_map(x), self._view))


class CrossAttentionBlock(Module):
    """Shared-parameter additive cross-attention over three feature maps."""

    def __init__(self, d: int, rng=None, dtype=None):
        super().__init__()
        p = AdditiveAttentionParams.init(d, rng or np.random.default_rng(0), dtype)
        self.wq, self.wk, self.w_attn = p.wq, p.wk, p.w_attn
        self.w_out, self.b_out = p.w_out, p.b_out
        self.gamma, self.beta = p.gamma, p.beta
        self._view = p

    def forward(self, maps) -> tuple:
        views = tuple(tokens_from_map(m) for m in maps)
        outs = cross_additive_attention(views, self._view)
        return tuple(map_from_tokens(v) for v in outs)
