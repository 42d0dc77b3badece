"""Layers, parameter containers, and the SGD optimizer.

Modules register :class:`Parameter` and child modules automatically on
attribute assignment (the usual containment pattern).  Three normalization
modes exist instead of the usual two:

* ``train``  - batch statistics, running statistics updated;
* ``eval``   - running statistics, nothing mutated;
* ``frozen`` - running statistics, parameters still trainable (used when
  fine-tuning small datasets so a zero learning rate is a strict no-op).
"""

from __future__ import annotations

import hashlib

import numpy as np

from .autodiff import Tensor, conv3d, maxpool3d

MODES = ("train", "eval", "frozen")


class Parameter(Tensor):
    def __init__(self, data):
        super().__init__(np.asarray(data), requires_grad=True)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "mode", "train")

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        if name not in self._buffers:
            raise KeyError(name)
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    # -- traversal -------------------------------------------------------
    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name in self._buffers:
            yield prefix + name, self._buffers[name]
        for name, child in self._children.items():
            yield from child.named_buffers(prefix + name + ".")

    def param_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def set_mode(self, mode: str) -> None:
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        object.__setattr__(self, "mode", mode)
        for child in self._children.values():
            child.set_mode(mode)

    def train(self):
        self.set_mode("train")
        return self

    def eval(self):
        self.set_mode("eval")
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    # -- state I/O ---------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        state = {f"param:{n}": p.data for n, p in self.named_parameters()}
        state.update({f"buffer:{n}": b for n, b in self.named_buffers()})
        return state

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            src = state[f"param:{name}"]
            if src.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {src.shape} vs {p.data.shape}")
            p.data = src.astype(p.data.dtype, copy=True)
        for name, _ in list(self.named_buffers()):
            src = state[f"buffer:{name}"]
            self._assign_buffer(name, src)

    def _assign_buffer(self, dotted: str, value: np.ndarray) -> None:
        parts = dotted.split(".")
        mod = self
        for part in parts[:-1]:
            mod = mod._children[part]
        old = mod._buffers[parts[-1]]
        mod.set_buffer(parts[-1], value.astype(old.dtype, copy=True))


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        self._children[str(len(self._items))] = module
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]

    def set_mode(self, mode: str) -> None:
        object.__setattr__(self, "mode", mode)
        for m in self._items:
            m.set_mode(mode)


def param_hash(module: Module, include_buffers: bool = True) -> str:
    """SHA-256 over all parameter (and buffer) bytes; stable over traversal order."""
    h = hashlib.sha256()
    state = module.state_arrays()
    for name in sorted(state):
        if not include_buffers and name.startswith("buffer:"):
            continue
        h.update(name.encode())
        arr = np.ascontiguousarray(state[name])
        h.update(str(arr.dtype).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 bias: bool = True, dtype=np.float32):
        super().__init__()
        self.in_dim, self.out_dim = in_dim, out_dim
        self.W = Parameter(fan_in_uniform(rng, (in_dim, out_dim), in_dim, dtype))
        self.b = Parameter(np.zeros(out_dim, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = x @ self.W
        if self.b is not None:
            out = out + self.b
        return out


class Conv3d(Module):
    """Kernel-3, stride-1, zero-padded 3D convolution."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.w = Parameter(fan_in_uniform(rng, (out_ch, in_ch, 3, 3, 3), in_ch * 27, dtype))
        self.b = Parameter(np.zeros(out_ch, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return conv3d(x, self.w, self.b)


class BatchNorm(Module):
    """Per-channel standardization over the batch axis (2D inputs, (B, C)).

    ``affine=False`` gives the bare standardization used at the encoder
    output.  Running statistics use the biased batch variance and torch-style
    exponential updates.
    """

    def __init__(self, num: int, affine: bool = True, eps: float = 1e-3,
                 momentum: float = 0.1, dtype=np.float32):
        super().__init__()
        self.num = num
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.affine = affine
        if affine:
            self.gamma = Parameter(np.ones(num, dtype=dtype))
            self.beta = Parameter(np.zeros(num, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(num, dtype=dtype))
        self.register_buffer("running_var", np.ones(num, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        if self.mode == "train":
            mu = x.mean(axis=0)
            xc = x - mu
            var = (xc * xc).mean(axis=0)
            m = self.momentum
            self.set_buffer("running_mean", ((1 - m) * self.running_mean + m * mu.data).astype(self.running_mean.dtype))
            self.set_buffer("running_var", ((1 - m) * self.running_var + m * var.data).astype(self.running_var.dtype))
            xhat = xc * (var + self.eps) ** -0.5
        else:
            xhat = (x - self.running_mean) * np.asarray(
                1.0 / np.sqrt(self.running_var + self.eps), dtype=x.data.dtype
            )
        if self.affine:
            xhat = xhat * self.gamma + self.beta
        return xhat


class MaxPool3d(Module):
    def forward(self, x: Tensor) -> Tensor:
        return maxpool3d(x)


class SGD:
    """Plain stochastic gradient descent with coupled L2 weight decay.

    Update: ``p <- p - lr * (grad + weight_decay * p)``; a parameter with no
    gradient path still decays (grad treated as zero).
    """

    def __init__(self, params, lr: float, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)

    def step(self) -> None:
        lr, wd = self.lr, self.weight_decay
        for p in self.params:
            g = p.grad if p.grad is not None else 0.0
            if wd != 0.0:
                g = g + wd * p.data
            if isinstance(g, float):
                continue  # no gradient and no decay
            p.data = p.data - (lr * g).astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
