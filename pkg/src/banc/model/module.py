"""Tiny module system: named parameters, buffers, train/eval mode and freezing."""

from __future__ import annotations

import contextlib
from typing import Iterator

import numpy as np

from ..autodiff import Tensor


class ShapeError(ValueError):
    pass


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = name
        object.__setattr__(self, name, value)

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        if name not in self._buffers:
            raise KeyError(name)
        object.__setattr__(self, name, value)

    # -- traversal ------------------------------------------------------------
    def named_children(self):
        return self._children.items()

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for mod_name, mod in self.named_modules(prefix):
            for name, p in mod._params.items():
                yield (f"{mod_name}.{name}" if mod_name else name), p

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for mod_name, mod in self.named_modules(prefix):
            for name in mod._buffers:
                yield (f"{mod_name}.{name}" if mod_name else name), getattr(mod, name)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    # -- modes ----------------------------------------------------------------
    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    @contextlib.contextmanager
    def frozen(self):
        """Temporarily stop gradients into this module's parameters."""
        flags = [p.requires_grad for p in self.parameters()]
        self.requires_grad_(False)
        try:
            yield self
        finally:
            for p, f in zip(self.parameters(), flags):
                p.requires_grad = f

    @contextlib.contextmanager
    def detached(self):
        """Run with non-differentiable aliases of every parameter; graphs built inside never reach them."""
        saved = []
        for _, mod in self.named_modules():
            for name, p in mod._params.items():
                saved.append((mod, name, p))
                object.__setattr__(mod, name, Tensor(p.data))
        try:
            yield self
        finally:
            for mod, name, p in saved:
                object.__setattr__(mod, name, p)

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for mod_name, mod in self.named_modules():
            for name in mod._buffers:
                val = getattr(mod, name)
                if val.dtype.kind == "f":
                    object.__setattr__(mod, name, val.astype(dtype))
        return self

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].dtype if params else np.float64

    # -- state ----------------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            out[name] = np.array(buf, copy=True)
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        buffers = {name: (mod, key) for mod_name, mod in self.named_modules()
                   for key in mod._buffers for name in [f"{mod_name}.{key}" if mod_name else key]}
        if strict:
            missing = (set(params) | set(buffers)) - set(state)
            extra = set(state) - set(params) - set(buffers)
            if missing or extra:
                raise KeyError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, value in state.items():
            if name in params:
                p = params[name]
                if p.shape != np.shape(value):
                    raise ShapeError(f"{name}: checkpoint shape {np.shape(value)} vs model {p.shape}")
                p.data = np.array(value, dtype=p.dtype)
            elif name in buffers:
                mod, key = buffers[name]
                old = getattr(mod, key)
                if old.shape != np.shape(value):
                    raise ShapeError(f"{name}: checkpoint shape {np.shape(value)} vs model {old.shape}")
                object.__setattr__(mod, key, np.array(value, dtype=old.dtype))

    # -- shape algebra ----------------------------------------------------------
    def infer_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        raise NotImplementedError(type(self).__name__)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Sequential(ModuleList):
    def __call__(self, x):
        for m in self._items:
            x = m(x)
        return x

    def infer_shape(self, shape):
        for i, m in enumerate(self._items):
            try:
                shape = m.infer_shape(shape)
            except ShapeError as exc:
                raise ShapeError(f"[{i}] {exc}") from None
        return shape
