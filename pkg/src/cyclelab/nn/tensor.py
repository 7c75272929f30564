"""Tape-based reverse-mode differentiation over numpy arrays.

Operations are recorded only while a :class:`Tape` is active and at least one
input requires a gradient; outside a tape every op is a plain numpy call, so
inference pays no bookkeeping cost.

    with Tape() as tape:
        loss = ops.mean(ops.square(ops.linear(x, W, b) - y))
    grads = tape.gradients(loss, [W, b])
"""

from __future__ import annotations

import numpy as np

_ACTIVE: list["Tape"] = []


class Tensor:
    __slots__ = ("value", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=float)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        tag = f"{self.name}, " if self.name else ""
        return f"Tensor({tag}shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)


def parameter(value, name: str | None = None) -> Tensor:
    return Tensor(np.array(value, dtype=float), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "parents", "backward", "needs")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward
        # flags as of the forward pass, so parameters frozen then stay frozen
        self.needs = tuple(p.requires_grad for p in parents)


class Tape:
    """Records primitive ops for one backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradients of scalar ``loss`` keyed by ``id`` of every leaf that requires one."""
        if loss.value.size != 1:
            raise ValueError("backward needs a scalar loss")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        leaves: dict[int, np.ndarray] = {}
        produced = {id(node.out) for node in self.nodes}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            needs = node.needs
            for parent, pg, need in zip(node.parents, node.backward(g, needs), needs):
                if pg is None or not need:
                    continue
                key = id(parent)
                target = grads if key in produced else leaves
                if key in target:
                    target[key] = target[key] + pg
                else:
                    target[key] = pg
        if id(loss) in grads and id(loss) not in produced:
            leaves[id(loss)] = grads[id(loss)]
        return leaves

    def gradients(self, loss: Tensor, params: list[Tensor]) -> list[np.ndarray]:
        """Gradients for ``params`` in order; parameters the loss never touched get zeros."""
        leaves = self.backward(loss)
        return [leaves.get(id(p), np.zeros_like(p.value)) for p in params]


def record(value: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    """Wrap an op result, recording it when a tape is active and a parent needs gradients."""
    req = any(p.requires_grad for p in parents)
    out = Tensor(value, requires_grad=req and bool(_ACTIVE))
    if out.requires_grad:
        _ACTIVE[-1].nodes.append(_Node(out, parents, backward))
    return out


def backward(tape: Tape, loss: Tensor, params: list[Tensor]) -> list[np.ndarray]:
    """Reverse-mode gradients of ``loss`` for each of ``params`` (zeros where untouched)."""
    return tape.gradients(loss, params)
