"""Dense tensors plus a reverse-mode autodiff tape.

Image tensors use the canonical (batch, channels, height, width) layout with
row-major spatial storage. The tape records every differentiable operation in
execution order; one backward traversal walks the records once in reverse and
accumulates vector-Jacobian products into ``Tensor.grad``.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence, Tuple

import numpy as np

__all__ = ["Tensor", "Tape", "active_tape", "record_op", "backward"]

_TAPE_STACK: list["Tape"] = []


class Tensor:
    """A dense float array with gradient bookkeeping.

    ``grad`` is allocated lazily by the backward pass, always matches
    ``data`` in shape, and accumulates across repeated backward calls until
    ``zero_grad`` resets it.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = np.ascontiguousarray(arr, dtype=dtype)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.tape: Optional["Tape"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=self.data.dtype)
        if g.shape != self.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{flag})"


class _OpRecord:
    __slots__ = ("name", "inputs", "output", "vjp")

    def __init__(self, name: str, inputs: Tuple[Tensor, ...], output: Tensor, vjp: Callable):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    """Ordered record of the operations of one forward pass.

    Records are appended in execution order, so every record's inputs were
    produced earlier on the tape. ``backward`` visits each record exactly
    once, in reverse, which handles shared subexpressions by additive
    accumulation. A tape is never shared between concurrent passes.
    """

    def __init__(self):
        self._records: list[_OpRecord] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"
        return False

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every requires-grad tensor reachable from ``loss``.

        Each call computes a fresh set of cotangents and adds them onto the
        existing ``grad`` arrays, so repeated calls accumulate.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        cotangent: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for rec in reversed(self._records):
            gout = cotangent.get(id(rec.output))
            if gout is None:
                continue
            grads = rec.vjp(gout)
            for t, g in zip(rec.inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in cotangent:
                    cotangent[key] = cotangent[key] + g
                else:
                    cotangent[key] = g
                    holders[key] = t
        for key, t in holders.items():
            t.accumulate_grad(cotangent[key])


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record_op(name: str, inputs: Sequence[Tensor], out_data: np.ndarray, vjp: Callable) -> Tensor:
    """Wrap an op result and register its backward rule on the active tape.

    ``vjp`` maps the output cotangent to a tuple of input cotangents aligned
    with ``inputs`` (``None`` entries for non-differentiable arguments). The
    record is only kept when a tape is active and some input requires grad.
    """
    out = Tensor(out_data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = active_tape()
    if tape is not None and out.requires_grad:
        out.tape = tape
        tape._records.append(_OpRecord(name, tuple(inputs), out, vjp))
    return out


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss over its tape."""
    if loss.tape is None:
        raise ValueError(
            "loss is not attached to a tape; run the forward pass inside `with Tape():`"
        )
    loss.tape.backward(loss)
