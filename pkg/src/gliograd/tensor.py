"""Dense tensors and a reverse-mode autodiff tape.

A :class:`Tape` records one node per differentiable operation while it is
active.  :func:`backward` walks the recorded nodes once, newest first, and
returns a :class:`Gradients` mapping; it never mutates the tape, so it can be
called repeatedly (e.g. once in standard mode, once in guided mode).
"""

from __future__ import annotations

import enum
import itertools
import threading
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field

import numpy as np

_uid_counter = itertools.count()
_local = threading.local()


class GradMode(enum.Enum):
    STANDARD = "standard"
    GUIDED = "guided"


class Tensor:
    """An immutable array with an identity on the tape.

    ``data`` is never written in place after construction; ops always allocate
    new outputs.
    """

    __slots__ = ("data", "requires_grad", "uid", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        if any(s < 1 for s in arr.shape):
            raise ValueError(f"tensor extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.uid = next(_uid_counter)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    # Thin operator sugar; the ops module owns the math.
    def __add__(self, other: Tensor) -> Tensor:
        from . import ops

        return ops.add(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        from . import ops

        return ops.mul(self, other)

    def sum(self) -> Tensor:
        from . import ops

        return ops.tsum(self)


def _not_scalar(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


VJP = Callable[[np.ndarray], tuple]


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: VJP
    guided_vjp: VJP | None = None


@dataclass
class Tape:
    """Ordered record of one forward pass."""

    mode: GradMode = GradMode.STANDARD
    nodes: list[Node] = field(default_factory=list)
    _produced: dict[int, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.mode = GradMode(self.mode)

    def __enter__(self) -> Tape:
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.remove(self)

    def record(self, node: Node) -> None:
        self._produced[node.output.uid] = len(self.nodes)
        self.nodes.append(node)

    def produced(self, t: Tensor) -> bool:
        return t.uid in self._produced

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class no_tape:
    """Suspend recording (used by finite-difference probes and inference)."""

    def __enter__(self):
        self._saved = list(_tape_stack())
        _tape_stack().clear()
        return self

    def __exit__(self, *exc):
        _tape_stack().extend(self._saved)


def record(op: str, inputs: Iterable[Tensor], output_data: np.ndarray, vjp: VJP,
           guided_vjp: VJP | None = None) -> Tensor:
    """Wrap ``output_data`` in a Tensor and record it if any input needs grad."""
    inputs = tuple(inputs)
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(output_data, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        tape.record(Node(op, inputs, out, vjp, guided_vjp))
    return out


class Gradients(Mapping):
    """Gradients keyed by tensor uid; also indexable by the Tensor itself."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def _key(self, key) -> int:
        return key.uid if isinstance(key, Tensor) else key

    def __getitem__(self, key) -> np.ndarray:
        return self._grads[self._key(key)]

    def __contains__(self, key) -> bool:
        return self._key(key) in self._grads

    def __iter__(self):
        return iter(self._grads)

    def __len__(self) -> int:
        return len(self._grads)

    def get(self, key, default=None):
        return self._grads.get(self._key(key), default)


def backward(loss: Tensor, tape: Tape, seed: np.ndarray | None = None,
             mode: GradMode | str | None = None,
             retain: Iterable[Tensor] = ()) -> Gradients:
    """Reverse traversal of ``tape`` starting from ``loss``.

    Returned gradients cover every leaf tensor reached plus any tensors in
    ``retain``; other intermediate gradients are freed as soon as their node
    has been processed.  ``seed`` defaults to ones (so a scalar loss gets 1).
    """
    if not tape.produced(loss):
        raise KeyError(f"tensor uid={loss.uid} was not produced on this tape")
    mode = tape.mode if mode is None else GradMode(mode)
    if seed is None:
        seed = np.ones_like(loss.data)
    else:
        seed = np.asarray(seed, dtype=loss.dtype)
        if seed.shape != loss.shape:
            raise ValueError(f"seed shape {seed.shape} != output shape {loss.shape}")

    keep = {t.uid for t in retain}
    produced = tape._produced
    grads: dict[int, np.ndarray] = {loss.uid: seed}
    out: dict[int, np.ndarray] = {}
    stop = produced[loss.uid]
    for node in reversed(tape.nodes[: stop + 1]):
        uid = node.output.uid
        g = grads.pop(uid, None)
        if g is None:
            continue
        if uid in keep:
            out[uid] = g
        fn = node.guided_vjp if (mode is GradMode.GUIDED and node.guided_vjp is not None) else node.vjp
        in_grads = fn(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            prev = grads.get(inp.uid)
            grads[inp.uid] = gi if prev is None else prev + gi
    # whatever is left was never produced by a node: leaves
    for uid, g in grads.items():
        if uid not in produced or uid in keep:
            out[uid] = g
    return Gradients(out)
