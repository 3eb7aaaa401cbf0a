"""Dense float64 tensors and a tape for reverse-mode differentiation.

Operations (see :mod:`guided_i2i.tensor.ops`) record themselves on the
innermost active :class:`Tape` whenever one of their inputs is tracked, i.e.
is a leaf with ``requires_grad=True`` or the output of an op already on that
tape. :func:`backward` walks the tape in reverse.

Typical use::

    with Tape() as tape:
        loss = ops.mean(ops.square(ops.sub(model(x), target)))
    backward(tape, loss)
"""

import threading

import numpy as np

from ..errors import ContractError, DimensionError, NumericError

# per-thread stack of active tapes, so concurrent samplers never share one
_LOCAL = threading.local()


def _stack():
    if not hasattr(_LOCAL, "tapes"):
        _LOCAL.tapes = []
    return _LOCAL.tapes


class Tensor:
    """A dense n-dimensional array of float64 values with an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_node")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim and 0 in arr.shape:
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._node = None

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.name = None
        t._node = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def node_id(self):
        """Index of the producing record on its tape, or None if untracked/stale."""
        if self._node is None:
            return None
        tape, gen, idx = self._node
        return idx if tape.generation == gen else None

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor._wrap(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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

        return ops.scale(self, -1.0)


class _Record:
    __slots__ = ("inputs", "backward_fn")

    def __init__(self, inputs, backward_fn):
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered log of differentiable operations.

    A tape is single-threaded. Records are appended in execution order, which
    is a topological order of the computation graph. :meth:`clear` drops all
    records and invalidates every node id handed out so far.
    """

    def __init__(self):
        self.records = []
        self.generation = 0

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def clear(self):
        self.records = []
        self.generation += 1

    def index_of(self, t):
        if t._node is None:
            return None
        tape, gen, idx = t._node
        if tape is self and gen == self.generation:
            return idx
        return None

    def tracks(self, t):
        return t.requires_grad or self.index_of(t) is not None


def active_tape():
    stack = _stack()
    return stack[-1] if stack else None


def check_finite(arr, what):
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {what}")


def make_output(arr, inputs, backward_fn, what):
    """Wrap ``arr`` as the output of an op and record it if any input is tracked.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    """
    check_finite(arr, what)
    out = Tensor._wrap(arr)
    tape = active_tape()
    if tape is not None and any(tape.tracks(t) for t in inputs):
        out._node = (tape, tape.generation, len(tape.records))
        tape.records.append(_Record(inputs, backward_fn))
    return out


def backward(tape, loss, inputs=None):
    """Populate ``.grad`` on every tracked leaf reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` arrays. When ``inputs`` is
    given, only those leaves are written. Returns a dict mapping each written
    leaf tensor to its gradient array.
    """
    only = None if inputs is None else {id(t) for t in inputs}
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    root = tape.index_of(loss)
    if root is None:
        raise ContractError("loss is not recorded on this tape")
    grads = [None] * len(tape.records)
    grads[root] = np.ones_like(loss.data)
    leaves = {}
    for idx in range(root, -1, -1):
        g = grads[idx]
        if g is None:
            continue
        grads[idx] = None
        rec = tape.records[idx]
        in_grads = rec.backward_fn(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None:
                continue
            j = tape.index_of(t)
            if j is not None:
                if j >= idx:
                    raise RuntimeError("tape is not topologically ordered (cycle)")
                grads[j] = gi if grads[j] is None else grads[j] + gi
            elif t.requires_grad and (only is None or id(t) in only):
                if gi.shape != t.data.shape:
                    raise RuntimeError(f"gradient shape {gi.shape} != leaf shape {t.data.shape}")
                t.grad = gi.copy() if t.grad is None else t.grad + gi
                leaves[id(t)] = t
    return {t: t.grad for t in leaves.values()}
