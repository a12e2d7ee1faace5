"""Reverse-mode automatic differentiation over scalar expression graphs.

A Tape is an append-only Wengert list. Every arithmetic operation on a Var
appends one node holding its parents and the local partial derivatives,
so parents always have smaller indices than their children and a backward
pass is a single sweep in reverse index order.

Vars live happily inside numpy object arrays, so vector code can be written
once and run either on plain floats or on recorded values. The elementary
functions below accept floats, Vars and arrays of either.
"""

import logging
import math
from typing import Any, Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DomainError, NonFiniteError

logger = logging.getLogger(__name__)

Scalar = Union[float, "Var"]


class Node(NamedTuple):
    """One recorded operation."""
    kind: str
    parents: Tuple[int, ...]
    partials: Tuple[float, ...]
    aux: Optional[float] = None


# Kinds whose local partials do not depend on the operands
_CONSTANT_PARTIALS = {"input", "add", "sub", "neg", "scale"}


class Tape:
    """Recording context for one computation graph.

    A tape is single-writer. Once recording is finished it is never mutated by
    numeric backward passes, so several threads may call gradient() on it.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self.vars: List["Var"] = []
        self.inputs: List[int] = []
        self.output: Optional[int] = None

    def __len__(self) -> int:
        return len(self.nodes)

    def variable(self, value: float, track: bool = True) -> "Var":
        """Create a leaf. Tracked leaves are the default `wrt` of gradient()."""
        var = self._push("input", (), (), float(value))
        if track:
            self.inputs.append(var.index)
        return var

    def variables(self, values: Any, track: bool = True) -> np.ndarray:
        """Create one leaf per element, returned as an object array of the same shape."""
        arr = np.asarray(values, dtype=float)
        out = np.empty(arr.shape, dtype=object)
        for idx, v in np.ndenumerate(arr):
            out[idx] = self.variable(v, track=track)
        return out

    def count(self, kind: str) -> int:
        """Number of recorded nodes of a given kind."""
        return sum(1 for node in self.nodes if node.kind == kind)

    def _push(self, kind: str, parents: Tuple[int, ...], partials: Tuple[float, ...],
              value: float, aux: Optional[float] = None) -> "Var":
        var = Var(value, self, len(self.nodes))
        self.nodes.append(Node(kind, parents, partials, aux))
        self.vars.append(var)
        return var


class Var:
    """A recorded scalar: its value and its node on a tape."""

    __slots__ = ("value", "tape", "index")

    def __init__(self, value: float, tape: Tape, index: int):
        self.value = value
        self.tape = tape
        self.index = index

    def __repr__(self) -> str:
        return f"Var({self.value!r}, node={self.index})"

    # Arithmetic. Arrays are left to numpy, which maps elementwise.
    def __add__(self, other):
        return NotImplemented if isinstance(other, np.ndarray) else add(self, other)

    def __radd__(self, other):
        return NotImplemented if isinstance(other, np.ndarray) else add(other, self)

    def __sub__(self, other):
        return NotImplemented if isinstance(other, np.ndarray) else sub(self, other)

    def __rsub__(self, other):
        return NotImplemented if isinstance(other, np.ndarray) else sub(other, self)

    def __mul__(self, other):
        return NotImplemented if isinstance(other, np.ndarray) else mul(self, other)

    def __rmul__(self, other):
        return NotImplemented if isinstance(other, np.ndarray) else mul(other, self)

    def __truediv__(self, other):
        return NotImplemented if isinstance(other, np.ndarray) else div(self, other)

    def __rtruediv__(self, other):
        return NotImplemented if isinstance(other, np.ndarray) else div(other, self)

    def __pow__(self, other):
        return NotImplemented if isinstance(other, np.ndarray) else power(self, other)

    def __rpow__(self, other):
        return NotImplemented if isinstance(other, np.ndarray) else power(other, self)

    def __neg__(self):
        return neg(self)

    def __pos__(self):
        return self

    # Comparisons look at values only; they gate select/min/max.
    def __lt__(self, other):
        return self.value < value_of(other)

    def __le__(self, other):
        return self.value <= value_of(other)

    def __gt__(self, other):
        return self.value > value_of(other)

    def __ge__(self, other):
        return self.value >= value_of(other)

    # numpy calls these on object-array elements
    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sin(self):
        return sin(self)

    def cos(self):
        return cos(self)

    def tanh(self):
        return tanh(self)

    def sqrt(self):
        return sqrt(self)


def is_var(x: Any) -> bool:
    return isinstance(x, Var)


def value_of(x: Any) -> Any:
    """Strip recording: floats for scalars, float arrays for arrays."""
    if isinstance(x, Var):
        return x.value
    if isinstance(x, np.ndarray):
        if x.dtype == object:
            return np.array([value_of(e) for e in x.flat], dtype=float).reshape(x.shape)
        return x.astype(float)
    if isinstance(x, (list, tuple)):
        return np.array([value_of(e) for e in x], dtype=float)
    return float(x)


def all_finite(x: Any) -> bool:
    return bool(np.all(np.isfinite(value_of(x))))


def _common_tape(a: Var, b: Var) -> Tape:
    if a.tape is not b.tape:
        raise ValueError("operands were recorded on different tapes")
    return a.tape


# ============ Primitives ============

def add(a: Scalar, b: Scalar) -> Scalar:
    if isinstance(a, Var):
        if isinstance(b, Var):
            return _common_tape(a, b)._push("add", (a.index, b.index), (1.0, 1.0), a.value + b.value)
        return a.tape._push("add", (a.index,), (1.0,), a.value + float(b))
    if isinstance(b, Var):
        return b.tape._push("add", (b.index,), (1.0,), float(a) + b.value)
    return a + b


def sub(a: Scalar, b: Scalar) -> Scalar:
    if isinstance(a, Var):
        if isinstance(b, Var):
            return _common_tape(a, b)._push("sub", (a.index, b.index), (1.0, -1.0), a.value - b.value)
        return a.tape._push("sub", (a.index,), (1.0,), a.value - float(b))
    if isinstance(b, Var):
        return b.tape._push("sub", (b.index,), (-1.0,), float(a) - b.value)
    return a - b


def neg(a: Scalar) -> Scalar:
    if isinstance(a, Var):
        return a.tape._push("neg", (a.index,), (-1.0,), -a.value)
    return -a


def mul(a: Scalar, b: Scalar) -> Scalar:
    if isinstance(a, Var):
        if isinstance(b, Var):
            return _common_tape(a, b)._push("mul", (a.index, b.index), (b.value, a.value), a.value * b.value)
        c = float(b)
        return a.tape._push("scale", (a.index,), (c,), a.value * c)
    if isinstance(b, Var):
        c = float(a)
        return b.tape._push("scale", (b.index,), (c,), c * b.value)
    return a * b


def div(a: Scalar, b: Scalar) -> Scalar:
    if isinstance(b, Var):
        if b.value == 0.0:
            raise DomainError("div", b.value)
        if isinstance(a, Var):
            out = a.value / b.value
            return _common_tape(a, b)._push("div", (a.index, b.index), (1.0 / b.value, -out / b.value), out)
        c = float(a)
        out = c / b.value
        return b.tape._push("rdiv", (b.index,), (-out / b.value,), out, aux=c)
    c = float(b) if not isinstance(b, np.ndarray) else b
    if isinstance(a, Var):
        if c == 0.0:
            raise DomainError("div", c)
        return a.tape._push("scale", (a.index,), (1.0 / c,), a.value / c)
    if not isinstance(c, np.ndarray) and c == 0.0:
        raise DomainError("div", c)
    return a / c


def power(a: Scalar, b: Scalar) -> Scalar:
    if isinstance(a, Var) and isinstance(b, Var):
        if a.value <= 0.0:
            raise DomainError("power", a.value)
        out = a.value ** b.value
        return _common_tape(a, b)._push(
            "pow", (a.index, b.index),
            (b.value * a.value ** (b.value - 1.0), out * math.log(a.value)), out)
    if isinstance(a, Var):
        c = float(b)
        if a.value < 0.0 and not c.is_integer():
            raise DomainError("power", a.value)
        # at zero the derivative exists only for c == 0 or c >= 1
        if a.value == 0.0 and (c < 0.0 or 0.0 < c < 1.0):
            raise DomainError("power", a.value)
        out = a.value ** c
        partial = 0.0 if c == 0.0 else c * a.value ** (c - 1.0)
        return a.tape._push("powc", (a.index,), (partial,), out, aux=c)
    if isinstance(b, Var):
        c = float(a)
        if c <= 0.0:
            raise DomainError("power", c)
        out = c ** b.value
        return b.tape._push("rpow", (b.index,), (out * math.log(c),), out, aux=c)
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        return np.power(a, b)
    if a < 0.0 and not float(b).is_integer():
        raise DomainError("power", a)
    return a ** b


def _exp(a: Scalar) -> Scalar:
    if isinstance(a, Var):
        out = math.exp(a.value)
        return a.tape._push("exp", (a.index,), (out,), out)
    return math.exp(a)


def _log(a: Scalar) -> Scalar:
    value = a.value if isinstance(a, Var) else float(a)
    if value <= 0.0:
        raise DomainError("log", value)
    if isinstance(a, Var):
        return a.tape._push("log", (a.index,), (1.0 / value,), math.log(value))
    return math.log(value)


def _sqrt(a: Scalar) -> Scalar:
    value = a.value if isinstance(a, Var) else float(a)
    if value < 0.0:
        raise DomainError("sqrt", value)
    out = math.sqrt(value)
    if isinstance(a, Var):
        partial = 0.5 / out if out > 0.0 else math.inf
        return a.tape._push("sqrt", (a.index,), (partial,), out)
    return out


def _sin(a: Scalar) -> Scalar:
    if isinstance(a, Var):
        return a.tape._push("sin", (a.index,), (math.cos(a.value),), math.sin(a.value))
    return math.sin(a)


def _cos(a: Scalar) -> Scalar:
    if isinstance(a, Var):
        return a.tape._push("cos", (a.index,), (-math.sin(a.value),), math.cos(a.value))
    return math.cos(a)


def _tanh(a: Scalar) -> Scalar:
    if isinstance(a, Var):
        out = math.tanh(a.value)
        return a.tape._push("tanh", (a.index,), (1.0 - out * out,), out)
    return math.tanh(a)


def _elementwise(scalar_fn: Callable, array_fn: Callable, x: Any, check: Optional[Callable] = None):
    if isinstance(x, np.ndarray):
        if x.dtype != object:
            if check is not None:
                check(x)
            return array_fn(x)
        out = np.empty(x.shape, dtype=object)
        for idx, e in np.ndenumerate(x):
            out[idx] = scalar_fn(e)
        return out
    return scalar_fn(x)


def _check_positive(name: str, strict: bool):
    def check(x: np.ndarray):
        bad = x <= 0.0 if strict else x < 0.0
        if np.any(bad):
            raise DomainError(name, float(x[bad].flat[0]))
    return check


def exp(x):
    return _elementwise(_exp, np.exp, x)


def log(x):
    return _elementwise(_log, np.log, x, _check_positive("log", strict=True))


def sqrt(x):
    return _elementwise(_sqrt, np.sqrt, x, _check_positive("sqrt", strict=False))


def sin(x):
    return _elementwise(_sin, np.sin, x)


def cos(x):
    return _elementwise(_cos, np.cos, x)


def tanh(x):
    return _elementwise(_tanh, np.tanh, x)


def _minimum(a: Scalar, b: Scalar) -> Scalar:
    # left argument wins ties
    return a if value_of(a) <= value_of(b) else b


def _maximum(a: Scalar, b: Scalar) -> Scalar:
    return a if value_of(a) >= value_of(b) else b


_minimum_ufunc = np.frompyfunc(_minimum, 2, 1)
_maximum_ufunc = np.frompyfunc(_maximum, 2, 1)


def minimum(a, b):
    """Smaller argument; the derivative follows the chosen operand, left wins ties."""
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        if np.asarray(a).dtype != object and np.asarray(b).dtype != object:
            return np.minimum(a, b)
        return _minimum_ufunc(a, b)
    return _minimum(a, b)


def maximum(a, b):
    """Larger argument; the derivative follows the chosen operand, left wins ties."""
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        if np.asarray(a).dtype != object and np.asarray(b).dtype != object:
            return np.maximum(a, b)
        return _maximum_ufunc(a, b)
    return _maximum(a, b)


def where(condition: bool, a: Scalar, b: Scalar) -> Scalar:
    """Comparison-gated select."""
    return a if condition else b


def clip(x, lower, upper):
    """Elementwise clamp usable on recorded arrays."""
    return minimum(maximum(x, lower), upper)


# ============ Backward passes ============

def _seed_index(tape: Tape, seed: Any) -> Optional[int]:
    if seed is None:
        return tape.output
    if isinstance(seed, Var):
        if seed.tape is not tape:
            raise ValueError("seed was recorded on a different tape")
        return seed.index
    if isinstance(seed, (int, np.integer)):
        return int(seed)
    # constant output: no dependence on any input
    return None


def _wrt_indices(tape: Tape, wrt: Optional[Iterable[Any]]) -> List[Optional[int]]:
    if wrt is None:
        return list(tape.inputs)
    indices: List[Optional[int]] = []
    for w in wrt:
        if isinstance(w, Var):
            indices.append(w.index if w.tape is tape else None)
        elif isinstance(w, (int, np.integer)):
            indices.append(int(w))
        else:
            indices.append(None)
    return indices


def gradient(tape: Tape, seed: Any = None, wrt: Optional[Iterable[Any]] = None) -> np.ndarray:
    """Reverse accumulation of d(seed)/d(wrt) with float adjoints.

    `wrt` defaults to the tracked inputs in creation order; entries may be
    Vars or node indices. Non-Var entries (constants) get a zero.
    """
    indices = _wrt_indices(tape, wrt)
    seed_index = _seed_index(tape, seed)
    if seed_index is None:
        return np.zeros(len(indices))

    nodes = tape.nodes
    lowest = min((j for j in indices if j is not None and j <= seed_index), default=seed_index)
    adjoint = [0.0] * (seed_index + 1)
    adjoint[seed_index] = 1.0
    for i in range(seed_index, lowest - 1, -1):
        a = adjoint[i]
        if a == 0.0:
            continue
        node = nodes[i]
        for p, d in zip(node.parents, node.partials):
            adjoint[p] += a * d

    grads = np.array([adjoint[j] if j is not None and j <= seed_index else 0.0 for j in indices])
    if not np.all(np.isfinite(grads)):
        bad = [k for k, g in enumerate(grads) if not math.isfinite(g)]
        raise NonFiniteError(f"non-finite gradient entries at positions {bad}")
    return grads


def _symbolic_partials(tape: Tape, node: Node, index: int) -> Tuple[Any, ...]:
    if node.kind in _CONSTANT_PARTIALS:
        return node.partials
    out = tape.vars[index]
    args = [tape.vars[p] for p in node.parents]
    kind = node.kind
    if kind == "mul":
        return (args[1], args[0])
    if kind == "div":
        return (div(1.0, args[1]), neg(div(out, args[1])))
    if kind == "rdiv":
        return (neg(div(out, args[0])),)
    if kind == "powc":
        c = node.aux
        if c == 0.0:
            return (0.0,)
        if c == 1.0:
            return (1.0,)
        return (mul(c, power(args[0], c - 1.0)),)
    if kind == "rpow":
        return (mul(out, math.log(node.aux)),)
    if kind == "pow":
        a, b = args
        return (mul(b, power(a, sub(b, 1.0))), mul(out, _log(a)))
    if kind == "exp":
        return (out,)
    if kind == "log":
        return (div(1.0, args[0]),)
    if kind == "sin":
        return (_cos(args[0]),)
    if kind == "cos":
        return (neg(_sin(args[0])),)
    if kind == "tanh":
        return (sub(1.0, mul(out, out)),)
    if kind == "sqrt":
        return (div(0.5, out),)
    raise ValueError(f"no symbolic partial rule for node kind {kind!r}")


def gradient_graph(tape: Tape, seed: Any, wrt: Sequence[Any]) -> List[Scalar]:
    """Reverse pass whose arithmetic is recorded on the same tape.

    Returns one entry per `wrt` element: a Var when the derivative depends on
    recorded values, otherwise a float. Differentiating these entries again
    gives second derivatives.
    """
    indices = _wrt_indices(tape, wrt)
    seed_index = _seed_index(tape, seed)
    if seed_index is None:
        return [0.0] * len(indices)

    wanted = {j for j in indices if j is not None and j <= seed_index}
    lowest = min(wanted, default=seed_index)
    adjoint: Dict[int, Scalar] = {seed_index: 1.0}
    found: Dict[int, Scalar] = {}
    for i in range(seed_index, lowest - 1, -1):
        a = adjoint.pop(i, None)
        if a is None:
            continue
        if i in wanted:
            found[i] = a
        node = tape.nodes[i]
        if not node.parents:
            continue
        if not isinstance(a, Var) and a == 0.0:
            continue
        partials = _symbolic_partials(tape, node, i)
        for p, d in zip(node.parents, partials):
            contrib = mul(a, d)
            adjoint[p] = add(adjoint[p], contrib) if p in adjoint else contrib
    return [found.get(j, 0.0) if j is not None else 0.0 for j in indices]


# ============ High-level helpers ============

def record(f: Callable[[np.ndarray], Any], x: Any) -> Tuple[float, Tape]:
    """Evaluate f on fresh tape inputs; the tape's output is the returned scalar."""
    tape = Tape()
    xs = tape.variables(np.asarray(x, dtype=float).ravel())
    out = f(xs)
    tape.output = out.index if isinstance(out, Var) and out.tape is tape else None
    return value_of(out), tape


def value_and_grad(f: Callable[[np.ndarray], Any], x: Any) -> Tuple[float, np.ndarray]:
    value, tape = record(f, x)
    return value, gradient(tape)


def fd_gradient(f: Callable[[np.ndarray], Any], x: Any, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate."""
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    x = np.asarray(x, dtype=float).ravel()
    grads = np.zeros(x.size)
    for i in range(x.size):
        step = np.zeros(x.size)
        step[i] = h
        grads[i] = (float(value_of(f(x + step))) - float(value_of(f(x - step)))) / (2.0 * h)
    return grads


def value_and_jacobian(f: Callable[[np.ndarray], Any], x: Any) -> Tuple[np.ndarray, np.ndarray]:
    tape = Tape()
    xs = tape.variables(np.asarray(x, dtype=float).ravel())
    outs = np.asarray(f(xs), dtype=object).ravel()
    rows = [gradient(tape, out if isinstance(out, Var) else None) for out in outs]
    jac = np.array(rows).reshape(len(outs), xs.size)
    return value_of(outs), jac


def jacobian(f: Callable[[np.ndarray], Any], x: Any) -> np.ndarray:
    """Row i is the gradient of output i."""
    return value_and_jacobian(f, x)[1]


def hessian(f: Callable[[np.ndarray], Any], x: Any) -> np.ndarray:
    """Second derivatives by differentiating a recorded reverse pass."""
    tape = Tape()
    xs = tape.variables(np.asarray(x, dtype=float).ravel())
    out = f(xs)
    if not isinstance(out, Var):
        return np.zeros((xs.size, xs.size))
    first = gradient_graph(tape, out, list(xs))
    rows = [gradient(tape, g if isinstance(g, Var) else None, list(xs)) for g in first]
    return np.array(rows)
