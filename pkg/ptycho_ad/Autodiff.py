"""
Tape-based reverse-mode automatic differentiation over complex numpy arrays.

Gradient convention: for a real loss L and a complex value a = x + jy, the gradient
stored on a Variable is dL/dx + j dL/dy. For real-valued Variables it is simply dL/dx
(imaginary part dropped). Under this convention a plain gradient step x - lr * grad
descends L for both real and complex parameters.

Usage:

    x = Variable(xValue, requiresGrad=True)
    with Tape():
        loss = sumReduce(modulusSquared(x))
    backward(loss)
    x.grad   # == 2 * xValue

Outside a `with Tape():` block the primitives only compute values, nothing is recorded.
"""

import threading
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DimensionError, NumericError, TapeStateError


# numpy complex arrays keep the real and imaginary planes side by side;
# Variable.re / Variable.im expose them separately.
ComplexTensor = np.ndarray

Adjoint = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_tapeStack = threading.local()


def currentTape() -> Optional["Tape"]:
    stack = getattr(_tapeStack, 'stack', None)
    if not stack:
        return None
    return stack[-1]


class Node():
    __slots__ = ('opName', 'parents', 'adjoint', 'out', 'index', 'tape')

    def __init__(self, opName: str, parents: Tuple["Variable", ...], adjoint: Adjoint, out: "Variable", index: int, tape: "Tape"):
        self.opName = opName
        self.parents = parents
        self.adjoint = adjoint
        self.out = out
        self.index = index
        self.tape = tape


class Tape():
    """
    Ordered record of the operations of one optimization step. Nodes are appended in
    execution order, which is a valid topological order of the graph.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if not hasattr(_tapeStack, 'stack'):
            _tapeStack.stack = []
        _tapeStack.stack.append(self)
        return self

    def __exit__(self, excType, excValue, tb) -> None:
        _tapeStack.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, opName: str, parents: Tuple["Variable", ...], adjoint: Adjoint, out: "Variable") -> Node:
        if self.consumed:
            raise TapeStateError("Cannot record on a consumed tape")
        node = Node(opName, parents, adjoint, out, len(self.nodes), self)
        self.nodes.append(node)
        return node


class Variable():

    def __init__(self, value, requiresGrad: bool = False, name: Optional[str] = None):
        self.value = np.asarray(value)
        if self.value.dtype.kind in 'biu':
            self.value = self.value.astype(np.float64)
        self.requiresGrad = requiresGrad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name

    def __repr__(self):
        return f"Variable(name={self.name}, shape={self.shape}, dtype={self.value.dtype}, requiresGrad={self.requiresGrad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def isComplex(self) -> bool:
        return np.iscomplexobj(self.value)

    @property
    def re(self) -> np.ndarray:
        return self.value.real

    @property
    def im(self) -> np.ndarray:
        return self.value.imag

    def zeroGrad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return elementwiseMul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return elementwiseMul(other, self)

    def __neg__(self):
        return scale(self, -1.0)


VariableLike = Union[Variable, np.ndarray, float, complex]


def asVariable(x: VariableLike) -> Variable:
    if isinstance(x, Variable):
        return x
    return Variable(x)


def recordOp(opName: str, value: np.ndarray, parents: Sequence[Variable], adjoint: Adjoint) -> Variable:
    """
    Wrap `value` in a new Variable and, when a tape is active and any parent needs a
    gradient, record the operation. `adjoint(g)` maps the output gradient to one
    gradient per parent (None for "no contribution"), in the convention described in
    the module docstring, before any real-part projection or un-broadcasting.

    This is also the hook used by other modules to add primitives (e.g. bilinear sampling).
    """
    parents = tuple(parents)
    out = Variable(value)
    tape = currentTape()
    if tape is not None and any(p.requiresGrad for p in parents):
        out.requiresGrad = True
        out.node = tape.record(opName, parents, adjoint, out)
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _checkBinaryShapes(opName: str, a: Variable, b: Variable) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise DimensionError(f"{opName}: shape mismatch {a.shape} vs {b.shape}")


def _requireReal(opName: str, a: Variable) -> None:
    if a.isComplex:
        raise DimensionError(f"{opName}: expects a real-valued input")


###################################################################
#                                                                 #
#                           Primitives                            #

def add(a: VariableLike, b: VariableLike) -> Variable:
    a, b = asVariable(a), asVariable(b)
    _checkBinaryShapes('add', a, b)
    return recordOp('add', a.value + b.value, (a, b), lambda g: (g, g))


def subtract(a: VariableLike, b: VariableLike) -> Variable:
    a, b = asVariable(a), asVariable(b)
    _checkBinaryShapes('subtract', a, b)
    return recordOp('subtract', a.value - b.value, (a, b), lambda g: (g, -g))


def elementwiseMul(a: VariableLike, b: VariableLike) -> Variable:
    """
    Complex Hadamard product. Adjoints: g_a = g * conj(b), g_b = g * conj(a).
    """
    a, b = asVariable(a), asVariable(b)
    _checkBinaryShapes('elementwiseMul', a, b)
    aValue, bValue = a.value, b.value
    return recordOp(
        'elementwiseMul',
        aValue * bValue,
        (a, b),
        lambda g: (g * np.conj(bValue), g * np.conj(aValue)),
    )


def scale(a: VariableLike, factor: Union[float, complex]) -> Variable:
    a = asVariable(a)
    return recordOp('scale', a.value * factor, (a,), lambda g: (g * np.conj(factor),))


def conjugate(a: VariableLike) -> Variable:
    a = asVariable(a)
    return recordOp('conjugate', np.conj(a.value), (a,), lambda g: (np.conj(g),))


def modulusSquared(a: VariableLike) -> Variable:
    """
    |a|^2 = re^2 + im^2, real-valued. Adjoint: g_a = 2 * g * a.
    """
    a = asVariable(a)
    aValue = a.value
    return recordOp('modulusSquared', aValue.real ** 2 + aValue.imag ** 2, (a,), lambda g: (2.0 * g * aValue,))


def sqrt(a: VariableLike) -> Variable:
    """
    Real square root. The adjoint is set to zero where the output is zero.
    """
    a = asVariable(a)
    _requireReal('sqrt', a)
    out = np.sqrt(np.maximum(a.value, 0.0))

    def _adjoint(g):
        res = np.zeros(np.broadcast(g, out).shape, dtype=np.result_type(g, out))
        np.divide(g, 2.0 * out, out=res, where=out > 0)
        return (res,)

    return recordOp('sqrt', out, (a,), _adjoint)


def relu(a: VariableLike) -> Variable:
    a = asVariable(a)
    _requireReal('relu', a)
    positive = a.value > 0
    return recordOp('relu', np.where(positive, a.value, 0.0), (a,), lambda g: (g * positive,))


def absolute(a: VariableLike) -> Variable:
    a = asVariable(a)
    _requireReal('absolute', a)
    sign = np.sign(a.value)
    return recordOp('absolute', np.abs(a.value), (a,), lambda g: (g * sign,))


def sumReduce(a: VariableLike) -> Variable:
    a = asVariable(a)
    shape = a.shape
    return recordOp('sumReduce', np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def expj(theta: VariableLike) -> Variable:
    """
    exp(j * theta) for a real theta. Adjoint: g_theta = Im(conj(out) * g).
    """
    theta = asVariable(theta)
    _requireReal('expj', theta)
    out = np.exp(1j * theta.value)
    return recordOp('expj', out, (theta,), lambda g: (np.imag(np.conj(out) * g),))


def cyclicPhase(a: VariableLike, period: float) -> Variable:
    """
    2*pi * frac(a / period): the phase of a linear ramp, wrapped into [0, 2*pi)
    before it is multiplied out, so large a / period keep their fractional precision.
    """
    a = asVariable(a)
    _requireReal('cyclicPhase', a)
    slope = 2.0 * np.pi / period
    return recordOp('cyclicPhase', 2.0 * np.pi * np.mod(a.value / period, 1.0), (a,), lambda g: (g * slope,))


def _centerOffsets(small: Tuple[int, ...], large: Tuple[int, ...]) -> Tuple[slice, ...]:
    return tuple(slice((L - s) // 2, (L - s) // 2 + s) for s, L in zip(small, large))


def padCenter(a: VariableLike, shape: Tuple[int, int]) -> Variable:
    """
    Zero-pad the last two axes to `shape`, keeping the data centered.
    """
    a = asVariable(a)
    small = a.shape[-2:]
    if any(s > L for s, L in zip(small, shape)):
        raise DimensionError(f"padCenter: cannot pad {small} to smaller {tuple(shape)}")
    window = (Ellipsis,) + _centerOffsets(small, shape)
    out = np.zeros(a.shape[:-2] + tuple(shape), dtype=a.value.dtype)
    out[window] = a.value
    return recordOp('padCenter', out, (a,), lambda g: (g[window].copy(),))


def cropCenter(a: VariableLike, shape: Tuple[int, int]) -> Variable:
    a = asVariable(a)
    large = a.shape[-2:]
    if any(s > L for s, L in zip(shape, large)):
        raise DimensionError(f"cropCenter: cannot crop {large} to larger {tuple(shape)}")
    window = (Ellipsis,) + _centerOffsets(shape, large)
    fullShape = a.shape

    def _adjoint(g):
        res = np.zeros(fullShape, dtype=g.dtype)
        res[window] = g
        return (res,)

    return recordOp('cropCenter', a.value[window].copy(), (a,), _adjoint)


def stack(items: Sequence[VariableLike], axis: int = 0) -> Variable:
    items = [asVariable(x) for x in items]
    if not items:
        raise DimensionError("stack: nothing to stack")
    shapes = {x.shape for x in items}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shape mismatch {sorted(shapes)}")
    count = len(items)

    def _adjoint(g):
        return tuple(np.take(g, i, axis=axis) for i in range(count))

    return recordOp('stack', np.stack([x.value for x in items], axis=axis), items, _adjoint)


def index(a: VariableLike, idx) -> Variable:
    """
    a[idx] with a scatter-add adjoint.
    """
    a = asVariable(a)
    fullShape = a.shape

    def _adjoint(g):
        res = np.zeros(fullShape, dtype=g.dtype)
        np.add.at(res, idx, g)
        return (res,)

    return recordOp('index', np.array(a.value[idx]), (a,), _adjoint)


def fft2(a: VariableLike) -> Variable:
    """
    Unitary 2D FFT over the last two axes; the adjoint is the unitary inverse.
    """
    a = asVariable(a)
    return recordOp('fft2', np.fft.fft2(a.value, norm='ortho'), (a,), lambda g: (np.fft.ifft2(g, norm='ortho'),))


def ifft2(a: VariableLike) -> Variable:
    a = asVariable(a)
    return recordOp('ifft2', np.fft.ifft2(a.value, norm='ortho'), (a,), lambda g: (np.fft.fft2(g, norm='ortho'),))

#                           Primitives                            #
#                                                                 #
###################################################################


def backward(loss: Variable) -> None:
    """
    Reverse pass over the tape that recorded `loss`. Leaves with requiresGrad receive
    (accumulate into) `.grad`; the tape is consumed afterwards.
    """
    if loss.value.size != 1 or loss.isComplex:
        raise TapeStateError(f"backward: loss must be a real scalar, got shape {loss.shape} dtype {loss.value.dtype}")

    if loss.node is None:
        if not loss.requiresGrad:
            raise TapeStateError("backward: loss was not recorded on a tape")
        loss.grad = np.ones_like(loss.value)
        return

    tape = loss.node.tape
    if tape.consumed:
        raise TapeStateError("backward: tape already consumed")

    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(tape.nodes[:loss.node.index + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        parentGrads = node.adjoint(g)
        for parent, pg in zip(node.parents, parentGrads):
            if pg is None or not parent.requiresGrad:
                continue
            pg = _unbroadcast(np.asarray(pg), parent.shape)
            if not parent.isComplex:
                pg = np.real(pg)
            if parent.node is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    tape.consumed = True
    tape.nodes = []


def analyticGradients(f: Callable[..., Variable], point: Sequence[np.ndarray]) -> List[np.ndarray]:
    leaves = [Variable(np.array(x, copy=True), requiresGrad=True) for x in point]
    with Tape():
        out = f(*leaves)
    backward(out)
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value) for leaf in leaves]


def finiteDifferenceCheck(f: Callable[..., Variable], point: Union[np.ndarray, Sequence[np.ndarray]], eps: float = 1e-6, floor: float = 1e-12) -> float:
    """
    Compare the tape gradient of the scalar function `f` at `point` against central
    differences on every real and imaginary coordinate. Returns the maximum of
    |analytic - numeric| / max(|analytic|, |numeric|, floor).
    """
    if eps <= 0:
        raise NumericError("finiteDifferenceCheck: eps must be positive")
    if isinstance(point, np.ndarray):
        point = [point]
    point = [np.asarray(x) for x in point]
    if any(x.dtype.kind in 'biu' for x in point):
        point = [x.astype(np.float64) if x.dtype.kind in 'biu' else x for x in point]

    analytic = analyticGradients(f, point)

    def _evaluate(values):
        res = f(*[Variable(v) for v in values]).value
        res = float(np.real(res))
        if not np.isfinite(res):
            raise NumericError("finiteDifferenceCheck: function returned a non-finite value")
        return res

    maxErr = 0.0
    for i, x in enumerate(point):
        directions = (1.0, 1j) if np.iscomplexobj(x) else (1.0,)
        for k in range(x.size):
            for direction in directions:
                plus = [v.copy() for v in point]
                minus = [v.copy() for v in point]
                plus[i].flat[k] += eps * direction
                minus[i].flat[k] -= eps * direction
                numeric = (_evaluate(plus) - _evaluate(minus)) / (2 * eps)
                g = analytic[i].flat[k]
                exact = float(np.real(g)) if direction == 1.0 else float(np.imag(g))
                err = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
                maxErr = max(maxErr, err)
    return maxErr
