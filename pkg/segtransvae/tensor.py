"""
Tensor value type with tape-based reverse-mode differentiation.

A `Tensor` wraps an immutable numpy array. Operations executed while a `Tape` is active
record a node for every result that depends on a tensor with ``requires_grad`` set;
`backward` walks the tape in reverse and returns a `GradientMap`.

Broadcasting in binary operations follows one documented rule: operands have equal rank
(or one of them is a scalar) and every extent either matches or is 1 on one side.
"""
# Standard libraries
import threading
from collections import namedtuple
from collections.abc import Mapping
from copy import deepcopy

import numpy as np
from scipy.special import expit

# Local imports
from .errors import ShapeError, DomainError, DegenerateInputError, ContractError

DTYPES = {'f32': np.float32, 'f64': np.float64}
"""`dict`: Supported dtype codes and their numpy equivalents"""

_local = threading.local()
_num_threads = 1


def set_num_threads(num_threads):
    """Set the number of threads kernels may use.

    Values of 0 or 1 select the bitwise-deterministic single-threaded mode.

    Arguments:
        num_threads (`int`): Upper bound on kernel threads.
    """
    global _num_threads
    _num_threads = max(1, int(num_threads))


def get_num_threads():
    """Return the number of threads kernels may use."""
    return _num_threads


class Rng(object):
    """Seeded random generator.

    The algorithm is numpy's PCG64 bit generator (128-bit state, 128-bit increment), which
    produces the same stream on every platform for a given seed. Normal variates are drawn
    with `numpy.random.Generator.standard_normal` in float64 and cast afterwards, so f32 and
    f64 requests consume the stream identically.

    Arguments:
        seed (`int`): Non-negative seed.

    Attributes:
        seed (`int`): The seed this generator was created with.
    """
    algorithm = 'PCG64'

    def __init__(self, seed):
        if int(seed) < 0:
            raise ContractError('seed must be non-negative, got {}'.format(seed))
        self.seed = int(seed)
        self._generator = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def state(self):
        """`dict`: Serializable generator state."""
        return deepcopy(self._generator.bit_generator.state)

    @state.setter
    def state(self, value):
        if value.get('bit_generator') != self.algorithm:
            raise ContractError('rng state belongs to {}, expected {}'.format(
                value.get('bit_generator'), self.algorithm))
        self._generator.bit_generator.state = deepcopy(value)

    def derive(self, index):
        """Independent generator seeded with ``seed + index``."""
        return Rng(self.seed + int(index))

    def uniform(self, low, high, shape):
        return self._generator.uniform(low, high, size=tuple(shape))

    def normal(self, mean, std, shape):
        return mean + std * self._generator.standard_normal(size=tuple(shape))

    def integers(self, low, high, size=None):
        """Integers in ``[low, high)``."""
        return self._generator.integers(low, high, size=size)

    def random(self, size=None):
        return self._generator.random(size=size)


Node = namedtuple('Node', ['kind', 'inputs', 'backward'])
Node.__doc__ = 'One entry of a differentiation tape'
Node.kind.__doc__ = '(`str`) Name of the operation that produced the node'
Node.inputs.__doc__ = '(`tuple`) Node ids of the inputs, ``None`` for constant inputs'
Node.backward.__doc__ = '(`callable`) Maps the output gradient to a tuple of input gradients'


def _tape_stack():
    stack = getattr(_local, 'tapes', None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def current_tape():
    """Return the innermost active `Tape` of this thread, or ``None``."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape(object):
    """Append-only record of differentiable operations.

    Used as a context manager; a tape is confined to the thread that entered it.

    Attributes:
        nodes (`list`): `Node` entries in topological order.
        gradient_map (`GradientMap`): Populated by `backward`.
        dtype (`str`): The single dtype allowed on this tape, fixed by the first node.
    """
    def __init__(self):
        self.nodes = []
        self.gradient_map = None
        self.dtype = None

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc_info):
        _tape_stack().remove(self)
        return False

    def _check_dtype(self, dtype):
        if self.dtype is None:
            self.dtype = dtype
        elif self.dtype != dtype:
            raise ContractError('tape holds {} values, cannot record {}'.format(self.dtype, dtype))

    def watch(self, tensor):
        """Register ``tensor`` as a leaf of this tape and return its node id."""
        if tensor._tape is self and tensor.node_id is not None:
            return tensor.node_id
        self._check_dtype(tensor.dtype)
        self.nodes.append(Node('leaf', (), None))
        tensor._tape = self
        tensor.node_id = len(self.nodes) - 1
        return tensor.node_id

    def record(self, kind, inputs, backward_fn, dtype):
        self._check_dtype(dtype)
        self.nodes.append(Node(kind, tuple(inputs), backward_fn))
        return len(self.nodes) - 1


class Tensor(object):
    """N-dimensional numeric array taking part in reverse-mode differentiation.

    Arguments:
        data (array_like): Values; copied on construction.
        dtype (`str`, optional): ``'f32'`` or ``'f64'``. Inferred from ``data`` when omitted
            (float32 arrays give ``'f32'``, everything else ``'f64'``).
        requires_grad (`bool`, optional): Whether gradients should be tracked for this tensor.

    Attributes:
        requires_grad (`bool`): Whether the tensor participates in differentiation.
        node_id (`int`): Node index on the tape that last recorded this tensor, or ``None``.
    """
    __array_priority__ = 1000

    def __init__(self, data, dtype=None, requires_grad=False):
        if dtype is None:
            dtype = 'f32' if np.asarray(data).dtype == np.float32 else 'f64'
        if dtype not in DTYPES:
            raise ContractError('dtype must be one of {}, got {}'.format(sorted(DTYPES), dtype))
        array = np.array(data, dtype=DTYPES[dtype])
        self._init(array, dtype, requires_grad)

    def _init(self, array, dtype, requires_grad):
        if any(extent < 1 for extent in array.shape):
            raise ShapeError('zero-sized extent in shape {}'.format(array.shape))
        array.flags.writeable = False
        self._data = array
        self.dtype = dtype
        self.requires_grad = bool(requires_grad)
        self.node_id = None
        self._tape = None

    @classmethod
    def _wrap(cls, array, dtype):
        tensor = cls.__new__(cls)
        tensor._init(np.asarray(array, dtype=DTYPES[dtype]), dtype, False)
        return tensor

    def __repr__(self):
        return 'Tensor(shape={}, dtype={}, requires_grad={})'.format(
            self.shape, self.dtype, self.requires_grad)

    @property
    def data(self):
        """`~numpy.ndarray`: Read-only view of the values."""
        return self._data

    @property
    def shape(self):
        return self._data.shape

    @property
    def ndim(self):
        return self._data.ndim

    @property
    def size(self):
        return self._data.size

    def item(self):
        if self.size != 1:
            raise ContractError('item() needs exactly one element, shape is {}'.format(self.shape))
        return float(self._data.reshape(-1)[0])

    def numpy(self):
        """Return a writable copy of the values."""
        return np.array(self._data)

    def detach(self, requires_grad=False):
        """Return a new leaf tensor holding the same values."""
        return Tensor(self._data, self.dtype, requires_grad=requires_grad)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = shape[0]
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = axes[0]
        return permute(self, axes)

    def sum(self, axes=None, keepdims=False):
        return reduce_sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce_mean(self, axes, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)


class GradientMap(dict):
    """Node id to gradient `Tensor` mapping, also indexable by the tensors themselves."""
    def __init__(self, tape):
        super(GradientMap, self).__init__()
        self.tape = tape

    def _key(self, key):
        if isinstance(key, Tensor):
            if key._tape is not self.tape:
                raise KeyError('tensor was not recorded on this tape')
            return key.node_id
        return key

    def __getitem__(self, key):
        return dict.__getitem__(self, self._key(key))

    def __contains__(self, key):
        try:
            return dict.__contains__(self, self._key(key))
        except KeyError:
            return False

    def get(self, key, default=None):
        try:
            return self[key]
        except KeyError:
            return default


def apply_op(kind, inputs, data, backward_fn):
    """Wrap an operation result and record it on the active tape.

    Arguments:
        kind (`str`): Operation name, used in error messages and on the tape.
        inputs (`list`): Input `Tensor` objects, in the order ``backward_fn`` returns gradients.
        data (`~numpy.ndarray`): The computed result.
        backward_fn (`callable`): Maps the output gradient array to a tuple of input gradient
            arrays (``None`` where an input has no gradient).

    Returns:
        `Tensor`: The result.

    Raises:
        `DomainError`: If ``data`` holds NaN or infinite values.
    """
    dtype = inputs[0].dtype
    for tensor in inputs[1:]:
        if tensor.dtype != dtype:
            raise ContractError('{} mixes {} and {} operands'.format(kind, dtype, tensor.dtype))
    data = np.asarray(data, dtype=DTYPES[dtype])
    if not np.all(np.isfinite(data)):
        raise DomainError('{} produced non-finite values'.format(kind))
    out = Tensor._wrap(data, dtype)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        ids = [tape.watch(t) if t.requires_grad else None for t in inputs]
        out.requires_grad = True
        out.node_id = tape.record(kind, ids, backward_fn, dtype)
        out._tape = tape
    return out


def _as_tensor(value, like):
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=DTYPES[like.dtype]), like.dtype)


def _pair(a, b):
    like = a if isinstance(a, Tensor) else b
    if not isinstance(like, Tensor):
        raise ContractError('at least one operand must be a Tensor')
    return _as_tensor(a, like), _as_tensor(b, like)


def _broadcast_shape(a_shape, b_shape, kind):
    if a_shape == b_shape:
        return a_shape
    if len(a_shape) == 0:
        return b_shape
    if len(b_shape) == 0:
        return a_shape
    if len(a_shape) != len(b_shape):
        raise ShapeError('{}: ranks differ, {} vs {}'.format(kind, a_shape, b_shape))
    shape = []
    for x, y in zip(a_shape, b_shape):
        if x == y or y == 1:
            shape.append(x)
        elif x == 1:
            shape.append(y)
        else:
            raise ShapeError('{}: incompatible shapes {} and {}'.format(kind, a_shape, b_shape))
    return tuple(shape)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (accumulation over broadcast axes)."""
    if grad.shape == tuple(shape):
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum())
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def build_tensor(kind, shape, dtype='f32', rng=None, value=0.0, low=0.0, high=1.0,
                 mean=0.0, std=1.0, requires_grad=False):
    """Create a tensor filled according to ``kind``.

    Arguments:
        kind (`str`): One of ``zeros``, ``full``, ``uniform`` or ``normal``.
        shape (`list`): Positive extents.
        dtype (`str`, optional): ``'f32'`` or ``'f64'``.
        rng (`Rng`, optional): Required for ``uniform`` and ``normal``.
        value (`float`, optional): Fill value for ``full``.
        low, high (`float`, optional): Bounds for ``uniform``.
        mean, std (`float`, optional): Moments for ``normal``.
        requires_grad (`bool`, optional): Marks the result as a differentiable leaf.

    Returns:
        `Tensor`: The new tensor.

    Raises:
        `ShapeError`: For an extent smaller than 1.
        `ContractError`: For a random fill without ``rng`` or an unknown ``kind``.

    Examples:
        >>> build_tensor('full', [4], value=1.5).data
        array([1.5, 1.5, 1.5, 1.5], dtype=float32)
    """
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError('zero-sized extent in shape {}'.format(shape))
    if kind == 'zeros':
        array = np.zeros(shape)
    elif kind == 'full':
        array = np.full(shape, value)
    elif kind in ('uniform', 'normal'):
        if rng is None:
            raise ContractError('{} fill requires an Rng'.format(kind))
        if kind == 'uniform':
            array = rng.uniform(low, high, shape)
        else:
            array = rng.normal(mean, std, shape)
    else:
        raise ContractError('unknown tensor kind {}'.format(kind))
    return Tensor(array, dtype, requires_grad=requires_grad)


def add(a, b):
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape, 'add')

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return apply_op('add', [a, b], a.data + b.data, grad_fn)


def sub(a, b):
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape, 'sub')

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return apply_op('sub', [a, b], a.data - b.data, grad_fn)


def mul(a, b):
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape, 'mul')

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return apply_op('mul', [a, b], a.data * b.data, grad_fn)


def div(a, b):
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape, 'div')
    if np.any(b.data == 0):
        raise DomainError('division by zero')

    def grad_fn(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return apply_op('div', [a, b], a.data / b.data, grad_fn)


def exp(a):
    y = np.exp(a.data)
    return apply_op('exp', [a], y, lambda g: (g * y,))


def log(a):
    if np.any(a.data <= 0):
        raise DomainError('log of non-positive value')
    return apply_op('log', [a], np.log(a.data), lambda g: (g / a.data,))


def square(a):
    return apply_op('square', [a], a.data * a.data, lambda g: (2.0 * g * a.data,))


def sigmoid(a):
    """Logistic function, clamped to the open interval (0, 1) of the dtype."""
    info = np.finfo(DTYPES[a.dtype])
    y = np.clip(expit(a.data), info.tiny, 1.0 - info.epsneg)
    return apply_op('sigmoid', [a], y, lambda g: (g * y * (1.0 - y),))


def relu(a):
    mask = a.data > 0
    return apply_op('relu', [a], np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def leaky_relu(a, slope=0.01):
    scale = np.where(a.data >= 0, 1.0, slope)
    return apply_op('leaky_relu', [a], a.data * scale, lambda g: (g * scale,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """Gaussian error linear unit, tanh approximation."""
    x = a.data
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    y = 0.5 * x * (1.0 + t)

    def grad_fn(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)
    return apply_op('gelu', [a], y, grad_fn)


def clip(a, low, high):
    mask = (a.data >= low) & (a.data <= high)
    return apply_op('clip', [a], np.clip(a.data, low, high), lambda g: (g * mask,))


_UNARY = {
    'exp': exp,
    'log': log,
    'sigmoid': sigmoid,
    'relu': relu,
    'square': square,
    'gelu': gelu,
}
_BINARY = {
    'add': add,
    'sub': sub,
    'mul': mul,
    'div': div,
}


def elementwise(op, a, b=None, slope=0.01):
    """Apply an elementwise operation by name.

    Arguments:
        op (`str`): One of ``add``, ``sub``, ``mul``, ``div``, ``exp``, ``log``, ``sigmoid``,
            ``relu``, ``square``, ``gelu`` or ``leaky_relu``.
        a (`Tensor`): First operand.
        b (`Tensor`, optional): Second operand of binary operations.
        slope (`float`, optional): Negative slope for ``leaky_relu``.

    Returns:
        `Tensor`: The result.
    """
    if op in _BINARY:
        if b is None:
            raise ContractError('{} needs two operands'.format(op))
        return _BINARY[op](a, b)
    if op == 'leaky_relu':
        return leaky_relu(a, slope)
    if op in _UNARY:
        return _UNARY[op](a)
    raise ContractError('unknown elementwise op {}'.format(op))


def matmul(a, b):
    """Matrix product over the last two axes with broadcast leading batch axes."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError('matmul needs operands of rank >= 2, got {} and {}'.format(
            a.shape, b.shape))
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError('matmul inner extents differ: {} vs {}'.format(a.shape, b.shape))
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError('matmul batch extents differ: {} vs {}'.format(a.shape, b.shape))

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return apply_op('matmul', [a, b], np.matmul(a.data, b.data), grad_fn)


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1]))
        if shape.count(-1) > 1 or known == 0 or x.size % known:
            raise ShapeError('cannot reshape {} into {}'.format(x.shape, shape))
        shape = tuple(x.size // known if s == -1 else s for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError('cannot reshape {} ({} elements) into {}'.format(x.shape, x.size, shape))
    return apply_op('reshape', [x], x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def permute(x, axes):
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError('{} is not a permutation of {} axes'.format(axes, x.ndim))
    inverse = tuple(np.argsort(axes))
    return apply_op('permute', [x], np.transpose(x.data, axes),
                    lambda g: (np.transpose(g, inverse),))


def concat(tensors, axis):
    tensors = list(tensors)
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape))
                                 if i != axis):
            raise ShapeError('concat operands disagree off axis {}: {} vs {}'.format(
                axis, tensors[0].shape, t.shape))
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))
    return apply_op('concat', tensors, np.concatenate([t.data for t in tensors], axis=axis),
                    grad_fn)


def slice_(x, key):
    """Basic slicing with a tuple of `slice` objects (rank is preserved)."""
    if not isinstance(key, tuple):
        key = (key,)
    if not all(isinstance(k, slice) for k in key):
        raise ContractError('only slice objects are supported, got {}'.format(key))
    data = x.data[key]
    if data.size == 0:
        raise ShapeError('slice {} of {} is empty'.format(key, x.shape))

    def grad_fn(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[key] = g
        return (full,)
    return apply_op('slice', [x], data, grad_fn)


def pad(x, widths):
    """Zero padding; ``widths`` holds one ``(before, after)`` pair per axis."""
    widths = tuple((int(a), int(b)) for a, b in widths)
    if len(widths) != x.ndim:
        raise ShapeError('pad needs {} width pairs, got {}'.format(x.ndim, len(widths)))
    key = tuple(slice(a, a + s) for (a, _), s in zip(widths, x.shape))
    return apply_op('pad', [x], np.pad(x.data, widths), lambda g: (g[key],))


def _axes(x, axes):
    if axes is None:
        return tuple(range(x.ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % x.ndim for a in axes))


def reduce_sum(x, axes=None, keepdims=False):
    axes = _axes(x, axes)
    kept = tuple(1 if i in axes else s for i, s in enumerate(x.shape))

    def grad_fn(g):
        return (np.broadcast_to(g.reshape(kept), x.shape).copy(),)
    return apply_op('reduce_sum', [x], x.data.sum(axis=axes, keepdims=keepdims), grad_fn)


def reduce_mean(x, axes=None, keepdims=False):
    axes = _axes(x, axes)
    count = int(np.prod([x.shape[a] for a in axes]))
    return reduce_sum(x, axes, keepdims) * (1.0 / count)


_SHAPE_OPS = {
    'reshape': reshape,
    'permute': permute,
    'concat': concat,
    'slice': slice_,
    'pad': pad,
    'reduce_sum': reduce_sum,
    'reduce_mean': reduce_mean,
}


def shape_ops(op, *args, **kwargs):
    """Dispatch a shape operation by name (see `_SHAPE_OPS` for the names)."""
    if op not in _SHAPE_OPS:
        raise ContractError('unknown shape op {}'.format(op))
    return _SHAPE_OPS[op](*args, **kwargs)


def softmax(x, axis=-1):
    """Softmax along ``axis`` computed with max subtraction."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return apply_op('softmax', [x], y, grad_fn)


def normalize(x, axes, eps=1e-5):
    """Zero-mean, unit-variance normalization over ``axes`` (population variance).

    Raises:
        `DegenerateInputError`: If a slice has zero variance and ``eps`` is 0.
    """
    axes = _axes(x, axes)
    count = int(np.prod([x.shape[a] for a in axes]))
    mean = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=axes, keepdims=True)
    if eps == 0 and np.any(var == 0):
        raise DegenerateInputError('zero variance over axes {} with eps=0'.format(axes))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def grad_fn(g):
        g_mean = g.sum(axis=axes, keepdims=True) / count
        gx_mean = (g * xhat).sum(axis=axes, keepdims=True) / count
        return (inv * (g - g_mean - xhat * gx_mean),)
    return apply_op('normalize', [x], xhat, grad_fn)


def axis_transform(x, matrix, axis):
    """Apply a constant ``(n_out, n_in)`` matrix along one axis of ``x``."""
    matrix = np.asarray(matrix, dtype=DTYPES[x.dtype])
    axis = axis % x.ndim
    if matrix.shape[1] != x.shape[axis]:
        raise ShapeError('matrix of shape {} cannot act on extent {}'.format(
            matrix.shape, x.shape[axis]))

    def grad_fn(g):
        return (np.moveaxis(np.tensordot(matrix.T, g, axes=([1], [axis])), 0, axis),)
    data = np.moveaxis(np.tensordot(matrix, x.data, axes=([1], [axis])), 0, axis)
    return apply_op('axis_transform', [x], data, grad_fn)


def backward(loss, wrt=None):
    """Reverse-mode sweep over the tape that recorded ``loss``.

    Gradients reaching a node along several paths are summed.

    Arguments:
        loss (`Tensor`): Single-element result recorded on a tape.
        wrt (`list`, optional): Tensors that must appear in the result; those not reached
            from ``loss`` get zero gradients.

    Returns:
        `GradientMap`: Gradient of ``loss`` for every reachable node.

    Raises:
        `ContractError`: If ``loss`` is not a single element or was not recorded.
    """
    if loss.size != 1:
        raise ContractError('loss must hold exactly one element, got shape {}'.format(loss.shape))
    tape = loss._tape
    if tape is None or loss.node_id is None:
        raise ContractError('loss was not recorded on a tape')

    grads = {loss.node_id: np.ones(loss.shape, dtype=DTYPES[loss.dtype])}
    for node_id in range(loss.node_id, -1, -1):
        g = grads.get(node_id)
        node = tape.nodes[node_id]
        if g is None or node.backward is None:
            continue
        for input_id, input_grad in zip(node.inputs, node.backward(g)):
            if input_id is None or input_grad is None:
                continue
            if input_id in grads:
                grads[input_id] = grads[input_id] + input_grad
            else:
                grads[input_id] = input_grad

    gradient_map = GradientMap(tape)
    for node_id, g in grads.items():
        gradient_map[node_id] = Tensor._wrap(g, loss.dtype)
    for tensor in wrt or ():
        node_id = tape.watch(tensor)
        if node_id not in gradient_map:
            gradient_map[node_id] = Tensor._wrap(np.zeros(tensor.shape), tensor.dtype)
    tape.gradient_map = gradient_map
    return gradient_map


def finite_diff_check(f, point, eps=1e-5, coordinates=None, floor=1e-8):
    """Compare tape gradients against central differences.

    Arguments:
        f (`callable`): Maps ``point`` (same structure: a `Tensor` or a mapping of names to
            tensors) to a single-element `Tensor`. Must be deterministic.
        point (`Tensor` or `dict`): Where to evaluate. f64 is recommended.
        eps (`float`, optional): Central-difference step.
        coordinates (`list`, optional): Flat indices to check for a `Tensor` point, or
            ``(name, flat index)`` pairs for a mapping. Defaults to every coordinate.
        floor (`float`, optional): Smallest denominator of the relative error; gradients
            below it are compared in absolute terms.

    Returns:
        `float`: max over coordinates of ``|analytic - numeric| / max(|analytic|, |numeric|,
        floor)``.

    Raises:
        `ContractError`: If two evaluations at the same point disagree.
    """
    named = isinstance(point, Mapping)
    items = point.items() if named else [(None, point)]
    arrays = {name: np.array(t.data) for name, t in items}
    dtypes = {name: t.dtype for name, t in items}

    def evaluate(values, tracked):
        tensors = {name: Tensor(values[name], dtypes[name], requires_grad=tracked)
                   for name in values}
        argument = tensors if named else tensors[None]
        if tracked:
            with Tape():
                result = f(argument)
        else:
            result = f(argument)
        if result.size != 1:
            raise ContractError('function must return a single element, got {}'.format(
                result.shape))
        return result, tensors

    value, tensors = evaluate(arrays, True)
    repeat, _ = evaluate(arrays, False)
    if repeat.item() != value.item():
        raise ContractError('function is not deterministic ({!r} vs {!r})'.format(
            value.item(), repeat.item()))
    grads = backward(value, wrt=list(tensors.values()))

    if coordinates is None:
        coordinates = [(name, i) for name in arrays for i in range(arrays[name].size)]
    elif not named:
        coordinates = [(None, int(i)) for i in coordinates]

    worst = 0.0
    for name, index in coordinates:
        shifted = dict(arrays)
        flat = arrays[name].reshape(-1).copy()
        flat[index] += eps
        shifted[name] = flat.reshape(arrays[name].shape)
        upper = evaluate(shifted, False)[0].item()
        flat[index] -= 2 * eps
        shifted[name] = flat.reshape(arrays[name].shape)
        lower = evaluate(shifted, False)[0].item()
        numeric = (upper - lower) / (2 * eps)
        analytic = float(grads[tensors[name]].data.reshape(-1)[index])
        error = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, error)
    return worst
