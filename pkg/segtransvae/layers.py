"""
Parameterized neural layers built on `segtransvae.tensor`.

Volumes use the layout ``[batch, channels, H, W, D]``. Layers are plain functions of their
input and parameter tensors; parameters live in a `ParamStore` under dot-separated names.
"""
# Standard libraries
from collections import namedtuple
from concurrent.futures import ThreadPoolExecutor
from itertools import product

import numpy as np

# Local imports
from .errors import ShapeError, ConfigError, DegenerateInputError
from .tensor import (Tensor, apply_op, axis_transform, normalize, matmul, permute, reshape,
                     softmax, leaky_relu, relu, gelu, get_num_threads)

NORM_EPS = 1e-5
"""`float`: Epsilon of instance and layer normalization"""


class ParamStore(object):
    """Named parameter tensors.

    Names are unique dot-separated paths, every tensor requires gradients, and iteration
    is sorted by name.

    Arguments:
        tensors (`dict`, optional): Initial name to `Tensor` mapping.
    """
    def __init__(self, tensors=None):
        self._tensors = {}
        for name, tensor in (tensors or {}).items():
            self.add(name, tensor)

    def add(self, name, tensor):
        """Add a new parameter; the name must not exist yet."""
        if name in self._tensors:
            raise ConfigError('duplicate parameter name {}'.format(name))
        self._tensors[name] = self._check(name, tensor)

    def replace(self, name, tensor):
        """Swap the tensor stored under an existing name."""
        if name not in self._tensors:
            raise KeyError(name)
        if tensor.shape != self._tensors[name].shape:
            raise ShapeError('parameter {} has shape {}, got {}'.format(
                name, self._tensors[name].shape, tensor.shape))
        self._tensors[name] = self._check(name, tensor)

    @staticmethod
    def _check(name, tensor):
        if not tensor.requires_grad:
            tensor = tensor.detach(requires_grad=True)
        return tensor

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def __iter__(self):
        return iter(self.names())

    def names(self):
        return sorted(self._tensors)

    def items(self):
        return [(name, self._tensors[name]) for name in self.names()]

    def values(self):
        return [self._tensors[name] for name in self.names()]

    def count(self):
        """Total number of scalar parameters."""
        return sum(t.size for t in self._tensors.values())

    def scope(self, prefix):
        """View resolving names relative to ``prefix``."""
        return ParamScope(self, prefix)

    def copy(self):
        return ParamStore({name: t.detach(requires_grad=True) for name, t in self.items()})


class ParamScope(object):
    """Prefix view on a `ParamStore`."""
    def __init__(self, store, prefix):
        self.store = store
        self.prefix = prefix

    def __getitem__(self, name):
        return self.store[self.prefix + '.' + name]

    def __contains__(self, name):
        return (self.prefix + '.' + name) in self.store

    def scope(self, prefix):
        return ParamScope(self.store, self.prefix + '.' + prefix)


LayerSpec = namedtuple(
    'LayerSpec',
    ['name', 'kind', 'in_channels', 'out_channels', 'kernel_size', 'stride', 'bias',
     'out_voxels', 'heads', 'negative_slope']
)
LayerSpec.__new__.__defaults__ = (1, 1, True, 1, 1, 0.01)
LayerSpec.__doc__ = 'Hyperparameters of one parameterized layer'
LayerSpec.name.__doc__ = '(`str`) Parameter prefix of the layer'
LayerSpec.kind.__doc__ = """\
(`str`) One of:

* conv
* linear
* instance_norm
* layer_norm
* position_embedding
* attention
"""
LayerSpec.in_channels.__doc__ = '(`int`) Input channels or features'
LayerSpec.out_channels.__doc__ = '(`int`) Output channels or features'
LayerSpec.kernel_size.__doc__ = '(`int`) Cubic kernel extent for convolutions'
LayerSpec.stride.__doc__ = '(`int`) Convolution stride'
LayerSpec.bias.__doc__ = '(`bool`) Whether the layer has a bias vector'
LayerSpec.out_voxels.__doc__ = '(`int`) Output voxels (convolutions) or tokens per sample'
LayerSpec.heads.__doc__ = '(`int`) Attention heads'
LayerSpec.negative_slope.__doc__ = '(`float`) Leaky ReLU slope of the following activation'


def check_layer_spec(spec):
    """Raise `ConfigError` unless all extents are positive and heads divide the width."""
    for field in ('in_channels', 'out_channels', 'kernel_size', 'stride', 'out_voxels', 'heads'):
        if getattr(spec, field) < 1:
            raise ConfigError('{}: {} must be positive, got {}'.format(
                spec.name, field, getattr(spec, field)))
    if spec.kind == 'attention' and spec.in_channels % spec.heads:
        raise ConfigError('{}: width {} is not divisible by {} heads'.format(
            spec.name, spec.in_channels, spec.heads))


def layer_parameter_count(spec):
    """Closed-form parameter count of a layer."""
    if spec.kind == 'conv':
        weights = spec.out_channels * spec.in_channels * spec.kernel_size ** 3
    elif spec.kind == 'linear':
        weights = spec.out_channels * spec.in_channels
    elif spec.kind in ('instance_norm', 'layer_norm'):
        return 2 * spec.out_channels
    elif spec.kind == 'position_embedding':
        return spec.out_voxels * spec.out_channels
    else:
        return 0
    return weights + (spec.out_channels if spec.bias else 0)


def layer_flops(spec):
    """Forward FLOPs of a layer for one sample; a multiply-accumulate counts as 2.

    Only convolutions, linear maps and the attention score product are counted; the
    attention entry is ``2 T^2 d`` for ``T`` tokens of width ``d``. Its projections are
    separate linear entries.
    """
    if spec.kind == 'conv':
        return 2 * spec.out_channels * spec.in_channels * spec.kernel_size ** 3 * spec.out_voxels
    if spec.kind == 'linear':
        return 2 * spec.in_channels * spec.out_channels * spec.out_voxels
    if spec.kind == 'attention':
        return 2 * spec.out_voxels ** 2 * spec.in_channels
    return 0


def init_layer(store, spec, rng, dtype):
    """Create the parameters of ``spec`` in ``store``.

    Convolutions and linear maps draw weights and biases from U(-1/sqrt(fan_in),
    1/sqrt(fan_in)); norms start at gamma = 1, beta = 0; position embeddings are N(0, 0.02).
    """
    check_layer_spec(spec)
    name = spec.name
    if spec.kind in ('conv', 'linear'):
        if spec.kind == 'conv':
            shape = (spec.out_channels, spec.in_channels) + (spec.kernel_size,) * 3
        else:
            shape = (spec.out_channels, spec.in_channels)
        bound = 1.0 / np.sqrt(np.prod(shape[1:]))
        store.add(name + '.weight', Tensor(rng.uniform(-bound, bound, shape), dtype))
        if spec.bias:
            store.add(name + '.bias',
                      Tensor(rng.uniform(-bound, bound, (spec.out_channels,)), dtype))
    elif spec.kind in ('instance_norm', 'layer_norm'):
        store.add(name + '.gamma', Tensor(np.ones(spec.out_channels), dtype))
        store.add(name + '.beta', Tensor(np.zeros(spec.out_channels), dtype))
    elif spec.kind == 'position_embedding':
        store.add(name + '.weight',
                  Tensor(rng.normal(0.0, 0.02, (spec.out_voxels, spec.out_channels)), dtype))


def _conv_output_extent(extent, kernel, stride, padding):
    return (extent + 2 * padding - kernel) // stride + 1


def _conv_forward(xp, weight, stride, grid):
    """im2col cross-correlation of an already padded batch."""
    n, cin = xp.shape[:2]
    k = weight.shape[2]
    cols = np.empty((n, cin, k, k, k) + grid, dtype=xp.dtype)
    for a, b, c in product(range(k), repeat=3):
        cols[:, :, a, b, c] = xp[:, :,
                                 a:a + stride * grid[0]:stride,
                                 b:b + stride * grid[1]:stride,
                                 c:c + stride * grid[2]:stride]
    out = np.tensordot(weight, cols, axes=([1, 2, 3, 4], [1, 2, 3, 4]))
    return np.moveaxis(out, 0, 1), cols


def conv3d(x, weight, bias=None, stride=1, padding=0):
    """3D cross-correlation (no kernel flip) with zero padding.

    Arguments:
        x (`Tensor`): Input ``[N, Cin, H, W, D]``.
        weight (`Tensor`): Kernel ``[Cout, Cin, k, k, k]``.
        bias (`Tensor`, optional): ``[Cout]``.
        stride (`int`, optional): Step in every spatial axis.
        padding (`int`, optional): Zeros added on both sides of every spatial axis.

    Returns:
        `Tensor`: ``[N, Cout, H', W', D']`` with ``H' = (H + 2 padding - k) // stride + 1``.

    Raises:
        `ShapeError`: On channel mismatch or a kernel larger than the padded input.
    """
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError('conv3d needs rank-5 input and weight, got {} and {}'.format(
            x.shape, weight.shape))
    if x.shape[1] != weight.shape[1]:
        raise ShapeError('conv3d input has {} channels, weight expects {}'.format(
            x.shape[1], weight.shape[1]))
    k = weight.shape[2]
    if any(s + 2 * padding < k for s in x.shape[2:]):
        raise ShapeError('kernel {} larger than padded input {}'.format(k, x.shape[2:]))
    grid = tuple(_conv_output_extent(s, k, stride, padding) for s in x.shape[2:])

    widths = ((0, 0), (0, 0)) + ((padding, padding),) * 3
    xp = np.pad(x.data, widths)
    threads = min(get_num_threads(), x.shape[0])
    if threads > 1:
        chunks = np.array_split(np.arange(x.shape[0]), threads)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(
                lambda idx: _conv_forward(xp[idx], weight.data, stride, grid), chunks))
        out = np.concatenate([p[0] for p in parts])
        cols = np.concatenate([p[1] for p in parts])
    else:
        out, cols = _conv_forward(xp, weight.data, stride, grid)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1, 1)

    def grad_fn(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3, 4], [0, 5, 6, 7]))
        gcols = np.tensordot(weight.data, g, axes=([0], [1]))
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for a, b, c in product(range(k), repeat=3):
            gxp[:, :,
                a:a + stride * grid[0]:stride,
                b:b + stride * grid[1]:stride,
                c:c + stride * grid[2]:stride] += np.moveaxis(gcols[:, a, b, c], 0, 1)
        gx = gxp[:, :,
                 padding:padding + x.shape[2],
                 padding:padding + x.shape[3],
                 padding:padding + x.shape[4]]
        grads = (gx, gw)
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3, 4)),)
        return grads
    inputs = [x, weight] + ([bias] if bias is not None else [])
    return apply_op('conv3d', inputs, out, grad_fn)


def interpolation_matrix(n_in, n_out, mode):
    """``(n_out, n_in)`` resampling matrix along one axis.

    ``nearest`` picks source index ``floor(o * n_in / n_out)``. ``trilinear`` (per axis:
    linear) uses the half-pixel, align-corners-false convention: source coordinate
    ``(o + 0.5) * n_in / n_out - 0.5`` clamped at 0, interpolated between its two
    neighbouring samples with the upper index clamped to ``n_in - 1``.
    """
    matrix = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        if mode == 'nearest':
            matrix[o, min(int(np.floor(o * scale)), n_in - 1)] = 1.0
        elif mode == 'trilinear':
            src = max((o + 0.5) * scale - 0.5, 0.0)
            i0 = min(int(np.floor(src)), n_in - 1)
            i1 = min(i0 + 1, n_in - 1)
            w1 = src - i0
            matrix[o, i0] += 1.0 - w1
            matrix[o, i1] += w1
        else:
            raise ConfigError('unknown interpolation mode {}'.format(mode))
    return matrix


def resize(x, grid, mode='trilinear'):
    """Separable resampling of the spatial axes of ``x`` to ``grid``."""
    for axis, (n_in, n_out) in enumerate(zip(x.shape[2:], grid), start=2):
        if n_in != n_out:
            x = axis_transform(x, interpolation_matrix(n_in, n_out, mode), axis)
    return x


def upsample(x, mode='trilinear', factor=2):
    """Double every spatial extent of ``x``; only ``factor=2`` is supported."""
    if factor != 2:
        raise ConfigError('upsample supports factor 2 only, got {}'.format(factor))
    return resize(x, tuple(2 * s for s in x.shape[2:]), mode)


def _affine(xhat, gamma, beta, shape):
    return xhat * reshape(gamma, shape) + reshape(beta, shape)


def instance_norm3d(x, gamma, beta, eps=NORM_EPS):
    """Per-sample, per-channel normalization over the voxels, then a channel affine map.

    Raises:
        `DegenerateInputError`: If the volume has a single voxel.
    """
    if int(np.prod(x.shape[2:])) < 2:
        raise DegenerateInputError('instance norm over a single voxel, shape {}'.format(x.shape))
    xhat = normalize(x, (2, 3, 4), eps)
    return _affine(xhat, gamma, beta, (1, -1, 1, 1, 1))


def channel_norm3d(x, gamma, beta, eps=NORM_EPS):
    """Per-voxel normalization across channels, then a channel affine map.

    Stands in for `instance_norm3d` on volumes reduced to a single voxel.
    """
    if x.shape[1] < 2:
        raise DegenerateInputError('channel norm over a single channel, shape {}'.format(x.shape))
    xhat = normalize(x, (1,), eps)
    return _affine(xhat, gamma, beta, (1, -1, 1, 1, 1))


def layer_norm(x, gamma, beta, eps=NORM_EPS):
    """Normalization over the last axis of every token, then an affine map."""
    if x.shape[-1] < 2:
        raise ShapeError('layer norm needs a last extent >= 2, got {}'.format(x.shape))
    xhat = normalize(x, (-1,), eps)
    return _affine(xhat, gamma, beta, (1,) * (x.ndim - 1) + (-1,))


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` over the last axis."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError('linear expects {} input features, got {}'.format(
            weight.shape[1], x.shape[-1]))
    y = matmul(x, permute(weight, (1, 0)))
    if bias is not None:
        y = y + reshape(bias, (1,) * (x.ndim - 1) + (-1,))
    return y


def multi_head_attention(x, params, heads):
    """Scaled dot-product self-attention with ``heads`` heads.

    Arguments:
        x (`Tensor`): Tokens ``[N, T, d]``.
        params (`ParamScope`): Holds ``q``, ``k``, ``v`` and ``out`` linear layers.
        heads (`int`): Number of heads; must divide ``d``.

    Returns:
        `Tensor`: ``[N, T, d]``.
    """
    n, tokens, width = x.shape
    if width % heads:
        raise ConfigError('width {} is not divisible by {} heads'.format(width, heads))
    head_width = width // heads

    def split(t):
        return permute(reshape(t, (n, tokens, heads, head_width)), (0, 2, 1, 3))

    q = split(linear(x, params['q.weight'], params['q.bias']))
    k = split(linear(x, params['k.weight'], params['k.bias']))
    v = split(linear(x, params['v.weight'], params['v.bias']))
    scores = matmul(q, permute(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(head_width))
    attended = matmul(softmax(scores, -1), v)
    merged = reshape(permute(attended, (0, 2, 1, 3)), (n, tokens, width))
    return linear(merged, params['out.weight'], params['out.bias'])


_ACTIVATIONS = {
    'gelu': gelu,
    'relu': relu,
    'leaky_relu': leaky_relu,
}


def feed_forward(x, params, activation='gelu'):
    """Tokenwise ``linear(d -> m) -> activation -> linear(m -> d)``."""
    if activation not in _ACTIVATIONS:
        raise ConfigError('unknown activation {}'.format(activation))
    hidden = _ACTIVATIONS[activation](linear(x, params['fc1.weight'], params['fc1.bias']))
    return linear(hidden, params['fc2.weight'], params['fc2.bias'])
