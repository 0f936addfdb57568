"""
Optimization, evaluation, checkpointing and gradient checking.
"""
# Standard libraries
import os
import sys
import csv
import struct
from collections import namedtuple
from warnings import warn

import numpy as np
import yaml

# Local imports
from .errors import (ContractError, DivergenceError, ConfigMismatchError, FormatError,
                     VersionError, TruncationError, ShapeError, DomainError,
                     DegenerateInputError)
from .layers import (ParamStore, conv3d, instance_norm3d, layer_norm, linear,
                     multi_head_attention, resize, upsample)
from .loss import segtransvae_loss, dice_loss, recon_loss, kl_loss
from .metrics import MetricsReport, binarize
from .model import ModelConfig, build_model, forward
from .data import (BatchStream, gen_synthetic, zscore_normalize, labels_to_regions,
                   region_names)
from .tensor import (Tensor, Tape, Rng, DTYPES, backward, finite_diff_check, elementwise,
                     matmul, softmax, normalize, reduce_sum, reduce_mean, concat, permute,
                     reshape, square)
from .validation import validate_config, train_schema

CHECKPOINT_MAGIC = b'SVCK'
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {'f32': 1, 'f64': 2}
_DTYPE_NAMES = {code: name for name, code in _DTYPE_CODES.items()}

# full-model gradients below this are compared in absolute terms
MODEL_GRADIENT_FLOOR = 1e-6

_TrainConfig = namedtuple('TrainConfig', sorted(train_schema))


class TrainConfig(_TrainConfig):
    """Optimizer, schedule and loop settings.

    Build instances with `TrainConfig.from_dict`; missing keys take the schema defaults.
    ``lr0`` may be 0, which leaves the parameters untouched.
    """
    __slots__ = ()

    @classmethod
    def from_dict(cls, properties=None):
        return cls(**validate_config(dict(properties or {}), train_schema))

    def to_dict(self):
        return dict(self._asdict())


class AdamState(object):
    """First and second moment estimates of Adam.

    Attributes:
        m (`dict`): Parameter name to first-moment array.
        v (`dict`): Parameter name to second-moment array.
        t (`int`): Number of updates applied so far.
    """
    def __init__(self, m=None, v=None, t=0):
        self.m = dict(m or {})
        self.v = dict(v or {})
        self.t = t

    def copy(self):
        return AdamState({k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()}, self.t)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Apply one bias-corrected Adam update in place.

    Arguments:
        params (`ParamStore`): Parameters; every tensor is replaced by its updated value.
        grads (`dict`): Parameter name to gradient array.
        state (`AdamState`): Moments, updated in place.
        lr (`float`): Step size of this update.

    Raises:
        `DivergenceError`: Naming the first parameter whose gradient is not finite. Nothing
            is updated in that case.
    """
    for name in params.names():
        if not np.all(np.isfinite(grads[name])):
            raise DivergenceError('non-finite gradient', name=name)
    state.t += 1
    correction1 = 1.0 - beta1 ** state.t
    correction2 = 1.0 - beta2 ** state.t
    for name, tensor in params.items():
        g = grads[name]
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        if lr == 0:
            continue
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        params.replace(name, Tensor(tensor.data - update, tensor.dtype, requires_grad=True))


def lr_poly(step, total_steps, lr0, power=0.9):
    """Polynomial decay ``lr0 * (1 - step / total_steps) ** power``."""
    if not 0 <= step <= total_steps:
        raise ContractError('step {} outside 0..{}'.format(step, total_steps))
    return lr0 * (1.0 - step / total_steps) ** power


def clip_gradients(grads, max_norm):
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns:
        `tuple`: The (possibly scaled) gradient dictionary and the norm before clipping.
    """
    norm = float(np.sqrt(sum(np.sum(np.square(g, dtype=np.float64)) for g in grads.values())))
    if max_norm is None or norm <= max_norm:
        return grads, norm
    warn('gradient norm {:.4g} clipped to {}'.format(norm, max_norm))
    scale = max_norm / norm
    return {name: g * g.dtype.type(scale) for name, g in grads.items()}, norm


HistoryRow = namedtuple('HistoryRow', ['step', 'dice', 'recon', 'kl', 'total', 'lr'])
HistoryRow.__doc__ = 'Loss components of one training step'

HISTORY_FIELDS = list(HistoryRow._fields)


class CsvSink(object):
    """Write history rows as ``step,dice,recon,kl,total,lr`` lines.

    Arguments:
        target (`str` or file-like): Path to create, or an open text stream.
    """
    def __init__(self, target):
        if isinstance(target, str):
            self._stream = open(target, 'w', newline='')
            self._owned = True
        else:
            self._stream = target
            self._owned = False
        self._writer = csv.writer(self._stream)
        self._writer.writerow(HISTORY_FIELDS)

    def write(self, row):
        self._writer.writerow([row.step] + [repr(float(v)) for v in row[1:]])
        self._stream.flush()

    def close(self):
        if self._owned:
            self._stream.close()


class PrintSink(object):
    """Echo every ``every``-th history row to a stream."""
    def __init__(self, stream=None, every=1):
        self.stream = stream or sys.stdout
        self.every = every

    def write(self, row):
        if row.step % self.every == 0:
            print('step {:5d}  dice {:.4f}  recon {:.4f}  kl {:.4f}  total {:.4f}  '
                  'lr {:.3g}'.format(*row), file=self.stream)

    def close(self):
        pass


Checkpoint = namedtuple('Checkpoint',
                        ['version', 'step', 'model_config', 'params', 'adam', 'rng_state'])
Checkpoint.__doc__ = 'Complete training state after a number of steps'
Checkpoint.version.__doc__ = '(`int`) Checkpoint format version'
Checkpoint.step.__doc__ = '(`int`) Number of completed training steps'
Checkpoint.model_config.__doc__ = '(`ModelConfig`) Architecture of the stored parameters'
Checkpoint.params.__doc__ = '(`ParamStore`) Model parameters'
Checkpoint.adam.__doc__ = '(`AdamState`) Optimizer moments and update count'
Checkpoint.rng_state.__doc__ = '(`dict`) State of the latent-sampling generator'

TrainResult = namedtuple('TrainResult', ['checkpoint', 'history', 'evaluations'])
TrainResult.__doc__ = 'Outcome of `train_loop`'
TrainResult.checkpoint.__doc__ = '(`Checkpoint`) State after the last step'
TrainResult.history.__doc__ = '(`list`) `HistoryRow` per step'
TrainResult.evaluations.__doc__ = '(`list`) ``(step, MetricsReport)`` pairs'


def _snapshot(step, config, params, adam, rng):
    return Checkpoint(CHECKPOINT_VERSION, step, config, params.copy(), adam.copy(), rng.state)


def train_loop(config, source, train_config, sinks=(), params=None, resume=None,
               out_dir=None, eval_samples=None, stop=None):
    """Train with Adam and polynomial learning-rate decay.

    Every step draws the batch of that step from ``source``, runs a sampled forward pass,
    differentiates the total loss, clips the global gradient norm and applies Adam.

    Arguments:
        config (`ModelConfig`): Architecture.
        source (`SampleSource`): Batches by step.
        train_config (`TrainConfig`): Optimizer and loop settings.
        sinks (`list`, optional): Objects with ``write(row)`` receiving a `HistoryRow` per step.
        params (`ParamStore`, optional): Starting parameters, built from ``config`` if omitted.
        resume (`Checkpoint`, optional): Continue from this state instead.
        out_dir (`str`, optional): Directory for ``checkpoint.svck``.
        eval_samples (`list`, optional): `VolumeSample` objects evaluated every
            ``eval_interval`` steps.
        stop (`int`, optional): Return after this many completed steps instead of
            ``total_steps``; the schedule still spans ``total_steps``.

    Returns:
        `TrainResult`: Final checkpoint, loss history and evaluations.

    Raises:
        `DivergenceError`: On a non-finite loss or gradient, carrying the last good checkpoint.
    """
    tc = train_config
    rng = Rng(tc.train_seed)
    if resume is not None:
        if resume.model_config != config:
            raise ConfigMismatchError('checkpoint was written for a different model')
        params = resume.params.copy()
        adam = resume.adam.copy()
        rng.state = resume.rng_state
        start = resume.step
    else:
        if params is None:
            params, _ = build_model(config)
        adam = AdamState()
        start = 0
    checkpoint_path = os.path.join(out_dir, 'checkpoint.svck') if out_dir else None

    last_good = _snapshot(start, config, params, adam, rng)
    history = []
    evaluations = []
    stop = tc.total_steps if stop is None else min(stop, tc.total_steps)
    stream = BatchStream(source, tc.batch_size, start, stop, tc.num_workers,
                         tc.prefetch)
    for batch in stream:
        step = batch.step
        lr = lr_poly(step, tc.total_steps, tc.lr0, tc.poly_power)
        try:
            with Tape():
                output = forward(batch.image, params, config, rng, training=True)
                losses = segtransvae_loss(output, batch.image, batch.target, tc.dice_epsilon,
                                          tc.vae_weight)
                gradient_map = backward(losses.total, wrt=params.values())
            grads = {name: gradient_map[tensor].data for name, tensor in params.items()}
            grads, _ = clip_gradients(grads, tc.clip_norm)
            adam_step(params, grads, adam, lr, tc.beta1, tc.beta2, tc.adam_eps)
        except DegenerateInputError:
            raise
        except (DivergenceError, DomainError) as err:
            raise DivergenceError('training diverged at step {}: {}'.format(step, err.args[0]),
                                  name=getattr(err, 'name', None), checkpoint=last_good)

        row = HistoryRow(step, lr=lr, **{k: v for k, v in losses.as_floats().items()})
        history.append(row)
        for sink in sinks:
            sink.write(row)

        done = step + 1
        if tc.checkpoint_interval and done % tc.checkpoint_interval == 0:
            last_good = _snapshot(done, config, params, adam, rng)
            if checkpoint_path:
                save_checkpoint(checkpoint_path, last_good)
        if eval_samples and tc.eval_interval and done % tc.eval_interval == 0:
            evaluations.append((done, evaluate(config, params, eval_samples)))

    final = _snapshot(max(stop, start), config, params, adam, rng)
    if checkpoint_path and final.step != last_good.step:
        save_checkpoint(checkpoint_path, final)
    return TrainResult(final, history, evaluations)


def evaluate(config, params, samples, threshold=0.5, scheme='nested', class_names=None):
    """Binarize the segmentation of every sample and score it against its regions.

    Arguments:
        config (`ModelConfig`): Architecture.
        params (`ParamStore`): Parameters.
        samples (`list`): `VolumeSample` objects with the configured patch size.

    Returns:
        `MetricsReport`: Per-class Dice and HD95 averaged over the samples.
    """
    class_names = class_names or region_names(scheme, config.out_channels)
    reports = []
    for sample in samples:
        if tuple(sample.size) != tuple(config.patch_size):
            raise ShapeError('sample {} has size {}, the model expects {}'.format(
                sample.id, sample.size, tuple(config.patch_size)))
        image = Tensor(zscore_normalize(sample.image)[np.newaxis], config.dtype)
        output = forward(image, params, config, training=False)
        predicted = binarize(output.segmentation.data[0], threshold, sample.spacing)
        regions = labels_to_regions(sample.label, config.out_channels, scheme)
        reference = [binarize(r, 0.5, sample.spacing) for r in regions]
        reports.append(MetricsReport.from_masks(predicted, reference, class_names))
    return MetricsReport.merge(reports)


def _pack_tensor(name, array, dtype):
    encoded = name.encode('utf-8')
    header = struct.pack('<H', len(encoded)) + encoded
    header += struct.pack('<BB', _DTYPE_CODES[dtype], array.ndim)
    header += struct.pack('<{}I'.format(array.ndim), *array.shape)
    return header + np.ascontiguousarray(array, dtype=np.dtype(DTYPES[dtype]).newbyteorder('<')
                                         ).tobytes()


def save_checkpoint(filename, checkpoint):
    """Write a checkpoint in the SVCK format.

    Layout (little-endian): magic ``SVCK``, u16 version, u32 metadata length and the YAML
    metadata (step, model configuration, Adam update count, generator state), u32 tensor
    count, then per tensor a u16-length-prefixed UTF-8 name, u8 dtype code (1 f32, 2 f64),
    u8 rank, u32 extents and the raw values. Adam moments are stored as ``adam.m.<name>`` and
    ``adam.v.<name>``.
    """
    if os.path.exists(filename):
        warn('overwriting checkpoint {}'.format(filename))
    metadata = yaml.safe_dump({
        'step': checkpoint.step,
        'model_config': checkpoint.model_config.to_dict(),
        'adam_t': checkpoint.adam.t,
        'rng_state': checkpoint.rng_state,
    }).encode('utf-8')
    dtype = checkpoint.model_config.dtype
    records = [(name, tensor.data) for name, tensor in checkpoint.params.items()]
    records += [('adam.m.' + name, a) for name, a in sorted(checkpoint.adam.m.items())]
    records += [('adam.v.' + name, a) for name, a in sorted(checkpoint.adam.v.items())]
    with open(filename, 'wb') as f:
        f.write(CHECKPOINT_MAGIC + struct.pack('<HI', checkpoint.version, len(metadata)))
        f.write(metadata)
        f.write(struct.pack('<I', len(records)))
        for name, array in records:
            f.write(_pack_tensor(name, np.asarray(array), dtype))


class _Reader(object):
    def __init__(self, data):
        self.data = data
        self.offset = 0

    def take(self, count):
        if self.offset + count > len(self.data):
            raise TruncationError('need {} bytes, {} left'.format(
                count, len(self.data) - self.offset), len(self.data))
        chunk = self.data[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(filename, expected_config=None):
    """Read an SVCK checkpoint.

    Arguments:
        filename (`str`): Path to the file.
        expected_config (`ModelConfig`, optional): Raise if the stored model differs.

    Raises:
        `FormatError`: Bad magic or record.
        `VersionError`: Unsupported version.
        `TruncationError`: File ends early.
        `ConfigMismatchError`: Stored configuration differs from ``expected_config``.
    """
    with open(filename, 'rb') as f:
        reader = _Reader(f.read())
    if reader.take(min(4, len(reader.data))) != CHECKPOINT_MAGIC:
        raise FormatError('bad magic, expected {!r}'.format(CHECKPOINT_MAGIC), 0)
    version, length = reader.unpack('<HI')
    if version != CHECKPOINT_VERSION:
        raise VersionError('unsupported checkpoint version {}'.format(version), 4)
    metadata_offset = reader.offset
    try:
        metadata = yaml.safe_load(reader.take(length).decode('utf-8'))
        config = ModelConfig.from_dict(metadata['model_config'])
    except (yaml.YAMLError, UnicodeDecodeError, KeyError, TypeError) as err:
        raise FormatError('unreadable metadata: {}'.format(err), metadata_offset)
    if expected_config is not None and expected_config != config:
        differing = sorted(k for k, v in expected_config._asdict().items()
                           if getattr(config, k) != v)
        raise ConfigMismatchError('checkpoint model differs in {}'.format(', '.join(differing)))

    params = ParamStore()
    adam = AdamState(t=metadata['adam_t'])
    count, = reader.unpack('<I')
    for _ in range(count):
        record_offset = reader.offset
        name_length, = reader.unpack('<H')
        name = reader.take(name_length).decode('utf-8')
        code, ndim = reader.unpack('<BB')
        if code not in _DTYPE_NAMES:
            raise FormatError('unknown dtype code {} for {}'.format(code, name), record_offset)
        shape = reader.unpack('<{}I'.format(ndim))
        dtype = np.dtype(DTYPES[_DTYPE_NAMES[code]]).newbyteorder('<')
        raw = reader.take(int(np.prod(shape)) * dtype.itemsize)
        array = np.frombuffer(raw, dtype).reshape(shape).astype(dtype.newbyteorder('='))
        if name.startswith('adam.m.'):
            adam.m[name[len('adam.m.'):]] = array
        elif name.startswith('adam.v.'):
            adam.v[name[len('adam.v.'):]] = array
        else:
            params.add(name, Tensor(array, _DTYPE_NAMES[code], requires_grad=True))
    if reader.offset != len(reader.data):
        raise FormatError('{} unexpected trailing bytes'.format(
            len(reader.data) - reader.offset), reader.offset)
    return Checkpoint(version, metadata['step'], config, params, adam, metadata['rng_state'])


def _gradcheck_config(**overrides):
    properties = dict(patch_size=[8, 8, 8], dtype='f64')
    properties.update(overrides)
    return ModelConfig.preset('desk', **properties)


def check_model_gradients(config=None, coordinates=20, seed=0):
    """Finite-difference check of the total loss with respect to model parameters.

    Arguments:
        config (`ModelConfig`, optional): Defaults to the desk configuration on an 8x8x8
            patch in float64.
        coordinates (`int`, optional): Randomly chosen parameter coordinates to check.
        seed (`int`, optional): Seeds the parameters, the sample and the coordinates.

    Returns:
        `float`: Worst relative error over the checked coordinates.
    """
    config = config or _gradcheck_config(seed=seed)
    params, _ = build_model(config, Rng(seed))
    # unit gains and zero shifts put normalized activations on the leaky ReLU kink
    jitter = Rng(seed + 3)
    for name, tensor in params.items():
        if name.endswith(('.gamma', '.beta')):
            params.replace(name, Tensor(tensor.data + jitter.normal(0.0, 0.1, tensor.shape),
                                        config.dtype))
    sample = gen_synthetic(seed, config.patch_size, config.in_channels, config.out_channels)
    image = Tensor(zscore_normalize(sample.image)[np.newaxis], config.dtype)
    target = labels_to_regions(sample.label, config.out_channels)[np.newaxis]

    def total(point):
        output = forward(image, ParamStore(point), config, Rng(seed + 1), training=True)
        return segtransvae_loss(output, image, target).total

    picker = Rng(seed + 2)
    names = params.names()
    chosen = []
    for _ in range(coordinates):
        name = names[int(picker.integers(0, len(names)))]
        chosen.append((name, int(picker.integers(0, params[name].size))))
    return finite_diff_check(total, dict(params.items()), coordinates=chosen,
                             floor=MODEL_GRADIENT_FLOOR)


def _elementary_cases(rng):
    def normal(*shape):
        return Tensor(rng.normal(0.0, 1.0, shape), 'f64')

    def positive(*shape):
        return Tensor(rng.uniform(0.5, 2.0, shape), 'f64')

    def summed_square(t):
        return reduce_sum(square(t))

    def weighted(t, weights):
        return reduce_sum(t * weights)

    a, b = normal(2, 3), normal(2, 3)
    c, d = positive(2, 3), normal(3, 4)
    w = normal(3, 2, 3, 3, 3)
    gamma, beta = normal(2), normal(2)
    tokens = normal(1, 3, 4)
    ln_gamma, ln_beta = normal(4), normal(4)
    proj_weight, proj_bias = normal(2, 4), normal(2)
    attention = {name: normal(4, 4) if name.endswith('weight') else normal(4)
                 for name in ('q.weight', 'q.bias', 'k.weight', 'k.bias', 'v.weight', 'v.bias',
                              'out.weight', 'out.bias')}
    mu, logvar = normal(2, 5), normal(2, 5)
    prob = Tensor(rng.uniform(0.05, 0.95, (1, 2, 2, 2, 2)), 'f64')
    target = (rng.random((1, 2, 2, 2, 2)) > 0.5).astype(np.float64)
    volume = normal(1, 2, 3, 3, 2)
    volume_weights, token_weights = normal(1, 2, 3, 3, 2), normal(1, 3, 4)
    rows, transposed, spread = normal(2, 5), normal(3, 2), normal(1, 2, 5, 2, 3)
    return [
        ('add', a, lambda x: summed_square(elementwise('add', x, b))),
        ('sub', a, lambda x: summed_square(elementwise('sub', b, x))),
        ('mul', a, lambda x: reduce_sum(elementwise('mul', x, b))),
        ('div', a, lambda x: reduce_sum(elementwise('div', x, c))),
        ('div_denominator', c, lambda x: reduce_sum(elementwise('div', a, x))),
        ('exp', a, lambda x: reduce_sum(elementwise('exp', x))),
        ('log', c, lambda x: reduce_sum(elementwise('log', x))),
        ('square', a, lambda x: reduce_sum(elementwise('square', x))),
        ('sigmoid', a, lambda x: weighted(elementwise('sigmoid', x), b)),
        ('relu', a, lambda x: weighted(elementwise('relu', x), b)),
        ('leaky_relu', a, lambda x: weighted(elementwise('leaky_relu', x), b)),
        ('gelu', a, lambda x: weighted(elementwise('gelu', x), b)),
        ('matmul', a, lambda x: summed_square(matmul(x, d))),
        ('softmax', a, lambda x: weighted(softmax(x, -1), b)),
        ('normalize', rows, lambda x: weighted(normalize(x, (1,)), mu)),
        ('reduce_mean', a, lambda x: reduce_mean(x * x)),
        ('concat', a, lambda x: summed_square(concat([x, b], 0))),
        ('permute', a, lambda x: weighted(permute(x, (1, 0)), transposed)),
        ('reshape', a, lambda x: weighted(reshape(x, (3, 2)), transposed)),
        ('conv3d', volume, lambda x: summed_square(conv3d(x, w, None, 1, 1))),
        ('conv3d_weight', w, lambda x: summed_square(conv3d(volume, x, None, 2, 1))),
        ('instance_norm3d', volume,
         lambda x: weighted(instance_norm3d(x, gamma, beta), volume_weights)),
        ('layer_norm', tokens,
         lambda x: weighted(layer_norm(x, ln_gamma, ln_beta), token_weights)),
        ('linear', tokens, lambda x: summed_square(linear(x, proj_weight, proj_bias))),
        ('attention', tokens, lambda x: summed_square(multi_head_attention(x, attention, 2))),
        ('resize', volume, lambda x: weighted(resize(x, (5, 2, 3)), spread)),
        ('upsample', volume, lambda x: summed_square(upsample(x))),
        ('dice_loss', prob, lambda x: dice_loss(x, target)),
        ('recon_loss', a, lambda x: recon_loss(x, b)),
        ('kl_loss', mu, lambda x: kl_loss(x, logvar, 10)),
        ('kl_loss_logvar', logvar, lambda x: kl_loss(mu, x, 10)),
    ]


def check_elementary_gradients(seed=0, instances=20):
    """Finite-difference check of every differentiable operation on random f64 inputs.

    Returns:
        `dict`: Operation name to the worst relative error over ``instances`` draws.
    """
    worst = {}
    for instance in range(instances):
        for name, point, f in _elementary_cases(Rng(seed + instance)):
            error = finite_diff_check(f, point)
            worst[name] = max(worst.get(name, 0.0), error)
    return worst
