"""
Synthetic volumes, preprocessing, patch sampling and the SVV1 volume file format.
"""
import os
import struct
from collections import namedtuple, deque
from concurrent.futures import ThreadPoolExecutor
from glob import glob
from warnings import warn

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import (ShapeError, DomainError, DegenerateInputError, ContractError, FormatError,
                     VersionError, TruncationError)
from .tensor import Rng, Tensor

NOISE_STD = 0.1
"""`float`: Standard deviation of the Gaussian noise added to synthetic images"""

SVV_MAGIC = b'SVV1'
SVV_VERSION = 1
_SVV_HEADER = struct.Struct('<4sBBBB3I3fI')
_DTYPE_CODES = {1: np.dtype('<f4'), 2: np.dtype('<f8')}

_VolumeSample = namedtuple('VolumeSample', ['image', 'label', 'spacing', 'id', 'num_classes'])


class VolumeSample(_VolumeSample):
    """A multi-channel volume and its integer label map.

    Attributes:
        image (`~numpy.ndarray`): ``float32`` or ``float64`` intensities ``[C, H, W, D]``.
        label (`~numpy.ndarray`): ``uint8`` labels ``[H, W, D]`` in ``0..num_classes``.
        spacing (`tuple`): Voxel size in millimetres along each axis.
        id (`str`): Sample identifier.
        num_classes (`int`): Number of foreground classes.
    """
    __slots__ = ()

    def __new__(cls, image, label, spacing=(1.0, 1.0, 1.0), id='sample', num_classes=3):
        image = np.asarray(image)
        label = np.asarray(label)
        if image.ndim != 4 or image.shape[1:] != label.shape:
            raise ShapeError('image {} and label {} do not share a [H, W, D] grid'.format(
                image.shape, label.shape))
        if image.dtype not in (np.float32, np.float64):
            image = image.astype(np.float64)
        if label.size and (label.min() < 0 or label.max() > num_classes):
            raise DomainError('labels must lie in 0..{}'.format(num_classes))
        return super(VolumeSample, cls).__new__(
            cls, image, label.astype(np.uint8), tuple(float(s) for s in spacing), str(id),
            int(num_classes))

    @property
    def size(self):
        return self.label.shape

    def replace(self, **fields):
        return VolumeSample(**dict(self._asdict(), **fields))


def _ellipsoid(grid, centre, radii):
    return sum(((g - c) / r) ** 2 for g, c, r in zip(grid, centre, radii)) <= 1.0


def gen_synthetic(seed, size=(16, 16, 16), channels=4, num_classes=3, spacing=(1.0, 1.0, 1.0)):
    """Generate a volume with nested ellipsoidal regions.

    Class 1 is a union of one to three ellipsoids; every further class is a union of smaller
    ellipsoids centred inside the previous class and clipped to it, so the regions nest like
    whole tumour, tumour core and enhancing tumour. Each channel maps every class to its own
    intensity, is smoothed and receives Gaussian noise with standard deviation `NOISE_STD`.

    Arguments:
        seed (`int`): Generator seed; the result is a pure function of the arguments.
        size (`tuple`): Extents ``(H, W, D)``, each at least 8.

    Returns:
        `VolumeSample`: With at least one voxel of every class.
    """
    size = tuple(int(s) for s in size)
    if len(size) != 3 or min(size) < 8:
        raise ShapeError('synthetic volumes need three extents >= 8, got {}'.format(size))
    rng = Rng(seed)
    grid = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in size], indexing='ij')
    extents = np.array(size, dtype=np.float64)

    label = np.zeros(size, dtype=np.uint8)
    parent = np.ones(size, dtype=bool)
    for cls in range(1, num_classes + 1):
        region = np.zeros(size, dtype=bool)
        candidates = np.argwhere(parent)
        scale = (0.15, 0.3) if cls == 1 else (0.08, 0.18)
        for _ in range(int(rng.integers(1, 4))):
            if cls == 1:
                centre = rng.uniform(0.25, 0.75, (3,)) * (extents - 1)
                centre = np.round(centre)
            else:
                centre = candidates[int(rng.integers(0, len(candidates)))].astype(np.float64)
            radii = np.maximum(rng.uniform(scale[0], scale[1], (3,)) * extents, 1.0)
            region |= _ellipsoid(grid, centre, radii)
        region &= parent
        if cls > 1 and region.sum() == len(candidates) > 1:
            # keep one voxel of the enclosing class visible
            region[tuple(candidates[-1])] = False
        label[region] = cls
        parent = region

    intensities = np.zeros((channels, num_classes + 1))
    intensities[:, 1:] = (np.arange(1, num_classes + 1)
                          * rng.uniform(0.8, 1.2, (channels, num_classes)))
    image = intensities[:, label]
    image = np.stack([gaussian_filter(channel, sigma=0.5) for channel in image])
    image = image + rng.normal(0.0, NOISE_STD, image.shape)
    return VolumeSample(image.astype(np.float32), label, spacing,
                        'synthetic-{:05d}'.format(seed), num_classes)


def zscore_normalize(image):
    """Normalize every channel of ``[C, ...]`` to zero mean and unit population std.

    Raises:
        `DegenerateInputError`: If a channel is constant.
    """
    image = np.asarray(image)
    values = image.astype(np.float64).reshape(image.shape[0], -1)
    mean = values.mean(axis=1, keepdims=True)
    std = values.std(axis=1, keepdims=True)
    if np.any(std == 0):
        raise DegenerateInputError('channel {} has zero variance'.format(
            int(np.flatnonzero(std[:, 0] == 0)[0])))
    return ((values - mean) / std).reshape(image.shape).astype(image.dtype)


def _crop_corner(size, patch, rng):
    return tuple(int(rng.integers(0, s - p + 1)) for s, p in zip(size, patch))


def _crop(sample, corner, patch):
    window = tuple(slice(c, c + p) for c, p in zip(corner, patch))
    return sample.replace(image=sample.image[(slice(None),) + window], label=sample.label[window])


def random_crop(sample, patch, rng):
    """Crop a random ``patch`` from image and label at the same corner.

    When the first crop holds no foreground the corner is re-drawn once with probability 0.5.

    Raises:
        `ShapeError`: If ``patch`` exceeds the volume along any axis.
    """
    patch = tuple(int(p) for p in patch)
    if any(p > s for p, s in zip(patch, sample.size)) or len(patch) != 3:
        raise ShapeError('patch {} does not fit in volume {}'.format(patch, sample.size))
    crop = _crop(sample, _crop_corner(sample.size, patch, rng), patch)
    if not crop.label.any() and rng.random() < 0.5:
        crop = _crop(sample, _crop_corner(sample.size, patch, rng), patch)
        if not crop.label.any() and sample.label.any():
            warn('foreground re-draw for {} produced an empty patch'.format(sample.id))
    return crop


def random_flip(sample, rng, p=0.5):
    """Flip image and label together along each spatial axis with probability ``p``."""
    image, label = sample.image, sample.label
    for axis in range(3):
        if rng.random() < p:
            image = np.flip(image, axis + 1)
            label = np.flip(label, axis)
    return sample.replace(image=np.ascontiguousarray(image), label=np.ascontiguousarray(label))


_REGION_SCHEMES = {
    'brats': ((0, 1, 2, 4), [(4,), (1, 4), (1, 2, 4)], ['ET', 'TC', 'WT']),
    'kits': ((0, 1, 2), [(1, 2), (2,)], ['kidney', 'tumor']),
}


def region_names(scheme='nested', num_classes=3):
    """Channel names produced by `labels_to_regions` for a scheme."""
    if scheme == 'nested':
        return ['region{}'.format(c + 1) for c in range(num_classes)]
    if scheme not in _REGION_SCHEMES:
        raise ContractError('unknown region scheme {}'.format(scheme))
    return list(_REGION_SCHEMES[scheme][2])


def labels_to_regions(label, num_classes=3, scheme='nested'):
    """Convert an integer label map to binary region channels ``[Ch, H, W, D]``.

    Schemes:

    * ``nested``: channel ``c`` is ``label >= c + 1``
    * ``brats``: raw labels 1 (necrosis), 2 (edema), 4 (enhancing) give ET, TC and WT
    * ``kits``: labels 1 (kidney) and 2 (tumour) give kidney-and-tumour and tumour

    Raises:
        `DomainError`: For label values the scheme does not know.
    """
    label = np.asarray(label)
    if scheme == 'nested':
        if label.min() < 0 or label.max() > num_classes:
            raise DomainError('labels must lie in 0..{}'.format(num_classes))
        return np.stack([label >= c + 1 for c in range(num_classes)]).astype(np.uint8)
    if scheme not in _REGION_SCHEMES:
        raise ContractError('unknown region scheme {}'.format(scheme))
    allowed, regions, _ = _REGION_SCHEMES[scheme]
    unknown = np.setdiff1d(np.unique(label), allowed)
    if unknown.size:
        raise DomainError('label values {} are not used by the {} scheme'.format(
            unknown.tolist(), scheme))
    return np.stack([np.isin(label, region) for region in regions]).astype(np.uint8)


def save_volume(filename, sample):
    """Write ``sample`` in the SVV1 format.

    Layout (little-endian): magic ``SVV1``, u8 version, u8 dtype code (1 f32, 2 f64),
    u8 channels, u8 reserved, three u32 extents, three f32 spacings in mm, u32 class count,
    then the image values channel-major row-major and one byte per label voxel. Spacings are
    rounded to float32.
    """
    image = sample.image
    code = 1 if image.dtype == np.float32 else 2
    channels = image.shape[0]
    if channels > 255:
        raise ContractError('SVV1 holds at most 255 channels, got {}'.format(channels))
    header = _SVV_HEADER.pack(SVV_MAGIC, SVV_VERSION, code, channels, 0, *sample.size,
                              *sample.spacing, sample.num_classes)
    with open(filename, 'wb') as f:
        f.write(header)
        f.write(np.ascontiguousarray(image, dtype=_DTYPE_CODES[code]).tobytes())
        f.write(np.ascontiguousarray(sample.label, dtype=np.uint8).tobytes())


def load_volume(filename):
    """Read an SVV1 file; the sample id is the file name without its extension.

    Raises:
        `FormatError`: Bad magic, dtype code or reserved byte, or trailing bytes.
        `VersionError`: Unsupported version.
        `TruncationError`: File shorter than its header declares.
    """
    with open(filename, 'rb') as f:
        data = f.read()
    if data[:4] != SVV_MAGIC[:len(data)]:
        raise FormatError('bad magic {!r}, expected {!r}'.format(data[:4], SVV_MAGIC), 0)
    if len(data) < _SVV_HEADER.size:
        raise TruncationError('header needs {} bytes, file has {}'.format(
            _SVV_HEADER.size, len(data)), len(data))
    (_, version, code, channels, reserved, h, w, d, sx, sy, sz,
     num_classes) = _SVV_HEADER.unpack_from(data)
    if version != SVV_VERSION:
        raise VersionError('unsupported version {}'.format(version), 4)
    if code not in _DTYPE_CODES:
        raise FormatError('unknown dtype code {}'.format(code), 5)
    if reserved != 0:
        raise FormatError('reserved byte is {}, expected 0'.format(reserved), 7)
    dtype = _DTYPE_CODES[code]
    voxels = h * w * d
    image_end = _SVV_HEADER.size + channels * voxels * dtype.itemsize
    end = image_end + voxels
    if len(data) < end:
        raise TruncationError('payload needs {} bytes, file has {}'.format(end, len(data)),
                              len(data))
    if len(data) > end:
        raise FormatError('{} unexpected trailing bytes'.format(len(data) - end), end)
    image = np.frombuffer(data, dtype, channels * voxels, _SVV_HEADER.size)
    label = np.frombuffer(data, np.uint8, voxels, image_end)
    if label.size and label.max() > num_classes:
        raise FormatError('label {} exceeds the class count {}'.format(label.max(), num_classes),
                          image_end + int(np.argmax(label > num_classes)))
    image = image.reshape((channels, h, w, d)).astype(dtype.newbyteorder('='))
    name = os.path.splitext(os.path.basename(filename))[0]
    return VolumeSample(image, label.reshape((h, w, d)).copy(), (sx, sy, sz), name, num_classes)


def list_volumes(directory):
    """Sorted paths of the ``*.svv`` files in ``directory``."""
    return sorted(glob(os.path.join(directory, '*.svv')))


def load_dataset(directory):
    """Load every volume of ``directory`` in file-name order."""
    paths = list_volumes(directory)
    if not paths:
        raise FileNotFoundError('no .svv volumes in {}'.format(directory))
    return [load_volume(path) for path in paths]


Batch = namedtuple('Batch', ['step', 'image', 'target', 'ids'])
Batch.__doc__ = 'One training batch'
Batch.step.__doc__ = '(`int`) Training step the batch belongs to'
Batch.image.__doc__ = '(`Tensor`) Normalized patches [B, C, h, w, d]'
Batch.target.__doc__ = '(`~numpy.ndarray`) Region masks [B, Ch, h, w, d]'
Batch.ids.__doc__ = '(`list`) Identifiers of the source volumes'


class SampleSource(object):
    """Deterministic patch batches drawn from a list of volumes.

    The batch of step ``s`` only depends on ``s``: its ``j``-th patch comes from volume
    ``(s * batch_size + j) mod len(samples)`` cropped (and optionally flipped) with
    ``Rng(seed + s * batch_size + j)``. Volumes are z-score normalized once on construction.

    Arguments:
        samples (`list`): `VolumeSample` objects.
        patch_size (`tuple`): Crop extents.
        num_classes (`int`, optional): Region channels produced per patch.
        scheme (`str`, optional): Region scheme passed to `labels_to_regions`.
        seed (`int`, optional): Base seed of the crop generators.
        augment (`bool`, optional): Apply `random_flip` after cropping.
        dtype (`str`, optional): Dtype of the image tensors.
    """
    def __init__(self, samples, patch_size, num_classes=3, scheme='nested', seed=0,
                 augment=False, dtype='f32'):
        if not samples:
            raise ContractError('a sample source needs at least one volume')
        self.samples = [s.replace(image=zscore_normalize(s.image)) for s in samples]
        self.patch_size = tuple(patch_size)
        self.num_classes = num_classes
        self.scheme = scheme
        self.seed = seed
        self.augment = augment
        self.dtype = dtype

    def __len__(self):
        return len(self.samples)

    def patch(self, index):
        """Crop for global patch ``index`` (``step * batch_size + j``)."""
        rng = Rng(self.seed + index)
        crop = random_crop(self.samples[index % len(self.samples)], self.patch_size, rng)
        if self.augment:
            crop = random_flip(crop, rng)
        return crop

    def batch(self, step, batch_size=1):
        crops = [self.patch(step * batch_size + j) for j in range(batch_size)]
        image = Tensor(np.stack([c.image for c in crops]), self.dtype)
        target = np.stack([labels_to_regions(c.label, self.num_classes, self.scheme)
                           for c in crops])
        return Batch(step, image, target, [c.id for c in crops])


class BatchStream(object):
    """Iterate the batches of steps ``start .. stop - 1`` in order.

    With ``num_workers > 0`` batches are prepared on worker threads; at most ``prefetch``
    batches are in flight. The sequence does not depend on the worker count.
    """
    def __init__(self, source, batch_size, start, stop, num_workers=0, prefetch=4):
        self.source = source
        self.batch_size = batch_size
        self.start = start
        self.stop = stop
        self.num_workers = num_workers
        self.prefetch = max(1, prefetch)

    def __iter__(self):
        steps = iter(range(self.start, self.stop))
        if self.num_workers < 1:
            for step in steps:
                yield self.source.batch(step, self.batch_size)
            return
        with ThreadPoolExecutor(max_workers=self.num_workers) as pool:
            pending = deque()
            for step in steps:
                pending.append(pool.submit(self.source.batch, step, self.batch_size))
                if len(pending) >= self.prefetch:
                    yield pending.popleft().result()
            while pending:
                yield pending.popleft().result()
