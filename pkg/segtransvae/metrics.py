"""
Evaluation metrics on binarized predictions: hard Dice score and 95th-percentile Hausdorff
distance, plus a per-class report.
"""
import csv
from collections import namedtuple
from warnings import warn

import numpy as np
from scipy.ndimage import binary_erosion, distance_transform_edt, generate_binary_structure

from .errors import ShapeError, DomainError, ContractError
from .tensor import Tensor

UNDEFINED = 'undefined'
"""`str`: Written in place of an HD95 value when either mask is empty"""

_FACE_NEIGHBOURS = generate_binary_structure(3, 1)

_BinaryMask = namedtuple('BinaryMask', ['values', 'spacing'])


class BinaryMask(_BinaryMask):
    """A 3-D binary mask with its voxel spacing.

    Attributes:
        values (`~numpy.ndarray`): ``uint8`` array ``[H, W, D]`` holding 0 and 1.
        spacing (`tuple`): Voxel size along each axis in millimetres.
    """
    __slots__ = ()

    def __new__(cls, values, spacing=(1.0, 1.0, 1.0)):
        values = np.asarray(values)
        if values.ndim != 3:
            raise ShapeError('masks are 3-D, got shape {}'.format(values.shape))
        if not np.all(np.isin(values, (0, 1))):
            raise DomainError('mask values must be 0 or 1')
        spacing = tuple(float(s) for s in spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise DomainError('spacing must hold three positive sizes, got {}'.format(spacing))
        return super(BinaryMask, cls).__new__(cls, values.astype(np.uint8), spacing)

    @property
    def shape(self):
        return self.values.shape

    def count(self):
        return int(self.values.sum())


def binarize(prob, threshold=0.5, spacing=(1.0, 1.0, 1.0)):
    """Threshold probabilities with a strict ``prob > threshold``.

    Arguments:
        prob (`Tensor` or `~numpy.ndarray`): ``[H, W, D]`` or ``[Ch, H, W, D]`` values in [0, 1].
        threshold (`float`, optional): Cut-off; values equal to it map to 0.
        spacing (`tuple`, optional): Voxel size in millimetres.

    Returns:
        `BinaryMask` for a 3-D input, otherwise a `list` with one mask per channel.
    """
    values = prob.data if isinstance(prob, Tensor) else np.asarray(prob)
    if np.any(values < 0) or np.any(values > 1):
        raise DomainError('probabilities must lie in [0, 1]')
    hard = (values > threshold).astype(np.uint8)
    if hard.ndim == 3:
        return BinaryMask(hard, spacing)
    if hard.ndim == 4:
        return [BinaryMask(channel, spacing) for channel in hard]
    raise ShapeError('binarize expects 3-D or 4-D input, got shape {}'.format(values.shape))


def _check_pair(a, b):
    if a.shape != b.shape:
        raise ShapeError('mask shapes {} and {} differ'.format(a.shape, b.shape))


def dice_score(a, b):
    """``2 |a & b| / (|a| + |b|)``; two empty masks score 1.0."""
    _check_pair(a, b)
    total = a.count() + b.count()
    if total == 0:
        return 1.0
    overlap = int(np.logical_and(a.values, b.values).sum())
    return 2.0 * overlap / total


def boundary(mask):
    """Foreground voxels with a background face neighbour or on the volume border.

    Returns:
        `~numpy.ndarray`: Boolean array of the mask's shape.
    """
    values = mask.values.astype(bool)
    return values & ~binary_erosion(values, structure=_FACE_NEIGHBOURS, border_value=0)


def surface_distances(a, b):
    """Distance in mm from every boundary voxel of ``a`` to the nearest boundary voxel of ``b``."""
    _check_pair(a, b)
    if a.spacing != b.spacing:
        raise ContractError('mask spacings {} and {} differ'.format(a.spacing, b.spacing))
    to_b = distance_transform_edt(~boundary(b), sampling=b.spacing)
    return to_b[boundary(a)]


def _symmetric_percentile(a, b, q):
    if a.count() == 0 or b.count() == 0:
        warn('distance between masks is undefined when one is empty')
        return None
    return float(max(np.percentile(surface_distances(a, b), q),
                     np.percentile(surface_distances(b, a), q)))


def hd95(a, b):
    """95th-percentile symmetric surface distance in mm.

    Percentiles interpolate linearly between sorted distances; the larger of the two directed
    values is returned. Returns ``None`` (and warns) when either mask is empty.
    """
    return _symmetric_percentile(a, b, 95)


def hausdorff(a, b):
    """Maximum symmetric surface distance in mm, ``None`` when either mask is empty."""
    return _symmetric_percentile(a, b, 100)


def _mean(values):
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


class MetricsReport(object):
    """Per-class Dice and HD95 with their means.

    Arguments:
        class_names (`list`): Row labels.
        dice (`list`): Dice score per class.
        hd95 (`list`): HD95 in mm per class, ``None`` where undefined.
    """
    def __init__(self, class_names, dice, hd95):
        if not len(class_names) == len(dice) == len(hd95):
            raise ShapeError('report columns differ in length')
        self.class_names = list(class_names)
        self.dice = list(dice)
        self.hd95 = list(hd95)

    @classmethod
    def from_masks(cls, predicted, reference, class_names=None):
        """Score `BinaryMask` lists, one entry per class; names default to class indices."""
        if len(predicted) != len(reference):
            raise ShapeError('{} predicted classes but {} reference classes'.format(
                len(predicted), len(reference)))
        names = class_names or [str(i) for i in range(len(predicted))]
        return cls(names, [dice_score(p, r) for p, r in zip(predicted, reference)],
                   [hd95(p, r) for p, r in zip(predicted, reference)])

    @classmethod
    def merge(cls, reports):
        """Average reports of several cases class by class, skipping undefined HD95 values."""
        if not reports:
            raise ContractError('nothing to merge')
        names = reports[0].class_names
        return cls(names,
                   [_mean([r.dice[i] for r in reports]) for i in range(len(names))],
                   [_mean([r.hd95[i] for r in reports]) for i in range(len(names))])

    @property
    def mean_dice(self):
        return _mean(self.dice)

    @property
    def mean_hd95(self):
        """Mean over the classes where HD95 is defined, ``None`` if there are none."""
        return _mean(self.hd95)

    def rows(self):
        """Yield ``(class, dice, hd95)`` rows followed by the ``mean`` row."""
        for name, dice, distance in zip(self.class_names, self.dice, self.hd95):
            yield name, dice, distance
        yield 'mean', self.mean_dice, self.mean_hd95

    def write_csv(self, filename):
        """Write the report with the header ``class,dice,hd95``."""
        with open(filename, 'w', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(['class', 'dice', 'hd95'])
            for name, dice, distance in self.rows():
                distance = UNDEFINED if distance is None else repr(distance)
                writer.writerow([name, repr(dice), distance])

    def get_dataframe(self):
        """Get a `~pandas.DataFrame` of the report, indexed by class.

        Undefined HD95 values become ``NaN``. Requires the ``dataframes`` extra.
        """
        import pandas as pd

        records = [{'class': name, 'dice': dice,
                    'hd95': np.nan if distance is None else distance}
                   for name, dice, distance in self.rows()]
        return pd.DataFrame.from_records(records, index='class')
