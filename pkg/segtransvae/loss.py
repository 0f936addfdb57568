"""
Training objective: soft Dice, voxelwise reconstruction error and the latent KL term.
"""
from collections import namedtuple

import numpy as np

from .errors import ShapeError, DomainError, DivergenceError
from .tensor import Tensor, reduce_sum, reduce_mean, square, exp

DICE_EPSILON = 1e-5
"""`float`: Smoothing constant added to numerator and denominator of the Dice ratio"""

VAE_WEIGHT = 0.1
"""`float`: Weight of the reconstruction and KL terms in the total loss"""

_LossBreakdown = namedtuple('LossBreakdown',
                            ['dice', 'recon', 'kl', 'total', 'epsilon', 'vae_weight'])


class LossBreakdown(_LossBreakdown):
    """Loss components and the weighted total.

    The component fields hold whatever was combined, `Tensor` scalars while training so
    ``total`` can be differentiated, plain floats otherwise.
    """
    __slots__ = ()

    def as_floats(self):
        """`dict`: ``dice``, ``recon``, ``kl`` and ``total`` as Python floats."""
        return {name: _scalar(getattr(self, name)) for name in ('dice', 'recon', 'kl', 'total')}


def _scalar(value):
    if isinstance(value, Tensor):
        return value.item()
    return float(value)


def _check_shapes(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError('{}: shapes {} and {} differ'.format(what, a.shape, b.shape))


def dice_loss(pred, target, epsilon=DICE_EPSILON):
    """Soft Dice loss averaged over samples and channels.

    For every (sample, channel) pair the loss is
    ``1 - (2 sum(pred * target) + eps) / (sum(pred) + sum(target) + eps)``, the sums running
    over the voxels.

    Arguments:
        pred (`Tensor`): Probabilities ``[N, Ch, H, W, D]``.
        target (`Tensor` or `~numpy.ndarray`): Binary masks of the same shape.
        epsilon (`float`, optional): Smoothing constant.

    Returns:
        `Tensor`: Scalar loss.

    Raises:
        `ShapeError`: If the shapes differ.
        `DomainError`: If ``target`` holds values other than 0 and 1.
    """
    _check_shapes(pred, target, 'dice_loss')
    target_values = target.data if isinstance(target, Tensor) else np.asarray(target)
    if not np.all(np.isin(target_values, (0, 1))):
        raise DomainError('dice_loss target must be binary')
    if not isinstance(target, Tensor):
        target = Tensor(target_values, pred.dtype)
    axes = tuple(range(2, pred.ndim))
    overlap = reduce_sum(pred * target, axes)
    total = reduce_sum(pred, axes) + reduce_sum(target, axes)
    return 1.0 - reduce_mean((overlap * 2.0 + epsilon) / (total + epsilon))


def recon_loss(reconstruction, image):
    """Mean squared error over all elements."""
    _check_shapes(reconstruction, image, 'recon_loss')
    if not isinstance(image, Tensor):
        image = Tensor(image, reconstruction.dtype)
    return reduce_mean(square(reconstruction - image))


def kl_loss(mu, logvar, n_total_voxels):
    """KL term ``sum(mu^2 + sigma^2 - log sigma^2 - 1) / n_total_voxels``, averaged over the batch.

    ``n_total_voxels`` is the element count of one input sample (C H W D). There is no
    factor of one half.
    """
    _check_shapes(mu, logvar, 'kl_loss')
    per_sample = reduce_sum(square(mu) + exp(logvar) - logvar - 1.0)
    return per_sample * (1.0 / (n_total_voxels * mu.shape[0]))


def total_loss(dice, recon, kl, vae_weight=VAE_WEIGHT, epsilon=DICE_EPSILON):
    """Combine the components as ``dice + vae_weight * (recon + kl)``.

    Raises:
        `DivergenceError`: If any component is not finite.
    """
    for name, value in (('dice', dice), ('recon', recon), ('kl', kl)):
        if not np.isfinite(_scalar(value)):
            raise DivergenceError('{} loss is not finite'.format(name), name=name)
    total = dice + vae_weight * (recon + kl)
    return LossBreakdown(dice, recon, kl, total, epsilon, vae_weight)


def segtransvae_loss(output, image, target, epsilon=DICE_EPSILON, vae_weight=VAE_WEIGHT):
    """Total loss of a `ForwardOutput` against the input volume and its region masks.

    Arguments:
        output (`ForwardOutput`): Result of `segtransvae.model.forward`.
        image (`Tensor`): The model input ``[N, C, H, W, D]``.
        target (`Tensor` or `~numpy.ndarray`): Region masks ``[N, Ch, H, W, D]``.

    Returns:
        `LossBreakdown`: Components and the differentiable total.
    """
    n_total_voxels = int(np.prod(image.shape[1:]))
    return total_loss(dice_loss(output.segmentation, target, epsilon),
                      recon_loss(output.reconstruction, image),
                      kl_loss(output.mu, output.logvar, n_total_voxels),
                      vae_weight, epsilon)
