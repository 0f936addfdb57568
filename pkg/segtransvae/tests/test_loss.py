"""
Tests for the training objective
"""
# Third-party libraries
import numpy as np
import pytest

# Local imports
from ..loss import (DICE_EPSILON, VAE_WEIGHT, LossBreakdown, dice_loss, recon_loss, kl_loss,
                    total_loss, segtransvae_loss)
from ..model import ForwardOutput
from ..tensor import Tensor, Tape, Rng, backward, sigmoid, finite_diff_check
from ..errors import ShapeError, DomainError, DivergenceError


def volume(values):
    return Tensor(np.asarray(values, dtype=float).reshape(1, 1, -1, 1, 1), 'f64')


class TestDiceLoss(object):
    """
    """
    def test_half_overlap(self):
        loss = dice_loss(volume([0.5, 0.5]), np.array([1, 0]).reshape(1, 1, 2, 1, 1), epsilon=0)
        assert loss.item() == pytest.approx(0.5)

    def test_perfect_prediction(self):
        target = np.array([1, 0, 1, 1]).reshape(1, 1, 4, 1, 1)
        assert dice_loss(volume([1, 0, 1, 1]), target).item() == pytest.approx(0.0, abs=1e-9)

    def test_empty_target_and_prediction(self):
        target = np.zeros((1, 1, 3, 1, 1))
        assert dice_loss(volume([0, 0, 0]), target).item() == pytest.approx(0.0)

    def test_mean_over_channels(self):
        pred = Tensor(np.array([1.0, 0.0, 0.0, 1.0]).reshape(1, 2, 2, 1, 1), 'f64')
        target = np.array([1, 0, 1, 0]).reshape(1, 2, 2, 1, 1)
        assert dice_loss(pred, target, epsilon=0).item() == pytest.approx(0.5)

    def test_non_binary_target(self):
        with pytest.raises(DomainError):
            dice_loss(volume([0.5, 0.5]), np.array([0.5, 1]).reshape(1, 1, 2, 1, 1))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dice_loss(volume([0.5, 0.5]), np.zeros((1, 1, 3, 1, 1)))

    def test_gradient(self):
        rng = Rng(0)
        point = Tensor(rng.normal(0, 1, (2, 2, 2, 2, 1)), 'f64')
        target = (rng.random((2, 2, 2, 2, 1)) > 0.5).astype(float)
        assert finite_diff_check(lambda x: dice_loss(sigmoid(x), target), point) < 1e-6

    @pytest.mark.parametrize('seed', range(5))
    def test_monotone_in_foreground(self, seed):
        rng = Rng(seed)
        pred = rng.uniform(0.01, 0.99, (1, 2, 3, 3, 2))
        target = (rng.random((1, 2, 3, 3, 2)) > 0.5).astype(float)
        base = dice_loss(Tensor(pred, 'f64'), target).item()
        for index in zip(*np.nonzero(target)):
            raised = pred.copy()
            raised[index] += 1e-3
            assert dice_loss(Tensor(raised, 'f64'), target).item() <= base


class TestReconstructionLoss(object):
    """
    """
    def test_value(self):
        assert recon_loss(volume([0, 0]), volume([1, 3])).item() == pytest.approx(5.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            recon_loss(volume([0, 0]), volume([1, 3, 4]))


class TestKlLoss(object):
    """
    """
    def test_unit_mean(self):
        mu = Tensor([[1.0]], 'f64')
        logvar = Tensor([[0.0]], 'f64')
        assert kl_loss(mu, logvar, 1).item() == pytest.approx(1.0)

    def test_standard_normal_is_zero(self):
        zeros = Tensor(np.zeros((2, 8)), 'f64')
        assert kl_loss(zeros, zeros, 64).item() == pytest.approx(0.0)

    def test_non_negative(self):
        rng = Rng(12)
        for _ in range(1000):
            mu = Tensor(rng.normal(0, 3, (1, 4)), 'f64')
            logvar = Tensor(rng.uniform(-5, 5, (1, 4)), 'f64')
            assert kl_loss(mu, logvar, 10).item() >= 0.0

    def test_normalization(self):
        mu = Tensor(np.ones((2, 4)), 'f64')
        logvar = Tensor(np.zeros((2, 4)), 'f64')
        assert kl_loss(mu, logvar, 10).item() == pytest.approx(8.0 / 20.0)

    def test_gradient_of_logvar(self):
        mu = Tensor([[0.5, -0.5]], 'f64')
        logvar = Tensor([[0.3, -0.2]], 'f64', requires_grad=True)
        with Tape():
            loss = kl_loss(mu, logvar, 1)
        assert np.allclose(backward(loss)[logvar].data, np.exp([[0.3, -0.2]]) - 1)


class TestTotalLoss(object):
    """
    """
    def test_weighting(self):
        breakdown = total_loss(0.5, 1.0, 1.0)
        assert breakdown.total == pytest.approx(0.7)
        assert breakdown.vae_weight == VAE_WEIGHT
        assert breakdown.epsilon == DICE_EPSILON

    def test_as_floats(self):
        breakdown = total_loss(Tensor(0.5, 'f64'), 1.0, 2.0, vae_weight=0.5)
        assert breakdown.as_floats() == {'dice': 0.5, 'recon': 1.0, 'kl': 2.0, 'total': 2.0}

    def test_non_finite(self):
        with pytest.raises(DivergenceError) as excinfo:
            total_loss(0.5, float('nan'), 1.0)
        assert excinfo.value.name == 'recon'
        assert 'recon' in str(excinfo.value)


class TestSegTransVAELoss(object):
    """
    """
    def test_components(self):
        image = Tensor(np.zeros((1, 1, 2, 1, 1)), 'f64')
        output = ForwardOutput(volume([0.5, 0.5]), volume([1, 3]), Tensor([[1.0]], 'f64'),
                               Tensor([[0.0]], 'f64'))
        breakdown = segtransvae_loss(output, image, np.array([1, 0]).reshape(1, 1, 2, 1, 1),
                                     epsilon=0)
        assert isinstance(breakdown, LossBreakdown)
        values = breakdown.as_floats()
        assert values['dice'] == pytest.approx(0.5)
        assert values['recon'] == pytest.approx(5.0)
        assert values['kl'] == pytest.approx(0.5)
        assert values['total'] == pytest.approx(0.5 + 0.1 * 5.5)
