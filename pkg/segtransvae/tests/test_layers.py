"""
Tests for the layer functions and parameter storage
"""
# Third-party libraries
import numpy as np
import pytest

# Local imports
from ..layers import (ParamStore, LayerSpec, check_layer_spec, layer_parameter_count,
                      layer_flops, init_layer, conv3d, interpolation_matrix, resize, upsample,
                      instance_norm3d, channel_norm3d, layer_norm, linear, multi_head_attention,
                      feed_forward)
from ..tensor import Tensor, Rng, reduce_sum, finite_diff_check, set_num_threads
from ..errors import ShapeError, ConfigError, DegenerateInputError


def naive_conv3d(x, w, b, stride, padding):
    """Direct nested-loop cross-correlation."""
    xp = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    n, cin = x.shape[:2]
    cout, _, k = w.shape[:3]
    grid = [(s + 2 * padding - k) // stride + 1 for s in x.shape[2:]]
    out = np.zeros((n, cout) + tuple(grid))
    for s in range(n):
        for o in range(cout):
            for i in range(grid[0]):
                for j in range(grid[1]):
                    for m in range(grid[2]):
                        patch = xp[s, :, i * stride:i * stride + k, j * stride:j * stride + k,
                                   m * stride:m * stride + k]
                        out[s, o, i, j, m] = np.sum(patch * w[o]) + (b[o] if b is not None else 0)
    return out


class TestParamStore(object):
    """
    """
    def test_sorted_names(self):
        store = ParamStore({'b.weight': Tensor([1.0]), 'a.weight': Tensor([2.0, 3.0])})
        assert store.names() == ['a.weight', 'b.weight']
        assert store.count() == 3
        assert all(t.requires_grad for t in store.values())

    def test_duplicate(self):
        store = ParamStore({'a': Tensor([1.0])})
        with pytest.raises(ConfigError):
            store.add('a', Tensor([2.0]))

    def test_replace_shape(self):
        store = ParamStore({'a': Tensor([1.0])})
        with pytest.raises(ShapeError):
            store.replace('a', Tensor([1.0, 2.0]))
        with pytest.raises(KeyError):
            store.replace('b', Tensor([1.0]))

    def test_scope(self):
        store = ParamStore({'encoder.stem.weight': Tensor([1.0])})
        scope = store.scope('encoder').scope('stem')
        assert 'weight' in scope
        assert scope['weight'].item() == 1.0

    def test_copy_is_independent(self):
        store = ParamStore({'a': Tensor([1.0])})
        other = store.copy()
        other.replace('a', Tensor([5.0]))
        assert store['a'].item() == 1.0


class TestLayerSpec(object):
    """
    """
    @pytest.mark.parametrize('spec, count', [
        (LayerSpec('c', 'conv', 4, 8, kernel_size=3), 8 * 4 * 27 + 8),
        (LayerSpec('c', 'conv', 4, 8, kernel_size=3, bias=False), 8 * 4 * 27),
        (LayerSpec('l', 'linear', 16, 32), 16 * 32 + 32),
        (LayerSpec('n', 'instance_norm', 8, 8), 16),
        (LayerSpec('p', 'position_embedding', 32, 32, out_voxels=8), 256),
        (LayerSpec('a', 'attention', 32, 32, out_voxels=8, heads=4), 0),
    ])
    def test_parameter_count(self, spec, count):
        assert layer_parameter_count(spec) == count

    def test_init_matches_count(self):
        store = ParamStore()
        specs = [LayerSpec('c', 'conv', 2, 3, kernel_size=3), LayerSpec('n', 'layer_norm', 5, 5),
                 LayerSpec('p', 'position_embedding', 4, 4, out_voxels=6)]
        for spec in specs:
            init_layer(store, spec, Rng(0), 'f64')
        assert store.count() == sum(layer_parameter_count(s) for s in specs)
        assert np.all(store['n.gamma'].data == 1.0)
        bound = 1.0 / np.sqrt(2 * 27)
        assert np.all(np.abs(store['c.weight'].data) <= bound)

    def test_conv_flops(self):
        spec = LayerSpec('c', 'conv', 2, 4, kernel_size=3, out_voxels=8)
        assert layer_flops(spec) == 2 * 4 * 2 * 27 * 8

    def test_attention_flops(self):
        spec = LayerSpec('a', 'attention', 32, 32, out_voxels=8, heads=4)
        assert layer_flops(spec) == 2 * 8 ** 2 * 32

    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            check_layer_spec(LayerSpec('a', 'attention', 30, 30, heads=4))

    def test_zero_channels(self):
        with pytest.raises(ConfigError):
            check_layer_spec(LayerSpec('c', 'conv', 0, 4))


class TestConv3d(object):
    """
    """
    @pytest.mark.parametrize('stride, padding, kernel', [
        (1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2),
    ])
    def test_against_naive(self, stride, padding, kernel):
        rng = Rng(3)
        x = rng.normal(0, 1, (2, 3, 5, 4, 6))
        w = rng.normal(0, 1, (2, 3, kernel, kernel, kernel))
        b = rng.normal(0, 1, (2,))
        out = conv3d(Tensor(x, 'f64'), Tensor(w, 'f64'), Tensor(b, 'f64'), stride, padding)
        assert np.allclose(out.data, naive_conv3d(x, w, b, stride, padding))

    @pytest.mark.parametrize('seed', range(50))
    def test_random_instances(self, seed):
        rng = Rng(100 + seed)
        n, cin, cout = (int(rng.integers(1, high)) for high in (3, 4, 4))
        kernel = (1, 3)[int(rng.integers(0, 2))]
        stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        grid = tuple(int(rng.integers(3, 7)) for _ in range(3))
        x = rng.normal(0, 1, (n, cin) + grid)
        w = rng.normal(0, 1, (cout, cin) + (kernel,) * 3)
        b = rng.normal(0, 1, (cout,))
        out = conv3d(Tensor(x, 'f64'), Tensor(w, 'f64'), Tensor(b, 'f64'), stride, padding)
        expected = naive_conv3d(x, w, b, stride, padding)
        assert out.shape == expected.shape
        assert np.max(np.abs(out.data - expected)) <= 1e-5 * np.max(np.abs(expected))

    def test_threads_do_not_change_result(self):
        rng = Rng(4)
        x = Tensor(rng.normal(0, 1, (4, 2, 4, 4, 4)), 'f64')
        w = Tensor(rng.normal(0, 1, (3, 2, 3, 3, 3)), 'f64')
        single = conv3d(x, w, padding=1).data
        set_num_threads(3)
        try:
            threaded = conv3d(x, w, padding=1).data
        finally:
            set_num_threads(1)
        assert np.array_equal(single, threaded)

    def test_stride_halves_even_grid(self):
        x = Tensor(np.ones((1, 1, 8, 8, 8)), 'f64')
        w = Tensor(np.ones((1, 1, 3, 3, 3)), 'f64')
        assert conv3d(x, w, stride=2, padding=1).shape == (1, 1, 4, 4, 4)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv3d(Tensor(np.ones((1, 2, 4, 4, 4))), Tensor(np.ones((1, 3, 3, 3, 3))))

    def test_kernel_too_large(self):
        with pytest.raises(ShapeError):
            conv3d(Tensor(np.ones((1, 1, 2, 2, 2))), Tensor(np.ones((1, 1, 3, 3, 3))))

    def test_gradients(self):
        rng = Rng(5)
        point = {'x': Tensor(rng.normal(0, 1, (1, 2, 4, 3, 3)), 'f64'),
                 'w': Tensor(rng.normal(0, 1, (2, 2, 3, 3, 3)), 'f64'),
                 'b': Tensor(rng.normal(0, 1, (2,)), 'f64')}
        weights = rng.normal(0, 1, (1, 2, 2, 2, 2))

        def f(p):
            return reduce_sum(conv3d(p['x'], p['w'], p['b'], 2, 1) * Tensor(weights, 'f64'))
        assert finite_diff_check(f, point) < 1e-6


class TestResampling(object):
    """
    """
    def test_trilinear_ramp(self):
        assert np.allclose(interpolation_matrix(2, 4, 'trilinear') @ [0.0, 1.0],
                           [0.0, 0.25, 0.75, 1.0])

    def test_nearest(self):
        assert np.array_equal(interpolation_matrix(2, 4, 'nearest') @ [3.0, 7.0],
                              [3.0, 3.0, 7.0, 7.0])

    def test_rows_sum_to_one(self):
        for mode in ('nearest', 'trilinear'):
            assert np.allclose(interpolation_matrix(3, 7, mode).sum(axis=1), 1.0)

    def test_upsample_shape(self):
        x = Tensor(np.ones((1, 2, 2, 3, 4)), 'f64')
        assert upsample(x).shape == (1, 2, 4, 6, 8)

    def test_upsample_constant(self):
        x = Tensor(np.full((1, 1, 2, 2, 2), 5.0), 'f64')
        assert np.allclose(upsample(x).data, 5.0)

    def test_resize_odd_grid(self):
        assert resize(Tensor(np.ones((1, 1, 2, 2, 2))), (3, 4, 5)).shape == (1, 1, 3, 4, 5)

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            interpolation_matrix(2, 4, 'cubic')

    def test_factor(self):
        with pytest.raises(ConfigError):
            upsample(Tensor(np.ones((1, 1, 2, 2, 2))), factor=3)


class TestNorms(object):
    """
    """
    def test_instance_norm_values(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 4, 1, 1), 'f64')
        out = instance_norm3d(x, Tensor([1.0], 'f64'), Tensor([0.0], 'f64'), eps=0)
        assert np.allclose(out.data.ravel(), [-1.3416, -0.4472, 0.4472, 1.3416], atol=1e-4)

    def test_instance_norm_affine(self):
        x = Tensor(np.array([1.0, 3.0]).reshape(1, 1, 2, 1, 1), 'f64')
        out = instance_norm3d(x, Tensor([2.0], 'f64'), Tensor([1.0], 'f64'), eps=0)
        assert np.allclose(out.data.ravel(), [-1.0, 3.0])

    def test_instance_norm_single_voxel(self):
        with pytest.raises(DegenerateInputError):
            instance_norm3d(Tensor(np.ones((1, 2, 1, 1, 1))), Tensor(np.ones(2)),
                            Tensor(np.zeros(2)))

    def test_channel_norm(self):
        x = Tensor(np.array([1.0, 3.0]).reshape(1, 2, 1, 1, 1), 'f64')
        out = channel_norm3d(x, Tensor(np.ones(2), 'f64'), Tensor(np.zeros(2), 'f64'), eps=0)
        assert np.allclose(out.data.ravel(), [-1.0, 1.0])

    def test_channel_norm_single_channel(self):
        with pytest.raises(DegenerateInputError):
            channel_norm3d(Tensor(np.ones((1, 1, 1, 1, 1))), Tensor([1.0]), Tensor([0.0]))

    def test_layer_norm(self):
        out = layer_norm(Tensor([[2.0, 4.0, 6.0]], 'f64'), Tensor(np.ones(3), 'f64'),
                         Tensor(np.zeros(3), 'f64'))
        assert np.allclose(out.data, [[-1.2247, 0.0, 1.2247]], atol=1e-4)


class TestTokenLayers(object):
    """
    """
    def test_linear(self):
        out = linear(Tensor([[2.0, 3.0]], 'f64'), Tensor([[1.0, 1.0]], 'f64'), Tensor([1.0], 'f64'))
        assert out.item() == 6.0

    def test_linear_mismatch(self):
        with pytest.raises(ShapeError):
            linear(Tensor([[2.0, 3.0]]), Tensor([[1.0, 1.0, 1.0]]))

    def _attention_params(self, width, seed=0):
        store = ParamStore()
        rng = Rng(seed)
        for part in ('q', 'k', 'v', 'out'):
            init_layer(store, LayerSpec('attn.' + part, 'linear', width, width), rng, 'f64')
        return store.scope('attn')

    def test_single_token_attention(self):
        params = self._attention_params(4)
        x = Tensor(Rng(1).normal(0, 1, (1, 1, 4)), 'f64')
        v = linear(x, params['v.weight'], params['v.bias'])
        expected = linear(v, params['out.weight'], params['out.bias'])
        assert np.allclose(multi_head_attention(x, params, 2).data, expected.data)

    def test_attention_permutation_equivariant(self):
        params = self._attention_params(8)
        x = Rng(2).normal(0, 1, (1, 5, 8))
        order = [3, 0, 4, 1, 2]
        out = multi_head_attention(Tensor(x, 'f64'), params, 4).data
        permuted = multi_head_attention(Tensor(x[:, order], 'f64'), params, 4).data
        assert np.allclose(permuted, out[:, order])

    def test_attention_heads(self):
        with pytest.raises(ConfigError):
            multi_head_attention(Tensor(np.ones((1, 2, 6))), self._attention_params(6), 4)

    def test_feed_forward_shape(self):
        store = ParamStore()
        init_layer(store, LayerSpec('ffn.fc1', 'linear', 4, 16), Rng(0), 'f64')
        init_layer(store, LayerSpec('ffn.fc2', 'linear', 16, 4), Rng(1), 'f64')
        x = Tensor(np.ones((2, 3, 4)), 'f64')
        assert feed_forward(x, store.scope('ffn')).shape == (2, 3, 4)
        with pytest.raises(ConfigError):
            feed_forward(x, store.scope('ffn'), 'swish')
