"""
SegTransVAE model assembly.

A CNN encoder with skip connections feeds a transformer through a linear token embedding
with learnable position embeddings; a feature-mapping block turns the tokens back into a
volume which drives both the segmentation decoder and the VAE reconstruction branch.
"""
# Standard libraries
import time
from collections import namedtuple

import numpy as np
from uncertainties import ufloat

# Local imports
from .errors import ShapeError, ConfigError, ContractError
from .layers import (ParamStore, LayerSpec, init_layer, layer_parameter_count, layer_flops,
                     conv3d, instance_norm3d, channel_norm3d, layer_norm, linear,
                     multi_head_attention, feed_forward, upsample, resize)
from .tensor import Tensor, Rng, concat, exp, leaky_relu, sigmoid, clip, reshape, permute
from .validation import validate_config, model_schema, read_preset

LOGVAR_RANGE = (-10.0, 10.0)
"""`tuple`: Clamp applied to the predicted log-variance"""

# spread below this many ulps of the channel magnitude counts as a constant volume
FLAT_TOLERANCE = 64

_ModelConfig = namedtuple('ModelConfig', sorted(model_schema))


class ModelConfig(_ModelConfig):
    """Architecture hyperparameters; the single source of truth for shapes.

    Build instances with `ModelConfig.from_dict` or `ModelConfig.preset` so the schema rules
    (patch extents divisible by 8, ``embed_dim`` divisible by ``num_heads``,
    ``latent_total = 2 mean_dims``, ``endpoint_channels = 8 base_filters``) are enforced.
    """
    __slots__ = ()

    @classmethod
    def from_dict(cls, properties):
        """Validate ``properties`` against the model schema and fill defaults.

        Raises:
            `ConfigError`: If a value violates the schema.
        """
        config = validate_config(dict(properties), model_schema)
        config['blocks_per_level'] = tuple(config['blocks_per_level'])
        config['patch_size'] = tuple(config['patch_size'])
        if config['endpoint_channels'] is None:
            config['endpoint_channels'] = 8 * config['base_filters']
        return cls(**config)

    @classmethod
    def preset(cls, name, **overrides):
        """Configuration from a bundled preset (``desk`` or ``full``)."""
        properties = read_preset(name)
        properties.update(overrides)
        return cls.from_dict(properties)

    def to_dict(self):
        properties = self._asdict()
        properties['blocks_per_level'] = list(self.blocks_per_level)
        properties['patch_size'] = list(self.patch_size)
        return dict(properties)

    def validate(self):
        """Re-run the schema checks; returns the validated configuration."""
        return ModelConfig.from_dict(self.to_dict())

    def level_channels(self):
        return [self.base_filters * 2 ** i for i in range(4)]

    def level_grids(self):
        """Spatial extents at full, 1/2, 1/4 and 1/8 resolution."""
        return [tuple(s // 2 ** i for s in self.patch_size) for i in range(4)]

    def vae_grid(self):
        """Extents after the stride-2 reduction of the 1/8 grid (rounded up)."""
        return tuple((s + 1) // 2 for s in self.level_grids()[3])

    @property
    def tokens(self):
        return int(np.prod(self.level_grids()[3]))


ForwardOutput = namedtuple('ForwardOutput', ['segmentation', 'reconstruction', 'mu', 'logvar'])
ForwardOutput.__doc__ = 'Results of one forward pass'
ForwardOutput.segmentation.__doc__ = '(`Tensor`) Sigmoid probabilities [N, out_channels, H, W, D]'
ForwardOutput.reconstruction.__doc__ = '(`Tensor`) VAE reconstruction [N, C, H, W, D]'
ForwardOutput.mu.__doc__ = '(`Tensor`) Latent mean [N, mean_dims]'
ForwardOutput.logvar.__doc__ = '(`Tensor`) Clamped latent log-variance [N, mean_dims]'

_ComplexityReport = namedtuple('ComplexityReport',
                               ['parameter_count', 'flops_forward', 'inference_time'])


class ComplexityReport(_ComplexityReport):
    """Parameter count, analytic forward FLOPs (per sample) and measured inference time.

    ``inference_time`` is a `~uncertainties.ufloat` holding mean and standard deviation of
    the wall time in seconds.
    """
    __slots__ = ()

    @property
    def inference_seconds(self):
        return self.inference_time.nominal_value

    def __str__(self):
        return 'params={} flops={} inference_s={:.6f}'.format(
            self.parameter_count, self.flops_forward, self.inference_seconds)


def _voxels(grid):
    return int(np.prod(grid))


def _block_specs(prefix, channels, grid, slope):
    voxels = _voxels(grid)
    return [
        LayerSpec(prefix + '.norm1', 'instance_norm', channels, channels, out_voxels=voxels),
        LayerSpec(prefix + '.conv1', 'conv', channels, channels, 3, 1, False, voxels,
                  negative_slope=slope),
        LayerSpec(prefix + '.norm2', 'instance_norm', channels, channels, out_voxels=voxels),
        LayerSpec(prefix + '.conv2', 'conv', channels, channels, 3, 1, True, voxels,
                  negative_slope=slope),
    ]


def describe_architecture(config):
    """List the `LayerSpec` of every parameterized layer, in initialization order.

    Arguments:
        config (`ModelConfig`): Architecture hyperparameters.

    Returns:
        `list`: `LayerSpec` entries.
    """
    b = config.base_filters
    k = config.endpoint_channels
    d = config.embed_dim
    slope = config.leaky_slope
    channels = config.level_channels()
    grids = config.level_grids()
    tokens = config.tokens
    specs = []

    specs.append(LayerSpec('encoder.stem', 'conv', config.in_channels, b, 3, 1, True,
                           _voxels(grids[0])))
    for i, c in enumerate(channels):
        if i > 0:
            specs.append(LayerSpec('encoder.level{}.down'.format(i), 'conv', channels[i - 1], c,
                                   3, 2, True, _voxels(grids[i])))
        for j in range(config.blocks_per_level[i]):
            specs += _block_specs('encoder.level{}.block{}'.format(i, j), c, grids[i], slope)

    specs.append(LayerSpec('embedding.proj', 'linear', k, d, out_voxels=tokens))
    specs.append(LayerSpec('embedding.position', 'position_embedding', d, d, out_voxels=tokens))
    for layer in range(config.num_layers):
        prefix = 'transformer.layer{}'.format(layer)
        specs.append(LayerSpec(prefix + '.ln1', 'layer_norm', d, d, out_voxels=tokens))
        for proj in ('q', 'k', 'v'):
            specs.append(LayerSpec(prefix + '.attn.' + proj, 'linear', d, d, out_voxels=tokens))
        specs.append(LayerSpec(prefix + '.attn', 'attention', d, d, out_voxels=tokens,
                               heads=config.num_heads))
        specs.append(LayerSpec(prefix + '.attn.out', 'linear', d, d, out_voxels=tokens))
        specs.append(LayerSpec(prefix + '.ln2', 'layer_norm', d, d, out_voxels=tokens))
        specs.append(LayerSpec(prefix + '.ffn.fc1', 'linear', d, config.ffn_width,
                               out_voxels=tokens))
        specs.append(LayerSpec(prefix + '.ffn.fc2', 'linear', config.ffn_width, d,
                               out_voxels=tokens))
    specs.append(LayerSpec('mapping.conv', 'conv', d, k, 1, 1, False, tokens))
    specs.append(LayerSpec('mapping.norm', 'instance_norm', k, k, out_voxels=tokens))

    previous = k
    for i in (2, 1, 0):
        c = channels[i]
        prefix = 'decoder.level{}'.format(i)
        specs.append(LayerSpec(prefix + '.up', 'conv', previous, c, 1, 1, True,
                               _voxels(grids[i + 1])))
        specs.append(LayerSpec(prefix + '.fuse', 'conv', 2 * c, c, 1, 1, True, _voxels(grids[i])))
        specs += _block_specs(prefix + '.block0', c, grids[i], slope)
        previous = c
    specs.append(LayerSpec('decoder.head', 'conv', b, config.out_channels, 1, 1, True,
                           _voxels(grids[0])))

    reduced = _voxels(config.vae_grid())
    specs.append(LayerSpec('vae.reduce', 'conv', k, k // 2, 3, 2, False, reduced))
    specs.append(LayerSpec('vae.reduce_norm', 'instance_norm', k // 2, k // 2, out_voxels=reduced))
    specs.append(LayerSpec('vae.encode', 'linear', k // 2 * reduced, config.latent_total))
    specs.append(LayerSpec('vae.decode', 'linear', config.mean_dims, k * reduced))
    stage_inputs = [reduced] + [_voxels(g) for g in (grids[3], grids[2], grids[1])]
    previous = k
    for stage, (c, grid, voxels_in) in enumerate(zip([k] + channels[2::-1], grids[::-1],
                                                     stage_inputs)):
        prefix = 'vae.stage{}'.format(stage)
        specs.append(LayerSpec(prefix + '.up', 'conv', previous, c, 1, 1, True, voxels_in))
        specs += _block_specs(prefix + '.block0', c, grid, slope)
        previous = c
    specs.append(LayerSpec('vae.head', 'conv', b, config.in_channels, 1, 1, True,
                           _voxels(grids[0])))
    return specs


def build_model(config, rng=None):
    """Create the parameters of a SegTransVAE model.

    Arguments:
        config (`ModelConfig`): Architecture hyperparameters.
        rng (`Rng`, optional): Initialization generator; defaults to ``Rng(config.seed)``.

    Returns:
        `tuple`: `ParamStore` and the architecture description (list of `LayerSpec`).

    Raises:
        `ConfigError`: If ``config`` violates its invariants.
    """
    config = config.validate()
    rng = rng or Rng(config.seed)
    architecture = describe_architecture(config)
    store = ParamStore()
    for spec in architecture:
        init_layer(store, spec, rng, config.dtype)
    return store, architecture


def count_parameters(architecture):
    """Closed-form parameter count of an architecture description."""
    return sum(layer_parameter_count(spec) for spec in architecture)


def count_flops(architecture):
    """Closed-form forward FLOPs of an architecture description, per sample."""
    return sum(layer_flops(spec) for spec in architecture)


def _flat_channels(x):
    """True if some (sample, channel) volume is constant up to rounding."""
    axes = (2, 3, 4)
    spread = x.data.max(axis=axes) - x.data.min(axis=axes)
    scale = np.maximum(np.abs(x.data).max(axis=axes), 1.0)
    return bool(np.any(spread <= FLAT_TOLERANCE * np.finfo(x.data.dtype).eps * scale))


def _spatial_norm(x, params, name):
    gamma = params[name + '.gamma']
    beta = params[name + '.beta']
    # instance norm of a flat volume is rounding noise sitting on the activation kink
    if _voxels(x.shape[2:]) < 2 or _flat_channels(x):
        return channel_norm3d(x, gamma, beta)
    return instance_norm3d(x, gamma, beta)


def modified_resnet_block(x, params, slope=0.01):
    """Pre-activation residual block.

    ``x + conv2(lrelu(norm2(conv1(lrelu(norm1(x))))))`` with 3x3x3 convolutions.

    Arguments:
        x (`Tensor`): ``[N, C, H, W, D]``.
        params (`ParamScope`): Holds ``norm1``, ``conv1``, ``norm2`` and ``conv2``.
        slope (`float`, optional): Leaky ReLU slope.
    """
    if x.shape[1] != params['conv1.weight'].shape[1]:
        raise ShapeError('block expects {} channels, got {}'.format(
            params['conv1.weight'].shape[1], x.shape[1]))
    h = leaky_relu(_spatial_norm(x, params, 'norm1'), slope)
    h = conv3d(h, params['conv1.weight'], None, stride=1, padding=1)
    h = leaky_relu(_spatial_norm(h, params, 'norm2'), slope)
    h = conv3d(h, params['conv2.weight'], params['conv2.bias'], stride=1, padding=1)
    return x + h


def encoder_forward(x, params, config):
    """Encode ``x`` into skip features and the 1/8-resolution map ``F``.

    Returns:
        `tuple`: ``[s1, s2, s3]`` at full, 1/2 and 1/4 resolution and ``F`` with
        ``endpoint_channels`` channels at 1/8 resolution.
    """
    if any(s % 8 for s in x.shape[2:]):
        raise ShapeError('spatial extents {} must be divisible by 8'.format(x.shape[2:]))
    h = conv3d(x, params['encoder.stem.weight'], params['encoder.stem.bias'], 1, 1)
    outputs = []
    for i in range(4):
        level = 'encoder.level{}'.format(i)
        if i > 0:
            h = conv3d(h, params[level + '.down.weight'], params[level + '.down.bias'], 2, 1)
        for j in range(config.blocks_per_level[i]):
            h = modified_resnet_block(h, params.scope('{}.block{}'.format(level, j)),
                                      config.leaky_slope)
        outputs.append(h)
    return outputs[:3], outputs[3]


def feature_embedding(f, params, config=None):
    """Turn every voxel of ``F`` into a token: ``z0 = W F + PE``.

    Tokens are ordered row-major over the spatial axes.
    """
    n, channels = f.shape[:2]
    tokens = _voxels(f.shape[2:])
    position = params['embedding.position.weight']
    if tokens != position.shape[0]:
        raise ConfigError('feature map has {} positions, embeddings were built for {}'.format(
            tokens, position.shape[0]))
    sequence = permute(reshape(f, (n, channels, tokens)), (0, 2, 1))
    projected = linear(sequence, params['embedding.proj.weight'], params['embedding.proj.bias'])
    return projected + reshape(position, (1,) + position.shape)


def transformer_forward(z0, params, config):
    """Pre-norm transformer layers: ``z' = MHA(LN(z)) + z``, ``z = FFN(LN(z')) + z'``."""
    z = z0
    for layer in range(config.num_layers):
        scope = params.scope('transformer.layer{}'.format(layer))
        z = z + multi_head_attention(layer_norm(z, scope['ln1.gamma'], scope['ln1.beta']),
                                     scope.scope('attn'), config.num_heads)
        z = z + feed_forward(layer_norm(z, scope['ln2.gamma'], scope['ln2.beta']),
                             scope.scope('ffn'), config.ffn_activation)
    return z


def feature_mapping(z, params, grid, config):
    """Reshape tokens onto ``grid`` and project ``embed_dim -> endpoint_channels``."""
    n, tokens, width = z.shape
    if tokens != _voxels(grid):
        raise ShapeError('{} tokens cannot fill a {} grid'.format(tokens, tuple(grid)))
    volume = reshape(permute(z, (0, 2, 1)), (n, width) + tuple(grid))
    h = conv3d(volume, params['mapping.conv.weight'], None, 1, 0)
    return leaky_relu(_spatial_norm(h, params, 'mapping.norm'), config.leaky_slope)


def _up_stage(h, params, target_grid, mode):
    h = conv3d(h, params['up.weight'], params['up.bias'], 1, 0)
    if tuple(2 * s for s in h.shape[2:]) == tuple(target_grid):
        return upsample(h, mode)
    return resize(h, target_grid, mode)


def decoder_forward(z, skips, params, config):
    """Segmentation decoder: three upsample + skip-concat + block levels, sigmoid head."""
    h = z
    for i in (2, 1, 0):
        scope = params.scope('decoder.level{}'.format(i))
        skip = skips[i]
        h = _up_stage(h, scope, skip.shape[2:], config.upsample_mode)
        if h.shape != skip.shape:
            raise ShapeError('decoder level {} produced {}, skip is {}'.format(
                i, h.shape, skip.shape))
        h = conv3d(concat([h, skip], 1), scope['fuse.weight'], scope['fuse.bias'], 1, 0)
        h = modified_resnet_block(h, scope.scope('block0'), config.leaky_slope)
    logits = conv3d(h, params['decoder.head.weight'], params['decoder.head.bias'], 1, 0)
    return sigmoid(logits)


def reparameterize(mu, logvar, rng=None, sample=True):
    """``mu + exp(logvar / 2) * eps`` with ``eps ~ N(0, I)``, or ``mu`` when not sampling."""
    if not sample:
        return mu
    if rng is None:
        raise ContractError('sampling the latent needs an Rng')
    noise = Tensor(rng.normal(0.0, 1.0, mu.shape), mu.dtype)
    return mu + exp(logvar * 0.5) * noise


def vae_forward(z, params, config, rng=None, sample=False):
    """VAE branch: reduce to the latent, sample, reconstruct the input volume.

    Returns:
        `tuple`: reconstruction ``[N, C, H, W, D]``, ``mu`` and clamped ``logvar``.
    """
    n = z.shape[0]
    slope = config.leaky_slope
    h = conv3d(z, params['vae.reduce.weight'], None, 2, 1)
    h = leaky_relu(_spatial_norm(h, params, 'vae.reduce_norm'), slope)
    reduced_grid = h.shape[2:]
    latent = linear(reshape(h, (n, -1)), params['vae.encode.weight'], params['vae.encode.bias'])
    mu = latent[:, :config.mean_dims]
    logvar = clip(latent[:, config.mean_dims:], *LOGVAR_RANGE)

    sampled = reparameterize(mu, logvar, rng, sample)
    h = leaky_relu(linear(sampled, params['vae.decode.weight'], params['vae.decode.bias']), slope)
    h = reshape(h, (n, config.endpoint_channels) + tuple(reduced_grid))
    for stage, grid in enumerate(config.level_grids()[::-1]):
        scope = params.scope('vae.stage{}'.format(stage))
        h = _up_stage(h, scope, grid, config.upsample_mode)
        h = modified_resnet_block(h, scope.scope('block0'), slope)
    reconstruction = conv3d(h, params['vae.head.weight'], params['vae.head.bias'], 1, 0)
    return reconstruction, mu, logvar


def forward(x, params, config, rng=None, training=False):
    """Full SegTransVAE pass.

    Arguments:
        x (`Tensor`): Input ``[N, C, H, W, D]`` with the configured patch size.
        params (`ParamStore`): Model parameters.
        config (`ModelConfig`): Architecture hyperparameters.
        rng (`Rng`, optional): Latent sampling generator, required when ``training``.
        training (`bool`, optional): Sample the latent instead of using its mean.

    Returns:
        `ForwardOutput`: Segmentation, reconstruction, ``mu`` and ``logvar``.
    """
    if tuple(x.shape[2:]) != tuple(config.patch_size) or x.shape[1] != config.in_channels:
        raise ShapeError('input {} does not match {} channels with patch {}'.format(
            x.shape, config.in_channels, tuple(config.patch_size)))
    skips, f = encoder_forward(x, params, config)
    z0 = feature_embedding(f, params, config)
    z = transformer_forward(z0, params, config)
    mapped = feature_mapping(z, params, f.shape[2:], config)
    segmentation = decoder_forward(mapped, skips, params, config)
    vae_input = mapped if config.vae_source == 'transformer' else f
    reconstruction, mu, logvar = vae_forward(vae_input, params, config, rng, sample=training)
    return ForwardOutput(segmentation, reconstruction, mu, logvar)


def complexity_report(config, repetitions=1, params=None, rng=None):
    """Parameter count, analytic FLOPs and mean inference wall time.

    Arguments:
        config (`ModelConfig`): Architecture hyperparameters.
        repetitions (`int`, optional): Timed forward passes (batch of one, ``training=False``).
        params (`ParamStore`, optional): Parameters to time; built from ``config`` if omitted.
        rng (`Rng`, optional): Generator for the random input volume.

    Returns:
        `ComplexityReport`: The report.
    """
    if repetitions < 1:
        raise ContractError('repetitions must be at least 1, got {}'.format(repetitions))
    architecture = describe_architecture(config)
    if params is None:
        params, architecture = build_model(config)
    rng = rng or Rng(config.seed)
    x = Tensor(rng.normal(0.0, 1.0, (1, config.in_channels) + tuple(config.patch_size)),
               config.dtype)
    times = []
    for _ in range(repetitions):
        start = time.perf_counter()
        forward(x, params, config, training=False)
        times.append(time.perf_counter() - start)
    return ComplexityReport(params.count(), count_flops(architecture),
                            ufloat(np.mean(times), np.std(times)))
