"""
Command-line interface: ``segtransvae <command> [options]``.

Commands are ``gen-data``, ``train``, ``eval``, ``gradcheck`` and ``benchmark``. Exit codes
are 0 on success, 1 for usage and configuration problems and 2 for runtime and file-format
errors.
"""
# Standard libraries
import os
import sys
from argparse import ArgumentParser

import yaml

# Local imports
from ._version import __version__
from .errors import SegTransVAEError, ConfigError, DivergenceError
from .tensor import set_num_threads
from .validation import read_config, read_preset, merge_config, split_config, to_millimetres
from .model import ModelConfig, complexity_report
from .data import gen_synthetic, save_volume, load_dataset, SampleSource, region_names
from .train import (TrainConfig, train_loop, evaluate, load_checkpoint, save_checkpoint,
                    check_model_gradients, check_elementary_gradients, CsvSink)

THREADS_VARIABLE = 'SEGTRANSVAE_THREADS'

ELEMENTARY_TOLERANCE = 1e-6
MODEL_TOLERANCE = 1e-4

PRESETS = ('desk', 'full')


class CliParser(ArgumentParser):
    """Argument parser that exits with status 1 on usage errors."""
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, '{}: error: {}\n'.format(self.prog, message))


def _load_config(source, flags=None):
    """Combine defaults, a preset or YAML file, and command-line flags."""
    if source is None:
        file_values = {}
    elif source in PRESETS and not os.path.exists(source):
        file_values = read_preset(source)
    elif os.path.isfile(source):
        file_values = read_config(source)
    else:
        raise ConfigError('configuration {} is neither a preset nor a file'.format(source))
    return merge_config(file_values=file_values, flag_values=flags)


def _configure(config):
    model, train, data = split_config(config)
    model_config = ModelConfig.from_dict(model)
    channels = len(region_names(data['region_scheme'], model_config.out_channels))
    if channels != model_config.out_channels:
        raise ConfigError('region scheme {} gives {} channels but out_channels is {}'.format(
            data['region_scheme'], channels, model_config.out_channels))
    return model_config, TrainConfig.from_dict(train), data


def _require_dir(path, create=False):
    if os.path.isdir(path):
        return
    if create and not os.path.exists(path):
        os.makedirs(path)
        return
    raise ConfigError('directory {} does not exist'.format(path))


def gen_data(args):
    _require_dir(args.out_dir, create=True)
    config = _load_config(args.config, {'volume_size': args.size})
    model_config, _, data = _configure(config)
    spacing = [to_millimetres(s) for s in data['spacing']]
    for index in range(args.count):
        sample = gen_synthetic(args.seed + index, data['volume_size'], model_config.in_channels,
                               data['num_classes'], spacing)
        save_volume(os.path.join(args.out_dir, sample.id + '.svv'), sample)
    print('volumes={} out_dir={}'.format(args.count, args.out_dir))
    return 0


def train(args):
    _require_dir(args.data_dir)
    _require_dir(args.out_dir, create=True)
    flags = {'total_steps': args.steps, 'lr0': args.lr, 'batch_size': args.batch_size,
             'train_seed': args.seed, 'num_workers': args.workers}
    config = _load_config(args.config, flags)
    model_config, train_config, data = _configure(config)
    with open(os.path.join(args.out_dir, 'config.yaml'), 'w') as f:
        yaml.safe_dump(config, f, default_flow_style=None)

    source = SampleSource(load_dataset(args.data_dir), model_config.patch_size,
                          model_config.out_channels, data['region_scheme'],
                          train_config.train_seed, train_config.augment, model_config.dtype)
    resume = load_checkpoint(args.resume, model_config) if args.resume else None
    sink = CsvSink(os.path.join(args.out_dir, 'history.csv'))
    try:
        result = train_loop(model_config, source, train_config, [sink], resume=resume,
                            out_dir=args.out_dir)
    except DivergenceError as err:
        if err.checkpoint is not None:
            save_checkpoint(os.path.join(args.out_dir, 'checkpoint.svck'), err.checkpoint)
        raise
    finally:
        sink.close()
    path = os.path.join(args.out_dir, 'checkpoint.svck')
    if not os.path.exists(path):
        save_checkpoint(path, result.checkpoint)
    final = result.history[-1].total if result.history else float('nan')
    print('steps={} total={!r} checkpoint={}'.format(result.checkpoint.step, final, path))
    return 0


def eval_(args):
    if not os.path.isfile(args.checkpoint):
        raise ConfigError('checkpoint {} does not exist'.format(args.checkpoint))
    _require_dir(args.data_dir)
    checkpoint = load_checkpoint(args.checkpoint)
    report = evaluate(checkpoint.model_config, checkpoint.params, load_dataset(args.data_dir),
                      args.threshold, args.scheme)
    report.write_csv(args.report)
    hd = report.mean_hd95
    print('mean_dice={!r} mean_hd95={}'.format(report.mean_dice,
                                               'undefined' if hd is None else repr(hd)))
    return 0


def gradcheck(args):
    if args.full_model:
        error = check_model_gradients(coordinates=args.coordinates, seed=args.seed)
        tolerance = MODEL_TOLERANCE
    else:
        errors = check_elementary_gradients(seed=args.seed, instances=args.instances)
        for name in sorted(errors):
            if errors[name] >= ELEMENTARY_TOLERANCE:
                print('{} rel_error={!r}'.format(name, errors[name]), file=sys.stderr)
        error = max(errors.values())
        tolerance = ELEMENTARY_TOLERANCE
    print('max_rel_error={!r}'.format(error))
    if error >= tolerance:
        print('Error: relative error above {}'.format(tolerance), file=sys.stderr)
        return 2
    return 0


def benchmark(args):
    config = _load_config(args.config)
    model_config, _, _ = _configure(config)
    print(complexity_report(model_config, args.reps))
    return 0


def _build_parser():
    parser = CliParser(prog='segtransvae', description='SegTransVAE segmentation on 3-D volumes.')
    parser.add_argument('--version', action='version', version='%(prog)s ' + __version__)
    commands = parser.add_subparsers(dest='command', parser_class=CliParser)
    commands.required = True

    p = commands.add_parser('gen-data', help='Write synthetic SVV1 volumes.')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--count', type=int, default=1)
    p.add_argument('--size', type=int, nargs=3, default=None, metavar=('H', 'W', 'D'))
    p.add_argument('--config', type=str, default=None,
                   help='preset name (desk, full) or YAML configuration file')
    p.add_argument('--out-dir', dest='out_dir', type=str, required=True)
    p.set_defaults(func=gen_data)

    p = commands.add_parser('train', help='Train on a directory of volumes.')
    p.add_argument('--data-dir', dest='data_dir', type=str, required=True)
    p.add_argument('--config', type=str, default=None)
    p.add_argument('--out-dir', dest='out_dir', type=str, required=True)
    p.add_argument('--steps', type=int, default=None)
    p.add_argument('--lr', type=float, default=None)
    p.add_argument('--batch-size', dest='batch_size', type=int, default=None)
    p.add_argument('--seed', type=int, default=None)
    p.add_argument('--workers', type=int, default=None)
    p.add_argument('--resume', type=str, default=None, help='checkpoint to continue from')
    p.set_defaults(func=train)

    p = commands.add_parser('eval', help='Score a checkpoint on a directory of volumes.')
    p.add_argument('--checkpoint', type=str, required=True)
    p.add_argument('--data-dir', dest='data_dir', type=str, required=True)
    p.add_argument('--report', type=str, required=True)
    p.add_argument('--threshold', type=float, default=0.5)
    p.add_argument('--scheme', type=str, default='nested', choices=['nested', 'brats', 'kits'])
    p.set_defaults(func=eval_)

    p = commands.add_parser('gradcheck', help='Compare gradients with finite differences.')
    p.add_argument('--full-model', dest='full_model', action='store_true')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--coordinates', type=int, default=20)
    p.add_argument('--instances', type=int, default=20)
    p.set_defaults(func=gradcheck)

    p = commands.add_parser('benchmark', help='Report parameters, FLOPs and inference time.')
    p.add_argument('--config', type=str, default='desk')
    p.add_argument('--reps', type=int, default=3)
    p.set_defaults(func=benchmark)
    return parser


def _threads_from_environment():
    value = os.environ.get(THREADS_VARIABLE, '1')
    try:
        threads = int(value)
    except ValueError:
        raise ConfigError('{} must be an integer, got {!r}'.format(THREADS_VARIABLE, value))
    set_num_threads(max(threads, 1))


def main(argv=None):
    """Run the command line and return the exit status."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_:
        return exit_.code or 0
    try:
        _threads_from_environment()
        return args.func(args)
    except ConfigError as err:
        print(str(err), file=sys.stderr)
        return 1
    except SegTransVAEError as err:
        print(str(err) if str(err).startswith('Error') else 'Error: {}'.format(err),
              file=sys.stderr)
        return 2
    except OSError as err:
        print('Error: {}'.format(err), file=sys.stderr)
        return 2


if __name__ == '__main__':  # pragma: no cover
    sys.exit(main())
