"""Validation class and loaders for SegTransVAE configuration files.
"""
from importlib.resources import files
from warnings import warn

import yaml
import pint
from cerberus import Validator, SchemaError

from .errors import ConfigError

units = pint.UnitRegistry()
"""Unit registry to contain the units used in SegTransVAE"""

Q_ = units.Quantity


def _resource(*parts):
    return files(__package__).joinpath(*parts)


def load_schema(name):
    """Load a YAML schema, splicing in ``!include`` files.

    All included files must be listed before any other content of the main schema.

    Arguments:
        name (`str`): File name under ``segtransvae/schemas``.

    Returns:
        `dict`: The parsed schema.
    """
    schema_list = _resource('schemas', name).read_text().splitlines(keepends=True)

    inc_start = None
    inc_end = None
    inc_list = []
    no_includes = False
    for l_num, l in enumerate(schema_list):
        if l.startswith('!include'):
            if no_includes:  # pragma: no cover
                raise SchemaError('All included files must be first in the main schema')

            if inc_start is None:
                inc_start = l_num

            if inc_end is not None:  # pragma: no cover
                raise SchemaError('All included files must be first in the main schema')

            inc_fname = l.split('!include')[1].strip()
            inc_list.extend(_resource('schemas', inc_fname).read_text().splitlines(keepends=True))
        else:
            if not l.strip() or l.startswith('#') or l.startswith('---'):
                continue

            if inc_start is None:
                no_includes = True

            if inc_start is not None and inc_end is None:
                inc_end = l_num

    if inc_start is not None:
        schema_list[inc_start:inc_end] = inc_list
    return yaml.safe_load(''.join(schema_list))


schema = load_schema('config_schema.yaml')
model_schema = load_schema('model_schema.yaml')
train_schema = load_schema('train_schema.yaml')
data_schema = load_schema('data_schema.yaml')


def to_millimetres(value):
    """Convert a spacing entry to millimetres.

    Plain numbers are taken as millimetres; strings and `~pint.Quantity` objects are
    converted with the unit registry.

    Examples:
        >>> to_millimetres('0.1 cm')
        1.0
        >>> to_millimetres(2)
        2.0
    """
    if isinstance(value, (int, float)):
        return float(value)
    quantity = Q_(value) if isinstance(value, str) else value
    return float(quantity.to('millimeter').magnitude)


class ConfigValidator(Validator):
    """Custom validator with divisibility, cross-field and spacing rules.
    """
    def _validate_divisible_by(self, divisor, field, value):
        """Checks that an integer is a multiple of a constant.

        Args:
            divisor (`int`): value from schema the field must be divisible by
            field (`str`): name of the field
            value (`int`): value from the file

        The rule's arguments are validated against this schema:
            {'type': 'integer'}
        """
        if isinstance(value, int) and value % divisor:
            self._error(field, 'must be divisible by {}'.format(divisor))

    def _validate_divisible_by_field(self, other, field, value):
        """Checks that an integer is a multiple of another field of the document.

        Args:
            other (`str`): name of the field holding the divisor
            field (`str`): name of the field
            value (`int`): value from the file

        The rule's arguments are validated against this schema:
            {'type': 'string'}
        """
        divisor = self.document.get(other)
        if value is None:
            return
        if isinstance(divisor, int) and divisor > 0 and value % divisor:
            self._error(field, 'must be divisible by {} ({})'.format(other, divisor))

    def _validate_multiple_of_field(self, spec, field, value):
        """Checks that a field equals a fixed multiple of another field.

        Args:
            spec (`dict`): ``field`` naming the other field and integer ``factor``
            field (`str`): name of the field
            value (`int`): value from the file

        The rule's arguments are validated against this schema:
            {'type': 'dict', 'schema': {'field': {'type': 'string'},
                                        'factor': {'type': 'integer'}}}
        """
        if value is None:
            return
        other = self.document.get(spec['field'])
        if isinstance(other, int) and value != spec['factor'] * other:
            self._error(field, 'must equal {} x {} ({})'.format(
                spec['factor'], spec['field'], spec['factor'] * other))

    def _validate_isvalid_spacing(self, isvalid_spacing, field, value):
        """Checks that every spacing entry is a positive length.

        Args:
            isvalid_spacing (`bool`): flag from schema indicating spacing to be checked
            field (`str`): spacing
            value (`list`): per-axis voxel sizes, numbers in mm or strings with units

        The rule's arguments are validated against this schema:
            {'type': 'boolean'}
        """
        for entry in value:
            try:
                millimetres = to_millimetres(entry)
            except (pint.errors.UndefinedUnitError, pint.DimensionalityError,
                    AttributeError, TypeError):
                self._error(field, 'incompatible units; should be consistent with millimeter')
                return
            if millimetres <= 0:
                self._error(field, 'value must be greater than 0.0 millimeter')


def validate_config(properties, section_schema=schema):
    """Validate a configuration dictionary and fill in defaults.

    Arguments:
        properties (`dict`): Parsed key-value configuration.
        section_schema (`dict`, optional): Schema to validate against; defaults to the
            combined model, train and data schema.

    Returns:
        `dict`: Normalized configuration with defaults.

    Raises:
        `ConfigError`: Whose ``errors`` attribute names every offending key.
    """
    validator = ConfigValidator(section_schema)
    if not validator.validate(properties):
        for key, value in validator.errors.items():
            if any('unknown field' in str(v) for v in value):
                raise ConfigError('unknown configuration key {}'.format(key), validator.errors)
        raise ConfigError('invalid configuration', validator.errors)
    return validator.document


def read_config(filename):
    """Read a YAML key-value configuration file.

    Arguments:
        filename (`str`): Path to the file.

    Returns:
        `dict`: The raw key-value pairs (validated, without defaults).
    """
    with open(filename, 'r') as f:
        properties = yaml.safe_load(f) or {}
    if not isinstance(properties, dict):
        raise ConfigError('{} must hold key-value pairs'.format(filename))
    validate_config(properties)
    return properties


def read_preset(name):
    """Raw key-value pairs of a bundled preset (``desk`` or ``full``)."""
    try:
        text = _resource('presets', name + '.yaml').read_text()
    except FileNotFoundError:
        raise ConfigError('unknown preset {}'.format(name))
    return yaml.safe_load(text)


def merge_config(defaults=None, file_values=None, flag_values=None):
    """Combine configuration layers with flag > file > default precedence.

    Returns:
        `dict`: Validated configuration with schema defaults for missing keys.
    """
    merged = dict(defaults or {})
    merged.update(file_values or {})
    for key, value in (flag_values or {}).items():
        if value is None:
            continue
        if file_values and key in file_values and file_values[key] != value:
            warn('configuration key {} overridden by a command-line flag'.format(key))
        merged[key] = value
    return validate_config(merged)


def split_config(config):
    """Split a combined configuration into model, train and data dictionaries."""
    return tuple({k: v for k, v in config.items() if k in section}
                 for section in (model_schema, train_schema, data_schema))
