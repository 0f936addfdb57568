"""
Test for _version.py
"""
# Third-party libraries
from packaging.version import Version

# Local imports
from .._version import __version__, __version_info__


def test_semantic_version():
    Version(__version__)


def test_version_info():
    assert __version__.startswith('.'.join(str(part) for part in __version_info__[:3]))
