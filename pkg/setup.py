from setuptools import setup
from codecs import open
from os import path
import sys

here = path.abspath(path.dirname(__file__))

with open(path.join(here, 'segtransvae', '_version.py')) as version_file:
    exec(version_file.read())

with open(path.join(here, 'README.md')) as readme_file:
    readme = readme_file.read()

with open(path.join(here, 'CHANGELOG.md')) as changelog_file:
    changelog = changelog_file.read()

with open(path.join(here, 'CITATION.md')) as citation_file:
    citation = citation_file.read()

long_description = readme + '\n\n' + changelog + '\n\n' + citation

install_requires = [
    'pyyaml>=5.1',
    'cerberus>=1.3,<2.0',
    'pint>=0.10',
    'numpy>=1.17,<3.0',
    'scipy>=1.3',
    'uncertainties>=3.1',
]

tests_require = [
    'pytest>=6.0',
    'pytest-cov',
    'packaging',
]

extras_require = {
    'dataframes': ['pandas>=1.0'],
}

needs_pytest = {'pytest', 'test', 'ptr'}.intersection(sys.argv)
setup_requires = ['pytest-runner'] if needs_pytest else []

setup(
    name='segtransvae',
    version=__version__,
    description='Desk-scale SegTransVAE: CNN-transformer segmentation of 3-D volumes with a '
                'VAE regularization branch.',
    long_description=long_description,
    long_description_content_type='text/markdown',
    author='SegTransVAE developers',
    packages=['segtransvae', 'segtransvae.tests'],
    package_dir={'segtransvae': 'segtransvae'},
    package_data={'segtransvae': ['schemas/*.yaml', 'presets/*.yaml'],
                  'segtransvae.tests': ['*.yaml']},
    include_package_data=True,
    install_requires=install_requires,
    license='BSD-3-Clause',
    zip_safe=False,
    keywords=['medical image segmentation', 'transformer', 'variational autoencoder'],
    classifiers=[
        'Development Status :: 3 - Alpha',
        'Intended Audience :: Developers',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: BSD License',
        'Natural Language :: English',
        'Programming Language :: Python :: 3',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
        'Programming Language :: Python :: 3.11',
        'Topic :: Scientific/Engineering :: Medical Science Apps.',
    ],
    tests_require=tests_require,
    extras_require=extras_require,
    setup_requires=setup_requires,
    python_requires='>=3.9',
    entry_points={
        'console_scripts': ['segtransvae=segtransvae.cli:main'],
    }
)
