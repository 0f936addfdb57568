#!/usr/bin/env python3
# -*- coding: utf-8 -*-
#
# SegTransVAE documentation build configuration file.
#
# This file is execfile()d with the current directory set to its
# containing dir.

import sys
import os
import datetime
from importlib.metadata import version as distribution_version, PackageNotFoundError

# If extensions (or modules to document with autodoc) are in another directory,
# add these directories to sys.path here.
on_ci = os.environ.get('CI') == 'true'
if not on_ci:
    sys.path.insert(0, os.path.abspath('..'))

# -- General configuration ------------------------------------------------

extensions = [
    'sphinx.ext.autodoc',
    'sphinx.ext.doctest',
    'sphinx.ext.intersphinx',
    'sphinx.ext.napoleon',
    'sphinx.ext.todo',
    'sphinx.ext.coverage',
    'sphinx.ext.mathjax',
    'sphinx.ext.viewcode',
]

autodoc_default_options = {'members': True}
autoclass_content = 'class'
napoleon_numpy_docstring = False
napoleon_google_docstring = True
intersphinx_mapping = {
    'python': ('https://docs.python.org/3', None),
    'pandas': ('https://pandas.pydata.org/pandas-docs/stable/', None),
    'numpy': ('https://numpy.org/doc/stable/', None),
    'scipy': ('https://docs.scipy.org/doc/scipy/', None),
}

# Make the module index more useful by sorting on the module name
# instead of the package name
modindex_common_prefix = ['segtransvae.']

suppress_warnings = ['ref.citation']

templates_path = ['_templates']
source_suffix = '.rst'
master_doc = 'index'

# General information about the project.
project = 'SegTransVAE'
author = 'SegTransVAE developers'
this_year = datetime.date.today().year
copyright = '{}, {}'.format(this_year, author)

# The full version, including alpha/beta/rc tags.
try:
    release = distribution_version('segtransvae')
except PackageNotFoundError:
    release = 'unknown'
# The short X.Y version.
version = '.'.join(release.split('.')[:2])

language = 'en'
exclude_patterns = ['_build', 'Thumbs.db', '.DS_Store']
pygments_style = 'sphinx'
todo_include_todos = True
default_role = 'py:obj'

# -- Options for HTML output ----------------------------------------------

html_theme = 'alabaster'
html_theme_options = {
    'show_powered_by': True,
}
html_static_path = []

htmlhelp_basename = 'SegTransVAEdoc'

# -- Options for LaTeX output ---------------------------------------------

latex_elements = {}
latex_documents = [
    (master_doc, 'SegTransVAE.tex', 'SegTransVAE Documentation', author, 'manual'),
]

# -- Options for manual page output ---------------------------------------

man_pages = [
    (master_doc, 'segtransvae', 'SegTransVAE Documentation', [author], 1)
]

# -- Options for Texinfo output -------------------------------------------

texinfo_documents = [
    (master_doc, 'SegTransVAE', 'SegTransVAE Documentation',
     author, 'SegTransVAE', 'CNN-transformer segmentation with a VAE branch.',
     'Miscellaneous'),
]
