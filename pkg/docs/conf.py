#
# elplab documentation build configuration file.
#

import os

extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.autosummary",
    "sphinx.ext.doctest",
    "sphinx.ext.intersphinx",
    "sphinx.ext.mathjax",
    "sphinx.ext.viewcode",
    "sphinxcontrib.programoutput",
    "sphinx.ext.napoleon",
]

templates_path = ["_templates"]
source_suffix = ".rst"
master_doc = "index"

project = "elplab"
copyright = "2026, the elplab developers"

version = open(os.path.join(os.path.pardir, "VERSION")).readline().strip()
release = version

exclude_patterns = ["_build"]
pygments_style = "sphinx"

html_theme = "pyramid"
html_static_path = ["_static"]
htmlhelp_basename = "elplabdoc"

latex_documents = [
    ("index", "elplab.tex", "elplab Documentation", "the elplab developers", "manual")
]
man_pages = [("index", "elplab", "elplab Documentation", ["the elplab developers"], 1)]

intersphinx_mapping = {
    "python": ("https://docs.python.org/3", None),
    "numpy": ("https://numpy.org/doc/stable/", None),
}
