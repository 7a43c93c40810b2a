"""Figure rendering for clcbench CSV artifacts."""

from .render import KINDS, REQUIRED_COLUMNS, SchemaError, render

__version__ = "0.1.0"
