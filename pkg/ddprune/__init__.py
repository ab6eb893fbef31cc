# ddprune/__init__.py
"""
Desk-scale dataset distillation: trajectory matching with difficult-to-match
parameter pruning. Importing the package makes `ddprune.engine`,
`ddprune.distill`, etc. available after a plain `import ddprune`.
"""

try:
    from importlib.metadata import version as _v
    __version__ = _v("ddprune")
except Exception:  # local/dev runs
    __version__ = "0+local"

from . import (augment, cli, codec, data, distill, engine, errors, evaluate, log, models,  # noqa: F401
               pruning, streams, teacher)

__all__ = ["augment", "cli", "codec", "data", "distill", "engine", "errors", "evaluate", "log",
           "models", "pruning", "streams", "teacher", "__version__"]
