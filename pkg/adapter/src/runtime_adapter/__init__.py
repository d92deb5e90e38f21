"""Out-of-process model runner: ONNX-subset bytes in, traces out.

The package speaks a JSON-lines protocol on stdio (see ``serve``), decodes
models with its own wire-format reader (``wire``/``model``), and executes
them node by node on torch (``torchexec``) so every intermediate tensor can
be reported, not just the declared graph outputs.
"""

from .model import ModelParseError, parse_model
from .serve import main, serve
from .torchexec import ModelExecError, execute

__all__ = [
    "ModelExecError",
    "ModelParseError",
    "execute",
    "main",
    "parse_model",
    "serve",
]

__version__ = "0.1.0"
