"""Python bindings for the SAPO/GRPO desk-scale lab."""

import json

from ._core import *  # noqa: F401,F403
from ._core import FORMAT_VERSION


def read_metrics(path):
    """Returns (header, rows) from a metrics JSONL file."""
    with open(path) as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or lines[0].get("kind") != "metrics":
        raise ValueError(f"{path} is not a metrics file")
    if lines[0].get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format_version")
    return lines[0], lines[1:]
