"""Utility functions for elplab."""

import csv
import hashlib
import json
import os
from contextlib import suppress
from importlib import metadata
from pathlib import Path

import numpy as np

from elplab.errors import ConfigError


def version():
    """Version string of the installed package, or of the VERSION file."""
    with suppress(metadata.PackageNotFoundError):
        return metadata.version("elplab")
    vfile = Path(__file__).resolve().parents[2] / "VERSION"
    with suppress(OSError):
        return vfile.read_text(encoding="utf-8").strip()
    return "0+unknown"


def canonical_json(obj):
    """JSON text with sorted keys and no insignificant whitespace."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def digest(obj):
    """Hex sha256 of the canonical JSON form of ``obj``."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def rng(seed, *stream):
    """A numpy Generator for ``seed``, optionally split into a sub-stream.

    The same (seed, stream) pair always yields the same sequence, so every
    consumer that needs randomness asks for its own stream instead of sharing
    one generator.
    """
    return np.random.default_rng([int(seed), *[int(s) for s in stream]])


def ensure_dir(path):
    """Create ``path`` (and parents) if needed and return it as a Path."""
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise ConfigError(f"output directory {path} is not writable")
    return path


def write_csv(path, header, rows):
    """Write ``rows`` under ``header``; floats keep 17 significant digits."""
    with open(path, "w", newline="", encoding="utf-8") as fpointer:
        writer = csv.writer(fpointer, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt_value(v) for v in row])


def write_json(path, obj):
    """Write ``obj`` as indented JSON with sorted keys and a final newline."""
    with open(path, "w", encoding="utf-8") as fpointer:
        json.dump(obj, fpointer, indent=2, sort_keys=True)
        fpointer.write("\n")


def fmt_value(value):
    """Lossless text for floats, plain ``str`` for everything else."""
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.17g}"
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)
