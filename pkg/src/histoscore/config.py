"""Flat ``key = value`` configuration files.

One setting per line, ``#`` or ``;`` starts a comment, keys are
case-insensitive and may use ``-`` or ``_``. Keys are the long option names
of the CLI subcommand they configure, e.g.::

    # pipeline.cfg
    manifest = data/manifest.csv
    out_dir = results
    method = ram_cnn
    model = model.hscn
    k_bins = 4
"""

from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path

from .core import ValidationError

# dotted names accepted as synonyms of the option names
ALIASES = {
    "dla.sigma": "sigma",
    "dla.samples": "dla_samples",
    "aug.max_shift_frac": "max_shift_frac",
    "lamt.k": "k_bins",
    "seg.h_depth": "h_depth",
    "seg.min_area": "min_area",
}

TRUE = {"1", "true", "yes", "on"}
FALSE = {"0", "false", "no", "off"}


def read_config(path) -> dict[str, str]:
    text = Path(path).read_text(encoding="utf-8")
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    try:
        parser.read_string("[config]\n" + text, source=str(path))
    except configparser.Error as exc:
        raise ValidationError(f"{path}: {exc}") from exc
    out = {}
    for key, value in parser["config"].items():
        key = key.replace("-", "_")
        out[ALIASES.get(key, key)] = value.strip()
    return out


def parse_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    v = str(value).strip().lower()
    if v in TRUE:
        return True
    if v in FALSE:
        return False
    raise ValidationError(f"not a boolean: {value!r}")


def _convert(value: str, default):
    if isinstance(default, bool):
        return parse_bool(value)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        items = [v.strip() for v in value.split(",") if v.strip()]
        as_int = bool(default) and all(isinstance(d, int) and not isinstance(d, bool) for d in default)
        return tuple(int(v) if as_int else float(v) for v in items)
    return value


def dataclass_from_config(cls, values: dict[str, str], base=None):
    """Override the fields of ``cls`` (or of ``base``) named in ``values``.

    Unknown keys raise; values are converted to the type of the field's
    current value, tuples as comma-separated lists.
    """
    base = base if base is not None else cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ValidationError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    changes = {k: _convert(v, getattr(base, k)) for k, v in values.items()}
    return dataclasses.replace(base, **changes)
