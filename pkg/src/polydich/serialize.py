"""Canonical JSON output: sorted keys and 17 significant digits for floats."""

import json
import math

import numpy as np


def _float(x):
    if math.isnan(x):
        return '"nan"'
    if math.isinf(x):
        return '"inf"' if x > 0 else '"-inf"'
    s = format(x, ".17g")
    if "e" not in s and "." not in s and "n" not in s:
        s += ".0"
    return s


def _emit(obj, out, indent, level):
    pad = "\n" + " " * (indent * (level + 1)) if indent else ""
    end = "\n" + " " * (indent * level) if indent else ""
    sep = "," if indent else ", "
    if isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{")
        for i, key in enumerate(sorted(obj, key=str)):
            if i:
                out.append(sep)
            out.append(pad + json.dumps(str(key)) + ": ")
            _emit(obj[key], out, indent, level + 1)
        out.append(end + "}")
    elif isinstance(obj, (list, tuple, np.ndarray)):
        items = obj.tolist() if isinstance(obj, np.ndarray) else obj
        if not len(items):
            out.append("[]")
            return
        # numeric leaves stay on one line
        flat = all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in items)
        out.append("[")
        for i, v in enumerate(items):
            if i:
                out.append(", " if flat else sep)
            if not flat:
                out.append(pad)
            _emit(v, out, indent, level + 1)
        out.append("]" if flat else end + "]")
    elif isinstance(obj, (bool, np.bool_)):
        out.append("true" if obj else "false")
    elif obj is None:
        out.append("null")
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(_float(float(obj)))
    else:
        out.append(json.dumps(str(obj)))


def dumps_canonical(obj, indent=2):
    """Deterministic JSON text; byte-identical for equal inputs."""
    out = []
    _emit(obj, out, indent, 0)
    return "".join(out) + "\n"


def parse_float(value):
    """Inverse of the string encodings used for non-finite floats."""
    if isinstance(value, str):
        return float(value)
    return float(value)
