"""Versioned text checkpoints.

Layout::

    REDCKPT v1
    arch=<encdec|efc|fc>
    hyper.<name>=<value>          # one line per Hyper field
    param <name> <rows> <cols>    # then <rows> lines of row-major values
    ...
    end

Values use 17 significant digits, so write -> read is bit-exact.
"""
from __future__ import annotations

from dataclasses import fields
from pathlib import Path

import numpy as np

from .data import DataError, _write_atomic, fmt_float
from .model import ARCHS, Hyper, Model

MAGIC = "REDCKPT v1"


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, float):
        return fmt_float(v)
    return str(v)


def dumps(model: Model) -> str:
    lines = [MAGIC, f"arch={model.arch}"]
    lines += [f"hyper.{k}={_fmt(v)}" for k, v in model.hyper.items()]
    for name in sorted(model.params):
        arr = model.params[name]
        mat = arr.reshape(1, -1) if arr.ndim == 1 else arr
        lines.append(f"param {name} {arr.ndim} {mat.shape[0]} {mat.shape[1]}")
        lines.extend(" ".join(fmt_float(x) for x in row) for row in mat)
    lines.append("end")
    return "\n".join(lines) + "\n"


def save(path, model: Model):
    _write_atomic(path, dumps(model))


def loads(text: str, source: str = "<checkpoint>") -> Model:
    lines = text.splitlines()

    def err(i, msg):
        return DataError(f"{source}:{i + 1}: {msg}")

    if not lines or lines[0] != MAGIC:
        raise err(0, f"expected {MAGIC!r} header")
    if len(lines) < 2 or not lines[1].startswith("arch="):
        raise err(1, "expected arch=")
    arch = lines[1][5:]
    if arch not in ARCHS:
        raise err(1, f"unknown architecture {arch!r}")
    kinds = {f.name: f for f in fields(Hyper)}
    hyper_kw = {}
    i = 2
    while i < len(lines) and lines[i].startswith("hyper."):
        k, _, v = lines[i][6:].partition("=")
        if k not in kinds:
            raise err(i, f"unknown hyper-parameter {k}")
        default = getattr(Hyper(), k)
        if v == "none":
            hyper_kw[k] = None
        elif isinstance(default, float):
            hyper_kw[k] = float(v)
        else:
            hyper_kw[k] = int(v)
        i += 1
    try:
        hyper = Hyper(**hyper_kw)
    except (TypeError, ValueError) as e:
        raise err(i, f"invalid hyper-parameters: {e}") from None
    params = {}
    while i < len(lines) and lines[i] != "end":
        parts = lines[i].split()
        if len(parts) != 5 or parts[0] != "param":
            raise err(i, "expected 'param <name> <ndim> <rows> <cols>'")
        name, ndim, rows, cols = parts[1], int(parts[2]), int(parts[3]), int(parts[4])
        if i + rows >= len(lines):
            raise err(i, f"truncated values for {name}")
        mat = np.empty((rows, cols))
        for r in range(rows):
            vals = lines[i + 1 + r].split()
            if len(vals) != cols:
                raise err(i + 1 + r, f"expected {cols} values for {name}")
            mat[r] = [float(x) for x in vals]
        params[name] = mat.reshape(-1) if ndim == 1 else mat
        i += rows + 1
    if i >= len(lines):
        raise err(i - 1, "missing 'end'")
    return Model(arch, hyper, params)


def load(path) -> Model:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise DataError(f"{path}: cannot read ({e.strerror})") from None
    return loads(text, str(path))
