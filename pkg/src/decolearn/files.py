"""Config and data file formats used by the command line tool.

Config files are flat ``key = value`` lines. Values are read as JSON where
possible (numbers, lists, ``true``/``null``), ``a..b`` becomes the inclusive
integer range and anything else stays a string. ``#`` starts a comment.
"""
from __future__ import annotations

import configparser
import csv
import json
import re
from pathlib import Path

import numpy as np

from .exceptions import DecolearnError

_RANGE = re.compile(r"^\s*(-?\d+)\s*\.\.\s*(-?\d+)\s*$")
_AGENT_FILE = re.compile(r"^agent_(\d+)\.csv$")


class ConfigError(DecolearnError, ValueError):
    pass


class DataFileError(DecolearnError, OSError):
    pass


def parse_value(raw: str):
    raw = raw.strip()
    m = _RANGE.match(raw)
    if m:
        lo, hi = int(m.group(1)), int(m.group(2))
        if hi < lo:
            raise ConfigError(f"empty range {raw!r}")
        return list(range(lo, hi + 1))
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_config(text: str, source: str = "<config>") -> dict:
    parser = configparser.ConfigParser(
        delimiters=("=", ":"), comment_prefixes=("#",), inline_comment_prefixes=("#",),
        interpolation=None,
    )
    parser.optionxform = str
    try:
        parser.read_string("[config]\n" + text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return {k: parse_value(v) for k, v in parser["config"].items()}


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataFileError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, source=str(path))


def resolve_config(raw: dict, defaults: dict, name: str) -> dict:
    """Merge ``raw`` over ``defaults``, rejecting unknown keys."""
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        raise ConfigError(f"{name}: unknown config keys {unknown}; known: {sorted(defaults)}")
    cfg = dict(defaults)
    cfg.update(raw)
    return cfg


def header_comment(command: str, cfg: dict) -> str:
    return f"decolearn {command} config: {json.dumps(cfg, sort_keys=True, default=str)}"


def write_csv(path, rows: list[dict], columns: list[str], comment: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {comment}\n")
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k, "")) for k in columns})


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def read_agent_csv(path) -> np.ndarray:
    """Samples of one agent: numeric rows, optional header, ``#`` comments.

    Raises
    ------
    DataFileError
        With the file name and line number of the first malformed row.
    """
    path = Path(path)
    rows = []
    width = None
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataFileError(f"cannot read {path}: {exc}") from exc
    with fh:
        seen_data = False
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or not "".join(rec).strip() or rec[0].lstrip().startswith("#"):
                continue
            try:
                vals = [float(tok) for tok in rec]
            except ValueError:
                if not seen_data and width is None:
                    width = len(rec)  # header row
                    continue
                raise DataFileError(f"{path}:{lineno}: non-numeric value in {rec!r}") from None
            if width is None:
                width = len(vals)
            if len(vals) != width:
                raise DataFileError(
                    f"{path}:{lineno}: expected {width} columns, got {len(vals)}"
                )
            if not all(np.isfinite(vals)):
                raise DataFileError(f"{path}:{lineno}: NaN or inf value")
            rows.append(vals)
            seen_data = True
    if not rows:
        raise DataFileError(f"{path}: no data rows")
    return np.array(rows, dtype=float)


def find_agent_files(directory) -> list[Path]:
    """``agent_<id>.csv`` files of ``directory`` ordered by numeric id."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataFileError(f"data directory {directory} does not exist")
    found = []
    for p in directory.iterdir():
        m = _AGENT_FILE.match(p.name)
        if m:
            found.append((int(m.group(1)), p))
    if not found:
        raise DataFileError(f"no agent_<id>.csv files in {directory}")
    found.sort()
    return [p for _, p in found]


def write_agent_csv(path, X: np.ndarray, comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(X.shape[1])])
        for row in X:
            writer.writerow([repr(float(v)) for v in row])
