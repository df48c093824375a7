"""CSV output, flat key=value configuration files and episode dumps."""

from __future__ import annotations

import csv
import io as _io
import math
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

SCHEMA_LINE = "# schema=1"
EPISODE_ROLES = ("token", "cov", "resp", "mask", "target")


class ConfigError(ValueError):
    """A configuration file could not be parsed."""


def format_value(v) -> str:
    """Shortest round-tripping text for numbers, plain ``str`` otherwise."""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def csv_text(header: Sequence[str], rows: Iterable[Sequence], comments: Sequence[str] = ()) -> str:
    """Render a versioned CSV document with LF line endings."""
    buf = _io.StringIO()
    buf.write(SCHEMA_LINE + "\n")
    for c in comments:
        buf.write("# " + c + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(header))
    for row in rows:
        writer.writerow([format_value(v) for v in row])
    return buf.getvalue()


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return path


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence], comments: Sequence[str] = ()) -> Path:
    return write_text(path, csv_text(header, rows, comments))


def dict_rows_csv(records: Sequence[Dict], columns: Sequence[str], comments: Sequence[str] = ()) -> str:
    return csv_text(columns, ([r[c] for c in columns] for r in records), comments)


def read_csv(path) -> List[Dict[str, str]]:
    """Read a CSV written by :func:`write_csv`, skipping ``#`` comment lines."""
    with open(path, encoding="utf-8", newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def parse_config(text: str) -> Dict[str, str]:
    """Parse a flat ``key = value`` file.

    Blank lines and lines starting with ``#`` are ignored.  Keys are
    normalized to use underscores, so ``d-p`` and ``d_p`` are the same key.
    Repeated keys are an error.
    """
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip().replace("-", "_")
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def read_config(path) -> Dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def episode_rows(episodes, targets: Optional[np.ndarray] = None) -> List[list]:
    """Long-format rows ``(episode, role, index, values...)`` for a list of episodes.

    Roles: ``token`` (raw tokens), ``cov`` (covariates), ``resp``
    (responses), ``mask`` (the masked query token) and ``target`` (its
    response, or ``targets[i]`` when given).
    """
    rows = []
    for e, ep in enumerate(episodes):
        for role, M in (("token", ep.X), ("cov", ep.C), ("resp", ep.R)):
            for i, v in enumerate(np.atleast_2d(M)):
                rows.append([e, role, i] + list(v))
        rows.append([e, "mask", 0] + list(ep.mask_token))
        tgt = ep.y if targets is None else targets[e]
        rows.append([e, "target", 0] + list(np.atleast_1d(tgt)))
    return rows


def dump_episodes(path, episodes, targets: Optional[np.ndarray] = None) -> Path:
    rows = episode_rows(episodes, targets)
    width = max(len(r) for r in rows) - 3 if rows else 0
    header = ["episode", "role", "index"] + [f"v{j}" for j in range(width)]
    padded = [r + [""] * (width + 3 - len(r)) for r in rows]
    return write_csv(path, header, padded)


def load_episode_rows(path) -> Dict[int, Dict[str, np.ndarray]]:
    """Read an episode dump back as ``{episode: {role: matrix}}``."""
    out: Dict[int, Dict[str, list]] = {}
    for rec in read_csv(path):
        e = int(rec["episode"])
        role = rec["role"]
        if role not in EPISODE_ROLES:
            raise ValueError(f"unknown role {role!r}")
        vals = [float(rec[k]) for k in rec if k.startswith("v") and rec[k] != ""]
        out.setdefault(e, {}).setdefault(role, []).append(vals)
    return {e: {r: np.array(v) for r, v in roles.items()} for e, roles in out.items()}
