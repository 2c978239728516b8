"""Versioned text formats for matches, labelings, and run configs.

Both formats are line-oriented: a version header, optional named header
lines, then one record per line.  Unknown key=value tokens on record lines
are ignored with a warning so the formats stay forward-extensible.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, TextIO

import numpy as np

from .config import RunConfig, config_from_dict
from .errors import ConfigError, MatchFileError
from .geometry import OUTLIER, Correspondence, Intrinsics

MATCH_MAGIC = "planemerge-matches"
LABEL_MAGIC = "planemerge-labels"
VERSION = "v1"


@dataclass
class MatchFile:
    matches: list[Correspondence]
    intrinsics: Optional[Intrinsics] = None
    image_size: Optional[tuple[int, int]] = None
    warnings: list[str] = field(default_factory=list)


def _parse_float(token: str, line_no: int, what: str) -> float:
    try:
        v = float(token)
    except ValueError:
        raise MatchFileError(f"bad {what}: {token!r}", line_no) from None
    if not math.isfinite(v):
        raise MatchFileError(f"non-finite {what}: {token!r}", line_no)
    return v


def _check_version(line: str, magic: str, line_no: int) -> None:
    parts = line.split()
    if len(parts) != 2 or parts[0] != magic:
        raise MatchFileError(
            f"expected header '{magic} {VERSION}', got {line!r}", line_no
        )
    if parts[1] != VERSION:
        raise MatchFileError(
            f"unsupported version {parts[1]!r}; this parser reads {VERSION}", line_no
        )


def parse_matches(text: str) -> MatchFile:
    """Parse a match document.

    Raises MatchFileError (with the offending line number) on malformed
    records, duplicate ids, non-finite values, or version mismatch.
    """
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise MatchFileError("empty document; missing version header", 1)
    _check_version(lines[0].strip(), MATCH_MAGIC, 1)

    out = MatchFile(matches=[])
    seen: set[int] = set()
    for line_no, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if tokens[0] == "intrinsics":
            if len(tokens) != 10:
                raise MatchFileError("intrinsics needs 9 numbers", line_no)
            vals = [_parse_float(t, line_no, "intrinsics entry") for t in tokens[1:]]
            try:
                out.intrinsics = Intrinsics(np.array(vals).reshape(3, 3))
            except ValueError as e:
                raise MatchFileError(f"bad intrinsics: {e}", line_no) from None
            continue
        if tokens[0] == "image_size":
            if len(tokens) != 3:
                raise MatchFileError("image_size needs width and height", line_no)
            out.image_size = (int(tokens[1]), int(tokens[2]))
            continue
        if len(tokens) < 5:
            raise MatchFileError(
                "record needs at least: id x1 y1 x2 y2", line_no
            )
        try:
            mid = int(tokens[0])
        except ValueError:
            raise MatchFileError(f"bad id: {tokens[0]!r}", line_no) from None
        if mid in seen:
            raise MatchFileError(f"duplicate id {mid}", line_no)
        seen.add(mid)
        coords = [_parse_float(t, line_no, "coordinate") for t in tokens[1:5]]
        color = None
        gt: Optional[int] = None
        for tok in tokens[5:]:
            if tok.startswith("rgb="):
                parts = tok[4:].split(",")
                if len(parts) != 3:
                    raise MatchFileError(f"bad rgb triple: {tok!r}", line_no)
                color = [_parse_float(p, line_no, "color channel") for p in parts]
            elif tok.startswith("gt="):
                val = tok[3:]
                gt = OUTLIER if val == "outlier" else int(val)
            else:
                out.warnings.append(f"line {line_no}: ignoring unknown field {tok!r}")
        try:
            out.matches.append(
                Correspondence(
                    id=mid,
                    x=np.array(coords[:2]),
                    x_prime=np.array(coords[2:]),
                    color_mean=np.array(color) if color is not None else None,
                    gt_plane=gt,
                )
            )
        except ValueError as e:
            raise MatchFileError(str(e), line_no) from None
    if not out.matches:
        raise MatchFileError("document contains no match records", len(lines))
    return out


def read_matches(path: str) -> MatchFile:
    with open(path, "r", encoding="utf-8") as f:
        return parse_matches(f.read())


def format_matches(mf: MatchFile) -> str:
    lines = [f"{MATCH_MAGIC} {VERSION}"]
    if mf.intrinsics is not None:
        lines.append(
            "intrinsics " + " ".join(repr(float(v)) for v in mf.intrinsics.k.ravel())
        )
    if mf.image_size is not None:
        lines.append(f"image_size {mf.image_size[0]} {mf.image_size[1]}")
    for c in mf.matches:
        parts = [str(c.id)] + [repr(float(v)) for v in (*c.x, *c.x_prime)]
        if c.color_mean is not None:
            parts.append("rgb=" + ",".join(repr(float(v)) for v in c.color_mean))
        if c.gt_plane is not None:
            parts.append("gt=" + ("outlier" if c.gt_plane == OUTLIER else str(c.gt_plane)))
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def write_matches(path: str, mf: MatchFile) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(format_matches(mf))


# ---------------------------------------------------------------------------
# Labeling documents


def format_labeling(
    ids: np.ndarray, labels: np.ndarray, diagnostics: Optional[dict] = None
) -> str:
    lines = [f"{LABEL_MAGIC} {VERSION}"]
    for mid, lab in zip(ids, labels):
        lines.append(f"{int(mid)} {'outlier' if lab == OUTLIER else int(lab)}")
    for key, value in (diagnostics or {}).items():
        lines.append(f"diag {key} {json.dumps(value)}")
    return "\n".join(lines) + "\n"


def parse_labeling(text: str) -> tuple[dict[int, int], dict]:
    """Returns (id -> label) and the diagnostics mapping."""
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise MatchFileError("empty document; missing version header", 1)
    _check_version(lines[0].strip(), LABEL_MAGIC, 1)
    labels: dict[int, int] = {}
    diag: dict = {}
    for line_no, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if tokens[0] == "diag":
            if len(tokens) < 3:
                raise MatchFileError("diag line needs key and value", line_no)
            try:
                diag[tokens[1]] = json.loads(" ".join(tokens[2:]))
            except json.JSONDecodeError as e:
                raise MatchFileError(f"bad diag value: {e}", line_no) from None
            continue
        if len(tokens) != 2:
            raise MatchFileError("labeling record is 'id label'", line_no)
        try:
            mid = int(tokens[0])
        except ValueError:
            raise MatchFileError(f"bad id: {tokens[0]!r}", line_no) from None
        if mid in labels:
            raise MatchFileError(f"duplicate id {mid}", line_no)
        labels[mid] = OUTLIER if tokens[1] == "outlier" else int(tokens[1])
    if not labels:
        raise MatchFileError("document contains no labeling records", len(lines))
    return labels, diag


def read_labeling(path: str) -> tuple[dict[int, int], dict]:
    with open(path, "r", encoding="utf-8") as f:
        return parse_labeling(f.read())


# ---------------------------------------------------------------------------
# Run configs


def read_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
    return config_from_dict(data)
