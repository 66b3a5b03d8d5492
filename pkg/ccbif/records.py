from __future__ import annotations
import csv
import io
import json
import logging
from fractions import Fraction
from pathlib import Path
from typing import List, Optional

import jmespath
from mpmath import iv
from pydantic import BaseModel, ConfigDict, model_validator

from ccbif.interval import disjoint
from ccbif.solver import Branch

logger = logging.getLogger(__name__)

# AC solutions beyond the planar Dziobek ones: 12 collinear and the tetrahedron
NON_PLANAR = 13


def question_mark(text):
    """Interval for a value written with a trailing '?': the last digit is uncertain by one."""
    text = str(text).strip()
    if not text.endswith("?"):
        raise ValueError(f"{text!r} is not in question-mark notation")
    digits = text[:-1]
    value = Fraction(digits)
    decimals = len(digits.split(".", 1)[1]) if "." in digits else 0
    ulp = Fraction(1, 10 ** decimals)
    lo, hi = value - ulp, value + ulp
    return iv.mpf((iv.mpf(lo.numerator) / lo.denominator, iv.mpf(hi.numerator) / hi.denominator))


def overlaps(a, b):
    return not disjoint(a, b)


def dumps(data):
    return json.dumps(data, indent=2, sort_keys=True)


def find(data, expression, default=None):
    """jmespath search; ``a || b`` tries each alternative until one is not null."""
    for expr in (part.strip() for part in expression.split(" || ")):
        result = jmespath.search(expr, data)
        if result is not None:
            return result
    return default


def render(data, query=None):
    if query:
        data = find(data, query)
    if isinstance(data, str):
        return data
    return dumps(data)


def write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text if text.endswith("\n") else text + "\n")
    return path


def parse_header(text):
    """``# key=value`` lines at the top of a CSV file."""
    meta = {}
    for line in text.splitlines():
        if not line.startswith("#"):
            break
        key, _, value = line[1:].strip().partition("=")
        meta[key.strip()] = value.strip()
    return meta


class CountRow(BaseModel):
    model_config = ConfigDict(extra="forbid")

    family: str
    m: float
    dziobek: int
    ac: int
    distinct: int
    collinear: int
    budget: int
    seed: int

    @model_validator(mode="after")
    def _consistent(self):
        if self.ac - self.dziobek != NON_PLANAR:
            logger.warning("m=%g: AC count %d is not Dziobek count %d + %d", self.m, self.ac, self.dziobek,
                           NON_PLANAR)
        return self


class Region(BaseModel):
    lo: float
    hi: float
    branches: int

    @property
    def is_point(self):
        return self.lo == self.hi

    @property
    def dziobek(self):
        return self.branches

    @property
    def ac(self):
        return self.branches + NON_PLANAR

    @property
    def distinct(self):
        return self.ac - 1

    def label(self):
        if self.is_point:
            return f"m = {self.lo:.12g}"
        return f"({self.lo:.12g}, {self.hi:.12g})"


def read_branches(paths):
    if not paths:
        raise ValueError("report needs at least one branch file")
    out = []
    for path in paths:
        path = Path(path)
        if not path.exists():
            raise ValueError(f"branch file {path} does not exist")
        branch = Branch.from_csv(path.read_text())
        if not len(branch):
            raise ValueError(f"branch file {path} has no points")
        out.append((path.stem, branch))
    return out


def regions(branches):
    """Open intervals and breakpoints between branch endpoints, with covering counts."""
    spans = [b.span for _, b in branches]
    points = sorted({x for span in spans for x in span})
    out = []
    for i, x in enumerate(points):
        out.append(Region(lo=x, hi=x, branches=sum(1 for lo, hi in spans if lo <= x <= hi)))
        if i + 1 < len(points):
            nxt = points[i + 1]
            out.append(Region(lo=x, hi=nxt, branches=sum(1 for lo, hi in spans if lo <= x and nxt <= hi)))
    return out


def diagram_csv(branches, header=None):
    """One row per branch point: the branch name, m, coordinates and isotropy."""
    kinds = {b.kind for _, b in branches}
    if len(kinds) != 1:
        raise ValueError("branch files mix Dziobek and AC coordinates")
    names = branches[0][1].names()
    buffer = io.StringIO()
    for key, value in (header or {}).items():
        buffer.write(f"# {key}={value}\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["branch", "m", *names, "isotropy"])
    for name, branch in branches:
        for p in branch.points:
            writer.writerow([name, repr(float(p.m)), *(repr(float(v)) for v in p.coordinates), p.isotropy])
    return buffer.getvalue()


def summary_markdown(rows: List[Region], title: Optional[str] = None):
    lines = [f"## {title}", ""] if title else []
    lines += [
        "| m | branches | Dziobek | AC | geometrically distinct |",
        "|---|---|---|---|---|",
    ]
    for row in rows:
        lines.append(f"| {row.label()} | {row.branches} | {row.dziobek} | {row.ac} | {row.distinct} |")
    return "\n".join(lines) + "\n"
