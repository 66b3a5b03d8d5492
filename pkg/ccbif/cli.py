from __future__ import annotations
import contextlib
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import typer
from pydantic import ValidationError
from rich import print as rprint
from rich.console import Console
from rich.logging import RichHandler
from rich.markdown import Markdown
from rich.panel import Panel
from rich.table import Table

from ccbif.bifurcation import (
    CATALOGUE_TOLERANCE,
    ReductionError,
    classify,
    ls_reduce,
    nearest_singular_point,
    verify_stored,
)
from ccbif.cache import CacheConfig
from ccbif.config import build_config, parse_masses
from ccbif.interval import CertificationError, FixedMass, PrecisionError, certify, krawczyk
from ccbif.polysys import build_system, dziobek_to_ac
from ccbif.records import (
    CountRow,
    diagram_csv,
    read_branches,
    regions,
    render,
    summary_markdown,
    write_text,
)
from ccbif.solver import (
    Branch,
    ConvergenceError,
    continue_branch,
    count_table,
    enumerate_solutions,
    fold_start,
    newton,
)
from ccbif.symmetry import group_for, orbit_dedup

logger = logging.getLogger(__name__)

app = typer.Typer(add_completion=False, help="Certified bifurcations of four-body central configurations")

EXIT_USAGE = 2
EXIT_INCONCLUSIVE = 3
EXIT_NUMERIC = 4


def _configure_logging(verbose):
    level = logging.WARNING if verbose <= 0 else logging.INFO if verbose == 1 else logging.DEBUG
    package = logging.getLogger("ccbif")
    for handler in list(package.handlers):
        if isinstance(handler, RichHandler):
            package.removeHandler(handler)
    package.addHandler(RichHandler(console=Console(stderr=True), show_path=False, markup=False))
    package.setLevel(level)


def _fail(message, code):
    rprint(f"[red]error:[/red] {message}", file=sys.stderr)
    raise typer.Exit(code=code)


@contextlib.contextmanager
def _exit_codes():
    try:
        yield
    except (ValidationError, ValueError) as exc:
        _fail(exc, EXIT_USAGE)
    except (CertificationError, PrecisionError) as exc:
        _fail(exc, EXIT_INCONCLUSIVE)
    except (ConvergenceError, ReductionError) as exc:
        _fail(exc, EXIT_NUMERIC)


def _progress():
    return sys.stderr.isatty()


def _parse_point(text):
    if text is None:
        return None
    try:
        return [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise ValueError(f"--x expects comma-separated numbers, got {text!r}") from None


def _emit(data, out=None, query=None):
    text = render(data, query)
    if out:
        write_text(out, text)
        rprint(f"[green] * [/green] Saved to {out}", file=sys.stderr)
    else:
        typer.echo(text)


def _family(family, masses):
    if masses is not None:
        return "general"
    return family


@app.command()
def solve(
    family = typer.Option(None, "--family", "-f"),
    m = typer.Option(None, "--m"),
    m1 = typer.Option(None, "--m1"),
    m2 = typer.Option(None, "--m2"),
    m3 = typer.Option(None, "--m3"),
    m4 = typer.Option(None, "--m4"),
    system = typer.Option(None, "--system", "-s"),
    budget = typer.Option(None, "--budget", "-b"),
    seed = typer.Option(None, "--seed"),
    threads = typer.Option(None, "--threads", "-j"),
    out = typer.Option(None, "--out", "-o"),
    query = typer.Option(None, "--query", "-q", help="jmespath expression, '||' for fallbacks"),
    config = typer.Option(None, "--config", help="key = value settings file"),
    verbose = typer.Option(0, "--verbose", "-v", count=True),
):
    """Enumerate all solutions at fixed masses."""
    _configure_logging(verbose)
    with _exit_codes():
        masses = parse_masses([m1, m2, m3, m4])
        run = build_config(config, command="solve", family=_family(family, masses), m=m, masses=masses,
                           system=system, budget=budget, seed=seed, threads=threads, out=out)
        poly = build_system(run.system, run.mass_params())
        found = enumerate_solutions(poly, run.budget, run.seed, run.resolved_threads(), _progress())
        data = {
            "header": run.header(),
            "count": len(found),
            "solutions": [r.to_json() for r in found],
        }
        if poly.masses.pattern in ("three-equal", "two-pairs"):
            orbits = orbit_dedup([r.coordinates for r in found], group_for(poly.masses.pattern))
            data["orbits"] = [
                {"representative": [float(v) for v in o.representative], "size": o.size, "members": o.members}
                for o in orbits
            ]
        _emit(data, run.out, query)


@app.command("continue")
def continue_(
    family = typer.Option(None, "--family", "-f"),
    m = typer.Option(None, "--m"),
    system = typer.Option(None, "--system", "-s"),
    x = typer.Option(None, "--x", help="comma-separated start coordinates"),
    m_end = typer.Option(None, "--m-end"),
    out = typer.Option(None, "--out", "-o"),
    config = typer.Option(None, "--config"),
    verbose = typer.Option(0, "--verbose", "-v", count=True),
):
    """Continue one solution in m and write the branch as CSV."""
    _configure_logging(verbose)
    with _exit_codes():
        run = build_config(config, command="continue", family=family, m=m, system=system, out=out)
        if run.family == "general":
            raise ValueError("continue runs along the three-equal or two-pairs family")
        start = _parse_point(x)
        m0, m1 = run.m, None if m_end is None else float(m_end)
        if start is None:
            start, default_m0, default_m1 = fold_start(run.family)
            m0 = default_m0 if m0 is None else m0
            m1 = default_m1 if m1 is None else m1
            if run.system == "ac":
                start = dziobek_to_ac(start, run.mass_params(m0))
        if m0 is None or m1 is None:
            raise ValueError("continue needs --m and --m-end with --x")
        poly = build_system(run.system, run.mass_params(m0))
        branch = continue_branch(poly, np.asarray(start, dtype=float), m0, m1, family=run.family)
        logger.info("branch of %d points, %s", len(branch), branch.termination)
        text = branch.to_csv(header=run.header())
        if run.out:
            write_text(run.out, text)
            rprint(f"[green] * [/green] Saved {len(branch)} points to {run.out} ({branch.termination})",
                   file=sys.stderr)
        else:
            typer.echo(text, nl=False)


@app.command()
def verify(
    family = typer.Option(None, "--family", "-f"),
    m = typer.Option(None, "--m"),
    system = typer.Option(None, "--system", "-s"),
    x = typer.Option(None, "--x", help="comma-separated coordinates of a regular solution"),
    radius = typer.Option(None, "--radius", "-r", help="single Krawczyk test at this radius"),
    precision = typer.Option(None, "--precision", "-p"),
    out = typer.Option(None, "--out", "-o"),
    query = typer.Option(None, "--query", "-q"),
    config = typer.Option(None, "--config"),
    verbose = typer.Option(0, "--verbose", "-v", count=True),
):
    """Certify a regular solution with the Krawczyk test at fixed masses."""
    _configure_logging(verbose)
    with _exit_codes():
        run = build_config(config, command="verify", family=family, m=m, system=system,
                           precision=precision, out=out)
        point = _parse_point(x)
        if point is None:
            raise ValueError("verify needs --x")
        poly = build_system(run.system, run.mass_params())
        polished = newton(poly, point, tol=run.tolerance).coordinates
        target = FixedMass(poly)
        if radius is not None:
            certificate = krawczyk(target, list(polished), float(radius), run.precision)
        else:
            certificate = certify(target, list(polished), run.precision)
        data = {
            "header": run.header(),
            "certificate_id": certificate.certificate_id(),
            **certificate.to_json(),
        }
        _emit(data, run.out, query)
        if certificate.verdict != "unique-zero":
            _fail(f"Krawczyk verdict {certificate.verdict}: {certificate.reason}", EXIT_INCONCLUSIVE)


@app.command("verify-certificate")
def verify_certificate(
    path = typer.Argument(..., help="certificate JSON written by verify or classify"),
    verbose = typer.Option(0, "--verbose", "-v", count=True),
):
    """Recompute a stored certificate and compare it bit for bit."""
    _configure_logging(verbose)
    with _exit_codes():
        if not Path(path).exists():
            raise ValueError(f"certificate file {path} does not exist")
        data = json.loads(Path(path).read_text())
        try:
            reproduced = verify_stored(data)
        except KeyError as exc:
            raise ValueError(f"certificate is missing field {exc}") from None
        if not reproduced:
            _fail(f"{path}: certificate did not reproduce", EXIT_INCONCLUSIVE)
        rprint(f"[green] * [/green] {path}: certificate reproduced")


def _branch_guess(path):
    branch = Branch.from_csv(Path(path).read_text())
    if branch.kind != "dziobek":
        raise ValueError("classify needs a Dziobek branch file")
    if not len(branch):
        raise ValueError(f"branch file {path} has no points")
    closest = min(branch.points, key=lambda p: abs(p.determinant))
    return branch.family, list(closest.coordinates), float(closest.m)


def _sketch(certificate):
    lines = [f"box width {float(certificate.point.x.max_width()):.3g}"] + certificate.sketch()
    return Panel("\n".join(lines), title=f"{certificate.family}: {certificate.classification}", expand=False)


@app.command("classify")
def classify_(
    family = typer.Option(None, "--family", "-f"),
    m = typer.Option(None, "--m"),
    x = typer.Option(None, "--x", help="comma-separated Dziobek guess"),
    branch = typer.Option(None, "--branch", help="Dziobek branch CSV ending near the point"),
    precision = typer.Option(None, "--precision", "-p"),
    route = typer.Option("auto", "--route", help="auto, restricted or direct"),
    out = typer.Option(None, "--out", "-o"),
    query = typer.Option(None, "--query", "-q"),
    cache = typer.Option(False, "--cache", help="reuse results stored under ~/.ccbif/cache"),
    config = typer.Option(None, "--config"),
    verbose = typer.Option(0, "--verbose", "-v", count=True),
):
    """Certify a fold or pitchfork and classify it."""
    _configure_logging(verbose)
    with _exit_codes():
        run = build_config(config, command="classify", family=family, m=m, precision=precision,
                           system="dziobek", out=out)
        guess = _parse_point(x)
        symmetry = None
        if guess is not None:
            if run.m is None:
                raise ValueError("--x needs --m")
            name, point_m = run.family, run.m
        elif branch is not None:
            name, guess, point_m = _branch_guess(branch)
        else:
            if run.m is None:
                raise ValueError("classify needs --m, --x or --branch")
            entry = nearest_singular_point(run.family, run.m)
            if entry is None:
                raise ValueError(f"no catalogued singular point of {run.family} within "
                                 f"{CATALOGUE_TOLERANCE} of m = {run.m}; pass --x")
            name, guess, point_m, symmetry = entry["family"], entry["x"], entry["m"], entry["symmetry"]
        header = run.header()
        key = {**header, "x": guess, "m": point_m, "route": route}
        store = CacheConfig() if cache else None
        data = store.get("classify", key) if store else None
        if data is None:
            certificate = classify(name, point_m, guess, run.precision, symmetry, route)
            rprint(_sketch(certificate), file=sys.stderr)
            data = {"header": header, **certificate.to_json()}
            if store:
                store.set("classify", key, data)
        _emit(data, run.out, query)
        if data["classification"] == "unresolved":
            _fail("Sotomayor conditions could not be decided", EXIT_INCONCLUSIVE)


@app.command()
def count(
    family = typer.Option(None, "--family", "-f"),
    m: List[float] = typer.Option(..., "--m", help="repeat for several masses"),
    budget = typer.Option(None, "--budget", "-b"),
    seed = typer.Option(None, "--seed"),
    threads = typer.Option(None, "--threads", "-j"),
    out = typer.Option(None, "--out", "-o"),
    query = typer.Option(None, "--query", "-q"),
    config = typer.Option(None, "--config"),
    verbose = typer.Option(0, "--verbose", "-v", count=True),
):
    """Count Dziobek, AC and geometrically distinct solutions over a list of masses."""
    _configure_logging(verbose)
    with _exit_codes():
        values = list(m)
        if not values:
            raise ValueError("count needs at least one --m")
        sweep = (min(values), max(values)) if len(set(values)) > 1 else None
        run = build_config(config, command="count", family=family, m=values[0], m_range=sweep,
                           budget=budget, seed=seed, threads=threads, out=out)
        if run.family == "general":
            raise ValueError("count runs along the three-equal or two-pairs family")
        rows = [CountRow(**row) for row in count_table(run.family, values, run.budget, run.seed,
                                                       run.resolved_threads(), _progress())]
        table = Table(title=f"{run.family} solution counts")
        for column in ("m", "Dziobek", "AC", "distinct", "collinear"):
            table.add_column(column, justify="right")
        for row in rows:
            table.add_row(f"{row.m:g}", str(row.dziobek), str(row.ac), str(row.distinct), str(row.collinear))
        rprint(table, file=sys.stderr)
        _emit({"header": run.header(), "rows": [row.model_dump() for row in rows]}, run.out, query)


@app.command("ls-reduce")
def ls_reduce_(
    out = typer.Option(None, "--out", "-o"),
    query = typer.Option(None, "--query", "-q"),
    verbose = typer.Option(0, "--verbose", "-v", count=True),
):
    """Second-order Lyapunov-Schmidt reduction at the equilateral double singularity."""
    _configure_logging(verbose)
    with _exit_codes():
        expansion = ls_reduce()
        _emit(expansion.to_json(), out, query)


@app.command()
def report(
    files: Optional[List[Path]] = typer.Argument(None, help="branch CSV files"),
    out = typer.Option(None, "--out", "-o", help="diagram CSV; the summary goes next to it as .md"),
    verbose = typer.Option(0, "--verbose", "-v", count=True),
):
    """Merge branch files into plot data and a per-region count summary."""
    _configure_logging(verbose)
    with _exit_codes():
        branches = read_branches(files or [])
        families = {b.family for _, b in branches}
        diagram = diagram_csv(branches, header={"families": ",".join(sorted(families))})
        summary = summary_markdown(regions(branches), title="Solutions per m-region")
        if out:
            write_text(out, diagram)
            write_text(Path(out).with_suffix(".md"), summary)
            rprint(f"[green] * [/green] Saved to {out} and {Path(out).with_suffix('.md')}", file=sys.stderr)
        else:
            typer.echo(diagram, nl=False)
            rprint(Markdown(summary), file=sys.stderr)


def _main_():
    app()


if __name__ == "__main__":
    _main_()
