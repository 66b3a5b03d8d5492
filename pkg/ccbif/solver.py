from __future__ import annotations
import csv
import io
import itertools
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from importlib import resources

import numpy as np
from scipy.optimize import minimize
from tqdm import tqdm

from ccbif.config import resolve_threads
from ccbif.polysys import (
    AC_NAMES,
    DZIOBEK_NAMES,
    FAMILIES,
    PAIRS,
    MassParams,
    ac_to_dziobek,
    build_ac,
    build_dziobek,
    cayley_menger,
    cayley_menger_gradient,
    dziobek_to_ac,
)
from ccbif.symmetry import act, group_for, isotropy, relabel, relabellings

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-10
DEDUP_TOLERANCE = 1e-6
MAX_DISTANCE = 50.0
START_RANGE = (0.2, 3.0)
CHUNK = 2048
REASONS = ("singular-jacobian", "divergence", "positivity", "max-iterations", "outside-region")
TERMINATIONS = ("range-end", "fold-detected", "lost")
COLLINEAR_COUNT = 12


class ConvergenceError(RuntimeError):
    def __init__(self, reason, message=None):
        if reason not in REASONS:
            raise ValueError(f"unknown failure reason {reason!r}")
        self.reason = reason
        super().__init__(f"{reason}: {message}" if message else reason)


def distance_mask(system):
    return np.array([name.startswith("r") for name in system.variables])


def _region_failure(x, mask):
    r = x[mask]
    if not np.all(np.isfinite(x)):
        return "divergence"
    if np.any(r <= 0):
        return "positivity"
    if np.any(r > MAX_DISTANCE):
        return "outside-region"
    return None


def _face_slack(r):
    """Smallest triangle-inequality slack of each face, relative to its perimeter."""
    d = dict(zip(PAIRS, r))
    out = []
    for i, j, k in itertools.combinations((1, 2, 3, 4), 3):
        a, b, c = d[i, j], d[i, k], d[j, k]
        out.append(min(b + c - a, a + c - b, a + b - c) / (a + b + c))
    return np.array(out)


def shape_of(r, area_tol=1e-8, volume_tol=1e-9):
    """collinear, planar, spatial or unrealizable, from the six distances.

    A face is degenerate when its slack is below ``area_tol``; the
    Cayley-Menger determinant is compared with ``volume_tol`` after dividing
    by the sixth power of the largest distance.
    """
    r = np.asarray(r, dtype=float)
    slack = _face_slack(r)
    if np.any(slack < -area_tol):
        return "unrealizable"
    if np.all(slack < area_tol):
        return "collinear"
    volume = float(cayley_menger(r)) / float(np.max(r)) ** 6
    if volume < -volume_tol:
        return "unrealizable"
    if volume > volume_tol:
        return "spatial"
    return "planar"


class SolutionRecord:
    __slots__ = ("masses", "kind", "coordinates", "residual", "determinant", "isotropy", "certificate")

    def __init__(self, masses, kind, coordinates, residual, determinant, isotropy="trivial", certificate=None):
        self.masses = masses
        self.kind = kind
        self.coordinates = np.asarray(coordinates, dtype=float)
        self.residual = float(residual)
        self.determinant = float(determinant)
        self.isotropy = str(isotropy)
        self.certificate = certificate

    def __repr__(self):
        return f"SolutionRecord({self.kind}, m={float(self.m):g}, isotropy={self.isotropy})"

    @property
    def m(self):
        return self.masses.parameter

    @property
    def distances(self):
        return self.coordinates[2:] if self.kind == "dziobek" else self.coordinates

    @property
    def shape(self):
        return shape_of(self.distances)

    def to_json(self):
        return {
            **self.masses.to_json(),
            "system": self.kind,
            "coordinates": [float(x) for x in self.coordinates],
            "residual": self.residual,
            "determinant": self.determinant,
            "isotropy": self.isotropy,
            "shape": self.shape,
            "certificate": self.certificate,
        }

    @classmethod
    def from_json(cls, data):
        return cls(
            MassParams.from_json(data), data["system"], data["coordinates"], data["residual"],
            data["determinant"], data.get("isotropy", "trivial"), data.get("certificate"),
        )


def _isotropy_label(x, masses):
    if masses.pattern not in FAMILIES:
        return "trivial"
    return isotropy(x, group_for(masses.pattern)).label


def make_record(system, x, m=None):
    masses = system.masses if m is None else system.masses.with_parameter(m)
    _, jac = system.linearize(x, m)
    return SolutionRecord(
        masses, system.kind, x, system.residual_norm(x, m), np.linalg.det(jac), _isotropy_label(x, masses)
    )


def newton(system, x0, m=None, tol=DEFAULT_TOLERANCE, max_iter=50):
    """Damped Newton with backtracking on the residual; raises ConvergenceError on failure."""
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    x = np.array(x0, dtype=float)
    if x.shape != (system.dimension,):
        raise ValueError(f"start has shape {x.shape}, expected ({system.dimension},)")
    if not np.all(np.isfinite(x)):
        raise ValueError("start point must be finite")
    mask = distance_mask(system)
    reason = _region_failure(x, mask)
    if reason:
        raise ConvergenceError(reason, "start point is outside the admissible region")
    for _ in range(max_iter):
        residual, jac = system.linearize(x, m)
        try:
            step = np.linalg.solve(jac, -residual)
        except np.linalg.LinAlgError:
            raise ConvergenceError("singular-jacobian", f"at {x}") from None
        if not np.all(np.isfinite(step)):
            raise ConvergenceError("singular-jacobian", f"at {x}")
        scaled = system.residual_norm(x, m)
        if scaled < tol and np.max(np.abs(step)) <= 1e-8 * max(1.0, np.max(np.abs(x))):
            return make_record(system, x, m)
        current = np.max(np.abs(residual))
        t = 1.0
        while True:
            trial = x + t * step
            reason = _region_failure(trial, mask)
            if reason is None:
                value = np.max(np.abs(system.residual(trial, m)))
                if value <= (1 - 1e-4 * t) * current or system.residual_norm(trial, m) < tol:
                    break
            t /= 2
            if t < 1 / 1024:
                raise ConvergenceError(reason or "divergence", "line search failed")
        x = trial
    raise ConvergenceError("max-iterations", f"no convergence after {max_iter} iterations")


def _batch_newton(system, starts, m=None, max_iter=60):
    """Undamped Newton over a batch; returns the rows that settled inside the region."""
    x = np.array(starts, dtype=float)
    mask = distance_mask(system)
    settled = []
    for _ in range(max_iter):
        if not len(x):
            break
        residual, jac = system.linearize(x, m)
        det = np.linalg.det(jac)
        ok = np.isfinite(det) & (np.abs(det) > 1e-200) & np.all(np.isfinite(residual), axis=1)
        x, residual, jac = x[ok], residual[ok], jac[ok]
        if not len(x):
            break
        try:
            step = np.linalg.solve(jac, -residual[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = np.array([_solve_or_nan(a, -b) for a, b in zip(jac, residual)])
        size = np.max(np.abs(step), axis=1)
        # clip long steps to unit length
        x = x + step * np.minimum(1.0, 1.0 / np.maximum(size, 1e-300))[:, None]
        r = x[:, mask]
        alive = np.all(np.isfinite(x), axis=1) & np.all(r > 0, axis=1) & np.all(r <= MAX_DISTANCE, axis=1)
        done = alive & (size <= 1e-10 * np.maximum(1.0, np.max(np.abs(x), axis=1)))
        settled.extend(x[done])
        x = x[alive & ~done]
    return settled


def _solve_or_nan(a, b):
    try:
        return np.linalg.solve(a, b)
    except np.linalg.LinAlgError:
        return np.full(b.shape, np.nan)


def unique_points(points, tol=DEDUP_TOLERANCE):
    buckets = {}
    for p in points:
        buckets.setdefault(tuple(np.round(p, 6)), p)
    kept = []
    for p in buckets.values():
        if not any(np.max(np.abs(p - q)) < tol for q in kept):
            kept.append(p)
    return kept


def _multipliers(r, masses):
    """Least-squares lambda0, mu for a batch of distance rows already scaled to I = 1."""
    values = masses.floats()
    mm = np.array([values[i - 1] * values[j - 1] for i, j in PAIRS])
    total = float(values.sum())
    grad = np.stack(cayley_menger_gradient(list(r.T), float), axis=1)
    a = np.stack([2 * mm * r ** 3, total * r ** 2 * grad], axis=2)
    b = np.broadcast_to(mm * total, r.shape)
    ata = np.einsum("kij,kil->kjl", a, a)
    atb = np.einsum("kij,ki->kj", a, b)
    return np.linalg.solve(ata, atb[..., None])[..., 0]


def _symmetrize(r, masses):
    """Average every other row with its image under one of the family's involutions."""
    if masses.pattern not in FAMILIES:
        return r
    group = group_for(masses.pattern)
    involutions = [g for g in group if g != group.identity and group.compose(g, g) == group.identity]
    r = r.copy()
    rows = np.arange(1, len(r), 2)
    for n, g in enumerate(involutions):
        chosen = rows[n::len(involutions)]
        r[chosen] = (r[chosen] + act(g, r[chosen])) / 2
    return r


def random_starts(system, budget, seed):
    """Uniform distances in START_RANGE; half the rows are pushed onto fixed spaces of involutions."""
    if budget < 1:
        raise ValueError("budget must be at least 1")
    rng = np.random.default_rng(seed)
    r = _symmetrize(rng.uniform(*START_RANGE, size=(budget, 6)), system.masses)
    if system.kind != "dziobek":
        return r
    values = system.masses.floats()
    mm = np.array([values[i - 1] * values[j - 1] for i, j in PAIRS])
    inertia = (r ** 2 @ mm) / values.sum()
    r = r / np.sqrt(inertia)[:, None]
    return np.column_stack([_multipliers(r, system.masses), r])


def symmetry_closure(system, solutions, tol=DEDUP_TOLERANCE):
    if system.masses.pattern not in FAMILIES:
        return list(solutions)
    group = group_for(system.masses.pattern)
    out = list(solutions)
    for x in list(out):
        for g in group:
            image = act(g, np.asarray(x))
            if any(np.max(np.abs(image - y)) < tol for y in out):
                continue
            try:
                out.append(newton(system, image).coordinates)
            except ConvergenceError as exc:
                logger.warning("image under %s did not polish: %s", g.label, exc)
    return out


def _sorted_records(system, points):
    records = []
    for x in points:
        try:
            records.append(newton(system, x))
        except ConvergenceError as exc:
            logger.debug("dropping candidate: %s", exc)
    unique = unique_points([r.coordinates for r in records])
    keep = [r for r in records if any(r.coordinates is u for u in unique)]
    return sorted(keep, key=lambda r: tuple(r.coordinates))


def multistart_enumerate(system, budget=100000, seed=0, threads=None, progress=False):
    """Seeded random starts in [0.2, 3]^6, batch Newton, dedup, polish and symmetry closure."""
    starts = random_starts(system, budget, seed)
    chunks = [starts[i:i + CHUNK] for i in range(0, len(starts), CHUNK)]
    candidates = []
    with ThreadPoolExecutor(max_workers=resolve_threads(threads)) as pool:
        results = pool.map(lambda c: _batch_newton(system, c), chunks)
        for found in tqdm(results, total=len(chunks), desc="multistart", leave=False, disable=not progress):
            candidates.extend(found)
    points = unique_points(candidates)
    logger.info("multistart: %d starts, %d candidates, %d distinct", budget, len(candidates), len(points))
    polished = [r.coordinates for r in _sorted_records(system, points)]
    return _sorted_records(system, symmetry_closure(system, polished))


def positions_to_distances(positions):
    p = np.asarray(positions, dtype=float)
    return np.array([np.linalg.norm(p[i - 1] - p[j - 1]) for i, j in PAIRS])


def _seed_shapes():
    text = resources.files("ccbif").joinpath("data", "seeds.json").read_text()
    return json.loads(text)["shapes"]


def load_seeds(masses):
    """Equal-mass planar AC solutions from the shipped shapes, over all body relabellings."""
    equal = masses.with_parameter(1)
    if any(x != 1 for x in equal.masses):
        raise ValueError("seed shapes are equal-mass solutions")
    system = build_ac(equal)
    candidates = []
    for shape in _seed_shapes():
        r = positions_to_distances(shape["positions"])
        for bodies in relabellings():
            candidates.append(dziobek_to_ac(np.concatenate([[0.0, 0.0], relabel(r, bodies)]), equal))
    points = [rec.coordinates for rec in _sorted_records(system, candidates)]
    logger.debug("loaded %d planar seeds", len(points))
    return points


def _moulton(x, m):
    out = []
    total = m.sum()
    for i in range(4):
        force = sum(m[k] * (x[k] - x[i]) / abs(x[k] - x[i]) ** 3 for k in range(4) if k != i)
        out.append(force + total * x[i])
    return out


def _line_energy(t, m):
    """Potential plus M/2 times the inertia over log-gaps of one ordering, and its gradient."""
    gaps = np.exp(t)
    p = np.concatenate([[0.0], np.cumsum(gaps)])
    p = p - m @ p / m.sum()
    i, j = np.triu_indices(4, 1)
    value = np.sum(m[i] * m[j] / (p[j] - p[i])) + m.sum() / 2 * np.sum(m * p ** 2)
    by_position = m * np.array(_moulton(p, m))
    by_gap = np.cumsum(by_position[::-1])[::-1][1:]
    return value, gaps * by_gap


def _line_positions(masses, order):
    """Positions on the line with bodies in ``order``: the minimiser of the energy on that ordering."""
    m = masses.floats()
    ordered = m[list(order)]
    result = minimize(_line_energy, np.zeros(3), args=(ordered,), jac=True, method="BFGS",
                      options={"gtol": 1e-13, "maxiter": 1000})
    gaps = np.exp(result.x)
    p = np.concatenate([[0.0], np.cumsum(gaps)])
    x = np.empty(4)
    x[list(order)] = p - ordered @ p / ordered.sum()
    residual = np.max(np.abs(_moulton(x, m)))
    if residual > 1e-6:
        logger.warning("ordering %s: line residual %.3g after %d iterations", order, residual, result.nit)
    return x


def collinear_solutions(masses):
    """The 12 collinear solutions (one per ordering up to reversal) in AC scaling."""
    system = build_ac(masses)
    out = []
    for order in itertools.permutations(range(4)):
        if order[0] > order[-1]:
            continue
        x = _line_positions(masses, order)
        r = np.array([abs(x[i - 1] - x[j - 1]) for i, j in PAIRS])
        try:
            out.append(newton(system, r))
        except ConvergenceError as exc:
            logger.debug("ordering %s kept unpolished: %s", order, exc)
            out.append(make_record(system, r))
    return out


def tetrahedron(masses):
    return make_record(build_ac(masses), np.ones(6))


def is_central_configuration(record, collinear, tol=1e-6):
    """Whether an AC solution is a realizable central configuration.

    Planar records must satisfy the Dziobek equations after rescaling, spatial
    ones must have all distances equal and collinear ones must match one of
    ``collinear``.
    """
    shape = record.shape
    r = record.coordinates
    if shape == "planar":
        masses = record.masses
        residual = build_dziobek(masses).residual(ac_to_dziobek(r, masses))
        return bool(np.max(np.abs(residual)) < tol)
    if shape == "spatial":
        return bool(np.max(np.abs(r - r.mean())) < tol * r.mean())
    if shape == "collinear":
        return any(np.max(np.abs(r - c.coordinates)) < tol for c in collinear)
    return False


def _walk(system, x, m0, m1):
    branch = continue_branch(system, x, m0, m1)
    if branch.termination != "range-end":
        logger.debug("seed branch stopped at m=%g: %s", float(branch.ms[-1]), branch.termination)
        return None
    return branch.points[-1].coordinates


def continued_seeds(system):
    """Equal-mass planar seeds carried from m = 1 to the system's m, in the system's coordinates."""
    masses = system.masses
    if masses.pattern not in FAMILIES:
        return []
    m = float(masses.parameter)
    seeds = load_seeds(masses)
    if system.kind == "dziobek":
        equal = masses.with_parameter(1)
        seeds = [ac_to_dziobek(s, equal) for s in seeds]
    if m == 1.0:
        return seeds
    ends = [_walk(system, s, 1.0, m) for s in seeds]
    return [x for x in ends if x is not None]


def enumerate_solutions(system, budget=100000, seed=0, threads=None, progress=False):
    """All realizable solutions of ``system`` at its masses, sorted lexicographically.

    Candidates come from continued seeds, multistart and symmetry closure; the
    AC system also starts from the collinear solutions and the tetrahedron.
    """
    masses = system.masses
    points = continued_seeds(system)
    collinear = []
    if system.kind == "ac":
        collinear = collinear_solutions(masses)
        points += [r.coordinates for r in collinear] + [np.ones(6)]
    points += [r.coordinates for r in multistart_enumerate(system, budget, seed, threads, progress)]
    records = _sorted_records(system, symmetry_closure(system, unique_points(points)))
    if system.kind == "ac":
        kept = [r for r in records if is_central_configuration(r, collinear)]
    else:
        kept = [r for r in records if r.shape == "planar"]
    if len(kept) < len(records):
        logger.info("%s: dropped %d spurious or unrealizable solutions", system.kind, len(records) - len(kept))
    return kept


def count_table(family, m_values, budget=100000, seed=0, threads=None, progress=False):
    """Dziobek and AC counts per m, each from its own enumeration."""
    rows = []
    for m in m_values:
        if m <= 0:
            raise ValueError("masses must be positive")
        masses = MassParams.family(family, m)
        ac = enumerate_solutions(build_ac(masses), budget, seed, threads, progress)
        dziobek = enumerate_solutions(build_dziobek(masses), budget, seed, threads, progress)
        shapes = [r.shape for r in ac]
        collinear = shapes.count("collinear")
        if collinear != COLLINEAR_COUNT:
            logger.warning("m=%g: found %d collinear solutions", m, collinear)
        planar = shapes.count("planar")
        if planar != len(dziobek):
            logger.warning("m=%g: %d planar AC solutions against %d Dziobek", m, planar, len(dziobek))
        rows.append({
            "family": family, "m": m, "dziobek": len(dziobek), "ac": len(ac), "distinct": len(ac) - 1,
            "collinear": collinear, "budget": budget, "seed": seed,
        })
        logger.info("m=%g: %d Dziobek, %d AC", m, len(dziobek), len(ac))
    return rows


class Branch:
    __slots__ = ("family", "kind", "points", "termination")

    def __init__(self, family, kind, points=None, termination="range-end"):
        if termination not in TERMINATIONS:
            raise ValueError(f"unknown termination {termination!r}")
        self.family = family
        self.kind = kind
        self.points = list(points or [])
        self.termination = termination

    def __len__(self):
        return len(self.points)

    def __repr__(self):
        return f"Branch({self.family}, {len(self.points)} points, {self.termination})"

    @property
    def ms(self):
        return [float(p.m) for p in self.points]

    @property
    def span(self):
        ms = self.ms
        return min(ms), max(ms)

    def names(self):
        return DZIOBEK_NAMES if self.kind == "dziobek" else AC_NAMES

    def to_csv(self, header=None):
        buffer = io.StringIO()
        for key, value in (header or {}).items():
            buffer.write(f"# {key}={value}\n")
        buffer.write(f"# family={self.family}\n# system={self.kind}\n# termination={self.termination}\n")
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["m", *self.names(), "det", "residual", "isotropy"])
        for p in self.points:
            writer.writerow([repr(float(p.m)), *(repr(float(v)) for v in p.coordinates),
                             repr(p.determinant), repr(p.residual), p.isotropy])
        return buffer.getvalue()

    @classmethod
    def from_csv(cls, text):
        meta, rows = {}, []
        for line in text.splitlines():
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key.strip()] = value.strip()
            elif line.strip():
                rows.append(line)
        if not rows:
            raise ValueError("branch file has no column header")
        reader = csv.reader(rows)
        columns = next(reader)
        if columns[0] != "m" or columns[-3:] != ["det", "residual", "isotropy"]:
            raise ValueError(f"unexpected branch columns {columns}")
        kind = meta.get("system", "dziobek" if len(columns) == 12 else "ac")
        family = meta.get("family", "three-equal")
        branch = cls(family, kind, termination=meta.get("termination", "range-end"))
        for row in reader:
            if len(row) != len(columns):
                raise ValueError(f"malformed branch row {row}")
            m = float(row[0])
            masses = MassParams.family(family, m) if family in FAMILIES else MassParams(1, 1, 1, m)
            branch.points.append(SolutionRecord(
                masses, kind, [float(v) for v in row[1:-3]], float(row[-2]), float(row[-3]), row[-1]
            ))
        return branch


def continue_branch(system, x0, m0, m1, family=None, step=1e-3, min_step=1e-10, max_step=1e-2,
                    tol=DEFAULT_TOLERANCE, jump=0.1):
    """Natural-parameter continuation in m with a secant predictor and Newton corrector."""
    if m0 <= 0 or m1 <= 0:
        raise ValueError("m must be positive")
    family = family or system.masses.pattern
    start = newton(system, x0, m0, tol)
    branch = Branch(family, system.kind, [start])
    if m1 == m0:
        return branch
    direction = 1.0 if m1 > m0 else -1.0
    m, x, previous, h_previous = m0, start.coordinates, None, None
    largest = abs(start.determinant)
    successes = 0
    while direction * (m1 - m) > 1e-14:
        h = min(step, abs(m1 - m))
        target = m1 if h == abs(m1 - m) else m + direction * h
        guess = x if previous is None else x + (x - previous) * (h / h_previous)
        try:
            record = newton(system, guess, target, tol)
            if np.max(np.abs(record.coordinates - x)) > jump:
                raise ConvergenceError("divergence", "corrector jumped branches")
            if previous is not None and np.max(np.abs(record.coordinates - guess)) > 0.5 * max(
                    np.max(np.abs(guess - x)), h):
                raise ConvergenceError("divergence", "corrector left the predicted path")
            if record.isotropy != branch.points[-1].isotropy:
                raise ConvergenceError("divergence", "corrector changed isotropy")
        except ConvergenceError as exc:
            step /= 2
            successes = 0
            logger.debug("m=%.12g: step halved to %g (%s)", m, step, exc)
            if step < min_step:
                last = abs(branch.points[-1].determinant)
                fold = last < 1e-10 or last < 1e-2 * largest
                branch.termination = "fold-detected" if fold else "lost"
                logger.info("branch stopped at m=%.12g: %s", m, branch.termination)
                return branch
            continue
        branch.points.append(record)
        largest = max(largest, abs(record.determinant))
        previous, h_previous, x, m = x, h, record.coordinates, target
        successes += 1
        if successes >= 3:
            step = min(2 * step, max_step)
            successes = 0
    return branch


FOLD_STARTS = {
    # centred triangle with body 3 at the centre, m4 on the triangle
    "three-equal": (
        [3 * (1 + math.sqrt(3)) / 2, 3 * (3 * math.sqrt(3) - 1) / 16,
         1.0, 1 / math.sqrt(3), 1.0, 1 / math.sqrt(3), 1.0, 1 / math.sqrt(3)],
        1.0, 1.1,
    ),
    # body 1 at the centre
    "two-pairs": (
        [3 * (1 + math.sqrt(3)) / 2, 3 * (3 * math.sqrt(3) - 1) / 16,
         1 / math.sqrt(3), 1 / math.sqrt(3), 1 / math.sqrt(3), 1.0, 1.0, 1.0],
        1.0, 0.9,
    ),
}


def fold_start(family):
    """Equal-mass Dziobek start whose branch runs into the family's fold, and its m range."""
    try:
        x0, m0, m1 = FOLD_STARTS[family]
    except KeyError:
        raise ValueError(f"unknown family {family!r}") from None
    return np.array(x0), m0, m1
