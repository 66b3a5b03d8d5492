from __future__ import annotations
import itertools
import json
import logging
import math
from collections import Counter
from importlib import resources

import numpy as np
import sympy as sp
from mpmath import iv, mp
from sympy.polys.matrices import DomainMatrix
from sympy.polys.matrices.exceptions import DMNonInvertibleMatrixError

from ccbif.interval import (
    DEFAULT_PRECISION,
    Box,
    CertificationError,
    FixedMass,
    KernelPair,
    KrawczykCertificate,
    certify,
    cofactors,
    determinant,
    disjoint,
    excludes_zero,
    interval_to_json,
    kernel_vectors,
    lower,
    midpoint,
    precision,
    verify_certificate,
)
from ccbif.polysys import FAMILIES, M_STAR, SQRT3, MassParams, build_ac, build_dziobek, build_system
from ccbif.solver import ConvergenceError, newton, unique_points
from ccbif.symmetry import act, get_group, group_for, isotropy

logger = logging.getLogger(__name__)

CLASSES = ("fold", "transcritical", "pitchfork-supercritical", "pitchfork-subcritical", "unresolved")
SWITCH_STEP = 1e-3
SWITCH_OFFSETS = (1e-4, 1e-3, 1e-2)
CATALOGUE_TOLERANCE = 5e-3
DRIFT_LIMIT = 0.1


class ReductionError(ArithmeticError):
    pass


def _cycles(permutation):
    reps, slot = [], [None] * len(permutation)
    for start in range(len(permutation)):
        if slot[start] is not None:
            continue
        k = start
        while slot[k] is None:
            slot[k] = len(reps)
            k = permutation[k]
        reps.append(start)
    return tuple(reps), tuple(slot)


class AugmentedSystem:
    """G(y, m) = (F_sel(E y, m), det D_x F(E y, m)) on the fixed space of ``symmetry``.

    ``E`` copies each reduced coordinate to every position of its cycle under
    the symmetry's permutation; ``F_sel`` keeps one equation per cycle. With no
    symmetry this is the plain fold-augmented system in all variables plus m.
    """

    def __init__(self, system, symmetry=None):
        self.system = system
        self.symmetry = symmetry
        n = system.dimension
        permutation = symmetry.permutation_for(n) if symmetry is not None else tuple(range(n))
        self.reps, self.slot = _cycles(permutation)

    def __repr__(self):
        label = self.symmetry.label if self.symmetry is not None else "none"
        return f"AugmentedSystem({self.system.kind}, symmetry={label})"

    @property
    def dimension(self):
        return len(self.reps) + 1

    @property
    def names(self):
        return tuple(self.system.variables[k] for k in self.reps) + ("m",)

    @property
    def route(self):
        return "direct" if self.symmetry is None else "restricted"

    def embed(self, point):
        point = list(point)
        if len(point) != self.dimension:
            raise ValueError(f"point has {len(point)} coordinates, augmented dimension is {self.dimension}")
        return [point[s] for s in self.slot], point[-1]

    def reduce(self, x, m):
        return [x[k] for k in self.reps] + [m]

    def _fold(self, full, ctx):
        out = [ctx.mpf(0) for _ in self.reps]
        for k, value in enumerate(full[:-1]):
            out[self.slot[k]] = out[self.slot[k]] + value
        return out + [full[-1]]

    def values(self, point, ctx):
        x, m = self.embed(point)
        residual = self.system.evaluate(x, m, ctx)
        jac = self.system.jacobian_at(x, m, ctx)
        return [residual[k] for k in self.reps] + [determinant(jac, ctx)]

    def jacobian(self, point, ctx):
        x, m = self.embed(point)
        args = self.system.point(x, m)
        system = self.system
        n = system.dimension
        rows = []
        for i in self.reps:
            rows.append(self._fold([system.derivative(i, (j,)).evaluate(args, ctx) for j in range(n + 1)], ctx))
        jac = [[system.derivative(a, (b,)).evaluate(args, ctx) for b in range(n)] for a in range(n)]
        cof = cofactors(jac, ctx)
        gradient = []
        for z in range(n + 1):
            total = ctx.mpf(0)
            for a in range(n):
                for b in range(n):
                    second = system.derivative(a, (b, z))
                    if not second.is_zero():
                        total = total + cof[a][b] * second.evaluate(args, ctx)
            gradient.append(total)
        rows.append(self._fold(gradient, ctx))
        return rows

    def mass(self, box):
        return box[-1]

    def describe(self):
        out = {**self.system.describe(), "augmented": True, "symmetry": None, "group": None}
        if self.symmetry is not None:
            out["symmetry"] = self.symmetry.label
            out["group"] = self.symmetry.group
        return out


def system_from_description(description):
    """Rebuild the map a stored Krawczyk certificate was computed for."""
    masses = MassParams.from_json(description)
    system = build_system(description["kind"], masses)
    if system.digest() != description.get("digest"):
        raise ValueError("certificate equations do not match the equations built here")
    if not description.get("augmented"):
        return FixedMass(system)
    symmetry = None
    if description.get("symmetry"):
        symmetry = get_group(description["group"]).element(description["symmetry"])
    return AugmentedSystem(system, symmetry)


def verify_stored(data):
    """Re-run a stored certificate; accepts a bare Krawczyk certificate or a classification."""
    certificate = KrawczykCertificate.from_json(data.get("krawczyk", data))
    return verify_certificate(system_from_description(certificate.system), certificate)


def refine(system, guess, bits=DEFAULT_PRECISION, max_iter=40):
    """Newton in mp arithmetic on a square map; accurate to roughly ``bits``."""
    n = system.dimension
    if len(guess) != n:
        raise ValueError(f"guess has {len(guess)} coordinates, system dimension is {n}")
    with precision(bits):
        y = mp.matrix([mp.mpf(v) for v in guess])
        threshold = mp.ldexp(1, 24 - bits)
        for _ in range(max_iter):
            point = [y[i] for i in range(n)]
            residual = mp.matrix(system.values(point, mp))
            try:
                step = mp.lu_solve(mp.matrix(system.jacobian(point, mp)), residual)
            except ZeroDivisionError:
                raise ConvergenceError("singular-jacobian", "augmented Jacobian is singular at the guess") from None
            y = y - step
            if not all(mp.isfinite(y[i]) for i in range(n)):
                raise ConvergenceError("divergence", "mp Newton left the finite range")
            if mp.norm(step, mp.inf) <= threshold * (1 + mp.norm(y, mp.inf)):
                return [y[i] for i in range(n)]
    raise ConvergenceError("max-iterations", f"mp Newton did not settle in {max_iter} steps")


class SingularPoint:
    __slots__ = ("system", "symmetry", "certificate", "x", "m", "kernel", "transported_by")

    def __init__(self, system, symmetry, certificate, x, m, kernel, transported_by=None):
        self.system = system
        self.symmetry = symmetry
        self.certificate = certificate
        self.x = x
        self.m = m
        self.kernel = kernel
        self.transported_by = transported_by

    def __repr__(self):
        return f"SingularPoint(m={mp.nstr(midpoint(self.m), 15)}, route={self.route})"

    @property
    def precision(self):
        return self.certificate.precision

    @property
    def route(self):
        return "direct" if self.symmetry is None else "restricted"

    def to_json(self):
        return {
            "m": interval_to_json(self.m),
            "x": self.x.to_json(),
            "v": self.kernel.v.to_json(),
            "w": self.kernel.w.to_json(),
            "v_index": self.kernel.v_index,
            "w_index": self.kernel.w_index,
            "rank": self.kernel.rank,
            "route": self.route,
            "symmetry": self.symmetry.label if self.symmetry is not None else None,
            "transported_by": self.transported_by,
            "precision": self.precision,
        }


def locate_singularity(system, x_guess, m_guess, bits=DEFAULT_PRECISION, symmetry=None):
    """Certify a solution with det D_x F = 0 and enclose its one-dimensional kernels.

    With ``symmetry`` the search is restricted to its fixed space, which is what
    makes a symmetry-breaking singular point a regular zero of the augmented map.
    """
    augmented = AugmentedSystem(system, symmetry)
    start = augmented.reduce(list(x_guess), m_guess)
    try:
        refined = refine(augmented, start, bits)
    except ConvergenceError as exc:
        raise CertificationError(f"no singular point near the guess ({exc})",
                                 "start closer to a fold or pitchfork") from None
    drift = max(abs(float(a) - float(b)) for a, b in zip(refined, start))
    if drift > DRIFT_LIMIT:
        raise CertificationError(f"augmented Newton moved {drift:.3g} away from the guess",
                                 "start closer to a fold or pitchfork")
    certificate = certify(augmented, refined, bits)
    with precision(certificate.precision):
        x, m = augmented.embed(certificate.image.components)
        if lower(m) <= 0:
            raise CertificationError("certified mass interval is not positive")
        kernel = kernel_vectors(system.jacobian_at(x, m, iv))
    logger.info("certified singular point at m=%s (%s route, %d bits)",
                mp.nstr(midpoint(m), 20), augmented.route, certificate.precision)
    return SingularPoint(system, symmetry, certificate, Box(x), m, kernel)


class Z2Report:
    __slots__ = ("element", "relation", "vanishing", "w_relation")

    def __init__(self, element, relation, vanishing, w_relation=None):
        self.element = element
        self.relation = relation
        self.vanishing = tuple(vanishing)
        self.w_relation = w_relation

    def to_json(self):
        return {
            "element": self.element,
            "relation": self.relation,
            "w_relation": self.w_relation,
            "vanishing": list(self.vanishing),
        }


def _parity(element, vector):
    image = act(element, vector)
    same = not any(disjoint(a, b) for a, b in zip(image, vector))
    flipped = not any(disjoint(a, -b) for a, b in zip(image, vector))
    if same and flipped:
        raise CertificationError(
            f"kernel enclosure cannot tell R from -R for {element.label}",
            "try --precision 512",
        )
    if not same and not flipped:
        raise CertificationError(f"kernel vector is neither fixed nor reversed by {element.label}")
    return -1 if flipped else 1


def z2_vanishing_check(element, x, v, w=None):
    """Decide Rv = v or Rv = -v for an involution R fixing the singular point ``x``.

    When Rv = -v the terms w^T F_m and w^T D^2F(v, v) are odd under R and
    vanish exactly, so q1 and q3 are reported as forced zeros.
    """
    if element.permutation == tuple(range(6)):
        return Z2Report(element.label, "Rv=v", (), "Rw=w" if w is not None else None)
    if any(disjoint(a, b) for a, b in zip(act(element, x), x)):
        raise CertificationError(f"singular point is not fixed by {element.label}")
    parity = _parity(element, v)
    w_relation = None
    if w is not None:
        w_relation = "Rw=-w" if _parity(element, w) < 0 else "Rw=w"
    if parity < 0:
        return Z2Report(element.label, "Rv=-v", ("q1", "q3"), w_relation)
    return Z2Report(element.label, "Rv=v", (), w_relation)


def _directional(system, args, w, v, order, extra=()):
    # w^T D^order (D_extra F)(v, ..., v), summed over sorted multi-indices
    n = system.dimension
    total = iv.mpf(0)
    for combo in itertools.combinations_with_replacement(range(n), order):
        weight = math.factorial(order)
        for count in Counter(combo).values():
            weight //= math.factorial(count)
        direction = iv.mpf(weight)
        for k in combo:
            direction = direction * v[k]
        for i in range(n):
            poly = system.derivative(i, combo + extra)
            if not poly.is_zero():
                total = total + w[i] * poly.evaluate(args, iv) * direction
    return total


def _sign(value):
    return 1 if lower(value) > 0 else -1


def _decide(q, forced):
    def nonzero(name):
        return name not in forced and excludes_zero(q[name])

    if nonzero("q1") and nonzero("q3"):
        return "fold", "below" if _sign(q["q1"]) * _sign(q["q3"]) > 0 else "above"
    if "q1" in forced and "q3" not in forced and nonzero("q2") and nonzero("q3"):
        return "transcritical", "both"
    if {"q1", "q3"} <= set(forced) and nonzero("q2") and nonzero("q4"):
        if _sign(q["q2"]) * _sign(q["q4"]) < 0:
            return "pitchfork-supercritical", "above"
        return "pitchfork-subcritical", "below"
    return "unresolved", None


class BifurcationCertificate:
    """Certified singular point with its Sotomayor quantities and verdict.

    ``side`` names where the bifurcating solutions live: ``below`` or ``above``
    m0, or ``both`` for a transcritical crossing.
    """

    __slots__ = ("point", "q", "forced", "z2", "classification", "side")

    def __init__(self, point, q, forced, z2, classification, side):
        if classification not in CLASSES:
            raise ValueError(f"unknown classification {classification!r}")
        self.point = point
        self.q = q
        self.forced = tuple(forced)
        self.z2 = z2
        self.classification = classification
        self.side = side

    def __repr__(self):
        return f"BifurcationCertificate({self.classification}, m={mp.nstr(midpoint(self.m), 15)})"

    @property
    def m(self):
        return self.point.m

    @property
    def family(self):
        return self.point.system.masses.pattern

    @property
    def symmetry_route(self):
        return "Z2-lemma" if self.z2 is not None and self.z2.vanishing else "direct"

    @property
    def resolved(self):
        return self.classification != "unresolved"

    def q_json(self, name):
        if name in self.forced:
            return {"exact": "0"}
        return interval_to_json(self.q[name])

    def sketch(self):
        """Short human-readable argument for the verdict."""
        lines = [
            f"Krawczyk: unique zero of the augmented system ({self.point.route} route, "
            f"{self.point.precision} bits)",
            f"kernel: rank D_xF = {self.point.kernel.rank}, v and w normalised at "
            f"coordinates {self.point.kernel.v_index} and {self.point.kernel.w_index}",
        ]
        if self.z2 is not None:
            lines.append(f"symmetry {self.z2.element}: {self.z2.relation}"
                         + (", so q1 = q3 = 0 exactly" if self.z2.vanishing else ""))
        for name in ("q1", "q2", "q3", "q4"):
            if name in self.forced:
                reason = "symmetry" if self.z2 is not None and name in self.z2.vanishing else "solution curve"
                lines.append(f"{name} = 0 ({reason})")
            else:
                value = self.q[name]
                verdict = "excludes 0" if excludes_zero(value) else "contains 0"
                lines.append(f"{name} in {iv.nstr(value, 12)} ({verdict})")
        lines.append(f"verdict: {self.classification}" + (f", branches {self.side} m0" if self.side else ""))
        return lines

    def to_json(self):
        return {
            "family": self.family,
            "classification": self.classification,
            "side": self.side,
            "symmetry_route": self.symmetry_route,
            **self.point.to_json(),
            "q": {name: self.q_json(name) for name in ("q1", "q2", "q3", "q4")},
            "z2": self.z2.to_json() if self.z2 is not None else None,
            "krawczyk": self.point.certificate.to_json(),
        }


def on_curve(point, curve):
    """Whether a known solution curve m -> x meets the certified box over its m range.

    Along such a curve F_m = -D_xF x'(m), so w^T F_m vanishes exactly.
    """
    with precision(point.precision):
        image = Box(list(curve(point.m)))
        return not point.x.disjoint(image)


def sotomayor_classify(point, curve=None):
    """Evaluate w^T F_m, w^T DF_m v, w^T D^2F(v,v), w^T D^3F(v,v,v) over the enclosures and decide.

    ``curve`` is an interval-evaluable m -> x of a solution curve through the
    point; when it meets the box, q1 is a forced zero.
    """
    system = point.system
    p = system.parameter_index
    with precision(point.precision):
        args = list(point.x) + [point.m]
        v, w = point.kernel.v, point.kernel.w
        q = {
            "q1": _directional(system, args, w, v, 0, (p,)),
            "q2": _directional(system, args, w, v, 1, (p,)),
            "q3": _directional(system, args, w, v, 2),
            "q4": _directional(system, args, w, v, 3),
        }
        z2 = None
        if point.symmetry is not None:
            z2 = z2_vanishing_check(point.symmetry, point.x, v, w)
    forced = z2.vanishing if z2 is not None else ()
    if curve is not None and "q1" not in forced and on_curve(point, curve):
        forced = ("q1",) + forced
    classification, side = _decide(q, forced)
    if classification == "unresolved":
        logger.warning("Sotomayor conditions inconclusive at m=%s", mp.nstr(midpoint(point.m), 15))
    return BifurcationCertificate(point, q, forced, z2, classification, side)


def transport_certificate(certificate, element, recertify=False):
    """Move a certified singular point by a group element of its mass pattern.

    The image is again a singular point with the same m, kernels permuted and
    isotropy conjugated. With ``recertify`` the image is certified from scratch.
    """
    point = certificate.point
    group = group_for(point.system.masses.pattern)
    g = group.element(element) if isinstance(element, str) else element
    symmetry = None
    if point.symmetry is not None:
        symmetry = group.compose(g, group.compose(point.symmetry, group.inverse(g)))
    with precision(point.precision):
        x = act(g, point.x)
        if recertify:
            moved = locate_singularity(point.system, [float(c) for c in x.center], float(midpoint(point.m)),
                                       point.precision, symmetry)
            moved.transported_by = g.label
            return sotomayor_classify(moved)
        kernel = point.kernel
        permutation = g.permutation_for(len(x))
        moved_kernel = KernelPair(act(g, kernel.v), act(g, kernel.w), permutation.index(kernel.v_index),
                                    permutation.index(kernel.w_index), kernel.rank)
        moved = SingularPoint(point.system, symmetry, point.certificate, x, point.m, moved_kernel, g.label)
    return BifurcationCertificate(moved, certificate.q, certificate.forced,
                                  _moved_report(certificate.z2, symmetry), certificate.classification,
                                  certificate.side)


def _moved_report(report, symmetry):
    if report is None:
        return None
    return Z2Report(symmetry.label, report.relation, report.vanishing, report.w_relation)


def branch_switch(certificate, direction=None, dm=SWITCH_STEP, offsets=SWITCH_OFFSETS, limit=3, reach=0.05):
    """Solutions near a certified singular point at m0 - dm and m0 + dm.

    Seeds are the singular point itself and its displacements along the right
    kernel vector; each side keeps at most ``limit`` distinct Newton limits.
    ``direction`` picks one side (``below`` or ``above``); by default both.
    """
    if dm <= 0:
        raise ValueError("parameter step must be positive")
    sides = {"below": -1.0, "above": 1.0}
    if direction is not None:
        if direction not in sides:
            raise ValueError(f"direction must be 'below' or 'above', got {direction!r}")
        sides = {direction: sides[direction]}
    point = certificate.point
    system = point.system
    x0 = np.array([float(c) for c in point.x.center])
    v = np.array([float(c) for c in point.kernel.v.center])
    v = v / np.max(np.abs(v))
    m0 = float(midpoint(point.m))
    scale = float(np.linalg.norm(x0))
    seeds = [x0] + [x0 + sign * d * scale * v for d in offsets for sign in (1.0, -1.0)]
    out = {}
    for side, sign in sides.items():
        m = m0 + sign * dm
        found = []
        for seed in seeds:
            try:
                record = newton(system, seed, m)
            except ConvergenceError as exc:
                logger.debug("branch switch seed dropped at m=%.12g: %s", m, exc)
                continue
            if np.max(np.abs(record.coordinates - x0)) <= reach:
                found.append(record)
        kept = unique_points([r.coordinates for r in found])
        records = [r for r in found if any(r.coordinates is k for k in kept)]
        out[side] = sorted(records, key=lambda r: tuple(r.coordinates))[:limit]
        logger.info("branch switch: %d solutions at m=%.12g", len(out[side]), m)
    if not any(out.values()):
        raise ConvergenceError("divergence", "no seed near the singular point converged")
    return out


def load_singular_points():
    text = resources.files("ccbif").joinpath("data", "singular_points.json").read_text()
    return json.loads(text)["points"]


def nearest_singular_point(family, m, tol=CATALOGUE_TOLERANCE):
    """Catalogue entry of ``family`` closest to ``m``, or None beyond ``tol``."""
    candidates = [p for p in load_singular_points() if p["family"] == family]
    if not candidates:
        return None
    best = min(candidates, key=lambda p: abs(p["m"] - m))
    return best if abs(best["m"] - m) <= tol else None


def catalogue_entry(name):
    for entry in load_singular_points():
        if entry["name"] == name:
            return entry
    raise ValueError(f"no singular point named {name!r}")


def default_symmetry(masses, x, tol=1e-6):
    """The involution fixing ``x`` when its isotropy has order two, else None."""
    if masses.pattern not in FAMILIES:
        return None
    return isotropy(np.asarray(x, dtype=float), group_for(masses.pattern), tol).involution()


ROUTES = ("auto", "restricted", "direct")


def classify(family, m, x, bits=DEFAULT_PRECISION, symmetry=None, route="auto", curve=None):
    """Certify and classify the singular point of ``family`` near (x, m).

    ``auto`` restricts to the fixed space of an involution fixing the guess
    when there is one; ``direct`` always certifies in all variables.
    ``curve`` is passed on to sotomayor_classify.
    """
    if route not in ROUTES:
        raise ValueError(f"route must be one of {ROUTES}, got {route!r}")
    masses = MassParams.family(family, m)
    system = build_dziobek(masses)
    if route == "direct":
        symmetry = None
    elif isinstance(symmetry, str):
        symmetry = group_for(family).element(symmetry)
    elif symmetry is None:
        symmetry = default_symmetry(masses, x)
    if route == "restricted" and symmetry is None:
        raise ValueError("restricted route needs a guess fixed by an involution")
    point = locate_singularity(system, x, m, bits, symmetry)
    return sotomayor_classify(point, curve)


def classify_entry(entry, bits=DEFAULT_PRECISION, route="auto"):
    return classify(entry["family"], entry["m"], entry["x"], bits, entry.get("symmetry"), route)


# scaled equilateral point for the three-equal family at m_*: z = alpha_* zhat
LS_SCALE = 27 * (49 + 9 * SQRT3) / (4 * (207 + 16 * SQRT3))
LS_BETA = sp.cbrt(2 * (49 + 9 * SQRT3) * (207 + 16 * SQRT3) ** 2)
LS_ALPHA = 3 * LS_BETA / (2 * (207 + 16 * SQRT3))
B5, B6 = sp.symbols("b5 b6")


def _to_field(field, expr):
    return field.from_sympy(sp.radsimp(sp.sympify(expr)))


class _FieldEvaluator:
    """Derivatives of the scaled AC map fhat(z, m) = f(alpha_* z, m) / alpha_*^12 at one point.

    Every AC term has z-degree 12 or 15, so the scaling only multiplies the
    degree-15 part by alpha_*^3, which lies in Q(sqrt 3).
    """

    def __init__(self, system, point, field, scale):
        self.system = system
        self.point = point
        self.field = field
        self.scale = scale
        self._powers = {}
        self._coefficients = {}

    def _power(self, v, e):
        key = (v, e)
        if key not in self._powers:
            self._powers[key] = self.point[v] ** e
        return self._powers[key]

    def _coefficient(self, c):
        if c not in self._coefficients:
            self._coefficients[c] = self.field.from_sympy(sp.Rational(c.numerator, c.denominator))
        return self._coefficients[c]

    def value(self, i, wrt=()):
        n = self.system.dimension
        poly = self.system.derivative(i, wrt)
        lifted = sum(1 for k in wrt if k < n)
        total = self.field.zero
        for key, coeff in poly.items():
            excess = sum(key[:n]) + lifted - 12
            if excess not in (0, 3):
                raise ReductionError(f"AC term of z-degree {excess + 12} in equation {i}")
            term = self._coefficient(coeff)
            if excess:
                term = term * self.scale
            for v, e in enumerate(key):
                if e:
                    term = term * self._power(v, e)
            total = total + term
        return total


def _matrix(rows, field):
    return DomainMatrix(rows, (len(rows), len(rows[0])), field)


def _entry(matrix):
    return matrix.to_list()[0][0]


class LSExpansion:
    """Second-order Lyapunov-Schmidt reduction at the equilateral double singularity.

    Kernel coordinates are (b5, b6). Besides the trivial solution the reduced
    equations have three, one on each of the lines b5 = b6, b6 + 2 b5 = 0 and
    b5 + 2 b6 = 0.
    """

    __slots__ = ("field", "a_hat", "s1", "s2", "relations", "equations", "rho_hat", "p1", "u", "v")

    def __init__(self, field, a_hat, s1, s2, relations, equations, rho_hat, p1, u, v):
        self.field = field
        self.a_hat = a_hat
        self.s1 = s1
        self.s2 = s2
        self.relations = relations
        self.equations = equations
        self.rho_hat = rho_hat
        self.p1 = p1
        self.u = u
        self.v = v

    def __repr__(self):
        return f"LSExpansion(p1={self.p1}, u={self.u}, v={self.v})"

    @property
    def beta(self):
        return LS_BETA

    @property
    def alpha(self):
        return LS_ALPHA

    @property
    def p2(self):
        return LS_BETA * (self.u * SQRT3 + self.v)

    @property
    def rho(self):
        return self.p2 / self.p1

    @property
    def p3(self):
        return float(sp.N(self.p1 / self.p2, 30))

    @property
    def equation(self):
        return (B6 + 2 * B5) * (self.p1 * B6 + self.p2)

    def solutions(self):
        rho = self.rho
        return [(sp.Integer(0), sp.Integer(0)), (-rho, -rho), (-rho, 2 * rho), (2 * rho, -rho)]

    def scaled_solutions(self):
        """The same four solutions in the scaled kernel coordinates of ``equations``."""
        rho = self.rho_hat
        return [(sp.Integer(0), sp.Integer(0)), (-rho, -rho), (-rho, 2 * rho), (2 * rho, -rho)]

    def residuals(self):
        """Reduced equations at each scaled solution, simplified; all zero when consistent."""
        return [
            [sp.radsimp(sp.expand(eq.subs({B5: b5, B6: b6}))) for eq in self.equations]
            for b5, b6 in self.scaled_solutions()
        ]

    def tangent(self, b5, b6):
        """Full first-order correction b = (b1, ..., b6) for kernel coordinates (b5, b6)."""
        head = [row[0] * b5 + row[1] * b6 for row in self.relations]
        return head + [b5, b6]

    def to_json(self):
        return {
            "scale": str(LS_SCALE),
            "s1": str(self.s1),
            "s2": str(self.s2),
            "relations": [[str(c) for c in row] for row in self.relations],
            "equations": [str(e) for e in self.equations],
            "p1": self.p1,
            "u": self.u,
            "v": self.v,
            "p2": str(self.p2),
            "p3": self.p3,
            "rho": float(sp.N(self.rho, 30)),
            "equation": str(self.equation),
            "solutions": [[float(sp.N(a, 20)), float(sp.N(b, 20))] for a, b in self.solutions()],
        }


def _family_rates(field):
    m = sp.Symbol("m", positive=True)
    cube = 3 * (SQRT3 * m + 1) / (m + 3)
    t1 = (sp.diff(cube, m) / cube).subs(m, M_STAR)
    t2 = (sp.diff(cube, m, 2) / (2 * cube)).subs(m, M_STAR)
    t1, t2 = _to_field(field, t1), _to_field(field, t2)
    third = _to_field(field, sp.Rational(1, 3))
    ninth = _to_field(field, sp.Rational(1, 9))
    return t1 * third, t2 * third - t1 * t1 * ninth


def _split(field, value):
    expr = sp.expand(field.to_sympy(value))
    y = sp.Rational(expr.coeff(SQRT3))
    x = sp.Rational(sp.expand(expr - y * SQRT3))
    return x, y


def ls_reduce():
    """Exact reduction over Q(sqrt 3) along z(m) = (1 + s1 e + s2 e^2) a + e b + e^2 c, e = m - m_*."""
    field = sp.QQ.algebraic_field(SQRT3)
    system = build_ac(MassParams.family("three-equal", 1))
    n, p = system.dimension, system.parameter_index
    one, zero = field.one, field.zero
    inv = _to_field(field, SQRT3 / 3)
    a_hat = [one, one, inv, one, inv, inv]
    ev = _FieldEvaluator(system, a_hat + [_to_field(field, M_STAR)], field, _to_field(field, LS_SCALE))
    if any(ev.value(i) for i in range(n)):
        raise ReductionError("scaled equilateral point does not solve the AC equations at m_*")

    jac = _matrix([[ev.value(i, (j,)) for j in range(n)] for i in range(n)], field)
    jac_m = _matrix([[ev.value(i, (j, p)) for j in range(n)] for i in range(n)], field)
    f_m = _matrix([[ev.value(i, (p,))] for i in range(n)], field)
    hessians = []
    for i in range(n):
        h = [[None] * n for _ in range(n)]
        for j in range(n):
            for k in range(j, n):
                h[j][k] = h[k][j] = ev.value(i, (j, k))
        hessians.append(_matrix(h, field))
    a = _matrix([[c] for c in a_hat], field)
    s1, s2 = _family_rates(field)
    if not ((jac * a).scalarmul(s1) + f_m).is_zero_matrix:
        raise ReductionError("equilateral tangent does not solve the first-order equation")

    top, bottom = list(range(4)), [4, 5]
    try:
        block_inverse = jac.extract(top, top).inv()
    except DMNonInvertibleMatrixError:
        raise ReductionError("leading 4x4 block of the linearisation is singular") from None
    relations = -(block_inverse * jac.extract(top, bottom))
    if not (jac.extract(bottom, top) * relations + jac.extract(bottom, bottom)).is_zero_matrix:
        raise ReductionError("kernel of the linearisation is not two-dimensional")
    basis = _matrix(relations.to_list() + [[one, zero], [zero, one]], field)

    half = _to_field(field, sp.Rational(1, 2))
    ja, jma = jac * a, jac_m * a
    jmb = jac_m * basis
    const, linear, quadratic = [], [], []
    for i, h in enumerate(hessians):
        const.append(s2 * _entry(ja[i, :]) + half * s1 * s1 * _entry(a.transpose() * h * a) + s1 * _entry(jma[i, :]))
        lin = (a.transpose() * h * basis).scalarmul(s1) + jmb[i, :]
        linear.append(lin.to_list()[0])
        quadratic.append((basis.transpose() * h * basis).scalarmul(half).to_list())

    # eliminate c1..c4 with the first four rows; the c5, c6 coefficients cancel
    elimination = (jac.extract(bottom, top) * block_inverse).to_list()
    rows = []
    for r, target in enumerate(bottom):
        def combine(values):
            total = values[target]
            for k in top:
                total = total - elimination[r][k] * values[k]
            return total

        if combine(const):
            raise ReductionError("equilateral family does not solve the second-order equation")
        quad = [[combine([quadratic[i][j][k] for i in range(n)]) for k in range(2)] for j in range(2)]
        lin = [combine([linear[i][k] for i in range(n)]) for k in range(2)]
        rows.append([quad[0][0], quad[0][1] + quad[1][0], quad[1][1], lin[0], lin[1]])

    rho_hat = _match_factors(rows)
    t = rho_hat * _to_field(field, 3 / (2 * (207 + 16 * SQRT3)))
    x, y = _split(field, t)
    p1 = int(sp.ilcm(x.q, y.q))
    u, v = int(p1 * y), int(p1 * x)
    to_sympy = field.to_sympy
    equations = [sp.expand(to_sympy(c[0]) * B5 ** 2 + to_sympy(c[1]) * B5 * B6 + to_sympy(c[2]) * B6 ** 2
                           + to_sympy(c[3]) * B5 + to_sympy(c[4]) * B6) for c in rows]
    logger.info("Lyapunov-Schmidt reduction: p1=%d u=%d v=%d", p1, u, v)
    return LSExpansion(
        field,
        [to_sympy(c) for c in a_hat],
        sp.radsimp(to_sympy(s1)),
        sp.radsimp(to_sympy(s2)),
        [[sp.radsimp(to_sympy(c)) for c in row] for row in relations.to_list()],
        equations,
        sp.radsimp(to_sympy(rho_hat)),
        p1, u, v,
    )


def _match_factors(rows):
    """rho with both rows in span{(b6 + 2 b5)(b6 + rho), (b5 + 2 b6)(b5 + rho)}.

    Coefficients are ordered b5^2, b5 b6, b6^2, b5, b6.
    """
    first, second = rows

    def mix(k):
        return [first[i] * second[k] - second[i] * first[k] for i in range(5)]

    g, h = mix(0), mix(2)
    if not g[2] or not h[0]:
        raise ReductionError("second-order equations have rank below two")
    if g[1] != g[2] + g[2] or g[3] != g[4] + g[4] or h[1] != h[0] + h[0] or h[4] != h[3] + h[3]:
        raise ReductionError("second-order equations do not factor as (b6 + 2 b5)(p1 b6 + p2)")
    rho = g[4] / g[2]
    if h[3] / h[0] != rho:
        raise ReductionError("the two factored equations disagree on p2/p1")
    return rho
