from __future__ import annotations
import functools
import hashlib
import json
import logging
import math
from fractions import Fraction

import numpy as np
import sympy as sp

logger = logging.getLogger(__name__)

PAIRS = ((1, 2), (1, 3), (1, 4), (2, 3), (2, 4), (3, 4))
DISTANCE_NAMES = tuple(f"r{i}{j}" for i, j in PAIRS)
DZIOBEK_NAMES = ("lam0", "mu") + DISTANCE_NAMES
AC_NAMES = DISTANCE_NAMES
PATTERNS = ("three-equal", "two-pairs", "general")
FAMILIES = ("three-equal", "two-pairs")

LAM0, MU, MASS = sp.symbols("lam0 mu m")
DISTANCES = sp.symbols(" ".join(DISTANCE_NAMES))
SQRT3 = sp.sqrt(3)
# equilateral family loses rank 2 here
M_STAR = (81 + 64 * SQRT3) / 249


def _rational(value):
    if isinstance(value, Fraction):
        return value
    if isinstance(value, bool):
        raise TypeError("boolean is not a mass or coefficient")
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError(f"non-finite value {value!r}")
        return Fraction(repr(value))
    if isinstance(value, sp.Rational):
        return Fraction(int(value.p), int(value.q))
    return Fraction(value)


def _distance(i, j):
    if i == j:
        return sp.Integer(0)
    return DISTANCES[PAIRS.index((min(i, j), max(i, j)))]


class MassParams:
    __slots__ = ("masses", "pattern")

    def __init__(self, m1, m2, m3, m4, pattern="general"):
        if pattern not in PATTERNS:
            raise ValueError(f"unknown mass pattern {pattern!r}")
        masses = tuple(_rational(x) for x in (m1, m2, m3, m4))
        if any(x <= 0 for x in masses):
            raise ValueError("masses must be positive")
        if pattern == "three-equal" and not masses[0] == masses[1] == masses[2]:
            raise ValueError("three-equal pattern needs m1 = m2 = m3")
        if pattern == "two-pairs" and (masses[0] != masses[1] or masses[2] != masses[3]):
            raise ValueError("two-pairs pattern needs m1 = m2 and m3 = m4")
        self.masses = masses
        self.pattern = pattern

    @classmethod
    def family(cls, family, m):
        if family == "three-equal":
            return cls(1, 1, 1, m, pattern=family)
        if family == "two-pairs":
            return cls(1, 1, m, m, pattern=family)
        raise ValueError(f"unknown family {family!r}, expected one of {FAMILIES}")

    @property
    def parameter(self):
        return self.masses[3]

    @property
    def total(self):
        return sum(self.masses)

    def fixed(self):
        if self.pattern == "two-pairs":
            return self.masses[:2]
        return self.masses[:3]

    def symbolic(self):
        fixed = [sp.Rational(x.numerator, x.denominator) for x in self.fixed()]
        if self.pattern == "two-pairs":
            return (fixed[0], fixed[1], MASS, MASS)
        return (fixed[0], fixed[1], fixed[2], MASS)

    def with_parameter(self, m):
        m = _rational(m)
        if self.pattern == "two-pairs":
            return MassParams(self.masses[0], self.masses[1], m, m, pattern=self.pattern)
        return MassParams(*self.masses[:3], m, pattern=self.pattern)

    def floats(self):
        return np.array([float(x) for x in self.masses])

    def to_json(self):
        return {"pattern": self.pattern, "masses": [str(x) for x in self.masses]}

    @classmethod
    def from_json(cls, data):
        return cls(*(Fraction(x) for x in data["masses"]), pattern=data["pattern"])

    def __eq__(self, other):
        return isinstance(other, MassParams) and (self.masses, self.pattern) == (other.masses, other.pattern)

    def __hash__(self):
        return hash((self.masses, self.pattern))

    def __repr__(self):
        values = ", ".join(str(x) for x in self.masses)
        return f"MassParams({values}, pattern={self.pattern!r})"


class Monomial:
    __slots__ = ("exponents",)

    def __init__(self, exponents):
        items = []
        for index, power in dict(exponents).items():
            if power < 0:
                raise ValueError(f"negative exponent {power} for variable {index}")
            if power:
                items.append((int(index), int(power)))
        self.exponents = tuple(sorted(items))

    @classmethod
    def from_dense(cls, dense):
        return cls({i: e for i, e in enumerate(dense) if e})

    def dense(self, arity):
        out = [0] * arity
        for index, power in self.exponents:
            out[index] = power
        return tuple(out)

    @property
    def degree(self):
        return sum(power for _, power in self.exponents)

    def __eq__(self, other):
        return isinstance(other, Monomial) and self.exponents == other.exponents

    def __hash__(self):
        return hash(self.exponents)

    def __repr__(self):
        return f"Monomial({dict(self.exponents)})"


class Polynomial:
    """Sparse polynomial with exact rational coefficients.

    Terms are keyed by dense exponent tuples of length ``arity``. Evaluation is
    generic: rationals give exact results, floats give floats, and passing an
    mpmath context (``mp`` or ``iv``) converts the coefficients into it.
    """

    __slots__ = ("arity", "_terms", "_used")

    def __init__(self, terms, arity):
        clean = {}
        for mono, coeff in terms.items():
            key = mono.dense(arity) if isinstance(mono, Monomial) else tuple(int(e) for e in mono)
            if len(key) != arity:
                raise ValueError(f"monomial {key} does not match arity {arity}")
            clean[key] = clean.get(key, 0) + _rational(coeff)
        self._terms = {k: c for k, c in clean.items() if c}
        self.arity = arity
        used = [set() for _ in range(arity)]
        for key in self._terms:
            for v, e in enumerate(key):
                if e:
                    used[v].add(e)
        self._used = tuple(tuple(sorted(s)) for s in used)

    @classmethod
    def from_expr(cls, expr, gens):
        poly = sp.Poly(sp.expand(expr), *gens, domain=sp.QQ)
        terms = {m: _rational(sp.Rational(c)) for m, c in poly.terms()}
        return cls(terms, len(gens))

    @property
    def degree(self):
        return max((sum(k) for k in self._terms), default=0)

    @property
    def terms(self):
        return {Monomial.from_dense(k): c for k, c in self._terms.items()}

    def items(self):
        return self._terms.items()

    def is_zero(self):
        return not self._terms

    def __len__(self):
        return len(self._terms)

    def __eq__(self, other):
        return isinstance(other, Polynomial) and self.arity == other.arity and self._terms == other._terms

    def __hash__(self):
        return hash((self.arity, frozenset(self._terms.items())))

    def __repr__(self):
        return f"Polynomial({len(self._terms)} terms, arity={self.arity})"

    def diff(self, index):
        out = {}
        for key, coeff in self._terms.items():
            power = key[index]
            if power:
                lowered = list(key)
                lowered[index] -= 1
                out[tuple(lowered)] = coeff * power
        return Polynomial(out, self.arity)

    def permute(self, permutation):
        # returns P(y) with y_k = x_{permutation[k]}
        out = {}
        for key, coeff in self._terms.items():
            moved = [0] * self.arity
            for k, power in enumerate(key):
                moved[permutation[k]] += power
            out[tuple(moved)] = coeff
        return Polynomial(out, self.arity)

    def evaluate(self, point, ctx=None):
        if len(point) != self.arity:
            raise ValueError(f"point has {len(point)} coordinates, polynomial arity is {self.arity}")
        coerce = _coercer(ctx)
        powers = [{e: point[v] ** e for e in self._used[v]} for v in range(self.arity)]
        total = coerce(Fraction(0))
        for key, coeff in self._terms.items():
            term = coerce(coeff)
            for v, e in enumerate(key):
                if e:
                    term = term * powers[v][e]
            total = total + term
        return total

    __call__ = evaluate

    def to_expr(self, gens):
        return sp.Add(*[
            sp.Rational(c.numerator, c.denominator) * sp.Mul(*[g ** e for g, e in zip(gens, key)])
            for key, c in self._terms.items()
        ])

    def to_json(self, names):
        return [
            {"monomial": {names[i]: e for i, e in enumerate(key) if e}, "coefficient": str(self._terms[key])}
            for key in sorted(self._terms, reverse=True)
        ]


def _coercer(ctx):
    if ctx is None:
        return lambda c: c
    if ctx is float:
        return float
    return lambda c: ctx.mpf(c.numerator) / c.denominator


class _FloatKernel:
    # all monomials of a list of polynomials, evaluated once per point batch
    def __init__(self, polys, arity):
        keys = sorted({k for p in polys for k, _ in p.items()})
        index = {k: i for i, k in enumerate(keys)}
        self.exponents = np.array(keys, dtype=np.int64).reshape(len(keys), arity)
        self.coefficients = np.zeros((len(keys), len(polys)))
        for j, p in enumerate(polys):
            for k, c in p.items():
                self.coefficients[index[k], j] = float(c)
        self.magnitudes = np.abs(self.coefficients)
        self.max_degree = int(self.exponents.max()) if len(keys) else 0

    def monomials(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        powers = points[:, :, None] ** np.arange(self.max_degree + 1)
        values = np.ones((points.shape[0], self.exponents.shape[0]))
        for v in range(points.shape[1]):
            values *= powers[:, v, :][:, self.exponents[:, v]]
        return values

    def __call__(self, points):
        return self.monomials(points) @ self.coefficients

    def scale(self, points):
        return np.abs(self.monomials(points)) @ self.magnitudes


class PolySystem:
    """Square polynomial system in ``variables`` plus the mass parameter ``m``.

    The parameter is always the last slot of the evaluation point, so a point
    has ``arity = dimension + 1`` entries. Derivative polynomials are memoised
    and shared between systems built for the same equations.
    """

    __slots__ = ("kind", "variables", "equations", "masses", "_memo")

    def __init__(self, kind, variables, equations, masses, memo=None):
        self.kind = kind
        self.variables = tuple(variables)
        self.equations = tuple(equations)
        self.masses = masses
        self._memo = {} if memo is None else memo
        if len(self.equations) != len(self.variables):
            raise ValueError("system must be square")

    def __repr__(self):
        return f"PolySystem({self.kind!r}, {self.masses!r})"

    @property
    def dimension(self):
        return len(self.variables)

    @property
    def arity(self):
        return len(self.variables) + 1

    @property
    def parameter_index(self):
        return len(self.variables)

    @property
    def names(self):
        return self.variables + ("m",)

    def index(self, name):
        if isinstance(name, int):
            if not 0 <= name < self.arity:
                raise ValueError(f"variable index {name} out of range")
            return name
        try:
            return self.names.index(name)
        except ValueError:
            raise ValueError(f"unknown variable {name!r}") from None

    def with_parameter(self, m):
        return PolySystem(self.kind, self.variables, self.equations, self.masses.with_parameter(m), self._memo)

    def derivative(self, i, wrt=()):
        wrt = tuple(sorted(self.index(v) for v in wrt))
        if not wrt:
            return self.equations[i]
        key = (i, wrt)
        if key not in self._memo:
            self._memo[key] = self.derivative(i, wrt[:-1]).diff(wrt[-1])
        return self._memo[key]

    def jacobian(self):
        if "jacobian" not in self._memo:
            n = self.dimension
            self._memo["jacobian"] = tuple(tuple(self.derivative(i, (j,)) for j in range(n)) for i in range(n))
        return self._memo["jacobian"]

    def point(self, x, m=None):
        m = self.masses.parameter if m is None else m
        return list(x) + [m]

    def evaluate(self, x, m=None, ctx=None):
        args = self.point(x, m)
        return [eq.evaluate(args, ctx) for eq in self.equations]

    def jacobian_at(self, x, m=None, ctx=None):
        args = self.point(x, m)
        return [[p.evaluate(args, ctx) for p in row] for row in self.jacobian()]

    def _kernel(self):
        if "kernel" not in self._memo:
            polys = list(self.equations) + [p for row in self.jacobian() for p in row]
            self._memo["kernel"] = _FloatKernel(polys, self.arity)
        return self._memo["kernel"]

    def _float_args(self, x, m):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x2 = np.atleast_2d(x)
        m = float(self.masses.parameter if m is None else m)
        return np.column_stack([x2, np.full(x2.shape[0], m)]), single

    def linearize(self, x, m=None):
        """Float residuals and Jacobians; ``x`` may be one point or a batch."""
        args, single = self._float_args(x, m)
        n = self.dimension
        values = self._kernel()(args)
        residual = values[:, :n]
        jac = values[:, n:].reshape(-1, n, n)
        if single:
            return residual[0], jac[0]
        return residual, jac

    def residual(self, x, m=None):
        return self.linearize(x, m)[0]

    def residual_norm(self, x, m=None):
        args, single = self._float_args(x, m)
        n = self.dimension
        kernel = self._kernel()
        values = kernel(args)[:, :n]
        scale = kernel.scale(args)[:, :n]
        norms = np.max(np.abs(values), axis=1) / np.maximum(1.0, np.max(scale, axis=1))
        return float(norms[0]) if single else norms

    def digest(self):
        payload = json.dumps([eq.to_json(self.names) for eq in self.equations], sort_keys=True, separators=(",", ":"))
        return hashlib.md5(payload.encode()).hexdigest()

    def describe(self):
        return {"kind": self.kind, **self.masses.to_json(), "digest": self.digest()}

    def to_json(self):
        return {
            "kind": self.kind,
            **self.masses.to_json(),
            "variables": list(self.names),
            "equations": [eq.to_json(self.names) for eq in self.equations],
        }

    def dumps(self):
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))


@functools.lru_cache(maxsize=None)
def cayley_menger_expr():
    sq = {pair: DISTANCES[k] ** 2 for k, pair in enumerate(PAIRS)}
    matrix = sp.Matrix([
        [0, 1, 1, 1, 1],
        [1, 0, sq[1, 2], sq[1, 3], sq[1, 4]],
        [1, sq[1, 2], 0, sq[2, 3], sq[2, 4]],
        [1, sq[1, 3], sq[2, 3], 0, sq[3, 4]],
        [1, sq[1, 4], sq[2, 4], sq[3, 4], 0],
    ])
    return sp.expand(matrix.det(method="berkowitz"))


@functools.lru_cache(maxsize=None)
def _cayley_menger_polys():
    expr = cayley_menger_expr()
    value = Polynomial.from_expr(expr, DISTANCES)
    return value, tuple(value.diff(k) for k in range(6))


def cayley_menger(r):
    if len(r) != 6:
        raise ValueError(f"expected 6 distances, got {len(r)}")
    return _cayley_menger_polys()[0].evaluate(list(r))


def cayley_menger_gradient(r, ctx=None):
    return [p.evaluate(list(r), ctx) for p in _cayley_menger_polys()[1]]


def _symbolic_masses(pattern, fixed):
    return MassParams(*(fixed + (fixed[-1],) * (4 - len(fixed))), pattern=pattern).symbolic()


@functools.lru_cache(maxsize=None)
def _dziobek_equations(pattern, fixed):
    ms = _symbolic_masses(pattern, fixed)
    total = sum(ms)
    s = cayley_menger_expr()
    gens = (LAM0, MU) + DISTANCES + (MASS,)
    exprs = [sum(ms[i - 1] * ms[j - 1] * _distance(i, j) ** 2 for i, j in PAIRS) - total, s]
    for i, j in PAIRS:
        r = _distance(i, j)
        mij = ms[i - 1] * ms[j - 1]
        exprs.append(-mij * total + 2 * LAM0 * mij * r ** 3 + MU * total * r ** 2 * sp.diff(s, r))
    logger.debug("built Dziobek equations for %s %s", pattern, fixed)
    return tuple(Polynomial.from_expr(e, gens) for e in exprs), {}


@functools.lru_cache(maxsize=None)
def _ac_equations(pattern, fixed):
    ms = _symbolic_masses(pattern, fixed)

    def s(a, b):
        return 0 if a == b else 1 / _distance(a, b) ** 3 - 1

    exprs = []
    for i, j in PAIRS:
        rij = _distance(i, j)
        eq = sum(
            ms[k - 1] * (
                s(i, k) * (_distance(j, k) ** 2 - _distance(i, k) ** 2 - rij ** 2)
                + s(j, k) * (_distance(i, k) ** 2 - _distance(j, k) ** 2 - rij ** 2)
            )
            for k in range(1, 5)
        )
        clear = rij * sp.Mul(*[_distance(i, k) ** 3 * _distance(j, k) ** 3 for k in range(1, 5) if k not in (i, j)])
        exprs.append(sp.expand(-eq * clear))
    logger.debug("built AC equations for %s %s", pattern, fixed)
    return tuple(Polynomial.from_expr(e, DISTANCES + (MASS,)) for e in exprs), {}


def build_dziobek(masses):
    equations, memo = _dziobek_equations(masses.pattern, masses.fixed())
    return PolySystem("dziobek", DZIOBEK_NAMES, equations, masses, memo)


def build_ac(masses):
    equations, memo = _ac_equations(masses.pattern, masses.fixed())
    return PolySystem("ac", AC_NAMES, equations, masses, memo)


def build_system(kind, masses):
    if kind == "dziobek":
        return build_dziobek(masses)
    if kind == "ac":
        return build_ac(masses)
    raise ValueError(f"unknown system kind {kind!r}")


def differentiate(system, multi_index):
    wrt = tuple(system.index(v) for v in multi_index)
    if len(wrt) > 3:
        raise ValueError("derivative order must be at most 3")
    label = "".join(system.names[i] for i in sorted(wrt))
    equations = [system.derivative(i, wrt) for i in range(system.dimension)]
    return PolySystem(f"{system.kind}/d{label}", system.variables, equations, system.masses)


def equilateral_alpha(m):
    if m <= 0:
        raise ValueError("m must be positive")
    m = float(m)
    return (3 * (math.sqrt(3) * m + 1) / (m + 3)) ** (1 / 3)


def equilateral_point(m):
    a = equilateral_alpha(m)
    b = a / math.sqrt(3)
    return np.array([a, a, b, a, b, b])


def equilateral_dziobek_point(m):
    if m <= 0:
        raise ValueError("m must be positive")
    m = float(m)
    s3 = math.sqrt(3)
    lam0 = 3 * (1 + s3 * m) / 2
    mu = 3 * m * (3 * s3 - 1) / (4 * (m + 3))
    b = 1 / s3
    return np.array([lam0, mu, 1.0, 1.0, b, 1.0, b, b])


def equilateral_jacobian_det(m):
    """Closed-form det DF along the equilateral family (Dziobek, I = 1)."""
    if isinstance(m, sp.Basic):
        if m.is_positive is False:
            raise ValueError("m must be positive")
        return -64 * (60 * SQRT3 - 133) * (-249 * m + 64 * SQRT3 + 81) ** 2 * m ** 2 * (m + 3) ** 5 / 20667
    if m <= 0:
        raise ValueError("m must be positive")
    s3 = math.sqrt(3)
    return -64 * (60 * s3 - 133) * (-249 * m + 64 * s3 + 81) ** 2 * m ** 2 * (m + 3) ** 5 / 20667


def _pair_masses(masses):
    values = masses.floats()
    return np.array([values[i - 1] * values[j - 1] for i, j in PAIRS]), float(values.sum())


def potential_and_inertia(r, masses):
    r = np.asarray(r, dtype=float)
    mm, total = _pair_masses(masses)
    return float(np.sum(mm / r)), float(np.sum(mm * r ** 2) / total)


def dziobek_to_ac(x, masses):
    r = np.asarray(x, dtype=float)[2:]
    potential, inertia = potential_and_inertia(r, masses)
    return r * (potential / (masses_total(masses) * inertia)) ** (1 / 3)


def ac_to_dziobek(r, masses):
    r = np.asarray(r, dtype=float)
    _, inertia = potential_and_inertia(r, masses)
    r = r / math.sqrt(inertia)
    mm, total = _pair_masses(masses)
    grad = np.asarray(cayley_menger_gradient(r), dtype=float)
    lhs = np.column_stack([2 * mm * r ** 3, total * r ** 2 * grad])
    (lam0, mu), *_ = np.linalg.lstsq(lhs, mm * total, rcond=None)
    return np.concatenate([[lam0, mu], r])


def masses_total(masses):
    return float(masses.floats().sum())
