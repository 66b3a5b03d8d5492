from __future__ import annotations
import contextlib
import hashlib
import json
import logging
from fractions import Fraction

from mpmath import iv, mp
from mpmath.ctx_iv import ivmpf as Interval

logger = logging.getLogger(__name__)

MIN_PRECISION = 64
MAX_PRECISION = 4096
DEFAULT_PRECISION = 256
RADII = (1e-6, 1e-8, 1e-10, 1e-12)
VERDICTS = ("unique-zero", "no-zero", "inconclusive")


class CertificationError(RuntimeError):
    def __init__(self, message, suggestion=None):
        self.suggestion = suggestion
        super().__init__(f"{message}; {suggestion}" if suggestion else message)


class PrecisionError(ArithmeticError):
    pass


def check_precision(bits):
    bits = int(bits)
    if not MIN_PRECISION <= bits <= MAX_PRECISION:
        raise ValueError(f"precision must be in [{MIN_PRECISION}, {MAX_PRECISION}] bits, got {bits}")
    return bits


@contextlib.contextmanager
def precision(bits):
    bits = check_precision(bits)
    saved = mp.prec, iv.prec
    mp.prec = iv.prec = bits
    try:
        yield bits
    finally:
        mp.prec, iv.prec = saved


def interval(lo, hi=None):
    if hi is None:
        return iv.mpf(lo)
    return iv.mpf((iv.mpf(lo), iv.mpf(hi)))


def lower(x):
    return mp.make_mpf(iv.mpf(x)._mpi_[0])


def upper(x):
    return mp.make_mpf(iv.mpf(x)._mpi_[1])


def midpoint(x):
    return mp.make_mpf(iv.mpf(x).mid._mpi_[0])


def width(x):
    return upper(x) - lower(x)


def contains_zero(x):
    return lower(x) <= 0 <= upper(x)


def excludes_zero(x):
    return not contains_zero(x)


def is_finite(x):
    return mp.isfinite(lower(x)) and mp.isfinite(upper(x))


def disjoint(a, b):
    return upper(a) < lower(b) or upper(b) < lower(a)


def strictly_inside(inner, outer):
    return lower(outer) < lower(inner) and upper(inner) < upper(outer)


def intersect(a, b):
    lo, hi = max(lower(a), lower(b)), min(upper(a), upper(b))
    if lo > hi:
        return None
    return iv.mpf((lo, hi))


def hull(a, b):
    return iv.mpf((min(lower(a), lower(b)), max(upper(a), upper(b))))


def _ensure_finite(values, what):
    for value in values:
        if not is_finite(value):
            raise PrecisionError(f"{what} lost all precision at {iv.prec} bits")
    return values


def exact_decimal(value):
    """Exact decimal expansion of a binary float; no rounding happens here."""
    value = mp.mpf(value)
    if not mp.isfinite(value):
        raise PrecisionError(f"cannot write {value} as an exact decimal")
    sign, man, exp, _ = value._mpf_
    man = int(man)
    if exp >= 0:
        text = str(man << exp)
    else:
        n = -exp
        digits = str(man * 5 ** n).rjust(n + 1, "0")
        whole, frac = digits[:-n], digits[-n:].rstrip("0")
        text = whole + ("." + frac if frac else "")
    return ("-" if sign else "") + text


def _endpoint_text(value):
    if mp.isinf(value):
        return "inf" if value > 0 else "-inf"
    return exact_decimal(value)


def _endpoint(text):
    text = str(text).strip()
    if text in ("inf", "+inf"):
        return iv.inf
    if text == "-inf":
        return iv.ninf
    exact = Fraction(text)
    return iv.mpf(exact.numerator) / exact.denominator


def interval_to_json(x):
    return {"lo": _endpoint_text(lower(x)), "hi": _endpoint_text(upper(x))}


def interval_from_json(data):
    return iv.mpf((_endpoint(data["lo"]), _endpoint(data["hi"])))


class Box:
    __slots__ = ("components",)

    def __init__(self, components):
        self.components = tuple(iv.mpf(c) for c in components)

    @classmethod
    def around(cls, center, radius):
        if radius < 0:
            raise ValueError("radius must be non-negative")
        spread = iv.mpf((-mp.mpf(radius), mp.mpf(radius)))
        return cls([iv.mpf(mp.mpf(c)) + spread for c in center])

    @classmethod
    def point(cls, values):
        return cls([iv.mpf(mp.mpf(v)) for v in values])

    def __len__(self):
        return len(self.components)

    def __iter__(self):
        return iter(self.components)

    def __getitem__(self, index):
        return self.components[index]

    def __repr__(self):
        return f"Box({', '.join(iv.nstr(c, 12) for c in self.components)})"

    @property
    def center(self):
        return [midpoint(c) for c in self.components]

    @property
    def radius(self):
        return max((width(c) / 2 for c in self.components), default=mp.zero)

    def widths(self):
        return [width(c) for c in self.components]

    def max_width(self):
        return max(self.widths(), default=mp.zero)

    def contains(self, point):
        return all(lower(c) <= mp.mpf(p) <= upper(c) for c, p in zip(self.components, point))

    def interior_contains(self, other):
        return all(strictly_inside(a, b) for a, b in zip(other, self.components))

    def disjoint(self, other):
        return any(disjoint(a, b) for a, b in zip(self.components, other))

    def intersect(self, other):
        parts = [intersect(a, b) for a, b in zip(self.components, other)]
        if any(p is None for p in parts):
            return None
        return Box(parts)

    def hull(self, other):
        return Box([hull(a, b) for a, b in zip(self.components, other)])

    def to_json(self):
        return [interval_to_json(c) for c in self.components]

    @classmethod
    def from_json(cls, data):
        return cls([interval_from_json(c) for c in data])


def interval_eval(poly, box):
    """Enclosure of ``poly`` over ``box`` by naive interval evaluation."""
    components = list(box)
    if len(components) != poly.arity:
        raise ValueError(f"box has {len(components)} components, polynomial arity is {poly.arity}")
    value = poly.evaluate(components, iv)
    _ensure_finite([value], "polynomial enclosure")
    return value


class FixedMass:
    """The map x -> F(x, m) of a PolySystem with its mass parameter held fixed."""

    def __init__(self, system):
        self.system = system
        self.parameter = system.masses.parameter

    @property
    def dimension(self):
        return self.system.dimension

    @property
    def names(self):
        return self.system.variables

    def _m(self, ctx):
        return ctx.mpf(self.parameter.numerator) / self.parameter.denominator

    def values(self, x, ctx):
        return self.system.evaluate(list(x), self._m(ctx), ctx)

    def jacobian(self, x, ctx):
        return self.system.jacobian_at(list(x), self._m(ctx), ctx)

    def mass(self, box):
        return self._m(iv)

    def describe(self):
        return self.system.describe()


def determinant(matrix, ctx):
    """Determinant by full pivoting over entries that are nonzero (resp. exclude 0).

    Blocks with no admissible pivot fall back to cofactor expansion, so the
    result is an enclosure whenever ``ctx`` is ``iv``.
    """
    rows = [list(r) for r in matrix]
    if any(len(r) != len(rows) for r in rows):
        raise ValueError("determinant needs a square matrix")
    return _det(rows, ctx)


def _admissible(value, ctx):
    if ctx is iv:
        return excludes_zero(value)
    return value != 0


def _magnitude(value, ctx):
    return abs(midpoint(value)) if ctx is iv else abs(value)


def _det(rows, ctx):
    n = len(rows)
    if n == 0:
        return ctx.mpf(1)
    if n == 1:
        return rows[0][0]
    best = None
    for i in range(n):
        for j in range(n):
            if _admissible(rows[i][j], ctx):
                size = _magnitude(rows[i][j], ctx)
                if best is None or size > best[0]:
                    best = (size, i, j)
    if best is None:
        total = ctx.mpf(0)
        for j in range(n):
            term = rows[0][j] * _det([r[:j] + r[j + 1:] for r in rows[1:]], ctx)
            total = total + term if j % 2 == 0 else total - term
        return total
    _, p, q = best
    pivot = rows[p][q]
    rest = []
    for i in range(n):
        if i == p:
            continue
        factor = rows[i][q] / pivot
        rest.append([rows[i][j] - factor * rows[p][j] for j in range(n) if j != q])
    value = pivot * _det(rest, ctx)
    return -value if (p + q) % 2 else value


def cofactors(matrix, ctx):
    rows = [list(r) for r in matrix]
    n = len(rows)
    out = []
    for i in range(n):
        line = []
        for j in range(n):
            minor = [r[:j] + r[j + 1:] for k, r in enumerate(rows) if k != i]
            value = _det(minor, ctx)
            line.append(-value if (i + j) % 2 else value)
        out.append(line)
    return out


class KrawczykCertificate:
    __slots__ = ("system", "mass", "center", "box", "image", "verdict", "precision",
                 "preconditioner", "reason")

    def __init__(self, system, mass, center, box, image, verdict, precision, preconditioner=None, reason=None):
        if verdict not in VERDICTS:
            raise ValueError(f"unknown verdict {verdict!r}")
        self.system = system
        self.mass = mass
        self.center = list(center)
        self.box = box
        self.image = image
        self.verdict = verdict
        self.precision = precision
        self.preconditioner = preconditioner
        self.reason = reason

    def __repr__(self):
        return f"KrawczykCertificate({self.verdict!r}, precision={self.precision})"

    @property
    def enclosure(self):
        # the certified zero lies in K
        return self.image if self.verdict == "unique-zero" else self.box

    def to_json(self):
        return {
            "system": self.system,
            "mass": interval_to_json(self.mass),
            "center": [exact_decimal(c) for c in self.center],
            "box": self.box.to_json(),
            "image": self.image.to_json() if self.image is not None else None,
            "verdict": self.verdict,
            "precision": self.precision,
            "preconditioner": self.preconditioner,
            "reason": self.reason,
        }

    @classmethod
    def from_json(cls, data):
        with precision(data["precision"]):
            return cls(
                system=data["system"],
                mass=interval_from_json(data["mass"]),
                center=[mp.mpf(Fraction(c).numerator) / Fraction(c).denominator for c in data["center"]],
                box=Box.from_json(data["box"]),
                image=Box.from_json(data["image"]) if data.get("image") is not None else None,
                verdict=data["verdict"],
                precision=data["precision"],
                preconditioner=data.get("preconditioner"),
                reason=data.get("reason"),
            )

    def certificate_id(self):
        payload = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.md5(payload.encode()).hexdigest()


def _preconditioner_hash(matrix):
    text = ",".join(exact_decimal(matrix[i, j]) for i in range(matrix.rows) for j in range(matrix.cols))
    return hashlib.md5(text.encode()).hexdigest()


def _krawczyk_step(system, center, box):
    bits = iv.prec
    n = system.dimension
    mass = system.mass(box)
    describe = system.describe()

    def make(verdict, image=None, preconditioner=None, reason=None):
        return KrawczykCertificate(describe, mass, center, box, image, verdict, bits, preconditioner, reason)

    try:
        ranges = _ensure_finite(system.values(box.components, iv), "residual enclosure")
        for i, value in enumerate(ranges):
            if excludes_zero(value):
                return make("no-zero", reason=f"residual-exclusion: component {i} excludes 0")
        try:
            inverse = mp.inverse(mp.matrix(system.jacobian(center, mp)))
        except ZeroDivisionError:
            return make("inconclusive", reason="singular midpoint Jacobian")
        digest = _preconditioner_hash(inverse)
        c = [[iv.mpf(inverse[i, j]) for j in range(n)] for i in range(n)]
        x = [iv.mpf(v) for v in center]
        fx = _ensure_finite(system.values(x, iv), "residual at center")
        jac = system.jacobian(box.components, iv)
        offsets = [box[j] - x[j] for j in range(n)]
        image = []
        for i in range(n):
            k = x[i]
            for j in range(n):
                k = k - c[i][j] * fx[j]
            for j in range(n):
                entry = iv.mpf(1 if i == j else 0)
                for l in range(n):
                    entry = entry - c[i][l] * jac[l][j]
                k = k + entry * offsets[j]
            image.append(k)
        _ensure_finite(image, "Krawczyk image")
    except PrecisionError as exc:
        return make("inconclusive", reason=str(exc))
    image = Box(image)
    if box.interior_contains(image):
        return make("unique-zero", image, digest)
    if box.disjoint(image):
        return make("no-zero", image, digest)
    return make("inconclusive", image, digest, reason="Krawczyk image not inside the box")


def krawczyk(system, x, r, bits=DEFAULT_PRECISION):
    """One Krawczyk test on the box of radius ``r`` around ``x``.

    ``system`` is any square map exposing ``dimension``, ``values(point, ctx)``,
    ``jacobian(point, ctx)``, ``mass(box)`` and ``describe()``.
    """
    if len(x) != system.dimension:
        raise ValueError(f"point has {len(x)} coordinates, system dimension is {system.dimension}")
    with precision(bits):
        center = [mp.mpf(v) for v in x]
        return _krawczyk_step(system, center, Box.around(center, r))


def tighten(system, certificate, max_steps=60):
    """Iterate X <- K(mid X, X) /\\ X from a unique-zero certificate."""
    best = certificate
    with precision(certificate.precision):
        box = certificate.image
        previous = box.max_width()
        for _ in range(max_steps):
            step = _krawczyk_step(system, box.center, box)
            if step.image is None:
                break
            if step.verdict == "unique-zero":
                best = step
            narrowed = step.image.intersect(box)
            if narrowed is None:
                break
            current = narrowed.max_width()
            if current == 0 or current > previous / 2:
                break
            box, previous = narrowed, current
    logger.debug("tightened enclosure to width %s", mp.nstr(best.image.max_width(), 5))
    return best


def certify(system, x, bits=DEFAULT_PRECISION, radii=RADII):
    """Radius sweep with precision doubling; returns a tightened unique-zero certificate."""
    bits = check_precision(bits)
    last = None
    while bits <= MAX_PRECISION:
        for r in radii:
            last = krawczyk(system, x, r, bits)
            logger.debug("krawczyk r=%g bits=%d -> %s (%s)", r, bits, last.verdict, last.reason)
            if last.verdict == "unique-zero":
                return tighten(system, last)
        if bits == MAX_PRECISION:
            break
        logger.warning("no radius certified a zero at %d bits, doubling precision", bits)
        bits = min(2 * bits, MAX_PRECISION)
    raise CertificationError(
        f"no radius in {list(radii)} gave a unique zero (last verdict {last.verdict}: {last.reason})",
        "refine the guess or try --precision 512",
    )


def verify_certificate(system, certificate):
    """Recompute a stored certificate at its precision; True when verdict and image reproduce exactly."""
    with precision(certificate.precision):
        again = _krawczyk_step(system, certificate.center, certificate.box)
    if again.verdict != certificate.verdict:
        return False
    if (again.image is None) != (certificate.image is None):
        return False
    return again.image is None or again.image.to_json() == certificate.image.to_json()


class Echelon:
    __slots__ = ("rows", "pivots", "free")

    def __init__(self, rows, pivots, free):
        self.rows = rows
        self.pivots = pivots
        self.free = free

    @property
    def rank(self):
        return len(self.pivots)

    @property
    def columns(self):
        return len(self.rows[0]) if self.rows else 0

    @property
    def flagged(self):
        return self.rank < self.columns - 1

    @property
    def nullity_one(self):
        return self.rank == self.columns - 1

    def pivot_values(self):
        return [self.rows[r][c] for r, c in self.pivots]


def interval_gauss_echelon(matrix):
    """Row echelon form with partial pivoting on midpoint magnitude.

    Each accepted pivot excludes 0, so ``rank`` is a certified lower bound of
    the rank of every real matrix inside ``matrix``.
    """
    rows = [[iv.mpf(v) for v in r] for r in matrix]
    if not rows:
        raise ValueError("empty matrix")
    nrows, ncols = len(rows), len(rows[0])
    pivots, free = [], []
    row = 0
    for col in range(ncols):
        if row == nrows:
            free.append(col)
            continue
        best = None
        for i in range(row, nrows):
            if excludes_zero(rows[i][col]):
                size = abs(midpoint(rows[i][col]))
                if best is None or size > best[0]:
                    best = (size, i)
        if best is None:
            free.append(col)
            continue
        p = best[1]
        rows[row], rows[p] = rows[p], rows[row]
        for i in range(row + 1, nrows):
            factor = rows[i][col] / rows[row][col]
            rows[i][col] = iv.mpf(0)
            for j in range(col + 1, ncols):
                rows[i][j] = rows[i][j] - factor * rows[row][j]
        pivots.append((row, col))
        row += 1
    result = Echelon(rows, pivots, free)
    if result.flagged:
        logger.warning("echelon form certified rank %d only, below %d", result.rank, ncols - 1)
    return result


def _back_substitute(echelon):
    if len(echelon.free) != 1:
        raise CertificationError(
            f"kernel is not certified one-dimensional ({len(echelon.free)} free columns)",
            "shrink the box or try --precision 512",
        )
    free = echelon.free[0]
    vector = [None] * echelon.columns
    vector[free] = iv.mpf(1)
    for r, c in reversed(echelon.pivots):
        total = iv.mpf(0)
        for j in range(echelon.columns):
            if j != c and vector[j] is not None:
                total = total + echelon.rows[r][j] * vector[j]
        vector[c] = -total / echelon.rows[r][c]
    return Box(vector), free


def transpose(matrix):
    return [list(col) for col in zip(*matrix)]


class KernelPair:
    __slots__ = ("v", "w", "v_index", "w_index", "rank")

    def __init__(self, v, w, v_index, w_index, rank):
        self.v = v
        self.w = w
        self.v_index = v_index
        self.w_index = w_index
        self.rank = rank


def kernel_vectors(matrix):
    """Enclosures of the right (v) and left (w) null vectors of a nullity-one matrix.

    The free column of each echelon form is normalised to exactly 1.
    """
    right = interval_gauss_echelon(matrix)
    left = interval_gauss_echelon(transpose(matrix))
    v, v_index = _back_substitute(right)
    w, w_index = _back_substitute(left)
    return KernelPair(v, w, v_index, w_index, min(right.rank, left.rank))


def matvec(matrix, vector):
    return [sum((a * b for a, b in zip(row, vector)), iv.mpf(0)) for row in matrix]
