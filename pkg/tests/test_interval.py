import numpy as np
import pytest
import sympy as sp
from mpmath import iv, mp

from ccbif.interval import (
    Box,
    CertificationError,
    FixedMass,
    KrawczykCertificate,
    certify,
    check_precision,
    cofactors,
    contains_zero,
    determinant,
    exact_decimal,
    interval,
    interval_from_json,
    interval_eval,
    interval_gauss_echelon,
    interval_to_json,
    kernel_vectors,
    krawczyk,
    lower,
    precision,
    upper,
    verify_certificate,
)
from ccbif.polysys import MASS, MassParams, Polynomial, PolySystem, build_dziobek

X = sp.Symbol("x")


def _scalar(expr):
    return PolySystem("toy", ("x",), [Polynomial.from_expr(expr, (X, MASS))], MassParams(1, 1, 1, 1))


class TestPrecision:
    def test_context_restores(self):
        before = mp.prec, iv.prec
        with precision(512) as bits:
            assert bits == 512
            assert mp.prec == iv.prec == 512
        assert (mp.prec, iv.prec) == before

    def test_bounds(self):
        with pytest.raises(ValueError, match="precision must be in"):
            check_precision(32)
        with pytest.raises(ValueError, match="precision must be in"):
            check_precision(10000)


class TestEncoding:
    def test_exact_decimal(self):
        assert exact_decimal(mp.mpf(0.5)) == "0.5"
        assert exact_decimal(mp.mpf(-0.125)) == "-0.125"
        assert exact_decimal(mp.mpf(3)) == "3"

    def test_json_is_exact(self):
        with precision(128):
            x = interval("0.1", "0.2")
            back = interval_from_json(interval_to_json(x))
            assert lower(back) == lower(x) and upper(back) == upper(x)

    def test_box_json(self):
        box = Box.around([1, 2], 0.25)
        assert Box.from_json(box.to_json()).to_json() == box.to_json()


class TestBox:
    def test_around_contains_center(self):
        box = Box.around([1.0, -2.0], 1e-3)
        assert box.contains([1.0, -2.0])
        assert not box.contains([1.01, -2.0])

    def test_interior_contains(self):
        outer = Box.around([0, 0], 1)
        assert outer.interior_contains(Box.around([0, 0], 0.5))
        assert not outer.interior_contains(Box.around([0.9, 0], 0.5))

    def test_negative_radius(self):
        with pytest.raises(ValueError, match="non-negative"):
            Box.around([0], -1)

    def test_intersect_disjoint(self):
        assert Box.around([0], 1).intersect(Box.around([5], 1)) is None


class TestIntervalEval:
    def test_encloses_range(self):
        poly = Polynomial.from_expr(X**2 - 2, (X, MASS))
        with precision(128):
            value = interval_eval(poly, Box([iv.mpf((1, 2)), 1]))
            assert lower(value) <= -1
            assert upper(value) >= 2
            assert contains_zero(value)

    def test_inclusion_isotonic(self):
        equations = build_dziobek(MassParams.family("three-equal", 1)).equations
        rng = np.random.default_rng(17)
        with precision(128):
            for _ in range(1000):
                poly = equations[rng.integers(len(equations))]
                lo = rng.uniform(0.5, 1.5, poly.arity)
                hi = lo + rng.uniform(0.0, 0.5, poly.arity)
                inner_lo = lo + (hi - lo) * rng.uniform(0.0, 0.5, poly.arity)
                inner_hi = hi - (hi - lo) * rng.uniform(0.0, 0.5, poly.arity)
                point = inner_lo + (inner_hi - inner_lo) * rng.uniform(0.0, 1.0, poly.arity)
                outer = interval_eval(poly, Box([iv.mpf((a, b)) for a, b in zip(lo, hi)]))
                inner = interval_eval(poly, Box([iv.mpf((a, b)) for a, b in zip(inner_lo, inner_hi)]))
                value = interval_eval(poly, Box([iv.mpf(p) for p in point]))
                assert lower(outer) <= lower(inner) <= lower(value)
                assert upper(value) <= upper(inner) <= upper(outer)

    def test_arity_mismatch(self):
        poly = Polynomial.from_expr(X**2 - 2, (X, MASS))
        with pytest.raises(ValueError, match="polynomial arity"):
            interval_eval(poly, Box([1]))


class TestDeterminant:
    def test_exact(self):
        assert determinant([[2, 1], [1, 3]], mp) == pytest.approx(5)

    def test_zero_diagonal(self):
        assert determinant([[0, 1], [1, 0]], mp) == -1

    def test_interval_enclosure(self):
        with precision(128):
            matrix = [[iv.mpf(2), iv.mpf(1)], [iv.mpf(1), iv.mpf(3)]]
            assert contains_zero(determinant(matrix, iv) - 5)

    def test_three_by_three(self):
        assert determinant([[1, 2, 3], [4, 5, 6], [7, 8, 10]], mp) == pytest.approx(-3)

    def test_not_square(self):
        with pytest.raises(ValueError, match="square"):
            determinant([[1, 2]], mp)

    def test_cofactors(self):
        assert cofactors([[1, 2], [3, 4]], mp) == [[4, -3], [-2, 1]]


class TestKernel:
    def test_rank_one(self):
        with precision(128):
            pair = kernel_vectors([[1, 2], [2, 4]])
            assert pair.rank == 1
            assert pair.v_index == 1
            assert contains_zero(pair.v[0] + 2)
            assert contains_zero(pair.w[0] + 2)

    def test_full_rank_is_rejected(self):
        with precision(128):
            with pytest.raises(CertificationError, match="one-dimensional"):
                kernel_vectors([[1, 0], [0, 1]])

    def test_echelon_rank(self):
        with precision(128):
            echelon = interval_gauss_echelon([[1, 0, 0], [0, 1, 0], [0, 0, 1]])
            assert echelon.rank == 3
            assert not echelon.flagged
            assert echelon.free == []


class TestKrawczyk:
    def setup_method(self):
        self.sqrt2 = FixedMass(_scalar(X ** 2 - 2))

    def test_unique_zero(self):
        cert = krawczyk(self.sqrt2, [1.4142], 1e-3)
        assert cert.verdict == "unique-zero"
        with precision(cert.precision):
            assert cert.image.contains([mp.sqrt(2)])

    def test_no_zero_from_residual(self):
        cert = krawczyk(self.sqrt2, [3.0], 0.1)
        assert cert.verdict == "no-zero"
        assert cert.reason.startswith("residual-exclusion")

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            krawczyk(self.sqrt2, [1.0, 2.0], 0.1)

    def test_certify_tightens(self):
        cert = certify(self.sqrt2, [1.41421356], 128)
        assert cert.verdict == "unique-zero"
        with precision(128):
            assert cert.image.max_width() < mp.mpf(2) ** -100

    def test_certify_fails_without_root(self):
        with pytest.raises(CertificationError, match="no radius"):
            certify(FixedMass(_scalar(X ** 2 + 1)), [0.0], 64)

    def test_stored_certificate_reproduces(self):
        cert = krawczyk(self.sqrt2, [1.4142], 1e-3, 128)
        stored = KrawczykCertificate.from_json(cert.to_json())
        assert stored.certificate_id() == cert.certificate_id()
        assert verify_certificate(self.sqrt2, stored)

    def test_tampered_certificate_fails(self):
        data = krawczyk(self.sqrt2, [1.4142], 1e-3, 128).to_json()
        data["image"][0]["hi"] = "1.5"
        assert not verify_certificate(self.sqrt2, KrawczykCertificate.from_json(data))

    def test_unknown_verdict(self):
        with pytest.raises(ValueError, match="unknown verdict"):
            KrawczykCertificate({}, None, [], None, None, "maybe", 64)
