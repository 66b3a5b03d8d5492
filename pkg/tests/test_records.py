import json
import tempfile
from pathlib import Path

import pytest

from ccbif.interval import interval, precision
from ccbif.polysys import MassParams
from ccbif.records import (
    CountRow,
    Region,
    diagram_csv,
    find,
    overlaps,
    parse_header,
    question_mark,
    read_branches,
    regions,
    render,
    summary_markdown,
    write_text,
)
from ccbif.solver import Branch, SolutionRecord


def _branch(ms, family="three-equal", termination="range-end"):
    points = [
        SolutionRecord(MassParams.family(family, m), "dziobek", [4.0, 0.8, 1, 1, 0.6, 1, 0.6, 0.6], 1e-12, 0.5, "D6")
        for m in ms
    ]
    return Branch(family, "dziobek", points, termination)


class TestQuestionMark:
    def test_last_digit_uncertain(self):
        with precision(128):
            x = question_mark("1.00266?")
            assert overlaps(x, interval("1.002651", "1.002652"))
            assert overlaps(x, interval("1.002669", "1.002670"))
            assert not overlaps(x, interval("1.002671", "1.002680"))

    def test_negative(self):
        with precision(128):
            assert overlaps(question_mark("-6.501134640?"), interval(-6.5011346405))

    def test_requires_marker(self):
        with pytest.raises(ValueError, match="question-mark notation"):
            question_mark("1.0026")


class TestQueries:
    DATA = {"header": {"seed": 3}, "q": {"q1": {"lo": "-6.5", "hi": "-6.4"}}, "side": None}

    def test_find(self):
        assert find(self.DATA, "header.seed") == 3

    def test_alternatives(self):
        assert find(self.DATA, "side || q.q1.lo") == "-6.5"

    def test_default(self):
        assert find(self.DATA, "missing", default="none") == "none"

    def test_render_scalar_and_json(self):
        assert render(self.DATA, "q.q1.hi") == "-6.4"
        assert json.loads(render(self.DATA)) == self.DATA


def test_write_text_creates_parents():
    with tempfile.TemporaryDirectory() as tmpdir:
        path = write_text(Path(tmpdir) / "a" / "b.json", "{}")
        assert path.read_text() == "{}\n"


def test_parse_header():
    assert parse_header("# seed=3\n# family=two-pairs\nm,r12\n# late=1\n") == {"seed": "3", "family": "two-pairs"}


class TestCountRow:
    ROW = {"family": "three-equal", "m": 1.0, "dziobek": 19, "ac": 32, "distinct": 31,
           "collinear": 12, "budget": 100000, "seed": 0}

    def test_valid(self):
        assert CountRow(**self.ROW).ac == 32

    def test_extra_field(self):
        with pytest.raises(ValueError):
            CountRow(**self.ROW, spatial=1)

    def test_inconsistent_counts_are_logged(self, caplog):
        CountRow(**{**self.ROW, "ac": 30})
        assert "is not Dziobek count" in caplog.text


class TestRegions:
    def test_breakpoints_and_intervals(self):
        found = regions([("a", _branch([0.9, 1.0])), ("b", _branch([0.95, 1.1]))])
        labels = [(r.lo, r.hi, r.branches) for r in found]
        assert labels == [
            (0.9, 0.9, 1), (0.9, 0.95, 1), (0.95, 0.95, 2), (0.95, 1.0, 2),
            (1.0, 1.0, 2), (1.0, 1.1, 1), (1.1, 1.1, 1),
        ]

    def test_counts(self):
        region = Region(lo=0.9, hi=1.0, branches=19)
        assert (region.dziobek, region.ac, region.distinct) == (19, 32, 31)
        assert not region.is_point
        assert region.label() == "(0.9, 1)"

    def test_summary(self):
        text = summary_markdown([Region(lo=1.0, hi=1.0, branches=19)], title="Solutions")
        assert text.startswith("## Solutions\n")
        assert "| m = 1 | 19 | 19 | 32 | 31 |" in text


class TestDiagram:
    def test_rows(self):
        text = diagram_csv([("fold", _branch([1.0, 1.001]))], header={"families": "three-equal"})
        lines = text.splitlines()
        assert lines[0] == "# families=three-equal"
        assert lines[1].startswith("branch,m,lam0,mu,r12")
        assert lines[2].startswith("fold,1.0,")
        assert lines[2].endswith(",D6")
        assert len(lines) == 4

    def test_mixed_systems(self):
        ac = Branch("three-equal", "ac")
        with pytest.raises(ValueError, match="mix Dziobek and AC"):
            diagram_csv([("a", _branch([1.0])), ("b", ac)])


class TestReadBranches:
    def test_reads_stems(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = write_text(Path(tmpdir) / "fold-up.csv", _branch([1.0, 1.01]).to_csv())
            [(name, branch)] = read_branches([path])
        assert name == "fold-up"
        assert branch.ms == [1.0, 1.01]

    def test_no_files(self):
        with pytest.raises(ValueError, match="at least one branch file"):
            read_branches([])

    def test_missing_file(self):
        with pytest.raises(ValueError, match="does not exist"):
            read_branches(["/nonexistent/branch.csv"])

    def test_empty_branch(self):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = write_text(Path(tmpdir) / "empty.csv", Branch("three-equal", "dziobek").to_csv())
            with pytest.raises(ValueError, match="has no points"):
                read_branches([path])
