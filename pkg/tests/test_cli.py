import pytest
import json
import tempfile
import typer
from pathlib import Path
from unittest.mock import Mock, patch
from rich.table import Table

from ccbif.bifurcation import ReductionError, catalogue_entry
from ccbif.cache import CacheConfig
from ccbif.cli import classify_, continue_, count, ls_reduce_, report, solve, verify, verify_certificate
from ccbif.interval import CertificationError
from ccbif.polysys import MassParams, build_ac, equilateral_point
from ccbif.solver import Branch, ConvergenceError, SolutionRecord, make_record


def _record(m=0.5):
    return make_record(build_ac(MassParams.family("three-equal", m)), equilateral_point(m))


def _branch(dets, family="three-equal"):
    points = [
        SolutionRecord(MassParams.family(family, 1 + k / 1000), "dziobek",
                       [4.1, 0.79, 0.98, 0.58, 1.0, 0.58, 1.0, 0.57 + k / 1000], 1e-12, det, "{E,g3}")
        for k, det in enumerate(dets)
    ]
    return Branch(family, "dziobek", points, "fold-detected")


def _certificate(classification="fold"):
    cert = Mock()
    cert.classification = classification
    cert.family = "three-equal"
    cert.sketch.return_value = ["verdict: " + classification]
    cert.point.x.max_width.return_value = 1e-70
    cert.to_json.return_value = {"classification": classification, "side": "below", "m": {"lo": "1", "hi": "1"}}
    return cert


def _solve(**options):
    args = dict(family=None, m=0.5, m1=None, m2=None, m3=None, m4=None, system=None, budget=10, seed=1,
                threads=1, out=None, query=None, config=None, verbose=0)
    args.update(options)
    return solve(**args)


def _classify(**options):
    args = dict(family="three-equal", m=1.0, x=None, branch=None, precision=None, route="auto", out=None,
                query=None, cache=False, config=None, verbose=0)
    args.update(options)
    return classify_(**args)


@patch('ccbif.cli.enumerate_solutions')
def test_solve_basic(mock_enum, capsys):
    mock_enum.return_value = [_record()]
    _solve()

    data = json.loads(capsys.readouterr().out)
    assert data["count"] == 1
    assert data["header"]["budget"] == 10
    assert data["orbits"][0]["size"] == 1
    args = mock_enum.call_args[0]
    assert args[1:4] == (10, 1, 1)


@patch('ccbif.cli.enumerate_solutions')
def test_solve_options_as_text(mock_enum, capsys):
    mock_enum.return_value = [_record()]
    _solve(m="0.5", budget="10", seed="1", threads="1", m4="0.5")

    data = json.loads(capsys.readouterr().out)
    assert data["header"]["masses"] == [1.0, 1.0, 1.0, 0.5]
    assert mock_enum.call_args[0][1:4] == (10, 1, 1)


@patch('ccbif.cli.enumerate_solutions')
def test_solve_with_query(mock_enum, capsys):
    mock_enum.return_value = [_record()]
    _solve(query="solutions[0].isotropy")
    assert capsys.readouterr().out.strip() == "D6"


@patch('ccbif.cli.enumerate_solutions')
def test_solve_explicit_masses_are_general(mock_enum, capsys):
    mock_enum.return_value = []
    _solve(m=None, m1=1.0, m2=2.0, m3=3.0, m4=4.0)
    data = json.loads(capsys.readouterr().out)
    assert data["header"]["family"] == "general"
    assert "orbits" not in data


@patch('ccbif.cli.enumerate_solutions')
def test_solve_saves_output(mock_enum):
    mock_enum.return_value = [_record()]
    with tempfile.TemporaryDirectory() as tmpdir:
        dest = str(Path(tmpdir) / "solutions.json")
        with patch('ccbif.cli.rprint') as mock_print:
            _solve(out=dest)
        assert json.loads(Path(dest).read_text())["count"] == 1
        mock_print.assert_called_once()
        assert "Saved to" in mock_print.call_args[0][0]


def test_solve_rejects_negative_mass():
    with patch('ccbif.cli.rprint') as mock_print:
        with pytest.raises(typer.Exit) as info:
            _solve(m=-1.0)
    assert info.value.exit_code == 2
    assert "error" in mock_print.call_args[0][0]


@patch('ccbif.cli.enumerate_solutions')
def test_solve_convergence_failure(mock_enum):
    mock_enum.side_effect = ConvergenceError("divergence", "nothing settled")
    with patch('ccbif.cli.rprint'):
        with pytest.raises(typer.Exit) as info:
            _solve()
    assert info.value.exit_code == 4


@patch('ccbif.cli.continue_branch')
def test_continue_from_fold_start(mock_continue):
    mock_continue.return_value = _branch([0.5, 0.1])
    with tempfile.TemporaryDirectory() as tmpdir:
        dest = str(Path(tmpdir) / "branch.csv")
        with patch('ccbif.cli.rprint') as mock_print:
            continue_(family="three-equal", m=None, system="dziobek", x=None, m_end=None, out=dest,
                      config=None, verbose=0)
        text = Path(dest).read_text()
    assert "# command=continue" in text
    assert "# termination=fold-detected" in text
    _, start, m0, m1 = mock_continue.call_args[0]
    assert len(start) == 8
    assert (m0, m1) == (1.0, 1.1)
    assert mock_continue.call_args[1] == {"family": "three-equal"}
    assert "Saved 2 points" in mock_print.call_args[0][0]


def test_continue_needs_range_with_x():
    with patch('ccbif.cli.rprint'):
        with pytest.raises(typer.Exit) as info:
            continue_(family="three-equal", m=None, system="ac", x="1,1,1,1,1,1", m_end=None, out=None,
                      config=None, verbose=0)
    assert info.value.exit_code == 2


class TestVerify:
    X = ",".join(repr(float(v)) for v in equilateral_point(0.5))

    def _verify(self, **options):
        args = dict(family="three-equal", m=0.5, system="ac", x=self.X, radius=None, precision=None, out=None,
                    query=None, config=None, verbose=0)
        args.update(options)
        return verify(**args)

    @patch('ccbif.cli.certify')
    def test_certified(self, mock_certify, capsys):
        cert = Mock(verdict="unique-zero", reason=None)
        cert.to_json.return_value = {"verdict": "unique-zero"}
        cert.certificate_id.return_value = "0" * 32
        mock_certify.return_value = cert
        self._verify()
        data = json.loads(capsys.readouterr().out)
        assert data["certificate_id"] == "0" * 32
        assert data["verdict"] == "unique-zero"
        assert mock_certify.call_args[0][2] == 256

    @patch('ccbif.cli.krawczyk')
    def test_single_radius_inconclusive(self, mock_krawczyk, capsys):
        cert = Mock(verdict="inconclusive", reason="Krawczyk image not inside the box")
        cert.to_json.return_value = {"verdict": "inconclusive"}
        cert.certificate_id.return_value = "1" * 32
        mock_krawczyk.return_value = cert
        with patch('ccbif.cli.rprint'):
            with pytest.raises(typer.Exit) as info:
                self._verify(radius=1e-3, precision=128)
        assert info.value.exit_code == 3
        assert mock_krawczyk.call_args[0][2:] == (1e-3, 128)
        assert json.loads(capsys.readouterr().out)["verdict"] == "inconclusive"

    @patch('ccbif.cli.certify')
    def test_certification_error(self, mock_certify):
        mock_certify.side_effect = CertificationError("no radius worked", "try --precision 512")
        with patch('ccbif.cli.rprint') as mock_print:
            with pytest.raises(typer.Exit) as info:
                self._verify()
        assert info.value.exit_code == 3
        assert "try --precision 512" in mock_print.call_args[0][0]

    def test_needs_point(self):
        with patch('ccbif.cli.rprint'):
            with pytest.raises(typer.Exit) as info:
                self._verify(x=None)
        assert info.value.exit_code == 2

    def test_bad_point(self):
        with patch('ccbif.cli.rprint'):
            with pytest.raises(typer.Exit) as info:
                self._verify(x="1,two,3")
        assert info.value.exit_code == 2


class TestVerifyCertificate:
    def _run(self, text):
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "cert.json"
            path.write_text(text)
            return verify_certificate(path, verbose=0)

    @patch('ccbif.cli.verify_stored', return_value=True)
    def test_reproduced(self, mock_verify):
        with patch('ccbif.cli.rprint') as mock_print:
            self._run('{"verdict": "unique-zero"}')
        mock_verify.assert_called_once_with({"verdict": "unique-zero"})
        assert "reproduced" in mock_print.call_args[0][0]

    @patch('ccbif.cli.verify_stored', return_value=False)
    def test_not_reproduced(self, mock_verify):
        with patch('ccbif.cli.rprint'):
            with pytest.raises(typer.Exit) as info:
                self._run('{"verdict": "unique-zero"}')
        assert info.value.exit_code == 3

    def test_malformed(self):
        with patch('ccbif.cli.rprint'):
            with pytest.raises(typer.Exit) as info:
                self._run("{not json")
        assert info.value.exit_code == 2

    def test_missing_file(self):
        with patch('ccbif.cli.rprint'):
            with pytest.raises(typer.Exit) as info:
                verify_certificate(Path("/nonexistent/cert.json"), verbose=0)
        assert info.value.exit_code == 2


class TestClassify:
    @patch('ccbif.cli.classify')
    def test_catalogue_guess(self, mock_classify, capsys):
        mock_classify.return_value = _certificate()
        with patch('ccbif.cli.rprint') as mock_print:
            _classify()
        entry = catalogue_entry("three-equal-fold")
        mock_classify.assert_called_once_with("three-equal", entry["m"], entry["x"], 256, "g3", "auto")
        data = json.loads(capsys.readouterr().out)
        assert data["classification"] == "fold"
        assert data["header"]["command"] == "classify"
        assert mock_print.call_count == 1

    @patch('ccbif.cli.classify')
    def test_explicit_guess(self, mock_classify, capsys):
        mock_classify.return_value = _certificate()
        with patch('ccbif.cli.rprint'):
            _classify(m=1.0027, x="4.1,0.79,0.98,0.58,1.0,0.58,1.0,0.57", route="direct", query="side")
        assert mock_classify.call_args[0] == ("three-equal", 1.0027, [4.1, 0.79, 0.98, 0.58, 1.0, 0.58, 1.0, 0.57],
                                              256, None, "direct")
        assert capsys.readouterr().out.strip() == "below"

    @patch('ccbif.cli.classify')
    def test_branch_guess_uses_smallest_determinant(self, mock_classify, capsys):
        mock_classify.return_value = _certificate()
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "branch.csv"
            path.write_text(_branch([0.5, 0.01, 0.2]).to_csv())
            with patch('ccbif.cli.rprint'):
                _classify(m=None, branch=str(path))
        family, m, x = mock_classify.call_args[0][:3]
        assert family == "three-equal"
        assert m == pytest.approx(1.001)
        assert x[-1] == pytest.approx(0.571)

    @patch('ccbif.cli.classify')
    def test_unresolved_exits_3(self, mock_classify, capsys):
        mock_classify.return_value = _certificate("unresolved")
        with patch('ccbif.cli.rprint'):
            with pytest.raises(typer.Exit) as info:
                _classify()
        assert info.value.exit_code == 3
        assert json.loads(capsys.readouterr().out)["classification"] == "unresolved"

    def test_no_catalogue_entry(self):
        with patch('ccbif.cli.rprint') as mock_print:
            with pytest.raises(typer.Exit) as info:
                _classify(m=0.5)
        assert info.value.exit_code == 2
        assert "no catalogued singular point" in mock_print.call_args[0][0]

    def test_guess_needs_mass(self):
        with patch('ccbif.cli.rprint'):
            with pytest.raises(typer.Exit) as info:
                _classify(m=None, x="1,2,3,4,5,6,7,8")
        assert info.value.exit_code == 2

    @patch('ccbif.cli.classify')
    def test_cache_reuses_result(self, mock_classify, capsys):
        mock_classify.return_value = _certificate()
        with tempfile.TemporaryDirectory() as tmpdir:
            with patch('ccbif.cli.CacheConfig', side_effect=lambda: CacheConfig(cache_dir=tmpdir)):
                with patch('ccbif.cli.rprint'):
                    _classify(cache=True)
                    _classify(cache=True)
        assert mock_classify.call_count == 1
        outputs = capsys.readouterr().out
        assert outputs.count('"classification": "fold"') == 2

    @patch('ccbif.cli.classify')
    def test_certification_failure(self, mock_classify):
        mock_classify.side_effect = CertificationError("no singular point near the guess")
        with patch('ccbif.cli.rprint'):
            with pytest.raises(typer.Exit) as info:
                _classify()
        assert info.value.exit_code == 3


@patch('ccbif.cli.count_table')
def test_count_table(mock_count, capsys):
    mock_count.return_value = [
        {"family": "two-pairs", "m": m, "dziobek": d, "ac": d + 13, "distinct": d + 12, "collinear": 12,
         "budget": 50, "seed": 0}
        for m, d in ((0.5, 11), (1.0, 19))
    ]
    with patch('ccbif.cli.rprint') as mock_print:
        count(family="two-pairs", m=[0.5, 1.0], budget=50, seed=None, threads=1, out=None, query=None,
              config=None, verbose=0)
    assert mock_count.call_args[0][:4] == ("two-pairs", [0.5, 1.0], 50, 0)
    assert isinstance(mock_print.call_args[0][0], Table)
    data = json.loads(capsys.readouterr().out)
    assert [row["ac"] for row in data["rows"]] == [24, 32]
    assert data["header"]["m_range"] == [0.5, 1.0]


def test_count_rejects_general_family():
    with patch('ccbif.cli.rprint'):
        with pytest.raises(typer.Exit) as info:
            count(family="general", m=[1.0], budget=None, seed=None, threads=None, out=None, query=None,
                  config=None, verbose=0)
    assert info.value.exit_code == 2


@patch('ccbif.cli.ls_reduce')
def test_ls_reduce_query(mock_reduce, capsys):
    mock_reduce.return_value.to_json.return_value = {"p1": 529935346928, "u": 362080075}
    ls_reduce_(out=None, query="p1", verbose=0)
    assert capsys.readouterr().out.strip() == "529935346928"


@patch('ccbif.cli.ls_reduce')
def test_ls_reduce_failure(mock_reduce):
    mock_reduce.side_effect = ReductionError("kernel of the linearisation is not two-dimensional")
    with patch('ccbif.cli.rprint'):
        with pytest.raises(typer.Exit) as info:
            ls_reduce_(out=None, query=None, verbose=0)
    assert info.value.exit_code == 4


def test_report_writes_diagram_and_summary():
    with tempfile.TemporaryDirectory() as tmpdir:
        first = Path(tmpdir) / "fold-upper.csv"
        second = Path(tmpdir) / "fold-lower.csv"
        first.write_text(_branch([0.5, 0.2]).to_csv())
        second.write_text(_branch([0.4, 0.3, 0.1]).to_csv())
        dest = Path(tmpdir) / "diagram.csv"
        with patch('ccbif.cli.rprint') as mock_print:
            report(files=[first, second], out=str(dest), verbose=0)
        diagram = dest.read_text()
        summary = dest.with_suffix(".md").read_text()
    assert diagram.splitlines()[1].startswith("branch,m,lam0")
    assert sum(1 for line in diagram.splitlines() if line.startswith("fold-")) == 5
    assert "| m = 1 | 2 | 2 | 15 | 14 |" in summary
    assert "Saved to" in mock_print.call_args[0][0]


def test_report_needs_files():
    with patch('ccbif.cli.rprint'):
        with pytest.raises(typer.Exit) as info:
            report(files=[], out=None, verbose=0)
    assert info.value.exit_code == 2
