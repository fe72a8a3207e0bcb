import xml.etree.ElementTree as ET

import pytest

from consolidate.exceptions import SchemaError
from consolidate.experiments import PRUNE_HEADER, SWEEP_HEADER
from consolidate.plots import read_results_csv, render_plots

NS = "{http://www.w3.org/2000/svg}"


def write(path, header, rows):
    path.write_text("\n".join([",".join(header)] + [",".join(map(str, r)) for r in rows]) + "\n")
    return path


def parse(path):
    return ET.parse(path).getroot()


def test_sweep_svg_has_one_errorbar_per_point(tmp_path):
    rows = [("mas", "original", lam, 0.9 + 0.01 * i, 0.005, 5, 0) for i, lam in enumerate([1, 2, 4.5, 8, 16])]
    out = render_plots(write(tmp_path / "sweep.csv", SWEEP_HEADER, rows))
    assert out == tmp_path / "sweep.svg"
    root = parse(out)
    assert len(root.findall(f".//{NS}circle[@class='point']")) == 5
    assert len(root.findall(f".//{NS}line[@class='errorbar']")) == 5


def test_prune_svg_has_series_per_criterion(tmp_path):
    crits = ["magnitude", "fisher", "mas", "si", "total_abs_signal"]
    rows = [(c, f, 1 - f * (k + 1) / 6, 0.01, 10) for k, c in enumerate(crits) for f in (0.0, 0.5, 1.0)]
    root = parse(render_plots(write(tmp_path / "prune.csv", PRUNE_HEADER, rows), tmp_path / "figs"))
    series = root.findall(f".//{NS}g[@class='series']")
    assert [g.get("data-label") for g in series] == crits


def test_nan_points_are_skipped(tmp_path):
    rows = [("si", "original", 1, "nan", "nan", 5, 5), ("si", "original", 2, 0.9, "nan", 5, 4)]
    root = parse(render_plots(write(tmp_path / "sweep.csv", SWEEP_HEADER, rows)))
    assert len(root.findall(f".//{NS}circle")) == 1
    assert not root.findall(f".//{NS}line[@class='errorbar']")


@pytest.mark.parametrize(
    "content,line",
    [
        ("", 1),
        ("a,b\n1,2\n", 1),
        (",".join(SWEEP_HEADER) + "\n", 2),
        (",".join(SWEEP_HEADER) + "\nmas,original,1,0.9\n", 2),
        (",".join(SWEEP_HEADER) + "\nmas,original,1,0.9,0.1,5,0\nmas,original,x,0.9,0.1,5,0\n", 3),
    ],
)
def test_schema_errors_carry_line_and_write_nothing(tmp_path, content, line):
    p = tmp_path / "bad.csv"
    p.write_text(content)
    with pytest.raises(SchemaError) as exc:
        render_plots(p)
    assert exc.value.line == line
    assert not (tmp_path / "bad.svg").exists()


def test_read_results_kind(tmp_path):
    kind, rows = read_results_csv(write(tmp_path / "p.csv", PRUNE_HEADER, [("mas", 0.5, 0.8, 0.01, 10)]))
    assert kind == "prune" and rows[0]["n_runs"] == 10 and rows[0]["fraction"] == 0.5


def test_render_is_deterministic(tmp_path):
    p = write(tmp_path / "sweep.csv", SWEEP_HEADER, [("mas", "stabilized", 0, 0.5, 0.1, 2, 0), ("mas", "stabilized", 3, 0.7, 0.1, 2, 0)])
    a = render_plots(p, tmp_path / "a").read_bytes()
    b = render_plots(p, tmp_path / "b").read_bytes()
    assert a == b
