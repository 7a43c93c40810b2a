import struct
from pathlib import Path

import pytest

from clcplots.cli import main as cli_main
from clcplots.render import KINDS, SchemaError, read_rows, render

FIXTURES = Path(__file__).parent / "fixtures"

FIXTURE_FOR_KIND = {
    "heatmap": "heatmap.csv",
    "overlap": "overlap.csv",
    "cumulative": "cumulative.csv",
    "f1-bars": "aggregate.csv",
}


def png_size(path: Path) -> tuple[int, int]:
    data = path.read_bytes()
    assert data[:8] == b"\x89PNG\r\n\x1a\n"
    w, h = struct.unpack(">II", data[16:24])
    return w, h


@pytest.mark.parametrize("kind", KINDS)
def test_renders_every_kind_from_golden_csvs(kind, tmp_path):
    out = render(kind, FIXTURES / FIXTURE_FOR_KIND[kind], tmp_path / f"{kind}.png")
    assert out.exists()
    w, h = png_size(out)
    assert w > 100 and h > 100


@pytest.mark.parametrize("kind", KINDS)
def test_cli_exit_zero(kind, tmp_path):
    out = tmp_path / "fig.png"
    rc = cli_main([kind, "--in", str(FIXTURES / FIXTURE_FOR_KIND[kind]), "--out", str(out)])
    assert rc == 0
    assert out.exists()


def test_missing_column_names_the_column(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("token_index,selected\n3,1\n")  # no "layer"
    with pytest.raises(SchemaError) as err:
        read_rows(bad, "heatmap")
    assert err.value.column == "layer"
    assert "layer" in str(err.value)


def test_cli_schema_violation_exit_one(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("reference_layer,percent\n1,100\n")  # no "layer"
    rc = cli_main(["overlap", "--in", str(bad), "--out", str(tmp_path / "x.png")])
    assert rc == 1
    assert "layer" in capsys.readouterr().err


def test_cli_missing_input_exit_two(tmp_path):
    rc = cli_main(["heatmap", "--in", str(tmp_path / "absent.csv"), "--out", str(tmp_path / "x.png")])
    assert rc == 2


def test_single_selected_cell_heatmap(tmp_path):
    csv_path = tmp_path / "one.csv"
    csv_path.write_text("layer,token_index,selected\n1,5,1\n")
    out = render("heatmap", csv_path, tmp_path / "one.png")
    assert out.exists()


def test_cumulative_from_known_curve(tmp_path):
    # the 4/3/2/1 drift example: cumulative 40/70/90/100
    csv_path = tmp_path / "c.csv"
    lines = ["rank,cumulative_percent,variant"]
    for rank, pct in enumerate([40.0, 70.0, 90.0, 100.0], start=1):
        lines.append(f"{rank},{pct},all")
    csv_path.write_text("\n".join(lines) + "\n")
    out = render("cumulative", csv_path, tmp_path / "c.png")
    assert out.exists()


def test_f1_bars_with_nonzero_adjusted(tmp_path):
    csv_path = tmp_path / "agg.csv"
    csv_path.write_text(
        "strategy,params,plain_f1,adjusted_f1,n_total,n_baseline_nonzero\n"
        "full_prefill,,0.62,0.81,40,30\n"
        "naive,,0.41,0.55,40,30\n"
        "cacheblend,r=0.15,0.52,0.69,40,30\n"
        "psr,r=0.15;p=3;t=0.7;s=2,0.57,0.74,40,30\n"
    )
    out = render("f1-bars", csv_path, tmp_path / "agg.png")
    assert out.exists()


def test_inputs_never_modified(tmp_path):
    src = FIXTURES / "overlap.csv"
    before = src.read_bytes()
    render("overlap", src, tmp_path / "o.png")
    assert src.read_bytes() == before


def test_regeneration_keeps_dimensions(tmp_path):
    a = render("cumulative", FIXTURES / "cumulative.csv", tmp_path / "a.png")
    b = render("cumulative", FIXTURES / "cumulative.csv", tmp_path / "b.png")
    assert png_size(a) == png_size(b)
    assert a.read_bytes() == b.read_bytes()


def test_empty_data_rows_rejected(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("rank,cumulative_percent,variant\n")
    with pytest.raises(ValueError):
        render("cumulative", empty, tmp_path / "x.png")
