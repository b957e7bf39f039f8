import pandas as pd
import pytest
from click.testing import CliRunner

from mapsearch.cli import main
from mapsearch.services.report import read_table


@pytest.fixture
def invoke(tmp_path):
    runner = CliRunner()

    def run(*args, **settings):
        settings.setdefault("output_dir", str(tmp_path / "out"))
        flags = []
        for key, value in settings.items():
            flags += ["--set", f"{key.replace('__', '.')}={value}"]
        return runner.invoke(main, flags + list(args))

    return run


def test_version():
    result = CliRunner().invoke(main, ["--version"])
    assert result.exit_code == 0
    assert "0.1.0" in result.output


def test_lower_bound_table(invoke):
    result = invoke("lower-bound", problems="8x3", accel="single-pe")
    assert result.exit_code == 0, result.output
    assert "3528" in result.output
    assert "18" in result.output


def test_unknown_key_exits_with_2(invoke):
    result = invoke("lower-bound", colour="blue")
    assert result.exit_code == 2


def test_bad_value_exits_with_2(invoke):
    result = invoke("lower-bound", runs="0")
    assert result.exit_code == 2


def test_missing_dataset_exits_with_3(invoke, tmp_path):
    result = invoke("train", dataset__path=str(tmp_path / "nowhere.csv"))
    assert result.exit_code == 3


def test_search_is_reproducible_without_timing(invoke, tmp_path):
    settings = dict(problems="16x3", methods="sa,random", runs="2", budget__iterations="12")
    trace = tmp_path / "out" / "trace-conv1d-16x3-sa.csv"
    outputs = []
    for _ in range(2):
        result = invoke("--no-timing", "search", **settings)
        assert result.exit_code == 0, result.output
        outputs.append(trace.read_bytes())
    assert outputs[0] == outputs[1]
    frame = read_table(str(trace))
    assert len(frame) == 24
    assert (frame["elapsed_ns"] == 0).all()
    best = (tmp_path / "out" / "best-conv1d-16x3-random.txt").read_text()
    assert best.startswith("# mapsearch-mapping v1\n")
    assert "# edp=" in best


def test_compare_tables(invoke, tmp_path):
    result = invoke("--no-timing", "compare", problems="16x3", methods="sa,random", runs="2",
                    budget__iterations="16")
    assert result.exit_code == 0, result.output
    out = tmp_path / "out"
    iterations = read_table(str(out / "report-iterations.csv"))
    assert len(iterations) == 10
    assert iterations["checkpoint"].tolist() == [1, 2, 4, 8, 16] * 2
    assert (iterations["runs"] == 2).all()
    assert not (out / "report-time.csv").exists()
    ratios = read_table(str(out / "report-ratios.csv"))
    assert ratios[["method_a", "method_b"]].values.tolist() == [["sa", "random"]]


def test_surface(invoke, tmp_path):
    result = invoke("surface", problems="8x3", surface__x="L2.W", surface__y="L2.R")
    assert result.exit_code == 0, result.output
    df = read_table(str(tmp_path / "out" / "surface-conv1d-8x3.csv"))
    assert len(df) == 8
    assert sorted(set(df["x"])) == [1, 2, 3, 6]
    assert (df["edp"] > 0).all()


def test_surface_spans_orders_of_magnitude(invoke, tmp_path):
    result = invoke("surface", problems="239x120", surface__x="L2.W", surface__y="L2.R")
    assert result.exit_code == 0, result.output
    df = read_table(str(tmp_path / "out" / "surface-conv1d-239x120.csv"))
    assert len(df) == 16 * 16
    assert df["edp"].max() / df["edp"].min() > 10


def test_surface_needs_axes(invoke):
    assert invoke("surface").exit_code == 2
    assert invoke("surface", surface__x="L3.W", surface__y="L2.R").exit_code == 2


def test_characterize(invoke, tmp_path):
    result = invoke("characterize", problems="8x3", characterize__samples="20")
    assert result.exit_code == 0, result.output
    df = read_table(str(tmp_path / "out" / "characterize-conv1d.csv"))
    assert df["samples"].tolist() == [20]
    assert (df["min"] >= 1.0).all()
    assert df["exact"].tolist() == [True]
    assert (df["placements"] > 0).all()


def test_dataset_train_and_gradient_search(invoke, tmp_path):
    common = dict(dataset__size="150", dataset__range__W="8:24", dataset__range__R="2:4",
                  model__widths="8", train__epochs="2", train__batch_size="32")
    result = invoke("gen-dataset", **common)
    assert result.exit_code == 0, result.output
    assert (tmp_path / "out" / "dataset-conv1d.csv").exists()
    assert invoke("gen-dataset", **common).exit_code == 3
    result = invoke("gen-dataset", "--overwrite", **common)
    assert result.exit_code == 0, result.output

    result = invoke("train", **common)
    assert result.exit_code == 0, result.output
    assert (tmp_path / "out" / "model-conv1d.npz").exists()
    curve = read_table(str(tmp_path / "out" / "loss-conv1d.csv"))
    assert curve["epoch"].tolist() == [1, 2]

    result = invoke("search", problems="16x3", methods="mm", runs="1", budget__iterations="10", **common)
    assert result.exit_code == 0, result.output
    trace = read_table(str(tmp_path / "out" / "trace-conv1d-16x3-mm.csv"))
    assert len(trace) == 10
    assert trace["true_obj_if_known"].isna().all()
    assert pd.notna(trace["best_true_obj_final"]).all()

    result = invoke("loss-compare", **common)
    assert result.exit_code == 0, result.output
    losses = read_table(str(tmp_path / "out" / "loss-compare-conv1d.csv"))
    assert losses["loss"].tolist() == ["huber", "mse", "mae"]


def test_search_with_mm_needs_a_model(invoke, tmp_path):
    result = invoke("search", methods="mm", model__path=str(tmp_path / "none.npz"))
    assert result.exit_code == 3
