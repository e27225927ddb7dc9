import json

import numpy as np
import pytest

from bayesreadout.bayes_em import EmConfig, run_em
from bayesreadout.cli import main
from bayesreadout.pinet import ArchitectureSpec, init_weights, save_weights
from bayesreadout.shotfile import read_shotfile

CONFIGS = __import__("pathlib").Path(__file__).resolve().parent.parent / "configs"


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def tiny_weights(tmp_path_factory):
    arch = ArchitectureSpec(encoder_widths=(1, 4), head_widths=(9, 8, 21))
    w = init_weights(arch, seed=0)
    rng = np.random.default_rng(0)
    w.set_tensors({k: v + rng.normal(0, 0.1, v.shape) for k, v in w.tensors.items()})
    return save_weights(w, tmp_path_factory.mktemp("w") / "tiny.pinw")


def write_config(tmp_path, obj, name="c.json"):
    p = tmp_path / name
    p.write_text(obj if isinstance(obj, str) else json.dumps(obj, indent=2))
    return p


def test_simulate_is_byte_reproducible(tmp_path, capsys):
    for d in ("a", "b"):
        assert run(["simulate", CONFIGS / "single_o61.json", "--out", tmp_path / d], capsys)[0] == 0
    assert (tmp_path / "a" / "shots.csv").read_bytes() == (tmp_path / "b" / "shots.csv").read_bytes()
    run(["simulate", CONFIGS / "single_o61.json", "--out", tmp_path / "c", "--seed", "12"], capsys)
    assert (tmp_path / "a" / "shots.csv").read_bytes() != (tmp_path / "c" / "shots.csv").read_bytes()


def test_simulate_rabi_writes_points_and_manifest(tmp_path, capsys):
    code, out, _ = run(["simulate", CONFIGS / "rabi_o61.json", "--out", tmp_path], capsys)
    assert code == 0
    files = sorted(p.name for p in tmp_path.glob("point_*.csv"))
    assert len(files) == 7
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["files"] == files and len(man["rois"]) == 4
    sf = read_shotfile(tmp_path / files[3])
    assert sf.meta["config"]["seed"] == 3 and len(sf.records) == 4


def test_simulate_bad_occupation_reports_line(tmp_path, capsys):
    cfg = write_config(tmp_path, '{\n  "seed": 1,\n  "fixture": "o61",\n  "occupation": 1.5\n}\n')
    code, _, err = run(["simulate", cfg, "--out", tmp_path / "o"], capsys)
    assert code == 2
    assert "line 4" in err and "occupation" in err


def test_simulate_bad_json(tmp_path, capsys):
    cfg = write_config(tmp_path, '{\n  "seed": 1,\n  oops\n}\n')
    code, _, err = run(["simulate", cfg, "--out", tmp_path / "o"], capsys)
    assert code == 2 and "line 3" in err


def test_simulate_unknown_fixture(tmp_path, capsys):
    cfg = write_config(tmp_path, {"fixture": "o99", "occupation": 0.5})
    assert run(["simulate", cfg, "--out", tmp_path / "o"], capsys)[0] == 2


@pytest.fixture
def shots(tmp_path, capsys):
    run(["simulate", CONFIGS / "single_o61.json", "--out", tmp_path], capsys)
    return tmp_path / "shots.csv"


def test_infer_matches_library(shots, capsys):
    code, out, _ = run(["infer", shots], capsys)
    assert code == 0
    report = json.loads(out)
    sf = read_shotfile(shots)
    for row, rec in zip(report["results"], sf.records):
        post, theta, _ = run_em(rec, sf.dark, None, EmConfig())
        assert row["l_hat"] == post.mean and row["delta_l"] == post.sd
        assert row["alpha_f"] == theta.alpha


def test_infer_is_byte_reproducible(shots, tmp_path, capsys):
    outs = []
    for k in range(2):
        run(["infer", shots, "--format", "csv", "--out", tmp_path / f"r{k}.csv"], capsys)
        outs.append((tmp_path / f"r{k}.csv").read_bytes())
    assert outs[0] == outs[1]


def test_infer_grid_refinement(shots, capsys):
    coarse = json.loads(run(["infer", shots], capsys)[1])["results"]
    fine = json.loads(run(["infer", shots, "--grid", "2001"], capsys)[1])["results"]
    for a, b in zip(coarse, fine):
        assert abs(a["l_hat"] - b["l_hat"]) < 1e-6


def test_infer_per_shot_matches_collapsed(shots, capsys):
    a = json.loads(run(["infer", shots], capsys)[1])["results"]
    b = json.loads(run(["infer", shots, "--per-shot"], capsys)[1])["results"]
    for x, y in zip(a, b):
        assert abs(x["l_hat"] - y["l_hat"]) < 1e-10


def test_infer_threshold(shots, capsys):
    code, out, _ = run(["infer", shots, "--method", "threshold", "--bright", "6,2", "--reference", "0.7"], capsys)
    assert code == 0
    row = json.loads(out)["results"][0]
    assert 0 <= row["l_hat"] <= 1 and "fidelity" in row and row["n_th"] >= 0


def test_infer_network(shots, tiny_weights, capsys):
    code, out, _ = run(["infer", shots, "--method", "em-net", "--weights", tiny_weights], capsys)
    assert code == 0
    assert json.loads(out)["method"] == "em_network"


def test_infer_missing_calibration(tmp_path, capsys):
    p = tmp_path / "s.csv"
    p.write_text("# bayesreadout-shots 1\n# exposure_tag: x\n# rois: a\nroi_id,shot_index,count\na,0,3\n")
    assert run(["infer", p], capsys)[0] == 4
    assert run(["infer", p, "--dark", "2,2", "--method", "threshold"], capsys)[0] == 4


def test_infer_empty_roi(tmp_path, capsys):
    p = tmp_path / "s.csv"
    p.write_text("# bayesreadout-shots 1\n# rois: a,b\n# dark: 2.0 2.0\nroi_id,shot_index,count\na,0,3\n")
    code, _, err = run(["infer", p], capsys)
    assert code == 3 and "'b'" in err


def test_infer_bad_file(tmp_path, capsys):
    p = tmp_path / "s.csv"
    p.write_text("# bayesreadout-shots 7\n")
    assert run(["infer", p], capsys)[0] == 3


def test_infer_missing_weights(shots, tmp_path, capsys):
    assert run(["infer", shots, "--method", "em-net", "--weights", tmp_path / "none.pinw"], capsys)[0] == 3


def test_train_and_eval_small(tmp_path, capsys):
    cfg = write_config(
        tmp_path,
        {
            "seed": 7,
            "size": 120,
            "grid": 21,
            "ranges": {"N": [20, 100]},
            "architecture": {"encoder_widths": [1, 4], "head_widths": [9, 8, 21]},
            "optimizer": {"batch_size": 40, "epochs": 2},
        },
    )
    for k in range(2):
        code, out, _ = run(["train", cfg, "--out", tmp_path / f"w{k}.pinw"], capsys)
        assert code == 0
    assert (tmp_path / "w0.pinw").read_bytes() == (tmp_path / "w1.pinw").read_bytes()
    code, out, _ = run(["eval", "--weights", tmp_path / "w0.pinw", "--tasks", "30", "--em-tasks", "3"], capsys)
    assert code == 0
    rep = json.loads(out)
    assert rep["kl_median"] >= 0 and 0 <= rep["em_agreement_fraction"] <= 1
    again = run(["eval", "--weights", tmp_path / "w0.pinw", "--tasks", "30", "--em-tasks", "3"], capsys)[1]
    assert again == out


def test_train_bad_architecture(tmp_path, capsys):
    cfg = write_config(tmp_path, {"size": 10, "grid": 21, "architecture": {"activation": "relu"}})
    assert run(["train", cfg, "--out", tmp_path / "w.pinw"], capsys)[0] == 2


def test_benchmark_smoke(tiny_weights, tmp_path, capsys):
    code, out, _ = run(
        ["benchmark", "--weights", tiny_weights, "--Ns", "20,40", "--iterations", "2", "--repeats", "1", "--out", tmp_path],
        capsys,
    )
    assert code == 0
    rep = json.loads(out)
    assert [r["N"] for r in rep["rows"]] == [20, 40] and rep["reference_speedup"] == 100.56
    assert (tmp_path / "benchmark.csv").read_text().startswith("N,")


def test_experiment_threads_deterministic(tmp_path, capsys):
    base = ["experiment", "rabi", "--seeds", "2", "--N", "60", "--methods", "threshold,em"]
    run(base + ["--out", tmp_path / "a"], capsys)
    run(base + ["--out", tmp_path / "b", "--threads", "2"], capsys)
    for name in ("experiment_points.csv", "experiment_summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    summary = json.loads((tmp_path / "a" / "experiment_summary.json").read_text())
    assert set(summary["summary"]) == {"threshold", "em_exact"}


def test_experiment_unknown_method(capsys):
    assert run(["experiment", "rabi", "--methods", "magic"], capsys)[0] == 2


def test_compare_with_reference(tmp_path, capsys):
    run(["simulate", CONFIGS / "rabi_o61.json", "--out", tmp_path / "short"], capsys)
    run(["simulate", CONFIGS / "rabi_long_reference.json", "--out", tmp_path / "long"], capsys)
    code, out, _ = run(
        [
            "compare", tmp_path / "short", "--reference", tmp_path / "long", "--methods", "threshold,em",
            "--bright", "6,2", "--out", tmp_path / "cmp",
        ],
        capsys,
    )
    assert code == 0
    summary = json.loads(out)
    assert summary["reference"] == "threshold-long-exposure"
    assert summary["mean_fidelity"]["em_exact"] > summary["mean_fidelity"]["threshold"]
    assert (tmp_path / "cmp" / "compare_points.csv").exists()


def test_compare_needs_threshold_calibration(tmp_path, capsys):
    run(["simulate", CONFIGS / "rabi_o61.json", "--out", tmp_path], capsys)
    assert run(["compare", tmp_path, "--methods", "threshold"], capsys)[0] == 4
