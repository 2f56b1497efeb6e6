import csv
import json

import numpy as np
import pytest
from scipy.io import savemat

from mbunmix import cli
from mbunmix import data as D
from mbunmix import experiment as X

TINY_ARCH = {"filters_1d": [4, 4, 4], "filters_2d": [4, 4], "filters_3d": [2] * 6, "head_units": [16]}
TINY_TRAIN = {"max_epochs": 2, "patience": 2, "batch_size": 64}


@pytest.fixture
def bundle_dir(tmp_path):
    assert cli.main(["synth", "--out", str(tmp_path / "b"), "--height", "12", "--width", "12",
                     "--bands", "24", "--snr-db", "40"]) == 0
    return tmp_path / "b"


def _config(tmp_path, bundle_dir, **over):
    cfg = {"bundle": str(bundle_dir), "variants": ["MB", "LMM"], "folds": 2, "fractions": [1.0],
           "out": str(tmp_path / "run"), "arch": TINY_ARCH, "train": TINY_TRAIN}
    cfg.update(over)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- synth


def test_synth_default_and_seeded(tmp_path):
    assert cli.main(["synth", "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["synth", "--out", str(tmp_path / "b")]) == 0
    a, b = D.load_bundle(tmp_path / "a"), D.load_bundle(tmp_path / "b")
    np.testing.assert_allclose(a.abundances.sum(-1), 1.0, atol=1e-6)
    for name in ("cube.f32", "abundances.f32", "metadata.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synth_rejects_more_endmembers_than_bands(tmp_path, capsys):
    assert cli.main(["synth", "--out", str(tmp_path / "x"), "--bands", "3", "--endmembers", "4"]) == 2
    assert "endmembers" in capsys.readouterr().err


# ---------------------------------------------------------------- run


def test_run_writes_one_row_per_cell(tmp_path, bundle_dir):
    assert cli.main(["run", "--config", str(_config(tmp_path, bundle_dir))]) == 0
    out = tmp_path / "run"
    with open(out / "results.csv") as fh:
        header = fh.readline().strip().split(",")
    assert header == X.BASE_COLUMNS + ["rmse_e0", "rmse_e1", "rmse_e2"]
    rows = _rows(out / "results.csv")
    assert len(rows) == 4
    assert [(r["variant"], r["fold"]) for r in rows] == [("MB", "0"), ("MB", "1"), ("LMM", "0"), ("LMM", "1")]
    payload = json.loads((out / "results.json").read_text())
    assert payload["config"]["variants"] == ["MB", "LMM"] and len(payload["rows"]) == 4
    assert len(list((out / "models").glob("*.npz"))) == 4


def test_flag_overrides(tmp_path, bundle_dir):
    cfg = _config(tmp_path, bundle_dir)
    args = cli.build_parser().parse_args(["run", "--config", str(cfg), "--variants", "1D+2D,LMM", "--folds", "3",
                                          "--fractions", "1.0,0.66", "--patch", "1,3", "--snr", "clean,30",
                                          "--seed", "9", "--out", str(tmp_path / "o")])
    ec = cli.experiment_config(args)
    assert ec.variants == ["MB(1D+2D)", "LMM"] and ec.folds == 3 and ec.seed == 9
    assert ec.fractions == [1.0, 0.66] and ec.patch_sizes == [1, 3] and ec.snrs == [None, 30.0]
    assert len(X.plan_cells(ec)) == 2 * 3 * 2 * 2 * 2


def test_noise_columns_and_ordering(tmp_path, bundle_dir):
    cfg = _config(tmp_path, bundle_dir, variants=["LMM"], snrs=[None, 20, 50])
    assert cli.main(["run", "--config", str(cfg)]) == 0
    rows = _rows(tmp_path / "run" / "results.csv")
    assert [r["snr_db"] for r in rows[:3]] == ["", "20.0", "50.0"]
    by_snr = {r["snr_db"]: float(r["rmse"]) for r in rows if r["fold"] == "0"}
    assert by_snr["20.0"] > by_snr["50.0"]


def test_rerun_is_byte_identical_and_resume_matches(tmp_path, bundle_dir):
    cfg = _config(tmp_path, bundle_dir, snrs=[None, 30])
    assert cli.main(["run", "--config", str(cfg)]) == 0
    out = tmp_path / "run"
    first = (out / "results.csv").read_bytes()
    # simulate a kill after the first unit: keep one progress line plus a torn write
    lines = (out / "progress.jsonl").read_text().splitlines()
    (out / "progress.jsonl").write_text(lines[0] + "\n" + lines[1][:20])
    (out / "results.csv").unlink()
    assert cli.main(["run", "--config", str(cfg)]) == 0
    assert (out / "results.csv").read_bytes() == first
    fresh = _config(tmp_path, bundle_dir, snrs=[None, 30], out=str(tmp_path / "again"))
    assert cli.main(["run", "--config", str(fresh)]) == 0
    assert (tmp_path / "again" / "results.csv").read_bytes() == first


def test_adding_a_variant_leaves_other_cells_unchanged(tmp_path, bundle_dir):
    assert cli.main(["run", "--config", str(_config(tmp_path, bundle_dir, variants=["MB"]))]) == 0
    alone = _rows(tmp_path / "run" / "results.csv")
    cfg = _config(tmp_path, bundle_dir, variants=["2D", "MB"], out=str(tmp_path / "both"))
    assert cli.main(["run", "--config", str(cfg)]) == 0
    both = [r for r in _rows(tmp_path / "both" / "results.csv") if r["variant"] == "MB"]
    assert alone == both


def test_failed_cells_become_error_rows(tmp_path, bundle_dir):
    # a 1% fraction of a ~96 pixel pool is a single pixel: too few to train on
    cfg = _config(tmp_path, bundle_dir, variants=["MB", "LMM"], folds=1, fractions=[0.01, 1.0])
    assert cli.main(["run", "--config", str(cfg)]) == 1
    rows = _rows(tmp_path / "run" / "results.csv")
    assert len(rows) == 4
    failed = [r for r in rows if r["rmse"] == ""]
    assert {(r["variant"], r["fraction"]) for r in failed} == {("MB", "0.01"), ("LMM", "0.01")}
    payload = json.loads((tmp_path / "run" / "results.json").read_text())
    assert all("error" in r for r in payload["rows"] if r["rmse"] is None)


def test_rows_are_auditable(tmp_path, bundle_dir):
    cfg_path = _config(tmp_path, bundle_dir, snrs=[None, 30])
    assert cli.main(["run", "--config", str(cfg_path)]) == 0
    cfg = X.ExperimentConfig.from_dict(json.loads(cfg_path.read_text()) | {"snrs": [None, 30]})
    payload = json.loads((tmp_path / "run" / "results.json").read_text())
    for row in payload["rows"][::3]:
        again = X.audit_row(cfg, row)
        assert again["rmse"] == row["rmse"] and again["rmsaad"] == row["rmsaad"]


def test_timing_columns_filled_on_request(tmp_path, bundle_dir):
    cfg = _config(tmp_path, bundle_dir, variants=["LMM"], folds=1)
    assert cli.main(["run", "--config", str(cfg), "--timing"]) == 0
    row = _rows(tmp_path / "run" / "results.csv")[0]
    assert float(row["train_seconds"]) >= 0 and float(row["infer_seconds"]) >= 0


def test_worker_pool_matches_serial(tmp_path, bundle_dir):
    serial = _config(tmp_path, bundle_dir, variants=["LMM", "1D"], folds=2)
    assert cli.main(["run", "--config", str(serial)]) == 0
    pooled = _config(tmp_path, bundle_dir, variants=["LMM", "1D"], folds=2, out=str(tmp_path / "pool"), workers=2)
    assert cli.main(["run", "--config", str(pooled)]) == 0
    assert (tmp_path / "run" / "results.csv").read_bytes() == (tmp_path / "pool" / "results.csv").read_bytes()


def test_config_invariants(tmp_path, bundle_dir):
    base = {"bundle": str(bundle_dir)}
    for bad in ({"variants": []}, {"fractions": [0.5]}, {"patch_sizes": [4]}, {"variants": ["XX"]},
                {"train": {"seed": 3}}, {"nonsense": 1}):
        with pytest.raises(X.ExperimentError):
            X.ExperimentConfig.from_dict(base | bad)
    with pytest.raises(X.ExperimentError):
        X.ExperimentConfig()


def test_full_matrix_enumeration():
    every = [v for v in X.VARIANTS]
    cfg = X.ExperimentConfig(synth={}, variants=every, folds=30)
    assert len(X.plan_cells(cfg)) == len(every) * 30 * 6


def test_synth_config_run(tmp_path):
    cfg = X.ExperimentConfig(synth={"height": 10, "width": 10, "bands": 12}, variants=["LMM"], folds=1,
                             fractions=[1.0], out=str(tmp_path / "s"))
    rows, ok = X.run_experiment(cfg)
    assert ok and len(rows) == 1 and rows[0]["dataset"] == "synthetic"


# ---------------------------------------------------------------- stats


def _fake_rows(datasets, variants, fractions, folds, rng):
    rows = []
    for d in datasets:
        for v in variants:
            for f in fractions:
                for k in range(folds):
                    rows.append({"dataset": d, "variant": v, "fold": k, "fraction": f, "patch": 3,
                                 "snr_db": None, "rmse": float(rng.random()), "rmsaad": float(rng.random())})
    return rows


def test_self_comparison_is_all_same():
    rows = _fake_rows(["a", "b"], ["MB"], [1.0, 0.33], 10, np.random.default_rng(0))
    comps = X.compare_to_baseline(rows, "MB", variants=["MB"])
    assert comps and all(c["p_value"] == 1.0 and c["verdict"] == "same" for c in comps)


def test_branch_subset_grand_total():
    subsets = ["MB(1D)", "MB(2D)", "MB(3D)", "MB(1D+2D)", "MB(1D+3D)", "MB(2D+3D)"]
    rows = _fake_rows(["Sa", "Ur", "JR"], ["MB"] + subsets, list(D.SUPPORTED_FRACTIONS), 30,
                      np.random.default_rng(1))
    comps = X.compare_to_baseline(rows, "MB")
    assert len(comps) == 108
    summary = X.summarize_comparisons(comps)
    assert sum(s["total"] for s in summary) == 108


def test_rank_table_columns_conserve_rank_sum():
    variants = ["MB", "MB-DR", "MB-Res", "LMM"]
    rows = _fake_rows(["a", "b", "c"], variants, [1.0, 0.06], 5, np.random.default_rng(2))
    table = X.rank_table(rows)
    for f in (1.0, 0.06):
        assert sum(r["ranks"][f] for r in table) == pytest.approx(4 * 5 / 2)


def test_stats_errors():
    rows = _fake_rows(["a"], ["MB", "LMM"], [1.0], 1, np.random.default_rng(3))
    with pytest.raises(X.StatsError, match="paired folds"):
        X.compare_to_baseline(rows, "MB")
    with pytest.raises(X.StatsError):
        X.compare_to_baseline(rows, "MB-DR")


def test_stats_command(tmp_path, bundle_dir):
    cfg = _config(tmp_path, bundle_dir, variants=["MB", "LMM", "1D"], folds=3, fractions=[1.0, 0.66])
    assert cli.main(["run", "--config", str(cfg)]) == 0
    results = tmp_path / "run" / "results.csv"
    assert cli.main(["stats", str(results), "--baseline", "MB", "--metric", "rmse,rmsaad"]) == 0
    comps = _rows(tmp_path / "run" / "comparisons.csv")
    assert len(comps) == 2 * 2 * 2
    ranks = _rows(tmp_path / "run" / "ranks.csv")
    assert list(ranks[0]) == ["metric", "patch", "snr_db", "variant", "1", "0.66", "mean"]
    assert (tmp_path / "run" / "wilcoxon_summary.csv").exists()


# ---------------------------------------------------------------- maps


def test_pgm_encoding(tmp_path):
    values = np.array([[-0.2, 0.0, 0.5], [1.0, 1.3, 0.25]])
    path = X.write_pgm(tmp_path / "m.pgm", values)
    raw = path.read_bytes()
    header = b"P5\n3 2\n255\n"
    assert raw.startswith(header) and len(raw) == len(header) + 6
    np.testing.assert_array_equal(X.read_pgm(path), [[0, 0, 128], [255, 255, 64]])


def test_truth_maps_of_one_hot_region(tmp_path):
    ab = np.zeros((4, 5, 2), dtype=np.float32)
    ab[..., 1] = 1
    ab[:2, :2] = [1, 0]
    D.save_bundle(tmp_path / "b", D.Bundle("s", np.ones((4, 5, 9), dtype=np.float32), ab))
    assert cli.main(["maps", "--bundle", str(tmp_path / "b"), "--truth", "--out", str(tmp_path / "maps")]) == 0
    first = X.read_pgm(sorted((tmp_path / "maps").glob("*.pgm"))[0])
    assert (first[:2, :2] == 255).all() and (first[2:] == 0).all()


def test_maps_from_model(tmp_path, bundle_dir):
    assert cli.main(["run", "--config", str(_config(tmp_path, bundle_dir, folds=1))]) == 0
    for model in (tmp_path / "run" / "models").glob("*.npz"):
        out = tmp_path / model.stem
        assert cli.main(["maps", "--bundle", str(bundle_dir), "--model", str(model), "--out", str(out)]) == 0
        files = sorted(out.glob("*.pgm"))
        assert len(files) == 3
        assert all(f.stat().st_size == len(b"P5\n12 12\n255\n") + 144 for f in files)


def test_maps_dimension_mismatch(tmp_path, bundle_dir):
    assert cli.main(["run", "--config", str(_config(tmp_path, bundle_dir, folds=1))]) == 0
    cli.main(["synth", "--out", str(tmp_path / "other"), "--height", "6", "--width", "6", "--bands", "30"])
    for model in (tmp_path / "run" / "models").glob("*.npz"):
        assert cli.main(["maps", "--bundle", str(tmp_path / "other"), "--model", str(model),
                         "--out", str(tmp_path / "m")]) == 2


# ---------------------------------------------------------------- convert


def test_convert_csv_and_mat(tmp_path):
    rng = np.random.default_rng(0)
    h, w, bands, c = 3, 4, 6, 2
    cube = rng.random((h, w, bands)).astype(np.float32)
    ab = rng.dirichlet(np.ones(c), size=(h, w)).astype(np.float32)
    # text/CSV: pixels x bands in row-major pixel order
    np.savetxt(tmp_path / "cube.csv", cube.reshape(-1, bands), delimiter=",", fmt="%.9g")
    np.savetxt(tmp_path / "ab.txt", ab.reshape(-1, c), fmt="%.9g")
    assert cli.main(["convert", "--cube", str(tmp_path / "cube.csv"), "--abundances", str(tmp_path / "ab.txt"),
                     "--height", str(h), "--width", str(w), "--out", str(tmp_path / "b1")]) == 0
    b1 = D.load_bundle(tmp_path / "b1")
    np.testing.assert_array_equal(b1.cube, cube)
    np.testing.assert_array_equal(b1.abundances, ab)
    # MATLAB layout: bands x pixels with column-major pixel numbering
    savemat(tmp_path / "scene.mat", {"V": cube.transpose(1, 0, 2).reshape(-1, bands).T.astype(np.float64)})
    savemat(tmp_path / "truth.mat", {"A": ab.transpose(1, 0, 2).reshape(-1, c).T.astype(np.float64),
                                     "M": rng.random((bands, c))})
    assert cli.main(["convert", "--cube", str(tmp_path / "scene.mat"), "--abundances", str(tmp_path / "truth.mat"),
                     "--abundance-key", "A", "--endmembers", str(tmp_path / "truth.mat"), "--endmember-key", "M",
                     "--height", str(h), "--width", str(w), "--name", "mat", "--out", str(tmp_path / "b2")]) == 0
    b2 = D.load_bundle(tmp_path / "b2")
    np.testing.assert_array_equal(b2.cube, cube)
    np.testing.assert_array_equal(b2.abundances, ab)
    assert b2.endmembers.shape == (c, bands) and b2.name == "mat"


def test_convert_size_mismatch(tmp_path):
    np.savetxt(tmp_path / "cube.csv", np.ones((5, 3)), delimiter=",")
    assert cli.main(["convert", "--cube", str(tmp_path / "cube.csv"), "--abundances", str(tmp_path / "cube.csv"),
                     "--height", "2", "--width", "2", "--out", str(tmp_path / "b")]) == 2
