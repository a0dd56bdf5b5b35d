import csv
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import yaml

from cdnnsched import experiment as ex
from cdnnsched import training as tr
from cdnnsched.cli import main
from cdnnsched.neural import TrainingDiverged

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SMOKE = CONFIGS / "smoke_2user.yaml"


@pytest.fixture(scope="module")
def smoke_rows():
    return ex.run_sweep(ex.load_scenario(SMOKE))


def test_presets_listing_is_stable():
    assert list(ex.preset_scenarios()) == ["centralized_2user", "distributed_2user", "distributed_3user"]


def test_centralized_preset():
    sc = ex.load_scenario("centralized_2user")
    noise = sc.csi.resolve(0.3)
    for s in noise.sigma:
        np.testing.assert_allclose(s, [[0, 0.3], [0.3, 1]])
    assert noise.shared
    assert sc.gain_variance[0][1] == 0.25
    pt = ex.SweepPoint(sc, 0.3, 0, 1)
    batch = pt.train_set()
    np.testing.assert_array_equal(batch.estimates[:, 0], batch.estimates[:, 1])
    assert 0.24 < batch.gains[:, 0, 1].mean() < 0.26


def test_distributed_presets():
    noise = ex.load_scenario("distributed_2user").csi.resolve(0.4)
    np.testing.assert_allclose(noise.sigma[0], np.full((2, 2), 0.4))
    np.testing.assert_array_equal(noise.sigma[1], 0.0)
    noise = ex.load_scenario("distributed_3user").csi.resolve(0.7)
    np.testing.assert_allclose(noise.sigma[2], np.full((3, 3), 0.7))
    np.testing.assert_array_equal(noise.sigma[0], 0.0)
    np.testing.assert_array_equal(noise.sigma[1], 0.0)
    noise = ex.distributed_3user(noisy_tx=1).csi.resolve(0.7)
    np.testing.assert_allclose(noise.sigma[0], np.full((3, 3), 0.7))


def test_bundled_configs_match_presets():
    for name, sc in ex.preset_scenarios().items():
        assert ex.load_scenario(CONFIGS / f"{name}.yaml") == sc


def test_yaml_roundtrip(tmp_path):
    sc = replace(ex.distributed_3user(), n_eval=123)
    path = tmp_path / "s.yaml"
    path.write_text(ex.dump_scenario(sc))
    assert ex.load_scenario(path) == sc


def write(tmp_path, d):
    path = tmp_path / "s.yaml"
    path.write_text(yaml.safe_dump(d))
    return path


def base_dict():
    return yaml.safe_load(SMOKE.read_text())


def test_unknown_keys_rejected_with_path(tmp_path):
    d = base_dict()
    d["train"]["momentum"] = 0.9
    with pytest.raises(ex.ScenarioError, match=r"train\.momentum"):
        ex.load_scenario(write(tmp_path, d))
    d = base_dict()
    d["csi"]["tx"][1]["offset"] = 1
    with pytest.raises(ex.ScenarioError, match=r"csi\.tx\[1\]\.offset"):
        ex.load_scenario(write(tmp_path, d))
    d = base_dict()
    d["colour"] = "red"
    with pytest.raises(ex.ScenarioError, match="colour"):
        ex.load_scenario(write(tmp_path, d))


def test_sigma_template_out_of_range(tmp_path):
    d = base_dict()
    d["csi"]["tx"][0]["const"] = [[0.2, 0], [0, 0]]
    with pytest.raises(ex.ScenarioError, match=r"1\.2 at sigma=1"):
        ex.load_scenario(write(tmp_path, d))


def test_parse_errors(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("name: [unclosed")
    with pytest.raises(ex.ScenarioError, match="parse error"):
        ex.load_scenario(bad)
    with pytest.raises(ex.ScenarioError):
        ex.load_scenario(tmp_path / "missing.yaml")
    d = base_dict()
    d["policies"] = ["cdnn", "oracle"]
    with pytest.raises(ex.ScenarioError, match="policies"):
        ex.load_scenario(write(tmp_path, d))


def test_parse_sigma_grid():
    assert ex.parse_sigma_grid("0:1:0.1") == ex.DEFAULT_GRID
    assert len(ex.DEFAULT_GRID) == 11 and ex.DEFAULT_GRID[3] == 0.3
    assert ex.parse_sigma_grid("0.5") == (0.5,)
    assert ex.parse_sigma_grid("0,0.25,1") == (0.0, 0.25, 1.0)


def test_seed_domains_are_disjoint():
    sc = ex.load_scenario(SMOKE)
    pt = ex.SweepPoint(sc, 0.5, 1, 7)
    assert not np.array_equal(pt.train_set().gains[:100], pt.eval_set().gains[:100])
    other = ex.SweepPoint(sc, 0.5, 2, 7)
    assert not np.array_equal(pt.eval_set().gains, other.eval_set().gains)
    assert pt.train_config.seed != other.train_config.seed


def test_sweep_rows_structure(smoke_rows):
    sc = ex.load_scenario(SMOKE)
    k = sc.k_users
    assert len(smoke_rows) == len(sc.sigma_grid) * len(sc.policies) * (1 + k)
    rates = [r for r in smoke_rows if r.metric == "sum_rate"]
    keys = {(r.sigma, r.policy) for r in rates}
    assert len(keys) == len(rates)
    fracs = {(r.sigma, r.policy, r.tx_index) for r in smoke_rows if r.metric == "transmit_fraction"}
    assert len(fracs) == len(sc.sigma_grid) * len(sc.policies) * k


def test_sweep_invariants(smoke_rows):
    rate = {(r.sigma, r.policy): r for r in smoke_rows if r.metric == "sum_rate"}
    frac = {(r.sigma, r.policy, r.tx_index): r.value for r in smoke_rows if r.metric == "transmit_fraction"}
    for (sigma, policy), r in rate.items():
        best = rate[(sigma, "perfect_csi")]
        assert 0 <= r.value <= best.value + best.ci_halfwidth
        assert frac[(sigma, "always_on", 1)] == frac[(sigma, "always_on", 2)] == 1.0
        assert sorted([frac[(sigma, "tdma", 1)], frac[(sigma, "tdma", 2)]]) == [0.0, 1.0]
    assert rate[(0.0, "naive")].value == rate[(0.0, "perfect_csi")].value


def test_csv_format(tmp_path, smoke_rows):
    path = ex.write_csv(smoke_rows, tmp_path / "o.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "scenario,sigma,policy,metric,tx_index,value,ci_halfwidth,n_eval,seed"
    rows = ex.read_csv(path)
    r = next(r for r in rows if r["metric"] == "sum_rate")
    assert r["tx_index"] == "" and len(r["value"].replace(".", "").lstrip("0")) <= 6
    f = next(r for r in rows if r["metric"] == "transmit_fraction")
    assert f["tx_index"] in ("1", "2") and f["ci_halfwidth"] == ""


def test_sweep_deterministic_across_runs_and_jobs(tmp_path, smoke_rows):
    sc = ex.load_scenario(SMOKE)
    a = ex.rows_to_csv(smoke_rows)
    b = ex.run_sweep(sc, out_path=tmp_path / "b.csv", jobs=2)
    assert (tmp_path / "b.csv").read_text() == a
    assert ex.rows_to_csv(b) == a
    c = ex.rows_to_csv(ex.run_sweep(sc, seed=1))
    assert c != a


def test_divergence_recorded_and_sweep_continues(monkeypatch):
    def boom(*args, **kwargs):
        raise TrainingDiverged("non-finite objective", 3)

    monkeypatch.setattr(tr, "train_joint", boom)
    rows = ex.run_sweep(ex.load_scenario(SMOKE), sigma_grid=(0.5,))
    errors = [r for r in rows if r.metric == "error"]
    assert [e.policy for e in errors] == ["cdnn"]
    assert {r.policy for r in rows if r.metric == "sum_rate"} == set(ex.POLICIES) - {"cdnn"}
    assert ex.rows_to_csv(errors).splitlines()[1].startswith("smoke_2user,0.5,cdnn,error,,,,")


def test_run_sweep_rejects_bad_grid():
    with pytest.raises(ex.ScenarioError):
        ex.run_sweep(ex.load_scenario(SMOKE), sigma_grid=(1.5,))


def test_cli_presets(capsys):
    main(["presets"])
    out = capsys.readouterr().out
    assert out.splitlines()[0].startswith("centralized_2user")
    main(["presets", "--scenario", "distributed_2user"])
    assert yaml.safe_load(capsys.readouterr().out)["name"] == "distributed_2user"


def test_cli_pretrain_train_eval(tmp_path):
    ck = tmp_path / "ck"
    args = ["--scenario", str(SMOKE), "--sigma-grid", "0.5", "--seed", "4", "--checkpoint-dir", str(ck)]
    main(["pretrain", *args])
    assert (ck / "sigma_0.5" / "pretrained.npz").exists()
    main(["train", *args])
    for name in ("cdnn.npz", "locally_robust.npz", "objective.csv"):
        assert (ck / "sigma_0.5" / name).exists()
    with open(ck / "sigma_0.5" / "objective.csv") as fh:
        log = list(csv.reader(fh))
    assert log[0] == ["step", "objective"] and len(log) == 1 + 50
    out = tmp_path / "eval.csv"
    main(["eval", *args, "--out", str(out)])
    rows = ex.read_csv(out)
    assert {r["policy"] for r in rows} == set(ex.POLICIES)
    assert all(r["seed"] == "4" for r in rows)

    # the sweep with the same seed trains the same networks
    main(["sweep", *args[:-2], "--out", str(tmp_path / "sweep.csv")])
    assert (tmp_path / "sweep.csv").read_text() == out.read_text()


def test_cli_reports_scenario_errors(tmp_path):
    with pytest.raises(SystemExit, match="error"):
        main(["sweep", "--scenario", str(tmp_path / "nope.yaml")])
