import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from hmmprog import files
from hmmprog.cli import main
from hmmprog.errors import InvalidInputError
from hmmprog.fleetsim import generate_fleet
from hmmprog.pomdp import toy_model

from conftest import random_model, reference_model, two_profile_library


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def fleet_csv(tmp_path):
    path = tmp_path / "fleet.csv"
    assert main(["generate", "--nassets", "40", "--maxlen", "40", "--censor-frac", "0.25", "--seed", "3",
                 "--out", str(path)]) == 0
    return path


@pytest.fixture
def trained(tmp_path, fleet_csv):
    out = tmp_path / "model.json"
    code = main(["train", "--data", str(fleet_csv), "--states", "3", "--components", "2", "--seed", "0",
                 "--max-iters", "300", "--out", str(out)])
    assert code == 0
    return out


# -- file formats -----------------------------------------------------------------


def test_model_file_round_trip_is_exact():
    rng = np.random.default_rng(0)
    for m in [reference_model(), random_model(rng, 3, 2, dim=3), random_model(rng, 4, 3, failure_emits=True)]:
        text = files.dumps_model(m)
        again = files.loads_model(text)
        assert files.dumps_model(again) == text
        for f in ("initial", "trans", "mixweights", "mask"):
            np.testing.assert_array_equal(getattr(again, f), getattr(m, f))
        assert again.components == m.components
        assert again.failure_emits == m.failure_emits


def test_library_file_round_trip(tmp_path):
    lib = two_profile_library()
    files.save_model(tmp_path / "lib.json", lib)
    again = files.load_model(tmp_path / "lib.json")
    np.testing.assert_array_equal(again.prior, lib.prior)
    assert files.dumps_model(again) == files.dumps_model(lib)


def test_sequence_csv_round_trip_is_exact():
    fleet = generate_fleet(reference_model(), 20, 30, censorfrac=0.3, rng=4)
    text = files.dumps_sequences(fleet.sequences, sensors=["a", "b"])
    ids, seqs, sensors = files.loads_sequences(text)
    assert sensors == ["a", "b"]
    assert len(seqs) == 20
    for s, t in zip(fleet.sequences, seqs):
        assert s.endlabel is t.endlabel
        np.testing.assert_array_equal(s.times, t.times)
        np.testing.assert_array_equal(s.masks, t.masks)
        np.testing.assert_array_equal(s.obs[s.masks], t.obs[t.masks])
    assert files.dumps_sequences(seqs, ids, sensors) == text


@pytest.mark.parametrize(
    "body,line",
    [
        ("asset_id,step,x0,endlabel\n1,0,0.5,\n1,1,zz,failed\n", 3),
        ("asset_id,step,x0,endlabel\n1,0,0.5,failed\n1,1,0.2,\n", 3),
        ("asset_id,step,x0,endlabel\n1,1,0.5,\n1,1,0.2,censored\n", 3),
        ("asset_id,step,x0,endlabel\n1,0,0.5,\n1,1,0.2,broken\n", 3),
        ("asset_id,step,x0,endlabel\n1,0,0.5\n", 2),
    ],
)
def test_csv_errors_name_the_line(body, line):
    with pytest.raises(InvalidInputError, match=f"line {line}"):
        files.loads_sequences(body)


def test_empty_cell_is_missing_reading():
    _, seqs, _ = files.loads_sequences("asset_id,step,x0,x1,endlabel\n7,0,1.5,,\n7,1,,,failed\n")
    np.testing.assert_array_equal(seqs[0].masks, [[True, False], [False, False]])


# -- exit codes -------------------------------------------------------------------


def test_train_converges_and_writes_trace(trained):
    trace = read_csv(trained.with_suffix(".trace.csv"))
    obj = np.array([float(r["objective"]) for r in trace])
    assert np.all(np.diff(obj) >= -1e-8)
    m = files.load_model(trained)
    assert np.all(m.trans[~m.mask] == 0.0)


def test_exit_1_on_bad_input(tmp_path, fleet_csv, capsys):
    out = str(tmp_path / "m.json")
    assert main(["train", "--data", str(fleet_csv), "--states", "1", "--components", "2", "--seed", "0",
                 "--out", out]) == 1
    assert main(["train", "--data", str(fleet_csv), "--states", "3", "--components", "2", "--out", out]) == 1
    assert main(["train", "--data", str(tmp_path / "nope.csv"), "--states", "3", "--components", "2",
                 "--seed", "0", "--out", out]) == 1
    assert main(["train", "--data", str(fleet_csv), "--states", "3", "--components", "2", "--families", "cauchy",
                 "--seed", "0", "--out", out]) == 1
    assert main(["policy", "--act"]) == 1
    assert main(["policy", "--act", "--belief", "0.5,0.6,0"]) == 1
    assert main(["bogus"]) == 1
    assert "error" in capsys.readouterr().err


def test_exit_2_on_zero_likelihood(tmp_path, fleet_csv):
    mask = tmp_path / "mask.csv"
    # no route into the failure state, yet the data contains failures
    mask.write_text("1,0\n0,1\n")
    code = main(["train", "--data", str(fleet_csv), "--states", "2", "--components", "2", "--mask", str(mask),
                 "--seed", "0", "--out", str(tmp_path / "m.json")])
    assert code == 2


def test_exit_3_when_not_converged(tmp_path, fleet_csv):
    out = tmp_path / "m.json"
    code = main(["train", "--data", str(fleet_csv), "--states", "3", "--components", "2", "--seed", "0",
                 "--max-iters", "1", "--out", str(out)])
    assert code == 3
    assert out.exists()


# -- predict ----------------------------------------------------------------------


def test_predict_rows_are_distributions(tmp_path, trained, fleet_csv):
    out = tmp_path / "pred.csv"
    assert main(["predict", "--model", str(trained), "--data", str(fleet_csv), "--horizon", "15",
                 "--out", str(out)]) == 0
    rows = read_csv(out)
    _, seqs, _ = files.load_sequences(fleet_csv)
    assert len(rows) == sum(len(s) for s in seqs)
    for r in rows:
        belief = sum(float(r[f"belief_{i}"]) for i in range(3))
        assert belief == pytest.approx(1.0, abs=1e-9)
        total = float(r["already_failed"]) + sum(float(r[f"pmf_{h}"]) for h in range(1, 16)) + float(r["residual"])
        assert total == pytest.approx(1.0, abs=1e-9)
        surv = [float(r[f"survival_{h}"]) for h in range(1, 16)]
        assert all(a >= b - 1e-12 for a, b in zip(surv, surv[1:]))
    by_asset = {}
    for r in rows:
        by_asset.setdefault(r["asset_id"], []).append(r)
    for (aid, rs), s in zip(by_asset.items(), seqs):
        if s.failed:
            assert float(rs[-1]["already_failed"]) == 1.0
        else:
            assert float(rs[-1]["already_failed"]) == 0.0


def test_predict_with_library(tmp_path):
    lib = tmp_path / "lib.json"
    files.save_model(lib, two_profile_library())
    data = tmp_path / "d.csv"
    assert main(["generate", "--model", str(lib), "--nassets", "5", "--maxlen", "30", "--seed", "1",
                 "--out", str(data)]) == 0
    out = tmp_path / "p.csv"
    assert main(["predict", "--model", str(lib), "--data", str(data), "--horizon", "5", "--out", str(out)]) == 0
    for r in read_csv(out):
        assert float(r["profile_0"]) + float(r["profile_1"]) == pytest.approx(1.0, abs=1e-9)
        assert 0.0 <= float(r["entropy_bits"]) <= 1.0 + 1e-12


def test_predict_rejects_dimension_mismatch(tmp_path, fleet_csv):
    m = tmp_path / "ref.json"
    files.save_model(m, reference_model())
    assert main(["predict", "--model", str(m), "--data", str(fleet_csv), "--out", str(tmp_path / "p.csv")]) == 1


# -- policy / simulate / tradeoff / ppc ----------------------------------------------


def run_act(belief, capsys):
    assert main(["policy", "--act", "--belief", belief, "--horizon", "10"]) == 0
    return json.loads(capsys.readouterr().out)


def test_act_extremes(capsys):
    assert run_act("1,0,0", capsys)["action"] == "donothing"
    failed = run_act("0,0,1", capsys)
    assert failed["action"] == "replace"
    assert failed["action_id"] == 2


def test_policy_file_loads(tmp_path):
    out = tmp_path / "pol.json"
    assert main(["policy", "--horizon", "10", "--solve-out", str(out)]) == 0
    pol = files.loads_policy(out.read_text())
    assert pol.horizon == 10
    assert pol.at().alphas.shape[1] == 3
    assert pol.action_names == ("donothing", "repair", "replace")


def test_simulate_metrics(tmp_path):
    out = tmp_path / "sim.csv"
    assert main(["simulate", "--policy-kind", "threshold", "--theta", "0", "--nassets", "100", "--maxsteps", "20",
                 "--seed", "1", "--out", str(out)]) == 0
    metrics = {r["metric"]: float(r["value"]) for r in read_csv(out)}
    assert metrics["failure_rate"] == 0.0
    assert metrics["mean_uptime"] + metrics["mean_downtime"] + metrics["mean_maintenance"] == pytest.approx(20)


def test_tradeoff_marks_operating_threshold(tmp_path):
    m = tmp_path / "toy.json"
    files.save_model(m, toy_model())
    out = tmp_path / "t.csv"
    assert main(["tradeoff", "--model", str(m), "--nassets", "80", "--maxlen", "60", "--seed", "2",
                 "--out", str(out)]) == 0
    rows = read_csv(out)
    marked = [r for r in rows if r["marked"] == "1"]
    assert len(marked) == 1
    assert float(marked[0]["threshold"]) == 0.125
    th = [float(r["threshold"]) for r in rows]
    assert th[0] == 0.01 and th[-1] == 0.5
    assert main(["tradeoff", "--model", str(m), "--out", str(out)]) == 1


def test_ppc_outputs_pvalues(tmp_path, trained, fleet_csv):
    out = tmp_path / "ppc.csv"
    assert main(["ppc", "--model", str(trained), "--data", str(fleet_csv), "--nreps", "100", "--seed", "0",
                 "--out", str(out)]) == 0
    rows = read_csv(out)
    assert {r["statistic"] for r in rows} >= {"mean_ttf", "censor_frac", "obs_mean[0]", "obs_var[0]"}
    for r in rows:
        assert 0.0 <= float(r["p_value"]) <= 1.0


# -- determinism ------------------------------------------------------------------------


def commands(d, data, model):
    return {
        "generate": ["generate", "--nassets", "20", "--maxlen", "30", "--censor-frac", "0.2", "--seed", "5",
                     "--out", str(d / "gen.csv")],
        "train": ["train", "--data", str(data), "--states", "3", "--components", "2", "--seed", "1",
                  "--out", str(d / "model.json")],
        "predict": ["predict", "--model", str(model), "--data", str(data), "--horizon", "5",
                    "--out", str(d / "pred.csv")],
        "policy": ["policy", "--horizon", "12", "--solve-out", str(d / "pol.json")],
        "simulate": ["simulate", "--horizon", "12", "--nassets", "50", "--maxsteps", "20", "--seed", "3",
                     "--out", str(d / "sim.csv")],
        "tradeoff": ["tradeoff", "--model", str(model), "--nassets", "30", "--maxlen", "40", "--seed", "4",
                     "--out", str(d / "trade.csv")],
        "ppc": ["ppc", "--model", str(model), "--data", str(data), "--nreps", "100", "--seed", "6",
                "--out", str(d / "ppc.csv")],
    }


def test_every_command_is_bit_reproducible(tmp_path, fleet_csv, trained):
    outputs = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        cmds = commands(d, fleet_csv, trained)
        for argv in cmds.values():
            assert main(argv) in (0, 3)
        outputs.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
    assert outputs[0].keys() == outputs[1].keys()
    assert len(outputs[0]) >= 7
    for name in outputs[0]:
        assert outputs[0][name] == outputs[1][name], name


def test_module_entry_point(tmp_path):
    out = tmp_path / "g.csv"
    res = subprocess.run([sys.executable, "-m", "hmmprog", "generate", "--nassets", "3", "--maxlen", "5",
                          "--seed", "0", "--out", str(out)], capture_output=True)
    assert res.returncode == 0
    assert out.read_text().startswith("asset_id,step,")
