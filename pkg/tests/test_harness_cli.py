import dataclasses
import json
import math
from pathlib import Path

import numpy as np
import pytest

from photocert import cli
from photocert import harness as hs

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
HONEST = str(CONFIGS / "gaussian_honest.json")
THERMAL = str(CONFIGS / "gaussian_thermal.json")
HERALDED = str(CONFIGS / "heralded_photon.json")


def test_budget_mode_parsing():
    assert hs.parse_budget_mode("literal") is None
    assert hs.parse_budget_mode("reduced:250") == 250
    for bad in ("reduced:0", "reduce:5", "fast"):
        with pytest.raises(ValueError):
            hs.parse_budget_mode(bad)


def test_config_rejects_unknown_keys():
    d = json.loads(Path(HONEST).read_text())
    d["colour"] = "blue"
    with pytest.raises(ValueError, match="unknown"):
        hs.ExperimentConfig.from_dict(d, CONFIGS)


def test_config_roundtrip():
    cfg = hs.ExperimentConfig.load(HONEST)
    again = hs.ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict()


def test_trial_seeds_are_distinct():
    a = hs.trial_seed(1, 0, 0).generate_state(2)
    b = hs.trial_seed(1, 0, 1).generate_state(2)
    c = hs.trial_seed(1, 1, 0).generate_state(2)
    assert len({tuple(a), tuple(b), tuple(c)}) == 3


def test_certify_is_a_function_of_seed_and_trial():
    cfg = hs.ExperimentConfig.load(HONEST)
    a = hs.certify(cfg, 3).artifacts()
    b = hs.certify(cfg, 3).artifacts()
    assert a == b
    assert hs.certify(cfg, 4).artifacts()["records.csv"] != a["records.csv"]


def test_infeasible_budget_rejects_with_reason():
    cfg = dataclasses.replace(hs.ExperimentConfig.load(HONEST), budget_mode="reduced:200")
    v = hs.certify(cfg).verdict
    assert not v.accept
    assert "exceeds" in v.diagnostics["reason"]


def test_literal_mode_uses_lemma_counts():
    cfg = dataclasses.replace(hs.ExperimentConfig.load(HONEST), budget_mode="literal",
                              bounds={"sigma1": 0.1, "sigma2": 0.1, "sigma_le": 0.1})
    res = hs.certify(cfg)
    assert res.verdict.config.epsilon == pytest.approx(0.1)
    assert res.schedule.total_copies >= res.plan.C2


def test_stage_errors_are_tagged():
    cfg = dataclasses.replace(hs.ExperimentConfig.load(HONEST), scenario={"backend": "spoof", "distribution": "triangle"},
                              bounds={"sigma1": 1, "sigma2": 1, "sigma_le": 1})
    with pytest.raises(hs.StageError) as info:
        hs.certify(cfg)
    assert info.value.stage == "prover"


def test_wilson_interval_closed_form():
    k, n, z = 83, 100, 1.959963984540054
    p = k / n
    centre = (p + z * z / (2 * n)) / (1 + z * z / n)
    half = z / (1 + z * z / n) * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
    assert hs.wilson_interval(k, n) == pytest.approx((centre - half, centre + half), abs=1e-9)


def test_oracle_reports_thermal_fidelity():
    rep = hs.oracle_report(hs.ExperimentConfig.load(THERMAL))
    assert rep["fidelity"] == pytest.approx(0.7)
    assert rep["bound"] <= rep["fidelity"] + 1e-9


def test_postselected_honest_run_accepts():
    cfg = hs.ExperimentConfig.load(HERALDED)
    proto = hs.Protocol.build(cfg)
    assert proto.P == pytest.approx(0.5)
    assert hs.certify(cfg, 0, proto).verdict.accept


def test_nullifier_report_postselected():
    cfg = hs.ExperimentConfig.load(HERALDED)
    rep = hs.nullifier_report(cfg.network, 12, cfg.postselection)
    assert rep["max_annihilation"] < 1e-10 and rep["max_commutator"] < 1e-9
    assert rep["postselected"]["P"] == pytest.approx(0.5)
    assert rep["postselected"]["compressed_annihilation"] < 1e-10


def test_verify_counts_acceptances():
    cfg = dataclasses.replace(hs.ExperimentConfig.load(HONEST), trials=5)
    rep = hs.verify(cfg)
    d = rep.to_dict()
    assert d["trials"] == 5 and 0 <= d["accept_rate"] <= 1
    assert len(rep.estimates) == 5


# ---------------------------------------------------------------- CLI


def _files(d: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_cli_certify_exit_codes_and_determinism(tmp_path, capsys):
    assert cli.main(["certify", "--config", HONEST, "--seed", "9", "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["certify", "--config", HONEST, "--seed", "9", "--out", str(tmp_path / "b")]) == 0
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert set(a) == {"verdict.json", "plan.json", "moments.json", "records.csv"}
    assert a == b
    assert cli.main(["certify", "--config", THERMAL]) == 1
    assert "REJECT" in capsys.readouterr().out


def test_cli_errors_exit_two(tmp_path, capsys):
    assert cli.main(["certify", "--config", str(tmp_path / "missing.json")]) == 2
    assert cli.main(["certify", "--config", HONEST, "--seed", "-1"]) == 2
    assert cli.main(["certify", "--config", HONEST, "--budget-mode", "cheap"]) == 2
    assert cli.main(["verify", "--config", HONEST, "--trials", "10"]) == 2
    assert "error" in capsys.readouterr().err


def test_cli_plan_prints_table(tmp_path, capsys):
    assert cli.main(["plan", "--config", HONEST, "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "total copies" in out and "setting 0" in out
    plan = json.loads((tmp_path / "plan.json").read_text())
    assert plan["kind"] == "G" and plan["m"] == 2


def test_cli_oracle_and_nullifier(tmp_path, capsys):
    assert cli.main(["oracle", "--config", THERMAL, "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "oracle.json").read_text())["fidelity"] == pytest.approx(0.7)
    assert cli.main(["nullifier-check", "--config", HERALDED, "--cutoff", "10", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "nullifiers.json").read_text())
    assert rep["max_annihilation"] < 1e-10


def test_cli_verify_writes_rates(tmp_path):
    assert cli.main(["verify", "--config", HONEST, "--trials", "30", "--out", str(tmp_path)]) == 0
    rates = json.loads((tmp_path / "rates.json").read_text())
    assert rates["trials"] == 30 and rates["accept_rate"] >= 0.8
    rows = (tmp_path / "estimates.csv").read_text().splitlines()
    assert rows[0] == "trial,estimate,epsilon" and len(rows) == 31
    assert np.isfinite([float(r.split(",")[1]) for r in rows[1:]]).all()
