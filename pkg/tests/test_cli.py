import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from mpsi.cli import main
from mpsi.embedding_store import LatentGrid, PromptSet, load_bank

ROOT = Path(__file__).resolve().parents[1]
GOLDEN = json.loads((ROOT / "tests" / "golden" / "quickstart_trace.json").read_text())


def digest(folder: Path) -> dict[str, str]:
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(folder.iterdir())}


@pytest.fixture(autouse=True)
def no_env_out(monkeypatch):
    monkeypatch.delenv("MPSI_OUT", raising=False)


@pytest.fixture
def data(tmp_path):
    d = tmp_path / "data"
    assert main(["synth", "--k", "2", "--d", "8", "--min-angle", "90", "--seed", "3", "--grid", "4", "4",
                 "--masks", "--source", "--out", str(d)]) == 0
    return d


def write_cfg(folder: Path, **cfg) -> Path:
    base = {"prompts": "data/prompts.mpsi", "latent": "data/latent.mpsi", "seed": 1,
            "solver": {"steps": 20, "eta_theta": 0.01}, "mixer_training": {"epochs": 50}}
    base.update(cfg)
    path = folder / "run.json"
    path.write_text(json.dumps(base))
    return path


# --- run


def test_run_writes_outputs(tmp_path, data):
    cfg = write_cfg(tmp_path, masks="data/masks.mpsi", source="data/source.mpsi")
    out = tmp_path / "o"
    assert main(["run", str(cfg), "--out", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["latent.mpsi", "mixer.mpsi", "report.json", "weights.mpsi"]
    rep = json.loads((out / "report.json").read_text())
    assert rep["steps"] == 20 and rep["config"]["input"]["masks"] == "data/masks.mpsi"
    assert "timings_s" not in rep
    w = load_bank(out / "weights.mpsi")
    assert np.allclose(w.sum(0), 1.0, atol=1e-6)


def test_run_zero_steps_outputs_initial(tmp_path, data):
    cfg = write_cfg(tmp_path, solver={"steps": 0}, coefficients={"lambda_g": 0.0})
    assert main(["run", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert np.array_equal(load_bank(tmp_path / "o" / "latent.mpsi").cells, load_bank(data / "latent.mpsi").cells)


def test_run_is_byte_identical_and_leaves_inputs(tmp_path, data):
    cfg = write_cfg(tmp_path, masks="data/masks.mpsi", solver={"steps": 15, "eta_w": 0.2, "eta_theta": 0.01})
    before = digest(data)
    main(["run", str(cfg), "--out", str(tmp_path / "a")])
    main(["run", str(cfg), "--out", str(tmp_path / "b")])
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    assert digest(data) == before


def test_mpsi_out_overrides(tmp_path, data, monkeypatch):
    cfg = write_cfg(tmp_path, output_dir=str(tmp_path / "cfgout"), coefficients={"lambda_g": 0.0})
    monkeypatch.setenv("MPSI_OUT", str(tmp_path / "env"))
    assert main(["run", str(cfg), "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "env" / "report.json").is_file()
    assert not (tmp_path / "flag").exists() and not (tmp_path / "cfgout").exists()


def test_timings_are_opt_in(tmp_path, data):
    cfg = write_cfg(tmp_path, coefficients={"lambda_g": 0.0})
    main(["run", str(cfg), "--out", str(tmp_path / "o"), "--timings"])
    assert "timings_s" in json.loads((tmp_path / "o" / "report.json").read_text())


@pytest.mark.parametrize(
    "cfg, needle",
    [
        ({"latent": "data/latent.mpsi"}, "prompts"),
        ({"prompts": "data/missing.mpsi", "latent": "data/latent.mpsi"}, "prompts"),
        ({"prompts": "data/prompts.mpsi", "latent": "data/latent.mpsi", "solver": {"dt": 0}}, "solver.dt"),
        ({"prompts": "data/prompts.mpsi", "latent": "data/latent.mpsi", "bogus": 1}, "bogus"),
        ({"prompts": "data/latent.mpsi", "latent": "data/latent.mpsi"}, "prompts"),
        ({"prompts": "data/prompts.mpsi", "latent": "data/latent.mpsi", "pyramid": {"levels": 9}}, "levels"),
    ],
)
def test_run_config_errors_exit_2(tmp_path, data, capsys, cfg, needle):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(cfg))
    assert main(["run", str(path), "--out", str(tmp_path / "o")]) == 2
    assert needle in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_run_divergence_exit_3(tmp_path, data):
    cfg = write_cfg(tmp_path, solver={"dt": 1e300, "steps": 20}, coefficients={"lambda_g": 0.0})
    assert main(["run", str(cfg), "--out", str(tmp_path / "o")]) == 3


def test_quickstart_matches_golden_trace(tmp_path, monkeypatch):
    monkeypatch.setenv("MPSI_OUT", str(tmp_path))
    assert main(["run", str(ROOT / GOLDEN["source"])]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["steps"] == GOLDEN["steps"]
    got = [[t["step"], t["total"]] for t in rep["trace"]]
    assert [s for s, _ in got] == [s for s, _ in GOLDEN["totals"]]
    for (_, a), (_, b) in zip(got, GOLDEN["totals"]):
        assert abs(a - b) <= 1e-9


# --- gradcheck


def test_gradcheck_default_passes(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path)]) == 0
    res = json.loads((tmp_path / "gradcheck.json").read_text())
    assert res["passed"] and max(res["worst"].values()) <= 1e-5
    assert capsys.readouterr().out.count("ok") == 4


@pytest.mark.parametrize("cls", ["latent", "logits", "mixer", "step"])
def test_gradcheck_corruption_fails(tmp_path, capsys, cls):
    cfg = tmp_path / "g.json"
    cfg.write_text(json.dumps({"cases": 1}))
    assert main(["gradcheck", str(cfg), "--corrupt", cls, "--out", str(tmp_path)]) == 1
    assert cls in capsys.readouterr().err


def test_gradcheck_is_deterministic(tmp_path):
    cfg = tmp_path / "g.json"
    cfg.write_text(json.dumps({"cases": 1, "seed": 5}))
    main(["gradcheck", str(cfg), "--out", str(tmp_path / "a")])
    main(["gradcheck", str(cfg), "--out", str(tmp_path / "b")])
    assert digest(tmp_path / "a") == digest(tmp_path / "b")


# --- bench, mixtrain, synth


def test_bench_default_suite_rows(tmp_path):
    assert main(["bench", "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader((tmp_path / "bench.csv").open()))
    assert len(rows) == 20 * 3
    first = (tmp_path / "bench.csv").read_bytes()
    main(["bench", "--tasks", "20", "--out", str(tmp_path / "again")])
    assert (tmp_path / "again" / "bench.csv").read_bytes() == first


def test_bench_unknown_setting(tmp_path, capsys):
    cfg = tmp_path / "b.json"
    cfg.write_text(json.dumps({"taskz": 3}))
    assert main(["bench", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "taskz" in capsys.readouterr().err


def test_mixtrain_symmetric_pair(tmp_path):
    assert main(["mixtrain", "--k", "2", "--d", "16", "--angle", "120", "--epochs", "100", "--out", str(tmp_path)]) == 0
    s = json.loads((tmp_path / "mixtrain.json").read_text())
    assert abs(s["min_alignment_trained"] - 0.5) <= 0.01
    assert load_bank(tmp_path / "mixer.mpsi").k == 2


def test_synth_prompt_bank(tmp_path):
    assert main(["synth", "--k", "2", "--d", "64", "--min-angle", "90", "--seed", "7", "--out", str(tmp_path)]) == 0
    p = load_bank(tmp_path / "prompts.mpsi")
    assert isinstance(p, PromptSet) and p.k == 2 and p.d == 64
    assert float(p.embeddings[0] @ p.embeddings[1]) <= 1e-6


def test_synth_infeasible_exit_2(tmp_path):
    assert main(["synth", "--k", "5", "--d", "2", "--min-angle", "120", "--out", str(tmp_path)]) == 2


def test_shipped_quickstart_data_is_valid():
    data = ROOT / "configs" / "data"
    assert isinstance(load_bank(data / "prompts.mpsi"), PromptSet)
    assert isinstance(load_bank(data / "latent.mpsi"), LatentGrid)
    assert load_bank(data / "masks.mpsi").shape == (2, 8, 8)
