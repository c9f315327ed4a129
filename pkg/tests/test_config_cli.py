import csv
import json

import numpy as np
import pytest

from halo.cli import main, ordered_map
from halo.config import ConfigError, RunConfig, parse_config, render_config
from halo.tensor_core import OutlierProfile, random_tensor, write_tensor

# --- config


def test_parse_minimal_and_defaults():
    cfg = parse_config("version = 1\n# comment\n\nseed = 3  # trailing\nseeds = 1, 2\nfull_grid = yes\n")
    assert cfg.seed == 3 and cfg.seed_list() == [1, 2] and cfg.full_grid is True
    assert cfg.scheme == "halo2" and cfg.steps == 200


def test_render_round_trip():
    cfg = RunConfig(seeds=["4", "5"], lr=3e-4, scheme="F:M;E:LR;G:R", hadamard=False)
    back = parse_config(render_config(cfg))
    assert back.canonical() == parse_config(render_config(back)).canonical()
    assert back.seed_list() == [4, 5] and back.lr == 3e-4 and back.hadamard is False


@pytest.mark.parametrize("text,line,key", [
    ("seed = 1\nversion = 1\n", 1, "seed"),
    ("version = 1\nbogus = 2\n", 2, "bogus"),
    ("version = 1\nseed = 1\nseed = 2\n", 3, "seed"),
    ("version = 1\nsteps = many\n", 2, "steps"),
    ("version = 1\nno equals sign\n", 2, None),
    ("version = 2\n", 1, "version"),
    ("version = 1\nhadamard = maybe\n", 2, "hadamard"),
    ("version = 1\nseeds = 1, x\n", 2, "seeds"),
])
def test_parse_errors_name_line_and_field(text, line, key):
    with pytest.raises(ConfigError) as err:
        parse_config(text, "run.conf")
    assert err.value.line == line and err.value.key == key
    assert "run.conf" in str(err.value)


def test_missing_version():
    with pytest.raises(ConfigError):
        parse_config("# nothing\n")


def test_content_hash_is_stable():
    assert RunConfig().content_hash() == RunConfig().content_hash()
    assert RunConfig(seed=1).content_hash() != RunConfig().content_hash()


def test_ordered_map_preserves_order(monkeypatch):
    monkeypatch.setenv("HALO_THREADS", "4")
    assert ordered_map(lambda x: x * x, range(20)) == [x * x for x in range(20)]


# --- cli


def write_conf(tmp_path, name, **kv):
    body = "version = 1\n" + "".join(f"{k} = {v}\n" for k, v in kv.items())
    p = tmp_path / name
    p.write_text(body)
    return p


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_train_outputs_and_determinism(tmp_path, capsys):
    conf = write_conf(tmp_path, "t.conf", steps=8, d_hidden=64)
    assert main(["train", str(conf), "-o", str(tmp_path / "a")]) == 0
    assert main(["train", str(conf), "-o", str(tmp_path / "b")]) == 0
    rows = read_csv(tmp_path / "a" / "loss.csv")
    assert rows[0] == ["step", "loss", "grad_norm"] and len(rows) == 9
    a = json.loads((tmp_path / "a" / "manifest.json").read_text())
    b = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert a == b and a["verdicts"]["train"] == "OK" and set(a["outputs"]) == {
        "loss.csv", "params.npz", "counters.json"}
    assert json.loads((tmp_path / "a" / "counters.json").read_text()) == {"X": 32, "W": 32, "E": 64}
    with np.load(tmp_path / "a" / "params.npz") as z:
        assert "head" in z.files

    # resume from the written parameters
    conf2 = write_conf(tmp_path, "t2.conf", steps=2, d_hidden=64, params_file=tmp_path / "a" / "params.npz")
    assert main(["train", str(conf2), "-o", str(tmp_path / "c")]) == 0
    assert "params_file" in json.loads((tmp_path / "c" / "manifest.json").read_text())["inputs"]


def test_train_divergence_exit_code(tmp_path, capsys):
    conf = write_conf(tmp_path, "d.conf", scheme="halo0", lr=1000, warmup=0, steps=200)
    assert main(["train", str(conf), "-o", str(tmp_path / "d")]) == 3
    assert "diverged" in capsys.readouterr().err


@pytest.mark.parametrize("body", ["version = 1\nnot_a_key = 1\n", "seed = 0\n", "version = 1\nd_model = 65\n",
                                  "version = 1\nscheme = halo9\n", "version = 1\nparams_file = /nonexistent.npz\n"])
def test_input_errors_exit_2(tmp_path, capsys, body):
    p = tmp_path / "bad.conf"
    p.write_text(body)
    assert main(["train", str(p), "-o", str(tmp_path / "o")]) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_missing_config_exit_2(tmp_path):
    assert main(["train", str(tmp_path / "nope.conf")]) == 2


def test_bad_thread_count_exit_2(tmp_path, monkeypatch):
    monkeypatch.setenv("HALO_THREADS", "zero")
    assert main(["train", str(write_conf(tmp_path, "t.conf", steps=1))]) == 2


def test_sensitivity_command(tmp_path, capsys):
    conf = write_conf(tmp_path, "s.conf", seeds="0, 1, 2")
    assert main(["sensitivity", str(conf), "-o", str(tmp_path / "s")]) == 0
    out = capsys.readouterr().out
    assert "fwd<bwd: PASS, had>fwd: PASS" in out
    rows = read_csv(tmp_path / "s" / "cosine_fwd.csv")
    assert rows[0] == ["layer", "cosine", "param_count"] and len(rows) == 5
    assert len(read_csv(tmp_path / "s" / "sensitivity.csv")) == 13

    conf = write_conf(tmp_path, "i.conf", format="identity")
    assert main(["sensitivity", str(conf), "-o", str(tmp_path / "i")]) == 0
    assert "not applicable" in capsys.readouterr().out


def test_sensitivity_threads_match_sequential(tmp_path, monkeypatch):
    conf = write_conf(tmp_path, "s.conf", seeds="0, 1, 2, 3")
    assert main(["sensitivity", str(conf), "-o", str(tmp_path / "seq")]) == 0
    monkeypatch.setenv("HALO_THREADS", "4")
    assert main(["sensitivity", str(conf), "-o", str(tmp_path / "par")]) == 0
    assert (tmp_path / "seq" / "manifest.json").read_bytes() == (tmp_path / "par" / "manifest.json").read_bytes()


def test_ablate_command(tmp_path, capsys):
    conf = write_conf(tmp_path, "a.conf", matmul="F")
    assert main(["ablate", str(conf), "-o", str(tmp_path / "a")]) == 0
    rows = read_csv(tmp_path / "a" / "ablation.csv")
    assert rows[0] == ["placement", "loss", "cosine"] and len(rows) == 9
    assert "middle>empty: PASS" in capsys.readouterr().out
    assert main(["ablate", str(write_conf(tmp_path, "b.conf", matmul="Q")), "-o", str(tmp_path / "b")]) == 2


def test_fsdp_command(tmp_path, capsys):
    conf = write_conf(tmp_path, "f.conf", world_size=4, rows=64, cols=64, trials=5, steps=2, scheme="halo1")
    assert main(["fsdp", str(conf), "-o", str(tmp_path / "f")]) == 0
    doc = json.loads((tmp_path / "f" / "ledger.json").read_text())
    assert doc["verdicts"] == {"equivalence": "PASS", "backward_regather": "PASS", "world_invariance": "PASS"}
    assert abs(doc["compression_ratio"] - 0.5) < 0.01
    assert {e["collective"] for e in doc["ledger"]} == {"allgather", "allgather_bwd", "allreduce_scale"}

    conf = write_conf(tmp_path, "g.conf", world_size=1, rows=8, cols=16, trials=2, steps=0)
    assert main(["fsdp", str(conf), "-o", str(tmp_path / "g")]) == 0
    assert json.loads((tmp_path / "g" / "ledger.json").read_text())["forward_gather_bytes"] == 0

    conf = write_conf(tmp_path, "h.conf", world_size=3, rows=10, cols=16, trials=2, steps=0)
    assert main(["fsdp", str(conf), "-o", str(tmp_path / "h")]) == 0
    assert json.loads((tmp_path / "h" / "ledger.json").read_text())["padding"] == 2


def test_quantreport_command(tmp_path):
    conf = write_conf(tmp_path, "q.conf", rows=32, cols=64)
    assert main(["quantreport", str(conf), "-o", str(tmp_path / "q")]) == 0
    rows = read_csv(tmp_path / "q" / "quantreport.csv")
    assert rows[0] == ["format", "granularity", "hadamard", "mse", "max_abs_err", "snr_db"]
    assert len(rows) == 1 + 3 * (3 * 2 + 1)


def test_inspect_command(tmp_path, capsys):
    a = random_tensor(16, 32, 0, np.float32, OutlierProfile.random(32, 2, 30.0, "columns", 0))
    path = tmp_path / "a.halt"
    write_tensor(path, a)
    assert main(["inspect", str(path), "--csv", str(tmp_path / "s.csv")]) == 0
    out = capsys.readouterr().out
    assert "shape: 16x32" in out and "outliers" in out
    assert (tmp_path / "s.csv").exists()
    assert main(["inspect", str(path), "--hadamard", "left"]) == 0
    assert "hadamard: left" in capsys.readouterr().out

    path.write_bytes(path.read_bytes()[:-3])
    assert main(["inspect", str(path)]) == 2
    assert main(["inspect", str(tmp_path / "missing.halt")]) == 2
