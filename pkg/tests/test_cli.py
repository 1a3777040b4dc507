import csv
import subprocess
import sys

import pytest

from seqmix.cli import dispatch


def last_line(capsys):
    return capsys.readouterr().out.strip().splitlines()[-1]


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "seqmix", "identitycheck"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.strip().splitlines()[-1].startswith("summary,status=PASS")


def test_identitycheck(tmp_path, capsys):
    out = tmp_path / "id.csv"
    assert dispatch(["identitycheck", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert rows[0]["points"] == "6001"
    assert float(rows[0]["max_dev"]) < 1e-12
    assert "subcommand=identitycheck" in (tmp_path / "id.csv.runconfig").read_text()


def test_gradcheck_single_kernel(capsys):
    assert dispatch(["gradcheck", "--kernel", "twomamba", "--seed", "7", "--instances", "3"]) == 0
    out = capsys.readouterr().out
    assert "kernel,twomamba,PASS" in out
    assert out.strip().splitlines()[0].startswith("kernel,seed,H,N,d")


def test_memcurve_crossover(tmp_path, capsys):
    out = tmp_path / "mem.csv"
    assert dispatch(["memcurve", "--d", "64", "--nmax", "1100", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    first = next(int(r["N"]) for r in rows if int(r["kv_elems"]) > int(r["state2_elems"]))
    assert first == 1058
    assert all(r["match"] == "1" for r in rows)
    assert "first_exceedance=1058" in last_line(capsys)


def test_outputs_are_byte_identical(tmp_path, capsys):
    args = ["equivalence", "--preset", "twomamba", "--seqlen", "16", "--dhead", "4"]
    assert dispatch(args + ["--out", str(tmp_path / "a.csv")]) == 0
    assert dispatch(args + ["--out", str(tmp_path / "b.csv")]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_unknown_preset_is_usage_error(capsys):
    with pytest.raises(SystemExit) as info:
        dispatch(["equivalence", "--preset", "nope"])
    assert info.value.code == 2
    assert "twomamba" in capsys.readouterr().err


def test_config_file(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# small\nseqlen=12\ndhead=4\npreset=mamba2\n")
    out = tmp_path / "eq.csv"
    assert dispatch(["equivalence", "--config", str(cfg), "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 12 and {r["preset"] for r in rows} == {"mamba2"}
    # explicit flags beat the file
    assert dispatch(["equivalence", "--config", str(cfg), "--seqlen", "5", "--out", str(out)]) == 0
    assert len(list(csv.DictReader(out.open()))) == 5


def test_config_file_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("colour=blue\n")
    with pytest.raises(SystemExit) as info:
        dispatch(["identitycheck", "--config", str(cfg)])
    assert info.value.code == 2
    assert "valid keys" in capsys.readouterr().err


def test_seed_from_environment(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("SEQMIX_SEED", "11")
    assert dispatch(["gradcheck", "--kernel", "linear", "--instances", "1", "--out", str(tmp_path / "g.csv")]) == 0
    row = next(csv.DictReader((tmp_path / "g.csv").open()))
    assert row["seed"] == "11"


def test_f32_precision(capsys):
    assert dispatch(["equivalence", "--preset", "linear", "--seqlen", "16", "--dhead", "4",
                     "--precision", "f32"]) == 0
    assert "tol=0.0001" in capsys.readouterr().out


def test_bench(tmp_path, capsys):
    out = tmp_path / "bench.csv"
    assert dispatch(["bench", "--preset", "softmax", "--seqlen", "8", "--dhead", "4", "--out", str(out)]) == 0
    assert next(csv.DictReader(out.open()))["preset"] == "softmax"


def test_short_train_run(tmp_path, capsys):
    run = tmp_path / "run"
    code = dispatch(["train", "--task", "copy", "--steps", "4", "--seqlen", "8", "--vocab", "8",
                     "--heads", "2", "--dhead", "4", "--layers", "1", "--batch", "4", "--eval-every", "2",
                     "--quiet", "--out", str(run)])
    assert code == 0
    for name in ("config.json", "loss.csv", "weights.bin", "weights.json"):
        assert (run / name).exists()
    assert last_line(capsys).startswith("summary,status=PASS,steps=4")


def test_unreachable_target_fails(capsys):
    code = dispatch(["train", "--task", "copy", "--steps", "2", "--seqlen", "8", "--vocab", "8",
                     "--heads", "2", "--dhead", "4", "--layers", "1", "--batch", "2", "--quiet",
                     "--target-acc", "1.5"])
    assert code == 1
    assert "status=FAIL" in last_line(capsys)


def test_lr_sweep(tmp_path, capsys):
    code = dispatch(["train", "--task", "copy", "--steps", "3", "--seqlen", "8", "--vocab", "8",
                     "--heads", "2", "--dhead", "4", "--layers", "1", "--batch", "2", "--quiet",
                     "--lr-sweep", "--out", str(tmp_path)])
    assert code == 0
    out = capsys.readouterr().out
    assert [l.split(",")[1] for l in out.splitlines() if l.startswith("lr,")] == ["0.0003", "0.0001", "3e-05"]
    assert "best_lr=" in out.splitlines()[-1]
    assert sorted(p.name for p in tmp_path.iterdir()) == ["lr=0.0001", "lr=0.0003", "lr=3e-05"]
