import csv
import json

import pytest

from partalign import cli

TINY = ["--batch-ids", "3", "--images-per-id", "2"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert cli.main(["generate", "--ids", "8", "--per-id", "4", "--seed", "7", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def run_dir(data_dir):
    out = data_dir.parent / "run"
    rc = cli.main(["train", "--data", str(data_dir), "--out", str(out), "--iterations", "4", *TINY])
    assert rc == 0
    return out


def test_generate_files_and_manifest(data_dir):
    pngs = [p for p in data_dir.glob("*.png")]
    assert len(pngs) == 32
    rows = list(csv.DictReader(open(data_dir / "manifest.csv")))
    assert len(rows) == 32 and set(rows[0]) == {"filename", "identity", "camera"}
    assert (data_dir / cli.ECHO_NAME).is_file()


def test_generate_rerun_identical_bytes(tmp_path, data_dir):
    out = tmp_path / "again"
    assert cli.main(["generate", "--ids", "8", "--per-id", "4", "--seed", "7", "--out", str(out)]) == 0
    for p in data_dir.glob("*.png"):
        assert (out / p.name).read_bytes() == p.read_bytes()


def test_generate_refuses_non_empty_without_force(data_dir):
    args = ["generate", "--ids", "8", "--per-id", "4", "--seed", "7", "--out", str(data_dir)]
    assert cli.main(args) == cli.EXIT_DATA
    assert cli.main(args + ["--force"]) == 0


def test_usage_errors(tmp_path, capsys):
    assert cli.main(["generate", "--ids", "0", "--out", str(tmp_path / "x")]) == cli.EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--head", "bogus"])
    assert exc.value.code == cli.EXIT_USAGE
    err = capsys.readouterr().err
    assert "partnet" in err and "stripe" in err
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--attention", "tanh"])
    assert exc.value.code == cli.EXIT_USAGE


def test_train_outputs(run_dir):
    for name in ("model.ckpt", "metrics.csv", "config.echo", "loss.png", "split.json"):
        assert (run_dir / name).is_file(), name
    lines = (run_dir / "metrics.csv").read_text().splitlines()
    assert lines[0] == "iteration,lr,active_triplets,mean_loss" and len(lines) == 5
    echo = json.loads((run_dir / cli.ECHO_NAME).read_text())
    assert echo["partnet"]["head"] == "partnet" and echo["partnet"]["parts"] == 8


def test_config_echo_reproduces_run(run_dir, data_dir, tmp_path):
    out = tmp_path / "replay"
    assert cli.main(["train", "--config", str(run_dir / cli.ECHO_NAME), "--out", str(out)]) == 0
    assert (out / "metrics.csv").read_bytes() == (run_dir / "metrics.csv").read_bytes()
    assert (out / "model.ckpt").read_bytes() == (run_dir / "model.ckpt").read_bytes()


def test_flags_override_config(run_dir, tmp_path):
    out = tmp_path / "stripe"
    rc = cli.main(["train", "--config", str(run_dir / cli.ECHO_NAME), "--out", str(out),
                   "--head", "stripe", "--stripes", "5", "--iterations", "2"])
    assert rc == 0
    echo = json.loads((out / cli.ECHO_NAME).read_text())
    assert echo["partnet"]["head"] == "stripe" and echo["train"]["iterations"] == 2


def test_parts_one_variant(data_dir, tmp_path):
    out = tmp_path / "k1"
    assert cli.main(["train", "--data", str(data_dir), "--out", str(out), "--parts", "1",
                     "--iterations", "2", *TINY]) == 0
    assert json.loads((out / cli.ECHO_NAME).read_text())["partnet"]["parts"] == 1


def test_eval_report_and_maps(run_dir, data_dir, tmp_path):
    out = tmp_path / "eval"
    rc = cli.main(["eval", "--data", str(data_dir), "--checkpoint", str(run_dir), "--out", str(out),
                   "--export-maps", "2"])
    assert rc == 0
    rep = json.loads((out / "eval.json").read_text())
    assert 0 <= rep["map"] <= 1 and len(rep["cmc"]) >= 1
    assert (out / "eval_cmc.csv").is_file() and (out / "cmc.png").is_file()
    maps = list((out / "part_maps").glob("*_part*.pgm"))
    assert len(maps) == 2 * 8
    assert (out / "part_maps" / "montage.png").is_file()


def test_eval_sanity_mode(run_dir, data_dir, tmp_path):
    assert cli.main(["eval", "--data", str(data_dir), "--checkpoint", str(run_dir),
                     "--out", str(tmp_path / "s"), "--sanity"]) == 0


def test_eval_missing_and_corrupt_checkpoint(run_dir, data_dir, tmp_path, capsys):
    assert cli.main(["eval", "--data", str(data_dir), "--checkpoint", str(tmp_path / "none.ckpt"),
                     "--out", str(tmp_path / "e")]) == cli.EXIT_DATA
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes((run_dir / "model.ckpt").read_bytes()[:-16])
    assert cli.main(["eval", "--data", str(data_dir), "--checkpoint", str(bad),
                     "--out", str(tmp_path / "e2")]) == cli.EXIT_DATA
    assert "truncated" in capsys.readouterr().err


def test_train_missing_data(tmp_path):
    assert cli.main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == cli.EXIT_DATA


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_code(data_dir, tmp_path):
    rc = cli.main(["train", "--data", str(data_dir), "--out", str(tmp_path / "n"), "--iterations", "3",
                   "--lr", "1e200", *TINY])
    assert rc == cli.EXIT_NUMERIC


def test_sweep_parts(data_dir, tmp_path):
    out = tmp_path / "sweep"
    rc = cli.main(["sweep-parts", "--data", str(data_dir), "--out", str(out), "--K", "1,2",
                   "--iterations", "2", "--train-frac", "0.75", *TINY])
    assert rc == 0
    rows = list(csv.DictReader(open(out / "sweep.csv")))
    assert [r["K"] for r in rows] == ["1", "2"]
    assert (out / "sweep.png").is_file()


def test_sweep_default_parts():
    args = cli.build_parser().parse_args(["sweep-parts"])
    assert cli.build_run_config(args)["sweep"]["parts"] == [1, 2, 4, 8, 12]


def test_bench(tmp_path):
    out = tmp_path / "bench"
    assert cli.main(["bench", "--out", str(out), "--batch-sizes", "8,12"]) == 0
    rows = list(csv.DictReader(open(out / "bench.csv")))
    assert len(rows) == 2
    for r in rows:
        assert float(r["max_grad_diff"]) < 1e-10
        assert int(r["backward_aggregated"]) == int(r["M"])
    assert (out / "bench.png").is_file()
