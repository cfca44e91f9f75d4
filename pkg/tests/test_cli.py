import subprocess
import sys

import numpy as np
import pytest

from spekg import __version__
from spekg.cli import main, parse_grid, read_csv
from spekg.kg import Vocab, load_triples, write_triples
from spekg.synthetic import block_triples

TOY_CONFIG = "alpha = 0.05\nbeta = 0.1\ndim = 8\nmax_epochs = 2\nwarmup_epochs = 1\nbatch_size = 64\n"


@pytest.fixture
def data(tmp_path):
    rows = block_triples()
    vocab = Vocab.anonymous(50, 3)
    order = np.random.default_rng(0).permutation(len(rows))
    write_triples(tmp_path / "test.tsv", rows[np.sort(order[:30])], vocab)
    write_triples(tmp_path / "train.tsv", rows[np.sort(order[30:300])], vocab)
    write_triples(tmp_path / "valid.tsv", rows[np.sort(order[300:])], vocab)
    (tmp_path / "cfg.txt").write_text(TOY_CONFIG)
    return tmp_path


@pytest.fixture
def hundred(tmp_path):
    lines = [f"e{i}\tr{i % 3}\te{(7 * i + 1) % 100}" for i in range(100)]
    path = tmp_path / "hundred.tsv"
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture(autouse=True)
def no_env_override(monkeypatch):
    monkeypatch.delenv("SPEKG_OUT", raising=False)


def trained(data):
    assert main(["train", "--config", str(data / "cfg.txt"), "--train", str(data / "train.tsv"),
                 "--valid", str(data / "valid.tsv"), "--out", str(data / "run")]) == 0
    return data / "run"


def test_perturb_summary_and_files(hundred, tmp_path, capsys):
    assert main(["perturb", str(hundred), "--ptb-rate", "0.5", "--seed", "3", "--out", str(tmp_path / "p")]) == 0
    assert capsys.readouterr().out.strip() == "removed=45 added=5"
    perturbed = load_triples(tmp_path / "p" / "perturbed.tsv")
    assert len(perturbed) == 60
    first = (tmp_path / "p" / "perturbed.tsv").read_text().splitlines()[0]
    assert first.startswith("# spekg") and "seed=3" in first and "config=" in first


def test_perturb_zero_rate_keeps_triples(hundred, tmp_path):
    assert main(["perturb", str(hundred), "--ptb-rate", "0", "--out", str(tmp_path / "p")]) == 0
    assert load_triples(tmp_path / "p" / "perturbed.tsv").index == load_triples(hundred).index
    body = [line for line in (tmp_path / "p" / "fliplog.tsv").read_text().splitlines() if not line.startswith("#")]
    assert body == []


def test_perturb_is_reproducible(hundred, tmp_path):
    for name in ("a", "b"):
        main(["perturb", str(hundred), "--ptb-rate", "0.3", "--seed", "9", "--out", str(tmp_path / name)])
    for f in ("perturbed.tsv", "fliplog.tsv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_perturb_does_not_touch_input(hundred, tmp_path):
    before = hundred.read_bytes()
    main(["perturb", str(hundred), "--ptb-rate", "0.5", "--out", str(tmp_path / "p")])
    assert hundred.read_bytes() == before


def test_split(hundred, tmp_path, capsys):
    assert main(["split", str(hundred), "--out", str(tmp_path / "s")]) == 0
    assert capsys.readouterr().out.strip() == "train=70 valid=30"


def test_output_dir_env_override(hundred, tmp_path, monkeypatch, caplog):
    monkeypatch.setenv("SPEKG_OUT", str(tmp_path / "env"))
    with caplog.at_level("INFO"):
        assert main(["perturb", str(hundred), "--ptb-rate", "0.1", "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "env" / "perturbed.tsv").exists()
    assert not (tmp_path / "flag").exists()
    assert "SPEKG_OUT" in caplog.text


def test_unknown_flag_rejected(hundred):
    with pytest.raises(SystemExit) as exc:
        main(["perturb", str(hundred), "--ptb-rate", "0.1", "--bogus"])
    assert exc.value.code != 0


def test_train_writes_artifacts_with_banner(data, caplog):
    with caplog.at_level("INFO"):
        run = trained(data)
    assert f"spekg {__version__} seed=0 config=" in caplog.text
    rows = read_csv(run / "metrics.csv")
    assert len(rows) == 2 and list(rows[0]) == ["epoch", "loss_triple", "loss_kl", "loss_reg", "valid_mrr", "valid_hits10"]
    for name in ("metrics.csv", "posteriors.tsv", "config.txt"):
        assert (run / name).read_text().startswith(f"# spekg {__version__} seed=0 config=")
    assert (run / "checkpoint.npz").exists()


def test_train_zero_epochs(data):
    (data / "cfg.txt").write_text(TOY_CONFIG.replace("max_epochs = 2", "max_epochs = 0"))
    run = trained(data)
    assert read_csv(run / "metrics.csv") == []
    assert (run / "checkpoint.npz").exists()


def test_train_missing_alpha_names_key(data, capsys):
    (data / "cfg.txt").write_text("beta = 0.1\n")
    code = main(["train", "--config", str(data / "cfg.txt"), "--train", str(data / "train.tsv"), "--out", str(data / "r")])
    assert code != 0
    assert "alpha" in capsys.readouterr().err


def test_eval_reports_requested_ks(data, capsys):
    run = trained(data)
    capsys.readouterr()
    assert main(["eval", str(run / "checkpoint.npz"), str(data / "test.tsv"), "--filter", str(data / "valid.tsv"),
                 "--ks", "1,3,10", "--out", str(data / "ev")]) == 0
    row = read_csv(data / "ev" / "eval.csv")[0]
    assert [k for k in row if k.startswith("hits@")] == ["hits@1", "hits@3", "hits@10"]
    assert 0 < float(row["mrr"]) <= 1


def test_eval_beats_untrained_checkpoint(data, capsys):
    cfg = "alpha = 0.05\nbeta = 0.1\ndim = 32\nbatch_size = 32\nwarmup_epochs = 10\nmax_epochs = {}\n"
    mrr = []
    for epochs in (0, 30):
        (data / "cfg.txt").write_text(cfg.format(epochs))
        out = data / f"run{epochs}"
        main(["train", "--config", str(data / "cfg.txt"), "--train", str(data / "train.tsv"), "--valid",
              str(data / "valid.tsv"), "--out", str(out)])
        main(["eval", str(out / "checkpoint.npz"), str(data / "test.tsv"), "--filter", str(data / "valid.tsv"),
              "--out", str(out)])
        mrr.append(float(read_csv(out / "eval.csv")[0]["mrr"]))
    assert mrr[1] > mrr[0]


def test_eval_empty_test_fails(data, capsys):
    run = trained(data)
    (data / "empty.tsv").write_text("# nothing here\n")
    assert main(["eval", str(run / "checkpoint.npz"), str(data / "empty.tsv")]) != 0


def test_eval_skips_unknown_entities(data, capsys):
    run = trained(data)
    (data / "mixed.tsv").write_text("e0\tr0\te5\nmystery\tr0\te5\n")
    capsys.readouterr()
    assert main(["eval", str(run / "checkpoint.npz"), str(data / "mixed.tsv")]) == 0
    out = capsys.readouterr().out
    assert "queries          2" in out and "skipped_unknown  1" in out


def test_eval_with_fliplog_adds_detection(data, tmp_path, capsys):
    main(["perturb", str(data / "train.tsv"), "--ptb-rate", "0.2", "--out", str(tmp_path / "p")])
    main(["train", "--config", str(data / "cfg.txt"), "--train", str(tmp_path / "p" / "perturbed.tsv"),
          "--out", str(tmp_path / "run")])
    capsys.readouterr()
    assert main(["eval", str(tmp_path / "run" / "checkpoint.npz"), str(data / "test.tsv"),
                 "--fliplog", str(tmp_path / "p" / "fliplog.tsv")]) == 0
    out = capsys.readouterr().out
    assert "fp_auc" in out and "fn_recall@10" in out


def test_predict_and_inspect(data, capsys):
    run = trained(data)
    capsys.readouterr()
    assert main(["predict", str(run / "checkpoint.npz"), "--head", "e0", "--relation", "r0", "--top", "3"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 3 and all(line.split("\t")[1] == "e0" for line in lines)
    assert main(["predict", str(run / "checkpoint.npz"), "--head", "nobody", "--relation", "r0"]) != 0
    assert main(["inspect-posterior", str(run / "checkpoint.npz"), "--top", "4"]) == 0
    assert "most doubtful" in capsys.readouterr().out


def test_parse_grid_expands_product():
    points = parse_grid("alpha = 0.1, 0.01\nbeta = 0.3, 0.2\ndim = 8\n")
    assert len(points) == 4 and points[0] == {"alpha": "0.1", "beta": "0.3", "dim": "8"}


def sweep(data, grid, seeds, jobs=1):
    (data / "grid.txt").write_text(grid)
    return main(["sweep", "--config", str(data / "grid.txt"), "--train", str(data / "train.tsv"), "--valid",
                 str(data / "valid.tsv"), "--test", str(data / "test.tsv"), "--seeds", seeds, "--jobs", str(jobs),
                 "--out", str(data / "sw")])


def test_sweep_two_by_two_grid(data):
    grid = "alpha = 0.1, 0.05\nbeta = 0.3, 0.1\ndim = 8\nmax_epochs = 1\nwarmup_epochs = 1\n"
    assert sweep(data, grid, "0") == 0
    assert len(read_csv(data / "sw" / "runs.csv")) == 4
    assert len(read_csv(data / "sw" / "aggregate.csv")) == 4


def test_sweep_aggregate_is_mean_of_runs(data):
    assert sweep(data, "alpha = 0.05\nbeta = 0.1\ndim = 8\nmax_epochs = 1\nwarmup_epochs = 1\n", "0,1,2,3,4", jobs=2) == 0
    per_run = [float(read_csv(p)[0]["mrr"]) for p in sorted((data / "sw").glob("point000-seed*/eval.csv"))]
    agg = read_csv(data / "sw" / "aggregate.csv")[0]
    assert len(per_run) == 5 and agg["runs"] == "5"
    assert abs(float(agg["mrr_mean"]) - float(np.mean(per_run))) < 1e-12
    assert abs(float(agg["mrr_std"]) - float(np.std(per_run))) < 1e-12


def test_sweep_continues_past_failures(data):
    assert sweep(data, "alpha = 0.05, 2.0\nbeta = 0.1\ndim = 8\nmax_epochs = 1\n", "0") == 0
    statuses = [r["status"] for r in read_csv(data / "sw" / "runs.csv")]
    assert statuses[0] == "ok" and statuses[1].startswith("failed")
    assert sweep(data, "alpha = 2.0\nbeta = 0.1\n", "0") != 0


def test_console_script_entry_point():
    out = subprocess.run([sys.executable, "-m", "spekg.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and __version__ in out.stdout
