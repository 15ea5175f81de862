import csv
import logging

import numpy as np
import pytest

from optmsm.cli import (RunConfig, main, parse_run_config, render_run_config, schema_diff)
from optmsm.data import default_schema
from optmsm.training import final_metrics, read_metrics

SMALL = """
[generator]
samples = 3000
seed = 4

[model]
transfer_dims = 8, 4
tower_dims = 8, 4

[train]
epochs = 2
batch_size = 128
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.ini"
    cfg.write_text(SMALL)
    assert main(["gen", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    return root


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------- config files


def test_resolved_config_round_trips():
    rc = parse_run_config(SMALL)
    assert rc.generator.samples == 3000 and rc.model.tower_dims == (8, 4) and rc.train.epochs == 2
    again = parse_run_config(render_run_config(rc))
    assert (again.schema, again.generator, again.model, again.train) == (rc.schema, rc.generator, rc.model, rc.train)


def test_defaults_without_config():
    rc = parse_run_config("")
    assert rc == RunConfig() and not rc.has_schema


@pytest.mark.parametrize("text, needle", [
    ("[train]\nlearning_rat = 0.1\n", "unknown keys"),
    ("[trainer]\nepochs = 1\n", "unknown config sections"),
    ("[train]\nepochs = many\n", "cannot parse"),
    ("[generator]\nscenario_proportions = 0.5, 0.3, 0.3\n", "sum to 1"),
    ("[schema]\nscenarios = 2\nfield.u = shared 5\n", "expected"),
    ("[model]\ntransfer = moe\n", "unknown keys"),
])
def test_invalid_configs_rejected(tmp_path, text, needle, caplog):
    p = tmp_path / "bad.ini"
    p.write_text(text)
    with caplog.at_level(logging.ERROR, logger="optmsm"):
        assert main(["gen", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert needle in caplog.text


def test_schema_diff_lists_fields():
    a = default_schema()
    b = default_schema(embed_dim=4)
    lines = schema_diff(a, b)
    assert any(line.startswith("~ item:") for line in lines)


# ---------------------------------------------------------------- gen


def test_gen_outputs_and_proportions(work):
    data = work / "data"
    for name in ("train.csv", "valid.csv", "test.csv", "schema.txt", "teacher.npz", "config.ini"):
        assert (data / name).exists(), name
    scen = np.concatenate([np.array([int(r[-1]) for r in read_rows(data / f"{s}.csv")[1:]])
                           for s in ("train", "valid", "test")])
    shares = np.bincount(scen, minlength=4)[1:] / len(scen)
    np.testing.assert_allclose(shares, (0.05, 0.35, 0.60), atol=0.03)


def test_gen_same_seed_byte_identical(tmp_path, work):
    cfg = str(work / "small.ini")
    assert main(["gen", "--config", cfg, "--out", str(tmp_path / "a"), "--seed", "7"]) == 0
    assert main(["gen", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "7"]) == 0
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name
    assert "seed = 7" in (tmp_path / "a" / "config.ini").read_text()


def test_gen_unwritable_output(tmp_path, work):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen", "--config", str(work / "small.ini"), "--out", str(blocker / "sub")]) == 1


# ---------------------------------------------------------------- train / eval


def test_train_outputs(work):
    run = work / "run"
    assert {p.name for p in run.iterdir()} >= {"config.ini", "metrics.jsonl", "model.bin"}
    resolved = parse_run_config((run / "config.ini").read_text())
    assert resolved.has_schema and resolved.schema == default_schema()
    assert resolved.train.epochs == 2


def test_train_flags_logged(tmp_path, work, caplog):
    with caplog.at_level(logging.INFO, logger="optmsm"):
        rc = main(["train", "--config", str(work / "small.ini"), "--data", str(work / "data"),
                   "--out", str(tmp_path / "r"), "--ablate", "no_constraint", "--variant", "moe",
                   "--lambda", "0.5", "--seed", "3"])
    assert rc == 0
    assert "lambda_effective=0 " in caplog.text and "variant=moe" in caplog.text
    text = (tmp_path / "r" / "config.ini").read_text()
    assert "transfer_variant = moe" in text and "ablations = no_constraint" in text
    assert "lam = 0.5" in text and "seed = 3" in text


def test_train_schema_mismatch_shows_diff(tmp_path, work, caplog):
    p = tmp_path / "other.ini"
    p.write_text("[schema]\nscenarios = 3\nfield.user_group = shared 100 8\nfield.extra = specific 4 8\n")
    with caplog.at_level(logging.ERROR, logger="optmsm"):
        assert main(["train", "--config", str(p), "--data", str(work / "data"), "--out", str(tmp_path / "r")]) == 2
    assert "schema mismatch" in caplog.text and "extra" in caplog.text and "item_stat" in caplog.text


def test_eval_reproduces_logged_train_metrics(work, tmp_path, capsys):
    assert main(["eval", "--model", str(work / "run" / "model.bin"), "--data", str(work / "data"),
                 "--split", "train", "--out", str(tmp_path / "e")]) == 0
    logged = final_metrics(read_metrics(work / "run" / "metrics.jsonl"), "train")
    rows = read_rows(tmp_path / "e" / "eval_train.csv")
    assert rows[0] == ["scenario", "n", "auc", "logloss"]
    for r in rows[1:]:
        m = int(r[0])
        assert float(r[2]) == pytest.approx(logged[m]["auc"], abs=1e-6)
        assert float(r[3]) == pytest.approx(logged[m]["logloss"], abs=1e-6)
    first = capsys.readouterr().out
    main(["eval", "--model", str(work / "run" / "model.bin"), "--data", str(work / "data"), "--split", "train"])
    assert capsys.readouterr().out == first


def test_eval_single_class_is_na(work, tmp_path):
    data = tmp_path / "d"
    data.mkdir()
    for name in ("schema.txt", "train.csv", "valid.csv"):
        (data / name).write_bytes((work / "data" / name).read_bytes())
    rows = read_rows(work / "data" / "test.csv")
    with open(data / "test.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(rows[0])
        for r in rows[1:]:
            if r[-1] == "1":
                r[-2] = "0"  # scenario 1 keeps only negatives
            w.writerow(r)
    assert main(["eval", "--model", str(work / "run" / "model.bin"), "--data", str(data),
                 "--out", str(tmp_path / "e")]) == 0
    out = read_rows(tmp_path / "e" / "eval_test.csv")
    assert out[1][2] == "N/A" and out[2][2] != "N/A"


def test_eval_refuses_hash_mismatch(work, tmp_path, caplog):
    data = tmp_path / "d"
    data.mkdir()
    (data / "schema.txt").write_text(default_schema(embed_dim=4).to_text())
    with caplog.at_level(logging.ERROR, logger="optmsm"):
        assert main(["eval", "--model", str(work / "run" / "model.bin"), "--data", str(data)]) == 2
    assert default_schema().hash() in caplog.text and default_schema(embed_dim=4).hash() in caplog.text


# ---------------------------------------------------------------- gradcheck


def test_gradcheck_default_passes(capsys):
    assert main(["gradcheck"]) == 0
    assert capsys.readouterr().out.strip().endswith("PASS")


def test_gradcheck_corruption_fails_with_group(capsys):
    assert main(["gradcheck", "--ablate", "no_hypernetwork", "--corrupt", "tower.b0"]) == 1
    assert "FAIL (tower.b0[1])" in capsys.readouterr().out


def test_gradcheck_lambda_zero_reports_skips(capsys, tmp_path):
    assert main(["gradcheck", "--lambda", "0", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "fcn.scen.W0[3]" in out and "skipped (zero gradient expected)" in out
    assert (tmp_path / "gradcheck.txt").exists() and (tmp_path / "config.ini").exists()


def test_gradcheck_rejects_wide_models(tmp_path):
    p = tmp_path / "wide.ini"
    p.write_text("[model]\ntower_dims = 32, 4\n")
    assert main(["gradcheck", "--config", str(p)]) == 2


# ---------------------------------------------------------------- export / compare


def test_export_reprs(work, tmp_path, capsys):
    args = ["export-reprs", "--model", str(work / "run" / "model.bin"), "--data", str(work / "data")]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    rows = read_rows(tmp_path / "a" / "reprs.csv")
    n_test = len(read_rows(work / "data" / "test.csv")) - 1
    assert rows[0][:3] == ["sample_id", "scenario", "active"] and len(rows[0]) == 3 + 4
    assert len(rows) - 1 == n_test * 3
    assert sum(int(r[2]) for r in rows[1:]) == n_test
    for name in ("reprs.csv", "cosine_summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    summary = read_rows(tmp_path / "a" / "cosine_summary.csv")
    assert [r[:2] for r in summary[1:]] == [["1", "2"], ["1", "3"], ["2", "3"]]
    assert "overall mean |cos|" in capsys.readouterr().out


def test_compare_self_and_default_seeds(work, tmp_path, caplog):
    cfg = tmp_path / "fast.ini"
    cfg.write_text(SMALL.replace("epochs = 2", "epochs = 1"))
    with caplog.at_level(logging.INFO, logger="optmsm"):
        assert main(["compare", "--config", str(cfg), "--config", str(cfg), "--data", str(work / "data"),
                     "--out", str(tmp_path / "c")]) == 0
    assert "using seeds [0, 1, 2, 3, 4]" in caplog.text
    rows = read_rows(tmp_path / "c" / "comparison.csv")
    assert len(rows) == 1 + 2 * 3
    assert all(r[6] == "(+0.00%)" for r in rows[1:])
    assert (tmp_path / "c" / "config_fast_0.ini").exists()


def test_compare_validation(work, tmp_path):
    a = tmp_path / "a.ini"
    a.write_text(SMALL)
    b = tmp_path / "b.ini"
    b.write_text("[schema]\nscenarios = 3\nfield.x = shared 5 4\n")
    base = ["compare", "--data", str(work / "data"), "--out", str(tmp_path / "o")]
    assert main(base + ["--config", str(a)]) == 2
    assert main(base + ["--config", str(a), "--config", str(b), "--seeds", "0"]) == 2


def test_usage_errors_exit_2():
    assert main(["train"]) == 2
    assert main(["nonsense"]) == 2
