"""End-to-end command-line behavior: exit codes, artifacts, config files."""
import os

import pytest

from ctrltune.cli import main
from ctrltune.config import read_manifest, write_manifest
from ctrltune.evaluation import strip_timing_columns

# small sizes so the pipeline commands stay quick; the desk preset itself
# is exercised where defaults matter
FAST = ["--profile", "desk", "--seed", "3"]


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    code = main(["synth", *FAST, "--out", str(out), "--size", "60",
                 "--violating-fraction", "0.3", "--completion-len", "5"])
    assert code == 0
    return out


# --------------------------------------------------------------------------
# exit codes
# --------------------------------------------------------------------------

def test_no_command_is_usage_error(capsys):
    assert main([]) == 1
    assert "usage error" in capsys.readouterr().err


def test_unknown_command_is_usage_error(capsys):
    assert main(["frobnicate"]) == 1
    assert "usage error" in capsys.readouterr().err


def test_bad_flag_value_is_usage_error(capsys):
    assert main(["synth", "--seed", "not-a-number", "--out", "x"]) == 1


def test_out_of_range_fraction_is_usage_error(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--violating-fraction",
                 "1.5"]) == 1
    assert "violating-fraction" in capsys.readouterr().err


def test_method_scenario_mismatch_is_usage_error(capsys):
    assert main(["run", "--scenario", "classification", "--method", "rl"]) == 1
    assert "not available" in capsys.readouterr().err


def test_missing_checkpoint_is_runtime_error(tmp_path, capsys):
    vocab = tmp_path / "vocab.txt"
    vocab.write_text("a b\neos=\n")
    assert main(["eval", "--model", str(tmp_path / "missing.ckpt"),
                 "--vocab", str(vocab),
                 "--oracle", str(tmp_path / "oracle.txt")]) == 2
    assert "error:" in capsys.readouterr().err


def test_version_flag_exits_zero():
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0


# --------------------------------------------------------------------------
# synth
# --------------------------------------------------------------------------

def test_synth_artifacts(synth_dir, capsys):
    for name in ("corpus.txt", "generator.ckpt", "vocab.txt", "oracle.txt",
                 "synth.ini"):
        assert (synth_dir / name).exists()
    manifest = read_manifest(str(synth_dir / "synth.ini"))
    assert float(manifest["synth"]["realized_violating_fraction"]) == \
        pytest.approx(0.3)


def test_synth_reports_realized_fraction(tmp_path, capsys):
    assert main(["synth", *FAST, "--out", str(tmp_path), "--size", "40",
                 "--violating-fraction", "0.25"]) == 0
    out = capsys.readouterr().out
    line = next(l for l in out.splitlines()
                if l.startswith("realized_violating_fraction="))
    assert float(line.split("=", 1)[1]) == pytest.approx(0.25)


def test_synth_classification_writes_text_records(tmp_path, capsys):
    assert main(["synth", *FAST, "--scenario", "classification",
                 "--out", str(tmp_path), "--size", "20"]) == 0
    lines = (tmp_path / "records.txt").read_text().splitlines()
    assert len(lines) == 20
    assert all(l.startswith("comment: ") for l in lines)


# --------------------------------------------------------------------------
# pipeline round trip
# --------------------------------------------------------------------------

def test_pipeline_round_trip(synth_dir, tmp_path, capsys):
    model = str(synth_dir / "generator.ckpt")
    nado_dir = tmp_path / "nado"
    assert main(["train-nado", *FAST, "--model", model,
                 "--out", str(nado_dir), "--samples", "64",
                 "--epochs", "60", "--max-len", "5"]) == 0
    out = capsys.readouterr().out
    assert "max_prefix_error=" in out

    ft_dir = tmp_path / "ft"
    assert main(["finetune", *FAST, "--model", model,
                 "--corpus", str(synth_dir / "corpus.txt"),
                 "--head", str(nado_dir / "head.ckpt"),
                 "--kl-weight", "5", "--epochs", "3",
                 "--out", str(ft_dir)]) == 0
    assert "guided=yes" in capsys.readouterr().out

    assert main(["decode", *FAST, "--model", str(ft_dir / "model.ckpt"),
                 "--oracle", str(synth_dir / "oracle.txt"),
                 "--n", "6", "--max-len", "5", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "sample_violation_fraction=" in out
    assert len((tmp_path / "samples.txt").read_text().splitlines()) == 6

    assert main(["eval", *FAST, "--model", str(ft_dir / "model.ckpt"),
                 "--oracle", str(synth_dir / "oracle.txt"),
                 "--corpus", str(synth_dir / "corpus.txt"),
                 "--max-len", "5", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "violation_rate=" in out and "perplexity=" in out


def test_finetune_rejects_two_guides(synth_dir, capsys):
    assert main(["finetune", *FAST, "--model",
                 str(synth_dir / "generator.ckpt"),
                 "--corpus", str(synth_dir / "corpus.txt"),
                 "--head", "h.ckpt", "--exact-guide", "--out", "x"]) == 1


def test_decode_is_deterministic(synth_dir, capsys):
    argv = ["decode", *FAST, "--model", str(synth_dir / "generator.ckpt"),
            "--n", "5", "--max-len", "5"]
    assert main(argv) == 0
    first = capsys.readouterr().out
    assert main(argv) == 0
    assert capsys.readouterr().out == first


def test_window_head_round_trips(synth_dir, tmp_path, capsys):
    assert main(["train-nado", *FAST, "--model",
                 str(synth_dir / "generator.ckpt"), "--head", "window",
                 "--out", str(tmp_path), "--samples", "32",
                 "--epochs", "20", "--max-len", "4"]) == 0
    assert "head=window" in capsys.readouterr().out
    assert (tmp_path / "head.ckpt").read_text().startswith("nado_window")


# --------------------------------------------------------------------------
# run + config files
# --------------------------------------------------------------------------

def test_run_writes_artifacts_and_manifest_suffices(tmp_path, capsys):
    a = tmp_path / "a"
    assert main(["run", "--scenario", "detox", "--method", "plain",
                 "--profile", "desk", "--seed", "5", "--out", str(a)]) == 0
    capsys.readouterr()
    b = tmp_path / "b"
    assert main(["run", "--config", str(a / "manifest.ini"),
                 "--out", str(b)]) == 0
    capsys.readouterr()
    assert strip_timing_columns((a / "metrics.csv").read_text()) == \
        strip_timing_columns((b / "metrics.csv").read_text())
    assert (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()


def test_long_form_aliases_are_accepted(tmp_path, capsys):
    assert main(["run", "--scenario", "mixed_utility", "--method",
                 "ours_adaptive", "--profile", "desk", "--seed", "2"]) == 0
    out = capsys.readouterr().out
    assert "scenario=mixed" in out and "method=adaptive" in out


def test_config_supplies_defaults_and_flags_win(tmp_path, capsys):
    cfg = tmp_path / "cfg.ini"
    write_manifest(str(cfg), {"synth": {
        "size": 30, "violating_fraction": 0.5, "seed": 8,
    }})
    out = tmp_path / "out"
    assert main(["synth", "--config", str(cfg), "--out", str(out),
                 "--violating-fraction", "0.2"]) == 0
    text = capsys.readouterr().out
    assert "records=" in text
    manifest = read_manifest(str(out / "synth.ini"))
    assert manifest["synth"]["seed"] == "8"           # from the config file
    assert manifest["synth"]["violating_fraction"] == "0.2"  # flag wins


def test_config_missing_file_is_usage_error(capsys):
    assert main(["synth", "--config", "/does/not/exist.ini",
                 "--out", "x"]) == 1


# --------------------------------------------------------------------------
# sweep and compare
# --------------------------------------------------------------------------

def test_sweep_table(tmp_path, capsys):
    assert main(["sweep", "--profile", "desk", "--seed", "2",
                 "--values", "0,5", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "kl_weight\tviolation_rate\tperplexity"
    assert len(out) == 3
    assert (tmp_path / "sweep.tsv").exists()


def test_sweep_bad_values_is_usage_error(capsys):
    assert main(["sweep", "--values", "0,banana"]) == 1


def test_compare_accepts_aliases(tmp_path, capsys):
    assert main(["compare", "--profile", "desk", "--seed", "2",
                 "--methods", "plain,ours_sequential",
                 "--out", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[1].startswith("plain\t")
    assert lines[2].startswith("ours\t")
