"""End-to-end tests for the command-line interface: help output, the
gen-data/train/sample/eval/inspect-params pipeline, exit codes, and
byte-determinism of everything it writes."""

import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from garmentgen.cli import build_parser, main
from garmentgen.model import ModelConfig
from garmentgen.ppm import read_ppm
from garmentgen.training import TrainConfig

SMALL_MODEL = dict(image_size=32, d_model=8, heads=2, d_text=8, d_time=8,
                   groups=2, n_down=1)


def config_json(path, **kw):
    defaults = dict(stage=0, steps=3, batch_size=2, timesteps=50, log_every=1000,
                    model=ModelConfig(**SMALL_MODEL))
    defaults.update(kw)
    path.write_text(json.dumps(TrainConfig(**defaults).to_dict()))
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Corpus plus stage-0 and stage-1 checkpoints built through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--n", "4", "--seed", "0",
                 "--out", str(root / "corpus")]) == 0

    s0_cfg = config_json(root / "s0.json")
    assert main(["train", "--config", s0_cfg, "--data", str(root / "corpus"),
                 "--out", str(root / "s0.bin")]) == 0

    s1_cfg = config_json(root / "s1.json", stage=1, steps=2, lora_rank=1)
    assert main(["train", "--config", s1_cfg, "--data", str(root / "corpus"),
                 "--init", str(root / "s0.bin"),
                 "--out", str(root / "s1.bin")]) == 0
    return root


# ----------------------------------------------------------------------
# parser surface


def test_help_screens_fit_pinned_width(capsys):
    screens = [["--help"]]
    screens += [[cmd, "--help"]
                for cmd in ("gen-data", "train", "sample", "eval", "inspect-params")]
    for argv in screens:
        with pytest.raises(SystemExit) as e:
            main(argv)
        assert e.value.code == 0
        out = capsys.readouterr().out
        assert out.startswith("usage: garmentgen")
        assert all(len(line) <= 100 for line in out.splitlines())


def test_top_help_lists_all_subcommands(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    out = capsys.readouterr().out
    for cmd in ("gen-data", "train", "sample", "eval", "inspect-params"):
        assert cmd in out


def test_argparse_errors_exit_2(capsys):
    for argv in ([], ["no-such-command"], ["gen-data"], ["sample", "--steps", "x"]):
        with pytest.raises(SystemExit) as e:
            main(argv)
        assert e.value.code == 2
        capsys.readouterr()


def test_sample_defaults():
    args = build_parser().parse_args(
        ["sample", "--checkpoint", "c", "--prompt", "p", "--out", "o"])
    assert args.steps == 50
    assert args.guidance == 7.5
    assert args.enrich == "template"
    assert args.seed == 0


def test_eval_defaults():
    args = build_parser().parse_args(
        ["eval", "--checkpoint", "c", "--data", "d", "--out", "o"])
    assert args.seeds == 5
    assert args.tier == "simple"
    assert args.steps == 12
    assert args.guidance == 2.0
    assert not args.no_baseline


# ----------------------------------------------------------------------
# gen-data


def test_gen_data_refuses_existing_dir(workspace, capsys):
    assert main(["gen-data", "--n", "2", "--out", str(workspace / "corpus")]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error:")


def test_gen_data_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["gen-data", "--n", "2", "--seed", "3",
                     "--out", str(tmp_path / name)]) == 0
    capsys.readouterr()
    files_a = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files_a == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in files_a:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


# ----------------------------------------------------------------------
# train


def test_train_writes_loss_sidecar(workspace, capsys):
    trace = json.loads((workspace / "s0.bin.loss.json").read_text()
                       if (workspace / "s0.bin.loss.json").exists()
                       else (workspace / "s0.loss.json").read_text())
    assert len(trace) == 3
    assert all(np.isfinite(v) for v in trace)


def test_train_stdout_mentions_stage_and_checkpoint(workspace, tmp_path, capsys):
    cfg = config_json(tmp_path / "c.json", steps=2)
    assert main(["train", "--config", cfg, "--data", str(workspace / "corpus"),
                 "--out", str(tmp_path / "ck.bin")]) == 0
    out = capsys.readouterr().out
    assert "stage 0" in out
    assert "ck.bin" in out


def test_train_missing_corpus_is_error_exit(tmp_path, capsys):
    cfg = config_json(tmp_path / "c.json")
    assert main(["train", "--config", cfg, "--data", str(tmp_path / "nope"),
                 "--out", str(tmp_path / "x.bin")]) == 1
    assert capsys.readouterr().err.startswith("error:")


def test_train_stage1_without_init_is_error_exit(workspace, tmp_path, capsys):
    cfg = config_json(tmp_path / "c.json", stage=1, steps=2)
    assert main(["train", "--config", cfg, "--data", str(workspace / "corpus"),
                 "--out", str(tmp_path / "x.bin")]) == 1
    assert capsys.readouterr().err.startswith("error:")


def test_train_resume_matches_one_shot(workspace, tmp_path, capsys):
    corpus = str(workspace / "corpus")
    cfg6 = config_json(tmp_path / "c6.json", steps=6)
    assert main(["train", "--config", cfg6, "--data", corpus,
                 "--out", str(tmp_path / "full.bin")]) == 0
    cfg3 = config_json(tmp_path / "c3.json", steps=3)
    assert main(["train", "--config", cfg3, "--data", corpus,
                 "--out", str(tmp_path / "part.bin")]) == 0
    assert main(["train", "--resume", str(tmp_path / "part.bin"), "--steps", "6",
                 "--data", corpus, "--out", str(tmp_path / "resumed.bin")]) == 0
    capsys.readouterr()
    assert (tmp_path / "resumed.bin").read_bytes() == (tmp_path / "full.bin").read_bytes()


# ----------------------------------------------------------------------
# sample


def test_sample_with_reference_and_template_enrichment(workspace, tmp_path, capsys):
    argv = ["sample", "--checkpoint", str(workspace / "s1.bin"),
            "--prompt", "a person wearing a shirt",
            "--ref", str(workspace / "corpus" / "ref_0000.ppm"),
            "--steps", "3", "--guidance", "2.0", "--seed", "1",
            "--out", str(tmp_path / "out.ppm")]
    assert main(argv) == 0
    out = capsys.readouterr().out
    assert "caption [template]:" in out
    img = read_ppm(tmp_path / "out.ppm")
    assert img.shape == (32, 32, 3)
    assert img.dtype == np.uint8

    argv2 = argv[:-1] + [str(tmp_path / "again.ppm")]
    assert main(argv2) == 0
    capsys.readouterr()
    assert (tmp_path / "out.ppm").read_bytes() == (tmp_path / "again.ppm").read_bytes()


def test_sample_text_only(workspace, tmp_path, capsys):
    assert main(["sample", "--checkpoint", str(workspace / "s0.bin"),
                 "--prompt", "a person wearing a shirt, gray background",
                 "--enrich", "off", "--steps", "2",
                 "--out", str(tmp_path / "t.ppm")]) == 0
    out = capsys.readouterr().out
    assert "caption [raw]:" in out
    assert (tmp_path / "t.ppm").is_file()


def test_sample_enrich_needs_ref(workspace, tmp_path, capsys):
    assert main(["sample", "--checkpoint", str(workspace / "s0.bin"),
                 "--prompt", "a person wearing a shirt", "--steps", "2",
                 "--out", str(tmp_path / "t.ppm")]) == 1
    assert capsys.readouterr().err.startswith("error:")
    assert not (tmp_path / "t.ppm").exists()


def test_sample_external_needs_endpoint(workspace, tmp_path, capsys):
    assert main(["sample", "--checkpoint", str(workspace / "s0.bin"),
                 "--prompt", "a person wearing a shirt",
                 "--ref", str(workspace / "corpus" / "ref_0000.ppm"),
                 "--enrich", "external", "--steps", "2",
                 "--out", str(tmp_path / "t.ppm")]) == 1
    assert capsys.readouterr().err.startswith("error:")


def test_sample_external_unreachable_falls_back(workspace, tmp_path, capsys):
    assert main(["sample", "--checkpoint", str(workspace / "s1.bin"),
                 "--prompt", "a person wearing a shirt",
                 "--ref", str(workspace / "corpus" / "ref_0000.ppm"),
                 "--enrich", "external", "--endpoint", "http://127.0.0.1:9/v1/rewrite",
                 "--timeout", "0.2", "--steps", "2",
                 "--out", str(tmp_path / "t.ppm")]) == 0
    out = capsys.readouterr().out
    # The unreachable endpoint degrades to the local template caption.
    assert "caption [template]:" in out
    assert (tmp_path / "t.ppm").is_file()


def test_sample_untokenizable_prompt_is_error_exit(workspace, tmp_path, capsys):
    assert main(["sample", "--checkpoint", str(workspace / "s0.bin"),
                 "--prompt", "zzzqqq gibberish", "--enrich", "off", "--steps", "2",
                 "--out", str(tmp_path / "t.ppm")]) == 1
    assert capsys.readouterr().err.startswith("error:")


# ----------------------------------------------------------------------
# eval


def test_eval_writes_report_and_prints_gap(workspace, tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(workspace / "s1.bin"),
                 "--data", str(workspace / "corpus"),
                 "--out", str(tmp_path / "report"),
                 "--seeds", "1", "--steps", "2", "--max-samples", "2"]) == 0
    out = capsys.readouterr().out
    assert "conditioned: texture_sim" in out
    assert "baseline: texture_sim" in out
    assert "texture_gap:" in out
    report = json.loads((tmp_path / "report" / "report.json").read_text())
    assert {"rows", "aggregates"} <= set(report)
    assert (tmp_path / "report" / "report.txt").is_file()


def test_eval_no_baseline_skips_arm(workspace, tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(workspace / "s1.bin"),
                 "--data", str(workspace / "corpus"),
                 "--out", str(tmp_path / "report"), "--no-baseline",
                 "--seeds", "1", "--steps", "2", "--max-samples", "1"]) == 0
    out = capsys.readouterr().out
    assert "baseline:" not in out
    assert "texture_gap:" not in out


def test_eval_min_gap_gate_fails_loudly(workspace, tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(workspace / "s1.bin"),
                 "--data", str(workspace / "corpus"),
                 "--out", str(tmp_path / "report"),
                 "--seeds", "1", "--steps", "2", "--max-samples", "1",
                 "--min-texture-gap", "0.9"]) == 1
    assert "FAIL: texture_gap" in capsys.readouterr().err


def test_eval_min_gap_without_baseline_fails(workspace, tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(workspace / "s1.bin"),
                 "--data", str(workspace / "corpus"),
                 "--out", str(tmp_path / "report"), "--no-baseline",
                 "--seeds", "1", "--steps", "2", "--max-samples", "1",
                 "--min-texture-gap", "0.0"]) == 1
    assert "FAIL" in capsys.readouterr().err


# ----------------------------------------------------------------------
# inspect-params


def test_inspect_params_text_and_json(workspace, tmp_path, capsys):
    cfg = config_json(tmp_path / "c.json", stage=1, lora_rank=1)
    assert main(["inspect-params", "--config", cfg, "--mode", "full"]) == 0
    text = capsys.readouterr().out
    assert "mode: full" in text
    assert "trainable" in text

    assert main(["inspect-params", "--config", cfg, "--json"]) == 0
    data = json.loads(capsys.readouterr().out)
    assert data["mode"] == "full"  # config default mode
    assert data["trainable"] > 0
    assert data["total"] == data["trainable"] + data["frozen"]


def test_inspect_params_stage0_counts_base_only(tmp_path, capsys):
    cfg = config_json(tmp_path / "c.json", stage=0)
    assert main(["inspect-params", "--config", cfg, "--mode", "only_lora",
                 "--json"]) == 0
    data = json.loads(capsys.readouterr().out)
    # No factors are attached at stage 0, so the low-rank group is empty.
    assert data["trainable"] == 0


# ----------------------------------------------------------------------
# console entry point


def test_console_script_is_callable():
    exe = shutil.which("garmentgen")
    if exe is None:
        proc = subprocess.run([sys.executable, "-c",
                               "from garmentgen.cli import main; main(['--help'])"],
                              capture_output=True, text=True)
    else:
        proc = subprocess.run([exe, "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "usage: garmentgen" in proc.stdout
