import json
from pathlib import Path

import numpy as np
import pytest

from lappyr import cli
from lappyr.checkpoint import read_tensors
from lappyr.imageio import read_image, write_pfm

GOLDEN = Path(__file__).parent / "golden"
COMMANDS = ["train", "eval", "decompose", "augment", "pyramid", "gradcheck", "synth"]


@pytest.fixture(autouse=True)
def _no_seed_env(monkeypatch):
    monkeypatch.delenv(cli.SEED_ENV, raising=False)


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def synth_dir(tmp_path, capsys):
    d = tmp_path / "synth"
    code, _, _ = run(capsys, "synth", "--n", 4, "--size", 32, "--seed", 3, "--out-dir", d)
    assert code == 0
    return d


@pytest.fixture
def ckpt(tmp_path, synth_dir, capsys):
    out = tmp_path / "run"
    code, _, err = run(capsys, "train", "--manifest", synth_dir / "manifest.tsv", "--steps", 3, "--crop", 32,
                       "--width", 4, "--substructures", 1, "--seed", 7, "--out-dir", out)
    assert code == 0, err
    return out / "final.ckpt"


@pytest.mark.parametrize("cmd", COMMANDS + ["main"])
def test_help_matches_golden(cmd, capsys):
    argv = ["--help"] if cmd == "main" else [cmd, "--help"]
    code, out, _ = run(capsys, *argv)
    assert code == 0
    assert out == (GOLDEN / f"help_{cmd}.txt").read_text()


@pytest.mark.parametrize("cmd", COMMANDS)
def test_help_lists_every_flag_with_default(cmd):
    parser = cli.build_parser()
    sub = parser._subparsers._group_actions[0].choices[cmd]
    text = sub.format_help()
    for act in sub._actions:
        for opt in act.option_strings:
            assert opt in text
        if act.option_strings and act.default not in (None, "==SUPPRESS==") and act.dest != "help":
            assert act.help and ("default" in act.help or "(default:" in text)


def test_synth_counts(synth_dir, tmp_path, capsys):
    d = tmp_path / "s8"
    code, out, _ = run(capsys, "synth", "--n", 8, "--size", 64, "--seed", 3, "--out-dir", d)
    assert code == 0
    assert len(list(d.glob("*.pfm"))) == 24
    assert len((d / "manifest.tsv").read_text().splitlines()) == 8
    assert "images\t24" in out


def test_train_writes_checkpoint_log_and_figure(ckpt):
    assert ckpt.is_file()
    assert (ckpt.parent / "train_log.tsv").is_file()
    assert (ckpt.parent / "loss_curve.png").stat().st_size > 0


def test_train_is_deterministic(tmp_path, synth_dir, capsys):
    blobs = []
    for name in ("a", "b"):
        code, _, _ = run(capsys, "train", "--manifest", synth_dir / "manifest.tsv", "--steps", 2, "--crop", 32,
                         "--width", 4, "--substructures", 1, "--seed", 5, "--out-dir", tmp_path / name)
        assert code == 0
        blobs.append((tmp_path / name / "final.ckpt").read_bytes())
    assert blobs[0] == blobs[1]


def test_seed_from_environment(tmp_path, synth_dir, capsys, monkeypatch):
    monkeypatch.setenv(cli.SEED_ENV, "11")
    code, _, _ = run(capsys, "train", "--synth", 1, "--steps", 1, "--crop", 16, "--width", 4,
                     "--substructures", 1, "--out-dir", tmp_path / "e")
    assert code == 0
    cfg, _ = read_tensors(tmp_path / "e" / "final.ckpt")
    assert cfg["albedo"]["seed"] == 11
    monkeypatch.setenv(cli.SEED_ENV, "x")
    assert run(capsys, "gradcheck", "--no-network")[0] == 1


def test_config_file_merged_under_flags(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# desk run\nsteps = 2\nwidth=4\nsubstructures = 1\ncrop = 16\nseed = 21\n")
    out = tmp_path / "c"
    code, text, _ = run(capsys, "train", "--synth", 1, "--config", cfg, "--seed", 22, "--out-dir", out)
    assert code == 0 and "steps\t2" in text
    conf, _ = read_tensors(out / "final.ckpt")
    assert conf["albedo"]["seed"] == 22 and conf["albedo"]["width"] == 4
    cfg.write_text("nonsense = 1\n")
    assert run(capsys, "train", "--synth", 1, "--config", cfg)[0] == 1


def test_train_errors(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--manifest", tmp_path / "missing.tsv", "--out-dir", tmp_path / "x")
    assert code == 2 and "not found" in err
    code, _, err = run(capsys, "train", "--synth", 1, "--scheme", "hierarchical", "--variant", "parallel_c")
    assert code == 1 and "pyramid_d" in err
    assert run(capsys, "train", "--unknown-flag")[0] == 1
    assert run(capsys)[0] == 1
    assert run(capsys, "train", "--synth", 1, "--bilateral-window", 4, "--out-dir", tmp_path / "y")[0] == 1


def test_eval_ground_truth_dir_scores_zero(tmp_path, synth_dir, capsys):
    out = tmp_path / "ev"
    code, text, _ = run(capsys, "eval", "--manifest", synth_dir / "manifest.tsv", "--pred-dir", synth_dir,
                        "--out-dir", out)
    assert code == 0
    agg = text.strip().splitlines()[-1].split("\t")
    assert agg[0] == "*" and all(float(v) == 0 for v in agg[1:])
    recs = json.loads((out / "metrics.json").read_text())["records"]
    assert recs[-1]["kind"] == "aggregate" and recs[-1]["si_mse_avg"] == 0
    assert (out / "metrics.png").stat().st_size > 0


def test_eval_checkpoint_with_baselines(tmp_path, synth_dir, ckpt, capsys):
    out = tmp_path / "ev"
    code, text, _ = run(capsys, "eval", "--manifest", synth_dir / "manifest.tsv", "--checkpoint", ckpt,
                        "--baselines", "--out-dir", out, "--split", "image_split")
    assert code == 0
    assert len(text.strip().splitlines()) == 1 + 2 + 1
    assert (out / "metrics_const_albedo.tsv").is_file()


def test_eval_missing_prediction(tmp_path, synth_dir, capsys):
    assert run(capsys, "eval", "--manifest", synth_dir / "manifest.tsv", "--pred-dir", tmp_path)[0] == 2


def test_decompose_outputs(tmp_path, synth_dir, ckpt, capsys):
    img = synth_dir / "synth_3_0000_input.pfm"
    out = tmp_path / "dec"
    code, _, _ = run(capsys, "decompose", img, "--checkpoint", ckpt, "--out-dir", out, "--emit-components")
    assert code == 0
    for kind in ("albedo", "shading"):
        for ext in ("png", "pfm"):
            assert read_image(out / f"synth_3_0000_input_{kind}.{ext}").shape == (3, 32, 32)
        # K = 2 gives 3 component maps per target
        assert len(list(out.glob(f"*_{kind}_comp*.pfm"))) == 3


def test_decompose_errors(tmp_path, ckpt, capsys):
    odd = tmp_path / "odd.pfm"
    write_pfm(odd, np.zeros((3, 30, 32), np.float32))
    code, _, err = run(capsys, "decompose", odd, "--checkpoint", ckpt, "--out-dir", tmp_path)
    assert code == 2 and "pad by 2 rows" in err
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"LPYR\x01")
    assert run(capsys, "decompose", odd, "--checkpoint", bad)[0] == 2


def test_augment_writes_exact_triples(tmp_path, synth_dir, ckpt, capsys):
    out = tmp_path / "aug"
    code, text, _ = run(capsys, "augment", "--checkpoint", ckpt, "--manifest", synth_dir / "manifest.tsv",
                        "--unlabeled", synth_dir / "synth_3_0001_input.pfm", "--out-dir", out)
    assert code == 0 and "augmented\t8" in text
    from lappyr.datapipe import load_manifest

    ds = load_manifest(out / "manifest.tsv")
    assert len(ds) == 8
    assert all(p.product_exact() for p in ds)


def test_pyramid_command(tmp_path, synth_dir, capsys):
    out = tmp_path / "pyr"
    code, text, _ = run(capsys, "pyramid", synth_dir / "synth_3_0000_input.pfm", "--levels", 2, "--out-dir", out)
    assert code == 0
    assert text.strip().splitlines()[-1].split("\t")[3] == "0"
    assert len(list(out.glob("*.pfm"))) == 3 and len(list(out.glob("*.png"))) == 1
    assert run(capsys, "pyramid", synth_dir / "synth_3_0000_input.pfm", "--levels", 9, "--out-dir", out)[0] == 2


def test_gradcheck_command(capsys, monkeypatch):
    code, text, _ = run(capsys, "gradcheck", "--seed", 1, "--no-network")
    assert code == 0 and "FAIL" not in text
    from lappyr import gradcheck

    def failing(seed, network=True):
        return [gradcheck.CheckResult("broken", 1.0, 1e-4, 1)]

    monkeypatch.setattr(gradcheck, "run_suite", failing)
    assert run(capsys, "gradcheck")[0] == 3
