import csv
import hashlib

import numpy as np
import pytest

from idegen.checkpoint import load_checkpoint
from idegen.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_PREREQ, FOOTER, main
from idegen.config import RunConfig, parse_config
from idegen.errors import ConfigError
from idegen.worldsim import read_ppm

TINY = """
# tiny end-to-end run
S = 32
T = 3
clips = 10
iterations = 3
batch = 2
c_lat = 4
lfae_width = 4
width = 8
unet_base = 8
heads = 2
patch = 8
N = 5
eval_clips = 2
eval_draws = 1
gen_batch = 2
log_every = 1
"""


def _tree_hash(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# -- config parsing ---------------------------------------------------------------------

def test_parse_comments_aliases_and_lists():
    cfg = parse_config("lambda = 0.5  # weight\ndisable = ttm, adu\nstop_ego_grad = yes\n")
    assert cfg.lam == 0.5 and cfg.disable == ("adu", "ttm") and cfg.stop_ego_grad is True


@pytest.mark.parametrize("text,needle", [("bogus_key = 1", "bogus_key"), ("S = 48", "S"),
                                         ("iterations = abc", "iterations"), ("no equals sign", "line 1"),
                                         ("disable = nope", "nope"), ("fuse_mode = x", "fuse_mode")])
def test_config_errors_name_the_problem(text, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config(text)


def test_echo_round_trips():
    cfg = parse_config("disable = cfpm\nseed = 7\n")
    assert parse_config(cfg.echo()) == cfg
    assert RunConfig().echo().count("\n") == len(RunConfig().items())


# -- command line ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    conf = root / "tiny.cfg"
    conf.write_text(TINY + f"dataset = {root / 'data'}\n")
    assert main(["gen-data", "--config", str(conf), "--seed", "3"]) == EXIT_OK
    assert main(["train", "--config", str(conf), "--stage", "1", "--out", str(root / "s1")]) == EXIT_OK
    s1 = root / "s1" / "stage1.ckpt"
    assert main(["train", "--config", str(conf), "--stage", "2", "--stage1-ckpt", str(s1),
                 "--out", str(root / "s2")]) == EXIT_OK
    return root, conf


def test_unknown_key_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour = red\n")
    assert main(["gen-data", "--config", str(bad)]) == EXIT_CONFIG
    assert "colour" in capsys.readouterr().err


def test_stage2_without_checkpoint_exits_3(tmp_path, capsys):
    assert main(["train", "--stage", "2", "--out", str(tmp_path)]) == EXIT_PREREQ
    assert "stage1" in capsys.readouterr().err.replace("-", "")


def test_gen_data_is_reproducible(run, tmp_path):
    root, conf = run
    assert (root / "data" / "manifest.csv").exists() or any((root / "data").glob("manifest*"))
    assert main(["gen-data", "--config", str(conf), "--seed", "3", "--out", str(tmp_path / "again")]) == EXIT_OK
    assert _tree_hash(root / "data") == _tree_hash(tmp_path / "again")


def test_training_artifacts(run):
    root, _ = run
    for stage in ("s1", "s2"):
        rows = list(csv.reader((root / stage / "train_log.csv").open()))[1:]
        iters = [int(r[0]) for r in rows]
        assert iters and all(a < b for a, b in zip(iters, iters[1:]))
        assert "seed = 0" in (root / stage / "run_config.txt").read_text()
        assert "config" in (root / stage / "run.log").read_text()
    assert load_checkpoint(root / "s2" / "stage2.ckpt").meta["kind"] == "stage2"


def test_disable_ttm_checkpoint_has_no_ttm_tensors(run, tmp_path):
    root, conf = run
    out = tmp_path / "nottm"
    assert main(["train", "--config", str(conf), "--stage", "2", "--stage1-ckpt", str(root / "s1" / "stage1.ckpt"),
                 "--disable", "ttm", "--out", str(out)]) == EXIT_OK
    names = load_checkpoint(out / "stage2.ckpt").tensors
    assert not any(n.startswith("ttm.") for n in names)
    assert any(n.startswith("ttm.") for n in load_checkpoint(root / "s2" / "stage2.ckpt").tensors)


def test_generate_frames_and_determinism(run, tmp_path):
    root, _ = run
    ck = str(root / "s2" / "stage2.ckpt")
    for name in ("a", "b"):
        assert main(["generate", "--ckpt", ck, "--dataset", str(root / "data"), "--seed", "4",
                     "--flow-vis", "--out", str(tmp_path / name)]) == EXIT_OK
    clips = sorted(p for p in (tmp_path / "a").iterdir() if p.is_dir())
    assert len(clips) == 2
    frames = sorted((clips[0] / "exo").glob("*.ppm"))
    assert len(frames) == 3
    img = read_ppm(frames[0])
    assert img.shape == (3, 32, 32) and img.min() >= 0 and img.max() <= 1
    assert (clips[0] / "flow").is_dir() and (clips[0] / "occ").is_dir()
    assert _tree_hash(tmp_path / "a") == _tree_hash(tmp_path / "b")


def test_generate_from_files(run, tmp_path):
    root, _ = run
    clip = sorted(p for p in (root / "data").iterdir() if p.is_dir())[0]
    exo1 = sorted((clip / "exo").glob("*.ppm"))[0]
    ego1 = sorted((clip / "ego").glob("*.ppm"))[0]
    traj = next(clip.glob("*.csv"))
    args = ["generate", "--ckpt", str(root / "s2" / "stage2.ckpt"), "--exo1", str(exo1), "--ego1", str(ego1),
            "--traj", str(traj), "--out", str(tmp_path / "f")]
    assert main(args + ["--desc", "approach"]) == EXIT_OK
    assert main(args + ["--desc", "approach zebra"]) == EXIT_DATA
    assert main(args[:3] + ["--exo1", str(exo1)]) == EXIT_CONFIG


def test_evaluate_cli(run, tmp_path, capsys):
    root, _ = run
    data = root / "data"
    out = tmp_path / "m.csv"
    assert main(["evaluate", str(data), str(data), "--out", str(out)]) == EXIT_OK
    text = capsys.readouterr().out
    assert FOOTER in text
    header, row = out.read_text().splitlines()
    assert header == "lpips_surr,fvd,kvd" and float(row.split(",")[0]) == 0.0
    gen = tmp_path / "gen"
    (gen / "l999c99" / "exo").mkdir(parents=True)
    (gen / "l999c99" / "exo" / "0000.ppm").write_bytes((next(data.glob("*/exo/0000.ppm"))).read_bytes())
    assert main(["evaluate", str(gen), str(data)]) == EXIT_DATA
    assert "l999c99" in capsys.readouterr().err


def test_gradcheck_passes_and_lists_registry(capsys):
    from idegen.autodiff.tensor import REGISTRY
    assert main(["gradcheck", "--ops-only"]) == EXIT_OK
    out = capsys.readouterr().out
    assert f"ops checked: {len(REGISTRY)} of {len(REGISTRY)} registered" in out
    assert "gradcheck: all passed" in out


def test_gradcheck_detects_corrupted_matmul(monkeypatch, capsys):
    monkeypatch.setenv("IDE_CORRUPT_GRAD", "matmul")
    assert main(["gradcheck", "--ops-only"]) == EXIT_NUMERIC
    assert "FAILED" in capsys.readouterr().out


@pytest.mark.slow
def test_full_gradcheck_with_model_suites(capsys):
    assert main(["gradcheck"]) == EXIT_OK
    assert "model:conditioning" in capsys.readouterr().out


def test_generated_frames_are_finite(run, tmp_path):
    root, _ = run
    assert main(["generate", "--ckpt", str(root / "s2" / "stage2.ckpt"), "--dataset", str(root / "data"),
                 "--split", "train", "--batch", "3", "--out", str(tmp_path / "g")]) == EXIT_OK
    frames = [read_ppm(p) for p in (tmp_path / "g").glob("*/exo/*.ppm")]
    assert len(frames) == 8 * 3 and all(np.isfinite(f).all() for f in frames)
