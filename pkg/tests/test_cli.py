import json

import numpy as np

from nodecorr import cli
from nodecorr.pipeline import evaluate, gen_dataset
from nodecorr.pipeline.checkpoint import load_checkpoint
from nodecorr.verify import property_names

SMALL = ["--n-scenes", "2", "--n-points", "96", "--channels", "8", "--k", "4", "--dilation", "1",
         "--reduction", "2"]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def train(capsys, tmp_path, *extra, tag="a"):
    ckpt, log = tmp_path / f"{tag}.ckpt", tmp_path / f"{tag}.log"
    code, out, err = run(capsys, "train", *SMALL, "--steps", "20", "--out", str(ckpt),
                         "--log", str(log), *extra)
    return code, out, ckpt, log


def test_train_echoes_config_and_writes_outputs(capsys, tmp_path):
    code, out, ckpt, log = train(capsys, tmp_path)
    assert code == 0
    assert "# seed = 0" in out and "# variant = full" in out and "# k = 4" in out
    lines = log.read_text().splitlines()
    assert len(lines) == 20
    step, loss, elapsed = lines[-1].split()
    assert int(step) == 19 and float(loss) > 0 and float(elapsed) >= 0
    assert ckpt.exists()


def test_train_is_deterministic(capsys, tmp_path):
    _, out_a, ckpt_a, log_a = train(capsys, tmp_path, tag="a")
    _, out_b, ckpt_b, log_b = train(capsys, tmp_path, tag="b")
    assert ckpt_a.read_bytes() == ckpt_b.read_bytes()
    losses = [[l.split()[1] for l in f.read_text().splitlines()] for f in (log_a, log_b)]
    assert losses[0] == losses[1]


def test_zero_steps_writes_initial_checkpoint(capsys, tmp_path):
    code, out, ckpt, log = train(capsys, tmp_path, "--steps", "0")
    assert code == 0
    assert log.read_text() == ""
    assert ckpt.exists()


def test_insufficient_neighbors_is_config_error(capsys, tmp_path):
    ckpt = tmp_path / "x.ckpt"
    code, out, err = run(capsys, "train", "--n-scenes", "1", "--n-points", "64", "--k", "8",
                         "--dilation", "8", "--out", str(ckpt), "--log", str(tmp_path / "x.log"))
    assert code == cli.EXIT_CONFIG
    assert not ckpt.exists()


def test_exit_codes(capsys, tmp_path):
    assert run(capsys, "train", "--variant", "nope")[0] == cli.EXIT_CONFIG
    assert run(capsys, "train", "--channels", "ten")[0] == cli.EXIT_CONFIG
    assert run(capsys, "train", "--data", str(tmp_path / "missing"))[0] == cli.EXIT_IO
    assert run(capsys, "eval", "--checkpoint", str(tmp_path / "missing.ckpt"))[0] == cli.EXIT_IO
    assert run(capsys, "check", "--mutate", "bogus")[0] == cli.EXIT_CONFIG
    assert run(capsys, "train", "--config", str(tmp_path / "missing.cfg"))[0] == cli.EXIT_IO


def test_config_file_precedence(capsys, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nchannels = 8\nreduction = 2\nk = 4\ndilation = 1\nseed = 5\n"
                   "n_scenes = 1\nn_points = 80\nsteps = 2\n")
    code, out, _ = run(capsys, "train", "--config", str(cfg), "--seed", "9",
                       "--out", str(tmp_path / "m.ckpt"), "--log", str(tmp_path / "m.log"))
    assert code == 0
    assert "# seed = 9" in out and "# channels = 8" in out
    assert load_checkpoint(tmp_path / "m.ckpt").seed == 9
    bad = tmp_path / "bad.cfg"
    bad.write_text("channels 8\n")
    assert run(capsys, "train", "--config", str(bad))[0] == cli.EXIT_CONFIG
    bad.write_text("colour = red\n")
    assert run(capsys, "train", "--config", str(bad))[0] == cli.EXIT_CONFIG


def test_eval_matches_pipeline(capsys, tmp_path):
    _, _, ckpt, _ = train(capsys, tmp_path)
    metrics = tmp_path / "m.json"
    code, out, _ = run(capsys, "eval", "--checkpoint", str(ckpt), "--n-scenes", "2",
                       "--n-points", "96", "--metrics", str(metrics))
    assert code == 0
    expected = evaluate(gen_dataset(0, 2, 96), load_checkpoint(ckpt), per_cloud=True)
    for key in ("OA", "mAcc", "mIoU"):
        assert f"{key} {expected[key]:.4f}" in out
    report = json.loads(metrics.read_text())
    assert report["mIoU"] == expected["mIoU"]
    assert len(report["per_cloud"]) == 2


def test_eval_after_overfit_on_own_scene(capsys, tmp_path):
    ckpt = tmp_path / "o.ckpt"
    base = ["--n-scenes", "1", "--n-points", "128", "--data-seed", "3"]
    run(capsys, "train", *base, "--channels", "16", "--reduction", "4", "--k", "8",
        "--dilation", "1", "--steps", "600", "--lr", "0.01", "--out", str(ckpt),
        "--log", str(tmp_path / "o.log"))
    code, out, _ = run(capsys, "eval", *base, "--checkpoint", str(ckpt),
                       "--metrics", str(tmp_path / "o.json"))
    assert code == 0
    oa = float(next(l for l in out.splitlines() if l.startswith("OA")).split()[1])
    assert oa > 0.98


def test_eval_rejects_feature_mismatch(capsys, tmp_path):
    _, _, ckpt, _ = train(capsys, tmp_path)
    f = tmp_path / "rgb.xyz"
    rows = np.random.default_rng(0).uniform(0, 1, (20, 6))
    f.write_text("\n".join(" ".join(map(str, r)) + " 0" for r in rows) + "\n")
    code, _, err = run(capsys, "eval", "--checkpoint", str(ckpt), "--data", str(f),
                       "--metrics", str(tmp_path / "m.json"))
    assert code == cli.EXIT_CONFIG


def test_gen_dumps_scenes_that_train_reads(capsys, tmp_path):
    out_dir = tmp_path / "scenes"
    code, out, _ = run(capsys, "gen", "--n-scenes", "2", "--n-points", "96", "--out", str(out_dir))
    assert code == 0
    files = sorted(out_dir.iterdir())
    assert [f.name for f in files] == ["scene_0000.xyz", "scene_0001.xyz"]
    assert "classes" in out
    code, _, _ = run(capsys, "train", "--data", str(out_dir), "--channels", "8", "--k", "4",
                     "--dilation", "1", "--reduction", "2", "--steps", "2",
                     "--out", str(tmp_path / "g.ckpt"), "--log", str(tmp_path / "g.log"))
    assert code == 0


def test_check_reduced_scale(capsys):
    code, out, _ = run(capsys, "check", "--scale", "0.05")
    report = [l for l in out.splitlines() if not l.startswith("#")]
    assert len(report) == len(property_names())
    assert code == 0, out
    code, out, _ = run(capsys, "check", "--scale", "0.05", "--mutate", "unnormalized_softmax")
    assert code == cli.EXIT_FAIL
    assert "FAIL" in out
