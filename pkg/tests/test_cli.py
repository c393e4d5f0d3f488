import json

import numpy as np

from stcorr.archive import load_archive
from stcorr.cli import main, overlay
from stcorr.config import RunConfig
from stcorr.data import ClipConfig, export_clip, synth_clip

SMALL = ["--eval.n_clips", "2", "--eval.length", "4", "--eval.frame_size", "64",
         "--eval.sprite_min", "16", "--eval.sprite_max", "24"]


def test_gradcheck_passes(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    for name in ("InfoNCE", "global correlation distillation", "reconstruction", "pyramid",
                 "local correlation distillation", "composite"):
        assert name in out
    assert "6/6" in out


def test_usage_errors(capsys):
    assert main([]) == 1
    assert main(["no-such-command"]) == 1
    assert main(["train-temporal", "--out", "x"]) == 1
    assert main(["gradcheck", "--temporal.gamma", "1"]) == 1
    assert main(["gradcheck", "--temporal.alpha"]) == 1


def test_malformed_config_file(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[temporal]\niters = lots\n")
    assert main(["gradcheck", "--config", str(bad)]) == 1


def test_missing_checkpoint(tmp_path):
    assert main(["eval-synth", "--checkpoint", str(tmp_path / "none.stta"), "--out", str(tmp_path)]) == 1


def test_eval_synth_untrained(tmp_path, capsys):
    out = tmp_path / "ev"
    assert main(["eval-synth", "--from-scratch", "--iters", "0", "--out", str(out)] + SMALL) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert 0 <= summary["J_mean"] <= 1 and 0 <= summary["F_mean"] <= 1
    assert summary["sequences"] == 2
    assert RunConfig.load(out / "config.ini").eval.n_clips == 2


def test_train_eval_propagate_plot_chain(tmp_path):
    sp, tp = tmp_path / "sp", tmp_path / "tp"
    assert main(["train-spatial", "--iters", "2", "--out", str(sp), "--spatial.batch", "2",
                 "--spatial.n_images", "4", "--spatial.image_size", "48", "--spatial.crop_size", "32"]) == 0
    assert (sp / "spatial.stta").exists() and (sp / "spatial_loss.csv").exists()
    assert main(["train-temporal", "--init", str(sp / "spatial.stta"), "--iters", "2", "--out", str(tp),
                 "--temporal.batch=1", "--temporal.n_clips", "2", "--temporal.frame_size", "32",
                 "--temporal.sprite_min", "8", "--temporal.sprite_max", "12"]) == 0
    ckpt = tp / "temporal.stta"
    before = ckpt.read_bytes()
    assert main(["eval-synth", "--checkpoint", str(ckpt), "--out", str(tmp_path / "ev")] + SMALL) == 0
    assert ckpt.read_bytes() == before

    clip_dir = export_clip(synth_clip(ClipConfig(length=3, seed=2)), tmp_path / "clip")
    pr = tmp_path / "prop"
    assert main(["propagate", "--checkpoint", str(ckpt), "--clip", str(clip_dir), "--out", str(pr)]) == 0
    tensors, _ = load_archive(pr / "labels_0002.stta")
    assert tensors["labels"].shape == (64, 64)
    assert (pr / "overlay_0000.ppm").read_bytes().startswith(b"P6\n64 64\n255\n")

    assert main(["plot", str(tp / "temporal_loss.csv"), str(tmp_path / "ev" / "scores.csv"),
                 "--out", str(tmp_path / "plots")]) == 0
    assert (tmp_path / "plots" / "temporal_loss.png").exists()
    assert (tmp_path / "plots" / "scores.png").exists()


def test_overlay_leaves_background():
    frame = np.full((2, 2, 3), 0.5)
    out = overlay(frame, np.array([[0, 1], [0, 0]]))
    np.testing.assert_array_equal(out[0, 0], frame[0, 0])
    assert not np.array_equal(out[0, 1], frame[0, 1])
