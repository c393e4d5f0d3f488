"""Command-line entry point: ``stcorr <command> [--config FILE] [--section.key VALUE ...]``.

Exit codes: 0 success, 1 usage or input error, 2 numeric fault, 3 verification failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline as P
from .archive import ArchiveError, save_archive
from .config import ConfigError, RunConfig
from .data import DataError, load_clip, rgb_to_lab
from .encoder import EncoderConfigError, freeze
from .metrics import write_scores_csv
from .propagation import PropagationError, run_sequence
from .tensor import NumericFault

log = logging.getLogger("stcorr")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3

PALETTE = np.array([[0, 0, 0], [230, 60, 60], [60, 200, 80], [70, 110, 240], [240, 200, 40],
                    [200, 80, 220], [40, 210, 210], [250, 140, 30]], dtype=np.float64) / 255.0


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _split_overrides(extra: list[str]) -> list[tuple[str, str]]:
    """``--section.key value`` or ``--section.key=value`` pairs."""
    out, i = [], 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise UsageError(f"unrecognized argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"override {tok} needs a value")
            val = extra[i + 1]
            i += 2
        out.append((key, val))
    return out


def _resolve_config(args, overrides) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for key, val in overrides:
        cfg.override(key, val)
    return cfg


def _write_ppm(path: Path, rgb: np.ndarray) -> None:
    img = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def overlay(frame: np.ndarray, labels: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    colours = PALETTE[labels % len(PALETTE)]
    fg = (labels > 0)[..., None]
    return np.where(fg, (1 - alpha) * frame + alpha * colours, frame)


# ------------------------------------------------------------------ commands
def cmd_train_spatial(args, cfg: RunConfig) -> int:
    if args.iters is not None:
        cfg.override("spatial.iters", str(args.iters))
    out = P.ensure_dir(args.out)
    cfg.save(out / "config.ini")
    model, rows = P.train_spatial(cfg, on_step=_progress("spatial", cfg.spatial.iters))
    P.write_spatial_csv(out / "spatial_loss.csv", rows)
    P.save_checkpoint(out / "spatial.stta", model.encoder, cfg, kind="spatial")
    print(f"wrote {out / 'spatial.stta'}")
    return EXIT_OK


def cmd_train_temporal(args, cfg: RunConfig) -> int:
    if args.iters is not None:
        cfg.override("temporal.iters", str(args.iters))
    if not args.from_scratch and not args.init:
        raise UsageError("train-temporal needs --init SPATIAL_CHECKPOINT or --from-scratch")
    init = None
    if args.init:
        init, manifest, _ = P.load_checkpoint(args.init)
        log.info("initialized from %s (%s)", args.init, manifest.get("kind"))
    out = P.ensure_dir(args.out)
    cfg.save(out / "config.ini")
    enc, rows = P.train_temporal(cfg, init=init, on_step=_progress("temporal", cfg.temporal.iters))
    P.write_temporal_csv(out / "temporal_loss.csv", rows)
    P.save_checkpoint(out / "temporal.stta", enc, cfg, kind="temporal")
    print(f"wrote {out / 'temporal.stta'}")
    return EXIT_OK


def cmd_propagate(args, cfg: RunConfig) -> int:
    enc, _, _ = P.load_checkpoint(args.checkpoint)
    clip = load_clip(args.clip)
    out = P.ensure_dir(args.out)
    cfg.save(out / "config.ini")
    n_classes = int(clip.gt_masks.max()) + 1
    res = run_sequence(rgb_to_lab(clip.frames, normalize=True), freeze(enc), clip.gt_masks[0],
                       P.propagation_params(cfg), n_classes=n_classes)
    for t in range(len(res.labels)):
        save_archive(out / f"labels_{t:04d}.stta", {"labels": res.labels[t].astype(np.int64),
                                                    "soft": res.soft[t]})
        _write_ppm(out / f"overlay_{t:04d}.ppm", overlay(clip.frames[t], res.labels[t]))
    print(f"wrote {len(res.labels)} label archives and overlays to {out}")
    return EXIT_OK


def cmd_eval_synth(args, cfg: RunConfig) -> int:
    if args.checkpoint and args.from_scratch:
        raise UsageError("give either --checkpoint or --from-scratch, not both")
    if not args.checkpoint and not args.from_scratch:
        raise UsageError("eval-synth needs --checkpoint FILE or --from-scratch")
    out = P.ensure_dir(args.out)
    if args.checkpoint:
        enc, _, _ = P.load_checkpoint(args.checkpoint)
    else:
        if args.iters is not None:
            cfg.override("temporal.iters", str(args.iters))
        if cfg.temporal.iters > 0:
            enc, rows = P.train_temporal(cfg, on_step=_progress("temporal", cfg.temporal.iters))
            P.write_temporal_csv(out / "temporal_loss.csv", rows)
        else:
            enc = P.encoder_from_config(cfg)
    cfg.save(out / "config.ini")
    clips = P.benchmark_clips(cfg)
    score, per_frame = P.evaluate(freeze(enc), clips, P.propagation_params(cfg))
    write_scores_csv(out / "scores.csv", per_frame)
    summary = score.summary()
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(f"J_mean {score.J_mean:.4f}  F_mean {score.F_mean:.4f}  JF_mean {score.JF_mean:.4f}  "
          f"({summary['sequences']} clips)")
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from .gradcheck import run_gradcheck

    rows = run_gradcheck(seed=cfg.run.seed)
    for r in rows:
        print(r.line())
    failed = [r for r in rows if not r.ok]
    print(f"{len(rows) - len(failed)}/{len(rows)} gradient checks passed")
    return EXIT_OK if not failed else EXIT_VERIFY


def cmd_plot(args, cfg: RunConfig) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = P.ensure_dir(args.out)
    written = []
    for path in map(Path, args.csv):
        if not path.exists():
            raise UsageError(f"no such file: {path}")
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        data = np.genfromtxt(path, delimiter=",", skip_header=1, dtype=None, encoding="utf-8")
        fig, ax = plt.subplots(figsize=(7, 4))
        if header[:2] == ["sequence", "frame"]:
            names = sorted({row[0] for row in np.atleast_1d(data)})
            for name in names:
                rows = [r for r in np.atleast_1d(data) if r[0] == name]
                ax.plot([r[1] for r in rows], [r[2] for r in rows], label=f"{name} J", lw=1)
            ax.set_xlabel("frame")
            ax.set_ylabel("J")
        else:
            arr = np.atleast_2d(np.genfromtxt(path, delimiter=",", skip_header=1))
            for col, name in enumerate(header[1:], start=1):
                if name == "masked_fraction":
                    continue
                ax.plot(arr[:, 0], arr[:, col], label=name, lw=1)
            ax.set_xlabel(header[0])
            ax.set_ylabel("loss")
            ax.set_yscale("log") if np.all(arr[:, 1:] > 0) else None
        ax.legend(fontsize=7)
        ax.set_title(path.name)
        fig.tight_layout()
        target = out / (path.stem + ".png")
        fig.savefig(target, dpi=100)
        plt.close(fig)
        written.append(target)
    for t in written:
        print(f"wrote {t}")
    return EXIT_OK


def _progress(name: str, total: int):
    every = max(1, total // 10)

    def cb(step, value):
        if step % every == 0 or step == total - 1:
            v = value.total if hasattr(value, "total") else value
            log.info("%s step %d/%d loss %.5f", name, step + 1, total, v)
    return cb


# -------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stcorr", description="Spatial-then-temporal correspondence learning on synthetic video.",
                epilog="Any config value can be overridden with --section.key VALUE.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, out_default):
        sp.add_argument("--config", help="INI run configuration")
        sp.add_argument("--out", default=out_default, help="output directory")

    sp = sub.add_parser("train-spatial", help="contrastive pretraining on synthetic still images")
    common(sp, "runs/spatial")
    sp.add_argument("--iters", type=int)

    sp = sub.add_parser("train-temporal", help="temporal learning on synthetic clips")
    common(sp, "runs/temporal")
    sp.add_argument("--init", help="spatial checkpoint; becomes the frozen teacher")
    sp.add_argument("--from-scratch", action="store_true", help="random init, no teacher")
    sp.add_argument("--iters", type=int)

    sp = sub.add_parser("propagate", help="propagate frame-0 labels through an exported clip")
    common(sp, "runs/propagate")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--clip", required=True, help="clip directory (see data.export_clip)")

    sp = sub.add_parser("eval-synth", help="score label propagation on held-out synthetic clips")
    common(sp, "runs/eval")
    sp.add_argument("--checkpoint")
    sp.add_argument("--from-scratch", action="store_true")
    sp.add_argument("--iters", type=int, help="temporal steps when --from-scratch (0 = untrained)")

    sp = sub.add_parser("gradcheck", help="finite-difference checks of every loss")
    common(sp, "runs/gradcheck")

    sp = sub.add_parser("plot", help="render loss or score CSVs to PNG")
    common(sp, "runs/plots")
    sp.add_argument("csv", nargs="+")
    return p


COMMANDS = {
    "train-spatial": cmd_train_spatial,
    "train-temporal": cmd_train_temporal,
    "propagate": cmd_propagate,
    "eval-synth": cmd_eval_synth,
    "gradcheck": cmd_gradcheck,
    "plot": cmd_plot,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _resolve_config(args, _split_overrides(extra))
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"stcorr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFault as exc:
        print(f"stcorr: numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ArchiveError, DataError, EncoderConfigError, PropagationError) as exc:
        print(f"stcorr: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, ValueError) as exc:
        print(f"stcorr: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
