"""``lsprox`` command line: synth | rpca | train | infer | eval."""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .. import prox_ops, rpca, train, unet
from . import config as config_mod
from . import detect as detect_mod
from . import imageio, report
from .sequence import SynthConfig, synth_sequence

log = logging.getLogger("lsprox")

EXIT_RUNTIME = 1
EXIT_INPUT = 2
EXIT_BELOW_TARGET = 3


def _write_tsv(path, header, rows):
    lines = [] if header is None else ["\t".join(header)]
    lines += ["\t".join(str(x) for x in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def _write_history(path, values):
    Path(path).write_text("".join(f"{k}\t{v:.17g}\n" for k, v in enumerate(values)))


def _require(cfg, key):
    if not cfg[key]:
        raise config_mod.ConfigError(f"{key} must be set")
    return cfg[key]


def _load_frames(cfg):
    stop = None if cfg["data.stop"] < 0 else cfg["data.stop"]
    return imageio.load_sequence(_require(cfg, "data.frames"), cfg["data.start"], stop,
                                 cfg["data.sample"], cfg["data.sample_seed"])


def synth_config(cfg):
    return SynthConfig(
        height=cfg["synth.height"], width=cfg["synth.width"], n_frames=cfg["synth.n_frames"],
        background_rank=cfg["synth.background_rank"], drift=cfg["synth.drift"],
        objects=cfg["synth.objects"], object_size=cfg["synth.object_size"],
        object_speed=cfg["synth.object_speed"], static_objects=cfg["synth.static_objects"],
        noise=cfg["synth.noise"], seed=cfg["synth.seed"])


def rpca_config(cfg):
    return rpca.RpcaConfig(cfg["rpca.lambda_star"], cfg["rpca.lambda_1"], cfg["rpca.alpha"],
                           cfg["rpca.max_iter"], cfg["rpca.tol"])


def unet_config(cfg):
    return unet.UNetConfig(depth=cfg["unet.depth"], base_channels=cfg["unet.base_channels"],
                           seed=cfg["unet.seed"])


def phase_configs(cfg):
    p1 = train.Phase1Config(
        epochs=cfg["train.phase1.epochs"], lr=cfg["train.phase1.lr"],
        beta1=cfg["train.phase1.beta1"], beta2=cfg["train.phase1.beta2"],
        eps=cfg["train.phase1.eps"], lambda_star=cfg["train.lambda_star"],
        lambda_1=cfg["train.lambda_1"])
    ts, t1 = cfg["train.phase2.tau_star"], cfg["train.phase2.tau_1"]
    p2 = train.Phase2Config(
        iters=cfg["train.phase2.iters"], lr=cfg["train.phase2.lr"],
        alpha=cfg["train.phase2.alpha"], tau_star=None if ts < 0 else ts,
        tau_1=None if t1 < 0 else t1, bn_training=cfg["train.phase2.bn_training"])
    return p1, p2


def window_bounds(n, window, center):
    """Frame range of `window` frames centered on `center`, clamped to [0, n)."""
    if window <= 0 or window >= n:
        return 0, n
    if center < 0:
        center = n // 2
    if center >= n:
        raise ValueError(f"rpca.center {center} outside sequence of {n} frames")
    start = min(max(center - window // 2, 0), n - window)
    return start, start + window


def _write_detection(out, seq, S):
    h, w = seq.shape
    frames_S = unet.from_matrix(S, h, w)[:, 0]
    imageio.write_rescaled(out / "S", seq.ids, frames_S)
    mask, thr = detect_mod.detect(S)
    masks = unet.from_matrix(mask.astype(np.float64), h, w)[:, 0] > 0.5
    imageio.write_masks(out / "masks", seq.ids, masks)
    (out / "threshold.txt").write_text(f"{thr:.17g}\n")
    return frames_S, masks, thr


def run_synth(cfg, out):
    seq = synth_sequence(synth_config(cfg))
    holdout = cfg["synth.holdout"]
    if not 0 <= holdout < len(seq):
        raise config_mod.ConfigError(f"synth.holdout must lie in [0, {len(seq)})")
    if holdout:
        rng = np.random.default_rng(cfg["synth.seed"])
        test = np.sort(rng.choice(len(seq), size=holdout, replace=False))
        train_idx = np.setdiff1d(np.arange(len(seq)), test)
        parts = {"train": seq.subset(train_idx), "test": seq.subset(test)}
    else:
        parts = {".": seq}
    for name, part in parts.items():
        imageio.write_frames(out / name / "frames", part.ids, part.frames)
        imageio.write_masks(out / name / "masks", part.ids, part.masks)
    if cfg["report.figures"]:
        report.plot_panels(out / "synth.png", [("frame " + seq.ids[0], seq.frames[0]),
                                               ("mask", seq.masks[0])])
    log.info("wrote %d frames of %dx%d to %s", len(seq), *seq.shape, out)


def run_rpca(cfg, out):
    rcfg = rpca_config(cfg)
    seq = _load_frames(cfg)
    start, stop = window_bounds(len(seq), cfg["rpca.window"], cfg["rpca.center"])
    seq = seq.subset(range(start, stop))
    D = unet.to_matrix(seq.tensor())
    res = rpca.decompose(D, rcfg)
    log.info("rpca: %d iterations, converged=%s, objective %.6g",
             res.iterations_run, res.converged, res.objective_history[-1])
    h, w = seq.shape
    imageio.write_rescaled(out / "L", seq.ids, unet.from_matrix(res.L, h, w)[:, 0])
    frames_S, masks, _ = _write_detection(out, seq, res.S)
    _write_history(out / "objective.tsv", res.objective_history)
    _write_tsv(out / "rpca.tsv", ("key", "value"), [
        ("frames", f"{seq.ids[0]}..{seq.ids[-1]}"),
        ("iterations", res.iterations_run),
        ("converged", str(res.converged).lower()),
        ("rank_L", prox_ops.rank(res.L) if np.any(res.L) else 0),
    ])
    if cfg["report.figures"]:
        c = len(seq) // 2
        report.plot_history(out / "objective.png", {"objective": res.objective_history},
                            ylabel="objective")
        report.plot_panels(out / "rpca.png", [
            ("D", seq.frames[c]), ("L", unet.from_matrix(res.L, h, w)[c, 0]),
            ("S", frames_S[c]), ("detection", masks[c])])


def run_train(cfg, out):
    p1, p2 = phase_configs(cfg)
    seq = _load_frames(cfg)
    D = seq.tensor()
    params = unet.build(unet_config(cfg))
    log.info("training %d-parameter network on %d frames of %dx%d",
             params.count(), len(seq), *seq.shape)
    r1 = train.train_phase1(params, D, p1)
    r2 = train.train_phase2(r1.params, D, p2, p1.lambda_star, p1.lambda_1)
    unet.save(r2.params, out / "model.ckpt")
    _write_history(out / "loss_phase1.tsv", r1.history)
    _write_history(out / "loss_phase2.tsv", r2.history)
    (out / "training_frames.txt").write_text("".join(f"{i}\n" for i in seq.ids))
    if cfg["report.figures"]:
        report.plot_history(out / "training.png",
                            {"phase 1 (Adam)": r1.history, "phase 2 (prox)": r2.history})


def run_infer(cfg, out):
    params = unet.load(_require(cfg, "infer.checkpoint"))
    seq = _load_frames(cfg)
    f = 2 ** params.cfg.depth
    h, w = seq.shape
    if h % f or w % f:
        raise ValueError(f"frame size {h}x{w} is not divisible by {f} "
                         f"as the depth-{params.cfg.depth} checkpoint requires")
    S = train.infer(params, seq.tensor())
    frames_S, masks, _ = _write_detection(out, seq, S)
    if cfg["report.figures"]:
        c = len(seq) // 2
        report.plot_panels(out / "infer.png", [
            ("D", seq.frames[c]), ("D - S", seq.frames[c] - frames_S[c]),
            ("S", frames_S[c]), ("detection", masks[c])])


def run_eval(cfg, out):
    ids, pred = imageio.load_masks(_require(cfg, "eval.pred"))
    _, truth = imageio.load_masks(_require(cfg, "eval.truth"), ids)
    pred_dir = Path(cfg["eval.pred"])
    thr = None
    thr_file = pred_dir.parent / "threshold.txt"
    if thr_file.exists():
        thr = float(thr_file.read_text())
    rep = detect_mod.evaluate(pred, truth, thr)
    _write_tsv(out / "metrics.tsv", None, rep.rows())
    _write_tsv(out / "frames.tsv", ("frame", "tp", "fp", "fn"),
               zip(ids, rep.tp, rep.fp, rep.fn))
    if cfg["report.figures"]:
        report.plot_frame_scores(out / "eval.png", ids, rep.frame_f1())
    for key, value in rep.rows():
        print(f"{key}\t{value}")
    f1 = rep.f1
    if cfg["eval.min_f1"] > 0 and (f1 is None or f1 < cfg["eval.min_f1"]):
        log.warning("f1 below eval.min_f1=%g", cfg["eval.min_f1"])
        return EXIT_BELOW_TARGET
    return 0


COMMANDS = {
    "synth": run_synth,
    "rpca": run_rpca,
    "train": run_train,
    "infer": run_infer,
    "eval": run_eval,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="lsprox", description=__doc__)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="key=value config file")
    parser.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_mod.load(args.config, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        code = COMMANDS[args.command](cfg, out)
    except detect_mod.DegenerateHistogram as exc:
        print(f"lsprox {args.command}: no detection possible: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (config_mod.ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"lsprox {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (prox_ops.SvdError, train.TrainingError, FloatingPointError) as exc:
        print(f"lsprox {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
