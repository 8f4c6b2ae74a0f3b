"""Flat ``key=value`` run configuration.

One setting per line, ``#`` starts a comment, keys are namespaced
(``rpca.lambda_star=1.0``). Unknown keys are rejected.
"""

from pathlib import Path


class ConfigError(ValueError):
    pass


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default)
SCHEMA = {
    "data.frames": (str, ""),
    "data.start": (int, 0),
    "data.stop": (int, -1),
    "data.sample": (int, 0),
    "data.sample_seed": (int, 0),

    "synth.height": (int, 32),
    "synth.width": (int, 32),
    "synth.n_frames": (int, 32),
    "synth.background_rank": (int, 2),
    "synth.drift": (float, 0.15),
    "synth.objects": (int, 2),
    "synth.object_size": (int, 6),
    "synth.object_speed": (float, 1.5),
    "synth.static_objects": (int, 0),
    "synth.noise": (float, 0.01),
    "synth.seed": (int, 0),
    "synth.holdout": (int, 0),

    "rpca.lambda_star": (float, 1.0),
    "rpca.lambda_1": (float, 0.03125),
    "rpca.alpha": (float, 0.5),
    "rpca.max_iter": (int, 5000),
    "rpca.tol": (float, 1e-6),
    "rpca.window": (int, 0),
    "rpca.center": (int, -1),

    "unet.depth": (int, 2),
    "unet.base_channels": (int, 8),
    "unet.seed": (int, 0),

    "train.lambda_star": (float, 1.0),
    "train.lambda_1": (float, 0.03125),
    "train.phase1.epochs": (int, 500),
    "train.phase1.lr": (float, 3e-4),
    "train.phase1.beta1": (float, 0.9),
    "train.phase1.beta2": (float, 0.999),
    "train.phase1.eps": (float, 1e-8),
    "train.phase2.iters": (int, 300),
    "train.phase2.lr": (float, 3e-8),
    "train.phase2.alpha": (float, 0.5),
    "train.phase2.tau_star": (float, -1.0),
    "train.phase2.tau_1": (float, -1.0),
    "train.phase2.bn_training": (_bool, True),

    "infer.checkpoint": (str, ""),

    "eval.pred": (str, ""),
    "eval.truth": (str, ""),
    "eval.min_f1": (float, 0.0),

    "report.figures": (_bool, True),
}

SEED_KEYS = ("synth.seed", "unet.seed", "data.sample_seed")


def defaults():
    return {k: v for k, (_, v) in SCHEMA.items()}


def parse(text, source="<config>"):
    cfg = defaults()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        conv = SCHEMA[key][0]
        try:
            cfg[key] = conv(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
    return cfg


def load(path, seed=None):
    """Read a config file; `seed` overrides every seed key."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = parse(text, str(path))
    if seed is not None:
        if seed < 0:
            raise ConfigError("seed must be nonnegative")
        for key in SEED_KEYS:
            cfg[key] = seed
    return cfg


def dump(cfg):
    return "".join(f"{k}={cfg[k]}\n" for k in SCHEMA)
