"""Frame sequences and the synthetic scene generator."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Sequence:
    """Grayscale frames in [0, 1] with optional binary ground truth.

    `labels` (synthetic scenes only) holds the 1-based object index that
    covers each pixel, 0 for background.
    """

    frames: np.ndarray
    ids: list
    masks: np.ndarray = None
    labels: np.ndarray = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or 0 in self.frames.shape:
            raise ValueError(f"frames must have shape (n, H, W), got {self.frames.shape}")
        if len(self.ids) != len(self.frames):
            raise ValueError("one id per frame required")
        if self.masks is not None:
            self.masks = np.asarray(self.masks)
            if self.masks.shape != self.frames.shape:
                raise ValueError(f"masks {self.masks.shape} do not match frames {self.frames.shape}")
            if not np.isin(self.masks, (0, 1)).all():
                raise ValueError("masks must be strictly 0/1")
            self.masks = self.masks.astype(np.uint8)

    def __len__(self):
        return len(self.frames)

    @property
    def shape(self):
        return self.frames.shape[1:]

    def subset(self, idx):
        idx = list(idx)
        return Sequence(self.frames[idx], [self.ids[i] for i in idx],
                        None if self.masks is None else self.masks[idx],
                        None if self.labels is None else self.labels[idx])

    def tensor(self):
        """Frames as an (n, 1, H, W) array."""
        return self.frames[:, None, :, :].copy()


@dataclass(frozen=True)
class SynthConfig:
    height: int = 32
    width: int = 32
    n_frames: int = 32
    background_rank: int = 2
    drift: float = 0.15
    objects: int = 2
    object_size: int = 6
    object_speed: float = 1.5
    static_objects: int = 0
    noise: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.background_rank < 1:
            raise ValueError("background_rank must be >= 1")
        if self.height < 1 or self.width < 1 or self.n_frames < 1:
            raise ValueError("height, width and n_frames must be positive")
        if self.objects < 0 or self.static_objects < 0:
            raise ValueError("object counts must be nonnegative")
        if self.objects + self.static_objects and not (
                1 <= self.object_size <= min(self.height, self.width)):
            raise ValueError("objects must fit in the frame")
        if self.object_speed < 0 or self.noise < 0 or self.drift < 0:
            raise ValueError("speed, noise and drift must be nonnegative")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")


def _background_basis(cfg, rng):
    yy, xx = np.meshgrid(np.linspace(0, 1, cfg.height), np.linspace(0, 1, cfg.width), indexing="ij")
    basis = []
    for i in range(cfg.background_rank):
        fy, fx = rng.uniform(0.5, 1.5, size=2) * (1 + i)
        py, px = rng.uniform(0, 2 * np.pi, size=2)
        pattern = np.cos(np.pi * fy * yy + py) * np.cos(np.pi * fx * xx + px)
        if i == 0:
            pattern = 0.45 + 0.1 * pattern
        else:
            pattern = 0.1 * pattern
        basis.append(pattern)
    return np.array(basis)


def _coefficients(cfg, rng):
    t = np.arange(cfg.n_frames) / max(cfg.n_frames, 1)
    coef = np.empty((cfg.n_frames, cfg.background_rank))
    for i in range(cfg.background_rank):
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * (i + 1) * t + phase)
        coef[:, i] = (1.0 + cfg.drift * wave) if i == 0 else cfg.drift * 5 * wave
    return coef


def _trajectory(cfg, rng, speed):
    size = cfg.object_size
    lim = np.array([cfg.height - size, cfg.width - size], dtype=np.float64)
    pos = rng.uniform(0, 1, size=2) * lim
    angle = rng.uniform(0, 2 * np.pi)
    vel = speed * np.array([np.sin(angle), np.cos(angle)])
    out = []
    for _ in range(cfg.n_frames):
        out.append(np.rint(pos).astype(int))
        pos = pos + vel
        for k in range(2):
            # reflect off the frame border
            if pos[k] < 0:
                pos[k], vel[k] = -pos[k], -vel[k]
            elif pos[k] > lim[k]:
                pos[k], vel[k] = 2 * lim[k] - pos[k], -vel[k]
            pos[k] = min(max(pos[k], 0.0), lim[k])
    return out


def background(cfg):
    """The noiseless low-rank background frames of the scene, (n, H, W)."""
    rng = np.random.default_rng(cfg.seed)
    basis = _background_basis(cfg, rng)
    coef = _coefficients(cfg, rng)
    return np.tensordot(coef, basis, axes=1), rng


def synth_sequence(cfg):
    """Render a scene: drifting low-rank background plus rectangle objects."""
    bg, rng = background(cfg)
    frames = bg.copy()
    labels = np.zeros(frames.shape, dtype=np.int32)
    speeds = [cfg.object_speed] * cfg.objects + [0.0] * cfg.static_objects
    size = cfg.object_size
    for k, speed in enumerate(speeds, start=1):
        path = _trajectory(cfg, rng, speed)
        y0, x0 = path[0]
        local = bg[:, y0:y0 + size, x0:x0 + size].mean()
        level = rng.uniform(0.85, 0.95) if local < 0.5 else rng.uniform(0.05, 0.15)
        for t, (y, x) in enumerate(path):
            frames[t, y:y + size, x:x + size] = level
            labels[t, y:y + size, x:x + size] = k
    if cfg.noise > 0:
        frames = frames + rng.normal(0.0, cfg.noise, size=frames.shape)
    frames = np.clip(frames, 0.0, 1.0)
    ids = [f"{i:05d}" for i in range(cfg.n_frames)]
    return Sequence(frames, ids, (labels > 0).astype(np.uint8), labels)
