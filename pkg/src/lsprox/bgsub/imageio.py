"""Reading and writing grayscale image sequences (PGM P5 / PNG)."""

from pathlib import Path

import numpy as np
from PIL import Image

from .sequence import Sequence

IMAGE_SUFFIXES = (".pgm", ".png")
LUMA = np.array([0.299, 0.587, 0.114])


def read_gray(path):
    """Read one image as float64 in [0, 1]; RGB is reduced by luminance."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "P":
                im = im.convert("RGBA" if "transparency" in im.info else "RGB")
                mode = im.mode
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot read image {path}: {exc}") from exc
    if mode in ("L", "LA"):
        gray = arr[..., 0] if arr.ndim == 3 else arr
        return gray.astype(np.float64) / 255.0
    if mode in ("RGB", "RGBA"):
        return (arr[..., :3].astype(np.float64) @ LUMA) / 255.0
    raise ValueError(f"unsupported image mode {mode!r} in {path}")


def write_pgm(path, img):
    """Write an 8-bit array as binary PGM."""
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ValueError("write_pgm expects a 2-D uint8 array")
    Image.fromarray(img, mode="L").save(path, format="PPM")


def to_uint8(frame):
    """[0, 1] floats to 8-bit with rounding; out-of-range values are clipped."""
    return np.rint(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)


def rescale_uint8(frame):
    """Affine map of [min, max] onto [0, 255]; returns (image, min, max)."""
    lo, hi = float(frame.min()), float(frame.max())
    if hi == lo:
        return np.zeros(frame.shape, dtype=np.uint8), lo, hi
    return np.rint((frame - lo) / (hi - lo) * 255.0).astype(np.uint8), lo, hi


def list_images(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ValueError(f"no .pgm/.png images in {directory}")
    return files


def load_sequence(path, start=0, stop=None, sample=0, seed=0, masks=None):
    """Load frames from a directory of images with sortable names.

    Frames ``[start, stop)`` are kept; if `sample` > 0 that many are drawn
    without replacement (seeded) and returned in temporal order. `masks`
    optionally names a directory of ground-truth images matched by file stem.
    """
    files = list_images(path)[start:stop]
    if not files:
        raise ValueError(f"frame range [{start}, {stop}) selects no images in {path}")
    if sample:
        if sample > len(files):
            raise ValueError(f"cannot sample {sample} of {len(files)} frames")
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(files), size=sample, replace=False))
        files = [files[i] for i in pick]
    frames = []
    for f in files:
        img = read_gray(f)
        if frames and img.shape != frames[0].shape:
            raise ValueError(f"{f}: size {img.shape} differs from {frames[0].shape}")
        frames.append(img)
    ids = [f.stem for f in files]
    truth = None
    if masks is not None:
        by_stem = {p.stem: p for p in list_images(masks)}
        truth = []
        for stem in ids:
            if stem not in by_stem:
                raise ValueError(f"no ground-truth mask for frame {stem} in {masks}")
            m = read_gray(by_stem[stem])
            if m.shape != frames[0].shape:
                raise ValueError(f"{by_stem[stem]}: mask size {m.shape} differs from frames")
            truth.append(m > 0.5)
        truth = np.array(truth, dtype=np.uint8)
    return Sequence(np.array(frames), ids, truth)


def load_masks(directory, ids=None):
    """Binary masks (value > 127) from a directory; optionally reordered by `ids`."""
    files = list_images(directory)
    by_stem = {p.stem: p for p in files}
    ids = ids if ids is not None else [p.stem for p in files]
    out = []
    for stem in ids:
        if stem not in by_stem:
            raise ValueError(f"no mask named {stem} in {directory}")
        out.append(read_gray(by_stem[stem]) > 0.5)
    return ids, np.array(out, dtype=np.uint8)


def write_frames(directory, ids, frames):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for stem, frame in zip(ids, frames):
        write_pgm(directory / f"{stem}.pgm", to_uint8(frame))


def write_masks(directory, ids, masks):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for stem, m in zip(ids, masks):
        write_pgm(directory / f"{stem}.pgm", np.where(m, 255, 0).astype(np.uint8))


def write_rescaled(directory, ids, frames, sidecar="scale.tsv"):
    """Write signed frames rescaled per frame; the [min, max] goes to `sidecar`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = ["frame\tmin\tmax"]
    for stem, frame in zip(ids, frames):
        img, lo, hi = rescale_uint8(frame)
        write_pgm(directory / f"{stem}.pgm", img)
        lines.append(f"{stem}\t{lo:.17g}\t{hi:.17g}")
    (directory / sidecar).write_text("\n".join(lines) + "\n")
