"""Otsu detection on |S| and pixel-level precision / recall."""

from dataclasses import dataclass

import numpy as np

N_BINS = 256


class DegenerateHistogram(ValueError):
    pass


def _bin_index(values, top):
    # right-closed bins (k w, (k+1) w]; bin 0 also takes 0
    width = top / N_BINS
    edges = np.arange(1, N_BINS + 1) * width
    idx = np.searchsorted(edges, values, side="left")
    return np.minimum(idx, N_BINS - 1), width


def between_class_variance(counts, split):
    """Unnormalized Otsu criterion for classes ``bins <= split`` / ``bins > split``.

    Computed from integer counts and bin-index sums, so any route that
    arrives at the same integers gets the same float.
    """
    k = np.arange(N_BINS, dtype=np.int64)
    n0 = int(counts[:split + 1].sum())
    n1 = int(counts[split + 1:].sum())
    if n0 == 0 or n1 == 0:
        return 0.0
    s0 = int((counts[:split + 1] * k[:split + 1]).sum())
    s1 = int((counts[split + 1:] * k[split + 1:]).sum())
    diff = float(s0 * n1 - s1 * n0)
    return diff * diff / (float(n0) * float(n1))


def histogram(values):
    values = np.abs(np.asarray(values, dtype=np.float64).ravel())
    if values.size == 0 or not np.all(np.isfinite(values)):
        raise ValueError("otsu: values must be finite and non-empty")
    top = float(values.max())
    if top == 0.0 or values.min() == top:
        raise DegenerateHistogram("degenerate histogram")
    idx, width = _bin_index(values, top)
    return np.bincount(idx, minlength=N_BINS).astype(np.int64), width


def otsu_threshold(values):
    """Otsu threshold over a 256-bin histogram of [0, max(values)].

    Candidates are the 256 bin edges. Edges separated only by empty bins
    give the same split, so the split is chosen first (ties go to the lowest)
    and the returned edge sits in the middle of its run of empty bins.
    """
    counts, width = histogram(values)
    k = np.arange(N_BINS, dtype=np.int64)
    n0 = np.cumsum(counts)
    s0 = np.cumsum(counts * k)
    n1 = n0[-1] - n0
    s1 = s0[-1] - s0
    diff = (s0 * n1 - s1 * n0).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        score = np.where((n0 > 0) & (n1 > 0), diff * diff / (n0.astype(np.float64) * n1), 0.0)
    best = int(np.argmax(score))
    if score[best] <= 0:
        raise DegenerateHistogram("degenerate histogram")
    # first nonempty bin of the upper class
    upper = best + 1 + int(np.argmax(counts[best + 1:] > 0))
    return ((best + 1 + upper) // 2) * width


def detect(S):
    """Foreground mask ``|S| > t`` with one Otsu threshold t for the whole batch."""
    S = np.asarray(S, dtype=np.float64)
    t = otsu_threshold(S)
    return np.abs(S) > t, t


@dataclass
class EvalReport:
    threshold: object  # float, or None when unknown
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    def _ratio(self, num, den):
        return None if den == 0 else num / den

    @property
    def precision(self):
        """None when nothing was detected."""
        tp = int(self.tp.sum())
        return self._ratio(tp, tp + int(self.fp.sum()))

    @property
    def recall(self):
        """None when the ground truth is empty."""
        tp = int(self.tp.sum())
        return self._ratio(tp, tp + int(self.fn.sum()))

    @property
    def f1(self):
        tp, fp, fn = int(self.tp.sum()), int(self.fp.sum()), int(self.fn.sum())
        return self._ratio(2 * tp, 2 * tp + fp + fn)

    def frame_f1(self):
        den = 2 * self.tp + self.fp + self.fn
        return np.where(den > 0, 2 * self.tp / np.maximum(den, 1), np.nan)

    def rows(self):
        def fmt(v):
            return "undefined" if v is None else f"{v:.6f}"
        return [
            ("threshold", fmt(self.threshold)),
            ("precision", fmt(self.precision)),
            ("recall", fmt(self.recall)),
            ("f1", fmt(self.f1)),
            ("tp", str(int(self.tp.sum()))),
            ("fp", str(int(self.fp.sum()))),
            ("fn", str(int(self.fn.sum()))),
        ]


def evaluate(masks, truth, threshold=None):
    """Micro-averaged pixel counts over frames; inputs are (n, H, W) or (m, n)."""
    masks = np.asarray(masks).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if masks.shape != truth.shape:
        raise ValueError(f"mask shape {masks.shape} != truth shape {truth.shape}")
    if masks.ndim == 2:
        # matrix layout: one frame per column
        masks, truth = masks.T, truth.T
    axes = tuple(range(1, masks.ndim))
    tp = (masks & truth).sum(axis=axes)
    fp = (masks & ~truth).sum(axis=axes)
    fn = (~masks & truth).sum(axis=axes)
    return EvalReport(None if threshold is None else float(threshold), tp, fp, fn)
