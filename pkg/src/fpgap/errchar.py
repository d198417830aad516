"""Floating-point error characterisation of the inference backends.

``local_sweep`` perturbs one input element over a tiny range and records
how far each backend's logits move; ``cross_backend_histogram`` bins the
relative difference of first-layer outputs against a reference backend.
Both write plain CSV.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .backends import Backend, first_layer_output, infer
from .core import Network, check_image

FD_STEP = 1e-3
SWEEP_RANGE = 1e-6
SWEEP_STEPS = 401
REL_FLOOR = 1e-6
HIST_LO, HIST_HI = -12, -2  # log10 range of the regular bins
BINS_PER_DECADE = 4


def max_gradient_element(net: Network, x: np.ndarray, h: float = FD_STEP) -> tuple:
    """Index of the input element with the largest ``|d max_logit / dx_i|``.

    Central differences in double precision on the largest logit at ``x``;
    ties go to the lowest flat index.
    """
    check_image(x, unit_range=False)
    xd = np.asarray(x, dtype=np.float64)
    k = int(np.argmax(infer(Backend.REF_F64, net, xd, check=False)))
    flat = xd.ravel()
    grads = np.empty(flat.size)
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += h
        minus[i] -= h
        yp = infer(Backend.REF_F64, net, plus.reshape(xd.shape), check=False)[k]
        ym = infer(Backend.REF_F64, net, minus.reshape(xd.shape), check=False)[k]
        grads[i] = (yp - ym) / (2 * h)
    mags = np.abs(grads)
    return np.unravel_index(int(np.argmax(mags)), xd.shape)


@dataclass(frozen=True)
class SweepRecord:
    delta: float
    backend: str
    linf_change: float


def sweep_deltas(steps: int = SWEEP_STEPS, radius: float = SWEEP_RANGE) -> np.ndarray:
    """Uniform grid over ``[-radius, radius]`` with exact zero in the middle."""
    if steps < 2 or steps % 2 == 0:
        raise ValueError("sweep needs an odd number of steps >= 3")
    half = (steps - 1) // 2
    return (np.arange(steps) - half) * (radius / half)


def local_sweep(net: Network, x: np.ndarray, element, radius: float = SWEEP_RANGE, steps: int = SWEEP_STEPS,
                backends=(Backend.REF_F64, Backend.DIRECT_F32, Backend.IM2COL_F32, Backend.PAIRWISE_F32,
                          Backend.WINOGRAD_F32)) -> list:
    """Logit change ``||NN(x + delta e_i) - NN(x)||_inf`` per backend over a delta grid.

    The offset is added in single precision and the result clamped to
    [0, 1]; double backends see the widened perturbed image.
    """
    x = np.asarray(x, dtype=np.float32)
    check_image(x)
    element = tuple(int(i) for i in element)
    x[element]  # raises IndexError for an invalid element
    backends = [Backend(b) for b in backends]
    base = {b: np.asarray(infer(b, net, _at(x, b), check=False), dtype=np.float64) for b in backends}
    records = []
    for d in sweep_deltas(steps, radius):
        xp = x.copy()
        xp[element] = np.clip(xp[element] + np.float32(d), np.float32(0), np.float32(1))
        for b in backends:
            y = np.asarray(infer(b, net, _at(xp, b), check=False), dtype=np.float64)
            records.append(SweepRecord(float(d), b.value, float(np.max(np.abs(y - base[b])))))
    return records


def _at(x: np.ndarray, backend: Backend) -> np.ndarray:
    return x.astype(np.float64) if backend is Backend.REF_F64 else x


@dataclass
class DiffHistogram:
    """Counts of relative differences per backend.

    ``edges`` are the log10-spaced regular bin edges.  Besides the regular
    bins there is a zero bin (exactly equal), an underflow bin for nonzero
    differences below the first edge and an overflow bin above the last.
    """

    edges: np.ndarray
    counts: dict  # backend value -> int array of len(edges) + 2 (zero, under, regular..., over)
    total: int

    def rows(self) -> list:
        """``(bin_lo, bin_hi, backend, count)`` rows in a fixed order."""
        lows = [0.0, 0.0] + list(self.edges[:-1]) + [self.edges[-1]]
        highs = [0.0, self.edges[0]] + list(self.edges[1:]) + [np.inf]
        out = []
        for b, counts in self.counts.items():
            for lo, hi, c in zip(lows, highs, counts):
                out.append((float(lo), float(hi), b, int(c)))
        return out

    def values_above(self, backend: str, threshold: float) -> int:
        """Number of compared elements whose bin lies entirely above ``threshold``."""
        return sum(c for lo, _, b, c in self.rows() if b == backend and lo >= threshold and lo > 0)


def relative_difference(a: np.ndarray, r: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    return np.abs(a - r) / np.maximum(np.abs(r), floor)


def histogram_edges() -> np.ndarray:
    n = (HIST_HI - HIST_LO) * BINS_PER_DECADE
    return 10.0 ** (HIST_LO + np.arange(n + 1) / BINS_PER_DECADE)


def bin_counts(rel: np.ndarray, edges: np.ndarray) -> np.ndarray:
    rel = np.asarray(rel, dtype=np.float64).ravel()
    counts = np.zeros(len(edges) + 2, dtype=np.int64)
    zero = rel == 0
    counts[0] = int(zero.sum())
    nz = rel[~zero]
    idx = np.searchsorted(edges, nz, side="right")  # 0 = below first edge, len(edges) = above last
    counts[1:] = np.bincount(idx, minlength=len(edges) + 1)
    return counts


def cross_backend_histogram(images, net: Network, backends, reference=Backend.IM2COL_F32) -> DiffHistogram:
    """Histogram of first-layer relative differences ``|a - r| / max(|r|, 1e-6)``."""
    images = list(images)
    if not images:
        raise ValueError("need at least one image")
    reference = Backend(reference)
    backends = [Backend(b) for b in backends]
    edges = histogram_edges()
    counts = {b.value: np.zeros(len(edges) + 2, dtype=np.int64) for b in backends}
    total = 0
    for x in images:
        x = np.asarray(x, dtype=np.float32)
        r = first_layer_output(reference, net, _at(x, reference))
        total += r.size
        for b in backends:
            a = first_layer_output(b, net, _at(x, b))
            counts[b.value] += bin_counts(relative_difference(a, r), edges)
    return DiffHistogram(edges, counts, total)


def median_relative_difference(images, net: Network, backend, reference=Backend.REF_F64) -> float:
    vals = []
    for x in images:
        x = np.asarray(x, dtype=np.float32)
        r = first_layer_output(reference, net, _at(x, reference))
        a = first_layer_output(backend, net, _at(x, Backend(backend)))
        vals.append(relative_difference(a, r).ravel())
    return float(np.median(np.concatenate(vals)))


def write_sweep_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["delta", "backend", "linf_change"])
        for r in records:
            w.writerow([repr(r.delta), r.backend, repr(r.linf_change)])


def write_histogram_csv(hist: DiffHistogram, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "backend", "count"])
        for lo, hi, b, c in hist.rows():
            w.writerow([repr(lo), repr(hi), b, c])
