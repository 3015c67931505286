"""Hot inner loops, compiled with numba when available.

Set ``MLMP_DISABLE_NUMBA=1`` to force the pure-numpy implementations.
Both paths produce identical results; ``benchmarks/bench_kernels.py``
compares their speed.
"""

import os

import numpy as np

_DISABLED = os.environ.get("MLMP_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    if _DISABLED:
        raise ImportError("numba disabled by MLMP_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# confusion matrix accumulation
# ---------------------------------------------------------------------------


def confusion_counts_numpy(label, pred, num_classes, ignore_index=255):
    label = np.asarray(label).ravel().astype(np.int64)
    pred = np.asarray(pred).ravel().astype(np.int64)
    keep = label != ignore_index
    idx = label[keep] * num_classes + pred[keep]
    counts = np.bincount(idx, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes).astype(np.int64)


def _confusion_counts_loop(label, pred, num_classes, ignore_index):
    out = np.zeros((num_classes, num_classes), dtype=np.int64)
    for i in range(label.shape[0]):
        t = label[i]
        if t == ignore_index:
            continue
        out[t, pred[i]] += 1
    return out


# ---------------------------------------------------------------------------
# glass blur local pixel shuffling
# ---------------------------------------------------------------------------


def _glass_shuffle_loop(img, offsets, max_delta):
    # offsets: (iterations, n_sites, 2) of (dy, dx); sites visited bottom-right
    # to top-left, each swapping with its displaced neighbour in place.
    height = img.shape[0]
    width = img.shape[1]
    channels = img.shape[2]
    for it in range(offsets.shape[0]):
        k = 0
        for h in range(height - max_delta, max_delta, -1):
            for w in range(width - max_delta, max_delta, -1):
                hp = h + offsets[it, k, 0]
                wp = w + offsets[it, k, 1]
                k += 1
                for c in range(channels):
                    tmp = img[h, w, c]
                    img[h, w, c] = img[hp, wp, c]
                    img[hp, wp, c] = tmp
    return img


def glass_shuffle_numpy(img, offsets, max_delta):
    """Reference path; the swaps are order-dependent so this stays a Python loop."""
    img = np.array(img, copy=True)
    offs = offsets.tolist()
    height, width = img.shape[:2]
    for it in range(len(offs)):
        k = 0
        row = offs[it]
        for h in range(height - max_delta, max_delta, -1):
            for w in range(width - max_delta, max_delta, -1):
                dy, dx = row[k]
                k += 1
                hp, wp = h + dy, w + dx
                a = img[h, w].copy()
                img[h, w] = img[hp, wp]
                img[hp, wp] = a
    return img


if HAVE_NUMBA:
    _confusion_counts_jit = njit(cache=False, nogil=True)(_confusion_counts_loop)
    _glass_shuffle_jit = njit(cache=False, nogil=True)(_glass_shuffle_loop)

    def confusion_counts_numba(label, pred, num_classes, ignore_index=255):
        label = np.ascontiguousarray(np.asarray(label).ravel(), dtype=np.int64)
        pred = np.ascontiguousarray(np.asarray(pred).ravel(), dtype=np.int64)
        return _confusion_counts_jit(label, pred, int(num_classes), int(ignore_index))

    def glass_shuffle_numba(img, offsets, max_delta):
        img = np.array(img, copy=True, order="C")
        offsets = np.ascontiguousarray(offsets, dtype=np.int64)
        return _glass_shuffle_jit(img, offsets, int(max_delta))

    confusion_counts = confusion_counts_numba
    glass_shuffle = glass_shuffle_numba
else:
    confusion_counts_numba = None
    glass_shuffle_numba = None
    confusion_counts = confusion_counts_numpy
    glass_shuffle = glass_shuffle_numpy


def glass_sites(height, width, max_delta):
    """Number of pixel sites visited per glass-blur iteration."""
    return max(0, height - 2 * max_delta) * max(0, width - 2 * max_delta)


def backend():
    return "numba" if HAVE_NUMBA else "numpy"
