"""Evaluation measures shared by the CLI and the acceptance checks."""
from __future__ import annotations

import numpy as np

from .deformation import grid_coordinates
from .geometry import Intrinsics
from .synth import SyntheticSequence, lip_box, mouth_center
from .tensor import no_grad

PSNR_CAP = 99.0


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """Peak signal-to-noise ratio for images in [0,1]; identical inputs give ``PSNR_CAP``."""
    mse = float(np.mean((np.asarray(pred, np.float64) - np.asarray(gt, np.float64)) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def pearson(a, b) -> float:
    """Correlation coefficient; 0 when either series is constant."""
    a = np.asarray(a, np.float64) - np.mean(a)
    b = np.asarray(b, np.float64) - np.mean(b)
    den = np.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / den) if den > 0 else 0.0


def mouth_intensity(frames: np.ndarray, seq: SyntheticSequence) -> np.ndarray:
    """Mean intensity inside each frame's widest-opening lip box."""
    k = Intrinsics.default(frames.shape[-1])
    ident = seq.identity
    out = []
    for i, frame in enumerate(frames):
        x0, y0, x1, y1 = lip_box(ident, seq.pose(i), k, ident.max_aperture)
        r0, r1 = max(int(np.floor(y0)), 0), int(np.ceil(y1))
        c0, c1 = max(int(np.floor(x0)), 0), int(np.ceil(x1))
        out.append(float(frame[:, r0:r1, c0:c1].mean()))
    return np.array(out)


def heatmap_hits(model, seq: SyntheticSequence, source_index: int, tolerance: int = 1) -> np.ndarray:
    """Per frame: does the heatmap's brightest cell sit within ``tolerance``
    cells of the mouth center's projection onto the site grid?"""
    cfg = model.cfg
    hits = []
    with no_grad():
        ctx = model.prepare(seq.frames[source_index], seq.pose(source_index))
        for i in range(seq.n_frames):
            heat = model.heatmap(model.frame(ctx, seq.audio_window(i, cfg.audio_window)))
            row, col = np.unravel_index(int(np.argmax(heat)), heat.shape)
            rc = grid_coordinates(mouth_center(seq.identity), seq.pose(i), model.coarse_k, cfg.grid_size)
            hits.append(abs(row - np.rint(rc[0])) <= tolerance and abs(col - np.rint(rc[1])) <= tolerance)
    return np.array(hits, dtype=bool)
