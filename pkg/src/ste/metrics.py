"""PSNR and SSIM on [0,1] images, plus directory-level evaluation."""

from __future__ import annotations

import os

import numpy as np

from .errors import InvalidArgumentError
from .image import read_png, validate_image

PSNR_CAP = 99.0
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_SIGMA = 1.5
SSIM_RADIUS = 3          # 7x7 window


def psnr(a, b):
    """10*log10(1/MSE) on [0,1] range, capped at 99 dB for near-identical inputs."""
    a = validate_image(a)
    b = validate_image(b)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def _to_gray(img):
    if img.shape[2] == 3:
        return (0.299 * img[:, :, 0] + 0.587 * img[:, :, 1] + 0.114 * img[:, :, 2])
    return img[:, :, 0]


def _window_filter(x):
    """7x7 truncated Gaussian (sigma=1.5), reflect boundary."""
    xs = np.arange(-SSIM_RADIUS, SSIM_RADIUS + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / SSIM_SIGMA) ** 2)
    k /= k.sum()
    out = x.astype(np.float64)
    for axis in (0, 1):
        pad = [(0, 0), (0, 0)]
        pad[axis] = (SSIM_RADIUS, SSIM_RADIUS)
        padded = np.pad(out, pad, mode="reflect")
        acc = np.zeros_like(out)
        for i, w in enumerate(k):
            sl = [slice(None)] * 2
            sl[axis] = slice(i, i + out.shape[axis])
            acc += w * padded[tuple(sl)]
        out = acc
    return out


def ssim(a, b):
    """Mean local SSIM over a 7x7 Gaussian window, L=1."""
    a = validate_image(a)
    b = validate_image(b)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch {a.shape} vs {b.shape}")
    x = _to_gray(a.astype(np.float64))
    y = _to_gray(b.astype(np.float64))
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    mu_x = _window_filter(x)
    mu_y = _window_filter(y)
    var_x = _window_filter(x * x) - mu_x ** 2
    var_y = _window_filter(y * y) - mu_y ** 2
    cov = _window_filter(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def evaluate_pairs_dir(pairs_dir):
    """Mean PSNR/SSIM over {id}_pred.png / {id}_gt.png pairs plus per-image rows.

    Returns (rows, summary): rows are (id, psnr, ssim) sorted by id.
    """
    preds = {}
    gts = {}
    for name in sorted(os.listdir(pairs_dir)):
        if name.endswith("_pred.png"):
            preds[name[:-9]] = os.path.join(pairs_dir, name)
        elif name.endswith("_gt.png"):
            gts[name[:-7]] = os.path.join(pairs_dir, name)
    if not preds and not gts:
        raise InvalidArgumentError(f"no prediction/ground-truth pairs found in {pairs_dir}")
    unmatched = sorted(set(preds) ^ set(gts))
    if unmatched:
        raise InvalidArgumentError(f"unmatched pair ids: {', '.join(unmatched)}")
    rows = []
    for pid in sorted(preds):
        p = read_png(preds[pid])
        g = read_png(gts[pid])
        rows.append((pid, psnr(p, g), ssim(p, g)))
    summary = {
        "mean_psnr": float(np.mean([r[1] for r in rows])),
        "mean_ssim": float(np.mean([r[2] for r in rows])),
        "fid": "not computed",
        "count": len(rows),
    }
    return rows, summary


def write_report(rows, summary, out_path):
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write("id,psnr,ssim\n")
        for pid, p, s in rows:
            fh.write(f"{pid},{p:.6f},{s:.6f}\n")
        fh.write(f"mean,{summary['mean_psnr']:.6f},{summary['mean_ssim']:.6f}\n")
        fh.write(f"# FID: {summary['fid']}\n")
