"""Video-prediction quality metrics.

Reporting conventions fixed here: per-frame MSE is the mean over all
elements (pixels and channels); PSNR is capped so identical frames stay
finite; SSIM uses the standard local Gaussian window with the usual
constants; CSI counts values at or above the threshold as positive
events and returns 1.0 when no positives exist anywhere.
"""
import dataclasses

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ContractError, ShapeError


def _pair(pred, truth):
    a = np.asarray(pred, np.float64)
    b = np.asarray(truth, np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"frame shapes differ: {a.shape} vs {b.shape}")
    return a, b


def frame_mse(pred, truth):
    """Mean squared error over all pixels and channels."""
    a, b = _pair(pred, truth)
    return float(np.mean((a - b) ** 2))


def psnr(pred, truth, max_val=1.0, cap=100.0):
    """Peak signal-to-noise ratio in dB, capped for near-identical frames."""
    mse = frame_mse(pred, truth)
    floor = max_val * max_val * 10.0 ** (-cap / 10.0)
    if mse <= floor:
        return float(cap)
    return float(10.0 * np.log10(max_val * max_val / mse))


def gaussian_window(window=11, sigma=1.5):
    """Normalized 2-D Gaussian weighting kernel."""
    if window < 1 or sigma <= 0.0:
        raise ContractError("window must be >= 1 and sigma positive")
    ax = np.arange(window, dtype=np.float64) - (window - 1) / 2.0
    g = np.exp(-(ax * ax) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def _ssim_plane(a, b, kernel, c1, c2):
    win = kernel.shape[0]
    pa = sliding_window_view(a, (win, win))
    pb = sliding_window_view(b, (win, win))
    axes = ([2, 3], [0, 1])
    mu_a = np.tensordot(pa, kernel, axes=axes)
    mu_b = np.tensordot(pb, kernel, axes=axes)
    var_a = np.tensordot(pa * pa, kernel, axes=axes) - mu_a * mu_a
    var_b = np.tensordot(pb * pb, kernel, axes=axes) - mu_b * mu_b
    cov = np.tensordot(pa * pb, kernel, axes=axes) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(pred, truth, window=11, sigma=1.5, k1=0.01, k2=0.03, L=1.0):
    """Structural similarity, averaged over valid window positions.

    Accepts [H, W] or [C, H, W]; multichannel input is averaged per
    channel.
    """
    a, b = _pair(pred, truth)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ShapeError(f"expected 2-D or 3-D frames, got rank {a.ndim}")
    if a.shape[1] < window or a.shape[2] < window:
        raise ContractError(
            f"frame {a.shape[1]}x{a.shape[2]} smaller than window {window}")
    kernel = gaussian_window(window, sigma)
    c1 = (k1 * L) ** 2
    c2 = (k2 * L) ** 2
    vals = [_ssim_plane(a[c], b[c], kernel, c1, c2) for c in range(a.shape[0])]
    return float(np.mean(vals))


def csi(pred, truth, threshold):
    """Critical success index: TP / (TP + FN + FP) after binarizing."""
    a, b = _pair(pred, truth)
    pa = a >= threshold
    pb = b >= threshold
    tp = int(np.sum(pa & pb))
    fn = int(np.sum(~pa & pb))
    fp = int(np.sum(pa & ~pb))
    denom = tp + fn + fp
    if denom == 0:
        return 1.0
    return tp / denom


def _fmt_threshold(th):
    return f"{th:g}"


@dataclasses.dataclass
class MetricReport:
    """Per-forecast-timestep metric curves plus averaged summaries."""
    mse: list
    psnr: list
    ssim: list
    csi: dict  # threshold -> per-timestep list

    def __post_init__(self):
        n = len(self.mse)
        if n < 1:
            raise ContractError("report needs at least one timestep")
        if len(self.psnr) != n or len(self.ssim) != n:
            raise ContractError("per-timestep lists must have equal length")
        for th, vals in self.csi.items():
            if len(vals) != n:
                raise ContractError(
                    f"csi@{_fmt_threshold(th)} length {len(vals)} != {n}")
            if any(v < 0.0 or v > 1.0 for v in vals):
                raise ContractError("csi values must lie in [0, 1]")
        if any(v < -1.0 or v > 1.0 for v in self.ssim):
            raise ContractError("ssim values must lie in [-1, 1]")

    @property
    def horizon(self):
        return len(self.mse)

    @property
    def mean_mse(self):
        return float(np.mean(self.mse))

    @property
    def mean_psnr(self):
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self):
        return float(np.mean(self.ssim))

    @property
    def mean_csi(self):
        return {th: float(np.mean(v)) for th, v in self.csi.items()}

    def summary(self):
        out = {"mse": self.mean_mse, "psnr": self.mean_psnr,
               "ssim": self.mean_ssim}
        for th, v in self.mean_csi.items():
            out[f"csi@{_fmt_threshold(th)}"] = v
        return out

    def to_csv(self):
        heads = ["t", "mse", "psnr", "ssim"]
        heads += [f"csi@{_fmt_threshold(th)}" for th in self.csi]
        lines = [",".join(heads)]
        for i in range(self.horizon):
            row = [str(i + 1), f"{self.mse[i]:.8f}", f"{self.psnr[i]:.6f}",
                   f"{self.ssim[i]:.8f}"]
            row += [f"{self.csi[th][i]:.8f}" for th in self.csi]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"


def compute_report(pred, truth, thresholds=(), window=11, sigma=1.5):
    """Batched per-timestep report.

    Both inputs are [batch, steps, channels, height, width]; each metric
    is computed per sequence and averaged over the batch, timestep by
    timestep.
    """
    a, b = _pair(pred, truth)
    if a.ndim != 5:
        raise ShapeError("expected [batch, steps, channels, height, width]")
    n, steps = a.shape[0], a.shape[1]
    if n < 1 or steps < 1:
        raise ContractError("need at least one sequence and one timestep")
    mse_t, psnr_t, ssim_t = [], [], []
    csi_t = {float(th): [] for th in thresholds}
    for t in range(steps):
        mse_t.append(float(np.mean([frame_mse(a[i, t], b[i, t])
                                    for i in range(n)])))
        psnr_t.append(float(np.mean([psnr(a[i, t], b[i, t])
                                     for i in range(n)])))
        ssim_t.append(float(np.mean([ssim(a[i, t], b[i, t], window=window,
                                          sigma=sigma) for i in range(n)])))
        for th in csi_t:
            csi_t[th].append(float(np.mean([csi(a[i, t], b[i, t], th)
                                            for i in range(n)])))
    return MetricReport(mse=mse_t, psnr=psnr_t, ssim=ssim_t, csi=csi_t)
