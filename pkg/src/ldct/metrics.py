"""PSNR / SSIM and their fixed-range variants, plus aggregate reports.

The windowed SSIM core works on torch tensors so that the training loss and
the evaluation metric share one implementation.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DataError

PSNR_INF = math.inf  # sentinel for identical images
WINDOW = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03


@dataclass(frozen=True)
class SsimParams:
    data_range: float = 1.0
    window: int = WINDOW
    sigma: float = SIGMA
    k1: float = K1
    k2: float = K2


def gaussian_window(size=WINDOW, sigma=SIGMA, dtype=torch.float64):
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(x ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_map(pred, gt, data_range, params=SsimParams()):
    """SSIM index over all valid windows; inputs shaped (B, 1, H, W).

    ``data_range`` may be a float or a tensor broadcastable to (B, 1, 1, 1).
    """
    w = gaussian_window(params.window, params.sigma, pred.dtype).to(pred.device)[None, None]
    c1 = (params.k1 * data_range) ** 2
    c2 = (params.k2 * data_range) ** 2
    mu_x = F.conv2d(pred, w)
    mu_y = F.conv2d(gt, w)
    xx = F.conv2d(pred * pred, w) - mu_x * mu_x
    yy = F.conv2d(gt * gt, w) - mu_y * mu_y
    xy = F.conv2d(pred * gt, w) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
    return num / den


def batch_ssim(pred, gt, data_range=1.0, params=SsimParams()):
    """Per-image mean SSIM, shape (B,)."""
    if pred.shape[-1] < params.window or pred.shape[-2] < params.window:
        raise DataError(f"image smaller than the {params.window}x{params.window} SSIM window")
    return ssim_map(pred, gt, data_range, params).mean(dim=(1, 2, 3))


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DataError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return pred, gt


def psnr(pred, gt, data_range):
    if not data_range > 0:
        raise ConfigError("PSNR range must be positive")
    pred, gt = _pair(pred, gt)
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0:
        return PSNR_INF
    return 10.0 * math.log10(data_range ** 2 / mse)


def ssim(pred, gt, params=SsimParams()):
    if not params.data_range > 0:
        raise ConfigError("SSIM range must be positive")
    pred, gt = _pair(pred, gt)
    if pred.ndim != 2:
        raise DataError("ssim expects 2-D images")
    p = torch.from_numpy(pred)[None, None]
    g = torch.from_numpy(gt)[None, None]
    return float(batch_ssim(p, g, params.data_range, params)[0])


def gt_range(gt):
    gt = np.asarray(gt, dtype=np.float64)
    return float(gt.max() - gt.min())


def metrics_fr(pred, gt, fixed_range=1.0):
    if not fixed_range > 0:
        raise ConfigError("fixed range must be positive")
    return psnr(pred, gt, fixed_range), ssim(pred, gt, SsimParams(data_range=fixed_range))


METRIC_NAMES = ("psnr", "ssim", "psnr_fr", "ssim_fr")


@dataclass
class MetricsRow:
    id: str
    psnr: float
    ssim: float
    psnr_fr: float
    ssim_fr: float
    flagged: str = ""


def image_metrics(pid, pred, gt, fixed_range=1.0):
    """All four metrics for one image; a constant ground truth flags the row."""
    p_fr, s_fr = metrics_fr(pred, gt, fixed_range)
    r = gt_range(gt)
    if r <= 0:
        return MetricsRow(pid, math.nan, math.nan, p_fr, s_fr, flagged="constant ground truth")
    return MetricsRow(pid, psnr(pred, gt, r), ssim(pred, gt, SsimParams(data_range=r)), p_fr, s_fr)


def _mean_std(values):
    a = np.asarray(values, dtype=np.float64)
    if a.size == 0:
        return None
    if np.isinf(a).any():
        return (PSNR_INF, math.nan)
    return (float(a.mean()), float(a.std()))


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)
    fixed_range: float = 1.0

    @property
    def range_policy(self):
        return {"psnr": "gt max-min", "ssim": "gt max-min",
                "psnr_fr": f"fixed {self.fixed_range}", "ssim_fr": f"fixed {self.fixed_range}"}

    def aggregates(self):
        """{metric: (mean, std)}; flagged rows only count toward the FR metrics."""
        out = {}
        for name in METRIC_NAMES:
            vals = [getattr(r, name) for r in self.rows
                    if not (r.flagged and name in ("psnr", "ssim"))]
            agg = _mean_std(vals)
            if agg is not None:
                out[name] = agg
        return out

    def mean(self, name):
        return self.aggregates()[name][0]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", *METRIC_NAMES, "flagged"])
        for r in self.rows:
            w.writerow([r.id, *(_fmt(getattr(r, m)) for m in METRIC_NAMES), r.flagged])
        return buf.getvalue()

    def to_table(self, title="Metrics"):
        aggs = self.aggregates()
        lines = [title, "-" * len(title)]
        for name in METRIC_NAMES:
            if name in aggs:
                lines.append(f"{name.upper().replace('_', '-'):8s} {format_mean_std(*aggs[name])}")
        lines.append(f"images: {len(self.rows)}; range policy: {self.range_policy}")
        return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return repr(float(v))


def format_mean_std(mean, std, digits=4):
    if math.isinf(mean):
        return "inf"
    return f"{mean:.{digits}f} ± {std:.{digits}f}"
