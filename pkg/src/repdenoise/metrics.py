"""Image quality metrics: NRMSE (%), PSNR (dB), SSIM on magnitudes, and normalized
residual variance (NRV). Metrics take an optional support mask."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass

import numpy as np
import scipy.ndimage as ndi

from .errors import DimensionError, UndefinedMetricError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

CSV_COLUMNS = ("case", "method", "nrmse_pct", "ssim", "psnr_db", "nrv")


def _pair(xhat, ref, mask=None):
    a, b = np.asarray(xhat), np.asarray(ref)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, bool), a.shape)
        a, b = a[mask], b[mask]
    return a, b


def nrmse(xhat, ref, mask=None) -> float:
    """``100 * ||xhat - ref|| / ||ref||`` on complex values."""
    a, b = _pair(xhat, ref, mask)
    den = np.linalg.norm(b)
    if den == 0:
        raise UndefinedMetricError("NRMSE is undefined for a zero reference")
    return float(100.0 * np.linalg.norm(a - b) / den)


def psnr(xhat, ref, mask=None) -> float:
    """``10 log10(peak^2 / MSE)`` with ``peak = max|ref|``; identical images give ``inf``."""
    a, b = _pair(xhat, ref, mask)
    mse = np.mean(np.abs(a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(np.max(np.abs(b)) ** 2 / mse))


def _gauss_filter(x: np.ndarray) -> np.ndarray:
    # truncate so the kernel spans exactly 11 x 11 taps
    return ndi.gaussian_filter(x, SSIM_SIGMA, mode="reflect", truncate=(SSIM_WINDOW // 2) / SSIM_SIGMA)


def ssim_map(xhat, ref) -> np.ndarray:
    a, b = _pair(np.abs(xhat), np.abs(ref))
    a, b = a.astype(float), b.astype(float)
    rng = np.max(b) if np.max(b) > 0 else np.max(a)
    c1 = (SSIM_K1 * rng) ** 2
    c2 = (SSIM_K2 * rng) ** 2
    mu_a, mu_b = _gauss_filter(a), _gauss_filter(b)
    va = _gauss_filter(a * a) - mu_a**2
    vb = _gauss_filter(b * b) - mu_b**2
    cov = _gauss_filter(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (va + vb + c2)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = num / den
    return np.where(den == 0, 1.0, out)


def ssim(xhat, ref, mask=None) -> float:
    """Mean local SSIM of the magnitude images (Gaussian 11x11 window, sigma 1.5).

    The dynamic range is ``max|ref|``; a pair of all-zero images scores 1.
    """
    a, b = np.abs(np.asarray(xhat)), np.abs(np.asarray(ref))
    if not np.any(a) and not np.any(b):
        return 1.0
    smap = ssim_map(a, b)
    if mask is not None:
        smap = smap[np.broadcast_to(np.asarray(mask, bool), smap.shape)]
    return float(np.mean(smap))


def nrv(y_noisy, xhat, sigma, mask=None) -> float:
    """``1/(N-1) sum |(y - xhat) / sigma|^2`` over the support."""
    y, x = _pair(y_noisy, xhat)
    s = np.asarray(sigma, float)
    if s.shape != y.shape:
        raise DimensionError("noise map does not match the images")
    if mask is None:
        mask = np.ones(y.shape, bool)
    mask = np.asarray(mask, bool)
    if np.any(s[mask] <= 0):
        raise UndefinedMetricError("noise map is zero inside the support")
    r = (y[mask] - x[mask]) / s[mask]
    n = r.size
    if n < 2:
        raise UndefinedMetricError("NRV needs at least two pixels")
    return float(np.sum(np.abs(r) ** 2) / (n - 1))


@dataclass
class MetricsRow:
    case: str
    method: str
    nrmse_pct: float
    ssim: float
    psnr_db: float
    nrv: float


def evaluate(case: str, method: str, xhat, ref, y_noisy=None, sigma=None, mask=None) -> MetricsRow:
    """All four metrics for one image; NRV is NaN without a noisy input and map."""
    value = nrv(y_noisy, xhat, sigma, mask) if y_noisy is not None and sigma is not None else math.nan
    return MetricsRow(case, method, nrmse(xhat, ref, mask), ssim(xhat, ref, mask), psnr(xhat, ref, mask), value)


def summarize(rows: list[MetricsRow], method: str | None = None) -> MetricsRow:
    """Mean over cases (PSNR averaged in dB)."""
    pick = [r for r in rows if method is None or r.method == method]
    if not pick:
        raise UndefinedMetricError("no rows to summarize")

    def mean(attr):
        return float(np.mean([getattr(r, attr) for r in pick]))

    return MetricsRow("mean", method or "all", mean("nrmse_pct"), mean("ssim"), mean("psnr_db"), mean("nrv"))


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if math.isnan(v):
            return "nan"
        return f"{v:.6f}"
    return str(v)


def rows_to_csv(rows: list[MetricsRow], with_summary: bool = True) -> str:
    """Per-case rows followed by one aggregate row per method."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    out = list(rows)
    if with_summary and rows:
        for method in dict.fromkeys(r.method for r in rows):
            out.append(summarize(rows, method))
    for r in out:
        w.writerow([_fmt(v) for v in asdict(r).values()])
    return buf.getvalue()
