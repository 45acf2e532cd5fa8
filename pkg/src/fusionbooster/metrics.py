"""
Fusion quality metrics: EN, SD, EI, Qabf and VIF.

All metrics work on the 0-255 intensity scale so their magnitudes are
comparable with the values usually reported for 8-bit images. Only EN
quantises (it needs a histogram); the others use the float values directly.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d, sobel

from .errors import ContractError
from .imaging import _same_shape, as_gray, load_image

__all__ = [
    "entropy",
    "std_dev",
    "edge_intensity",
    "qabf",
    "vif",
    "vif_details",
    "VifResult",
    "METRIC_COLUMNS",
    "MetricRow",
    "MetricReport",
    "evaluate",
    "compute_row",
    "delta_table",
]

METRIC_NAMES = ("en", "sd", "ei", "qabf", "vif")
METRIC_COLUMNS = ("id",) + METRIC_NAMES + ("boost_time",)

# Xydeas-Petrovic edge preservation constants
_GAMMA_G, _KAPPA_G, _SIGMA_G = 0.9994, -15.0, 0.5
_GAMMA_A, _KAPPA_A, _SIGMA_A = 0.9879, -22.0, 0.8

_VIF_SIGMA_N2 = 2.0
_VIF_EPS = 1e-10
_VIF_SCALES = 4
_VIF_WINDOW = 8


def _gauss11():
    x = np.arange(-5, 6, dtype=np.float64)
    k = np.exp(-x * x / (2 * 2.0 ** 2))
    return k / k.sum()


_VIF_KERNEL = _gauss11()


def entropy(img):
    """Shannon entropy in bits of the 256-bin histogram of ``round(v * 255)``."""
    q = np.floor(as_gray(img) * 255 + 0.5).astype(np.int64)
    hist = np.bincount(q.ravel(), minlength=256)
    p = hist[hist > 0] / q.size
    return float(-(p * np.log2(p)).sum()) + 0.0


def std_dev(img):
    """Population standard deviation of ``v * 255``."""
    return float(np.std(as_gray(img) * 255))


def _sobel(x):
    """Horizontal and vertical Sobel responses with replicate padding."""
    return sobel(x, axis=1, mode="nearest"), sobel(x, axis=0, mode="nearest")


def edge_intensity(img):
    """Mean Sobel gradient magnitude of ``v * 255``."""
    sx, sy = _sobel(as_gray(img) * 255)
    return float(np.hypot(sx, sy).mean())


def _strength_orientation(x):
    sx, sy = _sobel(x)
    g = np.hypot(sx, sy)
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.where(sx != 0, np.arctan(sy / np.where(sx != 0, sx, 1.0)), np.pi / 2)
    return g, alpha


def _edge_preservation(g_src, a_src, g_f, a_f):
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(g_src > g_f, g_f / g_src, np.where(g_f > g_src, g_src / g_f, 1.0))
    orient = 1 - np.abs(a_src - a_f) / (np.pi / 2)
    q_g = _GAMMA_G / (1 + np.exp(_KAPPA_G * (ratio - _SIGMA_G)))
    q_a = _GAMMA_A / (1 + np.exp(_KAPPA_A * (orient - _SIGMA_A)))
    return q_g * q_a


def qabf(a, b, f):
    """Xydeas-Petrovic gradient preservation, weighted by source edge strength.

    Orientation is ``arctan(Sy / Sx)``, with ``pi/2`` where ``Sx == 0``. When no
    source pixel has any gradient the result is 0.
    """
    a, b, f = as_gray(a, "I_A"), as_gray(b, "I_B"), as_gray(f, "F")
    _same_shape(("I_A", a), ("I_B", b), ("F", f))
    ga, aa = _strength_orientation(a * 255)
    gb, ab = _strength_orientation(b * 255)
    gf, af = _strength_orientation(f * 255)
    qa = _edge_preservation(ga, aa, gf, af)
    qb = _edge_preservation(gb, ab, gf, af)
    den = (ga + gb).sum()
    if den == 0:
        return 0.0
    return float((qa * ga + qb * gb).sum() / den)


@dataclass
class VifResult:
    value: float
    per_source: tuple
    scales: int
    flags: list = field(default_factory=list)


def _vif_smooth(x):
    return correlate1d(correlate1d(x, _VIF_KERNEL, axis=0, mode="reflect"), _VIF_KERNEL, axis=1, mode="reflect")


def _window_stats(x, f):
    nh, nw = x.shape[0] // _VIF_WINDOW, x.shape[1] // _VIF_WINDOW
    shape = (nh, _VIF_WINDOW, nw, _VIF_WINDOW)
    xb = x[: nh * _VIF_WINDOW, : nw * _VIF_WINDOW].reshape(shape)
    fb = f[: nh * _VIF_WINDOW, : nw * _VIF_WINDOW].reshape(shape)
    dx = xb - xb.mean(axis=(1, 3), keepdims=True)
    df = fb - fb.mean(axis=(1, 3), keepdims=True)
    return (dx * dx).mean(axis=(1, 3)), (df * df).mean(axis=(1, 3)), (dx * df).mean(axis=(1, 3))


def _vif_source(x, f):
    """Return ``(vif, scales_used)`` for one source against the fused image."""
    num = den = 0.0
    scales = 0
    for s in range(_VIF_SCALES):
        if s > 0:
            x = _vif_smooth(x)[::2, ::2]
            f = _vif_smooth(f)[::2, ::2]
        if min(x.shape) < _VIF_WINDOW:
            break
        scales += 1
        var_x, var_f, cov = _window_stats(x, f)
        g = cov / (var_x + _VIF_EPS)
        sv = var_f - g * cov
        neg = g < 0
        g[neg] = 0.0
        sv[neg] = var_f[neg]
        sv = np.maximum(sv, 0.0)
        num += np.log2(1 + g * g * var_x / (sv + _VIF_SIGMA_N2)).sum()
        den += np.log2(1 + var_x / _VIF_SIGMA_N2).sum()
    if den == 0:
        return None, scales
    return float(num / den), scales


def vif_details(a, b, f):
    """Pixel-domain multi-scale VIF of ``f`` against each source, with bookkeeping.

    Per scale, 8x8 non-overlapping windows give the gain ``g = cov / var_x`` and
    residual variance ``sv = var_f - g * cov``; a source's VIF is the ratio of
    summed ``log2(1 + g^2 var_x / (sv + 2))`` to summed ``log2(1 + var_x / 2)``.
    Between scales both images are smoothed (Gaussian, sigma 2, 11 taps) and
    decimated by 2. Negative gains are zeroed (``sv`` falls back to ``var_f``),
    and ``sv`` is floored at 0. A source with no variance scores 0 and is
    flagged.
    """
    a, b, f = as_gray(a, "I_A"), as_gray(b, "I_B"), as_gray(f, "F")
    _same_shape(("I_A", a), ("I_B", b), ("F", f))
    if min(f.shape) < 32:
        raise ContractError(f"VIF needs images of at least 32x32, got {f.shape}")
    per, flags, scales = [], [], _VIF_SCALES
    for name, x in (("I_A", a), ("I_B", b)):
        v, used = _vif_source(x * 255, f * 255)
        scales = min(scales, used)
        if v is None:
            flags.append(f"{name} has zero variance; VIF set to 0")
            v = 0.0
        per.append(v)
    if scales < _VIF_SCALES:
        flags.append(f"only {scales} of {_VIF_SCALES} scales fit the image")
    return VifResult(float(np.mean(per)), tuple(per), scales, flags)


def vif(a, b, f):
    """Mean of the two per-source VIF values. See :func:`vif_details`."""
    return vif_details(a, b, f).value


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class MetricRow:
    id: str
    en: float = math.nan
    sd: float = math.nan
    ei: float = math.nan
    qabf: float = math.nan
    vif: float = math.nan
    boost_time: float = math.nan
    vif_scales: int = 0
    error: str | None = None

    @property
    def failed(self):
        return self.error is not None


def compute_row(entry_id, a, b, f, boost_time=math.nan):
    details = vif_details(a, b, f)
    return MetricRow(entry_id, entropy(f), std_dev(f), edge_intensity(f), qabf(a, b, f),
                     details.value, boost_time, details.scales)


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)

    @property
    def ok_rows(self):
        return [r for r in self.rows if not r.failed]

    @property
    def status(self):
        if not self.rows:
            return "no data"
        return "failed" if any(r.failed for r in self.rows) else "ok"

    def aggregate(self):
        """Arithmetic mean of each column over rows that did not fail."""
        out = {}
        for name in METRIC_NAMES + ("boost_time",):
            vals = [getattr(r, name) for r in self.ok_rows if not math.isnan(getattr(r, name))]
            out[name] = float(np.mean(vals)) if vals else math.nan
        return out

    def total_time(self):
        return float(sum(r.boost_time for r in self.ok_rows if not math.isnan(r.boost_time)))

    def to_csv(self, path):
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(METRIC_COLUMNS)
            for r in self.rows:
                if r.failed:
                    w.writerow([r.id] + ["failed"] * (len(METRIC_COLUMNS) - 1))
                else:
                    w.writerow([r.id] + [_fmt(getattr(r, c)) for c in METRIC_COLUMNS[1:]])
            if self.ok_rows:
                agg = self.aggregate()
                w.writerow(["mean"] + [_fmt(agg[c]) for c in METRIC_COLUMNS[1:]])

    def summary(self):
        """``metric=mean`` lines plus counts and status."""
        agg = self.aggregate()
        lines = [f"{k}={_fmt(v)}" for k, v in agg.items()]
        lines.append(f"pairs={len(self.rows)}")
        lines.append(f"failed={sum(r.failed for r in self.rows)}")
        lines.append(f"status={self.status}")
        return "\n".join(lines)


def evaluate(manifest, times=None):
    """Score ``path_fused`` of every manifest entry against its two sources.

    Rows come out sorted by id. An entry that cannot be loaded or scored is
    kept as a failed row and the rest of the run continues.
    """
    times = times or {}
    rows = []
    for e in sorted(manifest.entries, key=lambda e: e.id):
        try:
            if e.path_fused is None:
                raise ContractError("no fused image")
            a, b, f = load_image(e.path_a), load_image(e.path_b), load_image(e.path_fused)
            rows.append(compute_row(e.id, a, b, f, times.get(e.id, math.nan)))
        except (OSError, ValueError) as exc:
            rows.append(MetricRow(e.id, error=str(exc)))
    return MetricReport(rows)


def delta_table(before, after):
    """Per-pair ``after - before`` for each metric, plus the fraction of pairs improved.

    Returns ``(rows, improved)``. Only ids that succeeded in both reports are
    compared.
    """
    prior = {r.id: r for r in before.ok_rows}
    rows = []
    for r in after.ok_rows:
        if r.id in prior:
            rows.append({"id": r.id, **{m: getattr(r, m) - getattr(prior[r.id], m) for m in METRIC_NAMES}})
    improved = {m: (sum(row[m] > 0 for row in rows) / len(rows) if rows else math.nan) for m in METRIC_NAMES}
    return rows, improved
