"""Volume quality metrics and group-level reporting.

SSIM here uses a uniform (box) window slid over every fully-interior
position, population window statistics, and the usual two-term formula; the
choice is documented because SSIM values are only comparable between
implementations that agree on the window. PSNR uses a fixed peak (1.0 for
normalized volumes) so values are comparable across pairs. Confidence
intervals default to the normal 1.96 quantile with Student-t available as
an option.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .volume import Volume3D


def psnr(ref: Volume3D, test: Volume3D, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB: 10*log10(peak^2 / MSE).

    Returns +inf when the volumes are identical; callers treat that as a
    flag and keep it out of averaged statistics.
    """
    if ref.dims != test.dims:
        raise ShapeError(f"dims differ: {ref.dims} vs {test.dims}")
    if peak <= 0:
        raise ConfigError(f"peak must be positive, got {peak}")
    diff = ref.data.astype(np.float64) - test.data.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _box_sums(a: np.ndarray, w: int) -> np.ndarray:
    """Sum of every w^3 window of `a` (valid positions only), via an
    inclusion-exclusion over the 3D prefix-sum table."""
    nx, ny, nz = a.shape
    c = np.zeros((nx + 1, ny + 1, nz + 1), dtype=np.float64)
    c[1:, 1:, 1:] = a.cumsum(axis=0).cumsum(axis=1).cumsum(axis=2)
    return (
        c[w:, w:, w:]
        - c[:-w, w:, w:] - c[w:, :-w, w:] - c[w:, w:, :-w]
        + c[:-w, :-w, w:] + c[:-w, w:, :-w] + c[w:, :-w, :-w]
        - c[:-w, :-w, :-w]
    )


def ssim3d(ref: Volume3D, test: Volume3D, window: int = 7,
           k1: float = 0.01, k2: float = 0.03, peak: float = 1.0) -> float:
    """Mean structural similarity over all interior box windows."""
    if ref.dims != test.dims:
        raise ShapeError(f"dims differ: {ref.dims} vs {test.dims}")
    if window % 2 == 0 or window < 1:
        raise ConfigError(f"window must be odd and positive, got {window}")
    if window > min(ref.dims):
        raise ConfigError(f"window {window} exceeds smallest dim {min(ref.dims)}")
    x = ref.data.astype(np.float64)
    y = test.data.astype(np.float64)
    n = float(window**3)
    mu_x = _box_sums(x, window) / n
    mu_y = _box_sums(y, window) / n
    var_x = _box_sums(x * x, window) / n - mu_x * mu_x
    var_y = _box_sums(y * y, window) / n - mu_y * mu_y
    cov = _box_sums(x * y, window) / n - mu_x * mu_y
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def mean_ci95(values, quantile: str = "normal") -> tuple[float, float]:
    """Mean and half-width of the 95% interval for the mean: q * s / sqrt(n)
    with s the n-1 sample standard deviation.

    `quantile` is "normal" (1.96) or "t" (Student-t with n-1 dof).
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 2:
        raise ConfigError(f"need at least 2 values, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError("values must all be finite")
    mean = float(arr.mean())
    s = float(arr.std(ddof=1))
    if quantile == "normal":
        q = 1.96
    elif quantile == "t":
        from scipy.stats import t as t_dist

        q = float(t_dist.ppf(0.975, arr.size - 1))
    else:
        raise ConfigError(f"unknown quantile rule {quantile!r}")
    return mean, q * s / math.sqrt(arr.size)


def voxelwise_std_map(volumes) -> Volume3D:
    """Per-voxel population standard deviation across subjects."""
    volumes = list(volumes)
    if len(volumes) < 2:
        raise ConfigError(f"need at least 2 volumes, got {len(volumes)}")
    dims = volumes[0].dims
    for v in volumes:
        if v.dims != dims:
            raise ShapeError(f"dims differ: {v.dims} vs {dims}")
    stack = np.stack([v.data.astype(np.float64) for v in volumes])
    return Volume3D(stack.std(axis=0, ddof=0), volumes[0].spacing)


@dataclass
class PairRecord:
    pair_id: str
    group: str
    ssim: float
    psnr: float


@dataclass
class GroupStat:
    metric: str
    mean: float
    ci95_half: float | None  # None when the group is too small (NoCI)
    n: int
    n_excluded_infinite: int = 0


@dataclass
class MetricReport:
    records: list = field(default_factory=list)
    groups: dict = field(default_factory=dict)  # group -> {metric -> GroupStat}

    def group_names(self):
        return sorted(self.groups)

    def pair_csv(self) -> str:
        lines = ["pair_id,group,ssim,psnr"]
        for r in self.records:
            lines.append(f"{r.pair_id},{r.group},{r.ssim:.6f},{_fmt_psnr(r.psnr)}")
        return "\n".join(lines) + "\n"

    def aggregate_csv(self) -> str:
        lines = ["group,metric,mean,ci95_half,n"]
        for group in self.group_names():
            for metric in ("ssim", "psnr"):
                st = self.groups[group][metric]
                ci = "" if st.ci95_half is None else f"{st.ci95_half:.6f}"
                lines.append(f"{group},{metric},{st.mean:.6f},{ci},{st.n}")
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        """Fixed-layout summary: one row per group, SSIM and PSNR columns."""
        lines = [f"{'group':<10} {'SSIM':>20} {'PSNR (dB)':>22}"]
        for group in self.group_names():
            ssim_st = self.groups[group]["ssim"]
            psnr_st = self.groups[group]["psnr"]
            lines.append(
                f"{group:<10} {_fmt_stat(ssim_st):>20} {_fmt_stat(psnr_st):>22}"
            )
        return "\n".join(lines) + "\n"


def _fmt_psnr(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.6f}"


def _fmt_stat(st: GroupStat) -> str:
    if st.n == 0:
        return "no finite values"
    if st.ci95_half is None:
        return f"{st.mean:.3f} (n={st.n}, no CI)"
    return f"{st.mean:.3f} +/- {st.ci95_half:.3f}"


def evaluate_groups(pairs, window: int = 7, peak: float = 1.0,
                    quantile: str = "normal", warn=None) -> MetricReport:
    """Score (reference, synthesized) pairs and aggregate per group.

    `pairs` yields (pair_id, group, ref, synth) tuples. Groups with fewer
    than 2 usable values get a mean but no interval; infinite PSNR values
    are excluded from aggregation with a warning.
    """
    pairs = list(pairs)
    if not pairs:
        raise ConfigError("no pairs to evaluate")
    report = MetricReport()
    by_group: dict[str, list[PairRecord]] = {}
    for pair_id, group, ref, synth in pairs:
        rec = PairRecord(
            pair_id=str(pair_id),
            group=str(group),
            ssim=ssim3d(ref, synth, window=window, peak=peak),
            psnr=psnr(ref, synth, peak=peak),
        )
        report.records.append(rec)
        by_group.setdefault(rec.group, []).append(rec)

    for group, recs in by_group.items():
        stats = {}
        for metric in ("ssim", "psnr"):
            values = [getattr(r, metric) for r in recs]
            finite = [v for v in values if math.isfinite(v)]
            excluded = len(values) - len(finite)
            if excluded and warn is not None:
                warn(
                    f"group {group}: {excluded} infinite {metric} value(s) "
                    f"excluded from aggregation"
                )
            if len(finite) >= 2:
                mean, half = mean_ci95(finite, quantile=quantile)
                stats[metric] = GroupStat(metric, mean, half, len(finite), excluded)
            elif len(finite) == 1:
                stats[metric] = GroupStat(metric, finite[0], None, 1, excluded)
            else:
                stats[metric] = GroupStat(metric, math.nan, None, 0, excluded)
        report.groups[group] = stats
    return report


def write_pgm(path, slice2d: np.ndarray) -> None:
    """Write a 2-D array as an 8-bit binary PGM (P5), min-max scaled."""
    arr = np.asarray(slice2d, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"PGM slice must be 2-D, got shape {arr.shape}")
    lo, hi = float(arr.min()), float(arr.max())
    if hi > lo:
        scaled = (arr - lo) / (hi - lo) * 255.0
    else:
        scaled = np.zeros_like(arr)
    data = np.round(scaled).astype(np.uint8)
    height, width = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        f.write(data.tobytes())
