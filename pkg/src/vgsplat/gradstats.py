"""Per-Gaussian colour-gradient statistics and the densification decision rule.

Two streaming estimators are provided:

* ``recursive``: the mean/variance update with step 1/n applied in a
  fixed pixel order.  With the n=0 -> 1 step taken as (mean=g, var=0) the
  recursion reproduces the Bessel-corrected sample variance.
* ``exact``: Welford updates with Chan's pairwise merge, reporting the
  population variance m2/n.  Partial results merge in any order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MODES = ("recursive", "exact")
VISIBLE_WEIGHT = 1.0 / 255.0


@dataclass(frozen=True)
class StreamStat:
    n: int = 0
    mean: float = 0.0
    var: float = 0.0
    m2: float = 0.0

    @property
    def population_var(self) -> float:
        return self.m2 / self.n if self.n else 0.0


def stream_update_recursive(stat: StreamStat, g: float) -> StreamStat:
    if not math.isfinite(g):
        raise ValueError(f"non-finite gradient sample {g!r}")
    if stat.n == 0:
        return StreamStat(1, float(g), 0.0, 0.0)
    n = stat.n
    beta_next = 1.0 / (n + 1)
    beta_cur = 1.0 / n
    d = g - stat.mean
    var = (1.0 - beta_cur) * stat.var + beta_next * d * d
    return StreamStat(n + 1, stat.mean + beta_next * d, var, 0.0)


def stream_update_exact(stat: StreamStat, g: float) -> StreamStat:
    if not math.isfinite(g):
        raise ValueError(f"non-finite gradient sample {g!r}")
    n = stat.n + 1
    d = g - stat.mean
    mean = stat.mean + d / n
    m2 = stat.m2 + d * (g - mean)
    return StreamStat(n, mean, m2 / n, m2)


def merge_exact(a: StreamStat, b: StreamStat) -> StreamStat:
    if a.n == 0:
        return b
    if b.n == 0:
        return a
    n = a.n + b.n
    d = b.mean - a.mean
    mean = a.mean + d * (b.n / n)
    m2 = a.m2 + b.m2 + d * d * (a.n * b.n / n)
    return StreamStat(n, mean, m2 / n, m2)


def stream(values, mode: str = "recursive") -> StreamStat:
    update = stream_update_recursive if mode == "recursive" else stream_update_exact
    stat = StreamStat()
    for g in values:
        stat = update(stat, float(g))
    return stat


class GradAccum:
    """Accumulators for N Gaussians, carried across the views of one densification interval.

    The ``live_*`` arrays hold the per-view, per-channel stream and are folded
    into ``variance_sum`` by :meth:`finalize_view`.
    """

    def __init__(self, n: int, mode: str = "recursive"):
        if mode not in MODES:
            raise ValueError(f"unknown estimator mode {mode!r}; expected one of {MODES}")
        self.mode = mode
        self.reset(n)

    def reset(self, n: int | None = None) -> None:
        n = self.n if n is None else int(n)
        self.ndc_grad_norm_sum = np.zeros(n)
        self.view_count = np.zeros(n, dtype=np.int64)
        self.variance_sum = np.zeros(n)
        self.channel_var_sum = np.zeros((n, 3))
        self.max_radii = np.zeros(n)
        self.live_n = np.zeros(n, dtype=np.int64)
        self.live_mean = np.zeros((n, 3))
        self.live_var = np.zeros((n, 3))
        self.live_m2 = np.zeros((n, 3))
        self._finalized = np.zeros(n, dtype=bool)

    @property
    def n(self) -> int:
        return len(self.view_count)

    def __len__(self) -> int:
        return self.n

    def keep(self, mask_or_idx) -> None:
        """Restrict every per-Gaussian array to the given survivors."""
        for name in ("ndc_grad_norm_sum", "view_count", "variance_sum", "channel_var_sum", "max_radii",
                     "live_n", "live_mean", "live_var", "live_m2", "_finalized"):
            setattr(self, name, getattr(self, name)[mask_or_idx])

    def begin_view(self) -> None:
        self.clear_live()
        self._finalized[:] = False

    def clear_live(self) -> None:
        self.live_n[:] = 0
        self.live_mean[:] = 0.0
        self.live_var[:] = 0.0
        self.live_m2[:] = 0.0

    def channel_variance(self, k=slice(None)) -> np.ndarray:
        if self.mode == "recursive":
            return self.live_var[k]
        n = self.live_n[k]
        with np.errstate(invalid="ignore", divide="ignore"):
            var = self.live_m2[k] / np.asarray(n)[..., None]
        return np.where(np.asarray(n)[..., None] > 0, var, 0.0)

    def finalize_view(self, k: int, ndc_grad) -> None:
        """Fold Gaussian ``k``'s live per-view statistics into the interval sums."""
        if self._finalized[k]:
            raise RuntimeError(f"Gaussian {k} already finalized in this view")
        var = self.channel_variance(k)
        self.variance_sum[k] += var[0] + var[1] + var[2]
        self.channel_var_sum[k] += var
        self.ndc_grad_norm_sum[k] += np.hypot(ndc_grad[0], ndc_grad[1])
        self.view_count[k] += 1
        self._finalized[k] = True
        self.live_n[k] = 0
        self.live_mean[k] = 0.0
        self.live_var[k] = 0.0
        self.live_m2[k] = 0.0

    def finalize_visible(self, visible: np.ndarray, ndc_grads: np.ndarray) -> None:
        """Vectorized :meth:`finalize_view` over a visibility mask, then drop all live state."""
        idx = np.flatnonzero(visible)
        if np.any(self._finalized[idx]):
            raise RuntimeError("double finalization within one view")
        var = self.channel_variance(idx)
        self.variance_sum[idx] += var[:, 0] + var[:, 1] + var[:, 2]
        self.channel_var_sum[idx] += var
        self.ndc_grad_norm_sum[idx] += np.hypot(ndc_grads[idx, 0], ndc_grads[idx, 1])
        self.view_count[idx] += 1
        self._finalized[idx] = True
        self.clear_live()

    def statistics(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-Gaussian (mean NDC gradient norm, mean summed channel variance); zero where unseen."""
        m = self.view_count
        seen = m > 0
        gnorm = np.zeros(self.n)
        dbar = np.zeros(self.n)
        gnorm[seen] = self.ndc_grad_norm_sum[seen] / m[seen]
        dbar[seen] = self.variance_sum[seen] / m[seen]
        return gnorm, dbar


def criteria(accum: GradAccum, k: int, gamma: float, tau_th: float) -> tuple[float, float, bool]:
    m = int(accum.view_count[k])
    if m < 1:
        return 0.0, 0.0, False
    gnorm = accum.ndc_grad_norm_sum[k] / m
    dbar = accum.variance_sum[k] / m
    return float(gnorm), float(dbar), bool(gamma * dbar + gnorm > tau_th)


def densify_mask(accum: GradAccum, gamma: float, tau_th: float) -> np.ndarray:
    """Vectorized :func:`criteria`; same arithmetic so results match it bitwise."""
    gnorm, dbar = accum.statistics()
    return (accum.view_count > 0) & (gamma * dbar + gnorm > tau_th)


def export_stats_csv(accum: GradAccum, path) -> None:
    """Write ``gaussian_id,gnorm,dbar,var_r,var_g,var_b`` (per-channel values are view averages)."""
    gnorm, dbar = accum.statistics()
    m = np.maximum(accum.view_count, 1)[:, None]
    chan = accum.channel_var_sum / m
    with Path(path).open("w") as fh:
        fh.write("gaussian_id,gnorm,dbar,var_r,var_g,var_b\n")
        for i in range(accum.n):
            row = (gnorm[i], dbar[i], *chan[i])
            fh.write(f"{i}," + ",".join(repr(float(v)) for v in row) + "\n")
