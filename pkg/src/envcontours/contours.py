"""Environmental contour estimation: four families plus reliability helpers.

* direct sampling - empirical quantiles of directional projections of a
  simulated sample; the enclosed region is convex by construction.
* joint exceedance - points at which a corner exceedance probability relative
  to a reference location is constant; estimated on a per-coordinate rank
  (standard-normal score) scale so the contour commutes exactly with
  componentwise monotone transforms, which contours defined through CDFs must.
* isodensity - highest-density region of a kernel (or supplied) density with
  prescribed probability content; not invariant under monotone transforms.
* inverse first-order (IFORM) - circle of radius ``Phi^-1(1 - 1/(T n))`` in
  standard-normal space mapped back through the Rosenblatt inverse of a
  factorised joint model.

All θ grids are equispaced on [0, 2π).  For a T-year contour on storm-peak
samples the default exceedance probability is ``1 / (rate * T)`` (one
expected exceedance event in T years); probability-content calibration is
available as the alternative convention.
"""

from __future__ import annotations

import json
import math
import warnings
from collections import namedtuple
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from contourpy import contour_generator
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree
from scipy.special import ndtr, ndtri
from scipy.stats import rankdata

from ._rng import as_generator
from .errors import CalibrationError, ContourError, ResolutionError

_EDGE_EPS = 1e-12


def alpha_for_return_period(T: float, rate: float) -> float:
    """Event-level exceedance probability for a T-year contour at the given
    storm rate (events per year)."""
    if T <= 0.0 or rate <= 0.0:
        raise ValueError("T and rate must be positive")
    return 1.0 / (T * rate)


# ---------------------------------------------------------------------------
# contour container

@dataclass
class Contour:
    """A closed environmental contour.

    ``loops`` holds one or more closed polylines as (m, 2) arrays without a
    duplicated end point.  θ-parametrised methods also fill ``theta`` (and,
    for direct sampling, the raw support function ``support``).
    """

    method: str
    alpha: float
    loops: list
    T: float | None = None
    theta: np.ndarray | None = None
    support: np.ndarray | None = None
    reference: np.ndarray | None = None
    enclosed_p: float | None = None
    convex: bool = False
    unattained: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def vertices(self) -> np.ndarray:
        return self.loops[0]

    @property
    def points(self) -> np.ndarray:
        """(n, 3) array of (theta, x1, x2) rows over all loops."""
        rows = []
        offset = 0
        for loop in self.loops:
            th = (
                self.theta[offset : offset + len(loop)]
                if self.theta is not None and self.theta.size >= offset + len(loop)
                else np.full(len(loop), np.nan)
            )
            rows.append(np.column_stack([th, loop]))
            offset += len(loop)
        return np.concatenate(rows)

    def contains(self, points) -> np.ndarray:
        """Even-odd containment of points in the union of loops.

        Faster equivalent tests are used where the construction allows them:
        the supporting half-plane test for convex θ-parametrised contours, the
        radial profile for star-shaped (ray-parametrised) contours and the
        density grid for isodensity contours.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.convex and self.theta is not None:
            e = np.column_stack([np.cos(self.theta), np.sin(self.theta)])
            c = np.einsum("ij,ij->i", self.vertices, e)
            inside = np.empty(points.shape[0], dtype=bool)
            for lo in range(0, points.shape[0], 65536):
                chunk = points[lo : lo + 65536]
                inside[lo : lo + len(chunk)] = (chunk @ e.T <= c + 1e-12).all(axis=1)
            return inside
        if "star_centre" in self.meta and self.theta is not None:
            # star-shaped in its construction space: compare each point's ray
            # angle from the reference against the contour's radial profile
            work = points
            if self.meta.get("rank_scale") is not None:
                work = self.meta["rank_scale"].scores_of(points)
            centre = self.meta["star_centre"]
            radial = self.meta["star_radius"]
            d = work - centre
            phi = np.mod(np.arctan2(d[:, 1], d[:, 0]), 2.0 * math.pi)
            limit = np.interp(
                phi,
                np.concatenate([self.theta, [2.0 * math.pi]]),
                np.concatenate([radial, [radial[0]]]),
            )
            return np.hypot(d[:, 0], d[:, 1]) <= limit
        if "grid_density" in self.meta:
            xc, yc = self.meta["grid_x"], self.meta["grid_y"]
            dens, tau = self.meta["grid_density"], self.meta["tau"]
            ix = np.clip(
                np.rint((points[:, 0] - xc[0]) / (xc[1] - xc[0])).astype(int),
                0, xc.size - 1,
            )
            iy = np.clip(
                np.rint((points[:, 1] - yc[0]) / (yc[1] - yc[0])).astype(int),
                0, yc.size - 1,
            )
            return dens[ix, iy] > tau
        return points_in_loops(points, self.loops)

    def to_csv(self, path, sidecar: dict | None = None) -> None:
        path = Path(path)
        np.savetxt(
            path,
            self.points,
            fmt="%.10g",
            delimiter=",",
            header="theta_rad,x1,x2",
            comments="",
        )
        payload = {
            "method": self.method,
            "T": self.T,
            "alpha": self.alpha,
            "enclosed_p": self.enclosed_p,
            "n_loops": len(self.loops),
            "loop_sizes": [int(len(l)) for l in self.loops],
        }
        if sidecar:
            payload.update(sidecar)
        path.with_suffix(path.suffix + ".json").write_text(
            json.dumps(payload, sort_keys=True), encoding="utf-8"
        )


def points_in_loops(points, loops) -> np.ndarray:
    """Vectorised even-odd (crossing number) test over a union of loops."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    crossings = np.zeros(points.shape[0], dtype=np.int64)
    for loop in loops:
        xs, ys = loop[:, 0], loop[:, 1]
        xe, ye = np.roll(xs, -1), np.roll(ys, -1)
        for lo in range(0, points.shape[0], 16384):
            px = points[lo : lo + 16384, 0][:, None]
            py = points[lo : lo + 16384, 1][:, None]
            straddle = (ys[None, :] > py) != (ye[None, :] > py)
            with np.errstate(divide="ignore", invalid="ignore"):
                x_int = xs[None, :] + (py - ys[None, :]) * (xe - xs)[None, :] / (
                    ye - ys
                )[None, :]
            crossings[lo : lo + px.shape[0]] += np.sum(
                straddle & (px < x_int), axis=1
            )
    return crossings % 2 == 1


def _theta_grid(n_theta: int) -> np.ndarray:
    return np.arange(n_theta) * (2.0 * math.pi / n_theta)


def _smooth_periodic(values: np.ndarray, window: int) -> np.ndarray:
    """Periodic moving average; window is forced odd."""
    if window <= 1:
        return values.copy()
    if window % 2 == 0:
        window += 1
    half = window // 2
    padded = np.concatenate([values[-half:], values, values[:half]])
    return np.convolve(padded, np.full(window, 1.0 / window), mode="valid")


def _convexity_defect(points: np.ndarray) -> float:
    """Most negative consecutive-turn cross product (>= 0 for a convex loop)."""
    a = points - np.roll(points, 1, axis=0)
    b = np.roll(points, -1, axis=0) - points
    cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    return float(np.min(cross))


def _convexify_support(theta: np.ndarray, c: np.ndarray) -> np.ndarray | None:
    """Support function of the half-plane intersection {x : x.e(θ_k) <= c_k}.

    Noise in the empirical quantiles can make ``c`` an invalid support
    function (some constraints redundant); the enclosed region itself is still
    convex, and its exact support function is recovered through polar duality:
    shift by an interior point, take the convex hull of the dual points
    ``e_k / c_k`` and read the gauge off the hull facets.  When ``c`` is
    already valid this is an identity.  Returns None when no interior point is
    found (degenerate contour).
    """
    from scipy.spatial import ConvexHull, QhullError

    e = np.column_stack([np.cos(theta), np.sin(theta)])
    centre = 2.0 * np.mean(c[:, None] * e, axis=0)
    shifted = c - e @ centre
    if np.min(shifted) <= 0.0:
        return None
    dual = e / shifted[:, None]
    try:
        hull = ConvexHull(dual)
    except QhullError:
        return None
    # facets: n.x <= b with b > 0 (origin interior); gauge(u) = max_f n.u / b
    normals = hull.equations[:, :2]
    offsets = -hull.equations[:, 2]
    gauge = np.max((e @ normals.T) / offsets[None, :], axis=1)
    return e @ centre + gauge


# ---------------------------------------------------------------------------
# direct sampling

class DirectSamplingBuilder:
    """Reusable direct-sampling estimator over one simulated sample.

    Projections on the θ grid are computed once and their upper tails cached,
    so contours for many exceedance levels (e.g. during probability-content
    calibration) are cheap after construction.
    """

    def __init__(self, sample, n_theta: int = 360, smooth_window: int = 5,
                 tail_frac: float = 0.05):
        self.sample = np.asarray(sample, dtype=float)
        if self.sample.ndim != 2 or self.sample.shape[1] != 2:
            raise ValueError("sample must be an (n, 2) array")
        self.n = self.sample.shape[0]
        self.n_theta = n_theta
        self.smooth_window = smooth_window
        self.theta = _theta_grid(n_theta)
        self._keep = min(self.n, max(int(math.ceil(self.n * tail_frac)), 64))
        kth = self.n - self._keep
        tails = np.empty((n_theta, self._keep))
        for k, th in enumerate(self.theta):
            proj = self.sample[:, 0] * math.cos(th) + self.sample[:, 1] * math.sin(th)
            tails[k] = np.sort(np.partition(proj, kth)[kth:])
        self._tails = tails

    def support(self, alpha: float) -> np.ndarray:
        """Empirical (1 - alpha)-quantiles of the directional projections."""
        h = (self.n - 1) * (1.0 - alpha)
        i0 = int(math.floor(h))
        offset = self.n - self._keep
        if i0 < offset:
            # below the cached tail: recompute the quantiles exactly
            out = np.empty(self.n_theta)
            for k, th in enumerate(self.theta):
                proj = self.sample[:, 0] * math.cos(th) + self.sample[:, 1] * math.sin(th)
                out[k] = np.quantile(proj, 1.0 - alpha)
            return out
        frac = h - i0
        j0 = i0 - offset
        j1 = min(j0 + 1, self._keep - 1)
        return (1.0 - frac) * self._tails[:, j0] + frac * self._tails[:, j1]

    def build(self, alpha: float, T: float | None = None) -> Contour:
        if not 0.0 < alpha <= 0.5:
            raise ValueError("alpha must lie in (0, 0.5]")
        if alpha * self.n < 10:
            raise ContourError(
                f"insufficient tail: alpha * n = {alpha * self.n:.1f} < 10"
            )
        if self.n < 50.0 / alpha:
            warnings.warn(
                "sample smaller than 50/alpha; contour quantiles will be noisy",
                stacklevel=2,
            )
        support = self.support(alpha)
        smoothed = _smooth_periodic(support, self.smooth_window)
        valid = _convexify_support(self.theta, smoothed)
        if valid is not None:
            smoothed = valid
        # dC/dθ discretised so that each point is the intersection of the
        # supporting lines at θ_k and θ_{k+1}; the resulting polygon is convex
        # whenever C is a valid support function, which plain centred
        # differences cannot guarantee
        delta = 2.0 * math.pi / self.n_theta
        deriv = (np.roll(smoothed, -1) - smoothed * math.cos(delta)) / math.sin(delta)
        cos_t, sin_t = np.cos(self.theta), np.sin(self.theta)
        pts = np.column_stack(
            [smoothed * cos_t - deriv * sin_t, smoothed * sin_t + deriv * cos_t]
        )
        # the loop turns one way iff C + C'' >= 0; near the projection median
        # (alpha -> 0.5) the contour may degenerate and the check is meaningless
        defect = _convexity_defect(pts)
        scale = float(np.max(np.abs(smoothed))) + 1e-30
        convex = defect >= -1e-9 * scale**2
        if not convex:
            if alpha <= 0.25:
                raise ContourError(
                    "direct sampling contour is not convex after smoothing; "
                    "increase the sample size or the smoothing window"
                )
            warnings.warn(
                "degenerate direct sampling contour is not convex", stacklevel=2
            )
        return Contour(
            method="direct-sampling",
            alpha=alpha,
            T=T,
            loops=[pts],
            theta=self.theta,
            support=support,
            convex=convex,
            meta={"smooth_window": self.smooth_window, "n_sample": self.n},
        )


def direct_sampling_contour(
    sample, alpha: float, n_theta: int = 360, smooth_window: int = 5,
    T: float | None = None,
) -> Contour:
    """Direct sampling contour of a simulated (x1, x2) sample.

    ``C(θ)`` is the empirical (1-α)-quantile of the projection
    ``x1 cosθ + x2 sinθ``; contour points follow from C and its smoothed
    numerical derivative, and satisfy their own supporting half-plane.
    """
    builder = DirectSamplingBuilder(
        sample, n_theta=n_theta, smooth_window=smooth_window,
        tail_frac=min(0.9, max(0.05, 4.0 * alpha)),
    )
    return builder.build(alpha, T=T)


# ---------------------------------------------------------------------------
# joint exceedance

class _RankScale:
    """Per-coordinate rank/normal-score scale with an exact monotone back-map."""

    def __init__(self, sample):
        self.sample = np.asarray(sample, dtype=float)
        self.n = self.sample.shape[0]
        self.sorted = np.sort(self.sample, axis=0)
        self._sorted_u = np.column_stack(
            [
                rankdata(self.sorted[:, j], method="average") / (self.n + 1.0)
                for j in range(2)
            ]
        )
        self.scores = np.empty_like(self.sample)
        for j in range(2):
            u = rankdata(self.sample[:, j], method="average") / (self.n + 1.0)
            self.scores[:, j] = ndtri(u)

    def scores_of(self, points) -> np.ndarray:
        """Normal scores of arbitrary points by monotone interpolation."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.empty_like(points)
        for j in range(2):
            u = np.interp(points[:, j], self.sorted[:, j], self._sorted_u[:, j])
            out[:, j] = ndtri(u)
        return out

    def to_scores(self, point) -> np.ndarray:
        return self.scores_of(np.asarray(point, dtype=float)[None, :])[0]

    def back(self, scores: np.ndarray) -> np.ndarray:
        """Map score-space points to data values via order statistics only,
        so the map commutes exactly with monotone transforms of the data."""
        u = ndtr(scores)
        idx = np.clip(np.rint(u * (self.n + 1.0)).astype(int) - 1, 0, self.n - 1)
        out = np.empty_like(scores)
        for j in range(2):
            out[..., j] = self.sorted[idx[..., j], j]
        return out


class JointExceedanceBuilder:
    """Joint exceedance contour estimator with cached per-θ ray statistics.

    For each ray direction from the reference point, the orientation signs of
    the corner event come from the ray direction; each sample point has a
    critical ray parameter beyond which it stops satisfying the event, and the
    contour point sits at that parameter's (1-α)-quantile.  This closed form
    replaces iterative bisection along the ray: the fraction of the sample
    satisfying the corner event is a step function of the ray parameter whose
    level crossing is exactly an order statistic of the critical parameters.
    """

    def __init__(self, sample, r_star=None, n_theta: int = 360,
                 scale: str = "rank", tail_frac: float = 0.05):
        sample = np.asarray(sample, dtype=float)
        if sample.ndim != 2 or sample.shape[1] != 2:
            raise ValueError("sample must be an (n, 2) array")
        if scale not in ("rank", "data"):
            raise ValueError("scale must be 'rank' or 'data'")
        self.scale = scale
        self.n = sample.shape[0]
        self.n_theta = n_theta
        self.theta = _theta_grid(n_theta)
        self.r_star_data = (
            np.median(sample, axis=0) if r_star is None else np.asarray(r_star, dtype=float)
        )
        if not np.all(np.isfinite(self.r_star_data)):
            raise ValueError("reference point must be finite")
        if scale == "rank":
            self._ranks = _RankScale(sample)
            work = self._ranks.scores
            self._origin = self._ranks.to_scores(self.r_star_data)
        else:
            self._ranks = None
            work = sample
            self._origin = self.r_star_data

        self._keep = min(self.n, max(int(math.ceil(self.n * tail_frac)), 64))
        kth = self.n - self._keep
        self._centred = work - self._origin
        tails = np.empty((n_theta, self._keep))
        for k in range(n_theta):
            t_crit = self._t_critical(self.theta[k])
            tails[k] = np.sort(np.partition(t_crit, kth)[kth:])
        self._tails = tails

    def _t_critical(self, th: float) -> np.ndarray:
        """Largest ray parameter at which each sample point still satisfies
        the corner event for the ray at angle ``th``."""
        e = np.array([math.cos(th), math.sin(th)])
        ratios = np.where(
            np.abs(e) > _EDGE_EPS,
            np.sign(e) * self._centred / np.maximum(np.abs(e), _EDGE_EPS),
            np.inf,
        )
        return ratios.min(axis=1)

    def ray_quantile(self, alpha: float) -> np.ndarray:
        h = (self.n - 1) * (1.0 - alpha)
        i0 = int(math.floor(h))
        offset = self.n - self._keep
        if i0 < offset:
            return np.array(
                [np.quantile(self._t_critical(th), 1.0 - alpha) for th in self.theta]
            )
        frac = h - i0
        j0 = i0 - offset
        j1 = min(j0 + 1, self._keep - 1)
        return (1.0 - frac) * self._tails[:, j0] + frac * self._tails[:, j1]

    def build(self, alpha: float, T: float | None = None,
              smooth_window: int = 1) -> Contour:
        if not 0.0 < alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        t_star = self.ray_quantile(alpha)
        unattained = t_star <= 0.0
        if np.any(unattained):
            warnings.warn(
                f"{int(unattained.sum())} rays cannot attain the requested "
                "exceedance probability; points pinned to the reference",
                stacklevel=2,
            )
        t_star = np.maximum(t_star, 0.0)
        t_star = _smooth_periodic(t_star, smooth_window)
        e = np.column_stack([np.cos(self.theta), np.sin(self.theta)])
        pts_work = self._origin + t_star[:, None] * e
        pts = self._ranks.back(pts_work) if self._ranks is not None else pts_work
        return Contour(
            method="joint-exceedance",
            alpha=alpha,
            T=T,
            loops=[pts],
            theta=self.theta,
            reference=self.r_star_data,
            unattained=unattained,
            meta={
                "scale": self.scale,
                "n_sample": self.n,
                "star_centre": self._origin,
                "star_radius": t_star,
                "rank_scale": self._ranks,
            },
        )


def joint_exceedance_contour(
    sample, alpha: float, r_star=None, n_theta: int = 360,
    scale: str = "rank", smooth_window: int = 1, T: float | None = None,
) -> Contour:
    """Joint exceedance contour relative to a reference location.

    On each ray from the reference, the contour point x(θ) satisfies
    ``Pr(intersection_j s_j X_j > s_j x_j(θ)) = alpha`` with orientation signs
    ``s_j`` taken from the ray direction.  With ``scale='rank'`` (default) the
    rays live on the per-coordinate normal-score scale and points map back
    through order statistics, making the contour exactly equivariant under
    componentwise strictly monotone transforms; ``scale='data'`` casts the
    rays in physical units instead.
    """
    builder = JointExceedanceBuilder(
        sample, r_star=r_star, n_theta=n_theta, scale=scale,
        tail_frac=min(0.9, max(0.05, 4.0 * alpha)),
    )
    return builder.build(alpha, T=T, smooth_window=smooth_window)


# ---------------------------------------------------------------------------
# probability-content calibration

def calibrate_enclosed_probability(
    contour_builder,
    target_p: float,
    sample,
    tol: float | None = None,
    alpha_bracket=None,
    max_iter: int = 60,
):
    """Bisect the exceedance level until the contour encloses ``target_p``.

    ``contour_builder(alpha)`` must return a :class:`Contour`; the enclosed
    probability is the Monte Carlo fraction of ``sample`` inside it, which is
    decreasing in alpha.  The default tolerance is ``0.1 * (1 - target_p)``
    (one tenth of the complementary return probability).
    """
    if not 0.0 < target_p < 1.0:
        raise ValueError("target_p must lie in (0, 1)")
    sample = np.asarray(sample, dtype=float)
    if tol is None:
        tol = 0.1 * (1.0 - target_p)
    n = sample.shape[0]
    if alpha_bracket is None:
        alpha_bracket = (max(1e-5, 20.0 / n), 0.45)
    se = math.sqrt(target_p * (1.0 - target_p) / n)

    def content(alpha):
        c = contour_builder(alpha)
        p = float(np.mean(c.contains(sample)))
        c.enclosed_p = p
        return p, c

    lo, hi = alpha_bracket
    p_lo, c_lo = content(lo)
    p_hi, c_hi = content(hi)
    if p_hi > p_lo + 3.0 * se:
        raise CalibrationError(
            "enclosed probability is not decreasing in alpha beyond MC noise"
        )
    if p_lo < target_p - tol:
        warnings.warn("target content unattainable; alpha pinned at lower bound", stacklevel=2)
        c_lo.meta["at_bound"] = "lower"
        return lo, c_lo
    if p_hi > target_p + tol:
        warnings.warn("target content unattainable; alpha pinned at upper bound", stacklevel=2)
        c_hi.meta["at_bound"] = "upper"
        return hi, c_hi

    best = None
    for _ in range(max_iter):
        mid = math.sqrt(lo * hi)  # bisect on log scale: alpha spans decades
        p_mid, c_mid = content(mid)
        if best is None or abs(p_mid - target_p) < abs(best[1] - target_p):
            best = (mid, p_mid, c_mid)
        if abs(p_mid - target_p) <= tol:
            return mid, c_mid
        if p_mid > target_p:
            lo = mid
        else:
            hi = mid
    alpha, _, c = best
    if abs(best[1] - target_p) > max(tol, 3.0 * se):
        raise CalibrationError(
            f"calibration stalled at enclosed_p = {best[1]:.5f} for target {target_p:.5f}"
        )
    return alpha, c


# ---------------------------------------------------------------------------
# isodensity

def _silverman_bandwidth(sample: np.ndarray) -> np.ndarray:
    # per-axis rule for a bivariate Gaussian kernel: sigma_j * n^(-1/6)
    return sample.std(axis=0, ddof=1) * sample.shape[0] ** (-1.0 / 6.0)


def isodensity_contour(
    sample=None,
    density=None,
    level_p: float = 0.99,
    grid_n: int = 256,
    bandwidth=None,
    grid_bounds=None,
    pad_bw: float = 4.0,
    T: float | None = None,
) -> Contour:
    """Highest-density region boundary with prescribed probability content.

    The density comes either from a binned Gaussian kernel estimate of
    ``sample`` (per-axis Silverman bandwidths by default) or from a callable
    ``density(x1, x2)`` evaluated on the grid (``grid_bounds`` then required).
    The density level ``tau`` is chosen so the grid mass of ``{f > tau}``
    equals ``level_p``; loops are extracted by marching squares and may be
    multiple for multi-modal densities.
    """
    if not 0.0 < level_p < 1.0:
        raise ValueError("level_p must lie in (0, 1)")
    if (sample is None) == (density is None):
        raise ValueError("provide exactly one of sample or density")

    if sample is not None:
        sample = np.asarray(sample, dtype=float)
        h = np.broadcast_to(
            _silverman_bandwidth(sample) if bandwidth is None else np.asarray(bandwidth, float),
            (2,),
        )
        if grid_bounds is None:
            lo = sample.min(axis=0) - pad_bw * h
            hi = sample.max(axis=0) + pad_bw * h
        else:
            (lo, hi) = np.asarray(grid_bounds, dtype=float)
        xe = np.linspace(lo[0], hi[0], grid_n + 1)
        ye = np.linspace(lo[1], hi[1], grid_n + 1)
        counts, _, _ = np.histogram2d(sample[:, 0], sample[:, 1], bins=[xe, ye])
        dx, dy = xe[1] - xe[0], ye[1] - ye[0]
        dens = gaussian_filter(
            counts / (sample.shape[0] * dx * dy),
            sigma=[h[0] / dx, h[1] / dy],
            mode="constant",
        )
        xc, yc = 0.5 * (xe[:-1] + xe[1:]), 0.5 * (ye[:-1] + ye[1:])
    else:
        if grid_bounds is None:
            raise ValueError("grid_bounds required with a callable density")
        (lo, hi) = np.asarray(grid_bounds, dtype=float)
        xc = np.linspace(lo[0], hi[0], grid_n)
        yc = np.linspace(lo[1], hi[1], grid_n)
        dx, dy = xc[1] - xc[0], yc[1] - yc[0]
        gx, gy = np.meshgrid(xc, yc, indexing="ij")
        dens = np.asarray(density(gx, gy), dtype=float)

    cell = dx * dy
    flat = dens.ravel()
    order = np.argsort(flat)[::-1]
    cum = np.cumsum(flat[order]) * cell
    if cum[-1] < level_p:
        raise ResolutionError(
            f"grid captures probability {cum[-1]:.4f} < level_p = {level_p}; "
            "enlarge the grid or its bounds"
        )
    k = int(np.searchsorted(cum, level_p))
    tau = float(flat[order[min(k, flat.size - 1)]])

    gen = contour_generator(x=xc, y=yc, z=dens.T)
    raw_loops = gen.lines(tau)
    loops = []
    for loop in raw_loops:
        if len(loop) < 4 or not np.allclose(loop[0], loop[-1], atol=1e-9):
            raise ResolutionError(
                "density level set is clipped by the grid; enlarge grid_bounds"
            )
        loops.append(np.asarray(loop[:-1], dtype=float))
    if not loops:
        raise ResolutionError("no closed loop found at the requested level")

    return Contour(
        method="isodensity",
        alpha=1.0 - level_p,
        T=T,
        loops=loops,
        enclosed_p=None,
        meta={
            "level_p": level_p,
            "tau": tau,
            "grid_content": float(cum[min(k, flat.size - 1)]),
            "bandwidth": None if sample is None else h.tolist(),
            "grid_x": xc,
            "grid_y": yc,
            "grid_density": dens,
        },
    )


def density_at(contour: Contour, points) -> np.ndarray:
    """Bilinear interpolation of the isodensity grid at given points."""
    xc = contour.meta["grid_x"]
    yc = contour.meta["grid_y"]
    dens = contour.meta["grid_density"]
    points = np.atleast_2d(np.asarray(points, dtype=float))
    ix = np.clip(np.searchsorted(xc, points[:, 0]) - 1, 0, xc.size - 2)
    iy = np.clip(np.searchsorted(yc, points[:, 1]) - 1, 0, yc.size - 2)
    fx = (points[:, 0] - xc[ix]) / (xc[ix + 1] - xc[ix])
    fy = (points[:, 1] - yc[iy]) / (yc[iy + 1] - yc[iy])
    return (
        dens[ix, iy] * (1 - fx) * (1 - fy)
        + dens[ix + 1, iy] * fx * (1 - fy)
        + dens[ix, iy + 1] * (1 - fx) * fy
        + dens[ix + 1, iy + 1] * fx * fy
    )


# ---------------------------------------------------------------------------
# IFORM

def iform_contour(
    model, T: float, n_states_per_year: float, n_theta: int = 360,
) -> Contour:
    """IFORM contour: standard-normal circle mapped back through the model.

    ``model.transform_from_u(u1, u2)`` must implement the Rosenblatt inverse
    ``x1 = F1^-1(Phi(u1))``, ``x2 = F2|1^-1(Phi(u2))``.  The circle radius is
    ``Phi^-1(1 - 1/(T * n_states_per_year))``.
    """
    if T <= 0.0 or n_states_per_year <= 0.0:
        raise ValueError("T and n_states_per_year must be positive")
    pe = 1.0 / (T * n_states_per_year)
    beta_r = float(-ndtri(pe))
    theta = _theta_grid(n_theta)
    u = beta_r * np.column_stack([np.cos(theta), np.sin(theta)])
    x1, x2 = model.transform_from_u(u[:, 0], u[:, 1])
    return Contour(
        method="iform",
        alpha=pe,
        T=T,
        loops=[np.column_stack([x1, x2])],
        theta=theta,
        convex=False,
        meta={"beta_r": beta_r, "u_points": u, "n_states_per_year": n_states_per_year},
    )


# ---------------------------------------------------------------------------
# reliability helpers

def failure_probability_mc(limit_state, simulator, n: int, seed=None):
    """Monte Carlo failure probability ``Pr(g(X) < 0)`` with standard error.

    ``simulator(n, rng)`` draws environment points; ``limit_state`` maps an
    (n, 2) array to limit-state values (negative = failure).
    """
    if n < 1000:
        raise ValueError("n must be at least 1000")
    rng = as_generator(seed)
    x = np.asarray(simulator(n, rng), dtype=float)
    g = np.asarray(limit_state(x), dtype=float)
    p = float(np.mean(g < 0.0))
    return p, math.sqrt(p * (1.0 - p) / n)


GoverningPoint = namedtuple("GoverningPoint", ["index", "theta", "point", "value"])


def find_governing_point(contour: Contour, response) -> GoverningPoint:
    """Contour point maximising the median short-term response.

    Ties break toward the smallest θ (the first point in contour order).
    """
    pts = np.concatenate(contour.loops)
    values = np.asarray(response.median(pts[:, 0], pts[:, 1]), dtype=float)
    idx = int(np.argmax(values))
    theta = (
        float(contour.theta[idx])
        if contour.theta is not None and idx < contour.theta.size
        else None
    )
    return GoverningPoint(idx, theta, pts[idx], float(values[idx]))


def frontier_mask(contour: Contour, sample, radius: float = 0.5) -> np.ndarray:
    """Mark contour points lying close to the simulated sample.

    Distances are measured after per-axis standardisation by the sample
    standard deviations; a point belongs to the frontier when its nearest
    sample point is within ``radius`` standardised units.
    """
    sample = np.asarray(sample, dtype=float)
    scale = sample.std(axis=0, ddof=1)
    scale[scale == 0.0] = 1.0
    tree = cKDTree(sample / scale)
    pts = np.concatenate(contour.loops) / scale
    dist, _ = tree.query(pts, k=1)
    return dist <= radius


def frontier_indices(contour: Contour, sample, radius: float = 0.5,
                     n_points: int | None = None) -> np.ndarray:
    """Indices of frontier points; the longest contiguous arc, optionally
    thinned to ``n_points`` equispaced members."""
    mask = frontier_mask(contour, sample, radius)
    if not mask.any():
        raise ContourError(
            "contour has an empty frontier; widen the frontier radius"
        )
    n = mask.size
    if mask.all():
        arc = np.arange(n)
    else:
        # longest circular run of True
        start = int(np.argmin(mask))  # a False exists; rotate to it
        rolled = np.roll(mask, -start)
        best_len, best_at, cur_len, cur_at = 0, 0, 0, 0
        for i, flag in enumerate(rolled):
            if flag:
                if cur_len == 0:
                    cur_at = i
                cur_len += 1
                if cur_len > best_len:
                    best_len, best_at = cur_len, cur_at
            else:
                cur_len = 0
        arc = (np.arange(best_at, best_at + best_len) + start) % n
    if n_points is None or n_points >= arc.size:
        return arc
    sel = np.unique(np.round(np.linspace(0, arc.size - 1, n_points)).astype(int))
    return arc[sel]


def radial_profile(contour: Contour, r_star, thetas) -> np.ndarray:
    """Ray-polygon intersection distances from ``r_star`` at given angles.

    Supports matched-angle comparison of contours that parametrise their
    points differently.  Returns the outermost crossing per ray (NaN when a
    ray misses the polygon).
    """
    r_star = np.asarray(r_star, dtype=float)
    poly = np.concatenate(contour.loops)
    a = poly
    b = np.roll(poly, -1, axis=0)
    d = b - a
    out = np.full(len(thetas), np.nan)
    for i, th in enumerate(np.asarray(thetas, dtype=float)):
        e = np.array([math.cos(th), math.sin(th)])
        # solve r* + t e = a + s d  for each segment
        denom = e[0] * (-d[:, 1]) - e[1] * (-d[:, 0])
        rhs = a - r_star
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (rhs[:, 0] * (-d[:, 1]) - rhs[:, 1] * (-d[:, 0])) / denom
            s = (e[0] * rhs[:, 1] - e[1] * rhs[:, 0]) / denom
        ok = np.isfinite(t) & (t > 0.0) & (s >= 0.0) & (s < 1.0)
        if ok.any():
            out[i] = t[ok].max()
    return out
