"""Verification metrics for gridded forecasts.

Arrays follow the ``(..., H, W)`` convention: the last two axes are
latitude and longitude, every leading axis indexes samples.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.special import ndtr

from .errors import DimensionError, DomainError, NumericError, UndefinedValueError

_INV_SQRT_PI = 1.0 / math.sqrt(math.pi)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
DRY_THRESHOLD = 0.1
SEEPS_P_RANGE = (0.1, 0.85)


def _same_shape(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _samples(x):
    """View ``(..., H, W)`` as ``(N, H, W)``."""
    if x.ndim < 2:
        raise DimensionError(f"expected (..., H, W) fields, got shape {x.shape}")
    return x.reshape((-1,) + x.shape[-2:])


def _lat_weights(weights, H):
    w = np.asarray(weights, np.float64)
    if w.shape != (H,):
        raise DimensionError(f"need {H} latitude weights, got {w.shape}")
    return w[:, None]


# ---------------------------------------------------------- deterministic


def rmse_latweighted(pred, truth, weights):
    """Latitude-weighted RMSE: root per sample, then the mean over samples."""
    pred, truth = _same_shape(pred, truth)
    err = _samples(pred - truth)
    w = _lat_weights(weights, err.shape[-2])
    per_sample = np.sqrt((w * err * err).mean(axis=(-2, -1)))
    return float(per_sample.mean())


def mean_bias(pred, truth):
    """Unweighted mean of ``pred - truth``."""
    pred, truth = _same_shape(pred, truth)
    return float((pred - truth).mean())


def acc(pred, truth, climatology, weights):
    """Latitude-weighted anomaly correlation against ``climatology`` (an ``(H, W)`` mean)."""
    pred, truth = _same_shape(pred, truth)
    clim = np.asarray(climatology, np.float64)
    pa = _samples(pred) - clim
    ta = _samples(truth) - clim
    w = _lat_weights(weights, pa.shape[-2])
    num = float(np.sum(w * pa * ta))
    den = math.sqrt(float(np.sum(w * pa * pa)) * float(np.sum(w * ta * ta)))
    if den == 0.0:
        raise UndefinedValueError("ACC is undefined for zero-variance anomalies")
    return num / den


# ---------------------------------------------------------- probabilistic


def crps_gaussian(mu, sigma, x):
    """Closed-form CRPS of ``N(mu, sigma^2)`` at ``x``, elementwise."""
    mu, sigma, x = (np.asarray(a, np.float64) for a in (mu, sigma, x))
    if np.any(sigma <= 0):
        raise DomainError("crps_gaussian needs sigma > 0")
    z = (x - mu) / sigma
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    out = sigma * (2.0 * pdf + z * (2.0 * ndtr(z) - 1.0) - _INV_SQRT_PI)
    return float(out) if out.ndim == 0 else out


def crps_numeric(cdf, x, center, scale, width=12.0, tol=1e-8):
    """``integral (F(t) - 1[t >= x])^2 dt`` by adaptive quadrature.

    The integral runs over ``center +/- width * scale`` widened to contain
    ``x``, and is split at ``x`` and ``center`` so neither the observation
    step nor a point-mass step falls inside a quadrature panel.
    """
    lo = min(center - width * scale, x)
    hi = max(center + width * scale, x)
    cuts = sorted({lo, hi, float(x), float(center)})
    total = 0.0
    for a, b in zip(cuts[:-1], cuts[1:]):
        if b <= a:
            continue
        mid = 0.5 * (a + b)
        step = 1.0 if mid >= x else 0.0

        def integrand(t, step=step):
            return (cdf(t) - step) ** 2

        value, err, info = integrate.quad(integrand, a, b, epsabs=tol, epsrel=0.0, limit=200, full_output=1)[:3]
        if not math.isfinite(value) or err > 10 * tol:
            raise NumericError(f"CRPS quadrature did not converge on [{a}, {b}] (error {err:g})")
        total += value
    return total


def gaussian_cdf(mu, sigma):
    return lambda t: float(ndtr((t - mu) / sigma))


def point_mass_cdf(at):
    return lambda t: 1.0 if t >= at else 0.0


def eecrps(crps_field, efi_field):
    """Mean of ``|EFI| * CRPS`` over all points."""
    crps_field, efi_field = _same_shape(crps_field, efi_field)
    if np.any(np.abs(efi_field) > 1.0):
        raise DomainError("EFI values must lie in [-1, 1]")
    return float(np.mean(np.abs(efi_field) * crps_field))


# -------------------------------------------------------------- categorical


def seeps_matrix(p):
    """SEEPS error matrix; rows are forecast category, columns observed (dry, light, heavy).

    ``p`` may be an array, in which case the result has shape ``p.shape + (3, 3)``.
    """
    p = np.asarray(p, np.float64)
    if np.any((p <= 0) | (p >= 1)):
        raise DomainError("SEEPS needs 0 < p < 1")
    z = np.zeros_like(p)
    a, b, c = 1.0 / (1.0 - p), 1.0 / p, 1.0 / (2.0 + p)
    rows = [
        np.stack([z, a, 4.0 * a], axis=-1),
        np.stack([b, z, 3.0 * a], axis=-1),
        np.stack([b + 3.0 * c, 3.0 * c, z], axis=-1),
    ]
    return 0.5 * np.stack(rows, axis=-2)


@dataclass
class Climatology:
    mean: np.ndarray                  # (H, W) temporal mean of the truth
    p: np.ndarray = None              # (H, W) dry probability
    light_heavy: np.ndarray = None    # (H, W) 2/3 quantile of non-dry values
    dry_threshold: float = DRY_THRESHOLD


def climatology(truth, dry_threshold=DRY_THRESHOLD, precip=False):
    """Climatology of ``(N, H, W)`` reference fields."""
    truth = _samples(np.asarray(truth, np.float64))
    clim = Climatology(mean=truth.mean(axis=0), dry_threshold=dry_threshold)
    if precip:
        dry = truth < dry_threshold
        clim.p = dry.mean(axis=0)
        wet = np.where(dry, np.nan, truth)
        with np.errstate(all="ignore"):
            q = np.nanquantile(wet, 2.0 / 3.0, axis=0) if (~dry).any() else np.full(truth.shape[1:], np.nan)
        # a point that never rains has no light/heavy split; nothing is heavy there
        clim.light_heavy = np.where(np.isnan(q), np.inf, q)
    return clim


def categorize(x, dry_threshold, light_heavy):
    """0 dry, 1 light, 2 heavy."""
    return np.where(x < dry_threshold, 0, np.where(x <= light_heavy, 1, 2))


def seeps(pred, obs, clim, weights):
    """Area-weighted SEEPS over points whose dry probability lies inside (0.1, 0.85)."""
    pred, obs = _same_shape(pred, obs)
    pred, obs = _samples(pred), _samples(obs)
    n, H, W = pred.shape
    w = np.broadcast_to(_lat_weights(weights, H), (H, W))
    p = np.asarray(clim.p, np.float64)
    keep = (p > SEEPS_P_RANGE[0]) & (p < SEEPS_P_RANGE[1])
    if not keep.any():
        raise UndefinedValueError("every point is excluded from SEEPS by its dry probability")
    fc = categorize(pred, clim.dry_threshold, clim.light_heavy)
    ob = categorize(obs, clim.dry_threshold, clim.light_heavy)
    table = np.zeros((H, W, 3, 3))
    for f in range(3):
        for o in range(3):
            table[:, :, f, o] = np.mean((fc == f) & (ob == o), axis=0)
    S = seeps_matrix(np.where(keep, p, 0.5))
    score = np.sum(table * S, axis=(-2, -1))
    return float(np.sum(w[keep] * score[keep]) / np.sum(w[keep]))


def threat_score(pred, obs, threshold):
    """``hits / (hits + misses + false alarms)``; an event is a value above ``threshold``."""
    pred, obs = _same_shape(pred, obs)
    thr = np.asarray(threshold, np.float64)
    fe, oe = pred > thr, obs > thr
    hits = int(np.sum(fe & oe))
    misses = int(np.sum(~fe & oe))
    false = int(np.sum(fe & ~oe))
    denom = hits + misses + false
    if denom == 0:
        raise UndefinedValueError("threat score is undefined without any forecast or observed event")
    return hits / denom


def percentile_threshold(truth, q):
    """Per-point ``q``-th percentile of ``(N, H, W)`` reference fields."""
    return np.percentile(_samples(np.asarray(truth, np.float64)), q, axis=0)
