"""Synthetic gridded tasks: downscaling, ensemble correction, precipitation.

Every generator is a pure function of ``(seed, config)``.  Each sample draws
from its own keyed stream, so sample ``j`` does not depend on how many
samples come before it.  A ``source=True`` variant of each generator uses a
disjoint stream family and shifted physical parameters; it stands in for
the pretraining data.
"""

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError
from .rng import stream
from .wpft import load_tensor, save_tensor

TASKS = ("downscale", "ensemble", "precip")
SIGMA_FLOOR = 1e-3


# ------------------------------------------------------------------ grid


@dataclass(frozen=True)
class GridSpec:
    H: int
    W: int
    lat: tuple = None
    lon: tuple = None

    def __post_init__(self):
        if self.H < 1 or self.W < 1:
            raise ConfigError(f"grid must be at least 1x1, got {self.H}x{self.W}")
        if self.lat is None:
            lat = tuple(-90.0 + (i + 0.5) * 180.0 / self.H for i in range(self.H))
            object.__setattr__(self, "lat", lat)
        if self.lon is None:
            object.__setattr__(self, "lon", tuple(j * 360.0 / self.W for j in range(self.W)))
        if len(self.lat) != self.H or len(self.lon) != self.W:
            raise ConfigError("lat/lon lengths do not match the grid shape")

    @classmethod
    def from_lat(cls, lat, W=1):
        lat = tuple(float(v) for v in lat)
        return cls(len(lat), W, lat=lat)


def latitude_weights(grid):
    """``cos(lat_i) / mean_j cos(lat_j)``; the weights average to one."""
    lat = np.asarray(grid.lat if isinstance(grid, GridSpec) else grid, dtype=np.float64)
    if np.any(np.abs(lat) >= 90.0):
        raise ConfigError("latitudes must lie strictly between -90 and 90")
    c = np.cos(np.deg2rad(lat))
    total = c.mean()
    if not total > 1e-12:
        raise ConfigError("degenerate grid: all latitude weights vanish")
    return c / total


# --------------------------------------------------------------- datasets


@dataclass
class GridDataset:
    task: str
    inputs: np.ndarray            # (N, V, H, W)
    targets: np.ndarray           # (N, V_out, H, W)
    variables: list
    target_names: list
    grid: GridSpec
    seed: int
    train_end: int
    val_end: int
    mean: np.ndarray = None       # per input variable, train split
    std: np.ndarray = None
    target_mean: np.ndarray = None
    target_std: np.ndarray = None
    extras: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, arr in (("inputs", self.inputs), ("targets", self.targets)):
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"{name} contain non-finite values")
        if self.mean is None:
            self.mean, self.std = channel_stats(self.inputs[: self.train_end])
            self.target_mean, self.target_std = channel_stats(self.targets[: self.train_end])

    def __len__(self):
        return len(self.inputs)

    def split(self, name):
        """Index range of ``train``, ``val`` or ``test``."""
        bounds = {
            "train": (0, self.train_end),
            "val": (self.train_end, self.val_end),
            "test": (self.val_end, len(self)),
            "all": (0, len(self)),
        }
        if name not in bounds:
            raise ConfigError(f"unknown split {name!r}")
        return range(*bounds[name])

    def normalized_inputs(self, idx=None):
        x = self.inputs if idx is None else self.inputs[idx]
        return (x - self.mean[:, None, None]) / self.std[:, None, None]

    def equals(self, other):
        """Bit-exact equality of every array and every metadata field."""
        if (
            self.task != other.task
            or self.variables != other.variables
            or self.target_names != other.target_names
            or self.grid != other.grid
            or self.seed != other.seed
            or (self.train_end, self.val_end) != (other.train_end, other.val_end)
            or self.params != other.params
            or sorted(self.extras) != sorted(other.extras)
        ):
            return False
        pairs = [
            (self.inputs, other.inputs),
            (self.targets, other.targets),
            (self.mean, other.mean),
            (self.std, other.std),
            (self.target_mean, other.target_mean),
            (self.target_std, other.target_std),
        ] + [(self.extras[k], other.extras[k]) for k in self.extras]
        return all(_bits_equal(a, b) for a, b in pairs)


def _bits_equal(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return a.shape == b.shape and np.array_equal(a.view(np.uint64), b.view(np.uint64))


def channel_stats(x):
    """Per-channel mean and std over ``(N, H, W)``; a constant channel gets std 1."""
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    std = np.where(std > 1e-12, std, 1.0)
    return mean, std


def split_bounds(n):
    return int(0.8 * n), int(0.9 * n)


# ---------------------------------------------------------- field helpers


def sinusoid_field(rng, H, W, n_waves=8, k_max=3, k_min=1, decay=1.0):
    """Sum of ``n_waves`` plane waves with integer wavenumbers, periodic on the grid."""
    y = np.arange(H)[:, None] / H
    x = np.arange(W)[None, :] / W
    out = np.zeros((H, W))
    for _ in range(n_waves):
        kx = rng.integers(k_min, k_max + 1) * rng.choice([-1, 1])
        ky = rng.integers(0, k_max + 1)
        amp = rng.standard_normal() / (1.0 + decay * math.hypot(kx, ky)) * 2.0
        phase = rng.uniform(0.0, 2.0 * math.pi)
        out += amp * np.cos(2.0 * math.pi * (kx * x + ky * y) + phase)
    return out


def spectral_field(rng, H, W, k0=3.0):
    """Gaussian random field with a Gaussian spectral filter, zero mean and unit std."""
    noise = rng.standard_normal((H, W))
    ky = np.fft.fftfreq(H) * H
    kx = np.fft.fftfreq(W) * W
    k2 = ky[:, None] ** 2 + kx[None, :] ** 2
    field_ = np.fft.ifft2(np.fft.fft2(noise) * np.exp(-k2 / (k0 * k0))).real
    field_ -= field_.mean()
    s = field_.std()
    return field_ / s if s > 0 else field_


def _label(task, source):
    return f"{task}.source" if source else task


# -------------------------------------------------------------- downscale


DOWNSCALE_DEFAULTS = {"n_waves": 8, "k_max": 3, "coupling": 0.5, "decay": 0.3}
DOWNSCALE_SOURCE = {"n_waves": 8, "k_max": 2, "coupling": 0.2, "decay": 0.6}


def gen_downscale(seed, n_samples=100, grid=None, factor=4, n_vars=3, source=False, **overrides):
    """Coarse-to-fine pairs; the model learns the residual ``truth - input``.

    ``truth`` mixes independent sinusoid sums through a coupling matrix,
    ``coarse = avg_pool(truth)`` and ``input = bilinear_upsample(coarse)``.
    """
    grid = grid or GridSpec(32, 32)
    if grid.H % factor or grid.W % factor:
        raise ConfigError(f"grid {grid.H}x{grid.W} is not divisible by factor {factor}")
    p = {**(DOWNSCALE_SOURCE if source else DOWNSCALE_DEFAULTS), **overrides}
    label = _label("downscale", source)
    crng = stream(seed, label + ".coupling")
    coupling = np.eye(n_vars) + p["coupling"] * crng.uniform(-1.0, 1.0, (n_vars, n_vars)) * (
        1 - np.eye(n_vars)
    )
    truth = np.empty((n_samples, n_vars, grid.H, grid.W))
    for j in range(n_samples):
        rng = stream(seed, label + ".sample", j)
        raw = np.stack(
            [
                sinusoid_field(rng, grid.H, grid.W, int(p["n_waves"]), int(p["k_max"]), decay=p["decay"])
                for _ in range(n_vars)
            ]
        )
        truth[j] = np.tensordot(coupling, raw, axes=1)
    coarse = T.avg_pool_2d(truth, factor).data
    inputs = T.bilinear_upsample_2d(coarse, factor).data
    names = [f"var{v}" for v in range(n_vars)]
    train_end, val_end = split_bounds(n_samples)
    return GridDataset(
        task="downscale",
        inputs=inputs,
        targets=truth,
        variables=names,
        target_names=list(names),
        grid=grid,
        seed=seed,
        train_end=train_end,
        val_end=val_end,
        extras={"coarse": coarse},
        params={"factor": factor, "source": int(source), **p},
    )


# --------------------------------------------------------------- ensemble


ENSEMBLE_DEFAULTS = {"bias_scale": 0.5, "bias_noise": 0.3, "noise_std": 0.4, "noise_variation": 0.5}
ENSEMBLE_SOURCE = {"bias_scale": 0.3, "bias_noise": 0.2, "noise_std": 0.5, "noise_variation": 0.3}


def gen_ensemble(seed, n_samples=100, grid=None, members=10, n_vars=2, source=False, **overrides):
    """Biased ensembles around a smooth truth.

    Member ``m`` is ``truth + bias + noise_m``.  The bias field is smooth and
    shared by all members: a fixed pattern per dataset (learnable) plus a
    per-sample part the members cannot see (so a calibrated forecast must
    widen its spread).  Member noise is i.i.d. with a std that varies
    smoothly in space.  Inputs are the ``(mu, sigma)`` channels of each
    variable; targets are the truth fields.
    """
    if members < 2:
        raise ConfigError("an ensemble needs at least two members")
    grid = grid or GridSpec(32, 32)
    p = {**(ENSEMBLE_SOURCE if source else ENSEMBLE_DEFAULTS), **overrides}
    label = _label("ensemble", source)
    H, W = grid.H, grid.W
    brng = stream(seed, label + ".bias")
    pattern = np.stack([spectral_field(brng, H, W, 2.0) for _ in range(n_vars)])
    mu = np.empty((n_samples, n_vars, H, W))
    sigma = np.empty_like(mu)
    truth = np.empty_like(mu)
    for j in range(n_samples):
        rng = stream(seed, label + ".sample", j)
        for v in range(n_vars):
            t = sinusoid_field(rng, H, W, 8, 3)
            bias = p["bias_scale"] * pattern[v] + p["bias_noise"] * spectral_field(rng, H, W, 2.0)
            scale = p["noise_std"] * np.exp(p["noise_variation"] * spectral_field(rng, H, W, 2.0))
            ens = t + bias + scale * rng.standard_normal((members, H, W))
            truth[j, v] = t
            mu[j, v] = ens.mean(axis=0)
            sigma[j, v] = np.maximum(ens.std(axis=0), SIGMA_FLOOR)
    inputs = np.concatenate([mu, sigma], axis=1)
    names = [f"var{v}" for v in range(n_vars)]
    train_end, val_end = split_bounds(n_samples)
    clim_mean = truth[:train_end].mean(axis=0)
    clim_std = truth[:train_end].std(axis=0)
    clim_std = np.where(clim_std > 1e-12, clim_std, 1.0)
    efi = np.tanh((mu - clim_mean) / (2.0 * clim_std))
    return GridDataset(
        task="ensemble",
        inputs=inputs,
        targets=truth,
        variables=[f"{n}_mean" for n in names] + [f"{n}_std" for n in names],
        target_names=names,
        grid=grid,
        seed=seed,
        train_end=train_end,
        val_end=val_end,
        extras={"ens_mean": mu, "ens_std": sigma, "efi": efi},
        params={"members": members, "source": int(source), **p},
    )


def gaussian_correction(out1, out2, mu_ens, sigma_ens):
    """``(out1 * sigma + mu, exp(out2) * sigma)``; works on arrays or tensors."""
    if isinstance(out1, T.Tensor) or isinstance(out2, T.Tensor):
        return out1 * sigma_ens + mu_ens, T.exp(out2) * sigma_ens
    out1, out2 = np.asarray(out1, np.float64), np.asarray(out2, np.float64)
    return out1 * sigma_ens + mu_ens, np.exp(out2) * sigma_ens


# ----------------------------------------------------------------- precip


PRECIP_DEFAULTS = {"wind_max": 1.5, "diffusion": 0.05, "threshold": 0.5, "gain": 2.0, "k0": 3.0}
PRECIP_SOURCE = {"wind_max": 1.0, "diffusion": 0.1, "threshold": 0.6, "gain": 1.5, "k0": 4.0}


def advect_diffuse(q, u, v, kappa, steps):
    """Exact spectral solution of ``q_t + u q_x + v q_y = kappa lap(q)`` on a periodic grid.

    ``u`` and ``v`` are in grid cells per step.
    """
    H, W = q.shape
    ky = 2.0 * math.pi * np.fft.fftfreq(H)[:, None]
    kx = 2.0 * math.pi * np.fft.fftfreq(W)[None, :]
    if u == 0 and v == 0 and kappa == 0:
        return q.copy()
    factor = np.exp(-1j * (kx * u + ky * v) * steps - kappa * (kx * kx + ky * ky) * steps)
    return np.fft.ifft2(np.fft.fft2(q) * factor).real


def precip_from_moisture(q, threshold, gain):
    return np.maximum(0.0, q - threshold) * gain


def gen_precip(seed, n_samples=100, grid=None, leads=(1, 2, 3), source=False, **overrides):
    """Sparse precipitation nowcasting from an advected, diffusing moisture field.

    Inputs are the current ``(precip, moisture, u, v)`` fields; targets are
    the precipitation at each lead.
    """
    grid = grid or GridSpec(32, 32)
    p = {**(PRECIP_SOURCE if source else PRECIP_DEFAULTS), **overrides}
    label = _label("precip", source)
    H, W = grid.H, grid.W
    inputs = np.empty((n_samples, 4, H, W))
    targets = np.empty((n_samples, len(leads), H, W))
    for j in range(n_samples):
        rng = stream(seed, label + ".sample", j)
        q = spectral_field(rng, H, W, p["k0"])
        u, v = rng.uniform(-p["wind_max"], p["wind_max"], 2)
        inputs[j, 0] = precip_from_moisture(q, p["threshold"], p["gain"])
        inputs[j, 1] = q
        inputs[j, 2] = u
        inputs[j, 3] = v
        for i, lead in enumerate(leads):
            q_t = advect_diffuse(q, u, v, p["diffusion"], lead)
            targets[j, i] = precip_from_moisture(q_t, p["threshold"], p["gain"])
    train_end, val_end = split_bounds(n_samples)
    return GridDataset(
        task="precip",
        inputs=inputs,
        targets=targets,
        variables=["precip", "moisture", "u", "v"],
        target_names=[f"lead{lead}" for lead in leads],
        grid=grid,
        seed=seed,
        train_end=train_end,
        val_end=val_end,
        params={"source": int(source), **p},
    )


GENERATORS = {"downscale": gen_downscale, "ensemble": gen_ensemble, "precip": gen_precip}


def generate(task, seed, n_samples=100, source=False, **kwargs):
    if task not in GENERATORS:
        raise ConfigError(f"unknown task {task!r}; expected one of {', '.join(TASKS)}")
    return GENERATORS[task](seed, n_samples, source=source, **kwargs)


# ------------------------------------------------------------ persistence


MANIFEST = "manifest.txt"
_EXTRA_FILES = ("coarse", "ens_mean", "ens_std", "efi")


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def save_dataset(ds, path):
    os.makedirs(path, exist_ok=True)
    n, V, H, W = ds.inputs.shape
    lines = [
        f"task = {ds.task}",
        f"seed = {ds.seed}",
        f"n = {n}",
        f"V = {V}",
        f"V_out = {ds.targets.shape[1]}",
        f"H = {H}",
        f"W = {W}",
        f"variables = {','.join(ds.variables)}",
        f"targets = {','.join(ds.target_names)}",
        f"train_end = {ds.train_end}",
        f"val_end = {ds.val_end}",
        f"lon = {','.join(repr(float(x)) for x in ds.grid.lon)}",
    ]
    for i, name in enumerate(ds.variables):
        lines.append(f"mean.{name} = {float(ds.mean[i])!r}")
        lines.append(f"std.{name} = {float(ds.std[i])!r}")
    for i, name in enumerate(ds.target_names):
        lines.append(f"target_mean.{name} = {float(ds.target_mean[i])!r}")
        lines.append(f"target_std.{name} = {float(ds.target_std[i])!r}")
    for key in sorted(ds.params):
        lines.append(f"param.{key} = {_fmt(ds.params[key])}")
    with open(os.path.join(path, MANIFEST), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    save_tensor(os.path.join(path, "inputs.wpft"), ds.inputs)
    save_tensor(os.path.join(path, "targets.wpft"), ds.targets)
    save_tensor(os.path.join(path, "lat.wpft"), np.asarray(ds.grid.lat))
    for key in _EXTRA_FILES:
        if key in ds.extras:
            save_tensor(os.path.join(path, key + ".wpft"), ds.extras[key])


def read_manifest(path):
    fname = os.path.join(path, MANIFEST)
    out = {}
    with open(fname, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"{fname}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def _param_value(text):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def load_dataset(path):
    m = read_manifest(path)
    try:
        n, V, V_out, H, W = (int(m[k]) for k in ("n", "V", "V_out", "H", "W"))
        variables = m["variables"].split(",")
        target_names = m["targets"].split(",")
        lon = tuple(float(x) for x in m["lon"].split(","))
    except KeyError as exc:
        raise FormatError(f"manifest in {path} lacks key {exc}") from None
    inputs = load_tensor(os.path.join(path, "inputs.wpft"))
    targets = load_tensor(os.path.join(path, "targets.wpft"))
    lat = load_tensor(os.path.join(path, "lat.wpft"))
    if inputs.shape != (n, V, H, W):
        raise FormatError(f"inputs shape {inputs.shape} does not match manifest {(n, V, H, W)}")
    if targets.shape != (n, V_out, H, W):
        raise FormatError(f"targets shape {targets.shape} does not match manifest {(n, V_out, H, W)}")
    if lat.shape != (H,) or len(lon) != W:
        raise FormatError(f"latitude vector {lat.shape} does not match manifest grid {H}x{W}")
    if len(variables) != V or len(target_names) != V_out:
        raise FormatError("variable lists do not match the manifest channel counts")
    extras = {}
    for key in _EXTRA_FILES:
        fname = os.path.join(path, key + ".wpft")
        if os.path.exists(fname):
            extras[key] = load_tensor(fname)
    params = {k[len("param."):]: _param_value(v) for k, v in m.items() if k.startswith("param.")}
    return GridDataset(
        task=m["task"],
        inputs=inputs,
        targets=targets,
        variables=variables,
        target_names=target_names,
        grid=GridSpec(H, W, lat=tuple(float(x) for x in lat), lon=lon),
        seed=int(m["seed"]),
        train_end=int(m["train_end"]),
        val_end=int(m["val_end"]),
        mean=np.array([float(m[f"mean.{v}"]) for v in variables]),
        std=np.array([float(m[f"std.{v}"]) for v in variables]),
        target_mean=np.array([float(m[f"target_mean.{v}"]) for v in target_names]),
        target_std=np.array([float(m[f"target_std.{v}"]) for v in target_names]),
        extras=extras,
        params=params,
    )
