"""Per-task training losses and the batches they consume.

All losses work in normalised units so that the three tasks train at
comparable learning rates:

* downscale: MSE between the model output and the residual
  ``(truth - input) / std``;
* ensemble: mean closed-form CRPS of the corrected Gaussian, in units of
  the truth's training std;
* precip: MAE against ``precip / std``.

``score_scale`` converts the gradient of the mean loss of one sample into
the gradient of its negative log-likelihood (Gaussian, pseudo-likelihood
and Laplace respectively).
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tasks import gaussian_correction


@dataclass
class Batch:
    x: np.ndarray                   # normalised model inputs (N, V, H, W)
    y: np.ndarray                   # normalised targets (N, V_out, H, W)
    aux: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.x)

    def take(self, j):
        return self.select(slice(j, j + 1))

    def select(self, idx):
        return Batch(self.x[idx], self.y[idx], {k: v[idx] for k, v in self.aux.items()})


def _weights(variable_weights, n):
    if not variable_weights:
        return None
    w = np.asarray(variable_weights, np.float64)
    if w.shape != (n,):
        raise ConfigError(f"need {n} variable loss weights, got {len(w)}")
    return T.Tensor(w[None, :, None, None] * (n / w.sum()))


class Objective:
    task = None
    nll_factor = 1.0

    def __init__(self, variable_weights=None):
        self.variable_weights = variable_weights

    def out_vars(self, ds):
        return ds.targets.shape[1]

    def batch(self, ds, idx):
        raise NotImplementedError

    def elementwise(self, out, batch):
        raise NotImplementedError

    def loss(self, model, batch, session=None, P=None):
        out = model.forward(batch.x, session, P)
        err = self.elementwise(out, batch)
        w = _weights(self.variable_weights, err.shape[1])
        if w is not None:
            err = err * w
        return T.mean(err)

    def score_scale(self, batch):
        """``d NLL / d theta = score_scale * d loss / d theta`` for one sample."""
        return self.nll_factor * batch.y[0].size

    def predict(self, model, ds, idx, batch_size=16):
        """Model predictions in dataset units."""
        raise NotImplementedError


class DownscaleObjective(Objective):
    task = "downscale"
    nll_factor = 0.5

    def batch(self, ds, idx):
        inputs = ds.inputs[idx]
        y = (ds.targets[idx] - inputs) / ds.std[:, None, None]
        return Batch(ds.normalized_inputs(idx), y)

    def elementwise(self, out, batch):
        return T.square(out - batch.y)

    def predict(self, model, ds, idx, batch_size=16):
        out = model.predict(ds.normalized_inputs(idx), batch_size)
        return ds.inputs[idx] + out * ds.std[:, None, None]


class EnsembleObjective(Objective):
    """Two outputs per variable: a mean shift and a log spread factor."""

    task = "ensemble"
    nll_factor = 1.0

    def out_vars(self, ds):
        return 2 * ds.targets.shape[1]

    def _units(self, ds):
        return ds.target_mean[:, None, None], ds.target_std[:, None, None]

    def batch(self, ds, idx):
        m, s = self._units(ds)
        aux = {"mu": (ds.extras["ens_mean"][idx] - m) / s, "sigma": ds.extras["ens_std"][idx] / s}
        return Batch(ds.normalized_inputs(idx), (ds.targets[idx] - m) / s, aux)

    @staticmethod
    def split_outputs(out, n_vars):
        if out.shape[1] != 2 * n_vars:
            raise DimensionError(f"expected {2 * n_vars} output channels, got {out.shape[1]}")
        if isinstance(out, T.Tensor):
            return T.slice_axis(out, 1, 0, n_vars), T.slice_axis(out, 1, n_vars, 2 * n_vars)
        return out[:, :n_vars], out[:, n_vars:]

    def elementwise(self, out, batch):
        out1, out2 = self.split_outputs(out, batch.y.shape[1])
        mu, sigma = gaussian_correction(out1, out2, batch.aux["mu"], batch.aux["sigma"])
        return T.gaussian_crps(mu, sigma, batch.y)

    def predict(self, model, ds, idx, batch_size=16):
        """Corrected ``(mu, sigma)`` in dataset units."""
        out = model.predict(ds.normalized_inputs(idx), batch_size)
        out1, out2 = self.split_outputs(out, ds.targets.shape[1])
        return gaussian_correction(out1, out2, ds.extras["ens_mean"][idx], ds.extras["ens_std"][idx])


class PrecipObjective(Objective):
    task = "precip"
    nll_factor = 1.0

    def batch(self, ds, idx):
        return Batch(ds.normalized_inputs(idx), ds.targets[idx] / ds.std[0])

    def elementwise(self, out, batch):
        return T.abs_(out - batch.y)

    def predict(self, model, ds, idx, batch_size=16):
        return model.predict(ds.normalized_inputs(idx), batch_size) * ds.std[0]


OBJECTIVES = {"downscale": DownscaleObjective, "ensemble": EnsembleObjective, "precip": PrecipObjective}


def objective_for(task, variable_weights=None):
    if task not in OBJECTIVES:
        raise ConfigError(f"unknown task {task!r}")
    return OBJECTIVES[task](variable_weights)
