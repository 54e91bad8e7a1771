"""Stochastic Fisher-guided parameter selection.

Each optimisation step

1. estimates the diagonal Fisher information of the backbone parameters
   from squared per-sample score gradients,
2. adds uniform noise whose scale decays linearly to zero over the run,
3. keeps the top ``ceil(k * n)`` coordinates of the noisy score, and
4. applies an AdamW update to those coordinates only.  Parameters outside
   the selection domain (prompt generators, heads) update normally.

The score gradient of a sample is the gradient of its negative
log-likelihood.  Objectives express this as a multiple of the gradient of
their mean training loss (``Objective.score_scale``), so one backward pass
per sample serves both the update and the Fisher estimate.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .rng import stream
from .tensor import GradientSession


# ------------------------------------------------------------- optimiser


class AdamW:
    """AdamW with optional per-coordinate masks.

    Where a mask is zero the parameter, both moments, and the step counter
    stay untouched, so a coordinate that re-enters the mask resumes from
    its own history.
    """

    def __init__(self, store, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.05):
        self.store = store
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = {}

    def _slot(self, name):
        if name not in self.state:
            shape = self.store[name].tensor.shape
            self.state[name] = {
                "m": np.zeros(shape),
                "v": np.zeros(shape),
                "step": np.zeros(shape),
            }
        return self.state[name]

    def step(self, grads, lr, masks=None):
        """Apply one update; returns the number of coordinates changed."""
        masks = masks or {}
        updated = 0
        for name, g in grads.items():
            param = self.store[name]
            if not param.trainable:
                raise ContractError(f"gradient supplied for frozen parameter {name!r}")
            if g.shape != param.tensor.shape:
                raise ContractError(f"gradient shape {g.shape} != parameter shape for {name}")
            slot = self._slot(name)
            p = param.tensor.data
            t = slot["step"] + 1.0
            m = self.beta1 * slot["m"] + (1.0 - self.beta1) * g
            v = self.beta2 * slot["v"] + (1.0 - self.beta2) * (g * g)
            bc1 = 1.0 - np.power(self.beta1, t)
            bc2 = 1.0 - np.power(self.beta2, t)
            denom = np.sqrt(v) / np.sqrt(bc2) + self.eps
            new = p * (1.0 - lr * self.weight_decay) - (lr / bc1) * (m / denom)
            mask = masks.get(name)
            if mask is None:
                p[...] = new
                slot["m"], slot["v"], slot["step"] = m, v, t
                updated += p.size
            else:
                p[...] = np.where(mask, new, p)
                slot["m"] = np.where(mask, m, slot["m"])
                slot["v"] = np.where(mask, v, slot["v"])
                slot["step"] = np.where(mask, t, slot["step"])
                updated += int(mask.sum())
        return updated

    def state_entries(self):
        out = {}
        for name, slot in self.state.items():
            for key in ("m", "v", "step"):
                out[f"{name}.opt.{key}"] = slot[key]
        return out

    def load_state_entries(self, entries):
        for key, arr in entries.items():
            name, _, part = key.rpartition(".opt.")
            if not name:
                continue
            self._slot(name)[part] = np.array(arr, dtype=np.float64)


# ------------------------------------------------------------ gradients


def batch_gradients(model, objective, batch, names):
    """Mean-loss gradients of ``batch`` in one backward pass."""
    session = GradientSession()
    P = model.params.bind(session)
    loss = objective.loss(model, batch, session, P)
    grads = session.backward(loss)
    return loss.item(), {n: grads[P[n]] for n in names if P[n] in grads}


def per_sample_gradients(model, objective, batch, names):
    """One backward pass per sample; returns ``[(loss_j, grads_j), ...]``."""
    out = []
    for j in range(len(batch)):
        out.append(batch_gradients(model, objective, batch.take(j), names))
    return out


def average_gradients(results):
    """Mean loss and mean gradients of ``per_sample_gradients`` output."""
    n = len(results)
    total, loss = {}, 0.0
    for loss_j, g_j in results:
        loss += loss_j
        for name, g in g_j.items():
            total[name] = total[name] + g if name in total else g.copy()
    return loss / n, {name: g / n for name, g in total.items()}


def _flat(grads, names, store):
    return np.concatenate(
        [grads[n].reshape(-1) if n in grads else np.zeros(store[n].size) for n in names]
    )


def estimate_fisher(model, objective, batch, names, mode="per_sample"):
    """Diagonal Fisher estimate over ``names``, flattened in store order.

    ``per_sample`` averages the squared score of every sample; ``batch_mean``
    squares the score of the batch-mean loss, which is cheaper but biased.
    """
    fisher, _, _ = _fisher_and_grads(model, objective, batch, names, names, mode)
    return fisher


def _fisher_and_grads(model, objective, batch, domain, names, mode):
    if len(batch) == 0:
        raise ContractError("estimate_fisher needs a non-empty batch")
    store = model.params
    if mode == "per_sample":
        results = per_sample_gradients(model, objective, batch, names)
        fisher = np.zeros(sum(store[d].size for d in domain))
        for j, (_, g_j) in enumerate(results):
            score = objective.score_scale(batch.take(j)) * _flat(g_j, domain, store)
            fisher += score * score
        loss, grads = average_gradients(results)
        return fisher / len(results), grads, loss
    if mode == "batch_mean":
        loss, grads = batch_gradients(model, objective, batch, names)
        score = objective.score_scale(batch.take(0)) * _flat(grads, domain, store)
        return score * score, grads, loss
    raise ContractError(f"unknown Fisher mode {mode!r}")


# ------------------------------------------------------------ selection


def noise_scale(gamma, ns, ts):
    return gamma * (1.0 - ns / ts)


def perturb(fisher, ns, ts, gamma, seed):
    """``gamma * (1 - ns/ts) * U + fisher`` with ``U ~ Uniform[0, 1)`` per entry.

    The uniform draw is keyed by ``(seed, "sfas", ns)``.
    """
    if ts < 1 or not 0 <= ns <= ts:
        raise ContractError(f"need 0 <= ns <= ts and ts >= 1, got ns={ns}, ts={ts}")
    if gamma < 0:
        raise ContractError("gamma must be non-negative")
    scale = noise_scale(gamma, ns, ts)
    if scale == 0.0:
        return np.array(fisher, dtype=np.float64, copy=True)
    noise = stream(seed, "sfas", ns).random(len(fisher))
    return scale * noise + fisher


def selection_size(k, n):
    if not 0 < k <= 1:
        raise ContractError(f"k must lie in (0, 1], got {k}")
    # rounding guards against k*n landing a hair above an integer
    return min(n, math.ceil(round(k * n, 9)))


def select_topk(scores, k):
    """Boolean mask of the ``ceil(k*n)`` largest scores; ties go to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    m = selection_size(k, len(scores))
    order = np.argsort(-scores, kind="stable")
    mask = np.zeros(len(scores), dtype=bool)
    mask[order[:m]] = True
    return mask


def masked_step(store, grads, mask, opt, lr, domain):
    """AdamW step in which ``domain`` parameters move only where ``mask`` is set.

    ``mask`` is flat over ``domain`` in store order.  Returns the number of
    coordinates changed.
    """
    total = sum(store[n].size for n in domain)
    if len(mask) != total:
        raise ContractError(f"mask has {len(mask)} entries, domain has {total}")
    masks = store.split(np.asarray(mask, dtype=bool), domain)
    return opt.step(grads, lr, masks)


# --------------------------------------------------------------- state


@dataclass
class FisherState:
    domain: list
    k: float = 0.001
    gamma: float = 0.2
    ts: int = 1
    seed: int = 0
    mode: str = "per_sample"
    ns: int = 0
    fisher: np.ndarray = None
    scores: np.ndarray = None
    mask: np.ndarray = None
    ever_selected: np.ndarray = None
    stats: list = field(default_factory=list)

    def __post_init__(self):
        if self.ts < 1:
            raise ContractError("total steps must be >= 1")


def jaccard(a, b):
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0


def sfas_step(model, objective, batch, state, opt, lr):
    """One fused step: gradients, Fisher, noise, selection, masked update.

    Trainable parameters outside ``state.domain`` update without a mask.
    Returns the mean batch loss.
    """
    if state.ns >= state.ts:
        raise ContractError(f"step {state.ns} is past the scheduled {state.ts} steps")
    store = model.params
    names = store.names(trainable=True)
    fisher, grads, loss = _fisher_and_grads(
        model, objective, batch, state.domain, names, state.mode
    )
    scores = perturb(fisher, state.ns, state.ts, state.gamma, state.seed)
    mask = select_topk(scores, state.k)

    prev = state.mask
    state.stats.append(
        {
            "step": state.ns,
            "selected_count": int(mask.sum()),
            "overlap_with_prev": "" if prev is None else jaccard(prev, mask),
            "noise_scale": noise_scale(state.gamma, state.ns, state.ts),
            "max_F": float(fisher.max()),
            "median_F": float(np.median(fisher)),
        }
    )
    masked_step(store, grads, mask, opt, lr, state.domain)
    state.fisher, state.scores, state.mask = fisher, scores, mask
    state.ever_selected = mask.copy() if state.ever_selected is None else state.ever_selected | mask
    state.ns += 1
    return loss


MASK_STATS_COLUMNS = ("step", "selected_count", "overlap_with_prev", "noise_scale", "max_F", "median_F")


def write_mask_stats(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MASK_STATS_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def freeze_audit(store, domain, reference, ever_selected):
    """True if every never-selected coordinate still equals ``reference`` bit for bit."""
    current = store.flatten(domain)
    ref = np.concatenate([np.asarray(reference[n]).reshape(-1) for n in domain])
    untouched = ~ever_selected if ever_selected is not None else np.ones(len(current), bool)
    return bool(np.array_equal(current[untouched].view(np.uint64), ref[untouched].view(np.uint64)))


# ------------------------------------------------------------ diagnostics


def kl_quadratic_check(model, inputs, name, index, eps_ladder, fd_step=1e-6):
    """Mean Gaussian KL between the model and a one-coordinate perturbation.

    The predictive distribution is taken as unit-variance Gaussian around
    the model output, so ``KL = 0.5 * sum((f(theta) - f(theta + eps e_i))^2)``
    per input.  Returns the ``KL / eps^2`` ladder together with the expected
    Fisher entry ``mean_x sum_o (d f_o / d theta_i)^2`` (central differences)
    and the ratio between the two at the smallest ``eps``.
    """
    data = model.params[name].tensor.data
    flat = data.reshape(-1)
    base_value = flat[index]
    base = np.asarray(model.forward(inputs).data)
    n = base.shape[0] if base.ndim > 0 else 1

    def outputs_at(value):
        flat[index] = value
        try:
            return np.asarray(model.forward(inputs).data)
        finally:
            flat[index] = base_value

    ratios = []
    for eps in eps_ladder:
        diff = base - outputs_at(base_value + eps)
        kl = 0.5 * float(np.sum(diff * diff)) / n
        ratios.append(kl / (eps * eps))
    jac = (outputs_at(base_value + fd_step) - outputs_at(base_value - fd_step)) / (2 * fd_step)
    fisher = float(np.sum(jac * jac)) / n
    constant = ratios[-1] / fisher if fisher > 0 else None
    return {"eps": list(eps_ladder), "ratio": ratios, "fisher": fisher, "constant": constant}
