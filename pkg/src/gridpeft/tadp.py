"""Task-adaptive dynamic prompting.

Soft prompt tokens are generated from the patch-embedding weights ``E``
(shape ``D x V x Ph x Pw``) in two stages:

* internal patterns: three bottleneck adapters, over the patch window, the
  variables and the hidden width, with a cyclic axis shift between them;
* external integration: single-head self-attention over the
  ``V*Ph*Pw`` rows followed by a bottleneck MLP that emits ``P`` tokens.

The prompts are regenerated on every forward pass and prepended to the
token sequence before each transformer block.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .rng import stream


@dataclass(frozen=True)
class TADPConfig:
    dim: int
    in_vars: int
    patch_h: int
    patch_w: int
    prompt_len: int = 30
    hw_hidden: int = 8
    v_hidden: int = 5
    d_hidden: int = 16
    e_hidden: int = 16

    @property
    def window(self):
        return self.patch_h * self.patch_w

    @property
    def rows(self):
        return self.in_vars * self.window


def _adapter_param_count(n, h):
    return 2 * n + n * h + h + h * n + n


def _add_adapter(store, prefix, n, h, rng):
    store.add(prefix + "norm.weight", np.ones(n), "tadp")
    store.add(prefix + "norm.bias", np.zeros(n), "tadp")
    store.add(prefix + "down.weight", rng.standard_normal((n, h)) / math.sqrt(n), "tadp")
    store.add(prefix + "down.bias", np.zeros(h), "tadp")
    store.add(prefix + "up.weight", rng.standard_normal((h, n)) / math.sqrt(h), "tadp")
    store.add(prefix + "up.bias", np.zeros(n), "tadp")


def adapter_forward(x, P, prefix):
    """``up(GELU(down(LayerNorm(x))))`` over the last axis, no residual."""
    n = P[prefix + "norm.weight"].shape[0]
    if x.shape[-1] != n:
        raise DimensionError(f"adapter {prefix!r} expects width {n}, got {x.shape}")
    h = T.layernorm_lastdim(x, P[prefix + "norm.weight"], P[prefix + "norm.bias"])
    h = T.gelu(T.matmul(h, P[prefix + "down.weight"]) + P[prefix + "down.bias"])
    return T.matmul(h, P[prefix + "up.weight"]) + P[prefix + "up.bias"]


class PromptGenerator:
    """Owns the naming and shape bookkeeping of the prompt-generation weights."""

    def __init__(self, config, prefix="tadp."):
        self.config = config
        self.prefix = prefix

    def add_params(self, store, seed=0):
        c, p = self.config, self.prefix
        rng = stream(seed, "tadp.init")
        _add_adapter(store, p + "adapter_hw.", c.window, c.hw_hidden, rng)
        _add_adapter(store, p + "adapter_v.", c.in_vars, c.v_hidden, rng)
        _add_adapter(store, p + "adapter_d.", c.dim, c.d_hidden, rng)
        for name in ("query", "key", "value"):
            store.add(
                p + f"attn.{name}.weight",
                rng.standard_normal((c.dim, c.dim)) / math.sqrt(c.dim),
                "tadp",
            )
        store.add(
            p + "mlp.fc1.weight",
            rng.standard_normal((c.rows, c.e_hidden)) / math.sqrt(c.rows),
            "tadp",
        )
        store.add(p + "mlp.fc1.bias", np.zeros(c.e_hidden), "tadp")
        store.add(
            p + "mlp.fc2.weight",
            rng.standard_normal((c.e_hidden, c.prompt_len)) / math.sqrt(c.e_hidden),
            "tadp",
        )
        store.add(p + "mlp.fc2.bias", np.zeros(c.prompt_len), "tadp")

    def param_count(self):
        c = self.config
        return (
            _adapter_param_count(c.window, c.hw_hidden)
            + _adapter_param_count(c.in_vars, c.v_hidden)
            + _adapter_param_count(c.dim, c.d_hidden)
            + 3 * c.dim * c.dim
            + c.rows * c.e_hidden + c.e_hidden
            + c.e_hidden * c.prompt_len + c.prompt_len
        )

    def generate(self, E, P):
        """Prompt tokens ``(prompt_len, dim)`` from embedding weights ``E``."""
        return external_integration(internal_patterns(E, P, self.prefix), P, self.prefix)


def internal_patterns(E, P, prefix="tadp."):
    """``(D, V, Ph, Pw)`` embedding weights -> ``(V, Ph*Pw, D)`` features."""
    if E.ndim != 4:
        raise DimensionError(f"embedding weights must be rank 4, got {E.shape}")
    d, v, ph, pw = E.shape
    flat = T.reshape(E, (d, v, ph * pw))
    e_hw = T.pi_shift(adapter_forward(flat, P, prefix + "adapter_hw."))   # (PhPw, D, V)
    e_v = T.pi_shift(adapter_forward(e_hw, P, prefix + "adapter_v."))     # (V, PhPw, D)
    return adapter_forward(e_v, P, prefix + "adapter_d.")                 # (V, PhPw, D)


def self_attention(x, P, prefix="tadp."):
    """Single-head ``softmax(Q K^T / sqrt(D)) V`` over the rows of ``x``.

    Returns the output and the attention weights.
    """
    d = x.shape[-1]
    q = T.matmul(x, P[prefix + "attn.query.weight"])
    k = T.matmul(x, P[prefix + "attn.key.weight"])
    v = T.matmul(x, P[prefix + "attn.value.weight"])
    weights = T.softmax_lastdim(T.matmul(q, T.swap_last2(k)) * (1.0 / math.sqrt(d)))
    return T.matmul(weights, v), weights


def external_integration(e_d, P, prefix="tadp."):
    """``(V, Ph*Pw, D)`` features -> ``(P, D)`` prompt tokens."""
    if e_d.ndim != 3:
        raise DimensionError(f"expected (V, PhPw, D) features, got {e_d.shape}")
    v, w, d = e_d.shape
    rows = P[prefix + "mlp.fc1.weight"].shape[0]
    if v * w != rows or P[prefix + "attn.query.weight"].shape[0] != d:
        raise DimensionError(
            f"features {e_d.shape} do not match generator ({rows} rows, "
            f"width {P[prefix + 'attn.query.weight'].shape[0]})"
        )
    merged = T.reshape(e_d, (v * w, d))
    attended, _ = self_attention(merged, P, prefix)
    e_sa = T.pi_shift(attended)                                            # (D, V*PhPw)
    h = T.gelu(T.matmul(e_sa, P[prefix + "mlp.fc1.weight"]) + P[prefix + "mlp.fc1.bias"])
    out = T.matmul(h, P[prefix + "mlp.fc2.weight"]) + P[prefix + "mlp.fc2.bias"]  # (D, P)
    return T.pi_shift(out)


def inject(tokens, prompts, block_index, n_prev=0):
    """Prepend ``prompts`` to the token rows entering block ``block_index``.

    ``tokens`` is ``(M, D)`` or ``(N, M, D)``.  Before every block after the
    first, the ``n_prev`` prompt rows carried out of the previous block are
    dropped and replaced by a fresh copy.
    """
    if prompts.ndim != 2 or prompts.shape[-1] != tokens.shape[-1]:
        raise DimensionError(
            f"prompt width {prompts.shape} does not match tokens {tokens.shape}"
        )
    axis = tokens.ndim - 2
    if block_index > 0 and n_prev:
        tokens = T.slice_axis(tokens, axis, n_prev, tokens.shape[axis])
    if tokens.ndim == 3:
        prompts = T.broadcast_to(prompts, (tokens.shape[0],) + prompts.shape)
    return T.concat([prompts, tokens], axis=axis)


def strip_prompts(tokens, n_prompt):
    if not n_prompt:
        return tokens
    axis = tokens.ndim - 2
    return T.slice_axis(tokens, axis, n_prompt, tokens.shape[axis])
