"""A small pre-norm ViT over gridded fields.

``X (V, H, W)`` is cut into ``Ph x Pw`` patches, linearly embedded into
``M = (H/Ph)(W/Pw)`` tokens of width ``D``, passed through ``L`` transformer
blocks and mapped back to a ``(V_out, H, W)`` field by a per-token linear
head.  Fine-tuning attachments (LoRA, SSF, AdaptFormer, VPT and TADP
prompts) live on the same object and are switched on by
:mod:`gridpeft.peft`.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .params import ParamStore
from .rng import stream, trunc_normal
from .tadp import inject, strip_prompts


@dataclass(frozen=True)
class BackboneConfig:
    in_vars: int
    out_vars: int
    height: int
    width: int
    patch_h: int = 4
    patch_w: int = 4
    dim: int = 32
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.height % self.patch_h or self.width % self.patch_w:
            raise ConfigError(
                f"grid {self.height}x{self.width} is not divisible by patch "
                f"{self.patch_h}x{self.patch_w}"
            )
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")

    @property
    def n_tokens(self):
        return (self.height // self.patch_h) * (self.width // self.patch_w)

    @property
    def patch_size(self):
        return self.patch_h * self.patch_w


def block_param_count(dim, mlp_ratio):
    d, r = dim, mlp_ratio
    return (4 * d * d + 4 * d) + (2 * r * d * d + (r + 1) * d) + 4 * d


def parameter_count(config):
    c = config
    embed = c.dim * c.in_vars * c.patch_size + c.dim
    head = c.dim * c.out_vars * c.patch_size + c.out_vars * c.patch_size
    return embed + c.depth * block_param_count(c.dim, c.mlp_ratio) + head


def position_encoding(n_tokens, dim):
    pos = np.arange(n_tokens)[:, None]
    i = np.arange(0, dim, 2)[None, :]
    angle = pos / np.power(10000.0, i / dim)
    pe = np.zeros((n_tokens, dim))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : dim // 2])
    return pe


class Backbone:
    def __init__(self, config, seed=0):
        self.config = config
        self.params = ParamStore()
        self.pos = T.Tensor(position_encoding(config.n_tokens, config.dim))
        # attachments, configured by gridpeft.peft
        self.lora = None
        self.ssf = False
        self.adaptformer = None
        self.vpt = None
        self.tadp = None
        self.prompts_enabled = True
        self._init_params(seed)

    def _init_params(self, seed):
        c, s = self.config, self.params
        rng = stream(seed, "backbone.init")
        d, hidden = c.dim, c.dim * c.mlp_ratio
        s.add("embed.weight", trunc_normal(rng, (d, c.in_vars, c.patch_h, c.patch_w)), "embedding")
        s.add("embed.bias", np.zeros(d), "embedding")
        for i in range(c.depth):
            p = f"blocks.{i}."
            s.add(p + "norm1.weight", np.ones(d), "backbone")
            s.add(p + "norm1.bias", np.zeros(d), "backbone")
            for name in ("q", "k", "v", "out"):
                s.add(p + f"attn.{name}.weight", trunc_normal(rng, (d, d)), "backbone")
                s.add(p + f"attn.{name}.bias", np.zeros(d), "backbone")
            s.add(p + "norm2.weight", np.ones(d), "backbone")
            s.add(p + "norm2.bias", np.zeros(d), "backbone")
            s.add(p + "mlp.fc1.weight", trunc_normal(rng, (d, hidden)), "backbone")
            s.add(p + "mlp.fc1.bias", np.zeros(hidden), "backbone")
            s.add(p + "mlp.fc2.weight", trunc_normal(rng, (hidden, d)), "backbone")
            s.add(p + "mlp.fc2.bias", np.zeros(d), "backbone")
        out = c.out_vars * c.patch_size
        s.add("head.weight", trunc_normal(rng, (d, out)), "head")
        s.add("head.bias", np.zeros(out), "head")

    def named_parameters(self):
        return self.params

    # ------------------------------------------------------------- forward

    def embed(self, x, P=None):
        """``(N, V, H, W)`` fields -> ``(N, M, D)`` tokens."""
        P = self.params.bind() if P is None else P
        c = self.config
        x = T.as_tensor(x)
        if x.ndim != 4 or x.shape[1:] != (c.in_vars, c.height, c.width):
            if x.ndim == 4 and (x.shape[2] % c.patch_h or x.shape[3] % c.patch_w):
                raise ConfigError(f"grid {x.shape[2:]} not divisible by patch size")
            raise DimensionError(
                f"expected input (N, {c.in_vars}, {c.height}, {c.width}), got {x.shape}"
            )
        n = x.shape[0]
        gh, gw = c.height // c.patch_h, c.width // c.patch_w
        patches = T.reshape(x, (n, c.in_vars, gh, c.patch_h, gw, c.patch_w))
        patches = T.permute(patches, (0, 2, 4, 1, 3, 5))
        patches = T.reshape(patches, (n, gh * gw, c.in_vars * c.patch_size))
        kernel = T.reshape(P["embed.weight"], (c.dim, c.in_vars * c.patch_size))
        tokens = T.matmul(patches, T.swap_last2(kernel)) + P["embed.bias"]
        return tokens + self.pos

    def _linear(self, x, prefix, P, block):
        y = T.matmul(x, P[prefix + ".weight"]) + P[prefix + ".bias"]
        if self.lora is not None and prefix.rsplit(".", 1)[-1] in self.lora["targets"]:
            low = T.matmul(T.matmul(x, P[prefix + ".lora_a"]), P[prefix + ".lora_b"])
            y = y + low * (self.lora["alpha"] / self.lora["rank"])
        if self.ssf:
            y = self._ssf(y, prefix, block, P)
        return y

    def _ssf(self, y, prefix, block, P):
        key = prefix.replace(f"blocks.{block}.", f"blocks.{block}.ssf.", 1)
        return y * P[key + ".scale"] + P[key + ".shift"]

    def attention(self, h, block, P=None, return_weights=False):
        P = self.params.bind() if P is None else P
        c = self.config
        n, t, d = h.shape
        nh, dh = c.heads, d // c.heads
        pre = f"blocks.{block}.attn."

        def heads(z):
            return T.permute(T.reshape(z, (n, t, nh, dh)), (0, 2, 1, 3))

        q = heads(self._linear(h, pre + "q", P, block))
        k = heads(self._linear(h, pre + "k", P, block))
        v = heads(self._linear(h, pre + "v", P, block))
        weights = T.softmax_lastdim(T.matmul(q, T.swap_last2(k)) * (1.0 / math.sqrt(dh)))
        ctx = T.reshape(T.permute(T.matmul(weights, v), (0, 2, 1, 3)), (n, t, d))
        out = self._linear(ctx, pre + "out", P, block)
        return (out, weights) if return_weights else out

    def block_forward(self, tokens, block, P=None):
        """Pre-norm residual attention, then pre-norm residual MLP."""
        P = self.params.bind() if P is None else P
        tokens = T.as_tensor(tokens)
        squeeze = tokens.ndim == 2
        if squeeze:
            tokens = T.reshape(tokens, (1,) + tokens.shape)
        if tokens.shape[-1] != self.config.dim:
            raise DimensionError(
                f"block expects width {self.config.dim}, got tokens {tokens.shape}"
            )
        pre = f"blocks.{block}."
        h = T.layernorm_lastdim(tokens, P[pre + "norm1.weight"], P[pre + "norm1.bias"])
        if self.ssf:
            h = self._ssf(h, pre + "norm1", block, P)
        x = tokens + self.attention(h, block, P)
        h = T.layernorm_lastdim(x, P[pre + "norm2.weight"], P[pre + "norm2.bias"])
        if self.ssf:
            h = self._ssf(h, pre + "norm2", block, P)
        h = T.gelu(self._linear(h, pre + "mlp.fc1", P, block))
        out = x + self._linear(h, pre + "mlp.fc2", P, block)
        if self.adaptformer is not None:
            a = pre + "adaptformer."
            side = T.gelu(T.matmul(x, P[a + "down.weight"]) + P[a + "down.bias"])
            side = T.matmul(side, P[a + "up.weight"]) + P[a + "up.bias"]
            out = out + side * self.adaptformer["scale"]
        return T.reshape(out, out.shape[1:]) if squeeze else out

    def head(self, tokens, P=None):
        """``(N, M, D)`` tokens -> ``(N, V_out, H, W)`` field."""
        P = self.params.bind() if P is None else P
        c = self.config
        n = tokens.shape[0]
        gh, gw = c.height // c.patch_h, c.width // c.patch_w
        y = T.matmul(tokens, P["head.weight"]) + P["head.bias"]
        y = T.reshape(y, (n, gh, gw, c.out_vars, c.patch_h, c.patch_w))
        y = T.permute(y, (0, 3, 1, 4, 2, 5))
        return T.reshape(y, (n, c.out_vars, c.height, c.width))

    def prompt_tokens(self, block, P, cache):
        if not self.prompts_enabled:
            return None
        if self.tadp is not None:
            if "tadp" not in cache:
                cache["tadp"] = self.tadp.generate(P["embed.weight"], P)
            return cache["tadp"]
        if self.vpt is not None:
            return P[f"vpt.prompts.{block}"]
        return None

    def forward(self, x, session=None, P=None):
        """Predict ``(N, V_out, H, W)`` (or ``(V_out, H, W)`` for a single field)."""
        P = self.params.bind(session) if P is None else P
        x = T.as_tensor(x)
        single = x.ndim == 3
        if single:
            x = T.reshape(x, (1,) + x.shape)
        tokens = self.embed(x, P)
        cache, n_prev = {}, 0
        for i in range(self.config.depth):
            prompts = self.prompt_tokens(i, P, cache)
            if prompts is not None:
                tokens = inject(tokens, prompts, i, n_prev)
                n_prev = prompts.shape[0]
            tokens = self.block_forward(tokens, i, P)
        tokens = strip_prompts(tokens, n_prev)
        out = self.head(tokens, P)
        return T.reshape(out, out.shape[1:]) if single else out

    def predict(self, x, batch_size=16):
        """Forward pass without gradients, as a numpy array, in chunks."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            return self.forward(x).data
        parts = [self.forward(x[i:i + batch_size]).data for i in range(0, len(x), batch_size)]
        return np.concatenate(parts, axis=0)
