"""Fine-tuning strategies and the trainability policies that select them.

Every attachment is an identity map at initialisation (LoRA ``B = 0``, SSF
scale one / shift zero, AdaptFormer zero up-projection), so a freshly
attached model reproduces its pretrained outputs exactly.  Prompt-based
methods (VPT, TADP) change the attention context and are the exception.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .params import REPORT_EXCLUDED_GROUPS
from .rng import stream
from .tadp import PromptGenerator, TADPConfig

POLICIES = (
    "full",
    "linear_probe",
    "bias_only",
    "lora",
    "ssf",
    "vpt",
    "adaptformer",
    "tadp_only",
    "sfas_only",
    "weatherpeft",
)
ALIASES = {"bias": "bias_only", "full_tuning": "full", "linear": "linear_probe"}
SFAS_POLICIES = ("sfas_only", "weatherpeft")
TADP_POLICIES = ("tadp_only", "weatherpeft")

DEFAULTS = {
    "lora.rank": 8,
    "lora.alpha": 1.0,
    "vpt.length": 50,
    "adaptformer.ratio": 0.25,
    "adaptformer.scale": 0.1,
    "tadp.prompt_len": 30,
    "tadp.hw_hidden": 8,
    "tadp.v_hidden": 5,
    "tadp.d_hidden": 16,
    "tadp.e_hidden": 16,
    "sfas.k": 0.001,
    "train_embedding": True,
}


def canonical_policy(policy):
    policy = ALIASES.get(policy, policy)
    if policy not in POLICIES:
        raise ConfigError(f"unknown policy {policy!r}; expected one of {', '.join(POLICIES)}")
    return policy


# --------------------------------------------------------------------- LoRA


def lora_forward(x, weight, bias, lora_a, lora_b, alpha, rank):
    """``x W + b + (alpha / rank) (x A) B`` with ``W: (d_in, d_out)``."""
    if x.shape[-1] != weight.shape[0] or lora_a.shape[0] != weight.shape[0]:
        raise DimensionError(f"lora input {x.shape} vs weight {weight.shape}")
    y = T.matmul(x, weight) + bias
    return y + T.matmul(T.matmul(x, lora_a), lora_b) * (alpha / rank)


def attach_lora(model, rank=8, alpha=1.0, targets=("q", "v"), seed=0):
    rng = stream(seed, "lora.init")
    d = model.config.dim
    for i in range(model.config.depth):
        for t in targets:
            p = f"blocks.{i}.attn.{t}."
            model.params.add(p + "lora_a", rng.standard_normal((d, rank)) * 0.02, "lora")
            model.params.add(p + "lora_b", np.zeros((rank, d)), "lora")
    model.lora = {"rank": rank, "alpha": float(alpha), "targets": tuple(targets)}


def merge_lora(model):
    """Fold ``(alpha / rank) A B`` into the frozen weights.

    The pre-merge weights are kept so that :func:`unmerge_lora` restores them
    exactly; floating-point subtraction alone would not.
    """
    if model.lora is None:
        raise ConfigError("model has no LoRA attachment")
    scale = model.lora["alpha"] / model.lora["rank"]
    saved = {}
    for name in _lora_targets(model):
        w = model.params[name + ".weight"].tensor
        delta = scale * (model.params[name + ".lora_a"].value @ model.params[name + ".lora_b"].value)
        saved[name] = (w.data.copy(), delta)
        w.data[...] = w.data + delta
    model._lora_saved = model.lora
    model._lora_base = saved
    model.lora = None
    return saved


def unmerge_lora(model):
    saved = getattr(model, "_lora_base", None)
    if saved is None:
        raise ConfigError("model has no merged LoRA weights")
    for name, (base, _) in saved.items():
        model.params[name + ".weight"].tensor.data[...] = base
    model.lora = model._lora_saved
    model._lora_base = None


def _lora_targets(model):
    lora = model.lora or model._lora_saved
    return [
        f"blocks.{i}.attn.{t}"
        for i in range(model.config.depth)
        for t in lora["targets"]
    ]


# ---------------------------------------------------------------------- SSF


def ssf_forward(x, scale, shift):
    if scale.shape != (x.shape[-1],) or shift.shape != (x.shape[-1],):
        raise DimensionError(f"ssf parameters {scale.shape} do not match features {x.shape}")
    return x * scale + shift


def ssf_points(config):
    d, hidden = config.dim, config.dim * config.mlp_ratio
    return [
        ("norm1", d),
        ("attn.q", d),
        ("attn.k", d),
        ("attn.v", d),
        ("attn.out", d),
        ("norm2", d),
        ("mlp.fc1", hidden),
        ("mlp.fc2", d),
    ]


def attach_ssf(model):
    for i in range(model.config.depth):
        for point, width in ssf_points(model.config):
            p = f"blocks.{i}.ssf.{point}."
            model.params.add(p + "scale", np.ones(width), "ssf")
            model.params.add(p + "shift", np.zeros(width), "ssf")
    model.ssf = True


# -------------------------------------------------------------- AdaptFormer


def attach_adaptformer(model, ratio=0.25, scale=0.1, seed=0):
    rng = stream(seed, "adaptformer.init")
    d = model.config.dim
    hidden = max(1, int(round(d * ratio)))
    for i in range(model.config.depth):
        p = f"blocks.{i}.adaptformer."
        model.params.add(p + "down.weight", rng.standard_normal((d, hidden)) / math.sqrt(d), "adaptformer")
        model.params.add(p + "down.bias", np.zeros(hidden), "adaptformer")
        model.params.add(p + "up.weight", np.zeros((hidden, d)), "adaptformer")
        model.params.add(p + "up.bias", np.zeros(d), "adaptformer")
    model.adaptformer = {"hidden": hidden, "scale": float(scale)}


# ---------------------------------------------------------------------- VPT


def attach_vpt(model, length=50, seed=0):
    rng = stream(seed, "vpt.init")
    c = model.config
    bound = math.sqrt(6.0 / (c.in_vars * c.patch_size + c.dim))
    for i in range(c.depth):
        model.params.add(f"vpt.prompts.{i}", rng.uniform(-bound, bound, (length, c.dim)), "vpt")
    model.vpt = {"length": length}


# --------------------------------------------------------------------- TADP


def attach_tadp(model, prompt_len=30, hw_hidden=8, v_hidden=5, d_hidden=16, e_hidden=16, seed=0):
    c = model.config
    cfg = TADPConfig(
        dim=c.dim,
        in_vars=c.in_vars,
        patch_h=c.patch_h,
        patch_w=c.patch_w,
        prompt_len=prompt_len,
        hw_hidden=hw_hidden,
        v_hidden=v_hidden,
        d_hidden=d_hidden,
        e_hidden=e_hidden,
    )
    gen = PromptGenerator(cfg)
    gen.add_params(model.params, seed)
    model.tadp = gen
    return gen


# ------------------------------------------------------------------ policies


@dataclass
class PolicyReport:
    policy: str
    trainable_by_group: dict = field(default_factory=dict)
    backbone_trainable: int = 0
    total_trainable: int = 0
    sfas_domain: int = 0
    sfas_selected: int = 0


def is_norm_or_bias(name):
    return name.endswith(".bias") or ".norm" in name


def apply_policy(model, policy, hp=None, seed=0):
    """Attach the modules ``policy`` needs and set every trainable flag.

    ``hp`` holds method hyperparameters keyed like the config file
    (``lora.rank``, ``sfas.k`` ...); missing keys take :data:`DEFAULTS`.
    """
    policy = canonical_policy(policy)
    hp = {**DEFAULTS, **(hp or {})}
    store = model.params

    if policy == "lora":
        attach_lora(model, int(hp["lora.rank"]), float(hp["lora.alpha"]), seed=seed)
    elif policy == "ssf":
        attach_ssf(model)
    elif policy == "adaptformer":
        attach_adaptformer(model, float(hp["adaptformer.ratio"]), float(hp["adaptformer.scale"]), seed=seed)
    elif policy == "vpt":
        attach_vpt(model, int(hp["vpt.length"]), seed=seed)
    if policy in TADP_POLICIES:
        attach_tadp(
            model,
            prompt_len=int(hp["tadp.prompt_len"]),
            hw_hidden=int(hp["tadp.hw_hidden"]),
            v_hidden=int(hp["tadp.v_hidden"]),
            d_hidden=int(hp["tadp.d_hidden"]),
            e_hidden=int(hp["tadp.e_hidden"]),
            seed=seed,
        )

    train_embedding = bool(hp["train_embedding"])
    if policy == "full":
        store.set_trainable(True)
    elif policy == "linear_probe":
        store.set_trainable(False)
        store.set_trainable(True, predicate=lambda p: p.group == "head")
    elif policy == "bias_only":
        store.set_trainable(False)
        store.set_trainable(True, predicate=lambda p: p.group == "head" or p.name.endswith(".bias"))
    else:
        exclude = bool(hp.get("sfas.exclude_norm_bias", False))

        def rule(p):
            if p.group == "head":
                return True
            if p.group == "embedding":
                return train_embedding
            if p.group == "backbone":
                return policy in SFAS_POLICIES and not (exclude and is_norm_or_bias(p.name))
            return True

        for p in store:
            p.trainable = rule(p)
    return policy_report(model, policy, hp)


def policy_report(model, policy, hp=None):
    hp = {**DEFAULTS, **(hp or {})}
    store = model.params
    by_group = {g: store.count(group=g, trainable=True) for g in store.groups()}
    report = PolicyReport(policy=policy, trainable_by_group=by_group)
    backbone = 0
    for g, n in by_group.items():
        if g in REPORT_EXCLUDED_GROUPS:
            continue
        if g == "backbone" and policy in SFAS_POLICIES:
            report.sfas_domain = n
            report.sfas_selected = math.ceil(float(hp["sfas.k"]) * n) if n else 0
            backbone += report.sfas_selected
        else:
            backbone += n
    report.backbone_trainable = backbone
    report.total_trainable = backbone + sum(by_group.get(g, 0) for g in REPORT_EXCLUDED_GROUPS)
    return report
