"""Experiment configuration, training loops, checkpoints, evaluation and comparison.

A run directory produced by :func:`finetune` holds

* ``model.wpck`` (+ ``model.wpck.cfg``): parameters and optimiser state;
* ``results.csv``: one row with the trainable-parameter counts, the freeze
  audit and the summary metrics;
* ``metrics.csv``: the long-format metric report;
* ``train_log.csv``: loss and learning rate per step;
* ``mask_stats.csv``: per-step selection statistics (selective runs only);
* ``timing.txt``: wall time, kept apart so the CSVs stay byte-reproducible.
"""

import csv
import hashlib
import io
import math
import os
import time

import numpy as np

from . import peft
from .backbone import Backbone, BackboneConfig
from .errors import ConfigError, FormatError, UndefinedValueError
from .metrics import (
    DRY_THRESHOLD,
    acc,
    climatology,
    crps_gaussian,
    eecrps,
    mean_bias,
    percentile_threshold,
    rmse_latweighted,
    seeps,
    threat_score,
)
from .objectives import objective_for
from .rng import stream
from .sfas import (
    AdamW,
    FisherState,
    average_gradients,
    batch_gradients,
    freeze_audit,
    per_sample_gradients,
    sfas_step,
    write_mask_stats,
)
from .tasks import load_dataset, latitude_weights
from .wpft import file_hash, load_checkpoint, save_checkpoint

# ---------------------------------------------------------------- config

TASK_EPOCHS = {"downscale": 30, "ensemble": 10, "precip": 15}
TASK_PROMPT_LEN = {"downscale": 30, "ensemble": 5, "precip": 20}

# key -> (type, default); a default of ``None`` marks a key that may stay unset
SCHEMA = {
    "task": (str, None),
    "method": (str, "full"),
    "data": (str, None),
    "out": (str, None),
    "pretrained": (str, None),
    "seed": (int, 0),
    "epochs": (int, None),
    "batch_size": (int, 8),
    "base_lr": (float, 1e-3),
    "warmup_epochs": (int, 3),
    "weight_decay": (float, 0.05),
    "grad_mode": (str, "batch"),
    "eval_split": (str, "test"),
    "train_embedding": (bool, True),
    "loss.variable_weights": (str, ""),
    "metrics.dry_threshold": (float, DRY_THRESHOLD),
    "model.dim": (int, 32),
    "model.depth": (int, 4),
    "model.heads": (int, 4),
    "model.patch": (int, 4),
    "model.mlp_ratio": (int, 4),
    "sfas.k": (float, 0.001),
    "sfas.gamma": (float, 0.2),
    "sfas.mode": (str, "per_sample"),
    "sfas.exclude_norm_bias": (bool, False),
    "tadp.prompt_len": (int, None),
    "tadp.hw_hidden": (int, 8),
    "tadp.v_hidden": (int, 5),
    "tadp.d_hidden": (int, 16),
    "tadp.e_hidden": (int, 16),
    "lora.rank": (int, 8),
    "lora.alpha": (float, 1.0),
    "vpt.length": (int, 50),
    "adaptformer.ratio": (float, 0.25),
    "adaptformer.scale": (float, 0.1),
}
HP_KEYS = [k for k in SCHEMA if k.split(".")[0] in ("sfas", "tadp", "lora", "vpt", "adaptformer")] + [
    "train_embedding"
]


def _cast(key, typ, text):
    if typ is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    try:
        return typ(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {typ.__name__}") from None


def parse_config(text, required=("task", "method", "data", "out")):
    """Parse ``key = value`` lines into a complete configuration dict.

    ``#`` starts a comment; unknown and duplicate keys are errors.
    """
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, value = (s.strip() for s in line.partition("="))
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = _cast(key, SCHEMA[key][0], value)
    missing = [k for k in required if k not in raw]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")
    cfg = {k: raw.get(k, default) for k, (_, default) in SCHEMA.items()}
    task = cfg["task"]
    if task not in TASK_EPOCHS:
        raise ConfigError(f"unknown task {task!r}")
    if cfg["epochs"] is None:
        cfg["epochs"] = TASK_EPOCHS[task]
    if cfg["tadp.prompt_len"] is None:
        cfg["tadp.prompt_len"] = TASK_PROMPT_LEN[task]
    cfg["method"] = peft.canonical_policy(cfg["method"])
    if cfg["grad_mode"] not in ("batch", "per_sample"):
        raise ConfigError("grad_mode must be 'batch' or 'per_sample'")
    if cfg["epochs"] < 1 or cfg["batch_size"] < 1:
        raise ConfigError("epochs and batch_size must be positive")
    return cfg


def load_config(path, required=("task", "method", "data", "out")):
    with open(path, encoding="utf-8") as fh:
        cfg = parse_config(fh.read(), required)
    base = os.path.dirname(os.path.abspath(path))
    for key in ("data", "out", "pretrained"):
        if cfg[key] is not None and not os.path.isabs(cfg[key]):
            cfg[key] = os.path.join(base, cfg[key])
    return cfg


def format_config(cfg):
    """Canonical text of a configuration (sorted, fully resolved)."""
    return "".join(f"{k} = {cfg[k]!r}\n" for k in sorted(cfg))


def hyperparameters(cfg):
    return {k: cfg[k] for k in HP_KEYS}


# -------------------------------------------------------------- schedule


def cosine_warmup_lr(step, total_steps, warmup_steps, base_lr):
    """Linear warm-up from zero, then a half cosine down towards zero."""
    if not 0 <= warmup_steps < total_steps:
        raise ConfigError(f"need 0 <= warmup ({warmup_steps}) < total steps ({total_steps})")
    if not 0 <= step < total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps})")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ----------------------------------------------------------- checkpoints

ARCH_KEYS = ("in_vars", "out_vars", "height", "width", "patch_h", "patch_w", "dim", "depth", "heads", "mlp_ratio")


def write_sidecar(path, model, task, policy, seed, hp):
    lines = [f"task = {task}", f"policy = {policy}", f"seed = {seed}"]
    lines += [f"{k} = {getattr(model.config, k)}" for k in ARCH_KEYS]
    lines += [f"hp.{k} = {hp[k]!r}" for k in sorted(hp)]
    with open(path + ".cfg", "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_sidecar(path):
    fname = path + ".cfg"
    if not os.path.exists(fname):
        raise FormatError(f"checkpoint {path} has no architecture file {fname}")
    meta, hp = {}, {}
    with open(fname, encoding="utf-8") as fh:
        for line in fh:
            if "=" not in line:
                continue
            key, _, value = (s.strip() for s in line.partition("="))
            if key.startswith("hp."):
                hp[key[3:]] = _literal(value)
            else:
                meta[key] = value
    arch = BackboneConfig(**{k: int(meta[k]) for k in ARCH_KEYS})
    return meta, arch, hp


def _literal(text):
    if text in ("True", "False"):
        return text == "True"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text.strip("'\"")


def save_model(path, model, task, policy, seed, hp, opt=None):
    entries = model.params.state()
    if opt is not None:
        entries.update(opt.state_entries())
    digest = save_checkpoint(path, entries)
    write_sidecar(path, model, task, policy, seed, hp)
    return digest


def load_model(path):
    """Rebuild the model (with its attachments) stored at ``path``."""
    meta, arch, hp = read_sidecar(path)
    entries = load_checkpoint(path)
    model = Backbone(arch, seed=0)
    policy = meta["policy"]
    if policy != "pretrained":
        peft.apply_policy(model, policy, hp, seed=int(meta["seed"]))
    model.params.load_state({k: v for k, v in entries.items() if ".opt." not in k})
    opt_state = {k: v for k, v in entries.items() if ".opt." in k}
    return model, meta, hp, opt_state


def _check_compatible(arch, ds, objective):
    want = (ds.inputs.shape[1], objective.out_vars(ds), ds.grid.H, ds.grid.W)
    have = (arch.in_vars, arch.out_vars, arch.height, arch.width)
    if want != have:
        raise ConfigError(
            f"checkpoint expects (in_vars, out_vars, H, W) = {have}, task {ds.task!r} needs {want}"
        )


# --------------------------------------------------------------- training


def _variable_weights(cfg):
    text = cfg["loss.variable_weights"].strip()
    return [float(x) for x in text.split(",")] if text else None


def train_loop(model, objective, ds, cfg, selective=None, log=None):
    """Optimise the trainable parameters of ``model`` on the training split.

    ``selective`` is a :class:`FisherState` for the selective policies.
    Returns the optimiser.
    """
    store = model.params
    train = objective.batch(ds, np.arange(ds.train_end))
    n, bs = len(train), cfg["batch_size"]
    per_epoch = math.ceil(n / bs)
    total = cfg["epochs"] * per_epoch
    warmup = cfg["warmup_epochs"] * per_epoch
    if warmup >= total:
        raise ConfigError(f"warmup_epochs ({cfg['warmup_epochs']}) must be below epochs ({cfg['epochs']})")
    if selective is not None:
        selective.ts = total
    opt = AdamW(store, weight_decay=cfg["weight_decay"])
    names = store.names(trainable=True)
    step = 0
    for epoch in range(cfg["epochs"]):
        order = stream(cfg["seed"], "shuffle", epoch).permutation(n)
        for start in range(0, n, bs):
            batch = train.select(order[start:start + bs])
            lr = cosine_warmup_lr(step, total, warmup, cfg["base_lr"])
            if selective is not None:
                loss = sfas_step(model, objective, batch, selective, opt, lr)
            else:
                if cfg["grad_mode"] == "per_sample":
                    loss, grads = average_gradients(per_sample_gradients(model, objective, batch, names))
                else:
                    loss, grads = batch_gradients(model, objective, batch, names)
                opt.step(grads, lr)
            if log is not None:
                log.append({"step": step, "epoch": epoch, "lr": lr, "loss": loss})
            step += 1
    return opt


LOG_COLUMNS = ("step", "epoch", "lr", "loss")


def _csv_value(v):
    return repr(v) if isinstance(v, float) else v


def write_csv(path, rows, columns):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(csv_text(rows, columns))


def csv_text(rows, columns):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _csv_value(row.get(k, "")) for k in columns})
    return buf.getvalue()


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _build_for_pretrain(cfg, ds, objective):
    p = cfg["model.patch"]
    arch = BackboneConfig(
        in_vars=ds.inputs.shape[1],
        out_vars=objective.out_vars(ds),
        height=ds.grid.H,
        width=ds.grid.W,
        patch_h=p,
        patch_w=p,
        dim=cfg["model.dim"],
        depth=cfg["model.depth"],
        heads=cfg["model.heads"],
        mlp_ratio=cfg["model.mlp_ratio"],
    )
    return Backbone(arch, seed=cfg["seed"])


def pretrain(cfg):
    """Train a backbone from scratch on a source dataset; writes ``pretrained.wpck``."""
    if isinstance(cfg, str):
        cfg = load_config(cfg, required=("task", "data", "out"))
    ds = load_dataset(cfg["data"])
    objective = objective_for(cfg["task"], _variable_weights(cfg))
    model = _build_for_pretrain(cfg, ds, objective)
    os.makedirs(cfg["out"], exist_ok=True)
    log = []
    t0 = time.perf_counter()
    train_loop(model, objective, ds, cfg, log=log)
    path = os.path.join(cfg["out"], "pretrained.wpck")
    digest = save_model(path, model, cfg["task"], "pretrained", cfg["seed"], {})
    write_csv(os.path.join(cfg["out"], "train_log.csv"), log, LOG_COLUMNS)
    _write_timing(cfg["out"], time.perf_counter() - t0)
    return {"checkpoint": path, "sha256": digest, "log": log, "model": model}


def _write_timing(out, seconds):
    with open(os.path.join(out, "timing.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"wall_time_s = {seconds:.3f}\n")


RESULT_COLUMNS = (
    "method",
    "task",
    "seed",
    "trainable_params_backbone",
    "trainable_params_total",
    "freeze_audit",
)


def prepare_model(cfg, ds, objective):
    """Load the pretrained checkpoint and apply the configured policy."""
    if not cfg["pretrained"]:
        raise ConfigError("fine-tuning needs a 'pretrained' checkpoint path")
    model, meta, _, _ = load_model(cfg["pretrained"])
    _check_compatible(model.config, ds, objective)
    report = peft.apply_policy(model, cfg["method"], hyperparameters(cfg), seed=cfg["seed"])
    return model, report


def finetune(cfg):
    """Fine-tune with one policy, evaluate, and write the run directory; returns the results row."""
    if isinstance(cfg, str):
        cfg = load_config(cfg)
    ds = load_dataset(cfg["data"])
    objective = objective_for(cfg["task"], _variable_weights(cfg))
    model, report = prepare_model(cfg, ds, objective)
    os.makedirs(cfg["out"], exist_ok=True)

    selective = None
    if cfg["method"] in peft.SFAS_POLICIES:
        domain = model.params.names(group="backbone", trainable=True)
        selective = FisherState(
            domain=domain,
            k=cfg["sfas.k"],
            gamma=cfg["sfas.gamma"],
            seed=cfg["seed"],
            mode=cfg["sfas.mode"],
        )
    reference = model.params.state()
    log = []
    t0 = time.perf_counter()
    opt = train_loop(model, objective, ds, cfg, selective, log)
    elapsed = time.perf_counter() - t0

    if selective is not None:
        audit = freeze_audit(model.params, selective.domain, reference, selective.ever_selected)
        write_mask_stats(os.path.join(cfg["out"], "mask_stats.csv"), selective.stats)
    else:
        frozen = model.params.names(trainable=False)
        audit = all(np.array_equal(model.params[n].value, reference[n]) for n in frozen)

    path = os.path.join(cfg["out"], "model.wpck")
    digest = save_model(path, model, cfg["task"], cfg["method"], cfg["seed"], hyperparameters(cfg), opt)
    metric_rows = evaluate_model(model, objective, ds, cfg["eval_split"], cfg["metrics.dry_threshold"])
    row = {
        "method": cfg["method"],
        "task": cfg["task"],
        "seed": cfg["seed"],
        "trainable_params_backbone": report.backbone_trainable,
        "trainable_params_total": report.total_trainable,
        "freeze_audit": "pass" if audit else "fail",
    }
    summary = summarize(metric_rows)
    row.update(summary)
    write_csv(os.path.join(cfg["out"], "results.csv"), [row], RESULT_COLUMNS + tuple(summary))
    write_metric_report(os.path.join(cfg["out"], "metrics.csv"), metric_rows, cfg["method"], cfg["seed"])
    write_csv(os.path.join(cfg["out"], "train_log.csv"), log, LOG_COLUMNS)
    _write_timing(cfg["out"], elapsed)
    return {**row, "checkpoint": path, "sha256": digest, "model": model, "log": log}


# ------------------------------------------------------------- evaluation

METRIC_COLUMNS = ("method", "task", "variable", "metric", "value", "n_samples", "seed")


def _safe(fn, *args):
    try:
        return fn(*args)
    except UndefinedValueError:
        return float("nan")


def evaluate_model(model, objective, ds, split="test", dry_threshold=DRY_THRESHOLD):
    """Metric rows ``{task, variable, metric, value, n_samples}`` for one split."""
    idx = np.asarray(ds.split(split))
    if len(idx) == 0:
        raise ConfigError(f"split {split!r} is empty")
    weights = latitude_weights(ds.grid)
    train = np.arange(ds.train_end)
    rows = []

    def add(variable, metric, value):
        rows.append({"task": ds.task, "variable": variable, "metric": metric, "value": float(value), "n_samples": len(idx)})

    if ds.task == "downscale":
        pred = objective.predict(model, ds, idx)
        truth = ds.targets[idx]
        for v, name in enumerate(ds.target_names):
            add(name, "rmse", rmse_latweighted(pred[:, v], truth[:, v], weights))
            add(name, "bias", mean_bias(pred[:, v], truth[:, v]))
    elif ds.task == "ensemble":
        mu, sigma = objective.predict(model, ds, idx)
        truth = ds.targets[idx]
        efi = ds.extras["efi"][idx]
        for v, name in enumerate(ds.target_names):
            field_ = crps_gaussian(mu[:, v], sigma[:, v], truth[:, v])
            add(name, "crps", float(np.mean(field_)))
            add(name, "eecrps", eecrps(field_, efi[:, v]))
    elif ds.task == "precip":
        pred = objective.predict(model, ds, idx)
        truth = ds.targets[idx]
        for v, name in enumerate(ds.target_names):
            ref = ds.targets[train, v]
            clim = climatology(ref, dry_threshold, precip=True)
            add(name, "seeps", _safe(seeps, pred[:, v], truth[:, v], clim, weights))
            add(name, "acc", _safe(acc, pred[:, v], truth[:, v], clim.mean, weights))
            add(name, "rmse", rmse_latweighted(pred[:, v], truth[:, v], weights))
            add(name, "ts50", _safe(threat_score, pred[:, v], truth[:, v], percentile_threshold(ref, 50)))
            add(name, "ts75", _safe(threat_score, pred[:, v], truth[:, v], percentile_threshold(ref, 75)))
    else:
        raise ConfigError(f"unknown task {ds.task!r}")
    by_metric = {}
    for r in rows:
        by_metric.setdefault(r["metric"], []).append(r["value"])
    for metric, values in by_metric.items():
        add("all", metric, float(np.mean(values)))
    return rows


def summarize(metric_rows):
    return {r["metric"]: r["value"] for r in metric_rows if r["variable"] == "all"}


def write_metric_report(path, rows, method, seed):
    write_csv(path, [{**r, "method": method, "seed": seed} for r in rows], METRIC_COLUMNS)


def evaluate(ckpt, data, split="test", dry_threshold=DRY_THRESHOLD):
    """Evaluate a stored checkpoint on a dataset directory; returns metric rows."""
    model, meta, _, _ = load_model(ckpt)
    ds = load_dataset(data)
    if meta["task"] != ds.task:
        raise ConfigError(f"checkpoint was trained for {meta['task']!r}, data is {ds.task!r}")
    objective = objective_for(ds.task)
    _check_compatible(model.config, ds, objective)
    rows = evaluate_model(model, objective, ds, split, dry_threshold)
    return [{**r, "method": meta["policy"], "seed": int(meta["seed"])} for r in rows]


# ------------------------------------------------------------- comparison

CACHE_FILE = "cache_key.txt"


def cache_key(cfg):
    """Hash of the resolved config and the bytes of every input it reads."""
    h = hashlib.sha256(format_config(cfg).encode("utf-8"))
    for fname in ("manifest.txt", "inputs.wpft", "targets.wpft"):
        h.update(file_hash(os.path.join(cfg["data"], fname)).encode())
    if cfg["pretrained"]:
        h.update(file_hash(cfg["pretrained"]).encode())
    return h.hexdigest()


def _cached_row(cfg, key):
    out = cfg["out"]
    try:
        with open(os.path.join(out, CACHE_FILE), encoding="utf-8") as fh:
            stored_key, stored_hash = fh.read().split()
        if stored_key != key or file_hash(os.path.join(out, "model.wpck")) != stored_hash:
            return None
        rows = read_csv(os.path.join(out, "results.csv"))
    except (OSError, ValueError):
        return None
    return rows[0] if rows else None


def run_cached(cfg):
    """Fine-tune unless a run with the same cache key and checkpoint hash exists."""
    key = cache_key(cfg)
    row = _cached_row(cfg, key)
    if row is not None:
        return row, True
    result = finetune(cfg)
    with open(os.path.join(cfg["out"], CACHE_FILE), "w", encoding="utf-8") as fh:
        fh.write(f"{key} {result['sha256']}\n")
    return {k: v for k, v in result.items() if k not in ("model", "log", "checkpoint", "sha256")}, False


def compare(config_paths, out=None):
    """Run (or reuse) every configuration and merge the result rows, sorted by method.

    A failing configuration yields a row with an ``error`` entry instead of
    aborting the comparison.
    """
    if len(config_paths) < 2:
        raise ConfigError("compare needs at least two configurations")
    rows = []
    for path in config_paths:
        try:
            cfg = load_config(path)
            row, cached = run_cached(cfg)
            rows.append({**row, "cached": "yes" if cached else "no", "error": ""})
        except Exception as exc:  # reported per row
            rows.append({"method": _method_hint(path), "config": path, "error": f"{type(exc).__name__}: {exc}"})
    rows.sort(key=lambda r: (str(r.get("method", "")), str(r.get("task", "")), str(r.get("seed", ""))))
    columns = list(RESULT_COLUMNS)
    for r in rows:
        for k in r:
            if k not in columns and k not in ("cached", "error", "config"):
                columns.append(k)
    columns += ["cached", "error"]
    text = csv_text(rows, columns)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    return rows, text


def _method_hint(path):
    try:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                key, _, value = line.split("#", 1)[0].partition("=")
                if key.strip() == "method":
                    return value.strip()
    except OSError:
        pass
    return ""
