"""Experiment configuration: strict JSON in, validated dataclass out.

Every key is checked against the schema and unknown keys are errors, so a
typo in a sweep definition fails loudly instead of silently running the
defaults. The config hash covers the fully-defaulted canonical form,
which makes it stable under spelling out a default explicitly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .cache import CompressionPlan
from .crosslayer import AGG_MODES
from .policies import HEAD_POOLS, POLICY_NAMES
from .teacher import TeacherConfig

CONFIG_VERSION = 1
DATA_KINDS = ("tokens", "gauss", "planted")
PROB_MODES = ("softmax", "negonly")


class ConfigError(ValueError):
    """Invalid experiment configuration; maps to exit code 2."""


_SCHEMA = {
    "version": None,
    "seed": 0,
    "out": "runs",
    "teacher": {
        "n_layers": 4, "d_model": 64, "n_heads": 8, "n_kv_heads": 2,
        "d_ffn": 128, "vocab_size": 64, "seed": 0,
    },
    "plan": {
        "ratio": 0.5, "sink_count": 4, "local_window": 8, "budget": None,
    },
    "policy": {
        "name": "indexer", "window": 8, "seed": 0, "head_pool": "mean",
    },
    "agg": {
        "mode": "none", "gamma": 0.5, "prob": "softmax",
    },
    "reuse": {
        "group_size": 1,
    },
    "data": {
        "kind": "tokens", "length": 128, "n_train": 64, "n_eval": 32,
        "eval_start": None,
    },
    "train": {
        "h_index": None, "d_index": None, "d_mem": None, "param_seed": 42,
        "indexer_steps": 600, "indexer_peak": 1e-3,
        "mem_steps": 300, "mem_lr": 0.05, "lam": 0.95, "eta": 1.0,
        "head_sum": False, "stop_write_grad": False,
    },
    "decode": {
        "steps": 256, "interval": 128, "budgets": (48, 64, 96),
    },
}


def _merge(section: str, defaults: dict, given: dict) -> dict:
    unknown = set(given) - set(defaults)
    if unknown:
        where = section or "top level"
        raise ConfigError(f"unknown config keys at {where}: {sorted(unknown)}")
    out = {}
    for key, default in defaults.items():
        if isinstance(default, dict):
            sub = given.get(key, {})
            if not isinstance(sub, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            out[key] = _merge(key, default, sub)
        else:
            out[key] = given.get(key, default)
    return out


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def _as_int(tree: dict, section: str, key: str, minimum=None, optional=False):
    value = tree[section][key]
    if value is None and optional:
        return None
    _require(isinstance(value, int) and not isinstance(value, bool),
             f"{section}.{key} must be an integer")
    if minimum is not None:
        _require(value >= minimum, f"{section}.{key} must be >= {minimum}")
    return value


def _as_number(tree: dict, section: str, key: str) -> float:
    value = tree[section][key]
    _require(isinstance(value, (int, float)) and not isinstance(value, bool),
             f"{section}.{key} must be a number")
    return float(value)


@dataclass
class ExperimentConfig:
    """Validated experiment description plus its canonical form."""

    seed: int
    out: str
    teacher: TeacherConfig
    plan: CompressionPlan
    policy_name: str
    policy_window: int
    policy_seed: int
    policy_head_pool: str
    agg_mode: str
    agg_gamma: float
    agg_prob: str
    reuse_group_size: int
    data_kind: str
    data_length: int
    n_train: int
    n_eval: int
    eval_start: int
    h_index: int | None
    d_index: int | None
    d_mem: int | None
    param_seed: int
    indexer_steps: int
    indexer_peak: float
    mem_steps: int
    mem_lr: float
    lam: float
    eta: float
    head_sum: bool
    stop_write_grad: bool
    decode_steps: int
    decode_interval: int
    decode_budgets: tuple
    canonical: dict

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.canonical, sort_keys=True,
                          separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    tree = _merge("", _SCHEMA, raw)
    _require(tree["version"] == CONFIG_VERSION,
             f"config version must be {CONFIG_VERSION}")
    _require(isinstance(tree["seed"], int) and not isinstance(tree["seed"], bool)
             and tree["seed"] >= 0, "seed must be a non-negative integer")
    _require(isinstance(tree["out"], str) and tree["out"],
             "out must be a non-empty string")

    try:
        teacher = TeacherConfig(
            n_layers=_as_int(tree, "teacher", "n_layers", 1),
            d_model=_as_int(tree, "teacher", "d_model", 1),
            n_heads=_as_int(tree, "teacher", "n_heads", 1),
            n_kv_heads=_as_int(tree, "teacher", "n_kv_heads", 1),
            d_ffn=_as_int(tree, "teacher", "d_ffn", 1),
            vocab_size=_as_int(tree, "teacher", "vocab_size", 1),
            seed=_as_int(tree, "teacher", "seed", 0))
        plan = CompressionPlan(
            ratio=_as_number(tree, "plan", "ratio"),
            sink_count=_as_int(tree, "plan", "sink_count", 0),
            local_window=_as_int(tree, "plan", "local_window", 0),
            budget=_as_int(tree, "plan", "budget", 1, optional=True))
    except ValueError as bad:
        raise ConfigError(str(bad)) from None

    _require(tree["policy"]["name"] in POLICY_NAMES,
             f"policy.name must be one of {POLICY_NAMES}")
    _require(tree["policy"]["head_pool"] in HEAD_POOLS,
             f"policy.head_pool must be one of {HEAD_POOLS}")
    _require(tree["agg"]["mode"] in AGG_MODES,
             f"agg.mode must be one of {AGG_MODES}")
    _require(tree["agg"]["prob"] in PROB_MODES,
             f"agg.prob must be one of {PROB_MODES}")
    gamma = _as_number(tree, "agg", "gamma")
    _require(0.0 <= gamma <= 1.0, "agg.gamma must lie in [0, 1]")
    _require(tree["data"]["kind"] in DATA_KINDS,
             f"data.kind must be one of {DATA_KINDS}")

    length = _as_int(tree, "data", "length", 2)
    eval_start = _as_int(tree, "data", "eval_start", 1, optional=True)
    if eval_start is None:
        eval_start = (2 * length) // 3
    _require(eval_start < length, "data.eval_start must fall inside the sequence")

    budgets = tree["decode"]["budgets"]
    _require(isinstance(budgets, (list, tuple)) and len(budgets) > 0
             and all(isinstance(b, int) and b >= 1 for b in budgets),
             "decode.budgets must be a non-empty list of positive integers")

    mem_lr = _as_number(tree, "train", "mem_lr")
    lam = _as_number(tree, "train", "lam")
    eta = _as_number(tree, "train", "eta")
    peak = _as_number(tree, "train", "indexer_peak")
    _require(mem_lr > 0.0, "train.mem_lr must be positive")
    _require(0.0 < lam <= 1.0, "train.lam must lie in (0, 1]")
    _require(eta > 0.0, "train.eta must be positive")
    _require(peak > 0.0, "train.indexer_peak must be positive")

    tree["data"]["eval_start"] = eval_start
    tree["decode"]["budgets"] = list(budgets)
    return ExperimentConfig(
        seed=tree["seed"],
        out=tree["out"],
        teacher=teacher,
        plan=plan,
        policy_name=tree["policy"]["name"],
        policy_window=_as_int(tree, "policy", "window", 1),
        policy_seed=_as_int(tree, "policy", "seed", 0),
        policy_head_pool=tree["policy"]["head_pool"],
        agg_mode=tree["agg"]["mode"],
        agg_gamma=gamma,
        agg_prob=tree["agg"]["prob"],
        reuse_group_size=_as_int(tree, "reuse", "group_size", 1),
        data_kind=tree["data"]["kind"],
        data_length=length,
        n_train=_as_int(tree, "data", "n_train", 1),
        n_eval=_as_int(tree, "data", "n_eval", 1),
        eval_start=eval_start,
        h_index=_as_int(tree, "train", "h_index", 1, optional=True),
        d_index=_as_int(tree, "train", "d_index", 1, optional=True),
        d_mem=_as_int(tree, "train", "d_mem", 1, optional=True),
        param_seed=_as_int(tree, "train", "param_seed", 0),
        indexer_steps=_as_int(tree, "train", "indexer_steps", 0),
        indexer_peak=peak,
        mem_steps=_as_int(tree, "train", "mem_steps", 0),
        mem_lr=mem_lr,
        lam=lam,
        eta=eta,
        head_sum=bool(tree["train"]["head_sum"]),
        stop_write_grad=bool(tree["train"]["stop_write_grad"]),
        decode_steps=_as_int(tree, "decode", "steps", 1),
        decode_interval=_as_int(tree, "decode", "interval", 1),
        decode_budgets=tuple(budgets),
        canonical=tree,
    )


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise err
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as bad:
        raise ConfigError(f"config is not valid JSON: {bad}") from None
    return parse_config(raw)
