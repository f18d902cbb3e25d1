"""Experiment configuration: YAML files with per-command sections and per-family overrides.

Resolution order for a command is: section defaults, then the family block,
then ``--override`` pairs.  Unknown keys are rejected at every level.
"""
from __future__ import annotations

import copy
import hashlib
import json
import re
from pathlib import Path

import yaml

from .envs import FAMILIES
from .errors import ConfigError

# defaults shared by every family
DEFAULTS = {
    "output_dir": None,
    "seeds": [0],
    "theory": {"seed": 0, "trials": 100, "n_mdps": 100, "n_transport": 50},
    "meta_train": {
        "family": "vel-line",
        "n_tasks": 30,
        "actor_lr": 1e-4,
        "backbone_lr": 1e-4,
        "critic_lr": 1e-2,
        "n_trajectories": 10,
        "updates_per_cycle": 500,
        "batch_size": 128,
        "warmup_steps": 1000,
        "action_sigma": 0.1,
        "buffer_size": 200_000,
        "init_scale": 0.001,
        "plateau_window": 5,
        "plateau_patience": 20,
        "plateau_tol": 0.01,
        "max_cycles": 200,
        "eval_episodes": 5,
    },
    "adapt": {
        "family": "vel-line",
        "ood": True,
        "parameter": None,
        "method": "both",
        "protocols": ["action", "parameter"],
        "param_sigma": 0.005,
        "action_sigma": 0.1,
        "reset_every": 15,
        "init_scale": 0.001,
        "n_trajectories": 10,
        "n_updates": 2000,
        "batch_size": 512,
        "total_episodes": 200,
        "warmup_steps": 1000,
        "buffer_size": 200_000,
        "actor_lr": 1e-4,
        "critic_lr": 0.05,
        "eval_episodes": 5,
        "random_init_backbone": False,
        "backbone": None,
    },
    "bc": {
        "family": "vel-line",
        "n_pairs": 100_000,
        "h_demo": 100,
        "h_eval": 300,
        "batch_size": 2048,
        "lr": 1e-3,
        "n_steps": 2000,
        "eval_seeds": 10,
        "init_scale": 0.001,
        "backbone": None,
        "expert_episodes": 200,
        "expert_updates": 500,
        "expert_batch_size": 128,
        "expert_lr": 1e-4,
        "expert_critic_lr": 1e-2,
    },
    "families": {
        "vel-line": {"adapt": {"param_sigma": 0.005, "init_scale": 0.001, "reset_every": 15, "n_updates": 2000},
                     "bc": {"lr": 1e-3}},
        "vel-to-dir": {"adapt": {"param_sigma": 0.00008, "init_scale": 0.001, "reset_every": 10, "n_updates": 1000},
                       "bc": {"lr": 1e-3}},
        "goal-plane": {"adapt": {"param_sigma": 0.006, "init_scale": 0.001, "reset_every": 25, "n_updates": 2000},
                       "bc": {"lr": 1e-3}},
        "dir-plane": {"adapt": {"param_sigma": 0.00075, "init_scale": 0.07, "reset_every": 10, "n_updates": 1000},
                      "bc": {"lr": 1e-3}},
        "dyn-rand": {"adapt": {"param_sigma": 0.007, "init_scale": 0.1, "reset_every": 10, "n_updates": 2000},
                     "bc": {"lr": 1e-4}},
    },
}

class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a dot (``1e-4``), which YAML 1.1 leaves as strings."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"),
    list("-+0123456789"))

SECTIONS = ("theory", "meta_train", "adapt", "bc")
COMMAND_SECTIONS = {"verify-theory": "theory", "meta-train": "meta_train", "adapt": "adapt", "bc": "bc"}


def _check_keys(given, allowed, where):
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {', '.join(unknown)}", keys=[f"{where}.{k}" for k in unknown])


def _merge(base, update):
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(raw):
    """Reject unknown keys anywhere in a user config (top level, sections, family blocks)."""
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping", keys=["<root>"])
    _check_keys(raw, DEFAULTS, "config")
    for section in SECTIONS:
        if section in raw:
            if not isinstance(raw[section], dict):
                raise ConfigError(f"section {section} must be a mapping", keys=[section])
            _check_keys(raw[section], DEFAULTS[section], section)
    for fam, block in (raw.get("families") or {}).items():
        if fam not in FAMILIES:
            raise ConfigError(f"unknown family {fam!r}", keys=[f"families.{fam}"])
        _check_keys(block, SECTIONS, f"families.{fam}")
        for section, values in block.items():
            _check_keys(values, DEFAULTS[section], f"families.{fam}.{section}")
    return raw


def load_config(path=None):
    """The validated user layer from the YAML file at ``path`` (empty without a file)."""
    if path is None:
        return {}
    try:
        raw = yaml.load(Path(path).read_text(), Loader=_Loader) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}", keys=["<file>"]) from exc
    return copy.deepcopy(validate(raw))


TOP_LEVEL = ("seeds", "output_dir")


def _scalar(text):
    return yaml.load(text, Loader=_Loader)


def parse_overrides(pairs, section):
    """``key=value`` pairs (values parsed as YAML); a bare key targets ``section`` unless it is top-level."""
    out = {}
    bad = []
    for pair in pairs or ():
        if "=" not in pair:
            bad.append(pair)
            continue
        key, value = pair.split("=", 1)
        path = key.strip().split(".")
        if len(path) == 1 and path[0] not in TOP_LEVEL:
            path = [section] + path
        node = out
        for p in path[:-1]:
            node = node.setdefault(p, {})
        node[path[-1]] = _scalar(value)
    if bad:
        raise ConfigError(f"overrides must look like key=value: {bad}", keys=bad)
    return out


def resolve(user, command, overrides=()):
    """Resolved parameters for one command.

    Layers, later winning: built-in section defaults, built-in family block,
    the user's section, the user's family block, then ``overrides``.
    """
    section = COMMAND_SECTIONS[command]
    over = validate(parse_overrides(overrides, section))
    user = validate(user or {})
    fam = (over.get(section, {}).get("family") or (user.get(section) or {}).get("family")
           or DEFAULTS[section].get("family"))
    if fam is not None and fam not in FAMILIES:
        raise ConfigError(f"unknown family {fam!r}", keys=[f"{section}.family"])
    layers = [DEFAULTS[section]]
    if fam is not None:
        layers += [DEFAULTS["families"][fam].get(section, {}), user.get(section) or {},
                   ((user.get("families") or {}).get(fam) or {}).get(section, {}), over.get(section, {})]
    else:
        layers += [user.get(section) or {}, over.get(section, {})]
    params = {}
    for layer in layers:
        params = _merge(params, layer)
    if fam is not None:
        params["family"] = fam
    top = {k: over.get(k, user.get(k, DEFAULTS[k])) for k in TOP_LEVEL}
    return {"seeds": list(top["seeds"]), "output_dir": top["output_dir"], section: params}


def dump(resolved):
    return yaml.safe_dump(resolved, sort_keys=True)


def config_hash(resolved):
    return hashlib.sha256(json.dumps(resolved, sort_keys=True).encode()).hexdigest()
