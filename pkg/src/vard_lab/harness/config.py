"""JSON run configuration: parsing with line-anchored errors, defaults, presets."""

from __future__ import annotations

import copy
import dataclasses
import json
import re

from .. import ddpm, prm, vard
from ..errors import ConfigError, VardLabError
from ..rewards import ETA_PRESETS, REWARD_PRESETS, RewardSpec, reward_preset

TASKS = ("ddpm-pretrain", "value-pretrain", "vard-finetune", "baseline-finetune", "so3-train",
         "verify-lemma1", "eval")
NEEDS_REWARD = {"value-pretrain", "vard-finetune", "baseline-finetune", "eval"}

DEFAULTS = {
    "dataset": ddpm.three_mode_mixture().to_dict(),
    "schedule": {"T": 50, "kind": "linear", "beta_min": 1e-3, "beta_max": 0.2,
                 "variance": "beta_tilde"},
    "model": {"hidden": [64, 64], "time_dim": 16, "ctx_dim": 4, "activation": "tanh"},
    "pretrain": {"steps": 2000, "lr": 3e-3, "batch_size": 256, "p_uncond": 0.1,
                 "eval_samples": 4096, "n_projections": 64},
    "value": {"hidden": [64, 64], "time_dim": 16, "ctx_dim": 4, "activation": "tanh",
              "normalize": True,
              "train": {**prm.ValueTrainConfig().to_dict(), "lr": 3e-3, "steps": 600,
                        "batch_size": 512, "convergence_tol": 1e-9, "lr_floor": 0.01}},
    "vard": vard.VardConfig().to_dict(),
    "reward": None,
    "baseline": {"kind": "final-step", "k": 10, "variant": "chain"},
    "so3": {"steps": 1000, "batch_size": 256, "lr": 3e-3, "hidden": [128, 128], "time_dim": 16,
            "target": [0.0, 0.0, 1.5707963267948966], "convention": "derivative",
            "integrate_steps": 100, "eval_samples": 2000, "tolerance": 0.1},
    "lemma1": {"families": 20, "n_samples": 100000, "shared_noise": False},
    "checkpoints": {"ddpm": None, "value": None, "finetuned": None},
    "eval": {"samples": 4096, "n_projections": 64},
}
OPEN_SECTIONS = {("dataset", "contexts"), ("reward", "params")}  # free-form payloads
REWARD_KEYS = {"kind", "params", "differentiable", "preset"}


@dataclasses.dataclass
class RunConfig:
    seed: int
    task: str
    output_dir: str | None = None
    sections: dict = dataclasses.field(default_factory=dict)

    def __getattr__(self, name):
        sections = self.__dict__.get("sections", {})
        if name in sections:
            return sections[name]
        raise AttributeError(name)

    def to_dict(self):
        out = {"seed": self.seed, "task": self.task, "output_dir": self.output_dir}
        out.update(copy.deepcopy(self.sections))
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    # typed views
    def schedule_obj(self):
        return ddpm.make_schedule(**self.sections["schedule"])

    def dataset_obj(self):
        return ddpm.DataConfig(**copy.deepcopy(self.sections["dataset"]))

    def vard_obj(self):
        return vard.VardConfig(**self.sections["vard"])

    def value_train_obj(self):
        return prm.ValueTrainConfig(**self.sections["value"]["train"])

    def reward_spec(self):
        return resolve_reward(self.sections["reward"])


def resolve_reward(section):
    if section is None:
        return None
    section = copy.deepcopy(section)
    if "preset" in section:
        spec = reward_preset(section["preset"])
        spec.params.update(section.get("params", {}))
        return RewardSpec(spec.kind, spec.params)
    return RewardSpec(section["kind"], section.get("params", {}), section.get("differentiable"))


# ---------------------------------------------------------------- parsing

_STRING = re.compile(r'"(?:[^"\\]|\\.)*"')


def _key_lines(text):
    """Line number of every object key, in document order."""
    out = []
    for m in _STRING.finditer(text):
        rest = text[m.end():m.end() + 64].lstrip()
        if rest.startswith(":"):
            out.append((json.loads(m.group()), text.count("\n", 0, m.start()) + 1))
    return out


def _no_duplicates(pairs):
    seen = {}
    for k, v in pairs:
        if k in seen:
            raise ConfigError(f"duplicate key {k!r}")
        seen[k] = v
    return seen


def _walk(obj, path, out):
    """Pre-order key paths, matching the order of keys in the text."""
    if isinstance(obj, dict):
        for k, v in obj.items():
            out.append(path + (k,))
            _walk(v, path + (k,), out)
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            _walk(v, path + (i,), out)


def _merge(base, over):
    if not isinstance(base, dict) or not isinstance(over, dict):
        return copy.deepcopy(over)
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(base.get(k), v) if k in base and base.get(k) is not None else copy.deepcopy(v)
    return out


def _allowed(path):
    """Allowed keys at a dict path, or None when the payload is free-form."""
    if len(path) == 0:
        return {"seed", "task", "output_dir", *DEFAULTS}
    if path[0] == "reward":
        return REWARD_KEYS if len(path) == 1 else None
    if tuple(path[:2]) in OPEN_SECTIONS:
        return None
    node = DEFAULTS
    for k in path:
        node = node.get(k) if isinstance(node, dict) else None
        if not isinstance(node, dict):
            return None
    return set(node)


def parse_config(text, seed=None, presets=(), output_dir=None):
    """Parse JSON text into a RunConfig; CLI overrides win over the file."""
    try:
        raw = json.loads(text, object_pairs_hook=_no_duplicates) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(exc.msg, exc.lineno) from None
    except ConfigError as exc:
        dup = str(exc).split("'")[1]
        lines = [ln for k, ln in _key_lines(text) if k == dup]
        raise ConfigError(str(exc), lines[-1] if lines else None) from None
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a JSON object", 1)
    paths = []
    _walk(raw, (), paths)
    lines = dict(zip(paths, (ln for _, ln in _key_lines(text))))
    for path in paths:
        allowed = _allowed(path[:-1]) if all(isinstance(p, str) for p in path[:-1]) else None
        if allowed is not None and path[-1] not in allowed:
            where = ".".join(map(str, path))
            raise ConfigError(f"unknown key {where!r}", lines.get(path))
    return build_config(raw, seed, presets, output_dir, lines)


def build_config(raw, seed=None, presets=(), output_dir=None, lines=None):
    lines = lines or {}
    raw = copy.deepcopy(raw)
    if seed is not None:
        raw["seed"] = seed
    if output_dir is not None:
        raw["output_dir"] = str(output_dir)
    for name in presets:
        apply_preset(raw, name)
    if raw.get("seed") is None:
        raise ConfigError("seed is required (no entropy-seeded runs)", lines.get(("seed",)))
    s = raw["seed"]
    if isinstance(s, bool) or not isinstance(s, int) or not 0 <= s < 2 ** 64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {s!r}", lines.get(("seed",)))
    task = raw.get("task")
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}", lines.get(("task",)))
    sections = {k: _merge(v, raw[k]) if k in raw else copy.deepcopy(v) for k, v in DEFAULTS.items()}
    if task in NEEDS_REWARD and sections["reward"] is None:
        raise ConfigError(f"task {task} needs a 'reward' section")
    cfg = RunConfig(int(s), task, raw.get("output_dir"), sections)
    _validate(cfg, lines)
    return cfg


def apply_preset(raw, name):
    if name in ETA_PRESETS:
        raw.setdefault("vard", {})["eta"] = ETA_PRESETS[name]
    elif name in REWARD_PRESETS:
        raw["reward"] = {"preset": name}
    else:
        known = sorted([*ETA_PRESETS, *REWARD_PRESETS])
        raise ConfigError(f"unknown preset {name!r}; known presets: {', '.join(known)}")


def _validate(cfg, lines):
    """Build every typed view once so bad values fail at load time."""
    checks = [("schedule", cfg.schedule_obj), ("dataset", cfg.dataset_obj), ("vard", cfg.vard_obj),
              ("value", cfg.value_train_obj), ("reward", cfg.reward_spec)]
    for section, build in checks:
        try:
            build()
        except (VardLabError, TypeError, KeyError) as exc:
            raise ConfigError(f"invalid {section} section: {exc}", lines.get((section,))) from None
    b = cfg.sections["baseline"]
    if b["kind"] not in ("final-step", "random-last-k") or int(b["k"]) < 1:
        raise ConfigError("baseline.kind must be final-step or random-last-k with k >= 1",
                          lines.get(("baseline",)))
    if cfg.sections["so3"]["convention"] not in ("derivative", "paper"):
        raise ConfigError("so3.convention must be derivative or paper", lines.get(("so3",)))


def load_config(path, seed=None, presets=(), output_dir=None):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), seed, presets, output_dir)
