"""Sectioned key=value training config files.

Example::

    [train]
    seed = 3
    learning_rate = 50
    stage1_iters = 300

    [modulation]
    alpha = 0.5

Unknown sections and keys are rejected. Anything left out keeps the
desk-preset default.
"""

from __future__ import annotations

import configparser
from dataclasses import replace
from pathlib import Path

from .policy import DEFAULT_VOCAB
from .trainer import TrainConfig, grpo_baseline, paper_preset


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _words(text: str) -> tuple[str, ...]:
    return tuple(w.strip() for w in text.split(",") if w.strip())


def _optional_float(text: str) -> float | None:
    return None if text.strip().lower() in ("", "none", "off") else float(text)


TRAIN_KEYS = {
    "seed": int, "learning_rate": float, "momentum": float, "batch_questions": int, "G": int,
    "stage1_iters": int, "stage2_iters": int, "task_difficulty": int, "n_train_tasks": int,
    "n_eval_tasks": int, "trainable": _words, "plateau_window": int, "plateau_tol": float,
}
CURRICULUM_KEYS = {
    "enabled": ("curriculum", _bool), "hard_temperature": ("hard_temperature", _optional_float),
    "probe_G": ("probe_G", int), "medium_fraction": ("medium_fraction", float),
    "fusion_cap": ("fusion_cap", int), "fusion_rollouts": ("fusion_rollouts", int),
    "rescore_between_stages": ("rescore_between_stages", _bool),
}
EVAL_KEYS = {"k": ("eval_k", int), "temperature": ("eval_temperature", float), "top_p": ("eval_top_p", float)}
SAMPLER_KEYS = {"temperature": float, "top_p": float, "max_len": int}
OBJECTIVE_KEYS = {"epsilon": float, "kl_coeff": float}
MODULATION_KEYS = {"alpha": float, "beta": float, "gamma": float, "theta": float}
SEGMENTATION_KEYS = {"entropy_quantile": float, "min_interval": int, "markers": _words,
                     "boundary_tokens": _words, "fallback_to_surprisal": _bool}
ATTRIBUTION_KEYS = {"answer_cue_len": int, "entropy_convention": str, "max_context": int}
PRIOR_KEYS = {"arith_margin": float, "arith_noise": float, "copy_margin": float, "marker_spread": float,
              "recheck_logit": float, "grammar_margin": float, "seed": int}
SECTIONS = ("train", "stage1", "stage2", "modulation", "segmentation", "attribution", "curriculum", "eval",
            "prior")
PRESETS = ("desk", "paper", "grpo")


def _parse(section, keys, path):
    out = {}
    for key, raw in section.items():
        if key not in keys:
            raise ConfigError(f"{path}: [{section.name}] unknown key {key!r}")
        conv = keys[key]
        try:
            out[key] = conv(raw)
        except ValueError as exc:
            raise ConfigError(f"{path}: [{section.name}] {key}: {exc}") from exc
    return out


def config_from_text(text: str, path: str = "<config>") -> TrainConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for name in parser.sections():
        if name not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{name}]")
    sec = {name: parser[name] if parser.has_section(name) else {} for name in SECTIONS}

    train = dict(sec["train"])
    preset = train.pop("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"{path}: [train] preset must be one of {PRESETS}")
    cfg = paper_preset() if preset == "paper" else TrainConfig()
    changes = _parse(_Section("train", train), TRAIN_KEYS, path)

    for stage in ("stage1", "stage2"):
        vals = _parse(_Section(stage, sec[stage]), {**SAMPLER_KEYS, **OBJECTIVE_KEYS}, path)
        sampler = getattr(cfg, f"sampler{stage[-1]}")
        objective = getattr(cfg, f"objective{stage[-1]}")
        s_vals = {k: v for k, v in vals.items() if k in SAMPLER_KEYS}
        o_vals = {k: v for k, v in vals.items() if k in OBJECTIVE_KEYS}
        try:
            changes[f"sampler{stage[-1]}"] = replace(sampler, **s_vals)
            changes[f"objective{stage[-1]}"] = replace(objective, **o_vals)
        except ValueError as exc:
            raise ConfigError(f"{path}: [{stage}] {exc}") from exc

    try:
        changes["modulation"] = replace(cfg.modulation, **_parse(_Section("modulation", sec["modulation"]),
                                                                 MODULATION_KEYS, path))
        seg = _parse(_Section("segmentation", sec["segmentation"]), SEGMENTATION_KEYS, path)
        if "markers" in seg:
            seg["marker_lexicon"] = frozenset(seg.pop("markers"))
        if "boundary_tokens" in seg:
            seg["boundary_token_ids"] = frozenset(DEFAULT_VOCAB.id(t) for t in seg.pop("boundary_tokens"))
        changes["segmentation"] = replace(cfg.segmentation, **seg)
        changes["attribution"] = replace(cfg.attribution, **_parse(_Section("attribution", sec["attribution"]),
                                                                   ATTRIBUTION_KEYS, path))
        changes["prior"] = replace(cfg.prior, **_parse(_Section("prior", sec["prior"]), PRIOR_KEYS, path))
        for name, table in (("curriculum", CURRICULUM_KEYS), ("eval", EVAL_KEYS)):
            keys = {k: conv for k, (_, conv) in table.items()}
            for k, v in _parse(_Section(name, sec[name]), keys, path).items():
                changes[table[k][0]] = v
        cfg = replace(cfg, **changes)
    except (ValueError, KeyError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: {exc}") from exc
    return grpo_baseline(cfg) if preset == "grpo" else cfg


def load_config(path: str | Path) -> TrainConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {p}: {exc.strerror or exc}") from exc
    return config_from_text(text, str(p))


class _Section(dict):
    def __init__(self, name, items):
        super().__init__(items)
        self.name = name
