"""Flat ``section.key = value`` configuration with a fixed schema.

Model and optimizer keys carry the hyperparameter names used in the
literature on masked autoregressive policies (``encoder_embed_dim``,
``diffloss_w``, ``num_sampling_steps = ddim10`` ...).  Defaults are the
full-size values; desk-scale runs override them.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .errors import ConfigError


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text):
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _ints(text):
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _ddim_steps(text):
    m = re.fullmatch(r"\s*(?:ddim)?(\d+)\s*", str(text))
    if not m:
        raise ValueError(f"expected 'ddimN' or an integer, got {text!r}")
    return int(m.group(1))


def _choice(*options):
    def parse(text):
        t = str(text).strip()
        if t not in options:
            raise ValueError(f"expected one of {options}, got {text!r}")
        return t

    return parse


def _positive(parse):
    def check(text):
        v = parse(text)
        if v <= 0:
            raise ValueError(f"must be positive, got {v}")
        return v

    return check


def _unit(text):
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"must lie in [0, 1], got {v}")
    return v


def _nonneg(parse):
    def check(text):
        v = parse(text)
        if v < 0:
            raise ValueError(f"must be non-negative, got {v}")
        return v

    return check


@dataclass(frozen=True)
class Key:
    parse: Callable[[Any], Any]
    default: Any
    help: str = ""


pint = _positive(int)
pfloat = _positive(float)

SCHEMA: dict[str, Key] = {
    "seed": Key(_nonneg(int), 0, "base seed for every random stream"),
    # policy network
    "model.horizon": Key(pint, 16, "Horizon (T_h)"),
    "model.action_step": Key(pint, 8, "Action step (T_a)"),
    "model.observation_step": Key(pint, 2, "Observation step (T_o)"),
    "model.state_mlp_size": Key(pint, 64),
    "model.encoder_embed_dim": Key(pint, 512),
    "model.decoder_embed_dim": Key(pint, 512),
    "model.encoder_depth": Key(pint, 4),
    "model.decoder_depth": Key(pint, 4),
    "model.encoder_num_heads": Key(pint, 8),
    "model.decoder_num_heads": Key(pint, 8),
    "model.mlp_ratio": Key(pfloat, 4.0),
    "model.diffloss_d": Key(pint, 3, "residual blocks in the noise-prediction head"),
    "model.diffloss_w": Key(pint, 1024, "width of the noise-prediction head"),
    "model.diffusion_batch_mul": Key(pint, 1, "noise draws per latent token during training"),
    "model.mask_ratio": Key(_unit, 0.7, "initial mask ratio m"),
    "model.mask_std": Key(pfloat, 0.1, "std of the truncated-normal mask ratio draw"),
    "model.loss_masking": Key(_choice("full", "masked"), "full", "positions entering the diffusion loss"),
    "model.use_dct": Key(_bool, True, "false gives the no-DCT ablation"),
    # diffusion process
    "diffusion.num_training_steps": Key(pint, 100),
    "diffusion.schedule": Key(_choice("cosine", "linear"), "cosine"),
    "diffusion.num_sampling_steps": Key(_positive(_ddim_steps), 10, "DDIM steps, 'ddim10' accepted"),
    # sampler
    "sampler.num_iter": Key(pint, 4),
    "sampler.ddim_eta": Key(_nonneg(float), 0.0),
    "sampler.clip_denoised": Key(_bool, True),
    # optimisation
    "train.dataset": Key(str, "", "demonstration directory"),
    "train.batchsize": Key(pint, 128),
    "train.epochs": Key(pint, 3000),
    "train.max_steps": Key(_nonneg(int), 0, "stop after this many optimizer steps (0 = no cap)"),
    "train.optimizer": Key(_choice("adamw"), "adamw"),
    "train.betas": Key(_floats, (0.95, 0.999)),
    "train.learning_rate": Key(pfloat, 1.0e-4),
    "train.weight_decay": Key(_nonneg(float), 1.0e-6),
    "train.lr_scheduler": Key(_choice("cosine", "constant"), "cosine"),
    "train.warmup_steps": Key(_nonneg(int), 0),
    "train.checkpoint_every": Key(pint, 100, "epochs between checkpoints"),
    "train.window_stride": Key(pint, 1, "start-index stride of training windows"),
    # environments and data
    "env.variant": Key(_choice("reach2d", "pusht_lite"), "reach2d"),
    "env.max_steps": Key(_nonneg(int), 0, "0 = environment default"),
    "data.n_demos": Key(pint, 64),
    "data.noise_std": Key(_nonneg(float), 0.0),
    # evaluation
    "eval.episodes": Key(pint, 100),
    "eval.seeds": Key(_ints, (0, 1, 2)),
    "bench.num_iters": Key(_ints, (1, 2, 4, 8)),
    "bench.episodes": Key(_nonneg(int), 100, "closed-loop episodes per N_iter (0 = timing only)"),
    "bench.timing_repeats": Key(pint, 5),
    "analyze.band_edges": Key(_floats, tuple(round(0.1 * i, 1) for i in range(11))),
    "analyze.overlay_fractions": Key(_floats, (0.125, 0.25, 0.5, 1.0)),
    "analyze.energy_percents": Key(_floats, tuple(float(p) for p in range(0, 101, 5))),
}


def _render(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_render(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class Config:
    """Validated flat configuration.  Index with the dotted key."""

    def __init__(self, values=None):
        self._values = {k: spec.default for k, spec in SCHEMA.items()}
        if values:
            self.update(values)

    def update(self, values):
        for key, raw in values.items():
            self[key] = raw
        return self

    def __setitem__(self, key, raw):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            self._values[key] = SCHEMA[key].parse(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: {exc}") from None

    def __getitem__(self, key):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def section(self, name):
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self._values.items() if k.startswith(prefix)}

    def copy(self):
        c = Config()
        c._values = dict(self._values)
        return c

    def to_text(self):
        return "".join(f"{k} = {_render(v)}\n" for k, v in sorted(self._values.items()))

    def as_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(self._values.items())}

    def __eq__(self, other):
        return isinstance(other, Config) and self._values == other._values

    def __repr__(self):
        return f"Config({len(self._values)} keys)"


def parse_text(text, source="<string>"):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path=None, overrides=()):
    """File values first, then ``key=value`` override strings in order."""
    cfg = Config()
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg.update(parse_text(text, source=str(path)))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        cfg[key] = value
    return cfg
