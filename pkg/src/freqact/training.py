"""Training loop, checkpoint lifecycle and the deployable policy wrapper."""

from __future__ import annotations

import logging
import math
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import Config, parse_text
from .errors import ConfigError, DataError, NumericError
from .harness import Normalizer, window_arrays
from .nn import AdamW
from .policy import FreqPolicyNet, NetConfig, training_step
from .sampler import hierarchical_generate

log = logging.getLogger(__name__)

# keys that may change between a checkpoint and its continuation
RESUMABLE_KEYS = frozenset({"train.epochs", "train.checkpoint_every", "train.dataset"})


class TrainedPolicy:
    """Network plus the normalizers needed to act in raw environment units."""

    def __init__(self, model: FreqPolicyNet, obs_norm: Normalizer, act_norm: Normalizer, config: Config):
        self.model = model
        self.obs_norm = obs_norm
        self.act_norm = act_norm
        self.config = config

    @property
    def net_cfg(self) -> NetConfig:
        return self.model.cfg

    @property
    def action_step(self) -> int:
        return self.config["model.action_step"]

    def plan(self, obs, sampler_cfg, rng, schedule):
        """Raw (B, T_o, obs_dim) histories -> raw (B, T, d) action chunks and the generation trace."""
        gen = hierarchical_generate(self.model, self.obs_norm.normalize(obs), schedule, sampler_cfg, rng)
        return self.act_norm.denormalize(gen.tokens), gen

    @classmethod
    def load(cls, path):
        sections = ckpt.load(path)
        cfg, meta = _config_and_meta(sections, path)
        model = FreqPolicyNet(NetConfig.from_config(cfg, meta["obs_dim"], meta["action_dim"]), seed=cfg["seed"])
        _load_params(model, sections, path)
        return cls(model, _normalizer(sections, "obs"), _normalizer(sections, "act"), cfg)


def _config_and_meta(sections, path):
    try:
        cfg = Config(parse_text(sections["config"], source=f"{path}:config"))
        meta = sections["meta"]
    except KeyError as exc:
        raise DataError(f"{path}: checkpoint lacks section {exc}") from None
    return cfg, meta


def _normalizer(sections, which):
    return Normalizer(sections[f"norm/{which}_offset"], sections[f"norm/{which}_scale"])


def _load_params(model, sections, path):
    params = model.named_params()
    with torch.no_grad():
        for name, p in params.items():
            key = f"param/{name}"
            if key not in sections:
                raise DataError(f"{path}: missing parameter {name!r}")
            arr = sections[key]
            if arr.shape != tuple(p.shape):
                raise DataError(f"{path}: parameter {name!r} has shape {arr.shape}, model expects {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr))


class Trainer:
    """Epoch-based training on demonstration windows with exact resume support."""

    def __init__(self, cfg: Config, demos):
        if not demos:
            raise DataError("training needs at least one demonstration")
        self.cfg = cfg
        self.env_variant = demos[0].env
        n_obs, horizon = cfg["model.observation_step"], cfg["model.horizon"]
        obs, act = window_arrays(demos, n_obs, horizon, cfg["train.window_stride"])
        self.obs_norm = Normalizer.fit(np.concatenate([d.obs for d in demos]))
        self.act_norm = Normalizer.fit(np.concatenate([d.actions for d in demos]))
        self.obs = self.obs_norm.normalize(obs)
        self.act = self.act_norm.normalize(act)
        net_cfg = NetConfig.from_config(cfg, obs.shape[-1], act.shape[-1])
        self.model = FreqPolicyNet(net_cfg, seed=cfg["seed"])
        self.batch = min(cfg["train.batchsize"], len(self.obs))
        self.steps_per_epoch = math.ceil(len(self.obs) / self.batch)
        total = cfg["train.epochs"] * self.steps_per_epoch
        if cfg["train.max_steps"]:
            total = min(total, cfg["train.max_steps"])
        self.total_steps = total
        schedule_total = total if cfg["train.lr_scheduler"] == "cosine" else 10**18
        self.optimizer = AdamW(self.model.named_params(), lr=cfg["train.learning_rate"], betas=cfg["train.betas"],
                               weight_decay=cfg["train.weight_decay"], total_steps=schedule_total,
                               warmup=cfg["train.warmup_steps"])
        self.rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], 1]))
        self.epoch = 0
        self.epoch_losses = []

    @property
    def step(self):
        return self.optimizer.step_count

    def done(self):
        return self.epoch >= self.cfg["train.epochs"] or self.step >= self.total_steps

    def run_epoch(self):
        perm = self.rng.permutation(len(self.obs))
        losses = []
        for start in range(0, len(perm), self.batch):
            if self.step >= self.total_steps:
                break
            idx = perm[start:start + self.batch]
            loss = training_step(self.model, self.optimizer, self.obs[idx], self.act[idx], self.rng)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss {loss} at step {self.step}, epoch {self.epoch}")
            losses.append(loss)
        self.epoch += 1
        self.epoch_losses.append(float(np.mean(losses)) if losses else float("nan"))
        return self.epoch_losses[-1]

    def run(self, out_dir=None, until_epoch=None, progress=None):
        """Train until the configured budget (or ``until_epoch``), checkpointing into ``out_dir``."""
        every = self.cfg["train.checkpoint_every"]
        stop = self.cfg["train.epochs"] if until_epoch is None else min(until_epoch, self.cfg["train.epochs"])
        while self.epoch < stop and self.step < self.total_steps:
            loss = self.run_epoch()
            if progress:
                progress(self)
            log.debug("epoch %d step %d loss %.5f", self.epoch, self.step, loss)
            if out_dir is not None and (self.epoch % every == 0 or self.done() or self.epoch == stop):
                self.save(Path(out_dir) / "checkpoints" / "latest.ckpt")
        return self

    def policy(self):
        return TrainedPolicy(self.model, self.obs_norm, self.act_norm, self.cfg)

    # -- persistence --------------------------------------------------------

    def sections(self):
        meta = {
            "epoch": self.epoch,
            "step": self.step,
            "obs_dim": int(self.obs.shape[-1]),
            "action_dim": int(self.act.shape[-1]),
            "env": self.env_variant,
            "rng": self.rng.bit_generator.state,
        }
        out = [("config", self.cfg.to_text()), ("meta", meta)]
        arrays = {}
        for name, p in self.model.named_params().items():
            arrays[f"param/{name}"] = p.detach().numpy()
            if name in self.optimizer.state:
                m, v = self.optimizer.state[name]
                arrays[f"adam_m/{name}"] = m.numpy()
                arrays[f"adam_v/{name}"] = v.numpy()
        arrays["norm/obs_offset"] = self.obs_norm.offset
        arrays["norm/obs_scale"] = self.obs_norm.scale
        arrays["norm/act_offset"] = self.act_norm.offset
        arrays["norm/act_scale"] = self.act_norm.scale
        arrays["log/epoch_loss"] = np.asarray(self.epoch_losses, dtype=np.float64)
        out.extend(sorted(arrays.items()))
        return out

    def save(self, path):
        ckpt.save(path, self.sections())
        return path

    @classmethod
    def resume(cls, path, demos, cfg=None):
        """Rebuild a trainer from ``path``; ``cfg`` may extend the epoch budget but must otherwise match."""
        sections = ckpt.load(path)
        saved_cfg, meta = _config_and_meta(sections, path)
        if cfg is None:
            cfg = saved_cfg
        else:
            clash = [k for k, v in cfg.as_dict().items()
                     if k not in RESUMABLE_KEYS and saved_cfg.as_dict()[k] != v]
            if clash:
                raise ConfigError(f"{path}: config differs from the checkpoint in {', '.join(clash)}")
        trainer = cls(cfg, demos)
        if (meta["obs_dim"], meta["action_dim"]) != (trainer.obs.shape[-1], trainer.act.shape[-1]):
            raise DataError(f"{path}: checkpoint dimensions do not match the dataset")
        _load_params(trainer.model, sections, path)
        with torch.no_grad():
            for name, p in trainer.model.named_params().items():
                if f"adam_m/{name}" in sections:
                    trainer.optimizer.state[name] = (torch.from_numpy(sections[f"adam_m/{name}"].copy()),
                                                     torch.from_numpy(sections[f"adam_v/{name}"].copy()))
        trainer.optimizer.step_count = int(meta["step"])
        trainer.epoch = int(meta["epoch"])
        trainer.epoch_losses = sections["log/epoch_loss"].tolist()
        trainer.rng.bit_generator.state = meta["rng"]
        trainer.obs_norm = _normalizer(sections, "obs")
        trainer.act_norm = _normalizer(sections, "act")
        return trainer


def loss_curve_csv(trainer):
    rows = "".join(f"{i + 1},{v!r}\n" for i, v in enumerate(trainer.epoch_losses))
    return "epoch,loss\n" + rows
