"""Coarse-to-fine action generation over an increasing frequency schedule.

Each iteration encodes the current band-limited tokens at level ``l_i``,
draws a full-spectrum candidate with DDIM from the noise head, and refeeds
its ``l_{i+1}``-level low-pass as the next iteration's tokens.  The hidden
set of positions shrinks along a cosine schedule.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import trajectory as tc
from .errors import ConfigError, RangeError
from .nn import DTYPE
from .policy import ddim_timesteps, round_count


@dataclass(frozen=True)
class FreqSchedule:
    levels: tuple

    def __post_init__(self):
        lv = tuple(int(v) for v in self.levels)
        if len(lv) < 2 or lv[0] != 0:
            raise RangeError(f"frequency schedule must start at 0 and have >= 2 levels, got {lv}")
        if any(b <= a for a, b in zip(lv, lv[1:])):
            raise RangeError(f"frequency schedule must be strictly increasing, got {lv}")
        object.__setattr__(self, "levels", lv)

    @property
    def n_iter(self) -> int:
        return len(self.levels) - 1

    @property
    def horizon(self) -> int:
        return self.levels[-1]


@dataclass(frozen=True)
class SamplerConfig:
    ddim_steps: int = 10
    ddim_eta: float = 0.0
    n_iter: int = 4
    seed: int = 0
    clip_denoised: bool = True

    def validate(self, num_train_steps):
        if not 1 <= self.ddim_steps <= num_train_steps:
            raise ConfigError(f"ddim_steps={self.ddim_steps} must lie in [1, {num_train_steps}]")
        if self.ddim_eta < 0:
            raise ConfigError(f"ddim_eta must be non-negative, got {self.ddim_eta}")
        if self.n_iter < 1:
            raise ConfigError(f"n_iter must be positive, got {self.n_iter}")

    @classmethod
    def from_config(cls, cfg, n_iter=None):
        return cls(ddim_steps=cfg["diffusion.num_sampling_steps"], ddim_eta=cfg["sampler.ddim_eta"],
                   n_iter=n_iter or cfg["sampler.num_iter"], seed=cfg["seed"],
                   clip_denoised=cfg["sampler.clip_denoised"])


def cosine_mask_ratio(step, n_iter):
    if not 0 <= step < n_iter:
        raise RangeError(f"step={step} outside [0, {n_iter})")
    return math.cos(math.pi / 2 * (step + 1) / n_iter)


def default_schedule(T, n_iter):
    """Evenly spaced levels 0 = l_0 < ... < l_{n_iter} = T (rounded)."""
    if n_iter < 1 or n_iter > T:
        raise RangeError(f"n_iter={n_iter} must lie in [1, T={T}]")
    return FreqSchedule(tuple(int(round(i * T / n_iter)) for i in range(n_iter + 1)))


def nfe_count(schedule, cfg):
    """Noise-head evaluations per generated trajectory."""
    return schedule.n_iter * cfg.ddim_steps


def _normal(rng, shape):
    """Standard normal draws; a list of generators gives one independent stream per batch row."""
    if isinstance(rng, (list, tuple)):
        if len(rng) != shape[0]:
            raise RangeError(f"{len(rng)} generators for batch of {shape[0]}")
        return np.stack([g.standard_normal(shape[1:]) for g in rng])
    return rng.standard_normal(shape)


def ddim_sample(eps_fn, z, k, cfg: SamplerConfig, rng, schedule, shape):
    """Run the DDIM subsequence from pure noise to a clean sample.

    ``eps_fn(x_t, t, k, z)`` predicts noise for a batch at integer step ``t``;
    ``schedule`` is the training :class:`DiffusionSchedule`; ``shape`` is
    (B, T, d).
    """
    cfg.validate(schedule.num_steps)
    b = shape[0]
    x = _normal(rng, shape)
    steps = ddim_timesteps(schedule.num_steps, cfg.ddim_steps)
    for i, t in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else 0
        ab = float(schedule.ab(t))
        ab_prev = float(schedule.ab(t_prev))
        with torch.no_grad():
            eps = eps_fn(torch.as_tensor(x, dtype=DTYPE), np.full(b, t), k, z)
        eps = eps.numpy() if isinstance(eps, torch.Tensor) else np.asarray(eps)
        x0 = (x - math.sqrt(1 - ab) * eps) / math.sqrt(ab)
        if cfg.clip_denoised:
            x0 = np.clip(x0, -1.0, 1.0)
            eps = (x - math.sqrt(ab) * x0) / math.sqrt(1 - ab)
        sigma = 0.0
        if cfg.ddim_eta > 0 and t_prev > 0:
            sigma = cfg.ddim_eta * math.sqrt((1 - ab_prev) / (1 - ab) * (1 - ab / ab_prev))
        x = math.sqrt(ab_prev) * x0 + math.sqrt(max(1 - ab_prev - sigma**2, 0.0)) * eps
        if sigma > 0:
            x = x + sigma * _normal(rng, shape)
    return x


def reveal(mask, count, rng):
    """Keep ``count`` of the currently hidden positions hidden, chosen uniformly at random."""
    out = mask.copy()
    rngs = rng if isinstance(rng, (list, tuple)) else [rng] * len(mask)
    for row, g in zip(out, rngs):
        hidden = np.flatnonzero(row)
        if len(hidden) > count:
            row[g.permutation(hidden)[count:]] = False
    return out


@dataclass
class Generation:
    tokens: np.ndarray  # (B, T, d) final normalized actions
    candidates: list = field(default_factory=list)  # full-spectrum sample per iteration
    refeeds: list = field(default_factory=list)  # tokens fed to the next iteration
    masks: list = field(default_factory=list)  # mask in force at each iteration
    levels: tuple = ()
    nfe: int = 0
    wall_ms: float = 0.0

    def spectral_norms(self):
        """Per iteration, mean over the batch of the Frobenius norm of the candidate's spectrum."""
        return [float(np.mean(np.linalg.norm(tc.dct_array(c), axis=(-2, -1)))) for c in self.candidates]


def hierarchical_generate(model, obs, schedule: FreqSchedule, cfg: SamplerConfig, rng):
    """Generate normalized action chunks for a batch of normalized observation histories.

    ``rng`` is one ``np.random.Generator`` or a list with one per batch row.
    """
    start = time.perf_counter()
    net = model.cfg
    if schedule.horizon != net.horizon:
        raise RangeError(f"schedule ends at {schedule.horizon}, model horizon is {net.horizon}")
    cfg.validate(net.diffusion_steps)
    obs = np.asarray(obs, dtype=np.float64)
    b, T, d = obs.shape[0], net.horizon, net.action_dim
    mask = np.ones((b, T), dtype=bool)
    tokens = np.zeros((b, T, d))
    out = Generation(tokens, levels=schedule.levels)
    with torch.no_grad():
        z_obs = model.encode_observation(obs)
        for step in range(schedule.n_iter):
            k = np.full(b, schedule.levels[step])
            out.masks.append(mask.copy())
            z_mask = model.encode(z_obs, tokens, k, mask)
            z = model.decode(z_obs, z_mask, k, mask)
            x_hat = ddim_sample(model.eps_predict, z, k, cfg, rng, model.schedule, (b, T, d))
            out.candidates.append(x_hat)
            out.nfe += cfg.ddim_steps
            if step < schedule.n_iter - 1:
                nxt = schedule.levels[step + 1]
                tokens = tc.lowpass_array(x_hat, nxt) if net.use_dct else x_hat
                out.refeeds.append(tokens)
            else:
                tokens = x_hat
            mask = reveal(mask, round_count(cosine_mask_ratio(step, schedule.n_iter), T), rng)
    out.tokens = tokens
    out.wall_ms = (time.perf_counter() - start) * 1e3
    return out
