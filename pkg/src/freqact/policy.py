"""Masked encoder-decoder with a diffusion noise-prediction head.

Training follows the frequency-level recipe: draw a level ``k`` per sample,
condition on the k-level low-pass reconstruction of the target chunk, hide a
level-dependent fraction of its positions, and regress the noise added to
the full-spectrum chunk from the decoder's continuous tokens.

Shapes: B batch, T horizon, d action dim, T_o observation steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import truncnorm
from torch import nn

from . import trajectory as tc
from .errors import RangeError, ShapeError
from .nn import DTYPE, Block, LayerNorm, Linear, backward, trunc_normal_, zero_grad

# ---------------------------------------------------------------------------
# diffusion schedule


@dataclass(frozen=True)
class DiffusionSchedule:
    """Cumulative signal level alpha_bar[t-1] for t = 1..T_diff."""

    betas: np.ndarray
    alpha_bar: np.ndarray

    @property
    def num_steps(self) -> int:
        return len(self.betas)

    def ab(self, t):
        """alpha_bar at 1-based step(s) ``t``; t = 0 maps to 1 (clean signal)."""
        t = np.asarray(t)
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[t]


def make_schedule(num_steps=100, kind="cosine", max_beta=0.999):
    if num_steps < 1:
        raise RangeError(f"diffusion steps must be positive, got {num_steps}")
    if kind == "cosine":
        s = 0.008

        def f(u):
            return math.cos((u + s) / (1 + s) * math.pi / 2) ** 2

        betas = np.array([min(1 - f((i + 1) / num_steps) / f(i / num_steps), max_beta) for i in range(num_steps)])
    elif kind == "linear":
        scale = 1000 / num_steps
        betas = np.linspace(scale * 1e-4, scale * 0.02, num_steps)
    else:
        raise RangeError(f"unknown noise schedule {kind!r}")
    return DiffusionSchedule(betas, np.cumprod(1.0 - betas))


def ddim_timesteps(num_train, num_sample):
    """Descending 1-based steps, evenly spaced and ending at ``num_train``."""
    if not 1 <= num_sample <= num_train:
        raise RangeError(f"ddim steps {num_sample} must lie in [1, {num_train}]")
    return [int(round(num_train - i * num_train / num_sample)) for i in range(num_sample)]


# ---------------------------------------------------------------------------
# masking


def adaptive_mask_ratio(k, T, m):
    if not 0 <= k <= T:
        raise RangeError(f"level k={k} outside [0, {T}]")
    if not 0.0 <= m <= 1.0:
        raise RangeError(f"initial mask ratio m={m} outside [0, 1]")
    return m * (1 - k / T)


def draw_mask_ratio(ratio, rng, std=0.1, size=None):
    """Truncated-normal draw centred on ``ratio``.

    The support is the widest interval inside [0, 1] symmetric about
    ``ratio``, so the draw is unbiased and ratio 0 / ratio 1 are exact.
    """
    ratio = np.asarray(ratio, dtype=np.float64)
    if np.any((ratio < 0) | (ratio > 1)):
        raise RangeError(f"mask ratio outside [0, 1]: {ratio}")
    if size is not None:
        ratio = np.broadcast_to(ratio, size)
    out = np.array(ratio, dtype=np.float64)
    half = np.minimum(ratio, 1.0 - ratio)
    live = half > 0
    if np.any(live):
        bound = half[live] / std
        out[live] = truncnorm.rvs(-bound, bound, loc=ratio[live], scale=std, random_state=rng)
    return out


def mask_from_count(count, T, rng):
    flags = np.zeros(T, dtype=bool)
    flags[rng.permutation(T)[:count]] = True
    return flags


def round_count(ratio, T):
    return int(np.floor(ratio * T + 0.5))


def sample_mask(ratio, T, rng, std=0.1):
    """Mask of length T with round(r T) hidden positions, r ~ TruncNorm(ratio, std)."""
    r = float(draw_mask_ratio(ratio, rng, std))
    return mask_from_count(round_count(r, T), T, rng)


def sample_masks(ratios, T, rng, std=0.1):
    ratios = np.asarray(ratios, dtype=np.float64)
    r = draw_mask_ratio(ratios, rng, std)
    return np.stack([mask_from_count(round_count(ri, T), T, rng) for ri in r.reshape(-1)]).reshape(ratios.shape + (T,))


# ---------------------------------------------------------------------------
# network


@dataclass(frozen=True)
class NetConfig:
    obs_dim: int
    action_dim: int
    horizon: int = 16
    obs_steps: int = 2
    state_mlp_size: int = 64
    encoder_embed_dim: int = 512
    decoder_embed_dim: int = 512
    encoder_depth: int = 4
    decoder_depth: int = 4
    encoder_num_heads: int = 8
    decoder_num_heads: int = 8
    mlp_ratio: float = 4.0
    diffloss_d: int = 3
    diffloss_w: int = 1024
    diffusion_steps: int = 100
    schedule: str = "cosine"
    mask_ratio: float = 0.7
    mask_std: float = 0.1
    loss_masking: str = "full"
    use_dct: bool = True
    diffusion_batch_mul: int = 1

    @classmethod
    def from_config(cls, cfg, obs_dim, action_dim):
        m = cfg.section("model")
        return cls(
            obs_dim=obs_dim,
            action_dim=action_dim,
            horizon=m["horizon"],
            obs_steps=m["observation_step"],
            state_mlp_size=m["state_mlp_size"],
            encoder_embed_dim=m["encoder_embed_dim"],
            decoder_embed_dim=m["decoder_embed_dim"],
            encoder_depth=m["encoder_depth"],
            decoder_depth=m["decoder_depth"],
            encoder_num_heads=m["encoder_num_heads"],
            decoder_num_heads=m["decoder_num_heads"],
            mlp_ratio=m["mlp_ratio"],
            diffloss_d=m["diffloss_d"],
            diffloss_w=m["diffloss_w"],
            diffusion_steps=cfg["diffusion.num_training_steps"],
            schedule=cfg["diffusion.schedule"],
            mask_ratio=m["mask_ratio"],
            mask_std=m["mask_std"],
            loss_masking=m["loss_masking"],
            use_dct=m["use_dct"],
            diffusion_batch_mul=m["diffusion_batch_mul"],
        )


class ResBlockAdaLN(nn.Module):
    """Residual MLP block whose layer norm is shifted/scaled/gated by the condition."""

    def __init__(self, width, generator):
        super().__init__()
        self.norm = LayerNorm(width, affine=False)
        self.fc1 = Linear(width, width, generator)
        self.fc2 = Linear(width, width, generator)
        self.modulation = Linear(width, 3 * width, generator, zero=True)

    def forward(self, h, cond):
        shift, scale, gate = self.modulation(F.silu(cond)).chunk(3, dim=-1)
        u = self.norm(h) * (1 + scale) + shift
        u = self.fc2(F.gelu(self.fc1(u)))
        return h + gate * u


class NoiseHead(nn.Module):
    """Per-position noise predictor eps(x_t | t, k, z)."""

    def __init__(self, action_dim, z_dim, width, depth, diffusion_steps, n_levels, generator):
        super().__init__()
        self.diffusion_steps = diffusion_steps
        self.input_proj = Linear(action_dim, width, generator)
        self.cond_proj = Linear(z_dim, width, generator)
        self.time_embed = nn.Parameter(torch.zeros(diffusion_steps, width, dtype=DTYPE))
        self.level_embed = nn.Parameter(torch.zeros(n_levels, width, dtype=DTYPE))
        trunc_normal_(self.time_embed, generator)
        trunc_normal_(self.level_embed, generator)
        self.blocks = nn.ModuleList([ResBlockAdaLN(width, generator) for _ in range(depth)])
        self.final_norm = LayerNorm(width, affine=False)
        self.final_modulation = Linear(width, 2 * width, generator, zero=True)
        self.out = Linear(width, action_dim, generator, zero=True)

    def condition(self, z, t, k):
        """Conditioning vector per position: projected token + step and level embeddings."""
        return self.cond_proj(z) + self.time_embed[t - 1][:, None, :] + self.level_embed[k][:, None, :]

    def forward(self, x_t, t, k, z):
        cond = self.condition(z, t, k)
        h = self.input_proj(x_t)
        for blk in self.blocks:
            h = blk(h, cond)
        shift, scale = self.final_modulation(F.silu(cond)).chunk(2, dim=-1)
        return self.out(self.final_norm(h) * (1 + scale) + shift)


def _as_long(v, b):
    t = torch.as_tensor(np.asarray(v), dtype=torch.long)
    return t.expand(b).contiguous() if t.dim() == 0 else t


class FreqPolicyNet(nn.Module):
    """Observation encoder, masked encoder/decoder over action tokens, noise head.

    Token layout in both transformers: ``[obs_0 .. obs_{T_o-1}, level, a_0 .. a_{T-1}]``.
    """

    def __init__(self, cfg: NetConfig, seed=0):
        super().__init__()
        self.cfg = cfg
        g = torch.Generator().manual_seed(int(seed))
        T, de, dd = cfg.horizon, cfg.encoder_embed_dim, cfg.decoder_embed_dim
        n_tok = cfg.obs_steps + 1 + T
        self.n_levels = T + 1

        self.obs_fc1 = Linear(cfg.obs_dim, cfg.state_mlp_size, g)
        self.obs_fc2 = Linear(cfg.state_mlp_size, de, g)

        self.action_embed = Linear(cfg.action_dim, de, g)
        self.enc_level_embed = nn.Parameter(torch.zeros(self.n_levels, de, dtype=DTYPE))
        self.enc_pos = nn.Parameter(torch.zeros(n_tok, de, dtype=DTYPE))
        self.encoder = nn.ModuleList([Block(de, cfg.encoder_num_heads, g, cfg.mlp_ratio)
                                      for _ in range(cfg.encoder_depth)])
        self.encoder_norm = LayerNorm(de)

        self.decoder_embed = Linear(de, dd, g)
        self.obs_skip = Linear(de, dd, g)
        self.mask_token = nn.Parameter(torch.zeros(dd, dtype=DTYPE))
        self.dec_level_embed = nn.Parameter(torch.zeros(self.n_levels, dd, dtype=DTYPE))
        self.dec_pos = nn.Parameter(torch.zeros(n_tok, dd, dtype=DTYPE))
        self.decoder = nn.ModuleList([Block(dd, cfg.decoder_num_heads, g, cfg.mlp_ratio)
                                      for _ in range(cfg.decoder_depth)])
        self.decoder_norm = LayerNorm(dd)
        self.z_pos = nn.Parameter(torch.zeros(T, dd, dtype=DTYPE))

        for p in (self.enc_level_embed, self.enc_pos, self.mask_token, self.dec_level_embed,
                  self.dec_pos, self.z_pos):
            trunc_normal_(p, g)

        self.head = NoiseHead(cfg.action_dim, dd, cfg.diffloss_w, cfg.diffloss_d, cfg.diffusion_steps,
                              self.n_levels, g)
        self.schedule = make_schedule(cfg.diffusion_steps, cfg.schedule)

    # -- parameters ---------------------------------------------------------

    def named_params(self):
        """Stable name -> tensor mapping used by checkpoints and the optimizer."""
        return dict(self.named_parameters())

    def group_of(self, name):
        if name.startswith("obs_fc"):
            return "obs_encoder"
        if name.startswith(("action_embed", "enc_", "encoder")):
            return "encoder"
        if name.startswith("head."):
            return "head"
        return "decoder"

    # -- forward pieces -----------------------------------------------------

    def encode_observation(self, obs):
        """(B, T_o, obs_dim) normalized observation history -> (B, T_o, D_enc)."""
        obs = torch.as_tensor(obs, dtype=DTYPE)
        if obs.dim() != 3 or obs.shape[1:] != (self.cfg.obs_steps, self.cfg.obs_dim):
            raise ShapeError("encode_observation", obs.shape,
                             (None, self.cfg.obs_steps, self.cfg.obs_dim), detail="observation history")
        return self.obs_fc2(F.gelu(self.obs_fc1(obs)))

    def _check_tokens(self, op, tokens, mask, k):
        c = self.cfg
        if tokens.dim() != 3 or tokens.shape[1:] != (c.horizon, c.action_dim):
            raise ShapeError(op, tokens.shape, (None, c.horizon, c.action_dim))
        if mask.shape != tokens.shape[:2]:
            raise ShapeError(op, tokens.shape, mask.shape, detail="mask")
        if k.shape != tokens.shape[:1]:
            raise ShapeError(op, tokens.shape, k.shape, detail="levels")
        if torch.any(k < 0) or torch.any(k > c.horizon):
            raise RangeError(f"{op}: level outside [0, {c.horizon}]")

    def encode(self, z_obs, tokens, k, mask):
        """Encoder over observation tokens, level token and the unmasked action tokens.

        Masked action positions are excluded from attention as keys, so they
        cannot influence any output; their own output rows are discarded by
        the decoder.
        """
        tokens = torch.as_tensor(tokens, dtype=DTYPE)
        mask = torch.as_tensor(mask, dtype=torch.bool)
        b = tokens.shape[0]
        k = _as_long(k, b)
        self._check_tokens("encode", tokens, mask, k)
        if z_obs.shape[0] != b:
            raise ShapeError("encode", z_obs.shape, tokens.shape, detail="batch")
        x = torch.cat([z_obs, self.enc_level_embed[k][:, None, :], self.action_embed(tokens)], dim=1)
        x = x + self.enc_pos
        key_mask = torch.cat([torch.zeros(b, self.cfg.obs_steps + 1, dtype=torch.bool), mask], dim=1)
        for blk in self.encoder:
            x = blk(x, key_mask)
        return self.encoder_norm(x)

    def decode(self, z_obs, z_mask, k, mask):
        """Full-length continuous tokens (B, T, D_dec); masked slots start from the mask token."""
        mask = torch.as_tensor(mask, dtype=torch.bool)
        b = z_mask.shape[0]
        k = _as_long(k, b)
        n_obs = self.cfg.obs_steps
        if z_mask.shape[1] != n_obs + 1 + self.cfg.horizon or mask.shape != (b, self.cfg.horizon):
            raise ShapeError("decode", z_mask.shape, mask.shape)
        h = self.decoder_embed(z_mask)
        obs_part = h[:, :n_obs] + self.obs_skip(z_obs)
        act_part = torch.where(mask[..., None], self.mask_token.expand_as(h[:, n_obs + 1:]), h[:, n_obs + 1:])
        h = torch.cat([obs_part, h[:, n_obs:n_obs + 1], act_part], dim=1)
        h = h + self.dec_pos + self.dec_level_embed[k][:, None, :]
        for blk in self.decoder:
            h = blk(h)
        h = self.decoder_norm(h)
        return h[:, n_obs + 1:] + self.z_pos

    def eps_predict(self, x_t, t, k, z):
        x_t = torch.as_tensor(x_t, dtype=DTYPE)
        b = x_t.shape[0]
        t = _as_long(t, b)
        k = _as_long(k, b)
        if torch.any(t < 1) or torch.any(t > self.cfg.diffusion_steps):
            raise RangeError(f"diffusion step outside [1, {self.cfg.diffusion_steps}]")
        if z.shape[:2] != x_t.shape[:2]:
            raise ShapeError("eps_predict", x_t.shape, z.shape)
        return self.head(x_t, t, k, z)

    def latent(self, obs, tokens, k, mask):
        z_obs = self.encode_observation(obs)
        z_mask = self.encode(z_obs, tokens, k, mask)
        return self.decode(z_obs, z_mask, k, mask)


# ---------------------------------------------------------------------------
# loss and training step


@dataclass
class BatchPlan:
    """Every random draw of one training step, so the loss is a pure function of params."""

    obs: np.ndarray  # (B, T_o, obs_dim)
    x: np.ndarray  # (B, T, d) normalized target chunk
    tokens: np.ndarray  # (B, T, d) conditioning reconstruction y^k
    k: np.ndarray  # (B,)
    mask: np.ndarray  # (B, T) bool
    t: np.ndarray  # (B * mul,)
    eps: np.ndarray  # (B * mul, T, d)


def conditioning_tokens(x, k, use_dct=True):
    """k-level low-pass of ``x`` per batch element; the no-DCT ablation passes ``x`` through."""
    if not use_dct:
        return np.array(x, dtype=np.float64)
    return tc.idct_array(tc.dct_array(x), np.asarray(k))


def sample_plan(cfg: NetConfig, obs, x, rng) -> BatchPlan:
    x = np.asarray(x, dtype=np.float64)
    b, T, d = x.shape
    if T != cfg.horizon or d != cfg.action_dim:
        raise ShapeError("training_step", x.shape, (b, cfg.horizon, cfg.action_dim))
    k = rng.integers(0, T + 1, size=b)
    tokens = conditioning_tokens(x, k, cfg.use_dct)
    ratios = cfg.mask_ratio * (1 - k / T)
    mask = sample_masks(ratios, T, rng, cfg.mask_std)
    mul = cfg.diffusion_batch_mul
    t = rng.integers(1, cfg.diffusion_steps + 1, size=b * mul)
    eps = rng.standard_normal((b * mul, T, d))
    return BatchPlan(np.asarray(obs, dtype=np.float64), x, tokens, k, mask, t, eps)


def diffusion_loss(model: FreqPolicyNet, z, x, k, t, eps, weights):
    """Mean over weighted positions of ||eps - eps_theta(x_t | t, k, z)||^2.

    ``weights`` (B, T) selects the positions that count; the squared error is
    summed over action dimensions.
    """
    x = torch.as_tensor(x, dtype=DTYPE)
    eps = torch.as_tensor(eps, dtype=DTYPE)
    weights = torch.as_tensor(weights, dtype=DTYPE)
    mul = eps.shape[0] // x.shape[0]
    if mul > 1:
        z = z.repeat(mul, 1, 1)
        x = x.repeat(mul, 1, 1)
        k = np.tile(np.asarray(k), mul)
        weights = weights.repeat(mul, 1)
    ab = torch.as_tensor(model.schedule.ab(np.asarray(t)), dtype=DTYPE)[:, None, None]
    x_t = ab.sqrt() * x + (1 - ab).sqrt() * eps
    pred = model.eps_predict(x_t, t, k, z)
    per_pos = ((eps - pred) ** 2).sum(dim=-1)
    denom = weights.sum()
    if denom.item() == 0:
        return (per_pos * weights).sum()
    return (per_pos * weights).sum() / denom


def plan_loss(model: FreqPolicyNet, plan: BatchPlan):
    z = model.latent(plan.obs, plan.tokens, plan.k, plan.mask)
    if model.cfg.loss_masking == "masked":
        weights = plan.mask.astype(np.float64)
    else:
        weights = np.ones(plan.mask.shape)
    return diffusion_loss(model, z, plan.x, plan.k, plan.t, plan.eps, weights)


def training_step(model: FreqPolicyNet, optimizer, obs, x, rng, lr=None):
    """One optimizer step on a batch; returns the batch loss.

    ``lr`` overrides the scheduled learning rate for this step.
    """
    plan = sample_plan(model.cfg, obs, x, rng)
    params = model.named_params()
    zero_grad(params)
    loss = plan_loss(model, plan)
    backward(loss)
    optimizer.step(lr=lr)
    return loss.item()
