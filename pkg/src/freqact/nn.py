"""Differentiable building blocks: layers, finite-difference checking, AdamW.

Reverse-mode differentiation is torch autograd in float64.  Every layer has
a functional form (``linear``, ``layernorm``, ``attention``, ``mlp``) that
checks shapes and raises :class:`ShapeError` naming the operator; the
``nn.Module`` wrappers only own parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import FreqActError, RangeError, ShapeError

DTYPE = torch.float64
INIT_STD = 0.02


def trunc_normal_(tensor, generator, std=INIT_STD):
    with torch.no_grad():
        return nn.init.trunc_normal_(tensor, mean=0.0, std=std, a=-2 * std, b=2 * std, generator=generator)


# ---------------------------------------------------------------------------
# functional forms


def linear(x, weight, bias=None):
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError("linear", x.shape, weight.shape)
    return F.linear(x, weight, bias)


def layernorm(x, gain=None, offset=None, eps=1e-6):
    if gain is not None and gain.shape != x.shape[-1:]:
        raise ShapeError("layernorm", x.shape, gain.shape)
    return F.layer_norm(x, x.shape[-1:], gain, offset, eps)


def attention(x, qkv_w, qkv_b, proj_w, proj_b, n_heads, key_mask=None):
    """Multi-head self-attention over x of shape (B, L, D).

    ``key_mask`` (B, L) bool marks keys that must not be attended to; their
    tokens then have no influence on any output.
    """
    if x.dim() != 3:
        raise ShapeError("attention", x.shape, detail="expected (batch, length, width)")
    b, length, width = x.shape
    if width % n_heads:
        raise ShapeError("attention", x.shape, detail=f"{n_heads} heads do not divide width {width}")
    if qkv_w.shape != (3 * width, width):
        raise ShapeError("attention", x.shape, qkv_w.shape)
    if key_mask is not None and key_mask.shape != (b, length):
        raise ShapeError("attention", x.shape, key_mask.shape, detail="key mask")
    head = width // n_heads
    qkv = linear(x, qkv_w, qkv_b).reshape(b, length, 3, n_heads, head).permute(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = q @ k.transpose(-2, -1) / math.sqrt(head)
    if key_mask is not None:
        scores = scores.masked_fill(key_mask[:, None, None, :], float("-inf"))
    weights = scores.softmax(dim=-1)
    out = (weights @ v).transpose(1, 2).reshape(b, length, width)
    return linear(out, proj_w, proj_b)


def mlp(x, w1, b1, w2, b2):
    return linear(F.gelu(linear(x, w1, b1)), w2, b2)


# ---------------------------------------------------------------------------
# parameter-owning modules


class Linear(nn.Module):
    def __init__(self, d_in, d_out, generator, bias=True, zero=False):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(d_out, d_in, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(d_out, dtype=DTYPE)) if bias else None
        if not zero:
            trunc_normal_(self.weight, generator)

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, width, affine=True, eps=1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(width, dtype=DTYPE)) if affine else None
        self.bias = nn.Parameter(torch.zeros(width, dtype=DTYPE)) if affine else None

    def forward(self, x):
        return layernorm(x, self.weight, self.bias, self.eps)


class Attention(nn.Module):
    def __init__(self, width, n_heads, generator):
        super().__init__()
        if width % n_heads:
            raise ShapeError("attention", (width,), detail=f"{n_heads} heads do not divide width {width}")
        self.n_heads = n_heads
        self.qkv = Linear(width, 3 * width, generator)
        self.proj = Linear(width, width, generator)

    def forward(self, x, key_mask=None):
        return attention(x, self.qkv.weight, self.qkv.bias, self.proj.weight, self.proj.bias,
                         self.n_heads, key_mask)


class MLP(nn.Module):
    def __init__(self, d_in, hidden, d_out, generator):
        super().__init__()
        self.fc1 = Linear(d_in, hidden, generator)
        self.fc2 = Linear(hidden, d_out, generator)

    def forward(self, x):
        return mlp(x, self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias)


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, width, n_heads, generator, mlp_ratio=4.0):
        super().__init__()
        self.norm1 = LayerNorm(width)
        self.attn = Attention(width, n_heads, generator)
        self.norm2 = LayerNorm(width)
        self.mlp = MLP(width, int(width * mlp_ratio), width, generator)

    def forward(self, x, key_mask=None):
        x = x + self.attn(self.norm1(x), key_mask)
        return x + self.mlp(self.norm2(x))


# ---------------------------------------------------------------------------
# gradients


def backward(loss):
    """Accumulate d(loss)/d(param) into ``.grad`` of every leaf that requires it."""
    if loss.numel() != 1 or loss.dim() != 0:
        raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
    loss.backward()


def zero_grad(params):
    for p in params.values():
        p.grad = None


class GradCheckError(FreqActError):
    pass


@dataclass
class GradCheckReport:
    max_rel_error: float
    mean_rel_error: float
    n_checked: int
    tolerance: float
    worst_param: str
    worst_index: tuple
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"grad_check {status}: max rel {self.max_rel_error:.3e} at {self.worst_param}"
                f"{list(self.worst_index)}, mean {self.mean_rel_error:.3e} over {self.n_checked} entries")


def grad_check(model_fn, params, tolerance, n_samples=256, eps=1e-5, seed=0, floor=1e-6, grads=None):
    """Compare autograd gradients against central differences.

    ``model_fn()`` must return a scalar loss built from ``params`` (a name ->
    tensor dict).  ``n_samples`` entries are drawn uniformly over all
    parameter entries (all of them when there are fewer).  Relative error is
    |analytic - numeric| / max(|analytic|, |numeric|, floor).  ``grads`` may
    supply analytic gradients to audit instead of computing them.
    """
    names = list(params)
    with torch.no_grad():
        first = model_fn().item()
        second = model_fn().item()
    if first != second:
        raise GradCheckError(f"model_fn is not deterministic: {first!r} != {second!r}")

    if grads is None:
        tensors = [params[n] for n in names]
        got = torch.autograd.grad(model_fn(), tensors, allow_unused=True)
        grads = {n: (g if g is not None else torch.zeros_like(params[n])) for n, g in zip(names, got)}

    sizes = np.array([params[n].numel() for n in names])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat_ids = np.arange(total) if total <= n_samples else np.sort(rng.choice(total, n_samples, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    errors = []
    failures = []
    worst = (-1.0, "", ())
    with torch.no_grad():
        for fid in flat_ids:
            pi = int(np.searchsorted(offsets, fid, side="right") - 1)
            name = names[pi]
            p = params[name]
            local = int(fid - offsets[pi])
            view = p.data.view(-1)
            orig = view[local].item()
            view[local] = orig + eps
            up = model_fn().item()
            view[local] = orig - eps
            down = model_fn().item()
            view[local] = orig
            numeric = (up - down) / (2 * eps)
            analytic = grads[name].reshape(-1)[local].item()
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            errors.append(rel)
            idx = tuple(int(i) for i in np.unravel_index(local, tuple(p.shape)))
            if rel >= tolerance:
                failures.append((name, idx, analytic, numeric))
            if rel > worst[0]:
                worst = (rel, name, idx)
    return GradCheckReport(float(max(errors)), float(np.mean(errors)), len(errors), tolerance,
                           worst[1], worst[2], failures)


# ---------------------------------------------------------------------------
# optimizer


def cosine_lr(step, total_steps, peak_lr, min_lr=0.0, warmup=0):
    """Cosine decay from ``peak_lr`` at step 0 to ``min_lr`` at ``total_steps``."""
    if peak_lr <= 0:
        raise RangeError(f"learning rate must be positive, got {peak_lr}")
    if step < warmup:
        return peak_lr * (step + 1) / warmup
    frac = min(max(step - warmup, 0) / max(total_steps - warmup, 1), 1.0)
    return min_lr + 0.5 * (peak_lr - min_lr) * (1.0 + math.cos(math.pi * frac))


def adamw_step(params, grads, lr, betas, weight_decay, step_count, state, eps=1e-8):
    """One decoupled-weight-decay Adam update, in place.

    ``step_count`` is 1-based.  ``state`` maps parameter names to
    ``(exp_avg, exp_avg_sq)`` and is created on first use.
    """
    if lr < 0:
        raise RangeError(f"learning rate must be non-negative, got {lr}")
    b1, b2 = betas
    bc1 = 1.0 - b1**step_count
    bc2 = 1.0 - b2**step_count
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if name not in state:
                state[name] = (torch.zeros_like(p), torch.zeros_like(p))
            m, v = state[name]
            if lr == 0:
                m.mul_(b1).add_(g, alpha=1 - b1)
                v.mul_(b2).addcmul_(g, g, value=1 - b2)
                continue
            p.mul_(1.0 - lr * weight_decay)
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v / bc2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / bc1)


class AdamW:
    """Stateful wrapper around :func:`adamw_step` with a cosine schedule."""

    def __init__(self, params, lr=1e-4, betas=(0.95, 0.999), weight_decay=1e-6, total_steps=1,
                 min_lr=0.0, warmup=0):
        if lr <= 0:
            raise RangeError(f"learning rate must be positive, got {lr}")
        self.params = params
        self.peak_lr = lr
        self.betas = tuple(betas)
        self.weight_decay = weight_decay
        self.total_steps = total_steps
        self.min_lr = min_lr
        self.warmup = warmup
        self.step_count = 0
        self.state = {}

    def current_lr(self):
        return cosine_lr(self.step_count, self.total_steps, self.peak_lr, self.min_lr, self.warmup)

    def step(self, lr=None):
        """Apply one update; ``lr`` overrides the scheduled rate for this step only."""
        if lr is None:
            lr = self.current_lr()
        self.step_count += 1
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        adamw_step(self.params, grads, lr, self.betas, self.weight_decay, self.step_count, self.state)
        return lr
