"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line PASS/FAIL verdict that is printed in the
terminal summary.  Criteria 8-10 and 12 train desk-scale models from
``configs/reach2d_desk.cfg`` (about 9 minutes each on one CPU core; four
models in total).  Set ``FREQACT_ACCEPTANCE_CACHE`` to a directory to keep
the trained checkpoints between sessions.

    pytest tests/test_acceptance.py -v
"""

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from freqact import harness as hz
from freqact import nn as fnn
from freqact import trajectory as tc
from freqact.cli import pareto_rows
from freqact.config import load_config
from freqact.envs import make_env, run_expert
from freqact.policy import FreqPolicyNet, NoiseHead, ResBlockAdaLN, adaptive_mask_ratio, make_schedule, plan_loss, \
    sample_plan
from freqact.sampler import SamplerConfig, cosine_mask_ratio, ddim_sample, default_schedule, hierarchical_generate
from freqact.training import Trainer, TrainedPolicy

from .conftest import jitter_params, toy_cfg
from .oracles import dct_direct, r_squared

pytestmark = pytest.mark.slow

ROOT = Path(__file__).resolve().parents[1]
DESK_CONFIG = ROOT / "configs" / "reach2d_desk.cfg"
GOLDEN = Path(__file__).resolve().parent / "golden"
REACH = ROOT / "data" / "reach2d_expert"


def verdict(record_property, criterion, ok, detail):
    """Record the summary line for ``criterion`` and fail the test when ``ok`` is false."""
    line = f"criterion {criterion:2d} {'PASS' if ok else 'FAIL'}: {detail}"
    record_property("acceptance", line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# shared corpora and trained models


@pytest.fixture(scope="module")
def corpus():
    """1,000 random trajectories cycling through N in {1,2,4,16,64} and d in {1,4,26}."""
    rng = np.random.default_rng(2024)
    shapes = [(n, d) for n in (1, 2, 4, 16, 64) for d in (1, 4, 26)]
    return [rng.normal(0.0, 1.0, shapes[i % len(shapes)]) * rng.uniform(0.1, 10.0) for i in range(1000)]


class TrainedRun:
    def __init__(self, policy, train_seconds, losses):
        self.policy = policy
        self.train_seconds = train_seconds
        self.losses = losses
        self._reports = {}

    def evaluate(self, cfg, n_iter, seeds):
        """Closed-loop reports for each seed at ``n_iter``; cached with their wall time."""
        key = (n_iter, tuple(seeds))
        if key not in self._reports:
            start = time.perf_counter()
            scfg = SamplerConfig.from_config(cfg, n_iter=n_iter)
            reports = [hz.rollout_policy(cfg["env.variant"], self.policy, scfg, cfg["eval.episodes"], seed=s)
                       for s in seeds]
            self._reports[key] = (reports, time.perf_counter() - start)
        return self._reports[key]


_RUNS = {}


def desk_config(*overrides):
    return load_config(DESK_CONFIG, list(overrides))


def trained(name, *overrides):
    """Train (or reload from the cache directory) one desk-scale model."""
    if name in _RUNS:
        return _RUNS[name]
    cfg = desk_config(*overrides)
    cache = os.environ.get("FREQACT_ACCEPTANCE_CACHE")
    ckpt = Path(cache) / f"{name}.ckpt" if cache else None
    meta = ckpt.with_suffix(".json") if ckpt else None
    if ckpt is not None and ckpt.exists() and meta.exists():
        info = json.loads(meta.read_text())
        policy = TrainedPolicy.load(ckpt)
        if policy.config == cfg:
            _RUNS[name] = TrainedRun(policy, info["train_seconds"], info["losses"])
            return _RUNS[name]
    demos = hz.generate_demos(cfg["env.variant"], cfg["data.n_demos"], cfg["data.noise_std"], seed=cfg["seed"])
    start = time.perf_counter()
    trainer = Trainer(cfg, demos).run()
    seconds = time.perf_counter() - start
    if ckpt is not None:
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        trainer.save(ckpt)
        meta.write_text(json.dumps({"train_seconds": seconds, "losses": trainer.epoch_losses}))
    _RUNS[name] = TrainedRun(trainer.policy(), seconds, trainer.epoch_losses)
    return _RUNS[name]


@pytest.fixture(scope="module")
def desk():
    return trained("freqpolicy_clean")


# ---------------------------------------------------------------------------
# transform oracles


def test_criterion_01_dct_matches_direct_sum(corpus, record_property):
    start = time.perf_counter()
    worst = 0.0
    for x in corpus:
        got = tc.dct_forward(tc.Trajectory(x)).coeffs
        worst = max(worst, float(np.abs(got - dct_direct(x)).max()))
    elapsed = time.perf_counter() - start
    verdict(record_property, 1, worst < 1e-9 and elapsed < 10.0,
            f"max abs diff {worst:.2e} (< 1e-9) over {len(corpus)} trajectories in {elapsed:.2f} s (< 10 s)")


def test_criterion_02_round_trip(corpus, record_property):
    worst = 0.0
    for x in corpus:
        back = tc.idct_k(tc.dct_forward(tc.Trajectory(x)), x.shape[0]).values
        worst = max(worst, float(np.abs(back - x).max()))
    verdict(record_property, 2, worst < 1e-9, f"max abs round-trip error {worst:.2e} (< 1e-9)")


def test_criterion_03_parseval(corpus, record_property):
    worst = 0.0
    for x in corpus:
        c = dct_direct(x)
        n = x.shape[0]
        lhs = n * (x**2).sum(axis=0)
        rhs = c[0] ** 2 + 2.0 * (c[1:] ** 2).sum(axis=0)
        time_side, freq_side = tc.parseval_energies(tc.Trajectory(x))
        worst = max(worst, float(np.max(np.abs(lhs - rhs) / lhs)),
                    float(np.max(np.abs(time_side - freq_side) / time_side)))
    verdict(record_property, 3, worst < 1e-9, f"max relative Parseval gap {worst:.2e} (< 1e-9)")


def test_criterion_04_white_noise_filtering(record_property):
    start = time.perf_counter()
    n, draws = 16, 100_000
    x = np.random.default_rng(44).standard_normal((draws, n, 1))
    total = float((x**2).sum())
    gaps = {}
    for k in (1, 4, 8, 12, 16):
        retained = float((tc.lowpass_array(x, k) ** 2).sum()) / total
        gaps[k] = abs(retained - k / n) / (k / n)
    elapsed = time.perf_counter() - start
    worst = max(gaps.values())
    verdict(record_property, 4, worst < 0.02 and elapsed < 30.0,
            f"worst relative gap to k/N {worst:.2%} (< 2%) over {draws} draws in {elapsed:.1f} s (< 30 s)")


# ---------------------------------------------------------------------------
# schedules, gradients, sampler


def test_criterion_05_schedule_formulas_bitwise(record_property):
    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(64):
        T = int(rng.integers(1, 65))
        k = int(rng.integers(0, T + 1))
        m = float(rng.uniform(0.0, 1.0))
        mismatches += adaptive_mask_ratio(k, T, m) != m * (1 - k / T)
    grid = [(n_iter, step) for n_iter in range(1, 12) for step in range(n_iter)][:64]
    assert len(grid) == 64
    for n_iter, step in grid:
        mismatches += cosine_mask_ratio(step, n_iter) != math.cos(math.pi / 2 * (step + 1) / n_iter)
    verdict(record_property, 5, mismatches == 0, f"{mismatches} bitwise mismatches over 2 x 64 grid points")


def _gen(seed):
    return torch.Generator().manual_seed(seed)


def _layer_cases():
    D = torch.float64
    mask = torch.tensor([[False, True, False, False]] * 2)
    head = NoiseHead(2, 6, 8, 2, 100, 5, _gen(6))
    t = torch.tensor([3, 70])
    k = torch.tensor([0, 4])
    return {
        "linear": (fnn.Linear(6, 6, _gen(1)), lambda m, x: m(x)),
        "layernorm": (fnn.LayerNorm(6), lambda m, x: m(x) * torch.arange(6, dtype=D)),
        "attention": (fnn.Attention(6, 2, _gen(2)), lambda m, x: m(x, mask)),
        "mlp": (fnn.MLP(6, 12, 6, _gen(3)), lambda m, x: m(x)),
        "block": (fnn.Block(6, 3, _gen(4)), lambda m, x: m(x, mask)),
        "adaln_resblock": (ResBlockAdaLN(6, _gen(5)), lambda m, x: m(x, x.flip(-1))),
        "noise_head": (head, lambda m, x: m(x[..., :2], t, k, x).repeat(1, 1, 3)),
    }


def test_criterion_06_gradients_match_finite_differences(record_property):
    start = time.perf_counter()
    x = torch.randn(2, 4, 6, generator=_gen(8), dtype=torch.float64)
    target = torch.randn(2, 4, 6, generator=_gen(9), dtype=torch.float64)
    reports = {}
    for name, (module, apply) in _layer_cases().items():
        jitter_params(module, std=0.2)
        params = dict(module.named_parameters())
        reports[name] = fnn.grad_check(lambda: ((apply(module, x) - target) ** 2).sum(), params, 1e-4, eps=1e-5,
                                       n_samples=400)
    model = jitter_params(FreqPolicyNet(toy_cfg(), seed=3))
    assert model.cfg.encoder_embed_dim == 32 and model.cfg.encoder_depth == 2
    rng = np.random.default_rng(2)
    plan = sample_plan(model.cfg, rng.uniform(-1, 1, (3, 2, 6)), rng.uniform(-1, 1, (3, 8, 2)), rng)
    reports["training_step"] = fnn.grad_check(lambda: plan_loss(model, plan), model.named_params(), 1e-4, eps=1e-5,
                                              n_samples=256)
    elapsed = time.perf_counter() - start
    worst_name = max(reports, key=lambda n: reports[n].max_rel_error)
    ok = all(r.passed for r in reports.values()) and elapsed < 300
    verdict(record_property, 6, ok, f"{len(reports)} grad checks, worst max rel {reports[worst_name].max_rel_error:.2e}"
            f" ({worst_name}) (< 1e-4) in {elapsed:.1f} s (< 300 s)")


def test_criterion_07_perfect_predictor_ddim(record_property):
    schedule = make_schedule(100)
    rng = np.random.default_rng(7)
    target = rng.uniform(-1, 1, (8, 16, 2))

    def eps_fn(x_t, t, k, z):
        ab = torch.as_tensor(schedule.ab(np.asarray(t)), dtype=torch.float64)[:, None, None]
        return (x_t - ab.sqrt() * torch.as_tensor(target)) / (1 - ab).sqrt()

    out = ddim_sample(eps_fn, None, 0, SamplerConfig(ddim_steps=10, ddim_eta=0.0), rng, schedule, target.shape)
    err = float(np.abs(out - target).max())
    verdict(record_property, 7, err < 1e-6, f"max abs error {err:.2e} (< 1e-6) with ddim10, eta 0")


# ---------------------------------------------------------------------------
# desk-scale learning


def test_criterion_08_desk_scale_learning(desk, record_property):
    cfg = desk_config()
    reports, eval_seconds = desk.evaluate(cfg, 4, cfg["eval.seeds"])
    rates = [r.success_rate for r in reports]
    total = desk.train_seconds + eval_seconds
    finite = all(math.isfinite(v) for v in desk.losses)
    ok = min(rates) >= 0.9 and total < 1800 and finite
    verdict(record_property, 8, ok,
            f"success {np.mean(rates):.3f} per seed {rates} (>= 0.9 each) over {cfg['eval.episodes']} episodes, "
            f"runtime {desk.train_seconds:.0f} s train + {eval_seconds:.0f} s eval (< 1800 s), finite losses {finite}")


def _expert_windows(cfg, n_episodes, base_seed):
    """Per episode, the (obs history, expert chunk) pairs at every replanning point."""
    env = make_env(cfg["env.variant"])
    n_obs, horizon, stride = cfg["model.observation_step"], cfg["model.horizon"], cfg["model.action_step"]
    episodes = []
    for i in range(n_episodes):
        obs, act, _ = run_expert(env, hz.episode_seed(base_seed, i))
        demo = hz.Demonstration(obs, act, hz.episode_seed(base_seed, i))
        episodes.append([(o, a) for o, a, _ in hz.chunk_windows(demo, n_obs, horizon, stride)])
    return episodes


def _spectral_distance(a, b, level):
    """RMS difference of the retained (lowest ``level``) DCT coefficients."""
    diff = tc.dct_array(a)[..., :level, :] - tc.dct_array(b)[..., :level, :]
    return np.sqrt((diff**2).mean(axis=(-2, -1)))


def test_criterion_09_coarse_to_fine(desk, record_property):
    cfg = desk_config()
    policy = desk.policy
    schedule = default_schedule(cfg["model.horizon"], cfg["sampler.num_iter"])
    scfg = SamplerConfig.from_config(cfg)
    episodes = _expert_windows(cfg, 100, base_seed=909)
    band_leak = 0.0
    nonincreasing = 0
    for e, windows in enumerate(episodes):
        obs = policy.obs_norm.normalize(np.stack([w[0] for w in windows]))
        expert = policy.act_norm.normalize(np.stack([w[1] for w in windows]))
        gen = hierarchical_generate(policy.model, obs, schedule, scfg, np.random.default_rng(e))
        intermediates = gen.refeeds + [gen.tokens]
        dists = []
        for i, inter in enumerate(intermediates, start=1):
            level = schedule.levels[i]
            band_leak = max(band_leak, float(np.abs(tc.dct_array(inter)[:, level:]).max(initial=0.0)))
            dists.append(float(_spectral_distance(inter, tc.lowpass_array(expert, level), level).mean()))
        nonincreasing += all(b <= a for a, b in zip(dists, dists[1:]))
    share = nonincreasing / len(episodes)
    ok = band_leak < 1e-9 and share >= 0.8
    verdict(record_property, 9, ok, f"band leak {band_leak:.1e} (< 1e-9); distance nonincreasing on {share:.0%} "
            f"of {len(episodes)} episodes (>= 80%)")


def test_criterion_10_flexible_sampling_pareto(desk, record_property):
    cfg = desk_config()
    rows = pareto_rows(desk.policy, make_env(cfg["env.variant"]), cfg, (1, 2, 4, 8), 0, cfg["seed"], 10)
    nfe_ok = all(nfe == n * 10 for n, nfe, _, _ in rows)
    r2 = r_squared([r[1] for r in rows], [r[2] for r in rows])
    one = np.mean([r.success_rate for r in desk.evaluate(cfg, 1, cfg["eval.seeds"])[0]])
    four = np.mean([r.success_rate for r in desk.evaluate(cfg, 4, cfg["eval.seeds"])[0]])
    ok = nfe_ok and r2 > 0.95 and abs(one - four) <= 0.10
    timing = ", ".join(f"{n}:{ms:.1f}ms" for n, _, ms, _ in rows)
    verdict(record_property, 10, ok, f"NFE = 10 x N_iter {nfe_ok}; wall-clock vs NFE R^2 {r2:.4f} (> 0.95) [{timing}]; "
            f"success N_iter=1 {one:.3f} vs N_iter=4 {four:.3f} (gap <= 0.10)")


# ---------------------------------------------------------------------------
# dataset analysis and robustness


def test_criterion_11_compression_replay_curve(record_property):
    demos = hz.load_demos(REACH)
    rows = hz.compression_sweep(demos)
    golden_ok = hz.sweep_to_csv(rows) == (GOLDEN / "reach2d_compression_sweep.csv").read_text()
    env = make_env(demos[0].env)
    clean = np.mean([hz.replay_actions(env, d.seed, d.actions)[0] for d in demos])
    full = dict((p, s) for p, _, s in rows)[1.0]
    verdict(record_property, 11, golden_ok and full == clean,
            f"sweep matches golden CSV {golden_ok}; p=1.0 success {full} vs clean replay {clean}")


def test_criterion_12_noise_robustness_direction(desk, record_property):
    cfg = desk_config()
    runs = {
        ("freqpolicy", 0.0): desk,
        ("freqpolicy", 0.1): trained("freqpolicy_noisy", "data.noise_std=0.1"),
        ("no_dct", 0.0): trained("nodct_clean", "model.use_dct=false"),
        ("no_dct", 0.1): trained("nodct_noisy", "model.use_dct=false", "data.noise_std=0.1"),
    }
    rates = {key: [r.success_rate for r in run.evaluate(cfg, 4, cfg["eval.seeds"])[0]] for key, run in runs.items()}
    drop = {m: float(np.mean(np.subtract(rates[(m, 0.0)], rates[(m, 0.1)]))) for m in ("freqpolicy", "no_dct")}
    table = hz.noise_table({m: hz.noise_robustness_suite({0.0: rates[(m, 0.0)], 0.1: rates[(m, 0.1)]})
                            for m in ("freqpolicy", "no_dct")})
    print(table)
    verdict(record_property, 12, drop["freqpolicy"] <= drop["no_dct"],
            f"success drop at std 0.1: freqpolicy {drop['freqpolicy']:+.3f} "
            f"({np.mean(rates[('freqpolicy', 0.0)]):.3f} -> {np.mean(rates[('freqpolicy', 0.1)]):.3f}) <= no-DCT "
            f"{drop['no_dct']:+.3f} ({np.mean(rates[('no_dct', 0.0)]):.3f} -> {np.mean(rates[('no_dct', 0.1)]):.3f})")
