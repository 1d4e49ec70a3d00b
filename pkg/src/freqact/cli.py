"""Command-line entry point: ``freqact <subcommand> [options]``.

Subcommands
    demos     generate a scripted-expert dataset directory
    analyze   band-energy table/heatmap, energy curve, overlays, compression sweep
    train     train a policy, checkpointing into ``<out>/checkpoints``
    eval      closed-loop evaluation of a checkpoint
    sample    generate one action chunk and dump every iteration
    bench     N_iter sweep reporting NFE, latency and success

Every subcommand writes ``config.txt`` (effective configuration) and
``provenance.txt`` (seed, git commit, command line) into its output directory.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import harness as hz
from . import svg
from . import trajectory as tc
from .checkpoint import atomic_write
from .config import Config, load_config
from .envs import make_env
from .errors import ConfigError, DataError, FreqActError, NumericError, RangeError, ShapeError

log = logging.getLogger("freqact")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# shared plumbing


def _git_stamp():
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], cwd=Path(__file__).resolve().parent,
                             capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def _write(out, name, text):
    atomic_write(Path(out) / name, text)


def _provenance(out, cfg, argv):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _write(out, "config.txt", cfg.to_text())
    _write(out, "provenance.txt", f"seed = {cfg['seed']}\ngit = {_git_stamp()}\n"
                                  f"command = {' '.join(argv)}\n")


def _configure_threads():
    raw = os.environ.get("FREQACT_THREADS")
    if raw is None:
        return
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"FREQACT_THREADS must be a positive integer, got {raw!r}") from None
    import torch

    torch.set_num_threads(n)


def _load_cfg(args):
    cfg = load_config(args.config, args.set or [])
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def _dataset(args, cfg):
    path = getattr(args, "data", None) or cfg["train.dataset"]
    if not path:
        raise ConfigError("no dataset: pass --data or set train.dataset")
    return hz.load_demos(path)


def _frac_label(x):
    return f"{x:g}"


# ---------------------------------------------------------------------------
# subcommands


def cmd_demos(args, cfg):
    env = make_env(cfg["env.variant"], cfg["env.max_steps"] or None)
    demos = hz.generate_demos(env, cfg["data.n_demos"], cfg["data.noise_std"], seed=cfg["seed"])
    hz.save_demos(demos, args.out, base_seed=cfg["seed"])
    log.info("wrote %d %s demonstrations to %s", len(demos), env.variant, args.out)


def analyze_dataset(demos, cfg, out):
    """Write every analysis artifact for ``demos`` into ``out``; returns the band table."""
    out = Path(out)
    trajs = [tc.Trajectory(d.actions) for d in demos]
    table = tc.band_energy_table(trajs, cfg["analyze.band_edges"])
    _write(out, "band_energy.csv", tc.band_table_to_csv(table))
    edges = table.band_edges
    cols = [f"{int(round(100 * lo))}-{int(round(100 * hi))}%" for lo, hi in zip(edges, edges[1:])]
    rows = [f"dim{j}" for j in range(table.energy.shape[0])]
    _write(out, "band_energy.svg", svg.heatmap(table.energy, rows, cols, "share of energy per frequency band"))

    # energy retained by the lowest p% of coefficients, averaged over demonstrations
    percents = cfg["analyze.energy_percents"]
    curves = np.array([[tc.energy_proportion(tc.dct_forward(t), p) for p in percents] for t in trajs])
    mean = curves.mean(axis=0)  # (P, d)
    header = "p," + ",".join(rows) + "\n"
    _write(out, "energy_curve.csv", header + "".join(
        f"{p!r}," + ",".join(repr(float(v)) for v in mean[i]) + "\n" for i, p in enumerate(percents)))

    # reconstructions of the first demonstration at several band fractions
    first = trajs[0]
    spec = tc.dct_forward(first)
    n = first.horizon
    fractions = cfg["analyze.overlay_fractions"]
    lines = ["t,dim,fraction,k,value\n"]
    plots = []
    for j in range(first.dim):
        series = [("original", list(range(n)), first.values[:, j].tolist())]
        for f in fractions:
            k = max(1, int(np.floor(f * n + 0.5)))
            rec = tc.idct_k(spec, k).values[:, j]
            series.append((f"{_frac_label(f)} (k={k})", list(range(n)), rec.tolist()))
            lines.extend(f"{t},{j},{f!r},{k},{rec[t]!r}\n" for t in range(n))
        plots.append(series)
        _write(out, f"overlay_dim{j}.svg", svg.line_plot(series, f"dim{j} reconstructed from low bands",
                                                        "step", "action"))
    _write(out, "overlays.csv", "".join(lines))

    rows_sweep = hz.compression_sweep(demos, horizon=cfg["model.horizon"])
    _write(out, "compression_sweep.csv", hz.sweep_to_csv(rows_sweep))
    ps = [r[0] for r in rows_sweep]
    _write(out, "compression_sweep.svg", svg.line_plot([("replay", ps, [r[2] for r in rows_sweep])],
                                                       "replay success vs kept frequency ratio",
                                                       "p", "success"))
    return table


def cmd_analyze(args, cfg):
    demos = hz.load_demos(args.dataset)
    analyze_dataset(demos, cfg, args.out)


def cmd_train(args, cfg):
    from .training import Trainer, loss_curve_csv

    demos = _dataset(args, cfg)
    if args.resume:
        trainer = Trainer.resume(args.resume, demos, cfg)
    else:
        trainer = Trainer(cfg, demos)
    log.info("training: %d windows, batch %d, %d steps", len(trainer.obs), trainer.batch, trainer.total_steps)

    def progress(t):
        log.info("epoch %d step %d loss %.5f", t.epoch, t.step, t.epoch_losses[-1])

    try:
        trainer.run(args.out, until_epoch=args.until_epoch, progress=progress)
    finally:
        _write(args.out, "loss_curve.csv", loss_curve_csv(trainer))
    trainer.save(Path(args.out) / "checkpoints" / "latest.ckpt")
    if trainer.epoch_losses:
        losses = trainer.epoch_losses
        _write(args.out, "loss_curve.svg", svg.line_plot([("loss", list(range(1, len(losses) + 1)), losses)],
                                                         "training loss", "epoch", "loss"))


def _policy(path):
    from .training import TrainedPolicy

    return TrainedPolicy.load(path)


def _env_for(policy, cfg, explicit):
    variant = explicit or policy.config["env.variant"]
    return make_env(variant, cfg["env.max_steps"] or None)


def evaluate(policy, env, sampler_cfg, episodes, seeds, records=None):
    reports = [hz.rollout_policy(env, policy, sampler_cfg, episodes, seed=s, records=records) for s in seeds]
    return reports


def cmd_eval(args, cfg):
    from .sampler import SamplerConfig

    policy = _policy(args.checkpoint)
    env = _env_for(policy, cfg, args.env)
    scfg = SamplerConfig.from_config(cfg, n_iter=args.n_iter)
    episodes = args.episodes or cfg["eval.episodes"]
    records = []
    reports = evaluate(policy, env, scfg, episodes, cfg["eval.seeds"], records)
    rates = [r.success_rate for r in reports]
    summary = {"env": env.variant, "n_iter": scfg.n_iter, "seeds": list(cfg["eval.seeds"]),
               "success_rates": rates, "success_mean": float(np.mean(rates)),
               "success_std": float(np.std(rates))}
    import json

    _write(args.out, "eval_summary.json", json.dumps(summary, sort_keys=True, indent=2) + "\n")
    for s, rep in zip(cfg["eval.seeds"], reports):
        _write(args.out, f"eval_seed{s}.json", rep.to_json())
        _write(args.out, f"eval_seed{s}.txt", rep.to_table())
    _write(args.out, "records.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    print(f"success {summary['success_mean']:.3f} +- {summary['success_std']:.3f} over seeds {summary['seeds']}")


def cmd_sample(args, cfg):
    from .sampler import SamplerConfig, default_schedule

    policy = _policy(args.checkpoint)
    obs = tc.load_trajectory(args.obs).values
    n_obs, obs_dim = policy.net_cfg.obs_steps, policy.net_cfg.obs_dim
    if obs.shape != (n_obs, obs_dim):
        raise ShapeError("sample", obs.shape, (n_obs, obs_dim), detail=f"{args.obs}: observation history")
    scfg = SamplerConfig.from_config(cfg, n_iter=args.n_iter)
    schedule = default_schedule(policy.net_cfg.horizon, scfg.n_iter)
    actions, gen = policy.plan(obs[None], scfg, np.random.default_rng(cfg["seed"]), schedule)
    if not np.all(np.isfinite(actions)):
        raise NumericError("sampled actions contain NaN or Inf")
    out = Path(args.out)
    _write(out, "trajectory.csv", tc.trajectory_to_csv(tc.Trajectory(actions[0])))
    _write(out, "trajectory_normalized.csv", tc.trajectory_to_csv(tc.Trajectory(gen.tokens[0])))
    for i, cand in enumerate(gen.candidates):
        level = schedule.levels[i]
        _write(out, f"iter{i}_candidate.csv", tc.trajectory_to_csv(tc.Trajectory(cand[0])))
        _write(out, f"iter{i}_candidate_spectrum.csv", tc.spectrum_to_csv(tc.Spectrum(tc.dct_array(cand[0]))))
        if i < len(gen.refeeds):
            nxt = schedule.levels[i + 1]
            _write(out, f"iter{i}_refeed_k{nxt}.csv", tc.trajectory_to_csv(tc.Trajectory(gen.refeeds[i][0])))
            _write(out, f"iter{i}_refeed_k{nxt}_spectrum.csv",
                   tc.spectrum_to_csv(tc.Spectrum(tc.dct_array(gen.refeeds[i][0]))))
        log.info("iteration %d at level %d", i, level)
    _write(out, "schedule.txt", "levels = " + ",".join(map(str, schedule.levels)) + f"\nnfe = {gen.nfe}\n")


def pareto_rows(policy, env, cfg, num_iters, episodes, seed, repeats):
    """(n_iter, nfe, wall_ms_mean, success_rate) per N_iter; latency is per generated chunk."""
    from .sampler import SamplerConfig, default_schedule, hierarchical_generate, nfe_count

    probe = np.random.default_rng(seed).uniform(-1, 1, (1, policy.net_cfg.obs_steps, policy.net_cfg.obs_dim))
    rows = []
    for n_iter in num_iters:
        scfg = SamplerConfig.from_config(cfg, n_iter=n_iter)
        schedule = default_schedule(policy.net_cfg.horizon, n_iter)
        hierarchical_generate(policy.model, probe, schedule, scfg, np.random.default_rng(0))  # warm-up
        times = []
        for r in range(repeats):
            t0 = time.perf_counter()
            hierarchical_generate(policy.model, probe, schedule, scfg, np.random.default_rng(r))
            times.append((time.perf_counter() - t0) * 1e3)
        rate = hz.rollout_policy(env, policy, scfg, episodes, seed=seed).success_rate if episodes else float("nan")
        rows.append((n_iter, nfe_count(schedule, scfg), float(np.mean(times)), rate))
    return rows


def pareto_csv(rows):
    return "n_iter,nfe,wall_ms_mean,success_rate\n" + "".join(
        f"{n},{nfe},{ms!r},{rate!r}\n" for n, nfe, ms, rate in rows)


def cmd_bench(args, cfg):
    policy = _policy(args.checkpoint)
    env = _env_for(policy, cfg, args.env)
    episodes = cfg["bench.episodes"] if args.episodes is None else args.episodes
    rows = pareto_rows(policy, env, cfg, cfg["bench.num_iters"], episodes, cfg["seed"], cfg["bench.timing_repeats"])
    _write(args.out, "pareto.csv", pareto_csv(rows))
    if episodes:
        _write(args.out, "pareto.svg", svg.line_plot([("policy", [r[2] for r in rows], [r[3] for r in rows])],
                                                     "success vs latency per chunk", "wall ms", "success"))
    for r in rows:
        print(f"n_iter={r[0]} nfe={r[1]} wall_ms={r[2]:.2f} success={r[3]:.3f}")


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="freqact", description="Frequency-domain action policies at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("demos", parents=[common], help="generate an expert dataset")
    s.set_defaults(func=cmd_demos)

    s = sub.add_parser("analyze", parents=[common], help="spectral analysis of a dataset")
    s.add_argument("dataset")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("train", parents=[common], help="train a policy")
    s.add_argument("--data", help="dataset directory (else train.dataset)")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--until-epoch", type=int, help="stop after this epoch (for staged runs)")
    s.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "closed-loop evaluation"),
                                 ("bench", cmd_bench, "N_iter latency/success sweep")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("checkpoint")
        s.add_argument("--env", help="environment variant (default: the training one)")
        s.add_argument("--episodes", type=int, help="episodes per seed")
        if name == "eval":
            s.add_argument("--n-iter", type=int, help="sampler iterations (default sampler.num_iter)")
        s.set_defaults(func=func)

    s = sub.add_parser("sample", parents=[common], help="generate one chunk and dump each iteration")
    s.add_argument("checkpoint")
    s.add_argument("obs", help="CSV with T_o observation rows")
    s.add_argument("--n-iter", type=int)
    s.set_defaults(func=cmd_sample)
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _configure_threads()
        cfg = _load_cfg(args)
        _provenance(args.out, cfg, ["freqact"] + argv)
        args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ShapeError, RangeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FreqActError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
