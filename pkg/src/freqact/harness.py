"""Demonstrations, replay analysis and closed-loop evaluation on the toy tasks."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import trajectory as tc
from .envs import make_env, run_expert
from .errors import DataError, RangeError
from .sampler import SamplerConfig, default_schedule

NOISE_PRESETS = (0.025, 0.05, 0.1)
EXPERT_MIN_SUCCESS = 0.95


def episode_seed(base_seed, index, stream=0):
    """Independent 32-bit seed for episode ``index`` of a run."""
    return int(np.random.SeedSequence([int(base_seed), int(index), int(stream)]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# normalization


@dataclass(frozen=True)
class Normalizer:
    """Affine map of each dimension's [min, max] onto [-1, 1]."""

    offset: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, rows):
        rows = np.asarray(rows, dtype=np.float64)
        lo, hi = rows.min(axis=0), rows.max(axis=0)
        scale = (hi - lo) / 2.0
        scale = np.where(scale > 1e-9, scale, 1.0)
        return cls((hi + lo) / 2.0, scale)

    def normalize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.offset) / self.scale

    def denormalize(self, x):
        return np.asarray(x, dtype=np.float64) * self.scale + self.offset


# ---------------------------------------------------------------------------
# demonstrations


@dataclass
class Demonstration:
    obs: np.ndarray  # (L, obs_dim); obs[t] is the state the action[t] was chosen in
    actions: np.ndarray  # (L, action_dim)
    seed: int
    env: str = "reach2d"
    expert: str = "scripted"
    noise_std: float = 0.0

    def __post_init__(self):
        self.obs = np.asarray(self.obs, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if len(self.obs) != len(self.actions) or len(self.actions) == 0:
            raise DataError(f"demo seed {self.seed}: {len(self.obs)} observations vs {len(self.actions)} actions")

    @property
    def length(self):
        return len(self.actions)


def generate_demos(env, n_episodes, noise_std=0.0, seed=0, min_success=EXPERT_MIN_SUCCESS):
    """Collect ``n_episodes`` successful scripted-expert episodes.

    With ``noise_std > 0``, i.i.d. Gaussian noise of that std is added to every
    action dimension in normalized units (normalizer fit on the clean actions),
    as a post-hoc corruption of the recorded actions.
    """
    if isinstance(env, str):
        env = make_env(env)
    if noise_std < 0:
        raise RangeError(f"noise_std must be non-negative, got {noise_std}")
    demos, attempts = [], 0
    max_attempts = int(np.ceil(n_episodes / min_success)) + 10
    while len(demos) < n_episodes:
        if attempts >= max_attempts:
            break
        ep_seed = episode_seed(seed, attempts)
        attempts += 1
        obs, actions, ok = run_expert(env, ep_seed)
        if ok:
            demos.append(Demonstration(obs, actions, ep_seed, env.variant))
    rate = len(demos) / max(attempts, 1)
    if len(demos) < n_episodes or rate < min_success:
        raise DataError(f"expert on {env.variant} succeeded {len(demos)}/{attempts} times "
                        f"({rate:.2%}), below the {min_success:.0%} threshold")
    if noise_std > 0:
        norm = Normalizer.fit(np.concatenate([d.actions for d in demos]))
        noise_rng = np.random.default_rng(episode_seed(seed, 0, stream=7))
        for d in demos:
            noisy = norm.normalize(d.actions) + noise_rng.normal(0.0, noise_std, d.actions.shape)
            d.actions = norm.denormalize(noisy)
            d.noise_std = float(noise_std)
    return demos


def save_demos(demos, directory, base_seed=0):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, d in enumerate(demos):
        ep = directory / f"ep{i:04d}"
        ep.mkdir(exist_ok=True)
        (ep / "obs.csv").write_text(tc.trajectory_to_csv(tc.Trajectory(d.obs)))
        (ep / "actions.csv").write_text(tc.trajectory_to_csv(tc.Trajectory(d.actions)))
    first = demos[0]
    manifest = {
        "env": first.env,
        "expert": first.expert,
        "base_seed": str(base_seed),
        "n_episodes": str(len(demos)),
        "noise_std": repr(float(first.noise_std)),
        "episode_seeds": ",".join(str(d.seed) for d in demos),
        "episode_lengths": ",".join(str(d.length) for d in demos),
    }
    (directory / "manifest.txt").write_text("".join(f"{k} = {v}\n" for k, v in manifest.items()))


def read_manifest(directory):
    path = Path(directory) / "manifest.txt"
    if not path.exists():
        raise DataError(f"{path}: missing dataset manifest")
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def load_demos(directory):
    directory = Path(directory)
    man = read_manifest(directory)
    try:
        n = int(man["n_episodes"])
        seeds = [int(s) for s in man["episode_seeds"].split(",")]
        noise = float(man["noise_std"])
    except (KeyError, ValueError) as exc:
        raise DataError(f"{directory / 'manifest.txt'}: bad manifest ({exc})") from None
    if len(seeds) != n:
        raise DataError(f"{directory / 'manifest.txt'}: {len(seeds)} seeds for {n} episodes")
    demos = []
    for i in range(n):
        ep = directory / f"ep{i:04d}"
        obs = tc.load_trajectory(ep / "obs.csv").values
        actions = tc.load_trajectory(ep / "actions.csv").values
        demos.append(Demonstration(obs, actions, seeds[i], man.get("env", "reach2d"),
                                   man.get("expert", "scripted"), noise))
    return demos


# ---------------------------------------------------------------------------
# chunking


def obs_history(states, t, n_obs):
    """Observations t-n_obs+1 .. t, repeating the first observation before the episode starts."""
    idx = np.clip(np.arange(t - n_obs + 1, t + 1), 0, None)
    return np.asarray(states)[idx]


def action_chunk(actions, t, horizon):
    """Actions t .. t+horizon-1, repeating the final action past the episode end."""
    idx = np.minimum(np.arange(t, t + horizon), len(actions) - 1)
    return np.asarray(actions)[idx]


def chunk_windows(demo, n_obs, horizon, stride):
    """(obs window, action window, start) triples with starts 0, stride, 2*stride, ... < L."""
    return [(obs_history(demo.obs, t, n_obs), action_chunk(demo.actions, t, horizon), t)
            for t in range(0, demo.length, stride)]


def window_arrays(demos, n_obs, horizon, stride):
    obs, act = [], []
    for d in demos:
        for o, a, _ in chunk_windows(d, n_obs, horizon, stride):
            obs.append(o)
            act.append(a)
    return np.stack(obs), np.stack(act)


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    success_rate: float
    mean_episode_length: float
    episodes: list
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.episodes:
            raise DataError("an evaluation report needs at least one episode")
        if not 0.0 <= self.success_rate <= 1.0:
            raise RangeError(f"success rate {self.success_rate} outside [0, 1]")

    @classmethod
    def from_episodes(cls, episodes, config=None):
        if not episodes:
            raise DataError("an evaluation report needs at least one episode")
        episodes = sorted(episodes, key=lambda e: e["index"])
        succ = [bool(e["success"]) for e in episodes]
        return cls(float(np.mean(succ)), float(np.mean([e["length"] for e in episodes])), episodes,
                   dict(config or {}))

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    def to_table(self):
        lines = [f"episodes      {len(self.episodes)}",
                 f"success rate  {self.success_rate:.3f}",
                 f"mean length   {self.mean_episode_length:.2f}"]
        for k, v in sorted(self.config.items()):
            lines.append(f"{k:<13} {v}")
        return "\n".join(lines) + "\n"


def replay_actions(env, seed, actions):
    """Open-loop replay from the episode's initial state; stops at the first success."""
    env.reset(seed)
    for step, a in enumerate(actions, start=1):
        _, done = env.step(a)
        if done:
            return True, step
    return False, len(actions)


def compress_actions(actions, p, horizon):
    """Low-pass each horizon-length chunk to k = max(1, round(p * horizon)) coefficients.

    The trailing partial chunk is padded by repeating the final action and
    cut back after filtering.
    """
    if not 0.0 < p <= 1.0:
        raise RangeError(f"frequency ratio p={p} outside (0, 1]")
    actions = np.asarray(actions, dtype=np.float64)
    k = max(1, int(np.floor(p * horizon + 0.5)))
    n_chunks = -(-len(actions) // horizon)
    padded = action_chunk(actions, 0, n_chunks * horizon).reshape(n_chunks, horizon, -1)
    if k == horizon:
        return actions.copy()
    return tc.lowpass_array(padded, k).reshape(n_chunks * horizon, -1)[: len(actions)]


def replay_compressed(demos, p, env=None, horizon=16):
    if not demos:
        raise DataError("replay_compressed: empty demonstration set")
    env = make_env(demos[0].env) if env is None else env
    episodes = []
    for i, d in enumerate(demos):
        ok, steps = replay_actions(env, d.seed, compress_actions(d.actions, p, horizon))
        episodes.append({"index": i, "seed": d.seed, "success": ok, "length": steps})
    return EvalReport.from_episodes(episodes, {"p": p, "horizon": horizon, "env": env.variant})


def compression_sweep(demos, ratios=None, horizon=16):
    """Rows (p, k, success_rate) for the frequency-ratio sweep."""
    ratios = ratios or [round(0.1 * i, 1) for i in range(1, 11)]
    rows = []
    for p in ratios:
        rep = replay_compressed(demos, p, horizon=horizon)
        rows.append((p, max(1, int(np.floor(p * horizon + 0.5))), rep.success_rate))
    return rows


def sweep_to_csv(rows):
    return "p,k,success_rate\n" + "".join(f"{p!r},{k},{s!r}\n" for p, k, s in rows)


# ---------------------------------------------------------------------------
# closed-loop evaluation


def rollout_policy(env, policy, sampler_cfg: SamplerConfig, n_episodes, seed=0, records=None, schedule=None):
    """Receding-horizon evaluation: plan T_h actions, execute T_a, re-observe.

    All episodes advance in lockstep so the network sees one batch per
    replanning round; each episode owns its own environment seed and sampler
    stream, so results do not depend on batching.  Per-episode generation
    statistics are appended to ``records`` when given.
    """
    if isinstance(env, str):
        env = make_env(env)
    cls = type(env)
    envs = [cls(env.max_episode_steps) for _ in range(n_episodes)]
    seeds = [episode_seed(seed, i) for i in range(n_episodes)]
    rngs = [np.random.default_rng(episode_seed(seed, i, stream=1)) for i in range(n_episodes)]
    history = [[e.reset(s)] for e, s in zip(envs, seeds)]
    steps = np.zeros(n_episodes, dtype=int)
    success = np.zeros(n_episodes, dtype=bool)
    active = list(range(n_episodes))
    n_obs = policy.net_cfg.obs_steps
    execute = policy.action_step
    schedule = schedule or default_schedule(policy.net_cfg.horizon, sampler_cfg.n_iter)
    stats = {i: {"nfe": 0, "wall_ms": 0.0, "norms": []} for i in range(n_episodes)}
    while active:
        obs = np.stack([obs_history(history[i], len(history[i]) - 1, n_obs) for i in active])
        chunk, gen = policy.plan(obs, sampler_cfg, [rngs[i] for i in active], schedule)
        norms = gen.spectral_norms()
        still = []
        for row, i in enumerate(active):
            stats[i]["nfe"] += gen.nfe
            stats[i]["wall_ms"] += gen.wall_ms / len(active)
            stats[i]["norms"].append(norms)
            for a in chunk[row, :execute]:
                state, done = envs[i].step(a)
                history[i].append(state)
                steps[i] += 1
                if done:
                    success[i] = True
                    break
                if steps[i] >= envs[i].max_episode_steps:
                    break
            if not success[i] and steps[i] < envs[i].max_episode_steps:
                still.append(i)
        active = still
    episodes = [{"index": i, "seed": seeds[i], "success": bool(success[i]), "length": int(steps[i])}
                for i in range(n_episodes)]
    if records is not None:
        for i in range(n_episodes):
            records.append({
                "episode": i, "seed": seeds[i], "schedule": list(schedule.levels),
                "spectral_norms": np.mean(stats[i]["norms"], axis=0).tolist(),
                "nfe": stats[i]["nfe"], "wall_ms": stats[i]["wall_ms"],
            })
    return EvalReport.from_episodes(episodes, {
        "env": env.variant, "episodes": n_episodes, "seed": seed, "n_iter": schedule.n_iter,
        "ddim_steps": sampler_cfg.ddim_steps, "ddim_eta": sampler_cfg.ddim_eta,
    })


def random_policy_baseline(env, n_episodes, seed=0, hold=8):
    """Chance level: uniform random velocity commands, each held for ``hold`` steps.

    Holding matches receding-horizon execution, where a policy commits to
    ``action_step`` actions between observations.
    """
    if isinstance(env, str):
        env = make_env(env)
    lo, hi = env.action_bounds()
    n_cmd = -(-env.max_episode_steps // hold)
    episodes = []
    for i in range(n_episodes):
        s = episode_seed(seed, i)
        rng = np.random.default_rng(episode_seed(seed, i, stream=1))
        actions = np.repeat(rng.uniform(lo, hi, (n_cmd, env.action_dim)), hold, axis=0)[: env.max_episode_steps]
        ok, steps = replay_actions(env, s, actions)
        episodes.append({"index": i, "seed": s, "success": ok, "length": steps})
    return EvalReport.from_episodes(episodes, {"env": env.variant, "policy": "random", "hold": hold})


def write_records(records, path):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# noise robustness


@dataclass
class NoiseRow:
    noise_std: float
    success_rate: float
    relative_change: float  # percent vs. the clean condition

    def render(self):
        return f"{round(100 * self.success_rate)}^{{{self.relative_change:+.0f}}}"


def _mean_success(entry):
    if isinstance(entry, EvalReport):
        return entry.success_rate
    if isinstance(entry, (list, tuple)):
        return float(np.mean([_mean_success(e) for e in entry]))
    return float(entry)


def relative_change(value, baseline):
    if baseline == 0:
        return 0.0 if value == 0 else float("inf")
    return (value - baseline) / baseline * 100.0


def noise_robustness_suite(results, noise_stds=None):
    """Success per noise condition with relative change against the clean (std 0) condition.

    ``results`` maps noise std to an :class:`EvalReport`, a list of them (one
    per seed), or a bare success rate.
    """
    if 0.0 not in results:
        raise DataError("noise robustness needs a clean (std=0) condition")
    stds = sorted(results) if noise_stds is None else [0.0] + [s for s in noise_stds if s != 0.0]
    missing = [s for s in stds if s not in results]
    if missing:
        raise DataError(f"no trained result for noise conditions {missing}")
    base = _mean_success(results[0.0])
    return [NoiseRow(s, _mean_success(results[s]), relative_change(_mean_success(results[s]), base)) for s in stds]


def noise_table(rows_by_method):
    """Plain-text table, one line per method, cells rendered as success^{relative%}."""
    stds = [r.noise_std for r in next(iter(rows_by_method.values()))]
    header = "method".ljust(12) + "".join(f"std={s:<10g}" for s in stds)
    lines = [header]
    for name, rows in rows_by_method.items():
        lines.append(name.ljust(12) + "".join(r.render().ljust(14) for r in rows))
    return "\n".join(lines) + "\n"

