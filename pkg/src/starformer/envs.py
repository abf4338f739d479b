"""Toy pixel environments, scripted behaviour policies, offline data and rollouts."""

from __future__ import annotations

import enum
import json
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from starformer.model import collate, predict
from starformer.trajectory import (
    IMAGE_SIZE,
    ActionKind,
    ActionSpace,
    RewardMode,
    Trajectory,
    TrajectoryWindow,
    build_window,
    dataset_write,
)


class EnvKind(str, enum.Enum):
    CATCH = "catch"
    REACH = "reach"


class EpisodeFinishedError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    kind: EnvKind = EnvKind.CATCH
    frame_stack: int = 4
    frame_skip: int = 1
    max_steps: int = 50  # REACH only; CATCH ends when the ball lands

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", EnvKind(self.kind))
        if self.frame_stack < 1 or self.frame_skip < 1 or self.max_steps < 1:
            raise ValueError("frame_stack, frame_skip and max_steps must be >= 1")

    @property
    def env_id(self) -> str:
        return f"{self.kind.value}-fs{self.frame_stack}-sk{self.frame_skip}"

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["kind"] = self.kind.value
        return out


class _PixelEnv:
    action_space: ActionSpace

    def __init__(self, cfg: EnvConfig, seed: int | None = None) -> None:
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.frames: deque[np.ndarray] = deque(maxlen=cfg.frame_stack)
        self.done = True
        self.t = 0

    def seed(self, seed: int) -> None:
        self.rng = np.random.default_rng(seed)

    def observation(self) -> np.ndarray:
        return np.stack(self.frames, axis=-1)

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.seed(seed)
        self._reset_state()
        self.done = False
        self.t = 0
        frame = self.render()
        for _ in range(self.cfg.frame_stack):
            self.frames.append(frame)
        return self.observation()

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        if self.done:
            raise EpisodeFinishedError("step() called on a finished episode; call reset()")
        action = self._check_action(action)
        total = 0.0
        for _ in range(self.cfg.frame_skip):
            reward, done = self._tick(action)
            total += reward
            self.frames.append(self.render())
            if done:
                break
        self.t += 1
        self.done = done or self._timed_out()
        return self.observation(), total, self.done

    def _timed_out(self) -> bool:
        return False

    def _check_action(self, action):
        raise NotImplementedError

    def _reset_state(self) -> None:
        raise NotImplementedError

    def _tick(self, action) -> tuple[float, bool]:
        raise NotImplementedError

    def render(self) -> np.ndarray:
        raise NotImplementedError

    def expert_action(self):
        raise NotImplementedError

    def random_action(self, rng: np.random.Generator):
        raise NotImplementedError


class CatchEnv(_PixelEnv):
    """A ball falls one cell per tick on a 12x12 grid of 7-px cells; move the paddle under it.

    Actions: 0 left, 1 stay, 2 right. Reward +1 on a catch, -1 on a miss.
    """

    GRID = 12
    CELL = IMAGE_SIZE // 12
    BALL_PX = 3
    PADDLE_ROWS = 3
    action_space = ActionSpace(ActionKind.DISCRETE, 3)

    def _reset_state(self) -> None:
        self.ball_row = 0
        self.ball_col = int(self.rng.integers(self.GRID))
        self.paddle_col = self.GRID // 2 - 1

    def _check_action(self, action) -> int:
        a = int(action)
        if not 0 <= a < 3:
            raise ValueError(f"CATCH action must be 0, 1 or 2, got {action}")
        return a

    def _tick(self, action: int) -> tuple[float, bool]:
        self.paddle_col = int(np.clip(self.paddle_col + action - 1, 0, self.GRID - 1))
        self.ball_row += 1
        if self.ball_row == self.GRID - 1:
            return (1.0 if self.ball_col == self.paddle_col else -1.0), True
        return 0.0, False

    def cell_of_ball(self) -> tuple[int, int]:
        return self.ball_row, self.ball_col

    def cell_of_paddle(self) -> tuple[int, int]:
        return self.GRID - 1, self.paddle_col

    def render(self) -> np.ndarray:
        img = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=np.uint8)
        c, off = self.CELL, (self.CELL - self.BALL_PX) // 2
        r0, c0 = self.ball_row * c + off, self.ball_col * c + off
        img[r0 : r0 + self.BALL_PX, c0 : c0 + self.BALL_PX] = 255
        pr = (self.GRID - 1) * c + c - self.PADDLE_ROWS
        img[pr : pr + self.PADDLE_ROWS, self.paddle_col * c : (self.paddle_col + 1) * c] = 255
        return img

    def expert_action(self) -> int:
        return int(np.sign(self.ball_col - self.paddle_col)) + 1

    def random_action(self, rng: np.random.Generator) -> int:
        return int(rng.integers(3))


class ReachEnv(_PixelEnv):
    """Damped point mass pushed towards a target in the unit square.

    Reward per tick is the negative euclidean distance to the target.
    """

    DT = 0.05
    GAIN = 4.0
    DAMPING = 2.0
    AGENT_PX = 5
    TARGET_PX = 3
    action_space = ActionSpace(ActionKind.CONTINUOUS, 2)

    def _reset_state(self) -> None:
        self.pos = self.rng.uniform(0.1, 0.9, size=2)
        self.vel = np.zeros(2)
        self.target = self.rng.uniform(0.1, 0.9, size=2)

    def _check_action(self, action) -> np.ndarray:
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        if a.shape != (2,) or not np.all(np.isfinite(a)) or np.abs(a).max() > 1.0 + 1e-6:
            raise ValueError(f"REACH action must be a 2-vector in [-1, 1], got {action}")
        return np.clip(a, -1.0, 1.0)

    def _tick(self, action: np.ndarray) -> tuple[float, bool]:
        self.vel = self.vel + self.DT * (self.GAIN * action - self.DAMPING * self.vel)
        self.pos = self.pos + self.DT * self.vel
        hit = (self.pos < 0.0) | (self.pos > 1.0)
        self.pos = np.clip(self.pos, 0.0, 1.0)
        self.vel[hit] = 0.0
        return -self.distance(), False

    def distance(self) -> float:
        return float(np.linalg.norm(self.pos - self.target))

    def _timed_out(self) -> bool:
        return self.t >= self.cfg.max_steps

    def _to_px(self, p: np.ndarray, size: int) -> tuple[int, int]:
        r = int(round(p[1] * (IMAGE_SIZE - size)))
        c = int(round(p[0] * (IMAGE_SIZE - size)))
        return r, c

    def render(self) -> np.ndarray:
        img = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=np.uint8)
        r, c = self._to_px(self.target, self.TARGET_PX)
        img[r : r + self.TARGET_PX, c : c + self.TARGET_PX] = 128
        r, c = self._to_px(self.pos, self.AGENT_PX)
        img[r : r + self.AGENT_PX, c : c + self.AGENT_PX] = 255
        return img

    def expert_action(self) -> np.ndarray:
        return np.clip(3.0 * (self.target - self.pos) - 1.0 * self.vel, -1.0, 1.0)

    def random_action(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=2)


def make_env(cfg: EnvConfig, seed: int | None = None) -> _PixelEnv:
    return {EnvKind.CATCH: CatchEnv, EnvKind.REACH: ReachEnv}[cfg.kind](cfg, seed)


@dataclass
class BehaviorPolicy:
    """Scripted expert with probability ``epsilon``, otherwise a uniform random action."""

    epsilon: float
    rng: np.random.Generator = field(default_factory=np.random.default_rng)

    def __post_init__(self) -> None:
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")

    def act(self, env: _PixelEnv):
        if self.rng.random() < self.epsilon:
            return env.expert_action()
        return env.random_action(self.rng)


def collect_episode(env: _PixelEnv, policy: BehaviorPolicy, seed: int | None = None) -> Trajectory:
    obs = env.reset(seed)
    states, actions, rewards = [], [], []
    done = False
    while not done:
        a = policy.act(env)
        states.append(obs)
        actions.append(a)
        obs, r, done = env.step(a)
        rewards.append(r)
    return Trajectory(
        np.stack(states),
        np.asarray(actions, dtype=np.int64 if env.action_space.discrete else np.float32),
        np.asarray(rewards, dtype=np.float32),
        env.action_space,
        env.cfg.env_id,
    )


def _seeds(seed: int) -> tuple[int, int]:
    env_ss, pol_ss = np.random.SeedSequence(seed).spawn(2)
    return int(env_ss.generate_state(1)[0]), int(pol_ss.generate_state(1)[0])


def collect_episodes(cfg: EnvConfig, epsilon: float, n_episodes: int, seed: int) -> list[Trajectory]:
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    env_seed, pol_seed = _seeds(seed)
    env = make_env(cfg, env_seed)
    policy = BehaviorPolicy(epsilon, np.random.default_rng(pol_seed))
    return [collect_episode(env, policy) for _ in range(n_episodes)]


def expert_mean_return(cfg: EnvConfig, n_episodes: int = 20, seed: int = 0) -> float:
    return float(np.mean([t.episode_return for t in collect_episodes(cfg, 1.0, n_episodes, seed)]))


def manifest_path(dataset_path: str | Path) -> Path:
    p = Path(dataset_path)
    return p.with_name(p.name + ".manifest.json")


def generate_offline_dataset(
    cfg: EnvConfig, epsilon: float, n_episodes: int, seed: int, path: str | Path
) -> dict[str, Any]:
    """Write ``n_episodes`` behaviour-policy episodes to ``path`` plus a JSON manifest."""
    trajectories = collect_episodes(cfg, epsilon, n_episodes, seed)
    dataset_write(trajectories, path)
    returns = [t.episode_return for t in trajectories]
    manifest = {
        "env": cfg.to_dict(),
        "env_id": cfg.env_id,
        "epsilon": epsilon,
        "seed": seed,
        "n_episodes": n_episodes,
        "returns": returns,
        "mean_return": float(np.mean(returns)),
        "target_rtg": expert_mean_return(cfg, seed=seed),
    }
    with open(manifest_path(path), "w") as f:
        json.dump(manifest, f, indent=2)
    return manifest


# --------------------------------------------------------------------------
# rollouts


@dataclass
class RolloutResult:
    episode_return: float
    rewards: list[float]
    actions: list[Any]
    fed_rtg: list[float]
    windows: list[TrajectoryWindow]
    trajectory: Trajectory


def rollout(
    model: torch.nn.Module,
    env: _PixelEnv,
    seq_len: int | None = None,
    reward_mode: RewardMode | str | None = None,
    target_rtg: float | None = None,
    seed: int | None = None,
    keep_windows: bool = False,
) -> RolloutResult:
    """Run one greedy episode, acting on the last valid prediction of each window."""
    cfg = model.cfg
    seq_len = seq_len or cfg.seq_len
    mode = RewardMode(reward_mode or cfg.reward_mode)
    space = env.action_space
    if space != cfg.action_space:
        raise ValueError(f"env action space {space} != model {cfg.action_space}")
    if mode is RewardMode.RTG and target_rtg is None:
        raise ValueError("RTG mode needs a target return")
    dtype = next(model.parameters()).dtype

    obs = env.reset(seed)
    states, actions, rewards, fed = [obs], [], [], []
    windows = []
    done = False
    while not done:
        t = len(states) - 1
        acts = np.stack(actions + [space.empty(1)[0]]) if actions else space.empty(1)
        rews = np.asarray(rewards + [0.0], dtype=np.float32)
        rtg = None
        if mode is RewardMode.RTG:
            rtg = target_rtg - np.concatenate([[0.0], np.cumsum(rewards, dtype=np.float64)])
            fed.append(float(rtg[t]))
        window = build_window(np.stack(states), acts, rews, rtg, t, seq_len, mode, space)
        if keep_windows:
            windows.append(window)
        out = predict(model, collate([window]).to(dtype))[0, -1]
        if space.discrete:
            action = int(out.argmax())
        else:
            action = out.double().clamp(-1.0, 1.0).numpy().astype(np.float32)
        obs, r, done = env.step(action)
        actions.append(action)
        rewards.append(r)
        if not done:
            states.append(obs)
    traj = Trajectory(
        np.stack(states), np.asarray(actions), np.asarray(rewards, dtype=np.float32), space, env.cfg.env_id
    )
    return RolloutResult(float(np.sum(rewards, dtype=np.float64)), rewards, actions, fed, windows, traj)


def evaluate(
    model: torch.nn.Module,
    env_cfg: EnvConfig,
    n_episodes: int,
    seeds: Sequence[int],
    reward_mode: RewardMode | str | None = None,
    target_rtg: float | None = None,
) -> dict[str, Any]:
    """Greedy evaluation; ``n_episodes`` per seed, reproducible from the seed list."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    mode = RewardMode(reward_mode or model.cfg.reward_mode)
    per_seed = []
    for seed in seeds:
        env = make_env(env_cfg, seed)
        per_seed.append(
            [rollout(model, env, reward_mode=mode, target_rtg=target_rtg).episode_return for _ in range(n_episodes)]
        )
    flat = np.asarray([r for rs in per_seed for r in rs], dtype=np.float64)
    return {
        "env": env_cfg.env_id,
        "variant": model.cfg.variant,
        "reward_mode": mode.value,
        "T": model.cfg.seq_len,
        "seeds": list(seeds),
        "per_seed_returns": per_seed,
        "per_seed_mean": [float(np.mean(rs)) for rs in per_seed],
        "mean": float(flat.mean()),
        "std": float(flat.std()),
    }
