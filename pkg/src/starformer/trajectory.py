"""Trajectory data model, window sampling and the on-disk dataset container."""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Sequence

import numpy as np

IMAGE_SIZE = 84

MAGIC = b"STARTRJ1"
FORMAT_VERSION = 1


class RewardMode(str, enum.Enum):
    STEPWISE = "stepwise"
    RTG = "rtg"
    NONE = "none"


class ActionKind(str, enum.Enum):
    DISCRETE = "discrete"
    CONTINUOUS = "continuous"


@dataclass(frozen=True)
class ActionSpace:
    """Either ``dim`` discrete choices or a ``dim``-vector in [-1, 1]."""

    kind: ActionKind
    dim: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ActionKind(self.kind))
        if self.dim < 1:
            raise ValueError(f"action dim must be >= 1, got {self.dim}")

    @property
    def discrete(self) -> bool:
        return self.kind is ActionKind.DISCRETE

    @property
    def start_index(self) -> int:
        """Sentinel index used for the missing action before the first step."""
        return self.dim

    def empty(self, n: int) -> np.ndarray:
        if self.discrete:
            return np.zeros(n, dtype=np.int64)
        return np.zeros((n, self.dim), dtype=np.float32)

    def validate(self, actions: np.ndarray) -> None:
        if self.discrete:
            if actions.ndim != 1 or not np.issubdtype(actions.dtype, np.integer):
                raise ValueError("discrete actions must be a 1-D integer array")
            if actions.size and (actions.min() < 0 or actions.max() >= self.dim):
                raise ValueError(f"discrete action out of range [0, {self.dim})")
        else:
            if actions.ndim != 2 or actions.shape[1] != self.dim:
                raise ValueError(f"continuous actions must have shape (L, {self.dim})")
            if not np.all(np.isfinite(actions)) or np.abs(actions).max(initial=0.0) > 1.0:
                raise ValueError("continuous action components must lie in [-1, 1]")


class DatasetError(ValueError):
    pass


class VersionMismatchError(DatasetError):
    pass


class ChecksumError(DatasetError):
    pass


class ActionSpaceMismatchError(DatasetError):
    pass


@dataclass
class Step:
    state: np.ndarray  # (H, W, C) float32 in [0, 1]
    action: int | np.ndarray
    reward: float


@dataclass
class Trajectory:
    """One episode. Pixels are kept as uint8 and normalised on access."""

    states: np.ndarray  # (L, H, W, C) uint8
    actions: np.ndarray  # (L,) int64 or (L, A) float32
    rewards: np.ndarray  # (L,) float32
    action_space: ActionSpace
    env_id: str = ""

    def __post_init__(self) -> None:
        self.states = np.asarray(self.states)
        if self.states.dtype != np.uint8:
            states = np.asarray(self.states, dtype=np.float64)
            if states.size and (states.min() < 0.0 or states.max() > 1.0):
                raise ValueError("float states must be normalised to [0, 1]")
            self.states = np.rint(states * 255.0).astype(np.uint8)
        if self.action_space.discrete:
            self.actions = np.asarray(self.actions, dtype=np.int64)
        else:
            self.actions = np.asarray(self.actions, dtype=np.float32)
        self.rewards = np.asarray(self.rewards, dtype=np.float32)
        n = len(self.rewards)
        if n < 1:
            raise ValueError("a trajectory needs at least one step")
        if self.states.ndim != 4 or self.states.shape[1:3] != (IMAGE_SIZE, IMAGE_SIZE):
            raise ValueError(
                f"states must have shape (L, {IMAGE_SIZE}, {IMAGE_SIZE}, C), got {self.states.shape}"
            )
        if self.states.shape[0] != n or self.actions.shape[0] != n or self.rewards.ndim != 1:
            raise ValueError("states, actions and rewards must share the leading length")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("rewards must be finite")
        self.action_space.validate(self.actions)

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def frame_stack(self) -> int:
        return self.states.shape[-1]

    @property
    def episode_return(self) -> float:
        return float(self.rewards.sum(dtype=np.float64))

    @property
    def steps(self) -> list[Step]:
        return [self[i] for i in range(len(self))]

    def __getitem__(self, i: int) -> Step:
        action = int(self.actions[i]) if self.action_space.discrete else self.actions[i].copy()
        return Step(self.states[i].astype(np.float32) / 255.0, action, float(self.rewards[i]))

    @classmethod
    def from_steps(cls, steps: Sequence[Step], action_space: ActionSpace, env_id: str = "") -> Trajectory:
        return cls(
            states=np.stack([s.state for s in steps]),
            actions=np.stack([np.asarray(s.action) for s in steps]),
            rewards=np.array([s.reward for s in steps], dtype=np.float32),
            action_space=action_space,
            env_id=env_id,
        )

    def equals(self, other: Trajectory) -> bool:
        return (
            self.action_space == other.action_space
            and self.env_id == other.env_id
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.rewards, other.rewards)
        )


def compute_rtg(rewards: Iterable[float]) -> np.ndarray:
    """Return-to-go: ``out[t] = sum(rewards[t:])``."""
    r = np.asarray(list(rewards), dtype=np.float64)
    if r.size == 0:
        return r
    return np.cumsum(r[::-1])[::-1].copy()


@dataclass
class TrajectoryWindow:
    """A fixed-length, left-padded training sample of ``T`` steps."""

    states: np.ndarray  # (T, H, W, C) float32
    actions: np.ndarray  # (T,) int64 or (T, A) float32
    rewards: np.ndarray  # (T,) float32, resolved per reward mode
    prev_actions: np.ndarray  # entry t is a_{t-1}, start sentinel at episode start
    prev_rewards: np.ndarray  # (T,) reward-token value for group t
    valid_mask: np.ndarray  # (T,) bool, False on left padding
    timesteps: np.ndarray  # (T,) int64 absolute step index
    reward_mode: RewardMode

    @property
    def seq_len(self) -> int:
        return len(self.valid_mask)

    @property
    def omit_rewards(self) -> bool:
        return self.reward_mode is RewardMode.NONE

    @property
    def start_mask(self) -> np.ndarray:
        return self.valid_mask & (self.timesteps == 0)


def build_window(
    states: np.ndarray,
    actions: np.ndarray,
    rewards: np.ndarray,
    rtg: np.ndarray | None,
    t_end: int,
    seq_len: int,
    mode: RewardMode,
    action_space: ActionSpace,
) -> TrajectoryWindow:
    """Assemble a window ending at ``t_end`` from raw per-episode arrays.

    ``rtg`` holds the return-to-go aligned with ``states`` and is only read in
    RTG mode. Rollouts call this directly with partially observed episodes so
    that inference-time windows are built by the same code as training windows.
    """
    mode = RewardMode(mode)
    if seq_len < 1:
        raise ValueError("window length must be >= 1")
    if not 0 <= t_end < len(states):
        raise IndexError(f"t_end={t_end} outside trajectory of length {len(states)}")
    start = max(0, t_end - seq_len + 1)
    n = t_end - start + 1
    pad = seq_len - n
    idx = np.arange(start, t_end + 1)

    out_states = np.zeros((seq_len,) + states.shape[1:], dtype=np.float32)
    out_states[pad:] = states[start : t_end + 1].astype(np.float32) / 255.0

    out_actions = action_space.empty(seq_len)
    out_actions[pad:] = actions[start : t_end + 1]
    prev_actions = action_space.empty(seq_len)
    if start > 0:
        prev_actions[pad] = actions[start - 1]
    elif action_space.discrete:
        prev_actions[pad] = action_space.start_index
    prev_actions[pad + 1 :] = actions[start:t_end]

    out_rewards = np.zeros(seq_len, dtype=np.float32)
    prev_rewards = np.zeros(seq_len, dtype=np.float32)
    if mode is RewardMode.STEPWISE:
        out_rewards[pad:] = rewards[idx]
        prev = np.concatenate([[0.0], rewards])[idx]  # r_{t-1}, 0 before the first step
        prev_rewards[pad:] = prev
    elif mode is RewardMode.RTG:
        if rtg is None:
            raise ValueError("RTG mode needs return-to-go values")
        out_rewards[pad:] = rtg[idx]
        prev_rewards[pad:] = rtg[idx]

    valid = np.zeros(seq_len, dtype=bool)
    valid[pad:] = True
    timesteps = np.zeros(seq_len, dtype=np.int64)
    timesteps[pad:] = idx
    return TrajectoryWindow(
        states=out_states,
        actions=out_actions,
        rewards=out_rewards,
        prev_actions=prev_actions,
        prev_rewards=prev_rewards,
        valid_mask=valid,
        timesteps=timesteps,
        reward_mode=mode,
    )


def sample_window(traj: Trajectory, t_end: int, seq_len: int, mode: RewardMode | str) -> TrajectoryWindow:
    """Window of the last ``min(seq_len, t_end + 1)`` steps ending at ``t_end``.

    RTG is computed over the whole episode before slicing.
    """
    mode = RewardMode(mode)
    rtg = compute_rtg(traj.rewards) if mode is RewardMode.RTG else None
    return build_window(
        traj.states, traj.actions, traj.rewards, rtg, t_end, seq_len, mode, traj.action_space
    )


# --------------------------------------------------------------------------
# dataset container

_HEADER_FIXED = struct.Struct("<8sIBIIIII")  # magic, version, kind, A, stack, H, W, env_id len
_U64 = struct.Struct("<Q")


@dataclass(frozen=True)
class DatasetHeader:
    version: int
    action_space: ActionSpace
    frame_stack: int
    height: int
    width: int
    env_id: str
    count: int
    count_offset: int


def _checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def _encode_record(traj: Trajectory) -> bytes:
    body = b"".join(
        [
            _U64.pack(len(traj)),
            np.ascontiguousarray(traj.states, dtype=np.uint8).tobytes(),
            np.ascontiguousarray(traj.actions, dtype="<i8" if traj.action_space.discrete else "<f4").tobytes(),
            np.ascontiguousarray(traj.rewards, dtype="<f4").tobytes(),
        ]
    )
    return body + _U64.pack(_checksum(body))


def _check_consistent(trajectories: Sequence[Trajectory], header: DatasetHeader | None = None) -> tuple:
    if header is not None:
        ref = (header.action_space, header.frame_stack, header.env_id)
    elif trajectories:
        t0 = trajectories[0]
        ref = (t0.action_space, t0.frame_stack, t0.env_id)
    else:
        raise DatasetError("cannot infer the dataset descriptor from zero trajectories")
    for traj in trajectories:
        if traj.action_space != ref[0]:
            raise ActionSpaceMismatchError(f"action space {traj.action_space} != {ref[0]}")
        if traj.frame_stack != ref[1]:
            raise DatasetError(f"frame stack {traj.frame_stack} != {ref[1]}")
        if traj.env_id != ref[2]:
            raise DatasetError(f"env id {traj.env_id!r} != {ref[2]!r}")
    return ref


def dataset_write(trajectories: Sequence[Trajectory], path: str | Path) -> None:
    space, stack, env_id = _check_consistent(trajectories)
    env_bytes = env_id.encode("utf-8")
    with open(path, "wb") as f:
        f.write(
            _HEADER_FIXED.pack(
                MAGIC, FORMAT_VERSION, 0 if space.discrete else 1, space.dim, stack,
                IMAGE_SIZE, IMAGE_SIZE, len(env_bytes),
            )
        )
        f.write(env_bytes)
        f.write(_U64.pack(len(trajectories)))
        for traj in trajectories:
            f.write(_encode_record(traj))


def _read_header(f: BinaryIO) -> DatasetHeader:
    raw = f.read(_HEADER_FIXED.size)
    if len(raw) < _HEADER_FIXED.size:
        raise DatasetError("truncated dataset header")
    magic, version, kind, dim, stack, h, w, env_len = _HEADER_FIXED.unpack(raw)
    if magic != MAGIC:
        raise DatasetError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"dataset version {version}, expected {FORMAT_VERSION}")
    if kind not in (0, 1):
        raise DatasetError(f"unknown action space kind {kind}")
    env_id = f.read(env_len).decode("utf-8")
    count_offset = f.tell()
    (count,) = _U64.unpack(f.read(_U64.size))
    space = ActionSpace(ActionKind.DISCRETE if kind == 0 else ActionKind.CONTINUOUS, dim)
    return DatasetHeader(version, space, stack, h, w, env_id, count, count_offset)


def read_header(path: str | Path) -> DatasetHeader:
    with open(path, "rb") as f:
        return _read_header(f)


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise DatasetError("truncated trajectory record")
    return buf


def iter_dataset(path: str | Path) -> Iterator[Trajectory]:
    with open(path, "rb") as f:
        header = _read_header(f)
        space = header.action_space
        frame = header.height * header.width * header.frame_stack
        act_item = 8 if space.discrete else 4 * space.dim
        for _ in range(header.count):
            len_bytes = _read_exact(f, _U64.size)
            (n,) = _U64.unpack(len_bytes)
            states_b = _read_exact(f, n * frame)
            actions_b = _read_exact(f, n * act_item)
            rewards_b = _read_exact(f, n * 4)
            (stored,) = _U64.unpack(_read_exact(f, _U64.size))
            if _checksum(len_bytes + states_b + actions_b + rewards_b) != stored:
                raise ChecksumError("trajectory checksum mismatch")
            states = np.frombuffer(states_b, dtype=np.uint8).reshape(
                n, header.height, header.width, header.frame_stack
            )
            if space.discrete:
                actions = np.frombuffer(actions_b, dtype="<i8").astype(np.int64)
            else:
                actions = np.frombuffer(actions_b, dtype="<f4").reshape(n, space.dim).astype(np.float32)
            rewards = np.frombuffer(rewards_b, dtype="<f4").astype(np.float32)
            yield Trajectory(states.copy(), actions, rewards, space, header.env_id)


def dataset_read(path: str | Path) -> list[Trajectory]:
    return list(iter_dataset(path))


def dataset_append(trajectories: Sequence[Trajectory], path: str | Path) -> None:
    """Append episodes to an existing file, rejecting descriptor mismatches."""
    with open(path, "r+b") as f:
        header = _read_header(f)
        _check_consistent(trajectories, header)
        f.seek(0, 2)
        for traj in trajectories:
            f.write(_encode_record(traj))
        f.seek(header.count_offset)
        f.write(_U64.pack(header.count + len(trajectories)))


def record_checksums(path: str | Path) -> list[int]:
    """Stored per-trajectory checksums, in file order."""
    out = []
    with open(path, "rb") as f:
        header = _read_header(f)
        frame = header.height * header.width * header.frame_stack
        act_item = 8 if header.action_space.discrete else 4 * header.action_space.dim
        for _ in range(header.count):
            (n,) = _U64.unpack(_read_exact(f, _U64.size))
            f.seek(n * (frame + act_item + 4), 1)
            out.append(_U64.unpack(_read_exact(f, _U64.size))[0])
    return out
