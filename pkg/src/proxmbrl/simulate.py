"""Seeded trajectory simulation.

Randomness is counter-based: trajectory ``i`` of a run with master seed ``m``
consumes the Philox4x64 stream keyed by ``m`` starting at counter
``i * block // 4``, where ``block`` is the number of uniforms one trajectory
needs (rounded up to a multiple of 4). Any trajectory can therefore be
regenerated alone, and batches may be produced in any order or in parallel.

Uniform layout of one block: ``[s_0, y_N, (y_t, u_t, r_t, s_{t+1}) for t < T]``.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

from .core import SCHEMA_VERSION, Policy, PomdpSpec, SpecValidationError, Trajectory, check_compatible

DATASET_MAGIC = "# proxmbrl-dataset"
SEED_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class SimConfig:
    num_trajectories: int
    master_seed: int = 7
    emit_latent: bool = False

    def __post_init__(self):
        if self.num_trajectories < 1:
            raise SpecValidationError("num_trajectories must be >= 1")


def block_size(horizon: int) -> int:
    k = 2 + 4 * horizon
    return k + (-k) % 4


def trajectory_uniforms(master_seed: int, start: int, count: int, horizon: int) -> np.ndarray:
    """Uniforms for trajectories ``start .. start + count - 1``, shape (count, block)."""
    k = block_size(horizon)
    bitgen = np.random.Philox(key=int(master_seed) & SEED_MASK)
    bitgen.advance(start * (k // 4))
    return np.random.Generator(bitgen).random(count * k).reshape(count, k)


def _draw(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF categorical draws; ``probs`` is (n, k) row-aligned with ``u``."""
    cdf = np.cumsum(probs, axis=-1)
    idx = (u[:, None] >= cdf).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


@dataclass
class Batch:
    states: np.ndarray  # (n, T + 1)
    null_obs: np.ndarray  # (n,)
    obs: np.ndarray  # (n, T)
    actions: np.ndarray  # (n, T)
    rewards: np.ndarray  # (n, T) alphabet indices


def sample_batch(spec: PomdpSpec, pol: Policy, master_seed: int, start: int, count: int) -> Batch:
    check_compatible(spec, pol)
    T = spec.horizon
    uni = trajectory_uniforms(master_seed, start, count, T)
    n = count
    s = np.empty((n, T + 1), dtype=np.int64)
    y = np.empty((n, T), dtype=np.int64)
    a = np.empty((n, T), dtype=np.int64)
    r = np.empty((n, T), dtype=np.int64)
    s[:, 0] = _draw(np.broadcast_to(spec.init_dist, (n, spec.num_full_states)), uni[:, 0])
    y_null = _draw(spec.obs[s[:, 0]], uni[:, 1])
    for t in range(T):
        base = 2 + 4 * t
        st = s[:, t]
        y[:, t] = _draw(spec.obs[st], uni[:, base])
        rows = pol.table[t][y[:, t]] if pol.kind == "obs_based" else pol.table[t][st]
        a[:, t] = _draw(rows, uni[:, base + 1])
        r[:, t] = _draw(spec.reward_kernel[st, a[:, t]], uni[:, base + 2])
        s[:, t + 1] = _draw(spec.trans[st, a[:, t]], uni[:, base + 3])
    return Batch(s, y_null, y, a, r)


def sample_trajectory(spec: PomdpSpec, pol: Policy, seed: int, index: int = 0) -> Trajectory:
    b = sample_batch(spec, pol, seed, index, 1)
    return Trajectory(
        null_obs=int(b.null_obs[0]),
        states=tuple(int(v) for v in b.states[0, : spec.horizon]),
        obs=tuple(int(v) for v in b.obs[0]),
        actions=tuple(int(v) for v in b.actions[0]),
        rewards=tuple(int(v) for v in b.rewards[0]),
    )


@dataclass
class Dataset:
    """N trajectories as integer arrays; ``states`` is None for observable-only data."""

    null_obs: np.ndarray  # (N,)
    obs: np.ndarray  # (N, T)
    actions: np.ndarray  # (N, T)
    rewards: np.ndarray  # (N, T) alphabet indices
    reward_alphabet: np.ndarray
    num_obs: int
    num_actions: int
    states: np.ndarray | None = None  # (N, T)
    num_full_states: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.obs.shape[0]

    @property
    def horizon(self) -> int:
        return self.obs.shape[1]

    @property
    def has_latent(self) -> bool:
        return self.states is not None

    @property
    def reward_values(self) -> np.ndarray:
        return self.reward_alphabet[self.rewards]

    def observable(self) -> "Dataset":
        return Dataset(
            self.null_obs, self.obs, self.actions, self.rewards, self.reward_alphabet,
            self.num_obs, self.num_actions, None, None, dict(self.meta),
        )

    # -- text encoding -------------------------------------------------

    def dumps(self) -> str:
        meta = dict(self.meta)
        meta.update(
            schema_version=SCHEMA_VERSION,
            N=self.size,
            T=self.horizon,
            num_obs=self.num_obs,
            num_actions=self.num_actions,
            num_full_states=self.num_full_states,
            reward_alphabet=[repr(float(v)) for v in self.reward_alphabet],
            emit_latent=self.has_latent,
        )
        buf = io.StringIO()
        buf.write(f"{DATASET_MAGIC} {json.dumps(meta, sort_keys=True)}\n")
        vals = [repr(float(v)) for v in self.reward_alphabet]
        for i in range(self.size):
            steps = []
            for t in range(self.horizon):
                ri = int(self.rewards[i, t])
                tok = f"{self.obs[i, t]},{self.actions[i, t]},{ri},{vals[ri]}"
                if self.has_latent:
                    tok += f",{self.states[i, t]}"
                steps.append(tok)
            buf.write(f"{self.null_obs[i]}; " + "; ".join(steps) + "\n")
        return buf.getvalue()

    @classmethod
    def loads(cls, text: str) -> "Dataset":
        lines = text.splitlines()
        if not lines or not lines[0].startswith(DATASET_MAGIC):
            raise SpecValidationError("not a dataset file (missing header)")
        meta = json.loads(lines[0][len(DATASET_MAGIC):])
        if meta.get("schema_version") != SCHEMA_VERSION:
            raise SpecValidationError(f"unsupported dataset schema {meta.get('schema_version')}")
        N, T, latent = meta["N"], meta["T"], meta["emit_latent"]
        width = 5 if latent else 4
        rec = np.empty((N, T, width), dtype=np.int64)
        null = np.empty(N, dtype=np.int64)
        for i, line in enumerate(lines[1 : N + 1]):
            parts = [p.strip() for p in line.split(";")]
            null[i] = int(parts[0])
            for t, tok in enumerate(parts[1:]):
                f = tok.split(",")
                rec[i, t] = [int(f[0]), int(f[1]), int(f[2]), 0] + ([int(f[4])] if latent else [])
        alphabet = np.array([float(v) for v in meta.pop("reward_alphabet")])
        num_obs, num_actions = int(meta.pop("num_obs")), int(meta.pop("num_actions"))
        num_full = meta.pop("num_full_states")
        for key in ("N", "T", "emit_latent", "schema_version"):
            meta.pop(key)
        return cls(
            null_obs=null,
            obs=rec[..., 0],
            actions=rec[..., 1],
            rewards=rec[..., 2],
            reward_alphabet=alphabet,
            num_obs=num_obs,
            num_actions=num_actions,
            states=rec[..., 4] if latent else None,
            num_full_states=num_full,
            meta=meta,
        )


def generate_dataset(spec: PomdpSpec, pol: Policy, cfg: SimConfig, fixture: str = "") -> Dataset:
    b = sample_batch(spec, pol, cfg.master_seed, 0, cfg.num_trajectories)
    meta = {
        "fixture": fixture or spec.name,
        "seed": int(cfg.master_seed),
        "policy_hash": pol.digest(),
    }
    return Dataset(
        null_obs=b.null_obs,
        obs=b.obs,
        actions=b.actions,
        rewards=b.rewards,
        reward_alphabet=np.array(spec.reward_alphabet),
        num_obs=spec.num_obs,
        num_actions=spec.num_actions,
        states=b.states[:, : spec.horizon] if cfg.emit_latent else None,
        num_full_states=spec.num_full_states if cfg.emit_latent else None,
        meta=meta,
    )
