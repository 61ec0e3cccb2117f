"""Behavioral conditional-probability matrices from observation-only data.

Matrix orientation: rows index the newer variable, columns the conditioning
one. ``y_prev`` at time 0 is the null observation, and at k = 1 the
two-steps-back index of the joint matrix is the null observation as well.

Array layouts (T = horizon, U actions, Y observations, R reward symbols):

``m_obs[t, u, y_t, y_prev]``
    p(y_t | y_{t-1}, u_t)
``m_joint[k, u_prev, y_prev, y_k, y_prev2]``
    p(y_k, y_{k-1} | y_{k-2}, u_{k-1}); slice k = 0 is unused and zero
``m_reward[t, u, r, y_t, y_prev]``
    p(r_t, y_t | y_{t-1}, u_t)
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

from .core import SCHEMA_VERSION
from .simulate import Dataset

POPULATION = -1  # count sentinel for exact matrices
RANK_RTOL = 1e-9
MATRICES_MAGIC = "# proxmbrl-matrices"


@dataclass(frozen=True)
class EstimatedMatrices:
    m_obs: np.ndarray
    m_joint: np.ndarray
    m_reward: np.ndarray
    p_y0: np.ndarray
    naive_reward: np.ndarray  # (T, Y, U) behavioral E[r | y_t, u_t]
    reward_values: np.ndarray
    smoothing_alpha: float = 0.0
    counts: dict = field(default_factory=dict)
    untrusted: dict = field(default_factory=dict)
    latent: dict = field(default_factory=dict)
    pooled: bool = False

    @property
    def horizon(self) -> int:
        return self.m_obs.shape[0]

    @property
    def num_obs(self) -> int:
        return self.m_obs.shape[2]

    @property
    def num_actions(self) -> int:
        return self.m_obs.shape[1]

    @property
    def is_population(self) -> bool:
        return self.counts.get("N") == POPULATION

    def dumps(self, header: dict | None = None) -> str:
        """Delimited text dump, one block per matrix slice; ``loads`` reads it back."""
        meta = dict(header or {})
        meta.update(
            schema_version=SCHEMA_VERSION,
            alpha=repr(float(self.smoothing_alpha)),
            pooled=self.pooled,
            T=self.horizon,
            Y=self.num_obs,
            U=self.num_actions,
            R=len(self.reward_values),
        )
        buf = io.StringIO()
        buf.write(f"{MATRICES_MAGIC} {json.dumps(meta, sort_keys=True)}\n")

        def block(header, mat):
            buf.write(f"## {header}\n")
            for row in np.atleast_2d(mat):
                buf.write(",".join(repr(float(v)) for v in row) + "\n")

        block("kind=reward_values", self.reward_values[None, :])
        block("kind=p_y0", self.p_y0[None, :])
        T, U = self.horizon, self.num_actions
        for t in range(T):
            block(f"kind=naive_reward t={t}", self.naive_reward[t])
        for t in range(T):
            for u in range(U):
                block(f"kind=m_obs t={t} u={u}", self.m_obs[t, u])
        for k in range(1, T):
            for u in range(U):
                for y in range(self.num_obs):
                    block(f"kind=m_joint k={k} u={u} y={y}", self.m_joint[k, u, y])
        for t in range(T):
            for u in range(U):
                for r in range(len(self.reward_values)):
                    block(f"kind=m_reward t={t} u={u} r={r}", self.m_reward[t, u, r])
        return buf.getvalue()

    @classmethod
    def loads(cls, text: str) -> "EstimatedMatrices":
        """Inverse of ``dumps``; counts and latent blocks are not carried."""
        lines = text.splitlines()
        if not lines or not lines[0].startswith(MATRICES_MAGIC):
            raise ValueError("not a matrices file (missing header)")
        meta = json.loads(lines[0][len(MATRICES_MAGIC):])
        if meta.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported matrices schema {meta.get('schema_version')}")
        blocks = {}
        key = None
        for line in lines[1:]:
            if line.startswith("## "):
                key = line[3:]
                blocks[key] = []
            elif line:
                blocks[key].append([float(v) for v in line.split(",")])
        T, Y, U, R = meta["T"], meta["Y"], meta["U"], meta["R"]

        def get(k):
            return np.array(blocks[k])

        m_joint = np.zeros((T, U, Y, Y, Y))
        for k in range(1, T):
            for u in range(U):
                for y in range(Y):
                    m_joint[k, u, y] = get(f"kind=m_joint k={k} u={u} y={y}")
        return cls(
            m_obs=np.array([[get(f"kind=m_obs t={t} u={u}") for u in range(U)] for t in range(T)]),
            m_joint=m_joint,
            m_reward=np.array(
                [[[get(f"kind=m_reward t={t} u={u} r={r}") for r in range(R)] for u in range(U)] for t in range(T)]
            ),
            p_y0=get("kind=p_y0")[0],
            naive_reward=np.array([get(f"kind=naive_reward t={t}") for t in range(T)]),
            reward_values=get("kind=reward_values")[0],
            smoothing_alpha=float(meta["alpha"]),
            pooled=bool(meta["pooled"]),
        )


def _normalize(counts: np.ndarray, axes: tuple[int, ...], alpha: float):
    """(count + alpha) / (total + alpha * cells) per conditioning column.

    Returns the estimate and a boolean mask of untrusted (empty) columns,
    which are filled uniformly.
    """
    total = counts.sum(axis=axes, keepdims=True)
    cells = int(np.prod([counts.shape[a] for a in axes]))
    num = counts + alpha
    den = total + alpha * cells
    empty = den <= 0
    est = np.where(empty, 1.0 / cells, num / np.where(empty, 1.0, den))
    untrusted = (total == 0).squeeze(axis=axes)
    return est, untrusted


def count_tensors(ds: Dataset, num_rewards: int | None = None) -> dict:
    """Raw count tensors; partial counts from data shards can be summed."""
    if ds.size == 0:
        raise ValueError("empty dataset")
    T, Y, U = ds.horizon, ds.num_obs, ds.num_actions
    R = len(ds.reward_alphabet) if num_rewards is None else num_rewards
    y, u, r, yn = ds.obs, ds.actions, ds.rewards, ds.null_obs
    prev = np.concatenate([yn[:, None], y[:, :-1]], axis=1)  # y_{t-1}, with y_N at t=0
    prev2 = np.concatenate([yn[:, None], y[:, :-2]], axis=1) if T > 1 else None
    tt = np.broadcast_to(np.arange(T), y.shape)

    c_obs = np.zeros((T, U, Y, Y), dtype=np.int64)
    np.add.at(c_obs, (tt, u, y, prev), 1)
    c_reward = np.zeros((T, U, R, Y, Y), dtype=np.int64)
    np.add.at(c_reward, (tt, u, r, y, prev), 1)
    c_joint = np.zeros((T, U, Y, Y, Y), dtype=np.int64)
    if T > 1:
        kk = tt[:, 1:]
        np.add.at(c_joint, (kk, u[:, :-1], y[:, :-1], y[:, 1:], prev2), 1)
    c_y0 = np.bincount(y[:, 0], minlength=Y).astype(np.int64)
    return {"N": ds.size, "obs": c_obs, "joint": c_joint, "reward": c_reward, "y0": c_y0}


def merge_counts(a: dict, b: dict) -> dict:
    return {k: a[k] + b[k] for k in a}


def _pool(c: np.ndarray, first: int) -> np.ndarray:
    """Sum counts over time slices >= first and broadcast back to those slices."""
    out = c.copy()
    if c.shape[0] > first:
        out[first:] = c[first:].sum(axis=0, keepdims=True)
    return out


def estimate_matrices(ds: Dataset, alpha: float = 0.5, pooled: bool = False) -> EstimatedMatrices:
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    counts = count_tensors(ds)
    c_obs, c_joint, c_reward = counts["obs"], counts["joint"], counts["reward"]
    if pooled:
        c_obs, c_reward, c_joint = _pool(c_obs, 1), _pool(c_reward, 1), _pool(c_joint, 2)

    m_obs, bad_obs = _normalize(c_obs.astype(float), (2,), alpha)
    m_joint, bad_joint = _normalize(c_joint.astype(float), (2, 3), alpha)
    m_joint[0] = 0.0
    bad_joint[0] = False
    m_reward, bad_reward = _normalize(c_reward.astype(float), (2, 3), alpha)
    Y = ds.num_obs
    p_y0 = (counts["y0"] + alpha) / (ds.size + alpha * Y)

    vals = np.asarray(ds.reward_alphabet, dtype=float)
    naive, bad_naive = naive_reward_from_counts(c_reward.sum(axis=-1), vals)
    return EstimatedMatrices(
        m_obs=m_obs,
        m_joint=m_joint,
        m_reward=m_reward,
        p_y0=p_y0,
        naive_reward=naive,
        reward_values=vals,
        smoothing_alpha=float(alpha),
        counts=counts,
        untrusted={"m_obs": bad_obs, "m_joint": bad_joint, "m_reward": bad_reward, "naive_reward": bad_naive},
        pooled=pooled,
    )


def naive_reward_from_counts(c: np.ndarray, values: np.ndarray):
    """Per-time E[r | y, u] from counts indexed (t, u, r, y); empty cells get the global mean."""
    tot = c.sum(axis=2)  # (T, U, Y)
    s = np.einsum("tury,r->tuy", c, values)
    glob = s.sum() / max(tot.sum(), 1)
    mean = np.where(tot > 0, s / np.where(tot > 0, tot, 1), glob)
    return mean.transpose(0, 2, 1), (tot == 0).transpose(0, 2, 1)


@dataclass(frozen=True)
class PhiEstimate:
    """Empirical phi_t(x'|x,u); slice T-1 (no observed successor) holds the pooled estimate."""

    phi: np.ndarray  # (T, X, U, X)
    counts: np.ndarray  # (T, X, U, X), slice T-1 zero
    unvisited: np.ndarray  # (T, X, U)
    pooled: bool = False

    def pooled_phi(self) -> np.ndarray:
        return self.phi[-1]


def estimate_phi(ds: Dataset, alpha: float = 0.5, pooled: bool = False) -> PhiEstimate:
    if ds.size == 0:
        raise ValueError("empty dataset")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    T, X, U = ds.horizon, ds.num_obs, ds.num_actions
    c = np.zeros((T, X, U, X), dtype=np.int64)
    if T > 1:
        tt = np.broadcast_to(np.arange(T - 1), (ds.size, T - 1))
        np.add.at(c, (tt, ds.obs[:, :-1], ds.actions[:, :-1], ds.obs[:, 1:]), 1)
    pooled_c = c[: max(T - 1, 1)].sum(axis=0)
    work = c.astype(float)
    work[T - 1] = pooled_c
    if pooled:
        work[:] = pooled_c
    phi, unvisited = _normalize(work, (3,), alpha)
    return PhiEstimate(phi, c, unvisited, pooled)


# -- invertibility diagnostics ---------------------------------------------


@dataclass(frozen=True)
class MatrixDiagnostic:
    kind: str
    t: int
    u: int
    shape: tuple[int, int]
    rank: int
    cond: float
    status: str  # ok | warn | fail
    note: str = ""


@dataclass(frozen=True)
class InvertibilityReport:
    rows: list
    verdict: str

    @property
    def warnings(self) -> list:
        return [r for r in self.rows if r.status != "ok"]

    def to_csv(self) -> str:
        lines = ["kind,t,u,rows,cols,rank,cond,status,note"]
        for r in self.rows:
            lines.append(
                f"{r.kind},{r.t},{r.u},{r.shape[0]},{r.shape[1]},{r.rank},{r.cond:.12g},{r.status},{r.note}"
            )
        return "\n".join(lines) + "\n"


def diagnose_matrix(mat, kind="matrix", t=0, u=0, warn_cond=1e8, fail_cond=1e12) -> MatrixDiagnostic:
    mat = np.asarray(mat, dtype=float)
    sv = np.linalg.svd(mat, compute_uv=False)
    smax = sv[0] if sv.size else 0.0
    rank = int((sv > RANK_RTOL * smax).sum()) if smax > 0 else 0
    cond = float(smax / sv[-1]) if sv.size and sv[-1] > 0 else float("inf")
    note = ""
    if mat.shape[0] != mat.shape[1]:
        status, note = "fail", "non-square"
    elif rank < mat.shape[0] or cond >= fail_cond:
        status = "fail"
    elif cond >= warn_cond:
        status = "warn"
    else:
        status = "ok"
    return MatrixDiagnostic(kind, t, u, mat.shape, rank, cond, status, note)


def invertibility_report(em: EstimatedMatrices, warn_cond: float = 1e8, fail_cond: float = 1e12) -> InvertibilityReport:
    """Rank and conditioning of every matrix that identification inverts.

    Population matrices may also carry the latent-state matrices
    p(s_t | y_{t-1}, u_t); those are reported with kind ``latent_state``.
    """
    rows = []
    for t in range(em.horizon):
        for u in range(em.num_actions):
            rows.append(diagnose_matrix(em.m_obs[t, u], "m_obs", t, u, warn_cond, fail_cond))
    latent = em.latent.get("state_given_prev")
    if latent is not None:
        for t in range(latent.shape[0]):
            for u in range(latent.shape[1]):
                rows.append(diagnose_matrix(latent[t, u], "latent_state", t, u, warn_cond, fail_cond))
    statuses = {r.status for r in rows}
    verdict = "fail" if "fail" in statuses else "warn" if "warn" in statuses else "ok"
    return InvertibilityReport(rows, verdict)
