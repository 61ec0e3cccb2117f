"""Domain types and exact population-level computations.

Full states of a contextual MDP are flattened as ``s = x * num_contexts + z``.
Every array follows the convention "conditioning indices first, distributed
index last", e.g. ``trans[s, u, s']`` and ``obs[s, y]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

PROB_ATOL = 1e-12
REWARD_MERGE_TOL = 1e-9
SCHEMA_VERSION = 1


class SpecValidationError(ValueError):
    """Raised when a model or policy violates a structural invariant."""

    def __init__(self, message: str, violations: Sequence[str] = ()):
        self.violations = list(violations)
        if self.violations:
            message = message + ": " + "; ".join(self.violations[:10])
        super().__init__(message)


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _bad_rows(table: np.ndarray, atol: float = PROB_ATOL) -> list[tuple[int, ...]]:
    """Indices of the leading axes whose last-axis row is not a distribution."""
    sums = table.sum(axis=-1)
    bad = (np.abs(sums - 1.0) > atol) | (table < 0).any(axis=-1) | ~np.isfinite(sums)
    return [tuple(int(i) for i in idx) for idx in np.argwhere(bad)]


@dataclass(frozen=True)
class PomdpSpec:
    num_obs: int
    num_contexts: int
    num_full_states: int
    num_actions: int
    horizon: int
    init_dist: np.ndarray  # (S,)
    trans: np.ndarray  # (S, U, S)
    obs: np.ndarray  # (S, Y)
    reward_alphabet: np.ndarray  # (R,)
    reward_kernel: np.ndarray  # (S, U, R)
    name: str = ""

    def __post_init__(self):
        for name, dtype in (
            ("init_dist", float),
            ("trans", float),
            ("obs", float),
            ("reward_alphabet", float),
            ("reward_kernel", float),
        ):
            object.__setattr__(self, name, _frozen(getattr(self, name), dtype))

    @property
    def num_rewards(self) -> int:
        return len(self.reward_alphabet)

    @property
    def is_factored(self) -> bool:
        """True when states are (x, z) pairs observed through y = x."""
        S, Y, Z = self.num_full_states, self.num_obs, self.num_contexts
        if S != Y * Z:
            return False
        proj = np.zeros((S, Y))
        proj[np.arange(S), np.arange(S) // Z] = 1.0
        return bool(np.array_equal(self.obs, proj))

    def expected_reward(self) -> np.ndarray:
        """E[r | s, u] as an (S, U) table."""
        return self.reward_kernel @ self.reward_alphabet

    def obs_marginal(self, dist_s: np.ndarray) -> np.ndarray:
        return np.asarray(dist_s) @ self.obs

    # -- serialization -------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "pomdp_spec",
            "name": self.name,
            "num_obs": self.num_obs,
            "num_contexts": self.num_contexts,
            "num_full_states": self.num_full_states,
            "num_actions": self.num_actions,
            "horizon": self.horizon,
            "init_dist": encode_array(self.init_dist),
            "trans": encode_array(self.trans),
            "obs": encode_array(self.obs),
            "reward_alphabet": encode_array(self.reward_alphabet),
            "reward_kernel": encode_array(self.reward_kernel),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PomdpSpec":
        return cls(
            num_obs=int(d["num_obs"]),
            num_contexts=int(d["num_contexts"]),
            num_full_states=int(d["num_full_states"]),
            num_actions=int(d["num_actions"]),
            horizon=int(d["horizon"]),
            init_dist=decode_array(d["init_dist"]),
            trans=decode_array(d["trans"]),
            obs=decode_array(d["obs"]),
            reward_alphabet=decode_array(d["reward_alphabet"]),
            reward_kernel=decode_array(d["reward_kernel"]),
            name=d.get("name", ""),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "PomdpSpec":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class Policy:
    """Time-indexed tabular action distributions.

    ``table[t, c, u]`` where ``c`` is an observation (``obs_based``) or a full
    state (``state_based``).
    """

    kind: str
    table: np.ndarray

    def __post_init__(self):
        if self.kind not in ("obs_based", "state_based"):
            raise SpecValidationError(f"unknown policy kind {self.kind!r}")
        object.__setattr__(self, "table", _frozen(self.table))
        if self.table.ndim != 3:
            raise SpecValidationError("policy table must have shape (T, C, U)")
        bad = _bad_rows(self.table)
        if bad:
            raise SpecValidationError(
                "policy rows are not distributions", [f"(t,c)={b}" for b in bad]
            )

    @property
    def horizon(self) -> int:
        return self.table.shape[0]

    @property
    def num_actions(self) -> int:
        return self.table.shape[2]

    @classmethod
    def uniform(cls, horizon: int, num_cond: int, num_actions: int, kind="obs_based"):
        return cls(kind, np.full((horizon, num_cond, num_actions), 1.0 / num_actions))

    @classmethod
    def stationary(cls, kind: str, rows: np.ndarray, horizon: int) -> "Policy":
        rows = np.asarray(rows, dtype=float)
        return cls(kind, np.broadcast_to(rows, (horizon,) + rows.shape))

    def state_table(self, spec: PomdpSpec) -> np.ndarray:
        """Action probabilities per full state, (T, S, U)."""
        check_compatible(spec, self)
        if self.kind == "state_based":
            return np.asarray(self.table)
        return np.einsum("sy,tyu->tsu", spec.obs, self.table)

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256(self.kind.encode())
        h.update(np.ascontiguousarray(self.table).tobytes())
        return h.hexdigest()[:16]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "table": encode_array(self.table)}

    @classmethod
    def from_dict(cls, d: dict) -> "Policy":
        return cls(d["kind"], decode_array(d["table"]))


@dataclass(frozen=True)
class Trajectory:
    null_obs: int
    states: tuple[int, ...]
    obs: tuple[int, ...]
    actions: tuple[int, ...]
    rewards: tuple[int, ...]

    def observable(self) -> "ObservableTrajectory":
        return ObservableTrajectory(self.null_obs, self.obs, self.actions, self.rewards)


@dataclass(frozen=True)
class ObservableTrajectory:
    null_obs: int
    obs: tuple[int, ...]
    actions: tuple[int, ...]
    rewards: tuple[int, ...]


# -- encoding helpers -------------------------------------------------------


def encode_array(a) -> dict:
    """Exact text encoding: shape plus ``repr`` of every float."""
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": [repr(float(v)) for v in a.ravel()]}


def decode_array(d) -> np.ndarray:
    if isinstance(d, dict):
        return np.array([float(v) for v in d["data"]], dtype=float).reshape(d["shape"])
    return np.asarray(d, dtype=float)


# -- construction and validation -------------------------------------------


def build_reward_alphabet(values, tol: float = REWARD_MERGE_TOL) -> np.ndarray:
    """Sorted distinct values; neighbours closer than ``tol`` are merged."""
    vals = np.sort(np.asarray(values, dtype=float).ravel())
    if vals.size == 0:
        raise SpecValidationError("reward table is empty")
    out = [vals[0]]
    for v in vals[1:]:
        if v - out[-1] >= tol:
            out.append(v)
    return np.array(out)


def build_cmdp(px, pz, reward, eta, nu, horizon: int, name: str = "") -> PomdpSpec:
    """Flatten a contextual MDP into a POMDP over s = (x, z).

    px[x, z, u, x'], pz[x, z, u, z'], reward[x, z, u]; the observation is the
    deterministic projection s -> x.
    """
    px = np.asarray(px, dtype=float)
    pz = np.asarray(pz, dtype=float)
    reward = np.asarray(reward, dtype=float)
    eta = np.asarray(eta, dtype=float)
    nu = np.asarray(nu, dtype=float)
    if px.ndim != 4 or pz.ndim != 4 or reward.ndim != 3:
        raise SpecValidationError("px, pz must be 4-d and reward 3-d")
    X, Z, U, _ = px.shape
    if px.shape != (X, Z, U, X) or pz.shape != (X, Z, U, Z) or reward.shape != (X, Z, U):
        raise SpecValidationError(
            f"inconsistent shapes px={px.shape} pz={pz.shape} reward={reward.shape}"
        )
    if eta.shape != (X,) or nu.shape != (Z,):
        raise SpecValidationError("eta/nu shapes do not match px")
    if not np.all(np.isfinite(reward)):
        raise ValueError("reward values must be finite")
    if int(horizon) < 1:
        raise SpecValidationError("horizon must be >= 1")

    violations = []
    for name_, k in (("px", px), ("pz", pz)):
        for x, z, u in _bad_rows(k):
            violations.append(f"{name_} row (s={x * Z + z},u={u}) [x={x},z={z}]")
    for name_, v in (("eta", eta), ("nu", nu)):
        if _bad_rows(v[None, :]):
            violations.append(f"{name_} is not a distribution")
    if violations:
        raise SpecValidationError("non-stochastic kernel rows", violations)

    S = X * Z
    trans = np.einsum("xzua,xzub->xzuab", px, pz).reshape(S, U, S)
    obs = np.zeros((S, X))
    obs[np.arange(S), np.arange(S) // Z] = 1.0
    alphabet = build_reward_alphabet(reward)
    ridx = np.abs(reward.reshape(S, U)[..., None] - alphabet).argmin(axis=-1)
    rk = np.zeros((S, U, len(alphabet)))
    np.put_along_axis(rk, ridx[..., None], 1.0, axis=-1)
    spec = PomdpSpec(
        num_obs=X,
        num_contexts=Z,
        num_full_states=S,
        num_actions=U,
        horizon=int(horizon),
        init_dist=np.outer(eta, nu).ravel(),
        trans=trans,
        obs=obs,
        reward_alphabet=alphabet,
        reward_kernel=rk,
        name=name,
    )
    return spec


def validate(spec: PomdpSpec) -> list[str]:
    """List every violated invariant; empty iff the spec is valid."""
    out = []
    S, U, Y = spec.num_full_states, spec.num_actions, spec.num_obs
    R = len(spec.reward_alphabet)
    shapes = {
        "init_dist": (S,),
        "trans": (S, U, S),
        "obs": (S, Y),
        "reward_kernel": (S, U, R),
    }
    for name, shape in shapes.items():
        got = getattr(spec, name).shape
        if got != shape:
            out.append(f"{name} has shape {got}, expected {shape}")
    if out:
        return out
    if spec.horizon < 1:
        out.append("horizon must be >= 1")
    if _bad_rows(spec.init_dist[None, :]):
        out.append("init_dist is not a distribution")
    out += [f"trans row (s={s},u={u}) is not a distribution" for s, u in _bad_rows(spec.trans)]
    out += [f"obs row (s={s},) is not a distribution" for (s,) in _bad_rows(spec.obs)]
    out += [
        f"reward_kernel row (s={s},u={u}) is not a distribution"
        for s, u in _bad_rows(spec.reward_kernel)
    ]
    diffs = np.diff(spec.reward_alphabet)
    bad = np.flatnonzero(diffs <= 0)
    if bad.size:
        out.append(f"reward_alphabet not strictly increasing (first at index {bad[0] + 1})")
    if not np.all(np.isfinite(spec.reward_alphabet)):
        out.append("reward_alphabet has non-finite entries")
    return out


def check_compatible(spec: PomdpSpec, pol: Policy) -> None:
    T, C, U = pol.table.shape
    want_c = spec.num_obs if pol.kind == "obs_based" else spec.num_full_states
    if C != want_c or U != spec.num_actions or T < spec.horizon:
        raise SpecValidationError(
            f"policy shape {pol.table.shape} ({pol.kind}) incompatible with "
            f"spec (T={spec.horizon}, C={want_c}, U={spec.num_actions})"
        )


# -- exact population computations ------------------------------------------


def exact_occupancy(spec: PomdpSpec, pol: Policy) -> np.ndarray:
    """Full-state marginals d_0..d_T under ``pol``, shape (T + 1, S)."""
    pi = pol.state_table(spec)
    T = spec.horizon
    d = np.empty((T + 1, spec.num_full_states))
    d[0] = spec.init_dist
    for t in range(T):
        d[t + 1] = np.einsum("s,su,sun->n", d[t], pi[t], spec.trans)
    return d


@dataclass(frozen=True)
class MarginalizedTransition:
    """Context-averaged transition model phi_t(x'|x,u) under a behavioral policy."""

    phi: np.ndarray  # (T, X, U, X)
    weights: np.ndarray  # (T, X, U) visitation probability p_t(x, u)
    unvisited: np.ndarray  # (T, X, U) bool

    def averaged(self, last: int | None = None) -> np.ndarray:
        """Visitation-weighted mean of phi_0..phi_{last}, shape (X, U, X)."""
        last = self.phi.shape[0] - 1 if last is None else last
        w = self.weights[: last + 1]
        num = np.einsum("txu,txua->xua", w, self.phi[: last + 1])
        den = w.sum(axis=0)
        X = self.phi.shape[-1]
        out = np.full(num.shape, 1.0 / X)
        ok = den > 0
        out[ok] = num[ok] / den[ok][:, None]
        return out


def exact_marginalized_transition(spec: PomdpSpec, behavioral: Policy) -> MarginalizedTransition:
    if not spec.is_factored:
        raise SpecValidationError("marginalized transition requires a factored (x, z) spec")
    if behavioral.kind != "state_based":
        raise SpecValidationError("behavioral policy must be state_based")
    X, Z, U, T = spec.num_obs, spec.num_contexts, spec.num_actions, spec.horizon
    d = exact_occupancy(spec, behavioral)[:T].reshape(T, X, Z)
    g = behavioral.state_table(spec)[:T].reshape(T, X, Z, U)
    px = spec.trans.reshape(X, Z, U, X, Z).sum(axis=-1)  # p(x'|x,z,u)
    joint = d[..., None] * g  # p_t(x, z, u)
    weights = joint.sum(axis=2)
    unvisited = weights <= 0
    num = np.einsum("txzu,xzua->txua", joint, px)
    phi = np.full(num.shape, 1.0 / X)
    ok = ~unvisited
    phi[ok] = num[ok] / weights[ok][:, None]
    phi[ok] /= phi[ok].sum(axis=-1, keepdims=True)
    return MarginalizedTransition(_frozen(phi), _frozen(weights), _frozen(unvisited, bool))


def behavioral_obs_marginal(spec: PomdpSpec, pol: Policy) -> Policy:
    """Observation-based policy equal to pol's action law given y_t under its own occupancy."""
    if pol.kind == "obs_based":
        return pol
    T = spec.horizon
    d = exact_occupancy(spec, pol)[:T]
    pi = pol.state_table(spec)[:T]
    num = np.einsum("ts,sy,tsu->tyu", d, spec.obs, pi)
    den = num.sum(axis=-1, keepdims=True)
    U = spec.num_actions
    table = np.where(den > 0, num / np.where(den > 0, den, 1.0), 1.0 / U)
    return Policy("obs_based", table)
