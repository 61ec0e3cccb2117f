"""Surrogate model fitting: soft backward recursion, the proximal fixed point,
and the naive and oracle baselines."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import SCHEMA_VERSION, Policy, SpecValidationError, decode_array, encode_array
from .estimate import EstimatedMatrices, estimate_matrices, estimate_phi
from .proximal import WeightChainContext, deconfounded_reward_table
from .simulate import Dataset

VALUE_RULES = ("expectation", "log_partition")


class NotConvergedWarning(UserWarning):
    pass


@dataclass(frozen=True)
class FitConfig:
    max_iters: int = 200
    tol_tv: float = 1e-8
    damping: float = 0.5
    value_rule: str = "expectation"
    alpha: float = 0.5  # smoothing of phi rows
    matrix_alpha: float = 0.0  # smoothing of the proximal chain matrices
    pinv_tolerance: float = 1e-9
    pooled_phi: bool = False
    naive_per_time: bool = False

    def __post_init__(self):
        if self.tol_tv <= 0:
            raise SpecValidationError("tol_tv must be > 0")
        if not 0 <= self.damping < 1:
            raise SpecValidationError("damping must be in [0, 1)")
        if self.value_rule not in VALUE_RULES:
            raise SpecValidationError(f"value_rule must be one of {VALUE_RULES}")
        if self.max_iters < 1:
            raise SpecValidationError("max_iters must be >= 1")
        if self.alpha < 0 or self.matrix_alpha < 0:
            raise SpecValidationError("alpha and matrix_alpha must be >= 0")


@dataclass
class Recursion:
    q: np.ndarray  # (T, X, U)
    v: np.ndarray  # (T + 1, X)
    policy: np.ndarray  # (T, X, U)


def soft_backward_recursion(phi, rho, horizon: int, value_rule: str = "expectation") -> Recursion:
    """Finite-horizon soft Bellman recursion with a softmax policy in Q.

    ``phi[t, x, u, x']`` and ``rho[t, x, u]``; ``V_T = 0``.
    """
    phi = np.asarray(phi, dtype=float)
    rho = np.asarray(rho, dtype=float)
    if not np.all(np.isfinite(rho)):
        raise SpecValidationError("rho has non-finite entries")
    if value_rule not in VALUE_RULES:
        raise SpecValidationError(f"value_rule must be one of {VALUE_RULES}")
    T = int(horizon)
    X, U = rho.shape[1], rho.shape[2]
    q = np.empty((T, X, U))
    v = np.zeros((T + 1, X))
    pi = np.empty((T, X, U))
    for t in range(T - 1, -1, -1):
        q[t] = rho[t] + phi[t] @ v[t + 1]
        m = q[t].max(axis=1, keepdims=True)
        e = np.exp(q[t] - m)
        z = e.sum(axis=1, keepdims=True)
        pi[t] = e / z
        if value_rule == "expectation":
            v[t] = (pi[t] * q[t]).sum(axis=1)
        else:
            v[t] = m[:, 0] + np.log(z[:, 0])
    return Recursion(q, v, pi)


@dataclass
class SurrogateModel:
    kind: str  # surrogate | naive | oracle
    space: str  # obs | full
    phi: np.ndarray
    rho: np.ndarray
    q: np.ndarray
    v: np.ndarray
    policy: Policy
    value_rule: str = "expectation"
    converged: bool = True
    iterations: int = 0
    fit_log: list = field(default_factory=list)
    flags: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return self.rho.shape[0]

    def bellman_residual(self) -> float:
        T = self.horizon
        pred = self.rho + np.einsum("txua,ta->txu", self.phi[:T], self.v[1 : T + 1])
        return float(np.abs(self.q - pred).max())

    def value_residual(self) -> float:
        pi = self.policy.table
        if self.value_rule == "expectation":
            target = (pi * self.q).sum(axis=-1)
        else:
            m = self.q.max(axis=-1)
            target = m + np.log(np.exp(self.q - m[..., None]).sum(axis=-1))
        return float(np.abs(self.v[: self.horizon] - target).max())

    def softmax_residual(self) -> float:
        """Max deviation of log pi(u|x) - log pi(u0|x) from Q(x,u) - Q(x,u0)."""
        lp = np.log(self.policy.table)
        d_pol = lp - lp[..., :1]
        d_q = self.q - self.q[..., :1]
        return float(np.abs(d_pol - d_q).max())

    # -- serialization -------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": self.kind,
            "space": self.space,
            "value_rule": self.value_rule,
            "converged": self.converged,
            "iterations": self.iterations,
            "phi": encode_array(self.phi),
            "rho": encode_array(self.rho),
            "q": encode_array(self.q),
            "v": encode_array(self.v),
            "policy": self.policy.to_dict(),
            "fit_log": self.fit_log,
            "flags": {k: encode_array(v) for k, v in sorted(self.flags.items())},
            "meta": self.meta,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "SurrogateModel":
        d = json.loads(text)
        if d.get("schema_version") != SCHEMA_VERSION:
            raise SpecValidationError(f"unsupported model schema {d.get('schema_version')}")
        return cls(
            kind=d["kind"],
            space=d["space"],
            phi=decode_array(d["phi"]),
            rho=decode_array(d["rho"]),
            q=decode_array(d["q"]),
            v=decode_array(d["v"]),
            policy=Policy.from_dict(d["policy"]),
            value_rule=d["value_rule"],
            converged=d["converged"],
            iterations=d["iterations"],
            fit_log=d["fit_log"],
            flags={k: decode_array(v) for k, v in d["flags"].items()},
            meta=d["meta"],
        )


def _max_tv(a: np.ndarray, b: np.ndarray) -> float:
    return float(0.5 * np.abs(a - b).sum(axis=-1).max())


def fit_surrogate_from(em: EstimatedMatrices, phi: np.ndarray, cfg: FitConfig) -> SurrogateModel:
    """Damped fixed point between the softmax policy and the identified reward table.

    Starting from the uniform policy, each iteration identifies rho under the
    current policy, runs the soft recursion, and moves toward its softmax
    policy. The first step is undamped (the uniform start carries no
    information); later steps mix in ``damping`` of the previous iterate.
    The loop stops once the policy step falls below ``tol_tv``.
    """
    T, X, U = em.horizon, em.num_obs, em.num_actions
    theta = np.full((T, X, U), 1.0 / U)
    ctx = WeightChainContext(em, Policy("obs_based", theta), cfg.pinv_tolerance)
    log = []
    converged = False
    moves = 0
    for i in range(cfg.max_iters):
        ctx = ctx.with_policy(Policy("obs_based", theta))
        table = deconfounded_reward_table(ctx)
        rec = soft_backward_recursion(phi, table.rho, T, cfg.value_rule)
        step = 1.0 if i == 0 else 1.0 - cfg.damping
        new = step * rec.policy + (1.0 - step) * theta
        tv = _max_tv(new, theta)
        log.append(
            {
                "iter": i + 1,
                "tv": tv,
                "flagged_cells": int(table.flags.sum()),
                "clipped_mass": float(table.mass_defect.max()),
            }
        )
        if tv < cfg.tol_tv:
            converged = True
            break
        theta = new
        moves = i + 1
    model = SurrogateModel(
        kind="surrogate",
        space="obs",
        phi=np.asarray(phi),
        rho=table.rho,
        q=rec.q,
        v=rec.v,
        policy=Policy("obs_based", rec.policy),
        value_rule=cfg.value_rule,
        converged=converged,
        iterations=moves,
        fit_log=log,
        flags={"rho_fallback": table.flags.astype(float)},
    )
    return model


def fit_surrogate(ds: Dataset, cfg: FitConfig = FitConfig()) -> SurrogateModel:
    if ds.size == 0:
        raise ValueError("empty dataset")
    phi = estimate_phi(ds, cfg.alpha, pooled=cfg.pooled_phi)
    em = estimate_matrices(ds, cfg.matrix_alpha)
    model = fit_surrogate_from(em, phi.phi, cfg)
    model.flags["phi_unvisited"] = phi.unvisited.astype(float)
    model.meta.update(ds.meta)
    return model


def naive_reward(ds: Dataset, per_time: bool = False):
    """Empirical E[r | x, u]; empty cells take the global mean and are flagged."""
    T, X, U = ds.horizon, ds.num_obs, ds.num_actions
    vals = ds.reward_values
    tt = np.broadcast_to(np.arange(T), ds.obs.shape)
    s = np.zeros((T, X, U))
    n = np.zeros((T, X, U))
    np.add.at(s, (tt, ds.obs, ds.actions), vals)
    np.add.at(n, (tt, ds.obs, ds.actions), 1)
    if not per_time:
        s = np.broadcast_to(s.sum(axis=0), s.shape)
        n = np.broadcast_to(n.sum(axis=0), n.shape)
    glob = vals.mean()
    empty = n == 0
    return np.where(empty, glob, s / np.where(empty, 1, n)), empty, n


def fit_naive(ds: Dataset, cfg: FitConfig = FitConfig()) -> SurrogateModel:
    if ds.size == 0:
        raise ValueError("empty dataset")
    rho, empty, _ = naive_reward(ds, cfg.naive_per_time)
    phi = estimate_phi(ds, cfg.alpha, pooled=cfg.pooled_phi)
    rec = soft_backward_recursion(phi.phi, rho, ds.horizon, cfg.value_rule)
    return SurrogateModel(
        kind="naive",
        space="obs",
        phi=phi.phi,
        rho=rho,
        q=rec.q,
        v=rec.v,
        policy=Policy("obs_based", rec.policy),
        value_rule=cfg.value_rule,
        flags={"rho_fallback": empty.astype(float), "phi_unvisited": phi.unvisited.astype(float)},
        meta=dict(ds.meta),
    )


def fit_oracle(ds: Dataset, cfg: FitConfig = FitConfig()) -> SurrogateModel:
    """Full-state model from data that keeps the latent state column."""
    if not ds.has_latent:
        raise SpecValidationError("oracle fit needs a dataset with latent state columns")
    T, U, S = ds.horizon, ds.num_actions, int(ds.num_full_states)
    s, a = ds.states, ds.actions
    c = np.zeros((S, U, S))
    if T > 1:
        np.add.at(c, (s[:, :-1], a[:, :-1], s[:, 1:]), 1)
    tot = c.sum(axis=-1, keepdims=True)
    den = tot + cfg.alpha * S
    trans = np.where(den > 0, (c + cfg.alpha) / np.where(den > 0, den, 1), 1.0 / S)
    rs = np.zeros((S, U))
    rn = np.zeros((S, U))
    np.add.at(rs, (s, a), ds.reward_values)
    np.add.at(rn, (s, a), 1)
    empty = rn == 0
    rew = np.where(empty, ds.reward_values.mean(), rs / np.where(empty, 1, rn))
    phi = np.broadcast_to(trans, (T, S, U, S)).copy()
    rho = np.broadcast_to(rew, (T, S, U)).copy()
    rec = soft_backward_recursion(phi, rho, T, cfg.value_rule)
    return SurrogateModel(
        kind="oracle",
        space="full",
        phi=phi,
        rho=rho,
        q=rec.q,
        v=rec.v,
        policy=Policy("state_based", rec.policy),
        value_rule=cfg.value_rule,
        flags={"rho_fallback": np.broadcast_to(empty, (T, S, U)).astype(float),
               "trans_unvisited": (tot[..., 0] == 0).astype(float)},
        meta=dict(ds.meta),
    )


def action_nll(ds: Dataset, policy: Policy) -> float:
    """Mean over trajectories of the summed negative log action probabilities."""
    if policy.kind != "obs_based":
        raise SpecValidationError("action_nll needs an obs_based policy")
    if policy.horizon < ds.horizon:
        raise SpecValidationError("policy horizon shorter than dataset")
    tt = np.broadcast_to(np.arange(ds.horizon), ds.obs.shape)
    p = policy.table[tt, ds.obs, ds.actions]
    if np.any(p <= 0):
        return float("inf")
    return float(-np.log(p).sum(axis=1).mean())
