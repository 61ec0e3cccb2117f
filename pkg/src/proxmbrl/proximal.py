"""Proximal identification of the reward law under an observation-based policy.

The reward distribution at time t under an evaluation policy pi is

    p(r_t) = sum over observable prefixes (y_0..y_t, u_0..u_t) of
             prod_k pi_k(u_k | y_k)
             * p_b(r_t, y_t | Y_{t-1}, u_t) . W_t . ... . W_1 . W_0

with weight matrices

    W_k = pinv(p_b(Y_k | Y_{k-1}, u_k)) @ p_b(Y_k, y_{k-1} | Y_{k-2}, u_{k-1}),  k >= 1
    W_0 = pinv(p_b(Y_0 | u_0, Y_N)) @ p_b(Y_0)

where Y_N is the null observation. The row vector times the chain contracts
to a scalar per (prefix, r).
"""

from __future__ import annotations

import io
import itertools
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .core import Policy, PomdpSpec, SpecValidationError, check_compatible, exact_occupancy
from .estimate import POPULATION, EstimatedMatrices, _normalize, naive_reward_from_counts

DEGENERATE_NORM = 1e-12
ENUMERATE_MAX_T = 3
BRUTE_FORCE_MAX_PATHS = 10**7


class SingularChainError(RuntimeError):
    def __init__(self, k: int, u: int, cond: float, detail: str = ""):
        self.k, self.u, self.cond = k, u, cond
        super().__init__(f"singular weight chain at k={k}, u={u} (cond={cond:.3g}) {detail}".strip())


@dataclass(frozen=True)
class RewardDistribution:
    t: int
    probs: np.ndarray
    raw: np.ndarray
    mass_defect: float  # 1 - sum(raw)
    negative_mass: float  # total mass clipped away


def _finalize(t: int, raw: np.ndarray) -> RewardDistribution:
    raw = np.asarray(raw, dtype=float)
    clipped = np.clip(raw, 0.0, 1.0)
    tot = clipped.sum()
    probs = clipped / tot if tot > 0 else np.full(raw.shape, 1.0 / raw.size)
    return RewardDistribution(t, probs, raw, float(1.0 - raw.sum()), float(-raw[raw < 0].sum()))


@dataclass
class WeightChainContext:
    em: EstimatedMatrices
    eval_policy: Policy
    pinv_tolerance: float = 1e-9

    def __post_init__(self):
        if self.eval_policy.kind != "obs_based":
            raise SpecValidationError("evaluation policy must be obs_based")
        T, Y, U = self.em.horizon, self.em.num_obs, self.em.num_actions
        if self.eval_policy.table.shape[1:] != (Y, U) or self.eval_policy.horizon < T:
            raise SpecValidationError(
                f"evaluation policy shape {self.eval_policy.table.shape} does not match "
                f"matrices (T={T}, Y={Y}, U={U})"
            )

    def with_policy(self, pol: Policy) -> "WeightChainContext":
        ctx = WeightChainContext(self.em, pol, self.pinv_tolerance)
        # matrices are policy-free; share the inverses
        if "inverses" in self.__dict__:
            ctx.__dict__["inverses"] = self.inverses
        return ctx

    @cached_property
    def inverses(self) -> np.ndarray:
        """Truncated pseudo-inverses of every m_obs slice, (T, U, Y, Y)."""
        m = self.em.m_obs
        out = np.empty_like(m)
        for t in range(m.shape[0]):
            for u in range(m.shape[1]):
                a = m[t, u]
                sv = np.linalg.svd(a, compute_uv=False)
                if not np.all(np.isfinite(a)) or sv[0] <= 0:
                    raise SingularChainError(t, u, float("inf"), "(zero or non-finite matrix)")
                out[t, u] = np.linalg.pinv(a, rcond=self.pinv_tolerance)
        return out

    @property
    def pi(self) -> np.ndarray:
        return self.eval_policy.table


def weight_matrix(ctx: WeightChainContext, k: int, y_prev: int, u_prev: int, u_cur: int) -> np.ndarray:
    """W_k for k >= 1, rows Y_{k-1}, columns Y_{k-2} (Y_N when k = 1)."""
    if k < 1 or k >= ctx.em.horizon:
        raise SpecValidationError(f"weight_matrix needs 1 <= k < T, got k={k}")
    return ctx.inverses[k, u_cur] @ ctx.em.m_joint[k, u_prev, y_prev]


def initial_weight(ctx: WeightChainContext, u0: int) -> np.ndarray:
    """W_0 as a vector over the null-observation index."""
    return ctx.inverses[0, u0] @ ctx.em.p_y0


def _all_weights(ctx: WeightChainContext, k: int) -> np.ndarray:
    """W_k for every (u_cur, u_prev, y_prev), shape (U, U, Y, Y, Y)."""
    return np.einsum("uab,vybc->uvyac", ctx.inverses[k], ctx.em.m_joint[k])


def _initial_messages(ctx) -> np.ndarray:
    return np.einsum("uab,b->ua", ctx.inverses[0], ctx.em.p_y0)


def _messages(ctx: WeightChainContext, t: int):
    """Yield m_k(u_k) = W_k . sum pi . W_{k-1} ... W_0 for k = 0..t, each (U, Y)."""
    m = _initial_messages(ctx)
    yield m
    for k in range(1, t + 1):
        w = _all_weights(ctx, k)
        m = np.einsum("yv,uvyac,vc->ua", ctx.pi[k - 1], w, m)
        yield m


def reward_dist_dp(ctx: WeightChainContext, t: int) -> RewardDistribution:
    """Sum-product evaluation of the identified reward law at time t."""
    if not 0 <= t < ctx.em.horizon:
        raise SpecValidationError(f"t={t} outside horizon {ctx.em.horizon}")
    for m in _messages(ctx, t):
        pass
    raw = np.einsum("yu,urya,ua->r", ctx.pi[t], ctx.em.m_reward[t], m)
    return _finalize(t, raw)


def reward_dist_enumerate(ctx: WeightChainContext, t: int) -> RewardDistribution:
    """Literal prefix-by-prefix evaluation; exponential cost, guarded to t <= 3."""
    if t > ENUMERATE_MAX_T:
        raise SpecValidationError(f"enumeration guard: t={t} > {ENUMERATE_MAX_T}")
    if not 0 <= t < ctx.em.horizon:
        raise SpecValidationError(f"t={t} outside horizon {ctx.em.horizon}")
    Y, U = ctx.em.num_obs, ctx.em.num_actions
    pi = ctx.pi
    W0 = [initial_weight(ctx, u) for u in range(U)]
    Wk = {
        (k, y, v, u): weight_matrix(ctx, k, y, v, u)
        for k in range(1, t + 1)
        for y in range(Y)
        for v in range(U)
        for u in range(U)
    }
    raw = np.zeros(len(ctx.em.reward_values))
    steps = list(itertools.product(range(Y), range(U)))
    for prefix in itertools.product(steps, repeat=t + 1):
        weight = 1.0
        for k, (y, u) in enumerate(prefix):
            weight *= pi[k, y, u]
        if weight == 0.0:
            continue
        vec = W0[prefix[0][1]]
        for k in range(1, t + 1):
            y_prev, u_prev = prefix[k - 1]
            vec = Wk[(k, y_prev, u_prev, prefix[k][1])] @ vec
        y_t, u_t = prefix[t]
        rows = ctx.em.m_reward[t, u_t, :, y_t, :]  # (R, Y_{t-1})
        vals = rows @ vec
        assert vals.shape == raw.shape  # each chain contracts to one scalar per r
        raw += weight * vals
    return _finalize(t, raw)


@dataclass(frozen=True)
class DeconfoundedReward:
    rho: np.ndarray  # (T, X, U)
    flags: np.ndarray  # (T, X, U) bool: fell back to the naive mean
    mass_defect: np.ndarray  # (T, X, U) negative mass clipped before normalizing
    normalizer: np.ndarray  # (T, X, U) raw sum over r

    def dumps(self) -> str:
        buf = io.StringIO()
        buf.write("t,x,u,rho,normalizer,clipped_mass,flag\n")
        T, X, U = self.rho.shape
        for t in range(T):
            for x in range(X):
                for u in range(U):
                    buf.write(
                        f"{t},{x},{u},{self.rho[t, x, u]:.12g},{self.normalizer[t, x, u]:.12g},"
                        f"{self.mass_defect[t, x, u]:.12g},{int(self.flags[t, x, u])}\n"
                    )
        return buf.getvalue()


def deconfounded_reward_table(ctx: WeightChainContext) -> DeconfoundedReward:
    """rho_t(x, u): identified E[r_t | y_t = x, u_t = u] under the evaluation policy.

    The final (y_t, u_t) pair is held fixed instead of summed, so the time-t
    policy factor cancels; the reward symbol law is then normalized per cell.
    """
    em = ctx.em
    T, Y, U = em.horizon, em.num_obs, em.num_actions
    rho = np.empty((T, Y, U))
    flags = np.zeros((T, Y, U), dtype=bool)
    clipped = np.zeros((T, Y, U))
    norm = np.zeros((T, Y, U))
    for t, m in enumerate(_messages(ctx, T - 1)):
        raw = np.einsum("urya,ua->yur", em.m_reward[t], m)  # (Y, U, R)
        pos = np.clip(raw, 0.0, None)
        z = pos.sum(axis=-1)
        clipped[t] = -np.clip(raw, None, 0.0).sum(axis=-1)
        norm[t] = raw.sum(axis=-1)
        ok = z > DEGENERATE_NORM
        mean = (pos @ em.reward_values) / np.where(ok, z, 1.0)
        rho[t] = np.where(ok, mean, em.naive_reward[t])
        flags[t] = ~ok
    if flags.all():
        raise SingularChainError(-1, -1, float("inf"), "(every reward cell degenerate)")
    return DeconfoundedReward(rho, flags, clipped, norm)


# -- exact behavioral matrices ---------------------------------------------


def _action_given_state_obs(spec: PomdpSpec, pol: Policy) -> np.ndarray:
    """pi_t(u | s, y) as (T, S, Y, U)."""
    T, S, Y = spec.horizon, spec.num_full_states, spec.num_obs
    tab = np.asarray(pol.table[:T])
    if pol.kind == "state_based":
        return np.broadcast_to(tab[:, :, None, :], (T, S, Y, spec.num_actions))
    return np.broadcast_to(tab[:, None, :, :], (T, S, Y, spec.num_actions))


def population_matrices(spec: PomdpSpec, behavioral: Policy) -> EstimatedMatrices:
    """Exact behavioral matrices from the model kernels (no sampling).

    The null observation is an independent second draw from the obs kernel
    at s_0, matching the simulator.
    """
    check_compatible(spec, behavioral)
    T, S, Y, U = spec.horizon, spec.num_full_states, spec.num_obs, spec.num_actions
    R = spec.num_rewards
    O, P, RK = spec.obs, spec.trans, spec.reward_kernel
    d = exact_occupancy(spec, behavioral)
    pi = _action_given_state_obs(spec, behavioral)

    F = spec.init_dist[:, None] * O  # p(s_t, y_{t-1}), y_{-1} = y_N
    j_obs = np.zeros((T, U, Y, Y))
    j_rew = np.zeros((T, U, R, Y, Y))
    j_joint = np.zeros((T, U, Y, Y, Y))
    latent = np.zeros((T, U, S, Y))
    F_hist = []
    for t in range(T):
        F_hist.append(F)
        G = O[:, :, None] * pi[t]  # (S, Y_t, U): p(y_t, u_t | s_t)
        j_obs[t] = np.einsum("sa,sbu->uba", F, G)
        j_rew[t] = np.einsum("sa,sbu,sur->urba", F, G, RK)
        latent[t] = np.einsum("sa,sbu->usa", F, G)
        if t >= 1:
            Fp = F_hist[t - 1]
            Gp = O[:, :, None] * pi[t - 1]
            j_joint[t] = np.einsum("sa,sbu,sun,nc->ubca", Fp, Gp, P, O)
        F = np.einsum("s,sy,syu,sun->ny", d[t], O, pi[t], P)

    m_obs, bad_obs = _normalize(j_obs, (2,), 0.0)
    m_reward, bad_rew = _normalize(j_rew, (2, 3), 0.0)
    m_joint, bad_joint = _normalize(j_joint, (2, 3), 0.0)
    m_joint[0] = 0.0
    bad_joint[0] = False
    lat, _ = _normalize(latent, (2,), 0.0)
    naive, bad_naive = naive_reward_from_counts(j_rew.sum(axis=-1), spec.reward_alphabet)
    return EstimatedMatrices(
        m_obs=m_obs,
        m_joint=m_joint,
        m_reward=m_reward,
        p_y0=spec.init_dist @ O,
        naive_reward=naive,
        reward_values=np.array(spec.reward_alphabet),
        smoothing_alpha=0.0,
        counts={"N": POPULATION},
        untrusted={"m_obs": bad_obs, "m_joint": bad_joint, "m_reward": bad_rew, "naive_reward": bad_naive},
        latent={"state_given_prev": lat},
    )


# -- ground truth --------------------------------------------------------------


@dataclass(frozen=True)
class BruteForceReward:
    t: int
    probs: np.ndarray  # (R,) p(r_t)
    conditional: np.ndarray  # (Y, U, R) p(r_t | y_t, do u_t); NaN where y_t unreachable
    obs_mass: np.ndarray  # (Y,) p(y_t)

    def conditional_mean(self, values: np.ndarray) -> np.ndarray:
        return self.conditional @ values


def brute_force_reward_dist(spec: PomdpSpec, eval_policy: Policy, t: int) -> BruteForceReward:
    """Exact p(r_t) by explicit enumeration of every (s_0..s_t, u_0..u_t) path."""
    check_compatible(spec, eval_policy)
    S, U, Y = spec.num_full_states, spec.num_actions, spec.num_obs
    if (S * U) ** (t + 1) > BRUTE_FORCE_MAX_PATHS:
        raise SpecValidationError(f"brute-force guard: (|S||U|)^{t + 1} > {BRUTE_FORCE_MAX_PATHS}")
    pi_s = eval_policy.state_table(spec)  # (T, S, U): sum_y O(y|s) pi(u|y)
    # path tensor axes: s_0, u_0, s_1, u_1, ..., s_t (u_t added below)
    w = spec.init_dist.copy()
    for k in range(t):
        w = w[..., :, None] * pi_s[k]
        w = w[..., :, :, None] * spec.trans
    # every path weight up to s_t, with s_t and its observation explicit
    w = w.reshape(-1, S)
    path_obs = w[:, :, None] * spec.obs[None, :, :]  # (paths, s_t, y_t)
    mass_sy = path_obs.sum(axis=0)  # (S, Y)
    joint_do = np.einsum("sy,sur->yur", mass_sy, spec.reward_kernel)  # p(y_t, r | do u_t)
    obs_mass = mass_sy.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        cond = joint_do / obs_mass[:, None, None]
    probs = np.einsum("yur,yu->r", joint_do, eval_policy.table[t])
    return BruteForceReward(t, probs, cond, obs_mass)


def true_reward_table(spec: PomdpSpec, eval_policy: Policy) -> np.ndarray:
    """E[r_t | y_t, do u_t] for all t from exact occupancy, (T, Y, U); NaN where unreachable."""
    d = exact_occupancy(spec, eval_policy)[: spec.horizon]
    mass = np.einsum("ts,sy->tsy", d, spec.obs)
    num = np.einsum("tsy,su->tyu", mass, spec.expected_reward())
    den = mass.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return num / den[:, :, None]
