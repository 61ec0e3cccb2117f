"""Rollout-error and return comparisons between learned models and the true system."""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .core import Policy, PomdpSpec, SpecValidationError, behavioral_obs_marginal, exact_occupancy
from .learn import SurrogateModel
from .simulate import sample_batch

METRIC_MODES = ("exact", "mc")
Z_ONE_SIDED_95 = 1.6448536269514722


def _fmt(v: float) -> str:
    return f"{v:.12g}"


def _model_policy(spec: PomdpSpec, model: SurrogateModel, pol: Policy) -> np.ndarray:
    """Action table the model rolls out with, indexed in the model's own space."""
    if model.space == "obs":
        return behavioral_obs_marginal(spec, pol).table
    return pol.state_table(spec)


def model_marginals(spec: PomdpSpec, model: SurrogateModel, pol: Policy, horizon: int) -> np.ndarray:
    """Per-t observation marginals predicted by the model, (horizon, Y)."""
    table = _model_policy(spec, model, pol)
    if model.space == "obs":
        if model.phi.shape[1] != spec.num_obs:
            raise SpecValidationError("model and spec observation alphabets differ")
        d = spec.init_dist @ spec.obs
    else:
        if model.phi.shape[1] != spec.num_full_states:
            raise SpecValidationError("oracle model and spec state spaces differ")
        d = np.array(spec.init_dist)
    out = []
    for t in range(horizon):
        out.append(d if model.space == "obs" else d @ spec.obs)
        if t + 1 < horizon:
            d = np.einsum("x,xu,xua->a", d, table[t], model.phi[t])
    return np.array(out)


def true_marginals(spec: PomdpSpec, pol: Policy, horizon: int) -> np.ndarray:
    return (exact_occupancy(spec, pol) @ spec.obs)[:horizon]


def empirical_marginals(spec: PomdpSpec, pol: Policy, horizon: int, episodes: int, seed: int) -> np.ndarray:
    b = sample_batch(spec, pol, seed, 0, episodes)
    Y = spec.num_obs
    return np.array([np.bincount(b.obs[:, t], minlength=Y) / episodes for t in range(horizon)])


def l1_rollout_error(
    spec: PomdpSpec,
    model: SurrogateModel,
    pol: Policy | None = None,
    horizon: int | None = None,
    mode: str = "exact",
    episodes: int = 1000,
    seed: int = 7,
) -> np.ndarray:
    """sum_x |d_t^true(x) - d_t^model(x)| for t = 0..horizon-1.

    ``pol`` defaults to the model's own policy. A state-based ``pol`` drives the
    true system directly while an observation-space model rolls out its
    observable marginal. In ``mc`` mode the true marginals are empirical
    frequencies over ``episodes`` simulated episodes.
    """
    if mode not in METRIC_MODES:
        raise SpecValidationError(f"mode must be one of {METRIC_MODES}")
    pol = model.policy if pol is None else pol
    horizon = spec.horizon if horizon is None else horizon
    pred = model_marginals(spec, model, pol, horizon)
    if mode == "exact":
        truth = true_marginals(spec, pol, horizon)
    else:
        truth = empirical_marginals(spec, pol, horizon, episodes, seed)
    return np.abs(truth - pred).sum(axis=1)


def episode_returns(spec: PomdpSpec, pol: Policy, episodes: int, seed: int) -> np.ndarray:
    b = sample_batch(spec, pol, seed, 0, episodes)
    return spec.reward_alphabet[b.rewards].sum(axis=1)


def mc_return(spec: PomdpSpec, pol: Policy, episodes: int = 1000, seed: int = 7) -> tuple[float, float]:
    """Mean return and its standard error over counter-seeded episodes."""
    g = episode_returns(spec, pol, episodes, seed)
    se = float(g.std(ddof=1) / np.sqrt(episodes)) if episodes > 1 else 0.0
    return float(g.mean()), se


@dataclass(frozen=True)
class ReturnGap:
    """Paired comparison of two policies on common episode seeds."""

    mean_a: float
    mean_b: float
    diff: float
    stderr: float
    lower95: float  # one-sided lower confidence bound on diff
    relative: float

    @property
    def significant(self) -> bool:
        return self.lower95 > 0


def paired_return_gap(spec, pol_a: Policy, pol_b: Policy, episodes: int = 1000, seed: int = 7) -> ReturnGap:
    ga = episode_returns(spec, pol_a, episodes, seed)
    gb = episode_returns(spec, pol_b, episodes, seed)
    d = ga - gb
    se = float(d.std(ddof=1) / np.sqrt(episodes))
    diff = float(d.mean())
    return ReturnGap(
        float(ga.mean()), float(gb.mean()), diff, se, diff - Z_ONE_SIDED_95 * se,
        diff / abs(float(gb.mean())) if gb.mean() != 0 else float("nan"),
    )


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 1000
    seed: int = 7
    mode: str = "exact"


@dataclass
class EvalReport:
    l1: list = field(default_factory=list)  # (metric, model, policy, t, value)
    returns: list = field(default_factory=list)  # (model, policy, episodes, mean, stderr)
    gaps: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def curve(self, model: str, policy: str) -> np.ndarray:
        rows = sorted((t, v) for _, m, p, t, v in self.l1 if m == model and p == policy)
        return np.array([v for _, v in rows])

    def l1_csv(self) -> str:
        buf = io.StringIO()
        buf.write("metric,model,policy,t,value\n")
        for metric, m, p, t, v in self.l1:
            buf.write(f"{metric},{m},{p},{t},{_fmt(v)}\n")
        return buf.getvalue()

    def returns_csv(self) -> str:
        buf = io.StringIO()
        buf.write("model,policy,episodes,mean_return,stderr\n")
        for m, p, n, mean, se in self.returns:
            buf.write(f"{m},{p},{n},{_fmt(mean)},{_fmt(se)}\n")
        return buf.getvalue()

    def summary_json(self) -> str:
        gaps = {
            k: {f: _fmt(getattr(g, f)) for f in ("mean_a", "mean_b", "diff", "stderr", "lower95", "relative")}
            for k, g in sorted(self.gaps.items())
        }
        return json.dumps({"meta": self.meta, "gaps": gaps}, indent=1, sort_keys=True) + "\n"

    def digest(self) -> str:
        return hashlib.sha256((self.l1_csv() + self.returns_csv()).encode()).hexdigest()


def _return_policy(model: SurrogateModel) -> Policy:
    return model.policy


def compare(
    spec: PomdpSpec,
    models: dict,
    policies: dict,
    cfg: EvalConfig = EvalConfig(),
    baseline: str | None = None,
) -> EvalReport:
    """Roll out every model under every named policy and score every model's policy.

    ``policies`` maps a label to a Policy, or to ``None`` meaning each model's
    own learned policy. If ``baseline`` names a model, paired return gaps of
    every other model against it are recorded.
    """
    if not models or not policies:
        raise SpecValidationError("compare needs at least one model and one policy")
    rep = EvalReport(meta={"episodes": cfg.episodes, "seed": cfg.seed, "mode": cfg.mode, "spec": spec.name})
    metric = f"l1_{cfg.mode}"
    for mname, model in models.items():
        for pname, pol in policies.items():
            err = l1_rollout_error(spec, model, pol, spec.horizon, cfg.mode, cfg.episodes, cfg.seed)
            rep.l1.extend((metric, mname, pname, t, float(v)) for t, v in enumerate(err))
    for mname, model in models.items():
        mean, se = mc_return(spec, _return_policy(model), cfg.episodes, cfg.seed)
        rep.returns.append((mname, "own", cfg.episodes, mean, se))
    if baseline is not None:
        for mname, model in models.items():
            if mname != baseline:
                rep.gaps[f"{mname}_vs_{baseline}"] = paired_return_gap(
                    spec, model.policy, models[baseline].policy, cfg.episodes, cfg.seed
                )
    return rep
