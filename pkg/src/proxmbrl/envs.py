"""Reproducible fixtures: the ICU treatment task, a proxy-rich POMDP and a tiny C-MDP.

Numeric constants live in ``data/fixtures.json``. Overrides use dotted paths
into that document, e.g. ``lambda=0.2`` or ``px.3.1.2=[0.1,0.4,0.3,0.2]``;
``num_contexts=1`` keeps only the first context of a contextual fixture.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .core import Policy, PomdpSpec, SpecValidationError, build_cmdp, validate

FIXTURES = ("icu", "proxyrich", "tiny")
PROXYRICH_MAX_COND = 50.0


@dataclass(frozen=True)
class FixtureId:
    name: str
    override_seed: int | None = None
    param_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in FIXTURES:
            raise SpecValidationError(f"unknown fixture {self.name!r}; choose from {FIXTURES}")


@dataclass(frozen=True)
class Fixture:
    spec: PomdpSpec
    behavioral: Policy
    description: dict


def load_params() -> dict:
    text = resources.files("proxmbrl").joinpath("data/fixtures.json").read_text()
    return json.loads(text)


def parse_override(item: str) -> tuple[str, object]:
    """``key=value`` with the value parsed as JSON when possible."""
    if "=" not in item:
        raise SpecValidationError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    return key.strip(), val


def _apply_override(params: dict, key: str, value) -> None:
    parts = key.split(".")
    node = params
    for p in parts[:-1]:
        node = _child(node, p, key)
    last = parts[-1]
    if isinstance(node, list):
        idx = _index(node, last, key)
        node[idx] = value
    elif isinstance(node, dict) and last in node:
        node[last] = value
    else:
        raise SpecValidationError(f"override key {key!r} does not name an existing parameter")


def _index(node: list, p: str, key: str) -> int:
    try:
        i = int(p)
    except ValueError:
        raise SpecValidationError(f"override key {key!r}: {p!r} is not a list index") from None
    if not 0 <= i < len(node):
        raise SpecValidationError(f"override key {key!r}: index {i} out of range")
    return i


def _child(node, p: str, key: str):
    if isinstance(node, list):
        return node[_index(node, p, key)]
    if isinstance(node, dict) and p in node:
        return node[p]
    raise SpecValidationError(f"override key {key!r} does not name an existing parameter")


def _restrict_contexts(p: dict, k: int) -> None:
    Z = len(p["nu"])
    if not 1 <= k <= Z:
        raise SpecValidationError(f"num_contexts must be in 1..{Z}")
    nu = np.asarray(p["nu"][:k], dtype=float)
    p["nu"] = (nu / nu.sum()).tolist()
    for key in ("px", "behavior", "r_health", "reward"):
        if key in p:
            p[key] = [row[:k] for row in p[key]]
    if "pz" in p:
        pz = np.asarray(p["pz"], dtype=float)[:, :k, :, :k]
        p["pz"] = (pz / pz.sum(axis=-1, keepdims=True)).tolist()
    if "contexts" in p:
        p["contexts"] = p["contexts"][:k]


def _cmdp(name: str, p: dict) -> tuple[PomdpSpec, Policy]:
    px = np.asarray(p["px"], dtype=float)
    X, Z, U, _ = px.shape
    if p.get("context_persistent"):
        pz = np.broadcast_to(np.eye(Z)[None, :, None, :], (X, Z, U, Z))
    else:
        pz = np.asarray(p["pz"], dtype=float)
    if "reward" in p:
        reward = np.asarray(p["reward"], dtype=float)
    else:
        health = np.asarray(p["r_health"], dtype=float)
        cost = np.asarray(p["cost"], dtype=float)
        reward = health[:, :, None] - float(p["lambda"]) * cost[None, None, :]
    spec = build_cmdp(px, pz, reward, p["eta"], p["nu"], int(p["horizon"]), name=name)
    beh = np.asarray(p["behavior"], dtype=float).reshape(X * Z, U)
    return spec, Policy.stationary("state_based", beh, spec.horizon)


def _pomdp(name: str, p: dict) -> tuple[PomdpSpec, Policy]:
    obs = np.asarray(p["obs"], dtype=float)
    trans = np.asarray(p["trans"], dtype=float)
    S, U, _ = trans.shape
    spec = PomdpSpec(
        num_obs=obs.shape[1],
        num_contexts=int(p["num_contexts"]),
        num_full_states=S,
        num_actions=U,
        horizon=int(p["horizon"]),
        init_dist=p["init"],
        trans=trans,
        obs=obs,
        reward_alphabet=p["reward_alphabet"],
        reward_kernel=p["reward_kernel"],
        name=name,
    )
    beh = Policy.stationary("state_based", np.asarray(p["behavior"], dtype=float), spec.horizon)
    return spec, beh


def make_fixture(fid: FixtureId | str) -> Fixture:
    if isinstance(fid, str):
        fid = FixtureId(fid)
    doc = load_params()
    params = copy.deepcopy(doc[fid.name])
    overrides = dict(fid.param_overrides)
    k = overrides.pop("num_contexts", None)
    for key, val in overrides.items():
        _apply_override(params, key, val)
    if k is not None:
        if params["kind"] != "cmdp":
            raise SpecValidationError("num_contexts override needs a contextual fixture")
        _restrict_contexts(params, int(k))

    build = _cmdp if params["kind"] == "cmdp" else _pomdp
    spec, beh = build(fid.name, params)
    problems = validate(spec)
    if problems:
        raise SpecValidationError(f"fixture {fid.name} invalid", problems)
    if fid.name == "proxyrich":
        _check_proxyrich(spec, beh)
    desc = {
        "fixture": fid.name,
        "fixture_version": doc["fixture_version"],
        "overrides": {key: fid.param_overrides[key] for key in sorted(fid.param_overrides)},
        "seed": fid.override_seed,
    }
    for key in ("states", "contexts", "actions", "lambda"):
        if key in params:
            desc[key] = params[key]
    return Fixture(spec, beh, desc)


def _check_proxyrich(spec: PomdpSpec, beh: Policy) -> None:
    from .estimate import invertibility_report
    from .proximal import population_matrices

    rep = invertibility_report(population_matrices(spec, beh))
    bad = [r for r in rep.rows if r.status != "ok" or r.cond >= PROXYRICH_MAX_COND]
    if bad:
        raise SpecValidationError(
            "proxyrich rank check failed",
            [f"{r.kind} t={r.t} u={r.u} rank={r.rank} cond={r.cond:.3g}" for r in bad],
        )
