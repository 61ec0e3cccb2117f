"""Command-line pipeline: gen, estimate, learn, eval, report, all.

Exit status: 0 success, 2 validation error, 3 singular weight chain,
4 fit did not converge (artifacts are still written and flagged).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .core import SCHEMA_VERSION, SpecValidationError
from .envs import FIXTURES, FixtureId, make_fixture, parse_override
from .estimate import EstimatedMatrices, estimate_matrices, estimate_phi, invertibility_report
from .evaluation import METRIC_MODES, EvalConfig, compare
from .learn import VALUE_RULES, FitConfig, SurrogateModel, fit_naive, fit_oracle, fit_surrogate_from
from .proximal import SingularChainError, population_matrices
from .simulate import Dataset, SimConfig, generate_dataset

COMMANDS = ("gen", "estimate", "learn", "eval", "report", "all")
EXIT_OK, EXIT_INVALID, EXIT_SINGULAR, EXIT_NOT_CONVERGED = 0, 2, 3, 4
STAMP = "# proxmbrl"

ARTIFACTS = {
    "dataset": "dataset.txt",
    "matrices": "matrices.txt",
    "invertibility": "invertibility.csv",
    "surrogate": "model_surrogate.json",
    "naive": "model_naive.json",
    "oracle": "model_oracle.json",
    "l1": "l1.csv",
    "returns": "returns.csv",
    "summary": "summary.json",
    "report": "report.md",
}


@dataclass
class RunConfig:
    command: str = "all"
    fixture: str = "icu"
    overrides: dict = field(default_factory=dict)
    n: int = 1000
    seed: int = 7
    emit_latent: bool = True
    alpha: float = 0.5
    matrix_alpha: float = 0.0
    tol_tv: float = 1e-8
    damping: float = 0.5
    max_iters: int = 200
    value_rule: str = "expectation"
    pinv_tolerance: float = 1e-9
    warn_cond: float = 1e8
    fail_cond: float = 1e12
    metric_mode: str = "exact"
    episodes: int = 1000
    out: str = "out"

    def validate(self) -> None:
        bad = []
        if self.command not in COMMANDS:
            bad.append(f"command must be one of {COMMANDS}")
        if self.fixture not in FIXTURES:
            bad.append(f"fixture must be one of {FIXTURES}")
        if self.n < 1:
            bad.append("n must be >= 1")
        if self.seed < 0:
            bad.append("seed must be >= 0")
        if self.episodes < 2:
            bad.append("episodes must be >= 2")
        if self.metric_mode not in METRIC_MODES:
            bad.append(f"metric_mode must be one of {METRIC_MODES}")
        if not 0 < self.warn_cond <= self.fail_cond:
            bad.append("need 0 < warn_cond <= fail_cond")
        try:
            self.fit_config()
        except SpecValidationError as e:
            bad.append(str(e))
        if bad:
            raise SpecValidationError("invalid run configuration", bad)

    def fit_config(self) -> FitConfig:
        return FitConfig(
            max_iters=self.max_iters,
            tol_tv=self.tol_tv,
            damping=self.damping,
            value_rule=self.value_rule,
            alpha=self.alpha,
            matrix_alpha=self.matrix_alpha,
            pinv_tolerance=self.pinv_tolerance,
        )

    def digest(self) -> str:
        """Hash of every field that influences artifact content."""
        d = dataclasses.asdict(self)
        d.pop("command")
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def path(self, name: str) -> Path:
        return Path(self.out) / ARTIFACTS[name]


def _stamp(cfg: RunConfig, artifact: str) -> dict:
    return {"artifact": artifact, "config_hash": cfg.digest(), "schema_version": SCHEMA_VERSION, "seed": cfg.seed}


def _stamped_csv(cfg: RunConfig, artifact: str, body: str) -> str:
    return f"{STAMP} {json.dumps(_stamp(cfg, artifact), sort_keys=True)}\n{body}"


def read_stamped_csv(path: Path) -> tuple[dict, list[dict]]:
    """Header stamp and rows of a CSV written by this module."""
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith(STAMP):
        raise SpecValidationError(f"{path} lacks an artifact stamp")
    head = json.loads(lines[0][len(STAMP):])
    return head, list(csv.DictReader(io.StringIO("\n".join(lines[1:]))))


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _read(path: Path) -> str:
    if not path.exists():
        raise SpecValidationError(f"missing input artifact {path}")
    return path.read_text()


def _fixture(cfg: RunConfig):
    return make_fixture(FixtureId(cfg.fixture, cfg.seed, dict(cfg.overrides)))


# -- stages ------------------------------------------------------------------


def run_gen(cfg: RunConfig) -> int:
    fx = _fixture(cfg)
    ds = generate_dataset(fx.spec, fx.behavioral, SimConfig(cfg.n, cfg.seed, cfg.emit_latent), cfg.fixture)
    ds.meta["config_hash"] = cfg.digest()
    _write(cfg.path("dataset"), ds.dumps())
    return EXIT_OK


def run_estimate(cfg: RunConfig) -> int:
    ds = Dataset.loads(_read(cfg.path("dataset"))).observable()
    em = estimate_matrices(ds, cfg.matrix_alpha)
    _write(cfg.path("matrices"), em.dumps(_stamp(cfg, "matrices")))
    # the latent rows come from the fixture's population matrices; they show
    # whether the proxies can carry the latent state at all
    fx = _fixture(cfg)
    pop = population_matrices(fx.spec, fx.behavioral)
    est = invertibility_report(em, cfg.warn_cond, cfg.fail_cond)
    lat = invertibility_report(pop, cfg.warn_cond, cfg.fail_cond)
    rows = est.rows + [r for r in lat.rows if r.kind == "latent_state"]
    lines = type(est)(rows, est.verdict).to_csv()
    _write(cfg.path("invertibility"), _stamped_csv(cfg, "invertibility", lines))
    return EXIT_OK


def run_learn(cfg: RunConfig) -> int:
    full = Dataset.loads(_read(cfg.path("dataset")))
    ds = full.observable()
    em = EstimatedMatrices.loads(_read(cfg.path("matrices")))
    if em.horizon != ds.horizon or em.num_obs != ds.num_obs:
        raise SpecValidationError("matrices and dataset disagree on horizon or alphabet")
    fc = cfg.fit_config()
    phi = estimate_phi(ds, cfg.alpha)
    sur = fit_surrogate_from(em, phi.phi, fc)
    sur.flags["phi_unvisited"] = phi.unvisited.astype(float)
    models = {"surrogate": sur, "naive": fit_naive(ds, fc)}
    if full.has_latent:
        models["oracle"] = fit_oracle(full, fc)
    for name, m in models.items():
        m.meta.update(dict(ds.meta), **_stamp(cfg, f"model_{name}"))
        _write(cfg.path(name), m.dumps() + "\n")
    if not sur.converged:
        print(f"learn: surrogate fit did not converge in {cfg.max_iters} iterations", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def run_eval(cfg: RunConfig) -> int:
    fx = _fixture(cfg)
    models = {}
    for name in ("oracle", "surrogate", "naive"):
        p = cfg.path(name)
        if p.exists() or name != "oracle":
            models[name] = SurrogateModel.loads(_read(p))
    rep = compare(
        fx.spec,
        models,
        {"own": None, "behavioral": fx.behavioral},
        EvalConfig(cfg.episodes, cfg.seed, cfg.metric_mode),
        baseline="naive",
    )
    rep.meta.update(_stamp(cfg, "summary"), fixture=cfg.fixture, digest=rep.digest())
    _write(cfg.path("l1"), _stamped_csv(cfg, "l1", rep.l1_csv()))
    _write(cfg.path("returns"), _stamped_csv(cfg, "returns", rep.returns_csv()))
    _write(cfg.path("summary"), rep.summary_json())
    return EXIT_OK


def run_report(cfg: RunConfig) -> int:
    _, l1 = read_stamped_csv(cfg.path("l1"))
    _, rets = read_stamped_csv(cfg.path("returns"))
    summary = json.loads(_read(cfg.path("summary")))
    inv_head, inv = read_stamped_csv(cfg.path("invertibility"))
    curves: dict = {}
    for row in l1:
        curves.setdefault((row["model"], row["policy"]), []).append(row["value"])
    out = io.StringIO()
    out.write(f"# proxmbrl report: {cfg.fixture}\n\n")
    out.write(f"config hash `{cfg.digest()}`, seed {cfg.seed}, N {cfg.n}\n\n")
    out.write("## l1 rollout error per time step\n\n")
    T = max(len(v) for v in curves.values())
    out.write("| model | policy | " + " | ".join(f"t={t}" for t in range(T)) + " |\n")
    out.write("|---|---|" + "---|" * T + "\n")
    for (m, p), vals in curves.items():
        out.write(f"| {m} | {p} | " + " | ".join(f"{float(v):.4f}" for v in vals) + " |\n")
    out.write("\n## returns (own policy)\n\n| model | mean | stderr |\n|---|---|---|\n")
    for r in rets:
        out.write(f"| {r['model']} | {float(r['mean_return']):.4f} | {float(r['stderr']):.4f} |\n")
    out.write("\n## paired return gaps\n\n")
    for name, g in summary["gaps"].items():
        out.write(
            f"- {name}: diff {float(g['diff']):.4f}, one-sided 95% lower bound {float(g['lower95']):.4f}, "
            f"relative {100 * float(g['relative']):.2f}%\n"
        )
    statuses = [r["status"] for r in inv]
    out.write(
        f"\n## invertibility\n\n{len(inv)} matrices checked: {statuses.count('ok')} ok, "
        f"{statuses.count('warn')} warn, {statuses.count('fail')} fail\n"
    )
    _write(cfg.path("report"), out.getvalue())
    return EXIT_OK


STAGES = {"gen": run_gen, "estimate": run_estimate, "learn": run_learn, "eval": run_eval, "report": run_report}


def run(cfg: RunConfig) -> int:
    cfg.validate()
    if cfg.command != "all":
        return STAGES[cfg.command](cfg)
    status = EXIT_OK
    for name in ("gen", "estimate", "learn", "eval", "report"):
        code = STAGES[name](cfg)
        if code == EXIT_NOT_CONVERGED:
            status = code  # keep going; downstream artifacts carry the flag
        elif code != EXIT_OK:
            return code
    return status


# -- argument parsing -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="proxmbrl", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="JSON file with RunConfig fields; flags win")
    ap.add_argument("--fixture", choices=FIXTURES)
    ap.add_argument("--n", type=int)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--alpha", type=float, help="smoothing of the transition model")
    ap.add_argument("--matrix-alpha", type=float, help="smoothing of the identification matrices")
    ap.add_argument("--tol-tv", type=float)
    ap.add_argument("--damping", type=float)
    ap.add_argument("--max-iters", type=int)
    ap.add_argument("--value-rule", choices=VALUE_RULES)
    ap.add_argument("--pinv-tolerance", type=float)
    ap.add_argument("--warn-cond", type=float)
    ap.add_argument("--fail-cond", type=float)
    ap.add_argument("--metric-mode", choices=METRIC_MODES)
    ap.add_argument("--episodes", type=int)
    ap.add_argument("--no-latent", action="store_true", help="omit latent state columns from the dataset")
    ap.add_argument("--override", action="append", default=[], metavar="K=V", help="fixture parameter override")
    ap.add_argument("--out", help="artifact directory")
    return ap


def config_from_args(argv=None) -> RunConfig:
    args = build_parser().parse_args(argv)
    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text())
        unknown = set(base) - {f.name for f in dataclasses.fields(RunConfig)}
        if unknown:
            raise SpecValidationError(f"unknown config keys {sorted(unknown)}")
    cfg = RunConfig(**base)
    cfg.command = args.command
    for f in dataclasses.fields(RunConfig):
        v = getattr(args, f.name, None)
        if f.name not in ("command", "overrides") and v is not None:
            setattr(cfg, f.name, v)
    if args.no_latent:
        cfg.emit_latent = False
    if args.override:
        cfg.overrides = dict(cfg.overrides)
        cfg.overrides.update(parse_override(o) for o in args.override)
    return cfg


def main(argv=None) -> int:
    try:
        return run(config_from_args(argv))
    except SingularChainError as e:
        print(f"proximal: {e}", file=sys.stderr)
        return EXIT_SINGULAR
    except SpecValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (ValueError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
