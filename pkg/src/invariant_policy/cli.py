"""CLI entrypoint for invariant policy learning workflows."""

from __future__ import annotations

import json
import time
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import click
import typer
from pydantic import ValidationError
from rich.console import Console

from invariant_policy.config import DEFAULTS, Settings, get_settings, resolve_seed
from invariant_policy.core.policies import Policy, UniformPolicy, policy_from_dict
from invariant_policy.core.types import SubsetMask
from invariant_policy.data.io import read_logged_csv, write_logged_csv
from invariant_policy.data.tabular import (
    TabularDataset,
    generate_synthetic_tabular,
    load_tabular_csv,
)
from invariant_policy.experiments.harness import (
    ExperimentConfig,
    rows_to_frame,
    run_acceptance_experiment,
    run_generalization_experiment,
)
from invariant_policy.experiments.tabular_pipeline import TabularConfig, run_tabular_pipeline
from invariant_policy.invariance.power import (
    PowerOptConfig,
    SoftmaxParams,
    test_invariance_opt_policy,
)
from invariant_policy.invariance.resampler import parse_m_rule
from invariant_policy.invariance.target_test import (
    TestReport,
    test_invariance_fixed_policy,
    test_invariance_per_action,
)
from invariant_policy.learning.learner import LearnerConfig, learn_invariant_policy
from invariant_policy.reports.formatter import (
    defaults_table,
    fmt_number,
    fmt_pvalue,
    frame_table,
    method_summary,
    now_utc_iso,
    regret_summary,
)
from invariant_policy.reports.generator import (
    RunManifest,
    config_hash,
    write_frame_csv,
    write_json,
    write_manifest,
)
from invariant_policy.simulation.scm import (
    CONTEXT_DIM,
    ScmConfig,
    make_initial_policy,
    oracle_policy,
    sample_pooled,
    sample_rounds,
)
from invariant_policy.utils.exceptions import DataValidationError, InvariantPolicyError
from invariant_policy.utils.logger import configure_logging, get_logger
from invariant_policy.utils.seeding import derive_seed

_DEFAULTS_EPILOG = "Defaults: " + ", ".join(f"{name}={value}" for name, value in DEFAULTS.as_rows())

app = typer.Typer(
    help="Invariant policy learning for multi-environment offline contextual bandits",
    epilog=_DEFAULTS_EPILOG,
    pretty_exceptions_enable=False,
    no_args_is_help=True,
)
console = Console()
err_console = Console(stderr=True)

MODES = ("fixed", "per-action", "power-opt")
ALPHA_RANGE = click.FloatRange(0.0, 1.0, min_open=True, max_open=True)


class _Run:
    """Settings, resolved seed and timing for one command invocation."""

    def __init__(self, command: str, seed: int) -> None:
        self.settings: Settings = get_settings()
        configure_logging(self.settings.logs_dir / "ipl.log", self.settings.log_level)
        self.command = command
        self.seed = resolve_seed(seed, self.settings)
        self.started_at = now_utc_iso()
        self._clock = time.perf_counter()
        self.logger = get_logger(f"invariant_policy.cli.{command.replace('-', '_')}")

    def jobs(self, jobs: int | None) -> int:
        return self.settings.jobs if jobs is None else jobs

    def finish(self, payload: Any, outputs: Sequence[Path], output_dir: Path) -> Path:
        manifest = RunManifest(
            command=self.command,
            config_hash=config_hash(payload),
            seed=self.seed,
            started_at=self.started_at,
            wall_time_seconds=round(time.perf_counter() - self._clock, 3),
            outputs=[str(path) for path in outputs],
        )
        path = write_manifest(manifest, output_dir)
        self.logger.info("run_finished", outputs=[str(p) for p in outputs], manifest=str(path))
        return path


def _parse_int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise typer.BadParameter(f"Expected comma-separated integers, got '{text}'.") from exc


def _check_mode(mode: str) -> str:
    if mode not in MODES:
        raise typer.BadParameter(f"mode must be one of {', '.join(MODES)}.")
    return mode


def _load_policy_file(path: Path) -> Policy:
    try:
        return policy_from_dict(json.loads(path.read_text(encoding="utf-8")))
    except (OSError, ValueError, KeyError) as exc:
        raise DataValidationError(f"Invalid policy file {path}: {exc}") from exc


def _simulation_policy(name: str, config: ScmConfig, env: str, warmup: int, seed: int) -> Policy:
    if name == "uniform":
        return UniformPolicy(k=config.k, d=CONTEXT_DIM)
    if name == "oracle":
        return oracle_policy(config, env)
    if name == "initial":
        uniform = UniformPolicy(k=config.k, d=CONTEXT_DIM)
        return make_initial_policy(sample_pooled(config, list(config.envs), uniform, warmup, seed))
    path = Path(name)
    if path.suffix == ".json":
        return _load_policy_file(path)
    raise typer.BadParameter("policy must be uniform, initial, oracle or a policy JSON file.")


@app.command("defaults")
def show_defaults() -> None:
    """Print the table of numeric defaults."""
    console.print(defaults_table())


@app.command("simulate")
def simulate(
    config: Path = typer.Option(..., "--config", help="SCM config JSON."),
    env: str = typer.Option(..., "--env", help="Environment id from the config."),
    n: int = typer.Option(..., "--n", min=1, help="Rounds to draw."),
    policy: str = typer.Option("uniform", "--policy", help="uniform, initial, oracle or JSON."),
    warmup: int = typer.Option(DEFAULTS.n_warmup, "--warmup", min=1, help="Warm-up rounds."),
    seed: int = typer.Option(DEFAULTS.seed, "--seed"),
    out: Path = typer.Option(..., "--out", help="Output CSV."),
) -> None:
    """Draw logged rounds from one SCM environment."""
    run = _Run("simulate", seed)
    scm = ScmConfig.from_json_file(config)
    scm.env(env)
    behaviour = _simulation_policy(policy, scm, env, warmup, derive_seed(run.seed, 1))
    data = sample_rounds(scm, env, behaviour, n, run.seed)
    write_logged_csv(data, out)
    run.logger.info("rounds_sampled", env=env, n=n, policy=behaviour.kind)
    payload = {"config": scm.model_dump(mode="json"), "env": env, "n": n, "policy": policy}
    run.finish(payload, [out], out.parent)
    console.print(f"[green]Wrote {n} rounds:[/green] {out}")


@app.command("test-invariance")
def test_invariance(
    data: Path = typer.Option(..., "--data", help="Logged data CSV."),
    subset: str = typer.Option(..., "--subset", help="Subset like '1' or '0,1'; '' is empty."),
    mode: str = typer.Option("per-action", "--mode", help="fixed, per-action or power-opt."),
    alpha: float = typer.Option(DEFAULTS.alpha, "--alpha", click_type=ALPHA_RANGE),
    m_rule: str = typer.Option(DEFAULTS.m_rule, "--m-rule", help="'sqrt' or an integer."),
    test_policy: Path | None = typer.Option(None, "--test-policy", help="Policy JSON (fixed)."),
    learning_rate: float = typer.Option(DEFAULTS.learning_rate, "--lr", min=0.0),
    iterations: int = typer.Option(DEFAULTS.iterations, "--iterations", min=1),
    diagnostics: Path | None = typer.Option(None, "--diagnostics", help="Trajectory CSV."),
    k: int | None = typer.Option(None, "--k", min=1, help="Action count if not all logged."),
    seed: int = typer.Option(DEFAULTS.seed, "--seed"),
    out: Path | None = typer.Option(None, "--out", help="Report JSON; stdout when absent."),
) -> None:
    """Test invariance of one subset and emit the TestReport JSON."""
    run = _Run("test-invariance", seed)
    _check_mode(mode)
    dataset = read_logged_csv(data, k)
    mask = SubsetMask.parse(subset, dataset.d)
    rule = parse_m_rule(m_rule)
    report: TestReport
    if mode == "per-action":
        report = test_invariance_per_action(dataset, mask, rule, alpha, run.seed)
    elif mode == "power-opt":
        opt = PowerOptConfig(learning_rate=learning_rate, iterations=iterations)
        report = test_invariance_opt_policy(
            dataset, mask, rule, alpha, opt, run.seed, diagnostics_path=diagnostics
        )
    else:
        policy = (
            _load_policy_file(test_policy)
            if test_policy is not None
            else SoftmaxParams.zeros(dataset.k, mask).to_policy(dataset.d)
        )
        report = test_invariance_fixed_policy(dataset, policy, mask, rule, alpha, run.seed)
    payload = report.model_dump(mode="json")
    run.logger.info("invariance_tested", subset=mask.label(), p_value=report.p_value)
    outputs = [] if diagnostics is None else [diagnostics]
    payload_config = {"data": str(data), "subset": subset, "mode": mode, "alpha": alpha}
    if out is None:
        run.finish(payload_config, outputs, _output_dir(run, None))
        console.print_json(json.dumps(payload, sort_keys=True))
        return
    write_json(payload, out)
    run.finish(payload_config, [out, *outputs], out.parent)
    verdict = "[green]accepted[/green]" if report.accepted else "[red]rejected[/red]"
    console.print(f"{mask.label()} {verdict} p={fmt_pvalue(report.p_value)}")


@app.command("learn")
def learn(
    data: Path = typer.Option(..., "--data", help="Logged data CSV."),
    mode: str = typer.Option("per-action", "--mode", help="fixed, per-action or power-opt."),
    alpha: float = typer.Option(DEFAULTS.alpha, "--alpha", click_type=ALPHA_RANGE),
    max_subset_size: int | None = typer.Option(None, "--max-subset-size", min=0),
    folds: int = typer.Option(DEFAULTS.folds, "--folds", min=2),
    m_rule: str = typer.Option(DEFAULTS.m_rule, "--m-rule"),
    learning_rate: float = typer.Option(DEFAULTS.learning_rate, "--lr", min=0.0),
    iterations: int = typer.Option(DEFAULTS.iterations, "--iterations", min=1),
    k: int | None = typer.Option(None, "--k", min=1),
    jobs: int | None = typer.Option(None, "--jobs", min=1),
    seed: int = typer.Option(DEFAULTS.seed, "--seed"),
    out: Path | None = typer.Option(None, "--out", help="LearnResult JSON; stdout when absent."),
) -> None:
    """Learn the best invariant policy over all tested subsets."""
    run = _Run("learn", seed)
    config = LearnerConfig(
        alpha=alpha,
        test_mode=_check_mode(mode),  # type: ignore[arg-type]
        max_subset_size=max_subset_size,
        value_folds=folds,
        seed=run.seed,
        m_rule=m_rule,
        power_opt=PowerOptConfig(learning_rate=learning_rate, iterations=iterations),
        jobs=run.jobs(jobs),
    )
    result = learn_invariant_policy(read_logged_csv(data, k), config)
    payload_config = config.model_dump(mode="json", exclude={"jobs"})
    if out is None:
        run.finish(payload_config, [], _output_dir(run, None))
        console.print_json(result.to_json())
        return
    write_json(result.to_dict(), out)
    run.finish(payload_config, [out], out.parent)
    best = "none" if result.best_subset is None else result.best_subset.label()
    value = fmt_number(result.best_value)
    console.print(f"[green]Best invariant subset:[/green] {best} value={value}")


def _experiment_config(path: Path | None, seed: int, **overrides: Any) -> ExperimentConfig:
    base: dict[str, Any] = {}
    if path is not None:
        try:
            base = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise DataValidationError(f"Invalid experiment config {path}: {exc}") from exc
    base.update({key: value for key, value in overrides.items() if value is not None})
    base["seed"] = seed
    try:
        return ExperimentConfig.model_validate(base)
    except ValueError as exc:
        raise DataValidationError(f"Invalid experiment config: {exc}") from exc


def _output_dir(run: _Run, out_dir: Path | None) -> Path:
    return out_dir if out_dir is not None else run.settings.output_dir / run.command


@app.command("eval-generalization")
def eval_generalization(
    config: Path | None = typer.Option(None, "--config", help="ExperimentConfig JSON."),
    n_train: int | None = typer.Option(None, "--n-train", min=1),
    n_test_envs: int | None = typer.Option(None, "--n-test-envs", min=1),
    n_mc: int | None = typer.Option(None, "--n-mc", min=2),
    extreme_grid: bool = typer.Option(False, "--extreme-grid", help="Use the |gamma|<=6 grid."),
    env_counts: str | None = typer.Option(None, "--env-counts", help="e.g. '2,6'."),
    jobs: int | None = typer.Option(None, "--jobs", min=1),
    seed: int = typer.Option(DEFAULTS.seed, "--seed"),
    out_dir: Path | None = typer.Option(None, "--out-dir"),
) -> None:
    """Regret of invariant vs non-invariant greedy policies on unseen environments."""
    run = _Run("eval-generalization", seed)
    experiment = _experiment_config(
        config,
        run.seed,
        n_train=n_train,
        n_test_envs=n_test_envs,
        n_mc=n_mc,
        extreme_grid=extreme_grid or None,
        train_env_counts=_parse_int_list(env_counts) if env_counts else None,
    )
    frame = rows_to_frame(run_generalization_experiment(experiment, run.jobs(jobs)))
    target = _output_dir(run, out_dir)
    output = write_frame_csv(frame, target / "generalization.csv")
    console.print(frame_table(regret_summary(frame), "Regret by policy"))
    run.finish(experiment.model_dump(mode="json"), [output], target)


@app.command("eval-acceptance")
def eval_acceptance(
    config: Path | None = typer.Option(None, "--config", help="ExperimentConfig JSON."),
    reps: int | None = typer.Option(None, "--reps", min=1, help=f"Default {DEFAULTS.repetitions}."),
    n_grid: str | None = typer.Option(None, "--n-grid", help="e.g. '1000,3000,9000'."),
    env_counts: str | None = typer.Option(None, "--env-counts", help="e.g. '2,6'."),
    mode: str | None = typer.Option(None, "--mode", help="fixed, per-action or power-opt."),
    jobs: int | None = typer.Option(None, "--jobs", min=1),
    seed: int = typer.Option(DEFAULTS.seed, "--seed"),
    out_dir: Path | None = typer.Option(None, "--out-dir"),
) -> None:
    """Acceptance rates of the invariance test per subset and sample size."""
    run = _Run("eval-acceptance", seed)
    experiment = _experiment_config(
        config,
        run.seed,
        repetitions=reps,
        n_grid=_parse_int_list(n_grid) if n_grid else None,
        train_env_counts=_parse_int_list(env_counts) if env_counts else None,
        test_mode=_check_mode(mode) if mode else None,
    )
    frame = rows_to_frame(run_acceptance_experiment(experiment, run.jobs(jobs)))
    target = _output_dir(run, out_dir)
    output = write_frame_csv(frame, target / "acceptance.csv")
    console.print(frame_table(frame, "Acceptance rates", ["envs", "n", "subset", "accept_rate"]))
    run.finish(experiment.model_dump(mode="json"), [output], target)


@app.command("gen-tabular")
def gen_tabular(
    n: int = typer.Option(5_700, "--n", min=1),
    groups: int = typer.Option(21, "--groups", min=1),
    seed: int = typer.Option(DEFAULTS.seed, "--seed"),
    out: Path = typer.Option(..., "--out", help="Output CSV."),
) -> None:
    """Write a synthetic dosing cohort CSV."""
    run = _Run("gen-tabular", seed)
    frame = generate_synthetic_tabular(n, groups, run.seed)
    write_frame_csv(frame, out)
    run.finish({"n": n, "groups": groups}, [out], out.parent)
    console.print(f"[green]Wrote {len(frame)} rows:[/green] {out}")


def _tabular_config(path: Path | None, seed: int, **overrides: Any) -> TabularConfig:
    base: dict[str, Any] = {}
    if path is not None:
        try:
            base = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise DataValidationError(f"Invalid tabular config {path}: {exc}") from exc
    base.update({key: value for key, value in overrides.items() if value is not None})
    base["seed"] = seed
    try:
        return TabularConfig.model_validate(base)
    except ValueError as exc:
        raise DataValidationError(f"Invalid tabular config: {exc}") from exc


@app.command("pipeline-tabular")
def pipeline_tabular(
    data: Path | None = typer.Option(None, "--data", help="Cohort CSV; synthetic when absent."),
    config: Path | None = typer.Option(None, "--config", help="TabularConfig JSON."),
    original: bool = typer.Option(False, "--original", help="Skip the non-invariant feature."),
    max_subset_size: int | None = typer.Option(None, "--max-subset-size", min=0),
    jobs: int | None = typer.Option(None, "--jobs", min=1),
    seed: int = typer.Option(DEFAULTS.seed, "--seed"),
    out_dir: Path | None = typer.Option(None, "--out-dir"),
) -> None:
    """Leave-one-environment-out comparison of Inv, Pred, All and Oracle-Inv."""
    run = _Run("pipeline-tabular", seed)
    tabular = _tabular_config(
        config, run.seed, semi_real=False if original else None, max_subset_size=max_subset_size
    )
    dataset: TabularDataset
    if data is None:
        dataset, summary = TabularDataset.from_frame(generate_synthetic_tabular(seed=run.seed))
    else:
        dataset, summary = load_tabular_csv(data)
    run.logger.info("tabular_ingested", **summary.model_dump())
    result = run_tabular_pipeline(dataset, tabular, run.jobs(jobs))
    target = _output_dir(run, out_dir)
    frame = result.frame()
    outputs = [
        write_frame_csv(frame, target / "leave_one_out.csv"),
        write_json(result.invariant_sets, target / "invariant_sets.json"),
        write_json(
            {"ingestion": summary.model_dump(), "environments": result.environments},
            target / "ingestion.json",
        ),
        write_frame_csv(result.importance, target / "importance.csv"),
    ]
    console.print(frame_table(method_summary(frame), "Held-out value by method"))
    run.finish({"data": str(data), **tabular.model_dump(mode="json")}, outputs, target)


def main(argv: list[str] | None = None) -> int:
    """Run the CLI; 0 on success, 1 on usage errors, 2 on runtime errors."""
    try:
        app(args=argv, standalone_mode=False)
    except click.exceptions.UsageError as exc:
        exc.show()
        return 1
    except click.exceptions.Abort:
        err_console.print("[red]Aborted.[/red]")
        return 1
    except InvariantPolicyError as exc:
        err_console.print(f"[red]{type(exc).__name__}:[/red] {exc}")
        return 2
    except ValidationError as exc:
        err_console.print(f"[red]Invalid settings:[/red] {exc}")
        return 2
    return 0

