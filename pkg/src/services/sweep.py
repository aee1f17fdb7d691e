#sweep.py
"""Monte Carlo orchestration for the synthetic sweeps, external-data estimation and oracle checks."""
import logging
import platform
from collections import defaultdict
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from config.experiment import config_hash
from shared.executor import map_ordered, replication_pool
from shared.seeding import ORACLE_STREAM, TEST_STREAM
from src.exceptions.custom_exceptions import InvalidInputException
from src.repositories.dataset import load_csv
from src.repositories.env import EnvRepository, load_fixtures, load_policy
from src.repositories.results import ResultsRepository
from src.schemas.base import BaseSchema
from src.schemas.experiment import ExperimentConfig
from src.schemas.oracle import CheckResult
from src.services import oracle, synthgen
from src.services.estimators import EstimationRun, run_estimators
from src.services.nuisance import kfold_split
from src.services.opl import initial_policy, opl_metrics, train_policy

logger = logging.getLogger(__name__)

GRADIENT_ESTIMATORS = ("ips", "dr", "dolce")
OPE_COLUMNS = ["sweep_var", "value", "estimator", "bias", "variance", "mse", "coverage", "mean_ess"]
OPL_COLUMNS = ["sweep_var", "value", "estimator", "ni", "ni_se", "osi", "osi_se", "regret", "regret_se", "ni_missing"]
PROVENANCE_COLUMNS = ["truth", "replications", "config_hash", "env_seed", "data_seed"]


class ReplicationTask(BaseSchema):
    """One (grid value, replication) unit of work; picklable for process pools."""

    config: ExperimentConfig
    value: float
    replication: int
    truth: Optional[float] = None


def run_ope_replication(task: ReplicationTask) -> dict:
    synth = task.config.synth_at(task.value)
    nuisance = task.config.nuisance
    env = synthgen.make_env(synth)
    data = synthgen.generate(synth, env, task.replication)
    policy = synthgen.target_policy(synth, env)
    folds = kfold_split(data.n, nuisance.k_folds, synth.data_seed, task.replication)
    run = run_estimators(data, policy, task.config.sweep.estimators, nuisance, folds, data.propensities)
    rows = []
    for name, result in run.results.items():
        report = result.report
        rows.append(
            {
                "value": task.value,
                "replication": task.replication,
                "estimator": name,
                "estimate": report.value,
                "se": report.se,
                "ci_low": report.ci_low,
                "ci_high": report.ci_high,
                "ess": report.ess,
                "covered": report.covers(task.truth),
            }
        )
    return {"rows": rows, "diagnostics": run.diagnostics}


def run_opl_replication(task: ReplicationTask) -> dict:
    config = task.config
    synth = config.synth_at(task.value)
    train = config.train
    env = synthgen.make_env(synth)
    batch = synthgen.draw(synth, env, task.replication, exploration_floor=train.exploration_floor)
    test = synthgen.draw(
        synth,
        env,
        task.replication,
        n=config.sweep.test_samples,
        stream=TEST_STREAM,
        exploration_floor=train.exploration_floor,
    )
    data = batch.dataset
    folds = kfold_split(data.n, config.nuisance.k_folds, synth.data_seed, task.replication)
    start = initial_policy(data.num_actions, data.d, train, task.replication)
    rows, trajectory = [], []
    for name in config.sweep.estimators:
        if name not in GRADIENT_ESTIMATORS:
            continue
        run = train_policy(data, train, config.nuisance, folds, initial=start, estimator=name, propensities=data.propensities)
        metrics = opl_metrics(
            run.policy,
            test.logging_probs,
            test.dataset.x,
            test.mean_rewards,
            start,
            run.first_gradient,
            train.step_size,
        )
        rows.append({"value": task.value, "replication": task.replication, "estimator": name, **metrics.model_dump()})
        trajectory.extend(
            {
                "value": task.value,
                "replication": task.replication,
                "data_seed": synth.data_seed,
                "step": step,
                "estimator": name,
                "grad_norm": norm,
            }
            for step, norm in enumerate(run.grad_norms.tolist())
        )
    return {"rows": rows, "trajectory": trajectory}


def _mean_and_se(values: list[float]) -> tuple[float, float]:
    array = np.asarray(values, dtype=float)
    if array.size == 0:
        return float("nan"), float("nan")
    se = float(np.std(array, ddof=1) / np.sqrt(array.size)) if array.size > 1 else 0.0
    return float(np.mean(array)), se


def aggregate_ope(rows: list[dict], truths: dict[float, float]) -> list[dict]:
    """Bias, variance, MSE and coverage per (grid value, estimator), in first-seen order."""
    groups: dict[tuple, list[dict]] = defaultdict(list)
    for row in rows:
        groups[(row["value"], row["estimator"])].append(row)
    out = []
    for (value, name), members in groups.items():
        estimates = np.array([m["estimate"] for m in members])
        truth = truths[value]
        mean = float(np.mean(estimates))
        out.append(
            {
                "value": value,
                "estimator": name,
                "bias": mean - truth,
                "variance": float(np.mean((estimates - mean) ** 2)),
                "mse": float(np.mean((estimates - truth) ** 2)),
                "coverage": float(np.mean([m["covered"] for m in members])),
                "mean_ess": float(np.mean([m["ess"] for m in members])),
                "truth": truth,
                "replications": len(members),
            }
        )
    return out


def aggregate_opl(rows: list[dict]) -> list[dict]:
    groups: dict[tuple, list[dict]] = defaultdict(list)
    for row in rows:
        groups[(row["value"], row["estimator"])].append(row)
    out = []
    for (value, name), members in groups.items():
        ni_values = [m["ni"] for m in members if m["ni"] is not None]
        ni, ni_se = _mean_and_se(ni_values)
        osi, osi_se = _mean_and_se([m["osi"] for m in members])
        regret, regret_se = _mean_and_se([m["regret"] for m in members])
        out.append(
            {
                "value": value,
                "estimator": name,
                "ni": ni,
                "ni_se": ni_se,
                "osi": osi,
                "osi_se": osi_se,
                "regret": regret,
                "regret_se": regret_se,
                "ni_missing": len(members) - len(ni_values),
                "replications": len(members),
            }
        )
    return out


class SweepService:
    def __init__(self, config: ExperimentConfig, output_dir: Optional[str | Path] = None, jobs: Optional[int] = None):
        self.config = config
        self.output_dir = Path(output_dir or config.sweep.output_dir)
        self.jobs = jobs or config.sweep.jobs
        self.results = ResultsRepository(self.output_dir)
        self.envs = EnvRepository(self.output_dir)
        self.config_hash = config_hash(config)

    def _provenance(self) -> dict:
        return {
            "sweep_var": self.config.sweep.sweep_var,
            "config_hash": self.config_hash,
            "env_seed": self.config.synth.env_seed,
            "data_seed": self.config.synth.data_seed,
        }

    def _tasks(self, truths: dict[float, float]) -> list[ReplicationTask]:
        return [
            ReplicationTask(config=self.config, value=value, replication=b, truth=truths.get(value))
            for value in self.config.sweep.grid
            for b in range(self.config.sweep.replications)
        ]

    async def write_manifest(self, command: str, outputs: list[str]) -> Path:
        return await self.results.write_report(
            "manifest.json",
            {
                "command": command,
                "config": self.config.model_dump(mode="json"),
                "config_hash": self.config_hash,
                "outputs": outputs,
                "numpy": np.__version__,
                "pandas": pd.__version__,
                "python": platform.python_version(),
            },
        )

    def ground_truths(self) -> dict[float, float]:
        truths = {}
        for value in self.config.sweep.grid:
            synth = self.config.synth_at(value)
            env = synthgen.make_env(synth)
            policy = synthgen.target_policy(synth, env)
            truths[value] = synthgen.true_value_mc(synth, env, policy, self.config.sweep.truth_samples)
            logger.info(f"{self.config.sweep.sweep_var}={value}: true value {truths[value]:.6f}")
        return truths

    async def cmd_synth_ope(self) -> list[dict]:
        sweep = self.config.sweep
        logger.info(
            f"Starting OPE sweep over {sweep.sweep_var} ({len(sweep.grid)} values x {sweep.replications} replications)"
        )
        await self.envs.save_synth_env(synthgen.make_env(self.config.synth))
        truths = self.ground_truths()
        async with replication_pool(self.jobs) as pool:
            outcomes = await map_ordered(pool, run_ope_replication, self._tasks(truths))
        rows = [row for outcome in outcomes for row in outcome["rows"]]
        summary = [{**self._provenance(), **row} for row in aggregate_ope(rows, truths)]
        await self.results.write_rows("ope_results.csv", summary, OPE_COLUMNS + PROVENANCE_COLUMNS)
        await self.results.write_rows("ope_replications.csv", [{**self._provenance(), **row} for row in rows])
        first = {value: outcomes[i * sweep.replications]["diagnostics"] for i, value in enumerate(sweep.grid)}
        await self.results.write_report("diagnostics.json", {str(value): diag for value, diag in first.items()})
        await self.write_manifest("synth-ope", ["ope_results.csv", "ope_replications.csv", "diagnostics.json", "env.json"])
        logger.info(f"OPE sweep finished: {len(summary)} result rows")
        return summary

    async def cmd_synth_opl(self) -> list[dict]:
        sweep = self.config.sweep
        estimators = [name for name in sweep.estimators if name in GRADIENT_ESTIMATORS]
        if not estimators:
            raise InvalidInputException("no gradient estimator selected; choose from ips, dr, dolce")
        logger.info(
            f"Starting OPL sweep over {sweep.sweep_var} with {estimators} "
            f"({len(sweep.grid)} values x {sweep.replications} replications)"
        )
        await self.envs.save_synth_env(synthgen.make_env(self.config.synth))
        async with replication_pool(self.jobs) as pool:
            outcomes = await map_ordered(pool, run_opl_replication, self._tasks({}))
        rows = [row for outcome in outcomes for row in outcome["rows"]]
        trajectory = [row for outcome in outcomes for row in outcome["trajectory"]]
        provenance = self._provenance()
        summary = [{**provenance, **row} for row in aggregate_opl(rows)]
        columns = OPL_COLUMNS + ["replications", "config_hash", "env_seed", "data_seed"]
        await self.results.write_rows("opl_results.csv", summary, columns)
        await self.results.write_rows("opl_replications.csv", [{**provenance, **row} for row in rows])
        await self.results.write_rows("opl_trajectory.csv", [{**provenance, **row} for row in trajectory])
        await self.write_manifest(
            "synth-opl", ["opl_results.csv", "opl_replications.csv", "opl_trajectory.csv", "env.json"]
        )
        logger.info(f"OPL sweep finished: {len(summary)} result rows")
        return summary

    async def cmd_estimate(self, dataset_path: str | Path, policy_path: str | Path, seed: int = 0) -> EstimationRun:
        data = load_csv(dataset_path)
        policy = load_policy(policy_path)
        if policy.d is not None and policy.d != data.d:
            raise InvalidInputException(f"policy expects {policy.d} context features, dataset has {data.d}")
        if policy.num_actions != data.num_actions:
            if policy.num_actions < data.num_actions:
                raise InvalidInputException(
                    f"policy covers {policy.num_actions} actions, dataset logs {data.num_actions}"
                )
            data = data.model_copy(update={"num_actions": policy.num_actions})
        folds = kfold_split(data.n, self.config.nuisance.k_folds, seed)
        run = run_estimators(data, policy, self.config.sweep.estimators, self.config.nuisance, folds)
        rows = [
            {**result.report.to_row(data.num_lags), "config_hash": self.config_hash, "seed": seed}
            for result in run.results.values()
        ]
        await self.results.write_rows("estimates.csv", rows)
        await self.results.write_report(
            "diagnostics.json",
            {
                "n": data.n,
                "lags": data.lag_labels,
                "estimators": run.diagnostics,
                "per_lag_values": {name: r.report.per_lag_values for name, r in run.results.items() if r.report.per_lag_values},
                "refused": run.refused,
            },
        )
        await self.write_manifest("estimate", ["estimates.csv", "diagnostics.json"])
        return run

    async def cmd_oracle_check(self, fixtures_dir: str | Path, random_seeds: int = 100) -> list[CheckResult]:
        fixtures = load_fixtures(fixtures_dir)
        results = oracle.run_identity_suite(fixtures, random_seeds)
        for check, residual in oracle.max_residuals(results).items():
            logger.info(f"{check}: max residual {residual:.3e}")
        provenance = {"config_hash": self.config_hash, "random_seeds": random_seeds, "seed_stream": ORACLE_STREAM}
        await self.results.write_rows("oracle_check.csv", [{**provenance, **result.model_dump()} for result in results])
        return results
