"""
Command-line entry point

Subcommands:
- gen-phantom: synthetic dataset directory
- train: cross-validated training, checkpoints and metrics CSV
- explain: relevance maps per sample per scenario
- scenarios: inversion curves, correlations, Dice and ranked comparison
- report: Markdown summary and PGM montages

Every run writes resolved_config.json (with the tool version) into --out.
Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

import tensorcore as tc
from attribution import RelevanceBundle, RuleConfig, canonize, explain
from database import get_db_manager
from errors import ConfigError, DataError, GamerError, NumericError
from evalharness import (
    CORRELATION_QUANTILES,
    DEFAULT_QUANTILES,
    RANK_QUANTILE,
    SCENARIOS,
    ScenarioConfig,
    compute_scenario_maps,
    run_scenarios,
    scenario_masks,
    write_pgm_montage,
)
from gamer_net import TOOL_VERSION, NetworkSpec, build, forward_batch, load_checkpoint, micro_spec, save_checkpoint
from phantom import PhantomConfig, checksum, generate, load_dataset, save_dataset, summarize
from trainer import Sample, TrainConfig, train_cv
from volume_io import write_volume
from workers import default_threads

logger = logging.getLogger(__name__)

COMMANDS = ("gen-phantom", "train", "explain", "scenarios", "report")


# ============================================================================
# CONFIGURATION
# ============================================================================

class PathsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dataset: Optional[str] = None
    train_dir: Optional[str] = None
    checkpoint: Optional[str] = None
    scenarios_dir: Optional[str] = None


class RunConfig(BaseModel):
    """Declarative run configuration; unknown keys are rejected"""
    model_config = ConfigDict(extra="forbid")

    seed: int = Field(0, ge=0)
    phantom: PhantomConfig = Field(default_factory=PhantomConfig)
    network: NetworkSpec = Field(default_factory=NetworkSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    rules: RuleConfig = Field(default_factory=RuleConfig)
    scenarios: List[int] = Field(default_factory=lambda: list(SCENARIOS))
    quantiles: List[float] = Field(default_factory=lambda: list(DEFAULT_QUANTILES))
    rank_quantile: float = Field(RANK_QUANTILE, gt=0, le=1)
    correlation_quantiles: List[float] = Field(default_factory=lambda: list(CORRELATION_QUANTILES))
    n_permutations: int = Field(20000, ge=1)
    ig_steps: int = Field(64, ge=1)
    explain_samples: int = Field(8, ge=1)
    montage_samples: int = Field(3, ge=1)
    evaluation_pool: Literal["validation+test", "validation"] = "validation+test"
    paths: PathsConfig = Field(default_factory=PathsConfig)

    @model_validator(mode="after")
    def _check(self) -> "RunConfig":
        if tuple(self.network.input_extents) != tuple(self.phantom.extents):
            raise ValueError(
                f"network.input_extents {self.network.input_extents} differ from phantom.extents {self.phantom.extents}"
            )
        if self.network.paths != self.phantom.contrasts:
            raise ValueError(f"network.paths {self.network.paths} differs from phantom.contrasts {self.phantom.contrasts}")
        unknown = [s for s in self.scenarios if s not in SCENARIOS]
        if unknown:
            raise ValueError(f"Unknown scenario ids {unknown}")
        if any(not 0 <= q <= 1 for q in self.quantiles + self.correlation_quantiles):
            raise ValueError("Quantiles must lie in [0, 1]")
        return self

    def with_seed(self, seed: int) -> "RunConfig":
        """One seed for the run, echoed into every seeded section"""
        return self.model_copy(update={
            "seed": seed,
            "phantom": self.phantom.model_copy(update={"seed": seed}),
            "train": self.train.model_copy(update={"seed": seed}),
        })


def load_config(path: Optional[str], seed: Optional[int]) -> RunConfig:
    """
    Raises:
        ConfigError: Unreadable file, malformed JSON or invalid fields
    """
    data: Dict = {}
    if path:
        source = Path(path)
        if not source.is_file():
            raise ConfigError(f"Config file not found: {source}")
        try:
            data = json.loads(source.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{source}: malformed JSON: {e}")
    try:
        config = RunConfig(**data)
        if seed is not None:
            config = config.with_seed(seed)
        return config
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"]) or "config"
        raise ConfigError(f"Invalid config at '{where}': {first['msg']}")


def write_resolved(config: RunConfig, out_dir: Path, command: str, threads: int) -> Path:
    echo = {
        "tool_version": TOOL_VERSION,
        "command": command,
        "threads": threads,
        "config": config.model_dump(mode="json"),
    }
    target = out_dir / "resolved_config.json"
    target.write_text(json.dumps(echo, indent=2, sort_keys=True))
    return target


# ============================================================================
# SHARED LOADERS
# ============================================================================

def _require(value: Optional[str], what: str) -> Path:
    if not value:
        raise ConfigError(f"paths.{what} is required for this command")
    path = Path(value)
    if not path.exists():
        raise DataError(f"{what} not found: {path}")
    return path


def _checkpoint(config: RunConfig) -> Path:
    if config.paths.checkpoint:
        return _require(config.paths.checkpoint, "checkpoint")
    return _require(config.paths.train_dir, "train_dir") / "model.gmck"


def _evaluation_pool(config: RunConfig, dataset: List[Sample]) -> List[Sample]:
    """Samples listed by the training run's split.json, or the whole dataset without one"""
    if not config.paths.train_dir:
        return dataset
    split_path = Path(config.paths.train_dir) / "split.json"
    if not split_path.is_file():
        raise DataError(f"Split file not found: {split_path}")
    try:
        split = json.loads(split_path.read_text())
        keys = set(split["validation"])
        if config.evaluation_pool == "validation+test":
            keys |= set(split["test"])
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise DataError(f"Malformed split file {split_path}: {e}") from e
    pool = [s for s in dataset if s.key in keys]
    if not pool:
        raise DataError(f"Evaluation pool from {split_path} matches no dataset samples")
    return pool


def _model_and_pool(config: RunConfig) -> Tuple:
    params = load_checkpoint(_checkpoint(config), expected_spec=config.network)
    dataset, truth = load_dataset(_require(config.paths.dataset, "dataset"))
    return params, _evaluation_pool(config, dataset), truth


# ============================================================================
# COMMANDS
# ============================================================================

def cmd_gen_phantom(config: RunConfig, out: Path, threads: int) -> None:
    dataset, truth = generate(config.phantom, threads)
    target = Path(config.paths.dataset) if config.paths.dataset else out / "dataset"
    save_dataset(dataset, truth, target, config.phantom)
    summary = summarize(dataset).to_dict()
    summary["checksum"] = checksum(target)
    summary["dataset"] = str(target)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    logger.info(f"✓ Dataset checksum {summary['checksum']}")


def cmd_train(config: RunConfig, out: Path, threads: int) -> None:
    dataset, _ = load_dataset(_require(config.paths.dataset, "dataset"))
    result = train_cv(dataset, config.network, config.train)
    result.write(out)
    for fold in result.folds:
        save_checkpoint(fold.params, out / "checkpoints" / f"fold{fold.fold}.gmck")
    save_checkpoint(result.selected.params, out / "model.gmck")
    test_subjects = set(result.plan.test)
    split = {
        "selected_fold": result.selected_fold,
        "validation": result.selected.validation_keys,
        "test": [s.key for s in dataset if s.subject_id in test_subjects],
        "plan": result.plan.to_dict(),
    }
    (out / "split.json").write_text(json.dumps(split, indent=2))
    db = get_db_manager(out)
    run_id = db.record_run("train", config.model_dump(mode="json"), TOOL_VERSION, out, config.seed)
    db.record_fold_metrics(run_id, result.to_frame())
    diverged = [f.fold for f in result.folds if f.status != "ok"]
    if diverged and len(diverged) == len(result.folds):
        raise NumericError(f"Every fold diverged: {[f.diagnostics for f in result.folds]}")


def _sample_metadata(sample: Sample) -> Dict:
    return {
        "sample": sample.key,
        "subject_id": sample.subject_id,
        "timepoint": sample.timepoint,
        "age": sample.age,
        "label": sample.label,
        "severity": sample.severity,
    }


def _scenario_sidecar(scenario: ScenarioConfig, bundle: Optional[RelevanceBundle], sample: Sample) -> Dict:
    """Sidecar for one S{id}.vol; gradient scenarios carry no rules or ledger"""
    sidecar = {
        "scenario": scenario.id,
        "scenario_label": scenario.label,
        "method": scenario.method,
        "map_mode": scenario.map_mode,
        "anchor": scenario.anchor,
        "rules": None,
        "anchor_value": None,
        "conservation_residual": None,
    }
    if bundle is not None:
        sidecar.update(bundle.sidecar())
    sidecar.update(_sample_metadata(sample))
    return sidecar


def cmd_explain(config: RunConfig, out: Path, threads: int) -> None:
    params, pool, _ = _model_and_pool(config)
    samples = pool[:config.explain_samples]
    scenarios = [SCENARIOS[i] for i in config.scenarios]
    maps = compute_scenario_maps(samples, params, scenarios, config.rules, config.ig_steps, threads)
    canonical = canonize(params)
    for index, sample in enumerate(samples):
        folder = out / "relevance" / sample.key
        bundles: Dict[Tuple[str, str], RelevanceBundle] = {}
        wanted = {(s.anchor, s.variant) for s in scenarios if s.is_lrp} | {("logit", config.rules.variant)}
        for anchor, variant in sorted(wanted):
            rules = config.rules.model_copy(update={"variant": variant})
            bundles[anchor, variant] = explain(sample, canonical, anchor, rules)
        for scenario in scenarios:
            write_volume(folder / f"S{scenario.id}.vol", maps[scenario.id][index])
            bundle = bundles[scenario.anchor, scenario.variant] if scenario.is_lrp else None
            sidecar = _scenario_sidecar(scenario, bundle, sample)
            (folder / f"S{scenario.id}.json").write_text(json.dumps(sidecar, indent=2, default=float))
        sidecar = bundles["logit", config.rules.variant].sidecar()
        sidecar.update(_sample_metadata(sample))
        (folder / "bundle.json").write_text(json.dumps(sidecar, indent=2, default=float))
    logger.info(f"✓ Wrote relevance maps and sidecars for {len(samples)} samples")


def cmd_scenarios(config: RunConfig, out: Path, threads: int) -> None:
    params, pool, truth = _model_and_pool(config)
    report = run_scenarios(
        pool, params,
        scenario_ids=config.scenarios,
        quantiles=config.quantiles,
        truth=truth,
        rules=config.rules,
        ig_steps=config.ig_steps,
        rank_quantile=config.rank_quantile,
        correlation_quantiles=config.correlation_quantiles,
        n_permutations=config.n_permutations,
        seed=config.seed,
        threads=threads,
    )
    report.to_csv(out)
    db = get_db_manager(out)
    run_id = db.record_run("scenarios", config.model_dump(mode="json"), TOOL_VERSION, out, config.seed)
    db.record_scenario_points(run_id, report.curves)


def _markdown_table(rows: Sequence[Dict], columns: Sequence[str]) -> List[str]:
    lines = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
    for row in rows:
        cells = [f"{row[c]:.4f}" if isinstance(row[c], float) else str(row[c]) for c in columns]
        lines.append("| " + " | ".join(cells) + " |")
    return lines


def cmd_report(config: RunConfig, out: Path, threads: int) -> None:
    scenarios_dir = _require(config.paths.scenarios_dir, "scenarios_dir")
    summary_path = scenarios_dir / "scenarios.json"
    if not summary_path.is_file():
        raise DataError(f"Scenario summary not found: {summary_path}")
    scenario_summary = json.loads(summary_path.read_text())
    lines = ["# Run report", "", f"Tool version {TOOL_VERSION}, seed {config.seed}.", ""]

    if config.paths.train_dir:
        train_summary = json.loads(_require(str(Path(config.paths.train_dir) / "summary.json"), "train summary").read_text())
        lines += ["## Cross-validation", ""]
        rows = [
            {"fold": f["fold"], "status": f["status"], "best_epoch": f["best_epoch"], **f["validation"]}
            for f in train_summary["folds"]
        ]
        lines += _markdown_table(rows, ["fold", "status", "best_epoch", "auc", "accuracy", "sensitivity", "specificity"])
        lines += ["", f"Selected fold: {train_summary['selected_fold']}", ""]

    lines += ["## Scenarios", "", f"Unperturbed AUC: {scenario_summary['baseline_auc']:.4f}", ""]
    dice_scores, control = scenario_summary.get("dice", {}), scenario_summary.get("control_dice", {})
    ranked = [
        {**r, "dice": dice_scores.get(str(r["scenario"]), float("nan")),
         "control_dice": control.get(str(r["scenario"]), float("nan"))}
        for r in scenario_summary["ranking"]
    ]
    lines += _markdown_table(ranked, ["scenario", "label", "drop", "dice", "control_dice"])
    lines += ["", "## Correlation with severity", ""]
    correlations = [r for r in scenario_summary["correlations"] if r["quantile"] == config.rank_quantile]
    lines += _markdown_table(correlations, ["scenario", "quantile", "contrast", "n", "rho", "p_value"])

    top = scenario_summary["ranking"][0]["scenario"]
    if config.paths.dataset and (config.paths.checkpoint or config.paths.train_dir):
        params, pool, truth = _model_and_pool(config)
        samples = pool[:config.montage_samples]
        maps = compute_scenario_maps(samples, params, [SCENARIOS[top]], config.rules, config.ig_steps, threads)
        lines += ["", "## Montages", ""]
        for index, sample in enumerate(samples):
            masks = scenario_masks(sample, maps[top][index], config.rank_quantile, top)
            overlays = [m.mask for m in (masks if isinstance(masks, list) else [masks])]
            overlays.append(truth.tract_for(sample))
            name = f"montage_S{top}_{sample.key}.pgm"
            write_pgm_montage(sample.volumes[0], overlays, out / name)
            lines.append(f"- `{name}`: contrast 0, top-{config.rank_quantile:g} masks of scenario {top}, planted tract")
    (out / "report.md").write_text("\n".join(lines) + "\n")
    logger.info(f"✓ Report written to {out / 'report.md'}")


HANDLERS = {
    "gen-phantom": cmd_gen_phantom,
    "train": cmd_train,
    "explain": cmd_explain,
    "scenarios": cmd_scenarios,
    "report": cmd_report,
}


# ============================================================================
# 64-BIT CHECKS
# ============================================================================

def run_f64_checks(seed: int, tolerance: float = 1e-4, probes: int = 24) -> Dict:
    """
    Finite-difference gradient check and canonization equivalence on the
    micro network, both in 64-bit mode.
    """
    rng = np.random.default_rng(seed)
    spec = micro_spec()
    params = build(spec, seed)
    for name in [n for n in params.buffers if n.endswith(".running_mean")]:
        stem = name[: -len(".running_mean")]
        channels = params.buffers[name].shape
        params.buffers[name] = rng.normal(0.0, 0.1, channels).astype(np.float32)
        params.buffers[f"{stem}.running_var"] = rng.uniform(0.5, 1.5, channels).astype(np.float32)
        params.tensors[f"{stem}.gamma"] = rng.uniform(0.5, 1.5, channels).astype(np.float32)
        params.tensors[f"{stem}.beta"] = rng.normal(0.0, 0.1, channels).astype(np.float32)
    volumes = rng.uniform(0.0, 1.0, (1, spec.paths) + tuple(spec.input_extents))
    ages = [45.0]
    with tc.precision("f64"):
        gradient_error = tc.finite_diff_check(
            lambda x: tc.total(forward_batch(x, ages, params).logits),
            volumes,
            h=1e-5,
            floor=1e-4,
            indices=rng.choice(volumes.size, size=probes, replace=False),
        )
        batch = rng.uniform(0.0, 1.0, (8, spec.paths) + tuple(spec.input_extents))
        raw = forward_batch(batch, ages * 8, params).logits.data
        folded = forward_batch(batch, ages * 8, canonize(params)).logits.data
    canonization_error = float(np.max(np.abs(raw - folded)))
    checks = {
        "gradient_max_relative_error": float(gradient_error),
        "gradient_ok": bool(gradient_error <= tolerance),
        "canonization_max_abs_difference": canonization_error,
        "canonization_ok": bool(canonization_error <= 1e-5),
    }
    checks["passed"] = checks["gradient_ok"] and checks["canonization_ok"]
    return checks


# ============================================================================
# ENTRY POINT
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gamer", description="Volumetric attention attribution toolkit")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--out", required=True, help="Artifact directory")
    parser.add_argument("--seed", type=int, help="Overrides every seed in the config")
    parser.add_argument("--threads", type=int, help="Worker threads (default GAMER_THREADS)")
    parser.add_argument("--f64-checks", action="store_true", help="Run 64-bit verification passes first")
    return parser


def _configure_logging() -> None:
    level = os.getenv("GAMER_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one subcommand.

    Returns:
        Process exit status (0 ok, 2 config, 3 data, 4 numeric)
    """
    load_dotenv()
    args = build_parser().parse_args(argv)
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError(f"--seed must be non-negative, got {args.seed}")
        config = load_config(args.config, args.seed)
        threads = args.threads if args.threads is not None else default_threads()
        if threads < 1:
            raise ConfigError(f"--threads must be >= 1, got {threads}")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_resolved(config, out, args.command, threads)

        if args.f64_checks:
            checks = run_f64_checks(config.seed)
            (out / "checks.json").write_text(json.dumps(checks, indent=2))
            if not checks["passed"]:
                raise NumericError(f"64-bit checks failed: {checks}")
            logger.info("✓ 64-bit checks passed")

        HANDLERS[args.command](config, out, threads)
        logger.info(f"✓ {args.command} finished; artifacts in {out}")
        return 0
    except GamerError as e:
        print(e.one_line(), file=sys.stderr)
        print(f"{args.command} failed: {e}", file=sys.stderr)
        return e.exit_status
    except ValidationError as e:
        error = ConfigError(str(e).splitlines()[0])
        print(error.one_line(), file=sys.stderr)
        return error.exit_status
    except (FileNotFoundError, NotADirectoryError) as e:
        error = DataError(str(e))
        print(error.one_line(), file=sys.stderr)
        return error.exit_status


def main() -> int:
    _configure_logging()
    return dispatch()


if __name__ == "__main__":
    sys.exit(main())
