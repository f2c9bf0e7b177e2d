"""Experiment plumbing: config files, training runs, greedy evaluation.

A run directory is a deterministic function of its config and seeds. Each
seed trains independently with periodic greedy evaluation; the directory
collects per-point raw returns (evals.csv), the cross-seed curve
(curves.csv), per-seed best and latest checkpoints, and a summary.json whose
headline number is the best evaluation point across all seeds. Interrupted
runs resume from the latest per-seed checkpoint.

Emitted CSVs open with a `# <schema>` comment line naming their layout so
downstream readers can reject files they do not understand.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import scenarios
from .baselines import BASELINE_NAMES, baseline_act, make_baseline
from .dqn import DQNTrainer
from .engine import ASSIGNED, COMPASS, COMPLETED, Engine
from .features import REPOSITION, Observation
from .policy import PolicyNet, forward, load_policy, save_policy, select_greedy
from .ppo import PPOTrainer
from .transitions import PERSPECTIVES, TrainerConfig, rollout_episode

CURVES_SCHEMA = "curves-v1"
EVALS_SCHEMA = "evals-v1"
ARROWS_SCHEMA = "arrows-v1"
SUMMARY_SCHEMA = "summary-v1"

ALGOS = ("dqn", "ppo", "baseline")
DTYPES = {"float64": np.float64, "float32": np.float32}

# Evaluation episodes draw their environment seeds from this stream, shared
# by every candidate (trained or baseline), so comparisons are paired.
_EVAL_TAG = 271828
_BASELINE_TAG = 31415


@dataclass
class ExperimentConfig:
    """Everything a training or baseline run needs, file- and CLI-settable."""

    domain: str
    variant: Optional[str] = None
    algo: str = "dqn"
    baseline: Optional[str] = None
    perspective: str = "driver"
    seeds: tuple[int, ...] = (0,)
    budget: int = 1000  # episodes for dqn, epochs for ppo
    eval_every: int = 50
    eval_episodes: int = 5
    n_drivers: Optional[int] = None
    data_path: Optional[str] = None
    fixed_day: Optional[int] = None
    simple_mode: bool = False
    dtype: str = "float64"
    out_dir: str = "runs/latest"
    trainer: TrainerConfig = field(default_factory=TrainerConfig)

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        if self.budget < 0:
            raise ValueError("budget cannot be negative")
        if self.eval_every <= 0 or self.eval_episodes <= 0:
            raise ValueError("eval_every and eval_episodes must be positive")
        if self.algo not in ALGOS:
            raise ValueError(f"algo must be one of {ALGOS}")
        if self.algo == "baseline":
            if self.baseline not in BASELINE_NAMES:
                raise ValueError(f"baseline must be one of {BASELINE_NAMES}")
        if self.perspective not in PERSPECTIVES:
            raise ValueError(f"perspective must be one of {PERSPECTIVES}")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {tuple(DTYPES)}")


# ---------------------------------------------------------------------------
# config file format: `key = value` lines, # comments, trainer.* overrides
# ---------------------------------------------------------------------------

# Fields whose default is None cannot reveal their type by inspection.
_NONE_FIELD_TYPES = {
    "variant": str,
    "baseline": str,
    "n_drivers": int,
    "data_path": str,
    "fixed_day": int,
}


def _coerce(key: str, current, text: str):
    text = text.strip()
    if text.lower() == "none":
        return None
    if current is None:
        caster = _NONE_FIELD_TYPES.get(key.split(".")[-1], str)
        return caster(text)
    if isinstance(current, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {text!r}")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, tuple):
        return tuple(int(v) for v in text.replace(",", " ").split())
    return text


def parse_config_text(text: str) -> dict[str, str]:
    """Raw `key = value` pairs from a config file body."""
    settings: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        settings[key.strip()] = value.strip()
    return settings


def apply_settings(config: ExperimentConfig, settings: dict[str, str]) -> ExperimentConfig:
    """A new config with string settings coerced onto config's fields."""
    base: dict = {}
    trainer_kw: dict = {}
    exp_fields = {f.name for f in fields(ExperimentConfig)} - {"trainer"}
    tr_fields = {f.name for f in fields(TrainerConfig)}
    for key, text in settings.items():
        if key.startswith("trainer."):
            name = key[len("trainer."):]
            if name not in tr_fields:
                raise ValueError(f"unknown trainer setting {name!r}")
            trainer_kw[name] = _coerce(key, getattr(config.trainer, name), text)
        elif key in exp_fields:
            base[key] = _coerce(key, getattr(config, key), text)
        else:
            raise ValueError(f"unknown setting {key!r}")
    cfg = replace(config, **base) if base else config
    if trainer_kw:
        cfg = replace(cfg, trainer=replace(config.trainer, **trainer_kw))
    return cfg


def load_config(path=None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Config from an optional file plus override settings. domain is required."""
    settings: dict[str, str] = {}
    if path is not None:
        settings.update(parse_config_text(Path(path).read_text()))
    settings.update(overrides or {})
    if "domain" not in settings:
        raise ValueError("config needs a domain")
    seed_cfg = ExperimentConfig(domain=settings["domain"])
    return apply_settings(seed_cfg, settings)


def format_config(config: ExperimentConfig) -> str:
    """Canonical `key = value` dump; load_config round-trips it."""
    lines = []
    for f in fields(ExperimentConfig):
        if f.name == "trainer":
            continue
        v = getattr(config, f.name)
        if isinstance(v, tuple):
            v = " ".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    for f in fields(TrainerConfig):
        lines.append(f"trainer.{f.name} = {getattr(config.trainer, f.name)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# actors and evaluation
# ---------------------------------------------------------------------------


def scenario_for(config: ExperimentConfig):
    return scenarios.build_scenario(config.domain, config.variant, config.n_drivers,
                                    config.data_path, config.fixed_day,
                                    config.simple_mode)


def make_trainer(config: ExperimentConfig, seed: int):
    scenario = scenario_for(config)
    dtype = DTYPES[config.dtype]
    if config.algo == "dqn":
        return DQNTrainer(scenario, config.trainer, config.perspective, seed, dtype)
    if config.algo == "ppo":
        return PPOTrainer(scenario, config.trainer, seed, dtype)
    raise ValueError(f"{config.algo!r} does not train")


def greedy_actor(net: PolicyNet) -> Callable[[Observation], int]:
    def act(obs: Observation) -> int:
        return select_greedy(forward(net, obs).scores)

    return act


def baseline_actor(name: str, scenario, rng=None) -> Callable[[Observation], int]:
    spec = make_baseline(name, scenario)
    rng = np.random.default_rng([_BASELINE_TAG]) if rng is None else rng

    def act(obs: Observation) -> int:
        return baseline_act(spec, obs, rng)

    return act


@dataclass
class EvalStats:
    returns: np.ndarray  # one episodic return per eval episode
    served: np.ndarray  # fraction of created orders assigned or completed

    @property
    def mean(self) -> float:
        return float(self.returns.mean())

    @property
    def stderr(self) -> float:
        if len(self.returns) < 2:
            return 0.0
        return float(self.returns.std(ddof=1) / math.sqrt(len(self.returns)))

    @property
    def served_mean(self) -> float:
        return float(self.served.mean())


def evaluate(act, scenario, episodes: int, tag: int = _EVAL_TAG) -> EvalStats:
    engine = Engine()
    returns = np.empty(episodes)
    served = np.empty(episodes)
    for e in range(episodes):
        log = rollout_episode(engine, scenario, [tag, e], act)
        returns[e] = log.total_reward
        created = log.counts.get("created", 0)
        handled = log.counts.get(COMPLETED, 0) + log.counts.get(ASSIGNED, 0)
        served[e] = handled / created if created else 0.0
    return EvalStats(returns, served)


# ---------------------------------------------------------------------------
# training runs
# ---------------------------------------------------------------------------


def eval_points(budget: int, eval_every: int) -> list[int]:
    """Unit counts at which to evaluate: 0, every eval_every, and the end."""
    pts = list(range(0, budget + 1, eval_every))
    if pts[-1] != budget:
        pts.append(budget)
    return pts


def _trained_units(trainer) -> int:
    return trainer.episode if isinstance(trainer, DQNTrainer) else trainer.epoch_idx


def _advance(trainer, target: int) -> None:
    while _trained_units(trainer) < target:
        if isinstance(trainer, DQNTrainer):
            trainer.run_episode()
        else:
            trainer.run_epoch()


def _row_from_stats(unit: int, stats: EvalStats) -> dict:
    return {
        "unit": unit,
        "mean": stats.mean,
        "stderr": stats.stderr,
        "served_mean": stats.served_mean,
        "returns": stats.returns.tolist(),
        "served": stats.served.tolist(),
    }


def _checkpoint_meta(config: ExperimentConfig, seed: int, unit: int) -> dict:
    return {
        "algo": config.algo,
        "domain": config.domain,
        "variant": config.variant,
        "perspective": config.perspective,
        "seed": seed,
        "unit": unit,
    }


def _train_one_seed(config: ExperimentConfig, seed: int, seed_dir: Path,
                    points: list[int], eval_scenario) -> list[dict]:
    seed_dir.mkdir(parents=True, exist_ok=True)
    trainer = make_trainer(config, seed)
    progress_path = seed_dir / "progress.json"
    state_path = seed_dir / "state.ckpt"
    best_path = seed_dir / "best.ckpt"

    rows: list[dict] = []
    if progress_path.exists():
        rows = json.loads(progress_path.read_text())["rows"]
        if rows and state_path.exists():
            net, _, extra = load_policy(state_path)
            trainer.net.copy_from(net)
            trainer.load_state_arrays(extra)
    best = max((r["mean"] for r in rows), default=-math.inf)
    act = greedy_actor(trainer.net)

    for unit in points[len(rows):]:
        _advance(trainer, unit)
        stats = evaluate(act, eval_scenario, config.eval_episodes)
        rows.append(_row_from_stats(unit, stats))
        save_policy(state_path, trainer.net, meta=_checkpoint_meta(config, seed, unit),
                    extra=trainer.state_arrays())
        if stats.mean > best:
            best = stats.mean
            meta = _checkpoint_meta(config, seed, unit)
            meta["eval_mean"] = stats.mean
            save_policy(best_path, trainer.net, meta=meta)
        progress_path.write_text(json.dumps({"rows": rows}) + "\n")
    return rows


def _write_evals_csv(path: Path, config: ExperimentConfig, all_rows: dict) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {EVALS_SCHEMA}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["seed", "episodes_or_epochs", "episode", "return", "served"])
        for seed in config.seeds:
            for row in all_rows[seed]:
                for e, (ret, srv) in enumerate(zip(row["returns"], row["served"])):
                    writer.writerow([seed, row["unit"], e, repr(float(ret)),
                                     repr(float(srv))])


def _write_curves_csv(path: Path, config: ExperimentConfig, points: list[int],
                      all_rows: dict) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {CURVES_SCHEMA}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["episodes_or_epochs", "mean_return", "std_across_seeds"])
        for i, unit in enumerate(points):
            means = np.array([all_rows[s][i]["mean"] for s in config.seeds])
            std = float(means.std(ddof=1)) if len(means) > 1 else 0.0
            writer.writerow([unit, repr(float(means.mean())), repr(std)])


def _summarize(config: ExperimentConfig, all_rows: dict) -> dict:
    per_seed = {}
    best = None
    for seed in config.seeds:
        top = max(all_rows[seed], key=lambda r: r["mean"])
        per_seed[str(seed)] = {
            "unit": top["unit"],
            "mean": top["mean"],
            "stderr": top["stderr"],
            "served_mean": top["served_mean"],
        }
        if best is None or top["mean"] > best[1]["mean"]:
            best = (seed, per_seed[str(seed)])
    return {
        "schema": SUMMARY_SCHEMA,
        "domain": config.domain,
        "variant": config.variant,
        "algo": config.algo,
        "perspective": config.perspective,
        "best_seed": best[0],
        "best": dict(best[1]),
        "per_seed": per_seed,
    }


def run_train(config: ExperimentConfig) -> Path:
    """Train every seed with periodic evaluation; returns the run directory."""
    run_dir = Path(config.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(format_config(config))
    points = eval_points(config.budget, config.eval_every)
    eval_scenario = scenario_for(config)
    all_rows = {}
    for seed in config.seeds:
        all_rows[seed] = _train_one_seed(config, seed, run_dir / f"seed{seed}",
                                         points, eval_scenario)
    _write_evals_csv(run_dir / "evals.csv", config, all_rows)
    _write_curves_csv(run_dir / "curves.csv", config, points, all_rows)
    summary = _summarize(config, all_rows)
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return run_dir


# ---------------------------------------------------------------------------
# standalone evaluation
# ---------------------------------------------------------------------------


def make_actor(source, scenario, domain: Optional[str] = None):
    """Actor from a baseline name or checkpoint path; returns (act, label).

    A checkpoint that records its training domain must match the requested
    one; crossing domains silently would make every comparison suspect.
    """
    if isinstance(source, str) and source in BASELINE_NAMES:
        return baseline_actor(source, scenario), source
    net, meta, _ = load_policy(source)
    trained_on = meta.get("domain")
    if domain is not None and trained_on is not None and trained_on != domain:
        raise ValueError(
            f"checkpoint {source} was trained on {trained_on!r}, asked to run on {domain!r}")
    return greedy_actor(net), str(source)


def run_eval(source, domain: str, variant: Optional[str] = None, episodes: int = 5,
             n_drivers: Optional[int] = None, data_path=None,
             fixed_day: Optional[int] = None, simple_mode: bool = False) -> dict:
    """Greedy evaluation of a checkpoint or a named baseline."""
    scenario = scenarios.build_scenario(domain, variant, n_drivers, data_path,
                                        fixed_day, simple_mode)
    act, label = make_actor(source, scenario, domain)
    stats = evaluate(act, scenario, episodes)
    result = {
        "source": label,
        "domain": domain,
        "variant": variant,
        "episodes": episodes,
        "mean_return": stats.mean,
        "stderr": stats.stderr,
        "returns": stats.returns.tolist(),
    }
    if domain == "distribute":
        result["served_percent"] = 100.0 * stats.served_mean
        result["served"] = stats.served.tolist()
    return result


# ---------------------------------------------------------------------------
# reposition flow field
# ---------------------------------------------------------------------------


def reposition_field(act, scenario, episodes: int, bins: int = 10,
                     tag: int = _EVAL_TAG) -> list[tuple]:
    """Where drivers reposition and which way they head.

    Bins the (normalized) positions of drivers at repositioning decisions
    into a bins x bins grid and averages the chosen compass vectors. Rows
    are (bin_x, bin_y, mean_dx, mean_dy, visits) for visited bins only.
    """
    sums = np.zeros((bins, bins, 2))
    visits = np.zeros((bins, bins), dtype=int)

    def spy(obs: Observation) -> int:
        a = act(obs)
        if obs.action_set.kind == REPOSITION:
            x, y = obs.drivers[obs.selected_index, :2]
            bx = min(int(x * bins), bins - 1)
            by = min(int(y * bins), bins - 1)
            sums[bx, by] += COMPASS[a]
            visits[bx, by] += 1
        return a

    engine = Engine()
    for e in range(episodes):
        rollout_episode(engine, scenario, [tag, e], spy)
    rows = []
    for bx in range(bins):
        for by in range(bins):
            if visits[bx, by]:
                mean = sums[bx, by] / visits[bx, by]
                rows.append((bx, by, float(mean[0]), float(mean[1]), int(visits[bx, by])))
    return rows


def write_arrow_field(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {ARROWS_SCHEMA}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["bin_x", "bin_y", "mean_dx", "mean_dy", "visits"])
        for row in rows:
            writer.writerow([row[0], row[1], repr(row[2]), repr(row[3]), row[4]])


def read_metric_csv(path):
    """Returns (schema, header, rows) for any harness-emitted CSV."""
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if not first.startswith("# "):
            raise ValueError(f"{path}: missing schema comment line")
        schema = first[2:]
        reader = csv.reader(fh)
        header = next(reader)
        return schema, header, [tuple(row) for row in reader]
