"""Experiment orchestration: configs, training runs, evaluation runs and the
metrics files they write."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baseline, sim
from .agents import ALGORITHMS, Learner, PerConfig, TrainingConfig, train_episode
from .encoder import RoiSpec
from .env import EpisodeRecord, IntersectionEnv, Scenario, run_episode
from .nn import QNetwork, load_checkpoint, save_checkpoint
from .reward import RewardParams
from .sim import Terminal

log = logging.getLogger(__name__)

TRAIN_STREAM, EVAL_STREAM = 0, 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    topology: str = "three-way-25x25"
    algo: str = "ddqn-per"
    seed: int = 0
    eval_episodes: int = 250
    pedestrians: tuple[int, int] = (5, 30)
    spawning: bool = True
    training: TrainingConfig = field(default_factory=TrainingConfig)
    per: PerConfig = field(default_factory=PerConfig)
    reward: RewardParams = field(default_factory=RewardParams)
    roi: RoiSpec = field(default_factory=RoiSpec)
    ttc: baseline.TtcParams = field(default_factory=baseline.TtcParams)
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.algo not in ("rule-based",) + ALGORITHMS:
            raise ConfigError(f"algo: unknown algorithm {self.algo!r}")
        if self.eval_episodes < 1:
            raise ConfigError("eval_episodes: must be positive")

    @property
    def scenario(self) -> Scenario:
        return Scenario(self.topology, tuple(self.pedestrians), self.spawning)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return _to_plain(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return _from_plain(cls, data, "")

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.loads(Path(path).read_text())


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(v) for v in obj]
    return obj


def _from_plain(tp, value, path: str):
    where = path or "<root>"
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _from_plain(inner[0], value, path)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        hints = typing.get_type_hints(tp)
        names = {f.name for f in dataclasses.fields(tp) if f.init}
        unknown = sorted(set(value) - names)
        if unknown:
            raise ConfigError(f"{where}: unknown field(s) {unknown}")
        kwargs = {k: _from_plain(hints[k], v, f"{path}.{k}" if path else k) for k, v in value.items()}
        try:
            return tp(**kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: {exc}") from None
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(f"{where}: expected a list of {len(args)} values")
        return tuple(_from_plain(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    raise ConfigError(f"{where}: unsupported field type {tp}")


def episode_seed(master: int, stream: int, index: int) -> int:
    """Independent per-episode seed; training and evaluation use disjoint streams."""
    ss = np.random.SeedSequence(master, spawn_key=(stream, index))
    return int(ss.generate_state(1, np.uint64)[0])


# -- metrics ---------------------------------------------------------------

HISTOGRAM_BINS = {
    "crossing_time": np.arange(0.0, 45.0 + 1e-9, 3.0),
    "mean_speed": np.arange(0.0, 10.0 + 1e-9, 0.5),
    "mean_distance": np.arange(0.0, 20.0 + 1e-9, 1.0),
}


def histogram(values, edges) -> np.ndarray:
    """Counts per bin; out-of-range values (and nan) land in the edge bins."""
    v = np.asarray(values, dtype=float)
    v = np.where(np.isnan(v), np.inf, v)
    idx = np.clip(np.searchsorted(edges, v, side="right") - 1, 0, len(edges) - 2)
    return np.bincount(idx, minlength=len(edges) - 1)


@dataclass
class MetricsSummary:
    episodes: int
    collision_free: float
    successful: float
    means: dict[str, float]
    histograms: dict[str, tuple[list[float], list[int]]]
    outcomes: dict[str, int]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def summarize(records: list[EpisodeRecord]) -> MetricsSummary:
    if not records:
        raise ValueError("cannot summarize an empty record list")
    n = len(records)
    columns = {
        "crossing_time": [r.crossing_time for r in records],
        "mean_speed": [r.mean_speed for r in records],
        "mean_distance": [r.mean_distance for r in records],
    }
    means = {}
    for k, v in columns.items():
        finite = [x for x in v if not math.isnan(x)]
        means[k] = math.fsum(finite) / len(finite) if finite else math.nan
    hists = {k: (HISTOGRAM_BINS[k].tolist(), histogram(v, HISTOGRAM_BINS[k]).tolist()) for k, v in columns.items()}
    outcomes = {t.value: sum(r.outcome is t for r in records) for t in Terminal if t is not Terminal.NONE}
    return MetricsSummary(
        episodes=n,
        collision_free=sum(r.collision_free for r in records) / n,
        successful=sum(r.successful for r in records) / n,
        means=means, histograms=hists, outcomes=outcomes,
    )


EPISODE_FIELDS = ["episode", "seed", "outcome", "speed_violated", "crossing_time", "mean_speed",
                  "mean_distance", "return", "steps"]


def write_episodes(records: list[EpisodeRecord], path: Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(EPISODE_FIELDS)
        for i, r in enumerate(records):
            w.writerow([i, r.seed, r.outcome.value, int(r.speed_violated), repr(r.crossing_time),
                        repr(r.mean_speed), repr(r.mean_distance), repr(r.ret), r.steps])


def read_episodes(path: Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def write_histograms(summary: MetricsSummary, path: Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "bin_low", "bin_high", "count"])
        for name, (edges, counts) in summary.histograms.items():
            for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                w.writerow([name, lo, hi, c])


def write_step_log(records: list[EpisodeRecord], path: Path) -> None:
    with open(path, "w") as f:
        for i, r in enumerate(records):
            for row in r.log:
                f.write(json.dumps({"episode": i, **row}) + "\n")


# -- runs ------------------------------------------------------------------

@dataclass
class TrainingResult:
    checkpoint: Path
    curve: Path
    summary: Path
    learner: Learner
    records: list[EpisodeRecord]


CURVE_FIELDS = ["episode", "return", "steps", "outcome", "epsilon", "beta"]


def _prepare_out(out_dir: str | Path) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"out_dir: cannot write to {out}: {exc}") from None
    return out


def sampling_entropy(learner: Learner) -> dict:
    """Entropy (nats) of the replay sampling distribution vs. uniform."""
    n = len(learner.memory)
    counts = learner.sample_counts[:n].astype(float)
    emp = counts[counts > 0] / counts.sum() if counts.sum() else np.array([1.0])
    out = {
        "memory_size": n,
        "uniform_entropy": math.log(n) if n else 0.0,
        "empirical_entropy": float(-(emp * np.log(emp)).sum()),
        "draws": int(counts.sum()),
    }
    if hasattr(learner.memory, "probabilities") and n:
        p = learner.memory.probabilities()
        p = p[p > 0]
        out["priority_entropy"] = float(-(p * np.log(p)).sum())
    return out


def run_training(cfg: ExperimentConfig, progress=None) -> TrainingResult:
    """Train ``cfg.algo`` for ``cfg.training.episodes`` episodes on ``cfg.topology``."""
    if cfg.algo == "rule-based":
        raise ConfigError("algo: the rule-based baseline has nothing to train")
    out = _prepare_out(cfg.out_dir)
    (out / "config.json").write_text(cfg.dumps())
    tcfg = cfg.training
    env = IntersectionEnv(cfg.scenario, cfg.reward, cfg.roi)
    horizon = cfg.per.beta_horizon or sim.MAX_STEPS * tcfg.episodes
    learner = Learner(cfg.algo, tcfg, cfg.per, seed=cfg.seed, beta_horizon=horizon)
    curve = out / "curve.csv"
    records = []
    with open(curve, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CURVE_FIELDS)
        for ep in range(tcfg.episodes):
            eps = learner.epsilon
            rec = train_episode(env, learner, episode_seed(cfg.seed, TRAIN_STREAM, ep))
            records.append(rec)
            w.writerow([ep, repr(rec.ret), rec.steps, rec.outcome.value, repr(eps), repr(learner.beta)])
            f.flush()
            if (ep + 1) % tcfg.checkpoint_every == 0:
                save_checkpoint(learner.online, out / f"checkpoint_ep{ep + 1:04d}.avqn")
            if progress is not None:
                progress(ep, rec, learner)
    final = out / "final.avqn"
    save_checkpoint(learner.online, final)
    summary = out / "train_summary.json"
    summary.write_text(json.dumps({
        "algo": cfg.algo, "episodes": tcfg.episodes, "global_steps": learner.global_step,
        "updates": learner.n_updates, "target_syncs": learner.sync_steps,
        "sampling": sampling_entropy(learner),
    }, indent=2) + "\n")
    return TrainingResult(final, curve, summary, learner, records)


def read_curve(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def network_policy(net: QNetwork):
    def act(grid, speed, state):
        return int(np.argmax(net.forward(grid, speed)[0]))
    return act


def ttc_policy(params: baseline.TtcParams):
    def act(grid, speed, state):
        return baseline.policy(state, params)
    return act


def evaluate_policy(policy, cfg: ExperimentConfig, episodes: int | None = None,
                    topology: str | None = None, keep_log: bool = False) -> list[EpisodeRecord]:
    scenario = cfg.scenario
    if topology is not None:
        scenario = dataclasses.replace(scenario, topology=topology)
    env = IntersectionEnv(scenario, cfg.reward, cfg.roi)
    n = episodes or cfg.eval_episodes
    return [run_episode(env, policy, episode_seed(cfg.seed, EVAL_STREAM, i), keep_log=keep_log) for i in range(n)]


def run_evaluation(cfg: ExperimentConfig, checkpoint: str | Path | None = None, *,
                   episodes: int | None = None, topology: str | None = None,
                   keep_log: bool = True) -> MetricsSummary:
    """Greedy evaluation of a checkpoint (or the TTC baseline) with output files."""
    if cfg.algo == "rule-based":
        policy = ttc_policy(cfg.ttc)
    else:
        if checkpoint is None:
            raise ConfigError("checkpoint: required unless algo is rule-based")
        policy = network_policy(load_checkpoint(checkpoint))
    out = _prepare_out(cfg.out_dir)
    records = evaluate_policy(policy, cfg, episodes, topology, keep_log)
    summary = summarize(records)
    write_episodes(records, out / "episodes.csv")
    write_histograms(summary, out / "histograms.csv")
    if keep_log:
        write_step_log(records, out / "steps.jsonl")
    doc = summary.to_dict()
    doc.update(algo=cfg.algo, topology=topology or cfg.topology,
               checkpoint=str(checkpoint) if checkpoint else None)
    (out / "summary.json").write_text(json.dumps(doc, indent=2) + "\n")
    return summary


def desk_scale_config(out_dir: str | Path, seed: int = 0, episodes: int = 150,
                      train_every: int = 4) -> ExperimentConfig:
    """Reduced training run: few pedestrians, no mid-episode spawning."""
    return ExperimentConfig(
        topology="three-way-25x25", algo="ddqn-per", seed=seed, eval_episodes=100,
        pedestrians=(5, 10), spawning=False, out_dir=str(out_dir),
        training=TrainingConfig(episodes=episodes, train_every=train_every),
    )
