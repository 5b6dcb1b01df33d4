"""GRPO / FunRL training loop over the tabular policy.

One step: draw a batch of samples, sample a group of rollouts per sample,
score them, turn rewards into (optionally entropy-adjusted) advantages, and
take one gradient-ascent step on the clipped surrogate with a KL penalty to
the initial policy. The sampling policy is refreshed every step.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .policy import NonFiniteGradient, PolicyParams, apply_update, greedy_rollout, sample_rollout, surrogate_gradient
from .prior import StructuredPrior
from .rewardkit import BAD_FORMAT, compute_reward
from .rlcore import AGGREGATIONS, ENTROPY_MODES, RolloutGroup, advantage_report, cot_entropy
from .taskbench import EvalReport, Sample, build_vocab, evaluate, render_prompt

ALGORITHMS = ("grpo", "funrl")
ADJUST_SCOPES = ("all", "cot")


class ConfigError(ValueError):
    pass


def default_prior() -> dict:
    return {"type": "structured", "grammar": 10.0, "copy_query": 2.0, "copy_tools": 1.0,
            "induction": 4.0, "relevance": 3.0, "structure": 3.0, "think_stop": 1.5}


@dataclass
class TrainConfig:
    algorithm: str = "funrl"
    group_size: int = 8
    batch_size: int = 4
    epochs: int = 1
    max_steps: int | None = None
    learning_rate: float = 1000.0
    epsilon: float = 0.2
    beta: float = 0.001
    lam: float = 2.0
    alpha: float = 0.1
    entropy_mode: str = "plugin"
    entropy_aggregation: str = "mean_per_token"
    adjust_scope: str = "all"
    max_len: int = 48
    validation_fraction: float = 0.1
    seed: int = 0
    temperature: float = 1.0
    window: int = 3
    buckets: int = 4096
    checkpoint_every: int = 0
    prior: dict | None = field(default_factory=default_prior)

    def validate(self) -> "TrainConfig":
        def need(ok, msg):
            if not ok:
                raise ConfigError(msg)

        need(self.algorithm in ALGORITHMS, f"algorithm must be one of {ALGORITHMS}")
        need(self.group_size >= 2, "group_size must be >= 2")
        need(self.batch_size >= 1, "batch_size must be >= 1")
        need(self.epochs >= 1, "epochs must be >= 1")
        need(self.max_steps is None or self.max_steps >= 0, "max_steps must be >= 0")
        need(math.isfinite(self.learning_rate) and self.learning_rate >= 0, "learning_rate must be >= 0")
        need(0 < self.epsilon < 1, "epsilon must lie in (0, 1)")
        need(self.beta >= 0, "beta must be >= 0")
        need(self.lam >= 0, "lambda must be >= 0")
        need(self.alpha > 0, "alpha must be > 0")
        need(self.entropy_mode in ENTROPY_MODES, f"entropy_mode must be one of {ENTROPY_MODES}")
        need(self.entropy_aggregation in AGGREGATIONS, f"entropy_aggregation must be one of {AGGREGATIONS}")
        need(self.adjust_scope in ADJUST_SCOPES, f"adjust_scope must be one of {ADJUST_SCOPES}")
        need(self.max_len >= 1, "max_len must be >= 1")
        need(0 <= self.validation_fraction < 1, "validation_fraction must lie in [0, 1)")
        need(self.temperature > 0, "temperature must be > 0")
        need(self.window >= 1 and self.buckets >= 1, "window and buckets must be >= 1")
        need(self.checkpoint_every >= 0, "checkpoint_every must be >= 0")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        try:
            return cls(**d).validate()
        except TypeError as e:
            raise ConfigError(str(e)) from None


@dataclass
class StepMetrics:
    step: int
    mean_reward: float
    mean_kl: float
    mean_entropy: float
    format_failure_rate: float
    clip_hit_fraction: float
    zero_variance_fraction: float
    ratio_clip_fraction: float
    mean_length: float
    wall_clock: float = 0.0

    def to_dict(self, with_time: bool = False) -> dict:
        d = dataclasses.asdict(self)
        if not with_time:
            d.pop("wall_clock")
        return d


METRIC_FIELDS = [f.name for f in dataclasses.fields(StepMetrics) if f.name != "wall_clock"]


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, diagnostics: dict, cause: Exception):
        super().__init__(f"step {step}: {cause}")
        self.step = step
        self.diagnostics = diagnostics


def initial_params(config: TrainConfig, vocab=None) -> PolicyParams:
    vocab = vocab or build_vocab()
    prior = None
    if config.prior:
        weights = {k: v for k, v in config.prior.items() if k != "type"}
        prior = StructuredPrior(vocab, **weights)
    return PolicyParams(vocab, config.window, config.buckets, config.temperature, prior)


def split_dataset(dataset: Sequence[Sample], fraction: float, seed: int) -> tuple[list, list]:
    """Deterministic (train, holdout) split; the holdout gets round(fraction * N)."""
    order = np.random.default_rng([seed, 7]).permutation(len(dataset))
    n_hold = int(round(fraction * len(dataset)))
    hold = sorted(order[:n_hold].tolist())
    hold_set = set(hold)
    return [s for i, s in enumerate(dataset) if i not in hold_set], [dataset[i] for i in hold]


# ---------------------------------------------------------------------------
# state


@dataclass
class _LoopState:
    step: int
    epoch: int
    cursor: int
    order: list
    order_rng: np.random.Generator
    rollout_rng: np.random.Generator

    def rng_dict(self) -> dict:
        return {"step": self.step, "epoch": self.epoch, "cursor": self.cursor, "order": self.order,
                "order_rng": self.order_rng.bit_generator.state,
                "rollout_rng": self.rollout_rng.bit_generator.state}

    @classmethod
    def fresh(cls, seed: int, n: int) -> "_LoopState":
        order_rng = np.random.default_rng([seed, 1])
        rollout_rng = np.random.default_rng([seed, 2])
        return cls(0, 0, 0, order_rng.permutation(n).tolist(), order_rng, rollout_rng)

    @classmethod
    def from_dict(cls, d: dict) -> "_LoopState":
        order_rng = np.random.default_rng()
        order_rng.bit_generator.state = d["order_rng"]
        rollout_rng = np.random.default_rng()
        rollout_rng.bit_generator.state = d["rollout_rng"]
        return cls(d["step"], d["epoch"], d["cursor"], list(d["order"]), order_rng, rollout_rng)

    def next_batch(self, batch_size: int, n: int) -> list[int]:
        out = []
        while len(out) < batch_size:
            if self.cursor >= len(self.order):
                self.epoch += 1
                self.cursor = 0
                self.order = self.order_rng.permutation(n).tolist()
            out.append(self.order[self.cursor])
            self.cursor += 1
        return out


def _atomic_write(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def save_checkpoint(out_dir: str | Path, params: PolicyParams, state: _LoopState, config: TrainConfig) -> Path:
    d = Path(out_dir) / f"step_{state.step}"
    d.mkdir(parents=True, exist_ok=True)
    _atomic_write(d / "params", json.dumps(params.to_dict(), separators=(",", ":")))
    _atomic_write(d / "rng", json.dumps(state.rng_dict(), separators=(",", ":")))
    _atomic_write(d / "config", json.dumps(config.to_dict(), indent=2, sort_keys=True))
    return d


def load_checkpoint(path: str | Path) -> tuple[PolicyParams, _LoopState, TrainConfig]:
    d = Path(path)
    params = PolicyParams.from_dict(json.loads((d / "params").read_text(encoding="utf-8")))
    state = _LoopState.from_dict(json.loads((d / "rng").read_text(encoding="utf-8")))
    config = TrainConfig.from_dict(json.loads((d / "config").read_text(encoding="utf-8")))
    return params, state, config


def latest_checkpoint(out_dir: str | Path) -> Path | None:
    steps = []
    for p in Path(out_dir).glob("step_*"):
        suffix = p.name[5:]
        if suffix.isdigit() and (p / "params").exists():
            steps.append((int(suffix), p))
    return max(steps)[1] if steps else None


# ---------------------------------------------------------------------------
# the loop


def _token_advantages(rollout, base: float, adjusted: float, scope: str) -> np.ndarray:
    n = len(rollout.tokens)
    if scope == "all":
        return np.full(n, adjusted)
    adv = np.full(n, base)
    span = rollout.cot_span
    adv[span.start:span.stop] = adjusted
    return adv


@dataclass
class TrainResult:
    params: PolicyParams
    metrics: list
    checkpoints: list


def train(config: TrainConfig, dataset: Sequence[Sample], out_dir: str | Path | None = None,
          resume: str | Path | None = None,
          on_step: Callable[[StepMetrics], None] | None = None) -> TrainResult:
    """Run training. Everything random derives from ``config.seed``.

    With ``out_dir`` set, metrics are appended to ``metrics.jsonl`` (plus a CSV
    mirror and a separate wall-clock file) and checkpoints are written every
    ``checkpoint_every`` steps and at the end. ``resume`` continues from a
    ``step_N`` checkpoint directory.
    """
    config.validate()
    if not dataset:
        raise ConfigError("training dataset is empty")
    n = len(dataset)
    ref = initial_params(config)
    if resume is not None:
        params, state, saved = load_checkpoint(resume)
        if saved.to_dict() != config.to_dict():
            raise ConfigError("checkpoint was written with a different configuration")
        params.prior = ref.prior
    else:
        params, state = initial_params(config, ref.vocab), _LoopState.fresh(config.seed, n)
    vocab = params.vocab
    prompts = [render_prompt(s) for s in dataset]
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = config.max_steps if config.max_steps is not None else config.epochs * steps_per_epoch

    writer = _MetricsWriter(Path(out_dir), state.step) if out_dir is not None else None
    metrics, checkpoints = [], []
    use_entropy = config.algorithm == "funrl"
    try:
        while state.step < total:
            t0 = time.perf_counter()
            batch, rewards_all, ent, hits, zero_var, fmt_fail, lengths = [], [], [], 0, 0, 0, 0
            for idx in state.next_batch(config.batch_size, n):
                sample, prompt = dataset[idx], prompts[idx]
                rollouts = [sample_rollout(params, prompt, config.max_len, state.rollout_rng)
                            for _ in range(config.group_size)]
                breakdowns = [compute_reward(vocab.decode(r.tokens), sample) for r in rollouts]
                rewards = [b.reward for b in breakdowns]
                rep = advantage_report(RolloutGroup(sample.id, rollouts, rewards), config.lam, config.alpha,
                                       config.entropy_mode, config.entropy_aggregation, use_entropy)
                if not use_entropy:
                    rep.entropy = cot_entropy(rollouts, config.entropy_mode, config.entropy_aggregation)
                for ro, a, adj in zip(rollouts, rep.base, rep.adjusted):
                    batch.append((ro, _token_advantages(ro, a, adj, config.adjust_scope)))
                    lengths += len(ro.tokens)
                rewards_all.extend(rewards)
                ent.append(rep.entropy)
                hits += rep.clip_bound_hits
                zero_var += int(np.all(rep.base == 0))
                fmt_fail += sum(b.failure_reason == BAD_FORMAT for b in breakdowns)
            grads, stats = surrogate_gradient(params, batch, config.epsilon, config.beta, ref, with_stats=True)
            n_roll = len(rewards_all)
            m = StepMetrics(
                step=state.step,
                mean_reward=float(np.mean(rewards_all)),
                mean_kl=stats.mean_kl,
                mean_entropy=float(np.mean(ent)),
                format_failure_rate=fmt_fail / n_roll,
                clip_hit_fraction=hits / n_roll,
                zero_variance_fraction=zero_var / config.batch_size,
                ratio_clip_fraction=stats.ratio_clip_fraction,
                mean_length=lengths / n_roll,
            )
            try:
                apply_update(params, grads, config.learning_rate)
            except NonFiniteGradient as e:
                diag = {"step": state.step, "metrics": m.to_dict(), "error": str(e),
                        "bad_rows": [[k[0], list(k[1])] for k, g in grads.items() if not np.all(np.isfinite(g))]}
                raise TrainingAborted(state.step, diag, e) from e
            m.wall_clock = time.perf_counter() - t0
            state.step += 1
            metrics.append(m)
            if writer:
                writer.write(m)
            if on_step:
                on_step(m)
            if out_dir is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
                checkpoints.append(save_checkpoint(out_dir, params, state, config))
        if out_dir is not None and (not checkpoints or checkpoints[-1].name != f"step_{state.step}"):
            checkpoints.append(save_checkpoint(out_dir, params, state, config))
    finally:
        if writer:
            writer.close()
    return TrainResult(params, metrics, checkpoints)


class _MetricsWriter:
    """Per-step JSONL append (flushed) plus CSV mirror and wall-clock log.

    Wall-clock goes to its own file so that metrics files of identical runs
    are byte-identical. On resume, rows at or past the resume step are
    dropped first.
    """

    def __init__(self, out_dir: Path, start_step: int):
        out_dir.mkdir(parents=True, exist_ok=True)
        self.paths = (out_dir / "metrics.jsonl", out_dir / "timing.jsonl")
        for p in self.paths:
            kept = []
            if start_step and p.exists():
                kept = [l for l in p.read_text(encoding="utf-8").splitlines() if l and json.loads(l)["step"] < start_step]
            _atomic_write(p, "".join(l + "\n" for l in kept))
        self.csv_path = out_dir / "metrics.csv"
        self.files = [open(p, "a", encoding="utf-8") for p in self.paths]

    def write(self, m: StepMetrics):
        self.files[0].write(json.dumps(m.to_dict()) + "\n")
        self.files[1].write(json.dumps({"step": m.step, "wall_clock": m.wall_clock}) + "\n")
        for f in self.files:
            f.flush()

    def close(self):
        for f in self.files:
            f.close()
        rows = [json.loads(l) for l in self.paths[0].read_text(encoding="utf-8").splitlines() if l]
        tmp = self.csv_path.with_name(self.csv_path.name + ".tmp")
        with open(tmp, "w", encoding="utf-8", newline="") as f:
            w = csv.DictWriter(f, fieldnames=METRIC_FIELDS, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        os.replace(tmp, self.csv_path)


def validate(params: PolicyParams, holdout: Sequence[Sample], max_len: int = 48) -> EvalReport:
    """Greedy-decode every holdout sample and score it."""
    responses = {s.id: params.vocab.decode(greedy_rollout(params, render_prompt(s), max_len).tokens) for s in holdout}
    return evaluate(responses, holdout)
