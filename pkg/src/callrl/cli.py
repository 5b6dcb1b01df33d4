"""Command-line entry point: ``callrl {gen-data,clean,train,eval,reward-check}``.

Settings come from one JSON or YAML file; flags override it. Exit codes:
0 success, 2 config or input error, 3 evaluator service error, 4 numeric
failure during training.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from . import __version__
from .datapipe import HTTPEvaluator, MockEvaluator, ScriptedEvaluator, run_pipeline, write_outputs
from .policy import PolicyParams
from .rewardkit import compute_reward
from .taskbench import CATEGORIES, Sample, evaluate, generate_dataset, read_jsonl
from .trainer import ConfigError, TrainConfig, TrainingAborted, latest_checkpoint, split_dataset, train, validate

EXIT_OK, EXIT_CONFIG, EXIT_SERVICE, EXIT_NUMERIC = 0, 2, 3, 4

SECTIONS = {"seed", "paths", "generate", "pipeline", "train"}


class UsageError(Exception):
    """Bad configuration or missing input; maps to exit code 2."""


def atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    text = p.read_text(encoding="utf-8")
    try:
        data = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise UsageError(f"cannot parse {p}: {e}") from None
    data = data or {}
    if not isinstance(data, dict):
        raise UsageError("config root must be a mapping")
    unknown = set(data) - SECTIONS
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    return data


def resolve(args) -> dict:
    """Merge the config file with command-line overrides."""
    cfg = load_config(args.config)
    for key in ("paths", "generate", "pipeline", "train"):
        cfg[key] = dict(cfg.get(key) or {})
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "out", None):
        cfg["paths"]["out"] = args.out
    for flag, key in (("dataset", "dataset"), ("checkpoint", "checkpoint"), ("resume", "resume")):
        if getattr(args, flag, None):
            cfg["paths"][key] = getattr(args, flag)
    for flag, key in (("algorithm", "algorithm"), ("lam", "lam"), ("alpha", "alpha")):
        if getattr(args, flag, None) is not None:
            cfg["train"][key] = getattr(args, flag)
    if getattr(args, "evaluator", None):
        cfg["pipeline"]["evaluator"] = args.evaluator
    return cfg


def need_seed(cfg: dict) -> int:
    seed = cfg.get("seed")
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise UsageError("an integer seed is required (config 'seed' or --seed)")
    return seed


def out_dir(cfg: dict) -> Path:
    return Path(cfg["paths"].get("out") or ".")


def input_path(cfg: dict, key: str) -> Path:
    value = cfg["paths"].get(key)
    if not value:
        raise UsageError(f"missing input path '{key}'")
    p = Path(value)
    if not p.exists():
        raise UsageError(f"input not found: {p}")
    return p


def load_dataset(path: Path) -> list[Sample]:
    try:
        return read_jsonl(path)
    except (json.JSONDecodeError, KeyError, ValueError) as e:
        raise UsageError(f"cannot read dataset {path}: {e}") from None


def train_config(cfg: dict) -> TrainConfig:
    section = dict(cfg["train"])
    if "seed" in section:
        raise UsageError("set the seed at the top level, not under 'train'")
    section["seed"] = need_seed(cfg)
    return TrainConfig.from_dict(section)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: dict) -> int:
    seed = need_seed(cfg)
    gen = cfg["generate"]
    counts = gen.get("counts") or {}
    if not isinstance(counts, dict) or any(c not in CATEGORIES for c in counts):
        raise UsageError(f"generate.counts must map categories {CATEGORIES} to counts")
    if any(not isinstance(n, int) or n < 0 for n in counts.values()):
        raise UsageError("generate.counts values must be non-negative integers")
    total = sum(counts.values())
    if total == 0:
        raise UsageError("generate.counts sums to 0; nothing to generate")
    difficulty = gen.get("difficulty", 1)
    template_set = gen.get("template_set", "train")
    try:
        data = generate_dataset(counts, seed, difficulty, template_set)
    except ValueError as e:
        raise UsageError(str(e)) from None
    out = out_dir(cfg)
    text = "".join(json.dumps(s.to_json(), ensure_ascii=False) + "\n" for s in data)
    atomic_write(out / "dataset.jsonl", text)
    manifest = {
        "seed": seed,
        "difficulty": difficulty,
        "template_set": template_set,
        "counts": {c: int(counts.get(c, 0)) for c in CATEGORIES if counts.get(c)},
        "total": total,
        "sha256": hashlib.sha256(text.encode("utf-8")).hexdigest(),
    }
    atomic_write(out / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {total} samples to {out / 'dataset.jsonl'}")
    return EXIT_OK


def make_evaluator(pipe: dict):
    kind = pipe.get("evaluator", "mock")
    if kind == "mock":
        return MockEvaluator(), False
    if kind == "scripted":
        script = pipe.get("script") or {}
        return ScriptedEvaluator(script.get("plan"), script.get("corrections")), False
    if isinstance(kind, str) and kind.startswith(("http://", "https://")):
        return HTTPEvaluator(kind, timeout=float(pipe.get("timeout", 30)), retries=int(pipe.get("retries", 2)),
                             token_env=pipe.get("token_env", "CALLRL_EVALUATOR_TOKEN"), model=pipe.get("model")), True
    raise UsageError(f"pipeline.evaluator must be 'mock', 'scripted' or an http(s) URL, got {kind!r}")


def cmd_clean(cfg: dict) -> int:
    need_seed(cfg)
    data = load_dataset(input_path(cfg, "dataset"))
    pipe = cfg["pipeline"]
    evaluator, remote = make_evaluator(pipe)
    result = run_pipeline(data, evaluator, max_attempts=int(pipe.get("max_attempts", 3)),
                          parallelism=int(pipe.get("parallelism", 1)))
    paths = write_outputs(result, out_dir(cfg))
    print(result.stats.table())
    print(f"retained samples: {paths['retained']}")
    if result.deferred:
        print(f"{len(result.deferred)} samples deferred (evaluator unavailable): {paths['deferred']}", file=sys.stderr)
        if remote:
            return EXIT_SERVICE
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    config = train_config(cfg)
    data = load_dataset(input_path(cfg, "dataset"))
    train_set, holdout = split_dataset(data, config.validation_fraction, config.seed)
    if not train_set:
        raise UsageError("no training samples left after the validation split")
    out = out_dir(cfg)
    resume = cfg["paths"].get("resume")
    if resume == "latest":
        resume = latest_checkpoint(out)
        if resume is None:
            raise UsageError(f"no checkpoint to resume from in {out}")
    elif resume:
        resume = input_path(cfg, "resume")
    try:
        result = train(config, train_set, out_dir=out, resume=resume)
    except TrainingAborted as e:
        diag = out / "diagnostics.json"
        atomic_write(diag, json.dumps(e.diagnostics, indent=2) + "\n")
        print(f"training aborted at step {e.step}; diagnostics: {diag}", file=sys.stderr)
        return EXIT_NUMERIC
    last = result.metrics[-1] if result.metrics else None
    if last:
        print(f"step {last.step}: mean reward {last.mean_reward:.3f}, KL {last.mean_kl:.4f}")
    if holdout:
        report = validate(result.params, holdout, config.max_len)
        atomic_write(out / "validation.json", json.dumps(report.to_dict(), indent=2) + "\n")
        print(report.table())
    return EXIT_OK


def cmd_eval(cfg: dict, responses_path: str | None) -> int:
    data = load_dataset(input_path(cfg, "dataset"))
    if responses_path:
        p = Path(responses_path)
        if not p.is_file():
            raise UsageError(f"responses file not found: {p}")
        responses = {}
        for n, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
            if line.strip():
                try:
                    row = json.loads(line)
                    responses[row["id"]] = row["response"]
                except (json.JSONDecodeError, KeyError, TypeError):
                    raise UsageError(f"{p}:{n}: expected {{id, response}}") from None
        missing = [s.id for s in data if s.id not in responses]
        if missing:
            raise UsageError(f"no response for {len(missing)} samples, e.g. {missing[0]}")
        report = evaluate(responses, data)
    else:
        ckpt = input_path(cfg, "checkpoint")
        params_file = ckpt / "params" if ckpt.is_dir() else ckpt
        try:
            params = PolicyParams.load(params_file)
        except (OSError, ValueError, KeyError) as e:
            raise UsageError(f"cannot load checkpoint {params_file}: {e}") from None
        max_len = int(cfg["train"].get("max_len", TrainConfig.max_len))
        report = validate(params, data, max_len)
    atomic_write(out_dir(cfg) / "eval_report.json", json.dumps(report.to_dict(), indent=2) + "\n")
    print(report.table())
    return EXIT_OK


def cmd_reward_check(cfg: dict, input_file: str) -> int:
    p = Path(input_file)
    if not p.is_file():
        raise UsageError(f"input not found: {p}")
    rows, ok, bad = [], 0, 0
    total = 0
    for n, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            b = compute_reward(row["response"], Sample.from_json(row["sample"]))
        except Exception as e:  # noqa: BLE001 - report and keep going
            print(f"line {n}: {type(e).__name__}: {e}", file=sys.stderr)
            rows.append({"line": n, "error": f"{type(e).__name__}: {e}"})
            bad += 1
            continue
        total += 1
        ok += b.reward
        rows.append({"line": n, **b.to_dict()})
    atomic_write(out_dir(cfg) / "rewards.jsonl", "".join(json.dumps(r) + "\n" for r in rows))
    print(f"scored {total} responses: reward 1 = {ok}, reward 0 = {total - ok}, unreadable lines = {bad}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="callrl", description="Function-calling RL toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON or YAML settings file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    common(sub.add_parser("gen-data", help="generate a synthetic dataset"))
    p = common(sub.add_parser("clean", help="run the two-stage cleaning pipeline"))
    p.add_argument("--dataset")
    p.add_argument("--evaluator", help="'mock', 'scripted' or an evaluator URL")
    p = common(sub.add_parser("train", help="train a policy"))
    p.add_argument("--dataset")
    p.add_argument("--algorithm", choices=("grpo", "funrl"))
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--resume", help="checkpoint directory, or 'latest'")
    p = common(sub.add_parser("eval", help="evaluate a checkpoint or a response file"))
    p.add_argument("--dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--responses", help="JSONL of {id, response} to score instead of decoding")
    p = common(sub.add_parser("reward-check", help="score {response, sample} lines"))
    p.add_argument("input")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve(args)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "clean":
            return cmd_clean(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.responses)
        return cmd_reward_check(cfg, args.input)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
