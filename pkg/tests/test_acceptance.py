"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the pytest terminal
summary (and immediately, when run with ``-s``).
"""

import json
import math
import time
from contextlib import contextmanager
from dataclasses import replace

import numpy as np
import pytest

import conftest
from callrl.callspec import CallList, FunctionCall, ParseError, parse_call_list, serialize_call_list, value_key
from callrl.cli import main
from callrl.datapipe import LLM_EXHAUSTED, AST_RULE_I, ScriptedEvaluator, llm_stage, run_pipeline
from callrl.policy import surrogate_gradient, surrogate_objective
from callrl.rewardkit import compute_reward
from callrl.rlcore import adjust_advantages, cot_entropy, group_advantages
from callrl.taskbench import CATEGORIES, build_vocab, generate_dataset
from callrl.trainer import TrainConfig, train

from cases import GOOD_RESPONSE, MALFORMED_RESPONSE, team_rank_sample
from test_policy import random_instance
from test_rewardkit import TRUTH_TABLE, sample as ref_sample


@contextmanager
def criterion(n, summary):
    detail = {"text": summary}
    try:
        yield detail
    except BaseException:
        conftest.ACCEPTANCE[n] = (False, detail["text"])
        print(f"criterion {n}: FAIL  {detail['text']}")
        raise
    conftest.ACCEPTANCE[n] = (True, detail["text"])
    print(f"criterion {n}: PASS  {detail['text']}")


# -- 1 ---------------------------------------------------------------------


def test_criterion_01_group_advantages():
    with criterion(1, "group advantages exact, moments on 1000 vectors") as d:
        t0 = time.perf_counter()
        assert group_advantages([1, 0, 0, 1]).tolist() == [1.0, -1.0, -1.0, 1.0]
        rng = np.random.default_rng(101)
        worst_mean, worst_std = 0.0, 0.0
        done = 0
        while done < 1000:
            r = rng.random(int(rng.integers(2, 33))) * rng.choice([1, 10, 1000])
            if rng.random() < 0.5:
                r = np.round(r) % 2
            if r.std() == 0:
                continue
            a = group_advantages(r)
            worst_mean = max(worst_mean, abs(a.mean()))
            worst_std = max(worst_std, abs(a.std() - 1))
            done += 1
        elapsed = time.perf_counter() - t0
        d["text"] = f"max |mean| {worst_mean:.1e}, max |std-1| {worst_std:.1e}, {elapsed:.2f}s"
        assert worst_mean < 1e-12 and worst_std < 1e-9
        assert elapsed < 1.0


# -- 2 ---------------------------------------------------------------------


def test_criterion_02_entropy_adjustment():
    with criterion(2, "adjustment exact, sign-safe for alpha >= 1, lambda=0 reduces to GRPO") as d:
        t0 = time.perf_counter()
        assert adjust_advantages([1.0], 0.3, 2.0, 0.1)[0] == 1.6
        rng = np.random.default_rng(202)
        a = rng.normal(size=10_000) * rng.choice([1e-8, 1.0, 1e3], size=10_000)
        e = rng.exponential(1.0, size=10_000)
        lam = rng.uniform(0, 10, size=10_000)
        alpha = rng.uniform(1.0, 20.0, size=10_000)
        adj = np.array([adjust_advantages([x], y, z, w)[0] for x, y, z, w in zip(a, e, lam, alpha)])
        nz = a != 0
        assert np.all(np.sign(adj[nz]) == np.sign(a[nz]))
        data = generate_dataset({"simple": 200, "multiple": 100, "irrelevance": 50}, seed=0)
        f = train(TrainConfig(algorithm="funrl", lam=0.0, max_steps=200, seed=0), data)
        g = train(TrainConfig(algorithm="grpo", lam=0.0, max_steps=200, seed=0), data)
        assert [m.to_dict() for m in f.metrics] == [m.to_dict() for m in g.metrics]
        assert f.params.to_dict() == g.params.to_dict()
        elapsed = time.perf_counter() - t0
        d["text"] += f" (200-step runs bitwise equal, {elapsed:.1f}s)"
        assert elapsed < 30


# -- 3 ---------------------------------------------------------------------


def test_criterion_03_cot_entropy():
    from types import SimpleNamespace

    with criterion(3, "CoT entropy closed forms") as d:
        ro = SimpleNamespace(probs=np.full(3, 0.25), dists=np.full((3, 4), 0.25), cot_span=range(3))
        e = cot_entropy([ro], "plugin", "sum")
        assert abs(e - 0.75 * math.log(4)) < 1e-6 and round(e, 4) == 1.0397
        for v in (2, 7, 64, 256):
            u = SimpleNamespace(probs=np.full(5, 1 / v), dists=np.full((5, v), 1 / v), cot_span=range(5))
            assert abs(cot_entropy([u], "full", "mean_per_token") - math.log(v)) < 1e-9
        det = SimpleNamespace(probs=np.ones(4), dists=np.tile(np.eye(6)[2], (4, 1)), cot_span=range(4))
        assert cot_entropy([det], "plugin", "sum") == 0.0 and cot_entropy([det], "full", "sum") == 0.0
        d["text"] = f"plugin E = {e:.7f}, full uniform = ln V, deterministic = 0"


# -- 4 ---------------------------------------------------------------------


def test_criterion_04_gradient_fidelity():
    with criterion(4, "analytic gradient vs central differences") as d:
        t0 = time.perf_counter()
        worst, clipped_instances = 0.0, 0
        for seed in range(24):
            params, ref, batch, beta = random_instance(seed)
            assert beta > 0 and params.V <= 8 and all(len(r.tokens) <= 6 for r, _ in batch)
            grads, stats = surrogate_gradient(params, batch, 0.2, beta, ref, with_stats=True)
            clipped_instances += stats.ratio_clip_fraction > 0
            for key, row in params.rows.items():
                g = grads.get(key, np.zeros(params.V))
                for j in range(params.V):
                    saved = row[j]
                    row[j] = saved + 1e-5
                    up = surrogate_objective(params, batch, 0.2, beta, ref)
                    row[j] = saved - 1e-5
                    down = surrogate_objective(params, batch, 0.2, beta, ref)
                    row[j] = saved
                    num = (up - down) / 2e-5
                    worst = max(worst, abs(g[j] - num) / max(abs(num), 1e-6))
        elapsed = time.perf_counter() - t0
        d["text"] = f"24 instances ({clipped_instances} with clipped tokens), worst rel err {worst:.1e}, {elapsed:.1f}s"
        assert worst < 1e-4 and clipped_instances > 0 and elapsed < 10


# -- 5 ---------------------------------------------------------------------


def test_criterion_05_reward_truth_table():
    with criterion(5, "12-case reward truth table") as d:
        cases = [(r, ref_sample(ref), (rw, f, p, m, why)) for r, ref, rw, f, p, m, why in TRUTH_TABLE]
        cases.append((GOOD_RESPONSE, team_rank_sample(), (1, True, True, True, None)))
        cases.append((MALFORMED_RESPONSE, team_rank_sample(), (0, True, False, False, "ParseFailedButCallExpected")))
        got = [compute_reward(r, s) for r, s, _ in cases]
        ok = sum((b.reward, b.format_ok, b.parse_ok, b.match_ok, b.failure_reason) == want
                 for b, (_, _, want) in zip(got, cases))
        d["text"] = f"{ok}/{len(cases)} cases exact"
        assert len(cases) == 12 and ok == 12


# -- 6 ---------------------------------------------------------------------


def _random_value(rng, depth):
    kind = rng.integers(0, 7 if depth < 3 else 5)
    if kind == 0:
        return int(rng.integers(-10**6, 10**6))
    if kind == 1:
        return float(rng.normal() * 10.0 ** rng.integers(-5, 6))
    if kind == 2:
        return bool(rng.integers(2))
    if kind in (3, 4):
        alphabet = list("abcXYZ 019_-'\"\\,()[]{}=:é漢")
        return "".join(rng.choice(alphabet, size=int(rng.integers(0, 12))))
    if kind == 5:
        return [_random_value(rng, depth + 1) for _ in range(int(rng.integers(0, 4)))]
    return {f"k{i}": _random_value(rng, depth + 1) for i in range(int(rng.integers(0, 4)))}


def _random_calls(rng):
    calls = []
    for _ in range(int(rng.integers(1, 4))):
        names = rng.choice(["a", "b_1", "cX", "_d", "e2"], size=int(rng.integers(0, 5)), replace=False)
        calls.append(FunctionCall(f"f{int(rng.integers(5))}", {str(n): _random_value(rng, 0) for n in names}))
    return CallList(tuple(calls))


def test_criterion_06_parser_robustness():
    with criterion(6, "round trip on 10k ASTs, 100k fuzz inputs") as d:
        t0 = time.perf_counter()
        rng = np.random.default_rng(606)
        texts = []
        for _ in range(10_000):
            calls = _random_calls(rng)
            text = serialize_call_list(calls)
            back = parse_call_list(text)
            assert [(c.name, value_key(c.args, ordered=True)) for c in back] == \
                   [(c.name, value_key(c.args, ordered=True)) for c in calls]
            assert serialize_call_list(back) == text
            texts.append(text.encode("utf-8"))
        outcomes = {"ok": 0, "ParseError": 0}
        for i in range(100_000):
            if i % 2:
                data = rng.bytes(int(rng.integers(0, 40)))
            else:
                base = bytearray(texts[i % len(texts)])
                for _ in range(int(rng.integers(1, 4))):
                    pos = int(rng.integers(0, len(base) + 1))
                    op = rng.integers(3)
                    if op == 0 and base:
                        del base[min(pos, len(base) - 1)]
                    elif op == 1:
                        base.insert(pos, int(rng.integers(256)))
                    else:
                        # deep nesting
                        base[pos:pos] = b"(["[int(rng.integers(2)):][:1] * int(rng.integers(1, 80))
                data = bytes(base)
            try:
                parse_call_list(data)
                outcomes["ok"] += 1
            except ParseError:
                outcomes["ParseError"] += 1
        elapsed = time.perf_counter() - t0
        d["text"] = f"fuzz: {outcomes['ok']} parsed, {outcomes['ParseError']} ParseError, 0 crashes, {elapsed:.1f}s"
        assert elapsed < 60


# -- 7 ---------------------------------------------------------------------


def test_criterion_07_pipeline_semantics():
    with criterion(7, "pipeline counts, regeneration bound, report shape") as d:
        data = generate_dataset({c: 20 for c in CATEGORIES}, seed=7)
        calls = [s for s in data if s.category != "irrelevance"]
        fail = {s.id for s in calls[:7]}
        broken = {s.id for s in calls[20:25]}
        data = [replace(s, reference="[h(x=1)]") if s.id in broken else s for s in data]
        ev = ScriptedEvaluator({i: ["FAIL"] for i in fail})
        res = run_pipeline(data, ev)
        s = res.stats
        assert (s.input_count, s.after_llm_count, s.after_ast_count) == (100, 93, 88)
        assert s.drops[LLM_EXHAUSTED] == 7 and s.drops[AST_RULE_I] == 5
        assert all(ev.judge_calls[i] == 4 and ev.regenerate_calls[i] == 3 for i in fail)
        one = ScriptedEvaluator({data[0].id: ["FAIL"]})
        llm_stage(data[0], one)
        assert one.regenerate_calls[data[0].id] == 3
        rng = np.random.default_rng(77)
        for _ in range(200):
            plan = {x.id: list(rng.choice(["PASS", "FAIL", "UNAVAILABLE"], size=int(rng.integers(1, 6))))
                    for x in data if rng.random() < 0.3}
            st = run_pipeline(data, ScriptedEvaluator(plan)).stats
            assert st.input_count >= st.after_llm_count >= st.after_ast_count
        table = s.table().splitlines()
        assert len(table) == 3 and [line.split()[-1] for line in table] == ["100", "93", "88"]
        d["text"] = "100 -> 93 -> 88, 4 evaluations per dropped sample, 200 random plans monotone"


# -- 8 and 9 ---------------------------------------------------------------

SEEDS = (0, 1, 2)
STEPS = 1500
WINDOW = 50


@pytest.fixture(scope="module")
def learning_runs():
    runs = {}
    for seed in SEEDS:
        data = generate_dataset({"simple": 200, "multiple": 100, "irrelevance": 50}, seed=seed)
        for alg in ("funrl", "grpo"):
            t0 = time.perf_counter()
            res = train(TrainConfig(algorithm=alg, seed=seed, max_steps=STEPS), data)
            runs[seed, alg] = (res.metrics, time.perf_counter() - t0)
    return runs


@pytest.mark.slow
def test_criterion_08_end_to_end_learning(learning_runs):
    assert len(build_vocab()) <= 64
    with criterion(8, "FunRL reaches mean reward >= 0.90") as d:
        parts, hits, slowest = [], 0, 0.0
        for seed in SEEDS:
            metrics, secs = learning_runs[seed, "funrl"]
            rewards = np.array([m.mean_reward for m in metrics])
            rolling = np.convolve(rewards, np.ones(WINDOW) / WINDOW, mode="valid")
            reached = np.flatnonzero(rolling >= 0.90)
            step = int(reached[0]) + WINDOW - 1 if reached.size else None
            hits += step is not None
            slowest = max(slowest, secs)
            parts.append(f"seed {seed}: step {step} ({secs:.0f}s)")
        d["text"] = f"{WINDOW}-step mean >= 0.90 on {hits}/3 seeds within {STEPS} steps; " + ", ".join(parts)
        assert hits >= 2 and slowest < 300


@pytest.mark.slow
def test_criterion_09_kl_trend(learning_runs):
    with criterion(9, "final-10% KL: FunRL >= GRPO") as d:
        tail = STEPS // 10
        parts, wins = [], 0
        for seed in SEEDS:
            f = np.mean([m.mean_kl for m in learning_runs[seed, "funrl"][0][-tail:]])
            g = np.mean([m.mean_kl for m in learning_runs[seed, "grpo"][0][-tail:]])
            wins += f >= g
            parts.append(f"seed {seed}: {f:.3f} vs {g:.3f}")
        d["text"] = f"FunRL KL >= GRPO KL on {wins}/3 seeds; " + ", ".join(parts)
        assert wins >= 2


# -- 10 --------------------------------------------------------------------


def _run_all(root, cfg_path, good_lines):
    root.mkdir()
    steps = [
        ["gen-data", "--config", str(cfg_path), "--out", str(root / "data")],
        ["clean", "--config", str(cfg_path), "--dataset", str(root / "data" / "dataset.jsonl"), "--out", str(root / "clean")],
        ["train", "--config", str(cfg_path), "--dataset", str(root / "clean" / "retained.jsonl"), "--out", str(root / "run")],
        ["eval", "--config", str(cfg_path), "--dataset", str(root / "data" / "dataset.jsonl"),
         "--checkpoint", str(root / "run" / "step_40"), "--out", str(root / "eval")],
    ]
    for argv in steps:
        assert main(argv) == 0, argv
    (root / "rc.jsonl").write_text(good_lines)
    assert main(["reward-check", str(root / "rc.jsonl"), "--out", str(root / "rc")]) == 0
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "timing.jsonl"}


def test_criterion_10_determinism(tmp_path):
    with criterion(10, "repeated commands give byte-identical outputs") as d:
        cfg = tmp_path / "run.yaml"
        cfg.write_text("seed: 13\n"
                       "generate:\n  counts: {simple: 30, multiple: 15, irrelevance: 8}\n"
                       "pipeline:\n  evaluator: mock\n  parallelism: 4\n"
                       "train:\n  max_steps: 40\n  checkpoint_every: 20\n  batch_size: 4\n")
        lines = json.dumps({"response": GOOD_RESPONSE, "sample": team_rank_sample().to_json()}) + "\n"
        a = _run_all(tmp_path / "a", cfg, lines)
        b = _run_all(tmp_path / "b", cfg, lines)
        assert a.keys() == b.keys()
        differing = [k for k in a if a[k] != b[k]]
        d["text"] = f"{len(a)} files compared (metrics, checkpoints, reports), {len(differing)} differ"
        assert not differing and "run/metrics.jsonl" in a and "run/step_40/params" in a
