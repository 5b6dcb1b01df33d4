"""Two-stage cleaning of (query, tools, reference) samples.

Stage one asks an evaluator whether the reference answers the query with the
given tools; a rejected reference is regenerated and re-judged a bounded
number of times. Stage two is purely syntactic: the reference must parse as
a call list that validates against the tools, unless the sample is an
irrelevance sample whose reference is free text.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import requests

from .callspec import (CallList, FunctionCall, ParseError, parse_call_list, serialize_call_list, tools_to_json,
                       validate_call_list)
from .taskbench import Sample, system_prompt

log = logging.getLogger(__name__)

LLM_EXHAUSTED = "llm_exhausted"
AST_RULE_I = "ast_rule_i"
AST_RULE_II = "ast_rule_ii"
DROP_REASONS = (LLM_EXHAUSTED, AST_RULE_I, AST_RULE_II)

JUDGE_INSTRUCTION = (
    "Decide whether the answer correctly resolves the query using only the listed tools. "
    "Reply with a first line of exactly PASS or FAIL: <reason>."
)
REGENERATE_INSTRUCTION = (
    "The answer was rejected ({reason}). Reply with a first line FAIL: regenerated, followed by a "
    "corrected answer on the next line: either [func(arg=value, ...)] calls or a plain-text reply."
)


class EvaluatorUnavailable(RuntimeError):
    """Transport-level failure talking to the evaluator (not a quality verdict)."""


@dataclass(frozen=True)
class Judgement:
    passed: bool
    reason: str = ""


@dataclass(frozen=True)
class EvaluatorVerdict:
    passed: bool
    corrected_reference: str | None = None


class Evaluator(Protocol):
    def judge(self, sample: Sample, answer: str) -> Judgement: ...

    def regenerate(self, sample: Sample, answer: str, reason: str) -> str: ...


# ---------------------------------------------------------------------------
# evaluators


def _rule_check(sample: Sample, answer: str) -> Judgement:
    try:
        calls = parse_call_list(answer)
    except ParseError as e:
        if sample.category == "irrelevance":
            return Judgement(True)
        return Judgement(False, f"unparseable call: {e.reason}")
    if sample.category == "irrelevance":
        return Judgement(False, "a call was given but no tool applies")
    if not sample.tools:
        return Judgement(False, "no tools available")
    errors = validate_call_list(calls, sample.tools)
    if errors:
        return Judgement(False, "; ".join(f"{e.kind} {e.param or e.got or ''}".strip() for e in errors))
    return Judgement(True)


def _coerce(value, type_tag):
    if type_tag in ("string", "enum") and isinstance(value, (int, float)) and not isinstance(value, bool):
        return str(value)
    if type_tag == "integer" and isinstance(value, str) and value.lstrip("-").isdigit():
        return int(value)
    if type_tag == "float" and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


class MockEvaluator:
    """Offline, deterministic stand-in for an LLM judge.

    Judging is rule-based (parse + schema validation). Regeneration repairs
    what a rule can repair: unknown keyword arguments are removed and scalar
    values are coerced to the declared type. Anything else comes back
    unchanged and keeps failing.
    """

    def judge(self, sample: Sample, answer: str) -> Judgement:
        return _rule_check(sample, answer)

    def regenerate(self, sample: Sample, answer: str, reason: str) -> str:
        try:
            calls = parse_call_list(answer)
        except ParseError:
            return answer
        by_name = {t.name: t for t in sample.tools}
        fixed = []
        for c in calls:
            schema = by_name.get(c.name)
            if schema is None:
                fixed.append(c)
                continue
            args = {k: _coerce(v, schema.param(k).type_tag) for k, v in c.args.items() if schema.param(k)}
            fixed.append(FunctionCall(c.name, args))
        return serialize_call_list(CallList(tuple(fixed)))


class ScriptedEvaluator:
    """Replays a per-sample plan of verdicts, for tests and dry runs.

    ``plan[sample_id]`` is a list of steps consumed one judge call at a
    time: ``"PASS"``, ``"FAIL"``, or ``"UNAVAILABLE"`` (raises
    :class:`EvaluatorUnavailable`). When the list runs out the last entry
    repeats; samples without a plan pass. ``corrections[sample_id]`` lists
    the answers handed out by successive regenerate calls.
    """

    def __init__(self, plan: Mapping[str, Sequence[str]] | None = None,
                 corrections: Mapping[str, Sequence[str]] | None = None):
        self.plan = {k: list(v) for k, v in (plan or {}).items()}
        self.corrections = {k: list(v) for k, v in (corrections or {}).items()}
        self.judge_calls: Counter = Counter()
        self.regenerate_calls: Counter = Counter()
        self._lock = threading.Lock()

    def judge(self, sample: Sample, answer: str) -> Judgement:
        with self._lock:
            n = self.judge_calls[sample.id]
            self.judge_calls[sample.id] += 1
        steps = self.plan.get(sample.id, ["PASS"])
        step = steps[min(n, len(steps) - 1)]
        if step == "UNAVAILABLE":
            raise EvaluatorUnavailable(f"scripted outage for {sample.id}")
        return Judgement(step == "PASS", "" if step == "PASS" else "scripted failure")

    def regenerate(self, sample: Sample, answer: str, reason: str) -> str:
        with self._lock:
            n = self.regenerate_calls[sample.id]
            self.regenerate_calls[sample.id] += 1
        fixes = self.corrections.get(sample.id)
        return fixes[min(n, len(fixes) - 1)] if fixes else answer


def parse_reply(payload) -> tuple[Judgement, str | None]:
    """Read an evaluator reply: ``{"verdict", "answer"}``, ``{"content"}``,
    or a chat-completion body whose message text carries the verdict on its
    first line and an optional answer after it."""
    answer = None
    if isinstance(payload, dict) and "choices" in payload:
        try:
            text = payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise EvaluatorUnavailable("malformed chat-completion reply") from None
    elif isinstance(payload, dict) and "verdict" in payload:
        text = str(payload["verdict"])
        answer = payload.get("answer")
    elif isinstance(payload, dict) and "content" in payload:
        text = str(payload["content"])
    else:
        raise EvaluatorUnavailable("evaluator reply has no verdict")
    first, _, rest = text.strip().partition("\n")
    first = first.strip()
    if answer is None and rest.strip():
        answer = rest.strip()
    if first == "PASS":
        return Judgement(True), answer
    if first.startswith("FAIL"):
        return Judgement(False, first[4:].lstrip(": ").strip()), answer
    raise EvaluatorUnavailable(f"unrecognized verdict line {first[:60]!r}")


class HTTPEvaluator:
    """JSON-over-HTTP evaluator client.

    Each request POSTs ``{query, tools, answer, instruction}``. Connection
    errors, timeouts and 5xx replies are retried with exponential backoff;
    when retries run out, or on a 4xx, :class:`EvaluatorUnavailable` is
    raised. The bearer token, if any, is read from ``token_env``.
    """

    def __init__(self, url: str, timeout: float = 30.0, retries: int = 2, backoff: float = 0.5,
                 token_env: str = "CALLRL_EVALUATOR_TOKEN", model: str | None = None):
        self.url = url
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.token_env = token_env
        self.model = model

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env, "").strip()
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _post(self, body: dict):
        last = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = requests.post(self.url, json=body, headers=self._headers(), timeout=self.timeout)
            except requests.RequestException as e:
                last = e
                log.warning("evaluator request failed (attempt %d): %s", attempt + 1, e)
                continue
            if resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                log.warning("evaluator returned %s (attempt %d)", resp.status_code, attempt + 1)
                continue
            if resp.status_code >= 400:
                raise EvaluatorUnavailable(f"evaluator rejected the request: HTTP {resp.status_code}")
            try:
                return resp.json()
            except ValueError:
                raise EvaluatorUnavailable("evaluator reply is not JSON") from None
        raise EvaluatorUnavailable(f"evaluator unreachable after {self.retries + 1} attempts: {last}")

    def _body(self, sample: Sample, answer: str, instruction: str) -> dict:
        body = {"query": sample.query, "tools": tools_to_json(sample.tools), "answer": answer,
                "instruction": instruction}
        if self.model:
            body["model"] = self.model
        return body

    def judge(self, sample: Sample, answer: str) -> Judgement:
        judgement, _ = parse_reply(self._post(self._body(sample, answer, JUDGE_INSTRUCTION)))
        return judgement

    def regenerate(self, sample: Sample, answer: str, reason: str) -> str:
        _, new = parse_reply(self._post(self._body(sample, answer, REGENERATE_INSTRUCTION.format(reason=reason))))
        return new if new is not None else answer


# ---------------------------------------------------------------------------
# stages


@dataclass(frozen=True)
class Retained:
    sample: Sample
    verdict: EvaluatorVerdict = EvaluatorVerdict(True)
    evaluations: int = 0


@dataclass(frozen=True)
class Dropped:
    sample: Sample
    reason: str
    evaluations: int = 0


@dataclass(frozen=True)
class Deferred:
    sample: Sample
    error: str


def llm_stage(sample: Sample, evaluator: Evaluator, max_attempts: int = 3) -> Retained | Dropped:
    """Judge, then regenerate and re-judge up to ``max_attempts`` times.

    Raises :class:`EvaluatorUnavailable` unchanged so the caller can defer.
    """
    if max_attempts < 0:
        raise ValueError("max_attempts must be >= 0")
    answer = sample.reference
    for attempt in range(max_attempts + 1):
        judgement = evaluator.judge(sample, answer)
        if judgement.passed:
            corrected = answer if attempt else None
            return Retained(replace(sample, reference=answer), EvaluatorVerdict(True, corrected), attempt + 1)
        if attempt == max_attempts:
            break
        answer = evaluator.regenerate(sample, answer, judgement.reason)
    return Dropped(sample, LLM_EXHAUSTED, max_attempts + 1)


def ast_stage(sample: Sample) -> Retained | Dropped:
    try:
        calls = parse_call_list(sample.reference)
    except ParseError:
        if sample.category != "irrelevance":
            return Dropped(sample, AST_RULE_II)
        return Retained(sample)
    if not sample.tools or validate_call_list(calls, sample.tools):
        return Dropped(sample, AST_RULE_I)
    return Retained(sample)


@dataclass
class PipelineStats:
    input_count: int = 0
    after_llm_count: int = 0
    after_ast_count: int = 0
    drops: dict = field(default_factory=lambda: {r: 0 for r in DROP_REASONS})
    deferred_count: int = 0

    def to_dict(self) -> dict:
        return {"input_count": self.input_count, "after_llm_count": self.after_llm_count,
                "after_ast_count": self.after_ast_count, "drops": dict(self.drops),
                "deferred_count": self.deferred_count}

    def table(self) -> str:
        rows = [("Input", self.input_count), ("After LLM evaluation", self.after_llm_count),
                ("After AST evaluation", self.after_ast_count)]
        return "\n".join(f"{name:<24}{count:>10,}" for name, count in rows)


@dataclass
class PipelineResult:
    retained: list
    stats: PipelineStats
    deferred: list
    outcomes: list


def _process(sample: Sample, evaluator: Evaluator, max_attempts: int):
    try:
        first = llm_stage(sample, evaluator, max_attempts)
    except EvaluatorUnavailable as e:
        return Deferred(sample, str(e)), None
    if isinstance(first, Dropped):
        return first, None
    return first, ast_stage(first.sample)


def run_pipeline(samples: Iterable[Sample], evaluator: Evaluator, max_attempts: int = 3,
                 parallelism: int = 1) -> PipelineResult:
    """Clean ``samples``; retained samples come back in input order.

    Samples whose evaluator call failed at the transport level are listed in
    ``deferred`` and counted separately; they are neither kept nor dropped.
    """
    samples = list(samples)
    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            outcomes = list(pool.map(lambda s: _process(s, evaluator, max_attempts), samples))
    else:
        outcomes = [_process(s, evaluator, max_attempts) for s in samples]
    stats = PipelineStats(input_count=len(samples))
    retained, deferred = [], []
    for first, second in outcomes:
        if isinstance(first, Deferred):
            deferred.append(first)
            stats.deferred_count += 1
        elif isinstance(first, Dropped):
            stats.drops[first.reason] += 1
        else:
            stats.after_llm_count += 1
            if isinstance(second, Dropped):
                stats.drops[second.reason] += 1
            else:
                stats.after_ast_count += 1
                retained.append(second.sample)
    return PipelineResult(retained, stats, deferred, outcomes)


def sharegpt_records(samples: Iterable[Sample]) -> list[dict]:
    """Conversation-style rows ``{system, user, reference}``."""
    return [{"system": system_prompt(s.tools), "user": s.query, "reference": s.reference} for s in samples]


def write_outputs(result: PipelineResult, out_dir: str | Path) -> dict:
    """Write ``retained.jsonl``, ``stats.json``, ``sharegpt.jsonl`` and (when
    any) ``deferred.jsonl``; returns the written paths by name."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "retained": (out / "retained.jsonl", [json.dumps(s.to_json(), ensure_ascii=False) for s in result.retained]),
        "sharegpt": (out / "sharegpt.jsonl", [json.dumps(r, ensure_ascii=False) for r in sharegpt_records(result.retained)]),
        "stats": (out / "stats.json", [json.dumps(result.stats.to_dict(), indent=2)]),
    }
    if result.deferred:
        files["deferred"] = (out / "deferred.jsonl",
                             [json.dumps({"id": d.sample.id, "error": d.error}) for d in result.deferred])
    for path, lines in files.values():
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        os.replace(tmp, path)
    return {k: v[0] for k, v in files.items()}
