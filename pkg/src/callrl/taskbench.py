"""Seeded synthetic function-calling samples and per-category AST accuracy.

Every tool name, parameter name and argument value comes from the closed word
lists below, which are also the policy vocabulary, and queries quote the
target tool and its argument values verbatim.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import prior as K
from .callspec import CallList, FunctionCall, ParamSpec, ToolSchema, serialize_call_list, tools_from_json, tools_to_json
from .policy import RESERVED, TokenVocab
from .rewardkit import FAILURE_REASONS, compute_reward

CATEGORIES = ("simple", "multiple", "parallel", "parallel_multiple", "irrelevance")

TOOL_NAMES = ("get_weather", "book_flight", "find_hotel", "get_stock", "send_email",
              "convert_units", "get_news", "play_song", "set_alarm", "order_food")
PARAM_NAMES = ("city", "date", "count", "name", "unit", "mode", "limit", "topic", "level", "days", "genre", "price")
STRING_VALUES = ("paris", "london", "tokyo", "berlin", "jazz", "rock", "sushi", "pizza", "alice", "bob", "metric", "fast")
INT_VALUES = tuple(range(1, 9))
COT_WORDS = ("need", "check", "call", "args")
TEXT_WORDS = ("no", "tool", "fits")

IRRELEVANT_REFERENCE = "No available tool can handle this request."

TRAIN_TEMPLATES = (
    "Use {tool} with {args}.",
    "Please call {tool} for {args}.",
    "I need {tool}: {args}.",
)
HELDOUT_TEMPLATES = (
    "Could you run {tool} using {args}?",
    "{tool} please, {args}.",
)
PARALLEL_TEMPLATES = {
    "train": ("Use {tool} for each of these: {groups}.", "Call {tool} several times: {groups}."),
    "heldout": ("Run {tool} once per item: {groups}?",),
}
MULTI_CALL_TEMPLATES = {
    "train": ("Do all of this: {calls}.", "Please handle these: {calls}."),
    "heldout": ("Can you take care of: {calls}?",),
}
IRRELEVANT_TEMPLATES = {
    "train": ("Tell me a story about {word}.", "What does {word} mean to you?"),
    "heldout": ("Write a poem on {word}.",),
}


def build_vocab() -> TokenVocab:
    """The function-calling vocabulary (63 tokens)."""
    tokens, kinds, words = list(RESERVED), list(RESERVED), list(RESERVED)

    def add(tok, kind, word):
        tokens.append(tok)
        kinds.append(kind)
        words.append(word)

    for tok, kind in (("[", K.LBRACK), ("]", K.RBRACK), ("(", K.LPAREN), (")", K.RPAREN), ("=", K.EQ), (", ", K.COMMA)):
        add(tok, kind, tok)
    for name in TOOL_NAMES:
        add(name, K.TOOL, name)
    for name in PARAM_NAMES:
        add(name, K.PARAM, name)
    for v in STRING_VALUES:
        add(f'"{v}"', K.STR, v)
    for v in INT_VALUES:
        add(str(v), K.INT, str(v))
    add("True", K.BOOL, "True")
    add("False", K.BOOL, "False")
    for w in COT_WORDS:
        add(w + " ", K.COT, w)
    for w in TEXT_WORDS:
        add(w + " ", K.TEXT, w)
    return TokenVocab(tokens, kinds, words)


@dataclass
class Sample:
    id: str
    query: str
    tools: list
    reference: str
    category: str

    def to_json(self) -> dict:
        return {"id": self.id, "query": self.query, "tools": tools_to_json(self.tools),
                "reference": self.reference, "category": self.category}

    @classmethod
    def from_json(cls, d: Mapping) -> "Sample":
        return cls(d["id"], d["query"], tools_from_json(d["tools"]), d["reference"], d["category"])


def render_prompt(sample: Sample) -> str:
    """Policy-side prompt: the query, a blank line, then the tool set JSON."""
    return sample.query + K.PROMPT_SEPARATOR + json.dumps(tools_to_json(sample.tools), separators=(",", ":"))


def system_prompt(tools: Sequence[ToolSchema]) -> str:
    return (
        "You can call the functions described below (JSON). Work out which call or calls answer the "
        "user's request. Write your reasoning inside <think></think>, then give the calls inside "
        "<answer></answer> as [name(arg=value, ...), ...]. If no function fits the request, or a "
        "required argument is missing from it, answer in plain text instead.\n"
        + json.dumps(tools_to_json(tools))
    )


def write_jsonl(samples: Iterable[Sample], path: str | Path):
    with open(path, "w", encoding="utf-8") as f:
        for s in samples:
            f.write(json.dumps(s.to_json(), ensure_ascii=False) + "\n")


def read_jsonl(path: str | Path) -> list[Sample]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                out.append(Sample.from_json(json.loads(line)))
    return out


# ---------------------------------------------------------------------------
# generation


_PARAM_RANGES = {1: (1, 2), 2: (3, 4), 3: (5, 6)}


class _ValuePool:
    """Draws argument values without repeats inside one sample."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.strings = list(rng.permutation(len(STRING_VALUES)))
        self.ints = list(rng.permutation(len(INT_VALUES)))
        self.bools = [bool(rng.integers(2))]
        self.bools.append(not self.bools[0])

    def string(self) -> str:
        return STRING_VALUES[self.strings.pop()]

    def integer(self) -> int:
        return INT_VALUES[self.ints.pop()]

    def can(self, tag: str, n_enum: int = 3) -> bool:
        return {"string": len(self.strings) >= 1, "integer": len(self.ints) >= 1,
                "boolean": len(self.bools) >= 1, "enum": len(self.strings) >= n_enum}[tag]


def _make_tool(rng, name: str, n_params: int, pool: _ValuePool) -> tuple[ToolSchema, dict]:
    """A schema plus one valid argument assignment for it."""
    pnames = [PARAM_NAMES[i] for i in rng.choice(len(PARAM_NAMES), size=n_params, replace=False)]
    params, args = [], {}
    for pname in pnames:
        tags = [t for t in ("string", "integer", "boolean", "enum") if pool.can(t)]
        tag = tags[int(rng.integers(len(tags)))]
        if tag == "enum":
            n = int(rng.integers(2, 4))
            values = tuple(pool.string() for _ in range(n))
            params.append(ParamSpec(pname, "enum", f"One of the allowed {pname} values.", True, values))
            args[pname] = values[int(rng.integers(n))]
        else:
            params.append(ParamSpec(pname, tag, f"The {pname} to use.", True))
            if tag == "string":
                args[pname] = pool.string()
            elif tag == "integer":
                args[pname] = pool.integer()
            else:
                args[pname] = pool.bools.pop()
    desc = f"Runs {name.replace('_', ' ')}."
    return ToolSchema(name, desc, tuple(params)), args


def _render_args(args: dict) -> str:
    parts = [f"{k} {v}" for k, v in args.items()]
    return parts[0] if len(parts) == 1 else ", ".join(parts[:-1]) + " and " + parts[-1]


def generate_sample(rng: np.random.Generator, category: str, difficulty: int = 1,
                    template_set: str = "train", sample_id: str | None = None) -> Sample:
    """One synthetic sample. Fully determined by the generator state."""
    if category not in CATEGORIES:
        raise ValueError(f"unknown category {category!r}")
    if difficulty not in _PARAM_RANGES:
        raise ValueError("difficulty must be 1, 2 or 3")
    if template_set not in ("train", "heldout"):
        raise ValueError("template_set must be 'train' or 'heldout'")
    lo, hi = _PARAM_RANGES[difficulty]
    n_calls_tools = {"simple": 1, "multiple": 1, "parallel": 1, "parallel_multiple": 2, "irrelevance": 0}[category]
    n_distractors = {"simple": 0, "multiple": difficulty, "parallel": difficulty - 1,
                     "parallel_multiple": difficulty - 1, "irrelevance": difficulty}[category]
    names = [TOOL_NAMES[i] for i in rng.choice(len(TOOL_NAMES), size=n_calls_tools + n_distractors, replace=False)]
    pool = _ValuePool(rng)

    # parallel calls share one schema, so keep them to small, re-drawable types
    if category == "parallel":
        n_params = int(rng.integers(lo, hi + 1))
        n_calls = 2 if difficulty < 3 else 3
        pnames = [PARAM_NAMES[i] for i in rng.choice(len(PARAM_NAMES), size=n_params, replace=False)]
        max_int = len(INT_VALUES) // n_calls
        n_str = int(rng.integers(max(0, n_params - max_int), min(n_params, len(STRING_VALUES) // n_calls) + 1))
        tags = [tag for tag in rng.permutation(["string"] * n_str + ["integer"] * (n_params - n_str))]
        tool = ToolSchema(names[0], f"Runs {names[0].replace('_', ' ')}.",
                          tuple(ParamSpec(p, t, f"The {p} to use.", True) for p, t in zip(pnames, tags)))
        calls = []
        for _ in range(n_calls):
            calls.append(FunctionCall(tool.name, {p: pool.string() if t == "string" else pool.integer()
                                                  for p, t in zip(pnames, tags)}))
        targets = [tool]
    elif category == "irrelevance":
        targets, calls = [], []
    else:
        targets, calls = [], []
        for name in names[:n_calls_tools]:
            tool, args = _make_tool(rng, name, int(rng.integers(lo, hi + 1)), pool)
            targets.append(tool)
            calls.append(FunctionCall(name, args))

    distractors = [_make_tool(rng, name, int(rng.integers(lo, hi + 1)), _ValuePool(rng))[0]
                   for name in names[n_calls_tools:]]
    tools = targets + distractors
    order = rng.permutation(len(tools))
    tools = [tools[i] for i in order]

    if category == "irrelevance":
        template = IRRELEVANT_TEMPLATES[template_set]
        word = STRING_VALUES[int(rng.integers(len(STRING_VALUES)))]
        query = template[int(rng.integers(len(template)))].format(word=word)
        reference = IRRELEVANT_REFERENCE
    elif category == "parallel":
        template = PARALLEL_TEMPLATES[template_set]
        groups = "; ".join(_render_args(c.args) for c in calls)
        query = template[int(rng.integers(len(template)))].format(tool=calls[0].name, groups=groups)
        reference = serialize_call_list(CallList(tuple(calls)))
    elif category == "parallel_multiple":
        template = MULTI_CALL_TEMPLATES[template_set]
        rendered = "; ".join(f"{c.name} with {_render_args(c.args)}" for c in calls)
        query = template[int(rng.integers(len(template)))].format(calls=rendered)
        reference = serialize_call_list(CallList(tuple(calls)))
    else:
        templates = TRAIN_TEMPLATES if template_set == "train" else HELDOUT_TEMPLATES
        query = templates[int(rng.integers(len(templates)))].format(tool=calls[0].name, args=_render_args(calls[0].args))
        reference = serialize_call_list(CallList(tuple(calls)))

    if sample_id is None:
        sample_id = f"{category}-{int(rng.integers(16**8)):08x}"
    return Sample(sample_id, query, tools, reference, category)


def generate_dataset(counts: Mapping[str, int], seed: int, difficulty: int = 1,
                     template_set: str = "train") -> list[Sample]:
    """``counts[c]`` samples of each category, in category order, ids unique."""
    rng = np.random.default_rng(seed)
    out = []
    for category in CATEGORIES:
        for i in range(int(counts.get(category, 0))):
            out.append(generate_sample(rng, category, difficulty, template_set, f"{category}-{i:05d}"))
    unknown = set(counts) - set(CATEGORIES)
    if unknown:
        raise ValueError(f"unknown categories: {sorted(unknown)}")
    return out


# ---------------------------------------------------------------------------
# evaluation


class MissingResponse(KeyError):
    pass


@dataclass
class EvalReport:
    accuracy: dict
    overall: float
    micro: float
    counts: dict
    failures: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "overall": self.overall, "micro": self.micro,
                "counts": self.counts, "failures": self.failures}

    def table(self) -> str:
        lines = [f"{'category':<20}{'n':>6}{'acc':>9}"]
        for c in CATEGORIES:
            if c in self.counts:
                lines.append(f"{c:<20}{self.counts[c]:>6}{self.accuracy[c]:>9.4f}")
        lines.append(f"{'overall (macro)':<20}{sum(self.counts.values()):>6}{self.overall:>9.4f}")
        lines.append(f"{'overall (micro)':<20}{'':>6}{self.micro:>9.4f}")
        return "\n".join(lines)


def evaluate(responses: Mapping[str, str], dataset: Sequence[Sample]) -> EvalReport:
    """Per-category reward accuracy; overall is the unweighted category mean."""
    hits: Counter = Counter()
    counts: Counter = Counter()
    failures: Counter = Counter()
    for s in dataset:
        if s.id not in responses:
            raise MissingResponse(s.id)
        b = compute_reward(responses[s.id], s)
        counts[s.category] += 1
        hits[s.category] += b.reward
        if b.failure_reason:
            failures[b.failure_reason] += 1
    cats = [c for c in CATEGORIES if counts[c]] + sorted(c for c in counts if c not in CATEGORIES)
    accuracy = {c: hits[c] / counts[c] for c in cats}
    overall = sum(accuracy.values()) / len(accuracy) if accuracy else 0.0
    n = sum(counts.values())
    micro = sum(hits.values()) / n if n else 0.0
    return EvalReport(accuracy, overall, micro, {c: counts[c] for c in cats},
                      {r: failures[r] for r in FAILURE_REASONS if failures[r]})
