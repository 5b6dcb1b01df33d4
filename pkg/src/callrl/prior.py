"""A fixed logit prior that plays the role of the pretrained base model.

Starting RL from uniform logits over a 60-token vocabulary would never
produce a single well-formed response, so the policy adds a frozen prior to
its trainable rows. The prior knows three things a small instruction-tuned
LM knows: the response grammar (as a soft bias), that words in the prompt are
worth copying, and induction (after ``x`` in the answer, prefer whatever
followed ``x`` in the query). It does not know when to stop listing
arguments, whether to call a tool at all, or how to pick among distractor
tools; those are learned. The prior sees the same (prompt, window) state as
the trainable table, so the policy stays Markov in that state.
"""

from __future__ import annotations

import re

import numpy as np

# token kinds of the function-calling vocab
LBRACK, RBRACK, LPAREN, RPAREN, EQ, COMMA = "lbrack", "rbrack", "lparen", "rparen", "eq", "comma"
TOOL, PARAM, STR, INT, BOOL, COT, TEXT = "tool", "param", "str", "int", "bool", "cot", "text"
VALUE_KINDS = (STR, INT, BOOL)
CONTENT_KINDS = (TOOL, PARAM) + VALUE_KINDS

_WORD_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*|-?\d+")

PROMPT_SEPARATOR = "\n\n"


def legal_next(prev2: str | None, prev1: str) -> tuple[str, ...]:
    """Token kinds the response grammar allows after ``prev2 prev1``."""
    if prev1 == "<bos>":
        return ("<think>",)
    if prev1 in ("<think>", COT):
        return (COT, "</think>")
    if prev1 == "</think>":
        return ("<answer>",)
    if prev1 == "<answer>":
        return (LBRACK, TEXT)
    if prev1 == TEXT:
        return (TEXT, "</answer>")
    if prev1 == LBRACK:
        return (TOOL,)
    if prev1 == TOOL:
        return (LPAREN,)
    if prev1 == LPAREN:
        return (PARAM, RPAREN)
    if prev1 == PARAM:
        return (EQ,)
    if prev1 == EQ:
        return VALUE_KINDS
    if prev1 in VALUE_KINDS:
        return (COMMA, RPAREN)
    if prev1 == COMMA:
        return (TOOL,) if prev2 == RPAREN else (PARAM,)
    if prev1 == RPAREN:
        return (COMMA, RBRACK)
    if prev1 == RBRACK:
        return ("</answer>",)
    if prev1 in ("</answer>", "<eos>"):
        return ("<eos>",)
    return ()


class StructuredPrior:
    def __init__(self, vocab, grammar: float = 10.0, copy_query: float = 2.0, copy_tools: float = 1.0,
                 induction: float = 2.0, relevance: float = 0.0, structure: float = 0.0, think_stop: float = 0.0):
        self.vocab = vocab
        self.weights = dict(grammar=grammar, copy_query=copy_query, copy_tools=copy_tools,
                            induction=induction, relevance=relevance, structure=structure,
                            think_stop=think_stop)
        self.kinds = list(vocab.kinds)
        V = len(vocab)
        self._kind_mask = {}
        for i, k in enumerate(self.kinds):
            self._kind_mask.setdefault(k, np.zeros(V))[i] = 1.0
        self._word_ids: dict[str, list[int]] = {}
        for i, (k, w) in enumerate(zip(self.kinds, vocab.words)):
            if k in CONTENT_KINDS:
                self._word_ids.setdefault(w, []).append(i)
        self._first = {}
        for i, k in enumerate(self.kinds):
            self._first.setdefault(k, i)
        self._grammar: dict = {}
        self._features: dict = {}
        self._cache: dict = {}

    def to_dict(self) -> dict:
        return {"type": "structured", **self.weights}

    def _legal_mask(self, prev2, prev1) -> np.ndarray:
        key = (prev2, prev1)
        mask = self._grammar.get(key)
        if mask is None:
            mask = np.zeros(len(self.kinds))
            for kind in legal_next(prev2, prev1):
                if kind in self._kind_mask:
                    mask += self._kind_mask[kind]
            self._grammar[key] = mask
        return mask

    def _prompt_features(self, prompt: str):
        feats = self._features.get(prompt)
        if feats is None:
            query, _, tools = prompt.partition(PROMPT_SEPARATOR)
            copy = np.zeros(len(self.kinds))
            seq = []
            for w in _WORD_RE.findall(query):
                for i in self._word_ids.get(w, ()):
                    seq.append(i)
            for i in set(seq):
                copy[i] += self.weights["copy_query"]
            tool_ids = {i for w in _WORD_RE.findall(tools) for i in self._word_ids.get(w, ())}
            for i in tool_ids:
                copy[i] += self.weights["copy_tools"]
            follows: dict[int, set] = {}
            for a, b in zip(seq, seq[1:]):
                follows.setdefault(a, set()).add(b)
            relevant = any(self.kinds[i] == TOOL and i in tool_ids for i in seq)
            feats = (copy, follows, relevant)
            self._features[prompt] = feats
        return feats

    def _nudge(self, vec, kind, amount):
        i = self._first.get(kind)
        if i is not None:
            vec[i] += amount

    def logits(self, prompt: str, context: tuple) -> np.ndarray:
        key = (prompt, context)
        out = self._cache.get(key)
        if out is not None:
            return out
        kinds = self.kinds
        prev1 = kinds[context[-1]]
        prev2 = kinds[context[-2]] if len(context) > 1 else None
        copy, follows, relevant = self._prompt_features(prompt)
        bonus = copy.copy()
        for tok in reversed(context):
            if kinds[tok] in CONTENT_KINDS:
                nexts = follows.get(tok, ())
                for nxt in nexts:
                    bonus[nxt] += self.weights["induction"]
                if kinds[tok] in VALUE_KINDS and tok == context[-1]:
                    # does the query carry on with another argument?
                    more = any(kinds[n] == PARAM for n in nexts)
                    self._nudge(bonus, COMMA if more else RPAREN, self.weights["structure"])
                break
        if prev1 == "<answer>":
            self._nudge(bonus, LBRACK if relevant else TEXT, self.weights["relevance"])
        # copy and induction only sharpen the choice among legal tokens
        legal = self._legal_mask(prev2, prev1)
        out = legal * (self.weights["grammar"] + bonus)
        if prev1 in ("<think>", COT):
            out[self.vocab.think_close] += self.weights["think_stop"]
        out.flags.writeable = False
        if len(self._cache) > 1_000_000:
            self._cache.clear()
        self._cache[key] = out
        return out


def prior_from_dict(d: dict, vocab) -> StructuredPrior:
    d = dict(d)
    kind = d.pop("type", None)
    if kind != "structured":
        raise ValueError(f"unknown prior type {kind!r}")
    return StructuredPrior(vocab, **d)
