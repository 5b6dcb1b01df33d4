"""Tabular autoregressive softmax policy.

The next-token distribution conditions on a hashed prompt bucket and the
last ``window`` tokens. Logit rows are allocated on first write and start at
zero, so an untouched row is uniform (or equal to the optional fixed prior,
see :mod:`callrl.prior`). Gradients are analytic.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .rlcore import kl_rows, surrogate_terms

BOS, EOS = "<bos>", "<eos>"
THINK_OPEN, THINK_CLOSE = "<think>", "</think>"
ANSWER_OPEN, ANSWER_CLOSE = "<answer>", "</answer>"
RESERVED = (BOS, EOS, THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE)

CHECKPOINT_FORMAT = "callrl-policy"
CHECKPOINT_VERSION = 1


class NonFiniteGradient(FloatingPointError):
    pass


class TokenVocab:
    """Dense id <-> token string map. Reserved tokens always take ids 0..5.

    ``kinds`` tags each token with a lexical class and ``words`` gives the
    bare word a token stands for (``'"paris"'`` -> ``paris``); both are only
    used by priors and the tokenizer.
    """

    def __init__(self, tokens: Sequence[str], kinds: Sequence[str] | None = None, words: Sequence[str] | None = None):
        tokens = list(tokens)
        if tuple(tokens[:len(RESERVED)]) != RESERVED:
            tokens = list(RESERVED) + [t for t in tokens if t not in RESERVED]
            if kinds is not None or words is not None:
                raise ValueError("kinds/words given for a vocab without leading reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocab")
        if len(tokens) > 256:
            raise ValueError(f"vocab too large: {len(tokens)} > 256")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        self.kinds = list(kinds) if kinds is not None else list(RESERVED) + ["word"] * (len(tokens) - len(RESERVED))
        self.words = list(words) if words is not None else list(tokens)
        if len(self.kinds) != len(tokens) or len(self.words) != len(tokens):
            raise ValueError("kinds/words must align with tokens")
        self.bos, self.eos, self.think_open, self.think_close, self.answer_open, self.answer_close = range(6)

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, TokenVocab) and (self.tokens, self.kinds, self.words) == (other.tokens, other.kinds, other.words)

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(self.tokens[i] for i in ids if i not in (self.bos, self.eos))

    def encode(self, text: str) -> list[int]:
        """Greedy longest-match tokenization; raises ValueError if impossible."""
        by_len = sorted((t for t in self.tokens[2:]), key=len, reverse=True)
        out, pos = [], 0
        while pos < len(text):
            for t in by_len:
                if text.startswith(t, pos):
                    out.append(self.index[t])
                    pos += len(t)
                    break
            else:
                raise ValueError(f"cannot tokenize at {pos}: {text[pos:pos + 20]!r}")
        return out

    def to_dict(self) -> dict:
        return {"tokens": self.tokens, "kinds": self.kinds, "words": self.words}

    @classmethod
    def from_dict(cls, d: dict) -> "TokenVocab":
        return cls(d["tokens"], d["kinds"], d["words"])


@lru_cache(maxsize=65536)
def prompt_bucket(prompt: str, buckets: int) -> int:
    digest = hashlib.blake2b(prompt.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % buckets


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class PolicyParams:
    vocab: TokenVocab
    window: int = 3
    buckets: int = 64
    temperature: float = 1.0
    prior: object | None = None
    rows: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.window < 1 or self.buckets < 1 or self.temperature <= 0:
            raise ValueError("window, buckets and temperature must be positive")

    @property
    def V(self) -> int:
        return len(self.vocab)

    def key(self, prompt: str, context: tuple) -> tuple:
        return (prompt_bucket(prompt, self.buckets), tuple(context))

    def logits(self, prompt: str, context: tuple) -> np.ndarray:
        """Raw logits (before temperature): prior plus the trainable row."""
        row = self.rows.get(self.key(prompt, context))
        base = self.prior.logits(prompt, context) if self.prior is not None else None
        if base is None:
            return row.copy() if row is not None else np.zeros(self.V)
        return base + row if row is not None else base.copy()

    def initial_context(self) -> tuple:
        return (self.vocab.bos,) * self.window

    def contexts(self, tokens: Sequence[int]) -> list[tuple]:
        padded = list(self.initial_context()) + list(tokens)
        w = self.window
        return [tuple(padded[t:t + w]) for t in range(len(tokens))]

    def frozen_copy(self) -> "PolicyParams":
        return PolicyParams(self.vocab, self.window, self.buckets, self.temperature, self.prior,
                            {k: v.copy() for k, v in self.rows.items()})

    # -- checkpoint I/O --------------------------------------------------

    def to_dict(self) -> dict:
        rows = [[k[0], list(k[1]), v.tolist()] for k, v in sorted(self.rows.items())]
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "vocab": self.vocab.to_dict(),
            "window": self.window,
            "buckets": self.buckets,
            "temperature": self.temperature,
            "prior": self.prior.to_dict() if self.prior is not None else None,
            "rows": rows,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyParams":
        if d.get("format") != CHECKPOINT_FORMAT or d.get("version") != CHECKPOINT_VERSION:
            raise ValueError("not a policy checkpoint of a supported version")
        vocab = TokenVocab.from_dict(d["vocab"])
        prior = None
        if d.get("prior") is not None:
            from .prior import prior_from_dict
            prior = prior_from_dict(d["prior"], vocab)
        rows = {(b, tuple(ctx)): np.array(vals, dtype=np.float64) for b, ctx, vals in d["rows"]}
        return cls(vocab, d["window"], d["buckets"], d["temperature"], prior, rows)

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_dict(), separators=(",", ":")), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "PolicyParams":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def distribution(params: PolicyParams, prompt: str, context: tuple) -> np.ndarray:
    if len(context) != params.window:
        raise ValueError(f"context must hold {params.window} tokens")
    return softmax(params.logits(prompt, context) / params.temperature)


def _logit_matrix(params: PolicyParams, prompt: str, contexts: Sequence[tuple]) -> np.ndarray:
    if not contexts:
        return np.zeros((0, params.V))
    return np.stack([params.logits(prompt, c) for c in contexts]) / params.temperature


@dataclass
class Rollout:
    prompt: str
    tokens: list
    probs: np.ndarray
    dists: np.ndarray
    cot_span: range
    answer_span: range
    terminal: bool
    old_logprobs: np.ndarray = None

    def __post_init__(self):
        if self.old_logprobs is None:
            self.old_logprobs = np.log(self.probs)

    def __len__(self):
        return len(self.tokens)


def find_spans(tokens: Sequence[int], vocab: TokenVocab) -> tuple[range, range]:
    """Token index ranges of the reasoning and answer bodies, or empty ranges
    when the four tags are not each present exactly once and in order."""
    tags = (vocab.think_open, vocab.think_close, vocab.answer_open, vocab.answer_close)
    pos = []
    for tag in tags:
        hits = [i for i, t in enumerate(tokens) if t == tag]
        if len(hits) != 1:
            return range(0), range(0)
        pos.append(hits[0])
    if not (pos[0] < pos[1] < pos[2] < pos[3]):
        return range(0), range(0)
    return range(pos[0] + 1, pos[1]), range(pos[2] + 1, pos[3])


def sample_rollout(params: PolicyParams, prompt: str, max_len: int, rng: np.random.Generator) -> Rollout:
    """Sample until the end token or ``max_len`` tokens."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    ctx = params.initial_context()
    eos = params.vocab.eos
    tokens, probs, dists = [], [], []
    terminal = False
    for _ in range(max_len):
        p = softmax(params.logits(prompt, ctx) / params.temperature)
        cdf = np.cumsum(p)
        k = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), len(p) - 1)
        tokens.append(k)
        probs.append(p[k])
        dists.append(p)
        ctx = ctx[1:] + (k,)
        if k == eos:
            terminal = True
            break
    cot, ans = find_spans(tokens, params.vocab)
    return Rollout(prompt, tokens, np.array(probs), np.array(dists), cot, ans, terminal)


def greedy_rollout(params: PolicyParams, prompt: str, max_len: int) -> Rollout:
    """Argmax decoding (ties go to the lowest id)."""
    ctx = params.initial_context()
    tokens, probs, dists = [], [], []
    terminal = False
    for _ in range(max_len):
        p = softmax(params.logits(prompt, ctx) / params.temperature)
        k = int(np.argmax(p))
        tokens.append(k)
        probs.append(p[k])
        dists.append(p)
        ctx = ctx[1:] + (k,)
        if k == params.vocab.eos:
            terminal = True
            break
    cot, ans = find_spans(tokens, params.vocab)
    return Rollout(prompt, tokens, np.array(probs), np.array(dists), cot, ans, terminal)


def logprob_trace(params: PolicyParams, prompt: str, tokens: Sequence[int]) -> np.ndarray:
    """log pi(o_t | prompt, o_<t) for every position."""
    if len(tokens) == 0:
        return np.zeros(0)
    z = _logit_matrix(params, prompt, params.contexts(tokens))
    return log_softmax(z)[np.arange(len(tokens)), np.asarray(tokens)]


@dataclass
class SurrogateStats:
    objective: float
    tokens: int
    mean_kl: float
    ratio_clip_fraction: float


def _token_terms(params, ref_params, rollout, advantages, epsilon):
    contexts = params.contexts(rollout.tokens)
    idx = np.arange(len(rollout.tokens))
    toks = np.asarray(rollout.tokens)
    logp = log_softmax(_logit_matrix(params, rollout.prompt, contexts))
    logq = log_softmax(_logit_matrix(ref_params, rollout.prompt, contexts))
    p = np.exp(logp)
    kl = kl_rows(p, np.exp(logq))
    ratios = np.exp(logp[idx, toks] - rollout.old_logprobs)
    adv = np.broadcast_to(np.asarray(advantages, dtype=np.float64), toks.shape)
    terms, clipped = surrogate_terms(ratios, adv, epsilon)
    return contexts, toks, p, logp, logq, kl, ratios, adv, terms, clipped


def surrogate_objective(params: PolicyParams, batch, epsilon: float, beta: float, ref_params: PolicyParams) -> float:
    """Token-mean clipped surrogate minus beta * KL(pi || pi_ref) over a batch
    of ``(rollout, per-token advantages)`` pairs."""
    total, n = 0.0, 0
    for rollout, advantages in batch:
        if len(rollout.tokens) == 0:
            continue
        *_, kl, _, _, terms, _ = _token_terms(params, ref_params, rollout, advantages, epsilon)
        total += float(np.sum(terms - beta * kl))
        n += len(rollout.tokens)
    return total / n if n else 0.0


def surrogate_gradient(params: PolicyParams, batch, epsilon: float, beta: float,
                       ref_params: PolicyParams, with_stats: bool = False):
    """Analytic gradient of :func:`surrogate_objective` w.r.t. every touched
    logit row. Returns ``{row_key: gradient}`` (and stats if requested).

    Per token with state s, chosen id k, p = softmax(z / T):
      policy part (unless the clipped constant wins):  A * rho * (e_k - p) / T
      KL part:  -beta * p * (log p - log q - KL) / T
    """
    n_total = sum(len(r.tokens) for r, _ in batch)
    grads: dict = {}
    if n_total == 0:
        return (grads, SurrogateStats(0.0, 0, 0.0, 0.0)) if with_stats else grads
    inv_t = 1.0 / params.temperature
    obj_sum = kl_sum = 0.0
    clip_count = 0
    for rollout, advantages in batch:
        if len(rollout.tokens) == 0:
            continue
        contexts, toks, p, logp, logq, kl, ratios, adv, terms, clipped = _token_terms(
            params, ref_params, rollout, advantages, epsilon)
        coef = np.where(clipped, 0.0, adv * ratios)
        g = -coef[:, None] * p
        g[np.arange(len(toks)), toks] += coef
        if beta:
            g -= beta * p * (logp - logq - kl[:, None])
        g *= inv_t / n_total
        for c, row in zip(contexts, g):
            key = params.key(rollout.prompt, c)
            acc = grads.get(key)
            if acc is None:
                grads[key] = row.copy()
            else:
                acc += row
        if with_stats:
            obj_sum += float(np.sum(terms - beta * kl))
            kl_sum += float(kl.sum())
            clip_count += int(clipped.sum())
    if with_stats:
        return grads, SurrogateStats(obj_sum / n_total, n_total, kl_sum / n_total, clip_count / n_total)
    return grads


def apply_update(params: PolicyParams, grads: dict, learning_rate: float) -> PolicyParams:
    """In-place ascent step ``logits += lr * grad`` on the touched rows."""
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in row {key}")
    if learning_rate == 0:
        return params
    V = params.V
    for key, g in grads.items():
        row = params.rows.get(key)
        if row is None:
            row = np.zeros(V)
            params.rows[key] = row
        row += learning_rate * g
    return params


def mean_kl_to_ref(params: PolicyParams, ref_params: PolicyParams, rollouts: Sequence[Rollout]) -> float:
    """Average exact KL(pi || pi_ref) over the states visited by ``rollouts``."""
    total, n = 0.0, 0
    for ro in rollouts:
        if not ro.tokens:
            continue
        ctx = params.contexts(ro.tokens)
        p = softmax(_logit_matrix(params, ro.prompt, ctx))
        q = softmax(_logit_matrix(ref_params, ro.prompt, ctx))
        total += float(kl_rows(p, q).sum())
        n += len(ro.tokens)
    return total / n if n else 0.0

