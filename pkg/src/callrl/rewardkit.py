"""Response structure checks and the binary function-calling reward."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import TYPE_CHECKING

from .callspec import ParseError, calls_match, parse_call_list

if TYPE_CHECKING:
    from .taskbench import Sample

THINK_OPEN, THINK_CLOSE = "<think>", "</think>"
ANSWER_OPEN, ANSWER_CLOSE = "<answer>", "</answer>"
_TAGS = (THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE)

BAD_FORMAT = "BadFormat"
PARSE_FAILED_BUT_CALL_EXPECTED = "ParseFailedButCallExpected"
PARSED_BUT_TEXT_EXPECTED = "ParsedButTextExpected"
MISMATCH = "Mismatch"
FAILURE_REASONS = (BAD_FORMAT, PARSE_FAILED_BUT_CALL_EXPECTED, PARSED_BUT_TEXT_EXPECTED, MISMATCH)


class FormatError(ValueError):
    """``kind`` is one of MissingThink, MissingAnswer, ExtraneousText, DuplicateTag, WrongOrder."""

    def __init__(self, kind: str, detail: str = ""):
        super().__init__(f"{kind}: {detail}" if detail else kind)
        self.kind = kind


@dataclass(frozen=True)
class SectionedResponse:
    cot_text: str
    answer_text: str


@dataclass(frozen=True)
class RewardBreakdown:
    reward: int
    format_ok: bool
    parse_ok: bool
    match_ok: bool
    failure_reason: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def extract_sections(text: str) -> SectionedResponse:
    """Split ``<think>..</think><answer>..</answer>`` with nothing else around it.

    Only leading/trailing whitespace of the whole response and whitespace
    between the two blocks are tolerated.
    """
    s = text.strip()
    for tag in _TAGS:
        if s.count(tag) > 1:
            raise FormatError("DuplicateTag", tag)
    pos = [s.find(tag) for tag in _TAGS]
    if pos[0] < 0 or pos[1] < 0:
        raise FormatError("MissingThink")
    if pos[2] < 0 or pos[3] < 0:
        raise FormatError("MissingAnswer")
    if not (pos[0] < pos[1] < pos[2] < pos[3]):
        raise FormatError("WrongOrder")
    if pos[0] != 0:
        raise FormatError("ExtraneousText", "before <think>")
    between = s[pos[1] + len(THINK_CLOSE):pos[2]]
    if between.strip():
        raise FormatError("ExtraneousText", "between blocks")
    if pos[3] + len(ANSWER_CLOSE) != len(s):
        raise FormatError("ExtraneousText", "after </answer>")
    return SectionedResponse(s[len(THINK_OPEN):pos[1]], s[pos[2] + len(ANSWER_OPEN):pos[3]])


def reference_is_call(reference: str) -> bool:
    try:
        parse_call_list(reference)
        return True
    except ParseError:
        return False


def compute_reward(response: str, sample: "Sample") -> RewardBreakdown:
    """Score one response: 1 iff the format holds and the answer is right.

    The reference decides what "right" means. A reference that parses as a
    call list must be matched as an AST; a free-text reference is matched by
    any answer that does *not* parse. The reasoning text is never inspected.
    """
    try:
        reference = parse_call_list(sample.reference)
    except ParseError:
        reference = None
    try:
        if not isinstance(response, str):
            raise FormatError("MissingThink", "response is not text")
        sections = extract_sections(response)
    except FormatError:
        return RewardBreakdown(0, False, False, False, BAD_FORMAT)
    try:
        answer = parse_call_list(sections.answer_text)
    except ParseError:
        answer = None
    parse_ok = answer is not None

    if reference is None:
        if parse_ok:
            return RewardBreakdown(0, True, True, False, PARSED_BUT_TEXT_EXPECTED)
        return RewardBreakdown(1, True, False, True)
    if not parse_ok:
        return RewardBreakdown(0, True, False, False, PARSE_FAILED_BUT_CALL_EXPECTED)
    if not calls_match(answer, reference):
        return RewardBreakdown(0, True, True, False, MISMATCH)
    return RewardBreakdown(1, True, True, True)
