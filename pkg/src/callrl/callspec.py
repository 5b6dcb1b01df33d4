"""Tool schemas and the function-call AST.

Answers are call lists in keyword form, e.g.::

    [get_team_rank(team_name="LA Lakers", season="2021"), f(a=1)]

Values are plain Python objects (str, int, float, bool, list, dict). Because
Python treats ``1 == 1.0 == True``, equality between values always goes
through :func:`value_key`, which keeps the type tags apart.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_NUMBER_RE = re.compile(r"-?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?")

TYPE_TAGS = ("string", "integer", "float", "boolean", "object", "array", "enum")

# wire literal -> type tag
_WIRE_TYPES = {
    "string": "string",
    "integer": "integer",
    "float": "float",
    "number": "float",
    "boolean": "boolean",
    "dict": "object",
    "object": "object",
    "list": "array",
    "array": "array",
}

MAX_DEPTH = 64


class ParseError(ValueError):
    """Raised when text is not a valid call list.

    ``offset`` is a byte offset into the UTF-8 encoding of the input.
    """

    def __init__(self, reason: str, offset: int):
        super().__init__(f"{reason} at byte {offset}")
        self.reason = reason
        self.offset = offset


class SchemaError(ValueError):
    """Raised for malformed tool schemas, at construction or ingestion."""


@dataclass(frozen=True)
class ParamSpec:
    name: str
    type_tag: str
    description: str = ""
    required: bool = True
    enum_values: tuple[str, ...] = ()

    def __post_init__(self):
        if not IDENT_RE.fullmatch(self.name or ""):
            raise SchemaError(f"bad parameter name {self.name!r}")
        if self.type_tag not in TYPE_TAGS:
            raise SchemaError(f"unknown type tag {self.type_tag!r}")
        if self.type_tag == "enum":
            if not self.enum_values:
                raise SchemaError(f"enum parameter {self.name!r} has no values")
            if not all(isinstance(v, str) for v in self.enum_values):
                raise SchemaError(f"enum parameter {self.name!r} has non-string values")
        elif self.enum_values:
            raise SchemaError(f"non-enum parameter {self.name!r} carries enum values")


@dataclass(frozen=True)
class ToolSchema:
    name: str
    description: str = ""
    params: tuple[ParamSpec, ...] = ()

    def __post_init__(self):
        if not IDENT_RE.fullmatch(self.name or ""):
            raise SchemaError(f"bad tool name {self.name!r}")
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate parameter names in {self.name!r}")

    def param(self, name: str) -> ParamSpec | None:
        for p in self.params:
            if p.name == name:
                return p
        return None

    def to_wire(self) -> dict:
        properties = {}
        for p in self.params:
            if p.type_tag == "enum":
                prop = {"type": "string", "description": p.description, "enum": list(p.enum_values)}
            else:
                wire = {"object": "dict", "array": "array"}.get(p.type_tag, p.type_tag)
                prop = {"type": wire, "description": p.description}
            properties[p.name] = prop
        return {
            "name": self.name,
            "description": self.description,
            "parameters": {
                "type": "dict",
                "properties": properties,
                "required": [p.name for p in self.params if p.required],
            },
        }

    @classmethod
    def from_wire(cls, obj: dict) -> "ToolSchema":
        if not isinstance(obj, dict) or "name" not in obj:
            raise SchemaError("tool entry must be an object with a name")
        params_obj = obj.get("parameters") or {}
        props = params_obj.get("properties") or {}
        required = set(params_obj.get("required") or [])
        unknown_required = required - set(props)
        if unknown_required:
            raise SchemaError(f"required names without properties: {sorted(unknown_required)}")
        params = []
        for pname, prop in props.items():
            literal = prop.get("type")
            if literal not in _WIRE_TYPES:
                raise SchemaError(f"unknown type literal {literal!r} for {pname!r}")
            enum = prop.get("enum")
            if enum is not None:
                if not isinstance(enum, list) or not enum or not all(isinstance(v, str) for v in enum):
                    raise SchemaError(f"enum for {pname!r} must be a non-empty list of strings")
                params.append(ParamSpec(pname, "enum", prop.get("description", ""), pname in required, tuple(enum)))
            else:
                params.append(ParamSpec(pname, _WIRE_TYPES[literal], prop.get("description", ""), pname in required))
        return cls(obj["name"], obj.get("description", ""), tuple(params))


def tools_to_json(tools: Sequence[ToolSchema]) -> list[dict]:
    return [t.to_wire() for t in tools]


def tools_from_json(data: str | list) -> list[ToolSchema]:
    """Ingest a tool set in the JSON wire format (string or decoded list)."""
    if isinstance(data, str):
        data = json.loads(data)
    if not isinstance(data, list):
        raise SchemaError("tool set must be a JSON array")
    tools = [ToolSchema.from_wire(obj) for obj in data]
    names = [t.name for t in tools]
    if len(set(names)) != len(names):
        raise SchemaError("duplicate tool names in tool set")
    return tools


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class FunctionCall:
    name: str
    args: dict[str, Any] = field(default_factory=dict)

    def key(self) -> tuple:
        """Order-insensitive structural identity used for matching."""
        return (self.name, tuple(sorted((k, value_key(v)) for k, v in self.args.items())))

    def strict_key(self) -> tuple:
        """Like :meth:`key` but keeps keyword order (round-trip identity)."""
        return (self.name, tuple((k, value_key(v, ordered=True)) for k, v in self.args.items()))


@dataclass(frozen=True)
class CallList:
    calls: tuple[FunctionCall, ...]

    def __post_init__(self):
        if not self.calls:
            raise ValueError("a call list holds at least one call")

    def __len__(self):
        return len(self.calls)

    def __iter__(self):
        return iter(self.calls)

    def strict_key(self) -> tuple:
        return tuple(c.strict_key() for c in self.calls)


def value_key(v: Any, ordered: bool = False) -> tuple:
    """Hashable, type-tagged form of a Value.

    Floats compare by bit pattern (``float.hex``), so ``1 != 1.0`` and
    ``0.0 != -0.0``. Objects compare as mappings unless ``ordered``.
    """
    if isinstance(v, bool):
        return ("b", v)
    if isinstance(v, int):
        return ("i", v)
    if isinstance(v, float):
        return ("f", v.hex())
    if isinstance(v, str):
        return ("s", v)
    if isinstance(v, (list, tuple)):
        return ("a", tuple(value_key(x, ordered) for x in v))
    if isinstance(v, dict):
        items = tuple((k, value_key(x, ordered)) for k, x in v.items())
        return ("o", items if ordered else tuple(sorted(items)))
    raise TypeError(f"not a call value: {type(v).__name__}")


def value_type_name(v: Any) -> str:
    if isinstance(v, bool):
        return "boolean"
    if isinstance(v, int):
        return "integer"
    if isinstance(v, float):
        return "float"
    if isinstance(v, str):
        return "string"
    if isinstance(v, (list, tuple)):
        return "array"
    if isinstance(v, dict):
        return "object"
    return type(v).__name__


# ---------------------------------------------------------------------------
# Parsing


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.depth = 0

    def fail(self, reason: str, pos: int | None = None):
        pos = self.pos if pos is None else pos
        raise ParseError(reason, len(self.text[:pos].encode("utf-8", "surrogatepass")))

    def ws(self):
        text, n = self.text, len(self.text)
        while self.pos < n and text[self.pos] in " \t\r\n":
            self.pos += 1

    def peek(self) -> str:
        self.ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expect(self, ch: str):
        got = self.peek()
        if got != ch:
            self.fail(f"expected {ch!r}, got {got!r}" if got else f"expected {ch!r}, got end of input")
        self.pos += 1

    def name(self) -> str:
        self.ws()
        m = IDENT_RE.match(self.text, self.pos)
        if not m:
            got = self.text[self.pos:self.pos + 1]
            self.fail(f"expected identifier, got {got!r}" if got else "expected identifier, got end of input")
        self.pos = m.end()
        return m.group()

    def call_list(self) -> CallList:
        self.expect("[")
        if self.peek() == "]":
            self.fail("empty bracket pair")
        calls = [self.call()]
        while self.peek() == ",":
            self.pos += 1
            calls.append(self.call())
        self.expect("]")
        self.ws()
        if self.pos != len(self.text):
            self.fail("trailing garbage after ']'")
        return CallList(tuple(calls))

    def call(self) -> FunctionCall:
        fname = self.name()
        self.expect("(")
        args: dict[str, Any] = {}
        if self.peek() != ")":
            while True:
                start = self.pos
                self.ws()
                m = IDENT_RE.match(self.text, self.pos)
                if m is None:
                    if self.peek() == ")":
                        self.fail("unexpected token ')'")
                    self.fail("positional argument")
                self.pos = m.end()
                if self.peek() != "=":
                    self.fail("positional argument", start)
                self.pos += 1
                kw = m.group()
                if kw in args:
                    self.fail(f"duplicate keyword {kw!r}", start)
                args[kw] = self.literal()
                if self.peek() == ",":
                    self.pos += 1
                    continue
                break
        self.expect(")")
        return FunctionCall(fname, args)

    def literal(self) -> Any:
        ch = self.peek()
        if ch in ("'", '"'):
            return self.string()
        if ch == "[":
            return self.nested(self.array)
        if ch == "{":
            return self.nested(self.obj)
        m = _NUMBER_RE.match(self.text, self.pos)
        if m:
            tok = m.group()
            end = m.end()
            if end < len(self.text) and (self.text[end].isalnum() or self.text[end] in "_."):
                self.fail("malformed number")
            self.pos = end
            if "." in tok or "e" in tok or "E" in tok:
                val = float(tok)
                if not math.isfinite(val):
                    self.fail("float out of range", m.start())
                return val
            return int(tok)
        m = IDENT_RE.match(self.text, self.pos)
        if m and m.group() in ("true", "True", "false", "False"):
            self.pos = m.end()
            return m.group() in ("true", "True")
        if not ch:
            self.fail("unexpected end of input")
        self.fail(f"unexpected token {ch!r}")

    def nested(self, fn):
        self.depth += 1
        if self.depth > MAX_DEPTH:
            self.fail("nesting too deep")
        try:
            return fn()
        finally:
            self.depth -= 1

    def string(self) -> str:
        quote = self.text[self.pos]
        start = self.pos
        self.pos += 1
        out = []
        text, n = self.text, len(self.text)
        while self.pos < n:
            c = text[self.pos]
            if c == "\\":
                if self.pos + 1 >= n:
                    break
                nxt = text[self.pos + 1]
                # only quote/backslash escapes are defined; others stay literal
                out.append(nxt if nxt in "\\\"'" else c + nxt)
                self.pos += 2
                continue
            if c == quote:
                self.pos += 1
                return "".join(out)
            out.append(c)
            self.pos += 1
        self.fail("unterminated string", start)

    def array(self) -> list:
        self.expect("[")
        items = []
        if self.peek() == "]":
            self.pos += 1
            return items
        while True:
            items.append(self.literal())
            if self.peek() == ",":
                self.pos += 1
                continue
            break
        self.expect("]")
        return items

    def obj(self) -> dict:
        self.expect("{")
        out: dict[str, Any] = {}
        if self.peek() == "}":
            self.pos += 1
            return out
        while True:
            if self.peek() not in ("'", '"'):
                self.fail("object keys must be strings")
            kpos = self.pos
            k = self.string()
            if k in out:
                self.fail(f"duplicate object key {k!r}", kpos)
            self.expect(":")
            out[k] = self.literal()
            if self.peek() == ",":
                self.pos += 1
                continue
            break
        self.expect("}")
        return out


def parse_call_list(text: str | bytes) -> CallList:
    """Parse ``[name(kw=literal, ...), ...]`` into a :class:`CallList`.

    Raises :class:`ParseError` for anything else, including free text,
    ``[]`` and positional arguments.
    """
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ParseError("invalid utf-8", e.start) from None
    p = _Parser(text)
    return p.call_list()


def try_parse(text: str) -> CallList | None:
    try:
        return parse_call_list(text)
    except ParseError:
        return None


# ---------------------------------------------------------------------------
# Serialization


def _quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def serialize_value(v: Any) -> str:
    if isinstance(v, bool):
        return "True" if v else "False"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if not math.isfinite(v):
            raise ValueError("non-finite floats have no literal form")
        return repr(v)
    if isinstance(v, str):
        return _quote(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(serialize_value(x) for x in v) + "]"
    if isinstance(v, dict):
        return "{" + ", ".join(f"{_quote(k)}: {serialize_value(x)}" for k, x in v.items()) + "}"
    raise TypeError(f"not a call value: {type(v).__name__}")


def serialize_call(call: FunctionCall) -> str:
    return f"{call.name}(" + ", ".join(f"{k}={serialize_value(v)}" for k, v in call.args.items()) + ")"


def serialize_call_list(calls: CallList | Iterable[FunctionCall]) -> str:
    return "[" + ", ".join(serialize_call(c) for c in calls) + "]"


# ---------------------------------------------------------------------------
# Validation and matching


@dataclass(frozen=True)
class ValidationError:
    kind: str  # UnknownFunction | MissingRequired | UnknownParam | TypeMismatch | EnumViolation
    param: str | None = None
    expected: str | None = None
    got: str | None = None

    def __str__(self):
        parts = [self.kind] + [f"{k}={v}" for k, v in (("param", self.param), ("expected", self.expected), ("got", self.got)) if v is not None]
        return " ".join(parts)


def _type_ok(spec: ParamSpec, v: Any) -> ValidationError | None:
    got = value_type_name(v)
    if spec.type_tag == "enum":
        if got != "string":
            return ValidationError("TypeMismatch", spec.name, "string", got)
        if v not in spec.enum_values:
            return ValidationError("EnumViolation", spec.name, None, v)
        return None
    if got != spec.type_tag:
        return ValidationError("TypeMismatch", spec.name, spec.type_tag, got)
    return None


def validate_against_schema(call: FunctionCall, tools: Sequence[ToolSchema]) -> list[ValidationError]:
    """Check one call against the tool set. An empty list means the call is valid."""
    if not tools:
        raise ValueError("tool set is empty")
    schema = next((t for t in tools if t.name == call.name), None)
    if schema is None:
        return [ValidationError("UnknownFunction", got=call.name)]
    errors = []
    for p in schema.params:
        if p.required and p.name not in call.args:
            errors.append(ValidationError("MissingRequired", p.name))
    for k, v in call.args.items():
        spec = schema.param(k)
        if spec is None:
            errors.append(ValidationError("UnknownParam", k))
            continue
        err = _type_ok(spec, v)
        if err:
            errors.append(err)
    return errors


def validate_call_list(calls: CallList, tools: Sequence[ToolSchema]) -> list[ValidationError]:
    return [e for c in calls for e in validate_against_schema(c, tools)]


def calls_match(candidate: CallList, reference: CallList) -> bool:
    """Multiset equality of calls; keyword order and call order are ignored."""
    if len(candidate.calls) != len(reference.calls):
        return False
    return Counter(c.key() for c in candidate) == Counter(c.key() for c in reference)
