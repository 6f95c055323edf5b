"""Skeptic agents: trigger catalog, model-output parsing, and the three agent calls.

The External Skeptic sees the media and lists skeptical claims. The Internal
Skeptic sees one claim at a time (text only) and answers VALID, INVALID or
EPOCHE with the condition it needs clarified. The reflective generator turns
an epoche verdict into a follow-up request for the External Skeptic.
"""

from __future__ import annotations

import enum
import functools
import hashlib
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional, Union

from .gateway import Backend, ChatRequest, ChatResponse, TextPart
from .media import MediaInput
from .tree import Decision, RawFlag

SEPARATOR = "\n\n"


class TriggerKind(str, enum.Enum):
    DEFAULT = "Default"
    NEUTRAL = "Neutral"
    SKEPTIC_EXTERNAL = "SkepticExternal"
    INTERNAL = "Internal"
    REFLECTIVE = "Reflective"
    COMPOSED = "Composed"


CATALOG_KINDS = (
    TriggerKind.DEFAULT,
    TriggerKind.NEUTRAL,
    TriggerKind.SKEPTIC_EXTERNAL,
    TriggerKind.INTERNAL,
)


@dataclass(frozen=True)
class Trigger:
    kind: TriggerKind
    text: str
    version: str = ""
    base: Optional["Trigger"] = field(default=None, compare=False, repr=False)
    reflective: Optional["Trigger"] = field(default=None, compare=False, repr=False)

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------- catalog

_HEADER = re.compile(r"^===\s*(\w+)\s+v(\w+)\s*===\s*$")


@dataclass(frozen=True)
class Catalog:
    """Prompt templates keyed by name, each with a version tag."""

    templates: dict[str, tuple[str, str]]
    source_sha256: str

    @property
    def version(self) -> str:
        return self.source_sha256[:16]

    def template(self, name: str) -> str:
        try:
            return self.templates[name][1]
        except KeyError:
            raise KeyError(f"no template {name!r} in trigger catalog") from None

    def hashes(self) -> dict[str, str]:
        return {
            f"{name}@v{ver}": hashlib.sha256(text.encode("utf-8")).hexdigest()
            for name, (ver, text) in sorted(self.templates.items())
        }

    def trigger(self, kind: Union[TriggerKind, str]) -> Trigger:
        kind = TriggerKind(kind)
        if kind not in CATALOG_KINDS:
            raise ValueError(f"{kind.value} triggers are generated, not catalogued")
        version, text = self.templates[kind.value]
        return Trigger(kind, text, version)


def parse_catalog(text: str) -> Catalog:
    templates: dict[str, tuple[str, str]] = {}
    name = version = None
    body: list[str] = []

    def flush():
        if name is not None:
            if name in templates:
                raise ValueError(f"duplicate template {name!r}")
            templates[name] = (version, "\n".join(body).strip())

    for line in text.splitlines():
        m = _HEADER.match(line)
        if m:
            flush()
            name, version, body = m.group(1), m.group(2), []
        elif name is not None:
            body.append(line)
    flush()
    missing = [k.value for k in CATALOG_KINDS if k.value not in templates]
    if missing:
        raise ValueError(f"trigger catalog lacks {', '.join(missing)}")
    return Catalog(templates, hashlib.sha256(text.encode("utf-8")).hexdigest())


def load_catalog(path: Optional[Union[str, Path]] = None) -> Catalog:
    if path is None:
        return default_catalog()
    return parse_catalog(Path(path).read_text(encoding="utf-8"))


@functools.lru_cache(maxsize=1)
def default_catalog() -> Catalog:
    text = resources.files("epoche").joinpath("data/triggers.txt").read_text(encoding="utf-8")
    return parse_catalog(text)


def trigger_catalog(kind: Union[TriggerKind, str], catalog: Optional[Catalog] = None) -> Trigger:
    return (catalog or default_catalog()).trigger(kind)


def compose_external_trigger(base: Trigger, reflective: Optional[Trigger] = None) -> Trigger:
    """``base`` alone, or ``base + SEPARATOR + reflective`` as a Composed trigger."""
    if base.kind not in (TriggerKind.SKEPTIC_EXTERNAL, TriggerKind.NEUTRAL):
        raise ValueError(f"cannot compose on a {base.kind.value} trigger")
    if reflective is None:
        return base
    if reflective.kind is not TriggerKind.REFLECTIVE:
        raise ValueError(f"expected a Reflective trigger, got {reflective.kind.value}")
    return Trigger(
        TriggerKind.COMPOSED,
        base.text + SEPARATOR + reflective.text,
        base.version,
        base=base,
        reflective=reflective,
    )


# ---------------------------------------------------------------- parsing

_ITEM = re.compile(r"^\s*(?:\(?\d{1,3}[.)]|\(?[A-Za-z][.)]|[-•*+‣◦])\s+(.*)$")


def _norm(text: str) -> str:
    return " ".join(text.split())


def parse_statement_list(raw: str) -> list[str]:
    """Split a model reply into list items.

    Numbered (``1.``/``1)``), lettered (``a.``/``(b)``) and bullet items are
    recognised; indented or wrapped lines join the open item and a blank
    line closes it. Text outside items is dropped. With no list markers at
    all the whole reply is one statement.
    """
    items: list[str] = []
    current: Optional[str] = None
    found = False
    for line in raw.splitlines():
        m = _ITEM.match(line)
        if m:
            found = True
            if current is not None:
                items.append(current)
            current = m.group(1)
        elif not line.strip():
            if current is not None:
                items.append(current)
            current = None
        elif current is not None:
            current += " " + line.strip()
    if current is not None:
        items.append(current)

    if not found:
        whole = _norm(raw)
        return [whole] if whole else []
    out: list[str] = []
    seen: set[str] = set()
    for item in items:
        item = _norm(item)
        if item and item not in seen:
            seen.add(item)
            out.append(item)
    return out


def format_statement_list(statements: list[str]) -> str:
    return "\n".join(f"{i}. {s}" for i, s in enumerate(statements, 1))


class VerdictNotFound(ValueError):
    """The reply has no recognisable VERDICT line."""


_LEAD = r"^[\s>#*_\-]*"
_VERDICT = re.compile(_LEAD + r"verdict[\s*_]*[:：=\-–]\s*[*_\"'`\[]*\s*([^\W\d_]+)", re.I)
_CONDITION = re.compile(_LEAD + r"(?:sufficient\s+)?condition[\s*_]*[:：=]\s*(.*)$", re.I)
_REASON = re.compile(_LEAD + r"(?:reason|reasoning|explanation)[\s*_]*[:：=]\s*", re.I)
_NO_CONDITION = {"", "none", "n/a", "na", "-", "null", "nil", "not applicable"}

_FLAG_WORDS = {
    "valid": RawFlag.VALID,
    "invalid": RawFlag.INVALID,
    "epoche": RawFlag.EPOCHE,
    "epoché": RawFlag.EPOCHE,
    "epochē": RawFlag.EPOCHE,
    "epoch": RawFlag.EPOCHE,
}


def _clean_condition(value: str) -> Optional[str]:
    value = value.strip().strip("*_`\"' ").strip()
    if value.startswith("<") and value.endswith(">"):
        return None
    return None if value.lower() in _NO_CONDITION else value


def parse_verdict(raw: str) -> tuple[RawFlag, str, Optional[str]]:
    """Read ``(flag, reasoning, condition)`` from a VERDICT/CONDITION/REASON reply.

    The last VERDICT line wins. Reasoning is every other line with a leading
    ``REASON:`` label removed. Condition is kept only for epoche verdicts.
    """
    flag: Optional[RawFlag] = None
    condition: Optional[str] = None
    rest: list[str] = []
    for line in raw.splitlines():
        vm = _VERDICT.match(line)
        if vm:
            word = vm.group(1).casefold()
            if word in _FLAG_WORDS:
                flag = _FLAG_WORDS[word]
                continue
        cm = _CONDITION.match(line)
        if cm:
            condition = _clean_condition(cm.group(1)) or condition
            continue
        rest.append(_REASON.sub("", line, count=1))
    if flag is None:
        raise VerdictNotFound(raw[:200])
    reasoning = "\n".join(rest).strip()
    return flag, reasoning, condition if flag is RawFlag.EPOCHE else None


_ANSWER = re.compile(_LEAD + r"(?:final\s+)?answer[\s*_]*[:：=]\s*[*_\"'`\[]*\s*(real|ai|fake|generated|ai-generated)\b", re.I)


def parse_zero_shot_answer(raw: str) -> Optional[Decision]:
    """Last ``ANSWER: REAL|AI`` line, or ``None`` when there is none."""
    answer = None
    for line in raw.splitlines():
        m = _ANSWER.match(line)
        if m:
            word = m.group(1).lower()
            answer = Decision.REAL if word == "real" else Decision.AI_GENERATED
    return answer


# ---------------------------------------------------------------- agent calls


@dataclass(frozen=True)
class Sampling:
    temperature: float = 0.0
    max_output_tokens: int = 700


@dataclass(frozen=True)
class CallRecord:
    role: str
    fingerprint: str
    origin: str
    attempts: int
    latency: float
    response_sha256: str

    def to_dict(self, with_latency: bool = True) -> dict[str, Any]:
        d = {
            "role": self.role,
            "fingerprint": self.fingerprint,
            "origin": self.origin,
            "attempts": self.attempts,
            "response_sha256": self.response_sha256,
        }
        if with_latency:
            d["latency_s"] = round(self.latency, 6)
        return d


@dataclass(frozen=True)
class ParsedExternalOutput:
    statements: list[str]
    raw_text: str


@dataclass(frozen=True)
class ParsedInternalOutput:
    flag: RawFlag
    reasoning: str
    condition: Optional[str]
    raw_text: str
    downgraded: bool = False

    def __post_init__(self):
        if (self.flag is RawFlag.EPOCHE) != (self.condition is not None):
            raise ValueError("condition must be present exactly for epoche verdicts")


def build_request(
    backend: Backend,
    parts: list,
    sampling: Sampling = Sampling(),
    catalog: Optional[Catalog] = None,
) -> ChatRequest:
    catalog = catalog or default_catalog()
    if getattr(backend, "supports_sampling", True):
        temperature, max_tokens = sampling.temperature, sampling.max_output_tokens
    else:
        temperature = max_tokens = None
    return ChatRequest(backend.model, tuple(parts), temperature, max_tokens, catalog.version)


def _call(
    backend: Backend, request: ChatRequest, role: str, calls: Optional[list]
) -> ChatResponse:
    response = backend.complete(request)
    if calls is not None:
        calls.append(
            CallRecord(
                role,
                response.fingerprint,
                response.origin.value,
                response.attempts,
                response.latency,
                hashlib.sha256(response.text.encode("utf-8")).hexdigest(),
            )
        )
    return response


def _media_request(backend, media, text, sampling, catalog) -> ChatRequest:
    if media is None or not getattr(media, "frames", None):
        raise ValueError("external reasoning needs a non-empty visual input")
    return build_request(backend, [TextPart(text), *media.frames], sampling, catalog)


def external_reason(
    backend: Backend,
    media: MediaInput,
    trigger: Trigger,
    *,
    sampling: Sampling = Sampling(),
    catalog: Optional[Catalog] = None,
    calls: Optional[list] = None,
) -> ParsedExternalOutput:
    if trigger.kind in (TriggerKind.INTERNAL, TriggerKind.REFLECTIVE):
        raise ValueError(f"{trigger.kind.value} trigger cannot drive the External Skeptic")
    request = _media_request(backend, media, trigger.text, sampling, catalog)
    response = _call(backend, request, "external", calls)
    return ParsedExternalOutput(parse_statement_list(response.text), response.text)


def internal_verify(
    backend: Backend,
    statement: str,
    *,
    sampling: Sampling = Sampling(),
    catalog: Optional[Catalog] = None,
    calls: Optional[list] = None,
) -> ParsedInternalOutput:
    """Judge one claim. A reply without a verdict, or an epoche verdict
    without a condition, is retried once; a second miss counts as Invalid."""
    if not statement.strip():
        raise ValueError("statement must be non-empty")
    catalog = catalog or default_catalog()
    prompt = catalog.trigger(TriggerKind.INTERNAL).text.format(statement=statement)
    request = build_request(backend, [TextPart(prompt)], sampling, catalog)
    raw = _call(backend, request, "internal", calls).text
    parsed = _try_verdict(raw)
    if parsed is None:
        retry_prompt = prompt + SEPARATOR + catalog.template("ConditionRetry")
        retry = build_request(backend, [TextPart(retry_prompt)], sampling, catalog)
        raw = _call(backend, retry, "internal_retry", calls).text
        parsed = _try_verdict(raw)
    if parsed is None:
        return ParsedInternalOutput(RawFlag.INVALID, raw.strip(), None, raw, downgraded=True)
    flag, reasoning, condition = parsed
    return ParsedInternalOutput(flag, reasoning, condition, raw)


def _try_verdict(raw: str) -> Optional[tuple[RawFlag, str, Optional[str]]]:
    try:
        flag, reasoning, condition = parse_verdict(raw)
    except VerdictNotFound:
        return None
    if flag is RawFlag.EPOCHE and condition is None:
        return None
    return flag, reasoning, condition


def generate_reflective_trigger(
    backend: Backend,
    r_ex: str,
    r_in: str,
    condition: str,
    *,
    sampling: Sampling = Sampling(),
    catalog: Optional[Catalog] = None,
    calls: Optional[list] = None,
) -> Trigger:
    if not condition or not condition.strip():
        raise ValueError("a reflective trigger needs the missing condition")
    catalog = catalog or default_catalog()
    prompt = catalog.template("ReflectiveGenerator").format(
        statement=r_ex, reasoning=r_in, condition=condition
    )
    request = build_request(backend, [TextPart(prompt)], sampling, catalog)
    text = _call(backend, request, "reflective", calls).text.strip()
    if not text:
        text = f"Examine the visual input closely and report concrete observations about: {condition}"
    return Trigger(TriggerKind.REFLECTIVE, text)


def zero_shot(
    backend: Backend,
    media: MediaInput,
    *,
    sampling: Sampling = Sampling(),
    catalog: Optional[Catalog] = None,
    calls: Optional[list] = None,
) -> tuple[Decision, str]:
    """Single Default-trigger call. A reply without an ANSWER line counts as REAL."""
    catalog = catalog or default_catalog()
    trigger = catalog.trigger(TriggerKind.DEFAULT)
    request = _media_request(backend, media, trigger.text, sampling, catalog)
    raw = _call(backend, request, "zero_shot", calls).text
    return parse_zero_shot_answer(raw) or Decision.REAL, raw
