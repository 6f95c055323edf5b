"""Batch evaluation: manifests, detection metrics, threshold sweeps, ablations,
and visual-element recall/precision."""

from __future__ import annotations

import enum
import json
import logging
import random
import string
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Sequence, Union

from . import agents
from .agents import Catalog, Sampling
from .engine import Engine, EngineConfig, Mode, VerificationTrace
from .gateway import Backend, TextPart
from .media import MediaError, load_media
from .tree import Decision, threshold_decision

logger = logging.getLogger(__name__)


class ManifestError(ValueError):
    pass


class Label(str, enum.Enum):
    REAL = "real"
    AI = "ai"

    @classmethod
    def parse(cls, token: Any) -> "Label":
        t = str(token).strip().lower().replace("_", "-")
        if t in ("real", "authentic", "0"):
            return cls.REAL
        if t in ("ai", "ai-generated", "generated", "fake", "synthetic", "1"):
            return cls.AI
        raise ManifestError(f"unknown label {token!r}")

    @classmethod
    def of(cls, decision: Decision) -> "Label":
        return cls.AI if decision is Decision.AI_GENERATED else cls.REAL


@dataclass(frozen=True)
class SampleRecord:
    id: str
    media: str
    label: Label
    reason: Optional[str] = None


def _resolve_media(media: str, base: Path) -> str:
    if media.startswith(("http://", "https://")) or Path(media).is_absolute():
        return media
    return str(base / media)


def load_manifest(
    path: Union[str, Path], fraction: Optional[float] = None, seed: int = 0
) -> list[SampleRecord]:
    """Read a JSONL manifest of ``{"id", "media", "label", "reason"?}`` lines.

    Relative media paths resolve against the manifest's directory.
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    records: list[SampleRecord] = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: not JSON") from exc
        if not isinstance(raw, dict):
            raise ManifestError(f"{path}:{lineno}: expected an object")
        for key in ("id", "media", "label"):
            if raw.get(key) in (None, ""):
                raise ManifestError(f"{path}:{lineno}: missing {key!r}")
        sid = str(raw["id"])
        if sid in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate id {sid!r}")
        seen.add(sid)
        try:
            label = Label.parse(raw["label"])
        except ManifestError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from None
        reason = raw.get("reason")
        records.append(
            SampleRecord(sid, _resolve_media(str(raw["media"]), path.parent), label, reason or None)
        )
    if fraction is not None:
        records = subsample(records, fraction, seed)
    return records


def subsample(records: Sequence[SampleRecord], fraction: float, seed: int = 0) -> list[SampleRecord]:
    """Seeded subset of ``round(fraction * n)`` records (at least one), in manifest order."""
    if not 0 < fraction <= 1:
        raise ManifestError(f"fraction must be in (0, 1], got {fraction}")
    n = len(records)
    if n == 0:
        return []
    k = max(1, round(fraction * n))
    keep = sorted(random.Random(seed).sample(range(n), k))
    return [records[i] for i in keep]


# ---------------------------------------------------------------- metrics


@dataclass(frozen=True)
class ConfusionCounts:
    true_real: int = 0
    false_ai: int = 0  # real predicted AI
    true_ai: int = 0
    false_real: int = 0  # AI predicted real

    def __post_init__(self):
        if min(self.true_real, self.false_ai, self.true_ai, self.false_real) < 0:
            raise ValueError("confusion counts must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.true_real + other.true_real,
            self.false_ai + other.false_ai,
            self.true_ai + other.true_ai,
            self.false_real + other.false_real,
        )

    @property
    def total(self) -> int:
        return self.true_real + self.false_ai + self.true_ai + self.false_real

    @classmethod
    def of(cls, label: Label, prediction: Label) -> "ConfusionCounts":
        if label is Label.REAL:
            return cls(true_real=1) if prediction is Label.REAL else cls(false_ai=1)
        return cls(true_ai=1) if prediction is Label.AI else cls(false_real=1)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[Label, Label]]) -> "ConfusionCounts":
        out = cls()
        for label, prediction in pairs:
            out = out + cls.of(label, prediction)
        return out

    def to_dict(self) -> dict[str, int]:
        return {
            "true_real": self.true_real,
            "false_ai": self.false_ai,
            "true_ai": self.true_ai,
            "false_real": self.false_real,
        }


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def _f1(precision: float, recall: float) -> float:
    return _ratio(2 * precision * recall, precision + recall)


@dataclass(frozen=True)
class Metrics:
    recall_real: float
    recall_ai: float
    accuracy_all: float
    macro_f1: float

    def to_dict(self) -> dict[str, float]:
        return {
            "recall_real": self.recall_real,
            "recall_ai": self.recall_ai,
            "accuracy_all": self.accuracy_all,
            "macro_f1": self.macro_f1,
        }


def compute_metrics(counts: ConfusionCounts) -> Metrics:
    c = counts
    recall_real = _ratio(c.true_real, c.true_real + c.false_ai)
    recall_ai = _ratio(c.true_ai, c.true_ai + c.false_real)
    precision_real = _ratio(c.true_real, c.true_real + c.false_real)
    precision_ai = _ratio(c.true_ai, c.true_ai + c.false_ai)
    macro = (_f1(precision_real, recall_real) + _f1(precision_ai, recall_ai)) / 2
    return Metrics(recall_real, recall_ai, _ratio(c.true_real + c.true_ai, c.total), macro)


# ---------------------------------------------------------------- batch runs


@dataclass
class EvaluationResult:
    metrics: Metrics
    counts: ConfusionCounts
    rows: list[dict[str, Any]]
    failures: list[dict[str, str]]
    traces: dict[str, VerificationTrace] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict[str, Any]:
        return {
            "metrics": self.metrics.to_dict(),
            "counts": self.counts.to_dict(),
            "samples": self.rows,
            "failures": self.failures,
        }


def evaluate(
    engine_factory: Callable[[], Engine],
    records: Sequence[SampleRecord],
    config: EngineConfig,
    *,
    max_parallel: int = 1,
    media_loader: Callable[[str, int], Any] = load_media,
) -> EvaluationResult:
    """Verify every record; failed samples are listed and left out of the counts."""

    def one(record: SampleRecord):
        try:
            media = media_loader(record.media, config.frame_count)
        except MediaError as exc:
            return record, None, f"MediaError: {exc}"
        trace = engine_factory().run(media, config)
        return record, trace, trace.error

    if max_parallel > 1 and len(records) > 1:
        with ThreadPoolExecutor(max_workers=max_parallel) as pool:
            outcomes = list(pool.map(one, records))
    else:
        outcomes = [one(r) for r in records]

    counts = ConfusionCounts()
    rows, failures, traces = [], [], {}
    for record, trace, error in outcomes:
        if trace is not None:
            traces[record.id] = trace
        if trace is None or not trace.ok:
            failures.append({"id": record.id, "error": error or "unknown failure"})
            continue
        prediction = Label.of(trace.verdict.decision)
        counts = counts + ConfusionCounts.of(record.label, prediction)
        rows.append(
            {
                "id": record.id,
                "label": record.label.value,
                "prediction": prediction.value,
                "valid_count": trace.verdict.valid_count,
                "threshold": trace.verdict.threshold,
            }
        )
    return EvaluationResult(compute_metrics(counts), counts, rows, failures, traces)


ABLATION_MODES = (Mode.ZERO_SHOT, Mode.EXTERNAL_ONLY, Mode.INTERNAL_ONLY, Mode.FULL)

# (external skepticism, internal skepticism) per mode
ABLATION_FLAGS = {
    Mode.ZERO_SHOT: (False, False),
    Mode.EXTERNAL_ONLY: (True, False),
    Mode.INTERNAL_ONLY: (False, True),
    Mode.FULL: (True, True),
}


def run_ablation(
    engine_factory: Callable[[], Engine],
    records: Sequence[SampleRecord],
    config: EngineConfig,
    modes: Sequence[Mode] = ABLATION_MODES,
    **kwargs,
) -> dict[Mode, EvaluationResult]:
    return {
        mode: evaluate(engine_factory, records, replace(config, mode=mode), **kwargs)
        for mode in modes
    }


@dataclass(frozen=True)
class SweepRow:
    threshold: int
    metrics: Metrics
    counts: ConfusionCounts


@dataclass(frozen=True)
class SweepResult:
    rows: tuple[SweepRow, ...]
    best_threshold: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "best_threshold": self.best_threshold,
            "rows": [
                {"threshold": r.threshold, **r.metrics.to_dict(), "counts": r.counts.to_dict()}
                for r in self.rows
            ],
        }


def sweep_threshold(
    samples: Sequence[tuple[int, Label]], thresholds: Iterable[int]
) -> SweepResult:
    """Re-threshold stored valid counts.

    The best threshold maximises accuracy; ties go to the higher macro F1,
    then to the smaller threshold.
    """
    thresholds = list(thresholds)
    if not thresholds:
        raise ValueError("empty threshold range")
    if not samples:
        raise ValueError("no samples to sweep")
    rows = []
    for m_threshold in thresholds:
        counts = ConfusionCounts.from_pairs(
            (label, Label.of(threshold_decision(m, m_threshold))) for m, label in samples
        )
        rows.append(SweepRow(m_threshold, compute_metrics(counts), counts))
    best = max(rows, key=lambda r: (r.metrics.accuracy_all, r.metrics.macro_f1, -r.threshold))
    return SweepResult(tuple(rows), best.threshold)


# ---------------------------------------------------------------- visual elements


class ElementSource(str, enum.Enum):
    REASONING = "reasoning"
    GROUND_TRUTH = "ground_truth"


@dataclass(frozen=True)
class ElementSet:
    elements: frozenset[str]
    source: ElementSource = ElementSource.REASONING
    raw_count: int = 0

    def __len__(self) -> int:
        return len(self.elements)


_EDGE_PUNCT = string.punctuation + "“”‘’"


def normalize_element(phrase: str) -> str:
    return " ".join(phrase.casefold().split()).strip(_EDGE_PUNCT + " ")


def element_set(phrases: Iterable[str], source: ElementSource = ElementSource.REASONING) -> ElementSet:
    phrases = list(phrases)
    normalized = {normalize_element(p) for p in phrases}
    normalized.discard("")
    return ElementSet(frozenset(normalized), source, len(phrases))


def extract_visual_elements(
    backend: Backend,
    text: Optional[str],
    source: ElementSource = ElementSource.REASONING,
    *,
    sampling: Sampling = Sampling(),
    catalog: Optional[Catalog] = None,
) -> ElementSet:
    """One text-only extraction call; empty text yields an empty set without a call."""
    if not text or not text.strip():
        return ElementSet(frozenset(), source, 0)
    catalog = catalog or agents.default_catalog()
    prompt = catalog.template("ElementExtractor").format(text=text)
    request = agents.build_request(backend, [TextPart(prompt)], sampling, catalog)
    raw = backend.complete(request).text
    return element_set(agents.parse_statement_list(raw), source)


Matcher = Callable[[str, str], bool]


def element_recall_precision(
    e_r: ElementSet, e_gt: ElementSet, matcher: Optional[Matcher] = None
) -> tuple[float, float]:
    """``(|GT ∩ R| / |GT|, |GT ∩ R| / |R|)``, 0 for empty denominators.

    With a ``matcher``, a ground-truth element counts as recalled when it
    matches any reasoning element, and vice versa for precision.
    """
    if matcher is None:
        hit = len(e_gt.elements & e_r.elements)
        return _ratio(hit, len(e_gt)), _ratio(hit, len(e_r))
    recalled = sum(1 for g in e_gt.elements if any(matcher(g, r) for r in e_r.elements))
    precise = sum(1 for r in e_r.elements if any(matcher(g, r) for g in e_gt.elements))
    return _ratio(recalled, len(e_gt)), _ratio(precise, len(e_r))


def model_judged_matcher(backend: Backend, catalog: Optional[Catalog] = None) -> Matcher:
    """Semantic element matching by asking a model; exact matches skip the call."""
    catalog = catalog or agents.default_catalog()
    template = catalog.template("ElementMatcher")

    def match(a: str, b: str) -> bool:
        if a == b:
            return True
        request = agents.build_request(
            backend, [TextPart(template.format(a=a, b=b))], Sampling(), catalog
        )
        reply = backend.complete(request).text
        return any(
            line.strip().upper().replace(" ", "").startswith("ANSWER:YES")
            for line in reply.splitlines()
        )

    return match


def aggregate_element_metrics(
    pairs: Sequence[tuple[ElementSet, ElementSet]], matcher: Optional[Matcher] = None
) -> dict[str, dict[str, float]]:
    """Per-sample means and globally pooled ratios over ``(E_R, E_GT)`` pairs."""
    if not pairs:
        zero = {"recall": 0.0, "precision": 0.0}
        return {"per_sample": dict(zero), "pooled": dict(zero)}
    per = [element_recall_precision(r, g, matcher) for r, g in pairs]
    if matcher is None:
        hits = sum(len(g.elements & r.elements) for r, g in pairs)
        pooled = (
            _ratio(hits, sum(len(g) for _, g in pairs)),
            _ratio(hits, sum(len(r) for r, _ in pairs)),
        )
    else:
        rec_hits = sum(rc * len(g) for (rc, _), (_, g) in zip(per, pairs))
        pre_hits = sum(pc * len(r) for (_, pc), (r, _) in zip(per, pairs))
        pooled = (
            _ratio(rec_hits, sum(len(g) for _, g in pairs)),
            _ratio(pre_hits, sum(len(r) for r, _ in pairs)),
        )
    return {
        "per_sample": {
            "recall": sum(p[0] for p in per) / len(per),
            "precision": sum(p[1] for p in per) / len(per),
        },
        "pooled": {"recall": pooled[0], "precision": pooled[1]},
    }


# ---------------------------------------------------------------- reports


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def metrics_table(rows: Sequence[tuple[str, Metrics]]) -> str:
    header = ("Model", "(Recall_real, Recall_ai)", "Acc_all", "Macro F1")
    body = [
        (name, f"({_fmt(m.recall_real)}, {_fmt(m.recall_ai)})", _fmt(m.accuracy_all), _fmt(m.macro_f1))
        for name, m in rows
    ]
    return _table(header, body)


def ablation_table(results: dict[Mode, EvaluationResult]) -> str:
    header = ("Mode", "External Skepticism", "Internal Skepticism",
              "(Recall_real, Recall_ai)", "Acc_all", "Macro F1")
    body = []
    for mode, res in results.items():
        ext, inn = ABLATION_FLAGS[mode]
        m = res.metrics
        body.append((
            mode.value, "yes" if ext else "no", "yes" if inn else "no",
            f"({_fmt(m.recall_real)}, {_fmt(m.recall_ai)})", _fmt(m.accuracy_all), _fmt(m.macro_f1),
        ))
    return _table(header, body)


def sweep_table(result: SweepResult) -> str:
    header = ("M", "(Recall_real, Recall_ai)", "Acc_all", "Macro F1", "")
    body = [
        (
            str(r.threshold),
            f"({_fmt(r.metrics.recall_real)}, {_fmt(r.metrics.recall_ai)})",
            _fmt(r.metrics.accuracy_all),
            _fmt(r.metrics.macro_f1),
            "best" if r.threshold == result.best_threshold else "",
        )
        for r in result.rows
    ]
    return _table(header, body)


def _table(header: Sequence[str], body: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(row[i])) for row in [header, *body]) for i in range(len(header))]
    lines = [" | ".join(str(c).ljust(w) for c, w in zip(header, widths)).rstrip()]
    lines.append("-+-".join("-" * w for w in widths))
    lines += [" | ".join(str(c).ljust(w) for c, w in zip(row, widths)).rstrip() for row in body]
    return "\n".join(lines)
