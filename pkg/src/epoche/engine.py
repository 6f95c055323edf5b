"""Verification engine.

Grows the reasoning tree for one visual input:

1. the External Skeptic lists initial claims for the media;
2. the Internal Skeptic judges each claim;
3. every epoche claim above the depth bound gets a reflective trigger, the
   External Skeptic answers ``base + reflective`` on the same media, and the
   new claims are judged in turn;
4. repeat until nothing is expandable or the node budget is spent;
5. resolve and threshold.

Calls for distinct frontier nodes run concurrently; results are committed in
code order so the trace does not depend on scheduling.
"""

from __future__ import annotations

import enum
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Optional, Union

from . import agents
from .agents import Catalog, CallRecord, Sampling, TriggerKind
from .gateway import Backend, GatewayError
from .media import MediaInput
from .tree import (
    ROOT,
    Code,
    Decision,
    RawFlag,
    ReasoningTree,
    TreeError,
    Verdict,
    decide,
    format_code,
)

logger = logging.getLogger(__name__)

TRACE_FORMAT = "epoche-trace/1"


class Mode(str, enum.Enum):
    FULL = "full"
    EXTERNAL_ONLY = "external-only"
    INTERNAL_ONLY = "internal-only"
    ZERO_SHOT = "zero-shot"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EngineConfig:
    depth_bound: int = 3
    branch_cap: int = 5
    node_budget: int = 200
    threshold: int = 1
    max_parallel_calls: int = 4
    mode: Mode = Mode.FULL
    temperature: float = 0.0
    max_output_tokens: int = 700
    frame_count: int = 8

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        for name in ("depth_bound", "branch_cap", "node_budget", "threshold",
                     "max_parallel_calls", "max_output_tokens", "frame_count"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")

    @property
    def sampling(self) -> Sampling:
        return Sampling(self.temperature, self.max_output_tokens)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "EngineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        try:
            return cls(**data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "EngineConfig":
        """Flat JSON object of config keys."""
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict) or any(isinstance(v, (dict, list)) for v in data.values()):
            raise ConfigError(f"{path}: config must be a flat key-value object")
        return cls.from_dict(data)


@dataclass
class VerificationTrace:
    config: EngineConfig
    media: dict[str, Any]
    models: dict[str, Any]
    catalog: dict[str, Any]
    tree: ReasoningTree
    verdict: Optional[Verdict]
    calls: list[dict[str, Any]] = field(default_factory=list)
    provenance: dict[str, dict[str, Any]] = field(default_factory=dict)
    accounting: dict[str, Any] = field(default_factory=dict)
    status: str = "ok"
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def valid_count(self) -> Optional[int]:
        return None if self.verdict is None else self.verdict.valid_count

    def to_dict(self) -> dict[str, Any]:
        tree = self.tree.to_dict()
        nodes = tree.pop("nodes")
        return {
            "format": TRACE_FORMAT,
            "status": self.status,
            "error": self.error,
            "config": self.config.to_dict(),
            "media": self.media,
            "models": self.models,
            "catalog": self.catalog,
            "tree": tree,
            "nodes": nodes,
            "provenance": self.provenance,
            "verdict": None if self.verdict is None else self.verdict.to_dict(),
            "calls": self.calls,
            "accounting": self.accounting,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n"

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "VerificationTrace":
        if data.get("format") != TRACE_FORMAT:
            raise ValueError(f"not a {TRACE_FORMAT} document")
        tree = ReasoningTree.from_dict({**data["tree"], "nodes": data["nodes"]})
        verdict = None if data["verdict"] is None else Verdict.from_dict(data["verdict"])
        return cls(
            config=EngineConfig.from_dict(data["config"]),
            media=data["media"],
            models=data["models"],
            catalog=data["catalog"],
            tree=tree,
            verdict=verdict,
            calls=data["calls"],
            provenance=data["provenance"],
            accounting=data["accounting"],
            status=data["status"],
            error=data["error"],
        )

    @classmethod
    def from_json(cls, text: str) -> "VerificationTrace":
        return cls.from_dict(json.loads(text))

    @classmethod
    def read(cls, path: Union[str, Path]) -> "VerificationTrace":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


class Engine:
    """Runs verifications with one External and one Internal Skeptic backend."""

    def __init__(
        self,
        external: Backend,
        internal: Backend,
        catalog: Optional[Catalog] = None,
        clock: Callable[[], float] = time.perf_counter,
        record_latency: bool = True,
    ):
        self.external = external
        self.internal = internal
        self.catalog = catalog or agents.default_catalog()
        self.clock = clock
        self.record_latency = record_latency

    def run(self, media: MediaInput, config: EngineConfig = EngineConfig()) -> VerificationTrace:
        run = _Run(self, media, config)
        return run.execute()


class _Run:
    def __init__(self, engine: Engine, media: MediaInput, config: EngineConfig):
        self.engine = engine
        self.media = media
        self.config = config
        self.catalog = engine.catalog
        self.sampling = config.sampling
        self.tree = ReasoningTree(config.depth_bound, config.branch_cap, config.node_budget)
        self.calls: list[dict[str, Any]] = []
        self.provenance: dict[Code, dict[str, Any]] = {}
        sequential = any(
            getattr(b, "requires_sequential", False) for b in (engine.external, engine.internal)
        )
        self.workers = 1 if sequential else config.max_parallel_calls

    # -- plumbing

    def _commit(self, records: list[CallRecord]) -> list[int]:
        ids = []
        for rec in records:
            entry = {"id": len(self.calls), **rec.to_dict(self.engine.record_latency)}
            self.calls.append(entry)
            ids.append(entry["id"])
        return ids

    def _map(self, fn, items: list) -> list:
        if self.workers <= 1 or len(items) <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=min(self.workers, len(items))) as pool:
            return list(pool.map(fn, items))

    def _prov(self, code: Code) -> dict[str, Any]:
        return self.provenance.setdefault(code, {})

    # -- agent steps

    def _external(self, trigger: agents.Trigger):
        recs: list[CallRecord] = []
        out = agents.external_reason(
            self.engine.external, self.media, trigger,
            sampling=self.sampling, catalog=self.catalog, calls=recs,
        )
        return out, recs

    def _verify(self, statement: str):
        recs: list[CallRecord] = []
        out = agents.internal_verify(
            self.engine.internal, statement,
            sampling=self.sampling, catalog=self.catalog, calls=recs,
        )
        return out, recs

    def _verify_all(self, codes: list[Code]) -> None:
        statements = [self.tree[c].statement for c in codes]
        results = self._map(self._verify, statements)
        for code, (out, recs) in zip(codes, results):
            self.tree.assign_raw_flag(code, out.flag, out.reasoning, out.condition)
            prov = self._prov(code)
            prov["verify_calls"] = self._commit(recs)
            if out.downgraded:
                prov["downgraded"] = True

    def _expand_one(self, args):
        base, node = args
        recs: list[CallRecord] = []
        reflective = agents.generate_reflective_trigger(
            self.engine.internal, node.statement, node.internal_reasoning, node.condition,
            sampling=self.sampling, catalog=self.catalog, calls=recs,
        )
        composed = agents.compose_external_trigger(base, reflective)
        out, ext_recs = self._external(composed)
        return reflective, composed, out, recs, ext_recs

    def _grow(self, base: agents.Trigger) -> None:
        out, recs = self._external(base)
        created = self.tree.add_children(ROOT, out.statements)
        self._prov(ROOT).update(
            trigger=f"{base.kind.value}@v{base.version}", expansion_calls=self._commit(recs)
        )
        self._verify_all(created)
        while True:
            frontier = self.tree.expandable_frontier()
            if not frontier or self.tree.full:
                break
            results = self._map(self._expand_one, [(base, self.tree[c]) for c in frontier])
            fresh: list[Code] = []
            for code, (reflective, composed, ext_out, re_recs, ext_recs) in zip(frontier, results):
                self.tree[code].reflective_trigger = reflective.text
                fresh.extend(self.tree.add_children(code, ext_out.statements))
                self._prov(code).update(
                    reflective_calls=self._commit(re_recs),
                    trigger=f"{composed.kind.value}:{base.kind.value}@v{base.version}",
                    composed_trigger_sha256=composed.sha256,
                    expansion_calls=self._commit(ext_recs),
                )
            self._verify_all(fresh)

    def _external_only(self) -> None:
        base = self.catalog.trigger(TriggerKind.SKEPTIC_EXTERNAL)
        out, recs = self._external(base)
        created = self.tree.add_children(ROOT, out.statements)
        self._prov(ROOT).update(
            trigger=f"{base.kind.value}@v{base.version}", expansion_calls=self._commit(recs)
        )
        for code in created:
            self.tree.assign_raw_flag(code, RawFlag.VALID, "accepted without internal verification")

    def _zero_shot(self) -> None:
        recs: list[CallRecord] = []
        decision, raw = agents.zero_shot(
            self.engine.external, self.media,
            sampling=self.sampling, catalog=self.catalog, calls=recs,
        )
        (code,) = self.tree.add_children(ROOT, [raw.strip()])
        flag = RawFlag.VALID if decision is Decision.AI_GENERATED else RawFlag.INVALID
        self.tree.assign_raw_flag(code, flag, f"zero-shot answer: {decision.value}")
        base = self.catalog.trigger(TriggerKind.DEFAULT)
        self._prov(ROOT).update(
            trigger=f"{base.kind.value}@v{base.version}", expansion_calls=self._commit(recs)
        )

    # -- driver

    def execute(self) -> VerificationTrace:
        clock = self.engine.clock
        started = clock()
        mode = self.config.mode
        status, error, verdict = "ok", None, None
        try:
            if mode is Mode.ZERO_SHOT:
                self._zero_shot()
            elif mode is Mode.EXTERNAL_ONLY:
                self._external_only()
            else:
                kind = TriggerKind.SKEPTIC_EXTERNAL if mode is Mode.FULL else TriggerKind.NEUTRAL
                self._grow(self.catalog.trigger(kind))
            self.tree.resolve()
            threshold = self.config.threshold if mode in (Mode.FULL, Mode.INTERNAL_ONLY) else 1
            verdict = decide(self.tree, threshold)
        except (GatewayError, TreeError) as exc:
            status, error = "failed", f"{type(exc).__name__}: {exc}"
            logger.warning("verification of %s failed: %s", self.media.source, error)
        return VerificationTrace(
            config=self.config,
            media=self.media.describe(),
            models=self._models(),
            catalog={"version": self.catalog.version, "hashes": self.catalog.hashes()},
            tree=self.tree,
            verdict=verdict,
            calls=self.calls,
            provenance={format_code(c): self.provenance[c] for c in sorted(self.provenance)},
            accounting=self._accounting(clock() - started),
            status=status,
            error=error,
        )

    def _models(self) -> dict[str, Any]:
        ext, inn = self.engine.external, self.engine.internal
        return {
            "external": ext.model,
            "internal": inn.model,
            "sampling_omitted": {
                "external": not getattr(ext, "supports_sampling", True),
                "internal": not getattr(inn, "supports_sampling", True),
            },
        }

    def _accounting(self, elapsed: float) -> dict[str, Any]:
        by_role: dict[str, int] = {}
        for c in self.calls:
            by_role[c["role"]] = by_role.get(c["role"], 0) + 1
        nodes = len(self.tree)
        epoche = sum(1 for n in self.tree if n.raw_flag is RawFlag.EPOCHE)
        retries = by_role.get("internal_retry", 0)
        bound = 1 + nodes + 2 * epoche
        return {
            "calls_total": len(self.calls),
            "calls_by_role": dict(sorted(by_role.items())),
            "protocol_retries": retries,
            "nodes": nodes,
            "epoche_nodes": epoche,
            "expanded_nodes": sum(1 for n in self.tree if n.expanded),
            "max_depth": max((n.depth for n in self.tree), default=0),
            "call_bound": bound,
            "within_call_bound": len(self.calls) - retries <= bound,
            "wall_clock_s": round(elapsed, 6),
        }


def run_inception(
    backend_ext: Backend,
    backend_int: Backend,
    media: MediaInput,
    config: EngineConfig = EngineConfig(),
    **engine_kwargs,
) -> VerificationTrace:
    return Engine(backend_ext, backend_int, **engine_kwargs).run(media, config)

