"""Skeptical reasoning tree.

Nodes are addressed by Ulam-Harris codes: the root is the empty tuple and
child ``j`` of node ``P`` is ``P + (j,)``. Children are numbered from 1.

The tree is backend-free. Agents fill it in through :meth:`ReasoningTree.add_children`
and :meth:`ReasoningTree.assign_raw_flag`; once nothing is left to expand,
:meth:`ReasoningTree.resolve` propagates epoche nodes bottom-up and
:func:`decide` counts the valid depth-1 logics against a threshold.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, Optional, Sequence

Code = tuple[int, ...]

ROOT: Code = ()
ROOT_LABEL = "ε"


class TreeError(ValueError):
    """Raised when a tree operation violates its preconditions."""


class RawFlag(enum.IntEnum):
    INVALID = -1
    EPOCHE = 0
    VALID = 1


class Decision(str, enum.Enum):
    AI_GENERATED = "AI_GENERATED"
    REAL = "REAL"


def depth(code: Code) -> int:
    return len(code)


def child(code: Code, j: int) -> Code:
    if j < 1:
        raise TreeError(f"child index must be >= 1, got {j}")
    return code + (j,)


def parent(code: Code) -> Code:
    if not code:
        raise TreeError("the root has no parent")
    return code[:-1]


def is_descendant(ancestor: Code, code: Code) -> bool:
    """True when ``code`` lies strictly below ``ancestor``."""
    return len(code) > len(ancestor) and code[: len(ancestor)] == ancestor


def validate_code(code: Sequence[int]) -> Code:
    code = tuple(code)
    for p in code:
        if not isinstance(p, int) or isinstance(p, bool) or p < 1:
            raise TreeError(f"invalid Ulam-Harris code {code!r}")
    return code


def format_code(code: Code) -> str:
    """Dotted form used in traces: ``()`` -> ``"ε"``, ``(2, 1)`` -> ``"2.1"``."""
    if not code:
        return ROOT_LABEL
    return ".".join(str(p) for p in code)


def parse_code(text: str) -> Code:
    text = text.strip()
    if text in (ROOT_LABEL, ""):
        return ROOT
    try:
        return validate_code(int(p) for p in text.split("."))
    except ValueError as exc:
        raise TreeError(f"cannot parse code {text!r}") from exc


@dataclass
class LogicNode:
    code: Code
    statement: str = ""
    raw_flag: Optional[RawFlag] = None
    resolved_flag: Optional[RawFlag] = None
    internal_reasoning: str = ""
    condition: Optional[str] = None
    reflective_trigger: Optional[str] = None
    expanded: bool = False

    @property
    def depth(self) -> int:
        return len(self.code)

    @property
    def is_root(self) -> bool:
        return not self.code


class ReasoningTree:
    """Prefix-closed map of codes to nodes with a depth bound and size caps.

    ``node_budget`` counts logic nodes only; the root sentinel is free.
    """

    def __init__(self, depth_bound: int = 3, branch_cap: int = 5, node_budget: int = 200):
        for name, value in (
            ("depth_bound", depth_bound),
            ("branch_cap", branch_cap),
            ("node_budget", node_budget),
        ):
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise TreeError(f"{name} must be a positive integer, got {value!r}")
        self.depth_bound = depth_bound
        self.branch_cap = branch_cap
        self.node_budget = node_budget
        self.nodes: dict[Code, LogicNode] = {ROOT: LogicNode(ROOT)}
        self._resolved = False

    def __len__(self) -> int:
        return len(self.nodes) - 1

    def __contains__(self, code: object) -> bool:
        return code in self.nodes

    def __getitem__(self, code: Code) -> LogicNode:
        try:
            return self.nodes[code]
        except KeyError:
            raise TreeError(f"unknown node {format_code(code)}") from None

    def __iter__(self) -> Iterator[LogicNode]:
        """Logic nodes (root excluded) in lexicographic code order."""
        for code in sorted(self.nodes):
            if code:
                yield self.nodes[code]

    @property
    def root(self) -> LogicNode:
        return self.nodes[ROOT]

    @property
    def full(self) -> bool:
        return len(self) >= self.node_budget

    @property
    def resolved(self) -> bool:
        return self._resolved

    def children(self, code: Code) -> list[Code]:
        out = []
        j = 1
        while code + (j,) in self.nodes:
            out.append(code + (j,))
            j += 1
        return out

    def initial_codes(self) -> list[Code]:
        return self.children(ROOT)

    def add_children(self, parent_code: Code, statements: Iterable[str]) -> list[Code]:
        """Attach statements as children ``P.1 ... P.k`` of ``parent_code``.

        Statements beyond ``branch_cap`` or the remaining node budget are
        dropped, keeping model output order. The parent is marked expanded
        even when no child is created.
        """
        node = self[parent_code]
        if not node.is_root and node.raw_flag is not RawFlag.EPOCHE:
            raise TreeError(f"node {format_code(parent_code)} is not an epoche node")
        if node.expanded:
            raise TreeError(f"node {format_code(parent_code)} is already expanded")
        if node.depth + 1 > self.depth_bound:
            raise TreeError(
                f"expanding {format_code(parent_code)} would exceed depth bound {self.depth_bound}"
            )
        statements = list(statements)
        room = min(self.branch_cap, self.node_budget - len(self))
        created = []
        for j, text in enumerate(statements[: max(room, 0)], start=1):
            code = parent_code + (j,)
            self.nodes[code] = LogicNode(code, statement=text)
            created.append(code)
        node.expanded = True
        self._resolved = False
        return created

    def assign_raw_flag(
        self,
        code: Code,
        flag: RawFlag,
        internal_reasoning: str = "",
        condition: Optional[str] = None,
    ) -> None:
        node = self[code]
        if node.is_root:
            raise TreeError("the root sentinel carries no flag")
        if node.raw_flag is not None:
            raise TreeError(f"node {format_code(code)} already has a flag")
        flag = RawFlag(flag)
        if flag is RawFlag.EPOCHE and not condition:
            raise TreeError(f"epoche flag on {format_code(code)} requires a condition")
        if flag is not RawFlag.EPOCHE and condition is not None:
            raise TreeError(f"condition given for non-epoche flag on {format_code(code)}")
        node.raw_flag = flag
        node.internal_reasoning = internal_reasoning
        node.condition = condition
        if flag is not RawFlag.EPOCHE:
            node.resolved_flag = flag
        self._resolved = False

    def expandable_frontier(self) -> list[Code]:
        return [
            code
            for code in sorted(self.nodes)
            if code
            and self.nodes[code].raw_flag is RawFlag.EPOCHE
            and not self.nodes[code].expanded
            and len(code) < self.depth_bound
        ]

    def resolve(self) -> None:
        """Give every node a binary resolved flag.

        Non-epoche nodes keep their flag. An epoche node is Valid iff one of
        its children resolved Valid, so childless epoche nodes (depth bound,
        budget, or an empty expansion) end up Invalid.
        """
        missing = [format_code(n.code) for n in self if n.raw_flag is None]
        if missing:
            raise TreeError(f"nodes without a raw flag: {', '.join(missing)}")
        if self.expandable_frontier() and not self.full:
            raise TreeError("tree still has expandable epoche nodes")
        # deepest first so children are settled before their parents
        for code in sorted(self.nodes, key=len, reverse=True):
            node = self.nodes[code]
            if node.is_root:
                continue
            if node.raw_flag is RawFlag.EPOCHE:
                kids = self.children(code)
                ok = any(self.nodes[c].resolved_flag is RawFlag.VALID for c in kids)
                node.resolved_flag = RawFlag.VALID if ok else RawFlag.INVALID
            else:
                node.resolved_flag = node.raw_flag
        self._resolved = True

    def _require_resolved(self) -> None:
        if not self._resolved:
            raise TreeError("tree is not resolved")

    def valid_initial_logics(self) -> set[Code]:
        self._require_resolved()
        return {c for c in self.initial_codes() if self.nodes[c].resolved_flag is RawFlag.VALID}

    def chain(self, initial: Code) -> list[Code]:
        """Ancestral path from the deepest valid descendant of ``initial`` up to the root.

        Among equally deep candidates the smallest code wins.
        """
        self._require_resolved()
        best = initial
        stack = [initial]
        while stack:
            code = stack.pop()
            if self.nodes[code].resolved_flag is not RawFlag.VALID:
                continue
            if len(code) > len(best) or (len(code) == len(best) and code < best):
                best = code
            stack.extend(self.children(code))
        path = [best]
        while path[-1]:
            path.append(path[-1][:-1])
        return path

    def to_dict(self) -> dict[str, Any]:
        return {
            "depth_bound": self.depth_bound,
            "branch_cap": self.branch_cap,
            "node_budget": self.node_budget,
            "resolved": self._resolved,
            "nodes": {format_code(code): _node_to_dict(self.nodes[code]) for code in sorted(self.nodes)},
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ReasoningTree":
        tree = cls(data["depth_bound"], data["branch_cap"], data["node_budget"])
        tree.nodes = {}
        for key, raw in data["nodes"].items():
            code = parse_code(key)
            tree.nodes[code] = _node_from_dict(code, raw)
        if ROOT not in tree.nodes:
            raise TreeError("serialized tree lacks the root node")
        for code in tree.nodes:
            if code and code[:-1] not in tree.nodes:
                raise TreeError(f"serialized tree is not prefix-closed at {format_code(code)}")
        tree._resolved = bool(data.get("resolved", False))
        return tree


def _flag_or_none(value: Optional[int]) -> Optional[RawFlag]:
    return None if value is None else RawFlag(value)


def _node_to_dict(node: LogicNode) -> dict[str, Any]:
    return {
        "statement": node.statement,
        "raw_flag": None if node.raw_flag is None else int(node.raw_flag),
        "resolved_flag": None if node.resolved_flag is None else int(node.resolved_flag),
        "internal_reasoning": node.internal_reasoning,
        "condition": node.condition,
        "reflective_trigger": node.reflective_trigger,
        "expanded": node.expanded,
    }


def _node_from_dict(code: Code, raw: dict[str, Any]) -> LogicNode:
    return LogicNode(
        code=code,
        statement=raw.get("statement", ""),
        raw_flag=_flag_or_none(raw.get("raw_flag")),
        resolved_flag=_flag_or_none(raw.get("resolved_flag")),
        internal_reasoning=raw.get("internal_reasoning", ""),
        condition=raw.get("condition"),
        reflective_trigger=raw.get("reflective_trigger"),
        expanded=bool(raw.get("expanded", False)),
    )


@dataclass(frozen=True)
class Verdict:
    valid_count: int
    threshold: int
    decision: Decision
    valid_initial: frozenset[Code] = field(default_factory=frozenset)
    chains: dict[Code, tuple[Code, ...]] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "decision": self.decision.value,
            "valid_count": self.valid_count,
            "threshold": self.threshold,
            "valid_initial": [format_code(c) for c in sorted(self.valid_initial)],
            "chains": {
                format_code(c): [format_code(x) for x in self.chains[c]] for c in sorted(self.chains)
            },
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Verdict":
        return cls(
            valid_count=data["valid_count"],
            threshold=data["threshold"],
            decision=Decision(data["decision"]),
            valid_initial=frozenset(parse_code(c) for c in data["valid_initial"]),
            chains={
                parse_code(k): tuple(parse_code(x) for x in v) for k, v in data["chains"].items()
            },
        )


def threshold_decision(valid_count: int, threshold: int) -> Decision:
    if threshold < 1:
        raise TreeError(f"threshold must be >= 1, got {threshold}")
    return Decision.AI_GENERATED if valid_count >= threshold else Decision.REAL


def decide(tree: ReasoningTree, threshold: int) -> Verdict:
    if not isinstance(threshold, int) or threshold < 1:
        raise TreeError(f"threshold must be >= 1, got {threshold!r}")
    valid = tree.valid_initial_logics()
    return Verdict(
        valid_count=len(valid),
        threshold=threshold,
        decision=threshold_decision(len(valid), threshold),
        valid_initial=frozenset(valid),
        chains={c: tuple(tree.chain(c)) for c in sorted(valid)},
    )


new_tree = ReasoningTree
