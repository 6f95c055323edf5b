"""Shared test doubles: a rule-driven pair of skeptic backends and random trees."""

from __future__ import annotations

import random
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from epoche.agents import SEPARATOR, default_catalog
from epoche.gateway import CallableBackend, ChatRequest
from epoche.tree import ROOT, RawFlag, ReasoningTree

ACCEPTANCE_LINES: list[str] = []

EXT_MODEL = "ext-model"
INT_MODEL = "int-model"

_CAT = default_catalog()
_BASES = {
    _CAT.template("SkepticExternal"): "skeptic",
    _CAT.template("Neutral"): "neutral",
}


def report(name: str, ok: bool, detail: str = "") -> bool:
    """Print and remember one acceptance line."""
    line = f"[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def role_of(request: ChatRequest) -> str:
    text = request.text
    if "counter-skeptical verifier" in text:
        return "internal"
    if "MISSING CONDITION:" in text:
        return "reflective"
    if text.startswith(_CAT.template("Default")):
        return "zero_shot"
    return "external"


def claim_of(request: ChatRequest) -> str:
    text = request.text.split("CLAIM:\n", 1)[1]
    return text.split(SEPARATOR, 1)[0].strip()


def is_retry(request: ChatRequest) -> bool:
    return _CAT.template("ConditionRetry") in request.text


def condition_of(request: ChatRequest) -> str:
    line = request.text.split("MISSING CONDITION:", 1)[1]
    return line.split("\n", 1)[0].strip()


def external_context(request: ChatRequest) -> tuple[str, Optional[str]]:
    """(base kind, reflective text or None) for an External Skeptic request."""
    text = request.text
    for base, kind in _BASES.items():
        if text == base:
            return kind, None
        if text.startswith(base + SEPARATOR):
            return kind, text[len(base) + len(SEPARATOR):]
    raise AssertionError(f"unrecognised external prompt: {text[:80]!r}")


def reflective_text(condition: str) -> str:
    return f"Examine the visual input for: {condition}."


class World:
    """Scripted External/Internal skeptics.

    ``external(image_digest, base_kind, reflective)`` returns the External
    Skeptic reply; ``internal(claim, is_retry)`` the Internal Skeptic reply.
    Reflective triggers are ``reflective_text(condition)`` and zero-shot
    replies come from ``zero_shot(image_digest)``.
    """

    def __init__(
        self,
        external: Callable[[str, str, Optional[str]], str],
        internal: Callable[[str, bool], str],
        zero_shot: Callable[[str], str] = lambda digest: "Looks fine.\nANSWER: REAL",
    ):
        self.external_fn = external
        self.internal_fn = internal
        self.zero_shot_fn = zero_shot
        self.ext = CallableBackend(self._ext, EXT_MODEL)
        self.int = CallableBackend(self._int, INT_MODEL)

    def _ext(self, request: ChatRequest) -> str:
        digest = request.images[0].digest
        if role_of(request) == "zero_shot":
            return self.zero_shot_fn(digest)
        kind, reflective = external_context(request)
        return self.external_fn(digest, kind, reflective)

    def _int(self, request: ChatRequest) -> str:
        role = role_of(request)
        if role == "reflective":
            return reflective_text(condition_of(request))
        assert role == "internal", role
        return self.internal_fn(claim_of(request), is_retry(request))

    @property
    def requests(self) -> list[ChatRequest]:
        return self.ext.requests + self.int.requests


def verdict(flag: str, reason: str = "because", condition: Optional[str] = None) -> str:
    lines = [f"VERDICT: {flag}"]
    if condition:
        lines.append(f"CONDITION: {condition}")
    lines.append(f"REASON: {reason}")
    return "\n".join(lines)


def numbered(*items: str) -> str:
    return "\n".join(f"{i}. {s}" for i, s in enumerate(items, 1))


def write_png(path: Path, seed: int, size: int = 8) -> Path:
    import cv2

    rng = np.random.default_rng(seed)
    cv2.imwrite(str(path), rng.integers(0, 256, (size, size, 3), dtype=np.uint8))
    return path


def write_video(path: Path, n_frames: int, size: tuple[int, int] = (32, 24)) -> Path:
    import cv2

    writer = cv2.VideoWriter(str(path), cv2.VideoWriter_fourcc(*"mp4v"), 10, size)
    assert writer.isOpened()
    for i in range(n_frames):
        writer.write(np.full((size[1], size[0], 3), (i * 7) % 256, np.uint8))
    writer.release()
    return path


# ---------------------------------------------------------------- random trees


def random_tree(rng: random.Random, max_depth: int = 4, max_branch: int = 4) -> ReasoningTree:
    """Fully flagged tree whose frontier is empty: every epoche node above the
    depth bound has been expanded (possibly with zero children)."""
    depth_bound = rng.randint(1, max_depth)
    tree = ReasoningTree(depth_bound, max_branch, 10_000)
    queue = [ROOT]
    while queue:
        code = queue.pop(0)
        k = rng.randint(0, max_branch)
        created = tree.add_children(code, [f"claim {code}.{j}" for j in range(1, k + 1)])
        for c in created:
            flag = rng.choice([RawFlag.VALID, RawFlag.INVALID, RawFlag.EPOCHE])
            tree.assign_raw_flag(c, flag, "r", "cond" if flag is RawFlag.EPOCHE else None)
            if flag is RawFlag.EPOCHE and len(c) < depth_bound:
                queue.append(c)
    return tree


def brute_force_resolution(tree: ReasoningTree) -> dict[tuple, RawFlag]:
    """Epoche nodes are Valid iff some descendant (by prefix test) was judged
    Valid, else Invalid; everything else keeps its judgement."""
    codes = [c for c in tree.nodes if c]
    out = {}
    for a in codes:
        raw = tree.nodes[a].raw_flag
        if raw is not RawFlag.EPOCHE:
            out[a] = raw
            continue
        descendants = [d for d in codes if len(d) > len(a) and d[: len(a)] == a]
        hit = any(tree.nodes[d].raw_flag is RawFlag.VALID for d in descendants)
        out[a] = RawFlag.VALID if hit else RawFlag.INVALID
    return out


def brute_force_valid_initial(tree: ReasoningTree) -> set[tuple]:
    """Depth-1 codes with some node at or below them judged Valid."""
    codes = [c for c in tree.nodes if c]
    return {
        a
        for a in codes
        if len(a) == 1
        and any(d[:1] == a and tree.nodes[d].raw_flag is RawFlag.VALID for d in codes)
    }


# ---------------------------------------------------------------- labelled corpus

# Claims the External Skeptic raises, by what the image really is. Real images
# only draw nitpicks the Internal Skeptic rejects; AI images draw a defect it
# accepts, and every other AI image also needs one expansion to confirm.
REAL_CLAIMS = ("lighting is slightly uneven", "background is a little soft")
AI_CLAIMS = ("left hand has six fingers", "text on the sign is garbled")
AI_EPOCHE = "reflection in the window looks off"
AI_EPOCHE_CONDITION = "mirror geometry"
AI_EPOCHE_CHILD = "reflection shows a different room"

CORPUS_JUDGEMENTS = {
    REAL_CLAIMS[0]: verdict("INVALID", "ordinary exposure variation"),
    REAL_CLAIMS[1]: verdict("INVALID", "shallow depth of field"),
    AI_CLAIMS[0]: verdict("VALID", "anatomically impossible"),
    AI_CLAIMS[1]: verdict("INVALID", "could be motion blur"),
    AI_EPOCHE: verdict("EPOCHE", "depends on the scene layout", AI_EPOCHE_CONDITION),
    AI_EPOCHE_CHILD: verdict("VALID", "a mirror cannot show another room"),
}


def write_corpus(root: Path, n_real: int = 10, n_ai: int = 10) -> tuple[Path, dict[str, str]]:
    """PNG files plus a JSONL manifest; returns (manifest, digest -> label)."""
    import hashlib
    import json

    root.mkdir(parents=True, exist_ok=True)
    rows, labels = [], {}
    for i in range(n_real + n_ai):
        label = "real" if i < n_real else "ai"
        path = write_png(root / f"{label}-{i:02d}.png", seed=i)
        labels[hashlib.sha256(path.read_bytes()).hexdigest()] = label
        rows.append({"id": f"{label}-{i:02d}", "media": path.name, "label": label})
    manifest = root / "manifest.jsonl"
    manifest.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return manifest, labels


def corpus_world(labels: dict[str, str]) -> World:
    ai_order = sorted(d for d, lab in labels.items() if lab == "ai")

    def external(digest, kind, reflective):
        if reflective is not None:
            assert reflective == reflective_text(AI_EPOCHE_CONDITION)
            return numbered(AI_EPOCHE_CHILD)
        if labels[digest] == "real":
            return numbered(*REAL_CLAIMS)
        if ai_order.index(digest) % 2:
            return numbered(AI_CLAIMS[1], AI_EPOCHE)
        return numbered(*AI_CLAIMS)

    def zero_shot(digest):
        # a conservative baseline that calls almost everything real
        return "ANSWER: AI" if digest == ai_order[0] else "ANSWER: REAL"

    return World(external, lambda claim, retry: CORPUS_JUDGEMENTS[claim], zero_shot)


def record_session(world: World, manifest: Path, transcript: Path, modes, config=None, frames=8):
    """Run every manifest sample under every mode through recording backends."""
    from dataclasses import replace

    from epoche.engine import Engine, EngineConfig
    from epoche.evaluation import load_manifest
    from epoche.gateway import TranscriptWriter, record_transcript
    from epoche.media import load_media

    config = config or EngineConfig()
    with TranscriptWriter(transcript) as writer:
        engine = Engine(record_transcript(world.ext, writer), record_transcript(world.int, writer))
        for record in load_manifest(manifest):
            media = load_media(record.media, frames)
            for mode in modes:
                engine.run(media, replace(config, mode=mode))
    return transcript
