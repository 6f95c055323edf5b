"""Skeptical multi-agent authenticity verification for images and videos."""

from .engine import Engine, EngineConfig, Mode, VerificationTrace, run_inception
from .tree import Decision, RawFlag, ReasoningTree, Verdict, decide

__all__ = [
    "Decision",
    "Engine",
    "EngineConfig",
    "Mode",
    "RawFlag",
    "ReasoningTree",
    "Verdict",
    "VerificationTrace",
    "decide",
    "run_inception",
]

__version__ = "0.1.0"
