import hashlib
import json
import threading

import pytest

from epoche.agents import SEPARATOR, default_catalog
from epoche.engine import ConfigError, Engine, EngineConfig, Mode, VerificationTrace, run_inception
from epoche.gateway import ApiError, ImagePart
from epoche.media import MediaInput, MediaKind
from epoche.tree import Decision, RawFlag
from helpers import World, numbered, reflective_text, verdict

MEDIA = MediaInput(MediaKind.IMAGE, "clip.png", (ImagePart("image/png", data=b"frame-bytes"),))

INITIAL = numbered("six fingers on the left hand", "sky is slightly blurred", "shadow angle looks odd")
JUDGED = {
    "six fingers on the left hand": verdict("VALID", "hands never have six fingers"),
    "sky is slightly blurred": verdict("INVALID", "lens blur is normal"),
    "shadow angle looks odd": verdict("EPOCHE", "depends on the light", "light source direction"),
    "shadow points toward the lamp": verdict("VALID", "shadows fall away from light"),
}


def fixture_world():
    def external(digest, kind, reflective):
        if reflective is None:
            return INITIAL
        assert reflective == reflective_text("light source direction")
        return numbered("shadow points toward the lamp")

    return World(external, lambda claim, retry: JUDGED[claim])


def all_epoche_world(width=2):
    def external(digest, kind, reflective):
        tag = "root" if reflective is None else reflective
        return numbered(*(f"claim {j} under {tag}" for j in range(width)))

    def internal(claim, retry):
        return verdict("EPOCHE", "cannot tell", f"context of {claim}")

    return World(external, internal)


def run(world, **config):
    return Engine(world.ext, world.int).run(MEDIA, EngineConfig(**config))


# ---------------------------------------------------------------- fixture walks


def test_mixed_fixture_is_ai():
    trace = run(fixture_world())
    assert trace.ok
    tree = trace.tree
    assert [tree[c].raw_flag for c in tree.initial_codes()] == [
        RawFlag.VALID, RawFlag.INVALID, RawFlag.EPOCHE]
    assert tree[(3,)].resolved_flag is RawFlag.VALID
    assert tree[(3, 1)].statement == "shadow points toward the lamp"
    assert trace.verdict.valid_count == 2
    assert trace.verdict.decision is Decision.AI_GENERATED
    assert set(trace.verdict.valid_initial) == {(1,), (3,)}
    chains = dict(trace.verdict.chains)
    assert chains[(3,)] == ((3, 1), (3,), ())


def test_mixed_fixture_threshold():
    assert run(fixture_world(), threshold=2).verdict.decision is Decision.AI_GENERATED
    assert run(fixture_world(), threshold=3).verdict.decision is Decision.REAL


def test_all_invalid_is_real():
    world = World(lambda d, k, r: INITIAL, lambda claim, retry: verdict("INVALID"))
    trace = run(world)
    assert trace.verdict.valid_count == 0 and trace.verdict.decision is Decision.REAL
    assert trace.accounting["calls_total"] == 4


def test_all_epoche_hits_depth_bound():
    world = all_epoche_world()
    trace = run(world)
    tree = trace.tree
    assert max(len(c) for c in tree.nodes) == 3
    assert len(tree) == 2 + 4 + 8
    assert trace.verdict.valid_count == 0
    assert trace.verdict.decision is Decision.REAL
    assert all(not tree[c].expanded for c in tree.nodes if len(c) == 3)
    assert all(n.resolved_flag is RawFlag.INVALID for n in tree)


def test_depth_bound_one():
    trace = run(all_epoche_world(), depth_bound=1)
    assert len(trace.tree) == 2
    assert trace.accounting["expanded_nodes"] == 0


def test_budget_exhaustion():
    trace = run(all_epoche_world(width=3), node_budget=7)
    assert trace.ok
    assert len(trace.tree) == 7 and trace.tree.full
    assert trace.verdict.decision is Decision.REAL


def test_empty_external_reply():
    trace = run(World(lambda d, k, r: "", lambda c, r: verdict("VALID")))
    assert trace.ok and len(trace.tree) == 0
    assert trace.verdict.decision is Decision.REAL
    assert trace.accounting["calls_total"] == 1


def test_eager_expansion_with_empty_children():
    # an epoche claim whose expansion yields nothing resolves Invalid
    def external(digest, kind, reflective):
        return numbered("odd reflections") if reflective is None else "No further observations."

    world = World(external, lambda c, r: verdict("EPOCHE", "unsure", "mirror geometry")
                  if c == "odd reflections" else verdict("INVALID"))
    trace = run(world)
    assert trace.tree[(1,)].expanded
    assert trace.tree[(1,)].resolved_flag is RawFlag.INVALID


# ---------------------------------------------------------------- provenance


def test_composed_trigger_audit():
    world = fixture_world()
    trace = run(world)
    node = trace.tree[(3,)]
    assert node.reflective_trigger == reflective_text("light source direction")
    prov = trace.provenance["3"]
    (ext_id,) = prov["expansion_calls"]
    call = trace.calls[ext_id]
    request = next(r for r in world.ext.requests if r.fingerprint == call["fingerprint"])
    base = default_catalog().template("SkepticExternal")
    assert request.text == base + SEPARATOR + node.reflective_trigger
    assert hashlib.sha256(request.text.encode()).hexdigest() == prov["composed_trigger_sha256"]
    assert prov["trigger"].startswith("Composed:SkepticExternal")
    assert trace.provenance["ε"]["trigger"] == "SkepticExternal@v1"


def test_roles_and_counts():
    trace = run(fixture_world())
    acc = trace.accounting
    assert acc["calls_by_role"] == {"external": 2, "internal": 4, "reflective": 1}
    assert acc["nodes"] == 4 and acc["epoche_nodes"] == 1
    assert acc["call_bound"] == 1 + 4 + 2
    assert acc["calls_total"] <= acc["call_bound"] and acc["within_call_bound"]


@pytest.mark.parametrize("width", [1, 2, 3])
@pytest.mark.parametrize("depth", [1, 2, 3])
def test_call_bound(width, depth):
    trace = run(all_epoche_world(width), depth_bound=depth)
    acc = trace.accounting
    assert acc["within_call_bound"]
    assert acc["calls_total"] <= 1 + acc["nodes"] + 2 * acc["epoche_nodes"]


def test_retries_are_tracked():
    def internal(claim, retry):
        return verdict("VALID") if retry else "I am not sure what to say."

    trace = run(World(lambda d, k, r: INITIAL, internal))
    acc = trace.accounting
    assert acc["protocol_retries"] == 3
    assert acc["calls_by_role"]["internal_retry"] == 3
    assert acc["within_call_bound"]
    assert trace.verdict.valid_count == 3


def test_downgrade_is_recorded():
    trace = run(World(lambda d, k, r: numbered("claim"),
                      lambda c, r: "VERDICT: EPOCHE\nREASON: no condition"))
    assert trace.tree[(1,)].raw_flag is RawFlag.INVALID
    assert trace.provenance["1"]["downgraded"] is True


# ---------------------------------------------------------------- modes


def test_zero_shot_single_call():
    world = World(lambda *a: pytest.fail("no external call"), lambda *a: pytest.fail("no internal"),
                  zero_shot=lambda digest: "The light looks synthetic.\nANSWER: AI")
    trace = run(world, mode="zero-shot")
    assert trace.accounting["calls_total"] == 1
    assert trace.verdict.decision is Decision.AI_GENERATED
    assert len(world.int.requests) == 0


def test_zero_shot_default_real():
    world = World(lambda *a: "", lambda *a: "", zero_shot=lambda d: "I cannot say.")
    trace = run(world, mode="zero-shot", threshold=5)
    assert trace.verdict.decision is Decision.REAL
    assert trace.accounting["calls_total"] == 1


def test_external_only_single_call():
    world = fixture_world()
    trace = run(world, mode="external-only", threshold=9)
    assert trace.accounting["calls_total"] == 1
    assert not world.int.requests
    assert trace.verdict.valid_count == 3
    assert trace.verdict.decision is Decision.AI_GENERATED


def test_external_only_empty_list_is_real():
    world = World(lambda d, k, r: "", lambda *a: "")
    assert run(world, mode="external-only").verdict.decision is Decision.REAL


def test_internal_only_uses_neutral_base():
    kinds = []

    def external(digest, kind, reflective):
        kinds.append(kind)
        return fixture_world().external_fn(digest, kind, reflective)

    trace = run(World(external, lambda c, r: JUDGED[c]), mode=Mode.INTERNAL_ONLY)
    assert set(kinds) == {"neutral"}
    assert trace.verdict.valid_count == 2
    assert trace.provenance["ε"]["trigger"] == "Neutral@v1"


# ---------------------------------------------------------------- determinism and failure


def test_parallel_matches_serial():
    serial = Engine(*_pair(all_epoche_world(3)), clock=lambda: 0.0).run(
        MEDIA, EngineConfig(max_parallel_calls=1))
    parallel = Engine(*_pair(all_epoche_world(3)), clock=lambda: 0.0).run(
        MEDIA, EngineConfig(max_parallel_calls=8))
    a, b = serial.to_dict(), parallel.to_dict()
    assert a.pop("config")["max_parallel_calls"] == 1
    assert b.pop("config")["max_parallel_calls"] == 8
    assert a == b


def test_parallel_actually_overlaps():
    barrier = threading.Barrier(2, timeout=5)

    def internal(claim, retry):
        barrier.wait()
        return verdict("INVALID")

    world = World(lambda d, k, r: numbered("a", "b"), internal)
    trace = run(world, max_parallel_calls=2)
    assert trace.ok


def test_repeat_runs_identical():
    first = Engine(*_pair(fixture_world()), clock=lambda: 0.0).run(MEDIA)
    second = Engine(*_pair(fixture_world()), clock=lambda: 0.0).run(MEDIA)
    assert first.to_json() == second.to_json()


def _pair(world):
    return world.ext, world.int


def test_backend_failure_gives_failed_trace():
    def internal(claim, retry):
        if claim == "shadow points toward the lamp":
            raise ApiError(401, "unauthorised")
        return JUDGED[claim]

    world = fixture_world()
    world.internal_fn = internal
    trace = Engine(world.ext, world.int).run(MEDIA)
    assert not trace.ok and trace.verdict is None
    assert "ApiError" in trace.error
    assert len(trace.tree) == 4
    assert json.loads(trace.to_json())["status"] == "failed"


def test_trace_roundtrip(tmp_path):
    trace = run(fixture_world())
    path = trace.write(tmp_path / "t.trace.json")
    back = VerificationTrace.read(path)
    assert back.to_json() == trace.to_json()
    assert back.tree.to_dict() == trace.tree.to_dict()
    data = json.loads(path.read_text())
    assert data["format"] == "epoche-trace/1"
    assert data["nodes"]["1"]["statement"] == "six fingers on the left hand"
    assert data["catalog"]["version"] == default_catalog().version
    assert path.read_text().endswith("}\n")


def test_run_inception_helper():
    world = fixture_world()
    trace = run_inception(world.ext, world.int, MEDIA)
    assert trace.verdict.decision is Decision.AI_GENERATED


# ---------------------------------------------------------------- config


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        EngineConfig(depth_bound=0)
    with pytest.raises(ConfigError):
        EngineConfig.from_dict({"depth": 3})
    with pytest.raises(ValueError):
        EngineConfig(mode="bogus")
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"depth_bound": 2, "mode": "internal-only"}))
    cfg = EngineConfig.from_file(path)
    assert cfg.depth_bound == 2 and cfg.mode is Mode.INTERNAL_ONLY
    path.write_text(json.dumps({"nested": {"a": 1}}))
    with pytest.raises(ConfigError):
        EngineConfig.from_file(path)
    assert EngineConfig.from_dict(EngineConfig().to_dict()) == EngineConfig()
