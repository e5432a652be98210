"""Role agents: detail parsing, plan validation, planning and movement fallbacks."""

from __future__ import annotations

import random

import pytest

from fablesim.memory import HashedNgramEmbedder, MemoryStore
from fablesim.roles import (
    ActionRecord,
    PlanningContext,
    PlanValidationError,
    RoleAgent,
    details_equivalent,
    parse_action_detail,
    validate_planned_action,
)
from fablesim.world import CharacterProfile

from fixture_builders import ReplyScript, sequence_gateway


def make_agent(code="r1", references=(), **profile_kwargs) -> RoleAgent:
    profile = CharacterProfile(
        code=code,
        name=profile_kwargs.pop("name", code.upper()),
        nickname=code,
        profile="A test subject.",
        attributes="",
        references=list(references),
        relationships=profile_kwargs.pop("relationships", {}),
    )
    embedder = HashedNgramEmbedder()
    return RoleAgent(profile, location="here", memory=MemoryStore(embedder, capacity=15))


class TestParseActionDetail:
    def test_three_segment_kinds_in_order(self):
        detail = '[They cannot know.] (He bolts the door.) "We are closed."'
        parsed = parse_action_detail(detail)
        assert [k for k, _ in parsed.segments] == ["thought", "move", "speech"]
        assert parsed.thoughts == ["They cannot know."]
        assert parsed.moves == ["He bolts the door."]
        assert parsed.speech == ['"We are closed."']

    def test_speech_between_markers(self):
        parsed = parse_action_detail('She said "wait" (and turned) to leave')
        assert parsed.speech == ['She said "wait"', "to leave"]
        assert parsed.moves == ["and turned"]

    def test_reassemble_round_trip(self):
        detail = '[thought one] (a move) plain words (another move) [late thought]'
        parsed = parse_action_detail(detail)
        assert details_equivalent(parsed.reassemble(), detail)

    def test_visible_text_strips_thoughts_only(self):
        detail = '[secret plan] (opens the ledger) "Morning."'
        assert parse_action_detail(detail).visible_text() == '(opens the ledger) "Morning."'

    def test_unbalanced_marker_becomes_speech(self, caplog):
        with caplog.at_level("WARNING"):
            parsed = parse_action_detail("fine start [never closed")
        assert parsed.thoughts == []
        assert parsed.speech == ["fine start [never closed"]
        assert any("unbalanced" in r.message for r in caplog.records)

    def test_empty_segments_dropped(self):
        parsed = parse_action_detail("[] () words")
        assert parsed.segments == [("speech", "words")]

    def test_random_round_trips(self):
        rng = random.Random(99)
        fragments = ["waits", "looks up", "the bell rings", "enough of this", "go now"]
        for _ in range(200):
            parts = []
            previous = None
            for _ in range(rng.randint(1, 6)):
                text = rng.choice(fragments)
                # adjacent bare speech merges into one segment on reparse
                kind = rng.randrange(2) if previous == 2 else rng.randrange(3)
                previous = kind
                parts.append(f"[{text}]" if kind == 0 else f"({text})" if kind == 1 else text)
            detail = " ".join(parts)
            parsed = parse_action_detail(detail)
            assert details_equivalent(parsed.reassemble(), detail)
            for _, text in parsed.segments:
                assert text in fragments


class TestValidatePlannedAction:
    def base(self, **over):
        obj = {
            "action": "speak",
            "interact_type": "role",
            "target_role_codes": ["r2"],
            "visible_role_codes": [],
            "detail": "says a thing",
        }
        obj.update(over)
        return obj

    def test_valid_role_plan_expands_visibility(self):
        plan = validate_planned_action(self.base(), ["r1", "r2", "r3"], actor="r1")
        assert plan.target_role_codes == ["r2"]
        assert plan.visible_role_codes == ["r2"]

    def test_visible_keeps_known_extras(self):
        plan = validate_planned_action(
            self.base(visible_role_codes=["r3", "ghost", "r1"]), ["r1", "r2", "r3"], actor="r1"
        )
        # unknown dropped, actor dropped, target appended
        assert plan.visible_role_codes == ["r3", "r2"]

    def test_unknown_target_rejected(self):
        with pytest.raises(PlanValidationError):
            validate_planned_action(self.base(target_role_codes=["ghost"]), ["r1", "r2"], actor="r1")

    def test_self_target_rejected(self):
        with pytest.raises(PlanValidationError):
            validate_planned_action(self.base(target_role_codes=["r1"]), ["r1", "r2"], actor="r1")

    def test_role_without_targets_rejected(self):
        with pytest.raises(PlanValidationError):
            validate_planned_action(self.base(target_role_codes=[]), ["r1", "r2"], actor="r1")

    def test_npc_needs_name(self):
        with pytest.raises(PlanValidationError):
            validate_planned_action(self.base(interact_type="npc"), ["r1"], actor="r1")
        plan = validate_planned_action(
            self.base(interact_type="npc", target_npc_name="Fen"), ["r1"], actor="r1"
        )
        assert plan.target_npc_name == "Fen"
        assert plan.target_role_codes == []

    def test_non_role_clears_targets_and_npc(self):
        plan = validate_planned_action(
            self.base(interact_type="environment", target_npc_name="Fen"), ["r1", "r2"], actor="r1"
        )
        assert plan.target_role_codes == []
        assert plan.target_npc_name == ""

    def test_bad_interact_type(self):
        with pytest.raises(PlanValidationError):
            validate_planned_action(self.base(interact_type="shout"), ["r1"], actor="r1")

    def test_empty_action_or_detail(self):
        with pytest.raises(PlanValidationError):
            validate_planned_action(self.base(action="  "), ["r1", "r2"], actor="r1")
        with pytest.raises(PlanValidationError):
            validate_planned_action(self.base(detail=""), ["r1", "r2"], actor="r1")

    def test_duplicate_targets_collapse(self):
        plan = validate_planned_action(
            self.base(target_role_codes=["r2", "r2", "r3"]), ["r1", "r2", "r3"], actor="r1"
        )
        assert plan.target_role_codes == ["r2", "r3"]


class TestActionRecord:
    def test_round_trip(self):
        record = ActionRecord(
            scene=1,
            round=2,
            actor="r1",
            action="speak",
            interact_type="role",
            targets=["r2"],
            visible=["r2"],
            detail="says",
            responses=[["r2", "answers"]],
        )
        assert ActionRecord.from_dict(record.to_dict()) == record

    def test_npc_and_env_fields_optional(self):
        record = ActionRecord(scene=0, round=1, actor="r1", action="wait", interact_type="no")
        data = record.to_dict()
        assert "npc" not in data and "env" not in data
        assert ActionRecord.from_dict(data) == record


def context(codes=("r1", "r2")) -> PlanningContext:
    return PlanningContext(
        world_description="a test world",
        other_roles_info="",
        history="Nothing yet.",
        references="",
        knowledges="",
        directive="",
        known_codes=list(codes),
    )


class TestRoleAgentPlanning:
    def test_valid_plan_single_call(self):
        script = ReplyScript().plan("speak", "role", "hi there", targets=["r2"])
        gw = sequence_gateway(script.replies)
        plan = make_agent().plan_action(gw, context())
        assert plan.interact_type == "role"
        assert plan.target_role_codes == ["r2"]
        assert gw.calls == 1

    def test_invalid_plan_earns_one_reask(self):
        script = ReplyScript()
        script.plan("speak", "role", "hi", targets=["ghost"])
        script.plan("speak", "role", "hi", targets=["r2"])
        gw = sequence_gateway(script.replies)
        plan = make_agent().plan_action(gw, context())
        assert plan.target_role_codes == ["r2"]
        assert gw.calls == 2

    def test_two_invalid_plans_downgrade_to_no(self):
        script = ReplyScript().plan("push", "role", "shoves past", targets=["ghost"])
        gw = sequence_gateway(script.replies * 2)
        plan = make_agent().plan_action(gw, context())
        assert plan.interact_type == "no"
        assert plan.action == "push"
        assert plan.detail == "shoves past"
        assert plan.target_role_codes == []
        assert gw.calls == 2

    def test_downgrade_fallback_detail(self):
        bad = '{"action": "", "interact_type": "role", "target_role_codes": [], "visible_role_codes": [], "detail": ""}'
        gw = sequence_gateway([bad, bad])
        plan = make_agent().plan_action(gw, context())
        assert plan.action == "wait"
        assert plan.detail == "(hesitates)"

    def test_initialize_attributes(self):
        script = ReplyScript().goal_init("find the bell", "rested")
        gw = sequence_gateway(script.replies)
        agent = make_agent()
        agent.initialize_attributes(gw, "world", "")
        assert agent.goal == "find the bell"
        assert agent.status == "rested"


class TestRoleAgentAttributes:
    def test_empty_summary_skips_call(self):
        gw = sequence_gateway([])
        agent = make_agent()
        agent.goal = "old goal"
        assert agent.update_dynamic_attributes(gw, "   ") is False
        assert gw.calls == 0
        assert agent.goal == "old goal"

    def test_update_applies(self):
        script = ReplyScript().attributes("new goal", "new status")
        gw = sequence_gateway(script.replies)
        agent = make_agent()
        assert agent.update_dynamic_attributes(gw, "things happened") is True
        assert (agent.goal, agent.status) == ("new goal", "new status")

    def test_parse_failure_keeps_previous(self):
        gw = sequence_gateway(["junk", "junk", "junk"])
        agent = make_agent()
        agent.goal, agent.status = "kept goal", "kept status"
        assert agent.update_dynamic_attributes(gw, "summary") is False
        assert (agent.goal, agent.status) == ("kept goal", "kept status")
        assert gw.calls == 3  # full repair ladder ran before giving up

    def test_blank_fields_do_not_clobber(self):
        gw = sequence_gateway(['{"goal": "", "status": "tired"}'])
        agent = make_agent()
        agent.goal = "kept"
        agent.update_dynamic_attributes(gw, "summary")
        assert agent.goal == "kept"
        assert agent.status == "tired"


class TestRoleAgentMoves:
    REACHABLE = [("market", "Market", 1), ("shrine", "Shrine", 3)]

    def test_no_reachable_is_stay_without_call(self):
        gw = sequence_gateway([])
        assert make_agent().decide_move(gw, [], "") == "stay"
        assert gw.calls == 0

    def test_valid_choice(self):
        gw = sequence_gateway(["market"])
        assert make_agent().decide_move(gw, self.REACHABLE, "") == "market"

    def test_stay_answer(self):
        gw = sequence_gateway(["Stay."])
        assert make_agent().decide_move(gw, self.REACHABLE, "") == "stay"

    def test_reask_recovers(self):
        gw = sequence_gateway(["the market sounds nice", "market"])
        assert make_agent().decide_move(gw, self.REACHABLE, "") == "market"
        assert gw.calls == 2

    def test_two_unknowns_stay(self):
        gw = sequence_gateway(["nonsense", "more nonsense"])
        assert make_agent().decide_move(gw, self.REACHABLE, "") == "stay"
        assert gw.calls == 2


class TestReferences:
    def test_retrieval_ranks_by_similarity(self):
        agent = make_agent(
            references=[
                "The ledger listed every boat in the harbor.",
                "Geese crossed the frozen meadow at dusk.",
            ]
        )
        got = agent.retrieve_references("boats in the harbor ledger", k=1)
        assert got == ["The ledger listed every boat in the harbor."]

    def test_empty_references(self):
        assert make_agent().retrieve_references("anything", k=3) == []

    def test_vec_checkpoint_round_trip(self):
        agent = make_agent(references=["one line", "two lines"])
        pairs = agent.reference_vecs()
        fresh = make_agent()
        fresh.restore_reference_vecs(pairs)
        assert fresh.retrieve_references("two lines", k=1) == ["two lines"]
