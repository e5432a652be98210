"""Director: casting, initiators, world feedback, events, script tracking."""

from __future__ import annotations

import json

import pytest

from fablesim.director import (
    ENVIRONMENT_FALLBACK,
    Director,
    ScriptError,
    ScriptTracker,
)
from fablesim.gateway import (
    ChatRequest,
    FixtureExhaustedError,
    Gateway,
    Provider,
    TransportError,
)
from fablesim.memory import HashedNgramEmbedder, MemoryStore, SettingsIndex
from fablesim.roles import ActionRecord, PlannedAction, RoleAgent, parse_action_detail
from fablesim.world import CharacterProfile, Event, Location, MapGraph, WorldState, WorldviewSetting

from fixture_builders import ReplyScript, sequence_gateway


def make_state(positions: dict[str, str] | None = None) -> WorldState:
    positions = positions or {"r1": "harbor", "r2": "harbor", "r3": "shrine"}
    graph = MapGraph()
    graph.add_edge("harbor", "shrine", 2)
    locations = {
        "harbor": Location(id="harbor", name="Harbor", description="Boats and rope."),
        "shrine": Location(id="shrine", name="Shrine", description="Salt-stained stone."),
    }
    profiles = {
        code: CharacterProfile(
            code=code, name=code.upper(), nickname=code, profile=f"{code} is here. Quiet.",
            attributes="", references=[], relationships={},
        )
        for code in positions
    }
    return WorldState(
        overview="A small port town.",
        map=graph,
        locations=locations,
        settings=[],
        profiles=profiles,
        role_positions=dict(positions),
    )


def make_agents(state: WorldState) -> dict[str, RoleAgent]:
    embedder = HashedNgramEmbedder()
    return {
        code: RoleAgent(state.profiles[code], location=loc, memory=MemoryStore(embedder, capacity=15))
        for code, loc in state.role_positions.items()
    }


def make_director(replies: list[str], state: WorldState | None = None, **kwargs) -> Director:
    state = state or make_state()
    embedder = HashedNgramEmbedder()
    index = SettingsIndex(state.settings, embedder)
    return Director(sequence_gateway(replies), state, index, **kwargs)


class TestCasting:
    def test_valid_proposal_accepted(self):
        script = ReplyScript().cast(["r1", "r2"])
        director = make_director(script.replies)
        agents = make_agents(director.state)
        cast = director.select_participants(agents, traveling=set(), featured={}, directive="")
        assert cast == ["r1", "r2"]

    def test_all_traveling_is_empty_cast_no_call(self):
        director = make_director([])
        agents = make_agents(director.state)
        cast = director.select_participants(agents, traveling={"r1", "r2", "r3"}, featured={}, directive="")
        assert cast == []
        assert director.gateway.calls == 0

    def test_split_location_proposal_falls_back(self):
        script = ReplyScript().cast(["r1", "r3"])  # harbor + shrine: invalid
        director = make_director(script.replies)
        agents = make_agents(director.state)
        cast = director.select_participants(agents, traveling=set(), featured={}, directive="")
        # least recently featured group; all unfeatured, so smallest location id
        assert cast == ["r1", "r2"]

    def test_traveler_in_proposal_falls_back(self):
        script = ReplyScript().cast(["r1", "r2"])
        director = make_director(script.replies)
        agents = make_agents(director.state)
        cast = director.select_participants(agents, traveling={"r2"}, featured={}, directive="")
        assert cast == ["r1"]  # harbor group minus the traveler

    def test_unparsable_proposal_falls_back(self):
        director = make_director(["junk", "junk", "junk"])
        agents = make_agents(director.state)
        cast = director.select_participants(agents, traveling=set(), featured={}, directive="")
        assert cast == ["r1", "r2"]
        assert director.gateway.calls == 3

    def test_fallback_prefers_least_recently_featured(self):
        script = ReplyScript().cast(["ghost"])
        director = make_director(script.replies)
        agents = make_agents(director.state)
        featured = {"r1": 4, "r2": 4, "r3": 1}
        cast = director.select_participants(agents, traveling=set(), featured=featured, directive="")
        assert cast == ["r3"]

    def test_duplicate_codes_collapse(self):
        script = ReplyScript().cast(["r1", "r1", "r2"])
        director = make_director(script.replies)
        agents = make_agents(director.state)
        cast = director.select_participants(agents, traveling=set(), featured={}, directive="")
        assert cast == ["r1", "r2"]


class TestInitiator:
    def test_solo_cast_skips_call(self):
        director = make_director([])
        agents = make_agents(director.state)
        assert director.select_initiator(["r1"], agents, round_no=1, history="") == "r1"
        assert director.gateway.calls == 0

    def test_valid_pick(self):
        script = ReplyScript().initiator("r2")
        director = make_director(script.replies)
        agents = make_agents(director.state)
        assert director.select_initiator(["r1", "r2"], agents, round_no=1, history="") == "r2"

    def test_bad_pick_round_robin(self):
        script = ReplyScript().initiator("ghost")
        director = make_director(script.replies)
        agents = make_agents(director.state)
        assert director.select_initiator(["r1", "r2"], agents, round_no=2, history="") == "r2"

    def test_unparsable_round_robin(self):
        director = make_director(["junk", "junk", "junk"])
        agents = make_agents(director.state)
        assert director.select_initiator(["r1", "r2"], agents, round_no=3, history="") == "r1"


class _ExplodingProvider(Provider):
    def complete(self, request: ChatRequest):
        raise TransportError("backend down")


class TestWorldFeedback:
    def planned(self, interact="environment", npc=""):
        return PlannedAction(action="look", interact_type=interact, target_npc_name=npc, detail="(looks around)")

    def test_environment_response_text(self):
        director = make_director(["The fog thickens."])
        agents = make_agents(director.state)
        parsed = parse_action_detail("(looks around)")
        assert director.environment_response(agents["r1"], self.planned(), parsed) == "The fog thickens."

    def test_environment_transport_failure_falls_back(self):
        state = make_state()
        index = SettingsIndex([], HashedNgramEmbedder())
        director = Director(Gateway(_ExplodingProvider()), state, index)
        agents = make_agents(state)
        parsed = parse_action_detail("(listens)")
        assert director.environment_response(agents["r1"], self.planned(), parsed) == ENVIRONMENT_FALLBACK

    def test_environment_fixture_exhaustion_stays_loud(self):
        director = make_director([])  # empty sequence: first call exhausts
        agents = make_agents(director.state)
        parsed = parse_action_detail("(listens)")
        with pytest.raises(FixtureExhaustedError):
            director.environment_response(agents["r1"], self.planned(), parsed)

    def test_npc_response(self):
        director = make_director(['"Mind the ropes," the porter says.'])
        agents = make_agents(director.state)
        parsed = parse_action_detail('"Busy day?"')
        text = director.npc_response(agents["r1"], self.planned("npc", npc="Porter"), parsed)
        assert "Mind the ropes" in text

    def test_npc_needs_name(self):
        director = make_director(["x"])
        agents = make_agents(director.state)
        with pytest.raises(ValueError):
            director.npc_response(agents["r1"], self.planned("npc", npc=""), parse_action_detail("hi"))


class TestEvents:
    def test_new_event_replaces_current(self):
        director = make_director(["The tide pulls back farther than ever."])
        director.state.current_event = Event(description="old event")
        event = director.update_event("a scene happened")
        assert event is not None
        assert event.description == "The tide pulls back farther than ever."
        assert director.state.current_event is event

    def test_resolved_clears_event(self):
        director = make_director(["RESOLVED"])
        director.state.current_event = Event(description="old event")
        assert director.update_event("the matter closed") is None
        assert director.state.current_event is None

    def test_transport_failure_keeps_event(self):
        state = make_state()
        index = SettingsIndex([], HashedNgramEmbedder())
        director = Director(Gateway(_ExplodingProvider()), state, index)
        current = Event(description="an event")
        state.current_event = current
        assert director.update_event("summary") is current
        assert state.current_event is current


class TestSceneCompletion:
    def test_round_cap_skips_call(self):
        director = make_director([])
        assert director.is_scene_complete([], round_no=6, max_rounds=6) is True
        assert director.gateway.calls == 0

    def test_judge_continue(self):
        director = make_director(["continue"])
        assert director.is_scene_complete([], round_no=1, max_rounds=6) is False

    def test_judge_complete_prefix(self):
        director = make_director(["Complete. The beat has landed."])
        assert director.is_scene_complete([], round_no=1, max_rounds=6) is True


class TestScript:
    def test_split(self):
        script = ReplyScript().script_split(["first act", "second act"])
        director = make_director(script.replies)
        tracker = director.split_script("the outline")
        assert [a.outline for a in tracker.acts] == ["first act", "second act"]
        assert tracker.current == 1
        assert "first act" in tracker.instruction

    def test_split_empty_script(self):
        director = make_director([])
        with pytest.raises(ScriptError):
            director.split_script("   ")

    def test_split_no_acts(self):
        director = make_director(['{"acts": []}'])
        with pytest.raises(ScriptError):
            director.split_script("outline")

    def test_split_unparsable(self):
        director = make_director(["junk", "junk", "junk"])
        with pytest.raises(ScriptError):
            director.split_script("outline")

    def test_step_stays_on_incomplete_act(self):
        split = ReplyScript().script_split(["a1", "a2"])
        step = ReplyScript().script_step(False, "keep going")
        director = make_director(split.replies + step.replies)
        tracker = director.split_script("outline")
        instruction = director.script_step(tracker, recent="stuff")
        assert tracker.current == 1
        assert instruction == "keep going\nCurrent act: a1"

    def test_step_advances_on_complete(self):
        split = ReplyScript().script_split(["a1", "a2"])
        step = ReplyScript().script_step(True, "on to the next")
        director = make_director(split.replies + step.replies)
        tracker = director.split_script("outline")
        instruction = director.script_step(tracker, recent="stuff")
        assert tracker.current == 2
        assert instruction == "on to the next\nCurrent act: a2"

    def test_final_act_completion_finishes(self):
        split = ReplyScript().script_split(["only act"])
        step = ReplyScript().script_step(True, "wrap up")
        director = make_director(split.replies + step.replies)
        tracker = director.split_script("outline")
        instruction = director.script_step(tracker, recent="stuff")
        assert tracker.finished is True
        assert instruction == "The story has reached its ending."
        # further steps are free and repeat the terminal instruction
        calls = director.gateway.calls
        assert director.script_step(tracker, recent="more") == instruction
        assert director.gateway.calls == calls

    def test_step_failure_keeps_instruction(self):
        split = ReplyScript().script_split(["a1"])
        director = make_director(split.replies + ["junk", "junk", "junk"])
        tracker = director.split_script("outline")
        before = tracker.instruction
        assert director.script_step(tracker, recent="stuff") == before
        assert tracker.current == 1

    def test_tracker_round_trip(self):
        tracker = ScriptTracker.from_dict(
            {
                "acts": [{"index": 1, "outline": "a1"}, {"index": 2, "outline": "a2"}],
                "current": 2,
                "instruction": "go",
                "finished": False,
            }
        )
        assert ScriptTracker.from_dict(tracker.to_dict()) == tracker


class TestTextAssembly:
    def record(self, detail, responses=(), env="", npc=""):
        return ActionRecord(
            scene=0, round=1, actor="r1", action="speak", interact_type="role",
            targets=["r2"], npc=npc, visible=["r2"], detail=detail,
            responses=[list(p) for p in responses], env=env,
        )

    def test_record_line_actor_sees_thoughts(self):
        director = make_director([])
        record = self.record('[hidden] "spoken"')
        assert "[hidden]" in director.record_line(record, viewer="r1")

    def test_record_line_others_do_not(self):
        director = make_director([])
        record = self.record('[hidden] "spoken"', responses=[["r2", "[reply thought] fine"]])
        line = director.record_line(record, viewer="r2")
        assert "hidden" not in line
        assert "[reply thought]" in line  # the responder sees their own thought

    def test_record_line_npc_speaker(self):
        director = make_director([])
        record = self.record("asks", env="The porter shrugs.", npc="Porter")
        assert "Porter: The porter shrugs." in director.record_line(record)

    def test_scene_history_filters_by_visibility(self):
        director = make_director([])
        visible = self.record("to r2")
        hidden = ActionRecord(
            scene=0, round=2, actor="r3", action="mutter", interact_type="no",
            visible=[], detail="alone",
        )
        history = director.scene_history([visible, hidden], viewer="r2")
        assert "to r2" in history
        assert "alone" not in history

    def test_history_for_merges_retrieved_and_recent(self):
        director = make_director([], recent_memories=2, retrieved_memories=2)
        agents = make_agents(director.state)
        agent = agents["r1"]
        agent.goal = "recall the oldest ledger line"
        for i in range(6):
            agent.memory.record(f"ledger line number {i}", scene=0)
        history = director.history_for(agent)
        lines = history.split("\n")
        assert lines[-2:] == ["ledger line number 4", "ledger line number 5"]
        assert len(lines) == len(set(lines))  # no duplicates between parts

    def test_history_for_empty_memory(self):
        director = make_director([])
        agents = make_agents(director.state)
        assert director.history_for(agents["r1"]) == "Nothing yet."

    def test_knowledges_for_formats_matches(self):
        state = make_state()
        state.settings = [
            WorldviewSetting(term="Ebb Bell", nature="custom", detail="Rung at the turn.", source=["1"]),
        ]
        embedder = HashedNgramEmbedder()
        director = Director(sequence_gateway([]), state, SettingsIndex(state.settings, embedder))
        text = director.knowledges_for("they rang the ebb bell")
        assert text == "- Ebb Bell: Rung at the turn."

    def test_knowledges_for_empty(self):
        director = make_director([])
        assert director.knowledges_for("anything") == "None."
