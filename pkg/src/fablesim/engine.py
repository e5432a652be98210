"""Simulation engine: the scene loop, settlement, records, and checkpoints.

A run is a sequence of scenes. Each scene casts co-located roles, loops
rounds of plan/dispatch/memory until judged complete or the round cap hits,
then settles: movement, travel ticks, event or script bookkeeping, and
dynamic attribute updates. Everything nondeterministic flows through the
gateway, so a seeded config plus a scripted provider replays byte-identically.
"""

from __future__ import annotations

import json
import logging
import pickle
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import templates
from .director import Director, ScriptTracker
from .gateway import (
    ChatRequest,
    Gateway,
    GatewayError,
    ProviderConfig,
    ScriptedProvider,
    build_provider,
)
from .memory import Embedder, MemoryEntry, MemoryStore, SettingsIndex, build_embedder
from .roles import ActionRecord, PlannedAction, PlanningContext, RoleAgent, parse_action_detail
from .world import (
    Event,
    Location,
    MapGraph,
    NoPathError,
    TravelPlan,
    WorldState,
    WorldviewSetting,
    begin_travel,
    load_world,
    settle_travel,
    shortest_path,
)
from .world import CharacterProfile

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FSIMCKPT"
CHECKPOINT_VERSION = 1

MODES = ("free", "script")


class EngineError(Exception):
    """Engine configuration or state failures."""


class CheckpointError(EngineError):
    """A checkpoint file is missing, foreign, corrupt, or the wrong version."""


@dataclass
class SimulationConfig:
    mode: str = "free"
    scenes: int = 1
    max_rounds: int = 6
    seed: int = 0
    event_stimulation: bool = False
    provider: ProviderConfig | None = None
    embedder: dict = field(default_factory=dict)
    stm_capacity: int = 15
    top_k_references: int = 5
    top_k_settings: int = 5
    recent_memories: int = 8
    retrieved_memories: int = 5
    temperature: float = 0.7

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise EngineError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.scenes < 0 or self.max_rounds <= 0:
            raise EngineError("scenes must be >= 0 and max_rounds positive")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "scenes": self.scenes,
            "max_rounds": self.max_rounds,
            "seed": self.seed,
            "event_stimulation": self.event_stimulation,
            "provider": self.provider.to_dict() if self.provider else None,
            "embedder": dict(self.embedder),
            "stm_capacity": self.stm_capacity,
            "top_k_references": self.top_k_references,
            "top_k_settings": self.top_k_settings,
            "recent_memories": self.recent_memories,
            "retrieved_memories": self.retrieved_memories,
            "temperature": self.temperature,
        }

    @classmethod
    def from_dict(cls, data: dict) -> SimulationConfig:
        provider = data.get("provider")
        return cls(
            mode=str(data.get("mode", "free")),
            scenes=int(data.get("scenes", 1)),
            max_rounds=int(data.get("max_rounds", 6)),
            seed=int(data.get("seed", 0)),
            event_stimulation=bool(data.get("event_stimulation", False)),
            provider=ProviderConfig.from_dict(provider) if provider else None,
            embedder=dict(data.get("embedder", {})),
            stm_capacity=int(data.get("stm_capacity", 15)),
            top_k_references=int(data.get("top_k_references", 5)),
            top_k_settings=int(data.get("top_k_settings", 5)),
            recent_memories=int(data.get("recent_memories", 8)),
            retrieved_memories=int(data.get("retrieved_memories", 5)),
            temperature=float(data.get("temperature", 0.7)),
        )


@dataclass
class SceneRecord:
    scene: int
    cast: list[str] = field(default_factory=list)
    records: list[ActionRecord] = field(default_factory=list)
    settlement: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "scene": self.scene,
            "cast": list(self.cast),
            "records": [r.to_dict() for r in self.records],
            "settlement": dict(self.settlement),
        }

    @classmethod
    def from_dict(cls, data: dict) -> SceneRecord:
        return cls(
            scene=int(data["scene"]),
            cast=[str(c) for c in data.get("cast", [])],
            records=[ActionRecord.from_dict(r) for r in data.get("records", [])],
            settlement=dict(data.get("settlement", {})),
        )


def record_lines(scenes: list[SceneRecord]) -> list[str]:
    """Flatten scene records into the JSONL lines of record.jsonl."""
    lines = []
    for scene in scenes:
        lines.append(json.dumps({"type": "scene", "scene": scene.scene, "cast": scene.cast}, ensure_ascii=False))
        for record in scene.records:
            lines.append(json.dumps({"type": "action", **record.to_dict()}, ensure_ascii=False))
        lines.append(
            json.dumps({"type": "settlement", "scene": scene.scene, **scene.settlement}, ensure_ascii=False)
        )
    return lines


def write_record(scenes: list[SceneRecord], path: str | Path) -> None:
    Path(path).write_text("\n".join(record_lines(scenes)) + "\n", encoding="utf-8")


def load_record(path: str | Path) -> list[SceneRecord]:
    """Rebuild SceneRecords from a record.jsonl file."""
    scenes: list[SceneRecord] = []
    current: SceneRecord | None = None
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as exc:
            raise EngineError(f"record line {line_no} is not valid JSON: {exc}")
        kind = data.get("type")
        if kind == "scene":
            current = SceneRecord(scene=int(data["scene"]), cast=[str(c) for c in data.get("cast", [])])
            scenes.append(current)
        elif kind == "action":
            if current is None:
                raise EngineError(f"record line {line_no}: action before any scene header")
            current.records.append(ActionRecord.from_dict(data))
        elif kind == "settlement":
            if current is None:
                raise EngineError(f"record line {line_no}: settlement before any scene header")
            current.settlement = {k: v for k, v in data.items() if k not in ("type", "scene")}
        else:
            raise EngineError(f"record line {line_no}: unknown record type {kind!r}")
    return scenes


class Engine:
    """One live simulation: world, agents, director, and run bookkeeping."""

    def __init__(
        self,
        state: WorldState,
        config: SimulationConfig,
        gateway: Gateway,
        embedder: Embedder,
    ) -> None:
        self.state = state
        self.config = config
        self.gateway = gateway
        self.embedder = embedder
        self.settings_index = SettingsIndex(state.settings, embedder)
        self.director = Director(
            gateway,
            state,
            self.settings_index,
            top_k_settings=config.top_k_settings,
            top_k_references=config.top_k_references,
            recent_memories=config.recent_memories,
            retrieved_memories=config.retrieved_memories,
            request_seed=config.seed,
            temperature=config.temperature,
        )
        self.agents: dict[str, RoleAgent] = {}
        self.plans: dict[str, TravelPlan] = {}
        self.featured: dict[str, int] = {}
        self.tracker: ScriptTracker | None = None
        self.scene_records: list[SceneRecord] = []
        self.rng = random.Random(config.seed)
        self.finished = False
        self.aborted: str | None = None
        self.scene_call_counts: list[int] = []
        self._partial: SceneRecord | None = None

    # ------------------------------------------------------------------- setup

    def _summarizer(self):
        def summarize(text: str) -> str:
            prompt = templates.render("summarize_memory", text=text)
            request = ChatRequest.build(
                system="", user=prompt, temperature=self.config.temperature, seed=self.config.seed
            )
            return self.gateway.complete_text(request)

        return summarize

    def _new_agent(self, profile: CharacterProfile, location: str, embed_references: bool = True) -> RoleAgent:
        store = MemoryStore(self.embedder, capacity=self.config.stm_capacity, summarizer=self._summarizer())
        return RoleAgent(
            profile,
            location,
            store,
            temperature=self.config.temperature,
            request_seed=self.config.seed,
            embed_references=embed_references,
        )

    def initialize_agents(self) -> None:
        """Split the script (script mode), then seed every role's goal and status."""
        if self.config.mode == "script":
            self.tracker = self.director.split_script(self.state.script)
            directive = self.tracker.current_act.outline
        else:
            directive = self.state.current_event.description if self.state.current_event else ""
        for code, profile in self.state.profiles.items():
            agent = self._new_agent(profile, self.state.role_positions[code])
            self.agents[code] = agent
            agent.initialize_attributes(
                self.gateway,
                self.director.world_description(agent.location),
                directive,
            )

    # --------------------------------------------------------------- scene loop

    def _directive(self) -> str:
        if self.config.mode == "script" and self.tracker:
            return self.tracker.instruction
        if self.state.current_event:
            return f"An event is in play: {self.state.current_event.description}"
        return ""

    def run_scene(self) -> SceneRecord:
        """Cast a scene and loop rounds until the judge or the cap ends it."""
        scene = SceneRecord(scene=self.state.scene_index)
        self._partial = scene
        cast = self.director.select_participants(
            self.agents, set(self.plans), self.featured, self._directive() or "None."
        )
        scene.cast = cast
        for code in cast:
            self.featured[code] = self.state.scene_index
        round_no = 1
        while cast:
            history_neutral = self.director.scene_history(scene.records)
            initiator = self.director.select_initiator(cast, self.agents, round_no, history_neutral)
            agent = self.agents[initiator]
            query = self.director.build_query(agent, scene.records)
            context = PlanningContext(
                world_description=self.director.world_description(agent.location),
                other_roles_info=self.director.other_roles_info(cast, self.agents, initiator),
                history=self.director.history_for(agent),
                references=self.director.references_for(agent, query),
                knowledges=self.director.knowledges_for(query),
                directive=self._directive() or "None.",
                known_codes=[c for c in cast if c != initiator],
            )
            planned = agent.plan_action(self.gateway, context)
            record = self._dispatch(agent, planned, round_no)
            scene.records.append(record)
            self._record_memories(record, cast)
            if self.director.is_scene_complete(scene.records, round_no, self.config.max_rounds):
                break
            round_no += 1
        return scene

    def _dispatch(self, agent: RoleAgent, planned: PlannedAction, round_no: int) -> ActionRecord:
        record = ActionRecord(
            scene=self.state.scene_index,
            round=round_no,
            actor=agent.code,
            action=planned.action,
            interact_type=planned.interact_type,
            targets=list(planned.target_role_codes),
            npc=planned.target_npc_name,
            visible=list(planned.visible_role_codes),
            detail=planned.detail,
        )
        parsed = parse_action_detail(planned.detail)
        if planned.interact_type == "role":
            incoming = parsed.visible_text()
            for target in planned.target_role_codes:
                responder = self.agents[target]
                response = responder.respond(
                    self.gateway,
                    actor_name=agent.profile.name,
                    incoming_detail=incoming,
                    world_description=self.director.world_description(responder.location),
                    history=self.director.history_for(responder),
                    references=self.director.references_for(responder, incoming),
                    knowledges=self.director.knowledges_for(incoming),
                )
                record.responses.append([target, response])
        elif planned.interact_type == "environment":
            record.env = self.director.environment_response(agent, planned, parsed)
        elif planned.interact_type == "npc":
            record.env = self.director.npc_response(agent, planned, parsed)
        return record

    def _record_memories(self, record: ActionRecord, cast: list[str]) -> None:
        """Write the exchange into memories; thoughts stay with their thinker."""
        scene_idx = self.state.scene_index
        actor = self.agents[record.actor]
        actor_name = actor.profile.name
        actor.memory.record(f"{actor_name}: {record.detail}", scene_idx)
        visible_detail = parse_action_detail(record.detail).visible_text()
        for code in record.visible:
            if code != record.actor and code in self.agents:
                self.agents[code].memory.record(f"{actor_name}: {visible_detail}", scene_idx)
        for responder_code, text in record.responses:
            responder = self.agents[responder_code]
            responder.memory.record(f"{responder.profile.name}: {text}", scene_idx)
            visible_response = parse_action_detail(text).visible_text()
            actor.memory.record(f"{responder.profile.name}: {visible_response}", scene_idx)
        if record.env:
            speaker = record.npc if record.npc else "WORLD"
            line = f"{speaker}: {record.env}"
            if record.interact_type == "environment":
                for code in cast:
                    self.agents[code].memory.record(line, scene_idx)
            else:
                actor.memory.record(line, scene_idx)
                for code in record.visible:
                    if code != record.actor and code in self.agents:
                        self.agents[code].memory.record(line, scene_idx)

    # --------------------------------------------------------------- settlement

    def _reachable(self, origin: str) -> list[tuple[str, str, int]]:
        out = []
        for loc_id in sorted(self.state.locations):
            if loc_id == origin:
                continue
            try:
                _, dist = shortest_path(self.state.map, origin, loc_id)
            except NoPathError:
                continue
            out.append((loc_id, self.state.locations[loc_id].name, dist))
        return out

    def settle_scene(self, scene: SceneRecord) -> dict:
        """Movement, travel ticks, event or script bookkeeping, attribute updates."""
        moves: dict[str, str] = {}
        for code in scene.cast:
            agent = self.agents[code]
            history = self.director.scene_history(scene.records, viewer=code) if scene.records else ""
            choice = agent.decide_move(self.gateway, self._reachable(agent.location), history)
            if choice != "stay":
                begin_travel(self.state, self.plans, code, choice)
                agent.in_transit = True
                moves[code] = choice
        arrivals = settle_travel(self.state, self.plans)
        for code in arrivals:
            self.agents[code].location = self.state.role_positions[code]
            self.agents[code].in_transit = False

        neutral = self.director.scene_history(scene.records) if scene.records else ""
        act_index = 0
        if self.config.mode == "script" and self.tracker:
            self.director.script_step(self.tracker, neutral)
            act_index = self.tracker.current
            if self.tracker.finished:
                self.finished = True
        elif self.config.event_stimulation:
            self.director.update_event(neutral)

        attributes: dict[str, dict[str, str]] = {}
        for code in scene.cast:
            agent = self.agents[code]
            summary = self.director.scene_history(scene.records, viewer=code) if scene.records else ""
            if agent.update_dynamic_attributes(self.gateway, summary):
                attributes[code] = {"goal": agent.goal, "status": agent.status}

        settlement = {
            "moves": moves,
            "arrivals": arrivals,
            "event": self.state.current_event.description if self.state.current_event else "",
            "act": act_index,
            "attributes": attributes,
        }
        scene.settlement = settlement
        self.state.scene_index += 1
        self._partial = None
        return settlement

    # --------------------------------------------------------------------- run

    def run(self, total_scenes: int | None = None) -> list[SceneRecord]:
        """Run until the world's scene index reaches the target (or the script ends)."""
        target = self.config.scenes if total_scenes is None else total_scenes
        while self.state.scene_index < target and not self.finished and self.aborted is None:
            calls_before = self.gateway.calls
            try:
                scene = self.run_scene()
                self.settle_scene(scene)
                self.scene_records.append(scene)
            except GatewayError as exc:
                logger.error("run aborted during scene %d: %s", self.state.scene_index, exc)
                self.aborted = str(exc)
                if self._partial is not None:
                    self._partial.settlement = {"aborted": str(exc)}
                    self.scene_records.append(self._partial)
                    self._partial = None
            self.scene_call_counts.append(self.gateway.calls - calls_before)
        return self.scene_records

    # -------------------------------------------------------------- checkpoints

    def checkpoint(self, path: str | Path) -> None:
        """Snapshot the full run state behind a versioned header."""
        if self._partial is not None:
            raise CheckpointError("cannot checkpoint mid-scene; finish settlement first")
        payload = {
            "config": self.config.to_dict(),
            "world": self._world_payload(),
            "agents": {code: self._agent_payload(agent) for code, agent in self.agents.items()},
            "plans": {
                code: {
                    "role_code": p.role_code,
                    "destination": p.destination,
                    "path": list(p.path),
                    "remaining": p.remaining,
                }
                for code, p in self.plans.items()
            },
            "featured": dict(self.featured),
            "tracker": self.tracker.to_dict() if self.tracker else None,
            "rng": self.rng.getstate(),
            "gateway_calls": self.gateway.calls,
            "scenes": [s.to_dict() for s in self.scene_records],
            "finished": self.finished,
            "aborted": self.aborted,
        }
        blob = pickle.dumps(payload, protocol=4)
        with Path(path).open("wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(CHECKPOINT_VERSION.to_bytes(2, "big"))
            fh.write(blob)

    def _world_payload(self) -> dict:
        state = self.state
        return {
            "overview": state.overview,
            "locations": [
                {"id": l.id, "name": l.name, "description": l.description, "details": l.details}
                for l in state.locations.values()
            ],
            "edges": state.map.to_edge_list(),
            "settings": [s.to_dict() for s in state.settings],
            "profiles": [p.to_dict() for p in state.profiles.values()],
            "positions": dict(state.role_positions),
            "event": state.current_event.to_dict() if state.current_event else None,
            "scene_index": state.scene_index,
            "script": state.script,
        }

    def _agent_payload(self, agent: RoleAgent) -> dict:
        def entry_payload(entry: MemoryEntry) -> dict:
            return {
                "text": entry.text,
                "scene": entry.scene,
                "kind": entry.kind,
                "seq": entry.seq,
                "embedding": entry.embedding.tolist(),
            }

        return {
            "goal": agent.goal,
            "status": agent.status,
            "location": agent.location,
            "in_transit": agent.in_transit,
            "seq": agent.memory._seq,
            "stm": [entry_payload(e) for e in agent.memory.stm],
            "ltm": [entry_payload(e) for e in agent.memory.ltm],
            "references": [(text, vec.tolist()) for text, vec in agent.reference_vecs()],
        }


def initialize(world_path: str | Path, config: SimulationConfig, transcript_path: str | Path | None = None) -> Engine:
    """Build a fresh engine: load the world, wire the gateway, seed the agents."""
    if config.provider is None:
        raise EngineError("config needs a provider")
    state = load_world(world_path)
    if config.mode == "script" and not state.script.strip():
        raise EngineError("script mode needs a world with a script")
    embedder = build_embedder(config.embedder)
    gateway = Gateway(build_provider(config.provider), transcript_path=transcript_path)
    engine = Engine(state, config, gateway, embedder)
    engine.initialize_agents()
    return engine


def restore(
    path: str | Path,
    provider: ProviderConfig | None = None,
    transcript_path: str | Path | None = None,
) -> Engine:
    """Rebuild an engine from a checkpoint and continue where it left off."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}")
    if len(raw) < len(CHECKPOINT_MAGIC) + 2 or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version = int.from_bytes(raw[len(CHECKPOINT_MAGIC) : len(CHECKPOINT_MAGIC) + 2], "big")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (want {CHECKPOINT_VERSION})")
    try:
        payload = pickle.loads(raw[len(CHECKPOINT_MAGIC) + 2 :])
    except Exception as exc:
        raise CheckpointError(f"checkpoint payload is corrupt: {exc}")

    config = SimulationConfig.from_dict(payload["config"])
    if provider is not None:
        config.provider = provider
    if config.provider is None:
        raise CheckpointError("checkpoint carries no provider config and none was given")

    world = payload["world"]
    graph = MapGraph()
    locations: dict[str, Location] = {}
    for entry in world["locations"]:
        loc = Location(**entry)
        locations[loc.id] = loc
        graph.add_node(loc.id)
    for edge in world["edges"]:
        graph.add_edge(edge["a"], edge["b"], edge["weight"])
    profiles = {p["code"]: CharacterProfile.from_dict(p) for p in world["profiles"]}
    state = WorldState(
        overview=world["overview"],
        map=graph,
        locations=locations,
        settings=[WorldviewSetting.from_dict(s) for s in world["settings"]],
        profiles=profiles,
        role_positions=dict(world["positions"]),
        current_event=Event.from_dict(world["event"]) if world["event"] else None,
        scene_index=int(world["scene_index"]),
        script=world.get("script", ""),
    )

    embedder = build_embedder(config.embedder)
    gateway = Gateway(build_provider(config.provider), transcript_path=transcript_path)
    engine = Engine(state, config, gateway, embedder)

    for code, blob in payload["agents"].items():
        agent = engine._new_agent(profiles[code], blob["location"], embed_references=False)
        agent.goal = blob["goal"]
        agent.status = blob["status"]
        agent.in_transit = blob["in_transit"]
        store = agent.memory
        store._seq = int(blob["seq"])
        store.stm = [
            MemoryEntry(
                text=e["text"],
                scene=e["scene"],
                kind=e["kind"],
                seq=e["seq"],
                embedding=np.asarray(e["embedding"], dtype=np.float64),
            )
            for e in blob["stm"]
        ]
        store.ltm = [
            MemoryEntry(
                text=e["text"],
                scene=e["scene"],
                kind=e["kind"],
                seq=e["seq"],
                embedding=np.asarray(e["embedding"], dtype=np.float64),
            )
            for e in blob["ltm"]
        ]
        agent.restore_reference_vecs(
            [(text, np.asarray(vec, dtype=np.float64)) for text, vec in blob["references"]]
        )
        engine.agents[code] = agent

    engine.plans = {code: TravelPlan(**p) for code, p in payload["plans"].items()}
    engine.featured = {str(k): int(v) for k, v in payload["featured"].items()}
    engine.tracker = ScriptTracker.from_dict(payload["tracker"]) if payload["tracker"] else None
    rng_state = payload["rng"]
    engine.rng.setstate(tuple(rng_state) if not isinstance(rng_state, tuple) else rng_state)
    engine.scene_records = [SceneRecord.from_dict(s) for s in payload["scenes"]]
    engine.finished = bool(payload["finished"])
    engine.aborted = payload["aborted"]

    # A sequence fixture must continue from where the interrupted run stopped.
    if isinstance(engine.gateway.provider, ScriptedProvider):
        engine.gateway.provider.skip(int(payload["gateway_calls"]))
    return engine
