"""Scene direction: casting, initiators, world feedback, events, script tracking.

The director is the non-character side of the simulation. It chooses who
shares each scene, lets the environment and minor figures answer, runs the
background event, and in script mode walks the story through its acts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from . import templates
from .gateway import (
    ChatRequest,
    FixtureExhaustedError,
    FixtureKeyError,
    Gateway,
    GatewayError,
    StructuredParseError,
)
from .memory import SettingsIndex
from .roles import ActionRecord, ParsedDetail, PlannedAction, RoleAgent, parse_action_detail
from .world import Event, WorldState

logger = logging.getLogger(__name__)

ENVIRONMENT_FALLBACK = "Nothing notable happens."
RESOLVED_SENTINEL = "RESOLVED"


class ScriptError(Exception):
    """The script could not be split into usable acts."""


@dataclass
class Act:
    index: int  # 1-based, contiguous
    outline: str


@dataclass
class ScriptTracker:
    acts: list[Act]
    current: int = 1
    instruction: str = ""
    finished: bool = False

    @property
    def current_act(self) -> Act:
        return self.acts[self.current - 1]

    def to_dict(self) -> dict:
        return {
            "acts": [{"index": a.index, "outline": a.outline} for a in self.acts],
            "current": self.current,
            "instruction": self.instruction,
            "finished": self.finished,
        }

    @classmethod
    def from_dict(cls, data: dict) -> ScriptTracker:
        return cls(
            acts=[Act(index=int(a["index"]), outline=str(a["outline"])) for a in data["acts"]],
            current=int(data.get("current", 1)),
            instruction=str(data.get("instruction", "")),
            finished=bool(data.get("finished", False)),
        )


class Director:
    """World-side orchestration around a gateway and the shared world state."""

    def __init__(
        self,
        gateway: Gateway,
        state: WorldState,
        settings_index: SettingsIndex,
        top_k_settings: int = 5,
        top_k_references: int = 5,
        recent_memories: int = 8,
        retrieved_memories: int = 5,
        request_seed: int | None = None,
        temperature: float = 0.7,
    ) -> None:
        self.gateway = gateway
        self.state = state
        self.settings_index = settings_index
        self.top_k_settings = top_k_settings
        self.top_k_references = top_k_references
        self.recent_memories = recent_memories
        self.retrieved_memories = retrieved_memories
        self.request_seed = request_seed
        self.temperature = temperature

    # ------------------------------------------------------------------ helpers

    def _request(self, prompt: str) -> ChatRequest:
        return ChatRequest.build(system="", user=prompt, temperature=self.temperature, seed=self.request_seed)

    def world_description(self, location_id: str | None = None) -> str:
        parts = [self.state.overview]
        if location_id:
            loc = self.state.locations[location_id]
            parts.append(f"Current place: {loc.name}. {loc.description}")
        return "\n".join(p for p in parts if p)

    def knowledges_for(self, context_text: str) -> str:
        if not self.settings_index.settings or not context_text:
            return "None."
        matched = self.settings_index.match(context_text, self.top_k_settings)
        if not matched:
            return "None."
        lines = []
        for s in matched:
            label = s.term if s.term else s.nature or "note"
            lines.append(f"- {label}: {s.detail}")
        return "\n".join(lines)

    def references_for(self, agent: RoleAgent, query: str) -> str:
        excerpts = agent.retrieve_references(query, self.top_k_references)
        if not excerpts:
            return "None."
        return "\n".join(f"- {text}" for text in excerpts)

    def build_query(self, agent: RoleAgent, scene_records: list[ActionRecord]) -> str:
        for record in reversed(scene_records):
            if record.actor == agent.code or agent.code in record.visible:
                line = self.record_line(record, viewer=agent.code)
                return f"{line}\n{agent.goal}"
        return f"{agent.goal}\n{agent.status}"

    def record_line(self, record: ActionRecord, viewer: str | None = None) -> str:
        """One record as a block of text lines from a viewer's side.

        The actor sees their own thoughts; everyone else sees the detail with
        thought segments removed.
        """
        name = self._name(record.actor)
        detail = record.detail if viewer == record.actor else parse_action_detail(record.detail).visible_text()
        lines = [f"{name}: {detail}"]
        for responder, text in record.responses:
            resp = text if viewer == responder else parse_action_detail(text).visible_text()
            lines.append(f"{self._name(responder)}: {resp}")
        if record.env:
            speaker = record.npc if record.npc else "WORLD"
            lines.append(f"{speaker}: {record.env}")
        return "\n".join(lines)

    def history_for(self, agent: RoleAgent) -> str:
        """Memory-backed history: retrieved older entries plus the newest ones."""
        recent = agent.memory.recent(self.recent_memories)
        recent_seqs = {e.seq for e in recent}
        retrieved = []
        if agent.memory.entries():
            query = f"{agent.goal}\n{agent.status}"
            for entry in agent.memory.retrieve(query, self.retrieved_memories):
                if entry.seq not in recent_seqs:
                    retrieved.append(entry)
        retrieved.sort(key=lambda e: e.seq)
        lines = [e.text for e in retrieved] + [e.text for e in recent]
        return "\n".join(lines) if lines else "Nothing yet."

    def scene_history(self, records: list[ActionRecord], viewer: str | None = None) -> str:
        visible = []
        for record in records:
            if viewer is None or viewer == record.actor or viewer in record.visible:
                visible.append(self.record_line(record, viewer=viewer))
        return "\n".join(visible) if visible else "Nothing yet."

    def other_roles_info(self, cast: list[str], agents: dict[str, RoleAgent], actor: str) -> str:
        lines = []
        for code in cast:
            if code == actor:
                continue
            prof = agents[code].profile
            snippet = prof.profile.split(".")[0].strip()
            lines.append(f"- {prof.name} (code: {code}): {snippet}")
        return "\n".join(lines) if lines else "Nobody else is present."

    def _name(self, code: str) -> str:
        prof = self.state.profiles.get(code)
        return prof.name if prof else code

    # ------------------------------------------------------------------ casting

    def select_participants(
        self,
        agents: dict[str, RoleAgent],
        traveling: set[str],
        featured: dict[str, int],
        directive: str,
    ) -> list[str]:
        """Choose the cast of the next scene from co-located, non-traveling roles.

        The gateway proposes; an invalid proposal falls back to the co-located
        group least recently featured (ties to the smallest location id).
        """
        groups: dict[str, list[str]] = {}
        for code, agent in agents.items():
            if code in traveling:
                continue
            groups.setdefault(agent.location, []).append(code)
        if not groups:
            return []  # everyone is on the road: settlement-only scene

        group_text = []
        for loc_id in sorted(groups):
            loc = self.state.locations[loc_id]
            members = ", ".join(f"{self._name(c)} (code: {c})" for c in groups[loc_id])
            group_text.append(f"- {loc.name} [{loc_id}]: {members}")
        prompt = templates.render(
            "cast_select",
            overview=self.state.overview,
            groups="\n".join(group_text),
            directive=directive or "None.",
        )
        try:
            obj = self.gateway.complete_structured(self._request(prompt), ["cast"])
            cast = self._validate_cast(obj.get("cast"), agents, traveling)
            if cast:
                return cast
        except StructuredParseError as exc:
            logger.warning("cast proposal unusable (%s); using fallback", exc)
        return self._fallback_cast(groups, featured)

    def _validate_cast(self, proposal, agents: dict[str, RoleAgent], traveling: set[str]) -> list[str]:
        if not isinstance(proposal, list) or not proposal:
            logger.warning("cast proposal is not a non-empty list")
            return []
        cast: list[str] = []
        for code in (str(c).strip() for c in proposal):
            if code not in agents or code in traveling:
                logger.warning("cast proposal names unavailable role %r", code)
                return []
            if code not in cast:
                cast.append(code)
        locations = {agents[c].location for c in cast}
        if len(locations) != 1:
            logger.warning("cast proposal spans several places: %s", sorted(locations))
            return []
        return cast

    def _fallback_cast(self, groups: dict[str, list[str]], featured: dict[str, int]) -> list[str]:
        def group_key(loc_id: str) -> tuple[int, str]:
            last = max(featured.get(code, -1) for code in groups[loc_id])
            return (last, loc_id)

        chosen = min(sorted(groups), key=group_key)
        return sorted(groups[chosen])

    def select_initiator(self, cast: list[str], agents: dict[str, RoleAgent], round_no: int, history: str) -> str:
        """Who acts this round; solo casts skip the call, bad picks go round-robin."""
        if len(cast) == 1:
            return cast[0]
        cast_info = "\n".join(f"- {self._name(c)} (code: {c}): {agents[c].status}" for c in cast)
        prompt = templates.render("initiator_select", cast_info=cast_info, history=history)
        try:
            obj = self.gateway.complete_structured(self._request(prompt), ["initiator"])
            code = str(obj["initiator"]).strip()
            if code in cast:
                return code
            logger.warning("initiator %r not in cast; using round-robin", code)
        except StructuredParseError as exc:
            logger.warning("initiator proposal unusable (%s); using round-robin", exc)
        return cast[(round_no - 1) % len(cast)]

    # ------------------------------------------------------------- world feedback

    def environment_response(self, actor: RoleAgent, planned: PlannedAction, parsed: ParsedDetail) -> str:
        """The world answers an environment-directed action; failures fall back."""
        loc = self.state.locations[actor.location]
        action_detail = parsed.visible_text()
        prompt = templates.render(
            "environment_response",
            world_description=self.state.overview,
            location=loc.name,
            location_description=f"{loc.description} {loc.details}".strip(),
            references=self.knowledges_for(f"{loc.name} {action_detail}"),
            role_name=actor.profile.name,
            action=planned.action,
            action_detail=action_detail,
        )
        try:
            return self.gateway.complete_text(self._request(prompt))
        except (FixtureExhaustedError, FixtureKeyError):
            raise  # fixture bugs must stay loud
        except GatewayError as exc:
            logger.warning("environment response failed (%s); using fallback", exc)
            return ENVIRONMENT_FALLBACK

    def npc_response(self, actor: RoleAgent, planned: PlannedAction, parsed: ParsedDetail) -> str:
        """An ephemeral minor figure answers; nothing persists about it."""
        if not planned.target_npc_name:
            raise ValueError("npc interaction needs a non-empty npc name")
        loc = self.state.locations[actor.location]
        prompt = templates.render(
            "npc_response",
            npc_name=planned.target_npc_name,
            location=loc.name,
            location_description=f"{loc.description} {loc.details}".strip(),
            world_description=self.state.overview,
            role_name=actor.profile.name,
            action_detail=parsed.visible_text(),
        )
        return self.gateway.complete_text(self._request(prompt))

    # ------------------------------------------------------------------- events

    def update_event(self, scene_summary: str) -> Event | None:
        """Continue, mutate, or resolve the background event after a scene."""
        current = self.state.current_event
        prompt = templates.render(
            "event_update",
            overview=self.state.overview,
            event=current.description if current else "No event is in play yet.",
            scene_summary=scene_summary or "A quiet stretch passed.",
        )
        try:
            reply = self.gateway.complete_text(self._request(prompt))
        except (FixtureExhaustedError, FixtureKeyError):
            raise
        except GatewayError as exc:
            logger.warning("event update failed (%s); event unchanged", exc)
            return current
        if reply.strip().upper() == RESOLVED_SENTINEL:
            self.state.current_event = None
            return None
        event = Event(description=reply.strip())
        self.state.current_event = event
        return event

    # ----------------------------------------------------------- scene completion

    def is_scene_complete(self, records: list[ActionRecord], round_no: int, max_rounds: int) -> bool:
        """The judge may end a scene early; the round cap always ends it."""
        if round_no >= max_rounds:
            return True
        prompt = templates.render("scene_judge", history=self.scene_history(records))
        reply = self.gateway.complete_text(self._request(prompt))
        return reply.strip().lower().startswith("complete")

    # ------------------------------------------------------------------- script

    def split_script(self, script_text: str) -> ScriptTracker:
        """Break a story outline into ordered acts before the run starts."""
        if not script_text.strip():
            raise ScriptError("script mode needs a non-empty script")
        prompt = templates.render("script_split", script=script_text)
        try:
            obj = self.gateway.complete_structured(self._request(prompt), ["acts"])
        except StructuredParseError as exc:
            raise ScriptError(f"script could not be split: {exc}")
        raw = obj.get("acts")
        if not isinstance(raw, list) or not raw:
            raise ScriptError("script split produced no acts")
        acts = [Act(index=i + 1, outline=str(text).strip()) for i, text in enumerate(raw) if str(text).strip()]
        if not acts:
            raise ScriptError("script split produced only empty acts")
        tracker = ScriptTracker(acts=acts)
        tracker.instruction = f"Work toward this act: {tracker.current_act.outline}"
        return tracker

    def script_step(self, tracker: ScriptTracker, recent: str) -> str:
        """Judge the current act, maybe advance, and emit next-scene guidance.

        The returned instruction always embeds the (possibly new) current
        act's outline. Completing the final act marks the tracker finished.
        """
        if tracker.finished:
            return tracker.instruction
        act = tracker.current_act
        prompt = templates.render("script_step", act=act.outline, recent=recent or "Nothing happened.")
        try:
            obj = self.gateway.complete_structured(self._request(prompt), ["act_complete", "instruction"])
        except StructuredParseError as exc:
            logger.warning("script step failed (%s); staying on act %d", exc, act.index)
            return tracker.instruction
        done = str(obj["act_complete"]).strip().lower() in ("yes", "true", "y")
        if done:
            if tracker.current >= len(tracker.acts):
                tracker.finished = True
                tracker.instruction = "The story has reached its ending."
                return tracker.instruction
            tracker.current += 1
        guidance = str(obj["instruction"]).strip()
        tracker.instruction = f"{guidance}\nCurrent act: {tracker.current_act.outline}"
        return tracker.instruction
