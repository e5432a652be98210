"""Role agents: action planning, responses, detail parsing, dynamic attributes.

Action details mix three segment kinds: inner thoughts in square brackets
(invisible to everyone but the thinker), physical moves in parentheses, and
bare speech. Parsing keeps segment order so reassembly reproduces the text.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field

from . import templates
from .gateway import ChatRequest, Gateway, StructuredParseError
from .memory import MemoryStore, rank_by_cosine
from .world import CharacterProfile

logger = logging.getLogger(__name__)

INTERACT_TYPES = ("role", "environment", "npc", "no")

THOUGHT = "thought"
MOVE = "move"
SPEECH = "speech"

_CLOSER = {"[": "]", "(": ")"}
_KIND = {"[": THOUGHT, "(": MOVE}


class PlanValidationError(Exception):
    """A planned action violates the action contract."""


@dataclass
class ParsedDetail:
    """Ordered detail segments; per-kind views derive from the ordered list."""

    segments: list[tuple[str, str]] = field(default_factory=list)

    @property
    def thoughts(self) -> list[str]:
        return [text for kind, text in self.segments if kind == THOUGHT]

    @property
    def moves(self) -> list[str]:
        return [text for kind, text in self.segments if kind == MOVE]

    @property
    def speech(self) -> list[str]:
        return [text for kind, text in self.segments if kind == SPEECH]

    def reassemble(self) -> str:
        parts = []
        for kind, text in self.segments:
            if kind == THOUGHT:
                parts.append(f"[{text}]")
            elif kind == MOVE:
                parts.append(f"({text})")
            else:
                parts.append(text)
        return " ".join(parts)

    def visible_text(self) -> str:
        """The detail as others perceive it: thoughts removed."""
        visible = ParsedDetail([(k, t) for k, t in self.segments if k != THOUGHT])
        return visible.reassemble()


def parse_action_detail(detail: str) -> ParsedDetail:
    """Split a detail into thought/move/speech segments, preserving order.

    An opening bracket with no closer is not a segment: the rest of the text
    from that point is treated as speech and a warning is logged.
    """
    segments: list[tuple[str, str]] = []
    buffer: list[str] = []

    def flush_speech() -> None:
        text = "".join(buffer).strip()
        if text:
            segments.append((SPEECH, text))
        buffer.clear()

    i = 0
    while i < len(detail):
        ch = detail[i]
        if ch in _CLOSER:
            end = detail.find(_CLOSER[ch], i + 1)
            if end == -1:
                logger.warning("unbalanced %r in action detail; treating remainder as speech", ch)
                buffer.append(detail[i:])
                break
            flush_speech()
            inner = detail[i + 1 : end].strip()
            if inner:
                segments.append((_KIND[ch], inner))
            i = end + 1
        else:
            buffer.append(ch)
            i += 1
    flush_speech()
    return ParsedDetail(segments)


def _collapse_ws(text: str) -> str:
    return re.sub(r"\s+", " ", text).strip()


def details_equivalent(a: str, b: str) -> bool:
    """Equality modulo whitespace, the reassembly identity used in tests."""
    return _collapse_ws(a) == _collapse_ws(b)


@dataclass
class PlannedAction:
    action: str
    interact_type: str
    target_role_codes: list[str] = field(default_factory=list)
    target_npc_name: str = ""
    visible_role_codes: list[str] = field(default_factory=list)
    detail: str = ""


def validate_planned_action(obj: dict, known_codes: list[str], actor: str) -> PlannedAction:
    """Check a structured plan reply against the action contract.

    The visible set is auto-expanded to include every target. Unknown codes in
    the visible list are dropped; an unknown target is a validation error.
    """
    interact_type = str(obj.get("interact_type", "")).strip().lower()
    if interact_type not in INTERACT_TYPES:
        raise PlanValidationError(f"interact_type must be one of {INTERACT_TYPES}, got {interact_type!r}")
    action = str(obj.get("action", "")).strip()
    if not action:
        raise PlanValidationError("action must be a non-empty verb")
    detail = str(obj.get("detail", "")).strip()
    if not detail:
        raise PlanValidationError("detail must be non-empty")

    raw_targets = obj.get("target_role_codes") or []
    if not isinstance(raw_targets, list):
        raise PlanValidationError("target_role_codes must be a list")
    targets: list[str] = []
    for code in (str(c).strip() for c in raw_targets):
        if code and code not in targets:
            targets.append(code)

    npc_name = str(obj.get("target_npc_name", "") or "").strip()

    if interact_type == "role":
        if not targets:
            raise PlanValidationError("interact_type 'role' needs at least one target role code")
        for code in targets:
            if code not in known_codes:
                raise PlanValidationError(f"unknown target role code {code!r}")
            if code == actor:
                raise PlanValidationError("a role cannot target itself")
    else:
        targets = []
    if interact_type == "npc":
        if not npc_name:
            raise PlanValidationError("interact_type 'npc' needs target_npc_name")
    else:
        npc_name = ""

    raw_visible = obj.get("visible_role_codes") or []
    if not isinstance(raw_visible, list):
        raise PlanValidationError("visible_role_codes must be a list")
    visible: list[str] = []
    for code in (str(c).strip() for c in raw_visible):
        if not code or code == actor or code in visible:
            continue
        if code not in known_codes:
            logger.warning("dropping unknown code %r from visible_role_codes", code)
            continue
        visible.append(code)
    for code in targets:  # visibility must cover every target
        if code not in visible:
            visible.append(code)

    return PlannedAction(
        action=action,
        interact_type=interact_type,
        target_role_codes=targets,
        target_npc_name=npc_name,
        visible_role_codes=visible,
        detail=detail,
    )


@dataclass
class ActionRecord:
    scene: int
    round: int
    actor: str
    action: str
    interact_type: str
    targets: list[str] = field(default_factory=list)
    npc: str = ""
    visible: list[str] = field(default_factory=list)
    detail: str = ""
    responses: list[list[str]] = field(default_factory=list)  # [responder, text] pairs
    env: str = ""

    def to_dict(self) -> dict:
        data: dict = {
            "scene": self.scene,
            "round": self.round,
            "actor": self.actor,
            "action": self.action,
            "interact_type": self.interact_type,
            "targets": list(self.targets),
        }
        if self.npc:
            data["npc"] = self.npc
        data["visible"] = list(self.visible)
        data["detail"] = self.detail
        data["responses"] = [list(pair) for pair in self.responses]
        if self.env:
            data["env"] = self.env
        return data

    @classmethod
    def from_dict(cls, data: dict) -> ActionRecord:
        return cls(
            scene=int(data["scene"]),
            round=int(data["round"]),
            actor=str(data["actor"]),
            action=str(data.get("action", "")),
            interact_type=str(data.get("interact_type", "no")),
            targets=[str(t) for t in data.get("targets", [])],
            npc=str(data.get("npc", "")),
            visible=[str(v) for v in data.get("visible", [])],
            detail=str(data.get("detail", "")),
            responses=[[str(a), str(b)] for a, b in data.get("responses", [])],
            env=str(data.get("env", "")),
        )


@dataclass
class PlanningContext:
    """Everything the orchestrator assembles for one planning call."""

    world_description: str
    other_roles_info: str
    history: str
    references: str
    knowledges: str
    directive: str
    known_codes: list[str] = field(default_factory=list)  # valid target codes


PLAN_KEYS = ["action", "interact_type", "target_role_codes", "visible_role_codes", "detail"]


class RoleAgent:
    """One simulated character: static profile plus evolving goal, status, place."""

    def __init__(
        self,
        profile: CharacterProfile,
        location: str,
        memory: MemoryStore,
        temperature: float = 0.7,
        request_seed: int | None = None,
        embed_references: bool = True,
    ) -> None:
        self.profile = profile
        self.location = location
        self.memory = memory
        self.temperature = temperature
        self.request_seed = request_seed
        self.goal = ""
        self.status = ""
        self.in_transit = False
        self._reference_vecs = (
            [(text, memory.embedder.embed(text)) for text in profile.references if text]
            if embed_references
            else []
        )

    @property
    def code(self) -> str:
        return self.profile.code

    def _request(self, prompt: str) -> ChatRequest:
        return ChatRequest.build(system="", user=prompt, temperature=self.temperature, seed=self.request_seed)

    def restore_reference_vecs(self, pairs: list[tuple[str, "object"]]) -> None:
        """Replace the excerpt index with checkpointed vectors (skips re-embedding)."""
        self._reference_vecs = list(pairs)

    def reference_vecs(self) -> list[tuple[str, "object"]]:
        return list(self._reference_vecs)

    def retrieve_references(self, query: str, k: int) -> list[str]:
        """Top-k source excerpts by cosine; earlier excerpts win ties."""
        if not self._reference_vecs or k <= 0:
            return []
        query_vec = self.memory.embedder.embed(query)
        order = rank_by_cosine(query_vec, [(vec, -i) for i, (_, vec) in enumerate(self._reference_vecs)], k)
        return [self._reference_vecs[i][0] for i in order]

    def initialize_attributes(self, gateway: Gateway, world_description: str, directive: str) -> None:
        prompt = templates.render(
            "goal_init",
            role_name=self.profile.name,
            profile=self.profile.profile,
            world_description=world_description,
            directive=directive or "Open the story naturally.",
        )
        obj = gateway.complete_structured(self._request(prompt), ["goal", "status"])
        self.goal = str(obj["goal"]).strip() or "Find a way forward."
        self.status = str(obj["status"]).strip() or "Present and attentive."

    def plan_action(self, gateway: Gateway, context: PlanningContext) -> PlannedAction:
        """One planning call; an invalid plan earns one re-ask, then degrades to 'no'."""
        prompt = templates.render(
            "role_plan",
            role_name=self.profile.name,
            nickname=self.profile.nickname,
            profile=self._profile_text(),
            goal=self.goal,
            status=self.status,
            world_description=context.world_description,
            other_roles_info=context.other_roles_info,
            history=context.history,
            references=context.references,
            knowledges=context.knowledges,
            directive=context.directive,
        )
        request = self._request(prompt)
        known = context.known_codes
        obj = gateway.complete_structured(request, PLAN_KEYS)
        try:
            return validate_planned_action(obj, known, self.code)
        except PlanValidationError as exc:
            retry = request.with_reask(
                json.dumps(obj, ensure_ascii=False),
                f"That plan is invalid: {exc}. Reply again with one corrected JSON object, same keys.",
            )
            try:
                obj2 = gateway.complete_structured(retry, PLAN_KEYS)
                return validate_planned_action(obj2, known, self.code)
            except (PlanValidationError, StructuredParseError) as exc2:
                logger.warning("plan for %s still invalid (%s); downgrading to interact_type 'no'", self.code, exc2)
                detail = str(obj.get("detail", "")).strip() or "(hesitates)"
                action = str(obj.get("action", "")).strip() or "wait"
                return PlannedAction(action=action, interact_type="no", detail=detail)

    def respond(
        self,
        gateway: Gateway,
        actor_name: str,
        incoming_detail: str,
        world_description: str,
        history: str,
        references: str,
        knowledges: str,
    ) -> str:
        prompt = templates.render(
            "role_respond",
            role_name=self.profile.name,
            nickname=self.profile.nickname,
            profile=self._profile_text(),
            goal=self.goal,
            status=self.status,
            world_description=world_description,
            history=history,
            references=references,
            knowledges=knowledges,
            actor_name=actor_name,
            incoming_detail=incoming_detail,
        )
        return gateway.complete_text(self._request(prompt))

    def update_dynamic_attributes(self, gateway: Gateway, scene_summary: str) -> bool:
        """Refresh goal and status after a scene; empty summaries skip the call."""
        if not scene_summary.strip():
            return False
        prompt = templates.render(
            "attributes_update",
            role_name=self.profile.name,
            goal=self.goal,
            status=self.status,
            scene_summary=scene_summary,
        )
        try:
            obj = gateway.complete_structured(self._request(prompt), ["goal", "status"])
        except StructuredParseError as exc:
            logger.warning("attribute update for %s failed (%s); keeping previous values", self.code, exc)
            return False
        goal = str(obj["goal"]).strip()
        status = str(obj["status"]).strip()
        if goal:
            self.goal = goal
        if status:
            self.status = status
        return True

    def decide_move(self, gateway: Gateway, reachable: list[tuple[str, str, int]], history: str) -> str:
        """Pick a destination id from the reachable list, or 'stay'.

        One re-ask on an unknown answer; a second unknown answer means stay.
        """
        if not reachable:
            return "stay"
        listing = "\n".join(f"- {loc_id} ({name}): {dist} scenes away" for loc_id, name, dist in reachable)
        prompt = templates.render(
            "move_decide",
            role_name=self.profile.name,
            goal=self.goal,
            status=self.status,
            location=self.location,
            history=history,
            reachable=listing,
        )
        request = self._request(prompt)
        valid = {loc_id for loc_id, _, _ in reachable}
        answer = gateway.complete_text(request).strip().strip(".").strip()
        if answer in valid or answer.lower() == "stay":
            return answer if answer in valid else "stay"
        retry = request.with_reask(
            answer,
            f"{answer!r} is not a listed place. Reply with one listed place id exactly, or stay.",
        )
        answer2 = gateway.complete_text(retry).strip().strip(".").strip()
        if answer2 in valid:
            return answer2
        if answer2.lower() != "stay":
            logger.warning("move choice %r for %s not recognized; staying", answer2, self.code)
        return "stay"

    def _profile_text(self) -> str:
        parts = [self.profile.profile]
        if self.profile.attributes:
            parts.append(f"Traits: {self.profile.attributes}")
        if self.profile.relationships:
            rels = "; ".join(f"{other}: {text}" for other, text in sorted(self.profile.relationships.items()))
            parts.append(f"Relationships: {rels}")
        return "\n".join(p for p in parts if p)
