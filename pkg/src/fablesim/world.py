"""World model: locations, weighted map, worldview settings, profiles, travel.

The map is an undirected graph with positive integer edge weights measured in
scene units: a traveling role spends one weight unit per scene settlement and
is invisible to casting until arrival.
"""

from __future__ import annotations

import heapq
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

logger = logging.getLogger(__name__)


class WorldError(Exception):
    """Base class for world model failures."""


class WorldConfigError(WorldError):
    """A world or settings file is missing, malformed, or inconsistent."""


class UnknownLocationError(WorldError):
    """A location id is not part of the map."""


class NoPathError(WorldError):
    """Two locations lie in different map components."""


class TravelError(WorldError):
    """An invalid travel request (same place, or already underway)."""


@dataclass
class Location:
    id: str
    name: str
    description: str
    details: str = ""


@dataclass
class WorldviewSetting:
    """One extracted piece of worldview lore."""

    term: str
    nature: str
    detail: str
    source: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "term": self.term,
            "nature": self.nature,
            "detail": self.detail,
            "source": list(self.source),
        }

    @classmethod
    def from_dict(cls, data: dict) -> WorldviewSetting:
        return cls(
            term=str(data.get("term", "")),
            nature=str(data.get("nature", "")),
            detail=str(data.get("detail", "")),
            source=[str(s) for s in data.get("source", [])],
        )


@dataclass
class CharacterProfile:
    code: str
    name: str
    nickname: str
    profile: str
    attributes: str = ""
    references: list[str] = field(default_factory=list)
    relationships: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "code": self.code,
            "name": self.name,
            "nickname": self.nickname,
            "profile": self.profile,
            "attributes": self.attributes,
            "references": list(self.references),
            "relationships": dict(self.relationships),
        }

    @classmethod
    def from_dict(cls, data: dict) -> CharacterProfile:
        return cls(
            code=str(data["code"]),
            name=str(data.get("name", data["code"])),
            nickname=str(data.get("nickname", data.get("name", data["code"]))),
            profile=str(data.get("profile", "")),
            attributes=str(data.get("attributes", "")),
            references=[str(r) for r in data.get("references", [])],
            relationships={str(k): str(v) for k, v in data.get("relationships", {}).items()},
        )


class MapGraph:
    """Undirected location graph with positive integer weights."""

    def __init__(self) -> None:
        self._adj: dict[str, dict[str, int]] = {}

    def add_node(self, node: str) -> None:
        self._adj.setdefault(node, {})

    def add_edge(self, a: str, b: str, weight: int) -> None:
        if not isinstance(weight, int) or isinstance(weight, bool) or weight <= 0:
            raise WorldConfigError(f"edge {a!r}-{b!r} weight must be a positive integer, got {weight!r}")
        if a == b:
            raise WorldConfigError(f"self-loop on {a!r} is not allowed")
        self.add_node(a)
        self.add_node(b)
        self._adj[a][b] = weight
        self._adj[b][a] = weight

    def nodes(self) -> list[str]:
        return sorted(self._adj)

    def neighbors(self, node: str) -> dict[str, int]:
        if node not in self._adj:
            raise UnknownLocationError(f"unknown location {node!r}")
        return dict(self._adj[node])

    def has_node(self, node: str) -> bool:
        return node in self._adj

    def to_edge_list(self) -> list[dict]:
        seen: set[tuple[str, str]] = set()
        edges = []
        for a in sorted(self._adj):
            for b, w in sorted(self._adj[a].items()):
                key = (min(a, b), max(a, b))
                if key in seen:
                    continue
                seen.add(key)
                edges.append({"a": key[0], "b": key[1], "weight": w})
        return edges


def shortest_path(graph: MapGraph, src: str, dst: str) -> tuple[list[str], int]:
    """Minimal-weight path from src to dst.

    Ties are broken by the lexicographically smallest node-id sequence, so the
    result is stable across runs. Raises NoPathError for separate components.
    """
    for node in (src, dst):
        if not graph.has_node(node):
            raise UnknownLocationError(f"unknown location {node!r}")
    if src == dst:
        return [src], 0
    # Heap priority (distance, path) finalizes each node on its smallest
    # (distance, lexicographic path) pair; valid because weights are >= 1.
    heap: list[tuple[int, tuple[str, ...]]] = [(0, (src,))]
    done: set[str] = set()
    while heap:
        dist, path = heapq.heappop(heap)
        node = path[-1]
        if node in done:
            continue
        done.add(node)
        if node == dst:
            return list(path), dist
        for nxt, weight in graph.neighbors(node).items():
            if nxt not in done:
                heapq.heappush(heap, (dist + weight, path + (nxt,)))
    raise NoPathError(f"no path from {src!r} to {dst!r}")


@dataclass
class TravelPlan:
    role_code: str
    destination: str
    path: list[str]
    remaining: int


@dataclass
class Event:
    """A world event injected into scenes until resolved."""

    description: str
    active: bool = True

    def to_dict(self) -> dict:
        return {"description": self.description, "active": self.active}

    @classmethod
    def from_dict(cls, data: dict) -> Event:
        return cls(description=str(data.get("description", "")), active=bool(data.get("active", True)))


@dataclass
class WorldState:
    overview: str
    map: MapGraph
    locations: dict[str, Location]
    settings: list[WorldviewSetting]
    profiles: dict[str, CharacterProfile]
    role_positions: dict[str, str]
    current_event: Event | None = None
    scene_index: int = 0
    script: str = ""

    def location_of(self, code: str) -> Location:
        if code not in self.role_positions:
            raise WorldError(f"unknown role code {code!r}")
        return self.locations[self.role_positions[code]]


def load_settings_file(path: str | Path) -> list[WorldviewSetting]:
    """Load a worldview settings file: a JSON array of term/nature/detail/source records."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise WorldConfigError(f"settings file not found: {path}")
    except json.JSONDecodeError as exc:
        raise WorldConfigError(f"settings file {path} is not valid JSON: {exc}")
    if not isinstance(data, list):
        raise WorldConfigError(f"settings file {path} must hold a JSON array")
    return [WorldviewSetting.from_dict(entry) for entry in data]


def save_settings_file(settings: list[WorldviewSetting], path: str | Path) -> None:
    payload = [s.to_dict() for s in settings]
    Path(path).write_text(json.dumps(payload, ensure_ascii=False, indent=2) + "\n", encoding="utf-8")


def load_world(path: str | Path) -> WorldState:
    """Load a world config file into a validated WorldState.

    Config keys: overview, locations, edges, roles, settings (path to a
    settings file, resolved relative to the config), optional script,
    optional initial_event.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise WorldConfigError(f"world file not found: {path}")
    except json.JSONDecodeError as exc:
        raise WorldConfigError(f"world file {path} is not valid JSON: {exc}")
    if not isinstance(data, dict):
        raise WorldConfigError(f"world file {path} must hold a JSON object")

    overview = str(data.get("overview", ""))

    locations: dict[str, Location] = {}
    for entry in data.get("locations", []):
        loc = Location(
            id=str(entry["id"]),
            name=str(entry.get("name", entry["id"])),
            description=str(entry.get("description", "")),
            details=str(entry.get("details", "")),
        )
        if loc.id in locations:
            raise WorldConfigError(f"duplicate location id {loc.id!r}")
        locations[loc.id] = loc
    if not locations:
        raise WorldConfigError("world config declares no locations")

    graph = MapGraph()
    for loc_id in locations:
        graph.add_node(loc_id)
    for entry in data.get("edges", []):
        a, b = str(entry["a"]), str(entry["b"])
        for node in (a, b):
            if node not in locations:
                raise WorldConfigError(f"edge references unknown location {node!r}")
        weight = entry["weight"]
        graph.add_edge(a, b, weight)

    profiles: dict[str, CharacterProfile] = {}
    positions: dict[str, str] = {}
    for entry in data.get("roles", []):
        prof = CharacterProfile.from_dict(entry)
        if prof.code in profiles:
            raise WorldConfigError(f"duplicate role code {prof.code!r}")
        start = str(entry.get("start_location", ""))
        if start not in locations:
            raise WorldConfigError(f"role {prof.code!r} starts at unknown location {start!r}")
        profiles[prof.code] = prof
        positions[prof.code] = start
    if not profiles:
        raise WorldConfigError("world config declares no roles")

    settings: list[WorldviewSetting] = []
    settings_ref = data.get("settings")
    if settings_ref:
        settings_path = Path(settings_ref)
        if not settings_path.is_absolute():
            settings_path = path.parent / settings_path
        settings = load_settings_file(settings_path)

    event = None
    initial_event = data.get("initial_event")
    if initial_event:
        event = Event(description=str(initial_event))

    return WorldState(
        overview=overview,
        map=graph,
        locations=locations,
        settings=settings,
        profiles=profiles,
        role_positions=positions,
        current_event=event,
        script=str(data.get("script", "")),
    )


def begin_travel(state: WorldState, plans: dict[str, TravelPlan], code: str, destination: str) -> TravelPlan:
    """Start a journey; the role stays invisible to casting until arrival."""
    if code not in state.role_positions:
        raise WorldError(f"unknown role code {code!r}")
    if code in plans:
        raise TravelError(f"role {code!r} is already traveling")
    origin = state.role_positions[code]
    if destination == origin:
        raise TravelError(f"role {code!r} is already at {destination!r}")
    path, dist = shortest_path(state.map, origin, destination)
    plan = TravelPlan(role_code=code, destination=destination, path=path, remaining=dist)
    plans[code] = plan
    return plan


def settle_travel(state: WorldState, plans: dict[str, TravelPlan]) -> list[str]:
    """Advance every journey by one scene unit; returns codes that arrived."""
    arrivals: list[str] = []
    for code in list(plans):
        plan = plans[code]
        plan.remaining -= 1
        if plan.remaining <= 0:
            state.role_positions[code] = plan.destination
            del plans[code]
            arrivals.append(code)
    return arrivals
