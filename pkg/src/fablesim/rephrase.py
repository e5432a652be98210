"""Render simulation records into readable narrative prose.

Each scene with records becomes one prose passage via the gateway, written
scene by scene with a short tail of the story so far as context. Passages
stitch together with chapter separators; an optional polish pass smooths
only the transitions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from . import templates
from .engine import SceneRecord
from .gateway import ChatRequest, FixtureExhaustedError, FixtureKeyError, Gateway, GatewayError

logger = logging.getLogger(__name__)

CHAPTER_SEPARATOR = "\n\n* * *\n\n"
DEFAULT_TAIL_CHARS = 500
DEFAULT_EXPANSION_FACTOR = 3.0


@dataclass
class StyleConfig:
    person: str = "third"
    tense: str = "past"
    language: str = "English"
    polish: bool = False
    tail_chars: int = DEFAULT_TAIL_CHARS
    expansion_factor: float = DEFAULT_EXPANSION_FACTOR

    @classmethod
    def from_dict(cls, data: dict) -> StyleConfig:
        return cls(
            person=str(data.get("person", "third")),
            tense=str(data.get("tense", "past")),
            language=str(data.get("language", "English")),
            polish=bool(data.get("polish", False)),
            tail_chars=int(data.get("tail_chars", DEFAULT_TAIL_CHARS)),
            expansion_factor=float(data.get("expansion_factor", DEFAULT_EXPANSION_FACTOR)),
        )


@dataclass
class StoryDraft:
    scene_texts: list[str] = field(default_factory=list)
    story: str = ""
    style: StyleConfig = field(default_factory=StyleConfig)


def scene_log(scene: SceneRecord, names: dict[str, str] | None = None) -> str:
    """A scene's records as plain log lines, also the fallback transcript."""
    names = names or {}

    def label(code: str) -> str:
        return names.get(code, code)

    lines = []
    for record in scene.records:
        lines.append(f"{label(record.actor)}: {record.detail}")
        for responder, text in record.responses:
            lines.append(f"{label(responder)}: {text}")
        if record.env:
            speaker = record.npc if record.npc else "WORLD"
            lines.append(f"{speaker}: {record.env}")
    return "\n".join(lines)


def rephrase_scene(
    gateway: Gateway,
    scene: SceneRecord,
    prior_context: str,
    style: StyleConfig,
    names: dict[str, str] | None = None,
    temperature: float = 0.7,
    seed: int | None = None,
) -> str:
    """One scene to prose; settlement-only scenes yield nothing.

    A gateway failure falls back to the raw transcript so the story never
    loses a scene. Output beyond the expansion bound is kept but warned about.
    """
    if not scene.records:
        return ""
    log = scene_log(scene, names)
    prompt = templates.render(
        "rephrase_scene",
        person=style.person,
        tense=style.tense,
        language=style.language,
        prior_tail=prior_context[-style.tail_chars :] if prior_context else "(the story is just beginning)",
        scene_records=log,
    )
    request = ChatRequest.build(system="", user=prompt, temperature=temperature, seed=seed)
    try:
        prose = gateway.complete_text(request)
    except (FixtureExhaustedError, FixtureKeyError):
        raise
    except GatewayError as exc:
        logger.warning("rephrase failed for scene %d (%s); falling back to transcript", scene.scene, exc)
        return log
    if len(prose) > style.expansion_factor * max(len(log), 1):
        logger.warning(
            "scene %d prose is %.1fx the record text (bound %.1fx)",
            scene.scene,
            len(prose) / max(len(log), 1),
            style.expansion_factor,
        )
    return prose


def stitch_story(scene_texts: list[str], style: StyleConfig, gateway: Gateway | None = None) -> str:
    """Join scene passages with chapter separators.

    With polish enabled (and a gateway), each seam gains a short bridging
    line; disabled, the result is exactly the plain join.
    """
    texts = [t for t in scene_texts if t.strip()]
    if not texts:
        return ""
    if not style.polish or gateway is None:
        return CHAPTER_SEPARATOR.join(texts)
    parts = [texts[0]]
    for nxt in texts[1:]:
        prev = parts[-1]
        prompt = templates.render(
            "polish_transition",
            person=style.person,
            tense=style.tense,
            language=style.language,
            before_tail=prev[-style.tail_chars :],
            after_head=nxt[: style.tail_chars],
        )
        try:
            bridge = gateway.complete_text(ChatRequest.build(system="", user=prompt))
        except (FixtureExhaustedError, FixtureKeyError):
            raise
        except GatewayError as exc:
            logger.warning("transition polish failed (%s); keeping plain seam", exc)
            bridge = ""
        parts.append(f"{bridge}\n\n{nxt}" if bridge else nxt)
    return CHAPTER_SEPARATOR.join(parts)


def rephrase_record(
    gateway: Gateway,
    scenes: list[SceneRecord],
    style: StyleConfig,
    names: dict[str, str] | None = None,
    temperature: float = 0.7,
    seed: int | None = None,
) -> StoryDraft:
    """Whole record to a stitched story, carrying a rolling context tail."""
    draft = StoryDraft(style=style)
    story_so_far = ""
    for scene in scenes:
        text = rephrase_scene(gateway, scene, story_so_far, style, names, temperature, seed)
        if text:
            draft.scene_texts.append(text)
            story_so_far = (story_so_far + "\n\n" + text) if story_so_far else text
    draft.story = stitch_story(draft.scene_texts, style, gateway)
    return draft
