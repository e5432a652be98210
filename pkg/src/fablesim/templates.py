"""Versioned prompt templates with named ${placeholder} slots.

Templates live in the package's prompts/ directory, one file per version
(name_v1.txt). Rendering is strict: missing or surplus values are errors, so
call sites and templates cannot drift apart silently.
"""

from __future__ import annotations

import re
from importlib import resources

_REGISTRY: dict[str, str] = {
    "role_plan": "role_plan_v1.txt",
    "role_respond": "role_respond_v1.txt",
    "goal_init": "goal_init_v1.txt",
    "attributes_update": "attributes_update_v1.txt",
    "move_decide": "move_decide_v1.txt",
    "cast_select": "cast_select_v1.txt",
    "initiator_select": "initiator_select_v1.txt",
    "scene_judge": "scene_judge_v1.txt",
    "event_update": "event_update_v1.txt",
    "script_split": "script_split_v1.txt",
    "script_step": "script_step_v1.txt",
    "environment_response": "environment_response_v1.txt",
    "npc_response": "npc_response_v1.txt",
    "summarize_memory": "summarize_memory_v1.txt",
    "extract_facts": "extract_facts_v1.txt",
    "filter_fact": "filter_fact_v1.txt",
    "merge_cluster": "merge_cluster_v1.txt",
    "character_fold": "character_fold_v1.txt",
    "rephrase_scene": "rephrase_scene_v1.txt",
    "polish_transition": "polish_transition_v1.txt",
    "judge_pair": "judge_pair_v1.txt",
}

_IDENTIFIER = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}|\$([A-Za-z_][A-Za-z0-9_]*)")


class TemplateError(Exception):
    """Unknown template, or placeholder/value mismatch."""


def template_names() -> list[str]:
    return sorted(_REGISTRY)


def _load(name: str) -> str:
    if name not in _REGISTRY:
        raise TemplateError(f"unknown template {name!r}")
    return resources.files("fablesim.prompts").joinpath(_REGISTRY[name]).read_text(encoding="utf-8")


def placeholders(name: str) -> set[str]:
    """Placeholder identifiers a template requires."""
    found = set()
    for match in _IDENTIFIER.finditer(_load(name)):
        found.add(match.group(1) or match.group(2))
    return found


def render(template: str, **values: str) -> str:
    # positional-only on purpose: templates may use any placeholder name, "template" aside
    required = placeholders(template)
    given = set(values)
    if required - given:
        raise TemplateError(f"template {template!r} missing values for: {sorted(required - given)}")
    if given - required:
        raise TemplateError(f"template {template!r} got surplus values: {sorted(given - required)}")
    text = _load(template)

    def _sub(match: re.Match) -> str:
        return str(values[match.group(1) or match.group(2)])

    return _IDENTIFIER.sub(_sub, text)
