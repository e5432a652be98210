"""Pairwise story evaluation and rater agreement.

Stories are compared metric by metric with forced A/B choices, presentation
order seeded per pair to wash out position bias. Win rates aggregate valid
verdicts; Cohen's kappa measures agreement against human labels.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass
from pathlib import Path

from . import templates
from .gateway import ChatRequest, Gateway

logger = logging.getLogger(__name__)

METRICS: dict[str, tuple[str, str]] = {
    "An": (
        "Anthropomorphism",
        "Which story's characters behave more like real people: natural reactions, "
        "believable emotion, no mechanical or assistant-like turns of phrase.",
    ),
    "CF": (
        "Character fidelity",
        "Which story keeps its characters truer to themselves: voice, values, "
        "habits, and relationships stay consistent and recognizable.",
    ),
    "IS": (
        "Immersion",
        "Which story pulls the reader deeper into its world: vivid, coherent "
        "scenes that sustain the fiction without breaking it.",
    ),
    "WQ": (
        "Writing quality",
        "Which story is better written: clarity, rhythm, imagery, and dialogue "
        "craft, independent of what happens in it.",
    ),
    "SQ": (
        "Storyline quality",
        "Which story realizes its intended plot better: events progress "
        "purposefully and land the arc they set up.",
    ),
    "Cr": (
        "Creativity",
        "Which story is more inventive: surprising yet fitting developments "
        "rather than stock turns.",
    ),
}

DEFAULT_METRICS_WITH_SCRIPT = ["An", "CF", "IS", "WQ", "SQ"]
DEFAULT_METRICS_WITHOUT_SCRIPT = ["An", "CF", "IS", "WQ", "Cr"]


class EvaluationError(Exception):
    """Evaluation input or configuration failures."""


@dataclass
class JudgeVerdict:
    pair_id: str
    metric: str
    winner: str  # "A" or "B" for the underlying stories; "" when invalid
    valid: bool
    order: str  # "AB" if story A was shown first, else "BA"
    model: str = ""

    def to_dict(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "metric": self.metric,
            "winner": self.winner,
            "valid": self.valid,
            "order": self.order,
            "model": self.model,
        }


def parse_choice(text: str) -> int | None:
    """Map a judge reply to presented position 1 or 2, or None if unclear."""
    normalized = text.strip().lower()
    if not normalized:
        return None
    head = normalized.split()[0].strip(".,:;!()\"'")
    if head == "a":
        return 1
    if head == "b":
        return 2
    has_a = "story a" in normalized or normalized == "a"
    has_b = "story b" in normalized or normalized == "b"
    if has_a and not has_b:
        return 1
    if has_b and not has_a:
        return 2
    if "first" in normalized and "second" not in normalized:
        return 1
    if "second" in normalized and "first" not in normalized:
        return 2
    return None


def judge_pair(
    gateway: Gateway,
    story_a: str,
    story_b: str,
    metric: str,
    pair_id: str,
    seed: int = 0,
    temperature: float = 0.0,
) -> JudgeVerdict:
    """One forced-choice comparison with seeded presentation order.

    An unparseable reply earns one re-ask; a second failure records the pair
    as invalid rather than guessing.
    """
    if metric not in METRICS:
        raise EvaluationError(f"unknown metric {metric!r} (known: {sorted(METRICS)})")
    if not story_a.strip() or not story_b.strip():
        raise EvaluationError("both stories must be non-empty")
    name, definition = METRICS[metric]
    rng = random.Random(f"{seed}|{pair_id}|{metric}")
    swapped = rng.random() < 0.5
    first, second = (story_b, story_a) if swapped else (story_a, story_b)
    order = "BA" if swapped else "AB"
    prompt = templates.render(
        "judge_pair",
        metric_name=name,
        metric_definition=definition,
        story_a=first,
        story_b=second,
    )
    request = ChatRequest.build(system="", user=prompt, temperature=temperature, seed=seed)
    completion = gateway.complete(request)
    position = parse_choice(completion.text)
    if position is None:
        retry = request.with_reask(completion.text, "Reply with the single letter A or B, nothing else.")
        completion = gateway.complete(retry)
        position = parse_choice(completion.text)
    if position is None:
        logger.warning("pair %s (%s): verdict unparseable twice; recording invalid", pair_id, metric)
        return JudgeVerdict(pair_id=pair_id, metric=metric, winner="", valid=False, order=order, model=completion.model)
    shown_first_is_a = not swapped
    winner = "A" if (position == 1) == shown_first_is_a else "B"
    return JudgeVerdict(pair_id=pair_id, metric=metric, winner=winner, valid=True, order=order, model=completion.model)


@dataclass
class WinRateReport:
    metrics: dict[str, dict]
    overall: dict
    notes: list[str]

    def to_dict(self) -> dict:
        return {"metrics": self.metrics, "overall": self.overall, "notes": self.notes}


def win_rate(verdicts: list[JudgeVerdict]) -> WinRateReport:
    """Win percentages per metric and overall; invalid pairs counted, not scored."""
    by_metric: dict[str, list[JudgeVerdict]] = {}
    for verdict in verdicts:
        by_metric.setdefault(verdict.metric, []).append(verdict)
    metrics: dict[str, dict] = {}
    notes: list[str] = []
    total_a = total_b = total_valid = total_invalid = 0
    for metric in by_metric:
        group = by_metric[metric]
        wins_a = sum(1 for v in group if v.valid and v.winner == "A")
        wins_b = sum(1 for v in group if v.valid and v.winner == "B")
        invalid = sum(1 for v in group if not v.valid)
        valid = wins_a + wins_b
        total_a += wins_a
        total_b += wins_b
        total_valid += valid
        total_invalid += invalid
        entry: dict = {"wins_a": wins_a, "wins_b": wins_b, "valid": valid, "invalid": invalid}
        if valid:
            entry["win_rate_a"] = 100.0 * wins_a / valid
            entry["win_rate_b"] = 100.0 * wins_b / valid
        else:
            notes.append(f"metric {metric}: no valid pairs, win rate omitted")
        metrics[metric] = entry
    overall: dict = {"wins_a": total_a, "wins_b": total_b, "valid": total_valid, "invalid": total_invalid}
    if total_valid:
        overall["win_rate_a"] = 100.0 * total_a / total_valid
        overall["win_rate_b"] = 100.0 * total_b / total_valid
    else:
        notes.append("overall: no valid pairs, win rate omitted")
    return WinRateReport(metrics=metrics, overall=overall, notes=notes)


def evaluate_stories(
    gateway: Gateway,
    story_a: str,
    story_b: str,
    metrics: list[str],
    seed: int = 0,
    trials: int = 1,
) -> tuple[WinRateReport, list[JudgeVerdict]]:
    """Judge two stories over the given metrics, `trials` comparisons each."""
    if trials <= 0:
        raise EvaluationError("trials must be positive")
    verdicts = []
    for trial in range(trials):
        for metric in metrics:
            pair_id = f"{metric}-t{trial}"
            verdicts.append(judge_pair(gateway, story_a, story_b, metric, pair_id, seed=seed))
    return win_rate(verdicts), verdicts


# ---------------------------------------------------------------- Cohen kappa


def cohen_kappa(a: list[str], b: list[str]) -> float:
    """Cohen's kappa between two raters' label lists.

    kappa = (p_o - p_e) / (1 - p_e), with p_e from the raters' marginals.
    Degenerate p_e = 1 yields 1.0 on perfect agreement, else 0.0, with a
    warning, since chance leaves no room for skill.
    """
    if len(a) != len(b):
        raise ValueError(f"label lists differ in length: {len(a)} vs {len(b)}")
    if not a:
        raise ValueError("label lists are empty")
    n = len(a)
    p_o = sum(1 for x, y in zip(a, b) if x == y) / n
    labels = set(a) | set(b)
    p_e = sum((a.count(label) / n) * (b.count(label) / n) for label in labels)
    if abs(1.0 - p_e) < 1e-12:
        logger.warning("chance agreement is 1.0; kappa degenerates")
        return 1.0 if abs(1.0 - p_o) < 1e-12 else 0.0
    return (p_o - p_e) / (1.0 - p_e)


def load_verdict_labels(path: str | Path) -> dict[tuple[str, str], str]:
    """JSONL {pair_id, metric, winner} to a (pair_id, metric) -> winner map."""
    labels: dict[tuple[str, str], str] = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as exc:
            raise EvaluationError(f"{path} line {line_no}: not valid JSON: {exc}")
        winner = str(data.get("winner", "")).strip()
        if winner not in ("A", "B"):
            continue  # invalid verdicts carry no label
        labels[(str(data["pair_id"]), str(data["metric"]))] = winner
    return labels


def kappa_between_files(model_path: str | Path, human_path: str | Path) -> dict[str, float]:
    """Per-metric and overall kappa for pairs labeled by both raters."""
    model = load_verdict_labels(model_path)
    human = load_verdict_labels(human_path)
    shared = sorted(set(model) & set(human))
    if not shared:
        raise EvaluationError("no (pair_id, metric) labeled by both raters")
    omitted = (set(model) | set(human)) - set(shared)
    if omitted:
        logger.warning("%d labels present on one side only were ignored", len(omitted))
    by_metric: dict[str, tuple[list[str], list[str]]] = {}
    all_a: list[str] = []
    all_b: list[str] = []
    for key in shared:
        _, metric = key
        pair = by_metric.setdefault(metric, ([], []))
        pair[0].append(model[key])
        pair[1].append(human[key])
        all_a.append(model[key])
        all_b.append(human[key])
    result = {metric: cohen_kappa(a, b) for metric, (a, b) in sorted(by_metric.items())}
    result["overall"] = cohen_kappa(all_a, all_b)
    return result
