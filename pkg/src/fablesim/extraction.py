"""Worldview and character extraction from book text.

Pipeline: chunk the book along chapter and sentence boundaries, pull raw
facts per chunk, filter out character actions and common sense, cluster
duplicates (exact term first, then single-linkage cosine), and consolidate
each cluster into one worldview setting with merged sources. Character
profiles fold over the same chunks.
"""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import templates
from .gateway import ChatRequest, Gateway, StructuredParseError
from .memory import Embedder
from .world import CharacterProfile, WorldviewSetting

logger = logging.getLogger(__name__)

DEFAULT_CHUNK_SIZE = 2000
DEFAULT_CHUNK_OVERLAP = 200
DEFAULT_CLUSTER_THRESHOLD = 0.85
DEFAULT_CHAPTER_PATTERN = r"(?mi)^\s*chapter\s+\S+.*$"

ACTION_NATURE = "character action"


class ExtractionError(Exception):
    """Extraction pipeline failures."""


@dataclass
class Chunk:
    book: str
    chapter: str
    index: int  # reading order across the whole book
    text: str
    overlap: int = 0  # chars shared with the previous chunk of the same chapter


@dataclass
class RawFact:
    term: str
    nature: str
    detail: str
    source: str  # chapter id


@dataclass
class ExtractionStats:
    book: str
    settings: int
    chapters: int
    words: int

    def to_dict(self) -> dict:
        return {"book": self.book, "settings": self.settings, "chapters": self.chapters, "words": self.words}


# ------------------------------------------------------------------- chunking


def split_chapters(book_text: str, chapter_pattern: str = DEFAULT_CHAPTER_PATTERN) -> list[str]:
    """Chapter bodies in reading order; heading lines are dropped.

    Without any matching heading the whole book is one chapter.
    """
    matches = list(re.finditer(chapter_pattern, book_text))
    if not matches:
        return [book_text] if book_text.strip() else []
    chapters = []
    preamble = book_text[: matches[0].start()]
    if preamble.strip():
        chapters.append(preamble)
    for i, match in enumerate(matches):
        start = match.end()
        end = matches[i + 1].start() if i + 1 < len(matches) else len(book_text)
        body = book_text[start:end]
        if body.strip():
            chapters.append(body)
    return chapters


_SENTENCE_END = re.compile(r"[.!?。！？][\"'”’)\]]*\s+")


def _split_sentences(text: str) -> list[str]:
    """Lossless sentence pieces: concatenating them reproduces the text exactly."""
    pieces = []
    prev = 0
    for match in _SENTENCE_END.finditer(text):
        pieces.append(text[prev : match.end()])
        prev = match.end()
    if prev < len(text):
        pieces.append(text[prev:])
    return pieces


def chunk_text(
    book_text: str,
    book_id: str = "book",
    target_size: int = DEFAULT_CHUNK_SIZE,
    overlap: int = DEFAULT_CHUNK_OVERLAP,
    chapter_pattern: str = DEFAULT_CHAPTER_PATTERN,
) -> list[Chunk]:
    """Cut a book into chapter-tagged chunks of at most target_size chars.

    Chunks split at sentence boundaries (oversized sentences split hard) and
    carry `overlap` trailing chars of their predecessor, whole sentences
    only. Dropping each chunk's overlap prefix and concatenating reproduces
    the chapter exactly.
    """
    if target_size <= 0 or overlap < 0 or overlap >= target_size:
        raise ExtractionError("need target_size > 0 and 0 <= overlap < target_size")
    chunks: list[Chunk] = []
    index = 0
    for chapter_no, chapter in enumerate(split_chapters(book_text, chapter_pattern), start=1):
        pieces: list[str] = []
        for piece in _split_sentences(chapter):
            while len(piece) > target_size:  # a sentence too long to split politely
                pieces.append(piece[:target_size])
                piece = piece[target_size:]
            if piece:
                pieces.append(piece)

        current: list[str] = []
        carried = 0  # overlap chars at the head of `current`
        for piece in pieces:
            if current and sum(map(len, current)) + len(piece) > target_size:
                chunks.append(
                    Chunk(book=book_id, chapter=str(chapter_no), index=index, text="".join(current), overlap=carried)
                )
                index += 1
                tail: list[str] = []
                budget = min(overlap, target_size - len(piece))
                for prev_piece in reversed(current):
                    if sum(map(len, tail)) + len(prev_piece) > budget:
                        break
                    tail.insert(0, prev_piece)
                carried = sum(map(len, tail))
                current = tail
            current.append(piece)
        if current:
            chunks.append(
                Chunk(book=book_id, chapter=str(chapter_no), index=index, text="".join(current), overlap=carried)
            )
            index += 1
    return chunks


def reassemble_chapter(chunks: list[Chunk]) -> str:
    """Invert chunking for one chapter's chunks (in index order)."""
    out = []
    for i, chunk in enumerate(chunks):
        out.append(chunk.text if i == 0 else chunk.text[chunk.overlap :])
    return "".join(out)


# ------------------------------------------------------------------ extraction


def extract_facts(gateway: Gateway, chunk: Chunk, temperature: float = 0.3, seed: int | None = None) -> list[RawFact]:
    """Raw worldview facts from one chunk; a bad reply yields none, logged."""
    prompt = templates.render("extract_facts", chunk_text=chunk.text)
    request = ChatRequest.build(system="", user=prompt, temperature=temperature, seed=seed)
    try:
        obj = gateway.complete_structured(request, ["facts"])
    except StructuredParseError as exc:
        logger.warning("fact extraction failed for chunk %d (%s); skipping", chunk.index, exc)
        return []
    facts = []
    raw = obj.get("facts")
    if not isinstance(raw, list):
        logger.warning("fact extraction for chunk %d returned no list; skipping", chunk.index)
        return []
    for entry in raw:
        if not isinstance(entry, dict):
            continue
        detail = str(entry.get("detail", "")).strip()
        if not detail:
            continue
        facts.append(
            RawFact(
                term=str(entry.get("term", "")).strip(),
                nature=str(entry.get("nature", "")).strip(),
                detail=detail,
                source=chunk.chapter,
            )
        )
    return facts


def filter_facts(gateway: Gateway, facts: list[RawFact], temperature: float = 0.3, seed: int | None = None) -> list[RawFact]:
    """Drop character actions outright, then let the gateway judge the rest.

    A classifier failure keeps the fact: losing lore is worse than keeping a
    dull entry.
    """
    kept = []
    for fact in facts:
        if fact.nature.strip().casefold() == ACTION_NATURE:
            continue
        prompt = templates.render("filter_fact", term=fact.term, nature=fact.nature, detail=fact.detail)
        request = ChatRequest.build(system="", user=prompt, temperature=temperature, seed=seed)
        try:
            obj = gateway.complete_structured(request, ["keep"])
            if str(obj["keep"]).strip().lower() in ("no", "false", "drop"):
                continue
        except StructuredParseError as exc:
            logger.warning("keep/drop call failed for %r (%s); keeping", fact.term or fact.detail[:40], exc)
        kept.append(fact)
    return kept


# ------------------------------------------------------------------ clustering


def fact_embedding_text(fact: RawFact) -> str:
    return f"{fact.term} {fact.detail}".strip()


def cluster_settings(
    facts: list[RawFact],
    embedder: Embedder,
    threshold: float = DEFAULT_CLUSTER_THRESHOLD,
) -> list[list[RawFact]]:
    """Partition facts by exact (case-folded) term, then single-linkage within.

    Two facts land in one cluster when a chain of pairs at cosine >= threshold
    connects them inside their term partition; nameless facts form their own
    partition. Cluster and member order follow first appearance.
    """
    partitions: dict[str, list[int]] = {}
    for i, fact in enumerate(facts):
        partitions.setdefault(fact.term.strip().casefold(), []).append(i)

    parent = list(range(len(facts)))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(a: int, b: int) -> None:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    for members in partitions.values():
        if len(members) < 2:
            continue
        vecs = {i: embedder.embed(fact_embedding_text(facts[i])) for i in members}
        for a_pos, a in enumerate(members):
            for b in members[a_pos + 1 :]:
                if float(np.dot(vecs[a], vecs[b])) >= threshold:
                    union(a, b)

    clusters: dict[int, list[RawFact]] = {}
    order: list[int] = []
    for i, fact in enumerate(facts):
        root = find(i)
        if root not in clusters:
            clusters[root] = []
            order.append(root)
        clusters[root].append(fact)
    return [clusters[root] for root in order]


def consolidate_cluster(
    gateway: Gateway,
    cluster: list[RawFact],
    temperature: float = 0.3,
    seed: int | None = None,
) -> WorldviewSetting:
    """Merge one cluster into a single setting; sources are the sorted union."""
    if not cluster:
        raise ExtractionError("cannot consolidate an empty cluster")
    sources = sorted({fact.source for fact in cluster})
    term = next((fact.term for fact in cluster if fact.term.strip()), "")
    nature = next((fact.nature for fact in cluster if fact.nature.strip()), "")
    if len(cluster) == 1:
        fact = cluster[0]
        return WorldviewSetting(term=fact.term, nature=fact.nature, detail=fact.detail, source=sources)

    details = "\n".join(f"- {fact.detail}" for fact in cluster)
    prompt = templates.render("merge_cluster", term=term or "(none)", details=details)
    request = ChatRequest.build(system="", user=prompt, temperature=temperature, seed=seed)
    try:
        obj = gateway.complete_structured(request, ["term", "detail"])
        detail = str(obj["detail"]).strip()
        merged_term = term if term else str(obj["term"]).strip()
        if not detail:
            raise StructuredParseError("merged detail is empty")
    except StructuredParseError as exc:
        logger.warning("merge failed for %r (%s); keeping longest member", term or "(unnamed)", exc)
        detail = max((fact.detail for fact in cluster), key=len)
        merged_term = term
    return WorldviewSetting(term=merged_term, nature=nature, detail=detail, source=sources)


# -------------------------------------------------------------- full pipelines


def extract_settings(
    gateway: Gateway,
    embedder: Embedder,
    book_text: str,
    book_id: str = "book",
    target_size: int = DEFAULT_CHUNK_SIZE,
    overlap: int = DEFAULT_CHUNK_OVERLAP,
    chapter_pattern: str = DEFAULT_CHAPTER_PATTERN,
    threshold: float = DEFAULT_CLUSTER_THRESHOLD,
    max_workers: int = 1,
    temperature: float = 0.3,
    seed: int | None = None,
) -> tuple[list[WorldviewSetting], ExtractionStats]:
    """Book text to consolidated worldview settings plus corpus stats."""
    chunks = chunk_text(book_text, book_id, target_size, overlap, chapter_pattern)
    if max_workers > 1:
        # Fan out per chunk; results re-merge in reading order.
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            per_chunk = list(pool.map(lambda c: extract_facts(gateway, c, temperature, seed), chunks))
    else:
        per_chunk = [extract_facts(gateway, c, temperature, seed) for c in chunks]
    facts = [fact for chunk_facts in per_chunk for fact in chunk_facts]
    kept = filter_facts(gateway, facts, temperature, seed)
    clusters = cluster_settings(kept, embedder, threshold)
    settings = [consolidate_cluster(gateway, cluster, temperature, seed) for cluster in clusters]
    stats = ExtractionStats(
        book=book_id,
        settings=len(settings),
        chapters=len({c.chapter for c in chunks}),
        words=len(book_text.split()),
    )
    return settings, stats


def extract_character_profile(
    gateway: Gateway,
    book_text: str,
    name: str,
    code: str = "",
    nickname: str = "",
    book_id: str = "book",
    target_size: int = DEFAULT_CHUNK_SIZE,
    overlap: int = DEFAULT_CHUNK_OVERLAP,
    chapter_pattern: str = DEFAULT_CHAPTER_PATTERN,
    temperature: float = 0.3,
    seed: int | None = None,
) -> CharacterProfile:
    """Fold a character sheet over the book's chunks.

    Each step may revise the sheet, add relationships, and collect verbatim
    excerpts; a failed step is skipped and the fold continues.
    """
    if not name.strip():
        raise ExtractionError("character extraction needs a name")
    profile_text = f"(nothing known about {name} yet)"
    relationships: dict[str, str] = {}
    excerpts: list[str] = []
    for chunk in chunk_text(book_text, book_id, target_size, overlap, chapter_pattern):
        prompt = templates.render("character_fold", name=name, current_profile=profile_text, chunk_text=chunk.text)
        request = ChatRequest.build(system="", user=prompt, temperature=temperature, seed=seed)
        try:
            obj = gateway.complete_structured(request, ["profile", "relationships", "excerpts"])
        except StructuredParseError as exc:
            logger.warning("profile step failed on chunk %d (%s); skipping", chunk.index, exc)
            continue
        revised = str(obj["profile"]).strip()
        if revised and revised.casefold() != "no change":
            profile_text = revised
        rels = obj.get("relationships")
        if isinstance(rels, dict):
            for other, text in rels.items():
                if str(text).strip():
                    relationships[str(other)] = str(text).strip()
        quotes = obj.get("excerpts")
        if isinstance(quotes, list):
            for quote in quotes:
                text = str(quote).strip()
                if text and text not in excerpts:
                    excerpts.append(text)
    return CharacterProfile(
        code=code or f"{name}-en",
        name=name,
        nickname=nickname or name,
        profile=profile_text,
        references=excerpts,
        relationships=relationships,
    )


# ------------------------------------------------------------------- presets


def build_preset(
    overview: str,
    map_data: dict,
    profiles: list[CharacterProfile],
    settings_ref: str,
    starts: dict[str, str] | None = None,
    script: str = "",
    initial_event: str = "",
) -> dict:
    """Assemble a world config dict from extraction outputs and a map.

    map_data needs "locations" and "edges" in world-config form. Roles start
    at their entry in `starts`, defaulting to the first listed location.
    """
    locations = map_data.get("locations", [])
    if not locations:
        raise ExtractionError("map data needs at least one location")
    location_ids = {str(entry["id"]) for entry in locations}
    default_start = str(locations[0]["id"])
    starts = starts or {}
    roles = []
    for profile in profiles:
        start = starts.get(profile.code, default_start)
        if start not in location_ids:
            raise ExtractionError(f"start location {start!r} for {profile.code!r} is not on the map")
        entry = profile.to_dict()
        entry["start_location"] = start
        roles.append(entry)
    if not roles:
        raise ExtractionError("a preset needs at least one role")
    preset = {
        "overview": overview,
        "locations": locations,
        "edges": map_data.get("edges", []),
        "roles": roles,
        "settings": settings_ref,
    }
    if script:
        preset["script"] = script
    if initial_event:
        preset["initial_event"] = initial_event
    return preset
