"""Command-line interface: simulate, extract, build-preset, rephrase, evaluate, kappa."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from . import engine as engine_mod
from . import evaluation as evaluation_mod
from . import extraction as extraction_mod
from . import rephrase as rephrase_mod
from .gateway import Gateway, build_provider, load_provider_config
from .memory import build_embedder
from .world import CharacterProfile, load_world, save_settings_file

logger = logging.getLogger(__name__)


def _load_embedder_config(path: str | None) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _gateway(provider_path: str, transcript: Path | None = None) -> Gateway:
    config = load_provider_config(provider_path)
    return Gateway(build_provider(config), transcript_path=transcript)


@click.group()
@click.option("--verbose", is_flag=True, help="Log at INFO level.")
def main(verbose: bool) -> None:
    """Simulate fictional worlds, extract them from books, and evaluate the stories."""
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.command()
@click.option("--world", "world_path", type=click.Path(exists=True, dir_okay=False), help="World config JSON.")
@click.option("--mode", type=click.Choice(["free", "script"]), default="free", show_default=True)
@click.option("--scenes", type=int, default=3, show_default=True, help="Target scene count.")
@click.option("--max-rounds", type=int, default=6, show_default=True, help="Round cap per scene.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--provider", "provider_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--resume", "resume_path", type=click.Path(exists=True, dir_okay=False), help="Checkpoint to continue.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--event-stimulation", is_flag=True, help="Let the director run a background event (free mode).")
@click.option("--embedder", "embedder_path", type=click.Path(exists=True, dir_okay=False), help="Embedder config JSON.")
def simulate(
    world_path: str | None,
    mode: str,
    scenes: int,
    max_rounds: int,
    seed: int,
    provider_path: str,
    resume_path: str | None,
    out_dir: str,
    event_stimulation: bool,
    embedder_path: str | None,
) -> None:
    """Run scenes and write record.jsonl, transcript.jsonl, checkpoint.bin."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    transcript = out / "transcript.jsonl"
    transcript.unlink(missing_ok=True)
    provider_config = load_provider_config(provider_path)

    if resume_path:
        if world_path:
            click.echo("note: --world is ignored when resuming from a checkpoint", err=True)
        engine = engine_mod.restore(resume_path, provider=provider_config, transcript_path=transcript)
        engine.config.scenes = scenes
    else:
        if not world_path:
            raise click.UsageError("--world is required unless --resume is given")
        config = engine_mod.SimulationConfig(
            mode=mode,
            scenes=scenes,
            max_rounds=max_rounds,
            seed=seed,
            event_stimulation=event_stimulation,
            provider=provider_config,
            embedder=_load_embedder_config(embedder_path),
        )
        engine = engine_mod.initialize(world_path, config, transcript_path=transcript)

    engine.run(scenes)
    engine_mod.write_record(engine.scene_records, out / "record.jsonl")
    engine.checkpoint(out / "checkpoint.bin")
    click.echo(f"{len(engine.scene_records)} scenes -> {out / 'record.jsonl'}")
    if engine.finished:
        click.echo("script complete: the run ended at its final act")
    if engine.aborted:
        click.echo(f"run aborted: {engine.aborted}", err=True)
        sys.exit(1)


@main.group()
def extract() -> None:
    """Extraction from book text."""


@extract.command("settings")
@click.option("--book", "book_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--provider", "provider_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--book-id", default="", help="Corpus label; defaults to the book file stem.")
@click.option("--chunk-size", type=int, default=extraction_mod.DEFAULT_CHUNK_SIZE, show_default=True)
@click.option("--overlap", type=int, default=extraction_mod.DEFAULT_CHUNK_OVERLAP, show_default=True)
@click.option("--threshold", type=float, default=extraction_mod.DEFAULT_CLUSTER_THRESHOLD, show_default=True)
@click.option("--workers", type=int, default=1, show_default=True, help="Concurrent chunk extraction.")
@click.option("--seed", type=int, default=None)
@click.option("--embedder", "embedder_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--report-dir", type=click.Path(file_okay=False), help="Also write stats CSV and figure here.")
def extract_settings_cmd(
    book_path: str,
    out_path: str,
    provider_path: str,
    book_id: str,
    chunk_size: int,
    overlap: int,
    threshold: float,
    workers: int,
    seed: int | None,
    embedder_path: str | None,
    report_dir: str | None,
) -> None:
    """Extract consolidated worldview settings from a book."""
    book_text = Path(book_path).read_text(encoding="utf-8")
    gateway = _gateway(provider_path)
    embedder = build_embedder(_load_embedder_config(embedder_path))
    settings, stats = extraction_mod.extract_settings(
        gateway,
        embedder,
        book_text,
        book_id=book_id or Path(book_path).stem,
        target_size=chunk_size,
        overlap=overlap,
        threshold=threshold,
        max_workers=workers,
        seed=seed,
    )
    save_settings_file(settings, out_path)
    click.echo(f"{stats.settings} settings, {stats.chapters} chapters, {stats.words} words -> {out_path}")
    if report_dir:
        from .report import write_extraction_report

        csv_path, fig_path = write_extraction_report(stats, settings, report_dir)
        click.echo(f"report -> {csv_path}, {fig_path}")


@extract.command("character")
@click.option("--book", "book_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--name", required=True, help="Character name as it appears in the text.")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--provider", "provider_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--code", default="", help="Role code; defaults to <name>-en.")
@click.option("--nickname", default="")
@click.option("--chunk-size", type=int, default=extraction_mod.DEFAULT_CHUNK_SIZE, show_default=True)
@click.option("--overlap", type=int, default=extraction_mod.DEFAULT_CHUNK_OVERLAP, show_default=True)
@click.option("--seed", type=int, default=None)
def extract_character_cmd(
    book_path: str,
    name: str,
    out_path: str,
    provider_path: str,
    code: str,
    nickname: str,
    chunk_size: int,
    overlap: int,
    seed: int | None,
) -> None:
    """Fold a character profile out of a book."""
    book_text = Path(book_path).read_text(encoding="utf-8")
    gateway = _gateway(provider_path)
    profile = extraction_mod.extract_character_profile(
        gateway,
        book_text,
        name=name,
        code=code,
        nickname=nickname,
        target_size=chunk_size,
        overlap=overlap,
        seed=seed,
    )
    Path(out_path).write_text(json.dumps(profile.to_dict(), ensure_ascii=False, indent=2) + "\n", encoding="utf-8")
    click.echo(f"profile for {name} ({len(profile.references)} excerpts) -> {out_path}")


@main.command("build-preset")
@click.option("--overview", "overview_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--map", "map_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--profile", "profile_paths", multiple=True, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--settings", "settings_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--start", "starts", multiple=True, help="CODE=LOCATION start override; repeatable.")
@click.option("--script", "script_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--initial-event", default="")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def build_preset_cmd(
    overview_path: str,
    map_path: str,
    profile_paths: tuple[str, ...],
    settings_path: str,
    starts: tuple[str, ...],
    script_path: str | None,
    initial_event: str,
    out_path: str,
) -> None:
    """Assemble a runnable world config from extraction outputs and a map."""
    overview = Path(overview_path).read_text(encoding="utf-8").strip()
    map_data = json.loads(Path(map_path).read_text(encoding="utf-8"))
    profiles = [
        CharacterProfile.from_dict(json.loads(Path(p).read_text(encoding="utf-8"))) for p in profile_paths
    ]
    start_map = {}
    for item in starts:
        if "=" not in item:
            raise click.UsageError(f"--start needs CODE=LOCATION, got {item!r}")
        code, _, loc = item.partition("=")
        start_map[code.strip()] = loc.strip()
    script = Path(script_path).read_text(encoding="utf-8") if script_path else ""

    out = Path(out_path)
    settings_file = Path(settings_path)
    try:
        settings_ref = str(settings_file.resolve().relative_to(out.resolve().parent))
    except ValueError:
        settings_ref = str(settings_file.resolve())
    preset = extraction_mod.build_preset(
        overview=overview,
        map_data=map_data,
        profiles=profiles,
        settings_ref=settings_ref,
        starts=start_map,
        script=script,
        initial_event=initial_event,
    )
    out.write_text(json.dumps(preset, ensure_ascii=False, indent=2) + "\n", encoding="utf-8")
    load_world(out)  # round-trip validation: a preset must be runnable
    click.echo(f"world config ({len(profiles)} roles) -> {out}")


@main.command("rephrase")
@click.option("--record", "record_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--style", "style_path", type=click.Path(exists=True, dir_okay=False), help="Style config JSON.")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--provider", "provider_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--world", "world_path", type=click.Path(exists=True, dir_okay=False), help="For role display names.")
@click.option("--seed", type=int, default=None)
def rephrase_cmd(
    record_path: str,
    style_path: str | None,
    out_path: str,
    provider_path: str,
    world_path: str | None,
    seed: int | None,
) -> None:
    """Render a simulation record into a story."""
    scenes = engine_mod.load_record(record_path)
    style = rephrase_mod.StyleConfig.from_dict(
        json.loads(Path(style_path).read_text(encoding="utf-8")) if style_path else {}
    )
    names = None
    if world_path:
        state = load_world(world_path)
        names = {code: profile.name for code, profile in state.profiles.items()}
    gateway = _gateway(provider_path)
    draft = rephrase_mod.rephrase_record(gateway, scenes, style, names=names, seed=seed)
    Path(out_path).write_text(draft.story + "\n", encoding="utf-8")
    click.echo(f"{len(draft.scene_texts)} scene passages -> {out_path}")


@main.command("evaluate")
@click.option("--a", "a_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--b", "b_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--metrics", default=",".join(evaluation_mod.DEFAULT_METRICS_WITH_SCRIPT), show_default=True)
@click.option("--judge", "judge_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--trials", type=int, default=1, show_default=True, help="Comparisons per metric.")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--report-dir", type=click.Path(file_okay=False), help="Also write win-rate CSV and figure here.")
def evaluate_cmd(
    a_path: str,
    b_path: str,
    metrics: str,
    judge_path: str,
    seed: int,
    trials: int,
    out_path: str,
    report_dir: str | None,
) -> None:
    """Pairwise-judge two stories and write a win-rate report."""
    story_a = Path(a_path).read_text(encoding="utf-8")
    story_b = Path(b_path).read_text(encoding="utf-8")
    metric_list = [m.strip() for m in metrics.split(",") if m.strip()]
    gateway = _gateway(judge_path)
    report, verdicts = evaluation_mod.evaluate_stories(
        gateway, story_a, story_b, metric_list, seed=seed, trials=trials
    )
    payload = report.to_dict()
    payload["verdicts"] = [v.to_dict() for v in verdicts]
    out = Path(out_path)
    out.write_text(json.dumps(payload, ensure_ascii=False, indent=2) + "\n", encoding="utf-8")
    verdicts_path = out.with_suffix(".verdicts.jsonl")
    verdicts_path.write_text(
        "\n".join(json.dumps(v.to_dict(), ensure_ascii=False) for v in verdicts) + "\n", encoding="utf-8"
    )
    for metric, entry in report.metrics.items():
        if "win_rate_a" in entry:
            click.echo(f"{metric}: A {entry['win_rate_a']:.1f}% vs B {entry['win_rate_b']:.1f}% ({entry['valid']} valid)")
        else:
            click.echo(f"{metric}: no valid pairs")
    click.echo(f"report -> {out}; verdicts -> {verdicts_path}")
    if report_dir:
        from .report import write_win_rate_report

        csv_path, fig_path = write_win_rate_report(report, report_dir)
        click.echo(f"report -> {csv_path}, {fig_path}")


@main.command("kappa")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--human", "human_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", type=click.Path(dir_okay=False), help="Also write the values as JSON.")
def kappa_cmd(model_path: str, human_path: str, out_path: str | None) -> None:
    """Cohen's kappa between model verdicts and human labels."""
    values = evaluation_mod.kappa_between_files(model_path, human_path)
    for metric, value in values.items():
        click.echo(f"{metric}: {value:.3f}")
    if out_path:
        Path(out_path).write_text(json.dumps(values, indent=2) + "\n", encoding="utf-8")
        click.echo(f"-> {out_path}")


if __name__ == "__main__":
    main()
