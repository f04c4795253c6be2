import json
from dataclasses import asdict
from typing import Optional, Sequence

from .trace import jsonable
from .types import Assessment, EpisodeTrace, Guideline, MetricsReport

RATE_DIGITS = 9


def format_rate(rate: float) -> str:
    return f"{rate:.{RATE_DIGITS}f}"


def format_percent(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.2f}%"


def format_report(report: MetricsReport, format_type: str = "markdown") -> str:
    """Format an ablation report as either JSON or a Markdown table.

    Args:
        report (MetricsReport): Aggregated results of an ablation suite
        format_type (str, optional): Output format type - either "json" or "markdown". Defaults to "markdown".

    Returns:
        str: Formatted string representation of the report
    """
    if format_type == "json":
        data = jsonable(report)
        data["reductions"] = {
            f"{base}->{improved}": {"by_distance": d, "by_time": t}
            for (base, improved), (d, t) in report.reductions.items()
        }
        return json.dumps(data, indent=2)

    if not report.conditions:
        return "No results found."

    markdown = "# Collision rates\n\n"
    markdown += "| Condition | Collision Rate by Distance (per meter) | Collision Rate by Time (per second) |\n"
    markdown += "|---|---|---|\n"
    for row in report.conditions:
        markdown += f"| {row.condition}: {row.label} | {format_rate(row.rate_by_distance)} | {format_rate(row.rate_by_time)} |\n"

    markdown += "\n## Totals\n\n"
    markdown += "| Condition | Collisions | Distance (m) | Time (s) | Seeds | Aborted |\n"
    markdown += "|---|---|---|---|---|---|\n"
    for row in report.conditions:
        markdown += f"| {row.condition} | {row.collisions} | {row.distance:.1f} | {row.time:.1f} | {row.seeds} | {row.aborted} |\n"

    if report.reductions:
        markdown += "\n## Reductions\n\n"
        markdown += "| Comparison | By distance | By time |\n"
        markdown += "|---|---|---|\n"
        for (base, improved), (by_distance, by_time) in report.reductions.items():
            markdown += f"| {base} → {improved} | {format_percent(by_distance)} | {format_percent(by_time)} |\n"

    if report.errors:
        markdown += "\n## Errors\n\n"
        for error in report.errors:
            markdown += f"- {error}\n"

    return markdown


def format_assessment(
    assessment: Assessment, guidelines: Sequence[Guideline] = (), format_type: str = "markdown"
) -> str:
    if format_type == "json":
        return json.dumps(
            {"assessment": jsonable(assessment), "guidelines": [asdict(g) for g in guidelines]}, indent=2
        )

    m = assessment.metrics
    markdown = f"# Episode quality: {assessment.quality}\n\n"
    markdown += f"- Stops per second: {m.stop_frequency:.3f}\n"
    markdown += f"- Speed direction changes per second: {m.speed_change_frequency:.3f}\n"
    markdown += f"- Override rate: {m.override_rate:.3f}\n"
    markdown += f"- Collisions: {m.collision_count}\n"
    if assessment.reasons:
        markdown += "\n## Findings\n\n"
        for finding in assessment.reasons:
            markdown += f"- {finding.tag}: {finding.value:.3f} (threshold {finding.threshold:g})\n"
    if guidelines:
        markdown += "\n## Guidelines\n\n"
        for guideline in guidelines:
            markdown += f"- {guideline.text}\n"
    return markdown


def episode_summary(trace: EpisodeTrace) -> dict:
    footer = trace.footer
    decisions = [r for r in trace.records if r.decision]
    return {
        "condition": trace.header.condition,
        "seed": trace.header.seed,
        "reasoner": trace.header.reasoner,
        "ticks": len(trace.records),
        "distance": footer.total_distance,
        "time": footer.total_time,
        "collisions": sum(1 for c in footer.collisions if c.ego_involved),
        "npc_collisions": sum(1 for c in footer.collisions if not c.ego_involved),
        "decisions": len(decisions),
        "overrides": sum(1 for r in decisions if r.overridden),
        "reasoner_failures": sum(1 for r in decisions if r.reasoner_failed),
        "destinations_reached": footer.destinations_reached,
        "aborted": footer.aborted,
        "abort_reason": footer.abort_reason,
    }


def format_episode(trace: EpisodeTrace, format_type: str = "markdown") -> str:
    summary = episode_summary(trace)
    if format_type == "json":
        return json.dumps(summary, indent=2)

    markdown = f"# Episode {summary['condition']} / seed {summary['seed']} ({summary['reasoner']})\n\n"
    markdown += f"- Distance: {summary['distance']:.1f} m over {summary['time']:.1f} s\n"
    markdown += f"- Collisions: {summary['collisions']} (NPC only: {summary['npc_collisions']})\n"
    markdown += f"- Decisions: {summary['decisions']}, safety overrides: {summary['overrides']}, reasoner failures: {summary['reasoner_failures']}\n"
    markdown += f"- Destinations reached: {summary['destinations_reached']}\n"
    if summary["aborted"]:
        markdown += f"- **Aborted:** {summary['abort_reason']}\n"
    return markdown
