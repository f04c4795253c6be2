import os
import sys
from contextlib import asynccontextmanager
from dataclasses import dataclass, field
from typing import AsyncIterator, List, Optional

from mcp.server.fastmcp import FastMCP, Context

from .agent import AgentContext
from .coach import GuidelineStore, assess_episode, merge_guidelines
from .config import load_config
from .formatter import format_assessment, format_episode, format_report
from .harness import condition, episode_guidelines, replay, run_ablation_suite, run_episode
from .network import default_town
from .perception import observe
from .reasoners import RemoteCoach, build_prompt, load_demonstrations
from .safety import EMPTY_VERDICT, evaluate_safety
from .trace import read_trace, write_trace
from .types import AppConfig, Demonstration
from .world import new_world


@dataclass
class AppContext:
    config: AppConfig
    demonstrations: List[Demonstration]
    guidelines: GuidelineStore = field(default_factory=GuidelineStore)


def _remote_coach(app: AppContext, enabled: bool) -> Optional[RemoteCoach]:
    return RemoteCoach(app.config.reasoner) if enabled else None


@asynccontextmanager
async def app_lifespan(server: FastMCP) -> AsyncIterator[AppContext]:
    """Load configuration and demonstrations once for the server's lifetime.

    Args:
        server (FastMCP): The FastMCP server instance

    Returns:
        AsyncIterator[AppContext]: Context with the configuration, demonstrations and guideline store
    """
    config = load_config(os.getenv("SURREAL_DRIVER_CONFIG"))
    yield AppContext(
        config=config,
        demonstrations=load_demonstrations(),
        guidelines=GuidelineStore(max_size=config.agent.guideline_max),
    )


mcp = FastMCP(
    "SurrealDriver",
    lifespan=app_lifespan,
    dependencies=["httpx", "python-dotenv"]
)


@mcp.tool(name="run_episode")
async def run_episode_tool(
    condition_id: str = "D",
    seed: int = 0,
    duration: float = 60.0,
    trace_path: Optional[str] = None,
    response_format: Optional[str] = "markdown",
    ctx: Context = None
) -> str:
    """Run one driving episode and summarize it.

    Args:
        condition_id (str): Ablation condition, one of A, B, C, D
        seed (int): World seed
        duration (float): Simulated seconds
        trace_path (Optional[str]): Where to write the JSON Lines trace, if anywhere
        response_format (Optional[str]): Format of response ("json" or "markdown")
        ctx (Context): The context is passed automatically by the MCP

    Returns:
        str: Episode summary
    """
    try:
        app = ctx.request_context.lifespan_context
        await ctx.debug(f"Running condition {condition_id} seed {seed} for {duration} s")
        trace = run_episode(
            condition(condition_id),
            seed,
            duration,
            config=app.config,
            guidelines=app.guidelines,
            demonstrations=app.demonstrations,
        )
        if trace_path:
            write_trace(trace, trace_path)
            await ctx.debug(f"Trace written to {trace_path}")
        return format_episode(trace, response_format)
    except Exception as e:
        await ctx.error(f"Error running episode: {str(e)}")
        raise RuntimeError(f"Failed to run episode: {str(e)}")


@mcp.tool()
async def run_ablation(
    seeds: int = 3,
    duration: float = 60.0,
    remote_coach: bool = False,
    response_format: Optional[str] = "markdown",
    ctx: Context = None
) -> str:
    """Run conditions A to D over paired seeds and report collision rates.

    Args:
        seeds (int): Number of seeds, 0 to seeds - 1
        duration (float): Simulated seconds per episode
        remote_coach (bool): Whether condition D asks the chat endpoint for its guidelines
        response_format (Optional[str]): Format of response ("json" or "markdown")
        ctx (Context): The context is passed automatically by the MCP

    Returns:
        str: Collision-rate report
    """
    try:
        app = ctx.request_context.lifespan_context
        await ctx.debug(f"Running ablation over {seeds} seed(s), {duration} s each")
        coach = _remote_coach(app, remote_coach)
        try:
            report = run_ablation_suite(
                list(range(seeds)), duration, config=app.config, demonstrations=app.demonstrations, remote_coach=coach
            )
        finally:
            if coach is not None:
                coach.close()
        return format_report(report, response_format)
    except Exception as e:
        await ctx.error(f"Error running ablation: {str(e)}")
        raise RuntimeError(f"Failed to run ablation: {str(e)}")


@mcp.tool()
async def assess_trace(
    trace_path: str,
    remember: bool = True,
    remote_coach: bool = False,
    response_format: Optional[str] = "markdown",
    ctx: Context = None
) -> str:
    """Assess a recorded episode and generate guidelines for the next one.

    Args:
        trace_path (str): JSON Lines trace file
        remember (bool): Whether to add the guidelines to the server's guideline store
        remote_coach (bool): Whether a Bad episode is coached by the chat endpoint
        response_format (Optional[str]): Format of response ("json" or "markdown")
        ctx (Context): The context is passed automatically by the MCP

    Returns:
        str: Assessment and guidelines
    """
    try:
        app = ctx.request_context.lifespan_context
        trace = read_trace(trace_path)
        assessment = assess_episode(trace, app.config.coach)
        coach = _remote_coach(app, remote_coach)
        try:
            guidelines = episode_guidelines(trace, assessment, app.guidelines, len(app.guidelines), coach)
        finally:
            if coach is not None:
                coach.close()
        if remember:
            app.guidelines = merge_guidelines(app.guidelines, guidelines)
            await ctx.debug(f"Guideline store holds {len(app.guidelines)} guideline(s)")
        return format_assessment(assessment, guidelines, response_format)
    except Exception as e:
        await ctx.error(f"Error assessing trace: {str(e)}")
        raise RuntimeError(f"Failed to assess trace: {str(e)}")


@mcp.tool()
async def replay_trace(trace_path: str, ctx: Context = None) -> str:
    """Re-simulate a trace and report whether it reproduces.

    Args:
        trace_path (str): JSON Lines trace file
        ctx (Context): The context is passed automatically by the MCP

    Returns:
        str: Verification result
    """
    try:
        result = replay(read_trace(trace_path))
        await ctx.debug(f"Replay checked {result.ticks_checked} tick(s) in {result.mode} mode")
        if result.ok:
            return f"Trace verified ({result.mode} replay, {result.ticks_checked} ticks)."
        return (
            f"Divergence at tick {result.divergence_tick} in {result.field}: "
            f"expected {result.expected!r}, got {result.actual!r}."
        )
    except Exception as e:
        await ctx.error(f"Error replaying trace: {str(e)}")
        raise RuntimeError(f"Failed to replay trace: {str(e)}")


@mcp.tool()
async def render_prompt(condition_id: str = "D", seed: int = 0, ctx: Context = None) -> str:
    """Render the driver prompt for the first tick of a fresh world.

    Args:
        condition_id (str): Ablation condition, one of A, B, C, D
        seed (int): World seed
        ctx (Context): The context is passed automatically by the MCP

    Returns:
        str: The prompt text
    """
    try:
        app = ctx.request_context.lifespan_context
        spec = condition(condition_id)
        config = app.config
        world = new_world(default_town(), config.sim, config.npc, config.pedestrians, seed)
        scene = observe(world, config.sim.horizon)
        agent_ctx = AgentContext(
            scene=scene,
            guidelines=app.guidelines if spec.guidelines_enabled else GuidelineStore(),
            safety=evaluate_safety(scene, config.safety) if spec.safety_enabled else EMPTY_VERDICT,
            demonstrations=tuple(app.demonstrations),
        )
        prompt = build_prompt(agent_ctx, criteria=config.safety if spec.safety_enabled else None)
        return prompt.render()
    except Exception as e:
        await ctx.error(f"Error rendering prompt: {str(e)}")
        raise RuntimeError(f"Failed to render prompt: {str(e)}")


def main():
    """Entry point for the SurrealDriver MCP server."""
    print("Starting SurrealDriver MCP Server...", file=sys.stderr)
    mcp.run()


if __name__ == "__main__":
    main()
