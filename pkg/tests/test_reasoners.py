import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import httpx
import pytest

from surreal_driver.agent import AgentContext, decide
from surreal_driver.coach import COLLISIONS, EXCESSIVE_STOPPING, GuidelineStore, assess_episode
from surreal_driver.errors import DemonstrationError, ParseError, ReasonerUnavailable
from surreal_driver.memory import MemoryBuffer
from surreal_driver.reasoners import (
    ChatClient,
    RemoteCoach,
    RemoteReasoner,
    ScriptedReasoner,
    build_coach_messages,
    build_prompt,
    load_demonstrations,
    parse_coach_reply,
    policy_for_condition,
    scripted_reason,
    stopping_gap,
)
from surreal_driver.safety import evaluate_safety
from surreal_driver.types import (
    AtomicAction,
    AtomicScene,
    ConditionSpec,
    DecisionRecord,
    Demonstration,
    Guideline,
    LaneGaps,
    LanePosition,
    LeadVehicle,
    PedestrianSighting,
    PolicyTable,
    ReasonerConfig,
    SafetyConfig,
    SignalSighting,
    SignalState,
)

from traces import stopping_trace

FULL = PolicyTable()
NAIVE = PolicyTable(obey_mandatory=False, obey_advisories=False, use_memory=False, use_guidelines=False)
ENDPOINT = "http://llm.test/v1/chat/completions"


def scene(speed=10.0, left=False, **kwargs):
    return AtomicScene(
        tick=50,
        ego_speed=speed,
        lane_position=LanePosition("L", left, False),
        destination_distance=300.0,
        **kwargs,
    )


def remembered(*actions):
    buffer = MemoryBuffer()
    for i, action in enumerate(actions):
        buffer = buffer.push(DecisionRecord(i * 5, "", action, action, False, ""))
    return buffer


def guided(*findings):
    return GuidelineStore(tuple(Guideline(f"g-{f}", f"Rule about {f}.", f, 0) for f in findings))


def mock_client(reply=None, body=None, status=200, error=None):
    """An httpx client answering every request locally; returns it with the list of requests it saw."""
    seen = []
    if reply is not None:
        body = {"choices": [{"message": {"role": "assistant", "content": reply}}]}

    def handler(request):
        seen.append(request)
        if error is not None:
            raise error
        if isinstance(body, str):
            return httpx.Response(status, text=body)
        return httpx.Response(status, json=body)

    return httpx.Client(transport=httpx.MockTransport(handler)), seen


@pytest.fixture
def remote_cfg():
    """Remote reasoner settings pointing at a fake endpoint."""
    return ReasonerConfig(kind="remote", endpoint=ENDPOINT, timeout=5.0)


# --- scripted policy ------------------------------------------------------

def test_mandatory_rule_comes_first():
    """Test that the scripted driver follows the mandatory stop"""
    s = scene(lead_vehicle=LeadVehicle(7.0, 0.0))
    ctx = AgentContext(s, safety=evaluate_safety(s, SafetyConfig()))

    action, why = scripted_reason(ctx, FULL)

    assert action == AtomicAction.STOP
    assert why == "mandatory safety rule (stop.lead_vehicle)"


@pytest.mark.parametrize("speed, expected", [
    (0.0, AtomicAction.ACCELERATE),
    (12.0, AtomicAction.MAINTAIN_SPEED),
    (14.0, AtomicAction.DECELERATE),
])
def test_speed_tracking(speed, expected):
    """Test tracking of the desired speed on an empty road"""
    action, _ = scripted_reason(AgentContext(scene(speed)), FULL)

    assert action == expected


def test_memory_holds_speed_after_accelerating():
    """Test that two accelerations in a row are followed by a pause when memory is on"""
    ctx = AgentContext(scene(5.0), memory=remembered(AtomicAction.ACCELERATE, AtomicAction.ACCELERATE))

    assert scripted_reason(ctx, FULL) == (AtomicAction.MAINTAIN_SPEED, "holding speed after accelerating")
    assert scripted_reason(ctx, NAIVE)[0] == AtomicAction.ACCELERATE


def test_red_light_handling():
    """Test braking for a red light with and without safety margins"""
    assert stopping_gap(10.0, 0.0, FULL, 3.0) == pytest.approx(12.5 + 5.0 + 3.0)
    red = AgentContext(scene(10.0, signal=SignalSighting(SignalState.RED, 20.0)))
    waiting = AgentContext(scene(0.0, signal=SignalSighting(SignalState.RED, 2.0)))

    assert scripted_reason(red, FULL) == (AtomicAction.DECELERATE, "red light ahead")
    assert scripted_reason(red, NAIVE) == (AtomicAction.STOP, "red light ahead")
    assert scripted_reason(waiting, FULL) == (AtomicAction.MAINTAIN_SPEED, "waiting at the red light")


@pytest.mark.parametrize("distance, expected", [
    (25.0, AtomicAction.DECELERATE),
    (15.0, AtomicAction.ACCELERATE),
    (60.0, AtomicAction.ACCELERATE),
])
def test_yellow_light(distance, expected):
    """Test stopping for a yellow light only when the stop line can still be made"""
    ctx = AgentContext(scene(10.0, signal=SignalSighting(SignalState.YELLOW, distance)))

    assert scripted_reason(ctx, FULL)[0] == expected


def test_advisories_slow_down_to_a_cautious_speed():
    """Test that slow-down advisories are followed only above the cautious speed"""
    walker = PedestrianSighting(15.0, False)
    fast, slow = scene(9.0, nearest_pedestrian=walker), scene(4.0, nearest_pedestrian=walker)

    fast_ctx = AgentContext(fast, safety=evaluate_safety(fast, SafetyConfig()))
    slow_ctx = AgentContext(slow, safety=evaluate_safety(slow, SafetyConfig()))

    assert scripted_reason(fast_ctx, FULL) == (AtomicAction.DECELERATE, "recommended: slow.pedestrian")
    assert scripted_reason(slow_ctx, FULL)[0] == AtomicAction.ACCELERATE


def test_yellow_advisory_ignored_past_the_stopping_point():
    """Test that a committed car clears the yellow light instead of braking in the junction"""
    s = scene(12.0, signal=SignalSighting(SignalState.YELLOW, 10.0))
    ctx = AgentContext(s, safety=evaluate_safety(s, SafetyConfig()))

    assert "slow.yellow_signal" in [a.tag for a in ctx.safety.advisories]
    assert scripted_reason(ctx, FULL)[0] == AtomicAction.MAINTAIN_SPEED


def test_following_distance_depends_on_safety_margins():
    """Test that the careful driver brakes for a slower vehicle earlier than the naive one"""
    ctx = AgentContext(scene(12.0, lead_vehicle=LeadVehicle(25.0, 5.0)))

    assert scripted_reason(ctx, FULL) == (AtomicAction.DECELERATE, "keeping a safe distance to the vehicle ahead")
    assert scripted_reason(ctx, NAIVE)[0] == AtomicAction.MAINTAIN_SPEED


def test_naive_driver_stops_for_close_hazards():
    """Test the naive driver's last-moment stops"""
    ctx = AgentContext(scene(8.0, nearest_pedestrian=PedestrianSighting(4.0, True)))

    assert scripted_reason(ctx, NAIVE) == (AtomicAction.STOP, "pedestrian right ahead")


def test_route_lane_change_checks_the_gap():
    """Test the lane change toward the route, and waiting for a fast follower"""
    clear = AgentContext(scene(8.0, left=True, route_hint="left", left_gaps=LaneGaps()))
    follower = AgentContext(scene(8.0, left=True, route_hint="left", left_gaps=LaneGaps(rear=12.0, rear_speed=14.0)))
    just_changed = AgentContext(
        scene(8.0, left=True, route_hint="left", left_gaps=LaneGaps()),
        memory=remembered(AtomicAction.LANE_CHANGE_LEFT),
    )

    assert scripted_reason(clear, FULL)[0] == AtomicAction.LANE_CHANGE_LEFT
    assert scripted_reason(follower, FULL)[0] == AtomicAction.ACCELERATE
    assert scripted_reason(just_changed, FULL)[0] == AtomicAction.ACCELERATE


def test_slow_yellow_approach_never_speeds_up():
    """Test that a crawling car short of a yellow light holds or slows instead of accelerating"""
    s = scene(4.0, signal=SignalSighting(SignalState.YELLOW, 18.0))
    advised = AgentContext(s, safety=evaluate_safety(s, SafetyConfig()))

    assert scripted_reason(advised, FULL) == (AtomicAction.DECELERATE, "recommended: slow.yellow_signal")
    assert scripted_reason(AgentContext(s), FULL) == (AtomicAction.MAINTAIN_SPEED, "yellow light ahead, not speeding up")
    assert scripted_reason(AgentContext(scene(0.0, signal=SignalSighting(SignalState.YELLOW, 0.0))), FULL)[0] == (
        AtomicAction.MAINTAIN_SPEED
    )


def test_crossing_pedestrian_is_slowed_for_at_any_speed():
    """Test that the cautious-speed floor does not apply to a pedestrian already on the road"""
    s = scene(4.0, nearest_pedestrian=PedestrianSighting(15.0, True))
    ctx = AgentContext(s, safety=evaluate_safety(s, SafetyConfig()))

    assert scripted_reason(ctx, FULL) == (AtomicAction.DECELERATE, "recommended: slow.pedestrian")


@pytest.mark.parametrize("digest, expected", [
    ("v=8.0 ped=12.0", AtomicAction.DECELERATE),
    ("v=8.0 lead=6.5", AtomicAction.DECELERATE),
    ("v=8.0 lead=40.0 sig=green@80.0", AtomicAction.ACCELERATE),
])
def test_memory_of_a_nearby_hazard_lowers_the_target(digest, expected):
    """Test that pedestrians and tight leads in recent scenes make the driver cautious"""
    memory = MemoryBuffer().push(DecisionRecord(0, digest, AtomicAction.MAINTAIN_SPEED, AtomicAction.MAINTAIN_SPEED, False, ""))
    ctx = AgentContext(scene(10.0), memory=memory)

    assert scripted_reason(ctx, FULL)[0] == expected
    assert scripted_reason(ctx, NAIVE)[0] == AtomicAction.ACCELERATE


def test_naive_lane_change_skips_the_mirror():
    """Test that a driver without criteria only looks ahead before changing lanes"""
    follower = AgentContext(scene(8.0, left=True, route_hint="left", left_gaps=LaneGaps(rear=3.0, rear_speed=14.0)))
    short_front = AgentContext(scene(8.0, left=True, route_hint="left", left_gaps=LaneGaps(front=10.0)))

    assert scripted_reason(follower, NAIVE)[0] == AtomicAction.LANE_CHANGE_LEFT
    assert scripted_reason(short_front, NAIVE)[0] == AtomicAction.LANE_CHANGE_LEFT
    assert scripted_reason(short_front, FULL)[0] == AtomicAction.ACCELERATE


def test_guidelines_lower_the_target_speed():
    """Test that a collision guideline makes the driver slower"""
    ctx = AgentContext(scene(10.0), guidelines=guided(COLLISIONS))

    action, why = scripted_reason(ctx, FULL)

    assert action == AtomicAction.DECELERATE
    assert why == "above target speed 8.4 m/s (guideline: keep extra distance)"
    assert scripted_reason(ctx, NAIVE)[0] == AtomicAction.ACCELERATE


def test_guidelines_slow_early_for_signals():
    """Test the early slowdown guidelines ask for"""
    ctx = AgentContext(
        scene(8.0, signal=SignalSighting(SignalState.RED, 28.0)),
        guidelines=guided(EXCESSIVE_STOPPING),
    )

    assert scripted_reason(ctx, FULL) == (AtomicAction.DECELERATE, "red light ahead, slowing early")


def test_policy_for_condition():
    """Test that condition flags switch the matching policy knobs"""
    policy = policy_for_condition(FULL, ConditionSpec("B", True, False, False))

    assert policy.obey_mandatory and policy.obey_advisories
    assert not policy.use_memory and not policy.use_guidelines
    assert policy.desired_speed == FULL.desired_speed


def test_scripted_reasoner_is_a_reasoner():
    """Test the scripted reasoner inside decide"""
    record = decide(AgentContext(scene(0.0)), ScriptedReasoner(), SafetyConfig())

    assert record.final == AtomicAction.ACCELERATE
    assert record.attempts == 1


# --- prompt and demonstrations ---------------------------------------------

def test_prompt_sections_in_order():
    """Test the prompt layout"""
    demo = Demonstration("At a junction.", "Look twice.", AtomicAction.DECELERATE)
    ctx = AgentContext(scene(lead_vehicle=LeadVehicle(7.0, 0.0)), demonstrations=(demo,))

    prompt = build_prompt(ctx)
    text = prompt.render()

    titles = [title for title, _ in prompt.sections()]
    assert titles == [
        "Role",
        "Examples from expert drivers",
        "Driving guidelines",
        "Recent actions",
        "Current situation",
        "Answer format",
    ]
    positions = [text.index(f"## {title}") for title in titles]
    assert positions == sorted(positions)
    assert "Situation: At a junction.\nReasoning: Look twice.\nAction: decelerate" in text
    assert "no guidelines yet" in text
    assert "no recent actions" in text
    assert '"action"' in prompt.output_instructions
    assert build_prompt(ctx).render() == text


def test_prompt_states_criteria_only_when_enabled():
    """Test that safety criteria and the verdict appear only with criteria"""
    s = scene(lead_vehicle=LeadVehicle(7.0, 0.0))
    ctx = AgentContext(s, safety=evaluate_safety(s, SafetyConfig()))

    with_criteria = build_prompt(ctx, criteria=SafetyConfig())
    without = build_prompt(ctx)

    assert "Mandatory safety rules" in with_criteria.system
    assert "MANDATORY: stop" in with_criteria.scene
    assert "Mandatory safety rules" not in without.system
    assert "MANDATORY" not in without.scene
    messages = with_criteria.messages()
    assert [m["role"] for m in messages] == ["system", "user"]
    assert messages[1]["content"].startswith("## Examples from expert drivers")


def test_shipped_demonstrations():
    """Test the demonstrations shipped with the package"""
    demos = load_demonstrations()

    assert len(demos) == 2
    assert demos[0].action == AtomicAction.DECELERATE
    assert demos[0].reasoning.startswith("No matter right or left")
    assert demos[1].reasoning.startswith("Look at the left rearview mirror first")


def test_demonstration_file_errors(tmp_path):
    """Test validation of a demonstrations file"""
    path = tmp_path / "demos.json"
    path.write_text("[]")
    assert load_demonstrations(path) == []

    good = {"situation": "s", "reasoning": "r", "action": "stop"}
    path.write_text(json.dumps([good, {**good, "action": "fly"}]))
    with pytest.raises(DemonstrationError) as excinfo:
        load_demonstrations(path)
    assert excinfo.value.index == 1

    path.write_text(json.dumps([{**good, "reasoning": "  "}]))
    with pytest.raises(DemonstrationError, match="'reasoning'"):
        load_demonstrations(path)

    path.write_text(json.dumps(good))
    with pytest.raises(DemonstrationError, match="array"):
        load_demonstrations(path)

    with pytest.raises(DemonstrationError, match="cannot read"):
        load_demonstrations(tmp_path / "missing.json")


# --- remote reasoner --------------------------------------------------------

def test_remote_reasoner_sends_one_request(remote_cfg):
    """Test one chat request per decision and the reply parsing"""
    client, seen = mock_client(reply='Looking ahead... {"action": "Decelerate", "rationale": "slow car"}')

    reasoner = RemoteReasoner(remote_cfg, criteria=SafetyConfig(), api_key="secret", client=client)
    action, why = reasoner(AgentContext(scene()))

    assert (action, why) == (AtomicAction.DECELERATE, "slow car")
    assert len(seen) == 1
    request = seen[0]
    body = json.loads(request.content)
    assert str(request.url) == ENDPOINT
    assert set(body) == {"model", "messages", "temperature"}
    assert body["messages"][0]["role"] == "system"
    assert request.extensions["timeout"]["read"] == 5.0
    assert request.headers["Authorization"] == "Bearer secret"


def test_remote_reasoner_truncates_replies():
    """Test that replies are cut to the configured length"""
    cfg = ReasonerConfig(kind="remote", endpoint=ENDPOINT, max_reply_length=12)
    client, _ = mock_client(reply='{"action": "stop"}')

    with pytest.raises(ParseError):
        RemoteReasoner(cfg, api_key="", client=client)(AgentContext(scene()))


@pytest.mark.parametrize("error, message", [
    (httpx.ReadTimeout("read timeout"), "timed out"),
    (httpx.ConnectError("refused"), "unreachable"),
])
def test_transport_errors(remote_cfg, error, message):
    """Test that transport failures become ReasonerUnavailable"""
    client, _ = mock_client(error=error)

    with pytest.raises(ReasonerUnavailable, match=message):
        ChatClient(remote_cfg, api_key="", client=client).complete([])


def test_http_status_error(remote_cfg):
    """Test that an error status becomes ReasonerUnavailable"""
    client, _ = mock_client(status=503, body={"error": "busy"})

    with pytest.raises(ReasonerUnavailable, match="503"):
        ChatClient(remote_cfg, api_key="", client=client).complete([])


@pytest.mark.parametrize("body", [{"error": "nope"}, {"choices": [{"message": {"content": 7}}]}, "not json"])
def test_unexpected_reply_shape(remote_cfg, body):
    """Test that a reply without text content is a ParseError"""
    client, _ = mock_client(body=body)

    with pytest.raises(ParseError):
        ChatClient(remote_cfg, api_key="", client=client).complete([])


def test_chat_client_needs_endpoint():
    """Test that a client without endpoint is unavailable"""
    with pytest.raises(ReasonerUnavailable):
        ChatClient(ReasonerConfig())


class _ChatHandler(BaseHTTPRequestHandler):
    delay = 0.0
    trickle = 0.0
    seen_headers = []

    def do_POST(self):
        type(self).seen_headers.append(self.headers.get("Authorization"))
        self.rfile.read(int(self.headers.get("Content-Length", 0)))
        time.sleep(self.delay)
        body = json.dumps({"choices": [{"message": {"content": '{"action": "maintain_speed"}'}}]}).encode()
        try:
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            if self.trickle:
                for i in range(len(body)):
                    self.wfile.write(body[i:i + 1])
                    time.sleep(self.trickle)
            else:
                self.wfile.write(body)
        except (BrokenPipeError, ConnectionResetError):
            pass

    def log_message(self, *args):
        pass


@pytest.fixture
def chat_server():
    """A local chat endpoint; set `delay` or `trickle` on the handler class to slow it down."""
    handler = type("Handler", (_ChatHandler,), {"delay": 0.0, "trickle": 0.0, "seen_headers": []})
    server = ThreadingHTTPServer(("127.0.0.1", 0), handler)
    server.daemon_threads = True
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield server, handler
    server.shutdown()
    server.server_close()


def local_client():
    return httpx.Client(trust_env=False)


def test_bearer_header_reaches_the_server(chat_server):
    """Test the Authorization header against a real HTTP server"""
    server, handler = chat_server
    cfg = ReasonerConfig(kind="remote", endpoint=f"http://127.0.0.1:{server.server_port}/chat", timeout=5.0)

    reasoner = RemoteReasoner(cfg, api_key="secret", client=local_client())
    try:
        assert reasoner(AgentContext(scene()))[0] == AtomicAction.MAINTAIN_SPEED
    finally:
        reasoner.close()

    assert handler.seen_headers == ["Bearer secret"]


def test_slow_server_times_out_and_decide_falls_back(chat_server):
    """Test that a reasoner slower than its timeout ends in the Stop fallback"""
    server, handler = chat_server
    handler.delay = 1.0
    cfg = ReasonerConfig(kind="remote", endpoint=f"http://127.0.0.1:{server.server_port}/chat", timeout=0.1)

    reasoner = RemoteReasoner(cfg, api_key="", client=local_client())
    try:
        record = decide(AgentContext(scene()), reasoner, SafetyConfig(), max_attempts=2)
    finally:
        reasoner.close()

    assert record.reasoner_failed
    assert record.final == AtomicAction.STOP
    assert record.attempts == 2


def test_trickling_reply_is_cut_off_at_the_deadline(chat_server):
    """Test that a reply arriving one byte at a time cannot outlast the timeout"""
    server, handler = chat_server
    handler.trickle = 0.05
    cfg = ReasonerConfig(kind="remote", endpoint=f"http://127.0.0.1:{server.server_port}/chat", timeout=0.5)

    chat = ChatClient(cfg, api_key="", client=local_client())
    start = time.monotonic()
    try:
        with pytest.raises(ReasonerUnavailable, match="timed out"):
            chat.complete([])
    finally:
        elapsed = time.monotonic() - start
        chat.close()

    assert elapsed <= 1.1 * cfg.timeout


# --- remote coach -----------------------------------------------------------

def test_remote_coach_guidelines(remote_cfg):
    """Test guidelines written by the chat coach"""
    trace = stopping_trace()
    assessment = assess_episode(trace)
    reply = '{"quality": "Bad", "guidelines": ["Brake earlier for red lights.", "", 7]}'

    client, seen = mock_client(reply=reply)

    quality, guidelines = RemoteCoach(remote_cfg, api_key="", client=client).advise(trace, assessment, GuidelineStore(), 2)

    assert quality == "Bad"
    assert guidelines == [Guideline("llm2-0", "Brake earlier for red lights.", EXCESSIVE_STOPPING, 2)]
    user = json.loads(seen[0].content)["messages"][1]["content"]
    assert "Findings: excessive_stopping" in user


def test_coach_messages_and_reply_errors():
    """Test the coach prompt and malformed coach replies"""
    trace = stopping_trace()
    messages = build_coach_messages(trace, assess_episode(trace), guided(COLLISIONS))

    assert "Stops per second: 0.200" in messages[1]["content"]
    assert "1. Rule about collisions." in messages[1]["content"]
    with pytest.raises(ParseError, match="quality"):
        parse_coach_reply('{"quality": "Meh"}', 0, "coach")
    with pytest.raises(ParseError, match="list"):
        parse_coach_reply('{"quality": "Good", "guidelines": "drive well"}', 0, "coach")
