import pytest

from edgedraft.device import (
    ArmTimer,
    CONTINUE,
    ConfidenceThreshold,
    DeviceAgent,
    EmitTokens,
    FixedLength,
    PROV_FALLBACK,
    PROV_VERIFIED,
    REQUEST_VERIFICATION,
    ReleaseFallback,
    ReliabilityPolicy,
    ResponseArrived,
    SendRequest,
    SessionLimits,
    TimeoutFired,
    TokenDrafted,
    drafting_decision,
)
from edgedraft.errors import TransportFatal
from edgedraft.models import ConstantModel
from edgedraft.protocol import SessionInit, VerifyRequest, VerifyResponse
from edgedraft.rng import RngStream


def test_drafting_decision_examples():
    policy = ConfidenceThreshold(c_th=0.5, gamma_max=8)
    assert drafting_decision(0.3, 2, policy) == REQUEST_VERIFICATION
    assert drafting_decision(0.5, 2, policy) == CONTINUE  # >= keeps drafting
    assert drafting_decision(0.99, 8, policy) == REQUEST_VERIFICATION  # cap
    fixed = FixedLength(gamma=4)
    assert drafting_decision(1.0, 3, fixed) == CONTINUE
    assert drafting_decision(0.0, 4, fixed) == REQUEST_VERIFICATION


def _agent(gamma=2, max_retries=2, threshold=3, fallback=True, max_tokens=100):
    draft = ConstantModel([0.25] * 4)
    return DeviceAgent(
        prompt=(0,),
        draft=draft,
        drafting=FixedLength(gamma),
        reliability=ReliabilityPolicy(
            timeout_ms=100.0,
            max_retries_per_request=max_retries,
            fallback_failure_threshold=threshold,
            fallback_enabled=fallback,
        ),
        limits=SessionLimits(max_tokens=max_tokens),
        draft_stream=RngStream.derive(0, "draft", 0),
        device_index=0,
    )


def _sent_request(actions) -> VerifyRequest:
    for action in actions:
        if isinstance(action, SendRequest):
            for msg in action.messages:
                if isinstance(msg, VerifyRequest):
                    return msg
    raise AssertionError(f"no VerifyRequest in {actions}")


def _drafted(agent, token, conf, now):
    return agent.step(TokenDrafted(token, conf, -1), now)


def test_block_sent_at_gamma_with_session_init():
    agent = _agent(gamma=2)
    assert _drafted(agent, 1, 0.5, 0.0) == []
    actions = _drafted(agent, 2, 0.5, 1.0)
    send = next(a for a in actions if isinstance(a, SendRequest))
    assert isinstance(send.messages[0], SessionInit)
    req = _sent_request(actions)
    assert req.tokens == (1, 2) and req.base_position == 1
    assert any(isinstance(a, ArmTimer) for a in actions)
    assert agent.state.in_flight is not None


def test_full_accept_promotes_draft_ahead():
    agent = _agent(gamma=2)
    _drafted(agent, 1, 0.5, 0.0)
    actions = _drafted(agent, 2, 0.5, 1.0)
    req = _sent_request(actions)
    _drafted(agent, 3, 0.5, 2.0)  # drafted while awaiting -> draft_ahead
    assert [d.token for d in agent.state.draft_ahead] == [3]
    resp = VerifyResponse(req.session_id, req.request_id, 2, None)
    actions = agent.step(ResponseArrived(resp), 3.0)
    emitted = next(a for a in actions if isinstance(a, EmitTokens))
    assert [t.token for t in emitted.tokens] == [1, 2]
    assert all(t.provenance == PROV_VERIFIED for t in emitted.tokens)
    assert agent.state.committed == [0, 1, 2]
    assert [d.token for d in agent.state.buffer] == [3]
    assert agent.state.draft_ahead == []
    assert agent.state.in_flight is None


def test_rejection_discards_draft_ahead():
    agent = _agent(gamma=2)
    _drafted(agent, 1, 0.5, 0.0)
    actions = _drafted(agent, 2, 0.5, 1.0)
    req = _sent_request(actions)
    _drafted(agent, 3, 0.5, 2.0)
    resp = VerifyResponse(req.session_id, req.request_id, 1, 3)
    actions = agent.step(ResponseArrived(resp), 3.0)
    emitted = next(a for a in actions if isinstance(a, EmitTokens))
    assert [t.token for t in emitted.tokens] == [1, 3]
    assert agent.state.committed == [0, 1, 3]
    assert agent.state.draft_ahead == []
    assert agent.state.buffer == []
    assert agent.state.consecutive_failures == 0


def test_timeout_retries_with_concatenated_block_and_new_id():
    agent = _agent(gamma=2)
    _drafted(agent, 1, 0.5, 0.0)
    first = _sent_request(_drafted(agent, 2, 0.5, 1.0))
    _drafted(agent, 3, 0.5, 2.0)
    timer_id = agent.state.in_flight.timer_id
    actions = agent.step(TimeoutFired(timer_id), 101.0)
    retry = _sent_request(actions)
    assert retry.request_id != first.request_id
    assert retry.tokens == (1, 2, 3)
    assert retry.base_position == first.base_position
    assert agent.state.consecutive_failures == 1
    # A late response to the ORIGINAL id still applies to the current block;
    # the uncovered tail is immediately re-requested.
    resp = VerifyResponse(first.session_id, first.request_id, 2, None)
    actions = agent.step(ResponseArrived(resp), 150.0)
    assert agent.state.committed == [0, 1, 2]
    followup = _sent_request(actions)
    assert followup.tokens == (3,)
    assert followup.base_position == 3
    assert agent.state.consecutive_failures == 0


def test_partial_acceptance_requeues_remainder():
    agent = _agent(gamma=2)
    _drafted(agent, 1, 0.5, 0.0)
    first = _sent_request(_drafted(agent, 2, 0.5, 1.0))
    timer_id = agent.state.in_flight.timer_id
    retry = _sent_request(agent.step(TimeoutFired(timer_id), 101.0))
    assert retry.tokens == (1, 2)
    # Cached replay covering only the first token, no corrective: the device
    # commits the prefix and immediately re-requests the rest.
    resp = VerifyResponse(retry.session_id, retry.request_id, 1, None)
    actions = agent.step(ResponseArrived(resp), 120.0)
    assert agent.state.committed == [0, 1]
    followup = _sent_request(actions)
    assert followup.tokens == (2,)
    assert followup.base_position == 2


def test_fallback_release_after_threshold():
    agent = _agent(gamma=2, max_retries=0, threshold=1)
    _drafted(agent, 1, 0.5, 0.0)
    _drafted(agent, 2, 0.5, 1.0)
    _drafted(agent, 3, 0.5, 2.0)
    timer_id = agent.state.in_flight.timer_id
    actions = agent.step(TimeoutFired(timer_id), 101.0)
    assert any(isinstance(a, ReleaseFallback) for a in actions)
    emitted = next(a for a in actions if isinstance(a, EmitTokens))
    assert [t.token for t in emitted.tokens] == [1, 2, 3]
    assert all(t.provenance == PROV_FALLBACK for t in emitted.tokens)
    assert agent.state.fallback_mode
    assert agent.wants_draft()  # device keeps drafting


def test_fallback_mode_emits_immediately_and_probes():
    agent = _agent(gamma=2, max_retries=0, threshold=1)
    for tok in (1, 2):
        _drafted(agent, tok, 0.5, float(tok))
    agent.step(TimeoutFired(agent.state.in_flight.timer_id), 101.0)
    actions = _drafted(agent, 3, 0.5, 110.0)
    emitted = next(a for a in actions if isinstance(a, EmitTokens))
    assert emitted.tokens[0].provenance == PROV_FALLBACK
    # Second fallback token triggers a probe on a throwaway session.
    actions = _drafted(agent, 2, 0.5, 120.0)
    send = next(a for a in actions if isinstance(a, SendRequest))
    assert isinstance(send.messages[0], SessionInit)
    probe = _sent_request(actions)
    # Any probe response ends fallback mode.
    agent.step(ResponseArrived(
        VerifyResponse(probe.session_id, probe.request_id, 0, 1)), 130.0)
    assert not agent.state.fallback_mode
    assert agent.state.consecutive_failures == 0
    # Next block re-inits a fresh session with the full committed context.
    _drafted(agent, 1, 0.5, 140.0)
    actions = _drafted(agent, 2, 0.5, 141.0)
    send = next(a for a in actions if isinstance(a, SendRequest))
    init = send.messages[0]
    assert isinstance(init, SessionInit)
    assert list(init.prompt_tokens) == agent.state.committed


def test_fallback_disabled_raises_transport_fatal():
    agent = _agent(gamma=2, max_retries=0, threshold=1, fallback=False)
    _drafted(agent, 1, 0.5, 0.0)
    _drafted(agent, 2, 0.5, 1.0)
    with pytest.raises(TransportFatal):
        agent.step(TimeoutFired(agent.state.in_flight.timer_id), 101.0)


def test_abandon_then_fresh_request():
    agent = _agent(gamma=2, max_retries=0, threshold=5)
    _drafted(agent, 1, 0.5, 0.0)
    first = _sent_request(_drafted(agent, 2, 0.5, 1.0))
    actions = agent.step(TimeoutFired(agent.state.in_flight.timer_id), 101.0)
    fresh = _sent_request(actions)
    assert fresh.request_id != first.request_id
    assert fresh.base_position == first.base_position
    assert agent.state.consecutive_failures == 1


def test_stale_response_dropped_silently():
    agent = _agent(gamma=2)
    _drafted(agent, 1, 0.5, 0.0)
    req = _sent_request(_drafted(agent, 2, 0.5, 1.0))
    bogus = VerifyResponse(req.session_id, req.request_id + 999, 2, None)
    assert agent.step(ResponseArrived(bogus), 2.0) == []
    assert agent.state.committed == [0]


def test_single_in_flight_invariant():
    agent = _agent(gamma=1)
    actions = _drafted(agent, 1, 0.5, 0.0)
    req = _sent_request(actions)
    # Drafting continues but never produces a second outstanding request.
    for t in (2, 3, 4):
        for action in _drafted(agent, t, 0.5, float(t)):
            assert not isinstance(action, SendRequest)
    assert agent.state.in_flight.latest_id == req.request_id


def test_max_tokens_zero_is_immediately_done():
    agent = _agent(max_tokens=0)
    assert agent.state.done
    assert agent.step(TokenDrafted(1, 0.5, -1), 0.0) == []


def test_eos_forces_block_and_stops_drafting():
    draft = ConstantModel([0.25] * 4)
    agent = DeviceAgent(
        prompt=(0,),
        draft=draft,
        drafting=FixedLength(4),
        reliability=ReliabilityPolicy(timeout_ms=100.0),
        limits=SessionLimits(max_tokens=100, eos=3),
        draft_stream=RngStream.derive(0, "draft", 0),
    )
    actions = agent.step(TokenDrafted(3, 0.5, -1), 0.0)
    req = _sent_request(actions)  # eos forces an immediate single-token block
    assert req.tokens == (3,)
    assert not agent.wants_draft()
    agent.step(ResponseArrived(
        VerifyResponse(req.session_id, req.request_id, 1, None)), 1.0)
    assert agent.state.done


def test_emission_is_append_only_prefix_consistent():
    agent = _agent(gamma=2)
    seen = []
    for round_idx in range(5):
        _drafted(agent, 1, 0.5, 0.0)
        actions = _drafted(agent, 2, 0.5, 1.0)
        req = _sent_request(actions)
        accepted = 2 if round_idx % 2 == 0 else 1
        corrective = None if accepted == 2 else 2
        actions = agent.step(
            ResponseArrived(VerifyResponse(req.session_id, req.request_id,
                                           accepted, corrective)), 2.0)
        prev = list(seen)
        for action in actions:
            if isinstance(action, EmitTokens):
                seen.extend(t.token for t in action.tokens)
        assert seen[: len(prev)] == prev
    assert [e.token for e in agent.state.emitted] == seen
