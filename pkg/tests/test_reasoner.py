"""Rule backend behavior, the three-stage community analysis, tracing,
and the alert/tag/trace response split."""

import json

import pytest

from provwatch.ingest import LogEvent
from provwatch.provgraph import build_graph, find_infection_points, propagate_tags, prune
from provwatch.reasoner import (
    KILL_CHAIN_STAGES,
    AnalysisFailed,
    ChainAnalysis,
    RemoteBackend,
    StubBackend,
    analyze_community,
    assemble_response,
    extract_process_chain,
    trace,
)

import oracles
from graph_fixtures import random_graph_events, staged_intrusion_window


def ev(pid, pname, etype, oid, odata="", ts=0):
    return LogEvent(pid, pname, etype, oid, odata, ts)


@pytest.fixture(scope="module")
def backend():
    return StubBackend.from_file()


# -- rule matching -----------------------------------------------------------


def test_stage_signatures_cover_each_stage(backend):
    cases = {
        "delivery": ev("p1", "nginx", "recv", "s1", "203.0.113.5:443"),
        "exploitation": ev("p1", "firefox", "fork", "p2"),
        "installation": ev("p1", "sh", "write", "f1", "/etc/cron.d/job"),
        "command_and_control": ev("p1", "sh", "connect", "s1", "198.51.100.7:8443"),
        "exfiltration": ev("p1", "sh", "send", "s1", "203.0.113.80:443"),
    }
    for stage, event in cases.items():
        assert backend._stage_hits(event) == [stage]


def test_exec_payload_counts_as_installation(backend):
    assert backend._stage_hits(ev("p1", "sh", "exec", "f1", "/tmp/payload.so")) == [
        "installation"
    ]
    assert backend._stage_hits(ev("p1", "sh", "exec", "f1", "/tmp/notes.txt")) == []


def test_internal_addresses_never_match_network_stages(backend):
    for addr in ("10.0.0.5:80", "192.168.1.9:443", "172.16.2.2:22", "127.0.0.1:631"):
        assert backend._stage_hits(ev("p1", "sh", "recv", "s1", addr)) == []
        assert backend._stage_hits(ev("p1", "sh", "connect", "s1", addr)) == []


def test_fork_by_ordinary_process_is_not_exploitation(backend):
    assert backend._stage_hits(ev("p1", "make", "fork", "p2")) == []


def test_known_behavior_orders_by_first_appearance(backend):
    logs = [
        ev("p-b", "clean", "read", "f1", "/tmp/x", 5),
        ev("p-a", "firefox", "recv", "s1", "203.0.113.9:443", 10),
        ev("p-c", "bash", "read", "f2", "/tmp/y", 15),
    ]
    assert backend.check_known_behavior(logs) == ["p-b", "p-a"]


def test_behavior_report_mentions_protected_path(backend):
    logs = [ev("p1", "updater", "write", "f1", "/usr/bin/sshd", 1)]
    text = backend.analyze_behavior("p1", logs)
    assert "/usr/bin/sshd" in text
    assert backend.analyze_behavior("p1", [ev("p1", "updater", "write", "f2", "/tmp/a", 1)]) == ""


# -- chain scoring -----------------------------------------------------------


def chain_with_stages(n):
    pool = [
        ev("p1", "imapd", "recv", "s1", "203.0.113.9:993", 10),
        ev("p1", "imapd", "fork", "p2", "", 20),
        ev("p2", "wget", "write", "f1", "/etc/rc.local", 30),
        ev("p2", "wget", "connect", "s2", "203.0.113.10:80", 40),
        ev("p2", "wget", "send", "s3", "203.0.113.11:443", 50),
    ]
    return pool[:n]


@pytest.mark.parametrize(
    "stages,score", [(0, 0.7), (1, 0.75), (2, 0.8), (3, 0.85), (4, 0.9), (5, 0.95)]
)
def test_score_climbs_per_distinct_stage(backend, stages, score):
    chain = chain_with_stages(stages)
    if stages == 0:
        chain = [ev("p1", "clean", "read", "f1", "/tmp/x", 1)]
    verdict = backend.analyze_chain(chain)
    assert verdict.score == score


def test_six_signature_hits_cap_at_five_stages(backend):
    chain = chain_with_stages(5) + [
        ev("p2", "wget", "recv", "s4", "203.0.113.12:80", 60)
    ]
    assert backend.analyze_chain(chain).score == 0.95


def test_repeated_stage_does_not_raise_score(backend):
    twice = chain_with_stages(1) + [
        ev("p1", "imapd", "recv", "s9", "203.0.113.77:993", 99)
    ]
    assert backend.analyze_chain(twice).score == 0.75


def test_kill_chain_maps_stages_to_chain_indices(backend):
    chain = chain_with_stages(5)
    verdict = backend.analyze_chain(chain)
    assert verdict.kill_chain == {
        "delivery": (0,),
        "exploitation": (1,),
        "installation": (2,),
        "command_and_control": (3,),
        "exfiltration": (4,),
    }
    assert tuple(verdict.kill_chain) == KILL_CHAIN_STAGES


def test_iocs_collect_addresses_and_dropped_paths(backend):
    verdict = backend.analyze_chain(chain_with_stages(4))
    assert "203.0.113.9:993" in verdict.iocs
    assert "/etc/rc.local" in verdict.iocs


# -- community analysis flow -------------------------------------------------


def community_logs():
    return [
        ev("p-ff", "firefox", "recv", "sock-1", "203.0.113.9:443", 10),
        ev("p-ff", "firefox", "fork", "p-clean", "", 20),
        ev("p-clean", "clean", "write", "f-hook", "/etc/firefox/hooks/upd.so", 30),
        ev("p-other", "bash", "read", "f-hook", "/etc/firefox/hooks/upd.so", 35),
        ev("p-clean", "clean", "fork", "p-profile", "", 40),
        ev("p-profile", "profile", "write", "f-tmp", "/tmp/profile.dat", 50),
    ]


def test_analysis_returns_chain_and_stage_map(backend):
    logs = community_logs()
    result = analyze_community(
        3, logs, ["p-ff", "p-clean", "p-profile", "p-other"], backend
    )
    assert result is not None
    assert result.community_id == 3
    assert result.score == 0.85
    assert result.tagged == ("p-ff", "p-clean", "p-profile")
    assert set(result.kill_chain) == {"delivery", "exploitation", "installation"}
    assert [e.ts for e in result.chain] == [10, 20, 30, 35, 40, 50]
    assert set(result.temporal_patterns) == {"p-ff", "p-clean", "p-profile"}


def test_clean_community_yields_no_result(backend):
    logs = [
        ev("p1", "bash", "read", "f1", "/home/u/notes.txt", 1),
        ev("p1", "bash", "write", "f2", "/home/u/out.txt", 2),
    ]
    assert analyze_community(0, logs, ["p1"], backend) is None


def test_suspects_outside_community_are_ignored(backend):
    logs = community_logs()
    assert analyze_community(0, logs, ["p-other"], backend) is None


def test_empty_logs_short_circuit(backend):
    assert analyze_community(0, [], ["p1"], backend) is None


def test_chain_links_through_shared_objects():
    logs = [
        ev("p-x", "clean", "write", "f-drop", "/tmp/drop", 10),
        ev("p-y", "bash", "read", "f-drop", "/tmp/drop", 20),
        ev("p-z", "bash", "read", "f-other", "/tmp/other", 30),
    ]
    chain = extract_process_chain(["p-x"], {}, logs)
    assert [e.process_id for e in chain] == ["p-x", "p-y"]


def test_chain_includes_fork_into_suspect():
    logs = [
        ev("p-parent", "firefox", "fork", "p-kid", "", 10),
        ev("p-kid", "clean", "write", "f1", "/etc/x", 20),
    ]
    chain = extract_process_chain(["p-kid"], {}, logs)
    assert [e.ts for e in chain] == [10, 20]


def test_chain_deduplicates_repeated_tuples():
    logs = [
        ev("p-x", "clean", "read", "f1", "/tmp/a", 10),
        ev("p-x", "clean", "read", "f1", "/tmp/a", 10),
    ]
    assert len(extract_process_chain(["p-x"], {}, logs)) == 1


# -- tracing -----------------------------------------------------------------


def reduced_from(events):
    pg = build_graph(events)
    tags = propagate_tags(pg, find_infection_points(pg))
    return prune(pg, tags)


def test_trace_matches_closure_oracle_on_staged_window():
    events = staged_intrusion_window()
    reduced = reduced_from(events)
    closure, traced = trace(reduced, ["S2"])
    edges = [
        (u, v) for u, v, _ in reduced.pg.g.edges(data=True)
    ]
    assert closure == oracles.closure_brute(edges, {"S2"})
    for t in traced:
        assert t.process_id in closure or t.object_id in closure


def test_trace_matches_closure_oracle_on_random_graphs():
    import random

    rng = random.Random(404)
    for _ in range(25):
        events, _, edges, infection = random_graph_events(rng, max_nodes=30)
        if not events:
            continue
        reduced = reduced_from(events)
        nodes = list(reduced.pg.g.nodes)
        if not nodes:
            continue
        seeds = set(rng.sample(nodes, k=min(2, len(nodes))))
        closure, traced = trace(reduced, sorted(seeds))
        redges = [(u, v) for u, v, _ in reduced.pg.g.edges(data=True)]
        assert closure == oracles.closure_brute(redges, seeds)
        expected = sorted(
            (d["event"] for u, v, d in reduced.pg.g.edges(data=True)
             if u in closure and v in closure),
            key=lambda e: (e.ts, e.tuple4()),
        )
        assert traced == expected


def test_trace_ignores_unknown_seeds():
    reduced = reduced_from(staged_intrusion_window())
    closure, traced = trace(reduced, ["nope"])
    assert closure == set() and traced == []


# -- response assembly -------------------------------------------------------


def result_with_score(score, reduced):
    chain = tuple(
        sorted((d["event"] for _, _, d in reduced.pg.g.edges(data=True)),
               key=lambda e: (e.ts, e.tuple4()))
    )
    return dict(
        community_id=0,
        score=score,
        summary="test chain",
        tagged=("S1", "S2"),
        temporal_patterns={"S1": "odd"},
        chain=chain,
        kill_chain={"delivery": (0,)},
        iocs=("203.0.113.9:443",),
    )


def test_alert_band_emits_alert_with_tags_and_trace():
    from provwatch.reasoner import AnalysisResult

    reduced = reduced_from(staged_intrusion_window())
    result = AnalysisResult(**result_with_score(0.85, reduced))
    resp = assemble_response(result, reduced, window_index=4, alert_threshold=0.8)
    assert resp.alert is not None
    assert resp.alert.confidence == 0.85
    assert resp.alert.window_index == 4
    assert resp.attack_set.tuples
    assert resp.attack_set.creation_window == 4
    assert set(resp.tag_scores.values()) == {0.85}


def test_track_band_skips_alert_but_keeps_trace():
    from provwatch.reasoner import AnalysisResult

    reduced = reduced_from(staged_intrusion_window())
    result = AnalysisResult(**result_with_score(0.75, reduced))
    resp = assemble_response(result, reduced, window_index=1, alert_threshold=0.8)
    assert resp.alert is None
    assert resp.attack_set.score == 0.75
    assert resp.tag_scores


def test_below_floor_is_rejected():
    from provwatch.reasoner import AnalysisResult

    reduced = reduced_from(staged_intrusion_window())
    result = AnalysisResult(**result_with_score(0.5, reduced))
    with pytest.raises(ValueError):
        assemble_response(result, reduced, window_index=0)


def test_alert_json_shape():
    from provwatch.reasoner import AnalysisResult

    reduced = reduced_from(staged_intrusion_window())
    result = AnalysisResult(**result_with_score(0.9, reduced))
    resp = assemble_response(result, reduced, window_index=2)
    obj = resp.alert.to_json_obj()
    assert set(obj) == {
        "window", "confidence", "description", "processes",
        "events", "kill_chain", "iocs",
    }
    assert obj["window"] == 2
    assert all(set(e) == {"pid", "pname", "event", "oid", "odata", "ts"}
               for e in obj["events"])
    json.dumps(obj)


# -- remote backend ----------------------------------------------------------


class ScriptedTransport:
    def __init__(self, replies):
        self.replies = list(replies)
        self.payloads = []

    def __call__(self, payload):
        self.payloads.append(payload)
        reply = self.replies.pop(0)
        if isinstance(reply, Exception):
            raise reply
        return reply


def remote(replies, retries=1):
    transport = ScriptedTransport(replies)
    backend = RemoteBackend(
        "http://example.invalid/v1/chat/completions",
        "analyst-model",
        retries=retries,
        transport=transport,
    )
    return backend, transport


CHAIN = [
    ev("p1", "imapd", "recv", "s1", "203.0.113.9:993", 10),
    ev("p2", "wget", "connect", "s2", "203.0.113.10:80", 20),
]


def good_reply(score=0.85):
    return json.dumps({
        "score": score,
        "summary": "staged intrusion",
        "tagged_processes": ["p1", "p2"],
        "kill_chain": {"delivery": [0], "command_and_control": [1]},
        "iocs": ["203.0.113.9:993"],
    })


def test_remote_chain_analysis_round_trip():
    backend, transport = remote([good_reply()])
    verdict = backend.analyze_chain(CHAIN)
    assert verdict == ChainAnalysis(
        score=0.85,
        summary="staged intrusion",
        tagged=("p1", "p2"),
        kill_chain={"command_and_control": (1,), "delivery": (0,)},
        iocs=("203.0.113.9:993",),
    )
    payload = transport.payloads[0]
    assert payload["model"] == "analyst-model"
    assert payload["temperature"] == 0
    assert "p1(imapd)" in payload["messages"][0]["content"]


def test_remote_accepts_fenced_json():
    backend, _ = remote(["```json\n" + good_reply() + "\n```"])
    assert backend.analyze_chain(CHAIN).score == 0.85


def test_out_of_range_score_is_rejected_then_retried():
    backend, transport = remote([good_reply(1.3), good_reply(0.9)])
    assert backend.analyze_chain(CHAIN).score == 0.9
    assert len(transport.payloads) == 2


def test_hallucinated_process_exhausts_retries():
    bad = json.dumps({
        "score": 0.9, "summary": "x",
        "tagged_processes": ["p-ghost"], "kill_chain": {}, "iocs": [],
    })
    backend, _ = remote([bad, bad], retries=1)
    with pytest.raises(AnalysisFailed, match="not in chain"):
        backend.analyze_chain(CHAIN)


def test_trackable_score_requires_tagged_processes():
    bad = json.dumps({
        "score": 0.8, "summary": "x",
        "tagged_processes": [], "kill_chain": {}, "iocs": [],
    })
    backend, _ = remote([bad], retries=0)
    with pytest.raises(AnalysisFailed, match="tagged process"):
        backend.analyze_chain(CHAIN)


def test_bad_stage_and_bad_index_are_rejected():
    bad_stage = json.dumps({
        "score": 0.85, "summary": "x", "tagged_processes": ["p1"],
        "kill_chain": {"weaponization": [0]}, "iocs": [],
    })
    bad_index = json.dumps({
        "score": 0.85, "summary": "x", "tagged_processes": ["p1"],
        "kill_chain": {"delivery": [7]}, "iocs": [],
    })
    for bad in (bad_stage, bad_index):
        backend, _ = remote([bad], retries=0)
        with pytest.raises(AnalysisFailed):
            backend.analyze_chain(CHAIN)


def test_transport_errors_count_against_retries():
    backend, transport = remote(
        [RuntimeError("connection reset"), good_reply()], retries=1
    )
    assert backend.analyze_chain(CHAIN).score == 0.85
    backend2, _ = remote([RuntimeError("down"), RuntimeError("down")], retries=1)
    with pytest.raises(AnalysisFailed, match="transport error"):
        backend2.analyze_chain(CHAIN)


def test_non_json_reply_is_rejected():
    backend, _ = remote(["the chain looks malicious to me"], retries=0)
    with pytest.raises(AnalysisFailed, match="not JSON"):
        backend.analyze_chain(CHAIN)


def test_remote_known_behavior_screens_ghosts():
    ok = json.dumps({"suspicious_processes": ["p1"]})
    ghost = json.dumps({"suspicious_processes": ["p9"]})
    backend, _ = remote([ghost, ok], retries=1)
    assert backend.check_known_behavior(CHAIN) == ["p1"]


def test_remote_behavior_returns_deviation_text():
    backend, transport = remote([json.dumps({"deviation": "talks to 203.0.113.9"})])
    text = backend.analyze_behavior("p1", CHAIN[:1])
    assert text == "talks to 203.0.113.9"
    assert "p1" in transport.payloads[0]["messages"][0]["content"]


def test_integer_score_is_accepted_and_clamped():
    reply = json.dumps({
        "score": 1, "summary": "x", "tagged_processes": ["p1"],
        "kill_chain": {}, "iocs": [],
    })
    backend, _ = remote([reply])
    assert backend.analyze_chain(CHAIN).score == 1.0


def test_boolean_score_is_rejected():
    reply = json.dumps({
        "score": True, "summary": "x", "tagged_processes": ["p1"],
        "kill_chain": {}, "iocs": [],
    })
    backend, _ = remote([reply], retries=0)
    with pytest.raises(AnalysisFailed, match="must be a number"):
        backend.analyze_chain(CHAIN)
