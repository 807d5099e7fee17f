"""End-to-end pipeline runs over the scenario templates: alert emission,
set lifecycle across windows, reduction/survival properties, determinism,
and the stage containment contract."""

import pytest

from provwatch.config import PipelineConfig
from provwatch.correlator import QUEUE_PRIMARY, QUEUE_SECONDARY
from provwatch.ingest import LogEvent
from provwatch.pipeline import PipelineError, run_detection, train_baseline
from provwatch.scenario import (
    benign_only,
    cadets_like,
    generate,
    mixed,
    theia_like,
)

SEED = 11


def run_template(spec, seed=SEED, **overrides):
    run = generate(spec, seed=seed)
    cfg = PipelineConfig().override(
        window_length_ns=spec.window_length_ns,
        window_step_ns=spec.window_step_ns,
        alert_threshold=spec.alert_threshold,
        **overrides,
    )
    model = train_baseline(cfg, run.train_events)
    return run, cfg, run_detection(cfg, model, run.test_events)


@pytest.fixture(scope="module")
def theia_run():
    return run_template(theia_like())


@pytest.fixture(scope="module")
def cadets_run():
    return run_template(cadets_like())


@pytest.fixture(scope="module")
def mixed_run():
    return run_template(mixed())


# -- staged multi-day chain: partial detections merge into one alert ---------


def test_multiday_chain_emits_exactly_one_alert(theia_run):
    run, _, result = theia_run
    assert len(result.alerts) == 1
    alert = result.alerts[0]
    assert alert.window_index == 3
    assert alert.confidence >= 0.9
    assert {ev.tuple4() for ev in alert.events} == set(run.truth.tuples)


def test_multiday_alert_names_all_four_stages(theia_run):
    _, _, result = theia_run
    stages = set(result.alerts[0].kill_chain)
    assert stages == {
        "delivery", "exploitation", "installation", "command_and_control"
    }


def test_partial_detections_score_at_085(theia_run):
    _, _, result = theia_run
    w0 = [d for d in result.windows[0].detections if not d["suppressed"]]
    w3 = [d for d in result.windows[3].detections if not d["suppressed"]]
    assert any(d["score"] == 0.85 for d in w0)
    assert any(d["score"] == 0.85 for d in w3)
    # The overlapping final window re-detects the same events at the same
    # score and is suppressed wholesale.
    w4 = result.windows[4].detections
    assert w4 and all(d["suppressed"] for d in w4)


def test_set_history_walks_decay_then_reinforcement(theia_run):
    _, _, result = theia_run
    sets = result.store.active_sets()
    assert len(sets) == 1
    aset = sets[0]
    # Two quiet windows walk the score down, the day-3 merge reinforces it,
    # and the confirmed set is then exempt from further decay.
    assert aset.history == [(0, 0.85), (1, 0.825), (2, 0.8), (3, 0.9)]
    assert aset.score == 0.9
    assert aset.queue == QUEUE_PRIMARY
    assert aset.process_ids() == {"p-firefox", "p-clean", "p-profile", "p-mail"}


def test_reinforcement_recorded_with_before_and_after(theia_run):
    _, _, result = theia_run
    entries = result.windows[3].reinforcements
    assert any(
        e["from"] == 0.85 and e["to"] == 0.9 and e["moved"] for e in entries
    )


# -- benign persistence: decay to the secondary queue, no alerts -------------


def test_benign_chain_decays_without_alerting(cadets_run):
    _, _, result = cadets_run
    assert result.alerts == []
    sets = result.store.active_sets()
    assert len(sets) == 1
    aset = sets[0]
    assert aset.score == 0.75
    assert aset.queue == QUEUE_SECONDARY
    assert aset.history == [
        (0, 0.85), (1, 0.825), (2, 0.8), (3, 0.775), (4, 0.75)
    ]
    assert aset.process_ids() == {"p-imapd", "p-wget", "p-links"}


def test_decay_entries_step_down_each_quiet_window(cadets_run):
    _, _, result = cadets_run
    steps = []
    for w in result.windows[1:]:
        for e in w.decayed:
            steps.append((w.index, e["score"], e["queue"]))
    assert steps == [
        (1, 0.825, QUEUE_PRIMARY),
        (2, 0.8, QUEUE_PRIMARY),
        (3, 0.775, QUEUE_SECONDARY),
        (4, 0.75, QUEUE_SECONDARY),
    ]


# -- benign-only stream stays silent -----------------------------------------


def test_benign_only_run_produces_nothing():
    _, _, result = run_template(benign_only())
    assert result.alerts == []
    assert result.store.active_sets() == []
    for w in result.windows:
        assert w.infection_points == 0
        assert w.reduced_nodes == 0
        assert w.detections == []


# -- mixed workload: reduction, survival, and per-burst tracking -------------


def test_mixed_reduction_exceeds_ninety_percent(mixed_run):
    _, _, result = mixed_run
    total = sum(w.graph_nodes for w in result.windows)
    kept = sum(w.reduced_nodes for w in result.windows)
    assert total > 0
    assert 1 - kept / total >= 0.90


def test_mixed_labeled_events_survive_into_reduced_graphs(mixed_run):
    run, _, result = mixed_run
    survivors = result.reduced_tuple_union()
    missing = [t for t in run.truth.tuples if t not in survivors]
    assert missing == []


def test_mixed_tracks_one_set_per_burst(mixed_run):
    run, _, result = mixed_run
    sets = result.store.active_sets()
    assert len(sets) == len(run.spec.bursts)
    tracked_pids = set()
    for aset in sets:
        tracked_pids |= aset.process_ids()
    burst_pids = {s.process_id for b in run.spec.bursts for s in b.steps}
    assert burst_pids <= tracked_pids


def test_mixed_alerts_only_in_labeled_windows(mixed_run):
    run, _, result = mixed_run
    labeled = set(run.truth.window_indices)
    for alert in result.alerts:
        assert alert.window_index in labeled
        assert alert.confidence >= 0.8


def test_mixed_flagging_stays_sparse(mixed_run):
    _, _, result = mixed_run
    deduped = sum(w.deduped_events for w in result.windows)
    flagged = sum(w.flagged for w in result.windows)
    assert 0 < flagged / deduped < 0.2


def test_mixed_occupancy_stays_under_cap(mixed_run):
    _, cfg, result = mixed_run
    assert result.rolling.peak_nodes <= cfg.node_cap
    for w in result.windows:
        assert w.occupancy <= cfg.node_cap


# -- stage containment contract ----------------------------------------------


@pytest.mark.parametrize("fixture_name", ["theia_run", "mixed_run"])
def test_alert_events_nest_inside_sets_inside_reduced(fixture_name, request):
    _, _, result = request.getfixturevalue(fixture_name)
    survivors = result.reduced_tuple_union()
    sets = result.store.active_sets()
    for aset in sets:
        assert aset.tuples <= survivors
    for alert in result.alerts:
        alert_tuples = {ev.tuple4() for ev in alert.events}
        assert any(alert_tuples <= aset.tuples for aset in sets)


# -- determinism -------------------------------------------------------------


def test_identical_inputs_give_identical_output():
    spec = mixed(total_events=20_000, bursts=4)
    _, _, first = run_template(spec, seed=5)
    _, _, second = run_template(mixed(total_events=20_000, bursts=4), seed=5)
    assert [a.to_json_obj() for a in first.alerts] == [
        a.to_json_obj() for a in second.alerts
    ]
    assert first.store.checkpoint_obj() == second.store.checkpoint_obj()
    assert [w.to_json_obj() for w in first.windows] == [
        w.to_json_obj() for w in second.windows
    ]


# -- error context -----------------------------------------------------------


def test_window_failures_carry_the_window_index():
    base = 1_700_000_000_000_000_000
    train = [
        LogEvent(f"p{i}", "proc", "read", f"f{i}", f"/srv/{i}", base - 10_000 + i)
        for i in range(10)
        for _ in range(3)
    ]
    cfg = PipelineConfig().override(lof_k=3, unknown_event_policy="abort")
    model = train_baseline(cfg, sorted(train, key=lambda e: e.ts))
    stream = [
        LogEvent("p-x", "proc", "transmogrify", "s1", "203.0.113.5:80", base),
        LogEvent("p-x", "proc", "read", "f0", "/srv/0", base + 1),
    ]
    with pytest.raises(PipelineError, match="window 0"):
        run_detection(cfg, model, stream)
