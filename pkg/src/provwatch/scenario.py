"""Synthetic workload and intrusion generation.

Scenarios produce three artifacts: a benign-only training stream, a
test stream with zero or more staged intrusions mixed into background
noise, and the ground truth labelling every injected event and the
windows they fall in.  Benign activity is drawn from a finite pool of
service profiles so a baseline fitted on the training stream considers
the test background ordinary, while injected chains use identifiers
and endpoints the baseline has never seen.

Three templates mirror the shapes the engine has to handle: a slow
two-burst intrusion days apart (``theia_like``), a single burst that
goes quiet (``cadets_like``), and a large mixed stream with several
full chains (``mixed``).
"""

from __future__ import annotations

import json
import random
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .ingest import (
    DEFAULT_WINDOW_LENGTH_NS,
    DEFAULT_WINDOW_STEP_NS,
    NS_PER_MINUTE,
    NS_PER_SECOND,
    LogEvent,
    serialize_event,
    windows_for_events,
)

NS_PER_HOUR = 60 * NS_PER_MINUTE

# arbitrary but fixed epoch for generated timestamps
BASE_TS_NS = 1_700_000_000 * NS_PER_SECOND

TRUTH_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Activity:
    """One repeatable benign action of a service profile."""

    event_type: str
    object_id: str
    object_data: str


@dataclass(frozen=True)
class BenignProfile:
    process_id: str
    process_name: str
    activities: tuple[Activity, ...]


@dataclass(frozen=True)
class AttackStep:
    offset_ns: int
    process_id: str
    process_name: str
    event_type: str
    object_id: str
    object_data: str


@dataclass(frozen=True)
class AttackBurst:
    name: str
    start_ns: int  # relative to the scenario base timestamp
    steps: tuple[AttackStep, ...]


@dataclass(frozen=True)
class GroundTruth:
    """Labels for one generated test stream."""

    tuples: tuple[tuple[str, str, str, int], ...]
    window_indices: tuple[int, ...]
    window_length_ns: int
    window_step_ns: int
    window_count: int = 0
    attacks: tuple[tuple[str, tuple[tuple[str, str, str, int], ...]], ...] = ()

    def to_json_obj(self) -> dict:
        return {
            "format_version": TRUTH_FORMAT_VERSION,
            "window_length_ns": self.window_length_ns,
            "window_step_ns": self.window_step_ns,
            "window_count": self.window_count,
            "events": [list(t) for t in self.tuples],
            "windows": list(self.window_indices),
            "attacks": [
                {"name": name, "events": [list(t) for t in tuples]}
                for name, tuples in self.attacks
            ],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_json_obj(), sort_keys=True, indent=1) + "\n"
        )

    @classmethod
    def load(cls, path: str | Path) -> "GroundTruth":
        obj = json.loads(Path(path).read_text())
        if obj.get("format_version") != TRUTH_FORMAT_VERSION:
            raise RuntimeError(
                f"ground truth format {obj.get('format_version')!r} unsupported"
            )
        return cls(
            tuples=tuple((p, e, o, int(t)) for p, e, o, t in obj["events"]),
            window_indices=tuple(int(w) for w in obj["windows"]),
            window_length_ns=int(obj["window_length_ns"]),
            window_step_ns=int(obj["window_step_ns"]),
            window_count=int(obj.get("window_count", 0)),
            attacks=tuple(
                (
                    entry["name"],
                    tuple((p, e, o, int(t)) for p, e, o, t in entry["events"]),
                )
                for entry in obj.get("attacks", [])
            ),
        )


@dataclass
class ScenarioSpec:
    name: str
    duration_ns: int
    benign_events: int
    train_events: int
    train_span_ns: int
    profiles: tuple[BenignProfile, ...]
    train_only: tuple[BenignProfile, ...] = ()
    bursts: tuple[AttackBurst, ...] = ()
    window_length_ns: int = DEFAULT_WINDOW_LENGTH_NS
    window_step_ns: int = DEFAULT_WINDOW_STEP_NS
    alert_threshold: float = 0.8
    base_ts_ns: int = BASE_TS_NS

    def validate(self) -> None:
        if self.duration_ns <= 0 or self.train_span_ns <= 0:
            raise ValueError("scenario spans must be positive")
        if self.benign_events <= 0 or self.train_events <= 0:
            raise ValueError("event budgets must be positive")
        if not self.profiles:
            raise ValueError("a scenario needs at least one benign profile")
        for burst in self.bursts:
            if not 0 <= burst.start_ns < self.duration_ns:
                raise ValueError(f"burst {burst.name!r} starts outside the scenario")
            if not burst.steps:
                raise ValueError(f"burst {burst.name!r} has no steps")


@dataclass
class ScenarioRun:
    spec: ScenarioSpec
    train_events: list[LogEvent]
    test_events: list[LogEvent]
    truth: GroundTruth
    stats: dict = field(default_factory=dict)


def _benign_stream(
    rng: random.Random,
    profiles: tuple[BenignProfile, ...],
    start_ns: int,
    span_ns: int,
    count: int,
) -> list[LogEvent]:
    slot = span_ns / count
    events = []
    for i in range(count):
        profile = rng.choice(profiles)
        act = rng.choice(profile.activities)
        ts = start_ns + int(i * slot + rng.random() * slot)
        events.append(
            LogEvent(
                process_id=profile.process_id,
                process_name=profile.process_name,
                event_type=act.event_type,
                object_id=act.object_id,
                object_data=act.object_data,
                ts=ts,
            )
        )
    return events


def _sorted(events: list[LogEvent]) -> list[LogEvent]:
    return sorted(events, key=lambda ev: (ev.ts, ev.process_id, ev.event_type, ev.object_id))


def generate(spec: ScenarioSpec, seed: int) -> ScenarioRun:
    """Produce training stream, test stream, and ground truth."""
    spec.validate()
    rng = random.Random(seed)

    train_pool = spec.profiles + spec.train_only
    train_start = spec.base_ts_ns - spec.train_span_ns - NS_PER_HOUR
    train = _benign_stream(rng, train_pool, train_start, spec.train_span_ns, spec.train_events)

    test = _benign_stream(rng, spec.profiles, spec.base_ts_ns, spec.duration_ns, spec.benign_events)
    labels = []
    per_burst: list[tuple[str, tuple[tuple[str, str, str, int], ...]]] = []
    for burst in spec.bursts:
        burst_labels = []
        for step in burst.steps:
            ts = spec.base_ts_ns + burst.start_ns + step.offset_ns
            test.append(
                LogEvent(
                    process_id=step.process_id,
                    process_name=step.process_name,
                    event_type=step.event_type,
                    object_id=step.object_id,
                    object_data=step.object_data,
                    ts=ts,
                )
            )
            burst_labels.append((step.process_id, step.event_type, step.object_id, ts))
        labels.extend(burst_labels)
        per_burst.append((burst.name, tuple(burst_labels)))

    test = _sorted(test)
    windows = windows_for_events(test, spec.window_length_ns, spec.window_step_ns)
    labelled_windows = tuple(
        w.index for w in windows if any(w.contains(ts) for _, _, _, ts in labels)
    )
    truth = GroundTruth(
        tuples=tuple(sorted(labels, key=lambda t: (t[3], t[0], t[1], t[2]))),
        window_indices=labelled_windows,
        window_length_ns=spec.window_length_ns,
        window_step_ns=spec.window_step_ns,
        window_count=len(windows),
        attacks=tuple(per_burst),
    )
    total = len(test)
    stats = {
        "scenario": spec.name,
        "seed": seed,
        "train_events": len(train),
        "test_events": total,
        "attack_events": len(labels),
        "attack_fraction": len(labels) / total if total else 0.0,
        "windows": len(windows),
        "attack_windows": len(labelled_windows),
    }
    return ScenarioRun(spec=spec, train_events=_sorted(train), test_events=test, truth=truth, stats=stats)


def write_run(run: ScenarioRun, outdir: str | Path) -> dict[str, Path]:
    """Write train/test streams, ground truth, and generator stats."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "train": out / "train.jsonl",
        "test": out / "test.jsonl",
        "truth": out / "ground_truth.json",
        "stats": out / "scenario_stats.json",
        "config": out / "config.toml",
    }
    with paths["train"].open("w") as fh:
        for ev in run.train_events:
            fh.write(serialize_event(ev) + "\n")
    with paths["test"].open("w") as fh:
        for ev in run.test_events:
            fh.write(serialize_event(ev) + "\n")
    run.truth.save(paths["truth"])
    paths["stats"].write_text(json.dumps(run.stats, sort_keys=True, indent=1) + "\n")
    paths["config"].write_text(
        "\n".join(
            [
                f"window_length_ns = {run.spec.window_length_ns}",
                f"window_step_ns = {run.spec.window_step_ns}",
                f"alert_threshold = {run.spec.alert_threshold}",
            ]
        )
        + "\n"
    )
    return paths


# -- benign building blocks --------------------------------------------------


def _core_profiles() -> tuple[BenignProfile, ...]:
    """Service mix shared by the scenario templates: file churn, internal
    networking, and fork chains, all on fixed identifiers."""
    return (
        BenignProfile(
            "p-backupd", "backupd",
            (
                Activity("read", "f-docs-report", "/home/alice/docs/report.txt"),
                Activity("read", "f-docs-notes", "/home/alice/docs/notes.txt"),
                Activity("write", "f-backup-tar", "/backup/daily.tar"),
                Activity("read", "f-backup-conf", "/etc/backup.conf"),
            ),
        ),
        BenignProfile(
            "p-pgserve", "pgserve",
            (
                Activity("read", "f-pg-base", "/var/lib/pg/base.dat"),
                Activity("write", "f-pg-base", "/var/lib/pg/base.dat"),
                Activity("write", "f-pg-wal", "/var/lib/pg/wal.dat"),
                Activity("recv", "s-pg-client", "10.0.1.8:5432"),
                Activity("send", "s-pg-client", "10.0.1.8:5432"),
            ),
        ),
        BenignProfile(
            "p-logrot", "logrotated",
            (
                Activity("read", "f-syslog", "/var/log/syslog"),
                Activity("write", "f-syslog-1", "/var/log/syslog.1"),
                Activity("fork", "p-gzip", ""),
            ),
        ),
        BenignProfile(
            "p-gzip", "gzip",
            (
                Activity("read", "f-syslog-1", "/var/log/syslog.1"),
                Activity("write", "f-syslog-gz", "/var/log/syslog.1.gz"),
            ),
        ),
        BenignProfile(
            "p-nfsd", "nfsd",
            (
                Activity("recv", "s-nfs-peer", "192.168.1.20:2049"),
                Activity("read", "f-share-data", "/export/share/data.db"),
                Activity("write", "f-share-lock", "/export/share/tmp.lock"),
            ),
        ),
        BenignProfile(
            "p-updated", "updated",
            (
                Activity("connect", "s-mirror", "10.0.0.3:8080"),
                Activity("read", "f-update-db", "/var/cache/update.db"),
                Activity("write", "f-update-db", "/var/cache/update.db"),
            ),
        ),
        BenignProfile(
            "p-mailq", "mailq",
            (
                Activity("read", "f-mail-queue", "/var/spool/mail/queue"),
                Activity("write", "f-mail-queue", "/var/spool/mail/queue"),
                Activity("send", "s-smtp-relay", "192.168.1.25:25"),
            ),
        ),
    )


def _wide_profiles(services: int, files_per: int) -> tuple[BenignProfile, ...]:
    """Programmatic profile pool for the large mixed scenario."""
    profiles = []
    for i in range(services):
        acts = []
        for j in range(files_per):
            oid = f"f-svc{i}-{j}"
            acts.append(Activity("read", oid, f"/srv/app{i}/data{j}.db"))
            acts.append(Activity("write", oid, f"/srv/app{i}/data{j}.db"))
        acts.append(Activity("recv", f"s-svc{i}", f"10.0.3.{10 + i}:7070"))
        acts.append(Activity("send", f"s-svc{i}", f"10.0.3.{10 + i}:7070"))
        profiles.append(
            BenignProfile(f"p-svc{i}", f"appsvc{i}", tuple(acts))
        )
    return tuple(profiles)


# -- templates ---------------------------------------------------------------


def theia_like() -> ScenarioSpec:
    """Two-burst slow intrusion: browser compromise on day one, the
    implant phoning home two days later, sharing one process."""
    firefox = BenignProfile(
        "p-firefox", "firefox",
        (
            Activity("recv", "s-proxy", "10.0.2.5:443"),
            Activity("send", "s-proxy", "10.0.2.5:443"),
            Activity("read", "f-ff-cache", "/home/alice/.cache/pages.sqlite"),
            Activity("write", "f-ff-cache", "/home/alice/.cache/pages.sqlite"),
        ),
    )
    minute = NS_PER_MINUTE
    day1 = AttackBurst(
        "day1-compromise",
        start_ns=30 * minute,
        steps=(
            AttackStep(0, "p-firefox", "firefox", "recv", "s-drop-1", "203.0.113.9:443"),
            AttackStep(1 * minute, "p-firefox", "firefox", "fork", "p-clean", ""),
            AttackStep(2 * minute, "p-clean", "clean", "write", "f-hook", "/etc/firefox/hooks/upd.so"),
            AttackStep(3 * minute, "p-clean", "clean", "fork", "p-profile", ""),
            AttackStep(4 * minute, "p-profile", "profile", "write", "f-profdata", "/home/alice/.mozilla/profile.dat"),
        ),
    )
    day3 = AttackBurst(
        "day3-exfil-prep",
        start_ns=49 * NS_PER_HOUR,
        steps=(
            AttackStep(0, "p-profile", "profile", "recv", "s-drop-2", "203.0.113.40:8443"),
            AttackStep(1 * minute, "p-profile", "profile", "fork", "p-mail", ""),
            AttackStep(2 * minute, "p-mail", "mail", "write", "f-outbound", "/var/spool/outbound/batch.dat"),
            AttackStep(3 * minute, "p-mail", "mail", "connect", "s-drop-3", "203.0.113.41:443"),
        ),
    )
    return ScenarioSpec(
        name="theia_like",
        duration_ns=50 * NS_PER_HOUR,
        benign_events=6000,
        train_events=1500,
        train_span_ns=12 * NS_PER_HOUR,
        profiles=_core_profiles(),
        train_only=(firefox,),
        bursts=(day1, day3),
        window_length_ns=24 * NS_PER_HOUR,
        window_step_ns=12 * NS_PER_HOUR,
        alert_threshold=0.9,
    )


def cadets_like() -> ScenarioSpec:
    """One burst through a mail daemon, then silence: the tracked set
    should decay window by window instead of alerting."""
    imapd = BenignProfile(
        "p-imapd", "imapd",
        (
            Activity("recv", "s-imap-client", "192.168.1.30:993"),
            Activity("send", "s-imap-client", "192.168.1.30:993"),
            Activity("read", "f-inbox", "/var/mail/inbox"),
        ),
    )
    second = NS_PER_SECOND
    burst = AttackBurst(
        "imapd-downloader",
        start_ns=5 * NS_PER_MINUTE,
        steps=(
            AttackStep(0, "p-imapd", "imapd", "recv", "s-cad-1", "203.0.113.50:993"),
            AttackStep(20 * second, "p-imapd", "imapd", "fork", "p-wget", ""),
            AttackStep(40 * second, "p-wget", "wget", "connect", "s-cad-2", "203.0.113.51:80"),
            AttackStep(60 * second, "p-wget", "wget", "fork", "p-links", ""),
            AttackStep(80 * second, "p-links", "links", "recv", "s-cad-3", "203.0.113.52:80"),
        ),
    )
    return ScenarioSpec(
        name="cadets_like",
        duration_ns=74 * NS_PER_MINUTE,
        benign_events=600,
        train_events=800,
        train_span_ns=6 * NS_PER_HOUR,
        profiles=_core_profiles(),
        train_only=(imapd,),
        bursts=(burst,),
        alert_threshold=0.9,
    )


_MIXED_HOSTS = (
    "nginx", "httpd", "imapd", "sshd", "serviced", "browserd", "firefox", "wget",
)


def _mixed_burst(k: int, start_ns: int) -> AttackBurst:
    host_name = _MIXED_HOSTS[k % len(_MIXED_HOSTS)]
    host = f"p-host{k}"
    dropper = f"p-dropper{k}"
    stage2 = f"p-stage2-{k}"
    s = NS_PER_SECOND
    return AttackBurst(
        f"burst{k}",
        start_ns=start_ns,
        steps=(
            AttackStep(0, host, host_name, "recv", f"s-x1-{k}", f"203.0.113.{10 + k}:443"),
            AttackStep(30 * s, host, host_name, "fork", dropper, ""),
            AttackStep(60 * s, dropper, f"dropper{k}", "write", f"f-cron-{k}", f"/etc/cron.d/job{k}"),
            AttackStep(90 * s, dropper, f"dropper{k}", "exec", f"f-payload-{k}", f"/tmp/payload{k}.so"),
            AttackStep(120 * s, dropper, f"dropper{k}", "fork", stage2, ""),
            AttackStep(150 * s, dropper, f"dropper{k}", "write", f"f-stash-{k}", f"/tmp/.stash{k}.dat"),
            AttackStep(180 * s, stage2, "stage2", "read", f"f-stash-{k}", f"/tmp/.stash{k}.dat"),
            AttackStep(210 * s, stage2, "stage2", "connect", f"s-x2-{k}", f"198.51.100.{20 + k}:8443"),
            AttackStep(240 * s, stage2, "stage2", "send", f"s-x3-{k}", f"203.0.113.{60 + k}:443"),
        ),
    )


def mixed(total_events: int = 100_000, bursts: int = 8) -> ScenarioSpec:
    """Large mixed stream: full five-stage chains spread thinly through
    heavy benign churn, for reduction and recall measurements."""
    burst_list = tuple(
        _mixed_burst(k, NS_PER_HOUR + k * 2 * NS_PER_HOUR + k * 7 * NS_PER_MINUTE)
        for k in range(bursts)
    )
    attack_events = sum(len(b.steps) for b in burst_list)
    hosts = tuple(
        BenignProfile(
            f"p-host{k}", _MIXED_HOSTS[k % len(_MIXED_HOSTS)],
            (
                Activity("recv", f"s-host{k}-in", f"10.0.4.{10 + k}:443"),
                Activity("send", f"s-host{k}-in", f"10.0.4.{10 + k}:443"),
            ),
        )
        for k in range(bursts)
    )
    return ScenarioSpec(
        name="mixed",
        duration_ns=20 * NS_PER_HOUR,
        benign_events=total_events - attack_events,
        train_events=12_000,
        train_span_ns=6 * NS_PER_HOUR,
        profiles=_core_profiles() + _wide_profiles(services=10, files_per=6),
        train_only=hosts,
        bursts=burst_list,
    )


def benign_only() -> ScenarioSpec:
    """Background noise with no injected chains at all."""
    return ScenarioSpec(
        name="benign_only",
        duration_ns=4 * NS_PER_HOUR,
        benign_events=2000,
        train_events=800,
        train_span_ns=4 * NS_PER_HOUR,
        profiles=_core_profiles(),
    )


TEMPLATES = {
    "theia_like": theia_like,
    "cadets_like": cadets_like,
    "mixed": mixed,
    "benign_only": benign_only,
}


# -- declarative spec files --------------------------------------------------


def load_spec(path: str | Path) -> ScenarioSpec:
    """Read a scenario description from a TOML file.

    The file needs a ``[scenario]`` table and may add ``[[profiles]]``
    (with inline ``activities``) and ``[[bursts]]`` (with inline
    ``steps``).  A ``template`` key starts from a built-in template and
    applies overrides on top.
    """
    try:
        with open(path, "rb") as fh:
            obj = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ValueError(f"cannot read scenario spec {path}: {exc}") from exc
    table = obj.get("scenario")
    if not isinstance(table, dict):
        raise ValueError(f"{path}: missing [scenario] table")

    template = table.pop("template", None)
    if template is not None:
        if template not in TEMPLATES:
            raise ValueError(f"{path}: unknown template {template!r}")
        spec = TEMPLATES[template]()
    else:
        spec = ScenarioSpec(
            name=str(table.get("name", Path(path).stem)),
            duration_ns=0,
            benign_events=0,
            train_events=0,
            train_span_ns=0,
            profiles=(),
        )
    scalar_keys = {
        "name", "duration_ns", "benign_events", "train_events", "train_span_ns",
        "window_length_ns", "window_step_ns", "alert_threshold", "base_ts_ns",
    }
    for key, value in table.items():
        if key not in scalar_keys:
            raise ValueError(f"{path}: unknown scenario key {key!r}")
        setattr(spec, key, value)

    if "profiles" in obj:
        spec.profiles = tuple(
            BenignProfile(
                p["process_id"], p["process_name"],
                tuple(Activity(a["event_type"], a["object_id"], a.get("object_data", ""))
                      for a in p["activities"]),
            )
            for p in obj["profiles"]
        )
    if "bursts" in obj:
        spec.bursts = tuple(
            AttackBurst(
                b["name"], int(b["start_ns"]),
                tuple(
                    AttackStep(
                        int(s["offset_ns"]), s["process_id"], s["process_name"],
                        s["event_type"], s["object_id"], s.get("object_data", ""),
                    )
                    for s in b["steps"]
                ),
            )
            for b in obj["bursts"]
        )
    spec.validate()
    return spec
