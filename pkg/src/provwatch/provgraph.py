"""Provenance graph construction, taint spread, reduction, and grouping.

Nodes are processes, files, and sockets; every edge is one audit event
oriented in the direction the data moved.  Sockets reaching in from
outside the configured internal networks seed taint, which spreads
along data-flow edges through nodes that actually relay what they
receive.  Restricting the graph to tainted nodes gives the reduced
graph, and community detection over its undirected weight-collapsed
projection yields the units of behavior the reasoner scores.
"""

from __future__ import annotations

import ipaddress
import json
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import networkx as nx
from networkx.algorithms import community as nxcom

from .config import DEFAULT_INTERNAL_NETWORKS
from .ingest import LogEvent

# Data-flow orientation per event type: the listed kinds move data from
# the object into the process, everything else from the process out.
_OBJECT_TO_PROCESS = ("recv", "read", "accept")
_PROCESS_TO_OBJECT = ("send", "write", "connect", "fork", "exec")


class NodeType(str, Enum):
    PROCESS = "process"
    FILE = "file"
    SOCKET = "socket"


class UnknownEventTypeError(ValueError):
    pass


@dataclass
class ProvenanceGraph:
    """Typed multi-digraph over one window's filtered events.

    Node attributes: ``ntype`` (NodeType) and ``label`` (last seen
    process name or object data).  Edge attributes: the originating
    ``event`` plus ``ts`` for quick access.
    """

    g: nx.MultiDiGraph = field(default_factory=nx.MultiDiGraph)
    skipped_events: int = 0

    @property
    def node_count(self) -> int:
        return self.g.number_of_nodes()

    @property
    def edge_count(self) -> int:
        return self.g.number_of_edges()

    def node_type(self, node_id: str) -> NodeType:
        return self.g.nodes[node_id]["ntype"]

    def nodes_of_type(self, ntype: NodeType) -> list[str]:
        return sorted(
            n for n, data in self.g.nodes(data=True) if data["ntype"] == ntype
        )

    def events(self) -> list[LogEvent]:
        evs = [data["event"] for _, _, data in self.g.edges(data=True)]
        return sorted(evs, key=lambda ev: (ev.ts, ev.tuple4()))


def build_graph(
    events: Sequence[LogEvent], unknown_event_policy: str = "skip"
) -> ProvenanceGraph:
    """Assemble the typed multigraph from events.

    Node typing: anything that acts (or is forked) is a process; objects
    of socket events are sockets; remaining objects are files.  An
    identifier already known as a process keeps that type when it later
    shows up as an event object.
    """
    types: dict[str, NodeType] = {}
    for ev in events:
        types[ev.process_id] = NodeType.PROCESS
        if ev.event_type == "fork":
            types[ev.object_id] = NodeType.PROCESS
    for ev in events:
        if ev.object_id in types:
            continue
        if ev.event_type in ("connect", "accept", "send", "recv"):
            types[ev.object_id] = NodeType.SOCKET
        elif ev.event_type in ("read", "write", "exec"):
            types[ev.object_id] = NodeType.FILE

    pg = ProvenanceGraph()
    for ev in events:
        if ev.event_type in _OBJECT_TO_PROCESS:
            src, dst = ev.object_id, ev.process_id
        elif ev.event_type in _PROCESS_TO_OBJECT:
            src, dst = ev.process_id, ev.object_id
        else:
            if unknown_event_policy == "abort":
                raise UnknownEventTypeError(
                    f"no direction rule for event type {ev.event_type!r}"
                )
            pg.skipped_events += 1
            continue
        for node in (ev.process_id, ev.object_id):
            if node not in pg.g:
                pg.g.add_node(node, ntype=types[node], label="")
        pg.g.nodes[ev.process_id]["label"] = ev.process_name
        if types[ev.object_id] != NodeType.PROCESS and ev.object_data:
            pg.g.nodes[ev.object_id]["label"] = ev.object_data
        pg.g.add_edge(src, dst, event=ev, ts=ev.ts)
    return pg


# -- infection points --------------------------------------------------------


def _external_address(
    label: str, internal: Sequence[ipaddress._BaseNetwork]
) -> bool:
    """True when the label parses to an address outside every internal net.

    Labels look like ``ip``, ``ip:port``, or ``[ipv6]:port``.  Anything
    unparseable is treated as internal; taint should not start from a
    node whose address cannot be read.
    """
    host = label.strip()
    if host.startswith("["):
        host = host[1 : host.index("]")] if "]" in host else host[1:]
    elif host.count(":") == 1:
        host = host.split(":", 1)[0]
    try:
        addr = ipaddress.ip_address(host)
    except ValueError:
        return False
    return not any(addr in net for net in internal)


def find_infection_points(
    pg: ProvenanceGraph,
    internal_networks: Sequence[str] = DEFAULT_INTERNAL_NETWORKS,
) -> list[str]:
    """Sockets with an external address that feed data into a process."""
    internal = [ipaddress.ip_network(cidr) for cidr in internal_networks]
    points = []
    for node in pg.nodes_of_type(NodeType.SOCKET):
        if not _external_address(pg.g.nodes[node]["label"], internal):
            continue
        feeds_process = any(
            pg.node_type(dst) == NodeType.PROCESS for _, dst in pg.g.out_edges(node)
        )
        if feeds_process:
            points.append(node)
    return points


# -- taint propagation -------------------------------------------------------


@dataclass
class TagMap:
    """Tainted nodes with the infection points that seeded each tag and
    the earliest timestamp at which tainted data arrived."""

    tagged: dict[str, frozenset[str]]
    arrival: dict[str, int]

    def __contains__(self, node_id: str) -> bool:
        return node_id in self.tagged

    def __len__(self) -> int:
        return len(self.tagged)


def propagate_tags(
    pg: ProvenanceGraph,
    infection_points: Iterable[str],
    causal: bool = True,
) -> TagMap:
    """Spread taint from infection points along data-flow edges.

    Rules: an infection point always forwards along its outgoing edges;
    any node receiving over a tainted edge is tagged; a tagged
    non-socket node forwards iff it has at least one outgoing edge
    timestamped at or after its earliest tainted arrival (any outgoing
    edge in non-causal mode); tagged sockets are termini.  Arrival
    times only decrease and seed sets only grow, so the worklist
    reaches the least fixpoint.
    """
    g = pg.g
    infection = set(infection_points)
    seeds: dict[str, set[str]] = {s: {s} for s in infection if s in g}
    arrival: dict[str, int] = {}

    def forwards(node: str) -> bool:
        if node in infection:
            return True
        if node not in seeds or pg.node_type(node) == NodeType.SOCKET:
            return False
        if not causal:
            return g.out_degree(node) > 0
        arr = arrival.get(node)
        if arr is None:
            return False
        return any(data["ts"] >= arr for _, _, data in g.out_edges(node, data=True))

    queue = deque(sorted(seeds))
    queued = set(queue)
    while queue:
        u = queue.popleft()
        queued.discard(u)
        if not forwards(u):
            continue
        for _, v, data in g.out_edges(u, data=True):
            ts = data["ts"]
            changed = False
            if v not in seeds:
                seeds[v] = set()
                changed = True
            missing = seeds[u] - seeds[v]
            if missing:
                seeds[v] |= missing
                changed = True
            if v not in arrival or ts < arrival[v]:
                arrival[v] = ts
                changed = True
            if changed and v not in queued:
                queue.append(v)
                queued.add(v)
    return TagMap(
        tagged={n: frozenset(s) for n, s in seeds.items()},
        arrival=dict(arrival),
    )


# -- reduction ---------------------------------------------------------------


@dataclass
class ReducedGraph:
    """Restriction of the provenance graph to tagged nodes."""

    pg: ProvenanceGraph
    tags: TagMap
    pruned_nodes: tuple[str, ...]

    @property
    def node_count(self) -> int:
        return self.pg.node_count

    @property
    def edge_count(self) -> int:
        return self.pg.edge_count

    def __bool__(self) -> bool:
        return self.pg.node_count > 0

    def events(self) -> list[LogEvent]:
        return self.pg.events()


def prune(pg: ProvenanceGraph, tags: TagMap) -> ReducedGraph:
    """Drop every untagged node; surviving edges connect tagged pairs."""
    keep = [n for n in pg.g.nodes if n in tags]
    dropped = tuple(sorted(n for n in pg.g.nodes if n not in tags))
    sub = ProvenanceGraph(g=pg.g.subgraph(keep).copy())
    return ReducedGraph(pg=sub, tags=tags, pruned_nodes=dropped)


# -- communities -------------------------------------------------------------


@dataclass(frozen=True)
class CommunityGroup:
    """A cluster of suspicious nodes with its backing edge events."""

    community_id: int
    nodes: tuple[str, ...]
    modularity: float
    events: tuple[LogEvent, ...]

    def process_nodes(self, pg: ProvenanceGraph) -> tuple[str, ...]:
        return tuple(
            n for n in self.nodes if pg.node_type(n) == NodeType.PROCESS
        )


def _collapse(g: nx.MultiDiGraph) -> nx.Graph:
    """Undirected projection; parallel edges sum into integer weights."""
    proj = nx.Graph()
    proj.add_nodes_from(g.nodes)
    for u, v in g.edges():
        if u == v:
            continue
        if proj.has_edge(u, v):
            proj[u][v]["weight"] += 1.0
        else:
            proj.add_edge(u, v, weight=1.0)
    return proj


def detect_communities(reduced: ReducedGraph, seed: int = 7) -> list[CommunityGroup]:
    """Louvain partition of the reduced graph's undirected projection.

    The partition is canonicalized (members sorted, communities ordered
    by their smallest node) so downstream iteration order is stable.
    An edgeless projection yields singleton communities with Q = 0.
    """
    g = reduced.pg.g
    if g.number_of_nodes() == 0:
        return []
    proj = _collapse(g)
    if proj.number_of_edges() == 0:
        parts = [{n} for n in proj.nodes]
        q = 0.0
    else:
        parts = nxcom.louvain_communities(proj, weight="weight", seed=seed)
        q = nxcom.modularity(proj, parts, weight="weight")
    ordered = sorted((tuple(sorted(p)) for p in parts), key=lambda p: p[0])
    groups = []
    for idx, members in enumerate(ordered):
        node_set = set(members)
        evs = sorted(
            (
                data["event"]
                for u, v, data in g.edges(data=True)
                if u in node_set and v in node_set
            ),
            key=lambda ev: (ev.ts, ev.tuple4()),
        )
        groups.append(
            CommunityGroup(
                community_id=idx,
                nodes=members,
                modularity=float(q),
                events=tuple(evs),
            )
        )
    return groups


# -- exports -----------------------------------------------------------------


def write_edge_list(pg: ProvenanceGraph, fh: TextIO) -> None:
    """Line-oriented dump: src, src type, dst, dst type, event, ts."""
    rows = []
    for u, v, data in pg.g.edges(data=True):
        rows.append(
            (
                u,
                pg.node_type(u).value,
                v,
                pg.node_type(v).value,
                data["event"].event_type,
                data["ts"],
            )
        )
    for row in sorted(rows, key=lambda r: (r[5], r[0], r[2], r[4])):
        fh.write("\t".join(str(x) for x in row) + "\n")


def communities_to_json(groups: Sequence[CommunityGroup]) -> str:
    return json.dumps(
        {str(g.community_id): list(g.nodes) for g in groups}, sort_keys=True
    )


def write_communities(groups: Sequence[CommunityGroup], path: str | Path) -> None:
    Path(path).write_text(communities_to_json(groups) + "\n")
