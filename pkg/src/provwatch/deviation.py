"""Statistical deviation analysis over encoded provenance events.

Each deduplicated event becomes an integer (process, event, object)
code triple, standardized against the training distribution and scored
with the local outlier factor: the ratio of a point's local density to
the density of its nearest training neighbors.  Scores strictly above
the trained threshold mark the event as deviant, and deviant events
seed the behavior subgraphs handed to graph analysis.

The nearest-neighbor definitions follow the classic formulation:
the k-distance of a point is the distance to its k-th nearest training
neighbor, the neighborhood includes every point within that distance
(so ties can make it larger than k), and reachability distance smooths
each pairwise distance from below by the neighbor's own k-distance.
Pairwise distances are floored at a small epsilon so duplicate points
yield large finite densities instead of dividing by zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .ingest import Codebook, LogEvent, dedup

MODEL_FORMAT_VERSION = 1

# Floor applied to every pairwise distance; keeps the local reachability
# density finite for duplicate points.
DISTANCE_FLOOR = 1e-12

# Rows scored per chunk when the full query-by-train matrix would be large.
_CHUNK = 2048


class InsufficientBaselineError(RuntimeError):
    """Training data has too few distinct points for the requested k."""


@dataclass(frozen=True)
class AnomalyFlag:
    event: LogEvent
    score: float


@dataclass(frozen=True)
class LineageSubgraph:
    """One deviant process with its flagged events and one-hop fork family."""

    anchor: str
    parents: tuple[str, ...]
    children: tuple[str, ...]
    events: tuple[LogEvent, ...]


@dataclass(frozen=True)
class FilteredGraph:
    """Union of per-process lineage subgraphs for one window."""

    subgraphs: tuple[LineageSubgraph, ...]
    events: tuple[LogEvent, ...]
    node_ids: frozenset[str]

    def __bool__(self) -> bool:
        return bool(self.events)


def _floored_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return np.maximum(d, DISTANCE_FLOOR)


def _kdist_and_mask(d: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-row k-distance and the tie-inclusive neighborhood mask."""
    kd = np.partition(d, k - 1, axis=1)[:, k - 1]
    return kd, d <= kd[:, None]


def _lrd(d: np.ndarray, mask: np.ndarray, train_kdist: np.ndarray) -> np.ndarray:
    reach = np.maximum(train_kdist[None, :], d)
    total = np.where(mask, reach, 0.0).sum(axis=1)
    count = mask.sum(axis=1)
    return count / total


def _lof(mask: np.ndarray, train_lrd: np.ndarray, own_lrd: np.ndarray) -> np.ndarray:
    neighbor_sum = np.where(mask, train_lrd[None, :], 0.0).sum(axis=1)
    return neighbor_sum / mask.sum(axis=1) / own_lrd


@dataclass
class LofModel:
    """Trained deviation model: standardization, training densities, threshold.

    ``points`` holds the standardized training triples.  ``kdist`` and
    ``lrd`` cache each training point's k-distance and local reachability
    density so queries only need one distance block against the training
    set.  ``threshold`` is set at fit time so that exactly
    ceil(contamination * n) training points score strictly above it
    (assuming no score tie at the cut, which integer-code data can
    produce; ties flag fewer).
    """

    k: int
    contamination: float
    means: np.ndarray
    scales: np.ndarray
    constant_dims: tuple[int, ...]
    points: np.ndarray
    kdist: np.ndarray
    lrd: np.ndarray
    train_scores: np.ndarray
    threshold: float
    codebook: Codebook

    def standardize(self, raw: np.ndarray) -> np.ndarray:
        return (np.asarray(raw, dtype=np.float64) - self.means) / self.scales

    def score_codes(self, raw_triples: Sequence[tuple[int, int, int]]) -> np.ndarray:
        """Deviation scores for raw (not yet standardized) code triples."""
        if len(raw_triples) == 0:
            return np.empty(0, dtype=np.float64)
        q = self.standardize(np.asarray(raw_triples, dtype=np.float64))
        out = np.empty(len(q), dtype=np.float64)
        for lo in range(0, len(q), _CHUNK):
            block = q[lo : lo + _CHUNK]
            d = _floored_distances(block, self.points)
            _, mask = _kdist_and_mask(d, self.k)
            own = _lrd(d, mask, self.kdist)
            out[lo : lo + len(block)] = _lof(mask, self.lrd, own)
        return out

    def flag_count(self) -> int:
        return int(np.count_nonzero(self.train_scores > self.threshold))

    # -- persistence ---------------------------------------------------

    def save(self, path: str | Path) -> None:
        obj = {
            "format_version": MODEL_FORMAT_VERSION,
            "k": self.k,
            "contamination": self.contamination,
            "means": self.means.tolist(),
            "scales": self.scales.tolist(),
            "constant_dims": list(self.constant_dims),
            "points": self.points.tolist(),
            "kdist": self.kdist.tolist(),
            "lrd": self.lrd.tolist(),
            "train_scores": self.train_scores.tolist(),
            "threshold": self.threshold,
            "codebook": self.codebook.to_dict(),
        }
        Path(path).write_text(json.dumps(obj, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "LofModel":
        try:
            obj = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise RuntimeError(f"cannot read model {path}: {exc}") from exc
        version = obj.get("format_version")
        if version != MODEL_FORMAT_VERSION:
            raise RuntimeError(
                f"model format {version!r} unsupported (expected {MODEL_FORMAT_VERSION})"
            )
        return cls(
            k=int(obj["k"]),
            contamination=float(obj["contamination"]),
            means=np.asarray(obj["means"], dtype=np.float64),
            scales=np.asarray(obj["scales"], dtype=np.float64),
            constant_dims=tuple(obj["constant_dims"]),
            points=np.asarray(obj["points"], dtype=np.float64),
            kdist=np.asarray(obj["kdist"], dtype=np.float64),
            lrd=np.asarray(obj["lrd"], dtype=np.float64),
            train_scores=np.asarray(obj["train_scores"], dtype=np.float64),
            threshold=float(obj["threshold"]),
            codebook=Codebook.from_dict(obj["codebook"]),
        )


def fit_baseline(
    events: Sequence[LogEvent],
    k: int = 20,
    contamination: float = 0.1,
    codebook: Codebook | None = None,
) -> LofModel:
    """Fit the deviation model on a benign training stream.

    The stream is deduplicated, encoded, standardized per dimension
    (constant dimensions get scale 1 and are recorded), and scored
    against itself with each point excluded from its own neighborhood.
    """
    if not 0.0 < contamination < 1.0:
        raise ValueError("contamination must lie in (0, 1)")
    book = codebook if codebook is not None else Codebook()
    distinct = dedup(events)
    if len(distinct) < k + 1:
        raise InsufficientBaselineError(
            f"need at least {k + 1} distinct training events, have {len(distinct)}"
        )
    raw = np.asarray(book.encode(distinct), dtype=np.float64)
    means = raw.mean(axis=0)
    scales = raw.std(axis=0)
    constant = tuple(int(i) for i in np.flatnonzero(scales == 0.0))
    scales = np.where(scales == 0.0, 1.0, scales)
    pts = (raw - means) / scales

    d = _floored_distances(pts, pts)
    np.fill_diagonal(d, np.inf)
    kdist, mask = _kdist_and_mask(d, k)
    lrd = _lrd(d, mask, kdist)
    scores = _lof(mask, lrd, lrd)

    n = len(pts)
    m = int(np.ceil(contamination * n))
    ordered = np.sort(scores)
    threshold = float(ordered[n - m - 1]) if m < n else float(ordered[0]) - 1.0

    return LofModel(
        k=k,
        contamination=contamination,
        means=means,
        scales=scales,
        constant_dims=constant,
        points=pts,
        kdist=kdist,
        lrd=lrd,
        train_scores=scores,
        threshold=threshold,
        codebook=book,
    )


def flag_window(model: LofModel, events: Sequence[LogEvent]) -> list[AnomalyFlag]:
    """Score a window's deduplicated events; keep those above threshold.

    Events must already be deduplicated.  Encoding uses the model's
    codebook, so identifiers never seen in training receive fresh codes
    beyond the trained range and standardize far from the baseline.
    """
    if not events:
        return []
    triples = model.codebook.encode(events)
    scores = model.score_codes(triples)
    return [
        AnomalyFlag(event=ev, score=float(s))
        for ev, s in zip(events, scores)
        if s > model.threshold
    ]


def extract_lineage(
    flags: Sequence[AnomalyFlag], window_events: Sequence[LogEvent]
) -> FilteredGraph:
    """One subgraph per deviant process, merged into a single filtered set.

    A subgraph holds the process's flagged events plus the fork events
    that connect it to its parent (a fork whose object is the process)
    and children (forks the process performed).  Everything else in the
    window is dropped here; reachability-based pruning happens later on
    the built graph.
    """
    by_anchor: dict[str, list[LogEvent]] = {}
    for flag in flags:
        by_anchor.setdefault(flag.event.process_id, []).append(flag.event)

    forks_by_child: dict[str, list[LogEvent]] = {}
    forks_by_parent: dict[str, list[LogEvent]] = {}
    for ev in window_events:
        if ev.event_type == "fork":
            forks_by_child.setdefault(ev.object_id, []).append(ev)
            forks_by_parent.setdefault(ev.process_id, []).append(ev)

    subgraphs: list[LineageSubgraph] = []
    merged: dict[tuple[str, str, str, int], LogEvent] = {}
    nodes: set[str] = set()
    for anchor in sorted(by_anchor):
        own = sorted(by_anchor[anchor], key=lambda ev: ev.ts)
        parent_forks = forks_by_child.get(anchor, [])
        child_forks = forks_by_parent.get(anchor, [])
        events = sorted(own + parent_forks + child_forks, key=lambda ev: ev.ts)
        parents = tuple(sorted({ev.process_id for ev in parent_forks}))
        children = tuple(sorted({ev.object_id for ev in child_forks}))
        subgraphs.append(
            LineageSubgraph(
                anchor=anchor,
                parents=parents,
                children=children,
                events=tuple(events),
            )
        )
        nodes.add(anchor)
        nodes.update(parents)
        nodes.update(children)
        for ev in events:
            merged[ev.tuple4()] = ev
            nodes.add(ev.process_id)
            nodes.add(ev.object_id)

    ordered = sorted(merged.values(), key=lambda ev: (ev.ts, ev.tuple4()))
    return FilteredGraph(
        subgraphs=tuple(subgraphs),
        events=tuple(ordered),
        node_ids=frozenset(nodes),
    )
