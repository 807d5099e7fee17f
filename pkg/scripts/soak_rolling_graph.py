"""Occupancy soak for the rolling window graph.

Feeds synthetic node churn for many windows and reports occupancy
along the way, to show the node cap holds regardless of run length.
"""

import argparse

from provwatch.correlator import GlobalAttackStore, RollingGraph


def main(argv=None):
    parser = argparse.ArgumentParser(
        description="long-run occupancy soak for the rolling graph"
    )
    parser.add_argument("--windows", type=int, default=10_000)
    parser.add_argument("--nodes-per-window", type=int, default=50)
    parser.add_argument(
        "--tagged-every", type=int, default=7,
        help="every Nth synthetic node arrives tagged",
    )
    parser.add_argument("--cap", type=int, default=120)
    parser.add_argument("--horizon", type=int, default=2)
    args = parser.parse_args(argv)

    rolling = RollingGraph(untagged_horizon=args.horizon, node_cap=args.cap)
    store = GlobalAttackStore()
    worst = 0
    report_every = max(1, args.windows // 10)
    for w in range(args.windows):
        names = [f"n-{w}-{i}" for i in range(args.nodes_per_window)]
        tagged = [
            i % args.tagged_every == 0 for i in range(args.nodes_per_window)
        ]
        rolling.absorb_nodes(w, names, tagged)
        occupancy = rolling.prune(w, store)
        worst = max(worst, occupancy)
        if (w + 1) % report_every == 0:
            print(f"window {w + 1}: occupancy {occupancy} (worst {worst})")
    ok = rolling.peak_nodes <= args.cap
    print(
        f"peak occupancy {rolling.peak_nodes} over {args.windows} windows "
        f"(cap {args.cap}): {'OK' if ok else 'OVER'}"
    )
    return 0 if ok else 1


if __name__ == "__main__":
    raise SystemExit(main())
