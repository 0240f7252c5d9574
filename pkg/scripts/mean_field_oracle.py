#!/usr/bin/env python3
"""Mean field against exact enumeration as the pairwise coupling weakens.

Prints mean and worst max-abs marginal error per coupling scale, plus how the
error evolves with the number of sequential sweeps at full coupling.

    python3 scripts/mean_field_oracle.py [--instances 20] [--size 3] [--classes 3]
"""
from __future__ import annotations

import argparse

import numpy as np

from ctxcrf.bench.suites import oracle_compare, random_instance
from ctxcrf.infer import exact_marginals, kl_qp, mean_field_sweeps


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--instances", type=int, default=20)
    ap.add_argument("--size", type=int, default=3)
    ap.add_argument("--classes", type=int, default=3)
    ap.add_argument("--iterations", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rows = oracle_compare(args.seed, args.instances, args.size, args.size, args.classes, args.iterations)
    print(f"{'scale':>8s} {'mean err':>10s} {'max err':>10s}")
    for r in rows:
        print(f"{r.scale:8g} {r.mean_error:10.2e} {r.max_error:10.2e}")

    print(f"\nsweeps at full coupling (mean over {args.instances} instances)")
    per_sweep = []
    for i in range(args.instances):
        graph, tables = random_instance(np.random.default_rng([args.seed, i]), args.size, args.size, args.classes)
        exact = exact_marginals(graph, tables).q
        per_sweep.append([(np.abs(m.q - exact).max(), kl_qp(graph, tables, m))
                          for m in mean_field_sweeps(graph, tables, args.iterations)])
    per_sweep = np.mean(per_sweep, axis=0)
    print(f"{'sweep':>8s} {'max err':>10s} {'KL(Q|P)':>10s}")
    for s, (err, kl) in enumerate(per_sweep):
        print(f"{s:8d} {err:10.2e} {kl:10.2e}")


if __name__ == "__main__":
    main()
