"""Sparsity schedules and prune plans, no training required.

Draws the logistic depth profile as ASCII bars and shows how plans nest.
"""

import numpy as np

import taskprune as tp
from taskprune import allocate as al, prune as pr, scoring as sc

L = 8


def bar(ratio, width=40):
    return "#" * int(round(ratio * width))


def main():
    for target in (0.3, 0.5, 0.7):
        sched = al.solve_schedule(L, target)
        print(f"target mean {target}: amplitude {sched.amplitude:.4f}")
        for layer, rho in enumerate(sched.ratios):
            print(f"  layer {layer}: {rho:5.3f} {bar(rho)}")
    print("uniform, for contrast:")
    for layer, rho in enumerate(al.uniform_schedule(L, 0.5).ratios):
        print(f"  layer {layer}: {rho:5.3f} {bar(rho)}")

    # plans built from the same scores nest as the target grows
    cfg = tp.ModelConfig(n_layers=L, d_model=32, n_heads=2, d_head=16, d_ff=48,
                         vocab_size=64, max_seq=32)
    model = tp.init_random(cfg, 0)
    rng = np.random.default_rng(3)
    scores = {}
    for layer in range(L):
        for site in ("mlp", "attn"):
            s = sc.ImportanceScores(layer, site, "demo", "fluctuation",
                                    rng.random(model.site_width(layer, site)))
            if site == "attn":
                s = sc.aggregate_heads(s, cfg.d_head)
            scores[(layer, site)] = s

    shallow = pr.make_plan(scores, al.solve_schedule(L, 0.3), cfg.d_head)
    deep = pr.make_plan(scores, al.solve_schedule(L, 0.6), cfg.d_head)
    print("keep counts per layer (mlp, heads) at mean 0.3 vs 0.6:")
    for layer in range(L):
        m1 = len(shallow.keep[(layer, "mlp")])
        m2 = len(deep.keep[(layer, "mlp")])
        h1 = len(shallow.keep[(layer, "attn")])
        h2 = len(deep.keep[(layer, "attn")])
        nested = set(deep.keep[(layer, "mlp")].tolist()) <= set(shallow.keep[(layer, "mlp")].tolist())
        print(f"  layer {layer}: mlp {m1:2d} -> {m2:2d}, heads {h1} -> {h2}, nested={nested}")

    diff = pr.plan_diff(shallow, deep)
    print(f"plan overlap (shared pruned / union pruned): {diff.mean:.3f}")


if __name__ == "__main__":
    main()
