"""Prune a trained model and measure what it costs and what it buys.

Covers mask/compact equivalence, answer loss under pruning, throughput, and
the per-task expert matrix.
"""

import numpy as np

import taskprune as tp
from taskprune import allocate as al, evaluate as ev
from taskprune import prune as pr, scoring as sc, stats as st

TARGET = 0.5


def build():
    specs = tp.default_task_specs(2, n_records=96, n_options=2)
    records = tp.synth_records(specs, 7)
    train, held = tp.split_records(records, 24)
    tok = tp.byte_tokenizer()
    corpora = tp.build_corpora(train, tok)
    cfg = tp.ModelConfig(n_layers=6, d_model=48, n_heads=3, d_head=16, d_ff=96,
                         vocab_size=256, max_seq=128)
    model = tp.train_tiny(tp.init_random(cfg, 0), corpora, steps=800, lr=0.5, seed=1)
    return model, corpora, train, held, tok


def main():
    model, corpora, train, held, tok = build()
    cfg = model.config
    archive = st.collect_archive(model, corpora, tok.fingerprint())
    by_task = sc.score_all(model, archive, "fluctuation")
    general = sc.aggregate_general(by_task, sc.default_general_weights(by_task))

    sched = al.solve_schedule(cfg.n_layers, TARGET)
    plan = pr.make_plan(general, sched, cfg.d_head)
    masked = pr.apply_mask(model, plan)
    compacted = pr.compact(model, plan)

    rng = np.random.default_rng(0)
    tokens = rng.integers(0, cfg.vocab_size, size=40)
    dev = ev.relative_logit_diff(tp.forward(masked, tokens),
                                 tp.forward(compacted.model, tokens))
    print(f"mask vs compact, relative logit deviation: {dev:.2e}")
    print(f"parameters: dense {model.n_params():,} -> compact {compacted.n_params():,}")

    for name, m in (("dense", model), ("masked", masked), ("compact", compacted)):
        nll = ev.answer_nll(m, held, tok)
        acc = ev.eval_multiple_choice(m, held, tok)
        print(f"  {name:8s} answer nll {nll:.3f}  mc accuracy {acc:.3f}")

    # gains scale with width; at d_model=48 overhead eats most of the win
    base = ev.eval_speed(model, repeats=3, seed=0)
    fast = ev.eval_speed(compacted, repeats=3, seed=0, baseline_tps=base.tokens_per_sec)
    print(f"throughput: dense {base.tokens_per_sec:.0f} tok/s, "
          f"compact {fast.tokens_per_sec:.0f} tok/s (x{fast.speedup:.2f})")

    eval_sets = tp.group_records(held)
    matrix = ev.expert_vs_mismatch(model, corpora, eval_sets, TARGET, tokenizer=tok)
    print("expert matrix (answer nll; rows = eval task):")
    print(matrix.to_csv())


if __name__ == "__main__":
    main()
