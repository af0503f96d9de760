"""Route prompts to task experts: classify, pick the matching mask, evaluate.

The payoff of per-task pruning only lands if incoming prompts reach the right
expert; a linear probe on mean embeddings is enough here.
"""

import numpy as np

import taskprune as tp
from taskprune import allocate as al, classify as cl, evaluate as ev
from taskprune import prune as pr, scoring as sc, stats as st

TARGET = 0.5


def build():
    specs = tp.default_task_specs(3, n_records=96, n_options=2)
    records = tp.synth_records(specs, 9)
    train, held = tp.split_records(records, 24)
    tok = tp.byte_tokenizer()
    corpora = tp.build_corpora(train, tok)
    cfg = tp.ModelConfig(n_layers=4, d_model=48, n_heads=3, d_head=16, d_ff=96,
                         vocab_size=256, max_seq=128)
    model = tp.train_tiny(tp.init_random(cfg, 0), corpora, steps=900, lr=0.5, seed=1)
    return model, corpora, train, held, tok


def main():
    model, corpora, train, held, tok = build()
    cfg = model.config

    clf = cl.fit_classifier(model, corpora)
    report = cl.evaluate_classifier(clf, model, tp.build_corpora(held, tok))
    print(f"router held-out accuracy: {report.accuracy:.3f} over {clf.labels}")

    archive = st.collect_archive(model, corpora, tok.fingerprint())
    by_task = sc.score_all(model, archive, "fluctuation")
    sched = al.solve_schedule(cfg.n_layers, TARGET)
    experts = {
        task: pr.apply_mask(model, pr.make_plan(sc.select_expert(by_task, task),
                                                sched, cfg.d_head))
        for task in sorted(corpora)
    }

    # route each held-out record, answer with the routed expert
    routed_hits, routed_nll, n = 0, 0.0, 0
    wrong_route = 0
    for rec in held:
        seen = " ".join([rec.question, *rec.options])  # no answer leak at inference
        label, _ = cl.predict_task(clf, model, tok.encode(seen))
        wrong_route += label != rec.task_id
        expert = experts[label]
        routed_hits += ev.eval_multiple_choice(expert, [rec], tok)
        routed_nll += ev.answer_nll(expert, [rec], tok)
        n += 1
    print(f"misrouted {wrong_route}/{n} records")
    print(f"routed experts:   mc accuracy {routed_hits / n:.3f}, answer nll {routed_nll / n:.3f}")

    general = sc.aggregate_general(by_task, sc.default_general_weights(by_task))
    one_mask = pr.apply_mask(model, pr.make_plan(general, sched, cfg.d_head))
    print(f"one general mask: mc accuracy {ev.eval_multiple_choice(one_mask, held, tok):.3f}, "
          f"answer nll {ev.answer_nll(one_mask, held, tok):.3f}")
    print(f"dense reference:  mc accuracy {ev.eval_multiple_choice(model, held, tok):.3f}, "
          f"answer nll {ev.answer_nll(model, held, tok):.3f}")


if __name__ == "__main__":
    main()
