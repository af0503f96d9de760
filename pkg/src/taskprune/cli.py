"""Command-line pipeline around the library.

Every subcommand takes --seed, --config, and --out (where it writes an
artifact). A config file is INI-style: one section per subcommand, keys named
after the long flags; explicit flags override the file. Exit codes: 0 ok,
2 usage, 3 artifact or fingerprint error, 4 numeric infeasibility, 1 other
errors.
"""

from __future__ import annotations

import argparse
import configparser
import sys
from pathlib import Path

import numpy as np

from . import allocate, classify, corpus, evaluate, model, prune, scoring, stats
from .allocate import InfeasibleError
from .model import DivergenceError
from .serialize import ArtifactError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_ARTIFACT = 3
EXIT_NUMERIC = 4


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip() != ""]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip() != ""]


class Command:
    """Subparser wrapper that resolves flag > config-file > default."""

    def __init__(self, subparsers, name: str, help_text: str):
        self.name = name
        self.parser = subparsers.add_parser(name, help=help_text)
        self.parser.add_argument("--config", default=None, help="INI config; section [%s]" % name)
        self.table: dict[str, tuple] = {}
        self.opt("--seed", type=int, default=0, help="random seed")

    def opt(self, flag: str, *, type=str, default=None, required=False, choices=None,
            help="", dest=None):
        dest = dest or flag.lstrip("-").replace("-", "_")
        self.parser.add_argument(flag, dest=dest, type=type, default=None, choices=choices, help=help)
        self.table[dest] = (type, default, required)
        return self

    def resolve(self, args: argparse.Namespace) -> argparse.Namespace:
        section = None
        if args.config:
            ini = configparser.ConfigParser()
            read = ini.read(args.config)
            if not read:
                raise ArtifactError(f"missing config file: {args.config}")
            if ini.has_section(self.name):
                section = ini[self.name]
        for dest, (caster, default, required) in self.table.items():
            if getattr(args, dest) is not None:
                continue
            if section is not None and dest in section:
                setattr(args, dest, caster(section[dest]))
            elif required:
                self.parser.error(f"missing required option --{dest.replace('_', '-')}")
            else:
                setattr(args, dest, default)
        return args


def _load_model(path) -> model.TinyModel:
    return model.load_checkpoint(path)


def _corpora(path, tokenizer) -> dict:
    return corpus.ingest(path, tokenizer)


def _tokenizer(name: str) -> corpus.Tokenizer:
    if name == "byte":
        return corpus.byte_tokenizer()
    raise ValueError(f"unknown tokenizer {name!r} (char tokenizers are library-level)")


# --- commands ----------------------------------------------------------------


def cmd_build_corpus(args) -> int:
    records = corpus.load_records(args.infile)
    corpora = corpus.build_corpora(records, _tokenizer(args.tokenizer))
    corpus.save_records(records, args.out)
    counts = ", ".join(f"{t}={c.n_prompts}" for t, c in sorted(corpora.items()))
    print(f"wrote {args.out}: {len(records)} records across {len(corpora)} tasks ({counts})")
    return EXIT_OK


def cmd_synth_corpus(args) -> int:
    specs = corpus.default_task_specs(args.tasks, n_records=args.records, n_options=args.options)
    records = corpus.synth_records(specs, args.seed)
    corpus.save_records(records, args.out)
    corpora = corpus.build_corpora(records)
    counts = ", ".join(f"{t}={c.n_prompts}" for t, c in sorted(corpora.items()))
    print(f"wrote {args.out}: {len(records)} records, tasks: {counts}")
    return EXIT_OK


def cmd_train_tiny(args) -> int:
    tok = _tokenizer(args.tokenizer)
    corpora = _corpora(args.corpus, tok)
    d_head = args.d_head if args.d_head else args.d_model // args.n_heads
    cfg = model.ModelConfig(
        n_layers=args.layers, d_model=args.d_model, n_heads=args.n_heads, d_head=d_head,
        d_ff=args.d_ff, vocab_size=tok.vocab_size, max_seq=args.max_seq,
    )
    net = model.init_random(cfg, args.seed)
    before = model.stream_xent(net, corpora, seed=args.seed)
    net = model.train_tiny(net, corpora, steps=args.steps, lr=args.lr, seed=args.seed,
                           batch_size=args.batch_size)
    after = model.stream_xent(net, corpora, seed=args.seed)
    model.save_checkpoint(net, args.out)
    print(f"wrote {args.out}: {cfg.n_layers} layers, {net.n_params()} params, "
          f"loss {before:.4f} -> {after:.4f} ({args.steps} steps)")
    return EXIT_OK


def cmd_collect_stats(args) -> int:
    net = _load_model(args.model)
    tok = _tokenizer(args.tokenizer)
    corpora = _corpora(args.corpus, tok)
    pool = "prompt_mean" if args.pool == "prompt-mean" else args.pool
    archive = stats.collect_archive(net, corpora, tok.fingerprint(), pool=pool)
    archive.save(args.out)
    print(f"wrote {args.out}: {len(archive.entries)} (layer, site, task) entries, tasks: {', '.join(archive.tasks)}")
    return EXIT_OK


def cmd_score(args) -> int:
    net = _load_model(args.model)
    archive = stats.load_archive(args.stats)
    if archive.model_fingerprint != net.fingerprint():
        raise ArtifactError(
            f"stats were collected on model {archive.model_fingerprint}, "
            f"but {args.model} has fingerprint {net.fingerprint()}"
        )
    by_task = scoring.score_all(net, archive, args.method)
    weights = scoring.default_general_weights(by_task, text_task=args.text_task or None)
    by_task[scoring.GENERAL] = scoring.aggregate_general(by_task, weights)
    scoring.save_scores(args.out, by_task, args.method, net.fingerprint(), archive.fingerprint())
    origins = ", ".join(sorted(by_task))
    print(f"wrote {args.out}: method={args.method}, origins: {origins}")
    return EXIT_OK


def cmd_allocate(args) -> int:
    sched = allocate.solve_schedule(
        args.L, args.G, steepness=args.k, midpoint=args.x0,
        n_frozen=args.n_frozen, rho_cap=args.rho_cap,
    )
    sched.save(args.out)
    ratios = " ".join(f"{r:.4f}" for r in sched.ratios)
    print(f"wrote {args.out}: amplitude={sched.amplitude:.6f}, ratios: {ratios}")
    return EXIT_OK


def cmd_prune(args) -> int:
    net = _load_model(args.model)
    by_origin, meta = scoring.load_scores(args.scores)
    if meta["model_fingerprint"] != net.fingerprint():
        raise ArtifactError(
            f"scores were computed on model {meta['model_fingerprint']}, "
            f"but {args.model} has fingerprint {net.fingerprint()}"
        )
    if args.origin not in by_origin:
        raise ValueError(f"origin {args.origin!r} not in scores (have {sorted(by_origin)})")
    if (args.schedule is None) == (args.rho is None):
        self_err = "exactly one of --schedule or --rho is required"
        raise ValueError(self_err)
    if args.schedule:
        sched = allocate.load_schedule(args.schedule)
        if sched.n_layers != net.config.n_layers:
            raise ArtifactError(
                f"schedule covers {sched.n_layers} layers, model has {net.config.n_layers}"
            )
    else:
        sched = allocate.uniform_schedule(net.config.n_layers, args.rho)
    source = {
        "origin": args.origin,
        "method": meta["method"],
        "model_fingerprint": net.fingerprint(),
        "scores_fingerprint": meta["fingerprint"],
        "schedule_fingerprint": sched.fingerprint(),
    }
    plan = prune.make_plan(by_origin[args.origin], sched, net.config.d_head, source=source)
    plan.save(args.out)
    pruned = sum(plan.n_pruned(k) for k in plan.keep)
    print(f"wrote {args.out}: {pruned} units pruned across {len(plan.keep)} sites")
    if args.emit:
        if not args.out_model:
            raise ValueError("--emit requires --out-model")
        if args.emit == "masked":
            out_net = prune.apply_mask(net, plan)
            extra = {"pruned": "masked", "plan_fingerprint": plan.fingerprint()}
        else:
            out_net = prune.compact(net, plan).model
            extra = {"pruned": "compact", "plan_fingerprint": plan.fingerprint()}
        model.save_checkpoint(out_net, args.out_model, extra_meta=extra)
        print(f"wrote {args.out_model}: {args.emit} model, {out_net.n_params()} params")
    return EXIT_OK


def cmd_eval(args) -> int:
    net = _load_model(args.model)
    tok = _tokenizer(args.tokenizer)
    rows = []
    if args.eval:
        records = corpus.load_records(args.eval)
        grouped = corpus.group_records(records)
        has_options = all(len(r.options) >= 2 for r in records)
        overall = {"scope": "all", "mean_nll": evaluate.answer_nll(net, records, tok)}
        if has_options:
            overall["accuracy"] = evaluate.eval_multiple_choice(net, records, tok)
        rows.append(overall)
        for task_id in sorted(grouped):
            row = {"scope": task_id, "mean_nll": evaluate.answer_nll(net, grouped[task_id], tok)}
            if has_options:
                row["accuracy"] = evaluate.eval_multiple_choice(net, grouped[task_id], tok)
            rows.append(row)
    if args.ppl_text:
        text = Path(args.ppl_text).read_text(encoding="utf-8")
        tokens = tok.encode(text)
        ppl = evaluate.eval_ppl(net, tokens, context_len=args.context, window_len=args.window,
                                n_samples=args.samples, seed=args.seed)
        rows.append({"scope": f"ppl:{Path(args.ppl_text).name}", "perplexity": ppl})
    if not rows:
        raise ValueError("nothing to evaluate: pass --eval and/or --ppl-text")
    report = evaluate.EvalReport(kind="eval", rows=rows, fingerprints={"model": net.fingerprint()})
    if args.out:
        report.save(args.out)
        print(f"wrote {args.out}")
    print(report.to_csv(), end="")
    return EXIT_OK


def _load_scores_for(net, path, origin):
    by_origin, meta = scoring.load_scores(path)
    if meta["model_fingerprint"] != net.fingerprint():
        raise ArtifactError(
            f"scores were computed on model {meta['model_fingerprint']}, "
            f"but the given model has fingerprint {net.fingerprint()}"
        )
    if origin not in by_origin:
        raise ValueError(f"origin {origin!r} not in scores (have {sorted(by_origin)})")
    return by_origin[origin]


def cmd_remove_test(args) -> int:
    net = _load_model(args.model)
    tok = _tokenizer(args.tokenizer)
    records = corpus.load_records(args.eval)
    score_map = _load_scores_for(net, args.scores, args.origin)
    layers = list(range(net.config.n_layers)) if args.layers == "all" else _ints(args.layers)
    report = evaluate.remove_test(net, records, score_map, layers, _floats(args.ratios), tok,
                                  metric=args.metric)
    report.save(args.out)
    print(f"wrote {args.out}: {len(report.rows)} layers x {len(_floats(args.ratios))} ratios")
    return EXIT_OK


def cmd_compare_strategies(args) -> int:
    net = _load_model(args.model)
    tok = _tokenizer(args.tokenizer)
    corpora = _corpora(args.corpus, tok)
    records = corpus.load_records(args.eval)
    weights = None
    if args.text_task:
        weights = scoring.default_general_weights(sorted(corpora), text_task=args.text_task)
    report = evaluate.compare_strategies(net, corpora, records, args.G, method=args.method,
                                         tokenizer=tok, weights=weights, n_frozen=args.n_frozen)
    report.save(args.out)
    print(report.to_csv(), end="")
    return EXIT_OK


def cmd_expert_matrix(args) -> int:
    net = _load_model(args.model)
    tok = _tokenizer(args.tokenizer)
    corpora = _corpora(args.corpus, tok)
    eval_sets = corpus.group_records(corpus.load_records(args.eval))
    report = evaluate.expert_vs_mismatch(net, corpora, eval_sets, args.G, method=args.method,
                                         tokenizer=tok, n_frozen=args.n_frozen)
    report.save(args.out)
    print(report.to_csv(), end="")
    return EXIT_OK


def cmd_classify_task(args) -> int:
    net = _load_model(args.model)
    tok = _tokenizer(args.tokenizer)
    if args.fit:
        records = corpus.load_records(args.fit)
        if args.holdout:
            train_recs, held_recs = corpus.split_records(records, args.holdout)
        else:
            train_recs, held_recs = records, []
        clf = classify.fit_classifier(net, corpus.build_corpora(train_recs, tok),
                           epochs=args.epochs, lr=args.lr, seed=args.seed)
        clf.save(args.clf)
        print(f"wrote {args.clf}: labels {', '.join(clf.labels)}")
        if held_recs:
            report = classify.evaluate_classifier(clf, net, corpus.build_corpora(held_recs, tok))
            print(f"held-out accuracy {report.accuracy:.4f} "
                  f"macro-f1 {report.macro['f1']:.4f}")
    clf = classify.load_classifier(args.clf)
    if clf.model_fingerprint != net.fingerprint():
        raise ArtifactError(
            f"classifier was fit on model {clf.model_fingerprint}, "
            f"but {args.model} has fingerprint {net.fingerprint()}"
        )
    if args.text:
        label, probs = classify.predict_task(clf, net, tok.encode(args.text))
        dist = ", ".join(f"{l}={p:.4f}" for l, p in zip(clf.labels, probs))
        print(f"predicted {label} ({dist})")
    elif not args.fit:
        raise ValueError("nothing to do: pass --fit and/or --text")
    return EXIT_OK


def cmd_export_heatmap(args) -> int:
    archive = stats.load_archive(args.stats)
    tasks = archive.tasks if args.tasks == "all" else [t.strip() for t in args.tasks.split(",")]
    if len(tasks) == 1 and args.out:
        Path(args.out).write_text(stats.heatmap_csv(archive, tasks[0]))
        print(f"wrote {args.out}")
        return EXIT_OK
    if not args.out_dir:
        raise ValueError("multiple tasks: pass --out-dir (or a single task with --out)")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for task in tasks:
        path = out_dir / f"{task}.heatmap.csv"
        path.write_text(stats.heatmap_csv(archive, task))
        print(f"wrote {path}")
    return EXIT_OK


def cmd_project_states(args) -> int:
    net = _load_model(args.model)
    tok = _tokenizer(args.tokenizer)
    corpora = _corpora(args.corpus, tok)
    labels, coords = stats.project_hidden_states(net, corpora, args.layer, seed=args.seed)
    lines = ["task,x,y"]
    lines += [f"{t},{x:.10g},{y:.10g}" for t, (x, y) in zip(labels, coords)]
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"wrote {args.out}: {len(labels)} prompts, layer {args.layer}")
    return EXIT_OK


# --- wiring ------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="taskprune",
                                     description="task-adaptive structured pruning pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    commands: dict[str, tuple[Command, callable]] = {}

    def register(name, help_text, fn) -> Command:
        cmd = Command(sub, name, help_text)
        commands[name] = (cmd, fn)
        return cmd

    c = register("build-corpus", "validate and normalize a records file", cmd_build_corpus)
    c.opt("--in", type=str, required=True, help="input records (JSONL)", dest="infile")
    c.opt("--out", type=str, required=True, help="normalized records output")
    c.opt("--tokenizer", type=str, default="byte", choices=["byte"])

    c = register("synth-corpus", "generate synthetic disjoint-alphabet tasks", cmd_synth_corpus)
    c.opt("--tasks", type=int, default=2)
    c.opt("--records", type=int, default=64, help="records per task")
    c.opt("--options", type=int, default=0, help="options per record (0 or >= 2)")
    c.opt("--out", type=str, required=True)

    c = register("train-tiny", "train the tiny model on a corpus", cmd_train_tiny)
    c.opt("--corpus", type=str, required=True)
    c.opt("--out", type=str, required=True)
    c.opt("--layers", type=int, default=8)
    c.opt("--d-model", type=int, default=64)
    c.opt("--n-heads", type=int, default=4)
    c.opt("--d-head", type=int, default=0, help="default d_model // n_heads")
    c.opt("--d-ff", type=int, default=128)
    c.opt("--max-seq", type=int, default=128)
    c.opt("--steps", type=int, default=1500)
    c.opt("--lr", type=float, default=0.5)
    c.opt("--batch-size", type=int, default=8)
    c.opt("--tokenizer", type=str, default="byte", choices=["byte"])

    c = register("collect-stats", "stream a corpus and accumulate activation stats", cmd_collect_stats)
    c.opt("--model", type=str, required=True)
    c.opt("--corpus", type=str, required=True)
    c.opt("--out", type=str, required=True)
    c.opt("--pool", type=str, default="tokens", choices=["tokens", "prompt-mean"])
    c.opt("--tokenizer", type=str, default="byte", choices=["byte"])

    c = register("score", "channel/head importance from stats", cmd_score)
    c.opt("--model", type=str, required=True)
    c.opt("--stats", type=str, required=True)
    c.opt("--method", type=str, default="fluctuation", choices=list(scoring.METHODS))
    c.opt("--text-task", type=str, default="", help="archive task treated as the plain-text corpus (weight 3)")
    c.opt("--out", type=str, required=True)

    c = register("allocate", "solve the layer-wise sparsity schedule", cmd_allocate)
    c.opt("--L", type=int, required=True, help="layer count")
    c.opt("--G", type=float, required=True, help="global sparsity target")
    c.opt("--k", type=float, default=allocate.DEFAULT_STEEPNESS, help="logistic steepness")
    c.opt("--x0", type=float, default=allocate.DEFAULT_MIDPOINT, help="logistic midpoint")
    c.opt("--n-frozen", type=int, default=allocate.DEFAULT_FROZEN)
    c.opt("--rho-cap", type=float, default=allocate.DEFAULT_CAP)
    c.opt("--out", type=str, required=True)

    c = register("prune", "build a prune plan (and optionally a pruned model)", cmd_prune)
    c.opt("--model", type=str, required=True)
    c.opt("--scores", type=str, required=True)
    c.opt("--origin", type=str, default=scoring.GENERAL)
    c.opt("--schedule", type=str, default=None)
    c.opt("--rho", type=float, default=None, help="flat ratio instead of a schedule")
    c.opt("--out", type=str, required=True)
    c.opt("--emit", type=str, default=None, choices=["masked", "compact"])
    c.opt("--out-model", type=str, default=None)

    c = register("eval", "accuracy / NLL / perplexity of a checkpoint", cmd_eval)
    c.opt("--model", type=str, required=True)
    c.opt("--eval", type=str, default=None, help="records file")
    c.opt("--ppl-text", type=str, default=None, help="plain text for windowed perplexity")
    c.opt("--context", type=int, default=evaluate.DEFAULT_CONTEXT)
    c.opt("--window", type=int, default=evaluate.DEFAULT_WINDOW)
    c.opt("--samples", type=int, default=evaluate.DEFAULT_PPL_SAMPLES)
    c.opt("--out", type=str, default=None)
    c.opt("--tokenizer", type=str, default="byte", choices=["byte"])

    c = register("remove-test", "single-layer pruning sensitivity grid", cmd_remove_test)
    c.opt("--model", type=str, required=True)
    c.opt("--eval", type=str, required=True)
    c.opt("--scores", type=str, required=True)
    c.opt("--origin", type=str, default=scoring.GENERAL)
    c.opt("--layers", type=str, default="all", help="comma list or 'all'")
    c.opt("--ratios", type=str, default="0,0.25,0.5,0.75")
    c.opt("--metric", type=str, default="nll", choices=["nll", "accuracy"])
    c.opt("--out", type=str, required=True)
    c.opt("--tokenizer", type=str, default="byte", choices=["byte"])

    c = register("compare-strategies", "uniform vs logistic schedule, same scores", cmd_compare_strategies)
    c.opt("--model", type=str, required=True)
    c.opt("--corpus", type=str, required=True, help="stats corpora records")
    c.opt("--eval", type=str, required=True)
    c.opt("--G", type=float, default=0.5)
    c.opt("--method", type=str, default="fluctuation", choices=list(scoring.METHODS))
    c.opt("--n-frozen", type=int, default=allocate.DEFAULT_FROZEN)
    c.opt("--text-task", type=str, default="")
    c.opt("--out", type=str, required=True)
    c.opt("--tokenizer", type=str, default="byte", choices=["byte"])

    c = register("expert-matrix", "expert vs mismatched mask loss matrix", cmd_expert_matrix)
    c.opt("--model", type=str, required=True)
    c.opt("--corpus", type=str, required=True, help="stats corpora records")
    c.opt("--eval", type=str, required=True, help="held-out records per task")
    c.opt("--G", type=float, default=0.5)
    c.opt("--method", type=str, default="fluctuation", choices=list(scoring.METHODS))
    c.opt("--n-frozen", type=int, default=allocate.DEFAULT_FROZEN)
    c.opt("--out", type=str, required=True)
    c.opt("--tokenizer", type=str, default="byte", choices=["byte"])

    c = register("classify-task", "fit/apply the task classifier", cmd_classify_task)
    c.opt("--model", type=str, required=True)
    c.opt("--clf", type=str, required=True, help="classifier artifact path")
    c.opt("--fit", type=str, default=None, help="records file to fit on")
    c.opt("--holdout", type=int, default=0, help="held-out records per task when fitting")
    c.opt("--epochs", type=int, default=classify.DEFAULT_EPOCHS)
    c.opt("--lr", type=float, default=classify.DEFAULT_LR)
    c.opt("--text", type=str, default=None, help="prompt to classify")
    c.opt("--tokenizer", type=str, default="byte", choices=["byte"])

    c = register("export-heatmap", "normalized-L2 heatmap CSVs from a stats archive", cmd_export_heatmap)
    c.opt("--stats", type=str, required=True)
    c.opt("--tasks", type=str, default="all")
    c.opt("--out", type=str, default=None, help="output file (single task)")
    c.opt("--out-dir", type=str, default=None, help="output directory (one CSV per task)")

    c = register("project-states", "2-D projection of pooled residual states", cmd_project_states)
    c.opt("--model", type=str, required=True)
    c.opt("--corpus", type=str, required=True)
    c.opt("--layer", type=int, required=True)
    c.opt("--out", type=str, required=True)
    c.opt("--tokenizer", type=str, default="byte", choices=["byte"])

    return parser, commands


def main(argv=None) -> int:
    parser, commands = build_parser()
    args = parser.parse_args(argv)
    cmd, fn = commands[args.command]
    try:
        cmd.resolve(args)
        return fn(args)
    except ArtifactError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (InfeasibleError, DivergenceError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
