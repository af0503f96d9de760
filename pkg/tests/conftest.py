"""Shared fixtures: one trained model reused across the suite.

The trained fixture is deliberately pinned (seeds, sizes, step count) so the
directional tests below see the same model every run.
"""

import numpy as np
import pytest

import taskprune as tp
from taskprune import scoring as sc, stats as st

CRITERION_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Recorder for acceptance results: one printed pass/fail line each."""
    def record(number: int, name: str, ok: bool, detail: str = "") -> None:
        status = "PASS" if ok else "FAIL"
        line = f"criterion {number:02d} [{name}] {status}" + (f" :: {detail}" if detail else "")
        CRITERION_LINES.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not CRITERION_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in CRITERION_LINES:
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def trained_env():
    """Two disjoint-alphabet tasks plus a model trained to near-memorization."""
    specs = tp.default_task_specs(2, n_records=128, n_options=2)
    records = tp.synth_records(specs, 11)
    train_recs, eval_recs = tp.split_records(records, 32)
    tok = tp.byte_tokenizer()
    corpora = tp.build_corpora(train_recs, tok)
    cfg = tp.ModelConfig(n_layers=8, d_model=64, n_heads=4, d_head=16, d_ff=128,
                         vocab_size=256, max_seq=128)
    model = tp.init_random(cfg, 0)
    model = tp.train_tiny(model, corpora, steps=1500, lr=0.5, seed=1)
    archive = st.collect_archive(model, corpora, tok.fingerprint())
    by_task = sc.score_all(model, archive, "fluctuation")
    general = sc.aggregate_general(by_task, sc.default_general_weights(by_task))
    return {
        "model": model,
        "tokenizer": tok,
        "train_records": train_recs,
        "eval_records": eval_recs,
        "corpora": corpora,
        "eval_sets": tp.group_records(eval_recs),
        "archive": archive,
        "scores_by_task": by_task,
        "scores_general": general,
    }


@pytest.fixture(scope="session")
def micro_model():
    cfg = tp.ModelConfig(n_layers=3, d_model=24, n_heads=3, d_head=8, d_ff=32,
                         vocab_size=64, max_seq=48)
    return tp.init_random(cfg, 7)


@pytest.fixture(scope="session")
def micro_records():
    specs = tp.default_task_specs(2, n_records=24, n_options=2)
    return tp.synth_records(specs, 3)
