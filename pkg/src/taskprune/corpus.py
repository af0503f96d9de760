"""Task corpora: prompt records, tokenization, synthetic task generators.

A task corpus is a list of formatted prompt strings plus their token
sequences. Records come from line-delimited JSON files (question / options /
answer triplets), from plain-text sources chunked into pseudo-prompts, or
from the synthetic generator used throughout the tests and demos.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field

import numpy as np

from .serialize import fingerprint

RECORD_FIELDS = {"task", "question", "options", "answer"}


@dataclass(frozen=True)
class TaskRecord:
    task_id: str
    question: str
    options: tuple[str, ...]
    answer: str

    def __post_init__(self):
        if not self.task_id:
            raise ValueError("record has empty task id")
        if not self.question:
            raise ValueError(f"task {self.task_id!r}: empty question")
        if not self.answer:
            raise ValueError(f"task {self.task_id!r}: empty answer")
        if self.options and self.answer not in self.options:
            raise ValueError(f"task {self.task_id!r}: answer not among options")


def format_prompt(record: TaskRecord) -> str:
    """Single-space concatenation: question, options (if any), answer."""
    return " ".join([record.question, *record.options, record.answer])


@dataclass(frozen=True)
class Tokenizer:
    """Byte-level (vocab 256) by default; char-level over a fixed symbol table."""

    mode: str = "byte"
    symbols: tuple[str, ...] = ()

    def __post_init__(self):
        if self.mode not in ("byte", "char"):
            raise ValueError(f"unknown tokenizer mode {self.mode!r}")
        if self.mode == "char":
            if not self.symbols:
                raise ValueError("char tokenizer needs a symbol table")
            if len(set(self.symbols)) != len(self.symbols):
                raise ValueError("char tokenizer symbols must be unique")

    @property
    def vocab_size(self) -> int:
        return 256 if self.mode == "byte" else len(self.symbols)

    def encode(self, text: str) -> np.ndarray:
        if self.mode == "byte":
            return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)
        table = {s: i for i, s in enumerate(self.symbols)}
        try:
            return np.array([table[c] for c in text], dtype=np.int64)
        except KeyError as e:
            raise ValueError(f"symbol {e.args[0]!r} not in tokenizer vocabulary") from None

    def decode(self, ids) -> str:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise ValueError("token id out of range")
        if self.mode == "byte":
            return bytes(ids.astype(np.uint8).tolist()).decode("utf-8")
        return "".join(self.symbols[i] for i in ids)

    def fingerprint(self) -> str:
        return fingerprint({"mode": self.mode, "symbols": list(self.symbols)})


def byte_tokenizer() -> Tokenizer:
    return Tokenizer(mode="byte")


def char_tokenizer(alphabet: str) -> Tokenizer:
    return Tokenizer(mode="char", symbols=tuple(alphabet))


@dataclass
class TaskCorpus:
    task_id: str
    prompts: list[str]
    token_sequences: list[np.ndarray]

    def __post_init__(self):
        if not self.prompts:
            raise ValueError(f"task {self.task_id!r}: empty corpus")
        if len(self.prompts) != len(self.token_sequences):
            raise ValueError(f"task {self.task_id!r}: prompt/token count mismatch")

    @property
    def n_prompts(self) -> int:
        return len(self.prompts)


def build_corpora(records: list[TaskRecord], tokenizer: Tokenizer | None = None) -> dict[str, TaskCorpus]:
    """Group records by task, format and tokenize each prompt."""
    tokenizer = tokenizer or byte_tokenizer()
    grouped: dict[str, list[str]] = {}
    for rec in records:
        grouped.setdefault(rec.task_id, []).append(format_prompt(rec))
    out = {}
    for task_id, prompts in grouped.items():
        seqs = [tokenizer.encode(p) for p in prompts]
        for s in seqs:
            if s.size and s.max() >= tokenizer.vocab_size:
                raise ValueError(f"task {task_id!r}: token id out of vocabulary")
        out[task_id] = TaskCorpus(task_id, prompts, seqs)
    return out


def load_records(path) -> list[TaskRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}: line {lineno}: bad JSON ({e.msg})") from None
            if not isinstance(obj, dict):
                raise ValueError(f"{path}: line {lineno}: record must be an object")
            unknown = set(obj) - RECORD_FIELDS
            if unknown:
                raise ValueError(f"{path}: line {lineno}: unknown field {sorted(unknown)[0]!r}")
            missing = {"task", "question", "answer"} - set(obj)
            if missing:
                raise ValueError(f"{path}: line {lineno}: missing field {sorted(missing)[0]!r}")
            try:
                records.append(
                    TaskRecord(
                        task_id=obj["task"],
                        question=obj["question"],
                        options=tuple(obj.get("options", ())),
                        answer=obj["answer"],
                    )
                )
            except ValueError as e:
                raise ValueError(f"{path}: line {lineno}: {e}") from None
    if not records:
        raise ValueError(f"{path}: no records")
    return records


def save_records(records: list[TaskRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(
                json.dumps(
                    {
                        "task": rec.task_id,
                        "question": rec.question,
                        "options": list(rec.options),
                        "answer": rec.answer,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def ingest(path, tokenizer: Tokenizer | None = None) -> dict[str, TaskCorpus]:
    return build_corpora(load_records(path), tokenizer)


def text_corpus(text: str, task_id: str, tokenizer: Tokenizer | None = None, max_chars: int = 256) -> TaskCorpus:
    """Chunk a plain-text language-modeling source into pseudo-prompts."""
    tokenizer = tokenizer or byte_tokenizer()
    if max_chars < 1:
        raise ValueError("max_chars must be >= 1")
    chunks, current = [], ""
    pieces = []
    for line in text.splitlines():
        # hard-split lines that alone exceed the budget
        pieces += [line[i:i + max_chars] for i in range(0, len(line), max_chars)] or [""]
    for line in pieces:
        if current and len(current) + len(line) + 1 > max_chars:
            chunks.append(current)
            current = line
        else:
            current = f"{current}\n{line}" if current else line
    if current.strip():
        chunks.append(current)
    chunks = [c for c in chunks if c.strip()]
    if not chunks:
        raise ValueError(f"task {task_id!r}: text source is empty")
    return TaskCorpus(task_id, chunks, [tokenizer.encode(c) for c in chunks])


# --- synthetic tasks -------------------------------------------------------
#
# Each task owns a disjoint symbol alphabet and a private lexicon of short
# words over it; prompts are word sequences with no separator. Predicting the
# next character requires matching a several-character prefix against the
# task's lexicon, so a trained model has to build task-specific features
# (a plain bigram table cannot fit these corpora), and tasks never share
# high-frequency symbols.


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    alphabet: str
    n_records: int = 64
    question_words: tuple[int, int] = (6, 10)
    answer_words: tuple[int, int] = (2, 3)
    n_options: int = 0
    lexicon_size: int = 12
    word_len: tuple[int, int] = (3, 5)

    def __post_init__(self):
        if not self.task_id:
            raise ValueError("task spec has empty id")
        if len(set(self.alphabet)) < 2:
            raise ValueError(f"task {self.task_id!r}: alphabet needs >= 2 distinct symbols")
        if self.n_records < 1:
            raise ValueError(f"task {self.task_id!r}: n_records must be positive")
        if self.n_options == 1:
            raise ValueError(f"task {self.task_id!r}: options must be empty or >= 2")
        if self.lexicon_size < 2:
            raise ValueError(f"task {self.task_id!r}: lexicon needs >= 2 words")
        if self.word_len[0] < 2 or self.word_len[1] < self.word_len[0]:
            raise ValueError(f"task {self.task_id!r}: bad word length range")


_SYMBOL_POOL = string.ascii_lowercase + string.digits + string.ascii_uppercase + "+-*/=<>!?.,;:"


def default_task_specs(n_tasks: int, n_records: int = 64, n_options: int = 0, alphabet_size: int = 8) -> list[TaskSpec]:
    """Disjoint alphabets carved from a printable pool, staggered length profiles."""
    if n_tasks < 2:
        raise ValueError("need at least 2 tasks")
    if n_tasks * alphabet_size > len(_SYMBOL_POOL):
        raise ValueError(
            f"vocab too small for {n_tasks} disjoint alphabets of size {alphabet_size} "
            f"(pool has {len(_SYMBOL_POOL)} symbols)"
        )
    specs = []
    for i in range(n_tasks):
        chunk = _SYMBOL_POOL[i * alphabet_size : (i + 1) * alphabet_size]
        specs.append(
            TaskSpec(
                task_id=f"task{i}",
                alphabet=chunk,
                n_records=n_records,
                question_words=(6 + i, 9 + i),
                answer_words=(2, 3),
                n_options=n_options,
                word_len=(3, 4 + (i % 2)),
            )
        )
    return specs


def _lexicon(spec: TaskSpec, rng: np.random.Generator) -> list[str]:
    """Distinct random words over the task alphabet."""
    symbols = sorted(set(spec.alphabet))
    words: list[str] = []
    seen = set()
    attempts = 0
    while len(words) < spec.lexicon_size:
        attempts += 1
        if attempts > 1000 * spec.lexicon_size:
            raise ValueError(f"task {spec.task_id!r}: alphabet too small for the lexicon")
        length = int(rng.integers(spec.word_len[0], spec.word_len[1] + 1))
        w = "".join(symbols[rng.integers(len(symbols))] for _ in range(length))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def _phrase(lexicon: list[str], n_words: int, rng: np.random.Generator) -> str:
    return "".join(lexicon[rng.integers(len(lexicon))] for _ in range(n_words))


def _distractor(answer: str, alphabet: str, taken: set[str], rng: np.random.Generator) -> str:
    for _ in range(16):
        perm = "".join(rng.permutation(list(answer)))
        if perm != answer and perm not in taken:
            return perm
    # degenerate answers (single repeated symbol) defeat permutation
    pos = int(rng.integers(len(answer)))
    for sym in alphabet:
        mutated = answer[:pos] + sym + answer[pos + 1 :]
        if mutated != answer and mutated not in taken:
            return mutated
    raise ValueError("alphabet too small to build distinct distractors")


def synth_records(specs: list[TaskSpec], seed: int) -> list[TaskRecord]:
    if len(specs) < 2:
        raise ValueError("need at least 2 task specs")
    ids = [s.task_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate task ids in specs")
    for i, a in enumerate(specs):
        for b in specs[i + 1 :]:
            shared = set(a.alphabet) & set(b.alphabet)
            if shared:
                raise ValueError(f"tasks {a.task_id!r} and {b.task_id!r} share symbols {sorted(shared)}")

    records = []
    for index, spec in enumerate(specs):
        rng = np.random.default_rng([seed, index])
        lexicon = _lexicon(spec, rng)
        for _ in range(spec.n_records):
            qw = int(rng.integers(spec.question_words[0], spec.question_words[1] + 1))
            aw = int(rng.integers(spec.answer_words[0], spec.answer_words[1] + 1))
            question = _phrase(lexicon, qw, rng)
            answer = _phrase(lexicon, aw, rng)
            options: tuple[str, ...] = ()
            if spec.n_options >= 2:
                distractors: list[str] = []
                while len(distractors) < spec.n_options - 1:
                    distractors.append(_distractor(answer, spec.alphabet, set(distractors), rng))
                slot = int(rng.integers(spec.n_options))
                options = tuple(distractors[:slot] + [answer] + distractors[slot:])
            records.append(TaskRecord(spec.task_id, question, options, answer))
    return records


def synth_tasks(specs: list[TaskSpec], seed: int, tokenizer: Tokenizer | None = None) -> dict[str, TaskCorpus]:
    return build_corpora(synth_records(specs, seed), tokenizer)


def split_records(records: list[TaskRecord], eval_per_task: int) -> tuple[list[TaskRecord], list[TaskRecord]]:
    """Hold out the last eval_per_task records of each task (same generator,
    so held-out prompts follow the training distribution)."""
    if eval_per_task < 1:
        raise ValueError("eval_per_task must be >= 1")
    by_task: dict[str, list[TaskRecord]] = {}
    for rec in records:
        by_task.setdefault(rec.task_id, []).append(rec)
    train, held = [], []
    for task_id, recs in by_task.items():
        if len(recs) <= eval_per_task:
            raise ValueError(f"task {task_id!r}: not enough records to hold out {eval_per_task}")
        train.extend(recs[:-eval_per_task])
        held.extend(recs[-eval_per_task:])
    return train, held


def group_records(records: list[TaskRecord]) -> dict[str, list[TaskRecord]]:
    grouped: dict[str, list[TaskRecord]] = {}
    for rec in records:
        grouped.setdefault(rec.task_id, []).append(rec)
    return grouped
