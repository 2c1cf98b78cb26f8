"""Synthetic hierarchical tasks and the toy word-level tokenizer.

Two generators cover the paradigms the trainer is exercised on:

* classification (`gen_htc_samples`): a balanced label tree with syllabic
  names; each query is a bag of leaf-specific signature words with tunable
  noise, and the responses walk the label path from coarse to fine. With
  zero noise every query word pins the leaf exactly, so perfect accuracy is
  attainable by construction.
* guided generation (`gen_htg_samples`): a miniature seen/unseen retrieval
  story. The query lists placement facts (some about other objects, some
  marked `hidden`) and asks where the target is; the level-1 response is the
  filtered fact list and the level-2 answer is its last location, so the
  answer is a deterministic function of the thought.

Dataset records travel as JSONL ({"query": str, "responses": [str, ...]});
tokenization is a closed vocabulary of whitespace words plus reserved
control tokens, built deterministically from a corpus.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .training import HierSample

PAD, BEGIN, UNK = "<pad>", "<begin>", "<unk>"

_SYLLABLES = [c + v for c in "bdgklmnprstvz" for v in "aeiou"]


def _syllable_table(rng: np.random.Generator) -> list[str]:
    return [_SYLLABLES[i] for i in rng.permutation(len(_SYLLABLES))]


def _word(table: list[str], index: int, length: int) -> str:
    n = len(table)
    parts = []
    for _ in range(length):
        parts.append(table[index % n])
        index //= n
    return "".join(parts)


# ---------------------------------------------------------------------------
# label hierarchy
# ---------------------------------------------------------------------------

@dataclass
class LabelHierarchy:
    depth: int
    levels: list[list[str]]
    parent: dict[str, str]

    def leaves(self) -> list[str]:
        return self.levels[-1]

    def path(self, label: str) -> list[str]:
        """Ancestor chain of `label` from level 1 down, inclusive."""
        chain = [label]
        while chain[0] in self.parent:
            chain.insert(0, self.parent[chain[0]])
        return chain


def gen_hierarchy(depth: int, branching: tuple[int, ...], seed: int = 0) -> LabelHierarchy:
    """Balanced label tree: level d has prod(branching[:d]) labels.

    Names are syllabic path codes (one syllable per branch choice, drawn
    from a seed-shuffled table), so a child's name extends its parent's.
    """
    if depth < 2:
        raise ConfigError("hierarchy depth must be at least 2")
    if len(branching) != depth or any(b < 2 for b in branching):
        raise ConfigError(f"branching needs {depth} factors of at least 2, got {branching}")
    table = _syllable_table(np.random.default_rng(seed))
    levels: list[list[str]] = []
    parent: dict[str, str] = {}
    paths = [()]
    for d in range(depth):
        new_paths = [p + (i,) for p in paths for i in range(branching[d])]
        names = ["".join(table[i] for i in p) for p in new_paths]
        if d > 0:
            for p, name in zip(new_paths, names):
                parent[name] = "".join(table[i] for i in p[:-1])
        levels.append(names)
        paths = new_paths
    return LabelHierarchy(depth=depth, levels=levels, parent=parent)


# ---------------------------------------------------------------------------
# generator configuration
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    depth: int
    branching: tuple[int, ...]
    content_vocab: int = 32     # distractor-word pool size
    n_samples: int = 256
    noise_rate: float = 0.0
    seed: int = 0
    query_len: int = 8          # classification query slots
    signature_words: int = 3    # per-leaf signature vocabulary

    def __post_init__(self):
        self.branching = tuple(self.branching)
        if not 0.0 <= self.noise_rate < 1.0:
            raise ConfigError("noise_rate must lie in [0, 1)")
        if self.n_samples < 1 or self.content_vocab < 1 or self.query_len < 1:
            raise ConfigError("n_samples, content_vocab, query_len must be positive")
        if self.signature_words < 1:
            raise ConfigError("signature_words must be positive")


# ---------------------------------------------------------------------------
# hierarchical text classification
# ---------------------------------------------------------------------------

def gen_htc_records(hierarchy: LabelHierarchy, spec: SyntheticSpec) -> list[dict]:
    """Textual classification records, class-balanced over leaves."""
    if hierarchy.depth != spec.depth:
        raise ConfigError(f"hierarchy depth {hierarchy.depth} vs spec depth {spec.depth}")
    rng = np.random.default_rng(spec.seed)
    sig_table = _syllable_table(rng)
    signatures = {
        leaf: [leaf + _word(sig_table, i, 1) for i in range(spec.signature_words)]
        for leaf in hierarchy.leaves()
    }
    noise_pool = ["x" + _word(sig_table, i, 2) for i in range(spec.content_vocab)]
    records = []
    leaves = hierarchy.leaves()
    for _ in range(spec.n_samples):
        leaf = leaves[int(rng.integers(len(leaves)))]
        words = []
        for _ in range(spec.query_len):
            if rng.random() < spec.noise_rate:
                words.append(noise_pool[int(rng.integers(len(noise_pool)))])
            else:
                sig = signatures[leaf]
                words.append(sig[int(rng.integers(len(sig)))])
        records.append({"query": " ".join(words), "responses": hierarchy.path(leaf)})
    return records


def gen_htc_samples(hierarchy: LabelHierarchy,
                    spec: SyntheticSpec) -> tuple[list[HierSample], "Tokenizer", list[dict]]:
    """Tokenized classification corpus plus its tokenizer and text records."""
    records = gen_htc_records(hierarchy, spec)
    tok = Tokenizer.from_records(records, spec.depth)
    return [encode_record(r, tok) for r in records], tok, records


# ---------------------------------------------------------------------------
# hierarchical text generation (filtered retrieval)
# ---------------------------------------------------------------------------

HIDDEN_MARK = "hidden"
WHERE_MARK = "where"


def htg_answer(thought: str) -> str:
    """The rule the generator guarantees: the answer is the last location
    named in the level-1 thought."""
    words = thought.split()
    if not words:
        raise DataError("empty thought has no answer")
    return words[-1]


def gen_htg_records(spec: SyntheticSpec) -> list[dict]:
    """Retrieval stories: facts about object placements, some invisible.

    Each fact is `obj loc`, optionally tagged with a trailing `hidden`
    marker or concerning a non-target object (both at the noise rate). The
    thought keeps the visible target facts in order; the answer is the last
    location among them.
    """
    if spec.depth != 2:
        raise ConfigError("retrieval stories are two-level (thought, answer)")
    n_objects = spec.branching[0]
    n_locations = spec.branching[1]
    rng = np.random.default_rng(spec.seed)
    table = _syllable_table(rng)
    # one draw without replacement keeps object and location words disjoint
    order = rng.choice(len(table) ** 2, size=n_objects + n_locations, replace=False)
    objects = [_word(table, int(order[i]), 2) for i in range(n_objects)]
    locations = [_word(table, int(order[n_objects + i]), 2) for i in range(n_locations)]
    records = []
    for _ in range(spec.n_samples):
        target = objects[int(rng.integers(n_objects))]
        n_facts = int(rng.integers(3, 7))
        query_words, thought_words = [], []
        for i in range(n_facts):
            loc = locations[int(rng.integers(n_locations))]
            distract = i > 0 and rng.random() < spec.noise_rate
            if distract and rng.random() < 0.5:
                others = [o for o in objects if o != target]
                obj = others[int(rng.integers(len(others)))] if others else target
                query_words += [obj, loc]
                if obj == target:
                    thought_words += [obj, loc]
            elif distract:
                query_words += [target, loc, HIDDEN_MARK]
            else:
                query_words += [target, loc]
                thought_words += [target, loc]
        query_words += [WHERE_MARK, target]
        thought = " ".join(thought_words)
        records.append({"query": " ".join(query_words),
                        "responses": [thought, htg_answer(thought)]})
    return records


def gen_htg_samples(spec: SyntheticSpec) -> tuple[list[HierSample], "Tokenizer", list[dict]]:
    records = gen_htg_records(spec)
    tok = Tokenizer.from_records(records, spec.depth)
    return [encode_record(r, tok) for r in records], tok, records


# ---------------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------------

@dataclass
class Tokenizer:
    """Closed whitespace-word vocabulary with dense ids.

    Reserved tokens come first: pad, begin, unknown, then one end-of-level
    marker per level. `tokenize`/`detokenize` round-trip in-vocabulary text;
    detokenization drops the reserved tokens.
    """

    token_to_id: dict[str, int]
    depth: int
    id_to_token: list[str] = field(init=False)

    def __post_init__(self):
        self.id_to_token = [""] * len(self.token_to_id)
        for t, i in self.token_to_id.items():
            self.id_to_token[i] = t

    @classmethod
    def from_records(cls, records: list[dict], depth: int) -> "Tokenizer":
        words = set()
        for rec in records:
            words.update(rec["query"].split())
            for resp in rec["responses"]:
                words.update(resp.split())
        reserved = [PAD, BEGIN, UNK] + [cls.level_end_token(d) for d in range(1, depth + 1)]
        clash = words.intersection(reserved)
        if clash:
            raise DataError(f"corpus uses reserved tokens {sorted(clash)}")
        vocab = reserved + sorted(words)
        return cls({t: i for i, t in enumerate(vocab)}, depth)

    @staticmethod
    def level_end_token(level: int) -> str:
        return f"</r{level}>"

    @property
    def vocab_size(self) -> int:
        return len(self.token_to_id)

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    @property
    def begin_id(self) -> int:
        return self.token_to_id[BEGIN]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK]

    def level_end_id(self, level: int) -> int:
        if not 1 <= level <= self.depth:
            raise ConfigError(f"level {level} outside 1..{self.depth}")
        return self.token_to_id[self.level_end_token(level)]

    def tokenize(self, text: str) -> np.ndarray:
        ids = [self.token_to_id.get(w, self.unk_id) for w in text.split()]
        return np.array(ids, dtype=np.int64)

    def detokenize(self, ids: np.ndarray) -> str:
        reserved = set(range(3 + self.depth))
        return " ".join(self.id_to_token[int(i)] for i in ids if int(i) not in reserved)

    def encode_query(self, text: str) -> np.ndarray:
        return np.concatenate([[self.begin_id], self.tokenize(text)]).astype(np.int64)

    def encode_response(self, text: str, level: int) -> np.ndarray:
        return np.concatenate([self.tokenize(text), [self.level_end_id(level)]]).astype(np.int64)


def encode_record(record: dict, tok: Tokenizer) -> HierSample:
    return HierSample(
        tok.encode_query(record["query"]),
        [tok.encode_response(r, d + 1) for d, r in enumerate(record["responses"])],
    )


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

def write_jsonl(path: str | Path, records: list[dict]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
    os.replace(tmp, path)


def read_jsonl(path: str | Path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict) or "query" not in rec or "responses" not in rec:
                raise DataError(f"{path}:{lineno}: record needs 'query' and 'responses'")
            if not isinstance(rec["query"], str) or not isinstance(rec["responses"], list) \
                    or not rec["responses"] \
                    or not all(isinstance(r, str) for r in rec["responses"]):
                raise DataError(f"{path}:{lineno}: query must be a string, "
                                "responses a non-empty list of strings")
            records.append(rec)
    if not records:
        raise DataError(f"{path}: no records")
    return records
