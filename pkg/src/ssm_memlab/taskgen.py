"""Structured recall tasks over a closed single-token vocabulary.

An instance is ``L`` subject-relation-object triples, each followed by a
separator, then optional distractor tokens, then a ``subject relation``
query whose answer is the object of triple ``k``::

    s1 r1 o1 . s2 r2 o2 . ... sL rL oL . [d1 ... dn] sk rk  ->  ok
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, VocabularyError

REPEATED = "repeated"
RANDOM = "random"
RELATION_MODES = (REPEATED, RANDOM)
PERIODS = (2, 4, 8, 16, 32, 64)
TRIPLE_LEN = 4  # subject, relation, object, separator


@dataclass(frozen=True)
class Vocab:
    size: int
    subjects: tuple[int, ...]
    relations: tuple[int, ...]
    objects: tuple[int, ...]
    separator: int
    distractor_pool: tuple[int, ...]
    query_marker: int | None = None
    names: tuple[str, ...] = ()

    def __post_init__(self):
        pools = {
            "subjects": self.subjects,
            "relations": self.relations,
            "objects": self.objects,
            "separator": (self.separator,),
            "distractor_pool": self.distractor_pool,
        }
        if self.query_marker is not None:
            pools["query_marker"] = (self.query_marker,)
        seen = {}
        for pool, ids in pools.items():
            for tok in ids:
                if not 0 <= tok < self.size:
                    raise VocabularyError(f"{pool} token {tok} outside vocabulary of size {self.size}")
                if tok in seen:
                    raise VocabularyError(f"token {tok} is in both {seen[tok]} and {pool}")
                seen[tok] = pool
        if self.names and len(self.names) != self.size:
            raise VocabularyError("names must list one display string per token id")

    @property
    def content_tokens(self):
        return self.subjects + self.relations + self.objects

    def name(self, tok):
        return self.names[tok] if self.names else str(tok)

    def render(self, tokens):
        return " ".join(self.name(int(t)) for t in tokens)

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        tup = ("subjects", "relations", "objects", "distractor_pool", "names")
        return cls(**{k: tuple(v) if k in tup else v for k, v in d.items()})

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_vocab(size=64, n_subjects=16, n_relations=16, n_objects=16):
    """Separator first, then subject, relation and object pools; every
    remaining id goes to the distractor pool."""
    need = 1 + n_subjects + n_relations + n_objects
    if size < need:
        raise VocabularyError(f"vocabulary of size {size} cannot hold {need} task tokens")
    ids = iter(range(size))
    sep = next(ids)
    subjects = tuple(next(ids) for _ in range(n_subjects))
    relations = tuple(next(ids) for _ in range(n_relations))
    objects = tuple(next(ids) for _ in range(n_objects))
    distractors = tuple(ids)
    names = ["."]
    names += [f"S{i}" for i in range(n_subjects)]
    names += [f"r{i}" for i in range(n_relations)]
    names += [f"O{i}" for i in range(n_objects)]
    names += [f"~{i}" for i in range(len(distractors))]
    return Vocab(size, subjects, relations, objects, sep, distractors, None, tuple(names))


@dataclass(frozen=True)
class RecallInstance:
    context_tokens: tuple[int, ...]
    distractor_tokens: tuple[int, ...]
    query_tokens: tuple[int, ...]
    gold_object: int
    k: int  # 1-based target triple
    L: int
    relation_mode: str
    n_distractors: int
    seed: int

    @property
    def tokens(self):
        return np.array(self.context_tokens + self.distractor_tokens + self.query_tokens, dtype=np.int64)

    def __len__(self):
        return len(self.context_tokens) + len(self.distractor_tokens) + len(self.query_tokens)

    @property
    def query_start(self):
        return len(self.context_tokens) + len(self.distractor_tokens)

    def triple_span(self, index=1):
        """Token positions (0-based) of triple ``index`` including its separator."""
        start = (index - 1) * TRIPLE_LEN
        return tuple(range(start, start + TRIPLE_LEN))

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("context_tokens", "distractor_tokens", "query_tokens"):
            d[key] = tuple(d[key])
        return cls(**d)


def parse_triples(instance: RecallInstance, vocab: Vocab):
    """Re-read ``(s, r, o)`` triples from the context tokens."""
    ctx = instance.context_tokens
    if len(ctx) != TRIPLE_LEN * instance.L:
        raise VocabularyError("context length does not match L")
    triples = []
    for i in range(instance.L):
        s, r, o, sep = ctx[i * TRIPLE_LEN : (i + 1) * TRIPLE_LEN]
        if sep != vocab.separator:
            raise VocabularyError(f"triple {i + 1} lacks a separator")
        triples.append((s, r, o))
    return triples


def _streams(seed):
    so, rel, dis = np.random.SeedSequence(int(seed)).spawn(3)
    return np.random.default_rng(so), np.random.default_rng(rel), np.random.default_rng(dis)


def gen_instance(vocab: Vocab, L: int, k: int, relation_mode: str = REPEATED, n_distractors: int = 0, seed: int = 0):
    if relation_mode not in RELATION_MODES:
        raise ConfigError(f"relation_mode must be one of {RELATION_MODES}")
    if L < 1 or not 1 <= k <= L:
        raise ConfigError(f"need 1 <= k <= L, got k={k}, L={L}")
    if n_distractors < 0:
        raise ConfigError("n_distractors must be >= 0")
    if L > min(len(vocab.subjects), len(vocab.objects)):
        raise VocabularyError(f"L={L} needs at least {L} subjects and {L} objects")
    if relation_mode == RANDOM and len(vocab.relations) < L:
        raise VocabularyError(f"random relations at L={L} need at least {L} relation tokens")
    if not vocab.relations:
        raise VocabularyError("vocabulary has no relation tokens")
    if n_distractors and not vocab.distractor_pool:
        raise VocabularyError("distractors requested but the distractor pool is empty")

    # separate streams: relation mode and distractor count never perturb the triples
    rng_so, rng_rel, rng_dis = _streams(seed)
    subjects = rng_so.choice(vocab.subjects, size=L, replace=False)
    objects = rng_so.choice(vocab.objects, size=L, replace=False)
    if relation_mode == REPEATED:
        relations = np.repeat(rng_rel.choice(vocab.relations), L)
    else:
        relations = rng_rel.choice(vocab.relations, size=L, replace=False)
    distractors = rng_dis.choice(vocab.distractor_pool, size=n_distractors) if n_distractors else ()

    context = []
    for s, r, o in zip(subjects, relations, objects):
        context += [int(s), int(r), int(o), vocab.separator]
    query = [int(subjects[k - 1]), int(relations[k - 1])]
    if vocab.query_marker is not None:
        query = [vocab.query_marker] + query
    return RecallInstance(
        context_tokens=tuple(context),
        distractor_tokens=tuple(int(t) for t in distractors),
        query_tokens=tuple(query),
        gold_object=int(objects[k - 1]),
        k=k,
        L=L,
        relation_mode=relation_mode,
        n_distractors=n_distractors,
        seed=int(seed),
    )


def with_distractors(instance: RecallInstance, vocab: Vocab, n: int) -> RecallInstance:
    """Same triples and query, ``n`` fresh distractors."""
    return gen_instance(vocab, instance.L, instance.k, instance.relation_mode, n, instance.seed)


def _derived_seed(*parts):
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def n_distinct_contexts(vocab: Vocab, L: int, relation_mode: str):
    """How many distinct token sequences exist for one (L, k) cell."""
    perms = math.perm(len(vocab.subjects), L) * math.perm(len(vocab.objects), L)
    rel = len(vocab.relations) if relation_mode == REPEATED else math.perm(len(vocab.relations), L)
    return perms * rel


def gen_dataset(
    vocab: Vocab,
    depths=(8,),
    samples_per_position: int = 50,
    relation_mode: str = REPEATED,
    seed: int = 0,
    n_distractors: int = 0,
    max_retries: int = 1000,
):
    """``samples_per_position`` unique instances for every (L, k) cell."""
    if samples_per_position < 1:
        raise ConfigError("samples_per_position must be >= 1")
    out = []
    seen = set()
    for L in depths:
        L = int(L)
        if n_distinct_contexts(vocab, L, relation_mode) < samples_per_position:
            raise VocabularyError(f"only {n_distinct_contexts(vocab, L, relation_mode)} distinct sequences exist at L={L}")
        for k in range(1, L + 1):
            counter = 0
            for _ in range(samples_per_position):
                for _retry in range(max_retries):
                    inst = gen_instance(vocab, L, k, relation_mode, n_distractors, _derived_seed(seed, L, k, counter))
                    counter += 1
                    key = inst.tokens.tobytes()
                    if key not in seen:
                        seen.add(key)
                        out.append(inst)
                        break
                else:
                    raise VocabularyError(f"could not find a unique instance at L={L}, k={k} in {max_retries} tries")
    return out


def save_dataset(path, instances, vocab: Vocab | None = None):
    """One JSON object per line; the vocabulary goes to ``<path>.vocab.json``."""
    path = Path(path)
    with path.open("w") as f:
        for inst in instances:
            f.write(json.dumps(inst.to_dict(), separators=(",", ":")) + "\n")
    if vocab is not None:
        vocab.save(vocab_sidecar(path))


def vocab_sidecar(path):
    path = Path(path)
    return path.with_name(path.name + ".vocab.json")


def load_dataset(path):
    with Path(path).open() as f:
        return [RecallInstance.from_dict(json.loads(line)) for line in f if line.strip()]


def dump_readable(instances, vocab: Vocab):
    return "\n".join(f"{vocab.render(i.tokens)}  ->  {vocab.name(i.gold_object)}" for i in instances)


@dataclass(frozen=True)
class PeriodicSequence:
    tokens: tuple[int, ...]
    period: int
    seed: int
    token: int  # the repeated token (arbitrary when period == length)

    def repeated_slots(self):
        if self.period >= len(self.tokens):
            return ()
        return tuple(range(0, len(self.tokens), self.period))


def gen_periodic(vocab: Vocab, period: int, seed: int = 0, length: int = 64, pool=None):
    """A token repeats every ``period`` positions; the other slots are uniform
    draws (excluding the repeated token) from a small pool. ``period == length``
    gives a fully random sequence."""
    if period not in PERIODS or period > length:
        raise ConfigError(f"period must be one of {PERIODS} and <= {length}, got {period}")
    pool = np.asarray(pool if pool is not None else vocab.content_tokens)
    rng = np.random.default_rng(int(seed))
    if period == length:
        toks = rng.choice(pool, size=length)
        return PeriodicSequence(tuple(int(t) for t in toks), period, int(seed), int(toks[0]))
    rep = rng.choice(pool)
    filler = rng.choice(pool[pool != rep], size=length)
    filler[::period] = rep
    return PeriodicSequence(tuple(int(t) for t in filler), period, int(seed), int(rep))
