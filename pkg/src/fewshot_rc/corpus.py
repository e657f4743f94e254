"""Corpus loading, vocabulary construction, instance encoding, synthesis.

A dataset is a plain mapping ``relation name -> tuple of Instance`` plus a
:class:`RelationInventory` assigning dense integer ids in file order.  All
structures are immutable after construction and safe to share.

Dataset file schema (UTF-8 JSON): a top-level object mapping each relation
name to an array of instance records::

    {"relation_name": [
        {"tokens": ["word", ...],
         "h": ["head surface form", "entity id", [[head token indices]]],
         "t": ["tail surface form", "entity id", [[tail token indices]]]},
        ...
    ], ...}

Index lists are 0-based token positions; the first occurrence list is used
and must be contiguous.  Instances arrive pre-tokenized; lowercasing happens
at vocabulary build and id lookup, never on the stored tokens.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "CorpusError",
    "NOTA_ID",
    "PAD_ID",
    "UNK_ID",
    "SEP_ID",
    "HEAD_L_ID",
    "HEAD_R_ID",
    "TAIL_L_ID",
    "TAIL_R_ID",
    "RESERVED_TOKENS",
    "BIOMED_RELATIONS",
    "Instance",
    "RelationInventory",
    "Vocabulary",
    "EncodedInstance",
    "SyntheticSpec",
    "load_dataset",
    "serialize_dataset",
    "build_vocab",
    "encode_instance",
    "encode_dataset",
    "gen_synthetic",
    "check_disjoint_relations",
]


class CorpusError(Exception):
    """Malformed corpus file or contract violation at the data layer."""


# label sentinel for abstain ("none of the listed relations") queries;
# deliberately outside any dense inventory id range
NOTA_ID = -1

PAD_ID, UNK_ID, SEP_ID = 0, 1, 2
HEAD_L_ID, HEAD_R_ID = 3, 4
TAIL_L_ID, TAIL_R_ID = 5, 6
RESERVED_TOKENS = ("<pad>", "<unk>", "<sep>",
                   "<head_l>", "<head_r>", "<tail_l>", "<tail_r>")

# relation names of the small biomedical evaluation inventory used by the
# cross-domain fixtures and demos
BIOMED_RELATIONS = (
    "is_associated_anatomy_of_gene_product",
    "finding_site_of",
    "has_structural_class",
    "disposition_of",
    "may_be_treated_by",
    "chemotherapy_regimen_has_component",
    "has_method",
    "procedure_site_of",
    "gene_product_has_biochemical_function",
    "manifestation_of",
    "process_involves_gene",
    "part_of",
    "may_be_prevented_by",
    "disease_has_associated_anatomic_site",
    "disease_has_normal_cell_origin",
    "biological_process_involves_gene_product",
    "inheritance_type_of",
    "is_normal_tissue_origin_of_disease",
    "ingredient_of",
    "is_primary_anatomic_site_of_disease",
    "gene_found_in_organism",
    "occurs_in",
    "causative_agent_of",
    "classified_as",
    "gene_plays_role_in_process",
)


@dataclass(frozen=True)
class Instance:
    """One labeled sentence with head/tail entity spans (half-open)."""

    tokens: tuple[str, ...]
    head_span: tuple[int, int]
    tail_span: tuple[int, int]
    relation: str

    def __post_init__(self):
        if not self.tokens:
            raise CorpusError("instance has no tokens")
        n = len(self.tokens)
        for name, (a, b) in (("head", self.head_span), ("tail", self.tail_span)):
            if not (0 <= a < b <= n):
                raise CorpusError(
                    f"{name} span [{a}, {b}) out of range for {n} tokens "
                    f"(relation {self.relation!r})")
        if self.head_span == self.tail_span:
            raise CorpusError(
                f"head and tail spans identical: {self.head_span} "
                f"(relation {self.relation!r})")


class RelationInventory:
    """Ordered relation names with dense ids 0..n-1; NOTA stays outside."""

    def __init__(self, names: Sequence[str]):
        names = tuple(names)
        if len(set(names)) != len(names):
            dupes = sorted(n for n, c in Counter(names).items() if c > 1)
            raise CorpusError(f"duplicate relation names: {dupes}")
        self.names = names
        self._ids = {n: i for i, n in enumerate(names)}

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name: str) -> bool:
        return name in self._ids

    def id_of(self, name: str) -> int:
        try:
            return self._ids[name]
        except KeyError:
            raise CorpusError(f"unknown relation {name!r}") from None

    def name_of(self, rid: int) -> str:
        if not 0 <= rid < len(self.names):
            raise CorpusError(f"relation id {rid} out of range")
        return self.names[rid]

    def __eq__(self, other) -> bool:
        return isinstance(other, RelationInventory) and self.names == other.names

    def __hash__(self) -> int:
        return hash(self.names)

    def __repr__(self) -> str:
        return f"RelationInventory({len(self.names)} relations)"


class Vocabulary:
    """Token-to-id map with fixed reserved ids and deterministic ordering.

    Regular tokens are ordered by corpus frequency (descending), ties broken
    lexicographically; ids start right after the reserved block.  Lookups
    lowercase first and fall back to UNK.
    """

    def __init__(self, ordered_tokens: Sequence[str], counts: Mapping[str, int]):
        self.tokens = RESERVED_TOKENS + tuple(ordered_tokens)
        if len(set(self.tokens)) != len(self.tokens):
            raise CorpusError("vocabulary contains duplicate tokens")
        self._ids = {t: i for i, t in enumerate(self.tokens)}
        self.counts = dict(counts)

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._ids.get(token.lower(), UNK_ID)

    def __contains__(self, token: str) -> bool:
        return token.lower() in self._ids


def build_vocab(datasets: Iterable[Mapping[str, Sequence[Instance]]],
                min_count: int = 1) -> Vocabulary:
    """Vocabulary over every token (lowercased) in the given datasets."""
    if min_count < 1:
        raise CorpusError(f"min_count must be >= 1, got {min_count}")
    counts: Counter[str] = Counter()
    for ds in datasets:
        for insts in ds.values():
            for inst in insts:
                counts.update(t.lower() for t in inst.tokens)
    for r in RESERVED_TOKENS:
        counts.pop(r, None)  # corpus text never claims a reserved slot
    kept = [t for t, c in counts.items() if c >= min_count]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept, {t: counts[t] for t in kept})


@dataclass(frozen=True)
class EncodedInstance:
    """Instance as fixed-length id arrays ready for the encoders.

    ``token_ids``, ``head_pos`` and ``tail_pos`` all have length max_len;
    entries past ``length`` are PAD filler.  Position ids are signed
    distances to the nearest span token (0 inside the span), clipped to
    [-max_len, max_len] and shifted by +max_len into [0, 2*max_len].
    """

    token_ids: tuple[int, ...]
    head_pos: tuple[int, ...]
    tail_pos: tuple[int, ...]
    length: int
    relation_id: int

    @property
    def mask(self) -> tuple[int, ...]:
        return tuple(1 if i < self.length else 0
                     for i in range(len(self.token_ids)))


def _relative_positions(span: tuple[int, int], length: int,
                        max_len: int) -> list[int]:
    start, stop = span
    out = []
    for i in range(length):
        if i < start:
            d = i - start
        elif i >= stop:
            d = i - (stop - 1)
        else:
            d = 0
        d = max(-max_len, min(max_len, d))
        out.append(d + max_len)
    return out


def encode_instance(inst: Instance, vocab: Vocabulary, max_len: int,
                    relation_id: int) -> EncodedInstance:
    """Encode one instance; rejects any instance whose spans don't fit."""
    if max_len < 1:
        raise CorpusError(f"max_len must be >= 1, got {max_len}")
    if inst.head_span[1] > max_len or inst.tail_span[1] > max_len:
        raise CorpusError(
            f"entity span beyond max_len={max_len} in instance "
            f"{' '.join(inst.tokens[:6])!r}... (relation {inst.relation!r})")
    tokens = inst.tokens[:max_len]  # spans verified to fit; tail text may drop
    L = len(tokens)
    ids = [vocab.id_of(t) for t in tokens] + [PAD_ID] * (max_len - L)
    hp = _relative_positions(inst.head_span, L, max_len) + [0] * (max_len - L)
    tp = _relative_positions(inst.tail_span, L, max_len) + [0] * (max_len - L)
    return EncodedInstance(tuple(ids), tuple(hp), tuple(tp), L, relation_id)


def encode_dataset(dataset: Mapping[str, Sequence[Instance]],
                   inventory: RelationInventory, vocab: Vocabulary,
                   max_len: int) -> dict[str, tuple[EncodedInstance, ...]]:
    """Encode a whole dataset keyed by relation; hard-fails on bad spans."""
    return {
        rel: tuple(encode_instance(inst, vocab, max_len, inventory.id_of(rel))
                   for inst in insts)
        for rel, insts in dataset.items()
    }


def _span_from_indices(occurrences, what: str) -> tuple[int, int]:
    if not occurrences or not occurrences[0]:
        raise CorpusError(f"{what} entity has no token indices")
    first = sorted(int(i) for i in occurrences[0])
    if first != list(range(first[0], first[-1] + 1)):
        raise CorpusError(f"{what} entity indices not contiguous: {first}")
    return first[0], first[-1] + 1


def load_dataset(path) -> tuple[dict[str, tuple[Instance, ...]], RelationInventory]:
    """Load and validate a dataset file (schema in the module docstring).

    Instances failing span validation are dropped with a warning; a relation
    left empty (or empty in the file) is a hard error.
    """
    def reject_dupes(pairs):
        keys = [k for k, _ in pairs]
        if len(set(keys)) != len(keys):
            dupes = sorted(k for k, c in Counter(keys).items() if c > 1)
            raise CorpusError(f"duplicate relation names in file: {dupes}")
        return dict(pairs)

    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh, object_pairs_hook=reject_dupes)
        except json.JSONDecodeError as e:
            raise CorpusError(f"malformed JSON in {path}: {e}") from e
    if not isinstance(raw, dict):
        raise CorpusError(f"{path}: top level must be an object of relations")
    if not raw:
        raise CorpusError(f"{path}: no relations")

    dataset: dict[str, tuple[Instance, ...]] = {}
    for rel, records in raw.items():
        kept = []
        for rec in records:
            try:
                tokens = tuple(str(t) for t in rec["tokens"])
                head = _span_from_indices(rec["h"][2], "head")
                tail = _span_from_indices(rec["t"][2], "tail")
                kept.append(Instance(tokens, head, tail, rel))
            except (CorpusError, KeyError, IndexError, TypeError) as e:
                logger.warning("dropping invalid instance under %r: %s", rel, e)
        if not kept:
            raise CorpusError(f"relation {rel!r} has no valid instances")
        dataset[rel] = tuple(kept)
        logger.info("loaded relation %r: %d instances", rel, len(kept))
    return dataset, RelationInventory(list(dataset.keys()))


def serialize_dataset(dataset: Mapping[str, Sequence[Instance]]) -> dict:
    """Inverse of load_dataset (round-trips valid datasets exactly)."""
    out = {}
    for rel, insts in dataset.items():
        records = []
        for inst in insts:
            h0, h1 = inst.head_span
            t0, t1 = inst.tail_span
            records.append({
                "tokens": list(inst.tokens),
                "h": [" ".join(inst.tokens[h0:h1]), "", [list(range(h0, h1))]],
                "t": [" ".join(inst.tokens[t0:t1]), "", [list(range(t0, t1))]],
            })
        out[rel] = records
    return out


def check_disjoint_relations(**splits: Mapping[str, Sequence[Instance]]) -> None:
    """Hard error if any two named splits share a relation name."""
    names = list(splits.items())
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            (ka, da), (kb, db) = names[i], names[j]
            shared = sorted(set(da) & set(db))
            if shared:
                raise CorpusError(
                    f"splits {ka!r} and {kb!r} share relations: {shared[:5]}")


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a deterministic labeled corpus.

    ``signal`` picks how the relation is expressed: "keyword" plants one
    relation-specific token at a random position among fillers; "template"
    places it in a fixed slot directly between the head and tail entities.
    ``namespace`` prefixes every token and relation name, giving corpora
    with disjoint vocabularies and relation sets for cross-domain work.
    ``relation_names``, when set, replaces the generated relation names
    (length must equal ``num_relations``).
    """

    num_relations: int
    instances_per_relation: int
    vocab_size: int = 120
    sentence_len: tuple[int, int] = (8, 14)
    signal: str = "keyword"
    namespace: str = ""
    relation_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.num_relations < 2:
            raise CorpusError("need at least 2 relations")
        if self.instances_per_relation < 2:
            raise CorpusError("need at least 2 instances per relation")
        if self.signal not in ("keyword", "template"):
            raise CorpusError(f"unknown signal mode {self.signal!r}")
        lo, hi = self.sentence_len
        if not (4 <= lo <= hi):
            raise CorpusError("sentence_len must satisfy 4 <= lo <= hi")
        # keywords are carved out of the vocab budget; leave room for fillers
        if self.vocab_size < self.num_relations + 4:
            raise CorpusError(
                f"vocab_size {self.vocab_size} too small for "
                f"{self.num_relations} distinct relation keywords plus fillers")
        if (self.relation_names is not None
                and len(self.relation_names) != self.num_relations):
            raise CorpusError("relation_names length must equal num_relations")


def gen_synthetic(spec: SyntheticSpec,
                  seed: int) -> tuple[dict[str, tuple[Instance, ...]],
                                      RelationInventory]:
    """Deterministic synthetic corpus; same (spec, seed) → identical output."""
    rng = np.random.default_rng(seed)
    ns = spec.namespace
    if spec.relation_names is not None:
        rel_names = list(spec.relation_names)
    else:
        rel_names = [f"{ns}rel_{i:03d}" for i in range(spec.num_relations)]
    keywords = [f"{ns}kw_{i:03d}" for i in range(spec.num_relations)]
    n_fillers = spec.vocab_size - spec.num_relations
    fillers = [f"{ns}w_{i:04d}" for i in range(n_fillers)]
    lo, hi = spec.sentence_len

    def one_keyword(rel_i: int) -> Instance:
        L = int(rng.integers(lo, hi + 1))
        toks = [fillers[int(j)] for j in rng.integers(0, n_fillers, size=L)]
        toks[int(rng.integers(0, L))] = keywords[rel_i]
        # two disjoint single-token entity spans at distinct positions
        a, b = rng.choice(L, size=2, replace=False)
        a, b = int(a), int(b)
        return Instance(tuple(toks), (a, a + 1), (b, b + 1), rel_names[rel_i])

    def one_template(rel_i: int) -> Instance:
        # [fillers..., HEAD, keyword, TAIL, fillers...]
        L = int(rng.integers(lo, hi + 1))
        left = int(rng.integers(0, L - 3 + 1))
        toks = [fillers[int(j)] for j in rng.integers(0, n_fillers, size=L)]
        toks[left + 1] = keywords[rel_i]
        return Instance(tuple(toks), (left, left + 1),
                        (left + 2, left + 3), rel_names[rel_i])

    make = one_keyword if spec.signal == "keyword" else one_template
    dataset = {
        rel_names[i]: tuple(make(i) for _ in range(spec.instances_per_relation))
        for i in range(spec.num_relations)
    }
    return dataset, RelationInventory(rel_names)
