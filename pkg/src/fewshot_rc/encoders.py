"""Sentence and pair encoders over the tensor core.

Two encoders share one trunk recipe (embed -> conv1d -> relu -> max over
rows):

* :func:`encode_sentence` embeds one instance as word + head-position +
  tail-position channels and pools over its valid tokens only.  PAD rows are
  excluded by construction: the instance is sliced to its valid length
  before any embedding lookup, which is numerically identical to masking
  PAD rows out of the max.

* :func:`encode_pair` scores a (query, support) pair as a 2-vector: index 1
  is the "same relation" score, index 0 the "not same" score.  The pair is
  rendered as one marked token sequence (entity markers around both
  instances' spans, a SEP token between them), embedded with absolute
  positions and a query/support segment channel, run through the trunk,
  then pooled per segment; the head sees [u, v, u*v] so it can compare the
  two segments, not just their union.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .corpus import (
    HEAD_L_ID,
    HEAD_R_ID,
    SEP_ID,
    TAIL_L_ID,
    TAIL_R_ID,
    EncodedInstance,
)
from .episodes import RngStream

logger = logging.getLogger(__name__)

__all__ = [
    "EncoderError",
    "CnnEncoderConfig",
    "CnnEncoderParams",
    "PairEncoderConfig",
    "PairEncoderParams",
    "encode_sentence",
    "encode_pair",
    "spans_of",
    "attach_params",
    "detach_params",
    "param_count",
]


class EncoderError(Exception):
    """Encoder contract violation (shape/config mismatch, overflow)."""


def attach_params(tensors: Mapping[str, Tensor], tape: Tape) -> None:
    for t in tensors.values():
        t.attach(tape)


def detach_params(tensors: Mapping[str, Tensor]) -> None:
    for t in tensors.values():
        t.detach()


def param_count(tensors: Mapping[str, Tensor]) -> int:
    return sum(t.data.size for t in tensors.values())


# ---------------------------------------------------------------------------
# sentence encoder
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CnnEncoderConfig:
    """Shapes for the sentence encoder; hidden size equals n_filters."""

    vocab_size: int
    max_len: int
    d_word: int = 50
    d_pos: int = 5
    window: int = 3
    n_filters: int = 64

    def __post_init__(self):
        if self.vocab_size < 7:
            raise EncoderError("vocab_size must cover the reserved ids")
        if self.max_len < 1 or self.d_word < 1 or self.d_pos < 1:
            raise EncoderError("dimensions must be positive")
        if self.window % 2 == 0:
            raise EncoderError(f"window must be odd, got {self.window}")

    @property
    def n_positions(self) -> int:
        # clipped signed distances in [-max_len, max_len], shifted
        return 2 * self.max_len + 1

    @property
    def channels(self) -> int:
        return self.d_word + 2 * self.d_pos

    @property
    def hidden(self) -> int:
        return self.n_filters


class CnnEncoderParams:
    """Named parameter tensors of the sentence encoder."""

    def __init__(self, config: CnnEncoderConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    NAMES = ("tok_emb", "head_pos_emb", "tail_pos_emb",
             "conv_kernels", "conv_bias")

    @classmethod
    def init(cls, config: CnnEncoderConfig, stream: RngStream) -> "CnnEncoderParams":
        g = stream.generator()
        c = config
        fan_in = c.window * c.channels
        tensors = {
            "tok_emb": Tensor(g.uniform(-0.1, 0.1, size=(c.vocab_size, c.d_word))),
            "head_pos_emb": Tensor(g.uniform(-0.1, 0.1, size=(c.n_positions, c.d_pos))),
            "tail_pos_emb": Tensor(g.uniform(-0.1, 0.1, size=(c.n_positions, c.d_pos))),
            "conv_kernels": Tensor(g.normal(0.0, np.sqrt(2.0 / fan_in),
                                            size=(c.n_filters, fan_in))),
            "conv_bias": Tensor(np.zeros(c.n_filters)),
        }
        return cls(config, tensors)

    def named_tensors(self) -> dict[str, Tensor]:
        return self.tensors


def _check_instance(inst: EncodedInstance, config: CnnEncoderConfig) -> None:
    if len(inst.token_ids) != config.max_len:
        raise EncoderError(
            f"instance padded to {len(inst.token_ids)}, encoder expects "
            f"max_len={config.max_len}")
    L = inst.length
    pos = inst.head_pos[:L] + inst.tail_pos[:L]
    if pos and (min(pos) < 0 or max(pos) >= config.n_positions):
        raise EncoderError(
            f"position id outside table of size {config.n_positions}")
    if max(inst.token_ids[:L], default=0) >= config.vocab_size:
        raise EncoderError("token id outside the vocabulary")


def encode_sentence(params: CnnEncoderParams, inst: EncodedInstance) -> Tensor:
    """Embedding of one instance: H-vector pooled over valid tokens."""
    c = params.config
    _check_instance(inst, c)
    L = inst.length
    t = params.tensors
    tok = ad.embedding_lookup(t["tok_emb"], inst.token_ids[:L])
    hp = ad.embedding_lookup(t["head_pos_emb"], inst.head_pos[:L])
    tp = ad.embedding_lookup(t["tail_pos_emb"], inst.tail_pos[:L])
    x = ad.concat([tok, hp, tp], axis=1)
    h = ad.relu(ad.conv1d(x, t["conv_kernels"], t["conv_bias"], c.window))
    return ad.max_over_time(h)


# ---------------------------------------------------------------------------
# pair encoder
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PairEncoderConfig:
    """Shapes for the pair scorer.

    The combined sequence is query tokens (+4 entity markers), SEP, support
    tokens (+4 markers): at most 2*max_len + 9 positions.
    """

    vocab_size: int
    max_len: int
    d_word: int = 50
    d_pos: int = 5
    window: int = 3
    n_filters: int = 64

    def __post_init__(self):
        if self.vocab_size < 7:
            raise EncoderError("vocab_size must cover the reserved ids")
        if self.max_len < 1 or self.d_word < 1 or self.d_pos < 1:
            raise EncoderError("dimensions must be positive")
        if self.window % 2 == 0:
            raise EncoderError(f"window must be odd, got {self.window}")

    @property
    def pair_max_len(self) -> int:
        return 2 * self.max_len + 9

    @property
    def channels(self) -> int:
        return self.d_word + 2 * self.d_pos

    @property
    def hidden(self) -> int:
        return self.n_filters


class PairEncoderParams:
    """Named parameter tensors of the pair scorer."""

    def __init__(self, config: PairEncoderConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    NAMES = ("tok_emb", "abs_pos_emb", "seg_emb",
             "conv_kernels", "conv_bias", "head_w", "head_b")

    @classmethod
    def init(cls, config: PairEncoderConfig, stream: RngStream) -> "PairEncoderParams":
        g = stream.generator()
        c = config
        fan_in = c.window * c.channels
        tensors = {
            "tok_emb": Tensor(g.uniform(-0.1, 0.1, size=(c.vocab_size, c.d_word))),
            "abs_pos_emb": Tensor(g.uniform(-0.1, 0.1, size=(c.pair_max_len, c.d_pos))),
            "seg_emb": Tensor(g.uniform(-0.1, 0.1, size=(2, c.d_pos))),
            "conv_kernels": Tensor(g.normal(0.0, np.sqrt(2.0 / fan_in),
                                            size=(c.n_filters, fan_in))),
            "conv_bias": Tensor(np.zeros(c.n_filters)),
            "head_w": Tensor(g.normal(0.0, np.sqrt(1.0 / (3 * c.n_filters)),
                                      size=(3 * c.n_filters, 2))),
            "head_b": Tensor(np.zeros((1, 2))),
        }
        return cls(config, tensors)

    def named_tensors(self) -> dict[str, Tensor]:
        return self.tensors


def spans_of(inst: EncodedInstance) -> tuple[tuple[int, int], tuple[int, int]]:
    """Recover (head_span, tail_span) from the position id sequences.

    Position id max_len encodes raw distance 0, which holds exactly on span
    tokens; spans are contiguous, so the zero run is the span.
    """
    max_len = len(inst.token_ids)
    spans = []
    for seq in (inst.head_pos, inst.tail_pos):
        zeros = [i for i in range(inst.length) if seq[i] == max_len]
        if not zeros or zeros != list(range(zeros[0], zeros[-1] + 1)):
            raise EncoderError("cannot recover entity span from positions")
        spans.append((zeros[0], zeros[-1] + 1))
    return spans[0], spans[1]


def _marked_ids(inst: EncodedInstance) -> list[int]:
    """Token ids with entity markers spliced around both spans."""
    head, tail = spans_of(inst)
    ids = list(inst.token_ids[:inst.length])
    # insert rightmost-first so earlier indices stay valid
    inserts = sorted(
        [(head[1], HEAD_R_ID), (head[0], HEAD_L_ID),
         (tail[1], TAIL_R_ID), (tail[0], TAIL_L_ID)],
        key=lambda p: (-p[0], p[1] in (HEAD_R_ID, TAIL_R_ID)))
    for pos, marker in inserts:
        ids.insert(pos, marker)
    return ids


def _pair_sequence(query: EncodedInstance,
                   support: EncodedInstance) -> tuple[list[int], list[int], int]:
    """Combined ids and segment ids for a pair; returns (ids, segments, qlen).

    ids = marked query + SEP + marked support; segment 0 covers the query
    part and the SEP, segment 1 the support part.  qlen is the marked query
    length (the SEP sits at index qlen).
    """
    q_ids = _marked_ids(query)
    s_ids = _marked_ids(support)
    ids = q_ids + [SEP_ID] + s_ids
    segments = [0] * (len(q_ids) + 1) + [1] * len(s_ids)
    return ids, segments, len(q_ids)


def encode_pair(params: PairEncoderParams, query: EncodedInstance,
                support: EncodedInstance) -> Tensor:
    """2-score vector for one (query, support) pair; see module docstring."""
    c = params.config
    ids, segments, qlen = _pair_sequence(query, support)
    L = len(ids)
    if L > c.pair_max_len:
        raise EncoderError(
            f"combined pair sequence of {L} tokens exceeds {c.pair_max_len} "
            f"(query relation id {query.relation_id}, length {query.length}; "
            f"support relation id {support.relation_id}, length {support.length})")
    if max(ids) >= c.vocab_size:
        raise EncoderError("token id outside the vocabulary")

    t = params.tensors
    tok = ad.embedding_lookup(t["tok_emb"], ids)
    pos = ad.embedding_lookup(t["abs_pos_emb"], list(range(L)))
    seg = ad.embedding_lookup(t["seg_emb"], segments)
    x = ad.concat([tok, pos, seg], axis=1)
    h = ad.relu(ad.conv1d(x, t["conv_kernels"], t["conv_bias"], c.window))
    u = ad.max_over_time(ad.rows(h, 0, qlen))
    v = ad.max_over_time(ad.rows(h, qlen + 1, L))
    feats = ad.concat([u, v, ad.mul(u, v)], axis=0)
    scores = ad.add(ad.matmul(ad.reshape(feats, (1, 3 * c.n_filters)),
                              t["head_w"]),
                    t["head_b"])
    return ad.reshape(scores, (2,))
