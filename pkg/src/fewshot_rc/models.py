"""Scoring heads and losses: prototypes, pair aggregation, abstain, adversary.

Score-vector convention, fixed across the package: real relations occupy
indices 0..N-1 in episode way order; when an abstain ("none of the above",
NOTA) score exists it sits at index N, last.  Argmax tie-breaks to the
lowest index, so real relations win ties against NOTA.

The domain adversary follows the min-max recipe: encoder features pass
through ``grad_reverse`` before the discriminator, so a single backward
ascends the objective for the discriminator while descending it for the
encoder.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import NOTA_ID, EncodedInstance
from .encoders import (
    CnnEncoderParams,
    PairEncoderParams,
    encode_pair,
    encode_sentence,
)
from .episodes import Episode, RngStream

__all__ = [
    "ModelError",
    "NotaBlindError",
    "RelationScores",
    "Prediction",
    "DiscriminatorParams",
    "proto_logits",
    "proto_nota_logits",
    "pair_scores",
    "classify",
    "restrict_to_ways",
    "discriminator_forward",
    "adversarial_loss",
    "episode_loss",
    "ProtoModel",
    "PairModel",
    "stack_support",
]


class ModelError(Exception):
    """Model-layer contract violation."""


class NotaBlindError(ModelError):
    """An abstain-labeled query reached a head with no abstain score."""


@dataclass
class RelationScores:
    """Per-relation scores; ``has_nota`` marks a trailing abstain score."""

    scores: Tensor
    has_nota: bool
    kind: str  # "proto-distance" | "pair-average"

    @property
    def n_way(self) -> int:
        return self.scores.shape[0] - (1 if self.has_nota else 0)


@dataclass(frozen=True)
class Prediction:
    """Softmax probabilities and the argmax decision.

    ``index`` is the winning position in the score vector; ``label`` maps a
    winning abstain slot to ``NOTA_ID`` and is otherwise the way index.
    """

    probs: np.ndarray
    index: int
    label: int


def stack_support(embeddings: Sequence[Sequence[Tensor]]) -> Tensor:
    """[N ways][K shots] of H-vectors -> one [N, K, H] tensor."""
    return ad.stack([ad.stack(list(way)) for way in embeddings])


def proto_logits(support_emb: Tensor, query_emb: Tensor) -> RelationScores:
    """Negative squared distance from the query to each way's prototype."""
    if support_emb.data.ndim != 3:
        raise ModelError(f"support must be [N, K, H], got {support_emb.shape}")
    n, k, h = support_emb.shape
    if n < 2 or k < 1:
        raise ModelError(f"need N >= 2 ways and K >= 1 shots, got N={n}, K={k}")
    if query_emb.shape != (h,):
        raise ModelError(
            f"query must be [{h}], got {query_emb.shape}")
    protos = ad.mean_axis(support_emb, 1)                      # [N, H]
    q = ad.stack([query_emb] * n)                              # [N, H]
    diff = ad.add(q, ad.scale(protos, -1.0))
    dist = ad.sum_axis(ad.mul(diff, diff), 1)                  # [N]
    return RelationScores(ad.scale(dist, -1.0), has_nota=False,
                          kind="proto-distance")


def proto_nota_logits(support_emb: Tensor, nota_support_emb: Tensor,
                      query_emb: Tensor) -> RelationScores:
    """proto_logits plus a trailing score for the abstain way's prototype."""
    base = proto_logits(support_emb, query_emb)
    if nota_support_emb.data.ndim != 2:
        raise ModelError(
            f"abstain support must be [K, H], got {nota_support_emb.shape}")
    h = support_emb.shape[2]
    if nota_support_emb.shape[1] != h:
        raise ModelError("abstain support feature size mismatch")
    proto = ad.mean_axis(nota_support_emb, 0)                  # [H]
    diff = ad.add(query_emb, ad.scale(proto, -1.0))
    dist = ad.sum_axis(ad.mul(diff, diff), 0)                  # scalar
    nota = ad.reshape(ad.scale(dist, -1.0), (1,))
    return RelationScores(ad.concat([base.scores, nota], axis=0),
                          has_nota=True, kind="proto-distance")


def pair_scores(pair_outputs: Tensor) -> RelationScores:
    """Aggregate per-pair 2-scores into N way scores plus an abstain score.

    Way score: mean over the K "same relation" entries.  Abstain score: the
    minimum over ways of the mean "not same" entry -- abstain only wins when
    every way's support disagrees with the query.
    """
    if pair_outputs.data.ndim != 3 or pair_outputs.shape[2] != 2:
        raise ModelError(
            f"pair outputs must be [N, K, 2], got {pair_outputs.shape}")
    n, k, _ = pair_outputs.shape
    if n < 1 or k < 1:
        raise ModelError(f"need N >= 1 and K >= 1, got N={n}, K={k}")
    same = ad.mean_axis(ad.index_axis(pair_outputs, 2, 1), 1)  # [N]
    diff = ad.mean_axis(ad.index_axis(pair_outputs, 2, 0), 1)  # [N]
    nota, _ = ad.min_axis(diff, 0)                             # scalar
    scores = ad.concat([same, ad.reshape(nota, (1,))], axis=0)
    return RelationScores(scores, has_nota=True, kind="pair-average")


def classify(scores: RelationScores) -> Prediction:
    """Stable softmax over the provided scores plus the argmax decision.

    Pure numeric readout (no tape); training losses go through
    softmax_cross_entropy instead.
    """
    s = scores.scores.data
    if s.ndim != 1 or s.size == 0:
        raise ModelError(f"scores must be a nonempty vector, got shape {s.shape}")
    z = s - s.max()
    ez = np.exp(z)
    probs = ez / ez.sum()
    index = int(np.argmax(s))  # first max wins ties; abstain is last
    label = NOTA_ID if scores.has_nota and index == s.size - 1 else index
    return Prediction(probs, index, label)


def restrict_to_ways(scores: RelationScores) -> RelationScores:
    """Drop the abstain score: the "ignore abstain" ablation head."""
    if not scores.has_nota:
        return scores
    n = scores.n_way
    return RelationScores(ad.rows(scores.scores, 0, n), has_nota=False,
                          kind=scores.kind)


# ---------------------------------------------------------------------------
# domain discriminator
# ---------------------------------------------------------------------------

class DiscriminatorParams:
    """Two affine layers with tanh between; output dimension exactly 2."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = tensors

    NAMES = ("disc_w1", "disc_b1", "disc_w2", "disc_b2")

    @classmethod
    def init(cls, feature_dim: int, hidden: int,
             stream: RngStream) -> "DiscriminatorParams":
        g = stream.generator()
        return cls({
            "disc_w1": Tensor(g.normal(0.0, np.sqrt(1.0 / feature_dim),
                                       size=(feature_dim, hidden))),
            "disc_b1": Tensor(np.zeros((1, hidden))),
            "disc_w2": Tensor(g.normal(0.0, np.sqrt(1.0 / hidden),
                                       size=(hidden, 2))),
            "disc_b2": Tensor(np.zeros((1, 2))),
        })

    def named_tensors(self) -> dict[str, Tensor]:
        return self.tensors


def discriminator_forward(params: DiscriminatorParams,
                          features: Tensor) -> Tensor:
    """affine -> tanh -> affine -> 2 scores for one feature vector."""
    t = params.tensors
    h = t["disc_w1"].shape[0]
    if features.shape != (h,):
        raise ModelError(
            f"features must be [{h}], got {features.shape}")
    x = ad.reshape(features, (1, h))
    hidden = ad.tanh(ad.add(ad.matmul(x, t["disc_w1"]), t["disc_b1"]))
    out = ad.add(ad.matmul(hidden, t["disc_w2"]), t["disc_b2"])
    return ad.reshape(out, (2,))


def adversarial_loss(source_logprobs: Sequence[Tensor],
                     target_logprobs: Sequence[Tensor]) -> Tensor:
    """Domain-discrimination objective: sum of correct-side log-probs.

    Inputs are per-instance 2-vectors of log-probabilities (log-softmax of
    discriminator scores): index 0 is "source", index 1 is "target".  The
    returned scalar is the objective the discriminator maximizes; callers
    descend its negation, and a grad_reverse between encoder and
    discriminator turns that single descent into the min-max update.
    """
    if not source_logprobs or not target_logprobs:
        raise ModelError("adversarial_loss needs instances on both sides")
    terms = [ad.index_axis(lp, 0, 0) for lp in source_logprobs]
    terms += [ad.index_axis(lp, 0, 1) for lp in target_logprobs]
    return ad.sum_axis(ad.stack(terms), 0)


# ---------------------------------------------------------------------------
# episode-level models
# ---------------------------------------------------------------------------

class ProtoModel:
    """Prototype scorer over the sentence encoder.

    ``use_nota_support=True`` adds an abstain way whose prototype comes from
    caller-provided support instances (sampled outside the episode's
    relations).
    """

    def __init__(self, params: CnnEncoderParams, use_nota_support: bool = False):
        self.params = params
        self.use_nota_support = use_nota_support

    def named_tensors(self) -> dict[str, Tensor]:
        return self.params.named_tensors()

    def encode(self, inst: EncodedInstance) -> Tensor:
        return encode_sentence(self.params, inst)

    def episode_scores(self, episode: Episode,
                       nota_support: tuple[EncodedInstance, ...] | None = None,
                       ) -> list[RelationScores]:
        if self.use_nota_support and not nota_support:
            raise ModelError("this model needs abstain-way support instances")
        sup = stack_support([[self.encode(inst) for inst in way]
                             for way in episode.support])
        nota_emb = None
        if self.use_nota_support:
            nota_emb = ad.stack([self.encode(i) for i in nota_support])
        out = []
        for q in episode.queries:
            q_emb = self.encode(q)
            if nota_emb is None:
                out.append(proto_logits(sup, q_emb))
            else:
                out.append(proto_nota_logits(sup, nota_emb, q_emb))
        return out


class PairModel:
    """Pairwise scorer: every query is scored against every support shot."""

    def __init__(self, params: PairEncoderParams):
        self.params = params

    def named_tensors(self) -> dict[str, Tensor]:
        return self.params.named_tensors()

    def episode_scores(self, episode: Episode,
                       nota_support=None) -> list[RelationScores]:
        out = []
        for q in episode.queries:
            ways = [ad.stack([encode_pair(self.params, q, s) for s in way])
                    for way in episode.support]
            out.append(pair_scores(ad.stack(ways)))
        return out


def episode_loss(model, episode: Episode,
                 nota_support: tuple[EncodedInstance, ...] | None = None,
                 ) -> Tensor:
    """Mean cross entropy over the episode's queries.

    Abstain-labeled queries train the trailing abstain score; handing one to
    a head without that score raises :class:`NotaBlindError` (the ablation
    path evaluates such heads instead of training them on abstain data).
    """
    scores = model.episode_scores(episode, nota_support)
    losses = []
    for sc, label in zip(scores, episode.labels):
        if label == NOTA_ID:
            if not sc.has_nota:
                raise NotaBlindError(
                    "abstain-labeled query given to a head with no abstain score")
            idx = sc.scores.shape[0] - 1
        else:
            idx = label
        losses.append(ad.softmax_cross_entropy(sc.scores, idx))
    return ad.scale(ad.sum_axis(ad.stack(losses), 0), 1.0 / len(losses))
