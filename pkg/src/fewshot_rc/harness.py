"""Config-driven training and evaluation.

The training loop is episodic: each step samples one few-shot episode (with
none-of-the-above queries injected at the configured rate), computes the
episode loss, and takes one optimizer step.  The adversarial variant adds a
domain-discrimination term on a balanced source/target batch, wired through
a gradient-reversal layer so the encoder and discriminator play their
min-max game inside a single backward pass.  Everything is driven by
counter-based RNG streams keyed on (phase, step indices), which makes runs
bit-reproducible and episode draws independent of execution order.

Evaluation samples E episodes per repeat, counts correctly labeled queries
(abstain counts as a label), and reports mean accuracy across repeats with
the standard deviation across those repeats as the dispersion.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from . import __version__
from . import autodiff as ad
from .autodiff import AutodiffError, Tape, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_hash
from .corpus import (
    NOTA_ID,
    RESERVED_TOKENS,
    EncodedInstance,
    Instance,
    RelationInventory,
    Vocabulary,
    build_vocab,
    encode_dataset,
    load_dataset,
)
from .encoders import (
    CnnEncoderConfig,
    CnnEncoderParams,
    PairEncoderConfig,
    PairEncoderParams,
    attach_params,
    detach_params,
)
from .episodes import (
    PHASE_EVAL,
    PHASE_INIT,
    PHASE_MEASURE,
    PHASE_TRAIN,
    PHASE_VALID,
    RngStream,
    sample_domain_batch,
    sample_episode,
    sample_nota_support,
)
from .models import (
    DiscriminatorParams,
    PairModel,
    ProtoModel,
    adversarial_loss,
    classify,
    discriminator_forward,
    episode_loss,
    restrict_to_ways,
)
from .optim import Optimizer
from .reports import EvalCell, EvalReport

__all__ = [
    "HarnessError",
    "RunManifest",
    "TrainResult",
    "EvalCounts",
    "train",
    "evaluate",
    "evaluate_with_counts",
    "nota_sweep",
    "da_eval",
    "load_trained",
    "collect_features",
    "probe_discriminator_accuracy",
]

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.bin"
MANIFEST_NAME = "manifest.json"


class HarnessError(RuntimeError):
    """Raised for invalid run setups or aborted runs."""


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    """What ran, from which config, and where the artifacts live."""

    config_hash: str
    code_version: str
    started_at: str
    finished_at: str
    checkpoint_path: str
    report_paths: tuple[str, ...] = ()

    def write(self, path) -> Path:
        out = Path(path)
        payload = asdict(self)
        payload["report_paths"] = list(self.report_paths)
        out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                       encoding="utf-8")
        return out

    @classmethod
    def read(cls, path) -> "RunManifest":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        data["report_paths"] = tuple(data.get("report_paths", ()))
        return cls(**data)


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# model construction by variant
# ---------------------------------------------------------------------------

_PAIR_VARIANTS = frozenset({"pair", "pair-star"})


class _AbstainBlindPair:
    """Pair model with the abstain score dropped (the "star" ablation)."""

    def __init__(self, inner: PairModel):
        self.inner = inner

    def named_tensors(self) -> dict[str, Tensor]:
        return self.inner.named_tensors()

    def episode_scores(self, episode, nota_support=None):
        return [restrict_to_ways(s)
                for s in self.inner.episode_scores(episode, nota_support)]


def _encoder_config(variant: str, cfg: RunConfig, vocab_size: int):
    kw = dict(vocab_size=vocab_size, max_len=cfg.corpus.max_len,
              d_word=cfg.encoder.d_word, d_pos=cfg.encoder.d_pos,
              window=cfg.encoder.window, n_filters=cfg.encoder.n_filters)
    if variant in _PAIR_VARIANTS:
        return PairEncoderConfig(**kw)
    return CnnEncoderConfig(**kw)


def _wrap_model(variant: str, params):
    if variant in ("proto", "proto-star", "proto-adv"):
        return ProtoModel(params)
    if variant == "proto-nota":
        return ProtoModel(params, use_nota_support=True)
    if variant == "pair":
        return PairModel(params)
    if variant == "pair-star":
        return _AbstainBlindPair(PairModel(params))
    raise HarnessError(f"unknown model variant {variant!r}")


def _fresh_model(variant: str, cfg: RunConfig, vocab_size: int,
                 stream: RngStream):
    enc_cfg = _encoder_config(variant, cfg, vocab_size)
    if variant in _PAIR_VARIANTS:
        params = PairEncoderParams.init(enc_cfg, stream)
    else:
        params = CnnEncoderParams.init(enc_cfg, stream)
    return _wrap_model(variant, params), params


def _model_from_arrays(meta: Mapping, arrays: Mapping[str, np.ndarray]):
    variant = meta["variant"]
    enc = meta["encoder"]
    kw = dict(vocab_size=enc["vocab_size"], max_len=enc["max_len"],
              d_word=enc["d_word"], d_pos=enc["d_pos"], window=enc["window"],
              n_filters=enc["n_filters"])
    if variant in _PAIR_VARIANTS:
        cls, cfg = PairEncoderParams, PairEncoderConfig(**kw)
    else:
        cls, cfg = CnnEncoderParams, CnnEncoderConfig(**kw)
    missing = [n for n in cls.NAMES if n not in arrays]
    if missing:
        raise HarnessError(f"checkpoint is missing tensors {missing}")
    params = cls(cfg, {n: Tensor(arrays[n]) for n in cls.NAMES})
    return _wrap_model(variant, params), params


def _needs_nota_support(variant: str) -> bool:
    return variant == "proto-nota"


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------

@dataclass
class _Prepared:
    train: dict[str, tuple[EncodedInstance, ...]]
    valid: dict[str, tuple[EncodedInstance, ...]]
    target: dict[str, tuple[EncodedInstance, ...]] | None
    vocab: Vocabulary
    inventory: RelationInventory


def _split_augmentation(raw: Mapping[str, tuple[Instance, ...]],
                        relations: Iterable[str], per_relation: int):
    """Carve the first per_relation instances (file order) out of each
    named relation; returns (moved, remainder-including-other-relations)."""
    moved: dict[str, tuple[Instance, ...]] = {}
    rest: dict[str, tuple[Instance, ...]] = {}
    wanted = set(relations)
    unknown = sorted(wanted - set(raw))
    if unknown:
        raise HarnessError(f"augmentation relations not in target corpus: {unknown}")
    for rel, insts in raw.items():
        if rel not in wanted:
            rest[rel] = insts
            continue
        if len(insts) < per_relation:
            raise HarnessError(
                f"augmentation wants {per_relation} instances of {rel!r}, "
                f"corpus has only {len(insts)}")
        moved[rel] = insts[:per_relation]
        leftover = insts[per_relation:]
        if leftover:
            rest[rel] = leftover
    return moved, rest


def _prepare(cfg: RunConfig) -> _Prepared:
    train_raw, _ = load_dataset(cfg.corpus.train_path)

    target_raw = None
    if cfg.corpus.target_path:
        target_raw, _ = load_dataset(cfg.corpus.target_path)

    if cfg.augmentation.enabled:
        moved, target_raw = _split_augmentation(
            target_raw, cfg.augmentation.relations,
            cfg.augmentation.per_relation)
        clash = sorted(set(moved) & set(train_raw))
        if clash:
            raise HarnessError(f"augmentation relations already in the "
                               f"training corpus: {clash}")
        train_raw = {**train_raw, **moved}

    if cfg.corpus.valid_path and cfg.corpus.valid_path != cfg.corpus.train_path:
        valid_raw, _ = load_dataset(cfg.corpus.valid_path)
    else:
        valid_raw = train_raw

    # Target text (unlabeled) joins the vocabulary whenever a target corpus
    # is configured, so source-only and adversarial runs share one token map.
    corpora = [train_raw] + ([target_raw] if target_raw else [])
    if valid_raw is not train_raw:
        corpora.append(valid_raw)
    vocab = build_vocab(corpora, min_count=cfg.corpus.min_count)

    names = set(train_raw) | set(valid_raw) | (set(target_raw) if target_raw else set())
    inventory = RelationInventory(sorted(names))
    enc = lambda raw: encode_dataset(raw, inventory, vocab, cfg.corpus.max_len)
    return _Prepared(
        train=enc(train_raw),
        valid=enc(valid_raw) if valid_raw is not train_raw else None,
        target=enc(target_raw) if target_raw else None,
        vocab=vocab,
        inventory=inventory,
    )


# ---------------------------------------------------------------------------
# episode-level prediction and accuracy counting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalCounts:
    """Pooled confusion tallies over a batch of evaluated episodes."""

    queries: int
    correct: int
    nota_queries: int
    nota_predictions: int

    def __add__(self, other: "EvalCounts") -> "EvalCounts":
        return EvalCounts(self.queries + other.queries,
                          self.correct + other.correct,
                          self.nota_queries + other.nota_queries,
                          self.nota_predictions + other.nota_predictions)

    @property
    def accuracy(self) -> float:
        return 100.0 * self.correct / self.queries if self.queries else 0.0


_ZERO_COUNTS = EvalCounts(0, 0, 0, 0)


def _score_episode(model, episode, nota_support) -> EvalCounts:
    scores = model.episode_scores(episode, nota_support=nota_support)
    correct = nota_q = nota_p = 0
    for sc, label in zip(scores, episode.labels):
        pred = classify(sc)
        correct += pred.label == label
        nota_q += label == NOTA_ID
        nota_p += pred.label == NOTA_ID
    return EvalCounts(len(episode.labels), correct, nota_q, nota_p)


def _run_episodes(model, needs_nota: bool, dataset, ecfg, streams,
                  nota_source) -> EvalCounts:
    total = _ZERO_COUNTS
    for s in streams:
        episode = sample_episode(dataset, ecfg, s.child(0))
        nota_sup = None
        if needs_nota:
            nota_sup = sample_nota_support(nota_source,
                                           set(episode.relation_names),
                                           ecfg.k_shot, s.child(1))
        total = total + _score_episode(model, episode, nota_sup)
    return total


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint_path: Path
    manifest: RunManifest
    valid_history: tuple[tuple[int, float], ...]
    disc_history: tuple[tuple[int, float], ...]
    best_valid_acc: float


def _grl_lambda(cfg: RunConfig, step: int) -> float:
    a = cfg.adversarial
    n = max(1, cfg.train.episodes - 1)
    return a.lambda_start + (a.lambda_end - a.lambda_start) * (step / n)


def _discriminator_accuracy(model, disc, source, target, stream,
                            batches: int = 4, half: int = 8) -> float:
    correct = total = 0
    for b in range(batches):
        batch = sample_domain_batch(source, target, half, stream.child(b))
        for inst, label in zip(batch.source + batch.target, batch.labels):
            out = discriminator_forward(disc, model.encode(inst))
            correct += int(np.argmax(out.data)) == label
            total += 1
    return 100.0 * correct / total


def train(cfg: RunConfig, *, progress: Callable[[str], None] | None = None
          ) -> TrainResult:
    """Run the configured training loop; returns checkpoint and manifest.

    Fully deterministic for a given config: episode draws, parameter init,
    and validation all hang off counter-based streams derived from the
    master seed, so the written checkpoint is bit-identical across runs.
    """
    started = _utcnow()
    say = progress or (lambda msg: logger.info("%s", msg))
    variant = cfg.model.variant
    prep = _prepare(cfg)
    master = RngStream(cfg.seed)

    model, _enc_params = _fresh_model(variant, cfg, len(prep.vocab),
                                      master.child(PHASE_INIT, 0))
    named = model.named_tensors()
    opt = Optimizer(named, method=cfg.train.optimizer, lr=cfg.train.lr,
                    momentum=cfg.train.momentum, beta1=cfg.train.beta1,
                    beta2=cfg.train.beta2, eps=cfg.train.eps)

    disc = disc_opt = None
    if cfg.adversarial.enabled:
        if prep.target is None:
            raise HarnessError("adversarial training needs a target corpus")
        if not isinstance(model, ProtoModel):
            raise HarnessError("adversarial training drives the sentence "
                               "encoder; use a proto-family variant")
        feature_dim = cfg.encoder.n_filters
        disc = DiscriminatorParams.init(feature_dim, cfg.adversarial.disc_hidden,
                                        master.child(PHASE_INIT, 1))
        disc_opt = Optimizer(disc.named_tensors(),
                             method=cfg.adversarial.disc_optimizer,
                             lr=cfg.adversarial.disc_lr)

    train_ecfg = cfg.train_episode_config()
    needs_nota = _needs_nota_support(variant)
    valid_ds = prep.valid if prep.valid is not None else prep.train

    best_acc, best_arrays = -1.0, None
    valid_history: list[tuple[int, float]] = []
    disc_history: list[tuple[int, float]] = []

    for i in range(cfg.train.episodes):
        estream = master.child(PHASE_TRAIN, i)
        episode = sample_episode(prep.train, train_ecfg, estream.child(0))
        nota_sup = None
        if needs_nota:
            nota_sup = sample_nota_support(prep.train,
                                           set(episode.relation_names),
                                           cfg.train.k_shot, estream.child(1))
        tape = Tape()
        attach_params(named, tape)
        if disc is not None:
            attach_params(disc.tensors, tape)
        try:
            loss = episode_loss(model, episode, nota_support=nota_sup)
            if disc is not None:
                lam = _grl_lambda(cfg, i)
                batch = sample_domain_batch(prep.train, prep.target,
                                            cfg.adversarial.half_batch,
                                            estream.child(2))
                src_lp = [ad.log_softmax(discriminator_forward(
                    disc, ad.grad_reverse(model.encode(x), lam)))
                    for x in batch.source]
                tgt_lp = [ad.log_softmax(discriminator_forward(
                    disc, ad.grad_reverse(model.encode(x), lam)))
                    for x in batch.target]
                # discriminator descends the negated objective; the reversal
                # layer hands the encoder the opposite direction
                loss = ad.add(loss, ad.scale(adversarial_loss(src_lp, tgt_lp),
                                             -1.0))
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise HarnessError(f"non-finite loss at episode {i}")
            ad.backward(loss)
            opt.step(tape)
            if disc_opt is not None:
                disc_opt.step(tape)
        except AutodiffError as exc:
            raise HarnessError(
                f"training aborted at episode {i} ({variant}, seed "
                f"{cfg.seed}): {exc}") from exc
        finally:
            detach_params(named)
            if disc is not None:
                detach_params(disc.tensors)

        step = i + 1
        if step % cfg.train.valid_every == 0 or step == cfg.train.episodes:
            vcfg = cfg.eval_episode_config(alpha=cfg.train.nota_rate)
            streams = (master.child(PHASE_VALID, step, j)
                       for j in range(cfg.train.valid_episodes))
            counts = _run_episodes(model, needs_nota, valid_ds, vcfg, streams,
                                   nota_source=prep.train)
            acc = counts.accuracy
            valid_history.append((step, acc))
            if acc > best_acc:
                best_acc = acc
                best_arrays = {k: t.data.copy() for k, t in named.items()}
            line = (f"episode {step}/{cfg.train.episodes} "
                    f"loss {loss_value:.4f} valid acc {acc:.2f}% "
                    f"(best {best_acc:.2f}%)")
            if disc is not None:
                dacc = _discriminator_accuracy(
                    model, disc, prep.train, prep.target,
                    master.child(PHASE_MEASURE, step),
                    batches=6, half=cfg.adversarial.half_batch)
                disc_history.append((step, dacc))
                line += f" disc acc {dacc:.2f}%"
            say(line)

    assert best_arrays is not None  # episodes >= 1 guarantees one validation
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / CHECKPOINT_NAME
    meta = {
        "format": "fewshot-rc-checkpoint",
        "code_version": __version__,
        "variant": variant,
        "encoder": {
            "family": "pair" if variant in _PAIR_VARIANTS else "cnn",
            "vocab_size": len(prep.vocab),
            "max_len": cfg.corpus.max_len,
            "d_word": cfg.encoder.d_word,
            "d_pos": cfg.encoder.d_pos,
            "window": cfg.encoder.window,
            "n_filters": cfg.encoder.n_filters,
        },
        "vocab_tokens": list(prep.vocab.tokens[len(RESERVED_TOKENS):]),
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "train_episodes": cfg.train.episodes,
        "best_valid_acc": best_acc,
        "augmentation": ({"relations": list(cfg.augmentation.relations),
                          "per_relation": cfg.augmentation.per_relation}
                         if cfg.augmentation.enabled else None),
    }
    save_checkpoint(ckpt_path, best_arrays, meta)
    manifest = RunManifest(
        config_hash=config_hash(cfg),
        code_version=__version__,
        started_at=started,
        finished_at=_utcnow(),
        checkpoint_path=str(ckpt_path),
    )
    manifest.write(out_dir / MANIFEST_NAME)
    return TrainResult(ckpt_path, manifest, tuple(valid_history),
                       tuple(disc_history), best_acc)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class _Loaded:
    model: object
    variant: str
    needs_nota: bool
    vocab: Vocabulary
    meta: dict
    max_len: int


def load_trained(checkpoint_path, cfg: RunConfig) -> _Loaded:
    """Load a checkpoint and check it against the evaluation config."""
    arrays, meta = load_checkpoint(checkpoint_path)
    if meta.get("format") != "fewshot-rc-checkpoint":
        raise HarnessError(f"{checkpoint_path} is not a model checkpoint")
    variant = meta["variant"]
    if variant != cfg.model.variant:
        raise HarnessError(f"checkpoint was trained as {variant!r} but the "
                           f"config says {cfg.model.variant!r}")
    enc = meta["encoder"]
    want = {"d_word": cfg.encoder.d_word, "d_pos": cfg.encoder.d_pos,
            "window": cfg.encoder.window, "n_filters": cfg.encoder.n_filters,
            "max_len": cfg.corpus.max_len}
    got = {k: enc[k] for k in want}
    if want != got:
        raise HarnessError(f"checkpoint/config encoder mismatch: checkpoint "
                           f"has {got}, config wants {want}")
    vocab = Vocabulary(meta["vocab_tokens"], {})
    if len(vocab) != enc["vocab_size"]:
        raise HarnessError("checkpoint vocabulary is corrupt")
    model, _ = _model_from_arrays(meta, arrays)
    return _Loaded(model=model, variant=variant,
                   needs_nota=_needs_nota_support(variant), vocab=vocab,
                   meta=meta, max_len=enc["max_len"])


def _encode_eval_corpus(path, loaded: _Loaded, cfg: RunConfig):
    raw, _ = load_dataset(path)
    aug = loaded.meta.get("augmentation")
    if aug and cfg.corpus.target_path and (
            Path(path).resolve() == Path(cfg.corpus.target_path).resolve()):
        _, raw = _split_augmentation(raw, aug["relations"],
                                     aug["per_relation"])
    inventory = RelationInventory(sorted(raw))
    return encode_dataset(raw, inventory, loaded.vocab, loaded.max_len)


def _nota_source(loaded: _Loaded, cfg: RunConfig):
    if not loaded.needs_nota:
        return None
    raw, _ = load_dataset(cfg.corpus.train_path)
    inventory = RelationInventory(sorted(raw))
    return encode_dataset(raw, inventory, loaded.vocab, loaded.max_len)


def _report_meta(cfg: RunConfig) -> dict[str, str]:
    return {"config_hash": config_hash(cfg), "code_version": __version__,
            "dispersion": "std-across-repeats"}


def _eval_cell(loaded: _Loaded, dataset, cfg: RunConfig, alpha: float,
               domain: str, nota_source) -> tuple[EvalCell, EvalCounts]:
    e = cfg.eval
    ecfg = cfg.eval_episode_config(alpha=alpha)
    master = RngStream(cfg.seed)
    per_repeat = []
    pooled = _ZERO_COUNTS
    for r in range(e.repeats):
        streams = (master.child(PHASE_EVAL, r, j) for j in range(e.episodes))
        counts = _run_episodes(loaded.model, loaded.needs_nota, dataset, ecfg,
                               streams, nota_source)
        per_repeat.append(counts.accuracy)
        pooled = pooled + counts
    mean = float(np.mean(per_repeat))
    std = float(np.std(per_repeat, ddof=1)) if e.repeats > 1 else 0.0
    cell = EvalCell(model=loaded.variant, n_way=e.n_way, k_shot=e.k_shot,
                    domain=domain, nota_rate=float(alpha), acc_mean=mean,
                    acc_std=std, episodes=e.episodes, repeats=e.repeats,
                    seed=cfg.seed)
    return cell, pooled


def evaluate_with_counts(checkpoint_path, cfg: RunConfig, *,
                         domain: str = "in-domain", corpus_path=None,
                         alpha: float | None = None
                         ) -> tuple[EvalReport, EvalCounts]:
    """Evaluate one checkpoint on one corpus at one NOTA rate."""
    loaded = load_trained(checkpoint_path, cfg)
    path = corpus_path or cfg.corpus.eval_path or cfg.corpus.train_path
    dataset = _encode_eval_corpus(path, loaded, cfg)
    rate = cfg.eval.nota_rate if alpha is None else alpha
    if not 0.0 <= rate <= 1.0:
        raise HarnessError(f"NOTA rate must lie in [0, 1], got {rate}")
    cell, counts = _eval_cell(loaded, dataset, cfg, rate, domain,
                              _nota_source(loaded, cfg))
    return EvalReport((cell,), _report_meta(cfg)), counts


def evaluate(checkpoint_path, cfg: RunConfig, **kwargs) -> EvalReport:
    report, _ = evaluate_with_counts(checkpoint_path, cfg, **kwargs)
    return report


def nota_sweep(checkpoint_path, cfg: RunConfig,
               rates: Iterable[float] | None = None,
               corpus_path=None) -> EvalReport:
    """Evaluate at several NOTA rates on a shared seed schedule.

    Episode identity (ways, supports, in-set queries) is drawn from the same
    streams at every rate; only the abstain-substitution draws differ, so
    rate-to-rate differences are not sampling noise.
    """
    rates = tuple(cfg.eval.nota_rates if rates is None else rates)
    if not rates:
        raise HarnessError("nota_sweep needs at least one rate")
    bad = [r for r in rates if not 0.0 <= r <= 1.0]
    if bad:
        raise HarnessError(f"NOTA rates must lie in [0, 1], got {bad}")
    loaded = load_trained(checkpoint_path, cfg)
    path = corpus_path or cfg.corpus.eval_path or cfg.corpus.train_path
    dataset = _encode_eval_corpus(path, loaded, cfg)
    nota_src = _nota_source(loaded, cfg)
    cells = [_eval_cell(loaded, dataset, cfg, rate, "in-domain", nota_src)[0]
             for rate in rates]
    return EvalReport(tuple(cells), _report_meta(cfg))


def da_eval(checkpoint_path, cfg: RunConfig, source_path=None,
            target_path=None) -> EvalReport:
    """Paired evaluation on the source-domain and target-domain corpora.

    Both columns run identical episode configs and seed schedules, so the
    source-to-target drop is attributable to the domain shift.
    """
    src = source_path or cfg.corpus.eval_path or cfg.corpus.train_path
    tgt = target_path or cfg.corpus.target_path
    if not tgt:
        raise HarnessError("da_eval needs a target corpus "
                           "(corpus.target_path or target_path=)")
    loaded = load_trained(checkpoint_path, cfg)
    nota_src = _nota_source(loaded, cfg)
    cells = []
    for domain, path in (("source", src), ("target", tgt)):
        dataset = _encode_eval_corpus(path, loaded, cfg)
        cells.append(_eval_cell(loaded, dataset, cfg, cfg.eval.nota_rate,
                                domain, nota_src)[0])
    return EvalReport(tuple(cells), _report_meta(cfg))


# ---------------------------------------------------------------------------
# feature probes (domain-shift measurement)
# ---------------------------------------------------------------------------

def collect_features(model, dataset, per_relation: int,
                     stream: RngStream) -> np.ndarray:
    """Encode a deterministic per-relation sample into a feature matrix."""
    if not hasattr(model, "encode"):
        raise HarnessError("feature collection needs a sentence-encoder "
                           "model (proto family)")
    g = stream.generator()
    rows = []
    for rel in sorted(dataset):
        insts = dataset[rel]
        take = min(per_relation, len(insts))
        idx = g.choice(len(insts), size=take, replace=False)
        for i in sorted(int(j) for j in idx):
            rows.append(model.encode(insts[i]).data)
    if not rows:
        raise HarnessError("no instances to collect features from")
    return np.stack(rows)


def probe_discriminator_accuracy(source_features: np.ndarray,
                                 target_features: np.ndarray, seed: int,
                                 steps: int = 150, hidden: int = 16,
                                 lr: float = 0.01) -> float:
    """Train a fresh domain probe on half the features; returns held-out
    accuracy in percent.  50% means the domains are indistinguishable to
    this probe."""
    if source_features.ndim != 2 or target_features.ndim != 2:
        raise HarnessError("feature matrices must be 2-d")
    g = np.random.default_rng(seed)

    def halves(feats):
        order = g.permutation(len(feats))
        cut = len(feats) // 2
        return feats[order[:cut]], feats[order[cut:]]

    src_tr, src_te = halves(source_features)
    tgt_tr, tgt_te = halves(target_features)
    if not (len(src_tr) and len(tgt_tr) and len(src_te) and len(tgt_te)):
        raise HarnessError("need at least 2 feature rows per domain")

    disc = DiscriminatorParams.init(source_features.shape[1], hidden,
                                    RngStream(seed, (PHASE_MEASURE,)))
    opt = Optimizer(disc.named_tensors(), method="adam", lr=lr)
    train_set = ([(x, 0) for x in src_tr] + [(x, 1) for x in tgt_tr])
    for _ in range(steps):
        tape = Tape()
        attach_params(disc.tensors, tape)
        try:
            losses = [ad.softmax_cross_entropy(
                discriminator_forward(disc, Tensor(x)), y)
                for x, y in train_set]
            total = ad.scale(ad.sum_axis(ad.stack(losses), 0),
                             1.0 / len(losses))
            ad.backward(total)
            opt.step(tape)
        finally:
            detach_params(disc.tensors)

    correct = total_n = 0
    for feats, label in ((src_te, 0), (tgt_te, 1)):
        for x in feats:
            out = discriminator_forward(disc, Tensor(x))
            correct += int(np.argmax(out.data)) == label
            total_n += 1
    return 100.0 * correct / total_n
