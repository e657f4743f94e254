"""Shared fixtures-in-code for the test suite."""

from fewshot_rc.corpus import (
    Instance,
    SyntheticSpec,
    build_vocab,
    encode_dataset,
    encode_instance,
    gen_synthetic,
)


def encode_one(tokens, head, tail, vocab=None, max_len=12, rel_id=0):
    """Encode a single ad-hoc instance; builds a one-off vocab if needed."""
    inst = Instance(tuple(tokens), head, tail, "r")
    if vocab is None:
        vocab = build_vocab([{"r": (inst,)}])
    return encode_instance(inst, vocab, max_len, rel_id), vocab


def make_encoded_dataset(n_rel, n_inst, seed=0, max_len=16, namespace="",
                         signal="keyword", sentence_len=(6, 10), vocab=None):
    """Synthetic corpus, encoded; returns (encoded dataset, inventory, vocab)."""
    spec = SyntheticSpec(n_rel, n_inst, namespace=namespace, signal=signal,
                         sentence_len=sentence_len,
                         vocab_size=max(n_rel + 40, 80))
    ds, inv = gen_synthetic(spec, seed)
    if vocab is None:
        vocab = build_vocab([ds])
    return encode_dataset(ds, inv, vocab, max_len), inv, vocab
