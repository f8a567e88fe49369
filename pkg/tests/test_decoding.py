import itertools
import time

import numpy as np
import pytest

from ofa import tensor as T
from ofa.decoding import (
    MASKED,
    BeamParams,
    ConstraintError,
    LabelTrie,
    build_trie,
    classify,
    constrained_logits,
    generate_box,
    search,
)
from ofa.model import Batch, ModelConfig, OFAModel
from ofa.tasks import InstructionSample
from ofa.vocab import EOS, build_vocab


@pytest.fixture(scope="module")
def bytes_vocab():
    # no merges: every label is a byte sequence, so prefixes nest as strings do
    return build_vocab("blue sky blue ocean green", target_subwords=256, num_loc_bins=10, codebook_size=4)


@pytest.fixture(scope="module")
def word_vocab():
    return build_vocab(["blue sky", "blue ocean", "green"] * 5, target_subwords=300, num_loc_bins=10, codebook_size=4)


def test_trie_blue_prefix(word_vocab):
    v = word_vocab
    trie = build_trie(["blue sky", "blue ocean", "green"], v)
    allowed = trie.allowed_next(v.encode("blue"))
    assert allowed == sorted({v.encode("blue sky")[len(v.encode("blue"))], v.encode("blue ocean")[len(v.encode("blue"))]})
    logits = np.random.default_rng(0).normal(size=v.size)
    masked = constrained_logits(logits, trie, v.encode("blue"))
    assert set(np.flatnonzero(masked > MASKED)) == set(allowed)


def test_single_label_one_path(word_vocab):
    trie = build_trie(["green"], word_vocab)
    paths = trie.paths()
    assert paths == [tuple(word_vocab.encode("green")) + (EOS,)]
    assert trie.is_terminal(word_vocab.encode("green"))


def test_nested_labels(bytes_vocab):
    v = bytes_vocab
    trie = build_trie(["a", "ab"], v)
    a = v.encode("a")
    assert trie.is_terminal(a)
    assert v.encode("b")[0] in trie.allowed_next(a)


def test_trie_errors(word_vocab):
    with pytest.raises(ConstraintError):
        build_trie([], word_vocab)
    trie = build_trie(["green"], word_vocab)
    with pytest.raises(ConstraintError):
        trie.allowed_next([9999])


def test_full_trie_leaves_logits_unchanged():
    trie = LabelTrie([[k] for k in range(2, 8)] + [[1]], eos=1)
    logits = np.random.default_rng(1).normal(size=8)
    # root continuations cover every id except 0
    out = constrained_logits(logits, trie, [])
    np.testing.assert_array_equal(out[1:], logits[1:])


def test_masked_mass_negligible(word_vocab):
    trie = build_trie(["blue sky", "blue ocean", "green"], word_vocab)
    rng = np.random.default_rng(2)
    for _ in range(20):
        logits = rng.normal(size=word_vocab.size) * 10
        m = constrained_logits(logits, trie, [])
        p = np.exp(m - m.max())
        p /= p.sum()
        assert p[trie.allowed_next([])].sum() >= 1 - 1e-6


# ---------------------------------------------------------------------------
# search against brute force


def toy_step_fn(vocab_size, seed):
    """Deterministic logits as a function of the (BOS-prefixed) row."""
    cache = {}

    def step(rows):
        out = []
        for row in rows:
            key = tuple(int(t) for t in row)
            if key not in cache:
                r = np.random.default_rng([seed, len(key)] + list(key))
                cache[key] = r.normal(size=vocab_size) * 2.0
            out.append(cache[key])
        return np.array(out)

    return step


def _logp(x):
    x = np.asarray(x, float)
    return x - x.max() - np.log(np.exp(x - x.max()).sum())


def exhaustive(step, vocab_size, max_len, eos=EOS, bos=0):
    best = None
    for n in range(1, max_len + 1):
        for body in itertools.product([t for t in range(vocab_size) if t != eos], repeat=n - 1):
            seq = body + (eos,)
            s = 0.0
            for k in range(n):
                s += _logp(step(np.array([[bos, *seq[:k]]]))[0])[seq[k]]
            cand = (-s, seq)
            if best is None or cand < best:
                best = cand
    return best[1], -best[0]


def test_beam_matches_exhaustive_small():
    rng = np.random.default_rng(0)
    for inst in range(60):
        vsize = int(rng.integers(2, 7))
        max_len = int(rng.integers(1, 5))
        step = toy_step_fn(vsize, inst)
        want, score = exhaustive(step, vsize, max_len)
        hyps = search(step, BeamParams(beam_size=vsize**max_len, length_penalty=0.0, max_len=max_len))
        assert hyps[0].tokens == want
        assert hyps[0].score == pytest.approx(score, abs=1e-9)


def test_beam_one_is_greedy():
    for seed in range(30):
        step = toy_step_fn(6, 100 + seed)
        toks = []
        for _ in range(5):
            t = int(np.argmax(step(np.array([[0, *toks]]))[0]))
            toks.append(t)
            if t == EOS:
                break
        hyps = search(step, BeamParams(beam_size=1, length_penalty=0.0, max_len=5))
        assert list(hyps[0].tokens) == toks


def test_single_label_trie_forces_output():
    trie = LabelTrie([[4, 2, 5]], eos=EOS)
    for seed in range(10):
        hyps = search(toy_step_fn(6, seed), BeamParams(beam_size=3, length_penalty=0.0, max_len=6), trie=trie)
        assert hyps[0].tokens == (4, 2, 5, EOS)


def test_min_len_blocks_early_eos():
    step = toy_step_fn(5, 3)
    hyps = search(step, BeamParams(beam_size=4, length_penalty=0.7, max_len=6, min_len=3))
    assert all(len(h.tokens) >= 4 for h in hyps if h.finished)


# ---------------------------------------------------------------------------
# model-backed decoding


def tiny_model(vsize, seed, loc_bins=10):
    cfg = ModelConfig(vocab_size=vsize, hidden=16, intermediate=32, heads=2, enc_layers=1, dec_layers=1,
                      max_text_len=32, num_loc_bins=loc_bins, codebook_size=4, dropout=0.0, stochastic_depth_rate=0.0)
    m = OFAModel(cfg, seed=seed)
    for p in m.params.values():
        if p.ndim >= 2:
            p.data *= 40.0  # sharpen the random distributions
    return m


def teacher_forced_scores(model, sample, trie):
    """Constrained log-probability of every label via one batched forward pass."""
    paths = trie.paths()
    n = len(paths)
    width = max(len(p) for p in paths)
    tin = np.full((n, width), 2, np.int64)
    for k, p in enumerate(paths):
        tin[k, : len(p)] = (0,) + p[:-1]
    src = np.array([sample.source_ids] * n)
    imgs = None if sample.patches is None else np.repeat(sample.patches[None], n, 0)
    with T.no_grad():
        logits = model.forward(Batch(src, imgs, np.array([sample.patches is not None] * n), tin)).data
    out = {}
    for k, p in enumerate(paths):
        s = 0.0
        for pos, tok in enumerate(p):
            row = np.full(logits.shape[-1], MASKED)
            ok = trie.allowed_next(p[:pos])
            row[ok] = logits[k, pos, ok]
            s += _logp(row)[tok]
        out[trie.label_of(p)] = s
    return out


def test_classify_matches_exhaustive_scoring(word_vocab):
    v = word_vocab
    rng = np.random.default_rng(0)
    labels = ["blue sky", "blue ocean", "green"]
    trie = build_trie(labels, v)
    for seed in range(5):
        m = tiny_model(v.size, seed)
        s = InstructionSample([0] + list(rng.integers(4, v.subword_start + v.num_subwords, 5)) + [1], None, [1])
        res = classify(m, s, trie, beam_size=len(labels))
        ref = teacher_forced_scores(m, s, trie)
        assert res.label == max(ref, key=lambda k: (ref[k], k == res.label))
        for lab, sc in ref.items():
            assert res.scores[lab] == pytest.approx(sc, abs=1e-3)


def test_classify_two_labels_untrained(word_vocab):
    v = word_vocab
    rng = np.random.default_rng(1)
    for seed in range(5):
        m = tiny_model(v.size, seed)
        img = rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)
        s = InstructionSample([0, 5, 6, 1], img, [1])
        assert classify(m, s, ["yes", "no"], v).label in ("yes", "no")


def test_generate_box_always_loc_tokens():
    v = build_vocab("x", 256, num_loc_bins=10, codebook_size=4)
    rng = np.random.default_rng(0)
    for seed in range(4):
        m = tiny_model(v.size, seed)
        s = InstructionSample([0, 7, 1], rng.integers(0, 256, (64, 64, 3), dtype=np.uint8), [1])
        pred = generate_box(m, s, v)
        assert len(pred.tokens) == 4 and all(v.is_loc(t) for t in pred.tokens)
        assert pred.box.x1 <= pred.box.x2 and pred.box.y1 <= pred.box.y2


def test_large_label_set_speed():
    words = [f"w{k}" for k in range(60)]
    labels = list(dict.fromkeys(f"{a} {b}" for a in words for b in words))[:3129]
    v = build_vocab(labels, target_subwords=400, num_loc_bins=1000, codebook_size=128)
    cfg = ModelConfig.preset("nano", v.size)
    m = OFAModel(cfg, seed=0)
    trie = build_trie(labels, v)
    assert len(trie) == 3129
    img = np.random.default_rng(0).integers(0, 256, (64, 64, 3), dtype=np.uint8)
    s = InstructionSample([0] + v.encode("what is it?") + [1], img, [1])
    t = time.perf_counter()
    res = classify(m, s, trie)
    assert time.perf_counter() - t < 1.0
    assert res.label in set(labels)
