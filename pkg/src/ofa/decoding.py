"""Beam search, prefix-tree constrained decoding, box generation and closed-set classification."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .coords import BBox, canonical_box, dequantize_bins
from .vocab import BOS, EOS, UnifiedVocab

MASKED = -1e9
_VALID = -1e8  # log-probs below this come from masked logits

StepFn = Callable[[np.ndarray], np.ndarray]


class ConstraintError(ValueError):
    pass


class LabelTrie:
    """Prefix tree over token sequences; every complete path ends with an EOS edge."""

    def __init__(self, sequences: Iterable[Sequence[int]], labels: Sequence[str] | None = None, eos: int = EOS):
        self.eos = eos
        self.root: dict[int, dict] = {}
        self.labels: dict[tuple[int, ...], str] = {}
        seqs = [tuple(int(t) for t in s) for s in sequences]
        if not seqs:
            raise ConstraintError("cannot build a trie from an empty label set")
        names = list(labels) if labels is not None else [None] * len(seqs)
        for seq, name in zip(seqs, names):
            if not seq:
                raise ConstraintError(f"label {name!r} tokenizes to an empty sequence")
            if seq in self.labels:
                continue
            node = self.root
            for tok in seq + (eos,):
                node = node.setdefault(tok, {})
            self.labels[seq] = name if name is not None else " ".join(map(str, seq))

    def __len__(self) -> int:
        return len(self.labels)

    def node(self, prefix: Sequence[int]) -> dict:
        node = self.root
        for tok in prefix:
            try:
                node = node[int(tok)]
            except KeyError:
                raise ConstraintError(f"prefix {list(prefix)} is not a path in the trie") from None
        return node

    def allowed_next(self, prefix: Sequence[int]) -> list[int]:
        return sorted(self.node(prefix))

    def is_terminal(self, prefix: Sequence[int]) -> bool:
        return self.eos in self.node(prefix)

    def paths(self) -> list[tuple[int, ...]]:
        """Every root-to-leaf path, EOS included."""
        out = []
        stack: list[tuple[dict, tuple[int, ...]]] = [(self.root, ())]
        while stack:
            node, path = stack.pop()
            if not node:
                out.append(path)
            for tok, child in node.items():
                stack.append((child, path + (tok,)))
        return sorted(out)

    def label_of(self, tokens: Sequence[int]) -> str | None:
        toks = tuple(tokens)
        if toks and toks[-1] == self.eos:
            toks = toks[:-1]
        return self.labels.get(toks)


def build_trie(labels: Sequence[str], v: UnifiedVocab) -> LabelTrie:
    if not labels:
        raise ConstraintError("cannot build a trie from an empty label set")
    uniq = list(dict.fromkeys(labels))
    return LabelTrie([v.encode(lab) for lab in uniq], uniq)


def load_labels(path) -> list[str]:
    from pathlib import Path

    return [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]


def constrained_logits(logits: np.ndarray, trie: LabelTrie, prefix: Sequence[int]) -> np.ndarray:
    """Copy of ``logits`` with every token outside the trie continuation set at -1e9."""
    out = np.full_like(np.asarray(logits, dtype=np.float64), MASKED)
    allowed = trie.allowed_next(prefix)
    out[..., allowed] = np.asarray(logits, dtype=np.float64)[..., allowed]
    return out


# ---------------------------------------------------------------------------
# beam search


@dataclass
class BeamParams:
    beam_size: int = 6
    length_penalty: float = 0.7
    max_len: int = 32
    min_len: int = 0

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be at least 1")
        if self.max_len < 1:
            raise ValueError("max_len must be at least 1")


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    score: float  # summed log-probability
    norm_score: float
    finished: bool
    truncated: bool = False

    @property
    def content(self) -> tuple[int, ...]:
        """Tokens without the closing EOS."""
        return self.tokens[:-1] if self.finished else self.tokens


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def _norm(score: float, length: int, penalty: float) -> float:
    return score / (max(length, 1) ** penalty) if penalty else score


def search(
    step_fn: StepFn,
    params: BeamParams,
    trie: LabelTrie | None = None,
    allowed_fn: Callable[[tuple[int, ...]], Sequence[int]] | None = None,
    eos: int | None = EOS,
    bos: int = BOS,
    early_stop: bool = True,
) -> list[Hypothesis]:
    """Length-normalised beam search over a next-token scorer.

    ``step_fn`` maps an ``(n, t)`` array of BOS-prefixed token rows to ``(n, V)``
    next-token logits. Hypotheses rank by ``log P / len ** length_penalty``;
    equal scores prefer the lexicographically smaller token sequence, then the
    shorter one. With ``length_penalty == 0`` the search stops as soon as no
    live prefix can beat the best finished sequence, which keeps it exact when
    the beam never prunes.
    """
    live: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: list[Hypothesis] = []
    pen = params.length_penalty
    for t in range(params.max_len):
        rows = np.array([[bos, *toks] for toks, _ in live], dtype=np.int64)
        logits = np.asarray(step_fn(rows), dtype=np.float64)
        cands: list[tuple[float, tuple[int, ...]]] = []
        for k, (toks, score) in enumerate(live):
            row = logits[k]
            if trie is not None:
                row = constrained_logits(row, trie, toks)
            if allowed_fn is not None:
                masked = np.full_like(row, MASKED)
                ids = list(allowed_fn(toks))
                masked[ids] = row[ids]
                row = masked
            if eos is not None and t < params.min_len:
                row = row.copy()
                row[eos] = MASKED
            logp = _log_softmax(row)
            valid = np.flatnonzero(logp > _VALID)
            # a row contributes at most beam_size live candidates plus one EOS
            valid = valid[np.lexsort((valid, -logp[valid]))][: params.beam_size + 1]
            for tok in valid:
                cands.append((score + float(logp[tok]), toks + (int(tok),)))
        cands.sort(key=lambda c: (-_norm(c[0], len(c[1]), pen), c[1]))
        new_live: list[tuple[tuple[int, ...], float]] = []
        for rank, (score, toks) in enumerate(cands):
            if eos is not None and toks[-1] == eos:
                # only an ending that ranks inside the beam is kept, so beam 1 is greedy
                if rank < params.beam_size:
                    finished.append(Hypothesis(toks, score, _norm(score, len(toks), pen), True))
            else:
                new_live.append((toks, score))
                if len(new_live) == params.beam_size:
                    break
        live = new_live
        if not live:
            break
        if early_stop and finished:
            if pen == 0:
                if max(h.score for h in finished) >= max(s for _, s in live):
                    break
            elif len(finished) >= params.beam_size:
                break
    if finished:
        out = finished
    else:
        out = [Hypothesis(toks, s, _norm(s, len(toks), pen), False, truncated=True) for toks, s in live]
    out.sort(key=lambda h: (-h.norm_score, h.tokens, len(h.tokens)))
    return out


def model_step_fn(model, sample) -> StepFn:
    """Next-token logits from an :class:`~ofa.model.OFAModel` for one serialized sample."""
    from .model import Batch

    src = np.asarray([sample.source_ids], dtype=np.int64)
    imgs = None if sample.patches is None else np.asarray(sample.patches)[None]
    batch = Batch(src, imgs, np.array([sample.patches is not None]))
    was_training = model.training
    model.eval()
    with T.no_grad():
        enc, valid = model.encode_batch(batch)
    model.train(was_training)

    def step(rows: np.ndarray) -> np.ndarray:
        n = rows.shape[0]
        with T.no_grad():
            e = T.Tensor(np.broadcast_to(enc.data, (n,) + enc.shape[1:]))
            logits = model.decode_batch(e, np.broadcast_to(valid, (n, valid.shape[1])), rows, last_only=True)
        return logits.data[:, -1, :]

    return step


def beam_search(model, sample, params: BeamParams | None = None, trie: LabelTrie | None = None, **kw) -> list[Hypothesis]:
    return search(model_step_fn(model, sample), params or BeamParams(), trie=trie, **kw)


def generate_text(model, sample, v: UnifiedVocab, params: BeamParams | None = None, trie: LabelTrie | None = None) -> str:
    hyps = beam_search(model, sample, params, trie)
    return v.decode(hyps[0].content)


@dataclass
class BoxPrediction:
    box: BBox
    tokens: tuple[int, ...]
    swapped: bool = False


def generate_box(model, sample, v: UnifiedVocab, params: BeamParams | None = None) -> BoxPrediction:
    """Exactly four location tokens (every step masked to the location range), dequantized."""
    params = params or BeamParams()
    loc_ids = list(range(v.loc_start, v.code_start))
    p = BeamParams(params.beam_size, params.length_penalty, max_len=4, min_len=0)
    hyps = search(model_step_fn(model, sample), p, allowed_fn=lambda _: loc_ids, eos=None)
    toks = hyps[0].tokens
    coords = dequantize_bins([v.loc_bin(i) for i in toks], v.num_loc_bins)
    box, swapped = canonical_box(coords)
    return BoxPrediction(box, toks, swapped)


def generate_codes(model, sample, v: UnifiedVocab, n_codes: int, params: BeamParams | None = None) -> list[int]:
    """Image-code indices for an infilling sample (code range forced, then EOS)."""
    params = params or BeamParams()
    code_ids = list(range(v.code_start, v.size))

    def allowed(prefix):
        return code_ids if len(prefix) < n_codes else [EOS]

    p = BeamParams(params.beam_size, params.length_penalty, max_len=n_codes + 1)
    hyps = search(model_step_fn(model, sample), p, allowed_fn=allowed)
    return [v.code_index(i) for i in hyps[0].content]


@dataclass
class Classification:
    label: str
    score: float
    scores: dict[str, float] = field(default_factory=dict)


def classify(
    model,
    sample,
    labels: Sequence[str] | LabelTrie,
    v: UnifiedVocab | None = None,
    beam_size: int | None = None,
) -> Classification:
    """Trie-constrained beam over a closed label set, scored by summed log-probability."""
    trie = labels if isinstance(labels, LabelTrie) else build_trie(labels, v)
    depth = max(len(s) for s in trie.labels) + 1
    beam = beam_size if beam_size is not None else 6
    params = BeamParams(beam_size=beam, length_penalty=0.0, max_len=depth)
    hyps = search(model_step_fn(model, sample), params, trie=trie, early_stop=False)
    best = hyps[0]
    scores = {trie.label_of(h.tokens): h.score for h in hyps if h.finished}
    return Classification(trie.label_of(best.tokens), best.score, scores)
