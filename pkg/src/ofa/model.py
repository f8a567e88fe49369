"""Encoder-decoder transformer over the unified vocabulary.

Layer recipe (pre-LN residual blocks)::

    x = x + drop(LN_post(SelfAttn(LN(x))))      # per-head output scaling
    x = x + drop(LN_post(CrossAttn(LN(x), enc)))  # decoder only
    x = x + drop(W2 LN_mid(gelu(W1 LN(x))))

Absolute positions are not summed into token or patch embeddings. They enter
every self-attention as an extra logit term ``(LN(p_i) Uq)(LN(p_j) Uk)^T``
computed from separate projections. Text pairs additionally get a bucketed 1D
relative bias and patch pairs a row + column 2D bias; text/patch pairs get none.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .vocab import PAD

PRESETS: dict[str, tuple[int, int, int, int, int]] = {
    # hidden, intermediate, heads, encoder layers, decoder layers
    "nano": (64, 256, 4, 2, 2),
    "tiny": (256, 1024, 4, 4, 4),
    "medium": (512, 2048, 8, 4, 4),
    "base": (768, 3072, 12, 6, 6),
    "large": (1024, 4096, 16, 12, 12),
    "huge": (1280, 5120, 16, 24, 12),
}

STEM_PATCHES = (4, 8, 16, 32)  # a stride-4 stage followed by stride-2 stages
NEG_INF = -1e9


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    hidden: int = 64
    intermediate: int = 256
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    patch_px: int = 16
    image_px: int = 64
    num_loc_bins: int = 1000
    codebook_size: int = 128
    dropout: float = 0.1
    stochastic_depth_rate: float = 0.1
    rel_buckets_1d: int = 32
    rel_max_distance_1d: int = 128
    rel_buckets_2d: int = 16
    rel_max_distance_2d: int = 32
    max_text_len: int = 256
    entangle_image_positions: bool = False
    init_std: float = 0.02

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ModelError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.image_px % self.patch_px:
            raise ModelError(f"image_px {self.image_px} not divisible by patch_px {self.patch_px}")
        if self.patch_px not in STEM_PATCHES:
            raise ModelError(f"patch_px {self.patch_px} not one of {STEM_PATCHES}")
        if self.hidden % 2 ** (len(self.stem_strides) - 1):
            raise ModelError("hidden must halve cleanly through the stem stages")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def stem_strides(self) -> tuple[int, ...]:
        return (4,) + (2,) * (STEM_PATCHES.index(self.patch_px))

    @property
    def grid(self) -> int:
        return self.image_px // self.patch_px

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @classmethod
    def preset(cls, name: str, vocab_size: int, **overrides) -> "ModelConfig":
        try:
            h, i, n, e, d = PRESETS[name.lower()]
        except KeyError:
            raise ModelError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
        return cls(vocab_size=vocab_size, hidden=h, intermediate=i, heads=n, enc_layers=e, dec_layers=d, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for k, v in d.items():
            if k not in types:
                raise ModelError(f"unknown model config key {k!r}")
            t = types[k]
            if t in ("bool", bool):
                kw[k] = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes")
            elif t in ("int", int):
                kw[k] = int(v)
            elif t in ("float", float):
                kw[k] = float(v)
            else:
                kw[k] = v
        return cls(**kw)


# ---------------------------------------------------------------------------
# relative position buckets


def t5_bucket(rel, num_buckets: int, max_distance: int) -> np.ndarray:
    """Bidirectional T5 bucketing of signed offsets ``rel = i - j``."""
    rel = np.asarray(rel, dtype=np.int64)
    half = num_buckets // 2
    out = np.where(rel > 0, half, 0)
    n = np.abs(rel)
    max_exact = half // 2
    with np.errstate(divide="ignore"):
        large = max_exact + (
            np.log(np.maximum(n, 1) / max_exact) / math.log(max_distance / max_exact) * (half - max_exact)
        ).astype(np.int64)
    large = np.minimum(large, half - 1)
    return out + np.where(n < max_exact, n, large)


def rel_bias_1d(i: int, j: int, head: int, table: np.ndarray, max_distance: int = 128) -> float:
    """Bias between text positions ``i`` and ``j`` from a ``(buckets, heads)`` table."""
    return float(table[int(t5_bucket(i - j, table.shape[0], max_distance)), head])


def rel_bias_2d(a: tuple[int, int], b: tuple[int, int], head: int, row_table: np.ndarray, col_table: np.ndarray, max_distance: int = 32) -> float:
    """Row bias of ``r1 - r2`` plus column bias of ``c1 - c2``."""
    (r1, c1), (r2, c2) = a, b
    nb = row_table.shape[0]
    return float(
        row_table[int(t5_bucket(r1 - r2, nb, max_distance)), head]
        + col_table[int(t5_bucket(c1 - c2, nb, max_distance)), head]
    )


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    src: np.ndarray  # (B, S) int
    images: np.ndarray | None  # (B, H, W, 3) uint8
    has_image: np.ndarray  # (B,) bool
    tgt_in: np.ndarray | None = None  # (B, L) int, BOS-shifted
    tgt_out: np.ndarray | None = None  # (B, L) int, PAD-filled
    allowed: np.ndarray | None = None  # (B, L, V) bool, trie masks for training

    @property
    def size(self) -> int:
        return self.src.shape[0]


def collate(samples: Sequence, cfg: ModelConfig, with_targets: bool = True, trie_masks: bool = False) -> Batch:
    """Pad a list of ``InstructionSample``-like objects into a :class:`Batch`."""
    from .vocab import BOS

    n = len(samples)
    s = max(len(x.source_ids) for x in samples)
    if s > cfg.max_text_len:
        raise ModelError(f"source length {s} exceeds {cfg.max_text_len}")
    src = np.full((n, s), PAD, dtype=np.int64)
    for k, x in enumerate(samples):
        src[k, : len(x.source_ids)] = x.source_ids
    has = np.array([x.patches is not None for x in samples], dtype=bool)
    images = None
    if has.any():
        images = np.zeros((n, cfg.image_px, cfg.image_px, 3), dtype=np.uint8)
        for k, x in enumerate(samples):
            if x.patches is not None:
                if x.patches.shape != (cfg.image_px, cfg.image_px, 3):
                    raise ModelError(f"image {x.patches.shape} does not match image_px={cfg.image_px}")
                images[k] = x.patches
    batch = Batch(src, images, has)
    if with_targets:
        ln = max(len(x.target_ids) for x in samples)
        if ln > cfg.max_text_len:
            raise ModelError(f"target length {ln} exceeds {cfg.max_text_len}")
        tin = np.full((n, ln), PAD, dtype=np.int64)
        tout = np.full((n, ln), PAD, dtype=np.int64)
        for k, x in enumerate(samples):
            t = list(x.target_ids)
            tout[k, : len(t)] = t
            tin[k, : len(t)] = [BOS] + t[:-1]
        batch.tgt_in, batch.tgt_out = tin, tout
        if trie_masks and any(getattr(x, "trie", None) is not None for x in samples):
            allowed = np.ones((n, ln, cfg.vocab_size), dtype=bool)
            for k, x in enumerate(samples):
                trie = getattr(x, "trie", None)
                if trie is None:
                    continue
                t = list(x.target_ids)
                for pos in range(len(t)):
                    allowed[k, pos] = False
                    allowed[k, pos, trie.allowed_next(t[:pos])] = True
            batch.allowed = allowed
    return batch


# ---------------------------------------------------------------------------
# model


class OFAModel:
    """Parameters live in ``self.params`` keyed by path; ``lm_head`` is the token embedding."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        self.training = False
        self.record_attention = False
        self.attention_maps: list[np.ndarray] = []
        if params is None:
            self.params = self._init_params(np.random.default_rng(seed))
        else:
            self.params = params
            self._check_params()

    # parameters ------------------------------------------------------------
    def _init_params(self, rng: np.random.Generator) -> dict[str, Tensor]:
        c = self.cfg
        d, f, h = c.hidden, c.intermediate, c.heads
        p: dict[str, Tensor] = {}

        def normal(name, *shape):
            p[name] = T.parameter(rng.normal(0.0, c.init_std, size=shape), name)

        def ones(name, *shape):
            p[name] = T.parameter(np.ones(shape), name)

        def zeros(name, *shape):
            p[name] = T.parameter(np.zeros(shape), name)

        def linear(name, din, dout):
            normal(f"{name}.w", din, dout)
            zeros(f"{name}.b", dout)

        def ln(name):
            ones(f"{name}.g", d)
            zeros(f"{name}.b", d)

        normal("embed.tokens", c.vocab_size, d)
        normal("embed.type", 2, d)
        ln("embed.ln")
        ln("dec.embed.ln")
        strides = c.stem_strides
        widths = (3,) + tuple(d >> (len(strides) - 1 - k) for k in range(len(strides)))
        for k, s in enumerate(strides):
            linear(f"stem.{k}.conv", s * s * widths[k], widths[k + 1])
            ones(f"stem.{k}.ln.g", widths[k + 1])
            zeros(f"stem.{k}.ln.b", widths[k + 1])
        normal("pos.text", c.max_text_len, d)
        normal("pos.image", c.num_patches, d)
        normal("pos.dec", c.max_text_len, d)
        for side in ("enc", "dec"):
            ln(f"pos.{side}.ln")
            linear(f"pos.{side}.q", d, d)
            linear(f"pos.{side}.k", d, d)

        def attn(name, head_scale: bool):
            for m in ("q", "k", "v", "o"):
                linear(f"{name}.{m}", d, d)
            if head_scale:
                ones(f"{name}.head_scale", h)
            ln(f"{name}.ln_pre")
            ln(f"{name}.ln_post")

        def ffn(name):
            ln(f"{name}.ln_pre")
            linear(f"{name}.fc1", d, f)
            ones(f"{name}.ln_mid.g", f)
            zeros(f"{name}.ln_mid.b", f)
            linear(f"{name}.fc2", f, d)

        for l in range(c.enc_layers):
            attn(f"enc.{l}.self", True)
            ffn(f"enc.{l}.ffn")
            normal(f"enc.{l}.rel1d", c.rel_buckets_1d, h)
            normal(f"enc.{l}.rel2d_row", c.rel_buckets_2d, h)
            normal(f"enc.{l}.rel2d_col", c.rel_buckets_2d, h)
        for l in range(c.dec_layers):
            attn(f"dec.{l}.self", True)
            attn(f"dec.{l}.cross", False)
            ffn(f"dec.{l}.ffn")
            normal(f"dec.{l}.rel1d", c.rel_buckets_1d, h)
        ln("enc.final_ln")
        ln("dec.final_ln")
        return p

    def _check_params(self) -> None:
        shapes = {k: v.shape for k, v in self._init_params(np.random.default_rng(0)).items()}
        missing = set(shapes) - set(self.params)
        extra = set(self.params) - set(shapes)
        if missing or extra:
            raise ModelError(f"parameter mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for k, s in shapes.items():
            if self.params[k].shape != s:
                raise ModelError(f"{k}: expected shape {s}, got {self.params[k].shape}")

    @property
    def lm_head(self) -> Tensor:
        """Output projection; the same object as the token embedding."""
        return self.params["embed.tokens"]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def astype(self, dtype) -> "OFAModel":
        """Copy with every parameter cast (float64 for gradient checks)."""
        params = {k: T.Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()}
        m = OFAModel(self.cfg, params=params)
        return m

    def train(self, mode: bool = True) -> "OFAModel":
        self.training = mode
        return self

    def eval(self) -> "OFAModel":
        return self.train(False)

    # building blocks -------------------------------------------------------
    def _linear(self, x: Tensor, name: str) -> Tensor:
        return x @ self.params[f"{name}.w"] + self.params[f"{name}.b"]

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return T.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _drop(self, x: Tensor, rng) -> Tensor:
        return T.dropout(x, self.cfg.dropout, rng, self.training)

    def _residual(self, x: Tensor, branch: Tensor, rng) -> Tensor:
        branch = self._drop(branch, rng)
        p = self.cfg.stochastic_depth_rate
        if self.training and p > 0.0:
            keep = (rng.random((x.shape[0],) + (1,) * (x.ndim - 1)) >= p).astype(x.dtype) / (1.0 - p)
            branch = branch * keep
        return x + branch

    def _attention(self, xq: Tensor, xkv: Tensor, name: str, bias, scale: float, head_scale: bool) -> Tensor:
        c = self.cfg
        b, tq, _ = xq.shape
        tk = xkv.shape[1]
        h, dh = c.heads, c.head_dim
        q = self._linear(xq, f"{name}.q").reshape(b, tq, h, dh).transpose(0, 2, 1, 3)
        k = self._linear(xkv, f"{name}.k").reshape(b, tk, h, dh).transpose(0, 2, 3, 1)
        v = self._linear(xkv, f"{name}.v").reshape(b, tk, h, dh).transpose(0, 2, 1, 3)
        scores = (q @ k) * scale
        for term in bias:
            scores = scores + term
        probs = T.softmax(scores, axis=-1)
        if self.record_attention:
            self.attention_maps.append(probs.data.copy())
        out = probs @ v
        if head_scale:
            out = out * self.params[f"{name}.head_scale"].reshape(1, h, 1, 1)
        out = out.transpose(0, 2, 1, 3).reshape(b, tq, c.hidden)
        return self._linear(out, f"{name}.o")

    def _ffn(self, x: Tensor, name: str) -> Tensor:
        hdn = T.gelu(self._linear(x, f"{name}.fc1"))
        hdn = T.layer_norm(hdn, self.params[f"{name}.ln_mid.g"], self.params[f"{name}.ln_mid.b"])
        return self._linear(hdn, f"{name}.fc2")

    def _pos_logits(self, pos: Tensor, side: str) -> Tensor:
        """Position-to-position attention logits ``(H, T, T)`` from absolute embeddings."""
        c = self.cfg
        t = pos.shape[0]
        pe = self._ln(pos, f"pos.{side}.ln")
        q = self._linear(pe, f"pos.{side}.q").reshape(t, c.heads, c.head_dim).transpose(1, 0, 2)
        k = self._linear(pe, f"pos.{side}.k").reshape(t, c.heads, c.head_dim).transpose(1, 2, 0)
        return (q @ k) * (1.0 / math.sqrt(2 * c.head_dim))

    def _gather_bias(self, table: Tensor, idx: np.ndarray) -> Tensor:
        """``(H, T, T)`` bias from a ``(buckets, H)`` table; ``idx == -1`` means no bias."""
        zero = T.Tensor(np.zeros((1, table.shape[1]), dtype=table.dtype))
        ext = T.concat([table, zero], axis=0)
        idx = np.where(idx < 0, table.shape[0], idx)
        return T.embedding(ext, idx).transpose(2, 0, 1)

    # stem ------------------------------------------------------------------
    def embed_patches(self, images: np.ndarray) -> Tensor:
        """``(B, H, W, 3)`` uint8 images to ``(B, P, hidden)`` patch features."""
        c = self.cfg
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        if images.shape[1:] != (c.image_px, c.image_px, 3):
            raise T.ShapeError(f"expected images of {c.image_px}x{c.image_px}x3, got {images.shape[1:]}")
        dtype = self.params["stem.0.conv.w"].dtype
        x = T.Tensor(images.astype(dtype) / 255.0)
        b = images.shape[0]
        side = c.image_px
        ch = 3
        for k, s in enumerate(c.stem_strides):
            side //= s
            x = x.reshape(b, side, s, side, s, ch).transpose(0, 1, 3, 2, 4, 5).reshape(b, side, side, s * s * ch)
            x = self._linear(x, f"stem.{k}.conv")
            ch = x.shape[-1]
            x = T.layer_norm(x, self.params[f"stem.{k}.ln.g"], self.params[f"stem.{k}.ln.b"])
            x = T.gelu(x)
        return x.reshape(b, side * side, c.hidden)

    # encoder ---------------------------------------------------------------
    def encode_batch(self, batch: Batch, rng: np.random.Generator | None = None) -> tuple[Tensor, np.ndarray]:
        """Encoder states ``(B, P + S, hidden)`` and the key-validity mask ``(B, P + S)``."""
        c = self.cfg
        p = self.params
        src = batch.src
        b, s = src.shape
        if s > c.max_text_len:
            raise T.ContractError(f"source length {s} exceeds {c.max_text_len}")
        dtype = p["embed.tokens"].dtype
        text = T.embedding(p["embed.tokens"], src) + p["embed.type"][0]
        parts = []
        n_patch = 0
        if batch.images is not None:
            patches = self.embed_patches(batch.images) + p["embed.type"][1]
            n_patch = patches.shape[1]
            parts.append(patches)
        parts.append(text)
        x = T.concat(parts, axis=1) if len(parts) > 1 else text
        pos_rows = []
        if n_patch:
            pos_rows.append(p["pos.image"])
        pos_rows.append(p["pos.text"][:s])
        pos = T.concat(pos_rows, axis=0) if len(pos_rows) > 1 else pos_rows[0]
        if c.entangle_image_positions and n_patch:
            zeros = T.Tensor(np.zeros((s, c.hidden), dtype=dtype))
            x = x + T.concat([p["pos.image"], zeros], axis=0)
        x = self._drop(self._ln(x, "embed.ln"), rng)

        valid = np.concatenate(
            [np.repeat(batch.has_image[:, None], n_patch, axis=1), src != PAD], axis=1
        )
        key_mask = T.Tensor(np.where(valid, 0.0, NEG_INF).astype(dtype)[:, None, None, :])
        abs_logits = self._pos_logits(pos, "enc")
        idx1, idxr, idxc = self._encoder_bias_index(n_patch, s)
        scale = 1.0 / math.sqrt(2 * c.head_dim)
        for l in range(c.enc_layers):
            rel = (
                self._gather_bias(p[f"enc.{l}.rel1d"], idx1)
                + self._gather_bias(p[f"enc.{l}.rel2d_row"], idxr)
                + self._gather_bias(p[f"enc.{l}.rel2d_col"], idxc)
            )
            name = f"enc.{l}.self"
            hdn = self._ln(x, f"{name}.ln_pre")
            a = self._attention(hdn, hdn, name, (abs_logits, rel, key_mask), scale, True)
            x = self._residual(x, self._ln(a, f"{name}.ln_post"), rng)
            x = self._residual(x, self._ffn(self._ln(x, f"enc.{l}.ffn.ln_pre"), f"enc.{l}.ffn"), rng)
        return self._ln(x, "enc.final_ln"), valid

    def _encoder_bias_index(self, n_patch: int, s: int) -> tuple[np.ndarray, ...]:
        c = self.cfg
        t = n_patch + s
        idx1 = np.full((t, t), -1, dtype=np.int64)
        pos = np.arange(s)
        idx1[n_patch:, n_patch:] = t5_bucket(pos[:, None] - pos[None, :], c.rel_buckets_1d, c.rel_max_distance_1d)
        idxr = np.full((t, t), -1, dtype=np.int64)
        idxc = np.full((t, t), -1, dtype=np.int64)
        if n_patch:
            g = int(round(math.sqrt(n_patch)))
            rows, cols = np.divmod(np.arange(n_patch), g)
            idxr[:n_patch, :n_patch] = t5_bucket(rows[:, None] - rows[None, :], c.rel_buckets_2d, c.rel_max_distance_2d)
            idxc[:n_patch, :n_patch] = t5_bucket(cols[:, None] - cols[None, :], c.rel_buckets_2d, c.rel_max_distance_2d)
        return idx1, idxr, idxc

    def encode(self, source_ids: Sequence[int], image: np.ndarray | None = None) -> Tensor:
        """Single-sample encoder states ``(P + S, hidden)``."""
        imgs = None if image is None else np.asarray(image)[None]
        batch = Batch(np.asarray([list(source_ids)], dtype=np.int64), imgs, np.array([image is not None]))
        states, _ = self.encode_batch(batch)
        return states[0]

    # decoder ---------------------------------------------------------------
    def decode_batch(
        self, enc: Tensor, enc_valid: np.ndarray, prev_ids: np.ndarray, rng=None, last_only: bool = False, positions=None
    ) -> Tensor:
        """Logits ``(B, L, V)`` for BOS-prefixed ``prev_ids`` of shape ``(B, L)``.

        ``last_only`` projects only the final position, giving ``(B, 1, V)``.
        A boolean ``positions`` mask of shape ``(B, L)`` projects only the marked
        positions, giving ``(N, V)`` in row-major order.
        """
        c = self.cfg
        p = self.params
        prev_ids = np.asarray(prev_ids, dtype=np.int64)
        b, ln = prev_ids.shape
        if ln == 0:
            raise T.ContractError("decoder prefix is empty; it must start with BOS")
        if ln > c.max_text_len:
            raise T.ContractError(f"decoder prefix length {ln} exceeds {c.max_text_len}")
        dtype = p["embed.tokens"].dtype
        x = self._drop(self._ln(T.embedding(p["embed.tokens"], prev_ids), "dec.embed.ln"), rng)
        abs_logits = self._pos_logits(p["pos.dec"][:ln], "dec")
        pos = np.arange(ln)
        idx1 = t5_bucket(pos[:, None] - pos[None, :], c.rel_buckets_1d, c.rel_max_distance_1d)
        causal = np.where(pos[None, :] > pos[:, None], NEG_INF, 0.0)
        pad = np.where(prev_ids == PAD, NEG_INF, 0.0)[:, None, None, :]
        self_mask = T.Tensor((causal[None, None] + pad).astype(dtype))
        cross_mask = T.Tensor(np.where(enc_valid, 0.0, NEG_INF).astype(dtype)[:, None, None, :])
        scale_self = 1.0 / math.sqrt(2 * c.head_dim)
        scale_cross = 1.0 / math.sqrt(c.head_dim)
        for l in range(c.dec_layers):
            rel = T.embedding(p[f"dec.{l}.rel1d"], idx1).transpose(2, 0, 1)
            name = f"dec.{l}.self"
            hdn = self._ln(x, f"{name}.ln_pre")
            a = self._attention(hdn, hdn, name, (abs_logits, rel, self_mask), scale_self, True)
            x = self._residual(x, self._ln(a, f"{name}.ln_post"), rng)
            name = f"dec.{l}.cross"
            hdn = self._ln(x, f"{name}.ln_pre")
            a = self._attention(hdn, enc, name, (cross_mask,), scale_cross, False)
            x = self._residual(x, self._ln(a, f"{name}.ln_post"), rng)
            x = self._residual(x, self._ffn(self._ln(x, f"dec.{l}.ffn.ln_pre"), f"dec.{l}.ffn"), rng)
        if last_only:
            x = x[:, ln - 1 :]
        elif positions is not None:
            x = x[np.nonzero(positions)]
        x = self._ln(x, "dec.final_ln")
        return x @ self.lm_head.transpose(1, 0)

    def decode_step(self, enc: Tensor, prefix_ids: Sequence[int]) -> Tensor:
        """Single-sample logits ``(len(prefix), V)`` given encoder states ``(T, hidden)``."""
        prefix = np.asarray([list(prefix_ids)], dtype=np.int64)
        if prefix.shape[1] == 0:
            raise T.ContractError("decoder prefix is empty; it must start with BOS")
        enc_b = enc.reshape(1, *enc.shape)
        return self.decode_batch(enc_b, np.ones((1, enc.shape[0]), dtype=bool), prefix)[0]

    def forward(self, batch: Batch, rng: np.random.Generator | None = None, positions=None) -> Tensor:
        enc, valid = self.encode_batch(batch, rng)
        return self.decode_batch(enc, valid, batch.tgt_in, rng, positions=positions)

    __call__ = forward

    # checkpoints -----------------------------------------------------------
    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.cfg, self.params)

    @classmethod
    def load(cls, path: str | Path) -> "OFAModel":
        cfg, params = load_checkpoint(path)
        return cls(cfg, params=params)


def _manifest_paths(path: str | Path) -> tuple[Path, Path]:
    path = Path(path)
    return path.with_suffix(".manifest"), path.with_suffix(".bin")


def save_checkpoint(path: str | Path, cfg: ModelConfig, params: dict[str, Tensor]) -> None:
    """Text manifest (path, shape, byte offset) plus a little-endian float32 blob."""
    man, blob = _manifest_paths(path)
    man.parent.mkdir(parents=True, exist_ok=True)
    lines = ["#ofa-ckpt v1", "#config " + " ".join(f"{k}={v}" for k, v in cfg.to_dict().items())]
    chunks = []
    offset = 0
    for name, t in params.items():
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        lines.append(f"{name}\t{','.join(map(str, t.shape))}\t{offset}")
        chunks.append(raw)
        offset += len(raw)
    man.write_text("\n".join(lines) + "\n")
    blob.write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, Tensor]]:
    man, blob = _manifest_paths(path)
    lines = man.read_text().splitlines()
    if not lines or lines[0] != "#ofa-ckpt v1":
        raise ModelError(f"{man}: not a checkpoint manifest")
    cfg = ModelConfig.from_dict(dict(kv.split("=", 1) for kv in lines[1].split()[1:]))
    raw = blob.read_bytes()
    params = {}
    for line in lines[2:]:
        name, shape, off = line.split("\t")
        shp = tuple(int(x) for x in shape.split(",")) if shape else ()
        n = int(np.prod(shp))
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=int(off)).reshape(shp)
        params[name] = T.Tensor(arr.astype(np.float32), requires_grad=True, name=name)
    return cfg, params


def with_overrides(cfg: ModelConfig, **kw) -> ModelConfig:
    return replace(cfg, **kw)
