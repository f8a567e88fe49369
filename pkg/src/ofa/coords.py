"""Discretization of continuous modalities: boxes to location bins, images to code grids.

Images are ``uint8`` arrays of shape ``(H, W, 3)``; code grids are integer arrays
of shape ``(side, side)`` holding codebook indices (not vocabulary ids).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

BLOCK = 16


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    """Corner box in normalized image coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for c in (self.x1, self.y1, self.x2, self.y2):
            if not (0.0 <= c <= 1.0):
                raise CodecError(f"box coordinate {c} outside [0, 1]")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise CodecError(f"inverted box {self}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


def coord_bin(c: float, num_bins: int) -> int:
    if not (0.0 <= c <= 1.0):
        raise CodecError(f"coordinate {c} outside [0, 1]")
    return min(int(np.floor(c * num_bins)), num_bins - 1)


def quantize_box(b: BBox | Sequence[float], num_bins: int = 1000) -> list[int]:
    """Location bins for ``x1, y1, x2, y2`` in that order."""
    coords = b.as_tuple() if isinstance(b, BBox) else tuple(b)
    if len(coords) != 4:
        raise CodecError("a box has exactly four coordinates")
    return [coord_bin(float(c), num_bins) for c in coords]


def dequantize_bins(bins: Sequence[int], num_bins: int = 1000) -> tuple[float, ...]:
    """Bin centers; no ordering check."""
    if len(bins) != 4:
        raise CodecError(f"expected 4 location bins, got {len(bins)}")
    return tuple((int(k) + 0.5) / num_bins for k in bins)


def dequantize_box(bins: Sequence[int], num_bins: int = 1000) -> BBox:
    return BBox(*dequantize_bins(bins, num_bins))


def canonical_box(coords: Sequence[float]) -> tuple[BBox, bool]:
    """Swap inverted corners. Returns the box and whether a swap happened."""
    x1, y1, x2, y2 = coords
    swapped = x1 > x2 or y1 > y2
    return BBox(min(x1, x2), min(y1, y2), max(x1, x2), max(y1, y2)), swapped


def box_from_loc_ids(ids: Sequence[int], vocab) -> BBox:
    """Dequantize four vocabulary location ids."""
    if len(ids) < 4:
        raise CodecError(f"malformed box: {len(ids)} tokens, need 4")
    ids = list(ids[:4])
    for i in ids:
        if not vocab.is_loc(i):
            raise CodecError(f"token {vocab.token(i)} is not a location token")
    return dequantize_box([vocab.loc_bin(i) for i in ids], vocab.num_loc_bins)


# ---------------------------------------------------------------------------
# images


def check_image(img: np.ndarray, block: int = BLOCK) -> None:
    if img.ndim != 3 or img.shape[2] != 3:
        raise CodecError(f"image must be (H, W, 3), got {img.shape}")
    h, w = img.shape[:2]
    if h % block or w % block:
        raise CodecError(f"image side {h}x{w} not divisible by {block}")


def pool_blocks(img: np.ndarray, pool: int, block: int = BLOCK) -> np.ndarray:
    """Mean-pool each ``block``x``block`` patch to ``pool``x``pool``x3 and flatten.

    Returns ``(rows, cols, pool*pool*3)`` float64 features.
    """
    check_image(img, block)
    if block % pool:
        raise CodecError(f"block {block} not divisible by pool {pool}")
    h, w = img.shape[:2]
    r, c, s = h // block, w // block, block // pool
    x = img.astype(np.float64).reshape(r, pool, s, c, pool, s, 3)
    x = x.mean(axis=(2, 5))  # (r, pool, c, pool, 3)
    return x.transpose(0, 2, 1, 3, 4).reshape(r, c, pool * pool * 3)


@dataclass(frozen=True)
class Codebook:
    """Toy image codebook: K vectors of mean-pooled RGB block values."""

    vectors: np.ndarray  # (K, D), integer-valued floats in [0, 255]
    pool: int = 4

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def save(self, path: str | Path) -> None:
        lines = [f"#ofa-codebook k={self.size} dim={self.dim}"]
        lines += [" ".join(f"{v:.6f}" for v in row) for row in self.vectors]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Codebook":
        lines = Path(path).read_text().splitlines()
        head = dict(kv.split("=") for kv in lines[0].split()[1:])
        k, d = int(head["k"]), int(head["dim"])
        vec = np.array([[float(x) for x in ln.split()] for ln in lines[1 : k + 1]])
        if vec.shape != (k, d):
            raise CodecError(f"codebook body is {vec.shape}, header says ({k}, {d})")
        pool = int(round(np.sqrt(d // 3)))
        return cls(vec, pool)


def build_codebook(images: Sequence[np.ndarray], k: int, rng: np.random.Generator, pool: int = 4, iters: int = 20) -> Codebook:
    """Seeded k-means over pooled blocks. Centroids are rounded to integers and made distinct."""
    feats = np.concatenate([pool_blocks(im, pool).reshape(-1, 3 * pool * pool) for im in images])
    uniq = np.unique(feats, axis=0)
    init = uniq[rng.choice(len(uniq), size=min(k, len(uniq)), replace=False)]
    if len(init) < k:
        extra = rng.integers(0, 256, size=(k - len(init), feats.shape[1])).astype(np.float64)
        init = np.concatenate([init, extra])
    cent = init.copy()
    for _ in range(iters):
        assign = _nearest(feats, cent)
        for j in range(k):
            members = feats[assign == j]
            if len(members):
                cent[j] = members.mean(axis=0)
    cent = np.clip(np.round(cent), 0, 255)
    seen: set[bytes] = set()
    for j in range(k):
        while cent[j].tobytes() in seen:
            t = j % cent.shape[1]
            cent[j, t] = (cent[j, t] + 1) % 256
        seen.add(cent[j].tobytes())
    return Codebook(cent, pool)


def _nearest(feats: np.ndarray, cent: np.ndarray) -> np.ndarray:
    d = (feats**2).sum(1)[:, None] - 2 * feats @ cent.T + (cent**2).sum(1)[None, :]
    return np.argmin(d, axis=1)  # first minimum -> lowest code on ties


def quantize_image(img: np.ndarray, codebook: Codebook) -> np.ndarray:
    feats = pool_blocks(img, codebook.pool)
    r, c, d = feats.shape
    flat = feats.reshape(-1, d)
    # exact squared distances (no expansion) so ties resolve identically
    dist = ((flat[:, None, :] - codebook.vectors[None, :, :]) ** 2).sum(-1)
    return np.argmin(dist, axis=1).reshape(r, c)


def dequantize_image(codes: np.ndarray, codebook: Codebook) -> np.ndarray:
    codes = np.asarray(codes)
    if codes.size and (codes.min() < 0 or codes.max() >= codebook.size):
        raise CodecError(f"code ids must lie in [0, {codebook.size})")
    r, c = codes.shape
    p = codebook.pool
    s = BLOCK // p
    blocks = codebook.vectors[codes].reshape(r, c, p, p, 3)
    blocks = np.repeat(np.repeat(blocks, s, axis=2), s, axis=3)  # (r, c, 16, 16, 3)
    img = blocks.transpose(0, 2, 1, 3, 4).reshape(r * BLOCK, c * BLOCK, 3)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def middle_region(side: int, frac: float = 0.5) -> tuple[int, int]:
    """Start offset and size of the central square for a ``side`` pixel image."""
    size = int(round(side * frac))
    if size <= 0 or size % BLOCK:
        raise CodecError(f"masked region of {size}px is not a positive multiple of {BLOCK}")
    return (side - size) // 2, size


def mask_middle(img: np.ndarray, codebook: Codebook, frac: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Zero the central square; return the corrupted copy and the codes of the original center."""
    check_image(img)
    h, w = img.shape[:2]
    if h != w:
        raise CodecError("mask_middle expects a square image")
    start, size = middle_region(h, frac)
    target = quantize_image(img[start : start + size, start : start + size], codebook)
    corrupted = img.copy()
    corrupted[start : start + size, start : start + size] = 0
    return corrupted, target


# ---------------------------------------------------------------------------
# PPM (P6, maxval 255)


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    img = np.ascontiguousarray(img, dtype=np.uint8)
    h, w = img.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise CodecError(f"{path}: only binary P6 with maxval 255 is supported")
    w, h = int(fields[1]), int(fields[2])
    data = np.frombuffer(raw[pos + 1 : pos + 1 + w * h * 3], dtype=np.uint8)
    return data.reshape(h, w, 3).copy()
