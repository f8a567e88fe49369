"""Optimisation: smoothed sequence loss, warmup/linear-decay schedule, AdamW, EMA and the loop."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from . import tensor as T
from .model import Batch, OFAModel, collate, save_checkpoint
from .tensor import Tensor
from .vocab import PAD

GROUP_COLUMNS = ("vl", "det", "img", "txt")
CSV_HEADER = "step,lr,loss_total,loss_vl,loss_det,loss_img,loss_txt"


class NumericError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    peak_lr: float = 2e-4
    warmup_ratio: float = 0.01
    total_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    dropout: float = 0.1
    stochastic_depth: float = 0.1
    label_smoothing: float = 0.1
    ema_decay: float | None = None
    batch_size: int = 96
    seed: int = 0
    clip_norm: float = 1.0
    ckpt_every: int = 0
    trie_train: bool = True
    target_loss: float | None = None  # stop early once the logged loss falls below this

    def __post_init__(self):
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if self.warmup_ratio * self.total_steps < 1 and self.warmup_ratio > 0:
            raise ValueError("warmup_ratio * total_steps must be at least 1")

    @property
    def warmup_steps(self) -> int:
        return max(1, int(round(self.warmup_ratio * self.total_steps))) if self.warmup_ratio > 0 else 0

    @classmethod
    def from_dict(cls, d: Mapping[str, object]) -> "TrainConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for k, v in d.items():
            if k not in kinds:
                raise ValueError(f"unknown training config key {k!r}")
            t = str(kinds[k])
            if v is None or (isinstance(v, str) and v.lower() in ("none", "")):
                kw[k] = None
            elif t.startswith("bool"):
                kw[k] = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes")
            elif t.startswith("int"):
                kw[k] = int(v)
            else:
                kw[k] = float(v)
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


def seq_loss(
    logits: Tensor,
    target_ids,
    smoothing: float = 0.1,
    allowed: np.ndarray | None = None,
    pad: int = PAD,
) -> Tensor:
    """Mean over non-PAD target tokens of ``(1 - eps) * NLL + eps * mean-vocab NLL``."""
    target_ids = np.asarray(target_ids)
    if logits.shape[:-1] != target_ids.shape:
        raise T.ShapeError(f"logits {logits.shape} do not match targets {target_ids.shape}")
    return T.cross_entropy_logits(logits, target_ids, smoothing, ignore_index=pad, allowed=allowed)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``peak_lr``, then linear decay to 0 at ``total_steps``."""
    w, total = cfg.warmup_steps, cfg.total_steps
    step = min(max(step, 0), total)
    if w and step <= w:
        return cfg.peak_lr * step / w
    return cfg.peak_lr * (total - step) / (total - w)


class AdamW:
    """Bias-corrected Adam with decoupled weight decay on matrices (``ndim >= 2``)."""

    def __init__(self, params: Mapping[str, Tensor], cfg: TrainConfig):
        self.params = dict(params)
        self.cfg = cfg
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        adamw_step(self, lr)


def adamw_step(opt: AdamW, lr: float) -> None:
    cfg = opt.cfg
    for name, p in opt.params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in {name}")
    opt.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**opt.t
    c2 = 1.0 - b2**opt.t
    for name, p in opt.params.items():
        if cfg.weight_decay and p.ndim >= 2:
            p.data *= 1.0 - lr * cfg.weight_decay
        g = p.grad
        if g is None:
            continue
        m, v = opt.m[name], opt.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)).astype(p.dtype)


def ema_update(ema: dict[str, np.ndarray], params: Mapping[str, Tensor], decay: float) -> dict[str, np.ndarray]:
    """``ema <- decay * ema + (1 - decay) * weights``, in place, per tensor."""
    for name, p in params.items():
        e = ema[name]
        if e.shape != p.shape:
            raise T.ShapeError(f"EMA shape {e.shape} does not match {name} {p.shape}")
        e *= decay
        e += (1.0 - decay) * p.data
    return ema


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def global_norm(params: Sequence[Tensor]) -> float:
    return math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None))


@dataclass
class StepLog:
    step: int
    lr: float
    loss: float
    groups: dict[str, float]

    def csv(self) -> str:
        cols = [str(self.step), f"{self.lr:.8e}", f"{self.loss:.8f}"]
        cols += [f"{self.groups[g]:.8f}" if g in self.groups else "" for g in GROUP_COLUMNS]
        return ",".join(cols)


def _group_losses(per: np.ndarray, rows: np.ndarray, groups: Sequence[str]) -> dict[str, float]:
    """Mean token loss of each group; ``rows`` gives the batch row of each entry of ``per``."""
    garr = np.asarray(groups)[rows]
    out = {}
    for g in dict.fromkeys(groups):
        sel = garr == g
        if sel.any():
            out[g] = float(per[sel].sum() / sel.sum())
    return out


def train_step(model: OFAModel, opt: AdamW, batch: Batch, groups: Sequence[str], step: int, cfg: TrainConfig, rng) -> StepLog:
    lr = lr_at(step, cfg)
    model.zero_grad()
    # logits only at real target positions; padding would be masked out anyway
    keep = batch.tgt_out != PAD
    logits = model.forward(batch, rng, positions=keep)
    allowed = None if batch.allowed is None else batch.allowed[keep]
    per = T.cross_entropy_logits(logits, batch.tgt_out[keep], cfg.label_smoothing, allowed=allowed, reduction="none")
    loss = per.sum() * (1.0 / max(int(keep.sum()), 1))
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(f"loss became {value} at step {step}")
    loss.backward()
    if cfg.clip_norm:
        clip_grad_norm(model.parameters(), cfg.clip_norm)
    adamw_step(opt, lr)
    return StepLog(step, lr, value, _group_losses(per.data, np.nonzero(keep)[0], groups))


@dataclass
class TrainResult:
    logs: list[StepLog]
    ema: dict[str, np.ndarray] | None
    stopped_at: int
    last_checkpoint: Path | None = None


def train(
    model: OFAModel,
    batches: Iterator[list[tuple[str, object]]],
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    callback: Callable[[StepLog], None] | None = None,
) -> TrainResult:
    """Run ``cfg.total_steps`` optimisation steps over mixed batches.

    Writes ``metrics.csv`` and (every ``ckpt_every`` steps and at the end)
    ``ckpt_<step>`` checkpoints when ``out_dir`` is given. A non-finite loss or
    gradient stops the run with :class:`NumericError`; checkpoints already on
    disk are left untouched.
    """
    rng = np.random.default_rng(cfg.seed)
    model.cfg = replace(model.cfg, dropout=cfg.dropout, stochastic_depth_rate=cfg.stochastic_depth)
    model.train()
    opt = AdamW(model.params, cfg)
    ema = {k: p.data.copy() for k, p in model.params.items()} if cfg.ema_decay else None
    out = Path(out_dir) if out_dir is not None else None
    csv = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        csv = (out / "metrics.csv").open("w")
        csv.write(CSV_HEADER + "\n")
    logs: list[StepLog] = []
    last_ckpt = None
    step = 0
    try:
        for step in range(1, cfg.total_steps + 1):
            mixed = next(batches)
            groups = [g for g, _ in mixed]
            batch = collate([s for _, s in mixed], model.cfg, trie_masks=cfg.trie_train)
            try:
                log = train_step(model, opt, batch, groups, step, cfg, rng)
            except NumericError:
                model.eval()
                raise
            if ema is not None:
                ema_update(ema, model.params, cfg.ema_decay)
            logs.append(log)
            if csv is not None:
                csv.write(log.csv() + "\n")
            if callback is not None:
                callback(log)
            if out is not None and cfg.ckpt_every and step % cfg.ckpt_every == 0:
                last_ckpt = out / f"ckpt_{step:06d}"
                save_checkpoint(last_ckpt, model.cfg, model.params)
            if cfg.target_loss is not None and log.loss < cfg.target_loss:
                break
    finally:
        if csv is not None:
            csv.close()
    if out is not None:
        last_ckpt = out / "ckpt_final"
        save_checkpoint(last_ckpt, model.cfg, model.params)
        if ema is not None:
            save_checkpoint(out / "ckpt_ema", model.cfg, {k: T.Tensor(v) for k, v in ema.items()})
    model.eval()
    return TrainResult(logs, ema, step, last_ckpt)


def apply_ema(model: OFAModel, ema: Mapping[str, np.ndarray]) -> OFAModel:
    """Copy of ``model`` carrying the EMA weights (used for evaluation)."""
    params = {k: T.Tensor(ema[k].astype(p.dtype), requires_grad=True, name=k) for k, p in model.params.items()}
    return OFAModel(model.cfg, params=params)
