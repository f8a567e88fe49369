import math

import numpy as np
import pytest

from ofa import tensor as T
from ofa.model import ModelConfig, OFAModel, collate, load_checkpoint
from ofa.tasks import InstructionSample
from ofa.tensor import ShapeError, Tensor
from ofa.training import (
    AdamW,
    NumericError,
    TrainConfig,
    adamw_step,
    clip_grad_norm,
    ema_update,
    global_norm,
    lr_at,
    seq_loss,
    train,
)

# eps=0.1, V=8, correct logit +10, others 0; evaluated once by a standalone scalar script
SMOOTHED_LOSS_REF = 0.8753177490207699
# entropy of the smoothed target for V=8, eps=0.1
SMOOTHED_FLOOR_REF = 0.46698239462597474


def test_loss_reference_value():
    logits = np.zeros((1, 1, 8))
    logits[0, 0, 3] = 10.0
    got = seq_loss(Tensor(logits), [[3]], smoothing=0.1).item()
    assert got == pytest.approx(SMOOTHED_LOSS_REF, abs=1e-10)


@pytest.mark.parametrize("eps", [0.0, 0.1, 0.5])
def test_uniform_logits_give_log_v(eps):
    v = 11
    got = seq_loss(Tensor(np.zeros((2, 3, v))), np.array([[4, 5, 6], [7, 2, 2]]), smoothing=eps).item()
    assert got == pytest.approx(math.log(v), abs=1e-6)


def test_confident_correct_logits_zero_loss():
    logits = np.full((1, 2, 5), -1e4)
    logits[0, 0, 1] = logits[0, 1, 3] = 1e4
    assert seq_loss(Tensor(logits), [[1, 3]], smoothing=0.0).item() == pytest.approx(0.0, abs=1e-8)


def test_pad_positions_excluded():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(1, 3, 6))
    a = seq_loss(Tensor(logits), [[4, 5, 2]]).item()
    b = seq_loss(Tensor(logits[:, :2]), [[4, 5]]).item()
    assert a == pytest.approx(b, abs=1e-12)


def test_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        seq_loss(Tensor(np.zeros((1, 3, 5))), [[1, 2]])


def test_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(label_smoothing=1.0)
    with pytest.raises(ValueError):
        TrainConfig(total_steps=50, warmup_ratio=0.01)


def test_lr_schedule():
    cfg = TrainConfig(total_steps=1000)
    assert cfg.warmup_steps == 10
    assert lr_at(0, cfg) == 0.0
    assert lr_at(10, cfg) == pytest.approx(2e-4)
    assert lr_at(5, cfg) == pytest.approx(1e-4)
    assert lr_at(505, cfg) == pytest.approx(1e-4)
    assert lr_at(1000, cfg) == 0.0


def _reference_adamw(w, grads, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.0):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        w = w * (1 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return w


def test_adamw_matches_reference():
    p = Tensor(np.array([[0.5]]), requires_grad=True)
    cfg = TrainConfig(weight_decay=0.01)
    opt = AdamW({"w": p}, cfg)
    grads = [1.0, -0.3, 2.0, 0.7]
    for g in grads:
        p.grad = np.array([[g]])
        adamw_step(opt, 1e-2)
    assert p.data[0, 0] == pytest.approx(_reference_adamw(0.5, grads, 1e-2, wd=0.01), abs=1e-12)


def test_adamw_first_step_is_minus_lr():
    p = Tensor(np.array([2.0]), requires_grad=True)
    opt = AdamW({"w": p}, TrainConfig(weight_decay=0.0))
    p.grad = np.array([1.0])
    adamw_step(opt, 0.1)
    assert p.data[0] == pytest.approx(2.0 - 0.1 / (1 + 1e-8), abs=1e-12)


def test_adamw_zero_grads():
    w0 = np.random.default_rng(0).normal(size=(3, 4))
    p = Tensor(w0.copy(), requires_grad=True)
    b = Tensor(np.ones(4), requires_grad=True)
    opt = AdamW({"w": p, "b": b}, TrainConfig(weight_decay=0.0))
    p.grad, b.grad = np.zeros_like(w0), np.zeros(4)
    adamw_step(opt, 0.1)
    np.testing.assert_array_equal(p.data, w0)
    opt = AdamW({"w": p, "b": b}, TrainConfig(weight_decay=0.5))
    adamw_step(opt, 0.1)
    np.testing.assert_allclose(p.data, w0 * (1 - 0.1 * 0.5))
    np.testing.assert_array_equal(b.data, np.ones(4))  # vectors are not decayed


def test_adamw_non_finite_names_param():
    p = Tensor(np.ones((2, 2)), requires_grad=True)
    opt = AdamW({"enc.0.self.q.w": p}, TrainConfig())
    p.grad = np.array([[1.0, np.nan], [0.0, 0.0]])
    with pytest.raises(NumericError, match=r"enc\.0\.self\.q\.w"):
        adamw_step(opt, 1e-3)


def test_ema():
    params = {"a": Tensor(np.full(3, 2.0))}
    ema = {"a": np.zeros(3)}
    ema_update(ema, params, 0.0)
    np.testing.assert_array_equal(ema["a"], params["a"].data)
    ema = {"a": np.ones(3)}
    ema_update(ema, params, 1.0)
    np.testing.assert_array_equal(ema["a"], np.ones(3))
    ema = {"a": np.zeros(3)}
    gaps = []
    for _ in range(5):
        ema_update(ema, params, 0.9)
        gaps.append(2.0 - ema["a"][0])
    np.testing.assert_allclose(np.array(gaps[1:]) / np.array(gaps[:-1]), 0.9)
    with pytest.raises(ShapeError):
        ema_update({"a": np.zeros(2)}, params, 0.5)


def test_clipping_bound():
    rng = np.random.default_rng(0)
    for _ in range(50):
        ps = [Tensor(np.zeros(s)) for s in [(3, 4), (5,), (2, 2, 2)]]
        for p in ps:
            p.grad = rng.normal(size=p.shape) * rng.uniform(0.01, 100)
        before = global_norm(ps)
        got = clip_grad_norm(ps, 1.0)
        assert got == pytest.approx(before)
        assert global_norm(ps) <= 1.0 + 1e-6


def test_smoothed_floor_reached():
    with T.default_dtype(np.float64):
        logits = Tensor(np.zeros((1, 1, 8)), requires_grad=True)
        cfg = TrainConfig(total_steps=4000, warmup_ratio=0.0, weight_decay=0.0)
        opt = AdamW({"logits": logits}, cfg)
        for step in range(4000):
            logits.zero_grad()
            seq_loss(logits, [[5]], smoothing=0.1).backward()
            adamw_step(opt, 0.05 * (1 - step / 4000))
        final = seq_loss(logits, [[5]], smoothing=0.1).item()
    assert final == pytest.approx(SMOOTHED_FLOOR_REF, abs=1e-5)


# ---------------------------------------------------------------------------
# loop


def _tiny(seed=0):
    cfg = ModelConfig(vocab_size=40, hidden=16, intermediate=32, heads=2, enc_layers=1, dec_layers=1, max_text_len=16,
                      num_loc_bins=10, codebook_size=4, dropout=0.0, stochastic_depth_rate=0.0)
    return OFAModel(cfg, seed=seed)


def _stream(n=8, seed=0):
    rng = np.random.default_rng(seed)
    items = []
    for k in range(n):
        img = rng.integers(0, 256, (64, 64, 3), dtype=np.uint8) if k % 2 else None
        items.append(("vl", InstructionSample([0, *rng.integers(4, 40, 4), 1], img, [*rng.integers(4, 40, 3), 1])))
    return items


def _batches(items, size=4):
    k = 0
    while True:
        yield [items[(k + j) % len(items)] for j in range(size)]
        k += size


def test_zero_lr_keeps_weights():
    m = _tiny()
    before = {k: p.data.copy() for k, p in m.params.items()}
    train(m, _batches(_stream()), TrainConfig(total_steps=5, warmup_ratio=0.2, peak_lr=0.0, dropout=0.1))
    for k, p in m.params.items():
        np.testing.assert_array_equal(p.data, before[k])


def test_identical_seeds_identical_outputs(tmp_path):
    outs = []
    for run in ("a", "b"):
        m = _tiny(seed=3)
        cfg = TrainConfig(total_steps=6, warmup_ratio=0.2, peak_lr=1e-3, seed=11, ckpt_every=3, ema_decay=0.9)
        train(m, _batches(_stream()), cfg, tmp_path / run)
        outs.append(tmp_path / run)
    a, b = outs
    assert sorted(p.name for p in a.iterdir()) == sorted(p.name for p in b.iterdir())
    for f in a.iterdir():
        assert f.read_bytes() == (b / f.name).read_bytes(), f.name
    header = (a / "metrics.csv").read_text().splitlines()[0]
    assert header == "step,lr,loss_total,loss_vl,loss_det,loss_img,loss_txt"
    assert (a / "ckpt_000003.manifest").exists()


def test_non_finite_loss_keeps_last_checkpoint(tmp_path):
    m = _tiny()
    cfg = TrainConfig(total_steps=10, warmup_ratio=0.1, peak_lr=1e-3, ckpt_every=2)
    batches = _batches(_stream())

    def poisoned():
        for k, b in enumerate(batches):
            if k == 3:
                m.params["dec.final_ln.g"].data[0] = np.nan
            yield b

    with pytest.raises(NumericError):
        train(m, poisoned(), cfg, tmp_path)
    cfg2, params = load_checkpoint(tmp_path / "ckpt_000002")
    assert all(np.isfinite(p.data).all() for p in params.values())


def test_descent_on_fixed_batch():
    cfg = ModelConfig.preset("nano", 64, num_loc_bins=10, codebook_size=4, dropout=0.0, stochastic_depth_rate=0.0)
    m = OFAModel(cfg, seed=0).train()
    items = [s for _, s in _stream(4)]
    for s in items:
        s.source_ids = [min(t, 63) for t in s.source_ids]
    batch = collate(items, cfg)
    tc = TrainConfig(total_steps=50, warmup_ratio=0.02, peak_lr=1e-3, weight_decay=0.0, label_smoothing=0.1)
    opt = AdamW(m.params, tc)
    losses = []
    for step in range(1, 51):
        m.zero_grad()
        loss = seq_loss(m.forward(batch), batch.tgt_out, 0.1)
        losses.append(loss.item())
        loss.backward()
        clip_grad_norm(m.parameters(), 1.0)
        adamw_step(opt, lr_at(step, tc))
    assert all(b <= a + 1e-6 for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0] - 1.0
