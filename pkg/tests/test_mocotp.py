import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from satssl.augment import AugmentationConfig
from satssl.dataspec import SyntheticSpec, generate_synthetic_dataset
from satssl.mocotp import (
    CheckpointError,
    CheckpointVersionError,
    ContrastiveConfig,
    EncoderConfig,
    EncoderState,
    MemoryQueue,
    PretrainError,
    contrastive_loss,
    cosine_lr,
    ema_update,
    encode,
    info_nce,
    load_checkpoint,
    masked_info_nce,
    pretrain,
    save_checkpoint,
)
from satssl.mocotp.checkpoint import read_header
from satssl.mocotp.encoder import SplitBatchNorm2d, to_tensor

SMALL = EncoderConfig(width=8, embedding_dim=16)


def unit(rng, *shape, dtype=torch.float64):
    return F.normalize(torch.as_tensor(rng.normal(size=shape), dtype=dtype), dim=-1)


# -- info_nce -------------------------------------------------------------------------------


def test_empty_negatives_gives_exact_zero():
    rng = np.random.default_rng(0)
    q, k = unit(rng, 8), unit(rng, 8)
    assert info_nce(q, k, None, 0.2).item() == 0.0
    assert info_nce(q, k, torch.zeros(0, 8, dtype=torch.float64), 0.2).item() == 0.0


@pytest.mark.parametrize("n", [1, 7, 63])
@pytest.mark.parametrize("tau", [0.07, 0.2, 1.0])
def test_equal_logits_give_log_n_plus_one(n, tau):
    q = torch.zeros(4, dtype=torch.float64)
    q[0] = 1.0
    negatives = q.repeat(n, 1)
    loss = info_nce(q, q.clone(), negatives, tau).item()
    assert abs(loss - math.log(n + 1)) < 1e-12


def test_n7_value():
    q = torch.tensor([1.0, 0.0], dtype=torch.float64)
    assert info_nce(q, q, q.repeat(7, 1), 0.2).item() == pytest.approx(2.0794415416798357, abs=1e-12)


def test_matches_direct_formula():
    rng = np.random.default_rng(1)
    q, k, neg = unit(rng, 16), unit(rng, 16), unit(rng, 10, 16)
    tau = 0.2
    num = math.exp(float(q @ k) / tau)
    den = num + sum(math.exp(float(q @ n) / tau) for n in neg)
    assert info_nce(q, k, neg, tau).item() == pytest.approx(-math.log(num / den), rel=1e-12)


@pytest.mark.parametrize("tau", [0.0, -0.1])
def test_non_positive_tau_rejected(tau):
    q = torch.ones(2) / math.sqrt(2)
    with pytest.raises(ValueError):
        info_nce(q, q, None, tau)
    with pytest.raises(ValueError):
        contrastive_loss(q[None], q[None], q[None], tau)


def test_stable_for_extreme_logits():
    q = torch.tensor([50.0, 0.0], dtype=torch.float64)
    neg = torch.tensor([[-50.0, 0.0], [50.0, 0.0]], dtype=torch.float64)
    loss = info_nce(q, torch.tensor([-1.0, 0.0], dtype=torch.float64), neg, 0.2)
    assert torch.isfinite(loss)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    q, k, neg = unit(rng, 6), unit(rng, 6), unit(rng, 5, 6)
    q.requires_grad_(True)
    info_nce(q, k, neg, 0.2).backward()
    h = 1e-5
    fd = torch.zeros(6, dtype=torch.float64)
    with torch.no_grad():
        for i in range(6):
            e = torch.zeros(6, dtype=torch.float64)
            e[i] = h
            fd[i] = (info_nce(q + e, k, neg, 0.2) - info_nce(q - e, k, neg, 0.2)) / (2 * h)
    assert torch.linalg.norm(q.grad - fd) / torch.linalg.norm(fd) < 1e-6


def test_batched_loss_agrees_with_single_query_loss():
    rng = np.random.default_rng(3)
    q, k, queue = unit(rng, 5, 8), unit(rng, 5, 8), unit(rng, 12, 8)
    batched = contrastive_loss(q, k, queue, 0.3, reduction="none")
    single = torch.stack([info_nce(q[i], k[i], queue, 0.3) for i in range(5)])
    np.testing.assert_allclose(batched.numpy(), single.numpy(), atol=1e-12)
    assert contrastive_loss(q, k, queue, 0.3).item() == pytest.approx(single.mean().item(), abs=1e-12)
    with pytest.raises(ValueError):
        contrastive_loss(q, k, queue, 0.3, reduction="sum")


# -- masking ---------------------------------------------------------------------------------


def filled_queue(keys, groups):
    queue = MemoryQueue(len(keys), keys.shape[1], dtype=keys.dtype)
    return queue.enqueue(keys, groups)


def test_masked_equals_filtered_oracle():
    rng = np.random.default_rng(4)
    q, k, keys = unit(rng, 8), unit(rng, 8), unit(rng, 8, 8)
    groups = np.array([3, 9, 3, 1, 3, 2, 5, 7])
    loss = masked_info_nce(q, 3, k, filled_queue(keys, groups), 0.2)
    oracle = info_nce(q, k, keys[groups != 3], 0.2)
    assert abs(loss.item() - oracle.item()) < 1e-12


def test_no_collisions_equals_unmasked():
    rng = np.random.default_rng(5)
    q, k, keys = unit(rng, 8), unit(rng, 8), unit(rng, 6, 8)
    loss = masked_info_nce(q, 99, k, filled_queue(keys, np.arange(6)), 0.2)
    assert loss.item() == pytest.approx(info_nce(q, k, keys, 0.2).item(), abs=1e-12)


def test_full_collision_gives_zero():
    rng = np.random.default_rng(6)
    q, k, keys = unit(rng, 8), unit(rng, 8), unit(rng, 6, 8)
    assert masked_info_nce(q, 4, k, filled_queue(keys, np.full(6, 4)), 0.2).item() == 0.0


def test_unwritten_slots_do_not_participate():
    rng = np.random.default_rng(7)
    q, k, keys = unit(rng, 8), unit(rng, 8), unit(rng, 3, 8)
    queue = MemoryQueue(16, 8, dtype=torch.float64).enqueue(keys, [1, 2, 3])
    assert masked_info_nce(q, 0, k, queue, 0.2).item() == pytest.approx(info_nce(q, k, keys, 0.2).item(), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12), st.floats(0.05, 2.0))
def test_masking_never_increases_loss(seed, n, tau):
    rng = np.random.default_rng(seed)
    q, k, keys = unit(rng, 8), unit(rng, 8), unit(rng, n, 8)
    groups = rng.integers(0, 3, n)
    masked = masked_info_nce(q, 0, k, filled_queue(keys, groups), tau).item()
    unmasked = info_nce(q, k, keys, tau).item()
    assert masked <= unmasked + 1e-12
    if not (groups == 0).any():
        assert masked == pytest.approx(unmasked, abs=1e-12)


# -- queue -----------------------------------------------------------------------------------


def test_enqueue_into_empty_queue():
    rng = np.random.default_rng(8)
    queue = MemoryQueue(8, 4).enqueue(unit(rng, 3, 4, dtype=torch.float32), [0, 1, 2])
    assert (queue.fill_count, queue.write_pointer, len(queue)) == (3, 3, 3)


def test_third_enqueue_evicts_first_batch():
    rng = np.random.default_rng(9)
    queue = MemoryQueue(8, 4)
    batches = [unit(rng, 4, 4, dtype=torch.float32) for _ in range(4)]
    for i, b in enumerate(batches[:3]):
        queue.enqueue(b, [i] * 4)
    assert queue.fill_count == 8
    np.testing.assert_array_equal(queue.keys[:4].numpy(), batches[2].numpy())
    np.testing.assert_array_equal(queue.group_ids.numpy(), [2, 2, 2, 2, 1, 1, 1, 1])


def test_full_wrap_restores_pointer():
    rng = np.random.default_rng(10)
    queue = MemoryQueue(8, 4).enqueue(unit(rng, 4, 4, dtype=torch.float32), [0] * 4)
    queue.enqueue(unit(rng, 4, 4, dtype=torch.float32), [1] * 4)
    queue.enqueue(unit(rng, 2, 4, dtype=torch.float32), [2] * 2)
    before = queue.write_pointer
    fresh = unit(rng, 8, 4, dtype=torch.float32)
    queue.enqueue(fresh, np.arange(8))
    assert queue.write_pointer == before
    assert set(queue.group_ids.tolist()) == set(range(8))


def test_enqueue_contract_errors():
    rng = np.random.default_rng(11)
    queue = MemoryQueue(4, 3)
    with pytest.raises(ValueError):
        queue.enqueue(unit(rng, 5, 3, dtype=torch.float32), range(5))
    with pytest.raises(ValueError):
        queue.enqueue(torch.ones(2, 3), [0, 1])
    with pytest.raises(ValueError):
        queue.enqueue(unit(rng, 2, 3, dtype=torch.float32), [0])
    with pytest.raises(ValueError):
        queue.enqueue(unit(rng, 2, 4, dtype=torch.float32), [0, 1])
    with pytest.raises(ValueError):
        MemoryQueue(0, 3)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.lists(st.integers(0, 12), min_size=1, max_size=30))
def test_queue_is_fifo_against_age_oracle(capacity, sizes):
    queue = MemoryQueue(capacity, 2, dtype=torch.float64)
    history = []
    serial = 0
    for b in sizes:
        b = min(b, capacity)
        ids = list(range(serial, serial + b))
        serial += b
        angles = torch.tensor(ids, dtype=torch.float64)
        keys = torch.stack([torch.cos(angles), torch.sin(angles)], dim=1)
        prev_fill = queue.fill_count
        queue.enqueue(keys, ids)
        history.extend(ids)
        assert queue.fill_count >= prev_fill
        assert queue.fill_count == min(len(history), capacity)
    _, groups = queue.filled()
    assert sorted(groups.tolist()) == sorted(history[-capacity:])
    # ages decrease walking backward from the write pointer
    order = [(queue.write_pointer - 1 - i) % capacity for i in range(queue.fill_count)]
    assert [queue.group_ids[i].item() for i in order] == history[::-1][: queue.fill_count]


# -- encoder / EMA ---------------------------------------------------------------------------


def test_encode_outputs_unit_norm_and_is_deterministic():
    state = EncoderState.create(SMALL, seed=0)
    state.query.eval()
    imgs = np.random.default_rng(0).uniform(size=(3, 32, 32, 3)).astype(np.float32)
    z = encode(state.query, imgs)
    np.testing.assert_allclose(z.norm(dim=1).detach().numpy(), 1.0, atol=1e-5)
    z2 = encode(state.query, np.concatenate([imgs[:1], imgs[:1]]))
    np.testing.assert_allclose(z2[0].detach().numpy(), z2[1].detach().numpy(), atol=1e-6)


def test_encode_matches_unnormalised_forward_oracle():
    state = EncoderState.create(SMALL, seed=1)
    state.query.eval()
    imgs = np.random.default_rng(1).uniform(size=(2, 32, 32, 3)).astype(np.float32)
    raw = state.query(to_tensor(imgs)).detach()
    with torch.no_grad():
        state.query.head[-1].weight.mul_(2.0)
        state.query.head[-1].bias.mul_(2.0)
    doubled = encode(state.query, imgs).detach()
    np.testing.assert_allclose(doubled.numpy(), (raw / raw.norm(dim=1, keepdim=True)).numpy(), atol=1e-6)


def test_encode_shape_errors():
    state = EncoderState.create(SMALL, seed=0)
    with pytest.raises(ValueError):
        encode(state.query, np.zeros((2, 32, 32)))
    with pytest.raises(ValueError):
        encode(state.query, np.zeros((2, 32, 32, 4)))


def test_encode_is_differentiable_in_query_params():
    state = EncoderState.create(SMALL, seed=0)
    z = encode(state.query, np.random.default_rng(2).uniform(size=(4, 32, 32, 3)).astype(np.float32))
    z.sum().backward()
    assert all(p.grad is not None for p in state.query.parameters())
    assert all(not p.requires_grad for p in state.key.parameters())


def test_ema_scalar_hand_value():
    q, k = torch.nn.Linear(1, 1, bias=False), torch.nn.Linear(1, 1, bias=False)
    with torch.no_grad():
        q.weight.fill_(4.0)
        k.weight.fill_(2.0)

    class S:
        pass

    s = S()
    s.query, s.key = q, k
    ema_update(s, 0.999)
    assert k.weight.item() == pytest.approx(2.002, abs=1e-6)
    assert q.weight.item() == 4.0


def test_ema_closed_form_and_degenerate_momenta():
    state = EncoderState.create(SMALL, seed=3)
    with torch.no_grad():
        for p in state.key.parameters():
            p.add_(torch.randn_like(p))
    q0 = [p.clone() for p in state.query.parameters()]
    k0 = [p.clone() for p in state.key.parameters()]
    ema_update(state, 0.75)
    for pq, pk, a, b in zip(state.query.parameters(), state.key.parameters(), q0, k0):
        torch.testing.assert_close(pk, b * 0.75 + a * 0.25, rtol=0, atol=0)
        assert torch.equal(pq, a)
    k1 = [p.clone() for p in state.key.parameters()]
    ema_update(state, 1.0)
    assert all(torch.equal(p, b) for p, b in zip(state.key.parameters(), k1))
    ema_update(state, 0.0)
    assert all(torch.equal(pk, pq) for pk, pq in zip(state.key.parameters(), state.query.parameters()))
    with pytest.raises(ValueError):
        ema_update(state, 1.5)


def test_ema_converges_geometrically():
    q, k = torch.nn.Linear(1, 1, bias=False), torch.nn.Linear(1, 1, bias=False)
    with torch.no_grad():
        q.weight.fill_(1.0)
        k.weight.fill_(0.0)

    class S:
        pass

    s = S()
    s.query, s.key = q, k
    gaps = []
    for _ in range(3):
        ema_update(s, 0.9)
        gaps.append(abs(q.weight.item() - k.weight.item()))
    assert gaps[1] / gaps[0] == pytest.approx(0.9, rel=1e-6)
    assert gaps[2] / gaps[1] == pytest.approx(0.9, rel=1e-6)


def test_ema_rejects_shape_mismatch():
    a = EncoderState.create(SMALL, seed=0)
    b = EncoderState.create(EncoderConfig(width=16, embedding_dim=16), seed=0)
    with pytest.raises(ValueError):
        EncoderState(a.query, b.key)


def test_key_encoder_receives_no_gradient():
    state = EncoderState.create(SMALL, seed=4)
    imgs = np.random.default_rng(3).uniform(size=(4, 32, 32, 3)).astype(np.float32)
    q = encode(state.query, imgs)
    with torch.no_grad():
        k = encode(state.key, imgs[::-1].copy())
    contrastive_loss(q, k, torch.zeros(0, 16), 0.2).backward()
    assert all(p.grad is None for p in state.key.parameters())


def test_split_batchnorm_normalises_each_split():
    bn = SplitBatchNorm2d(2, 2, affine=False)
    x = torch.randn(8, 2, 3, 3) * torch.tensor([1.0, 5.0]).view(1, 2, 1, 1) + 3.0
    y = bn(x)
    for split in range(2):
        part = y[split::2]
        np.testing.assert_allclose(part.mean(dim=(0, 2, 3)).detach().numpy(), 0.0, atol=1e-5)
    assert bn.running_mean.shape == (2,)
    bn.eval()
    assert bn(x).shape == x.shape


def test_create_does_not_touch_global_rng():
    torch.manual_seed(123)
    expected = torch.rand(1)
    torch.manual_seed(123)
    EncoderState.create(SMALL, seed=9)
    assert torch.equal(torch.rand(1), expected)


# -- schedule and config ---------------------------------------------------------------------


def test_cosine_lr_values():
    assert cosine_lr(0, 100, 0.03) == 0.03
    assert abs(cosine_lr(100, 100, 0.03)) < 1e-12
    assert cosine_lr(50, 100, 0.03) == pytest.approx(0.015, abs=1e-15)
    with pytest.raises(ValueError):
        cosine_lr(101, 100, 0.03)
    with pytest.raises(ValueError):
        cosine_lr(0, 0, 0.03)


def test_config_defaults_and_validation():
    cfg = ContrastiveConfig()
    assert (cfg.tau, cfg.queue_size, cfg.m_ema, cfg.base_lr) == (0.2, 65536, 0.999, 3e-2)
    assert (cfg.batch_size, cfg.optimizer_momentum, cfg.weight_decay, cfg.epochs) == (256, 0.9, 1e-4, 200)
    assert ContrastiveConfig.from_dict(cfg.to_dict()) == cfg
    for bad in ({"tau": 0}, {"queue_size": 100, "batch_size": 64}, {"m_ema": 1.5}, {"schedule": "step"}):
        with pytest.raises(ValueError):
            ContrastiveConfig(**bad)


# -- pretraining -----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_data():
    return generate_synthetic_dataset(SyntheticSpec(num_classes=4, groups_per_class=4, views_per_group=3, image_size=16))


TINY_AUG = AugmentationConfig(output_size=16, crop_scale_range=(0.5, 1.0), blur_prob=0.0)


def tiny_cfg(**kw):
    base = dict(queue_size=32, batch_size=8, epochs=2, width=8, embedding_dim=16, m_ema=0.99)
    return ContrastiveConfig(**{**base, **kw})


def test_frozen_dynamics_single_step(tiny_data):
    manifest, images = tiny_data
    cfg = tiny_cfg(base_lr=0.0, m_ema=1.0, weight_decay=0.0, epochs=1)
    state = EncoderState.create(cfg.encoder, seed=0)
    q0 = [p.clone() for p in state.query.parameters()]
    k0 = [p.clone() for p in state.key.parameters()]
    res = pretrain(manifest, cfg, TINY_AUG, np.random.default_rng(0), images, state=state, max_steps=1)
    assert all(torch.equal(a, p) for a, p in zip(q0, res.state.query.parameters()))
    assert all(torch.equal(a, p) for a, p in zip(k0, res.state.key.parameters()))
    assert res.queue.fill_count == cfg.batch_size


def test_initial_loss_near_uniform_against_random_queue():
    rng = np.random.default_rng(12)
    state = EncoderState.create(EncoderConfig(width=8, embedding_dim=64), seed=0)
    imgs = rng.uniform(size=(16, 32, 32, 3)).astype(np.float32)
    q = encode(state.query, imgs).detach()
    with torch.no_grad():
        k = encode(state.key, imgs)
        fill = 256
        queue = MemoryQueue(fill, 64).enqueue(encode(state.key, rng.uniform(size=(fill, 32, 32, 3)).astype(np.float32)), np.arange(fill))
    keys, _ = queue.filled()
    loss = contrastive_loss(q, k, keys, 0.2).item()
    assert abs(loss - math.log(fill + 1)) / math.log(fill + 1) < 0.2


def test_pretrain_logs_and_is_reproducible(tiny_data):
    manifest, images = tiny_data
    cfg = tiny_cfg()
    torch.set_num_threads(1)
    a = pretrain(manifest, cfg, TINY_AUG, np.random.default_rng(5), images)
    b = pretrain(manifest, cfg, TINY_AUG, np.random.default_rng(5), images)
    assert [r["epoch"] for r in a.log] == [0, 1]
    assert set(a.log[0]) == {"epoch", "mean_loss", "lr", "queue_fill"}
    np.testing.assert_allclose([r["mean_loss"] for r in a.log], [r["mean_loss"] for r in b.log], atol=1e-5)
    for pa, pb in zip(a.state.query.parameters(), b.state.query.parameters()):
        assert torch.equal(pa, pb)
    assert a.queue.fill_count == 32


def test_pretrain_input_errors(tiny_data):
    manifest, images = tiny_data
    with pytest.raises(ValueError):
        pretrain(manifest, tiny_cfg(batch_size=64, queue_size=64), TINY_AUG, np.random.default_rng(0), images)
    missing = {k: v for i, (k, v) in enumerate(images.items()) if i % 2}
    with pytest.raises(PretrainError, match="epoch 0 step 0"):
        pretrain(manifest, tiny_cfg(), TINY_AUG, np.random.default_rng(0), missing)


# -- checkpoints -----------------------------------------------------------------------------


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    state = EncoderState.create(SMALL, seed=7)
    with torch.no_grad():
        for p in state.key.parameters():
            p.mul_(0.5)
    cfg = ContrastiveConfig(width=8, embedding_dim=16)
    path = tmp_path / "ck.bin"
    save_checkpoint(state, cfg, path, extra={"note": 1})
    loaded, cfg2, extra = load_checkpoint(path)
    assert cfg2 == cfg and extra == {"note": 1}
    for name, t in state.query.state_dict().items():
        assert torch.equal(t, loaded.query.state_dict()[name])
    for name, t in state.key.state_dict().items():
        assert torch.equal(t, loaded.key.state_dict()[name])
    assert read_header(path)["encoder"] == SMALL.to_dict()


def test_truncated_checkpoint_is_rejected(tmp_path):
    path = tmp_path / "ck.bin"
    save_checkpoint(EncoderState.create(SMALL, seed=0), None, path)
    data = path.read_bytes()
    for cut in (4, 20, len(data) - 10):
        path.write_bytes(data[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


def test_checkpoint_version_mismatch(tmp_path):
    path = tmp_path / "ck.bin"
    save_checkpoint(EncoderState.create(SMALL, seed=0), None, path)
    data = bytearray(path.read_bytes())
    data[8:12] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
