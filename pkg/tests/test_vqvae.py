import time

import numpy as np
import pytest
import torch

from lsgs.datasets import ImageSample, synthesize_dataset
from lsgs.errors import DataError, ShapeError
from lsgs.vqvae import (
    VQVAE,
    Codebook,
    VqvaeArch,
    codebook_usage,
    decode,
    encode,
    nearest_code,
    quantize,
    quantize_map,
    reconstruction_loss,
    train_vqvae,
    vq_losses,
)
from oracles import brute_force_nearest


def codebook_from(rows):
    cb = Codebook(len(rows), len(rows[0]))
    cb.replace(torch.tensor(rows, dtype=torch.float32))
    return cb


def test_quantize_worked_examples():
    cb = codebook_from([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]])
    assert quantize(cb, [0.9, 0.1])[0] == 1
    assert quantize(cb, [0.1, 1.2])[0] == 2
    idx, row = quantize(cb, [0.5, 0.0])  # equidistant from rows 0 and 1
    assert idx == 0 and np.array_equal(row, [0.0, 0.0])


def test_quantizer_matches_brute_force():
    rng = np.random.default_rng(0)
    codes = rng.normal(size=(64, 16)).astype(np.float32)
    z = rng.normal(size=(1000, 16)).astype(np.float32)
    # exact duplicates force ties
    codes[40] = codes[7]
    z[:5] = codes[7]
    start = time.perf_counter()
    ours = nearest_code(torch.from_numpy(codes), torch.from_numpy(z)).numpy()
    assert time.perf_counter() - start < 10
    oracle = brute_force_nearest(z.astype(np.float64), codes.astype(np.float64))
    assert np.array_equal(ours, oracle)
    assert (ours[:5] == 7).all()


def test_quantize_rejects_bad_vectors():
    cb = codebook_from([[0.0, 0.0], [1.0, 0.0]])
    with pytest.raises(ShapeError):
        quantize(cb, [1.0, 2.0, 3.0])
    with pytest.raises(DataError):
        quantize(cb, [np.nan, 0.0])


def test_quantize_map_and_counters():
    cb = codebook_from([[0.0], [1.0], [5.0]])
    grid = quantize_map(cb, np.array([[[0.2], [0.9]], [[4.0], [0.6]]]), count=True)
    assert grid.tolist() == [[0, 1], [2, 1]]
    assert cb.usage_counts.tolist() == [1, 2, 1]
    quantize_map(cb, np.zeros((2, 2, 1)), count=False)
    assert cb.usage_counts.tolist() == [1, 2, 1]


@pytest.mark.parametrize("size, grid", [(128, 16), (64, 8)])
def test_encode_decode_shapes(size, grid):
    model = VQVAE(VqvaeArch(hidden_channels=16, n_res_blocks=1, embed_dim=8, n_codes=32), seed=0)
    z = encode(model, ImageSample("x", np.zeros((size, size, 1), np.float32)))
    assert z.shape == (grid, grid, 8)
    out = decode(model, np.zeros((grid, grid), dtype=np.int64))
    assert out.shape == (size, size, 1) and out.min() >= 0 and out.max() <= 1


def test_encode_and_decode_errors(tiny_vqvae):
    with pytest.raises(ShapeError):
        encode(tiny_vqvae, np.zeros((30, 32, 1), np.float32))
    with pytest.raises(DataError):
        decode(tiny_vqvae, np.full((4, 4), 16))


def test_vq_loss_single_cell_hand_value():
    z_e = torch.tensor([1.0, 0.0]).reshape(1, 2, 1, 1)
    e = torch.zeros(1, 2, 1, 1)
    x = torch.zeros(1, 1, 2, 2)
    l_rec, l_vq = vq_losses(x, x, z_e, e, commitment_weight=1.0)
    assert float(l_rec) == 0.0
    assert float(l_vq) == pytest.approx(2.0, abs=1e-6)


def test_vq_loss_is_twice_mean_squared_distance():
    rng = np.random.default_rng(1)
    z_e = torch.tensor(rng.normal(size=(3, 4, 2, 2)))
    e = torch.tensor(rng.normal(size=(3, 4, 2, 2)))
    x = torch.zeros(1)
    _, l_vq = vq_losses(x, x, z_e, e, 1.0)
    expected = 2 * ((z_e - e) ** 2).sum(1).mean()
    assert float(l_vq) == pytest.approx(float(expected), rel=1e-12)


def test_straight_through_gradient_is_copied_exactly():
    model = VQVAE(VqvaeArch(hidden_channels=16, n_res_blocks=1, embed_dim=4, n_codes=8), seed=3).eval()
    x = torch.rand(1, 1, 8, 8, generator=torch.Generator().manual_seed(0))
    out = model(x)
    assert out["z_e"].shape[-2:] == (1, 1)
    out["z_e"].retain_grad()
    out["z_q"].retain_grad()
    l_rec, _ = vq_losses(x, out["x_hat"], out["z_e"], out["e"])
    l_rec.backward()
    assert torch.equal(out["z_e"].grad, out["z_q"].grad)
    assert torch.allclose(out["z_q"].detach(), out["e"].detach(), atol=1e-6)


def test_commitment_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    z0 = rng.normal(size=(1, 5, 1, 1))
    e = torch.tensor(rng.normal(size=(1, 5, 1, 1)))
    x = torch.zeros(1, dtype=torch.float64)
    w = 0.7
    z = torch.tensor(z0, requires_grad=True)
    _, l_vq = vq_losses(x, x, z, e, w)
    l_vq.backward()
    grad = z.grad.numpy().ravel()

    def f(v):
        # weighted minus unweighted isolates the commitment term
        v = torch.tensor(v)
        return float(vq_losses(x, x, v, e, w)[1] - vq_losses(x, x, v, e, 0.0)[1])

    h = 1e-6
    for i in range(5):
        plus, minus = z0.copy(), z0.copy()
        plus.flat[i] += h
        minus.flat[i] -= h
        fd = (f(plus) - f(minus)) / (2 * h)
        assert abs(fd - grad[i]) <= 1e-4 * abs(fd) + 1e-9


def test_batch_result_matches_singletons(tiny_vqvae):
    x = torch.rand(3, 1, 32, 32, generator=torch.Generator().manual_seed(1))
    with torch.no_grad():
        full = tiny_vqvae(x, count=False)["indices"]
        single = torch.cat([tiny_vqvae(x[i : i + 1], count=False)["indices"] for i in range(3)])
    assert torch.equal(full, single)


def test_codebook_replace_changes_row_count():
    cb = Codebook(4, 3)
    cb.usage_counts += 5
    cb.replace(torch.ones(9, 3))
    assert cb.n_codes == 9 and cb.usage_counts.tolist() == [0] * 9


def test_training_reduces_reconstruction_loss():
    train, _ = synthesize_dataset(0, 32, 1)
    pixels = train.pixels()[:, ::2, ::2]
    model = VQVAE(VqvaeArch(hidden_channels=16, n_res_blocks=1, embed_dim=8, n_codes=16), seed=0)
    before = reconstruction_loss(model, pixels)
    history = train_vqvae(model, pixels, steps=200, batch_size=8, lr=1e-3, log_interval=50)
    assert [h.step for h in history] == [50, 100, 150, 200]
    assert reconstruction_loss(model, pixels) < before
    hist, eff = codebook_usage(model, pixels)
    assert hist.sum() == 32 * 4 * 4 and 1 <= eff <= 16
