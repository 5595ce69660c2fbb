import itertools

import numpy as np
import pytest
import torch

from lsgs.aggregation import (
    EncodingCorpus,
    aggregate_codebook,
    choose_k,
    extract_encodings,
    finetune,
    kmeans,
)
from lsgs.config import make_config
from lsgs.datasets import DatasetManifest, ImageSample
from lsgs.errors import ConfigError, DataError
from lsgs.vqvae import encode, image_codes, quantize_map, reconstruction_loss


def partition_cost(x, labels, k):
    return sum(((x[labels == j] - x[labels == j].mean(0)) ** 2).sum() for j in range(k) if (labels == j).any())


def exhaustive_best_cost(x, k):
    """Lowest within-cluster sum of squares over every labelling of x."""
    best = np.inf
    for labels in itertools.product(range(k), repeat=len(x)):
        labels = np.array(labels)
        if len(set(labels)) == k:
            best = min(best, partition_cost(x, labels, k))
    return best


def inertia(x, centers):
    d = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
    return d.min(1).sum()


@pytest.fixture
def manifest():
    rng = np.random.default_rng(0)
    return DatasetManifest("train", [ImageSample(f"s{i}", rng.random((32, 32, 1)).astype(np.float32)) for i in range(5)])


def test_corpus_counts_and_sources(tiny_vqvae, manifest):
    corpus = extract_encodings(tiny_vqvae, manifest)
    assert corpus.vectors.shape == (5 * 16, 8)
    assert corpus.sources[0] == ("s0", 0, 0) and corpus.sources[-1] == ("s4", 3, 3)
    z = encode(tiny_vqvae, manifest.samples[2])
    assert np.allclose(corpus.vectors[2 * 16 + 5], z[1, 1], atol=1e-6)


def test_corpus_cap_is_deterministic(tiny_vqvae, manifest):
    a = extract_encodings(tiny_vqvae, manifest, subsample_cap=30, seed=1)
    b = extract_encodings(tiny_vqvae, manifest, subsample_cap=30, seed=1)
    assert len(a) == 30 and np.array_equal(a.vectors, b.vectors) and a.sources == b.sources
    full = extract_encodings(tiny_vqvae, manifest)
    lookup = {src: vec for src, vec in zip(full.sources, full.vectors)}
    assert all(np.array_equal(lookup[s], v) for s, v in zip(a.sources, a.vectors))


def test_corpus_round_trip(tmp_path, tiny_vqvae, manifest):
    corpus = extract_encodings(tiny_vqvae, manifest, subsample_cap=20)
    corpus.save(tmp_path / "corpus")
    back = EncodingCorpus.load(tmp_path / "corpus")
    assert np.array_equal(back.vectors, corpus.vectors) and back.sources == corpus.sources
    (tmp_path / "corpus.txt").write_text("# other v1 1 1\n")
    with pytest.raises(DataError):
        EncodingCorpus.load(tmp_path / "corpus")


def test_kmeans_two_points_and_single_cluster():
    x = np.array([[0.0, 0.0], [2.0, 2.0]])
    centers = kmeans(x, 2)
    assert sorted(map(tuple, centers)) == [(0.0, 0.0), (2.0, 2.0)]
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(50, 3))
    assert np.allclose(kmeans(pts, 1), pts.mean(0, keepdims=True))


def test_kmeans_reaches_exhaustive_optimum():
    rng = np.random.default_rng(1)
    for _ in range(5):
        x = rng.normal(size=(8, 2))
        centers = kmeans(x, 3, seed=0, restarts=10)
        assert inertia(x, centers) == pytest.approx(exhaustive_best_cost(x, 3), rel=1e-9)


def test_kmeans_centres_inside_bounding_box_and_deterministic():
    rng = np.random.default_rng(2)
    x = rng.uniform(-3, 5, size=(300, 4))
    c = kmeans(x, 12, seed=4)
    assert c.shape == (12, 4)
    assert (c >= x.min(0) - 1e-12).all() and (c <= x.max(0) + 1e-12).all()
    assert np.array_equal(c, kmeans(x, 12, seed=4))


def test_kmeans_with_duplicate_points_fills_every_cluster():
    x = np.repeat(np.eye(3), 10, axis=0)
    c = kmeans(x, 3, seed=0)
    assert sorted(map(tuple, c)) == sorted(map(tuple, np.eye(3)))


def test_kmeans_rejects_k_above_corpus():
    with pytest.raises(ConfigError):
        kmeans(np.zeros((3, 2)), 4)
    with pytest.raises(ConfigError):
        kmeans(np.zeros((3, 2)), 0)


def test_aggregate_codebook_installs_centres(tiny_vqvae, manifest):
    centers = np.random.default_rng(3).normal(size=(40, 8)).astype(np.float32)
    new = aggregate_codebook(tiny_vqvae, centers)
    assert new.codebook.n_codes == 40 and new.arch.n_codes == 40
    assert np.array_equal(new.codebook.embeddings.detach().numpy(), centers)
    assert new.codebook.usage_counts.sum() == 0
    assert tiny_vqvae.codebook.n_codes == 16
    # the encoder and decoder are untouched
    img = manifest.samples[0]
    assert np.array_equal(encode(new, img), encode(tiny_vqvae, img))
    z = torch.randn(1, 8, 4, 4, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        assert torch.equal(new.decode(z), tiny_vqvae.decode(z))


def test_aggregate_with_identity_centres_is_a_no_op(tiny_vqvae, manifest):
    same = aggregate_codebook(tiny_vqvae, tiny_vqvae.codebook.embeddings.detach().numpy())
    assert np.array_equal(image_codes(same, manifest.pixels()), image_codes(tiny_vqvae, manifest.pixels()))


def test_aggregate_large_codebook(tiny_vqvae):
    centers = np.random.default_rng(4).normal(size=(4096, 8)).astype(np.float32)
    new = aggregate_codebook(tiny_vqvae, centers)
    z = np.random.default_rng(5).normal(size=(4, 4, 8)).astype(np.float32)
    grid = quantize_map(new.codebook, z)
    brute = ((z[:, :, None, :].astype(np.float64) - centers.astype(np.float64)) ** 2).sum(-1).argmin(-1)
    assert np.array_equal(grid, brute)


def test_aggregate_rejects_wrong_dimension(tiny_vqvae):
    with pytest.raises(ConfigError):
        aggregate_codebook(tiny_vqvae, np.zeros((4, 3)))


def test_finetune_zero_steps_keeps_weights(tiny_vqvae, manifest):
    before = {k: v.clone() for k, v in tiny_vqvae.state_dict().items()}
    model, loss, history = finetune(tiny_vqvae, manifest, 0)
    assert history == [] and loss == pytest.approx(reconstruction_loss(tiny_vqvae, manifest))
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())


def test_choose_k():
    cfg = make_config(agg_k_cap=50)
    assert choose_k(10, cfg) == 20
    assert choose_k(40, cfg) == 50
    assert choose_k(40, cfg.replace(agg_k=7)) == 7
