import numpy as np
import pytest
import torch

from lsgs.config import make_config
from lsgs.prior import PriorModel
from lsgs.vqvae import VQVAE, VqvaeArch


@pytest.fixture
def tiny_config():
    return make_config(
        resolution=(32, 32), hidden_channels=16, embed_dim=8, n_codes=16, prior_dim=16, prior_layers=1,
        prior_heads=2, n_restorations=4, vqvae_steps=4, prior_epochs=1, batch_size=4, log_interval=2,
    )


@pytest.fixture
def tiny_vqvae():
    return VQVAE(VqvaeArch(in_channels=1, hidden_channels=16, n_res_blocks=1, embed_dim=8, n_codes=16), seed=0).eval()


def identity_prior(n_codes: int, length: int) -> PriorModel:
    """A prior whose argmax at every position is the input token there."""
    model = PriorModel(n_codes, length, dim=n_codes, layers=1, heads=1)
    with torch.no_grad():
        for p in model.blocks.parameters():
            p.zero_()
        for block in model.blocks.layers:
            block.norm1.weight.fill_(1.0)
            block.norm2.weight.fill_(1.0)
        model.tok_emb.weight.copy_(torch.eye(n_codes))
        model.pos_emb.zero_()
        model.head.weight.copy_(10 * torch.eye(n_codes))
        model.head.bias.zero_()
    return model.eval()


@pytest.fixture
def make_identity_prior():
    return identity_prior


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
