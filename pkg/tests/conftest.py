import numpy as np
import pytest
import torch

from osmp.encoder import DTYPE, Encoder, EncoderConfig
from osmp.policy import Policy

# (number, name, passed, detail) rows filled by the acceptance module
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number}. {name}: {detail}")


def randomize(module: torch.nn.Module, seed: int = 0, std: float = 0.1):
    """Overwrite every trained parameter with N(0, std^2) draws."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            if p.requires_grad:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=DTYPE) * std)
    return module


def random_encoder(n=2, n_blocks=2, conditioning=False, seed=0, std=0.1, **kw) -> Encoder:
    cfg = EncoderConfig(n=n, n_blocks=n_blocks, conditioning=conditioning, **kw)
    return randomize(Encoder(cfg, seed=seed), seed + 100, std)


def identity_policy(n=2, **kw) -> Policy:
    return Policy(Encoder(EncoderConfig(n=n, n_blocks=2)), **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
