import json
from pathlib import Path

import numpy as np
import pytest
import torch

from saco.core import build_vocab
from saco.data import SyntheticSpec, generate_synthetic, load_dataset
from saco.model import ModelConfig, build_model

DATA_DIR = Path(__file__).parent / "data"

torch.set_num_threads(1)

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def metric_fixture():
    return json.loads((DATA_DIR / "metric_fixture.json").read_text())


@pytest.fixture(scope="session")
def metric_golden():
    return json.loads((DATA_DIR / "metric_golden.json").read_text())


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    generate_synthetic(SyntheticSpec(seed=7), out)
    return out


@pytest.fixture(scope="session")
def synth(synth_dir):
    """(manifest, vocab, items) of the 32-image, 3-style synthetic set."""
    return load_dataset(synth_dir / "manifest.json")


@pytest.fixture
def vocab():
    return build_vocab(["a dog runs", "a cat sits on a mat", "the bird sings"])


def probe_model(vocab_size=12, n_styles=3, m=4, d_raw=10, d=8, d_h=8, seed=0, **kw):
    """Small float64 model for exact-arithmetic and finite-difference checks."""
    cfg = ModelConfig(vocab_size=vocab_size, n_styles=n_styles, n_regions=m, d_raw=d_raw, d=d, d_h=d_h,
                      enc_layers=2, enc_heads=2, dec_layers=2, dec_heads=2, seed=seed, **kw)
    return build_model(cfg).double()


def fd_relative_error(loss_fn, params, eps=1e-6, max_coords=40, seed=0):
    """Relative error between autograd and central finite differences.

    Checks up to ``max_coords`` random coordinates of every tensor in ``params``.
    """
    rng = np.random.default_rng(seed)
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    analytic, numeric = [], []
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            coords = rng.choice(flat.numel(), size=min(max_coords, flat.numel()), replace=False)
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                numeric.append((up - down) / (2 * eps))
                analytic.append(g.view(-1)[i].item())
    a, n = np.array(analytic), np.array(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale)
