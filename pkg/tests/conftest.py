import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_cfg(**overrides):
    """Toy-width network used wherever a full model is needed quickly."""
    from freqact.policy import NetConfig

    base = dict(obs_dim=6, action_dim=2, horizon=8, obs_steps=2, state_mlp_size=16,
                encoder_embed_dim=32, decoder_embed_dim=32, encoder_depth=2, decoder_depth=2,
                encoder_num_heads=4, decoder_num_heads=4, mlp_ratio=2.0, diffloss_d=2, diffloss_w=32,
                diffusion_steps=100)
    base.update(overrides)
    return NetConfig(**base)


def jitter_params(model, seed=7, std=0.05):
    """Perturb every parameter so zero-initialised layers carry gradient signal."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * std)
    return model


def pytest_terminal_summary(terminalreporter):
    """Print the one-line verdict recorded by each acceptance criterion."""
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if getattr(rep, "when", "call") != "call":
                continue
            lines += [value for name, value in getattr(rep, "user_properties", ()) if name == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
