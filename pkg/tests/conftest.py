import numpy as np
import pytest

from supra.attention import preset
from supra.model import ModelConfig, init_model


def tiny_config(kind="supra", d_model=16, n_heads=2, n_layers=2, vocab=32, max_seq=32, **over):
    return ModelConfig(vocab=vocab, d_model=d_model, n_heads=n_heads, n_layers=n_layers, d_ff=2 * d_model,
                       attention=preset(kind, d_model, n_heads, **over), max_seq=max_seq)


def perturbed_model(kind="supra", seed=0, scale=0.1, **kw):
    """Random init plus noise so kernel MLPs and GroupNorm affines are away from identity."""
    m = init_model(tiny_config(kind, **kw), seed=seed)
    rng = np.random.default_rng(seed + 100)
    for p in m.params.values():
        p.data += rng.normal(0, scale, p.shape)
    return m


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def ablation():
    """The desk-scale ablation (about 8 minutes on one CPU core), shared by every test that needs it."""
    from supra.experiments import AblationSetup, run_ablation

    return run_ablation(AblationSetup())


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
