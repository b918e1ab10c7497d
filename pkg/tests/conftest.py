import numpy as np
import pytest

from idadapt import config as config_mod
from idadapt import diffusion as dfu
from idadapt import numerics as nm

TINY = config_mod.Config(
    d=16, n_blocks=2, d_t=8, c1=4, perceiver_depth=1, n_face_tokens=32,
    height=8, width=8, frames=2, T=20, batch_image=2, batch_video=2,
    n_ids=6, per_id=2, base_steps=0, stage1_steps=3, stage2_steps=3,
)


def as_float64(params):
    return {k: v.astype(np.float64) for k, v in params.items()}


def jitter(params, seed, rel=0.5, floor=0.05):
    """Every tensor moved off its initial value; zero tensors get ``floor``-sized noise."""
    rng = np.random.default_rng(seed)
    out = {}
    for k, v in params.items():
        rms = float(np.sqrt(np.mean(v.astype(np.float64) ** 2)))
        out[k] = (v + (rel * rms if rms > 0 else floor) * rng.standard_normal(v.shape)).astype(v.dtype)
    return out


@pytest.fixture(scope="session")
def tiny_cfg():
    return TINY


@pytest.fixture(scope="session")
def tiny_model():
    return dfu.Model.create(TINY, nm.RngState(123))


@pytest.fixture(scope="session")
def ref_model():
    return dfu.Model.create(config_mod.Config(), nm.RngState(0))


# -- acceptance verdicts -------------------------------------------------------

VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[VERDICTS] = {}


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for a criterion; printed in the terminal summary."""
    store = request.config.stash[VERDICTS]

    def record(criterion, ok, detail):
        line = f"criterion {criterion:<3} {'PASS' if ok else 'FAIL'}  {detail}"
        store[criterion] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(VERDICTS, {})
    if store:
        terminalreporter.section("acceptance criteria")
        for key in sorted(store):
            terminalreporter.write_line(store[key])
