import time

import numpy as np
import pytest

from ecoprune.denoiser import DenoiserConfig, init_denoiser
from ecoprune.gates import gate_groups


def rel_err(a, b, floor=1e-5):
    """Elementwise |a - b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


TINY = DenoiserConfig(d_model=8, n_heads=2, d_ff=6, n_blocks=2, seq_len=3, n_conditions=3, T=4)


@pytest.fixture
def tiny_model():
    return init_denoiser(TINY, seed=3)


@pytest.fixture
def tiny_groups():
    return gate_groups(TINY.n_blocks, TINY.n_heads, TINY.d_ff)


def perturb(model, seed, scale=0.3):
    """Copy with nonzero biases and layer-norm params so no term is trivially zero."""
    rng = np.random.default_rng(seed)
    m = model.copy()
    for k, v in m.params.items():
        if k.endswith((".b1", ".b2", "ln1.b", "ln2.b", "time.b")):
            m.params[k] = v + scale * rng.standard_normal(v.shape)
        elif k.endswith((".g",)):
            m.params[k] = v + 0.2 * rng.standard_normal(v.shape)
    return m


ROOT = __import__("pathlib").Path(__file__).resolve().parents[1]
TOY_CONFIG = ROOT / "configs" / "toy.cfg"
EXPERIMENT_SEEDS = range(5)


@pytest.fixture(scope="session")
def toy_config():
    from ecoprune.harness.config import load_config
    return load_config(TOY_CONFIG)


@pytest.fixture(scope="session")
def trained_bases(toy_config):
    """seed -> (model, per-step loss rows) for the toy config, trained once per session."""
    from ecoprune.harness.experiments import train_base
    start = time.perf_counter()
    out = {s: train_base(toy_config.with_seed(s)) for s in EXPERIMENT_SEEDS}
    TIMINGS["base_training"] = time.perf_counter() - start
    return out


# wall-clock seconds of session-wide work, read by the acceptance suite
TIMINGS: dict = {}


# criterion id -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict = {}


def record_acceptance(cid: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[cid] = (bool(passed), detail)
    print(f"[{'PASS' if passed else 'FAIL'}] criterion {cid}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE, key=lambda c: (int(c.split(".")[0].rstrip("abc")), c)):
        passed, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {cid}: {detail}")
