import numpy as np
import pytest

from spatialgrpo import nn
from spatialgrpo.flow import POLICY_INPUT_DIM, FlowPolicy
from spatialgrpo.scene import LATENT_DIM


def max_rel_err(analytic, numeric, floor=1e-3) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def tiny_policy(seed=0, hidden=(8,), n_steps=10, scale=1.0) -> FlowPolicy:
    p = nn.init_params(seed, nn.Architecture(POLICY_INPUT_DIM, hidden, LATENT_DIM))
    if scale != 1.0:
        p = p.with_flat(p.flat() * scale)
    return FlowPolicy(p, n_steps)


def zero_policy(n_steps=10) -> FlowPolicy:
    p = nn.init_params(0, nn.Architecture(POLICY_INPUT_DIM, (4,), LATENT_DIM))
    return FlowPolicy(p.zeros_like(), n_steps)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def oracle_plug(monkeypatch):
    """Patch the network so the ODE integrates straight to each condition's oracle latent.

    Call the returned function with the examples whose targets should be
    reachable; conditions are looked up by value. v = (x - x0) / t drives the
    Euler chain onto x0 exactly at the last step.
    """
    from spatialgrpo import flow
    from spatialgrpo.scene import apply_oracle_edit, encode_scene

    table = {}
    real = flow.velocity_with_tape

    def velocity(params, x, t, c):
        x = np.atleast_2d(x)
        c = np.broadcast_to(np.atleast_2d(c), (x.shape[0], np.atleast_2d(c).shape[1]))
        x0 = np.stack([table[row.tobytes()] for row in c])
        _, tape = real(params, x, t, c)
        return (x - x0) / np.reshape(t, (-1, 1)), tape

    def install(examples):
        for ex in examples:
            table[ex.condition().tobytes()] = encode_scene(apply_oracle_edit(ex.scene, ex.instruction))
        monkeypatch.setattr(flow, "velocity_with_tape", velocity)

    return install


# ------------------------------------------------------------ acceptance reporting

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
