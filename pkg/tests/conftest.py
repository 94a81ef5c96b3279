import numpy as np
import pytest

from evosteer.diffusion import TrainConfig, make_schedule, train_policy
from evosteer.envsim import make_env
from evosteer.numerics import RngStream

_ACCEPTANCE: list[tuple[int, bool, str]] = []


def _trained(kind: str, seed: int = 0, steps: int = 4000):
    env = make_env(kind, seed=seed)
    demos = env.demos(4000, RngStream(seed, 0xDE70))
    model, loss = train_policy(demos, TrainConfig(steps=steps, seed=seed), make_schedule())
    return env, model, loss


@pytest.fixture(scope="session")
def two_goal():
    """(env, model, final loss) for the default two_goal policy."""
    return _trained("two_goal")


@pytest.fixture(scope="session")
def ring():
    return _trained("ring_goals")


@pytest.fixture(scope="session")
def narrow():
    return _trained("narrow_gap")


@pytest.fixture(scope="session")
def point_policy():
    """Policy trained on demos that all equal one action."""
    env = make_env("two_goal")
    ctxs, acts = env.demos(2000, RngStream(3))
    a_star = np.array([0.4, -0.3])
    acts = np.tile(a_star, (len(acts), 1))
    model, _ = train_policy((ctxs, acts), TrainConfig(steps=3000, seed=3), make_schedule())
    return env, model, a_star


@pytest.fixture
def acceptance():
    """Record one acceptance line; printed again in the terminal summary."""

    def record(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(line)
        _ACCEPTANCE.append((number, passed, detail))

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
