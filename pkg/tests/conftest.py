import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def _gradient_error(params: dict, torch_loss, numpy_loss, h: float = 1e-6) -> float:
    """Max relative error between autograd and central differences over all parameters."""
    from probe.numeric import finite_diff_gradient
    from probe.training import flatten, to_torch, unflatten
    tp = to_torch(params)
    loss = torch_loss(tp)
    loss.backward()
    analytic = np.concatenate([tp[k].grad.numpy().reshape(-1) for k in params])
    fd = finite_diff_gradient(lambda v: numpy_loss(unflatten(v, params)), flatten(params), h)
    return float(np.max(np.abs(analytic - fd)) / max(1.0, float(np.max(np.abs(fd)))))


@pytest.fixture
def gradient_error():
    return _gradient_error


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
