import numpy as np
import pytest
import torch
from hypothesis import settings

from mvsdiff.geometry import Camera
from mvsdiff.synthetic import SceneSpec, generate_scene

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


def random_rotation(rng, max_angle=np.pi):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    a = rng.uniform(-max_angle, max_angle)
    Kx = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(a) * Kx + (1 - np.cos(a)) * Kx @ Kx


def random_camera(rng, depth_range=(1.0, 10.0)):
    f = rng.uniform(50, 200)
    K = np.array([[f, 0, rng.uniform(20, 60)], [0, f * rng.uniform(0.9, 1.1), rng.uniform(20, 60)], [0, 0, 1]])
    return Camera(K, random_rotation(rng), rng.normal(size=3), depth_range)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def small_scene():
    return generate_scene(0, SceneSpec(height=32, width=48))


@pytest.fixture(scope="session")
def scene():
    return generate_scene(0)


def fd_relative_error(fn, inputs, eps=1e-6, seed=0):
    """Relative error between autograd and central finite-difference gradients.

    ``fn(*inputs)`` may return a tensor or a tuple of tensors; the scalar
    objective is a fixed random projection of all outputs. All float64.
    """
    g = torch.Generator().manual_seed(seed)
    inputs = [x.detach().clone().double().requires_grad_(True) for x in inputs]
    outs = fn(*inputs)
    outs = outs if isinstance(outs, (tuple, list)) else (outs,)
    proj = [torch.randn(o.shape, generator=g, dtype=torch.float64) for o in outs if o is not None]

    def objective(*xs):
        res = fn(*xs)
        res = res if isinstance(res, (tuple, list)) else (res,)
        return sum((o * p).sum() for o, p in zip([r for r in res if r is not None], proj))

    analytic = torch.autograd.grad(objective(*inputs), inputs, allow_unused=True)
    analytic = [torch.zeros_like(x) if a is None else a for x, a in zip(inputs, analytic)]
    num, den = 0.0, 0.0
    with torch.no_grad():
        for x, ga in zip(inputs, analytic):
            flat = x.view(-1)
            fd = torch.empty_like(flat)
            for i in range(flat.numel()):
                old = float(flat[i])
                flat[i] = old + eps
                fp = float(objective(*inputs))
                flat[i] = old - eps
                fm = float(objective(*inputs))
                flat[i] = old
                fd[i] = (fp - fm) / (2 * eps)
            num += float(((fd - ga.view(-1)) ** 2).sum())
            den += float((ga ** 2).sum())
    return (num / max(den, 1e-300)) ** 0.5


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record a one-line acceptance verdict; the summary prints them in order."""

    def record(num: int, passed: bool, detail: str) -> bool:
        _ACCEPTANCE[num] = f"criterion {num:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for num in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[num])
