import sys
import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_dft(x, inverse=False):
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    k = np.arange(n)
    sign = 1.0 if inverse else -1.0
    w = np.exp(sign * 2j * np.pi * np.outer(k, k) / n)
    out = x @ w.T
    return out / n if inverse else out


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-300))


def tape_grads(loss_fn, tensors):
    """Run ``loss_fn()`` on a fresh tape and return d loss / d tensor for each tensor."""
    from tmm import autodiff as ad

    for t in tensors:
        t.grad = None
    with ad.Tape():
        loss = loss_fn()
        ad.backward(loss)
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]


def fd_grad(loss_fn, tensor, h=1e-5, indices=None):
    """Central differences of the scalar ``loss_fn()`` w.r.t. entries of ``tensor.data``."""
    grad = np.zeros_like(tensor.data)
    idx_iter = np.ndindex(tensor.data.shape) if indices is None else indices
    for idx in idx_iter:
        old = tensor.data[idx]
        tensor.data[idx] = old + h
        up = float(loss_fn().data)
        tensor.data[idx] = old - h
        down = float(loss_fn().data)
        tensor.data[idx] = old
        grad[idx] = (up - down) / (2 * h)
    return grad


def grad_rel_err(got, ref, floor=1e-8):
    """Max |got - ref| over max(|ref|max, floor); the floor guards identically-zero gradients."""
    return float(np.abs(got - ref).max() / max(np.abs(ref).max(), floor))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None) if mod else None
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
