"""Numerical self-checks shared by the CLI and the test suite.

Random tiny models, a central-difference gradient check, and the
recurrent-vs-unrolled equivalence check.
"""

from __future__ import annotations

import numpy as np

from .model import HiddenInit, ModelConfig, forward, init_params, unroll_kernel
from .train import Batch, backward, batch_loss


def random_tiny_model(rng, max_layers=3, delta_bias_init=None):
    """A small model with non-trivial skip and bias parameters."""
    d = int(rng.integers(2, 7))
    cfg = ModelConfig(
        vocab_size=int(rng.integers(4, 13)),
        d_model=d,
        n_state=int(rng.integers(1, 5)),
        n_layers=int(rng.integers(1, max_layers + 1)),
        delta_rank=int(rng.integers(1, min(d, 3) + 1)),
        seed=int(rng.integers(0, 2**31)),
        delta_bias_init=delta_bias_init or str(rng.choice(["zero", "mamba"])),
    )
    params = init_params(cfg)
    for lp in params.layers:
        lp.d_skip[:] = rng.normal(size=cfg.d_model)
        lp.b_delta[:] = rng.normal(size=cfg.d_model)
    return params


def random_batch(rng, vocab_size, max_batch=3, max_len=10):
    B = int(rng.integers(1, max_batch + 1))
    T = int(rng.integers(2, max_len + 1))
    tokens = rng.integers(0, vocab_size, (B, T))
    targets = rng.integers(0, vocab_size, (B, T))
    mask = (rng.random((B, T)) < 0.5).astype(float)
    mask[0, -1] = 1.0
    return Batch(tokens, targets, mask)


def group_name(name):
    """``layers.1.w_B`` -> ``w_B``."""
    return name.rsplit(".", 1)[-1]


def gradcheck(params, batch, h=1e-5):
    """``{parameter name: relative error}`` of the analytic gradient against
    central differences. Relative error is ``max|fd - g| / max(max|fd|, 1e-12)``."""
    _, grads, _ = backward(params, batch)
    out = {}
    for (name, a), (_, g) in zip(params.named(), grads.named()):
        fd = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + h
            up = batch_loss(params, batch)
            a[idx] = orig - h
            down = batch_loss(params, batch)
            a[idx] = orig
            fd[idx] = (up - down) / (2 * h)
        out[name] = float(np.abs(fd - g).max() / max(np.abs(fd).max(), 1e-12))
    return out


def gradcheck_random(n_configs=10, seed=0, h=1e-5):
    """Worst relative error per parameter group over ``n_configs`` tiny models."""
    rng = np.random.default_rng(seed)
    worst = {}
    for _ in range(n_configs):
        params = random_tiny_model(rng)
        batch = random_batch(rng, params.config.vocab_size)
        for name, err in gradcheck(params, batch, h).items():
            g = group_name(name)
            worst[g] = max(worst.get(g, 0.0), err)
    return worst


def kernel_equivalence_error(params, tokens, init=None):
    """Largest ``|y_t - kernel reconstruction|`` over all layers, channels and t."""
    _, trace = forward(params, tokens, init, capture=True)
    worst = 0.0
    for li, lt in enumerate(trace.layers):
        for ch in range(lt.a_bar.shape[1]):
            for t in range(len(trace)):
                terms = unroll_kernel(trace, li, ch, t)
                worst = max(worst, abs(terms.reconstruct() - lt.y[t, ch]))
    return worst


def selftest(seed=0):
    """Yield ``(name, ok, detail)`` for a handful of fast oracle checks."""
    from . import kernels
    from .memlab import identify_ltm, memory_coefficients

    rng = np.random.default_rng(seed)

    worst = 0.0
    for _ in range(10):
        p = random_tiny_model(rng)
        toks = rng.integers(0, p.config.vocab_size, int(rng.integers(1, 12)))
        init = HiddenInit.uniform(int(rng.integers(0, p.config.n_layers)), 7) if rng.random() < 0.5 else None
        worst = max(worst, kernel_equivalence_error(p, toks, init))
    yield "scan == unrolled kernel", worst < 1e-8, f"max error {worst:.2e}"

    errs = gradcheck_random(2, seed)
    top = max(errs.values())
    yield "analytic gradient", top < 1e-4, f"max relative error {top:.2e}"

    p = random_tiny_model(rng)
    _, tr = forward(p, rng.integers(0, p.config.vocab_size, 11), capture=True)
    for lt in tr.layers:
        lt.a_bar[:] = 0.9
    m = memory_coefficients(tr, 11).values
    err = float(np.abs(m - 0.9**10).max())
    yield "constant-gate memory coefficient", err <= 1e-12, f"error {err:.1e}"

    empty = not identify_ltm([tr], 1.0, 0.0, 11).selected()
    yield "tau = 1 selects nothing", empty, "empty" if empty else "non-empty"

    yield "backend", True, kernels.BACKEND
