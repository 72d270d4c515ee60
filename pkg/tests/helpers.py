"""Shared test utilities: finite-difference gradient checks."""

import numpy as np

from bilasr import numcore as nc


def rel_err(a, b, floor=0.0):
    """Norm-relative error between two gradient arrays.

    ``floor`` bounds the denominator from below so that gradients which are
    zero by construction (e.g. attention key biases) compare absolutely.
    """
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def analytic_grads(loss_fn, tensors):
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with nc.Tape() as tape:
        loss = loss_fn()
        nc.backward(tape, loss)
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]


def numeric_grad(loss_fn, t, h=1e-5):
    """Central differences of the scalar ``loss_fn()`` w.r.t. every element of ``t``."""
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = float(loss_fn().data)
        flat[i] = old - h
        down = float(loss_fn().data)
        flat[i] = old
        g.reshape(-1)[i] = (up - down) / (2 * h)
    return g


def check_grads(loss_fn, tensors, h=1e-5):
    """Per-tensor relative errors between analytic and numeric gradients."""
    ana = analytic_grads(loss_fn, tensors)
    return [rel_err(a, numeric_grad(loss_fn, t, h)) for a, t in zip(ana, tensors)]


def random_frame_targets(model, rng, frames, batch=1):
    """Random but valid targets for every head of ``model``."""
    from bilasr.training import FrameTargets

    shape = (batch, frames)
    per = {loc: rng.integers(0, model.n_locale[loc], size=shape) for loc in model.config.locales}
    return FrameTargets(
        rng.integers(0, model.n_bilingual, size=shape), per, rng.integers(0, 3, size=shape),
        np.ones(shape, dtype=bool),
    )


def model_grad_errors(model, loss_fn, rng=None, coords=None, directions=3, h=1e-5, floor=1e-4):
    """Relative FD error of every parameter tensor's gradient.

    With ``coords=None`` every element is perturbed.  Otherwise ``coords``
    random elements plus ``directions`` random whole-tensor directions are
    checked per tensor, which covers large models in bounded time.
    """
    tensors = [t for _, t in model.store]
    model.store.set_trainable(())
    ana = analytic_grads(loss_fn, tensors)
    errs = {}
    for (name, t), g in zip(model.store, ana):
        if coords is None:
            errs[name] = rel_err(g, numeric_grad(loss_fn, t, h), floor)
            continue
        flat = t.data.reshape(-1)
        idx = rng.choice(flat.size, size=min(coords, flat.size), replace=False)
        num = []
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            up = float(loss_fn().data)
            flat[i] = old - h
            down = float(loss_fn().data)
            flat[i] = old
            num.append((up - down) / (2 * h))
        worst = rel_err(g.reshape(-1)[idx], num, floor)
        for _ in range(directions):
            d = rng.normal(size=t.data.shape)
            base = t.data.copy()
            t.data = base + h * d
            up = float(loss_fn().data)
            t.data = base - h * d
            down = float(loss_fn().data)
            t.data = base
            worst = max(worst, rel_err([(g * d).sum()], [(up - down) / (2 * h)], floor))
        errs[name] = worst
    return errs
