"""Central finite-difference checks shared by the test modules."""
import numpy as np
import torch


def pick_entries(params, count, rng, grads=None, floor=1e-7):
    """Random (tensor index, flat index) pairs, optionally restricted to
    entries whose analytic gradient is not negligible."""
    picks = []
    tries = 0
    while len(picks) < count and tries < 100 * count:
        tries += 1
        t = int(rng.integers(len(params)))
        j = int(rng.integers(params[t].numel()))
        if grads is not None and abs(float(grads[t].reshape(-1)[j])) < floor:
            continue
        if (t, j) not in picks:
            picks.append((t, j))
    return picks


def finite_difference_check(loss_fn, params, count, rng, h=1e-5):
    """Return relative errors between analytic and central-difference
    gradients of ``loss_fn()`` at ``count`` random entries of ``params``."""
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    errors = []
    with torch.no_grad():
        for t, j in pick_entries(params, count, rng, grads):
            flat = params[t].view(-1)
            orig = flat[j].item()
            flat[j] = orig + h
            up = loss_fn().item()
            flat[j] = orig - h
            down = loss_fn().item()
            flat[j] = orig
            num = (up - down) / (2 * h)
            ana = float(grads[t].reshape(-1)[j])
            errors.append(abs(num - ana) / max(abs(num), abs(ana), 1e-12))
    return np.array(errors)
