"""Finite-difference oracle shared by the model tests and the acceptance suite."""
import copy

import numpy as np
import torch

from flexicl.model import reconstruction_loss


def finite_difference_check(model, x, m, n_params=24, seed=0, eps=1e-4):
    """Compare float32 autograd gradients against float64 central differences.

    Returns a list of (name, index, analytic, numeric).
    """
    cfg = model.config
    model.zero_grad()
    reconstruction_loss(model(x, m), x, m, cfg).backward()
    ref = copy.deepcopy(model).double()
    xd = x.double()
    params = dict(ref.named_parameters())
    live = dict(model.named_parameters())
    rng = np.random.default_rng(seed)
    names = sorted(params)
    picks = [("mask_token", int(rng.integers(cfg.embed_dim))) for _ in range(4)]
    while len(picks) < n_params:
        name = names[rng.integers(len(names))]
        picks.append((name, int(rng.integers(params[name].numel()))))
    out = []
    with torch.no_grad():
        for name, idx in picks:
            flat = params[name].view(-1)
            orig = flat[idx].item()
            h = eps * max(1.0, abs(orig))
            flat[idx] = orig + h
            up = reconstruction_loss(ref(xd, m), xd, m, cfg).item()
            flat[idx] = orig - h
            down = reconstruction_loss(ref(xd, m), xd, m, cfg).item()
            flat[idx] = orig
            out.append((name, idx, live[name].grad.view(-1)[idx].item(), (up - down) / (2 * h)))
    return out
