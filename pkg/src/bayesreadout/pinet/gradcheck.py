"""Central finite-difference check of the hand-written backward pass."""

from __future__ import annotations

import numpy as np

from .model import ArchitectureSpec, init_weights, loss_and_grad
from .training import TrainingRanges, fit_standardization, generate_training_set


def check_gradients(
    architecture: ArchitectureSpec | None = None,
    n_params: int = 100,
    seed: int = 0,
    h: float = 1e-3,
    tasks: int = 8,
    noise: float = 0.3,
    ranges: TrainingRanges | None = None,
) -> dict:
    """Compare analytic and finite-difference gradients at 64-bit precision.

    Parameters are the default initialization plus Gaussian noise (so that no
    layer sits at an exactly-zero gradient); weight matrices get noise of
    standard deviation ``noise / sqrt(fan_in)``, biases ``noise``.
    ``n_params`` entries are drawn across all tensors, at least one from each.

    Tasks default to small ``N``. Logits scale with ``N``, so large-``N``
    tasks at random weights have losses in the thousands, and central
    differences of such a loss lose every digit on gradient entries near
    zero. Small ``N`` keeps the loss O(10) while exercising the same code.
    The difference quotient is the fourth-order central stencil, whose
    truncation error at ``h = 1e-3`` is far below the roundoff of the
    second-order quotient at the step it would need.
    Returns ``{"max_rel_error", "per_tensor", "checked"}``.
    """
    arch = architecture or ArchitectureSpec(encoder_widths=(1, 8, 6), head_widths=(11, 9, 7, 21))
    rng = np.random.default_rng(seed)
    ranges = ranges or TrainingRanges(N=(5, 20))
    data = generate_training_set(ranges, size=tasks, seed=seed, L=arch.L)
    weights = init_weights(arch, seed=seed, standardization=fit_standardization(data))
    # matrices are perturbed on the scale of their initialization, 1/sqrt(fan_in)
    params = {
        k: v + rng.normal(0.0, noise / np.sqrt(v.shape[0]) if v.ndim == 2 else noise, size=v.shape)
        for k, v in weights.tensors.items()
    }
    batch = data.batch(np.arange(tasks), weights.standardization)
    _, grads = loss_and_grad(params, arch, batch)

    names = sorted(params)
    picks = list(names) + list(rng.choice(names, size=max(n_params - len(names), 0)))
    per_tensor = {k: 0.0 for k in names}
    for name in picks:
        p = params[name]
        idx = tuple(int(rng.integers(0, d)) for d in p.shape)
        orig = p[idx]
        vals = []
        for step in (2 * h, h, -h, -2 * h):
            p[idx] = orig + step
            vals.append(loss_and_grad(params, arch, batch)[0])
        p[idx] = orig
        fd = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12.0 * h)
        an = float(grads[name][idx])
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
        per_tensor[name] = max(per_tensor[name], rel)
    return {"max_rel_error": max(per_tensor.values()), "per_tensor": per_tensor, "checked": len(picks)}
