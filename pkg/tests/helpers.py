"""Shared oracles for the GNN checks."""
import numpy as np
import torch

from irsgnn.gnn import GnnConfig, IrsGnn, channel_tensors, gradient, loss


def small_model(M=2, N=4, tau=3, P=2.0, width=16, seed=0, dtype=torch.float64, depth=2, use_locations=False):
    torch.manual_seed(seed)
    cfg = GnnConfig(depth=depth, init_hidden=2 * width, width=width, use_locations=use_locations)
    return IrsGnn(cfg, M, N, tau, P).to(dtype)


def random_features(rng, B, K, M, tau, extra=0):
    return rng.standard_normal((B, K, 2 * M * tau + extra))


def random_chan(rng, B, K, M, N, noise=1.0):
    h_d = rng.standard_normal((B, K, M)) + 1j * rng.standard_normal((B, K, M))
    A = rng.standard_normal((B, K, M, N)) + 1j * rng.standard_normal((B, K, M, N))
    return channel_tensors(h_d, A, noise)


def permutation_deviation(model, x: np.ndarray, perm) -> float:
    """Max deviation from invariance of v and equivariance of W under a user permutation."""
    with torch.no_grad():
        v_re, v_im, W_re, W_im = model(torch.as_tensor(x))
        p = model(torch.as_tensor(x[:, perm]))
    dev = [
        (p[0] - v_re).abs().max(), (p[1] - v_im).abs().max(),
        (p[2] - W_re[..., perm]).abs().max(), (p[3] - W_im[..., perm]).abs().max(),
    ]
    return float(max(dev))


def _central(model, p, idx, x, chan, kind, step):
    with torch.no_grad():
        orig = p[idx].item()
        p[idx] = orig + step
        up = loss(model, x, chan, kind).item()
        p[idx] = orig - step
        down = loss(model, x, chan, kind).item()
        p[idx] = orig
    return (up - down) / (2 * step)


def _rel(a, b):
    scale = max(abs(a), abs(b))
    return 0.0 if scale < 1e-10 else abs(a - b) / scale


def finite_difference_errors(model, x, chan, n_params, rng, step=1e-4, kind="sum", max_draws=None):
    """Relative errors between autograd and central differences on randomly
    chosen scalar parameters (float64 model).

    A stencil that straddles a ReLU kink (or a max-pooling switch) is detected
    by halving the step: on a smooth stretch both differences agree to
    O(step^2).  Such draws are replaced by fresh ones; the number skipped is
    returned alongside the errors.
    """
    grads = gradient(model, x, chan, kind)
    named = dict(model.named_parameters())
    names = list(named)
    errors, skipped = [], 0
    max_draws = max_draws or 4 * n_params
    while len(errors) < n_params and len(errors) + skipped < max_draws:
        name = names[rng.integers(len(names))]
        p = named[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        fd = _central(model, p, idx, x, chan, kind, step)
        if _rel(fd, _central(model, p, idx, x, chan, kind, step / 2)) > 1e-5:
            skipped += 1
            continue
        errors.append(_rel(fd, grads[name][idx].item()))
    return np.array(errors), skipped
