"""Finite-difference gradient checking.

Central differences in float64 with a fixed probe pattern. This is the
independent route for verifying backward passes: it never touches autograd
internals beyond asking for the analytic gradient to compare against.
"""

import torch


def probe_weights(numel):
    """Fixed, aperiodic scalarization weights so checks are deterministic."""
    k = torch.arange(numel, dtype=torch.float64)
    return torch.cos(0.7 * k) + 0.3


def max_relative_error(analytic, numeric, eps=1e-6):
    """Elementwise |a - n| / max(|a|, eps), reduced with max."""
    a = torch.as_tensor(analytic, dtype=torch.float64)
    n = torch.as_tensor(numeric, dtype=torch.float64)
    if a.shape != n.shape:
        raise ValueError("gradient shapes differ")
    denom = torch.clamp(a.abs(), min=eps)
    return float(((a - n).abs() / denom).max())


def finite_difference_gradient(closure, tensor, step=1e-5):
    """Central-difference gradient of a scalar closure wrt one tensor.

    The closure takes no arguments and must read the tensor by reference;
    entries are twiddled in place and restored.
    """
    grad = torch.zeros_like(tensor, dtype=torch.float64)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            hi = float(closure())
            flat[i] = orig - step
            lo = float(closure())
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def check_function_gradients(closure, tensors, step=1e-5, eps=1e-6):
    """Max relative error between autograd and finite differences.

    closure computes a scalar from the given float64 leaf tensors. Gradients
    are compared per tensor; the worst relative error wins.
    """
    for t in tensors:
        if t.dtype != torch.float64:
            raise ValueError("gradient checks must run in float64")
    out = closure()
    analytic = torch.autograd.grad(out, tensors, allow_unused=False)
    worst = 0.0
    for t, a in zip(tensors, analytic):
        n = finite_difference_gradient(closure, t, step=step)
        worst = max(worst, max_relative_error(a, n, eps=eps))
    return worst
