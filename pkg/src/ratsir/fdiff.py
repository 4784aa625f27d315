"""Central finite-difference gradient checking against autograd.

Used by the test suite to validate every loss and the end-to-end tiny model.
Convention: relative error |a - fd| / max(|a|, |fd|) with an absolute floor;
when both the analytic and numeric values are below the floor the entry
counts as matching (central differences of near-zero gradients are pure
roundoff and a relative criterion is meaningless there).
"""

from __future__ import annotations

import torch


def central_difference(f, tensor: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Numeric gradient of scalar-valued f with respect to `tensor` (in place
    perturbation, restored afterwards)."""
    grad = torch.zeros_like(tensor)
    flat = tensor.reshape(-1)
    gflat = grad.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            hi = float(f())
            flat[i] = orig - h
            lo = float(f())
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def max_relative_error(analytic: torch.Tensor, numeric: torch.Tensor,
                       floor: float = 1e-7) -> float:
    """Worst-case relative disagreement, ignoring entries where both gradients
    and their difference sit below `floor`."""
    a = analytic.reshape(-1)
    n = numeric.reshape(-1)
    diff = (a - n).abs()
    scale = torch.maximum(a.abs(), n.abs())
    ok_small = (scale < floor) & (diff < floor)
    rel = diff / scale.clamp_min(floor)
    rel = torch.where(ok_small, torch.zeros_like(rel), rel)
    return float(rel.max()) if rel.numel() else 0.0


def check_input_gradients(fn, inputs: dict[str, torch.Tensor], h: float = 1e-5,
                          floor: float = 1e-7) -> dict[str, float]:
    """fn(**inputs) must return a scalar tensor; inputs marked requires_grad
    are checked. Returns max relative error per input name."""
    for v in inputs.values():
        if v.grad is not None:
            v.grad = None
    out = fn(**inputs)
    out.backward()
    report = {}
    for name, v in inputs.items():
        if not v.requires_grad:
            continue
        numeric = central_difference(lambda: fn(**inputs), v.detach(), h)
        analytic = v.grad if v.grad is not None else torch.zeros_like(v)
        report[name] = max_relative_error(analytic, numeric, floor)
    return report


def check_parameter_gradients(loss_fn, model: torch.nn.Module, h: float = 1e-5,
                              floor: float = 1e-7) -> dict[str, float]:
    """loss_fn() must evaluate the model and return a scalar tensor; every
    parameter's autograd gradient is compared to central differences."""
    model.zero_grad(set_to_none=True)
    loss_fn().backward()
    report = {}
    for name, p in model.named_parameters():
        numeric = central_difference(loss_fn, p.data, h)
        grad = p.grad if p.grad is not None else torch.zeros_like(p)
        report[name] = max_relative_error(grad, numeric, floor)
    return report
