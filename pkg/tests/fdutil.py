"""Finite-difference gradient oracle shared by the gradient test suites.

The numerical side only ever calls the forward computation (central
differences, step 1e-5), so it is independent of autograd's backward pass.
"""

import torch

FD_EPS = 1e-5
FD_TOL = 1e-4


def finite_difference_gradient(fn, x: torch.Tensor, eps: float = FD_EPS) -> torch.Tensor:
    """Central-difference gradient of the scalar fn() w.r.t. every entry of x.

    fn must re-read x on each call; x is perturbed in place and restored.
    """
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        fp = fn()
        flat[i] = orig - eps
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / denom


def assert_gradient_matches(fn, x: torch.Tensor, tol: float = FD_TOL,
                            eps: float = FD_EPS) -> float:
    """Check autograd's gradient of fn() w.r.t. x against finite differences.

    fn() must return a scalar tensor built from x. Returns the relative error.
    """
    assert x.dtype == torch.float64, "finite-difference checks need float64"
    x.requires_grad_(True)
    x.grad = None
    fn().backward()
    analytic = x.grad.detach().clone()
    x.requires_grad_(False)
    with torch.no_grad():
        numeric = finite_difference_gradient(lambda: fn().item(), x, eps)
    err = relative_error(analytic, numeric)
    assert err <= tol, f"gradient mismatch: rel err {err:.3e} > {tol:.0e}"
    return err
