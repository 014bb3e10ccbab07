"""Variational sigmoid output layer with soft-threshold-dynamics smoothing.

The layer replaces the network's final sigmoid with the minimizer of

    -<u, x> + eps <x, ln x> + eps <1-x, ln(1-x)>
    + lambda1 <x, k_sigma * (1-x)> + lambda2 (1-c) <1, x>

over x in [0,1]^N, where u is the pre-activation logits field, k_sigma a
normalized Gaussian, and c the classifier's nodule probability. The smoothing
term approximates boundary length; the (1-c) prior shrinks predicted area
when the classifier is unconfident. The problem is solved by a fixed number
of fixed-point steps (the concave smoothing term is linearized each step and
the remaining convex problem solved in closed sigmoid form), unrolled so
gradients flow to u, eps, lambda2 and sigma. c is treated as a constant.

All functions accept float or 0-dim tensor parameters and follow the dtype
of u, so they run in float64 for verification and float32 in training.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

def _fval(v: "float | Tensor") -> float:
    if isinstance(v, Tensor):
        return float(v.detach())
    return float(v)


@dataclass
class STDParams:
    """Parameter bundle for the variational output layer.

    lambda1 weights the Gaussian smoothing term and stays fixed; lambda2
    (area prior) and sigma (kernel width in pixels) are learnable in the
    layer, as is eps unless disabled. kernel_radius defaults to ceil(3*sigma)
    at construction and stays fixed so the unrolled graph is static.
    use_printed_update switches the fixed-point numerator from u to the
    previous iterate (compatibility ablation; not a descent scheme).
    """

    eps: float | Tensor = 1.0
    lambda1: float | Tensor = 1.0
    lambda2: float | Tensor = 0.1
    sigma: float | Tensor = 1.5
    iters: int = 10
    kernel_radius: int | None = None
    learn_eps: bool = True
    learn_lambda2: bool = True
    learn_sigma: bool = True
    use_printed_update: bool = False

    def validate(self) -> None:
        if _fval(self.eps) <= 0:
            raise ValueError(f"eps must be > 0, got {_fval(self.eps)}")
        if _fval(self.sigma) <= 0:
            raise ValueError(f"sigma must be > 0, got {_fval(self.sigma)}")
        if _fval(self.lambda1) < 0 or _fval(self.lambda2) < 0:
            raise ValueError("lambda1 and lambda2 must be >= 0")
        if self.iters < 1:
            raise ValueError(f"iters must be >= 1, got {self.iters}")
        if self.kernel_radius is not None and self.kernel_radius < 1:
            raise ValueError(f"kernel_radius must be >= 1, got {self.kernel_radius}")

    def resolved_radius(self) -> int:
        if self.kernel_radius is not None:
            return self.kernel_radius
        return max(1, math.ceil(3.0 * _fval(self.sigma)))


def gaussian_kernel(
    sigma: float | Tensor,
    radius: int,
    dtype: torch.dtype | None = None,
    device: torch.device | None = None,
) -> Tensor:
    """(2r+1)x(2r+1) Gaussian stencil normalized to sum 1, differentiable in sigma."""
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    if _fval(sigma) <= 0:
        raise ValueError(f"sigma must be > 0, got {_fval(sigma)}")
    if isinstance(sigma, Tensor):
        dtype = dtype or sigma.dtype
        device = device or sigma.device
    else:
        dtype = dtype or torch.get_default_dtype()
        sigma = torch.as_tensor(sigma, dtype=dtype, device=device)
    sigma = sigma.to(dtype=dtype)
    coords = torch.arange(-radius, radius + 1, dtype=dtype, device=device)
    sq = coords[:, None] ** 2 + coords[None, :] ** 2
    kernel = torch.exp(-sq / (2.0 * sigma**2))
    return kernel / kernel.sum()


def _open_unit_clamp(x: Tensor) -> Tensor:
    # keep sigmoid outputs strictly inside (0,1) at the working precision
    tiny = torch.finfo(x.dtype).eps
    return x.clamp(tiny, 1.0 - tiny)


def variational_sigmoid(u: Tensor, eps: float | Tensor = 1.0) -> Tensor:
    """Elementwise sigmoid(u/eps), kept strictly inside (0,1)."""
    if _fval(eps) <= 0:
        raise ValueError(f"eps must be > 0, got {_fval(eps)}")
    eps_t = torch.as_tensor(eps, dtype=u.dtype, device=u.device)
    return _open_unit_clamp(torch.sigmoid(u / eps_t))


def mirror_pad2d(x: Tensor, radius: int) -> Tensor:
    """Edge-inclusive mirror padding of the two trailing dims.

    Unlike torch's 'reflect' mode the edge sample is repeated, which makes
    convolution with a symmetric kernel a self-adjoint operator; the descent
    property of the fixed-point scheme relies on that.
    """
    if radius > min(x.shape[-1], x.shape[-2]):
        raise ValueError(f"pad radius {radius} exceeds spatial size {tuple(x.shape[-2:])}")
    x = torch.cat([x[..., :, :radius].flip(-1), x, x[..., :, -radius:].flip(-1)], dim=-1)
    x = torch.cat([x[..., :radius, :].flip(-2), x, x[..., -radius:, :].flip(-2)], dim=-2)
    return x


def _smooth(x: Tensor, kernel: Tensor) -> Tensor:
    radius = (kernel.shape[-1] - 1) // 2
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None, None]
    out = F.conv2d(mirror_pad2d(x, radius), kernel.view(1, 1, *kernel.shape))
    return out[0, 0] if squeeze else out


def _broadcast_confidence(c, u: Tensor) -> Tensor:
    c_t = torch.as_tensor(c, dtype=u.dtype, device=u.device)
    if c_t.ndim == 1 and u.ndim > 1:
        c_t = c_t.view(-1, *([1] * (u.ndim - 1)))
    return c_t


def std_energy(x: Tensor, u: Tensor, c, p: STDParams) -> Tensor:
    """Evaluate the variational objective at a relaxed mask x in (0,1)."""
    p.validate()
    if x.min() <= 0.0 or x.max() >= 1.0:
        raise ValueError("x must lie strictly inside (0,1)")
    eps = torch.as_tensor(p.eps, dtype=u.dtype, device=u.device)
    lambda1 = torch.as_tensor(p.lambda1, dtype=u.dtype, device=u.device)
    lambda2 = torch.as_tensor(p.lambda2, dtype=u.dtype, device=u.device)
    c_t = _broadcast_confidence(c, u)

    xc = x.clamp(1e-7, 1.0 - 1e-7)
    energy = -(u * x).sum() + eps * (xc * xc.log()).sum() + eps * ((1 - xc) * (1 - xc).log()).sum()
    if _fval(lambda1) != 0 or lambda1.requires_grad:
        kernel = gaussian_kernel(p.sigma, p.resolved_radius(), dtype=u.dtype, device=u.device)
        energy = energy + lambda1 * (x * _smooth(1.0 - x, kernel)).sum()
    energy = energy + (lambda2 * (1.0 - c_t) * x).sum()
    return energy


def std_solve_trace(u: Tensor, c, p: STDParams) -> list[Tensor]:
    """Run the unrolled solver and return all iterates [x^0, ..., x^T]."""
    p.validate()
    eps = torch.as_tensor(p.eps, dtype=u.dtype, device=u.device)
    lambda1 = torch.as_tensor(p.lambda1, dtype=u.dtype, device=u.device)
    lambda2 = torch.as_tensor(p.lambda2, dtype=u.dtype, device=u.device)
    c_t = _broadcast_confidence(c, u).detach()

    use_smoothing = _fval(lambda1) != 0 or lambda1.requires_grad
    kernel = None
    if use_smoothing:
        kernel = gaussian_kernel(p.sigma, p.resolved_radius(), dtype=u.dtype, device=u.device)
    prior = lambda2 * (1.0 - c_t)

    x = _open_unit_clamp(torch.sigmoid(u / eps))
    trace = [x]
    for _ in range(p.iters):
        base = x if p.use_printed_update else u
        drive = base - prior
        if use_smoothing:
            drive = drive - lambda1 * _smooth(1.0 - 2.0 * x, kernel)
        x = _open_unit_clamp(torch.sigmoid(drive / eps))
        trace.append(x)
    return trace


def std_solve(u: Tensor, c, p: STDParams) -> Tensor:
    """Run the unrolled fixed-point solver and return the relaxed mask.

    Starts at sigmoid(u/eps) and applies p.iters updates

        x <- sigmoid((u - lambda1 k*(1 - 2x) - lambda2 (1-c)) / eps),

    each the exact minimizer of the objective with the concave smoothing
    term linearized at the previous iterate, so the energy is non-increasing.
    Differentiable in u, eps, lambda2 and sigma; c enters detached.
    """
    return std_solve_trace(u, c, p)[-1]


class STDLayer(nn.Module):
    """Learnable wrapper around std_solve.

    eps, lambda2 and sigma are stored as log-values and exponentiated, so
    unconstrained gradient steps keep them positive. A lambda2 of exactly 0
    cannot be represented in log space and is kept as a fixed constant
    (the no-prior ablation). lambda1 is a fixed constant.
    """

    def __init__(self, params: STDParams | None = None):
        super().__init__()
        p = params or STDParams()
        p.validate()
        self.iters = p.iters
        self.kernel_radius = p.resolved_radius()
        self.use_printed_update = p.use_printed_update

        self.log_eps = nn.Parameter(
            torch.tensor(math.log(float(p.eps))), requires_grad=p.learn_eps
        )
        self.register_buffer("lambda1_const", torch.tensor(float(p.lambda1)))
        if float(p.lambda2) > 0:
            self.log_lambda2 = nn.Parameter(
                torch.tensor(math.log(float(p.lambda2))), requires_grad=p.learn_lambda2
            )
            self.register_buffer("lambda2_const", torch.tensor(0.0))
            self._lambda2_fixed = False
        else:
            self.log_lambda2 = None
            self.register_buffer("lambda2_const", torch.tensor(0.0))
            self._lambda2_fixed = True
        self.log_sigma = nn.Parameter(
            torch.tensor(math.log(float(p.sigma))), requires_grad=p.learn_sigma
        )

    @property
    def eps(self) -> Tensor:
        return self.log_eps.exp()

    @property
    def lambda1(self) -> Tensor:
        return self.lambda1_const

    @property
    def lambda2(self) -> Tensor:
        if self._lambda2_fixed:
            return self.lambda2_const
        return self.log_lambda2.exp()

    @property
    def sigma(self) -> Tensor:
        return self.log_sigma.exp()

    def params(self) -> STDParams:
        return STDParams(
            eps=self.eps,
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            sigma=self.sigma,
            iters=self.iters,
            kernel_radius=self.kernel_radius,
            use_printed_update=self.use_printed_update,
        )

    def forward(self, u: Tensor, c) -> Tensor:
        return std_solve(u, c, self.params())

    def extra_repr(self) -> str:
        return (
            f"eps={float(self.eps):.4g}, lambda1={float(self.lambda1):.4g}, "
            f"lambda2={float(self.lambda2):.4g}, sigma={float(self.sigma):.4g}, "
            f"iters={self.iters}, radius={self.kernel_radius}"
        )
