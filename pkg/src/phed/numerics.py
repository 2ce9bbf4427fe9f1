"""Differentiable-array substrate.

Tensors are ``torch.Tensor`` objects; torch's dynamic tape supplies reverse-mode
gradients. This module pins down the handful of primitives the rest of the
package relies on, the explicit random-number-generator handle, and an
independent central-difference gradient checker.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import torch

Tensor = torch.Tensor

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0

_DTYPES = {"float64": torch.float64, "float32": torch.float32}


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf appears in a checked tensor."""


def set_precision(name: str = "float64") -> torch.dtype:
    """Set the default floating dtype. ``float32`` is an opt-in speed mode."""
    dtype = _DTYPES[name]
    torch.set_default_dtype(dtype)
    return dtype


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return x


class RngState:
    """Explicit PRNG handle.

    Backed by torch's CPU generator (Mersenne Twister, mt19937). Every
    stochastic op in the package takes one of these; nothing draws from the
    global generator.
    """

    algorithm = "mt19937"

    def __init__(self, seed: int):
        if not 0 <= seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        self.seed = int(seed)
        self.generator = torch.Generator().manual_seed(self.seed)

    def normal(self, shape: Sequence[int], dtype: torch.dtype | None = None) -> Tensor:
        return torch.randn(tuple(shape), generator=self.generator, dtype=dtype)

    def uniform(self, shape: Sequence[int], dtype: torch.dtype | None = None) -> Tensor:
        return torch.rand(tuple(shape), generator=self.generator, dtype=dtype)

    def permutation(self, n: int) -> list[int]:
        return torch.randperm(n, generator=self.generator).tolist()

    def get_state(self) -> bytes:
        return bytes(self.generator.get_state().tolist())

    def set_state(self, state: bytes) -> None:
        self.generator.set_state(torch.tensor(list(state), dtype=torch.uint8))

    def fork(self, offset: int) -> "RngState":
        """Derive an independent stream, deterministic in (seed, offset)."""
        return RngState((self.seed * 1_000_003 + offset) % 2**64)


@dataclass
class GaussianParams:
    """Diagonal Gaussian as (mean, log-variance); trailing axis is the latent."""

    mean: Tensor
    logvar: Tensor

    def __post_init__(self):
        if self.mean.shape != self.logvar.shape:
            raise ValueError(f"mean {tuple(self.mean.shape)} and logvar {tuple(self.logvar.shape)} differ")

    @property
    def std(self) -> Tensor:
        return torch.exp(0.5 * self.logvar)

    def detach(self) -> "GaussianParams":
        return GaussianParams(self.mean.detach(), self.logvar.detach())


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x - x.max(dim=axis, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x - x.max(dim=axis, keepdim=True).values.detach()
    return shifted - torch.log(torch.exp(shifted).sum(dim=axis, keepdim=True))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, epsilon: float = 1e-5) -> Tensor:
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise ValueError("layer_norm gain/bias must match the last axis")
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + epsilon) * gain + bias


def dropout(x: Tensor, p: float, rng: RngState | None, training: bool) -> Tensor:
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit RngState")
    keep = (rng.uniform(x.shape, dtype=x.dtype) >= p).to(x.dtype)
    return x * keep / (1.0 - p)


def clamp_logvar(logvar: Tensor) -> Tensor:
    return torch.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX)


def sample_gaussian(params: GaussianParams, rng: RngState) -> Tensor:
    """Reparameterized draw ``mean + std * eps`` with ``eps ~ N(0, I)``."""
    check_finite(params.mean, "gaussian mean")
    check_finite(params.logvar, "gaussian logvar")
    eps = rng.normal(params.mean.shape, dtype=params.mean.dtype)
    return params.mean + params.std * eps


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    worst: str
    n_kinks: int = 0


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Iterable[tuple[str, Tensor]] | Iterable[Tensor],
    step: float = 1e-5,
    max_entries: int | None = None,
    rng: RngState | None = None,
    floor: float = 1e-6,
    signature: Callable[[], object] | None = None,
) -> GradCheckReport:
    """Compare autograd gradients of scalar ``f()`` with central differences.

    ``f`` must be deterministic (re-seed any RngState inside it). Relative error
    is ``|analytic - numeric| / max(|analytic|, |numeric|, floor * max(1, |f|))``;
    the floor grows with the objective because central differences carry
    roundoff of order ``eps * |f| / step``. With
    ``max_entries`` only that many randomly chosen coordinates per tensor are
    probed. ``signature``, if given, is read after every evaluation of ``f``;
    a coordinate whose two probes see a signature different from the centre
    straddles a kink (e.g. a ReLU switching) and is counted in ``n_kinks``
    instead of being compared.
    """
    named = [(p if isinstance(p, tuple) else (f"p{i}", p)) for i, p in enumerate(params)]
    for _, p in named:
        p.grad = None
    out = f()
    if out.numel() != 1:
        raise ValueError("finite_difference_check needs a scalar function")
    check_finite(out, "objective")
    centre = signature() if signature else None
    grads = torch.autograd.grad(out, [p for _, p in named], allow_unused=True)
    floor = floor * max(1.0, abs(out.item()))

    max_rel, max_abs, count, kinks, worst = 0.0, 0.0, 0, 0, ""
    with torch.no_grad():
        for (name, p), g in zip(named, grads):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            n = flat.numel()
            if max_entries is not None and n > max_entries:
                picker = rng or RngState(0)
                idx = picker.permutation(n)[:max_entries]
            else:
                idx = range(n)
            for j in idx:
                orig = flat[j].item()
                flat[j] = orig + step
                f_plus = f().item()
                sig_plus = signature() if signature else None
                flat[j] = orig - step
                f_minus = f().item()
                sig_minus = signature() if signature else None
                flat[j] = orig
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise NonFiniteError(f"non-finite objective while probing {name}[{j}]")
                if sig_plus != centre or sig_minus != centre:
                    kinks += 1
                    continue
                numeric = (f_plus - f_minus) / (2 * step)
                analytic = g.view(-1)[j].item()
                err = abs(analytic - numeric)
                rel = err / max(abs(analytic), abs(numeric), floor)
                count += 1
                max_abs = max(max_abs, err)
                if rel > max_rel:
                    max_rel, worst = rel, f"{name}[{j}]"
    return GradCheckReport(max_rel, max_abs, count, worst, kinks)
