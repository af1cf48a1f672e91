"""
Functional layer set used by the PPAP network, on top of torch autograd.

Tensors are channel-last (``[..., H, W, C]``) the way spectrograms are stored,
and kernels are ``[kh, kw, Cin, Cout]``. Every op accepts any number of leading
batch dimensions. Randomness only enters through an explicit ``torch.Generator``.
"""

import logging
import math
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from vivarium_ppap.errors import NumericalError, ShapeError, UsageError

logger = logging.getLogger(__name__)

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1
DEFAULT_DROPOUT = 0.1


def _to_nchw(x: torch.Tensor):
    lead = x.shape[:-3]
    flat = x.reshape((-1,) + tuple(x.shape[-3:]))
    return flat.permute(0, 3, 1, 2), lead


def _from_nchw(x: torch.Tensor, lead) -> torch.Tensor:
    x = x.permute(0, 2, 3, 1)
    return x.reshape(tuple(lead) + tuple(x.shape[1:]))


def conv2d(x: torch.Tensor, kernel: torch.Tensor, bias: Optional[torch.Tensor] = None, padding: str = 'same') -> torch.Tensor:
    """2-D convolution, stride 1, on ``[..., H, W, Cin]`` with a ``[kh, kw, Cin, Cout]`` kernel."""
    kh, kw, c_in, c_out = kernel.shape
    if x.shape[-1] != c_in:
        raise ShapeError(f"conv2d input has {x.shape[-1]} channels but the kernel expects {c_in}")
    if padding == 'same':
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"same padding needs an odd kernel, got {kh}x{kw}")
        pad = (kh // 2, kw // 2)
    elif padding == 'valid':
        pad = (0, 0)
    else:
        raise UsageError(f"Unknown padding mode: {padding}")
    nchw, lead = _to_nchw(x)
    weight = kernel.permute(3, 2, 0, 1)
    out = F.conv2d(nchw, weight, bias, padding=pad)
    return _from_nchw(out, lead)


def batch_norm(
    x: torch.Tensor,
    scale: torch.Tensor,
    shift: torch.Tensor,
    running_mean: Optional[torch.Tensor],
    running_var: Optional[torch.Tensor],
    mode: str = 'eval',
    momentum: float = BN_MOMENTUM,
) -> torch.Tensor:
    """Per-channel batch normalization over every axis but the last.

    In ``train`` mode the running statistics are updated in place:
    ``running = (1 - momentum) * running + momentum * batch``.
    """
    channels = x.shape[-1]
    if scale.shape[-1] != channels or shift.shape[-1] != channels:
        raise ShapeError(f"batch_norm scale/shift size {scale.shape[-1]} does not match {channels} channels")
    if mode == 'eval' and (running_mean is None or running_var is None):
        raise NumericalError("batch_norm in eval mode needs running statistics; train the model first")
    flat = x.reshape(-1, channels)
    out = F.batch_norm(
        flat,
        running_mean,
        running_var,
        weight=scale,
        bias=shift,
        training=(mode == 'train'),
        momentum=momentum,
        eps=BN_EPSILON,
    )
    return out.reshape(x.shape)


def swish(x: torch.Tensor) -> torch.Tensor:
    return F.silu(x)


def avg_pool2d(x: torch.Tensor, size: int = 2) -> torch.Tensor:
    """Non-overlapping average pooling; trailing odd rows/columns are dropped."""
    if x.shape[-3] < size or x.shape[-2] < size:
        raise ShapeError(f"avg_pool2d needs at least {size}x{size} input, got {tuple(x.shape[-3:-1])}")
    nchw, lead = _to_nchw(x)
    out = F.avg_pool2d(nchw, kernel_size=size, stride=size, ceil_mode=False)
    return _from_nchw(out, lead)


def dense(x: torch.Tensor, weights: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Affine map on the last axis with a ``[Din, Dout]`` weight matrix."""
    if x.shape[-1] != weights.shape[0]:
        raise ShapeError(f"dense input width {x.shape[-1]} does not match weights {tuple(weights.shape)}")
    return F.linear(x, weights.t(), bias)


def dropout(x: torch.Tensor, rate: float, mode: str = 'eval', generator: Optional[torch.Generator] = None) -> torch.Tensor:
    if not 0.0 <= rate < 1.0:
        raise UsageError(f"dropout rate must be in [0, 1), got {rate}")
    if mode != 'train' or rate == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= rate
    return x * keep / (1.0 - rate)


def init_uniform_fan_in(tensor: torch.Tensor, fan_in: int, generator: torch.Generator) -> None:
    """Fill ``tensor`` in place from U(-sqrt(1/fan_in), +sqrt(1/fan_in))."""
    bound = math.sqrt(1.0 / fan_in)
    with torch.no_grad():
        values = torch.rand(tensor.shape, generator=generator, dtype=torch.float64)
        tensor.copy_((values * 2.0 - 1.0) * bound)


class ParameterSet(Mapping):
    """Named view over the trainable tensors of a module.

    Names are dotted paths such as ``fs.block3.conv.kernel``.
    """

    def __init__(self, module: nn.Module, rng_seed: Optional[int] = None):
        self.module = module
        self.rng_seed = rng_seed
        self._params = dict(module.named_parameters())

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def count(self) -> int:
        return sum(p.numel() for p in self._params.values())


def backward(loss: torch.Tensor, params: ParameterSet) -> Dict[str, torch.Tensor]:
    """Gradients of a scalar loss; parameters the loss never touched get zeros."""
    if loss.numel() != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    names = list(params)
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    return {
        name: (g if g is not None else torch.zeros_like(params[name]))
        for name, g in zip(names, grads)
    }


class AdamState:
    """Adam moment buffers and step counter for one ParameterSet."""

    def __init__(self, params: ParameterSet, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.optimizer = torch.optim.Adam(list(params.values()), lr=lr, betas=betas, eps=eps)

    @property
    def step_count(self) -> int:
        states = [s for s in self.optimizer.state.values() if 'step' in s]
        return int(states[0]['step']) if states else 0


def adam_step(state: AdamState, grads: Mapping) -> ParameterSet:
    """Apply one bias-corrected Adam update in place and return the parameters."""
    for name, param in state.params.items():
        param.grad = grads[name].detach().clone()
    state.optimizer.step()
    return state.params


@dataclass
class GradCheckGroup:
    name: str
    max_relative_error: float
    elements_checked: int
    passed: bool


def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    params: ParameterSet,
    h: float = 1e-4,
    tolerance: float = 1e-4,
    max_elements: Optional[int] = 24,
    seed: int = 0,
    corrupt_backward: bool = False,
) -> List[GradCheckGroup]:
    """Compare analytic gradients against central differences, one group per parameter tensor.

    The relative error of a group is ``max|a - n| / max(max|a|, max|n|, 1e-8)``.
    ``corrupt_backward`` scales the analytic gradients by 1.5 and exists only as a
    negative control for the checker itself.
    """
    rng = np.random.default_rng(seed)
    analytic = backward(loss_fn(), params)
    if corrupt_backward:
        analytic = {name: g * 1.5 for name, g in analytic.items()}

    report = []
    for name, param in params.items():
        flat = param.data.view(-1)
        n = flat.numel()
        if max_elements is not None and n > max_elements:
            picks = np.sort(rng.choice(n, size=max_elements, replace=False))
        else:
            picks = np.arange(n)

        numeric = []
        with torch.no_grad():
            for i in picks:
                original = flat[i].item()
                flat[i] = original + h
                plus = loss_fn().item()
                flat[i] = original - h
                minus = loss_fn().item()
                flat[i] = original
                numeric.append((plus - minus) / (2.0 * h))
        numeric = np.asarray(numeric)
        analytic_picked = analytic[name].detach().reshape(-1).cpu().numpy()[picks]

        scale = max(np.abs(analytic_picked).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
        error = float(np.abs(analytic_picked - numeric).max(initial=0.0) / scale)
        report.append(GradCheckGroup(name, error, len(picks), error < tolerance))
        logger.debug(f"gradcheck {name}: max relative error {error:.3e}")
    return report
