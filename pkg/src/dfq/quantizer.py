"""Simulated n-bit linear quantization.

Codes follow ``round((theta - theta_min) / interval - 2**(n-1))`` with
``interval = (theta_max - theta_min) / (2**n - 1)``, so the calibrated minimum
maps to ``-2**(n-1)`` and the maximum to ``2**(n-1) - 1``. Rounding is
half-to-even (``torch.round``) and codes are clamped to the signed range.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Optional, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

PER_TENSOR = "per-tensor"
ChannelAxis = Union[int, str]

MAX_BITS = 16


class QuantizationError(ValueError):
    """Invalid input to a quantization routine."""


@dataclass
class QuantParams:
    n_bits: int
    theta_min: torch.Tensor
    theta_max: torch.Tensor
    channel_axis: ChannelAxis = PER_TENSOR

    def __post_init__(self):
        if not 2 <= self.n_bits <= MAX_BITS:
            raise QuantizationError(f"n_bits must be in [2, {MAX_BITS}], got {self.n_bits}")
        self.theta_min = torch.as_tensor(self.theta_min)
        self.theta_max = torch.as_tensor(self.theta_max)
        if self.theta_min.shape != self.theta_max.shape:
            raise QuantizationError("theta_min and theta_max must have the same shape")
        if bool((self.theta_min > self.theta_max).any()):
            raise QuantizationError("theta_min must not exceed theta_max")

    @property
    def levels(self) -> int:
        return 2**self.n_bits

    @property
    def qmin(self) -> int:
        return -(2 ** (self.n_bits - 1))

    @property
    def qmax(self) -> int:
        return 2 ** (self.n_bits - 1) - 1

    @property
    def interval(self) -> torch.Tensor:
        return (self.theta_max - self.theta_min) / (self.levels - 1)

    @property
    def degenerate(self) -> torch.Tensor:
        """Boolean mask of channels whose range collapsed to a point."""
        return self.theta_max == self.theta_min

    def to_dict(self) -> dict:
        return {
            "n_bits": self.n_bits,
            "channel_axis": self.channel_axis,
            "theta_min": self.theta_min.detach().reshape(-1).to(torch.float32).tolist(),
            "theta_max": self.theta_max.detach().reshape(-1).to(torch.float32).tolist(),
        }


@dataclass
class QuantizedTensor:
    codes: torch.Tensor
    params: QuantParams


def _broadcast(values: torch.Tensor, like: torch.Tensor, channel_axis: ChannelAxis) -> torch.Tensor:
    if channel_axis == PER_TENSOR:
        return values.reshape(()) if values.numel() == 1 else values
    shape = [1] * like.dim()
    shape[channel_axis] = -1
    return values.reshape(shape)


def _check_axis(tensor: torch.Tensor, channel_axis: ChannelAxis) -> ChannelAxis:
    if channel_axis == PER_TENSOR or channel_axis is None:
        return PER_TENSOR
    if not isinstance(channel_axis, int) or not -tensor.dim() <= channel_axis < tensor.dim():
        raise QuantizationError(f"invalid channel_axis {channel_axis!r} for a {tensor.dim()}-d tensor")
    return channel_axis % tensor.dim()


def calibrate_ranges(tensor: torch.Tensor, channel_axis: ChannelAxis = PER_TENSOR, n_bits: int = 8) -> QuantParams:
    """Per-channel (or per-tensor) extrema of ``tensor``.

    Degenerate channels are reported through ``QuantParams.degenerate``.
    """
    tensor = torch.as_tensor(tensor)
    if tensor.numel() == 0:
        raise QuantizationError("cannot calibrate an empty tensor")
    axis = _check_axis(tensor, channel_axis)
    t = tensor.detach()
    if axis == PER_TENSOR:
        lo, hi = t.min(), t.max()
    else:
        flat = t.movedim(axis, 0).reshape(t.shape[axis], -1)
        lo, hi = flat.min(dim=1).values, flat.max(dim=1).values
    return QuantParams(n_bits=n_bits, theta_min=lo, theta_max=hi, channel_axis=axis)


def _codes(tensor, lo, hi, n_bits, allow_degenerate):
    qmin, qmax = -(2 ** (n_bits - 1)), 2 ** (n_bits - 1) - 1
    interval = (hi - lo) / (2**n_bits - 1)
    degenerate = interval == 0
    if bool(degenerate.any()) and not allow_degenerate:
        raise QuantizationError("degenerate channel (theta_min == theta_max); enable allow_degenerate")
    safe = torch.where(degenerate, torch.ones_like(interval), interval)
    codes = torch.round((tensor - lo) / safe - 2 ** (n_bits - 1)).clamp(qmin, qmax)
    return torch.where(degenerate, torch.full_like(codes, qmin), codes), interval


def quantize(tensor: torch.Tensor, params: QuantParams, allow_degenerate: bool = False) -> QuantizedTensor:
    tensor = torch.as_tensor(tensor)
    lo = _broadcast(params.theta_min.to(tensor.dtype), tensor, params.channel_axis)
    hi = _broadcast(params.theta_max.to(tensor.dtype), tensor, params.channel_axis)
    codes, _ = _codes(tensor, lo, hi, params.n_bits, allow_degenerate)
    return QuantizedTensor(codes=codes.to(torch.int32), params=params)


def dequantize(q: QuantizedTensor, dtype: Optional[torch.dtype] = None) -> torch.Tensor:
    """Inverse map; degenerate channels come back as their constant ``theta_min``."""
    p = q.params
    if dtype is None:
        dtype = p.theta_min.dtype if p.theta_min.is_floating_point() else torch.float32
    codes = q.codes.to(dtype)
    lo = _broadcast(p.theta_min.to(dtype), codes, p.channel_axis)
    interval = _broadcast(p.interval.to(dtype), codes, p.channel_axis)
    return (codes + 2 ** (p.n_bits - 1)) * interval + lo


class _FakeQuantSTE(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lo, hi, n_bits):
        codes, interval = _codes(x, lo, hi, n_bits, allow_degenerate=True)
        ctx.save_for_backward((x >= lo) & (x <= hi))
        return (codes + 2 ** (n_bits - 1)) * interval + lo

    @staticmethod
    def backward(ctx, grad_output):
        (inside,) = ctx.saved_tensors
        return grad_output * inside.to(grad_output.dtype), None, None, None


def fake_quant_with_params(tensor: torch.Tensor, params: QuantParams) -> torch.Tensor:
    """Quantize-dequantize with fixed ranges; straight-through gradient inside the range."""
    lo = _broadcast(params.theta_min.to(tensor.dtype), tensor, params.channel_axis).detach()
    hi = _broadcast(params.theta_max.to(tensor.dtype), tensor, params.channel_axis).detach()
    return _FakeQuantSTE.apply(tensor, lo, hi, params.n_bits)


def fake_quant(tensor: torch.Tensor, n_bits: int, channel_axis: ChannelAxis = PER_TENSOR) -> torch.Tensor:
    params = calibrate_ranges(tensor, channel_axis, n_bits)
    return fake_quant_with_params(tensor, params)


class ActivationQuantizer(nn.Module):
    """Per-tensor activation fake-quantizer with EMA-tracked extrema.

    In training mode the range is updated as ``decay * running + (1 - decay) * batch``
    (the first batch initializes it); in eval mode the range is frozen.
    """

    def __init__(self, n_bits: int, decay: float = 0.9):
        super().__init__()
        self.n_bits = n_bits
        self.decay = decay
        self.register_buffer("theta_min", torch.zeros(()))
        self.register_buffer("theta_max", torch.zeros(()))
        self.register_buffer("initialized", torch.zeros((), dtype=torch.bool))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.training:
            with torch.no_grad():
                lo, hi = x.min(), x.max()
                if bool(self.initialized):
                    self.theta_min.mul_(self.decay).add_((1 - self.decay) * lo)
                    self.theta_max.mul_(self.decay).add_((1 - self.decay) * hi)
                else:
                    self.theta_min.copy_(lo)
                    self.theta_max.copy_(hi)
                    self.initialized.fill_(True)
        elif not bool(self.initialized):
            raise QuantizationError("activation range used before calibration")
        return fake_quant_with_params(x, self.params())

    def params(self) -> QuantParams:
        return QuantParams(self.n_bits, self.theta_min.clone(), self.theta_max.clone(), PER_TENSOR)

    def extra_repr(self) -> str:
        return f"n_bits={self.n_bits}, decay={self.decay}"


class QuantConv2d(nn.Conv2d):
    """Conv2d with per-output-channel weight and per-tensor input fake quantization.

    Biases stay in full precision.
    """

    def __init__(self, *args, w_bits: int = 4, a_bits: int = 4, **kwargs):
        super().__init__(*args, **kwargs)
        self.w_bits = w_bits
        self.act_quant = ActivationQuantizer(a_bits)

    def weight_params(self) -> QuantParams:
        return calibrate_ranges(self.weight, 0, self.w_bits)

    def forward(self, x):
        w = fake_quant_with_params(self.weight, self.weight_params())
        return self._conv_forward(self.act_quant(x), w, self.bias)


class QuantLinear(nn.Linear):
    def __init__(self, *args, w_bits: int = 4, a_bits: int = 4, **kwargs):
        super().__init__(*args, **kwargs)
        self.w_bits = w_bits
        self.act_quant = ActivationQuantizer(a_bits)

    def weight_params(self) -> QuantParams:
        return calibrate_ranges(self.weight, 0, self.w_bits)

    def forward(self, x):
        w = fake_quant_with_params(self.weight, self.weight_params())
        return F.linear(self.act_quant(x), w, self.bias)


def _swap(module: nn.Module, w_bits: int, a_bits: int) -> Optional[nn.Module]:
    if isinstance(module, nn.Conv2d):
        q = QuantConv2d(
            module.in_channels, module.out_channels, module.kernel_size,
            stride=module.stride, padding=module.padding, dilation=module.dilation,
            groups=module.groups, bias=module.bias is not None, w_bits=w_bits, a_bits=a_bits,
        )
    elif isinstance(module, nn.Linear):
        q = QuantLinear(module.in_features, module.out_features, bias=module.bias is not None,
                        w_bits=w_bits, a_bits=a_bits)
    else:
        return None
    q.weight.data.copy_(module.weight.data)
    if module.bias is not None:
        q.bias.data.copy_(module.bias.data)
    return q


def quantize_model(model: nn.Module, w_bits: int, a_bits: int) -> nn.Module:
    """Deep copy of ``model`` with every Conv2d/Linear replaced by its fake-quantized twin."""
    qmodel = copy.deepcopy(model)

    def recurse(parent):
        for name, child in parent.named_children():
            swapped = _swap(child, w_bits, a_bits)
            if swapped is not None:
                setattr(parent, name, swapped)
            else:
                recurse(child)

    recurse(qmodel)
    for p in qmodel.parameters():
        p.requires_grad_(True)
    return qmodel


def quant_layers(model: nn.Module):
    return [(n, m) for n, m in model.named_modules() if isinstance(m, (QuantConv2d, QuantLinear))]
