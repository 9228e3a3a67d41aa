"""Mixed-precision inference over the denoiser.

QuantizedDenoiser deep-copies the float network and swaps each
non-fallback conv/linear for an integer wrapper: the input activation
tensor is encoded with the layer's calibrated affine qparams, multiplied
against stored int8 weight codes with int32 accumulation, and rescaled
to float at the boundary. Fallback layers are left untouched, so a spec
with every layer falling back runs the original float modules in the
original order and is bit-identical to the plain forward. Inference
only; the integer path does not carry gradients.
"""

from __future__ import annotations

import copy

import numpy as np
import torch
from torch import nn

from .core import integer_conv1d, integer_conv2d, integer_linear, quantize_activations, quantize_weights
from .spec import LayerQuant, QuantSpec, QuantSpecError, quantizable_layers, validate_spec


def _pair(v) -> tuple[int, int]:
    return tuple(v) if isinstance(v, (tuple, list)) else (int(v), int(v))


class IntegerLayer(nn.Module):
    """Integer-arithmetic replacement for one Conv2d/Conv1d/Linear."""

    def __init__(self, module: nn.Module, entry: LayerQuant):
        super().__init__()
        if isinstance(module, (nn.Conv1d, nn.Conv2d)):
            if module.groups != 1 or set(_pair(module.dilation)) != {1}:
                raise QuantSpecError(f"{entry.layer}: grouped/dilated convs unsupported")
        w = module.weight.detach().numpy()
        scales = np.asarray(entry.wscales, dtype=np.float64)
        self.codes, self.scales = quantize_weights(w, scales)
        self.bias = None if module.bias is None else module.bias.detach().numpy().astype(np.float64)
        self.ascale = float(entry.ascale)
        self.zero_point = int(entry.zero_point)
        self.kind = type(module).__name__
        self.stride = _pair(getattr(module, "stride", 1))
        self.padding = _pair(getattr(module, "padding", 0))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        a = quantize_activations(x.detach().numpy(), self.ascale, self.zero_point)
        if self.kind == "Linear":
            flat = a.reshape(-1, a.shape[-1])
            y = integer_linear(flat, self.codes, self.scales, self.ascale,
                               self.zero_point, self.bias)
            y = y.reshape(*a.shape[:-1], y.shape[-1])
        elif self.kind == "Conv2d":
            y = integer_conv2d(a, self.codes, self.scales, self.ascale,
                               self.zero_point, self.bias,
                               stride=self.stride, padding=self.padding)
        else:
            y = integer_conv1d(a, self.codes, self.scales, self.ascale,
                               self.zero_point, self.bias,
                               stride=self.stride[0], padding=self.padding[0])
        return torch.from_numpy(y)


def _replace_module(root: nn.Module, name: str, new: nn.Module) -> None:
    parent = root.get_submodule(name.rpartition(".")[0]) if "." in name else root
    setattr(parent, name.rpartition(".")[2], new)


class QuantizedDenoiser(nn.Module):
    """Drop-in denoiser executing the spec's non-fallback layers in INT8.

    Exposes the same (x_t, t, cond) call signature and reference encoding
    as the float network, so samplers and rollouts run unchanged.
    """

    def __init__(self, net: nn.Module, spec: QuantSpec):
        super().__init__()
        validate_spec(net, spec)
        self.spec = spec
        self.model = copy.deepcopy(net)
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        layers = quantizable_layers(self.model)
        for entry in spec.layers:
            if not entry.fallback:
                _replace_module(self.model, entry.layer,
                                IntegerLayer(layers[entry.layer], entry))

    @property
    def cfg(self):
        return self.model.cfg

    def encode_reference(self, ref_latent: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.model.encode_reference(ref_latent)

    def forward(self, x_t: torch.Tensor, t, cond) -> torch.Tensor:
        with torch.no_grad():
            return self.model(x_t, torch.as_tensor(t, dtype=torch.float32), cond)


def quantized_forward(net: nn.Module, spec: QuantSpec, x_t: torch.Tensor, t, cond) -> torch.Tensor:
    """One-shot mixed-precision denoiser evaluation."""
    return QuantizedDenoiser(net, spec)(x_t, t, cond)
