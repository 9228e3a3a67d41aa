"""Calibration statistics and the per-layer quantization spec.

Calibration hooks the float denoiser, records the input activation
range of every conv/linear layer over a batch set, and optionally a
percentile of |activation| for outlier clipping. The resulting spec
carries weight scales, activation qparams, and a fallback flag per
layer; it is immutable and JSON-persistable. Calibration results are
cached keyed by the CRC32 of the checkpoint file they came from.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .core import affine_qparams, symmetric_scales

# deterministic stride subsample of |activation| per layer per batch,
# pooled for the percentile estimate
_PCTL_SAMPLES_PER_BATCH = 1024

QUANTIZABLE_TYPES = (nn.Conv2d, nn.Conv1d, nn.Linear)

# the reference encoder runs once per session when the reference frame
# changes, not per chunk; it stays float and off the integer path
_EXCLUDED_PREFIXES = ("ref_encoder.",)


class QuantSpecError(ValueError):
    pass


def quantizable_layers(net: nn.Module) -> dict[str, nn.Module]:
    """Name -> module for every conv/linear on the per-chunk forward
    path, in registration order."""
    return {
        name: mod
        for name, mod in net.named_modules()
        if isinstance(mod, QUANTIZABLE_TYPES)
        and not name.startswith(_EXCLUDED_PREFIXES)
    }


@dataclass(frozen=True)
class LayerStats:
    lo: float
    hi: float
    count: int
    pctl: float | None = None  # clipped |activation| percentile, if gathered

    def __post_init__(self):
        if self.lo > self.hi:
            raise QuantSpecError(f"stats range inverted: [{self.lo}, {self.hi}]")
        if self.count <= 0:
            raise QuantSpecError("stats need at least one observed value")

    def effective_range(self) -> tuple[float, float]:
        if self.pctl is None:
            return self.lo, self.hi
        return max(self.lo, -self.pctl), min(self.hi, self.pctl)


@dataclass(frozen=True)
class CalibStats:
    layers: dict[str, LayerStats]
    batches: int
    method: str

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "batches": self.batches,
            "layers": {
                name: {"lo": s.lo, "hi": s.hi, "count": s.count, "pctl": s.pctl}
                for name, s in self.layers.items()
            },
        }

    @staticmethod
    def from_dict(d: dict) -> "CalibStats":
        layers = {name: LayerStats(**s) for name, s in d["layers"].items()}
        return CalibStats(layers=layers, batches=d["batches"], method=d["method"])


@torch.no_grad()
def calibrate(net: nn.Module, calib_batches, method: str = "minmax",
              percentile: float = 99.9) -> CalibStats:
    """Run float forwards over (x_t, t, cond) batches, recording each
    conv/linear layer's input range."""
    if method not in ("minmax", "percentile"):
        raise QuantSpecError(f"unknown calibration method {method!r}")
    layers = quantizable_layers(net)
    if not layers:
        raise QuantSpecError("network has no quantizable layers")

    ranges: dict[str, list] = {name: [np.inf, -np.inf, 0, []] for name in layers}

    def record(name):
        def hook(module, inputs):
            x = inputs[0].detach().reshape(-1).numpy()
            st = ranges[name]
            st[0] = min(st[0], float(x.min()))
            st[1] = max(st[1], float(x.max()))
            st[2] += x.size
            if method == "percentile":
                step = max(1, x.size // _PCTL_SAMPLES_PER_BATCH)
                st[3].append(np.abs(x[::step]))
        return hook

    handles = [mod.register_forward_pre_hook(record(name)) for name, mod in layers.items()]
    batches = 0
    try:
        for x_t, t, cond in calib_batches:
            net(x_t, torch.as_tensor(t, dtype=torch.float32), cond)
            batches += 1
    finally:
        for h in handles:
            h.remove()
    if batches == 0:
        raise QuantSpecError("calibration requires at least one batch")

    out = {}
    for name, (lo, hi, count, samples) in ranges.items():
        pctl = None
        if method == "percentile":
            pctl = float(np.percentile(np.concatenate(samples), percentile))
        out[name] = LayerStats(lo=lo, hi=hi, count=count, pctl=pctl)
    return CalibStats(layers=out, batches=batches, method=method)


@dataclass(frozen=True)
class LayerQuant:
    layer: str
    wscales: tuple[float, ...]  # symmetric per-output-channel
    ascale: float               # affine per-tensor
    zero_point: int
    fallback: bool = False
    wscheme: str = "symmetric_per_channel"
    ascheme: str = "affine_per_tensor"

    def __post_init__(self):
        if any(s <= 0 for s in self.wscales) or self.ascale <= 0:
            raise QuantSpecError(f"{self.layer}: scales must be positive")
        if not 0 <= self.zero_point <= 255:
            raise QuantSpecError(f"{self.layer}: zero point {self.zero_point} out of range")


@dataclass(frozen=True)
class QuantSpec:
    layers: tuple[LayerQuant, ...]

    def by_name(self) -> dict[str, LayerQuant]:
        return {e.layer: e for e in self.layers}

    def with_fallback(self, names, value: bool = True) -> "QuantSpec":
        names = set(names)
        return QuantSpec(tuple(
            replace(e, fallback=value) if e.layer in names else e for e in self.layers
        ))

    def only(self, name: str) -> "QuantSpec":
        """Quantize a single layer, every other layer falls back."""
        return QuantSpec(tuple(
            replace(e, fallback=e.layer != name) for e in self.layers
        ))

    def fallback_names(self) -> tuple[str, ...]:
        return tuple(e.layer for e in self.layers if e.fallback)

    def to_json(self) -> str:
        rows = [
            {
                "layer": e.layer,
                "wscheme": e.wscheme,
                "ascheme": e.ascheme,
                "wscales": list(e.wscales),
                "ascale": e.ascale,
                "zero_point": e.zero_point,
                "fallback": e.fallback,
            }
            for e in self.layers
        ]
        return json.dumps({"layers": rows}, indent=2)

    @staticmethod
    def from_json(text: str) -> "QuantSpec":
        rows = json.loads(text)["layers"]
        return QuantSpec(tuple(
            LayerQuant(
                layer=r["layer"],
                wscales=tuple(r["wscales"]),
                ascale=r["ascale"],
                zero_point=r["zero_point"],
                fallback=r["fallback"],
                wscheme=r["wscheme"],
                ascheme=r["ascheme"],
            )
            for r in rows
        ))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @staticmethod
    def load(path) -> "QuantSpec":
        return QuantSpec.from_json(Path(path).read_text())


def build_quant_spec(net: nn.Module, stats: CalibStats) -> QuantSpec:
    """Weight scales from the current parameters, activation qparams
    from calibrated ranges; nothing marked fallback yet."""
    entries = []
    for name, mod in quantizable_layers(net).items():
        if name not in stats.layers:
            raise QuantSpecError(f"no calibration stats for layer {name!r}")
        lo, hi = stats.layers[name].effective_range()
        ascale, zp = affine_qparams(lo, hi)
        wscales = symmetric_scales(mod.weight.detach().numpy())
        entries.append(LayerQuant(
            layer=name, wscales=tuple(float(s) for s in wscales),
            ascale=ascale, zero_point=zp))
    return QuantSpec(tuple(entries))


def validate_spec(net: nn.Module, spec: QuantSpec) -> None:
    """Spec and model must name exactly the same conv/linear layers."""
    model_names = set(quantizable_layers(net))
    spec_names = {e.layer for e in spec.layers}
    if model_names != spec_names:
        missing = sorted(model_names - spec_names)
        extra = sorted(spec_names - model_names)
        raise QuantSpecError(
            f"spec/model mismatch: missing {missing or 'none'}, unknown {extra or 'none'}"
        )
    for e in spec.layers:
        mod = dict(net.named_modules())[e.layer]
        if len(e.wscales) != mod.weight.shape[0]:
            raise QuantSpecError(
                f"{e.layer}: {len(e.wscales)} weight scales for "
                f"{mod.weight.shape[0]} output channels"
            )


def make_calib_batches(net: nn.Module, samples, sched, chunks: int = 64,
                       batch_size: int = 4, f: int = 8, seed: int = 0):
    """Noised dataset windows for calibration, stratified across all
    three conversation states; activations differ by state so each must
    be represented. Returns a list of (x_t, t, cond) batches."""
    from ..sched import forward_diffuse
    from ..training.data import collate_batch

    eligible = [s for s in samples if s.n_target >= f]
    if not eligible:
        raise QuantSpecError(f"no calibration sample offers {f} target frames")
    by_label: dict[int, list] = {}
    for s in eligible:
        by_label.setdefault(int(s.label_id), []).append(s)
    labels = sorted(by_label)

    gen = torch.Generator().manual_seed(seed)
    picked = []
    while len(picked) < chunks:
        group = by_label[labels[len(picked) % len(labels)]]
        idx = int(torch.randint(len(group), (1,), generator=gen))
        s = group[idx]
        start = int(torch.randint(s.n_target - f + 1, (1,), generator=gen))
        picked.append(s.window_view(start, f))

    batches = []
    for lo in range(0, chunks, batch_size):
        batch = collate_batch(picked[lo:lo + batch_size])
        t = int(torch.randint(sched.num_steps, (1,), generator=gen))
        eps = torch.randn(batch.targets.shape, generator=gen)
        eps_m = torch.randn(batch.motion.shape, generator=gen)
        x_t = forward_diffuse(batch.targets, eps, sched, t)
        motion_t = forward_diffuse(batch.motion, eps_m, sched, t)
        with torch.no_grad():
            cond = batch.cond(net, motion_t)
        batches.append((x_t, torch.full((x_t.shape[0],), float(t)), cond))
    return batches


def file_crc(path) -> int:
    return zlib.crc32(Path(path).read_bytes()) & 0xFFFFFFFF


def save_calib_cache(stats: CalibStats, path, checkpoint_crc: int) -> None:
    payload = {"checkpoint_crc": checkpoint_crc, "stats": stats.to_dict()}
    Path(path).write_text(json.dumps(payload, indent=2))


def load_calib_cache(path, checkpoint_crc: int) -> CalibStats | None:
    """Returns the cached stats, or None if absent or keyed to another
    checkpoint."""
    p = Path(path)
    if not p.exists():
        return None
    payload = json.loads(p.read_text())
    if payload.get("checkpoint_crc") != checkpoint_crc:
        return None
    return CalibStats.from_dict(payload["stats"])
