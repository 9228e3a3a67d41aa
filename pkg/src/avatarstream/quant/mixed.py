"""Per-layer sensitivity ranking and greedy precision fallback.

The scan quantizes one layer at a time and measures the mean squared
deviation of the full forward from the float reference. Mixed-precision
construction walks that ranking from the most damaging layer down,
flipping layers back to float until the end-to-end metric drop reaches
the target; the metric is conventionally lip-sync correlation on a
validation session, but any higher-is-better callable works.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .forward import QuantizedDenoiser
from .spec import QuantSpec


class InfeasibleError(RuntimeError):
    """Raised when the metric drop target is unreachable even with every
    layer in high precision."""


@torch.no_grad()
def sensitivity_scan(net, spec: QuantSpec, eval_batches) -> list[tuple[str, float]]:
    """Rank layers by induced output MSE, most sensitive first.

    Deterministic: fixed batches give a fixed ranking; ties break by
    layer name.
    """
    batches = list(eval_batches)
    refs = [net(x_t, torch.as_tensor(t, dtype=torch.float32), cond)
            for x_t, t, cond in batches]
    errors = []
    for entry in spec.layers:
        qnet = QuantizedDenoiser(net, spec.only(entry.layer))
        mse = 0.0
        for (x_t, t, cond), ref in zip(batches, refs):
            mse += float(((qnet(x_t, t, cond) - ref) ** 2).mean())
        errors.append((entry.layer, mse / len(batches)))
    return sorted(errors, key=lambda kv: (-kv[1], kv[0]))


@dataclass(frozen=True)
class MixedPrecisionResult:
    spec: QuantSpec
    float_metric: float
    achieved_drop: float
    # (fallback count, drop) after each greedy evaluation
    trajectory: tuple[tuple[int, float], ...]


def build_mixed_precision(net, spec: QuantSpec, ranking, metric_fn,
                          target_drop: float = 0.05) -> MixedPrecisionResult:
    """Greedily mark layers fallback=true in descending sensitivity order
    until the metric drop is within target.

    metric_fn(denoiser) -> float, higher is better; the float baseline is
    metric_fn(net) itself.
    """
    base = float(metric_fn(net))
    current = spec

    def drop_of(s: QuantSpec) -> float:
        return base - float(metric_fn(QuantizedDenoiser(net, s)))

    drop = drop_of(current)
    trajectory = [(len(current.fallback_names()), drop)]
    for name, _ in ranking:
        if drop <= target_drop:
            break
        if current.by_name()[name].fallback:
            continue
        current = current.with_fallback([name])
        drop = drop_of(current)
        trajectory.append((len(current.fallback_names()), drop))
    if drop > target_drop:
        raise InfeasibleError(
            f"metric drop {drop:.4f} exceeds target {target_drop:.4f} "
            f"with {len(current.fallback_names())}/{len(current.layers)} layers in float"
        )
    return MixedPrecisionResult(spec=current, float_metric=base,
                                achieved_drop=drop, trajectory=tuple(trajectory))
