"""Two-phase optimization: v-prediction pretraining, then conversion to a
few-step consistency model with an EMA teacher and delayed adversarial heads.

Both loops draw every random quantity (sample indices, window offsets,
timesteps, noise) from one seeded torch generator, so a fixed seed gives
bit-identical loss curves on a single thread.
"""

from __future__ import annotations

import copy
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from ..model.checkpoint import load_checkpoint, load_into, module_params, save_checkpoint
from ..model.net import CondBundle, DenoisingNet, Discriminator, NetConfig
from ..model.sampling import cm_apply
from ..sched import NoiseSchedule, ScheduleError, build_schedule, ddim_step, forward_diffuse, sample_grid
from .data import Batch, TensorSample, collate_batch, latent_face_mask_tensor
from .losses import (
    adjacent_frame_loss,
    face_weighted_v_loss,
    hinge_disc_loss,
    hinge_gen_loss,
    lcm_pseudo_huber,
    temporal_smooth,
)

# warm-up keeps the same fraction of the run when the step budget shrinks
# below the full-scale setting (1000 warm-up steps per 80k total)
FULL_SCALE_STEPS = 80_000

# number of grid intervals the self-consistency pairs are drawn from
PAIR_GRID_STEPS = 50

FROZEN_PREFIXES = ("ref_encoder.", "audio_mlp.")


class TrainingDiverged(RuntimeError):
    """Non-finite loss; carries the step and the last finite loss values."""


@dataclass(frozen=True)
class TrainHyper:
    c: float = 0.03
    w: float = 1.0
    lambda_lcm: float = 1.0
    lambda_gen: float = 0.5
    lr: float = 3e-6
    warmup_steps: int = 1000
    disc_start_fraction: float = 0.125
    adj_weight: float = 0.15
    face_weight: float = 3.0
    ema_decay: float = 0.95
    batch_size: int = 8
    steps: int = 8000

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError(f"c must be positive, got {self.c}")
        if self.lambda_lcm < 0 or self.lambda_gen < 0:
            raise ValueError("loss mix weights must be non-negative")
        if not 0.0 <= self.disc_start_fraction < 1.0:
            raise ValueError(f"disc_start_fraction must be in [0, 1), got {self.disc_start_fraction}")
        if self.adj_weight < 0:
            raise ValueError(f"adj_weight must be non-negative, got {self.adj_weight}")
        if self.batch_size < 1 or self.steps < 1:
            raise ValueError("batch_size and steps must be positive")


@dataclass(frozen=True)
class DdpmTrainConfig:
    hyper: TrainHyper = field(default_factory=TrainHyper)
    net: NetConfig = field(default_factory=NetConfig)
    fixed_f: int = 8
    fixed_fraction: float = 0.5     # share of steps in the fixed-length phase
    f_min: int = 4
    f_max: int = 12
    num_steps: int = 1000
    seed: int = 0


@dataclass(frozen=True)
class ConsistencyTrainConfig:
    hyper: TrainHyper = field(default_factory=TrainHyper)
    single_frame_fraction: float = 0.125  # share of steps at f = 1
    f_min: int = 4
    f_max: int = 12
    num_steps: int = 1000
    transit: str = "online"          # which prediction drives the pair transit
    seed: int = 0

    def __post_init__(self):
        if self.transit not in ("online", "ema"):
            raise ValueError(f"transit must be 'online' or 'ema', got {self.transit}")


def effective_warmup(warmup_steps: int, total_steps: int) -> int:
    scaled = round(warmup_steps * total_steps / FULL_SCALE_STEPS)
    return max(1, min(warmup_steps, scaled))


def _lr_at(step: int, lr: float, warmup: int) -> float:
    if step < warmup:
        return lr * (step + 1) / warmup
    return lr


class MetricsWriter:
    """Append-only JSON-lines metrics stream."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path is not None else None
        self.rows: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "w")
        else:
            self._fh = None

    def write(self, row: dict) -> None:
        self.rows.append(row)
        if self._fh is not None:
            self._fh.write(json.dumps(row) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


@torch.no_grad()
def ema_update(target: torch.nn.Module, online: torch.nn.Module, decay: float) -> None:
    """target <- decay * target + (1 - decay) * online, over all parameters.

    Frozen parameters are copied outright: the moving average of a constant
    is that constant, and the blend would drift off it by an ulp per step.
    """
    for p_t, p_o in zip(target.parameters(), online.parameters()):
        if p_o.requires_grad:
            p_t.mul_(decay).add_(p_o, alpha=1.0 - decay)
        else:
            p_t.copy_(p_o)


def _t_arg(x: torch.Tensor, t: int):
    return torch.as_tensor(float(t)).reshape(1) if x.dim() == 5 else float(t)


def consistency_pair(
    online: DenoisingNet,
    target: DenoisingNet,
    x0: torch.Tensor,
    eps: torch.Tensor,
    t_hi: int,
    t_lo: int,
    cond: CondBundle,
    sched: NoiseSchedule,
    cond_lo: CondBundle | None = None,
    transit: str = "online",
) -> tuple[torch.Tensor, torch.Tensor]:
    """One self-consistency pair along the deterministic denoising trajectory.

    Diffuses x0 to t_hi, takes the online consistency estimate there, walks a
    DDIM step down to t_lo, and evaluates the EMA target there under
    stop-gradient. cond_lo lets the caller re-noise motion conditioning for
    the lower timestep; it defaults to cond.
    """
    if t_lo >= t_hi:
        raise ScheduleError(f"pair must descend in noise: t_lo={t_lo} >= t_hi={t_hi}")
    x_hi = forward_diffuse(x0, eps, sched, t_hi)
    v_on = online(x_hi, _t_arg(x_hi, t_hi), cond)
    x0_on = sched.sqrt_alpha_bar(t_hi) * x_hi - sched.sqrt_one_minus_alpha_bar(t_hi) * v_on
    f_online = cm_apply(x_hi, x0_on, t_hi)

    with torch.no_grad():
        if transit == "online":
            x0_transit = x0_on.detach()
        elif transit == "ema":
            v_t = target(x_hi, _t_arg(x_hi, t_hi), cond)
            x0_transit = (
                sched.sqrt_alpha_bar(t_hi) * x_hi - sched.sqrt_one_minus_alpha_bar(t_hi) * v_t
            )
        else:
            raise ValueError(f"unknown transit mode {transit!r}")
        x_lo = ddim_step(x_hi, x0_transit, sched, t_hi, t_lo)
        cond_at_lo = cond if cond_lo is None else cond_lo
        v_lo = target(x_lo, _t_arg(x_lo, t_lo), cond_at_lo)
        x0_lo = sched.sqrt_alpha_bar(t_lo) * x_lo - sched.sqrt_one_minus_alpha_bar(t_lo) * v_lo
        f_target = cm_apply(x_lo, x0_lo, t_lo)

    return f_online, f_target


def _grad_norm(params: list[torch.Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.detach() ** 2).sum())
    return total**0.5


def _draw_windows(
    samples: list[TensorSample],
    batch_size: int,
    f: int,
    gen: torch.Generator,
) -> Batch:
    """Uniformly pick samples and window offsets for one fixed-length batch."""
    eligible = [s for s in samples if s.n_target >= f]
    if not eligible:
        raise ValueError(f"no sample offers {f} target frames")
    idx = torch.randint(len(eligible), (batch_size,), generator=gen)
    items = []
    for i in idx.tolist():
        s = eligible[i]
        start = int(torch.randint(s.n_target - f + 1, (1,), generator=gen))
        items.append(s.window_view(start, f))
    return collate_batch(items)


def _draw_lengths(f_min: int, f_max: int, batch_size: int, gen: torch.Generator) -> list[int]:
    return torch.randint(f_min, f_max + 1, (batch_size,), generator=gen).tolist()


def _per_sample_coeffs(sched: NoiseSchedule, t_vec: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """sqrt(alpha_bar) and sqrt(1 - alpha_bar) per sample, shaped [B,1,1,1,1]."""
    sa = torch.tensor([float(sched.sqrt_alpha_bar(int(t))) for t in t_vec])
    s1 = torch.tensor([float(sched.sqrt_one_minus_alpha_bar(int(t))) for t in t_vec])
    return sa.reshape(-1, 1, 1, 1, 1), s1.reshape(-1, 1, 1, 1, 1)


def ddpm_batch_loss(
    net: DenoisingNet,
    batch: Batch,
    t: "int | torch.Tensor",
    sched: NoiseSchedule,
    face_mask: torch.Tensor,
    face_weight: float,
    gen: torch.Generator | None = None,
    eps: torch.Tensor | None = None,
    eps_m: torch.Tensor | None = None,
) -> torch.Tensor:
    """Face-weighted v-prediction loss on the target positions of one batch.

    t may be a single schedule index or a per-sample [B] vector.
    """
    x0 = batch.targets
    if eps is None:
        eps = torch.empty_like(x0).normal_(generator=gen)
    if eps_m is None:
        eps_m = torch.empty_like(batch.motion).normal_(generator=gen)
    if isinstance(t, int):
        x_t = forward_diffuse(x0, eps, sched, t)
        noisy_motion = forward_diffuse(batch.motion, eps_m, sched, t)
        v_tgt = sched.sqrt_alpha_bar(t) * eps - sched.sqrt_one_minus_alpha_bar(t) * x0
        t_vec = torch.full((x0.shape[0],), float(t))
    else:
        sa, s1 = _per_sample_coeffs(sched, t)
        x_t = sa * x0 + s1 * eps
        noisy_motion = sa * batch.motion + s1 * eps_m
        v_tgt = sa * eps - s1 * x0
        t_vec = t.float()
    cond = batch.cond(net, noisy_motion)
    v_hat = net(x_t, t_vec, cond)
    return face_weighted_v_loss(v_hat, v_tgt, face_mask, face_weight)


def train_ddpm(
    config: DdpmTrainConfig,
    samples: list[TensorSample],
    metrics_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
) -> tuple[DenoisingNet, list[dict]]:
    hp = config.hyper
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    net = DenoisingNet(config.net)
    sched = build_schedule(config.num_steps)
    face_mask = latent_face_mask_tensor()
    opt = torch.optim.AdamW(net.parameters(), lr=hp.lr, weight_decay=0.01)
    warmup = effective_warmup(hp.warmup_steps, hp.steps)
    fixed_steps = int(round(hp.steps * config.fixed_fraction))
    writer = MetricsWriter(metrics_path)
    last_row: dict = {}

    for step in range(hp.steps):
        lr = _lr_at(step, hp.lr, warmup)
        for group in opt.param_groups:
            group["lr"] = lr
        t0 = time.perf_counter()

        if step < fixed_steps:
            lengths = [config.fixed_f] * hp.batch_size
        else:
            lengths = _draw_lengths(config.f_min, config.f_max, hp.batch_size, gen)

        # heterogeneous lengths run as per-length sub-batches; weighting by
        # count keeps the loss equal to the mean of per-sample losses
        opt.zero_grad(set_to_none=True)
        loss = torch.zeros(())
        for f in sorted(set(lengths)):
            count = lengths.count(f)
            batch = _draw_windows(samples, count, f, gen)
            t = torch.randint(sched.num_steps, (count,), generator=gen)
            part = ddpm_batch_loss(net, batch, t, sched, face_mask, hp.face_weight, gen)
            loss = loss + (count / hp.batch_size) * part

        if not torch.isfinite(loss):
            writer.close()
            raise TrainingDiverged(f"non-finite loss at step {step}; last {last_row}")
        loss.backward()
        gnorm = _grad_norm(list(net.parameters()))
        torch.nn.utils.clip_grad_norm_(net.parameters(), 1.0)
        opt.step()

        last_row = {
            "step": step,
            "loss": float(loss.detach()),
            "lr": lr,
            "f": lengths[0] if len(set(lengths)) == 1 else -1,
            "grad_norm": gnorm,
            "wall_ms": (time.perf_counter() - t0) * 1e3,
        }
        writer.write(last_row)

    writer.close()
    if checkpoint_path is not None:
        save_checkpoint(
            module_params(net),
            checkpoint_path,
            meta={"kind": "ddpm", "net": config.net.to_dict(), "num_steps": config.num_steps},
        )
    return net, writer.rows


def load_denoiser(checkpoint_path: str | Path) -> tuple[DenoisingNet, dict]:
    params, meta = load_checkpoint(checkpoint_path)
    cfg = NetConfig.from_dict(meta["net"]) if "net" in meta else NetConfig()
    net = DenoisingNet(cfg)
    load_into(net, params)
    return net, meta


def freeze_conditioning(net: DenoisingNet) -> list[str]:
    """Freeze the reference encoder and audio-injection weights; returns the
    frozen parameter names."""
    frozen = []
    for name, p in net.named_parameters():
        if name.startswith(FROZEN_PREFIXES):
            p.requires_grad_(False)
            frozen.append(name)
    return frozen


def train_consistency(
    config: ConsistencyTrainConfig,
    ddpm_checkpoint: str | Path,
    samples: list[TensorSample],
    metrics_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    step_hook=None,
) -> tuple[DenoisingNet, DenoisingNet, list[dict]]:
    """Returns (online net, EMA net, metrics rows). The saved checkpoint holds
    the EMA weights, which the engine samples from. step_hook(step, net,
    ema_net, disc), when given, runs after each optimizer step."""
    hp = config.hyper
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)

    net, meta = load_denoiser(ddpm_checkpoint)
    if meta.get("num_steps", config.num_steps) != config.num_steps:
        raise ValueError(
            f"schedule length mismatch: checkpoint {meta.get('num_steps')} vs config {config.num_steps}"
        )
    sched = build_schedule(config.num_steps)
    frozen = freeze_conditioning(net)
    ema_net = copy.deepcopy(net)
    for p in ema_net.parameters():
        p.requires_grad_(False)

    disc = Discriminator(net.cfg)
    face_mask = latent_face_mask_tensor()

    trainable = [p for p in net.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(trainable, lr=hp.lr, weight_decay=0.01)
    disc_opt = torch.optim.AdamW(disc.parameters(), lr=hp.lr, weight_decay=0.01)
    warmup = effective_warmup(hp.warmup_steps, hp.steps)
    single_steps = int(round(hp.steps * config.single_frame_fraction))
    disc_start = int(hp.steps * hp.disc_start_fraction)
    grid = sample_grid(sched, PAIR_GRID_STEPS)
    writer = MetricsWriter(metrics_path)
    last_row: dict = {}

    for step in range(hp.steps):
        lr = _lr_at(step, hp.lr, warmup)
        for group in opt.param_groups:
            group["lr"] = lr
        t0 = time.perf_counter()

        if step < single_steps:
            f = 1
        else:
            f = int(torch.randint(config.f_min, config.f_max + 1, (1,), generator=gen))
        batch = _draw_windows(samples, hp.batch_size, f, gen)
        pair_i = int(torch.randint(PAIR_GRID_STEPS, (1,), generator=gen))
        t_hi, t_lo = grid[pair_i], grid[pair_i + 1]

        x0 = batch.targets
        eps = torch.empty_like(x0).normal_(generator=gen)
        eps_m = torch.empty_like(batch.motion).normal_(generator=gen)
        cond_hi = batch.cond(net, forward_diffuse(batch.motion, eps_m, sched, t_hi))
        cond_lo = batch.cond(ema_net, forward_diffuse(batch.motion, eps_m, sched, t_lo))
        f_online, f_target = consistency_pair(
            net, ema_net, x0, eps, t_hi, t_lo, cond_hi, sched,
            cond_lo=cond_lo, transit=config.transit,
        )

        lcm = lcm_pseudo_huber(temporal_smooth(f_online), f_target, hp.c)
        adj = (
            adjacent_frame_loss(f_online, f_target, hp.c)
            if f >= 2
            else torch.zeros(())
        )
        disc_cond = CondBundle(
            audio=cond_hi.audio,
            label=cond_hi.label,
            reference_embedding=cond_hi.reference_embedding.detach(),
            motion_latents=cond_hi.motion_latents,
            face_mask=face_mask,
        )
        if step >= disc_start:
            d_fake = disc(f_online.detach(), torch.full((f_online.shape[0],), float(t_hi)), disc_cond)
            d_real = disc(x0, torch.full((x0.shape[0],), float(t_hi)), disc_cond)
            d_loss = hinge_disc_loss(d_fake, d_real, hp.w)
            disc_opt.zero_grad(set_to_none=True)
            d_loss.backward()
            disc_opt.step()

            g_scores = disc(f_online, torch.full((f_online.shape[0],), float(t_hi)), disc_cond)
            gen_term = hinge_gen_loss(g_scores, hp.w)
        else:
            d_loss = torch.zeros(())
            gen_term = torch.zeros(())

        loss = hp.lambda_lcm * lcm + hp.adj_weight * adj + hp.lambda_gen * gen_term
        if not torch.isfinite(loss):
            writer.close()
            raise TrainingDiverged(f"non-finite loss at step {step}; last {last_row}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        gnorm = _grad_norm(trainable)
        torch.nn.utils.clip_grad_norm_(trainable, 1.0)
        opt.step()
        ema_update(ema_net, net, hp.ema_decay)
        if step_hook is not None:
            step_hook(step, net, ema_net, disc)

        last_row = {
            "step": step,
            "loss": float(loss.detach()),
            "lcm": float(lcm.detach()),
            "adj": float(adj.detach()),
            "gen": float(gen_term.detach()),
            "disc": float(d_loss.detach()),
            "f": f,
            "t_hi": t_hi,
            "t_lo": t_lo,
            "lr": lr,
            "grad_norm": gnorm,
            "wall_ms": (time.perf_counter() - t0) * 1e3,
        }
        writer.write(last_row)

    writer.close()
    if checkpoint_path is not None:
        save_checkpoint(
            module_params(ema_net),
            checkpoint_path,
            meta={
                "kind": "consistency",
                "net": net.cfg.to_dict(),
                "num_steps": config.num_steps,
                "frozen": frozen,
            },
        )
    return net, ema_net, writer.rows
