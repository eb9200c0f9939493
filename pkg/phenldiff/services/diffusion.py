"""
Diffusion math shared by training, generation and translation.

Timesteps run over {0, ..., T} with alpha_bar(0) = 1; a sampling plan walks
down to t = 1 and its last update lands on t = 0. All functions are pure
given their inputs and an explicit torch.Generator. Latents are plain
(B, C, H, W) tensors; shapes are checked wherever two of them meet.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import torch

from phenldiff.middleware.exceptions import ConfigError, NumericalError, ShapeError
from phenldiff.schemas import ScheduleConfig

logger = logging.getLogger(__name__)

Timestep = Union[int, torch.Tensor]


@dataclass(frozen=True)
class ClassCondition:
    label: int = 0
    null_flag: bool = False

    @classmethod
    def null(cls) -> "ClassCondition":
        return cls(label=0, null_flag=True)

    def index(self, null_label: int) -> int:
        """Embedding row for this condition; the null token sits after the registered labels."""
        return null_label if self.null_flag else self.label

    def __str__(self) -> str:
        return "null" if self.null_flag else str(self.label)


class NoisePredictor(Protocol):
    null_label: int

    def __call__(self, z_t: torch.Tensor, t: torch.Tensor, labels: torch.Tensor) -> torch.Tensor: ...


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: torch.Tensor
    alpha_bars: torch.Tensor

    def alpha_bar(self, t: Timestep) -> torch.Tensor:
        """alpha_bar at step t (index 0 is the clean-data convention)."""
        if isinstance(t, int):
            if not 0 <= t <= self.T:
                raise ConfigError("t", f"timestep {t} outside [0, {self.T}]")
            return self.alpha_bars[t]
        if t.numel() and (int(t.min()) < 0 or int(t.max()) > self.T):
            raise ConfigError("t", f"timesteps outside [0, {self.T}]")
        return self.alpha_bars[t.long().cpu()]

    def beta(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise ConfigError("t", f"timestep {t} outside [1, {self.T}]")
        return float(self.betas[t - 1])

    def validate(self) -> None:
        if self.betas.shape != (self.T,) or self.alpha_bars.shape != (self.T + 1,):
            raise ConfigError("schedule", "betas/alpha_bars have the wrong length")
        if not bool(((self.betas > 0) & (self.betas < 1)).all()):
            raise ConfigError("betas", "every beta must lie strictly within (0, 1)")
        if not bool((self.alpha_bars[1:] < self.alpha_bars[:-1]).all()):
            raise ConfigError("alpha_bars", "alpha_bars must be strictly decreasing")
        if float(self.alpha_bars[-1]) <= 0:
            raise ConfigError("alpha_bars", "alpha_bar(T) must stay positive")


@dataclass(frozen=True)
class DiffusionStepPlan:
    timesteps: Tuple[int, ...]
    eta: float = 0.0

    def __post_init__(self) -> None:
        if not self.timesteps:
            raise ConfigError("plan.timesteps", "a plan needs at least one timestep")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError("plan.eta", f"eta {self.eta} outside [0, 1]")
        steps = self.timesteps
        if len(steps) > 1:
            diffs = np.diff(np.asarray(steps))
            if not ((diffs < 0).all() or (diffs > 0).all()):
                raise ConfigError("plan.timesteps", "timesteps must be strictly monotone")
        if len(steps) > 1 and self.is_descending and steps[-1] != 1:
            raise ConfigError("plan.timesteps", "sampling plans must end at t = 1")
        if min(steps) < 1:
            raise ConfigError("plan.timesteps", "timesteps start at 1")

    @property
    def is_descending(self) -> bool:
        return len(self.timesteps) == 1 or self.timesteps[0] > self.timesteps[-1]

    @property
    def is_ascending(self) -> bool:
        return len(self.timesteps) == 1 or self.timesteps[0] < self.timesteps[-1]

    @classmethod
    def inversion(cls, T: int, steps: int) -> "DiffusionStepPlan":
        if not 1 <= steps <= T:
            raise ConfigError("steps", f"step count {steps} outside [1, {T}]")
        grid = np.unique(np.round(np.linspace(1, T, steps)).astype(np.int64))
        return cls(timesteps=tuple(int(t) for t in grid), eta=0.0)

    @classmethod
    def sampling(cls, T: int, steps: int, eta: float = 0.0) -> "DiffusionStepPlan":
        ascending = cls.inversion(T, steps)
        return cls(timesteps=tuple(reversed(ascending.timesteps)), eta=eta)

    def reversed(self) -> "DiffusionStepPlan":
        return DiffusionStepPlan(timesteps=tuple(reversed(self.timesteps)), eta=self.eta)


def build_schedule(
    T: int = 1000,
    kind: str = "linear",
    beta_min: float = 1e-4,
    beta_max: float = 0.02,
) -> NoiseSchedule:
    """Build beta_t and the cumulative alpha_bar_t in float64."""
    if T < 1:
        raise ConfigError("T", f"step count must be >= 1, got {T}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        field = "beta_min" if not 0.0 < beta_min <= beta_max else "beta_max"
        raise ConfigError(field, f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")

    if kind == "linear":
        betas = torch.linspace(beta_min, beta_max, T, dtype=torch.float64)
    elif kind == "cosine":
        s = 0.008
        steps = torch.arange(T + 1, dtype=torch.float64)
        f = torch.cos(((steps / T) + s) / (1 + s) * math.pi / 2) ** 2
        alpha_curve = f / f[0]
        betas = (1 - alpha_curve[1:] / alpha_curve[:-1]).clamp(beta_min, beta_max)
    else:
        raise ConfigError("kind", f"unknown schedule kind '{kind}'")

    alpha_bars = torch.cat(
        [torch.ones(1, dtype=torch.float64), torch.cumprod(1.0 - betas, dim=0)]
    )
    schedule = NoiseSchedule(T=T, betas=betas, alpha_bars=alpha_bars)
    schedule.validate()
    return schedule


def schedule_from_config(config: ScheduleConfig) -> NoiseSchedule:
    return build_schedule(config.T, config.kind, config.beta_min, config.beta_max)


def _broadcast(coef: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    coef = coef.to(device=like.device, dtype=like.dtype)
    if coef.dim() == 0:
        return coef
    return coef.reshape(-1, *([1] * (like.dim() - 1)))


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(tuple(a.shape), tuple(b.shape), what)


def forward_marginal(
    x0: torch.Tensor, t: Timestep, noise: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """Closed-form q(x_t | x_0): sqrt(ab_t) x0 + sqrt(1 - ab_t) noise."""
    _check_same_shape(x0, noise, "noise")
    ab = schedule.alpha_bar(t)
    return _broadcast(ab.sqrt(), x0) * x0 + _broadcast((1 - ab).sqrt(), x0) * noise


def condition_labels(
    cond: Union[ClassCondition, torch.Tensor], batch: int, null_label: int, device: torch.device
) -> torch.Tensor:
    if isinstance(cond, ClassCondition):
        return torch.full((batch,), cond.index(null_label), dtype=torch.long, device=device)
    return cond.to(device=device, dtype=torch.long)


def _timestep_tensor(t: Timestep, batch: int, device: torch.device) -> torch.Tensor:
    if isinstance(t, int):
        return torch.full((batch,), t, dtype=torch.long, device=device)
    return t.to(device=device, dtype=torch.long)


def training_loss(
    denoiser: NoisePredictor,
    z0: torch.Tensor,
    c: Union[ClassCondition, torch.Tensor],
    t: Timestep,
    noise: torch.Tensor,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Per-element mean of (noise - eps_theta(z_t, t, c))^2."""
    z_t = forward_marginal(z0, t, noise, schedule)
    batch = z0.shape[0]
    labels = condition_labels(c, batch, denoiser.null_label, z0.device)
    eps_hat = denoiser(z_t, _timestep_tensor(t, batch, z0.device), labels)
    _check_same_shape(noise, eps_hat, "noise prediction")
    loss = torch.mean((noise - eps_hat) ** 2)
    if not torch.isfinite(loss):
        raise NumericalError(
            "non-finite training loss",
            timestep=int(t) if isinstance(t, int) else None,
            condition=str(c) if isinstance(c, ClassCondition) else "batch",
        )
    return loss


def ddpm_reverse_step(
    z_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    schedule: NoiseSchedule,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Ancestral step with fixed variance beta_t; no noise is added at t = 1."""
    _check_same_shape(z_t, eps_hat, "noise prediction")
    if t < 1:
        raise ConfigError("t", "reverse steps need t >= 1")
    beta = schedule.beta(t)
    ab = float(schedule.alpha_bar(t))
    mean = (z_t - (beta / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(1.0 - beta)
    if t == 1:
        return mean
    xi = torch.randn(z_t.shape, generator=generator, dtype=z_t.dtype).to(z_t.device)
    return mean + math.sqrt(beta) * xi


def _ddim_transfer(
    z: torch.Tensor,
    eps_hat: torch.Tensor,
    ab_from: float,
    ab_to: float,
    clip_x0: bool = False,
    sigma: float = 0.0,
    xi: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    if ab_from <= 0:
        raise NumericalError("alpha_bar is zero, the DDIM update is singular")
    x0_hat = (z - math.sqrt(1.0 - ab_from) * eps_hat) / math.sqrt(ab_from)
    if clip_x0:
        x0_hat = x0_hat.clamp(-1.0, 1.0)
    direction = math.sqrt(max(1.0 - ab_to - sigma**2, 0.0)) * eps_hat
    out = math.sqrt(ab_to) * x0_hat + direction
    if sigma > 0 and xi is not None:
        out = out + sigma * xi
    return out


def ddim_step(
    z_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    t_prev: int,
    schedule: NoiseSchedule,
    clip_x0: bool = False,
) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM update from t to t_prev < t."""
    _check_same_shape(z_t, eps_hat, "noise prediction")
    if t_prev >= t:
        raise ConfigError("t_prev", f"sampling needs t_prev < t, got {t_prev} >= {t}")
    ab_t = float(schedule.alpha_bar(t))
    ab_prev = float(schedule.alpha_bar(t_prev))
    return _ddim_transfer(z_t, eps_hat, ab_t, ab_prev, clip_x0=clip_x0)


def _guided_eps(
    denoiser: NoisePredictor,
    z: torch.Tensor,
    t: int,
    cond: ClassCondition,
    guidance_scale: float,
) -> torch.Tensor:
    batch = z.shape[0]
    ts = torch.full((batch,), t, dtype=torch.long, device=z.device)
    labels = condition_labels(cond, batch, denoiser.null_label, z.device)
    eps_cond = denoiser(z, ts, labels)
    if guidance_scale == 1.0 or cond.null_flag:
        return eps_cond
    null = condition_labels(ClassCondition.null(), batch, denoiser.null_label, z.device)
    eps_uncond = denoiser(z, ts, null)
    return eps_uncond + guidance_scale * (eps_cond - eps_uncond)


def _require_finite(z: torch.Tensor, t: int, cond: ClassCondition) -> None:
    if not torch.isfinite(z).all():
        raise NumericalError("non-finite latent during diffusion", timestep=t, condition=str(cond))


@torch.no_grad()
def ddim_sample(
    denoiser: NoisePredictor,
    z_T: torch.Tensor,
    cond: ClassCondition,
    plan: DiffusionStepPlan,
    schedule: NoiseSchedule,
    guidance_scale: float = 1.0,
    clip_x0: bool = False,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Chain DDIM updates down a descending plan and return z_0."""
    if guidance_scale < 0:
        raise ConfigError("guidance_scale", "guidance scale must be non-negative")
    if not plan.is_descending or plan.timesteps[-1] != 1:
        raise ConfigError("plan", "sampling needs a descending plan ending at t = 1")
    if plan.eta > 0 and generator is None:
        raise ConfigError("plan.eta", "stochastic DDIM (eta > 0) needs an explicit generator")

    z = z_T
    targets: Sequence[int] = list(plan.timesteps[1:]) + [0]
    for t, t_prev in zip(plan.timesteps, targets):
        eps = _guided_eps(denoiser, z, t, cond, guidance_scale)
        ab_t = float(schedule.alpha_bar(t))
        ab_prev = float(schedule.alpha_bar(t_prev))
        if plan.eta > 0:
            sigma = plan.eta * math.sqrt((1 - ab_prev) / (1 - ab_t)) * math.sqrt(1 - ab_t / ab_prev)
            xi = torch.randn(z.shape, generator=generator, dtype=z.dtype).to(z.device)
            z = _ddim_transfer(z, eps, ab_t, ab_prev, clip_x0, sigma=sigma, xi=xi)
        else:
            z = _ddim_transfer(z, eps, ab_t, ab_prev, clip_x0)
        _require_finite(z, t, cond)
    return z


@torch.no_grad()
def ddim_invert(
    denoiser: NoisePredictor,
    z_0: torch.Tensor,
    cond: ClassCondition,
    plan: DiffusionStepPlan,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Run the DDIM recurrence up an ascending plan, mapping z_0 to z_T.

    The noise at each step is predicted from the step's start latent with the
    destination timestep; guidance is fixed at 1.
    """
    if not plan.is_ascending:
        raise ConfigError("plan", "inversion needs an ascending plan")
    if plan.eta != 0:
        raise ConfigError("plan.eta", "inversion requires eta = 0")

    z = z_0
    t_from = 0
    for t in plan.timesteps:
        eps = _guided_eps(denoiser, z, t, cond, 1.0)
        z = _ddim_transfer(z, eps, float(schedule.alpha_bar(t_from)), float(schedule.alpha_bar(t)))
        _require_finite(z, t, cond)
        t_from = t
    return z


@torch.no_grad()
def ddpm_sample(
    denoiser: NoisePredictor,
    z_T: torch.Tensor,
    cond: ClassCondition,
    schedule: NoiseSchedule,
    generator: Optional[torch.Generator] = None,
    guidance_scale: float = 1.0,
) -> torch.Tensor:
    """Full ancestral sampling chain over every step T..1."""
    z = z_T
    for t in range(schedule.T, 0, -1):
        eps = _guided_eps(denoiser, z, t, cond, guidance_scale)
        z = ddpm_reverse_step(z, eps, t, schedule, generator)
        _require_finite(z, t, cond)
    return z


def relative_l2(reference: torch.Tensor, estimate: torch.Tensor) -> float:
    """||reference - estimate|| / ||reference||."""
    _check_same_shape(reference, estimate, "reconstruction")
    denom = float(torch.linalg.vector_norm(reference.double()))
    if denom == 0:
        raise NumericalError("relative error of a zero reference is undefined")
    return float(torch.linalg.vector_norm((reference - estimate).double())) / denom
