import torch

from phenldiff.services.diffusion import NoiseSchedule


class GaussianOracle:
    """Exact noise predictor for data drawn from N(0, std^2 I); `shift` offsets conditional predictions."""

    def __init__(self, schedule: NoiseSchedule, std: float = 0.5, null_label: int = 2, shift: float = 0.0):
        self.schedule = schedule
        self.std = std
        self.null_label = null_label
        self.shift = shift
        self.calls = 0

    def __call__(self, z_t: torch.Tensor, t: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        self.calls += 1
        view = (-1,) + (1,) * (z_t.dim() - 1)
        ab = self.schedule.alpha_bars[t.long()].to(z_t.dtype).reshape(view)
        eps = (1 - ab).sqrt() * z_t / (ab * self.std**2 + 1 - ab)
        if self.shift:
            conditional = (labels != self.null_label).to(z_t.dtype).reshape(view)
            eps = eps + self.shift * conditional
        return eps


class FixedPredictor:
    """Returns a preset prediction regardless of input."""

    null_label = 2

    def __init__(self, value: torch.Tensor):
        self.value = value

    def __call__(self, z_t: torch.Tensor, t: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        return self.value.expand_as(z_t).clone()


def manual_schedule(alpha_bars: list) -> NoiseSchedule:
    """Schedule with hand-chosen alpha_bar(1..T); alpha_bar(0) = 1 is prepended."""
    bars = torch.tensor([1.0] + list(alpha_bars), dtype=torch.float64)
    betas = 1 - bars[1:] / bars[:-1]
    return NoiseSchedule(T=len(alpha_bars), betas=betas, alpha_bars=bars)
