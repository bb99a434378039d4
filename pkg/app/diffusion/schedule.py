import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from app.errors import InvalidParameterError
from app.seeding import torch_generator


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """
    β_t, α_t = 1 − β_t и ᾱ_t = ∏ α_s для t = 1..T (в массивах индекс t − 1).
    """
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        for name in ("beta", "alpha", "alpha_bar"):
            values = np.asarray(getattr(self, name), dtype=np.float64)
            if values.shape != (self.T,):
                raise InvalidParameterError(f"{name} must have length T={self.T}")
            values.setflags(write=False)
            object.__setattr__(self, name, values)

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise InvalidParameterError(f"timestep t={t} outside [1, {self.T}]")
        return t

    def alpha_bar_at(self, t) -> torch.Tensor:
        """
        ᾱ_t для тензора шагов (значения 1..T), float32.
        """
        t = torch.as_tensor(t).long().cpu()
        if torch.any(t < 1) or torch.any(t > self.T):
            raise InvalidParameterError(f"timesteps must lie in [1, {self.T}]")
        table = torch.from_numpy(np.array(self.alpha_bar)).float()
        return table[t - 1]


def schedule_from_betas(beta) -> NoiseSchedule:
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    if beta.size < 1 or not np.all((beta > 0.0) & (beta < 1.0)):
        raise InvalidParameterError("every β_t must lie in (0, 1)")
    alpha = 1.0 - beta
    return NoiseSchedule(T=beta.size, beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def build_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """
    Линейный рост β от beta_start до beta_end за T шагов.
    """
    if T < 1:
        raise InvalidParameterError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise InvalidParameterError(
            f"need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}")
    return schedule_from_betas(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def forward_diffuse(x0, t, sched: NoiseSchedule, eps):
    """
    Замкнутая форма q(x_t | x_0): √ᾱ_t·x0 + √(1−ᾱ_t)·eps.
    t: целое или тензор (B,) шагов для батча.
    """
    if tuple(x0.shape) != tuple(eps.shape):
        raise InvalidParameterError(f"eps shape {tuple(eps.shape)} differs from x0 shape {tuple(x0.shape)}")
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        ab = sched.alpha_bar_at(t).to(dtype=x0.dtype, device=x0.device)
        ab = ab.view(-1, *([1] * (x0.ndim - 1)))
        return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps
    t = sched.check_t(t)
    ab = float(sched.alpha_bar[t - 1])
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def posterior_sigma(sched: NoiseSchedule, t: int) -> float:
    # Σ_θ фиксирована: σ_t² = β_t
    return math.sqrt(float(sched.beta[sched.check_t(t) - 1]))


def reverse_step(x_t, t: int, eps_hat, sched: NoiseSchedule, z, sigma_t: float):
    """
    x_{t−1} = (x_t − (1−α_t)/√(1−ᾱ_t)·ε̂) / √α_t + σ_t·z.
    """
    t = sched.check_t(t)
    if tuple(x_t.shape) != tuple(eps_hat.shape) or tuple(x_t.shape) != tuple(z.shape):
        raise InvalidParameterError("x_t, eps_hat and z must share one shape")
    a = float(sched.alpha[t - 1])
    ab = float(sched.alpha_bar[t - 1])
    return (x_t - ((1.0 - a) / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(a) + sigma_t * z


@torch.no_grad()
def sample_chain(net: Callable, cond, sched: NoiseSchedule, seed: int,
                 shape: Optional[tuple[int, ...]] = None) -> torch.Tensor:
    """
    Полная обратная цепочка из чистого шума. Возвращает оценку оптики в [0, 1].
    """
    if shape is None:
        b, _, h, w = cond.sar.shape
        shape = (b, 3, h, w)
    device = cond.sar.device
    generator = torch_generator(seed, 0)
    x = torch.randn(shape, generator=generator).to(device)
    for t in range(sched.T, 0, -1):
        t_batch = torch.full((shape[0],), t, dtype=torch.long, device=device)
        eps_hat = net(x, t_batch, cond)
        z = torch.randn(shape, generator=generator).to(device) if t > 1 else torch.zeros(shape, device=device)
        x = reverse_step(x, t, eps_hat, sched, z, posterior_sigma(sched, t))
    return ((x.clamp(-1.0, 1.0) + 1.0) / 2.0).float()
