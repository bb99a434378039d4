from typing import Callable

import torch
import torch.nn.functional as F
from loguru import logger

from app.diffusion.denoiser import Condition
from app.diffusion.schedule import NoiseSchedule, forward_diffuse
from app.errors import NonFiniteLossError
from app.seeding import torch_generator


def diffusion_loss(net: Callable, x0: torch.Tensor, cond: Condition, sched: NoiseSchedule,
                   rng_seed: int | torch.Generator) -> torch.Tensor:
    """
    MSE между ε и ε_θ(x_t, t, c). x0 в [0, 1] переводится в [−1, 1],
    t равномерно из {1..T} для каждого элемента батча.
    """
    generator = rng_seed if isinstance(rng_seed, torch.Generator) else torch_generator(rng_seed)
    x0 = x0 * 2.0 - 1.0
    b = x0.shape[0]
    t = torch.randint(1, sched.T + 1, (b,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator).to(dtype=x0.dtype, device=x0.device)
    x_t = forward_diffuse(x0, t.to(x0.device), sched, eps)

    eps_hat = net(x_t, t.to(x0.device), cond)
    if not torch.all(torch.isfinite(eps_hat)):
        bad = int((~torch.isfinite(eps_hat)).sum())
        logger.error(f"Denoiser produced {bad} non-finite values at t={t.tolist()}")
        raise NonFiniteLossError(
            f"non-finite denoiser output: {bad} of {eps_hat.numel()} elements, timesteps {t.tolist()}, "
            f"|x_t| max {float(x_t.abs().max()):.3g}")
    return F.mse_loss(eps_hat, eps)
