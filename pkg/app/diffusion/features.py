import math
from typing import Optional

import torch
from loguru import logger

from app.checkpoints import Stage1Bundle
from app.data.tiles import Modality
from app.diffusion.denoiser import Condition
from app.features.pyramid import FeaturePyramid, PyramidLevel
from app.seeding import torch_generator


@torch.no_grad()
def extract_sar_features(ckpt: Stage1Bundle, cond: Condition, t_star: Optional[int] = None,
                         noise_seed: Optional[int] = None) -> FeaturePyramid:
    """
    Один проход денойзера из x_{t*} = √(1−ᾱ_{t*})·z (x0 считается нулём) с условием (SAR, промпт).
    Возвращает отводы декодера на делителях 4, 2, 1.
    """
    t_star = ckpt.cfg.diffusion.t_star if t_star is None else t_star
    noise_seed = ckpt.cfg.diffusion.noise_seed if noise_seed is None else noise_seed
    t_star = ckpt.schedule.check_t(t_star)
    if not ckpt.trained:
        logger.warning("Extracting SAR features from an untrained diffusion checkpoint")

    net = ckpt.net
    device = next(net.parameters()).device
    cond = cond.to(device)
    b, _, h, w = cond.sar.shape
    z = torch.randn((b, 3, h, w), generator=torch_generator(noise_seed)).to(device)
    x_t = math.sqrt(1.0 - float(ckpt.schedule.alpha_bar[t_star - 1])) * z

    was_training = net.training
    net.eval()
    _, taps = net(x_t, t_star, cond, return_taps=True)
    net.train(was_training)
    return FeaturePyramid(
        levels=tuple(PyramidLevel(d, tap) for d, tap in zip((4, 2, 1), taps)),
        source=Modality.SAR,
    )
