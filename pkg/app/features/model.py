from typing import Optional

import torch
from torch import nn

from app.config import RunConfig
from app.features.descriptors import DescriptorHead
from app.features.fusion import CBAM, FusedMap, MultiScaleAggregation, cbam_refine
from app.features.optical import OpticalBackbone
from app.features.pyramid import FeaturePyramid
from app.seeding import seeded


class DescriptorModel(nn.Module):
    """
    Обучаемая часть второго этапа: оптический энкодер, MSAA и CBAM на каждую
    ветку и общая проекция дескрипторов.
    """

    def __init__(self, cfg: RunConfig, sar_channels: tuple[int, int, int]):
        super().__init__()
        c = cfg.optical.channels
        self.ablation = cfg.ablation
        self.plain_average = cfg.removes("msaa")
        with seeded(cfg.seed):
            self.optical = OpticalBackbone.from_config(cfg.optical, seed=cfg.seed,
                                                       use_coarse=not cfg.removes("coarse"))
            self.msaa_opt = MultiScaleAggregation((c,) * len(self.optical.divisors), c, cfg.fusion.unified_divisor)
            self.msaa_sar = MultiScaleAggregation(sar_channels, c, cfg.fusion.unified_divisor)
            self.cbam_opt = CBAM(c, cfg.fusion.reduction, cfg.fusion.spatial_kernel)
            self.cbam_sar = CBAM(c, cfg.fusion.reduction, cfg.fusion.spatial_kernel)
            self.head = DescriptorHead(c, cfg.descriptor.dim)
        if self.plain_average:
            # без MSAA: веса шкал заморожены в нуле (простое среднее), CBAM пропускается
            self.msaa_opt.logits.requires_grad_(False)
            self.msaa_sar.logits.requires_grad_(False)
            self.cbam_opt.requires_grad_(False)
            self.cbam_sar.requires_grad_(False)

    def _cbam(self, branch: str) -> Optional[CBAM]:
        if self.plain_average:
            return None
        return self.cbam_opt if branch == "optical" else self.cbam_sar

    def fuse_optical(self, x: torch.Tensor, tile_ids: Optional[list[str]] = None) -> FusedMap:
        return cbam_refine(self._cbam("optical"), self.msaa_opt(self.optical(x, tile_ids)))

    def fuse_sar(self, pyramid: FeaturePyramid) -> FusedMap:
        return cbam_refine(self._cbam("sar"), self.msaa_sar(pyramid))

    def beta_vectors(self) -> tuple[list[float], list[float]]:
        with torch.no_grad():
            b_opt = torch.softmax(self.msaa_opt.logits.double(), 0).tolist()
            b_sar = torch.softmax(self.msaa_sar.logits.double(), 0).tolist()
        return b_opt, b_sar
