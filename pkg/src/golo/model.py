"""Full two-stage detector: backbone, global localisation, local refinement."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from golo.backbone import Backbone
from golo.config import ModelConfig
from golo.global_stage import GlobalStage
from golo.local_stage import LocalStage
from golo.losses import StageOutput
from golo.nn import Module
from golo.tensor import Tensor


@dataclass
class Detections:
    global_out: StageOutput
    local_out: StageOutput


class GOLO(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(cfg.channels, rng, cfg.backbone_width)
        self.global_stage = GlobalStage(cfg, rng)
        self.local_stage = LocalStage(cfg, rng)
        self.cfg = cfg

    def forward(self, images) -> Detections:
        images = images if isinstance(images, Tensor) else Tensor(images)
        pyramid = self.backbone(images)
        q, g = self.global_stage(pyramid)
        # the local stage refines the global boxes but does not steer them
        local = self.local_stage(pyramid, q, g.boxes.detach())
        return Detections(g, local)

    def predict(self, images) -> tuple[np.ndarray, np.ndarray]:
        """Per-query class probabilities [B, n, K] and boxes [B, n, 4]."""
        from golo.tensor import _sigmoid, no_grad

        with no_grad():
            out = self.forward(images).local_out
        return _sigmoid(out.logits.data), out.boxes.data
