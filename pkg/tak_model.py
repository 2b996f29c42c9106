from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from backbone import MultiScaleFeatures, VNetBackbone
from config import ModelConfig
from dynamic_head import TextController, make_layout, run_heads
from text_prior import PriorEmbeddingSet, PriorProjector, project_to_scales


@dataclass
class SegmentationOutput:
    logits: torch.Tensor
    features: MultiScaleFeatures
    theta: torch.Tensor


class TAKNet(nn.Module):
    """
    Бэкбон + текстовый контроллер + проекции знаний в одну сеть.

    Эмбеддинги T_p, T_s хранятся как буферы (замороженный энкодер),
    поэтому попадают в чекпоинт, но не в число обучаемых параметров.
    """

    def __init__(self, model_config: ModelConfig, priors: PriorEmbeddingSet) -> None:
        super().__init__()
        if priors.text_dim != model_config.text_dim:
            raise ValueError(
                f"D_text эмбеддингов ({priors.text_dim}) не совпадает с model.text_dim ({model_config.text_dim})"
            )
        self.config = model_config
        self.num_classes = priors.num_classes
        self.class_names = list(priors.class_names)
        self.backbone = VNetBackbone(
            in_channels=model_config.in_channels,
            stages=model_config.stages,
            base_width=model_config.base_width,
            activation=model_config.activation,
            norm=model_config.norm,
        )
        self.layout = make_layout(self.backbone.decoder_channels, model_config.head_hidden)
        self.controller = TextController(model_config.text_dim, self.backbone.top_channels, self.layout)

        widths = self.backbone.stage_widths
        self.contrast_scales = tuple(sorted(model_config.contrast_scales))
        self.projector: Optional[PriorProjector] = None
        if self.contrast_scales:
            self.projector = PriorProjector(model_config.text_dim, {s: widths[s] for s in self.contrast_scales})

        self.register_buffer("text_p", torch.as_tensor(np.asarray(priors.text_p), dtype=torch.float32).clone())
        self.register_buffer("text_s", torch.as_tensor(np.asarray(priors.text_s), dtype=torch.float32).clone())

    def forward(self, x: torch.Tensor) -> SegmentationOutput:
        features = self.backbone(x)
        theta = self.controller(self.text_p, self.text_s, features.global_f)
        logits = run_heads(features.decoder_map, theta, self.layout, self.config.activation)
        return SegmentationOutput(logits=logits, features=features, theta=theta)

    def project_priors(self) -> Tuple[Dict[int, torch.Tensor], Dict[int, torch.Tensor]]:
        if self.projector is None:
            return {}, {}
        embeddings = PriorEmbeddingSet(class_names=self.class_names, text_p=self.text_p, text_s=self.text_s)
        projected = project_to_scales(embeddings, self.projector.scale_widths, self.projector)
        return projected.proj_p, projected.proj_s
