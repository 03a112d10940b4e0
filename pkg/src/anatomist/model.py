"""Full impression model: encoders, fusion, decoder, and ablation wiring.

The ablation family controls which branches run:

    base_image     image encoder only, memory = [patches]
    base_findings  text encoder only, memory = [sentences, tokens]
    base           both branches + co-attention, raw sentences, no contrast
    base_dca       base + document-level contrastive alignment
    base_ap        base + anatomy prompts in the findings
    base_ap_dca    everything on
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .corpus import EncodedReport
from .decoder import DecoderMemory, ImpressionDecoder, build_memory
from .encoders import EncodedPair, ImageEncoder, ModelConfig, TextEncoder, VisualExtractor
from .errors import ValidationError
from .fusion import FusionOutput, co_attend
from .layers import Linear

ABLATIONS = ("base_image", "base_findings", "base", "base_dca", "base_ap", "base_ap_dca")


@dataclass(frozen=True)
class AblationSpec:
    use_image: bool
    use_text: bool
    use_prompts: bool
    use_contrastive: bool


_ABLATION_SPECS = {
    "base_image": AblationSpec(True, False, False, False),
    "base_findings": AblationSpec(False, True, False, False),
    "base": AblationSpec(True, True, False, False),
    "base_dca": AblationSpec(True, True, False, True),
    "base_ap": AblationSpec(True, True, True, False),
    "base_ap_dca": AblationSpec(True, True, True, True),
}


def ablation_spec(name: str) -> AblationSpec:
    try:
        return _ABLATION_SPECS[name]
    except KeyError:
        raise ValidationError(f"unknown ablation {name!r}; one of {ABLATIONS}") from None


class ImpressionModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.visual = VisualExtractor(rng, config)
        self.image_encoder = ImageEncoder(rng, config)
        self.text_encoder = TextEncoder(rng, config)
        self.decoder = ImpressionDecoder(rng, config)
        if config.fusion_projected:
            self.fusion_query = Linear(rng, config.d_model, config.d_model)
            self.fusion_key = Linear(rng, config.d_model, config.d_model)
        else:
            self.fusion_query = None
            self.fusion_key = None

    def encode(self, report: EncodedReport, spec: AblationSpec) -> EncodedPair:
        token_states = sentence_states = patch_states = projected = None
        if spec.use_text:
            token_states, sentence_states = self.text_encoder(
                report.token_ids, report.cls_positions
            )
        if spec.use_image:
            projected = self.visual(report.patches)
            patch_states = self.image_encoder(projected)
        return EncodedPair(
            token_states=token_states,
            sentence_states=sentence_states,
            patch_states=patch_states,
            projected_patches=projected,
        )

    def fuse(self, pair: EncodedPair) -> FusionOutput | None:
        if pair.sentence_states is None or pair.patch_states is None:
            return None
        return co_attend(
            pair.sentence_states,
            pair.patch_states,
            scaled=self.config.fusion_scaled,
            query_proj=self.fusion_query,
            key_proj=self.fusion_key,
        )

    def memory_for(self, pair: EncodedPair, fused: FusionOutput | None) -> DecoderMemory:
        """Eq-ordered memory; fused rows when both branches ran, raw otherwise.

        The token segment always carries pre-fusion token states.
        """
        if fused is not None:
            return build_memory(fused.fused_patches, fused.fused_sentences, pair.token_states)
        return build_memory(pair.patch_states, pair.sentence_states, pair.token_states)

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, param in self.visual.named_params("visual"):
            out[name] = param
        for name, param in self.image_encoder.named_params("image"):
            out[name] = param
        for name, param in self.text_encoder.named_params("text"):
            out[name] = param
        for name, param in self.decoder.named_params("decoder"):
            out[name] = param
        if self.fusion_query is not None:
            for name, param in self.fusion_query.named_params("fusion.query"):
                out[name] = param
            for name, param in self.fusion_key.named_params("fusion.key"):
                out[name] = param
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()
