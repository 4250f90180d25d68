from .base import Encoder, EncoderSpec, SoftPrompt, TapActivations, VisualFeature, l2_normalize
from .toy import ToyEncoder
from ..errors import ConfigurationError


def build_encoder(backend: str = "toy", checkpoint: str | None = None, **toy_kwargs) -> Encoder:
    if backend == "toy":
        return ToyEncoder(**toy_kwargs)
    if backend == "clip":
        if not checkpoint:
            raise ConfigurationError("backend 'clip' requires a checkpoint path")
        from .clip_hf import CLIPEncoder

        return CLIPEncoder.from_pretrained(checkpoint)
    raise ConfigurationError(f"unknown encoder backend {backend!r}")


__all__ = [
    "Encoder",
    "EncoderSpec",
    "SoftPrompt",
    "TapActivations",
    "ToyEncoder",
    "VisualFeature",
    "build_encoder",
    "l2_normalize",
]
