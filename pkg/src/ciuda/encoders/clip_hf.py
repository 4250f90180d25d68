"""Adapter for a pretrained CLIP checkpoint loaded with ``transformers``.

Soft prompts are fed as token embeddings ``[SOS, context..., class..., EOS]``
through the text transformer; the image tap is the output of the
penultimate vision block (input of the last block), which keeps the
feature differentiable with respect to the tapped tokens.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from ..errors import ConfigurationError
from .base import Encoder, EncoderSpec, l2_normalize
from .preprocessing import Preprocessing, check_shape


class CLIPEncoder(Encoder):
    reserved_tokens = 2

    def __init__(self, model, tokenizer, preprocessing: Preprocessing | None = None, backbone_id: str = "clip"):
        self.model = model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.tokenizer = tokenizer
        vcfg, tcfg = model.config.vision_config, model.config.text_config
        side = vcfg.image_size // vcfg.patch_size
        self.preprocessing = preprocessing or Preprocessing(resolution=vcfg.image_size)
        if self.preprocessing.resolution != vcfg.image_size:
            raise ConfigurationError(
                f"preprocessing resolution {self.preprocessing.resolution} != backbone input {vcfg.image_size}"
            )
        self.spec = EncoderSpec(
            backbone_id=backbone_id,
            feature_dim=model.config.projection_dim,
            prompt_token_dim=tcfg.hidden_size,
            patch_grid=(side, side),
            has_global_token=True,
            temperature=float(1.0 / model.logit_scale.detach().exp()),
            context_length=tcfg.max_position_embeddings,
            metadata={
                "input_shape": (vcfg.num_channels, vcfg.image_size, vcfg.image_size),
                "preprocessing": self.preprocessing.digest(),
            },
        )
        self.bos_id = tokenizer.bos_token_id
        self.eos_id = tokenizer.eos_token_id

    @classmethod
    def from_pretrained(cls, path: str):
        from transformers import CLIPModel, CLIPTokenizer

        model = CLIPModel.from_pretrained(path, attn_implementation="eager", torch_dtype=torch.float32)
        tokenizer = CLIPTokenizer.from_pretrained(path)
        return cls(model, tokenizer, backbone_id=f"clip:{path}")

    # -- image --------------------------------------------------------------
    def prepare_input(self, image) -> torch.Tensor:
        if not isinstance(image, np.ndarray):
            image = self.preprocessing(image)
        check_shape(image, self.spec.metadata["input_shape"], self.spec.backbone_id)
        return torch.as_tensor(image, dtype=torch.float32)

    def tap(self, pixels: torch.Tensor) -> torch.Tensor:
        vm = self.model.vision_model
        h = vm.pre_layrnorm(vm.embeddings(pixels.to(torch.float32)))
        for layer in vm.encoder.layers[:-1]:
            h = layer(h, None)
        return h

    def features_from_tap(self, tokens: torch.Tensor) -> torch.Tensor:
        vm = self.model.vision_model
        h = vm.encoder.layers[-1](tokens, None)
        pooled = vm.post_layernorm(h[:, 0, :])
        return l2_normalize(self.model.visual_projection(pooled))

    # -- text ---------------------------------------------------------------
    def _ids(self, text: str) -> list[int]:
        return list(self.tokenizer(text)["input_ids"])

    def _embed_ids(self, ids) -> torch.Tensor:
        emb = self.model.text_model.embeddings.token_embedding
        return emb(torch.as_tensor(ids, dtype=torch.long))

    def class_tokens(self, class_name: str) -> torch.Tensor:
        ids = [i for i in self._ids(class_name) if i not in (self.bos_id, self.eos_id)]
        if not ids:
            raise ConfigurationError(f"class name {class_name!r} has no tokens")
        return self._embed_ids(ids)

    def _run_text(self, embeds: torch.Tensor, eos_pos: torch.Tensor) -> torch.Tensor:
        tm = self.model.text_model
        n, T, _ = embeds.shape
        h = embeds + tm.embeddings.position_embedding(torch.arange(T))[None]
        mask = torch.full((T, T), torch.finfo(h.dtype).min, dtype=h.dtype).triu(1)[None, None]
        for layer in tm.encoder.layers:
            h = layer(h, mask)
        h = tm.final_layer_norm(h)
        pooled = h[torch.arange(n), eos_pos]
        return l2_normalize(self.model.text_projection(pooled))

    def encode_prompts(self, context: torch.Tensor, class_tokens: Sequence[torch.Tensor]) -> torch.Tensor:
        B, n_ctx, _ = context.shape
        lengths = [t.shape[0] for t in class_tokens]
        self.check_prompt_length(n_ctx, max(lengths))
        bos = self._embed_ids([self.bos_id])
        eos = self._embed_ids([self.eos_id])
        T = 2 + n_ctx + max(lengths)
        seqs, eos_pos = [], []
        for cls, n_cls in zip(class_tokens, lengths):
            pad = eos.expand(T - 2 - n_ctx - n_cls, -1)
            tail = torch.cat([cls, eos, pad])[None].expand(B, -1, -1)
            seqs.append(torch.cat([bos[None].expand(B, -1, -1), context.to(bos.dtype), tail], dim=1))
            eos_pos.append(1 + n_ctx + n_cls)
        embeds = torch.stack(seqs, dim=1).reshape(B * len(class_tokens), T, -1)
        pos = torch.tensor(eos_pos).repeat(B)
        return self._run_text(embeds, pos).reshape(B, len(class_tokens), -1)

    def encode_bare(self, values: torch.Tensor) -> torch.Tensor:
        N, M, _ = values.shape
        self.check_prompt_length(M, 0)
        bos = self._embed_ids([self.bos_id])[None].expand(N, -1, -1)
        eos = self._embed_ids([self.eos_id])[None].expand(N, -1, -1)
        embeds = torch.cat([bos, values.to(bos.dtype), eos], dim=1)
        return self._run_text(embeds, torch.full((N,), M + 1))

    @torch.no_grad()
    def embed_handcrafted_classnames(self, class_names: Sequence[str], template: str = "a photo of a {}.") -> torch.Tensor:
        if len(class_names) == 0:
            raise ConfigurationError("class list is empty")
        rows = []
        for name in class_names:
            ids = self._ids(template.format(name))
            emb = self._embed_ids(ids)[None]
            rows.append(self._run_text(emb, torch.tensor([ids.index(self.eos_id)]))[0])
        return torch.stack(rows)

    def parameters_for_checksum(self) -> list[torch.Tensor]:
        return list(self.model.parameters())
