"""Optional adapter over a pretrained open_clip checkpoint.

Not exercised by the test-suite; requires ``torch``, ``open_clip_torch`` and
``Pillow``. The adapter follows the CoOp text path (soft context spliced in
after the start token, features read at the end-of-text position) and takes
local features from the final-layer patch tokens projected into the joint
space, as in GL-MCM.
"""
from __future__ import annotations

from collections.abc import Mapping

import numpy as np

from .backend import EncoderSpec, ImageFeatures, l2_normalize
from .errors import ConfigError, DimensionError, VocabularyError

LOCAL_FEATURES = "final-layer patch tokens after ln_post, projected by visual.proj"


def _require():
    try:
        import open_clip  # noqa: F401
        import torch  # noqa: F401
    except ImportError as exc:
        raise ConfigError(
            "the clip-adapter backend needs torch and open_clip_torch (pip install 'artifact[clip]')"
        ) from exc


class _BpeVocab(Mapping):
    """Word -> embedding row, for words that are a single BPE token."""

    def __init__(self, tokenizer, weight: np.ndarray):
        self._tok = tokenizer
        self._w = weight

    def ids(self, text: str) -> list:
        ids = self._tok([text])[0].tolist()
        end = ids.index(max(ids))  # end-of-text has the largest id
        return ids[1:end]

    def __getitem__(self, word):
        ids = self.ids(word)
        if len(ids) != 1:
            raise KeyError(word)
        return self._w[ids[0]]

    def __iter__(self):
        return iter(())

    def __len__(self):
        return self._w.shape[0]


class ClipEncoderSpec(EncoderSpec):
    def embed(self, text: str) -> np.ndarray:
        ids = self.vocab.ids(text)
        if not ids:
            raise VocabularyError(text)
        return np.asarray(self.vocab._w[ids], dtype=np.float32)


class ClipAdapter:
    kind = "clip-adapter"

    def __init__(self, model_name: str = "ViT-B-16", pretrained: str = "openai", device: str = "cpu"):
        _require()
        import open_clip
        import torch

        self.torch = torch
        self.model_name, self.pretrained, self.device = model_name, pretrained, device
        model, _, self.preprocess = open_clip.create_model_and_transforms(model_name, pretrained=pretrained)
        self.model = model.to(device).eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.tokenizer = open_clip.get_tokenizer(model_name)
        weight = self.model.token_embedding.weight.detach().cpu().numpy()
        self.spec = ClipEncoderSpec(
            embed_dim=int(self.model.text_projection.shape[1]),
            token_dim=weight.shape[1],
            num_locals=int(self.model.visual.grid_size[0] * self.model.visual.grid_size[1]),
            vocab=_BpeVocab(self.tokenizer, weight),
            max_context_len=int(self.model.context_length) - 3,  # start, '.', end
        )

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "model": self.model_name,
            "pretrained": self.pretrained,
            "embed_dim": self.spec.embed_dim,
            "num_locals": self.spec.num_locals,
            "local_features": LOCAL_FEATURES,
        }

    # -- text ------------------------------------------------------------
    def _text_forward(self, ctx, prompt):
        torch, m = self.torch, self.model
        n = m.context_length
        # tokenising "." yields [start, '.', end, pad...]
        special = m.token_embedding(self.tokenizer(["."]).to(self.device))[0]
        start, dot, end = special[0:1], special[1:2], special[2:3]
        rows, eot = [], []
        for c in range(prompt.num_classes):
            w = torch.as_tensor(prompt.class_tokens[c], device=self.device)
            v = ctx if ctx.dim() == 2 else ctx[c]
            seq = torch.cat([start, v, w, dot, end], dim=0)
            eot.append(seq.shape[0] - 1)
            rows.append(torch.cat([seq, special[3:3 + n - seq.shape[0]]], dim=0))
        x = torch.stack(rows) + m.positional_embedding
        x = m.transformer(x, attn_mask=m.attn_mask)
        x = m.ln_final(x)
        x = x[torch.arange(len(rows)), torch.as_tensor(eot)] @ m.text_projection
        return x / x.norm(dim=-1, keepdim=True)

    def encode_text_vjp(self, prompt):
        torch = self.torch
        if prompt.length + max(len(w) for w in prompt.class_tokens) > self.spec.max_context_len:
            raise DimensionError("prompt exceeds the CLIP context length")
        ctx = torch.tensor(np.asarray(prompt.context, dtype=np.float32), device=self.device, requires_grad=True)
        with torch.enable_grad():
            t = self._text_forward(ctx, prompt)
        feats = t.detach().double().cpu().numpy()

        def vjp(grad_t):
            g = torch.as_tensor(np.asarray(grad_t, dtype=np.float32), device=self.device)
            (gc,) = torch.autograd.grad(t, ctx, grad_outputs=g, retain_graph=True)
            return gc.double().cpu().numpy()

        return feats, vjp

    def encode_text(self, prompt) -> np.ndarray:
        with self.torch.no_grad():
            ctx = self.torch.tensor(np.asarray(prompt.context, dtype=np.float32), device=self.device)
            return self._text_forward(ctx, prompt).double().cpu().numpy()

    # -- image -----------------------------------------------------------
    def encode_paths(self, paths, batch_size: int = 64):
        from PIL import Image

        torch, visual = self.torch, self.model.visual
        visual.output_tokens = True
        gs, ls = [], []
        with torch.no_grad():
            for i in range(0, len(paths), batch_size):
                batch = torch.stack([self.preprocess(Image.open(p).convert("RGB")) for p in paths[i:i + batch_size]])
                pooled, tokens = visual(batch.to(self.device))
                gs.append(pooled.double().cpu().numpy())
                ls.append((tokens @ visual.proj).double().cpu().numpy())
        return l2_normalize(np.concatenate(gs)), l2_normalize(np.concatenate(ls))

    def encode_image(self, path) -> ImageFeatures:
        g, loc = self.encode_paths([path])
        return ImageFeatures(g[0], loc[0])
