"""Encoder backends.

Real exports use a CLIP model (via transformers) for image/text embeddings,
a TorchScript inversion module for style codes, and a style-conditional
generator+encoder pipeline for relevance probing. The ``stub`` backend is a
deterministic stand-in keyed on input content, used for format-conformance
tests and dry runs on machines without model weights.
"""
from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from PIL import Image


class ImageEncoder(Protocol):
    identifier: str
    clip_dim: int

    def encode(self, images: Sequence[Image.Image]) -> np.ndarray: ...


class TextEncoder(Protocol):
    identifier: str
    clip_dim: int

    def encode(self, prompts: Sequence[str]) -> np.ndarray: ...


class StyleInverter(Protocol):
    identifier: str
    style_dim: int

    def invert(self, images: Sequence[Image.Image]) -> np.ndarray: ...


class StyleGenerator(Protocol):
    """Maps style codes straight to unit-norm image embeddings."""

    identifier: str
    style_dim: int
    clip_dim: int

    def embed_styles(self, styles: np.ndarray) -> np.ndarray: ...


def _seed_from(payload: bytes) -> int:
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")


def _unit_rows(mat: np.ndarray) -> np.ndarray:
    return mat / np.linalg.norm(mat, axis=1, keepdims=True)


class StubImageEncoder:
    """Content-keyed deterministic embeddings; stable across runs."""

    def __init__(self, clip_dim: int = 64):
        self.identifier = f"stub-image-{clip_dim}"
        self.clip_dim = clip_dim

    def encode(self, images):
        rows = []
        for img in images:
            seed = _seed_from(img.convert("RGB").tobytes())
            rng = np.random.default_rng(seed)
            rows.append(rng.normal(size=self.clip_dim))
        return _unit_rows(np.stack(rows)).astype(np.float32)


class StubTextEncoder:
    def __init__(self, clip_dim: int = 64):
        self.identifier = f"stub-text-{clip_dim}"
        self.clip_dim = clip_dim

    def encode(self, prompts):
        rows = []
        for prompt in prompts:
            rng = np.random.default_rng(_seed_from(prompt.encode("utf-8")))
            rows.append(rng.normal(size=self.clip_dim))
        return _unit_rows(np.stack(rows)).astype(np.float32)


class StubStyleInverter:
    def __init__(self, style_dim: int = 352):
        self.identifier = f"stub-inverter-{style_dim}"
        self.style_dim = style_dim

    def invert(self, images):
        rows = []
        for img in images:
            seed = _seed_from(b"s" + img.convert("RGB").tobytes())
            rng = np.random.default_rng(seed)
            rows.append(rng.normal(size=self.style_dim))
        return np.stack(rows).astype(np.float32)


class StubStyleGenerator:
    """Fixed random linear map from style space to the embedding sphere."""

    def __init__(self, style_dim: int = 352, clip_dim: int = 64,
                 seed: int = 0):
        self.identifier = f"stub-generator-{style_dim}x{clip_dim}-s{seed}"
        self.style_dim = style_dim
        self.clip_dim = clip_dim
        rng = np.random.default_rng([seed, 0xB1])
        self._map = rng.normal(size=(clip_dim, style_dim))
        self._map /= np.sqrt(style_dim)

    def embed_styles(self, styles):
        raw = np.asarray(styles, dtype=np.float64) @ self._map.T
        return _unit_rows(raw)


class ClipImageEncoder:
    """CLIP vision tower through transformers; needs downloaded weights."""

    def __init__(self, model_name: str = "openai/clip-vit-base-patch32"):
        import torch  # deferred: heavyweight optional dependency
        from transformers import CLIPModel, CLIPProcessor

        self._torch = torch
        self._model = CLIPModel.from_pretrained(model_name)
        self._model.eval()
        self._processor = CLIPProcessor.from_pretrained(model_name)
        self.identifier = model_name
        self.clip_dim = self._model.config.projection_dim

    def encode(self, images):
        inputs = self._processor(images=list(images), return_tensors="pt")
        with self._torch.no_grad():
            feats = self._model.get_image_features(**inputs)
            feats = feats / feats.norm(dim=-1, keepdim=True)
        return feats.cpu().numpy().astype(np.float32)


class ClipTextEncoder:
    def __init__(self, model_name: str = "openai/clip-vit-base-patch32"):
        import torch
        from transformers import CLIPModel, CLIPProcessor

        self._torch = torch
        self._model = CLIPModel.from_pretrained(model_name)
        self._model.eval()
        self._processor = CLIPProcessor.from_pretrained(model_name)
        self.identifier = model_name
        self.clip_dim = self._model.config.projection_dim

    def encode(self, prompts):
        inputs = self._processor(text=list(prompts), return_tensors="pt",
                                 padding=True)
        with self._torch.no_grad():
            feats = self._model.get_text_features(**inputs)
            feats = feats / feats.norm(dim=-1, keepdim=True)
        return feats.cpu().numpy().astype(np.float32)


class TorchScriptInverter:
    """Wraps a scripted inversion module: (n,3,H,W) float in [0,1] ->
    (n, style_dim) style codes. Weight files are supplied by the user."""

    def __init__(self, module_path: str | Path, style_dim: int,
                 image_size: int = 256):
        import torch

        self._torch = torch
        self._module = torch.jit.load(str(module_path)).eval()
        self._size = image_size
        self.identifier = f"torchscript:{Path(module_path).name}"
        self.style_dim = style_dim

    def invert(self, images):
        arrays = []
        for img in images:
            resized = img.convert("RGB").resize((self._size, self._size))
            arrays.append(np.asarray(resized, dtype=np.float32) / 255.0)
        batch = self._torch.from_numpy(
            np.stack(arrays).transpose(0, 3, 1, 2))
        with self._torch.no_grad():
            codes = self._module(batch)
        return codes.cpu().numpy().astype(np.float32)
