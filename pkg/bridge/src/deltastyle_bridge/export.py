"""Export jobs: images to a dataset file, prompts to a text table, and a
generator probe to a relevance file, each with a JSON manifest.

Per-matrix checksums are printed at export time and recorded in the
manifest so the consumer can verify what it loads byte for byte.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from . import formats
from .encoders import ImageEncoder, StyleGenerator, StyleInverter, TextEncoder

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".webp")

# Prompt construction mirrors the consumer's template exactly: the bare
# category is the source prompt and attributes join with " and ". Whole
# sentences are embedded; there is no per-word arithmetic anywhere.
PROMPT_CATEGORY = "face"
PROMPT_JOINER = " and "
PROMPT_PATTERN = "{category} with {attrs}"


def render_prompt(attrs: Sequence[str] = (),
                  category: str = PROMPT_CATEGORY) -> str:
    attrs = tuple(attrs)
    if not attrs:
        return category
    if len(set(attrs)) != len(attrs):
        raise ValueError(f"attributes must be unique in a prompt: {attrs}")
    shown = PROMPT_JOINER.join(a.replace("_", " ") for a in attrs)
    return PROMPT_PATTERN.format(category=category, attrs=shown)


@dataclass
class ExportManifest:
    kind: str
    source: str
    models: dict[str, str]
    count: int
    dims: dict[str, int]
    checksums: dict[str, str]
    outputs: dict[str, str] = field(default_factory=dict)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2,
                                         sort_keys=True) + "\n")


def _list_images(folder: str | Path) -> list[Path]:
    folder = Path(folder)
    if not folder.is_dir():
        raise FileNotFoundError(f"image folder not found: {folder}")
    files = sorted(p for p in folder.iterdir()
                   if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ValueError(f"no images found under {folder}")
    return files


def export_image_dataset(folder: str | Path, out: str | Path,
                         image_encoder: ImageEncoder,
                         style_inverter: StyleInverter,
                         batch_size: int = 32) -> ExportManifest:
    """Embed and invert every image in ``folder`` into one dataset file."""
    files = _list_images(folder)
    images_rows, styles_rows = [], []
    for start in range(0, len(files), batch_size):
        chunk = files[start:start + batch_size]
        loaded = [Image.open(p) for p in chunk]
        images_rows.append(np.asarray(image_encoder.encode(loaded)))
        styles_rows.append(np.asarray(style_inverter.invert(loaded)))
        for img in loaded:
            img.close()
    images = np.vstack(images_rows)
    styles = np.vstack(styles_rows)
    checksums = formats.write_dataset(out, images, styles)
    manifest = ExportManifest(
        kind="image_dataset",
        source=str(folder),
        models={"image_encoder": image_encoder.identifier,
                "style_inverter": style_inverter.identifier},
        count=len(files),
        dims={"clip_dim": images.shape[1], "style_dim": styles.shape[1]},
        checksums=checksums,
        outputs={"dataset": str(out)},
    )
    manifest.write(Path(out).with_suffix(".manifest.json"))
    print(f"exported {len(files)} records -> {out}")
    for name, value in checksums.items():
        print(f"  checksum {name}: {value}")
    return manifest


def export_text_table(prompts: Sequence[str], out: str | Path,
                      text_encoder: TextEncoder,
                      source: str = "<prompt list>") -> ExportManifest:
    """Embed whole prompts into a text table file, order preserved."""
    prompts = list(prompts)
    if not prompts:
        raise ValueError("no prompts to export")
    vectors = np.asarray(text_encoder.encode(prompts))
    checksums = formats.write_text_table(out, prompts, vectors)
    manifest = ExportManifest(
        kind="text_table",
        source=source,
        models={"text_encoder": text_encoder.identifier},
        count=len(prompts),
        dims={"clip_dim": vectors.shape[1]},
        checksums=checksums,
        outputs={"table": str(out)},
    )
    manifest.write(Path(out).with_suffix(".manifest.json"))
    print(f"exported {len(prompts)} prompts -> {out}")
    for name, value in checksums.items():
        print(f"  checksum {name}: {value}")
    return manifest


def attribute_prompts(attrs: Sequence[str],
                      category: str = PROMPT_CATEGORY,
                      pairs: bool = False) -> list[str]:
    """Source prompt plus one target prompt per attribute (and pair)."""
    attrs = list(attrs)
    out = [render_prompt((), category)]
    out += [render_prompt((a,), category) for a in attrs]
    if pairs:
        out += [render_prompt((a, b), category)
                for i, a in enumerate(attrs) for b in attrs[i + 1:]]
    return out


def probe_relevance(generator: StyleGenerator, out: str | Path,
                    probe: float = 0.1, samples_per_channel: int = 64,
                    seed: int = 0) -> ExportManifest:
    """Two-sided per-channel probe of a generator's embedding response.

    Row c is the unit-normalized mean of embed(s + p e_c) - embed(s - p e_c)
    over isotropic sample codes; channels with no response stay zero.
    """
    if probe <= 0:
        raise ValueError("probe magnitude must be positive")
    if samples_per_channel < 1:
        raise ValueError("samples_per_channel must be >= 1")
    style_dim = generator.style_dim
    rows = np.zeros((style_dim, generator.clip_dim))
    for c in range(style_dim):
        rng = np.random.default_rng([seed, c])
        base = rng.normal(size=(samples_per_channel, style_dim))
        up = base.copy()
        up[:, c] += probe
        down = base.copy()
        down[:, c] -= probe
        diff = (np.asarray(generator.embed_styles(up))
                - np.asarray(generator.embed_styles(down)))
        mean = diff.mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm >= 1e-9:
            rows[c] = mean / norm
    checksums = formats.write_relevance(out, rows, probe, samples_per_channel)
    manifest = ExportManifest(
        kind="relevance_matrix",
        source=generator.identifier,
        models={"generator": generator.identifier},
        count=style_dim,
        dims={"clip_dim": generator.clip_dim, "style_dim": style_dim},
        checksums=checksums,
        outputs={"relevance": str(out)},
    )
    manifest.write(Path(out).with_suffix(".manifest.json"))
    print(f"probed {style_dim} channels -> {out}")
    for name, value in checksums.items():
        print(f"  checksum {name}: {value}")
    return manifest
