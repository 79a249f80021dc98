"""Export real embeddings into the style-editing pipeline's file formats."""

from .encoders import (
    StubImageEncoder,
    StubStyleGenerator,
    StubStyleInverter,
    StubTextEncoder,
)
from .export import (
    ExportManifest,
    attribute_prompts,
    export_image_dataset,
    export_text_table,
    probe_relevance,
    render_prompt,
)

__version__ = "0.1.0"

__all__ = [
    "ExportManifest", "StubImageEncoder", "StubStyleGenerator",
    "StubStyleInverter", "StubTextEncoder", "attribute_prompts",
    "export_image_dataset", "export_text_table", "probe_relevance",
    "render_prompt",
]
