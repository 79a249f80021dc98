"""Text-driven editing on top of a trained mapper.

Prompts are rendered from a template ("face" -> "face with smile and
eyeglasses"), looked up as whole-prompt embeddings in a text table, and their
difference conditions the mapper. The predicted direction is filtered through
the relevance matrix and added onto the source style code. Editing never
tokenizes text itself; embeddings always arrive via tables.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .delta_mapper import mapper_forward
from .errors import ConfigError, DimensionError, UnknownAttributeError
from .relevance import FilterConfig, RelevanceMatrix, apply_filter, channel_relevance


@dataclass(frozen=True)
class PromptTemplate:
    """Renders the source prompt (bare category) and attribute-target prompts."""

    category: str = "face"
    joiner: str = " and "
    pattern: str = "{category} with {attrs}"

    def render(self, attrs: Sequence[str] = ()) -> str:
        attrs = tuple(attrs)
        if not attrs:
            return self.category
        if len(set(attrs)) != len(attrs):
            raise UnknownAttributeError(
                f"attributes must be unique in a prompt, got {attrs}")
        shown = self.joiner.join(a.replace("_", " ") for a in attrs)
        return self.pattern.format(category=self.category, attrs=shown)


def build_text_delta(attrs: Sequence[str], table, template: PromptTemplate,
                     source_attrs: Sequence[str] = ()) -> np.ndarray:
    """Difference of target and source prompt embeddings.

    The default source is the bare category, which pushes every requested
    attribute in its positive direction; passing ``source_attrs`` reproduces
    the two-description setting, where only the differing attributes act.
    """
    attrs = tuple(attrs)
    if not attrs:
        raise UnknownAttributeError("at least one target attribute is required")
    target_prompt = template.render(attrs)
    source_prompt = template.render(tuple(source_attrs))
    missing = [p for p in (source_prompt, target_prompt) if p not in table]
    if missing:
        raise UnknownAttributeError(
            f"prompt(s) not present in the text table: {missing}")
    return table.get(target_prompt) - table.get(source_prompt)


class EditResult(NamedTuple):
    s_prime: np.ndarray
    delta: np.ndarray


def edit(checkpoint, s: np.ndarray, i: np.ndarray, delta_t: np.ndarray,
         matrix: RelevanceMatrix | None = None,
         config: FilterConfig = FilterConfig()) -> EditResult:
    """Predict, filter and apply an edit; returns (s', filtered direction).

    A zero text delta short-circuits to the identity: the mapper's output at
    a zero condition is not analytically zero, and "nothing requested" must
    mean "nothing changes".
    """
    params = checkpoint.params
    s = np.asarray(s, dtype=np.float64)
    i = np.asarray(i, dtype=np.float64)
    delta_t = np.asarray(delta_t, dtype=np.float64)
    if s.shape != (params.layout.total_channels,):
        raise DimensionError("source style length does not match the layout")
    if i.shape != (params.clip_dim,) or delta_t.shape != (params.clip_dim,):
        raise DimensionError("embedding widths do not match the checkpoint")
    if np.linalg.norm(delta_t) == 0.0:
        return EditResult(s.copy(), np.zeros_like(s))
    if config.beta > 0 and matrix is None:
        raise ConfigError(
            "filtering with beta > 0 needs a relevance matrix")

    delta_s, _ = mapper_forward(params, s, i, delta_t)
    if matrix is not None:
        scores = channel_relevance(matrix, delta_t)
        filtered = apply_filter(delta_s, scores, config)
    else:
        filtered = config.strength * delta_s
    return EditResult(s + filtered, filtered)


def interpolate(s_a: np.ndarray, s_b: np.ndarray, omega: float) -> np.ndarray:
    """Convex combination of two edited codes: omega picks a, 1-omega picks b."""
    if not 0.0 <= omega <= 1.0:
        raise ConfigError(f"interpolation weight {omega} outside [0, 1]")
    s_a = np.asarray(s_a, dtype=np.float64)
    s_b = np.asarray(s_b, dtype=np.float64)
    if s_a.shape != s_b.shape:
        raise DimensionError("interpolation endpoints must match in shape")
    return omega * s_a + (1.0 - omega) * s_b
