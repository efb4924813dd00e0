"""Prompt enrichment: turn a terse user prompt plus a reference image
into the detailed caption form the model was trained on.

Local analysis recovers the garment's two colors by nearest-palette
pixel counts and its pattern/scale by normalized cross-correlation
against the canonical pattern generators.  An optional external rewrite
service can be consulted instead; any failure there falls back to the
local template, so enrichment never raises on bad service behaviour.
"""

from __future__ import annotations

import base64
import logging
from dataclasses import dataclass

import numpy as np
import requests

from .data import (BACKGROUNDS, PALETTE, PATTERNS, REF_PATCH_BOX, SCALE_NAMES,
                   SCALES, parse_caption, parse_rich, pattern_bg_mask)
from .errors import DimensionError, EnrichmentError
from .model import is_tokenizable

log = logging.getLogger("garmentgen.enrich")

PATTERN_MATCH_THRESHOLD = 0.6
DEFAULT_BACKGROUND = "gray"

_PALETTE_NAMES = list(PALETTE)
_PALETTE_ARR = np.asarray([PALETTE[n] for n in _PALETTE_NAMES], dtype=np.float64)


@dataclass(frozen=True)
class PatchAnalysis:
    fg: str
    bg: str | None
    pattern: str | None    # best-correlating generator, regardless of threshold
    scale: int | None
    correlation: float


@dataclass(frozen=True)
class EnrichedPrompt:
    original: str
    text: str
    source: str            # "passthrough" | "template" | "external"
    warning: bool = False


def nearest_palette(region: np.ndarray) -> np.ndarray:
    """Index of the closest garment-palette color per pixel, [h,w]."""
    d = region.astype(np.float64)[..., None, :] - _PALETTE_ARR[None, None, :, :]
    return np.argmin(np.sum(d * d, axis=-1), axis=-1)


def classify_patch(region: np.ndarray) -> PatchAnalysis:
    """Dominant two palette colors and the best-matching pattern of a
    garment region.  Color ties break toward the pixel at the local
    origin (patterns place the primary color there by construction)."""
    if region.dtype != np.uint8 or region.ndim != 3 or region.shape[2] != 3:
        raise DimensionError(f"expected uint8 [h,w,3] region, got {region.dtype} {region.shape}")
    if region.shape[0] < 2 or region.shape[1] < 2:
        raise EnrichmentError(f"region {region.shape[:2]} too small to classify")
    nearest = nearest_palette(region)
    counts = np.bincount(nearest.reshape(-1), minlength=len(_PALETTE_NAMES))
    order = np.argsort(-counts, kind="stable")
    top = [i for i in order if counts[i] == counts[order[0]]]
    fg_idx = nearest[0, 0] if nearest[0, 0] in top else order[0]
    rest = [i for i in order if i != fg_idx and counts[i] > 0]
    bg_idx = rest[0] if rest else None

    if bg_idx is None:
        return PatchAnalysis(fg=_PALETTE_NAMES[fg_idx], bg=None,
                             pattern="solid", scale=None, correlation=1.0)

    observed = np.full(nearest.shape, 0.5)
    observed[nearest == fg_idx] = 1.0
    observed[nearest == bg_idx] = 0.0
    h, w = observed.shape
    obs = observed - observed.mean()
    obs_std = observed.std()

    best = ("solid", SCALES[0], -1.0)
    for pattern in PATTERNS:
        for scale in SCALES:
            template = 1.0 - pattern_bg_mask(pattern, scale, h, w).astype(np.float64)
            tpl = template - template.mean()
            tpl_std = template.std()
            if obs_std < 1e-12 or tpl_std < 1e-12:
                corr = 1.0 if obs_std < 1e-12 and tpl_std < 1e-12 else 0.0
            else:
                corr = float(np.mean(obs * tpl) / (obs_std * tpl_std))
            if corr > best[2]:
                best = (pattern, scale, corr)
    return PatchAnalysis(fg=_PALETTE_NAMES[fg_idx], bg=_PALETTE_NAMES[bg_idx],
                         pattern=best[0], scale=best[1], correlation=best[2])


def _fallback_accent(fg: str) -> str:
    return "black" if fg != "black" else "white"


def enrich(prompt: str, ref_image: np.ndarray) -> EnrichedPrompt:
    """Template enrichment.  A prompt already in the detailed form passes
    through untouched (enrichment is idempotent); otherwise the reference
    is analyzed and a detailed caption is assembled, keeping whatever
    background the user mentioned."""
    if parse_rich(prompt) is not None:
        return EnrichedPrompt(original=prompt, text=prompt, source="passthrough")
    top, left, h, w = REF_PATCH_BOX
    if ref_image.shape[0] < top + h or ref_image.shape[1] < left + w:
        raise DimensionError(f"reference image {ref_image.shape} smaller than the patch window")
    analysis = classify_patch(ref_image[top:top + h, left:left + w])
    warning = analysis.correlation < PATTERN_MATCH_THRESHOLD
    pattern_word = "textured" if warning else analysis.pattern
    if warning:
        log.warning("pattern match %.3f below %.2f; describing texture generically",
                    analysis.correlation, PATTERN_MATCH_THRESHOLD)
    scale_word = SCALE_NAMES[analysis.scale if analysis.scale is not None else SCALES[0]]
    accent = analysis.bg if analysis.bg is not None else _fallback_accent(analysis.fg)
    background = parse_caption(prompt).get("background", DEFAULT_BACKGROUND)
    text = (f"a person wearing a {scale_word} {analysis.fg} {pattern_word} "
            f"shirt with {accent} accents, {background} background")
    return EnrichedPrompt(original=prompt, text=text, source="template", warning=warning)


def _image_payload(img: np.ndarray) -> str:
    """Reference image as base64 PPM bytes (self-describing)."""
    header = b"P6\n%d %d\n255\n" % (img.shape[1], img.shape[0])
    return base64.b64encode(header + np.ascontiguousarray(img).tobytes()).decode()


def enrich_external(prompt: str, ref_image: np.ndarray, endpoint: str,
                    timeout: float = 10.0) -> EnrichedPrompt:
    """Ask a rewrite service for the detailed caption; fall back to the
    local template on any transport error, non-2xx status, malformed
    body, or a rewrite the model cannot tokenize."""
    payload = {"prompt": prompt, "image_base64": _image_payload(ref_image)}
    try:
        resp = requests.post(endpoint, json=payload, timeout=timeout)
        resp.raise_for_status()
        body = resp.json()
        rewritten = body.get("rewritten_prompt")
        if not isinstance(rewritten, str) or not rewritten.strip():
            raise ValueError(f"malformed response body: {body!r}")
        if not is_tokenizable(rewritten):
            raise ValueError(f"rewrite contains out-of-vocabulary words: {rewritten!r}")
        return EnrichedPrompt(original=prompt, text=rewritten, source="external")
    except (requests.RequestException, ValueError) as e:
        log.warning("external enrichment failed (%s); using local template", e)
        local = enrich(prompt, ref_image)
        return EnrichedPrompt(original=prompt, text=local.text,
                              source=local.source, warning=True)
