"""Texture/text metrics and the reproducible benchmark harness.

texture_sim compares two garment regions through a 35-dim descriptor:
a 27-bin RGB histogram and an 8-bin gradient-orientation histogram,
each independently unit-normalized, concatenated, and scored by cosine.  It is
symmetric and lands in [0, 1] because both halves are non-negative.

The benchmark generates a fixed number of seeded samples per reference,
once with conditioning and once without (same captions and seeds), and
writes rows plus aggregates computed purely from those rows.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from . import diffusion
from .data import BACKGROUNDS, Dataset, REF_PATCH_BOX, parse_caption
from .enrich import classify_patch, enrich
from .errors import DimensionError, MetricError
from .model import ToyUNet, generate_batch

_BG_NAMES = list(BACKGROUNDS)
_BG_ARR = np.asarray([BACKGROUNDS[n] for n in _BG_NAMES], dtype=np.float64)


def color_histogram(pixels: np.ndarray) -> np.ndarray:
    """Unit-L2 27-bin histogram (3 bins per channel) of uint8 [m,3]."""
    if pixels.dtype != np.uint8 or pixels.ndim != 2 or pixels.shape[1] != 3:
        raise DimensionError(f"expected uint8 [m,3] pixels, got {pixels.dtype} {pixels.shape}")
    if pixels.shape[0] == 0:
        raise MetricError("empty pixel set")
    bins = (pixels.astype(np.int64) * 3) // 256
    idx = bins[:, 0] * 9 + bins[:, 1] * 3 + bins[:, 2]
    hist = np.bincount(idx, minlength=27).astype(np.float64)
    norm = np.linalg.norm(hist)
    return hist / norm if norm > 0 else hist


def gradient_histogram(region: np.ndarray) -> np.ndarray:
    """Unit-L2 8-bin gradient-orientation histogram, magnitude-weighted,
    of a uint8 [h,w,3] region.  A flat region yields the zero vector."""
    if region.dtype != np.uint8 or region.ndim != 3 or region.shape[2] != 3:
        raise DimensionError(f"expected uint8 [h,w,3] region, got {region.dtype} {region.shape}")
    if region.shape[0] < 2 or region.shape[1] < 2:
        raise MetricError(f"region {region.shape[:2]} too small for gradients")
    gray = region.astype(np.float64).mean(axis=2)
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx)  # (-pi, pi]
    bins = np.clip(((ang + np.pi) / (2 * np.pi / 8)).astype(np.int64), 0, 7)
    hist = np.bincount(bins.reshape(-1), weights=mag.reshape(-1), minlength=8)
    norm = np.linalg.norm(hist)
    return hist / norm if norm > 0 else hist


def texture_features(region: np.ndarray, pixels: np.ndarray | None = None) -> np.ndarray:
    """35-dim descriptor: unit color histogram ++ unit gradient
    histogram.  `pixels` restricts the color half (e.g. to masked
    pixels); the gradient half always uses the full rectangle."""
    px = region.reshape(-1, 3) if pixels is None else pixels
    return np.concatenate([color_histogram(px), gradient_histogram(region)])


def _bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise MetricError("mask selects no pixels")
    return rows[0], rows[-1] + 1, cols[0], cols[-1] + 1


def texture_sim(generated: np.ndarray, mask: np.ndarray, reference: np.ndarray) -> float:
    """Cosine similarity in [0,1] between the masked garment region of a
    generated image and the reference patch.  Symmetric in the two
    texture regions by construction."""
    if generated.shape != reference.shape:
        raise DimensionError(f"image shapes differ: {generated.shape} vs {reference.shape}")
    if mask.shape != generated.shape[:2]:
        raise DimensionError(f"mask {mask.shape} does not cover image {generated.shape[:2]}")
    r0, r1, c0, c1 = _bbox(mask.astype(bool))
    gen_region = generated[r0:r1, c0:c1]
    gen_pixels = generated[mask.astype(bool)]
    top, left, h, w = REF_PATCH_BOX
    ref_region = reference[top:top + h, left:left + w]
    f_gen = texture_features(gen_region, gen_pixels)
    f_ref = texture_features(ref_region)
    n1, n2 = np.linalg.norm(f_gen), np.linalg.norm(f_ref)
    if n1 == 0 or n2 == 0:
        return 0.0
    return float(np.clip(np.dot(f_gen, f_ref) / (n1 * n2), 0.0, 1.0))


def _dominant_background(image: np.ndarray, mask: np.ndarray) -> str:
    outside = image[~mask.astype(bool)]
    d = outside.astype(np.float64)[:, None, :] - _BG_ARR[None, :, :]
    nearest = np.argmin(np.sum(d * d, axis=-1), axis=-1)
    return _BG_NAMES[int(np.bincount(nearest, minlength=len(_BG_NAMES)).argmax())]


def text_score(generated: np.ndarray, mask: np.ndarray, caption: str) -> float | None:
    """Fraction of the caption's checkable claims (garment color,
    pattern, scene background) that hold in the image.  None when the
    caption makes no checkable claim."""
    attrs = parse_caption(caption)
    checks = []
    mask = mask.astype(bool)
    region = None
    if "fg" in attrs or ("pattern" in attrs and attrs["pattern"] != "textured"):
        r0, r1, c0, c1 = _bbox(mask)
        region = classify_patch(generated[r0:r1, c0:c1])
    if "fg" in attrs:
        checks.append(region.fg == attrs["fg"])
    if "pattern" in attrs and attrs["pattern"] != "textured":
        checks.append(region.pattern == attrs["pattern"])
    if "background" in attrs:
        if mask.all():
            raise MetricError("mask covers the whole image; no background to check")
        checks.append(_dominant_background(generated, mask) == attrs["background"])
    if not checks:
        return None
    return float(sum(checks)) / len(checks)


# ----------------------------------------------------------------------
# benchmark


def aggregate_rows(rows: list[dict]) -> dict:
    """Pure aggregation over benchmark rows; re-runnable by anyone."""
    out: dict = {}
    for arm in ("conditioned", "baseline"):
        tex = [r["texture_sim"] for r in rows if r["arm"] == arm]
        txt = [r["text_score"] for r in rows if r["arm"] == arm and r["text_score"] is not None]
        if tex:
            out[arm] = {
                "n": len(tex),
                "texture_sim_mean": round(float(np.mean(tex)), 6),
                "texture_sim_std": round(float(np.std(tex)), 6),
                "text_score_mean": round(float(np.mean(txt)), 6) if txt else None,
            }
    if "conditioned" in out and "baseline" in out:
        out["texture_gap"] = round(out["conditioned"]["texture_sim_mean"]
                                   - out["baseline"]["texture_sim_mean"], 6)
    return out


def run_benchmark(unet: ToyUNet, schedule: diffusion.NoiseSchedule, dataset: Dataset,
                  seeds: list[int] | None = None, tier: str = "simple",
                  guidance: diffusion.GuidanceConfig | None = None,
                  baseline: bool = True, enrich_captions: bool = False,
                  max_samples: int | None = None, out_dir=None) -> dict:
    """Generate `len(seeds)` images per reference (conditioned, plus an
    unconditioned-by-reference arm with identical captions and seeds when
    `baseline`), score each row, and return {meta, rows, aggregates}.

    Rows are deterministic given (weights, dataset, seeds, tier,
    guidance), and aggregates are a pure function of rows.
    """
    seeds = list(range(5)) if seeds is None else list(seeds)
    guidance = guidance or diffusion.GuidanceConfig()
    n = len(dataset) if max_samples is None else min(max_samples, len(dataset))
    rows = []
    for i in range(n):
        sample = dataset[i]
        cap = sample.captions[tier]
        if enrich_captions:
            cap = enrich(cap, sample.reference).text
        arms = [("conditioned", sample.reference)]
        if baseline:
            arms.append(("baseline", None))
        for arm, ref in arms:
            imgs = generate_batch(unet, schedule, cap, ref, guidance, seeds)
            for seed, img in zip(seeds, imgs):
                rows.append({
                    "id": sample.ident,
                    "seed": int(seed),
                    "arm": arm,
                    "caption": cap,
                    "texture_sim": round(texture_sim(img, sample.mask, sample.reference), 6),
                    "text_score": (lambda s: None if s is None else round(s, 6))(
                        text_score(img, sample.mask, cap)),
                })
    report = {
        "meta": {
            "n_references": n,
            "seeds": seeds,
            "tier": tier,
            "enriched": enrich_captions,
            "guidance_weight": guidance.weight,
            "sampling_steps": guidance.num_steps,
            "schedule_steps": schedule.steps,
            "weights_checksum": unet.param_checksum(),
        },
        "rows": rows,
        "aggregates": aggregate_rows(rows),
    }
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def _report_text(report: dict) -> str:
    lines = []
    meta = report["meta"]
    lines.append("benchmark report")
    for k in sorted(meta):
        lines.append(f"  {k}: {meta[k]}")
    lines.append("")
    header = f"{'id':>6} {'seed':>4} {'arm':<12} {'texture_sim':>11} {'text_score':>10}"
    lines.append(header)
    lines.append("-" * len(header))
    for r in report["rows"]:
        ts = "n/a" if r["text_score"] is None else f"{r['text_score']:.6f}"
        lines.append(f"{r['id']:>6} {r['seed']:>4} {r['arm']:<12} "
                     f"{r['texture_sim']:>11.6f} {ts:>10}")
    lines.append("")
    for arm, agg in report["aggregates"].items():
        if isinstance(agg, dict):
            txt = "n/a" if agg["text_score_mean"] is None else f"{agg['text_score_mean']:.6f}"
            lines.append(f"{arm}: texture_sim {agg['texture_sim_mean']:.6f} "
                         f"+/- {agg['texture_sim_std']:.6f}  text_score {txt}  (n={agg['n']})")
    if "texture_gap" in report["aggregates"]:
        lines.append(f"texture_gap: {report['aggregates']['texture_gap']:.6f}")
    lines.append("")
    return "\n".join(lines)


def write_report(report: dict, out_dir) -> Path:
    """Write report.json and report.txt; each file lands atomically."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, payload in (("report.json", json.dumps(report, indent=1, sort_keys=True) + "\n"),
                          ("report.txt", _report_text(report))):
        fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=name + ".")
        try:
            with os.fdopen(fd, "w") as f:
                f.write(payload)
            os.replace(tmp, out_dir / name)
        except Exception:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    return out_dir
