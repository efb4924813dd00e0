"""Synthetic garment corpus.

Each sample pairs a reference image (the garment patch alone on neutral
ground) with a target image (a stylised person wearing that garment on a
colored background) plus a rectangular garment mask and captions at three
detail tiers.  Pattern tiles are generated in local patch coordinates, so
the garment pixels inside the target mask reproduce the reference pattern
exactly — the conditioning signal is real, not approximate.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ppm
from .errors import ConfigError, DimensionError

IMAGE_SIZE = 32

PALETTE: dict[str, tuple[int, int, int]] = {
    "red": (230, 30, 30),
    "green": (30, 200, 40),
    "blue": (40, 60, 230),
    "yellow": (235, 220, 40),
    "orange": (240, 150, 50),
    "purple": (160, 60, 200),
    "white": (245, 245, 245),
    "black": (25, 25, 25),
}
BACKGROUNDS: dict[str, tuple[int, int, int]] = {
    "gray": (128, 128, 128),
    "navy": (25, 30, 90),
    "cream": (245, 235, 200),
    "olive": (110, 120, 60),
}
PATTERNS = ("solid", "stripes", "checker", "dots")
SCALES = (2, 4)
SCALE_NAMES = {2: "fine", 4: "coarse"}
NAME_TO_SCALE = {v: k for k, v in SCALE_NAMES.items()}

NEUTRAL = (190, 190, 190)   # reference ground
SKIN = (205, 170, 140)
LEGS = (60, 55, 50)

# (top, left, height, width) boxes inside the 32x32 canvas.
REF_PATCH_BOX = (6, 8, 20, 16)
TARGET_MASK_BOX = (10, 10, 16, 12)
HEAD_BOX = (3, 13, 6, 6)
LEG_BOXES = ((26, 12, 6, 3), (26, 17, 6, 3))

CAPTION_TIERS = ("fixed", "simple", "rich")


@dataclass(frozen=True)
class GarmentSpec:
    pattern: str
    fg: str
    bg: str
    scale: int

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ConfigError(f"unknown pattern {self.pattern!r}")
        if self.fg not in PALETTE or self.bg not in PALETTE:
            raise ConfigError(f"unknown colors {self.fg!r}/{self.bg!r}")
        if self.fg == self.bg:
            raise ConfigError("garment needs two distinct colors")
        if self.scale not in SCALES:
            raise ConfigError(f"scale must be one of {SCALES}, got {self.scale}")

    def to_dict(self) -> dict:
        return {"pattern": self.pattern, "fg": self.fg, "bg": self.bg, "scale": self.scale}

    @classmethod
    def from_dict(cls, d: dict) -> "GarmentSpec":
        return cls(pattern=d["pattern"], fg=d["fg"], bg=d["bg"], scale=int(d["scale"]))


def pattern_bg_mask(pattern: str, scale: int, h: int, w: int) -> np.ndarray:
    """Boolean [h,w] map of secondary-color pixels in local coordinates.
    (0,0) is always primary, and the primary color always holds a strict
    majority — the dominant color of any patch is the fg by construction
    (ties broken by the origin pixel, see classify_patch)."""
    r = np.arange(h)[:, None]
    c = np.arange(w)[None, :]
    if pattern == "solid":
        return np.broadcast_to(r >= h - scale, (h, w)).copy()
    if pattern == "stripes":
        return np.broadcast_to((r // scale) % 2 == 1, (h, w)).copy()
    if pattern == "checker":
        return ((r // scale) + (c // scale)) % 2 == 1
    if pattern == "dots":
        return ((r // scale) % 2 == 1) & ((c // scale) % 2 == 1)
    raise ConfigError(f"unknown pattern {pattern!r}")


def pattern_tile(spec: GarmentSpec, h: int, w: int) -> np.ndarray:
    """uint8 [h,w,3] garment texture in local patch coordinates."""
    bg = pattern_bg_mask(spec.pattern, spec.scale, h, w)
    tile = np.empty((h, w, 3), dtype=np.uint8)
    tile[...] = PALETTE[spec.fg]
    tile[bg] = PALETTE[spec.bg]
    return tile


def _fill(img: np.ndarray, box: tuple, rgb: tuple) -> None:
    top, left, h, w = box
    img[top:top + h, left:left + w] = rgb


def render_reference(spec: GarmentSpec) -> np.ndarray:
    """Garment patch alone on neutral ground."""
    img = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    img[...] = NEUTRAL
    top, left, h, w = REF_PATCH_BOX
    img[top:top + h, left:left + w] = pattern_tile(spec, h, w)
    return img


def render_target(spec: GarmentSpec, background: str,
                  box: tuple | None = None, person: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Stylised person (or a free-floating patch) wearing the garment.
    Returns (uint8 image, boolean garment mask)."""
    if background not in BACKGROUNDS:
        raise ConfigError(f"unknown background {background!r}")
    box = TARGET_MASK_BOX if box is None else box
    top, left, h, w = box
    if top < 0 or left < 0 or top + h > IMAGE_SIZE or left + w > IMAGE_SIZE:
        raise DimensionError(f"garment box {box} leaves the canvas")
    img = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    img[...] = BACKGROUNDS[background]
    if person:
        _fill(img, HEAD_BOX, SKIN)
        for leg in LEG_BOXES:
            _fill(img, leg, LEGS)
    img[top:top + h, left:left + w] = pattern_tile(spec, h, w)
    mask = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
    mask[top:top + h, left:left + w] = True
    return img, mask


# ----------------------------------------------------------------------
# captions


def caption(spec: GarmentSpec, tier: str, background: str) -> str:
    if tier == "fixed":
        return "a photo of a person"
    if tier == "simple":
        return f"a person wearing a shirt, {background} background"
    if tier == "rich":
        return (f"a person wearing a {SCALE_NAMES[spec.scale]} {spec.fg} {spec.pattern} "
                f"shirt with {spec.bg} accents, {background} background")
    raise ConfigError(f"unknown caption tier {tier!r}; expected one of {CAPTION_TIERS}")


def _words(text: str) -> list[str]:
    return text.lower().replace(",", " ").replace(".", " ").split()


def parse_caption(text: str) -> dict:
    """Lenient attribute extraction: whatever garment/scene facts the
    caption states.  Keys (all optional): fg, pattern, accent, background,
    scale."""
    words = _words(text)
    out: dict = {}
    pattern_words = PATTERNS + ("textured",)
    for i, w in enumerate(words):
        if w in pattern_words and "pattern" not in out:
            out["pattern"] = w
            if i > 0 and words[i - 1] in PALETTE:
                out["fg"] = words[i - 1]
        elif w == "background" and i > 0 and words[i - 1] in BACKGROUNDS:
            out["background"] = words[i - 1]
        elif w in NAME_TO_SCALE and "scale" not in out:
            out["scale"] = NAME_TO_SCALE[w]
        elif w == "with":
            rest = words[i + 1:]
            if rest and rest[0] in PALETTE:
                out["accent"] = rest[0]
    if "fg" not in out:
        for w in words:
            if w in PALETTE and w != out.get("accent"):
                out["fg"] = w
                break
    return out


def parse_rich(text: str) -> tuple[GarmentSpec, str] | None:
    """Strict parse of the rich caption template; None unless the text is
    exactly a rich-tier caption."""
    words = _words(text)
    if len(words) != 13:
        return None
    glue_ok = (words[0:4] == ["a", "person", "wearing", "a"]
               and words[7:9] == ["shirt", "with"]
               and words[10] == "accents" and words[12] == "background")
    if not glue_ok:
        return None
    scale_w, fg, pattern, bg, background = words[4], words[5], words[6], words[9], words[11]
    if (scale_w not in NAME_TO_SCALE or fg not in PALETTE or pattern not in PATTERNS
            or bg not in PALETTE or fg == bg or background not in BACKGROUNDS):
        return None
    return GarmentSpec(pattern=pattern, fg=fg, bg=bg, scale=NAME_TO_SCALE[scale_w]), background


# ----------------------------------------------------------------------
# corpus generation and loading


def sample_spec(i: int) -> tuple[GarmentSpec, str]:
    """Deterministic factorial cycling: patterns rotate fastest, then
    scale, then fg color, with accent and background offsets chosen so
    neighbouring samples differ."""
    names = list(PALETTE)
    pattern = PATTERNS[i % 4]
    scale = SCALES[(i // 4) % 2]
    fg = names[(i // 8) % 8]
    bg = names[(names.index(fg) + 1 + (i % 7)) % 8]
    background = list(BACKGROUNDS)[(i // 2) % 4]
    return GarmentSpec(pattern=pattern, fg=fg, bg=bg, scale=scale), background


@dataclass
class Sample:
    ident: str
    reference: np.ndarray   # uint8 [H,W,3]
    target: np.ndarray      # uint8 [H,W,3]
    mask: np.ndarray        # bool [H,W]
    captions: dict[str, str]
    spec: GarmentSpec
    background: str
    mode: str               # "torso" | "free"


def make_sample(i: int, rng: np.random.Generator | None = None,
                free_patch: bool = False) -> Sample:
    spec, background = sample_spec(i)
    if free_patch:
        if rng is None:
            raise ConfigError("free-patch placement needs an rng")
        _, _, h, w = TARGET_MASK_BOX
        top = int(rng.integers(1, IMAGE_SIZE - h - 1))
        left = int(rng.integers(1, IMAGE_SIZE - w - 1))
        target, mask = render_target(spec, background, box=(top, left, h, w), person=False)
        mode = "free"
    else:
        target, mask = render_target(spec, background)
        mode = "torso"
    captions = {tier: caption(spec, tier, background) for tier in CAPTION_TIERS}
    return Sample(ident=f"{i:04d}", reference=render_reference(spec), target=target,
                  mask=mask, captions=captions, spec=spec, background=background, mode=mode)


def gen_dataset(n: int, seed: int, out_dir, free_patch: bool = False) -> Path:
    """Write n samples plus index.json.  The directory appears atomically
    (built under a temp name, renamed into place) and must not already
    exist.  Torso-mode output depends only on n; the seed drives
    free-patch placement."""
    if n < 1:
        raise ConfigError(f"dataset needs at least one sample, got {n}")
    out_dir = Path(out_dir)
    if out_dir.exists():
        raise ConfigError(f"output directory {out_dir} already exists")
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    tmp = Path(tempfile.mkdtemp(prefix=out_dir.name + ".", dir=out_dir.parent))
    try:
        entries = []
        for i in range(n):
            s = make_sample(i, rng=rng, free_patch=free_patch)
            ref_name, tgt_name, mask_name = (f"ref_{s.ident}.ppm", f"tgt_{s.ident}.ppm",
                                             f"mask_{s.ident}.pgm")
            ppm.write_ppm(tmp / ref_name, s.reference)
            ppm.write_ppm(tmp / tgt_name, s.target)
            ppm.write_pgm(tmp / mask_name, s.mask.astype(np.uint8) * 255)
            entries.append({
                "id": s.ident, "reference": ref_name, "target": tgt_name, "mask": mask_name,
                "captions": s.captions, "spec": s.spec.to_dict(),
                "background": s.background, "mode": s.mode,
            })
        index = {"version": 1, "n": n, "seed": seed, "free_patch": free_patch,
                 "samples": entries}
        with open(tmp / "index.json", "w") as f:
            json.dump(index, f, indent=1, sort_keys=True)
            f.write("\n")
        os.replace(tmp, out_dir)
    except Exception:
        for p in tmp.glob("*"):
            p.unlink()
        tmp.rmdir()
        raise
    return out_dir


class Dataset:
    """Corpus loaded back from disk (images eager: the corpus is tiny)."""

    def __init__(self, samples: list[Sample], root: Path):
        self.samples = samples
        self.root = root

    @classmethod
    def load(cls, path) -> "Dataset":
        root = Path(path)
        index_path = root / "index.json" if root.is_dir() else root
        root = index_path.parent
        if not index_path.is_file():
            raise ConfigError(f"no corpus index at {index_path}")
        with open(index_path) as f:
            index = json.load(f)
        if index.get("version") != 1:
            raise ConfigError(f"unsupported corpus version {index.get('version')!r}")
        samples = []
        for e in index["samples"]:
            samples.append(Sample(
                ident=e["id"],
                reference=ppm.read_ppm(root / e["reference"]),
                target=ppm.read_ppm(root / e["target"]),
                mask=ppm.read_pgm(root / e["mask"]) > 127,
                captions=dict(e["captions"]),
                spec=GarmentSpec.from_dict(e["spec"]),
                background=e["background"],
                mode=e["mode"],
            ))
        if not samples:
            raise ConfigError(f"corpus at {index_path} is empty")
        return cls(samples, root)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]
