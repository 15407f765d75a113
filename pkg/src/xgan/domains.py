"""Procedural two-style avatar corpora with ground-truth attributes.

An avatar is described by one option index per schema attribute.  Each of
the eight layers (hair back, face, hair front, eyes, eyebrows, mouth, facial
hair, glasses) turns the attributes into a list of primitive shapes; a style
turns primitives into pixels.  Layers are rasterised separately at 4x
resolution, box-filtered down, and composited back to front with the
premultiplied "over" operator on a white background.

StyleA draws flat anti-aliased shapes.  StyleB draws the same shapes with
dark outlines, diagonal hatching and a shifted palette, so the two corpora
share semantics but differ at the pixel level.
"""

from __future__ import annotations

import enum
import functools
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

log = logging.getLogger(__name__)

SUPERSAMPLE = 4
LAYERS = ("hair_back", "face", "hair_front", "eyes", "eyebrows", "mouth", "facial_hair", "glasses")
RASTER_SUFFIXES = (".png", ".bmp", ".ppm", ".pgm", ".tif", ".tiff")


class SchemaError(ValueError):
    """Malformed attribute schema, bias, or an interaction rule that cannot be resolved."""


class EmptyCorpusError(ValueError):
    pass


class Style(str, enum.Enum):
    A = "StyleA"
    B = "StyleB"


@dataclass(frozen=True)
class Attribute:
    name: str
    kind: str  # "categorical" or "color"
    options: Tuple[str, ...]
    # layers whose artwork depends on this attribute
    layers: Tuple[str, ...] = ()
    forbidden: Tuple[str, ...] = ()


@dataclass(frozen=True)
class InteractionRule:
    """Pick the artwork variant of ``layer`` from the value of attribute ``on``."""

    layer: str
    on: str
    variants: Mapping[str, str]

    def __post_init__(self):
        object.__setattr__(self, "variants", tuple(sorted(dict(self.variants).items())))

    def variant_for(self, value: str) -> Optional[str]:
        return dict(self.variants).get(value)


@dataclass(frozen=True)
class AttributeSchema:
    attributes: Tuple[Attribute, ...]
    layers: Tuple[str, ...] = LAYERS
    interaction_rules: Tuple[InteractionRule, ...] = ()
    # each entry maps attribute name -> option; a sample matching every pair is rejected
    forbidden_combinations: Tuple[Mapping[str, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "forbidden_combinations",
                           tuple(tuple(sorted(dict(c).items())) for c in self.forbidden_combinations))
        if not self.attributes:
            raise SchemaError("schema needs at least one attribute")
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate attribute names")
        if len(set(self.layers)) != len(self.layers):
            raise SchemaError("layer order must not repeat a layer")
        for a in self.attributes:
            if a.kind not in ("categorical", "color"):
                raise SchemaError(f"attribute {a.name}: unknown kind {a.kind}")
            if len(a.options) < 2:
                raise SchemaError(f"attribute {a.name} needs at least 2 options")
            for f in a.forbidden:
                if f not in a.options:
                    raise SchemaError(f"attribute {a.name}: forbidden option {f} is not an option")
            for layer in a.layers:
                if layer not in self.layers:
                    raise SchemaError(f"attribute {a.name}: unknown layer {layer}")
        for combo in self.forbidden_combinations:
            for k, v in combo:
                if v not in self.attribute(k).options:
                    raise SchemaError(f"forbidden combination uses unknown option {k}={v}")

    @property
    def names(self) -> List[str]:
        return [a.name for a in self.attributes]

    @property
    def n_options(self) -> List[int]:
        return [len(a.options) for a in self.attributes]

    def attribute(self, name: str) -> Attribute:
        for a in self.attributes:
            if a.name == name:
                return a
        raise SchemaError(f"unknown attribute {name}")

    def index(self, name: str) -> int:
        return self.names.index(name)

    def affected_layers(self, name: str) -> List[str]:
        """Layers whose pixels may change when attribute ``name`` changes."""
        out = set(self.attribute(name).layers)
        out.update(r.layer for r in self.interaction_rules if r.on == name)
        return [layer for layer in self.layers if layer in out]

    def to_dict(self) -> dict:
        return {
            "attributes": [{"name": a.name, "kind": a.kind, "options": list(a.options),
                            "layers": list(a.layers), "forbidden": list(a.forbidden)}
                           for a in self.attributes],
            "layers": list(self.layers),
            "interaction_rules": [{"layer": r.layer, "on": r.on, "variants": dict(r.variants)}
                                  for r in self.interaction_rules],
            "forbidden_combinations": [dict(c) for c in self.forbidden_combinations],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttributeSchema":
        try:
            attrs = tuple(Attribute(a["name"], a["kind"], tuple(a["options"]),
                                    tuple(a.get("layers", ())), tuple(a.get("forbidden", ())))
                          for a in d["attributes"])
            rules = tuple(InteractionRule(r["layer"], r["on"], dict(r["variants"]))
                          for r in d.get("interaction_rules", ()))
            return cls(attrs, tuple(d.get("layers", LAYERS)), rules,
                       tuple(dict(c) for c in d.get("forbidden_combinations", ())))
        except (KeyError, TypeError) as e:
            raise SchemaError(f"malformed schema: {e}") from e


def default_schema() -> AttributeSchema:
    attrs = (
        Attribute("face_shape", "categorical", ("round", "oval", "square"), ("face",)),
        Attribute("hair_style", "categorical", ("short", "long", "bun", "spiky"),
                  ("hair_back", "hair_front")),
        Attribute("hair_color", "color", ("black", "brown", "blond", "red"),
                  ("hair_back", "hair_front", "eyebrows")),
        Attribute("eye_type", "categorical", ("dot", "line", "wide"), ("eyes",)),
        Attribute("glasses", "categorical", ("none", "frames"), ("glasses",)),
        Attribute("skin_tone", "color", ("light", "medium", "dark"), ("face",)),
    )
    # frames follow the face outline, the analog of per-face-shape beard artwork
    rules = (InteractionRule("glasses", "face_shape",
                             {"round": "circle", "oval": "narrow", "square": "rect"}),)
    return AttributeSchema(attrs, LAYERS, rules,
                           forbidden_combinations=({"hair_style": "spiky", "face_shape": "oval"},))


# -- sampling and filtering --------------------------------------------------

AttributeVector = Tuple[int, ...]


def _bias_probs(schema: AttributeSchema, bias: Optional[Mapping[str, Sequence[float]]]):
    probs = []
    bias = dict(bias or {})
    unknown = set(bias) - set(schema.names)
    if unknown:
        raise SchemaError(f"bias for unknown attributes {sorted(unknown)}")
    for a in schema.attributes:
        if a.name not in bias:
            probs.append(None)
            continue
        w = np.asarray(bias[a.name], dtype=float)
        if w.shape != (len(a.options),):
            raise SchemaError(f"bias for {a.name} needs {len(a.options)} weights, got {w.shape}")
        if np.any(w < 0) or not np.all(np.isfinite(w)) or w.sum() <= 0:
            raise SchemaError(f"bias for {a.name} must be nonnegative and not all zero")
        probs.append(w / w.sum())
    return probs


def sample_attributes(schema: AttributeSchema, rng: np.random.Generator,
                      bias: Optional[Mapping[str, Sequence[float]]] = None) -> AttributeVector:
    """One independent draw per attribute; uniform unless ``bias`` gives weights."""
    out = []
    for a, p in zip(schema.attributes, _bias_probs(schema, bias)):
        k = len(a.options)
        out.append(int(rng.integers(k)) if p is None else int(rng.choice(k, p=p)))
    return tuple(out)


def plausibility_filter(schema: AttributeSchema, attrs: Sequence[int]) -> bool:
    """False if any attribute takes a forbidden option or a forbidden combination matches."""
    named = {}
    for a, i in zip(schema.attributes, attrs):
        opt = a.options[i]
        if opt in a.forbidden:
            return False
        named[a.name] = opt
    for combo in schema.forbidden_combinations:
        if all(named.get(k) == v for k, v in combo):
            return False
    return True


# -- artwork -----------------------------------------------------------------

# (kind, geometry, color key); geometry in unit canvas coordinates
Primitive = Tuple[str, tuple, str]

_FACE = {
    "round": ("ellipse", (0.25, 0.26, 0.75, 0.82)),
    "oval": ("ellipse", (0.31, 0.20, 0.69, 0.88)),
    "square": ("rounded", (0.23, 0.28, 0.77, 0.84, 0.07)),
}
_HAIR_BACK = {
    "short": [],
    "long": [("rect", (0.17, 0.30, 0.83, 0.94))],
    "bun": [("ellipse", (0.37, 0.02, 0.63, 0.24))],
    "spiky": [("polygon", ((0.22, 0.32), (0.26, 0.04), (0.36, 0.22), (0.44, 0.0), (0.52, 0.20),
                           (0.60, 0.0), (0.66, 0.22), (0.76, 0.04), (0.78, 0.32)))],
}
_HAIR_FRONT = {
    "short": [("chord", (0.22, 0.14, 0.78, 0.56, 180, 360))],
    "long": [("chord", (0.18, 0.12, 0.82, 0.60, 180, 360)),
             ("rect", (0.17, 0.34, 0.27, 0.80)), ("rect", (0.73, 0.34, 0.83, 0.80))],
    "bun": [("chord", (0.24, 0.16, 0.76, 0.52, 180, 360))],
    "spiky": [("polygon", ((0.22, 0.36), (0.30, 0.20), (0.38, 0.30), (0.46, 0.16), (0.54, 0.30),
                           (0.62, 0.16), (0.70, 0.30), (0.78, 0.36)))],
}
_EYE_CENTERS = ((0.39, 0.52), (0.61, 0.52))


def _eyes(kind: str) -> List[Primitive]:
    out = []
    for cx, cy in _EYE_CENTERS:
        if kind == "dot":
            out.append(("ellipse", (cx - 0.045, cy - 0.045, cx + 0.045, cy + 0.045), "ink"))
        elif kind == "line":
            out.append(("rect", (cx - 0.08, cy - 0.02, cx + 0.08, cy + 0.03), "ink"))
        else:
            out.append(("ellipse", (cx - 0.085, cy - 0.075, cx + 0.085, cy + 0.075), "eye_white"))
            out.append(("ellipse", (cx - 0.04, cy - 0.04, cx + 0.04, cy + 0.04), "ink"))
    return out


def _glasses(variant: str) -> List[Primitive]:
    out = []
    for cx, cy in _EYE_CENTERS:
        if variant == "circle":
            out.append(("ring", (cx - 0.115, cy - 0.115, cx + 0.115, cy + 0.115, 0.05), "frame"))
        elif variant == "narrow":
            out.append(("ring", (cx - 0.11, cy - 0.08, cx + 0.11, cy + 0.08, 0.05), "frame"))
        else:
            out.append(("box", (cx - 0.12, cy - 0.09, cx + 0.12, cy + 0.09, 0.05), "frame"))
    out.append(("rect", (0.46, 0.49, 0.54, 0.54), "frame"))
    return out


def layer_primitives(schema: AttributeSchema, attrs: Sequence[int], layer: str) -> List[Primitive]:
    """Primitives of one layer for the given attributes (default-schema artwork)."""
    named = {a.name: a.options[i] for a, i in zip(schema.attributes, attrs)}
    variant = {}
    for rule in schema.interaction_rules:
        if rule.layer == layer:
            value = named.get(rule.on)
            chosen = rule.variant_for(value)
            if chosen is None:
                raise SchemaError(f"interaction rule for layer {layer} has no variant for "
                                  f"{rule.on}={value}")
            variant[rule.on] = chosen

    if layer == "face":
        kind, geom = _FACE[named.get("face_shape", "round")]
        return [(kind, geom, "skin:" + named.get("skin_tone", "light"))]
    hair = "hair:" + named.get("hair_color", "black")
    style = named.get("hair_style", "short")
    if layer == "hair_back":
        return [(k, g, hair) for k, g in _HAIR_BACK[style]]
    if layer == "hair_front":
        return [(k, g, hair) for k, g in _HAIR_FRONT[style]]
    if layer == "eyes":
        return _eyes(named.get("eye_type", "dot"))
    if layer == "eyebrows":
        return [("rect", (cx - 0.07, 0.42, cx + 0.07, 0.45), hair) for cx, _ in _EYE_CENTERS]
    if layer == "mouth":
        return [("chord", (0.42, 0.62, 0.58, 0.74, 0, 180), "mouth")]
    if layer == "facial_hair":
        return []
    if layer == "glasses":
        if named.get("glasses", "none") == "none":
            return []
        return _glasses(variant.get("face_shape", "circle"))
    raise SchemaError(f"no artwork for layer {layer}")


# -- styles ------------------------------------------------------------------

PALETTES = {
    Style.A: {
        "skin:light": (243, 208, 176), "skin:medium": (203, 148, 102), "skin:dark": (125, 84, 54),
        "hair:black": (34, 30, 30), "hair:brown": (112, 70, 36), "hair:blond": (236, 200, 92),
        "hair:red": (206, 54, 34),
        "ink": (22, 22, 40), "eye_white": (255, 255, 255), "mouth": (186, 64, 70),
        "frame": (40, 44, 150),
    },
    Style.B: {
        "skin:light": (255, 236, 214), "skin:medium": (224, 170, 128), "skin:dark": (152, 98, 72),
        "hair:black": (58, 64, 92), "hair:brown": (150, 96, 64), "hair:blond": (250, 226, 140),
        "hair:red": (232, 96, 60),
        "ink": (10, 60, 40), "eye_white": (236, 244, 255), "mouth": (150, 40, 100),
        "frame": (180, 40, 40),
    },
}
OUTLINE = (20, 20, 20)
HATCH_PERIOD = 6  # in supersampled pixels
HATCH_DARKEN = 0.7


def _draw_shape(draw: ImageDraw.ImageDraw, kind: str, geom, n: int, fill, outline=None, width=0):
    def px(v):
        return v * n

    if kind in ("ellipse", "rect", "rounded", "chord"):
        box = [px(geom[0]), px(geom[1]), px(geom[2]) - 1, px(geom[3]) - 1]
        if kind == "ellipse":
            draw.ellipse(box, fill=fill, outline=outline, width=width)
        elif kind == "rect":
            draw.rectangle(box, fill=fill, outline=outline, width=width)
        elif kind == "rounded":
            draw.rounded_rectangle(box, radius=px(geom[4]), fill=fill, outline=outline, width=width)
        else:
            draw.chord(box, geom[4], geom[5], fill=fill, outline=outline, width=width)
    elif kind == "polygon":
        pts = [(px(x), px(y)) for x, y in geom]
        draw.polygon(pts, fill=fill, outline=outline, width=max(width, 1) if outline else 1)
    elif kind in ("ring", "box"):
        box = [px(geom[0]), px(geom[1]), px(geom[2]) - 1, px(geom[3]) - 1]
        w = max(1, int(round(px(geom[4]))))
        if kind == "ring":
            draw.ellipse(box, outline=fill, width=w)
        else:
            draw.rectangle(box, outline=fill, width=w)
    else:
        raise SchemaError(f"unknown primitive {kind}")


def _rasterize_layer(prims: Sequence[Primitive], style: Style, size: int) -> np.ndarray:
    """Premultiplied RGBA float array (size x size x 4) in [0, 1]."""
    n = size * SUPERSAMPLE
    rgb = np.zeros((n, n, 3), dtype=np.float64)
    alpha = np.zeros((n, n), dtype=np.float64)
    palette = PALETTES[style]
    yy, xx = np.mgrid[0:n, 0:n]
    hatch = ((xx + yy) // HATCH_PERIOD) % 2 == 0
    for kind, geom, key in prims:
        color = np.asarray(palette[key], dtype=np.float64) / 255.0
        mask_img = Image.new("L", (n, n), 0)
        draw = ImageDraw.Draw(mask_img)
        _draw_shape(draw, kind, geom, n, fill=255)
        mask = np.asarray(mask_img) > 0
        colored = np.broadcast_to(color, (n, n, 3)).copy()
        if style is Style.B and kind not in ("ring", "box"):
            colored[hatch] *= HATCH_DARKEN
            edge_img = Image.new("L", (n, n), 0)
            _draw_shape(ImageDraw.Draw(edge_img), kind, geom, n, fill=None, outline=255,
                        width=SUPERSAMPLE)
            edge = np.asarray(edge_img) > 0
            colored[edge] = np.asarray(OUTLINE) / 255.0
            mask = mask | edge
        rgb[mask] = colored[mask]
        alpha[mask] = 1.0
    rgba = np.concatenate([rgb * alpha[..., None], alpha[..., None]], axis=-1)
    return rgba.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE, 4).mean(axis=(1, 3))


def composite(layers: Sequence[np.ndarray]) -> np.ndarray:
    """Back-to-front premultiplied "over" onto white; returns RGB in [0, 1]."""
    size = layers[0].shape[0]
    out = np.ones((size, size, 3), dtype=np.float64)
    for rgba in layers:
        a = rgba[..., 3:4]
        out = rgba[..., :3] + out * (1.0 - a)
    return out


def render_layers(schema: AttributeSchema, attrs: Sequence[int], style: Style,
                  image_size: int) -> Dict[str, np.ndarray]:
    style = Style(style)
    return {layer: _rasterize_layer(layer_primitives(schema, attrs, layer), style, image_size)
            for layer in schema.layers}


@functools.lru_cache(maxsize=8192)
def _render_cached(schema: AttributeSchema, attrs: Tuple[int, ...], style: Style, image_size: int):
    layers = render_layers(schema, attrs, style, image_size)
    rgb = composite([layers[name] for name in schema.layers])
    img = (rgb.transpose(2, 0, 1) * 2.0 - 1.0).astype(np.float32)
    img.setflags(write=False)
    return img


def render(schema: AttributeSchema, attrs: Sequence[int], style: Style, image_size: int) -> np.ndarray:
    """Render one sample as a 1 x 3 x H x W float32 array in [-1, 1]."""
    if image_size < 16:
        raise ValueError(f"image_size must be >= 16, got {image_size}")
    for a, i in zip(schema.attributes, attrs):
        if not 0 <= i < len(a.options):
            raise SchemaError(f"attribute {a.name}: option index {i} out of range")
    return _render_cached(schema, tuple(int(i) for i in attrs), Style(style), int(image_size))[None].copy()


def layer_region(schema: AttributeSchema, attrs: Sequence[int], style: Style, image_size: int,
                 layers: Sequence[str]) -> np.ndarray:
    """Boolean H x W mask of the bounding boxes of ``layers`` (where their alpha > 0)."""
    rendered = render_layers(schema, attrs, style, image_size)
    region = np.zeros((image_size, image_size), dtype=bool)
    for name in layers:
        ys, xs = np.nonzero(rendered[name][..., 3] > 0)
        if len(ys):
            region[ys.min():ys.max() + 1, xs.min():xs.max() + 1] = True
    return region


# -- corpora -----------------------------------------------------------------

@dataclass
class CorpusSpec:
    n_samples: int
    style: Style = Style.A
    seed: int = 0
    bias: Optional[Dict[str, List[float]]] = None
    image_size: int = 32

    def __post_init__(self):
        self.style = Style(self.style)
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")


MIN_ACCEPTANCE = 0.01


def sample_corpus_attributes(schema: AttributeSchema, spec: CorpusSpec) -> List[AttributeVector]:
    rng = np.random.default_rng(spec.seed)
    _bias_probs(schema, spec.bias)
    accepted, attempts = [], 0
    while len(accepted) < spec.n_samples:
        attrs = sample_attributes(schema, rng, spec.bias)
        attempts += 1
        if plausibility_filter(schema, attrs):
            accepted.append(attrs)
        if attempts >= 200 and len(accepted) / attempts < MIN_ACCEPTANCE:
            raise SchemaError(f"filter acceptance rate {len(accepted)}/{attempts} is below "
                              f"{MIN_ACCEPTANCE:.0%}; the schema is degenerate")
    return accepted


def build_corpus(schema: AttributeSchema, spec: CorpusSpec) -> Tuple[np.ndarray, List[AttributeVector]]:
    """Render ``spec.n_samples`` filtered samples; returns ``(images N x 3 x H x W, attributes)``."""
    attrs = sample_corpus_attributes(schema, spec)
    images = np.concatenate([render(schema, a, spec.style, spec.image_size) for a in attrs])
    return images, attrs


def default_domain_specs(n_samples: int, seed: int, image_size: int = 32,
                         schema: AttributeSchema = None) -> Tuple[CorpusSpec, CorpusSpec]:
    """Domain 1 (StyleA, uniform) and domain 2 (StyleB, one hair colour over-sampled 2:1).

    The two streams use independent seeds derived from ``seed``.
    """
    schema = schema or default_schema()
    k = len(schema.attribute("hair_color").options)
    bias = {"hair_color": [1.0] * (k - 1) + [2.0]}
    s1, s2 = np.random.SeedSequence(seed).spawn(2)
    return (CorpusSpec(n_samples, Style.A, int(s1.generate_state(1)[0]), None, image_size),
            CorpusSpec(n_samples, Style.B, int(s2.generate_state(1)[0]), bias, image_size))


def train_test_split(n: int, seed: int, test_fraction: float = 0.2) -> Tuple[np.ndarray, np.ndarray]:
    """Random split holding out ``round(test_fraction * n)`` indices for testing."""
    n_test = int(round(n * test_fraction))
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def to_uint8(images: np.ndarray) -> np.ndarray:
    """N x 3 x H x W in [-1, 1] to N x H x W x 3 bytes."""
    x = np.clip((np.asarray(images) + 1.0) * 127.5, 0, 255)
    return np.rint(x).astype(np.uint8).transpose(0, 2, 3, 1)


def export_corpus(images: np.ndarray, attrs: Sequence[AttributeVector], schema: AttributeSchema,
                  out_dir, split_seed: int = 0, test_fraction: float = 0.2) -> Dict[str, Path]:
    """Write one PNG per sample, ``metadata.jsonl`` and ``train.txt`` / ``test.txt`` manifests."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(to_uint8(images)):
        rel = f"images/sample_{i:06d}.png"
        Image.fromarray(img, "RGB").save(out / rel, format="PNG", optimize=False)
        paths.append(rel)
    with open(out / "metadata.jsonl", "w") as f:
        for i, (rel, a) in enumerate(zip(paths, attrs)):
            f.write(json.dumps({"id": i, "file": rel,
                                "attributes": dict(zip(schema.names, map(int, a)))}) + "\n")
    train_idx, test_idx = train_test_split(len(paths), split_seed, test_fraction)
    for name, idx in (("train", train_idx), ("test", test_idx)):
        with open(out / f"{name}.txt", "w") as f:
            f.writelines(paths[i] + "\n" for i in idx)
    with open(out / "schema.json", "w") as f:
        json.dump(schema.to_dict(), f, indent=2)
    return {"root": out, "train": out / "train.txt", "test": out / "test.txt",
            "metadata": out / "metadata.jsonl"}


def _load_one(path: Path, image_size: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (image_size, image_size):
            im = im.resize((image_size, image_size), Image.BICUBIC)
        arr = np.asarray(im, dtype=np.float32)
    return (arr / 127.5 - 1.0).transpose(2, 0, 1)


def load_images(paths: Sequence[Path], image_size: int) -> Tuple[np.ndarray, List[Path]]:
    """Decode the given files; unreadable ones are skipped and logged. Returns (images, loaded paths)."""
    images, ok, failed = [], [], []
    for p in paths:
        try:
            images.append(_load_one(Path(p), image_size))
            ok.append(Path(p))
        except (OSError, ValueError) as e:
            log.warning("skipping unreadable image %s: %s", p, e)
            failed.append(str(p))
    if failed:
        log.warning("%d of %d files could not be read: %s", len(failed), len(paths), failed)
    if not images:
        raise EmptyCorpusError(f"no readable images among {len(paths)} files")
    return np.stack(images), ok


def load_image_dir(path, image_size: int = 64) -> np.ndarray:
    """Load every raster image in ``path`` (sorted by filename), resized and scaled to [-1, 1]."""
    root = Path(path)
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in RASTER_SUFFIXES)
    if not files:
        raise EmptyCorpusError(f"no images found in {root}")
    return load_images(files, image_size)[0]


def load_manifest(manifest, image_size: int, with_attributes: bool = True):
    """Load the images listed in a manifest written by :func:`export_corpus`.

    Returns ``(images, attributes)``; attributes come from the sibling
    ``metadata.jsonl`` when present, else ``None``.
    """
    manifest = Path(manifest)
    root = manifest.parent
    rels = [line.strip() for line in manifest.read_text().splitlines() if line.strip()]
    if not rels:
        raise EmptyCorpusError(f"manifest {manifest} lists no images")
    images, loaded = load_images([root / r for r in rels], image_size)
    attrs = None
    meta = root / "metadata.jsonl"
    if with_attributes and meta.exists():
        by_file = {}
        for line in meta.read_text().splitlines():
            rec = json.loads(line)
            by_file[rec["file"]] = tuple(rec["attributes"].values())
        attrs = [by_file[str(p.relative_to(root))] for p in loaded]
    return images, attrs
