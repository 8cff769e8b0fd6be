"""Synthetic slide corpora with known class structure.

Every class owns two sub-phenotypes (Gaussian components) laid out in
spatial blocks; the remaining tissue blocks come from shared stroma
components. Class centroids sit ``signal`` noise-sigmas apart, so mean
pooling already separates classes while block layout carries extra signal.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from gridslide.errors import ConfigError
from gridslide.feature_grid import FeatureGrid
from gridslide.rng import stream

CLASS_NAMES = (
    "lobular carcinoma", "serous carcinoma", "clear cell carcinoma", "squamous carcinoma",
    "mucinous carcinoma", "papillary carcinoma", "endometrioid carcinoma", "medullary carcinoma",
    "adenoid cystic carcinoma", "neuroendocrine tumor", "germ cell tumor", "sarcoma",
)

PHENOTYPE_WORDS = (
    ("solid sheets", "glandular structures"), ("papillae", "psammoma bodies"), ("clear cytoplasm", "delicate vessels"),
    ("keratin pearls", "intercellular bridges"), ("mucin pools", "floating nests"), ("fibrovascular cores", "nuclear grooves"),
    ("tubular glands", "squamous morules"), ("syncytial growth", "lymphoid infiltrate"), ("cribriform nests", "basement membrane"),
    ("trabeculae", "salt and pepper chromatin"), ("large nucleoli", "fibrous septa"), ("spindle cells", "herringbone fascicles"),
)

CAPTION_TEMPLATES = (
    "{name} with {a} and {b}.",
    "the slide shows {name} featuring {b} adjacent to {a}.",
    "tumor consistent with {name}; {a} are prominent.",
)

REPORT_TEMPLATES = (
    "diagnosis: {name}. microscopic description: {a} with areas of {b}. grade {grade}.",
    "final diagnosis {name}, grade {grade}. sections show {a} and {b}; stroma is {stroma}.",
)


@dataclass
class SyntheticCorpusSpec:
    n_classes: int = 8
    slides_per_class: int = 25
    grid_min: int = 28
    grid_max: int = 36
    dim: int = 32
    signal: float = 4.0
    noise: float = 1.0
    subtype_spread: float = 2.0
    n_stroma: int = 3
    stroma_spread: float = 2.0
    class_fraction: float = 0.6
    block: int = 4
    n_sites: int = 10
    site_shift: float = 0.3
    seed: int = 0
    templates: dict[int, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if self.signal < 0:
            raise ConfigError("signal strength must be >= 0")
        if not 2 <= self.n_classes <= len(CLASS_NAMES):
            raise ConfigError(f"n_classes must lie in [2, {len(CLASS_NAMES)}]")
        if self.slides_per_class < 1:
            raise ConfigError("slides_per_class must be >= 1")
        if not 4 <= self.grid_min <= self.grid_max:
            raise ConfigError("need 4 <= grid_min <= grid_max")
        if self.dim < 2 * self.n_classes + self.n_stroma + 2:
            raise ConfigError("feature dim too small for orthogonal class/stroma directions")
        if self.noise <= 0:
            raise ConfigError("noise must be > 0")
        if self.n_sites < 1:
            raise ConfigError("n_sites must be >= 1")
        if not 0.0 < self.class_fraction <= 1.0:
            raise ConfigError("class_fraction must lie in (0, 1]")
        for c in range(self.n_classes):
            if c in self.templates and not self.templates[c]:
                raise ConfigError(f"class {c} has no caption template")

    def class_templates(self, c: int) -> tuple[str, ...]:
        return self.templates.get(c, CAPTION_TEMPLATES)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "templates"}


@dataclass
class SyntheticSlide:
    slide_id: str
    label: int
    grid: FeatureGrid
    site: int
    captions: list[str]
    reports: list[str]
    time: float
    event: bool
    phenotype_map: np.ndarray  # (H, W) int: -1 background, 0/1 class sub-phenotype, 2+ stroma


@dataclass
class Geometry:
    """Component means shared by every slide of a corpus."""
    centroids: np.ndarray  # (C, D)
    subtypes: np.ndarray  # (C, 2, D)
    stroma: np.ndarray  # (S, D)
    sites: np.ndarray  # (n_sites, D)


def make_geometry(spec: SyntheticCorpusSpec) -> Geometry:
    rng = stream(spec.seed, "geometry")
    C, S = spec.n_classes, spec.n_stroma
    basis, _ = np.linalg.qr(rng.normal(size=(spec.dim, spec.dim)))
    u = basis[:, :C].T
    v = basis[:, C:2 * C].T
    w = basis[:, 2 * C:2 * C + S].T
    # orthonormal u_c scaled so that ||centroid_i - centroid_j|| = signal * noise
    centroids = u * (spec.signal * spec.noise / math.sqrt(2.0))
    delta = spec.subtype_spread * spec.noise * v
    subtypes = np.stack([centroids + delta, centroids - delta], axis=1)
    stroma = w * spec.stroma_spread * spec.noise
    sites = rng.normal(size=(spec.n_sites, spec.dim)) * spec.site_shift * spec.noise / math.sqrt(spec.dim)
    return Geometry(centroids, subtypes, stroma, sites)


def _tissue_mask(H: int, W: int, rng: np.random.Generator) -> np.ndarray:
    rows, cols = np.mgrid[0:H, 0:W]
    mask = np.zeros((H, W), dtype=bool)
    n_blobs = int(rng.integers(1, 3))
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0.35, 0.65) * H, rng.uniform(0.35, 0.65) * W
        ry, rx = rng.uniform(0.35, 0.5) * H, rng.uniform(0.35, 0.5) * W
        theta = rng.uniform(0, math.pi)
        dy, dx = rows - cy, cols - cx
        a = (dx * math.cos(theta) + dy * math.sin(theta)) / rx
        b = (-dx * math.sin(theta) + dy * math.cos(theta)) / ry
        mask |= a * a + b * b <= 1.0
    # sparse holes
    mask &= rng.random((H, W)) > 0.03
    return mask


def _phenotype_map(mask: np.ndarray, spec: SyntheticCorpusSpec, rng: np.random.Generator) -> np.ndarray:
    H, W = mask.shape
    bh, bw = math.ceil(H / spec.block), math.ceil(W / spec.block)
    is_class = rng.random((bh, bw)) < spec.class_fraction
    which_sub = rng.integers(0, 2, size=(bh, bw))
    which_stroma = 2 + rng.integers(0, max(spec.n_stroma, 1), size=(bh, bw))
    blocks = np.where(is_class, which_sub, which_stroma) if spec.n_stroma else which_sub
    full = np.kron(blocks, np.ones((spec.block, spec.block), dtype=np.int64))[:H, :W]
    return np.where(mask, full, -1)


def _caption(template: str, c: int, rng: np.random.Generator) -> str:
    a, b = PHENOTYPE_WORDS[c]
    stroma = ("desmoplastic", "edematous", "hyalinized")[int(rng.integers(3))]
    return template.format(name=CLASS_NAMES[c], a=a, b=b, grade=int(rng.integers(1, 4)), stroma=stroma)


def make_slide(spec: SyntheticCorpusSpec, geom: Geometry, label: int, index: int) -> SyntheticSlide:
    rng = stream(spec.seed, "slide", index)
    H = int(rng.integers(spec.grid_min, spec.grid_max + 1))
    W = int(rng.integers(spec.grid_min, spec.grid_max + 1))
    mask = _tissue_mask(H, W, rng)
    if mask.sum() < 16:
        mask[:4, :4] = True
    pmap = _phenotype_map(mask, spec, rng)
    means = np.concatenate([geom.subtypes[label], geom.stroma], axis=0)  # (2 + S, D)
    site = index % spec.n_sites
    feats = np.zeros((H, W, spec.dim))
    cells = pmap >= 0
    feats[cells] = means[pmap[cells]] + geom.sites[site] + rng.normal(size=(int(cells.sum()), spec.dim)) * spec.noise
    grid = FeatureGrid(feats, mask)
    captions = [_caption(t, label, rng) for t in spec.class_templates(label)]
    reports = [_caption(t, label, rng) for t in REPORT_TEMPLATES]
    # higher class index = worse prognosis; censoring at a random horizon
    hazard = 0.05 * math.exp(0.35 * (label - (spec.n_classes - 1) / 2))
    t_event = rng.exponential(1.0 / hazard)
    t_censor = rng.uniform(5.0, 60.0)
    return SyntheticSlide(f"slide_{index:05d}", label, grid, site, captions, reports,
                          float(min(t_event, t_censor)), bool(t_event <= t_censor), pmap)


def generate(spec: SyntheticCorpusSpec, offset: int = 0) -> list[SyntheticSlide]:
    """All slides, class-major order; ``offset`` shifts slide indices so a
    second call with the same spec yields disjoint held-out slides."""
    geom = make_geometry(spec)
    slides = []
    for c in range(spec.n_classes):
        for j in range(spec.slides_per_class):
            idx = offset + c * spec.slides_per_class + j
            slides.append(make_slide(spec, geom, c, idx))
    return slides
