"""Procedural painting corpus with rubric scores computed from its own parameters.

Each artwork is drawn from a category-specific parameter distribution
(motif count and kinds, hues, layout, surface noise), rendered to an RGB
raster, described in a fixed template grammar, and scored by closed-form
rules on the same parameters. Scores are therefore reproducible ground
truth, not estimates.

Rubric (each dimension 0-20, total 0-100)::

    color        20 * min(distinct_hues, 6) / 6
    composition  20 * (1 - clamp(|motif centroid| / half_canvas, 0, 1)), 0 with no motifs
    texture      20 * min(1, noise_amplitude / NOISE_MAX)
    content      20 * min(motif_count, 5) / 5
    originality  20 * (1 - P(kinds) / P(most common kinds))

``P(kinds)`` is the probability of the motif-kind multiset under the
corpus-wide generator prior (category mix 75/20/5), so the most stereotyped
combination scores 0 and rarely drawn ones approach 20.

Canvas coordinates are normalised: the centre is (0, 0) and the half-canvas
distance is 1. Image files are binary PPM (P6, maxval 255).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from itertools import combinations_with_replacement
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, LengthError
from .vocab import BOS_ID, CRITIQUE_ID, EOS_ID, SCORING_ID, Tokenizer

IGNORE_INDEX = -100

HUES = ("red", "orange", "yellow", "green", "blue", "purple", "pink", "brown")
HUE_RGB = {
    "red": (0.85, 0.12, 0.10),
    "orange": (0.95, 0.55, 0.10),
    "yellow": (0.97, 0.88, 0.15),
    "green": (0.15, 0.65, 0.20),
    "blue": (0.15, 0.30, 0.85),
    "purple": (0.55, 0.20, 0.70),
    "pink": (0.95, 0.55, 0.75),
    "brown": (0.50, 0.30, 0.12),
}
KINDS = ("circle", "square", "triangle", "star", "house", "tree", "sun", "figure")
PLURAL = {k: k + "s" for k in KINDS}
TYPICAL_HUE = {
    "circle": "red", "square": "blue", "triangle": "orange", "star": "yellow",
    "house": "red", "tree": "green", "sun": "yellow", "figure": "pink",
}
CATEGORIES = ("child", "professional", "masterpiece")
CATEGORY_SHARE = {"child": 0.75, "professional": 0.20, "masterpiece": 0.05}
SUBJECT = {
    "child": "A child's drawing",
    "professional": "An artist's painting",
    "masterpiece": "A master's painting",
}

NOISE_MAX = 0.25
LAYOUT_OFFSETS = (0.0, 0.18, 0.33, 0.5, 0.7, 0.9)
LAYOUT_PHRASES = ("at the center", "near the center", "slightly off center", "off center",
                  "toward the edge", "at the edge")
NOISE_LEVELS = (0.0, 0.3, 0.5, 0.67, 0.82, 1.0)
TEXTURE_WORDS = ("smooth", "soft", "light", "grainy", "rough", "coarse")
NUMBER_WORDS = ("no", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten")

COUNT_PRIOR = {
    "child": {1: 0.35, 2: 0.30, 3: 0.20, 4: 0.15},
    "professional": {2: 0.2, 3: 0.2, 4: 0.2, 5: 0.2, 6: 0.2},
    "masterpiece": {4: 0.25, 5: 0.25, 6: 0.25, 7: 0.25},
}
KIND_PRIOR = {
    "child": dict(zip(KINDS, (0.07, 0.04, 0.03, 0.01, 0.25, 0.15, 0.35, 0.10))),
    "professional": dict(zip(KINDS, (0.10, 0.10, 0.10, 0.10, 0.15, 0.15, 0.15, 0.15))),
    "masterpiece": dict(zip(KINDS, (0.125,) * 8)),
}
LAYOUT_PRIOR = {
    "child": (0.10, 0.10, 0.15, 0.20, 0.25, 0.20),
    "professional": (0.20, 0.20, 0.20, 0.20, 0.10, 0.10),
    "masterpiece": (0.40, 0.30, 0.15, 0.10, 0.05, 0.00),
}
NOISE_PRIOR = {
    "child": (0.30, 0.25, 0.20, 0.15, 0.07, 0.03),
    "professional": (0.10, 0.15, 0.20, 0.25, 0.15, 0.15),
    "masterpiece": (0.00, 0.05, 0.10, 0.20, 0.25, 0.40),
}

DIMENSIONS = ("originality", "color", "composition", "texture", "content")
RUBRIC_PREAMBLE = (
    "Rubric: rate originality, color, composition, texture and content from 0 to 20 each, "
    "for a total out of 100."
)


# ---------------------------------------------------------------- bands


@dataclass(frozen=True)
class Band:
    name: str
    lo: float
    hi: float
    adjectives: tuple[str, ...]


CRITIQUE_BANDS: tuple[Band, ...] = (
    Band("poor", 0.0, 40.0, ("minimal", "weak", "poor")),
    Band("fair", 40.0, 60.0, ("modest", "fair", "adequate")),
    Band("good", 60.0, 75.0, ("decent", "good", "solid")),
    Band("strong", 75.0, 90.0, ("strong", "rich", "impressive")),
    Band("exceptional", 90.0, 100.0, ("excellent", "outstanding", "exceptional")),
)


def band_for(score100: float, bands=CRITIQUE_BANDS) -> Band:
    """Band containing a 0-100 score; the top band is closed at 100."""
    for b in bands:
        if b.lo <= score100 < b.hi:
            return b
    if score100 == bands[-1].hi:
        return bands[-1]
    raise ContractError(f"score {score100} is outside [0, 100]")


def adjective_for(score100: float, bands=CRITIQUE_BANDS) -> str:
    """Pick the band adjective by where the score sits inside its band."""
    b = band_for(score100, bands)
    idx = int((score100 - b.lo) / (b.hi - b.lo) * len(b.adjectives))
    return b.adjectives[min(idx, len(b.adjectives) - 1)]


def adjective_band(bands=CRITIQUE_BANDS) -> dict[str, Band]:
    return {adj: b for b in bands for adj in b.adjectives}


# ---------------------------------------------------------------- records


@dataclass(frozen=True)
class RubricScores:
    originality: float
    color: float
    composition: float
    texture: float
    content: float

    @property
    def total(self) -> float:
        return self.originality + self.color + self.composition + self.texture + self.content

    def dims(self) -> dict[str, float]:
        return {d: getattr(self, d) for d in DIMENSIONS}

    def to_dict(self) -> dict[str, float]:
        return {**self.dims(), "total": self.total}


@dataclass
class Artwork:
    id: str
    image: np.ndarray = field(repr=False)
    params: dict
    description: str
    category: str


@dataclass
class TrainSample:
    id: str
    image: np.ndarray = field(repr=False)
    prompt: list[int]
    critique: list[int]  # reference critique ids followed by EOS
    target_score: float  # total / 100
    category: str = ""

    @property
    def scoring_pos(self) -> int:
        return len(self.prompt) - 2

    @property
    def tokens(self) -> list[int]:
        return self.prompt + self.critique

    def targets(self) -> np.ndarray:
        """Next-token labels aligned to ``tokens``; only critique predictions count.

        The [SCORING] position (whose next token is the fixed [CRITIQUE]
        marker) and every earlier prompt position carry ``IGNORE_INDEX``.
        """
        toks = self.tokens
        out = np.full(len(toks), IGNORE_INDEX, dtype=np.int64)
        start = len(self.prompt) - 1  # the [CRITIQUE] position predicts the first word
        out[start:-1] = toks[start + 1 :]
        return out


# ---------------------------------------------------------------- seeds


_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def sample_seed(dataset_seed: int, index: int) -> int:
    """Per-sample seed: the index-th output of a splitmix64 stream started at dataset_seed."""
    return splitmix64((dataset_seed + index * 0x9E3779B97F4A7C15) & _MASK64)


# ---------------------------------------------------------------- parameters


def _choice(rng: np.random.Generator, items, probs):
    return items[int(rng.choice(len(items), p=np.asarray(probs) / np.sum(probs)))]


def sample_params(seed: int, category: str) -> dict:
    if category not in CATEGORIES:
        raise ContractError(f"unknown category {category!r}")
    rng = np.random.default_rng(seed)
    counts = COUNT_PRIOR[category]
    k = _choice(rng, list(counts), list(counts.values()))
    kinds_p = KIND_PRIOR[category]
    kinds = sorted((_choice(rng, KINDS, [kinds_p[x] for x in KINDS]) for _ in range(k)), key=KINDS.index)
    motifs = []
    for kind in kinds:
        if category == "child" and rng.random() < 0.7:
            hue = TYPICAL_HUE[kind]
        else:
            hue = HUES[int(rng.integers(len(HUES)))]
        motifs.append({"kind": kind, "hue": hue})
    if category == "child":
        top = _choice(rng, HUES, [1, 1, 2, 2, 4, 1, 1, 1])
        bottom = top if rng.random() < 0.7 else HUES[int(rng.integers(len(HUES)))]
    else:
        top, bottom = HUES[int(rng.integers(len(HUES)))], HUES[int(rng.integers(len(HUES)))]
    level = int(rng.choice(len(LAYOUT_OFFSETS), p=LAYOUT_PRIOR[category]))
    theta = float(rng.uniform(0.0, 2.0 * math.pi))
    offset = LAYOUT_OFFSETS[level]
    cx, cy = offset * math.cos(theta), offset * math.sin(theta)
    if k:
        jitter = rng.uniform(-0.45, 0.45, size=(k, 2))
        jitter -= jitter.mean(axis=0)
        for m, (jx, jy) in zip(motifs, jitter):
            m["x"] = float(cx + jx)
            m["y"] = float(cy + jy)
            m["size"] = float(rng.uniform(0.14, 0.24))
    noise_level = int(rng.choice(len(NOISE_LEVELS), p=NOISE_PRIOR[category]))
    return {
        "category": category,
        "background": {"top": top, "bottom": bottom},
        "motifs": motifs,
        "noise_amplitude": NOISE_LEVELS[noise_level] * NOISE_MAX,
        "noise_seed": int(rng.integers(0, 2**31)),
    }


# ---------------------------------------------------------------- rendering


def _motif_mask(kind: str, u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    rho = np.hypot(u, v)
    ang = np.arctan2(v, u)
    if kind == "circle":
        return rho <= r
    if kind == "square":
        return (np.abs(u) <= 0.8 * r) & (np.abs(v) <= 0.8 * r)
    if kind == "triangle":
        return (v >= -r) & (v <= r) & (np.abs(u) <= (v + r) / 2)
    if kind == "star":
        return rho <= r * (0.55 + 0.45 * np.cos(5 * (ang + math.pi / 2)))
    if kind == "house":
        body = (np.abs(u) <= 0.7 * r) & (v >= 0) & (v <= r)
        roof = (v < 0) & (v >= -r) & (np.abs(u) <= 0.9 * (v + r))
        return body | roof
    if kind == "tree":
        trunk = (np.abs(u) <= 0.2 * r) & (v >= 0) & (v <= r)
        crown = np.hypot(u, v + 0.4 * r) <= 0.7 * r
        return trunk | crown
    if kind == "sun":
        return (rho <= 0.6 * r) | ((rho <= r) & (np.cos(8 * ang) > 0.5))
    if kind == "figure":
        head = np.hypot(u, v + 0.7 * r) <= 0.3 * r
        body = (np.abs(u) <= 0.15 * r) & (v >= -0.4 * r) & (v <= 0.5 * r)
        arms = (np.abs(u) <= 0.6 * r) & (np.abs(v + 0.1 * r) <= 0.08 * r)
        legs = (v > 0.5 * r) & (v <= r) & (np.abs(np.abs(u) - 0.5 * (v - 0.5 * r)) <= 0.1 * r)
        return head | body | arms | legs
    raise ContractError(f"unknown motif kind {kind!r}")


def render(params: dict, size: int = 32) -> np.ndarray:
    """Rasterise parameters to a (size, size, 3) float image in [0, 1]."""
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    u, v = np.meshgrid(coords, coords)  # u: column (x), v: row (y, downward)
    top = np.array(HUE_RGB[params["background"]["top"]])
    bottom = np.array(HUE_RGB[params["background"]["bottom"]])
    w = ((v + 1.0) / 2.0)[..., None]
    img = top + w * (bottom - top)
    for m in params["motifs"]:
        mask = _motif_mask(m["kind"], u - m["x"], v - m["y"], m["size"])
        img[mask] = HUE_RGB[m["hue"]]
    amp = params["noise_amplitude"]
    if amp > 0:
        rng = np.random.default_rng(params["noise_seed"])
        img = img + rng.uniform(-amp, amp, size=img.shape)
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------- scoring


def _multinomial(counts: dict[str, int], probs: dict[str, float]) -> float:
    k = sum(counts.values())
    p = math.factorial(k)
    for kind, n in counts.items():
        p *= probs[kind] ** n / math.factorial(n)
    return p


def _kind_counts(kinds) -> dict[str, int]:
    out: dict[str, int] = {}
    for kd in kinds:
        out[kd] = out.get(kd, 0) + 1
    return out


def combo_prior(kinds) -> float:
    """Prior probability of a motif-kind multiset under the corpus-wide generator."""
    counts = _kind_counts(kinds)
    k = sum(counts.values())
    total = 0.0
    for cat in CATEGORIES:
        pk = COUNT_PRIOR[cat].get(k, 0.0)
        if pk:
            total += CATEGORY_SHARE[cat] * pk * _multinomial(counts, KIND_PRIOR[cat])
    return total


@lru_cache(maxsize=1)
def _mode_prior() -> float:
    max_k = max(max(c) for c in COUNT_PRIOR.values())
    return max(
        combo_prior(combo)
        for k in range(1, max_k + 1)
        for combo in combinations_with_replacement(KINDS, k)
    )


def combo_frequency(kinds) -> float:
    """Prior of this multiset relative to the most probable one (1.0 for the mode)."""
    return combo_prior(kinds) / _mode_prior()


def distinct_hues(params: dict) -> int:
    hues = {params["background"]["top"], params["background"]["bottom"]}
    hues.update(m["hue"] for m in params["motifs"])
    return len(hues)


def centroid_offset(params: dict) -> float:
    """Distance of the motif centroid from the canvas centre, in half-canvas units."""
    motifs = params["motifs"]
    if not motifs:
        return 1.0
    cx = sum(m["x"] for m in motifs) / len(motifs)
    cy = sum(m["y"] for m in motifs) / len(motifs)
    return math.hypot(cx, cy)


def ground_truth_scores(params: dict) -> RubricScores:
    motifs = params["motifs"]
    k = len(motifs)
    color = 20.0 * min(distinct_hues(params), 6) / 6
    composition = 20.0 * (1.0 - min(max(centroid_offset(params), 0.0), 1.0)) if k else 0.0
    texture = 20.0 * min(1.0, params["noise_amplitude"] / NOISE_MAX)
    content = 20.0 * min(k, 5) / 5
    if k:
        originality = 20.0 * (1.0 - min(1.0, combo_frequency([m["kind"] for m in motifs])))
    else:
        originality = 0.0
    return RubricScores(originality, color, composition, texture, content)


# ---------------------------------------------------------------- texts


def _count(n: int, singular: str, plural: str) -> str:
    word = NUMBER_WORDS[n] if n < len(NUMBER_WORDS) else str(n)
    return f"{word} {singular if n == 1 else plural}"


def _join(items: list[str]) -> str:
    if len(items) <= 1:
        return "".join(items)
    return ", ".join(items[:-1]) + " and " + items[-1]


def layout_level(params: dict) -> int:
    off = centroid_offset(params)
    return int(np.argmin([abs(off - o) for o in LAYOUT_OFFSETS]))


def noise_level(params: dict) -> int:
    frac = params["noise_amplitude"] / NOISE_MAX
    return int(np.argmin([abs(frac - o) for o in NOISE_LEVELS]))


def describe(params: dict) -> str:
    motifs = params["motifs"]
    groups: dict[tuple[str, str], int] = {}
    for m in motifs:
        key = (m["kind"], m["hue"])
        groups[key] = groups.get(key, 0) + 1
    order = sorted(groups, key=lambda kh: (KINDS.index(kh[0]), HUES.index(kh[1])))
    parts = [f"{NUMBER_WORDS[groups[kh]]} {kh[1]} {kh[0] if groups[kh] == 1 else PLURAL[kh[0]]}"
             for kh in order]
    subject = SUBJECT[params["category"]]
    bg = params["background"]
    bg_text = f"plain {bg['top']}" if bg["top"] == bg["bottom"] else f"a {bg['top']} to {bg['bottom']} gradient"
    hues = _count(distinct_hues(params), "color", "colors")
    tex = TEXTURE_WORDS[noise_level(params)]
    if motifs:
        head = f"{subject} of {_count(len(motifs), 'motif', 'motifs')}: {_join(parts)}."
        tail = f"It uses {hues}, placed {LAYOUT_PHRASES[layout_level(params)]}, with a {tex} finish."
    else:
        head = f"{subject} with no motifs."
        tail = f"It uses {hues}, with a {tex} finish."
    return f"{head} The background is {bg_text}. {tail}"


def stated_score(value: float) -> int:
    """Dimension score as written in a critique: nearest integer, halves up."""
    return int(math.floor(value + 0.5))


def critique_text(params: dict, scores: RubricScores) -> str:
    """One sentence per dimension stating its score, then an overall verdict.

    Each dimension sentence gives its evidence, then the band adjective of
    the stated score (scaled to 0-100) directly ahead of the score itself,
    as in "Color, with four colors, earns a good 13 of 20."
    """
    k = len(params["motifs"])
    stated = {d: stated_score(v) for d, v in scores.dims().items()}
    evidence = {
        "color": _count(distinct_hues(params), "color", "colors"),
        "composition": f"motifs placed {LAYOUT_PHRASES[layout_level(params)]}" if k else "nothing placed",
        "texture": f"a {TEXTURE_WORDS[noise_level(params)]} finish",
        "content": _count(k, "motif", "motifs"),
    }
    sentences = []
    for d in DIMENSIONS:
        lead = d.capitalize() + (f", with {evidence[d]}," if d in evidence else "")
        adj = adjective_for(stated[d] * 5.0)
        article = "an" if adj[0] in "aeiou" else "a"
        sentences.append(f"{lead} earns {article} {adj} {stated[d]} of 20.")
    sentences.append(f"Overall the work is {adjective_for(scores.total)}.")
    return " ".join(sentences)


def compose_texts(params: dict, scores: RubricScores) -> tuple[str, str]:
    return describe(params), critique_text(params, scores)


def grammar_texts() -> list[str]:
    """Every word the description and critique templates can emit."""
    texts = [RUBRIC_PREAMBLE, *SUBJECT.values(), *LAYOUT_PHRASES, *TEXTURE_WORDS, *NUMBER_WORDS]
    texts += list(HUES) + list(KINDS) + list(PLURAL.values())
    texts += [a for b in CRITIQUE_BANDS for a in b.adjectives]
    texts += [
        "of motif motifs: , and. with no motifs. The background is plain a to gradient.",
        "It uses color colors, placed with a finish.",
        "Originality Color Composition Texture Content, with motifs placed nothing placed earns a an of.",
        "with a finish. Overall the work is.",
        " ".join(str(n) for n in range(21)),
    ]
    return texts


@lru_cache(maxsize=1)
def build_tokenizer() -> Tokenizer:
    return Tokenizer.from_texts(grammar_texts())


# ---------------------------------------------------------------- prompts


def build_prompt(tokenizer: Tokenizer, description: str, max_len: int | None = None) -> list[int]:
    """BOS, rubric preamble, description, [SCORING], [CRITIQUE]."""
    ids = [BOS_ID] + tokenizer.encode(RUBRIC_PREAMBLE) + tokenizer.encode(description)
    ids += [SCORING_ID, CRITIQUE_ID]
    if max_len is not None and len(ids) > max_len:
        raise LengthError(f"prompt has {len(ids)} tokens, budget is {max_len}")
    return ids


# ---------------------------------------------------------------- corpus


def render_artwork(seed: int, category: str, image_size: int = 32, art_id: str | None = None) -> Artwork:
    params = sample_params(seed, category)
    return Artwork(
        id=art_id or f"art-{seed:016x}",
        image=render(params, image_size),
        params=params,
        description=describe(params),
        category=category,
    )


def category_counts(n: int) -> dict[str, int]:
    """Largest-remainder allocation of n items to the 75/20/5 category mix."""
    raw = {c: CATEGORY_SHARE[c] * n for c in CATEGORIES}
    counts = {c: int(math.floor(v + 1e-9)) for c, v in raw.items()}
    rest = n - sum(counts.values())
    for c in sorted(CATEGORIES, key=lambda c: (-(raw[c] - counts[c]), CATEGORIES.index(c)))[:rest]:
        counts[c] += 1
    return counts


@dataclass
class Record:
    artwork: Artwork
    scores: RubricScores
    sample: TrainSample
    critique: str

    @property
    def id(self) -> str:
        return self.artwork.id

    @property
    def category(self) -> str:
        return self.artwork.category


def make_record(art: Artwork, tokenizer: Tokenizer, max_prompt: int | None = None) -> Record:
    scores = ground_truth_scores(art.params)
    description, critique = compose_texts(art.params, scores)
    sample = TrainSample(
        id=art.id,
        image=art.image,
        prompt=build_prompt(tokenizer, description, max_prompt),
        critique=tokenizer.encode(critique) + [EOS_ID],
        target_score=scores.total / 100.0,
        category=art.category,
    )
    return Record(art, scores, sample, critique)


def generate_dataset(n: int, seed: int, image_size: int = 32) -> list[Record]:
    if n < 10:
        raise ContractError("generate_dataset needs n >= 10")
    counts = category_counts(n)
    cats = [c for c in CATEGORIES for _ in range(counts[c])]
    order = np.random.default_rng(seed).permutation(n)
    tok = build_tokenizer()
    records = []
    for i in range(n):
        art = render_artwork(sample_seed(seed, i), cats[order[i]], image_size, art_id=f"art-{i:05d}")
        records.append(make_record(art, tok))
    return records


@dataclass
class DatasetSplit:
    train: list[str]
    test: list[str]
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DatasetSplit":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(list(d["train"]), list(d["test"]), int(d["seed"]))


def split_dataset(items, seed: int) -> DatasetSplit:
    """Per category: seeded shuffle, then every fifth item (position 4 mod 5) goes to test.

    ``items`` is a sequence of records (or any objects with ``id`` and
    ``category``). Categories whose size is not a multiple of five round the
    test share down.
    """
    items = list(items)
    if not items:
        raise ContractError("cannot split an empty dataset")
    train: list[str] = []
    test: list[str] = []
    for ci, cat in enumerate(CATEGORIES):
        ids = sorted(it.id for it in items if it.category == cat)
        perm = np.random.default_rng([seed, ci]).permutation(len(ids))
        for pos, j in enumerate(perm):
            (test if pos % 5 == 4 else train).append(ids[j])
    return DatasetSplit(sorted(train), sorted(test), seed)


# ---------------------------------------------------------------- simulated raters


def simulated_rater(scores: RubricScores, seed: int, sd: float = 1.0) -> RubricScores:
    """Ground truth perturbed per dimension by N(0, sd), clamped to [0, 20]."""
    rng = np.random.default_rng(seed)
    vals = [min(20.0, max(0.0, v + rng.normal(0.0, sd))) for v in scores.dims().values()]
    return RubricScores(*vals)


# ---------------------------------------------------------------- files


def write_ppm(path, image: np.ndarray) -> None:
    h, w, _ = image.shape
    px = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + px.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header")
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise FormatError("only binary PPM (P6) is supported")
    w, h, maxval = (int(f) for f in fields[1:])
    pos += 1
    raw = data[pos : pos + w * h * 3]
    if len(raw) != w * h * 3 or maxval != 255:
        raise FormatError("PPM payload is truncated or not 8-bit")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def _record_json(rec: Record, image_ref: str) -> dict:
    return {
        "id": rec.id,
        "category": rec.category,
        "params": rec.artwork.params,
        "scores": rec.scores.to_dict(),
        "description": rec.artwork.description,
        "critique": rec.critique,
        "image": image_ref,
    }


def write_dataset(records: list[Record], out_dir) -> list[Path]:
    """Write manifest.jsonl, vocab.txt, images.bin and one PPM per artwork."""
    from .checkpoint import write_container

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    blocks = {}
    for rec in records:
        ref = f"images/{rec.id}.ppm"
        write_ppm(out / ref, rec.artwork.image)
        blocks[f"image/{rec.id}"] = rec.artwork.image
        lines.append(json.dumps(_record_json(rec, ref), sort_keys=True))
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    size = records[0].artwork.image.shape[0] if records else 0
    write_container(out / "images.bin", {"kind": "images", "image_size": size}, blocks)
    build_tokenizer().save(out / "vocab.txt")
    return [out / "manifest.jsonl", out / "images.bin", out / "vocab.txt", out / "images"]


def read_dataset(data_dir) -> tuple[list[Record], Tokenizer]:
    """Load a corpus written by :func:`write_dataset`, re-checking every stored score."""
    from .checkpoint import read_container

    root = Path(data_dir)
    tokenizer = Tokenizer.load(root / "vocab.txt")
    meta, blocks = read_container(root / "images.bin")
    if meta.get("kind") != "images":
        raise FormatError("images.bin is not an image container")
    records = []
    for n, line in enumerate((root / "manifest.jsonl").read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            image = blocks[f"image/{d['id']}"]
        except (json.JSONDecodeError, KeyError) as exc:
            raise FormatError(f"manifest line {n + 1}: {exc}") from None
        art = Artwork(d["id"], image, d["params"], d["description"], d["category"])
        rec = make_record(art, tokenizer)
        if rec.scores.to_dict() != d["scores"] or rec.critique != d["critique"]:
            raise FormatError(f"{d['id']}: stored scores or critique disagree with its parameters")
        records.append(rec)
    return records, tokenizer
