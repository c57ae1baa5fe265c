"""Agreement metrics, critique similarity and the evaluation report.

ICC variant: two-way random effects, absolute agreement, single measure
(ICC(A,1) in McGraw and Wong's notation). With n subjects rated by k raters
and the usual two-way ANOVA mean squares::

    MSR = rows (subjects)     = k * sum_i (mean_i - grand)^2 / (n - 1)
    MSC = columns (raters)    = n * sum_j (mean_j - grand)^2 / (k - 1)
    MSE = residual            = SSE / ((n - 1)(k - 1))

    ICC(A,1) = (MSR - MSE) / (MSR + (k - 1) MSE + k (MSC - MSE) / n)

which estimates var_subject / (var_subject + var_rater + var_error).
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from . import tensor as T
from .atelier import CRITIQUE_BANDS, DIMENSIONS, Record, adjective_band, band_for
from .errors import ContractError, DimensionError, InsufficientDataError, UndefinedMetricError
from .model import VlmModel
from .trainer import predict_scores
from .vocab import EOS_ID, Tokenizer

# longest reference critique plus EOS is under 80 tokens
MAX_NEW = 96


# ---------------------------------------------------------------- scalar metrics


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionError("pearson needs two 1-D sequences of equal length")
    if x.size < 2:
        raise InsufficientDataError("pearson needs at least two points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedMetricError("correlation is undefined for constant input")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def mae(pred: Sequence[float], target: Sequence[float]) -> float:
    """Mean absolute difference, in the units of the inputs (points for 0-100 totals)."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ContractError(f"mae: length mismatch {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ContractError("mae of an empty sequence")
    return float(np.mean(np.abs(p - t)))


def icc_two_raters(rater1: Sequence[float], rater2: Sequence[float]) -> float:
    return icc_agreement(np.column_stack([rater1, rater2]))


def icc_agreement(ratings: np.ndarray) -> float:
    """ICC(A,1) for an (n subjects x k raters) table."""
    x = np.asarray(ratings, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 2:
        raise DimensionError("ratings must be an (n, k>=2) table")
    n, k = x.shape
    if n < 3:
        raise InsufficientDataError("ICC needs at least three subjects")
    grand = x.mean()
    ss_rows = k * float(((x.mean(axis=1) - grand) ** 2).sum())
    ss_cols = n * float(((x.mean(axis=0) - grand) ** 2).sum())
    ss_err = float(((x - grand) ** 2).sum()) - ss_rows - ss_cols
    msr = ss_rows / (n - 1)
    msc = ss_cols / (k - 1)
    mse = ss_err / ((n - 1) * (k - 1))
    denom = msr + (k - 1) * mse + k * (msc - mse) / n
    if denom == 0.0:
        raise UndefinedMetricError("ICC is undefined when all ratings are identical")
    return (msr - mse) / denom


# ---------------------------------------------------------------- embeddings


class SentenceEmbedder(Protocol):
    def embed(self, text: str) -> np.ndarray: ...


_TOKEN = re.compile(r"[a-z0-9']+")


def _words(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


class HashedEmbedder:
    """IDF-weighted bag of words hashed into ``dim`` signed bins, L2-normalised.

    Each lowercase word goes to bin ``h mod dim`` with sign from the top bit of
    a keyed BLAKE2b hash ``h``. IDF is ``ln((1 + N) / (1 + df)) + 1`` over the
    fitting corpus; unseen words get the ``df = 0`` weight.
    """

    def __init__(self, dim: int = 384, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._key = seed.to_bytes(8, "little", signed=False)
        self.idf: dict[str, float] = {}
        self.default_idf = 1.0
        self._slots: dict[str, tuple[int, float]] = {}

    def fit(self, corpus: Iterable[str]) -> "HashedEmbedder":
        docs = [set(_words(t)) for t in corpus]
        n = len(docs)
        df: dict[str, int] = {}
        for d in docs:
            for w in d:
                df[w] = df.get(w, 0) + 1
        self.idf = {w: math.log((1 + n) / (1 + c)) + 1.0 for w, c in sorted(df.items())}
        self.default_idf = math.log(1 + n) + 1.0
        return self

    def _slot(self, word: str) -> tuple[int, float]:
        hit = self._slots.get(word)
        if hit is None:
            h = int.from_bytes(hashlib.blake2b(word.encode(), digest_size=8, key=self._key).digest(), "little")
            hit = (h % self.dim, 1.0 if h >> 63 else -1.0)
            self._slots[word] = hit
        return hit

    def embed(self, text: str) -> np.ndarray:
        words = _words(text)
        if not words:
            raise ContractError("cannot embed empty text")
        vec = np.zeros(self.dim)
        for w in words:
            b, sign = self._slot(w)
            vec[b] += sign * self.idf.get(w, self.default_idf)
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            raise ContractError("text hashed to the zero vector")
        return vec / norm


def semantic_similarity(generated: str, reference: str, embedder: SentenceEmbedder) -> float:
    if not generated.strip() or not reference.strip():
        raise ContractError("semantic_similarity needs two non-empty texts")
    return float(np.clip(embedder.embed(generated) @ embedder.embed(reference), -1.0, 1.0))


# ---------------------------------------------------------------- band consistency


@dataclass
class BandCheck:
    consistent: bool
    no_adjectives: bool
    mismatches: list[str] = field(default_factory=list)


_DIM_LEAD = {d.capitalize() for d in DIMENSIONS}
_STATED = re.compile(r"\b(\d+(?:\.\d+)?) of 20\b")


def check_bands(predicted_score: float, critique: str, bands=CRITIQUE_BANDS) -> BandCheck:
    """Match every band adjective in the critique against the band of its score.

    A sentence that opens with a rubric dimension and states "N of 20" is
    checked against N scaled to 0-100. Every other sentence, including the
    closing verdict, is checked against ``predicted_score``.
    """
    lookup = adjective_band(bands)
    found = 0
    bad: list[str] = []
    for sentence in re.split(r"(?<=\.)\s+", critique.strip()):
        words = re.findall(r"[A-Za-z']+", sentence)
        if not words:
            continue
        stated = _STATED.search(sentence) if words[0] in _DIM_LEAD else None
        ref = float(stated.group(1)) * 5.0 if stated else predicted_score
        want = band_for(min(100.0, max(0.0, ref)), bands)
        for w in words:
            b = lookup.get(w.lower())
            if b is None:
                continue
            found += 1
            if b is not want:
                bad.append(f"{w!r} in {sentence!r} (expected {want.name})")
    if found == 0:
        return BandCheck(False, True)
    return BandCheck(not bad, False, bad)


def band_consistency(predicted_score: float, generated_critique: str, bands=CRITIQUE_BANDS) -> bool:
    return check_bands(predicted_score, generated_critique, bands).consistent


def verdict_guide(tokenizer: Tokenizer, scores: Sequence[float], bands=CRITIQUE_BANDS):
    """Token filter that keeps the closing verdict in the band of each predicted score.

    Inside a sentence opening with "Overall", band adjectives from other
    bands are masked out; the model still chooses among the allowed ones.
    Returns a callable suitable for ``VlmModel.generate_batch(allow=...)``.
    """
    lead = tokenizer.index.get("Overall")
    stop = tokenizer.index.get(".")
    masks = {}
    for b in bands:
        m = np.ones(len(tokenizer), dtype=bool)
        for other in bands:
            if other is not b:
                m[[tokenizer.index[a] for a in other.adjectives if a in tokenizer.index]] = False
        masks[b.name] = m
    wanted = [band_for(min(100.0, max(0.0, float(s))), bands).name for s in scores]

    def allow(i: int, so_far: list[int]) -> np.ndarray | None:
        start = len(so_far)
        while start > 0 and so_far[start - 1] != stop:
            start -= 1
        if start < len(so_far) and so_far[start] == lead:
            return masks[wanted[i]]
        return None

    return allow


# ---------------------------------------------------------------- report


@dataclass
class SampleRow:
    id: str
    true_total: float
    predicted_total: float
    similarity: float
    band_consistent: bool
    no_adjectives: bool
    critique: str


@dataclass
class EvaluationReport:
    pearson_r: float | None
    mae_points: float
    icc: float | None
    mean_semantic_similarity: float
    band_consistency_rate: float
    n_samples: int
    no_adjective_count: int
    rows: list[SampleRow]

    def summary(self) -> dict:
        return {
            "pearson_r": self.pearson_r,
            "mae_points": self.mae_points,
            "icc": self.icc,
            "mean_semantic_similarity": self.mean_semantic_similarity,
            "band_consistency_rate": self.band_consistency_rate,
            "n_samples": self.n_samples,
            "no_adjective_count": self.no_adjective_count,
        }

    def to_json(self) -> str:
        return json.dumps({"metrics": self.summary(), "table": "per_sample.csv"}, indent=2, sort_keys=True) + "\n"

    def table_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "true_total", "predicted_total", "similarity", "band_consistent",
                    "no_adjectives", "critique"])
        for r in self.rows:
            w.writerow([r.id, repr(r.true_total), repr(r.predicted_total), repr(r.similarity),
                        int(r.band_consistent), int(r.no_adjectives), r.critique])
        return buf.getvalue()

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json(), encoding="utf-8")
        (out / "per_sample.csv").write_text(self.table_csv(), encoding="utf-8")
        (out / "scatter.svg").write_text(
            scatter_svg([r.true_total for r in self.rows], [r.predicted_total for r in self.rows]),
            encoding="utf-8",
        )


def _optional(fn, *args) -> float | None:
    try:
        return fn(*args)
    except UndefinedMetricError:
        return None


def summarize(rows: list[SampleRow]) -> EvaluationReport:
    """Headline metrics as pure aggregates of the per-sample table."""
    if not rows:
        raise ContractError("cannot summarise an empty evaluation")
    truth = [r.true_total for r in rows]
    pred = [r.predicted_total for r in rows]
    return EvaluationReport(
        pearson_r=_optional(pearson, pred, truth),
        mae_points=mae(pred, truth),
        icc=_optional(icc_two_raters, truth, pred) if len(rows) >= 3 else None,
        mean_semantic_similarity=float(np.mean([r.similarity for r in rows])),
        band_consistency_rate=float(np.mean([r.band_consistent for r in rows])),
        n_samples=len(rows),
        no_adjective_count=sum(r.no_adjectives for r in rows),
        rows=rows,
    )


def read_table(path) -> list[SampleRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            SampleRow(d["id"], float(d["true_total"]), float(d["predicted_total"]), float(d["similarity"]),
                      d["band_consistent"] == "1", d["no_adjectives"] == "1", d["critique"])
            for d in csv.DictReader(fh)
        ]


def generate_critiques(model: VlmModel, records: Sequence[Record], tokenizer: Tokenizer,
                       max_new: int = MAX_NEW, batch_size: int = 50,
                       scores: Sequence[float] | None = None) -> list[str]:
    """Greedy critiques for a list of records, decoded to text (EOS stripped).

    With ``scores``, each closing verdict is held to the band of its score.
    """
    texts: list[str] = []
    with T.no_grad():
        for i in range(0, len(records), batch_size):
            chunk = records[i : i + batch_size]
            guide = None if scores is None else verdict_guide(tokenizer, scores[i : i + batch_size])
            visual = model.encode_images(np.stack([r.sample.image for r in chunk]))
            outs = model.generate_batch(visual, [r.sample.prompt for r in chunk], max_new, allow=guide)
            texts += [tokenizer.decode([t for t in o if t != EOS_ID]) for o in outs]
    return texts


def evaluate(model: VlmModel, records: Sequence[Record], tokenizer: Tokenizer,
             embedder: SentenceEmbedder | None = None, max_new: int = MAX_NEW,
             guided: bool = True) -> EvaluationReport:
    """Score and critique every record, then aggregate.

    The default embedder is fitted on the reference critiques of ``records``.
    ``guided`` holds each closing verdict to the band of the predicted total.
    """
    records = sorted(records, key=lambda r: r.id)
    if not records:
        raise ContractError("evaluation set is empty")
    if embedder is None:
        embedder = HashedEmbedder().fit(r.critique for r in records)
    pred = predict_scores(model, [r.sample for r in records])
    critiques = generate_critiques(model, records, tokenizer, max_new, scores=pred if guided else None)
    rows = []
    for r, p, text in zip(records, pred, critiques):
        check = check_bands(float(p), text)
        sim = semantic_similarity(text, r.critique, embedder) if text.strip() else 0.0
        rows.append(SampleRow(r.id, r.scores.total, float(p), sim, check.consistent, check.no_adjectives, text))
    return summarize(rows)


# ---------------------------------------------------------------- plotting


def scatter_svg(truth: Sequence[float], pred: Sequence[float], size: int = 420) -> str:
    """True vs predicted totals on 0-100 axes with the identity line."""
    pad = 40
    span = size - 2 * pad

    def px(v):
        return pad + span * min(100.0, max(0.0, v)) / 100.0

    def py(v):
        return size - pad - span * min(100.0, max(0.0, v)) / 100.0

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>',
        f'<line x1="{px(0)}" y1="{py(0)}" x2="{px(100)}" y2="{py(0)}" stroke="black"/>',
        f'<line x1="{px(0)}" y1="{py(0)}" x2="{px(0)}" y2="{py(100)}" stroke="black"/>',
        f'<line x1="{px(0)}" y1="{py(0)}" x2="{px(100)}" y2="{py(100)}" stroke="red" stroke-dasharray="4 3"/>',
    ]
    for tick in range(0, 101, 20):
        out.append(f'<text x="{px(tick):.1f}" y="{size - pad + 16}" font-size="11" text-anchor="middle">{tick}</text>')
        out.append(f'<text x="{pad - 8}" y="{py(tick) + 4:.1f}" font-size="11" text-anchor="end">{tick}</text>')
    out.append(f'<text x="{size / 2}" y="{size - 6}" font-size="12" text-anchor="middle">true total</text>')
    out.append(f'<text x="12" y="{size / 2}" font-size="12" text-anchor="middle" '
               f'transform="rotate(-90 12 {size / 2})">predicted total</text>')
    for t, p in zip(truth, pred):
        out.append(f'<circle cx="{px(t):.2f}" cy="{py(p):.2f}" r="2.5" fill="steelblue" fill-opacity="0.7"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
