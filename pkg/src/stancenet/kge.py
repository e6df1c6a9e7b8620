"""Knowledge graph embedding: scoring, training, and link-prediction evaluation.

A knowledge graph is a set of <head, relation, tail> facts. Entities and
relations get dense embeddings trained so that observed facts score higher
than corrupted ones. Three scoring functions are supported:

* ``RotatE``  - entities are complex vectors (dim/2 pairs stored real-part
  first), relations are unit-modulus rotations; score is gamma minus the
  summed complex moduli of ``h * r - t``.
* ``ModE``    - real elementwise product; score is gamma minus the L1
  distance between ``h * r`` and ``t``.
* ``HAKE``    - entities split into a modulus half and a phase half;
  score is gamma minus a weighted L2 modulus distance minus a weighted
  L1 phase distance through ``|sin((h_p + r_p - t_p) / 2)|``.

Training minimises a self-adversarial negative-sampling loss with SGD;
gradients come from the autodiff tape. Evaluation ranks every entity as a
replacement for the head and for the tail of each test triple, in the
filtered setting (other known-true triples are excluded from the
candidate pool), with ties broken by ascending entity id.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

METHODS = ("RotatE", "ModE", "HAKE")

_GRAD_EPS = 1e-30  # keeps sqrt gradients bounded when a distance hits zero


class TripleFormatError(ValueError):
    """A triple file line that is not head<TAB>relation<TAB>tail."""


@dataclass
class TripleStore:
    """One knowledge graph: vocabularies in first-appearance order plus its facts."""

    entities: dict[str, int]
    entity_names: list[str]
    relations: dict[str, int]
    relation_names: list[str]
    triples: list[tuple[int, int, int]]
    stance_tag: str
    duplicates_dropped: int = 0

    @property
    def n_entities(self) -> int:
        return len(self.entity_names)

    @property
    def n_relations(self) -> int:
        return len(self.relation_names)


def load_triples(path, stance_tag: str) -> TripleStore:
    """Parse a TSV triple file; '#' lines are comments, duplicates are dropped."""
    entities: dict[str, int] = {}
    entity_names: list[str] = []
    relations: dict[str, int] = {}
    relation_names: list[str] = []
    triples: list[tuple[int, int, int]] = []
    seen: set[tuple[int, int, int]] = set()
    duplicates = 0

    def intern(name: str, table: dict[str, int], names: list[str]) -> int:
        if name not in table:
            table[name] = len(names)
            names.append(name)
        return table[name]

    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise TripleFormatError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}"
                )
            h = intern(fields[0], entities, entity_names)
            r = intern(fields[1], relations, relation_names)
            t = intern(fields[2], entities, entity_names)
            triple = (h, r, t)
            if triple in seen:
                duplicates += 1
                continue
            seen.add(triple)
            triples.append(triple)
    return TripleStore(entities, entity_names, relations, relation_names, triples,
                       stance_tag, duplicates)


@dataclass
class KgeConfig:
    method: str = "RotatE"
    dim: int = 16
    gamma: float = 6.0
    negatives: int = 8
    lr: float = 0.05
    epochs: int = 100
    seed: int = 0
    adv_temperature: float = 1.0
    lambda_modulus: float = 1.0
    lambda_phase: float = 1.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown embedding method {self.method!r}; choose from {METHODS}")
        if self.method in ("RotatE", "HAKE") and self.dim % 2 != 0:
            raise ValueError(f"{self.method} needs an even dim (pairs/halves), got {self.dim}")


@dataclass
class KgeModel:
    """Trained entity/relation parameters under one scoring method."""

    method: str
    dim: int
    gamma: float
    entity: np.ndarray    # [n_entities, dim]
    relation: np.ndarray  # [n_relations, dim or dim/2]
    lambda_modulus: float = 1.0
    lambda_phase: float = 1.0
    epoch_losses: list[float] = field(default_factory=list)

    @property
    def n_entities(self) -> int:
        return self.entity.shape[0]


def _wrap_phase(x: np.ndarray) -> np.ndarray:
    return np.mod(x + np.pi, 2.0 * np.pi) - np.pi


def init_kge_model(n_entities: int, n_relations: int, config: KgeConfig) -> KgeModel:
    rng = np.random.default_rng(config.seed)
    bound = 1.0 / np.sqrt(config.dim)
    entity = rng.uniform(-bound, bound, (n_entities, config.dim))
    if config.method == "RotatE":
        relation = rng.uniform(-np.pi, np.pi, (n_relations, config.dim // 2))
    elif config.method == "ModE":
        relation = rng.uniform(-bound, bound, (n_relations, config.dim))
    else:  # HAKE: modulus half free, phase half wrapped
        relation = rng.uniform(-bound, bound, (n_relations, config.dim))
        half = config.dim // 2
        relation[:, half:] = rng.uniform(-np.pi, np.pi, (n_relations, half))
        entity[:, half:] = _wrap_phase(entity[:, half:])
    return KgeModel(config.method, config.dim, config.gamma, entity, relation,
                    config.lambda_modulus, config.lambda_phase)


# --------------------------------------------------------------------------
# Scoring
# --------------------------------------------------------------------------

def _candidate_scores(m: KgeModel, side: str, r: int, fixed: int) -> np.ndarray:
    """Scores of every entity substituted on one side of (h, r, t).

    side="head": score(c, r, fixed) for all c. side="tail": score(fixed, r, c).
    """
    E = m.entity
    rel = m.relation[r]
    if m.method == "RotatE":
        half = m.dim // 2
        e_re, e_im = E[:, :half], E[:, half:]
        f_re, f_im = m.entity[fixed, :half], m.entity[fixed, half:]
        cos_r, sin_r = np.cos(rel), np.sin(rel)
        if side == "head":
            d_re = e_re * cos_r - e_im * sin_r - f_re
            d_im = e_re * sin_r + e_im * cos_r - f_im
        else:
            hr_re = f_re * cos_r - f_im * sin_r
            hr_im = f_re * sin_r + f_im * cos_r
            d_re = hr_re - e_re
            d_im = hr_im - e_im
        return m.gamma - np.hypot(d_re, d_im).sum(axis=1)
    if m.method == "ModE":
        f = m.entity[fixed]
        if side == "head":
            return m.gamma - np.abs(E * rel - f).sum(axis=1)
        return m.gamma - np.abs(f * rel - E).sum(axis=1)
    # HAKE
    half = m.dim // 2
    e_m, e_p = E[:, :half], E[:, half:]
    f_m, f_p = m.entity[fixed, :half], m.entity[fixed, half:]
    r_m, r_p = rel[:half], rel[half:]
    if side == "head":
        d_m = e_m * r_m - f_m
        d_p = e_p + r_p - f_p
    else:
        d_m = f_m * r_m - e_m
        d_p = f_p + r_p - e_p
    mod_term = np.sqrt((d_m * d_m).sum(axis=1))
    phase_term = np.abs(np.sin(d_p / 2.0)).sum(axis=1)
    return m.gamma - m.lambda_modulus * mod_term - m.lambda_phase * phase_term


def score_triple(m: KgeModel, h: int, r: int, t: int) -> float:
    """Plausibility score of one triple; higher means more plausible."""
    return float(_candidate_scores(m, "tail", r, h)[t])


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

def _score_tensor(method, gamma, lam_m, lam_p, dim, ent: Tensor, rel: Tensor,
                  h: int, r: int, t: int) -> Tensor:
    """The scoring formula built from tape ops, for gradient-based training."""
    h_row = ad.gather_rows(ent, [h])
    t_row = ad.gather_rows(ent, [t])
    r_row = ad.gather_rows(rel, [r])
    if method == "RotatE":
        half = dim // 2
        eps = ad.constant(np.full((1, half), _GRAD_EPS))
        h_re, h_im = ad.slice_cols(h_row, 0, half), ad.slice_cols(h_row, half, dim)
        t_re, t_im = ad.slice_cols(t_row, 0, half), ad.slice_cols(t_row, half, dim)
        cos_r, sin_r = ad.cos(r_row), ad.sin(r_row)
        d_re = ad.sub(ad.sub(ad.mul(h_re, cos_r), ad.mul(h_im, sin_r)), t_re)
        d_im = ad.sub(ad.add(ad.mul(h_re, sin_r), ad.mul(h_im, cos_r)), t_im)
        moduli = ad.sqrt(ad.add(ad.add(ad.mul(d_re, d_re), ad.mul(d_im, d_im)), eps))
        dist = ad.sum_all(moduli)
    elif method == "ModE":
        d = ad.sub(ad.mul(h_row, r_row), t_row)
        dist = ad.sum_all(ad.absolute(d))
    else:  # HAKE
        half = dim // 2
        h_m, h_p = ad.slice_cols(h_row, 0, half), ad.slice_cols(h_row, half, dim)
        t_m, t_p = ad.slice_cols(t_row, 0, half), ad.slice_cols(t_row, half, dim)
        r_m, r_p = ad.slice_cols(r_row, 0, half), ad.slice_cols(r_row, half, dim)
        d_m = ad.sub(ad.mul(h_m, r_m), t_m)
        mod_term = ad.sqrt(ad.add(ad.sum_all(ad.mul(d_m, d_m)), ad.constant(_GRAD_EPS)))
        d_p = ad.scale(ad.sub(ad.add(h_p, r_p), t_p), 0.5)
        phase_term = ad.sum_all(ad.absolute(ad.sin(d_p)))
        dist = ad.add(ad.scale(mod_term, lam_m), ad.scale(phase_term, lam_p))
    return ad.add(ad.constant(gamma), ad.scale(dist, -1.0))


def train_kge(store: TripleStore, config: KgeConfig) -> KgeModel:
    """Fit embeddings to a triple store with self-adversarial negative sampling.

    One SGD step per positive triple, in a fixed order, so a seed fully
    determines the final parameters. Per-epoch mean losses are recorded on
    the returned model.
    """
    if not store.triples:
        raise ValueError("cannot train on an empty triple store")
    model = init_kge_model(store.n_entities, store.n_relations, config)
    ent = Tensor(model.entity, requires_grad=True)
    rel = Tensor(model.relation, requires_grad=True)
    rng = np.random.default_rng(config.seed + 1)
    n_ent = store.n_entities
    half = config.dim // 2

    def wrap_params():
        if config.method == "RotatE":
            rel.data[:] = _wrap_phase(rel.data)
        elif config.method == "HAKE":
            ent.data[:, half:] = _wrap_phase(ent.data[:, half:])
            rel.data[:, half:] = _wrap_phase(rel.data[:, half:])

    for _ in range(config.epochs):
        losses = []
        for h, r, t in store.triples:
            with Tape() as tape:
                pos = _score_tensor(config.method, config.gamma, config.lambda_modulus,
                                    config.lambda_phase, config.dim, ent, rel, h, r, t)
                loss = ad.scale(ad.logsigmoid(pos), -1.0)
                if n_ent >= 2 and config.negatives > 0:
                    neg_scores = []
                    for k in range(config.negatives):
                        corrupt_head = bool(rng.integers(0, 2))
                        cand = int(rng.integers(0, n_ent))
                        true_id = h if corrupt_head else t
                        if cand == true_id:
                            cand = (cand + 1) % n_ent
                        if corrupt_head:
                            neg_scores.append(_score_tensor(
                                config.method, config.gamma, config.lambda_modulus,
                                config.lambda_phase, config.dim, ent, rel, cand, r, t))
                        else:
                            neg_scores.append(_score_tensor(
                                config.method, config.gamma, config.lambda_modulus,
                                config.lambda_phase, config.dim, ent, rel, h, r, cand))
                    raw = np.array([s.data for s in neg_scores])
                    # adversarial weights are data, not part of the gradient
                    w = np.exp(config.adv_temperature * (raw - raw.max()))
                    w /= w.sum()
                    for weight, s in zip(w, neg_scores):
                        loss = ad.add(loss, ad.scale(ad.logsigmoid(ad.scale(s, -1.0)), -weight))
                tape.backward(loss)
            losses.append(float(loss.data))
            for p in (ent, rel):
                if p.grad is not None:
                    if not np.all(np.isfinite(p.grad)):
                        raise FloatingPointError("non-finite gradient in embedding training")
                    p.data -= config.lr * p.grad
                    p.zero_grad()
            wrap_params()
        model.epoch_losses.append(float(np.mean(losses)))

    model.entity = ent.data
    model.relation = rel.data
    return model


# --------------------------------------------------------------------------
# Link-prediction evaluation
# --------------------------------------------------------------------------

def evaluate_completion(
    m: KgeModel,
    store: TripleStore,
    test: Sequence[tuple[int, int, int]],
    k_list: Sequence[int] = (1, 3, 10),
) -> dict[str, float]:
    """Filtered ranking metrics (MR, MRR, HITS@k) over head and tail corruption.

    For each test triple and each side, every entity is scored as a
    replacement; entities forming a different known-true triple are
    excluded. The true entity's rank counts strictly-better scores plus
    equal-score entities with a smaller id.
    """
    if not test:
        raise ValueError("evaluate_completion needs at least one test triple")
    known = set(store.triples) | {tuple(tr) for tr in test}
    ranks: list[int] = []
    for h, r, t in test:
        for side, true_id, fixed in (("head", h, t), ("tail", t, h)):
            scores = _candidate_scores(m, side, r, fixed)
            true_score = scores[true_id]
            rank = 1
            for c in range(m.n_entities):
                if c == true_id:
                    continue
                candidate = (c, r, fixed) if side == "head" else (fixed, r, c)
                if candidate in known:
                    continue
                if scores[c] > true_score or (scores[c] == true_score and c < true_id):
                    rank += 1
            ranks.append(rank)

    arr = np.array(ranks, dtype=np.float64)
    metrics = {"MR": float(arr.mean()), "MRR": float((1.0 / arr).mean())}
    for k in k_list:
        metrics[f"HITS@{k}"] = float((arr <= k).mean())
    return metrics


# --------------------------------------------------------------------------
# Vocabulary-aligned export
# --------------------------------------------------------------------------

@dataclass
class KnowledgeEmbeddingTable:
    """Per-vocabulary-word external-knowledge vectors for one stance."""

    stance_tag: str
    vectors: np.ndarray   # [n_words, width]
    coverage: np.ndarray  # [n_words] 0/1, zero rows exactly where coverage is 0

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    @property
    def n_words(self) -> int:
        return self.vectors.shape[0]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"stance={self.stance_tag}\n")
            fh.write(f"dim={self.width}\n")
            for row in self.vectors:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")

    @staticmethod
    def load(path) -> "KnowledgeEmbeddingTable":
        with open(path, encoding="utf-8") as fh:
            stance_line = fh.readline().strip()
            dim_line = fh.readline().strip()
            if not stance_line.startswith("stance=") or not dim_line.startswith("dim="):
                raise ValueError(f"{path}: expected 'stance=' and 'dim=' header lines")
            stance = stance_line.split("=", 1)[1]
            width = int(dim_line.split("=", 1)[1])
            rows = [np.array(line.split(), dtype=np.float64) for line in fh if line.strip()]
        vectors = np.vstack(rows) if rows else np.zeros((0, width))
        if vectors.shape[1] != width:
            raise ValueError(f"{path}: row width {vectors.shape[1]} does not match dim={width}")
        coverage = (np.abs(vectors).sum(axis=1) > 0).astype(np.float64)
        return KnowledgeEmbeddingTable(stance, vectors, coverage)


def zero_table(stance_tag: str, n_words: int, width: int) -> KnowledgeEmbeddingTable:
    return KnowledgeEmbeddingTable(
        stance_tag, np.zeros((n_words, width)), np.zeros(n_words)
    )


def load_links(path) -> dict[str, str]:
    """word<TAB>entity_name per line; '#' comments allowed."""
    links: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise TripleFormatError(
                    f"{path}:{lineno}: expected word<TAB>entity, got {len(fields)} fields"
                )
            links[fields[0]] = fields[1]
    return links


def export_aligned_table(
    m: KgeModel,
    links: dict[str, str],
    vocab,
    store: TripleStore,
    width: Optional[int] = None,
) -> KnowledgeEmbeddingTable:
    """Build a vocabulary-aligned table from entity embeddings.

    Linked words get their entity's raw parameter row (for RotatE that is
    the real-then-imaginary concatenation, for HAKE modulus-then-phase),
    truncated or zero-padded to ``width``. Unlinked words stay all-zero
    with coverage 0.
    """
    width = m.dim if width is None else int(width)
    vectors = np.zeros((len(vocab), width))
    coverage = np.zeros(len(vocab))
    for word, entity_name in links.items():
        if entity_name not in store.entities:
            raise ValueError(f"word {word!r} links to unknown entity {entity_name!r}")
        wid = vocab.token_to_id.get(word)
        if wid is None:
            continue  # word not in this corpus vocabulary
        row = m.entity[store.entities[entity_name]]
        take = min(width, row.shape[0])
        vectors[wid, :take] = row[:take]
        coverage[wid] = 1.0
    return KnowledgeEmbeddingTable(store.stance_tag, vectors, coverage)
