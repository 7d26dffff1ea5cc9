"""Structured scene graphs and question parses into per-level tokens and pairs.

Images and questions each contribute three granularity levels:

  image:    concept (categories, relation predicates, attributes as nodes),
            region (per-object feature vectors), spatial (grid cells)
  question: entity, noun phrase, sentence (words plus dependency adjacency)

Each level yields an ordered token set plus directed (src, dst) index pairs
that later become the binary lead graph for that level. Feature extraction
and parsing happen upstream; this module only consumes their structured
output.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad

logger = logging.getLogger(__name__)

Pair = tuple[int, int]

# Dropped from noun phrases: determiners and words expressing positional
# relations. Fixed sets so filtering is deterministic.
DETERMINERS = frozenset({"a", "an", "the", "this", "that", "these", "those"})
POSITIONAL_WORDS = frozenset(
    {"left", "right", "top", "bottom", "above", "below", "front", "behind", "near"}
)

LEVEL_TAGS = ("concept", "region", "spatial", "entity", "noun_phrase", "sentence")


class SchemaError(ValueError):
    """An input document does not match the expected schema."""


# ---------------------------------------------------------------------------
# input structures
# ---------------------------------------------------------------------------


@dataclass
class SceneObject:
    obj_id: str
    category: str
    attributes: list[str]
    region_feature: np.ndarray


@dataclass
class SceneRelation:
    subject: str
    predicate: str
    object: str


@dataclass
class SceneGraph:
    objects: list[SceneObject]
    relations: list[SceneRelation]
    grid_size: int
    spatial_features: np.ndarray  # [grid_size**2, d_spatial]


@dataclass
class QuestionParse:
    tokens: list[str]
    entities: list[str]
    noun_phrases: list[list[str]]
    dependency_edges: list[Pair]


@dataclass
class LevelData:
    """Tokens and connection pairs for one granularity level.

    Labeled levels carry ``labels`` (and, for the concept level, ``kinds``
    distinguishing object/relation/attribute nodes); feature levels carry
    ``features``. The sentence level additionally carries the symmetrized
    dependency adjacency.
    """

    level: str
    labels: list[str] | None = None
    features: np.ndarray | None = None
    pairs: list[Pair] = field(default_factory=list)
    dep_adjacency: np.ndarray | None = None
    kinds: list[str] | None = None

    def __post_init__(self):
        if self.level not in LEVEL_TAGS:
            raise ValueError(f"unknown level tag {self.level!r}")
        n = self.n_tokens
        for src, dst in self.pairs:
            if not (0 <= src < n and 0 <= dst < n):
                raise ValueError(f"{self.level} level: pair ({src}, {dst}) exceeds {n} tokens")

    @property
    def n_tokens(self) -> int:
        if self.labels is not None:
            return len(self.labels)
        if self.features is not None:
            return self.features.shape[0]
        return 0


def _require(d: dict, key: str, source: str):
    if key not in d:
        raise SchemaError(f"{source}: missing field {key!r}")
    return d[key]


def scene_from_dict(d: dict, source: str = "scene") -> SceneGraph:
    objects = []
    for i, od in enumerate(_require(d, "objects", source)):
        osrc = f"{source}: objects[{i}]"
        objects.append(SceneObject(
            obj_id=str(_require(od, "id", osrc)),
            category=str(_require(od, "category", osrc)),
            attributes=[str(a) for a in od.get("attributes", [])],
            region_feature=np.asarray(_require(od, "region_feature", osrc), dtype=np.float64),
        ))
    ids = [o.obj_id for o in objects]
    if len(set(ids)) != len(ids):
        raise SchemaError(f"{source}: duplicate object ids")
    relations = []
    for i, rd in enumerate(d.get("relations", [])):
        rsrc = f"{source}: relations[{i}]"
        rel = SceneRelation(
            subject=str(_require(rd, "subject", rsrc)),
            predicate=str(_require(rd, "predicate", rsrc)),
            object=str(_require(rd, "object", rsrc)),
        )
        for ref in (rel.subject, rel.object):
            if ref not in ids:
                raise SchemaError(f"{rsrc}: unknown object id {ref!r}")
        relations.append(rel)
    spatial = _require(d, "spatial", source)
    g = int(_require(spatial, "grid_size", f"{source}: spatial"))
    feats = np.asarray(_require(spatial, "features", f"{source}: spatial"), dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] != g * g:
        raise SchemaError(f"{source}: spatial features must be a {g * g} x d matrix")
    return SceneGraph(objects=objects, relations=relations, grid_size=g, spatial_features=feats)


def scene_to_dict(sg: SceneGraph) -> dict:
    return {
        "objects": [
            {
                "id": o.obj_id,
                "category": o.category,
                "attributes": list(o.attributes),
                "region_feature": [float(v) for v in o.region_feature],
            }
            for o in sg.objects
        ],
        "relations": [
            {"subject": r.subject, "predicate": r.predicate, "object": r.object}
            for r in sg.relations
        ],
        "spatial": {
            "grid_size": sg.grid_size,
            "features": [[float(v) for v in row] for row in sg.spatial_features],
        },
    }


def question_from_dict(d: dict, source: str = "question") -> QuestionParse:
    tokens = [str(t) for t in _require(d, "tokens", source)]
    entities = [str(e) for e in _require(d, "entities", source)]
    phrases = [[str(w) for w in p] for p in _require(d, "noun_phrases", source)]
    edges = []
    for i, e in enumerate(_require(d, "dependency_edges", source)):
        if len(e) != 2:
            raise SchemaError(f"{source}: dependency_edges[{i}] must be a (head, dependent) pair")
        h, dep = int(e[0]), int(e[1])
        if not (0 <= h < len(tokens) and 0 <= dep < len(tokens)):
            raise SchemaError(f"{source}: dependency_edges[{i}] index out of range")
        edges.append((h, dep))
    return QuestionParse(tokens=tokens, entities=entities, noun_phrases=phrases,
                         dependency_edges=edges)


def question_to_dict(qp: QuestionParse) -> dict:
    return {
        "tokens": list(qp.tokens),
        "entities": list(qp.entities),
        "noun_phrases": [list(p) for p in qp.noun_phrases],
        "dependency_edges": [[h, d] for h, d in qp.dependency_edges],
    }


# ---------------------------------------------------------------------------
# image levels
# ---------------------------------------------------------------------------


def build_concept_level(sg: SceneGraph) -> LevelData:
    """Semantic graph over categories, relation predicates, and attributes.

    Relations become extra nodes, so each subject-predicate-object triple
    contributes the pairs subject->predicate and predicate->object; each
    attribute assignment contributes owner->attribute. Token order follows
    a breadth-first walk of this graph (successors before predecessors,
    both in construction order) starting from the objects in scene order,
    which interleaves relation and attribute nodes between the categories
    they connect.
    """
    index_of_obj = {o.obj_id: i for i, o in enumerate(sg.objects)}
    labels = [o.category for o in sg.objects]
    kinds = ["object"] * len(sg.objects)
    edges: list[Pair] = []

    for rel in sg.relations:
        if rel.subject not in index_of_obj or rel.object not in index_of_obj:
            raise ValueError(f"relation references unknown object: {rel}")
        node = len(labels)
        labels.append(rel.predicate)
        kinds.append("relation")
        edges.append((index_of_obj[rel.subject], node))
        edges.append((node, index_of_obj[rel.object]))
    for i, obj in enumerate(sg.objects):
        for attr in obj.attributes:
            node = len(labels)
            labels.append(attr)
            kinds.append("attribute")
            edges.append((i, node))

    succ: list[list[int]] = [[] for _ in labels]
    pred: list[list[int]] = [[] for _ in labels]
    for src, dst in edges:
        succ[src].append(dst)
        pred[dst].append(src)

    order: list[int] = []
    seen = [False] * len(labels)
    for root in range(len(sg.objects)):
        if seen[root]:
            continue
        seen[root] = True
        order.append(root)
        queue = deque([root])
        while queue:
            u = queue.popleft()
            for v in succ[u] + pred[u]:
                if not seen[v]:
                    seen[v] = True
                    order.append(v)
                    queue.append(v)
    for v in range(len(labels)):  # unreachable nodes cannot occur for valid scenes
        if not seen[v]:
            order.append(v)

    new_index = {old: new for new, old in enumerate(order)}
    return LevelData(
        level="concept",
        labels=[labels[old] for old in order],
        kinds=[kinds[old] for old in order],
        pairs=[(new_index[s], new_index[d]) for s, d in edges],
    )


def merge_duplicate_concept_tokens(level: LevelData) -> LevelData:
    """Collapse same-label relation nodes and same-label attribute nodes.

    Object category tokens are never merged. The surviving node is the
    first occurrence; pairs are re-pointed at it and deduplicated.
    """
    if level.level != "concept":
        raise ValueError("merge_duplicate_concept_tokens expects the concept level")
    assert level.labels is not None and level.kinds is not None
    first: dict[tuple[str, str], int] = {}
    keep: list[int] = []
    target: dict[int, int] = {}
    for i, (label, kind) in enumerate(zip(level.labels, level.kinds)):
        if kind == "object":
            target[i] = len(keep)
            keep.append(i)
            continue
        key = (kind, label)
        if key in first:
            target[i] = first[key]
        else:
            first[key] = len(keep)
            target[i] = len(keep)
            keep.append(i)
    pairs: list[Pair] = []
    seen: set[Pair] = set()
    for s, d in level.pairs:
        p = (target[s], target[d])
        if p not in seen:
            seen.add(p)
            pairs.append(p)
    return LevelData(
        level="concept",
        labels=[level.labels[i] for i in keep],
        kinds=[level.kinds[i] for i in keep],
        pairs=pairs,
    )


def build_region_level(sg: SceneGraph) -> LevelData:
    """Per-object visual features; one pair per semantic relation, deduplicated."""
    index_of_obj = {o.obj_id: i for i, o in enumerate(sg.objects)}
    feats = (np.stack([o.region_feature for o in sg.objects])
             if sg.objects else np.zeros((0, 0)))
    pairs: list[Pair] = []
    seen: set[Pair] = set()
    for rel in sg.relations:
        p = (index_of_obj[rel.subject], index_of_obj[rel.object])
        if p not in seen:
            seen.add(p)
            pairs.append(p)
    return LevelData(level="region", features=feats, pairs=pairs)


def _fully_connected(n: int) -> list[Pair]:
    return [(i, j) for i in range(n) for j in range(n)]


def build_spatial_level(sg: SceneGraph) -> LevelData:
    """Grid-cell features in row-major order, fully connected."""
    n = sg.grid_size * sg.grid_size
    if sg.spatial_features.shape[0] != n:
        raise ValueError("spatial grid features do not match grid size")
    return LevelData(level="spatial", features=sg.spatial_features,
                     pairs=_fully_connected(n))


# ---------------------------------------------------------------------------
# question levels
# ---------------------------------------------------------------------------


def build_entity_level(qp: QuestionParse) -> LevelData:
    """Entity mentions without attributes, fully connected."""
    labels = list(qp.entities)
    return LevelData(level="entity", labels=labels, pairs=_fully_connected(len(labels)))


def build_noun_phrase_level(qp: QuestionParse) -> LevelData:
    """Noun-phrase words minus determiners and positional words, one token each."""
    words = [w for phrase in qp.noun_phrases for w in phrase
             if w not in DETERMINERS and w not in POSITIONAL_WORDS]
    return LevelData(level="noun_phrase", labels=words, pairs=_fully_connected(len(words)))


def build_sentence_level(qp: QuestionParse) -> LevelData:
    """All question words, with the symmetrized self-looped dependency adjacency."""
    n = len(qp.tokens)
    adj = np.eye(n)
    for h, d in qp.dependency_edges:
        if not (0 <= h < n and 0 <= d < n):
            raise ValueError(f"dependency edge ({h}, {d}) out of range for {n} tokens")
        adj[h, d] = 1.0
        adj[d, h] = 1.0
    return LevelData(level="sentence", labels=list(qp.tokens),
                     pairs=_fully_connected(n), dep_adjacency=adj)


# ---------------------------------------------------------------------------
# node reduction (ablation)
# ---------------------------------------------------------------------------


def node_reduction(image_level: LevelData, question_level: LevelData) -> LevelData:
    """Merge identically labeled tokens of two labeled levels into shared nodes.

    Question tokens whose label already occurs on the image side collapse
    onto that node (first occurrence); the remaining question tokens are
    appended. Edge sets are unioned, re-indexed, and deduplicated. Used by
    the node-reduction ablation only; off in the default configuration.
    """
    if image_level.labels is None or question_level.labels is None:
        raise ValueError("node_reduction needs two labeled levels")
    labels = list(image_level.labels)
    kinds = list(image_level.kinds or ["object"] * len(labels))
    first = {}
    for i, label in enumerate(labels):
        first.setdefault(label, i)
    mapping: dict[int, int] = {}
    for j, label in enumerate(question_level.labels):
        if label in first:
            mapping[j] = first[label]
        else:
            idx = len(labels)
            labels.append(label)
            kinds.append("entity")
            first[label] = idx
            mapping[j] = idx
    pairs: list[Pair] = []
    seen: set[Pair] = set()
    for s, d in list(image_level.pairs) + [(mapping[s], mapping[d])
                                           for s, d in question_level.pairs]:
        if (s, d) not in seen:
            seen.add((s, d))
            pairs.append((s, d))
    return LevelData(level="concept", labels=labels, kinds=kinds, pairs=pairs)


# ---------------------------------------------------------------------------
# vocabulary and token embedding
# ---------------------------------------------------------------------------


class Vocab:
    """Word-to-id map with a reserved unknown id at 0."""

    UNK_ID = 0

    def __init__(self, words: Sequence[str]):
        self.words = list(words)
        if len(set(self.words)) != len(self.words):
            raise ValueError("vocabulary contains duplicates")
        self._index = {w: i + 1 for i, w in enumerate(self.words)}
        self._warned: set[str] = set()

    @property
    def size(self) -> int:
        return len(self.words) + 1

    def ids(self, labels: Sequence[str]) -> list[int]:
        out = []
        for label in labels:
            i = self._index.get(label)
            if i is None:
                if label not in self._warned:
                    self._warned.add(label)
                    logger.warning("unknown word %r mapped to the unknown id", label)
                i = self.UNK_ID
            out.append(i)
        return out


def embed_tokens(labels: Sequence[str], vocab: Vocab, table: ad.Tensor,
                 w1: ad.Tensor, b1: ad.Tensor, w2: ad.Tensor, b2: ad.Tensor) -> ad.Tensor:
    """Label tokens through the embedding table and a two-layer ReLU MLP."""
    rows = ad.embedding_lookup(table, vocab.ids(labels))
    hidden = ad.relu(ad.add(ad.matmul(rows, w1), b1))
    return ad.add(ad.matmul(hidden, w2), b2)


def project_features(features: np.ndarray, w: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    """Raw feature vectors through a level-specific linear projection."""
    return ad.add(ad.matmul(ad.Tensor(features), w), b)


def load_word_vectors(path) -> tuple[list[str], np.ndarray]:
    """Read a plain text word-vector file: one ``word v1 ... vd`` line per word."""
    words: list[str] = []
    rows: list[list[float]] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            try:
                vec = [float(v) for v in parts[1:]]
            except ValueError as e:
                raise SchemaError(f"{path}: line {lineno}: {e}") from None
            if not vec:
                raise SchemaError(f"{path}: line {lineno}: no vector components")
            if rows and len(vec) != len(rows[0]):
                raise SchemaError(f"{path}: line {lineno}: inconsistent dimension")
            words.append(parts[0])
            rows.append(vec)
    if not words:
        raise SchemaError(f"{path}: empty word-vector file")
    return words, np.array(rows)
