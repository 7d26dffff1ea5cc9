"""Synthetic grid-world VQA corpus with an exact symbolic solver.

Scenes place a few attributed objects on a small grid; left/right
relations follow from column order. Questions come from three fixed
templates (attribute, relation, existence) with hand-built parses.
Region and spatial features are seeded hash-to-vector maps plus noise,
so labels never depend on the noise. ``solve`` re-derives every answer
from the scene graph alone and serves as the ground-truth oracle.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .ingest import (
    QuestionParse,
    SceneGraph,
    SceneObject,
    SceneRelation,
    SchemaError,
    question_from_dict,
    question_to_dict,
    scene_from_dict,
    scene_to_dict,
)

MANIFEST_VERSION = 1

TEMPLATES = ("attribute", "relation", "exist")

# fixed (head, dependent) edge lists per template, over token indices
_DEP_EDGES = {
    # what color is the <cat>
    "attribute": [(2, 0), (2, 1), (4, 3), (2, 4)],
    # what is <rel> the <cat>
    "relation": [(1, 0), (1, 2), (4, 3), (2, 4)],
    # is there a <cat>
    "exist": [(0, 1), (3, 2), (0, 3)],
}


@dataclass(frozen=True)
class ToyWorldSpec:
    """Generator configuration: the closed world the corpus is drawn from."""

    categories: tuple[str, ...] = ("girl", "dog", "cat", "ball")
    attributes: tuple[str, ...] = ("brown", "red", "blue", "green")
    relations: tuple[str, str] = ("left", "right")
    objects_min: int = 2
    objects_max: int = 2
    grid_size: int = 2
    d_region: int = 32
    d_spatial: int = 32
    feature_noise: float = 0.05
    # overall multiplier on region and grid feature magnitudes
    feature_scale: float = 1.0
    templates: tuple[str, ...] = TEMPLATES

    def __post_init__(self):
        object.__setattr__(self, "categories", tuple(self.categories))
        object.__setattr__(self, "attributes", tuple(self.attributes))
        object.__setattr__(self, "relations", tuple(self.relations))
        object.__setattr__(self, "templates", tuple(self.templates))
        if not self.categories:
            raise ValueError("empty category set")
        if not self.attributes:
            raise ValueError("empty attribute set")
        if len(self.relations) != 2:
            raise ValueError("exactly two relations (column order and its reverse)")
        if not (1 <= self.objects_min <= self.objects_max):
            raise ValueError("objects per scene range is invalid")
        if self.objects_max > len(self.categories):
            raise ValueError("objects_max exceeds the category set (sampling is without replacement)")
        if self.objects_max > self.grid_size ** 2:
            raise ValueError("objects_max exceeds the number of grid cells")
        if not self.templates or any(t not in TEMPLATES for t in self.templates):
            raise ValueError(f"templates must be a nonempty subset of {TEMPLATES}")

    def word_vocab(self) -> list[str]:
        words = ["what", "color", "is", "the", "there", "a"]
        for group in (self.categories, self.attributes, self.relations):
            for w in group:
                if w not in words:
                    words.append(w)
        return words

    def answer_vocab(self) -> list[str]:
        out = list(self.attributes)
        for c in self.categories:
            if c not in out:
                out.append(c)
        for yn in ("yes", "no"):
            if yn not in out:
                out.append(yn)
        return out

    def to_dict(self) -> dict:
        return {
            "categories": list(self.categories),
            "attributes": list(self.attributes),
            "relations": list(self.relations),
            "objects_min": self.objects_min,
            "objects_max": self.objects_max,
            "grid_size": self.grid_size,
            "d_region": self.d_region,
            "d_spatial": self.d_spatial,
            "feature_noise": self.feature_noise,
            "feature_scale": self.feature_scale,
            "templates": list(self.templates),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToyWorldSpec":
        known = {f for f in cls.__dataclass_fields__}
        bad = set(d) - known
        if bad:
            raise SchemaError(f"world spec: unknown fields {sorted(bad)}")
        kwargs = dict(d)
        for key in ("categories", "attributes", "relations", "templates"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


DEFAULT_WORLD = ToyWorldSpec()


@dataclass
class Sample:
    sample_id: str
    template: str
    scene: SceneGraph
    question: QuestionParse
    answer: str


@dataclass
class Dataset:
    samples: list[Sample]
    word_vocab: list[str]
    answer_vocab: list[str]
    d_region: int
    d_spatial: int
    grid_size: int
    _answer_index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self._answer_index = {a: i for i, a in enumerate(self.answer_vocab)}

    def __len__(self) -> int:
        return len(self.samples)

    def answer_index(self, label: str) -> int:
        if label not in self._answer_index:
            raise ValueError(f"answer {label!r} not in the answer vocabulary")
        return self._answer_index[label]


# ---------------------------------------------------------------------------
# feature synthesis
# ---------------------------------------------------------------------------


def hash_vector(key: str, dim: int) -> np.ndarray:
    """Deterministic unit-scale vector for a string key, independent of any rng."""
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    seed = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(seed).standard_normal(dim)


def region_feature(category: str, attribute: str, dim: int) -> np.ndarray:
    # compositional: category and attribute each contribute a fixed direction,
    # so either label stays linearly recoverable across unseen combinations
    return hash_vector(f"category:{category}", dim) + hash_vector(f"attribute:{attribute}", dim)


def cell_feature(row: int, col: int, occupants: list[tuple[str, list[str]]],
                 dim: int) -> np.ndarray:
    """Grid cell vector: a cell-identity direction plus, per occupant, a
    category direction, one direction per attribute, and a category-column
    conjunction direction (the relations are column order, so that makes
    relative position linearly recoverable)."""
    vec = hash_vector(f"cell:{row}:{col}", dim)
    for cat, attrs in occupants:
        vec = vec + hash_vector(f"occupant:{cat}", dim)
        vec = vec + hash_vector(f"at:{cat}:{col}", dim)
        for attr in attrs:
            vec = vec + hash_vector(f"occupant_attr:{attr}", dim)
    return vec


# ---------------------------------------------------------------------------
# scene and question generation
# ---------------------------------------------------------------------------


def _gen_scene(spec: ToyWorldSpec, rng: np.random.Generator) -> SceneGraph:
    n = int(rng.integers(spec.objects_min, spec.objects_max + 1))
    cats = [spec.categories[i] for i in rng.choice(len(spec.categories), n, replace=False)]
    attrs = [spec.attributes[int(i)] for i in rng.integers(0, len(spec.attributes), n)]
    g = spec.grid_size
    cells = [int(c) for c in rng.choice(g * g, n, replace=False)]
    positions = [divmod(c, g) for c in cells]  # (row, col)

    objects = []
    for i in range(n):
        feat = region_feature(cats[i], attrs[i], spec.d_region)
        feat = feat + spec.feature_noise * rng.standard_normal(spec.d_region)
        objects.append(SceneObject(obj_id=f"o{i}", category=cats[i],
                                   attributes=[attrs[i]],
                                   region_feature=spec.feature_scale * feat))

    rel_left, rel_right = spec.relations
    relations = []
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            if positions[i][1] < positions[j][1]:
                relations.append(SceneRelation(f"o{i}", rel_left, f"o{j}"))
            elif positions[i][1] > positions[j][1]:
                relations.append(SceneRelation(f"o{i}", rel_right, f"o{j}"))

    occupants_by_cell: dict[tuple[int, int], list[tuple[str, list[str]]]] = {}
    for i, pos in enumerate(positions):
        occupants_by_cell.setdefault(pos, []).append((cats[i], [attrs[i]]))
    feats = np.zeros((g * g, spec.d_spatial))
    for cell in range(g * g):
        row, col = divmod(cell, g)
        base = cell_feature(row, col, occupants_by_cell.get((row, col), []), spec.d_spatial)
        noisy = base + spec.feature_noise * rng.standard_normal(spec.d_spatial)
        feats[cell] = spec.feature_scale * noisy

    return SceneGraph(objects=objects, relations=relations, grid_size=g,
                      spatial_features=feats)


def _question_candidates(spec: ToyWorldSpec, scene: SceneGraph) -> dict[str, list]:
    """Per template, the instantiations whose answer is unique and derivable."""
    cats_present = [o.category for o in scene.objects]
    out: dict[str, list] = {}
    if "attribute" in spec.templates:
        out["attribute"] = list(cats_present)
    if "relation" in spec.templates:
        items = []
        for rel in spec.relations:
            for target in cats_present:
                subjects = _relation_subjects(scene, rel, target)
                if len(subjects) == 1:
                    items.append((rel, target))
        if items:
            out["relation"] = items
    if "exist" in spec.templates:
        absent = [c for c in spec.categories if c not in cats_present]
        items = [("yes", c) for c in cats_present] + [("no", c) for c in absent]
        out["exist"] = items
    return out


def _make_question(template: str, choice) -> QuestionParse:
    if template == "attribute":
        cat = choice
        tokens = ["what", "color", "is", "the", cat]
        # "color" is itself a noun entity and "what color" a noun phrase
        entities = ["color", cat]
        phrases = [["what", "color"], ["the", cat]]
    elif template == "relation":
        rel, cat = choice
        tokens = ["what", "is", rel, "the", cat]
        entities = [cat]
        phrases = [["the", cat]]
    else:
        _, cat = choice
        tokens = ["is", "there", "a", cat]
        entities = [cat]
        phrases = [["a", cat]]
    return QuestionParse(tokens=tokens, entities=entities, noun_phrases=phrases,
                         dependency_edges=list(_DEP_EDGES[template]))


def gen_samples(spec: ToyWorldSpec, n: int, seed_seq: np.random.SeedSequence,
                prefix: str) -> list[Sample]:
    """Generate n solvable samples; scenes with no valid question are redrawn."""
    if n < 1:
        raise ValueError("sample count must be >= 1")
    rng = np.random.default_rng(seed_seq)
    samples = []
    for i in range(n):
        for _ in range(1000):
            scene = _gen_scene(spec, rng)
            candidates = _question_candidates(spec, scene)
            if candidates:
                break
        else:
            raise RuntimeError("could not generate a solvable scene; check the world spec")
        template = sorted(candidates)[int(rng.integers(len(candidates)))]
        items = candidates[template]
        choice = items[int(rng.integers(len(items)))]
        question = _make_question(template, choice)
        answer = solve(scene, question.tokens)
        samples.append(Sample(sample_id=f"{prefix}_{i:04d}", template=template,
                              scene=scene, question=question, answer=answer))
    return samples


# ---------------------------------------------------------------------------
# symbolic solver (ground-truth oracle)
# ---------------------------------------------------------------------------


def _relation_subjects(scene: SceneGraph, rel: str, target_category: str) -> list[str]:
    targets = {o.obj_id for o in scene.objects if o.category == target_category}
    by_id = {o.obj_id: o for o in scene.objects}
    return [by_id[r.subject].category for r in scene.relations
            if r.predicate == rel and r.object in targets]


def solve(scene: SceneGraph, tokens: list[str]) -> str:
    """Answer a templated question from the scene graph alone."""
    if tokens[:2] == ["what", "color"]:
        cat = tokens[-1]
        matches = [o for o in scene.objects if o.category == cat]
        if len(matches) != 1 or not matches[0].attributes:
            raise ValueError(f"attribute question is not uniquely answerable for {cat!r}")
        return matches[0].attributes[0]
    if tokens[:2] == ["what", "is"]:
        rel, cat = tokens[2], tokens[-1]
        subjects = _relation_subjects(scene, rel, cat)
        if len(subjects) != 1:
            raise ValueError(f"relation question has {len(subjects)} candidates")
        return subjects[0]
    if tokens[:2] == ["is", "there"]:
        cat = tokens[-1]
        return "yes" if any(o.category == cat for o in scene.objects) else "no"
    raise ValueError(f"unrecognized question shape: {tokens!r}")


# ---------------------------------------------------------------------------
# on-disk corpus
# ---------------------------------------------------------------------------


def _dump_json(path: str, obj: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write("\n")


def sample_to_dict(s: Sample) -> dict:
    return {
        "id": s.sample_id,
        "template": s.template,
        "scene": scene_to_dict(s.scene),
        "question": question_to_dict(s.question),
        "answer": s.answer,
    }


def gen_data(spec: ToyWorldSpec, n: int, seed: int, out_dir: str,
             split: str = "train") -> str:
    """Write one split (manifest + per-sample files); returns the manifest path.

    The vocabularies derive from the world spec, not the drawn samples, so
    splits generated from the same spec share stable indices.
    """
    samples = gen_samples(spec, n, np.random.SeedSequence([seed]), split)
    sample_dir = os.path.join(out_dir, "samples")
    os.makedirs(sample_dir, exist_ok=True)
    rel_paths = []
    for s in samples:
        rel = os.path.join("samples", f"{s.sample_id}.json")
        _dump_json(os.path.join(out_dir, rel), sample_to_dict(s))
        rel_paths.append(rel)
    manifest = {
        "version": MANIFEST_VERSION,
        "split": split,
        "world": spec.to_dict(),
        "word_vocab": spec.word_vocab(),
        "answer_vocab": spec.answer_vocab(),
        "d_region": spec.d_region,
        "d_spatial": spec.d_spatial,
        "grid_size": spec.grid_size,
        "samples": rel_paths,
    }
    path = os.path.join(out_dir, f"{split}.json")
    _dump_json(path, manifest)
    return path


def gen_corpus(spec: ToyWorldSpec, n_train: int, n_eval: int, seed: int,
               out_dir: str) -> tuple[str, str]:
    """Train and eval splits with disjoint sample streams from one seed."""
    train = gen_data(spec, n_train, seed, out_dir, split="train")
    ev = gen_data(spec, n_eval, seed + 1, out_dir, split="eval")
    return train, ev


def load_manifest(path: str) -> Dataset:
    """Read and fully validate a manifest and every sample file it lists."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: invalid JSON: {e}") from None

    def need(key):
        if key not in doc:
            raise SchemaError(f"{path}: missing field {key!r}")
        return doc[key]

    if need("version") != MANIFEST_VERSION:
        raise SchemaError(f"{path}: unsupported manifest version {doc['version']!r}")
    answer_vocab = [str(a) for a in need("answer_vocab")]
    word_vocab = [str(w) for w in need("word_vocab")]
    base = os.path.dirname(os.path.abspath(path))
    samples = []
    for rel in need("samples"):
        spath = os.path.join(base, rel)
        try:
            with open(spath, "r", encoding="utf-8") as f:
                sdoc = json.load(f)
        except FileNotFoundError:
            raise SchemaError(f"{path}: sample file {rel!r} does not exist") from None
        except json.JSONDecodeError as e:
            raise SchemaError(f"{spath}: invalid JSON: {e}") from None
        for key in ("id", "scene", "question", "answer"):
            if key not in sdoc:
                raise SchemaError(f"{spath}: missing field {key!r}")
        answer = str(sdoc["answer"])
        if answer not in answer_vocab:
            raise SchemaError(f"{spath}: answer {answer!r} not in the answer vocabulary")
        samples.append(Sample(
            sample_id=str(sdoc["id"]),
            template=str(sdoc.get("template", "")),
            scene=scene_from_dict(sdoc["scene"], source=spath),
            question=question_from_dict(sdoc["question"], source=spath),
            answer=answer,
        ))
    ds = Dataset(samples=samples, word_vocab=word_vocab, answer_vocab=answer_vocab,
                 d_region=int(need("d_region")), d_spatial=int(need("d_spatial")),
                 grid_size=int(need("grid_size")))
    for s in ds.samples:
        if s.scene.objects and s.scene.objects[0].region_feature.shape[0] != ds.d_region:
            raise SchemaError(f"{path}: sample {s.sample_id}: region feature dim "
                              f"{s.scene.objects[0].region_feature.shape[0]} != {ds.d_region}")
    return ds
