"""Three-stream alignment model: stream assembly, decision fusion, loss, prediction.

Each stream pairs one image level with one question level (concept-entity,
region-noun phrase, spatial-sentence) and runs a separately parameterized
masked encoder over the concatenated tokens. The fusion head pools every
stream, projects and concatenates the pooled vectors into fused logits,
and the loss is the unweighted sum of the per-stream and fused
cross-entropies.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import ingest
from .encoder import EncoderConfig, EncoderStack, encode_stream, sentence_pretransform
from .ingest import LevelData, QuestionParse, SceneGraph, Vocab
from .leadgraph import LeadGraph, full_graph, pairs_to_matrix

STREAM_TAGS = ("ce", "rn", "ss")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    d_emb: int = 32
    num_heads: int = 8
    num_layers: int = 3
    d_ff: int = 128
    max_len: int = 64
    eps_norm: float = 1e-5
    eps_row: float = 1e-12
    pooling: str = "mean"  # "mean" or "sep"
    use_lead_graphs: bool = True
    node_reduction: bool = False
    streams: tuple[str, ...] = STREAM_TAGS
    sep_connect_all: bool = True

    def __post_init__(self):
        if self.pooling not in ("mean", "sep"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if not self.streams or any(s not in STREAM_TAGS for s in self.streams):
            raise ValueError(f"streams must be a nonempty subset of {STREAM_TAGS}")
        object.__setattr__(self, "streams", tuple(self.streams))

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            num_layers=self.num_layers, num_heads=self.num_heads,
            d_model=self.d_model, d_ff=self.d_ff,
            eps_norm=self.eps_norm, eps_row=self.eps_row, max_len=self.max_len,
        )


@dataclass
class StreamOutput:
    tag: str
    hidden: ad.Tensor  # [n_stream, d_model]
    sep_index: int


@dataclass
class LogitsBundle:
    """Per-stream and fused answer logits, each a 1-D tensor of class scores."""

    f_ce: ad.Tensor | None
    f_rn: ad.Tensor | None
    f_ss: ad.Tensor | None
    f_ga: ad.Tensor

    def stream_logits(self) -> dict[str, ad.Tensor]:
        present = {"ce": self.f_ce, "rn": self.f_rn, "ss": self.f_ss}
        return {tag: t for tag, t in present.items() if t is not None}

    def all_logits(self) -> dict[str, ad.Tensor]:
        out = self.stream_logits()
        out["ga"] = self.f_ga
        return out


@dataclass
class PreparedSample:
    """Ingested levels plus the per-stream lead graphs, cached per sample."""

    answer_index: int
    concept: LevelData
    region: LevelData
    spatial: LevelData
    entity: LevelData
    noun_phrase: LevelData
    sentence: LevelData
    graphs: dict[str, tuple[LeadGraph, LeadGraph]] = field(default_factory=dict)


class Model:
    """The full model: parameters plus the forward/fuse/loss/predict pipeline."""

    def __init__(self, config: ModelConfig, word_vocab: Sequence[str],
                 answer_vocab: Sequence[str], d_region: int, d_spatial: int,
                 seed: int = 0, word_vector_file=None):
        self.config = config
        self.vocab = Vocab(word_vocab)
        self.answer_vocab = list(answer_vocab)
        if not self.answer_vocab:
            raise ValueError("answer vocabulary is empty")
        self.d_region = int(d_region)
        self.d_spatial = int(d_spatial)
        self.params = ad.Parameters()
        self._build_params(np.random.default_rng(seed), word_vector_file)

    @property
    def n_answers(self) -> int:
        return len(self.answer_vocab)

    # -- parameter construction -------------------------------------------

    def _build_params(self, rng: np.random.Generator, word_vector_file) -> None:
        cfg = self.config
        p = self.params
        d, c = cfg.d_model, self.n_answers

        if word_vector_file is not None:
            words, vectors = ingest.load_word_vectors(word_vector_file)
            d_emb = vectors.shape[1]
            table = rng.normal(0.0, 0.02, size=(self.vocab.size, d_emb))
            by_word = {w: i for i, w in enumerate(words)}
            for i, w in enumerate(self.vocab.words):
                if w in by_word:
                    table[i + 1] = vectors[by_word[w]]
            self.d_emb = d_emb
            t = p.new("embed.table", (self.vocab.size, d_emb), "zeros", rng)
            t.data[:] = table
        else:
            self.d_emb = cfg.d_emb
            p.new("embed.table", (self.vocab.size, cfg.d_emb), "embed", rng)

        def mlp(prefix):
            p.new(f"{prefix}.w1", (self.d_emb, d), "linear", rng)
            p.new(f"{prefix}.b1", (d,), "zeros", rng)
            p.new(f"{prefix}.w2", (d, d), "linear", rng)
            p.new(f"{prefix}.b2", (d,), "zeros", rng)

        enc_cfg = cfg.encoder_config()
        self.stacks: dict[str, EncoderStack] = {}
        for tag in cfg.streams:
            if tag == "ce":
                mlp("ce.concept_mlp")
                mlp("ce.entity_mlp")
            elif tag == "rn":
                p.new("rn.region_proj.w", (self.d_region, d), "linear", rng)
                p.new("rn.region_proj.b", (d,), "zeros", rng)
                mlp("rn.np_mlp")
            else:
                p.new("ss.spatial_proj.w", (self.d_spatial, d), "linear", rng)
                p.new("ss.spatial_proj.b", (d,), "zeros", rng)
                mlp("ss.sent_mlp")
                self.stacks["sent"] = EncoderStack.build(p, "sent.enc", enc_cfg, rng)
            p.new(f"{tag}.sep", (d,), "embed", rng)
            self.stacks[tag] = EncoderStack.build(p, f"{tag}.enc", enc_cfg, rng)

        for tag in cfg.streams:
            p.new(f"fuse.{tag}.ln_gain", (d,), "ones", rng)
            p.new(f"fuse.{tag}.ln_bias", (d,), "zeros", rng)
            p.new(f"fuse.{tag}.w", (d, d), "linear", rng)
            p.new(f"fuse.{tag}.head_w", (d, c), "linear", rng)
            p.new(f"fuse.{tag}.head_b", (c,), "zeros", rng)
        p.new("fuse.ga.w", (len(cfg.streams) * d, d), "linear", rng)
        p.new("fuse.ga.head_w", (d, c), "linear", rng)
        p.new("fuse.ga.head_b", (c,), "zeros", rng)

    # -- sample preparation -----------------------------------------------

    def prepare(self, scene: SceneGraph, question: QuestionParse,
                answer_index: int) -> PreparedSample:
        """Ingest one sample into levels and cacheable lead graphs."""
        cfg = self.config
        concept = ingest.merge_duplicate_concept_tokens(ingest.build_concept_level(scene))
        entity = ingest.build_entity_level(question)
        if cfg.node_reduction:
            concept = ingest.node_reduction(concept, entity)
            entity = LevelData(level="entity", labels=[], pairs=[])
        prep = PreparedSample(
            answer_index=int(answer_index),
            concept=concept,
            region=ingest.build_region_level(scene),
            spatial=ingest.build_spatial_level(scene),
            entity=entity,
            noun_phrase=ingest.build_noun_phrase_level(question),
            sentence=ingest.build_sentence_level(question),
        )
        pair_levels = {"ce": (prep.concept, prep.entity),
                       "rn": (prep.region, prep.noun_phrase),
                       "ss": (prep.spatial, prep.sentence)}
        for tag in cfg.streams:
            img, q = pair_levels[tag]
            if cfg.use_lead_graphs:
                prep.graphs[tag] = (pairs_to_matrix(img.pairs, img.n_tokens),
                                    pairs_to_matrix(q.pairs, q.n_tokens))
            else:
                prep.graphs[tag] = (full_graph(img.n_tokens), full_graph(q.n_tokens))
        return prep

    # -- forward ------------------------------------------------------------

    def _mlp_apply(self, labels, prefix) -> ad.Tensor:
        p = self.params
        return ingest.embed_tokens(labels, self.vocab, p["embed.table"],
                                   p[f"{prefix}.w1"], p[f"{prefix}.b1"],
                                   p[f"{prefix}.w2"], p[f"{prefix}.b2"])

    def _stream_inputs(self, tag: str, prep: PreparedSample) -> tuple[ad.Tensor, ad.Tensor]:
        p = self.params
        if tag == "ce":
            return (self._mlp_apply(prep.concept.labels, "ce.concept_mlp"),
                    self._mlp_apply(prep.entity.labels, "ce.entity_mlp"))
        if tag == "rn":
            return (ingest.project_features(prep.region.features,
                                            p["rn.region_proj.w"], p["rn.region_proj.b"]),
                    self._mlp_apply(prep.noun_phrase.labels, "rn.np_mlp"))
        t_img = ingest.project_features(prep.spatial.features,
                                        p["ss.spatial_proj.w"], p["ss.spatial_proj.b"])
        words = self._mlp_apply(prep.sentence.labels, "ss.sent_mlp")
        t_q = sentence_pretransform(words, prep.sentence.dep_adjacency, self.stacks["sent"])
        return t_img, t_q

    def run_stream(self, tag: str, prep: PreparedSample) -> StreamOutput:
        t_img, t_q = self._stream_inputs(tag, prep)
        g_img, g_q = prep.graphs[tag]
        if not self.config.use_lead_graphs:
            # all-ones ablation: neutralize the per-layer masks entirely
            n = t_img.data.shape[0] + 1 + t_q.data.shape[0]
            hidden, sep_index = self._encode_all_ones(tag, t_img, t_q, n)
            return StreamOutput(tag, hidden, sep_index)
        hidden, sep_index = encode_stream(t_img, t_q, g_img, g_q, self.stacks[tag],
                                          self.params[f"{tag}.sep"],
                                          sep_connect_all=self.config.sep_connect_all)
        return StreamOutput(tag, hidden, sep_index)

    def _encode_all_ones(self, tag, t_img, t_q, n):
        from .encoder import encoder_layer
        from .leadgraph import append_sep

        stack = self.stacks[tag]
        t_img2, _ = append_sep(t_img, full_graph(t_img.data.shape[0]),
                               self.params[f"{tag}.sep"])
        sep_index = t_img.data.shape[0]
        x = ad.concat_rows([t_img2, t_q]) if t_q.data.shape[0] else t_img2
        x = stack.add_positions(x)
        ones = full_graph(n)
        for layer in stack.layers:
            x = encoder_layer(x, ones, layer, stack.cfg)
        return x, sep_index

    def forward(self, prep: PreparedSample) -> LogitsBundle:
        outputs = [self.run_stream(tag, prep) for tag in self.config.streams]
        return self.fuse(outputs)

    # -- decision fusion ----------------------------------------------------

    def _pool(self, out: StreamOutput) -> ad.Tensor:
        if self.config.pooling == "sep":
            row = ad.slice_rows(out.hidden, out.sep_index, out.sep_index + 1)
            return ad.reshape(row, (self.config.d_model,))
        return ad.mean_rows(out.hidden)

    def fuse(self, outputs: Sequence[StreamOutput]) -> LogitsBundle:
        """Pool, normalize, project, and concatenate the stream outputs."""
        p = self.params
        cfg = self.config
        projected: dict[str, ad.Tensor] = {}
        logits: dict[str, ad.Tensor] = {}
        for out in outputs:
            tag = out.tag
            pooled = self._pool(out)
            normed = ad.layer_norm_rows(pooled, p[f"fuse.{tag}.ln_gain"],
                                        p[f"fuse.{tag}.ln_bias"], cfg.eps_norm)
            h = ad.matmul(normed, p[f"fuse.{tag}.w"])
            projected[tag] = h
            logits[tag] = ad.add(ad.matmul(h, p[f"fuse.{tag}.head_w"]),
                                 p[f"fuse.{tag}.head_b"])
        cat = ad.concat_rows([projected[tag] for tag in cfg.streams])
        h_ga = ad.matmul(cat, p["fuse.ga.w"])
        f_ga = ad.add(ad.matmul(h_ga, p["fuse.ga.head_w"]), p["fuse.ga.head_b"])
        return LogitsBundle(f_ce=logits.get("ce"), f_rn=logits.get("rn"),
                            f_ss=logits.get("ss"), f_ga=f_ga)

    # -- loss and prediction -----------------------------------------------

    def loss(self, bundle: LogitsBundle, answer_index: int) -> ad.Tensor:
        """Unweighted sum of the per-stream and fused cross-entropies."""
        if not 0 <= answer_index < self.n_answers:
            raise ValueError(f"answer index {answer_index} out of range")
        terms = [ad.cross_entropy_logits(t, answer_index)
                 for t in bundle.all_logits().values()]
        total = terms[0]
        for t in terms[1:]:
            total = ad.add(total, t)
        return total

    def predict(self, bundle: LogitsBundle) -> int:
        """Argmax of the averaged logits; ties resolve to the lowest class."""
        arrays = [t.data for t in bundle.all_logits().values()]
        return int(np.argmax(np.mean(arrays, axis=0)))

    def stream_predictions(self, bundle: LogitsBundle) -> dict[str, int]:
        return {tag: int(np.argmax(t.data)) for tag, t in bundle.all_logits().items()}
