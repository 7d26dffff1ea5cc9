"""Adam optimizer, training loop, evaluation, gradient check, checkpoints.

All arithmetic is 64-bit and deterministic given (seed, config, data):
shuffling uses a dedicated generator, batch gradients accumulate in
parameter-registration order, and the metric log is one sorted-key JSON
object per epoch.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .model import Model, ModelConfig, PreparedSample


@dataclass
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    """Standard Adam with bias correction over named parameter blocks."""

    def __init__(self, params: ad.Parameters, cfg: AdamConfig | None = None):
        self.params = params
        self.cfg = cfg or AdamConfig()
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        """One update from a name-keyed gradient map; raises on non-finite grads."""
        for name in grads:
            if not np.all(np.isfinite(grads[name])):
                raise FloatingPointError(
                    f"non-finite gradient in parameter block {name!r}; training halted")
        c = self.cfg
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - c.beta1 ** t
        bc2 = 1.0 - c.beta2 ** t
        for name, tensor in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            tensor.data -= c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


@dataclass
class TrainConfig:
    batch_size: int = 256
    epochs: int = 10
    seed: int = 0
    lr: float = 1e-4
    grad_clip: float | None = None
    checkpoint_interval: int = 0  # epochs between checkpoint writes; 0 disables

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


def loss_value(model: Model, prep: PreparedSample) -> float:
    """Forward pass outside any tape; used by evaluation and finite differences."""
    bundle = model.forward(prep)
    return float(model.loss(bundle, prep.answer_index).data)


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        factor = max_norm / total
        for g in grads.values():
            g *= factor


def _accuracy_update(counts: dict[str, int], model: Model, bundle, answer: int) -> None:
    for tag, pred in model.stream_predictions(bundle).items():
        counts[tag] = counts.get(tag, 0) + (pred == answer)
    counts["avg"] = counts.get("avg", 0) + (model.predict(bundle) == answer)


def _counts_to_metrics(counts: dict[str, int], n: int) -> dict[str, float]:
    order = ["ce", "rn", "ss", "ga", "avg"]
    return {f"acc_{k}": counts[k] / n for k in order if k in counts}


class Trainer:
    """Minibatch training with per-sample gradient accumulation."""

    def __init__(self, model: Model, dataset: Dataset, cfg: TrainConfig):
        if not dataset.samples:
            raise ValueError("training dataset is empty")
        if dataset.answer_vocab != model.answer_vocab:
            raise ValueError("dataset answer vocabulary does not match the model")
        self.model = model
        self.cfg = cfg
        self.optimizer = Adam(model.params, AdamConfig(lr=cfg.lr))
        self.prepared = [model.prepare(s.scene, s.question, dataset.answer_index(s.answer))
                         for s in dataset.samples]
        self.shuffle_rng = np.random.default_rng(cfg.seed)
        self.epoch = 0

    def run_epoch(self) -> dict[str, float]:
        """One pass over the data; returns the epoch's metric record."""
        model, cfg = self.model, self.cfg
        order = self.shuffle_rng.permutation(len(self.prepared))
        loss_sum = 0.0
        counts: dict[str, int] = {}
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            accum = {name: np.zeros_like(t.data) for name, t in model.params.items()}
            inv = 1.0 / len(batch)
            for idx in batch:
                prep = self.prepared[idx]
                with ad.Tape() as tape:
                    bundle = model.forward(prep)
                    loss = model.loss(bundle, prep.answer_index)
                grads = tape.gradients(loss, model.params.tensors())
                for name, g in zip(model.params.names(), grads):
                    accum[name] += inv * g
                loss_sum += float(loss.data)
                _accuracy_update(counts, model, bundle, prep.answer_index)
            if cfg.grad_clip is not None:
                _clip(accum, cfg.grad_clip)
            self.optimizer.step(accum)
        self.epoch += 1
        n = len(self.prepared)
        record = {"epoch": self.epoch, "loss": loss_sum / n}
        record.update(_counts_to_metrics(counts, n))
        return record

    def fit(self, metrics_out=None, checkpoint_path: str | None = None) -> list[dict]:
        """cfg.epochs passes; logs one JSON object per epoch, checkpoints on schedule."""
        history = []
        for _ in range(self.cfg.epochs):
            record = self.run_epoch()
            history.append(record)
            if metrics_out is not None:
                metrics_out.write(json.dumps(record, sort_keys=True) + "\n")
                metrics_out.flush()
            due = (self.cfg.checkpoint_interval
                   and self.epoch % self.cfg.checkpoint_interval == 0)
            if checkpoint_path and (due or self.epoch == self.cfg.epochs):
                save_checkpoint(checkpoint_path, self.model, self.optimizer)
        return history


def evaluate(model: Model, dataset: Dataset,
             prepared: list[PreparedSample] | None = None) -> dict[str, float]:
    """Top-1 accuracy of the averaged prediction and of each logit head."""
    if not dataset.samples:
        raise ValueError("cannot evaluate on an empty dataset")
    if prepared is None:
        prepared = [model.prepare(s.scene, s.question, dataset.answer_index(s.answer))
                    for s in dataset.samples]
    counts: dict[str, int] = {}
    loss_sum = 0.0
    for prep in prepared:
        bundle = model.forward(prep)
        loss_sum += float(model.loss(bundle, prep.answer_index).data)
        _accuracy_update(counts, model, bundle, prep.answer_index)
    n = len(prepared)
    record = {"n": n, "loss": loss_sum / n}
    record.update(_counts_to_metrics(counts, n))
    return record


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------


def generic_parameter_point(model: Model, seed: int = 123) -> None:
    """Redraw all parameters at a larger, well-conditioned scale, in place.

    At the training initialization the embeddings are small and post-norm
    attention starts near uniform, so some early-layer gradient
    coordinates are ~1e-6; a central difference of a ~10-magnitude loss
    then drowns in float64 cancellation at step 1e-5. Verifying gradients
    at a generic point keeps every coordinate's signal well above that
    noise floor without touching the training init.
    """
    rng = np.random.default_rng(seed)
    for name, t in model.params.items():
        if name.endswith("gain"):
            t.data[...] = rng.uniform(0.5, 1.5, t.data.shape)
        elif t.data.ndim >= 2:
            t.data[...] = rng.uniform(-0.3, 0.3, t.data.shape)
        else:
            t.data[...] = rng.uniform(-0.5, 0.5, t.data.shape)


@dataclass
class BlockReport:
    name: str
    checked: int
    max_rel_err: float
    passed: bool


def gradcheck(model: Model, prep: PreparedSample, step: float = 1e-5,
              tol: float = 1e-5, coords_per_block: int = 2) -> list[BlockReport]:
    """Central finite differences vs the tape gradient, per parameter block.

    Every registered block appears in the report exactly once; within a
    block the largest-magnitude gradient coordinates are probed, where the
    central difference carries signal (a coordinate whose gradient sits at
    the difference's cancellation noise floor cannot be checked at any
    tolerance). Relative error uses |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8).
    """
    with ad.Tape() as tape:
        bundle = model.forward(prep)
        loss = model.loss(bundle, prep.answer_index)
    grads = dict(zip(model.params.names(),
                     tape.gradients(loss, model.params.tensors())))
    reports = []
    for name, tensor in model.params.items():
        size = tensor.data.size
        k = min(coords_per_block, size)
        coords = np.argsort(-np.abs(grads[name].reshape(-1)))[:k]
        worst = 0.0
        flat = tensor.data.reshape(-1)
        for c in coords:
            c = int(c)
            saved = flat[c]
            flat[c] = saved + step
            up = loss_value(model, prep)
            flat[c] = saved - step
            down = loss_value(model, prep)
            flat[c] = saved
            g_fd = (up - down) / (2.0 * step)
            g_ad = float(grads[name].reshape(-1)[c])
            rel = abs(g_ad - g_fd) / max(abs(g_ad), abs(g_fd), 1e-8)
            worst = max(worst, rel)
        reports.append(BlockReport(name=name, checked=k, max_rel_err=worst,
                                   passed=worst < tol))
    return reports


# ---------------------------------------------------------------------------
# experiments and the ablation table
# ---------------------------------------------------------------------------


def run_experiment(train_ds: Dataset, eval_ds: Dataset, model_kw: dict,
                   train_kw: dict, word_vector_file=None) -> dict:
    """Train a fresh seeded model and evaluate it; returns both metric records."""
    cfg = TrainConfig(**train_kw)
    model = Model(ModelConfig(**model_kw), train_ds.word_vocab, train_ds.answer_vocab,
                  train_ds.d_region, train_ds.d_spatial, seed=cfg.seed,
                  word_vector_file=word_vector_file)
    trainer = Trainer(model, train_ds, cfg)
    history = trainer.fit()
    return {"train": history[-1], "eval": evaluate(model, eval_ds), "model": model}


ABLATION_VARIANTS = (
    ("full", {}),
    ("no_lead_graph", {"use_lead_graphs": False}),
    ("ce_only", {"streams": ("ce",)}),
    ("rn_only", {"streams": ("rn",)}),
    ("ss_only", {"streams": ("ss",)}),
    ("node_reduction", {"node_reduction": True}),
)


def ablation_table(data_dir: str, model_kw: dict, train_kw: dict, extra: dict,
                   relation_data: str | None = None) -> list[dict]:
    """Train every ablation variant on one corpus and report accuracies.

    ``relation_data`` optionally names a relation-question-only corpus; the
    full and mask-free variants run on it too, as extra rows. Rows report
    numbers, not verdicts: orderings are not asserted anywhere.
    """
    from .data import load_manifest

    def corpus(d):
        return (load_manifest(os.path.join(d, "train.json")),
                load_manifest(os.path.join(d, "eval.json")))

    rows = []

    def add_rows(tag_suffix, train_ds, eval_ds, variants):
        for name, patch in variants:
            res = run_experiment(train_ds, eval_ds, {**model_kw, **patch},
                                 dict(train_kw), extra.get("word_vectors"))
            rows.append({
                "variant": name + tag_suffix,
                "train_acc": res["train"]["acc_avg"],
                "eval_acc": res["eval"]["acc_avg"],
                "eval_loss": res["eval"]["loss"],
            })

    add_rows("", *corpus(data_dir), ABLATION_VARIANTS)
    if relation_data is not None:
        add_rows(" (relation corpus)", *corpus(relation_data),
                 (ABLATION_VARIANTS[0], ABLATION_VARIANTS[1]))
    return rows


def format_ablation_table(rows: list[dict]) -> str:
    header = f"{'variant':<32} {'train_acc':>9} {'eval_acc':>9} {'eval_loss':>9}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r['variant']:<32} {r['train_acc']:>9.3f} "
                     f"{r['eval_acc']:>9.3f} {r['eval_loss']:>9.3f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"GALN"
CKPT_VERSION = 1


def save_checkpoint(path: str, model: Model, optimizer: Adam | None = None) -> None:
    """Binary container: magic, version, JSON header, raw little-endian blocks.

    Blocks follow header order: each parameter's float64 bytes, then, if
    optimizer state is present, its first- and second-moment blocks in the
    same order.
    """
    names = model.params.names()
    header = {
        "model_config": {**model.config.__dict__, "streams": list(model.config.streams)},
        "word_vocab": list(model.vocab.words),
        "answer_vocab": list(model.answer_vocab),
        "d_region": model.d_region,
        "d_spatial": model.d_spatial,
        "d_emb": model.d_emb,
        "blocks": [{"name": n, "shape": list(model.params[n].data.shape)} for n in names],
        "optimizer": None,
    }
    if optimizer is not None:
        c = optimizer.cfg
        header["optimizer"] = {"step": optimizer.step_count, "lr": c.lr,
                               "beta1": c.beta1, "beta2": c.beta2, "eps": c.eps}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(model.params[n].data, dtype="<f8").tobytes())
        if optimizer is not None:
            for state in (optimizer.m, optimizer.v):
                for n in names:
                    f.write(np.ascontiguousarray(state[n], dtype="<f8").tobytes())


def load_checkpoint(path: str) -> tuple[Model, Adam | None]:
    with open(path, "rb") as f:
        if f.read(4) != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        cfg_dict = dict(header["model_config"])
        cfg_dict["streams"] = tuple(cfg_dict["streams"])
        # embedding width can come from a word-vector file at train time
        cfg_dict["d_emb"] = int(header["d_emb"])
        config = ModelConfig(**cfg_dict)
        model = Model(config, header["word_vocab"], header["answer_vocab"],
                      header["d_region"], header["d_spatial"], seed=0)
        names = model.params.names()
        expect = [b["name"] for b in header["blocks"]]
        if names != expect:
            raise ValueError(f"{path}: parameter blocks do not match this build")

        def read_block(shape):
            shape = tuple(shape)
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(f.read(count * 8), dtype="<f8").reshape(shape)
            return np.ascontiguousarray(arr)

        for b in header["blocks"]:
            model.params[b["name"]].data[...] = read_block(b["shape"])
        optimizer = None
        if header["optimizer"] is not None:
            o = header["optimizer"]
            optimizer = Adam(model.params, AdamConfig(lr=o["lr"], beta1=o["beta1"],
                                                      beta2=o["beta2"], eps=o["eps"]))
            optimizer.step_count = int(o["step"])
            for state in (optimizer.m, optimizer.v):
                for b in header["blocks"]:
                    state[b["name"]][...] = read_block(b["shape"])
    return model, optimizer
