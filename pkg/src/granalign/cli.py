"""Command-line entry points: gen-data, train, eval, gradcheck, dump-leadgraph, ablate.

The train/gradcheck/ablate commands read an optional flat key=value config
file whose keys mirror the model and training dataclasses; see
``parse_config_file`` for the accepted keys. All commands exit 0 on
success and nonzero with a message on error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import data as toydata
from . import ingest, training
from .data import DEFAULT_WORLD, ToyWorldSpec, load_manifest
from .ingest import SchemaError
from .leadgraph import append_sep_mask, format_grid, layer_masks, pairs_to_matrix
from .model import Model, ModelConfig
from .training import Trainer, TrainConfig, evaluate, gradcheck, load_checkpoint

# ---------------------------------------------------------------------------
# config file
# ---------------------------------------------------------------------------


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _streams(s: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in s.split(",") if part.strip())


def _opt_float(s: str):
    return None if s.lower() == "none" else float(s)


MODEL_KEYS = {
    "d_model": int, "d_emb": int, "num_heads": int, "num_layers": int,
    "d_ff": int, "max_len": int, "pooling": str, "use_lead_graphs": _bool,
    "node_reduction": _bool, "streams": _streams, "sep_connect_all": _bool,
}
TRAIN_KEYS = {
    "batch_size": int, "epochs": int, "seed": int, "lr": float,
    "grad_clip": _opt_float, "checkpoint_interval": int,
}
EXTRA_KEYS = {"word_vectors": str}


def parse_config_file(path: str | None) -> tuple[dict, dict, dict]:
    """Flat ``key = value`` lines; '#' starts a comment. Unknown keys error."""
    model_kw: dict = {}
    train_kw: dict = {}
    extra: dict = {}
    if path is None:
        return model_kw, train_kw, extra
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}: line {lineno}: expected key = value")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            try:
                if key in MODEL_KEYS:
                    model_kw[key] = MODEL_KEYS[key](value)
                elif key in TRAIN_KEYS:
                    train_kw[key] = TRAIN_KEYS[key](value)
                elif key in EXTRA_KEYS:
                    extra[key] = EXTRA_KEYS[key](value)
                else:
                    raise ValueError(f"unknown config key {key!r}")
            except ValueError as e:
                raise ValueError(f"{path}: line {lineno}: {e}") from None
    return model_kw, train_kw, extra


def _build_model(dataset, model_kw: dict, extra: dict, seed: int) -> Model:
    config = ModelConfig(**model_kw)
    return Model(config, dataset.word_vocab, dataset.answer_vocab,
                 dataset.d_region, dataset.d_spatial, seed=seed,
                 word_vector_file=extra.get("word_vectors"))


def _manifest_path(data_dir: str, split: str) -> str:
    return os.path.join(data_dir, f"{split}.json")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.spec:
        with open(args.spec, "r", encoding="utf-8") as f:
            spec = ToyWorldSpec.from_dict(json.load(f))
    else:
        spec = DEFAULT_WORLD
    n_eval = args.eval_n if args.eval_n is not None else max(1, args.n // 5)
    train_path, eval_path = toydata.gen_corpus(spec, args.n, n_eval, args.seed, args.out)
    print(train_path)
    print(eval_path)
    return 0


def cmd_train(args) -> int:
    model_kw, train_kw, extra = parse_config_file(args.config)
    dataset = load_manifest(_manifest_path(args.data, "train"))
    cfg = TrainConfig(**train_kw)
    model = _build_model(dataset, model_kw, extra, seed=cfg.seed)
    trainer = Trainer(model, dataset, cfg)
    out = open(args.log, "w", encoding="utf-8") if args.log else sys.stdout
    try:
        trainer.fit(metrics_out=out, checkpoint_path=args.out)
    finally:
        if out is not sys.stdout:
            out.close()
    if args.out and cfg.epochs == 0:
        training.save_checkpoint(args.out, model, trainer.optimizer)
    return 0


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    dataset = load_manifest(_manifest_path(args.data, args.split))
    report = evaluate(model, dataset)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    model_kw, train_kw, extra = parse_config_file(args.config)
    dataset = load_manifest(_manifest_path(args.data, "train"))
    seed = train_kw.get("seed", 0)
    model = _build_model(dataset, model_kw, extra, seed=seed)
    if not 0 <= args.sample < len(dataset.samples):
        raise ValueError(f"sample index {args.sample} out of range")
    s = dataset.samples[args.sample]
    prep = model.prepare(s.scene, s.question, dataset.answer_index(s.answer))
    if not args.at_init:
        training.generic_parameter_point(model, seed=seed + 123)
    reports = gradcheck(model, prep, step=args.step, tol=args.tol)
    failed = 0
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name} max_rel_err={r.max_rel_err:.3e} coords={r.checked}")
        failed += not r.passed
    print(f"{len(reports) - failed}/{len(reports)} parameter blocks passed")
    return 1 if failed else 0


_STREAM_LEVELS = {"ce": "concept", "rn": "region", "ss": "spatial"}


def cmd_dump_leadgraph(args) -> int:
    with open(args.sample, "r", encoding="utf-8") as f:
        doc = json.load(f)
    for key in ("scene", "question"):
        if key not in doc:
            raise SchemaError(f"{args.sample}: missing field {key!r}")
    scene = ingest.scene_from_dict(doc["scene"], source=args.sample)
    question = ingest.question_from_dict(doc["question"], source=args.sample)
    if args.stream == "ce":
        img = ingest.merge_duplicate_concept_tokens(ingest.build_concept_level(scene))
        q = ingest.build_entity_level(question)
    elif args.stream == "rn":
        img = ingest.build_region_level(scene)
        q = ingest.build_noun_phrase_level(question)
    else:
        img = ingest.build_spatial_level(scene)
        q = ingest.build_sentence_level(question)
    g_img = append_sep_mask(pairs_to_matrix(img.pairs, img.n_tokens))
    g_q = pairs_to_matrix(q.pairs, q.n_tokens)
    mask = layer_masks(g_img, g_q)[args.layer - 1]
    print(f"# stream {args.stream} layer {args.layer}")
    print(f"# image_tokens {img.n_tokens} sep 1 question_tokens {q.n_tokens}")
    print(format_grid(mask))
    return 0


def cmd_ablate(args) -> int:
    model_kw, train_kw, extra = parse_config_file(args.config)
    train_kw["epochs"] = args.epochs
    rows = training.ablation_table(args.data, model_kw, train_kw, extra,
                                   relation_data=args.relation_data)
    print(training.format_ablation_table(rows))
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="granalign",
        description="Granularity-aligned VQA model: data, training, inspection.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--spec", help="world spec JSON file (default: built-in world)")
    p.add_argument("--n", type=int, required=True, help="train sample count")
    p.add_argument("--eval-n", type=int, help="eval sample count (default n/5)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a generated corpus")
    p.add_argument("--data", required=True, help="corpus directory (train.json inside)")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--out", help="checkpoint output path")
    p.add_argument("--log", help="metrics log path (default: stdout)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="eval", help="manifest name inside --data")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--data", required=True)
    p.add_argument("--sample", type=int, default=0, help="sample index")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--at-init", action="store_true",
                   help="check at the training init instead of the rescaled "
                        "generic point (tiny early-layer gradients may sit "
                        "below finite-difference noise there)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-leadgraph", help="print a combined per-layer mask")
    p.add_argument("--sample", required=True, help="sample JSON file")
    p.add_argument("--stream", required=True, choices=("ce", "rn", "ss"))
    p.add_argument("--layer", required=True, type=int, choices=(1, 2, 3))
    p.set_defaults(func=cmd_dump_leadgraph)

    p = sub.add_parser("ablate", help="train ablation variants and print a table")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--relation-data",
                   help="relation-template-only corpus directory for the extra row")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, SchemaError, FloatingPointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
