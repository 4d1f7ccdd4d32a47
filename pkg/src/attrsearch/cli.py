"""Command-line entry points: gen-data, train, index, query, eval, ablate,
explain, serve.

A JSON config file supplies training defaults; flags given explicitly on
the command line win over the config file.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import synthgen
from .engine import (
    eval_table_csv,
    eval_table_json,
    evaluate,
    index_gallery,
    load_index,
    query,
    save_index,
)
from .localization import export_aam
from .model import checkpoint_tag, load_model
from .trainer import (
    TrainConfig,
    VARIANT_LADDER,
    VariantConfig,
    ablation_run,
    ablation_table_csv,
    train,
)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_help()
        return 2
    return args.func(args)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attrsearch")
    sub = p.add_subparsers(dest="command")

    g = sub.add_parser("gen-data", help="generate the synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=5000)
    g.add_argument("--n-query", type=int, default=500)
    g.add_argument("--n-gallery", type=int, default=2000)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--size", type=int, default=synthgen.DEFAULT_IMAGE_SIZE)
    g.add_argument("--correlated", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run the staged training schedule")
    t.add_argument("--variant", default="Full", choices=VARIANT_LADDER)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="JSON file of TrainConfig fields")
    t.add_argument("--report", help="write the training report JSON here")
    for name, flag in _TRAIN_FLAGS.items():
        t.add_argument(flag, dest=name, type=_TRAIN_FIELD_TYPES[name],
                       default=None)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("index", help="index the gallery split")
    i.add_argument("--data", required=True)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_index)

    q = sub.add_parser("query", help="one manipulation query")
    q.add_argument("--data", required=True)
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--index", required=True)
    q.add_argument("--image", required=True)
    q.add_argument("--set", required=True, metavar="ATTR=VALUE")
    q.add_argument("-k", type=int, default=10)
    q.set_defaults(func=cmd_query)

    e = sub.add_parser("eval", help="top-K accuracy over the query split")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--index", required=True)
    e.add_argument("-k", default="10,20,30")
    e.add_argument("--out-csv")
    e.add_argument("--out-json")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate the variant ladder")
    a.add_argument("--data", required=True)
    a.add_argument("--variants", default=",".join(VARIANT_LADDER))
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("-k", default="10,20")
    a.add_argument("--out", help="directory for checkpoints/indices/tables")
    a.add_argument("--config", help="JSON file of TrainConfig fields")
    a.set_defaults(func=cmd_ablate)

    x = sub.add_parser("explain", help="write AAM heatmaps and boxes")
    x.add_argument("--data", required=True)
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--image", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_explain)

    s = sub.add_parser("serve", help="start the HTTP service")
    s.add_argument("--port", type=int, default=8000)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--index", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--ui-dir", default=None)
    s.set_defaults(func=cmd_serve)
    return p


_TRAIN_FLAGS = {
    "epochs_stage1": "--epochs-stage1",
    "epochs_stage2": "--epochs-stage2",
    "epochs_stage3": "--epochs-stage3",
    "batch_size": "--batch-size",
    "learning_rate": "--learning-rate",
    "dropout_keep_probability": "--keep-prob",
    "rep_dim": "--rep-dim",
    "global_dim": "--global-dim",
}
_TRAIN_FIELD_TYPES = {
    "epochs_stage1": int, "epochs_stage2": int, "epochs_stage3": int,
    "batch_size": int, "learning_rate": float,
    "dropout_keep_probability": float, "rep_dim": int, "global_dim": int,
}


def train_config_from_sources(config_path=None, overrides=None) -> TrainConfig:
    """Defaults <- config file <- explicit flags."""
    cfg = TrainConfig()
    if config_path:
        doc = json.loads(Path(config_path).read_text())
        known = {f.name for f in fields(TrainConfig)}
        simple = {k: v for k, v in doc.items()
                  if k in known and k not in ("loss_weights", "backbone",
                                              "eval_ks")}
        if "eval_ks" in doc:
            simple["eval_ks"] = tuple(doc["eval_ks"])
        cfg = replace(cfg, **simple)
    if overrides:
        cfg = replace(cfg, **{k: v for k, v in overrides.items()
                              if v is not None})
    return cfg


def cmd_gen_data(args) -> int:
    schema = synthgen.default_schema()
    images = synthgen.generate_dataset(schema, args.n, args.seed,
                                       size=args.size,
                                       correlated=args.correlated)
    ds = synthgen.split(images, args.n_query, args.n_gallery, args.seed)
    synthgen.save_dataset(args.out, images, schema, ds)
    print(f"wrote {args.n} images to {args.out} "
          f"(train {len(ds.train)}, query {len(ds.query)}, "
          f"gallery {len(ds.gallery)})")
    return 0


def cmd_train(args) -> int:
    overrides = {name: getattr(args, name) for name in _TRAIN_FLAGS}
    cfg = train_config_from_sources(args.config, overrides)
    model, report = train(args.data, args.variant, args.seed, cfg)
    tag = model.save(args.out)
    print(f"checkpoint {args.out} (tag {tag})")
    if report.evaluation is not None:
        print(eval_table_csv(report.evaluation), end="")
    if args.report:
        doc = {
            "seed": report.seed, "variant": report.variant,
            "config": report.config, "notes": report.notes,
            "curves": report.curves, "stage_seconds": report.stage_seconds,
        }
        if report.evaluation is not None:
            doc["evaluation"] = json.loads(eval_table_json(report.evaluation))
        Path(args.report).write_text(json.dumps(doc, indent=1) + "\n")
    return 0


def cmd_index(args) -> int:
    model = load_model(args.checkpoint)
    schema, images, ds = synthgen.load_dataset(args.data)
    if ds is None:
        print("dataset has no splits.json", file=sys.stderr)
        return 1
    by_id = {im.id: im for im in images}
    gallery = [by_id[i] for i in ds.gallery]
    index = index_gallery(gallery, model,
                          version_tag=checkpoint_tag(args.checkpoint))
    save_index(args.out, index)
    print(f"indexed {len(gallery)} gallery images -> {args.out}")
    return 0


def cmd_query(args) -> int:
    model = load_model(args.checkpoint)
    index = load_index(args.index)
    schema, images, _ = synthgen.load_dataset(args.data)
    by_id = {im.id: im for im in images}
    if args.image not in by_id:
        print(f"unknown image {args.image!r}", file=sys.stderr)
        return 1
    attr_name, _, value_name = args.set.partition("=")
    try:
        a = schema.attribute_index(attr_name)
    except KeyError:
        print(f"unknown attribute {attr_name!r}", file=sys.stderr)
        return 1
    if value_name not in schema.values(a):
        print(f"unknown value {value_name!r} for {attr_name}", file=sys.stderr)
        return 1
    v = schema.values(a).index(value_name)
    result = query(index, model, by_id[args.image], (a, v), args.k)
    print(f"target labels: {list(result.target_labels)}")
    for rank, (rid, dist, hit) in enumerate(
            zip(result.ids, result.distances, result.hits), start=1):
        mark = "HIT " if hit else "    "
        print(f"{rank:3d} {mark}{rid}  d2={dist:.6f}")
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.checkpoint)
    index = load_index(args.index)
    schema, images, ds = synthgen.load_dataset(args.data)
    by_id = {im.id: im for im in images}
    ks = [int(k) for k in str(args.k).split(",") if k]
    table = evaluate(index, model, [by_id[i] for i in ds.query], ks)
    csv_text = eval_table_csv(table)
    print(csv_text, end="")
    if args.out_csv:
        Path(args.out_csv).write_text(csv_text)
    if args.out_json:
        Path(args.out_json).write_text(eval_table_json(table) + "\n")
    return 0


def cmd_ablate(args) -> int:
    variants = [v for v in args.variants.split(",") if v]
    seeds = [int(s) for s in args.seeds.split(",") if s]
    ks = [int(k) for k in str(args.k).split(",") if k]
    cfg = train_config_from_sources(args.config)
    table = ablation_run(args.data, variants, ks, seeds, cfg,
                         out_dir=args.out)
    for k in table.ks:
        print(f"K={k}")
        print(ablation_table_csv(table, k), end="")
    if args.out:
        for k in table.ks:
            (Path(args.out) / f"ablation_k{k}.csv").write_text(
                ablation_table_csv(table, k))
    return 0


def cmd_explain(args) -> int:
    model = load_model(args.checkpoint)
    schema, images, _ = synthgen.load_dataset(args.data)
    by_id = {im.id: im for im in images}
    if args.image not in by_id:
        print(f"unknown image {args.image!r}", file=sys.stderr)
        return 1
    image = by_id[args.image]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    feats = model.features(image)
    records = []
    for a, (name, _) in enumerate(schema.attributes):
        record, png = export_aam(feats, model.classifier, a,
                                 image.pixels.shape[0])
        (out / f"{args.image}_{name}.png").write_bytes(png)
        records.append(record)
    (out / f"{args.image}_boxes.json").write_text(
        json.dumps(records, indent=1) + "\n")
    print(f"wrote {len(records)} heatmaps to {out}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app, load_service_state
    state = load_service_state(args.checkpoint, args.index, args.data)
    ui_dir = args.ui_dir
    if ui_dir is None:
        default_ui = Path(__file__).resolve().parents[2] / "frontend" / "dist"
        ui_dir = default_ui if default_ui.is_dir() else None
    app = create_app(state, ui_dir=ui_dir)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


if __name__ == "__main__":
    sys.exit(main())
