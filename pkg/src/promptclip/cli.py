"""Command line: ingest -> train -> embed -> eval, plus caption-length stats.

Every subcommand writes ``config.json`` (the fully resolved run
configuration) into ``--out-dir`` next to its other outputs.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from collections import Counter
from pathlib import Path

from . import __version__
from .corpus import (SCHEMAS, CategoryMap, DatasetError, PairRecord, caption_length_stats, default_category_map,
                     derive_retrieval_labels, load_dataset, load_image_features, write_dataset)
from .encoders import BackendSpec, ModelConfig
from .retrieval import (DEFAULT_KS, TASK_NAMES, EmbeddingMatrix, embed_records, evaluate_embeddings,
                        format_table, make_tasks)
from .store import (Checkpoint, config_digest, load_checkpoint, load_embeddings, save_checkpoint, save_embeddings,
                    save_report, write_json)
from .training import TrainConfig, train, write_trace_csv

log = logging.getLogger("promptclip")


class CLIError(Exception):
    pass


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(out: Path, args, **resolved) -> dict:
    cfg = {"subcommand": args.command, "version": __version__}
    for k, v in vars(args).items():
        if k in ("command", "func"):
            continue
        if isinstance(v, Path):
            v = str(v)
        elif isinstance(v, list):
            v = [str(x) if isinstance(x, Path) else x for x in v]
        cfg[k] = v
    cfg.update(resolved)
    write_json(out / "config.json", cfg)
    return cfg


def _load(path, schema, split=None) -> list:
    if not Path(path).exists():
        raise CLIError(f"dataset not found: {path}")
    records = load_dataset(path, schema)
    if split:
        records = [r for r in records if getattr(r, "split", split) == split]
    return records


def _category_maps(args) -> tuple:
    mod = CategoryMap.from_json(args.modality_map) if args.modality_map else default_category_map("modality")
    org = CategoryMap.from_json(args.organ_map) if args.organ_map else default_category_map("organ")
    return mod, org


# ---------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    out = _out_dir(args)
    records, seen = [], set()
    for path in args.paths:
        for rec in load_dataset(path, args.schema):
            if rec.id in seen:
                raise DatasetError(f"duplicate id {rec.id!r} across input files ({path})")
            seen.add(rec.id)
            records.append(rec)
    irma = args.schema == "irma-tsv"
    target = out / ("dataset.tsv" if irma else "dataset.jsonl")
    write_dataset(records, target)
    report = {"schema": args.schema, "n_records": len(records), "output": target.name}
    if not irma:
        report["splits"] = dict(Counter(r.split for r in records))
        report["empty_cui_records"] = sum(not r.cuis for r in records)
        mod, org = _category_maps(args)
        labels = derive_retrieval_labels(records, mod, org)
        write_json(out / "labels.json", [vars(lab) for lab in labels.labels])
        report["labels"] = {
            "modality": sum(lab.modality is not None for lab in labels.labels),
            "organ": sum(lab.organ is not None for lab in labels.labels),
            "ambiguous": dict(labels.ambiguous),
        }
    write_json(out / "ingest_report.json", report)
    _write_config(out, args)
    print(f"ingested {len(records)} records -> {target}")
    return 0


def _model_config(args) -> ModelConfig:
    backend = BackendSpec(width=args.text_width, n_layers=args.text_layers, seed=args.backend_seed)
    return ModelConfig.for_ablation(
        use_llm_backend=not args.no_llm_backend, use_learnable_prompt=not args.no_learnable_prompt,
        backend=backend, embed_dim=args.embed_dim, image_hidden=args.image_hidden,
    )


def cmd_train(args) -> int:
    out = _out_dir(args)
    records = _load(args.data, "rocov2-jsonl", args.split)
    if not records:
        raise CLIError(f"no {args.split} records in {args.data}")
    image_in = len(load_image_features(records[0].image_ref, Path(args.data).parent))
    tcfg = TrainConfig(batch_size=args.batch_size, epochs=args.epochs, learning_rate=args.lr, seed=args.seed,
                       use_llm_backend=not args.no_llm_backend, use_learnable_prompt=not args.no_learnable_prompt)
    mcfg = _model_config(args)
    mcfg.image_in = image_in
    _write_config(out, args, train=tcfg.to_json(), model=mcfg.to_json())
    result = train(records, config=tcfg, model_config=mcfg, base_dir=Path(args.data).parent,
                   max_steps=args.max_steps)
    save_checkpoint(Checkpoint.from_model(result.model, tcfg), out / "checkpoint.bin")
    write_trace_csv(result.trace, out / "trace.csv")
    if args.plot:
        from .plotting import plot_loss_trace

        plot_loss_trace(result.trace, out / "loss.png")
    print(f"trained {len(result.trace)} steps; epoch losses {result.epoch_losses[0]:.4f} -> "
          f"{result.epoch_losses[-1]:.4f}; checkpoint -> {out / 'checkpoint.bin'}")
    return 0


def _checkpoint(path):
    bin_path = Path(path).with_suffix(".bin")
    if not bin_path.exists():
        raise CLIError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_embed(args) -> int:
    out = _out_dir(args)
    ckpt = _checkpoint(args.checkpoint)
    records = _load(args.data, args.schema, args.split)
    emb = embed_records(ckpt.build_model(), records, Path(args.data).parent)
    save_embeddings(emb, out / "embeddings.bin", config_digest(ckpt.config_json))
    _write_config(out, args)
    print(f"embedded {len(records)} images (D={emb.shape[1]}) -> {out / 'embeddings.bin'}")
    return 0


def cmd_eval(args) -> int:
    out = _out_dir(args)
    records = _load(args.data, args.schema, args.split)
    if args.embeddings:
        emb = load_embeddings(args.embeddings)
        keep = {r.id for r in records}
        rows = [i for i, rid in enumerate(emb.ids) if rid in keep]
        emb = EmbeddingMatrix(emb.rows[rows], [emb.ids[i] for i in rows])
    elif args.checkpoint:
        emb = embed_records(_checkpoint(args.checkpoint).build_model(), records, Path(args.data).parent)
    else:
        raise CLIError("eval needs --embeddings or --checkpoint")

    labels = None
    pairs = [r for r in records if isinstance(r, PairRecord)]
    if pairs and any(t in ("modality", "organ", "modality_and_organ") for t in args.tasks):
        labels = derive_retrieval_labels(pairs, *_category_maps(args)).labels
    reports = evaluate_embeddings(emb, make_tasks(args.tasks, records, labels, args.irma_depth), args.ks)

    save_report(reports, out / "report.json")
    with open(out / "report.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["task", "k", "value", "n_queries", "n_flagged"])
        writer.writeheader()
        for rep in reports:
            writer.writerows(rep.rows())
    if args.plot:
        from .plotting import plot_metric_curves

        plot_metric_curves(reports, out / "metrics.png")
    _write_config(out, args, excluded={r.task: r.excluded for r in reports})
    print(format_table(reports))
    return 0


def cmd_stats(args) -> int:
    out = _out_dir(args)
    records = _load(args.data, "rocov2-jsonl", args.split)
    if not records:
        raise CLIError(f"dataset {args.data} has no records")
    stats = caption_length_stats(records, limits=args.limits, bin_width=args.bin_width)
    with open(out / "lengths.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_start", "bin_end", "count"])
        for lo, hi, c in zip(stats.bin_edges[:-1], stats.bin_edges[1:], stats.counts):
            writer.writerow([int(lo), int(hi), int(c)])
    with open(out / "exceedance.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["limit", "n_over", "fraction"])
        writer.writerows(stats.rows())
    if args.plot:
        from .plotting import plot_length_histogram

        plot_length_histogram(stats, out / "lengths.png")
    _write_config(out, args, mean_length=stats.mean, n_records=stats.n)
    print(f"{stats.n} captions, mean length {stats.mean:.2f} tokens")
    print(f"{'limit':>6} {'over':>7} {'fraction':>9}")
    for limit, n_over, frac in stats.rows():
        print(f"{limit:>6} {n_over:>7} {frac:>9.4f}")
    return 0


def cmd_synth(args) -> int:
    from .synthetic import planted_clusters

    out = _out_dir(args)
    records = planted_clusters(args.n_clusters, args.per_cluster, args.feature_dim, args.noise, args.seed)
    write_dataset(records, out / "dataset.jsonl")
    _write_config(out, args)
    print(f"wrote {len(records)} synthetic pairs -> {out / 'dataset.jsonl'}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptclip", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, schema=True):
        p.add_argument("--out-dir", required=True, type=Path)
        if data:
            p.add_argument("--data", required=True, type=Path)
            p.add_argument("--split", choices=("train", "valid", "test"), default=None)
        if schema:
            p.add_argument("--schema", choices=SCHEMAS, default="rocov2-jsonl")

    def maps(p):
        p.add_argument("--modality-map", type=Path, help="CategoryMap JSON for T060 (default: bundled)")
        p.add_argument("--organ-map", type=Path, help="CategoryMap JSON for T023 (default: bundled)")

    p = sub.add_parser("ingest", help="validate and normalize dataset files")
    p.add_argument("paths", nargs="+", type=Path)
    common(p, data=False)
    maps(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="contrastive training with a frozen text backend")
    common(p, schema=False)
    tdef = TrainConfig()
    p.add_argument("--lr", type=float, default=tdef.learning_rate)
    p.add_argument("--batch-size", type=int, default=tdef.batch_size)
    p.add_argument("--epochs", type=int, default=tdef.epochs)
    p.add_argument("--seed", type=int, default=tdef.seed)
    p.add_argument("--no-llm-backend", action="store_true", help="plain CLIP-style text path")
    p.add_argument("--no-learnable-prompt", action="store_true", help="keep the soft prompt frozen")
    mdef, bdef = ModelConfig(), BackendSpec()
    p.add_argument("--embed-dim", type=int, default=mdef.embed_dim)
    p.add_argument("--image-hidden", type=int, default=mdef.image_hidden)
    p.add_argument("--text-width", type=int, default=bdef.width)
    p.add_argument("--text-layers", type=int, default=bdef.n_layers)
    p.add_argument("--backend-seed", type=int, default=bdef.seed)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--plot", action="store_true", help="also write loss.png")
    p.set_defaults(func=cmd_train, split="train")

    p = sub.add_parser("embed", help="dump image embeddings from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("eval", help="CUI@K / Precision@K image-to-image retrieval")
    common(p)
    maps(p)
    p.add_argument("--embeddings", type=Path)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--tasks", nargs="+", choices=TASK_NAMES, default=["cui_ndcg", "modality", "organ",
                                                                      "modality_and_organ"])
    p.add_argument("--ks", nargs="+", type=int, default=list(DEFAULT_KS))
    p.add_argument("--irma-depth", type=int, default=None, help="compare only the leading anatomy digits")
    p.add_argument("--plot", action="store_true", help="also write metrics.png")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", help="caption length histogram and exceedance table")
    common(p, schema=False)
    p.add_argument("--limits", nargs="+", type=int, default=[77, 512])
    p.add_argument("--bin-width", type=int, default=8)
    p.add_argument("--no-plot", dest="plot", action="store_false", help="skip lengths.png")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("synth", help="write a planted-cluster toy dataset")
    p.add_argument("--out-dir", required=True, type=Path)
    p.add_argument("--n-clusters", type=int, default=4)
    p.add_argument("--per-cluster", type=int, default=8)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CLIError, DatasetError, FileNotFoundError, ValueError) as exc:
        print(f"promptclip {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
