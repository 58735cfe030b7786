"""Command-line entry points: preprocess, gen-synthetic, train, evaluate,
ablate, sweep, export-attention.

Every run writes a manifest.json next to its artifacts (resolved config,
seed, dataset hash, output hashes). Config precedence: CLI flags override
the --config file, which overrides built-in defaults. Results go to
files; progress and errors go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .attention import attention_table
from .autodiff import Tape
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    DataError,
    build_graph,
    ingest,
    load_cache,
    read_tsv,
    save_cache,
    save_split_manifest,
    split_leave_one_out,
)
from .evaluate import compare_runs, evaluate, format_comparison
from .model import forward_cascade, params_from_arrays
from .synthetic import generate_interactions, write_tsv
from .train import ABLATION_VARIANTS, ConfigError, TrainingConfig, train

_CONFIG_FLAGS = (
    ("embed-dim", "embed_dim", int),
    ("num-factors", "num_factors", int),
    ("attn-scale", "attn_scale", float),
    ("lr", "lr", float),
    ("l2-weight", "l2_weight", float),
    ("ind-weight", "ind_weight", float),
    ("batch-size", "batch_size", int),
    ("seed", "seed", int),
    ("patience", "patience", int),
    ("max-epochs", "max_epochs", int),
    ("eval-users", "eval_users", int),
)


def _add_config_flags(parser):
    for flag, _, typ in _CONFIG_FLAGS:
        parser.add_argument(f"--{flag}", type=typ, default=None)
    parser.add_argument("--layers", type=str, default=None,
                        help="comma-separated per-behavior layer counts")
    parser.add_argument("--behaviors", type=str, default=None,
                        help="comma-separated behavior chain, target last")
    parser.add_argument("--no-attention", action="store_true")
    parser.add_argument("--shared-transform", action="store_true")
    parser.add_argument("--w-post", action="store_true",
                        help="post-convolution meta-knowledge variant")
    parser.add_argument("--single-behavior", action="store_true")
    parser.add_argument("--config", type=str, default=None,
                        help="JSON config file (or a run manifest)")


def resolve_config(args):
    doc = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            loaded = json.load(fh)
        doc = loaded.get("config", loaded)  # accept a manifest or a bare config
    for _, key, _ in _CONFIG_FLAGS:
        value = getattr(args, key, None)
        if value is not None:
            doc[key] = value
    if args.layers is not None:
        doc["layers"] = [int(x) for x in args.layers.split(",")]
    if getattr(args, "behaviors", None) is not None:
        doc["behaviors"] = args.behaviors.split(",")
    if args.no_attention:
        doc["use_attention"] = False
    if args.shared_transform:
        doc["personalized_transform"] = False
    if args.w_post:
        doc["post_conv_meta"] = True
    if args.single_behavior:
        doc["single_behavior"] = True
    return TrainingConfig.from_dict(doc)


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _run_id(command, config_doc, seed, dataset_hash):
    blob = json.dumps(
        {"command": command, "config": config_doc, "seed": seed, "dataset": dataset_hash},
        sort_keys=True,
    ).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def write_manifest(out_dir, command, config_doc, seed, dataset_path=None, outputs=()):
    dataset_hash = _sha256(dataset_path) if dataset_path else None
    run_id = _run_id(command, config_doc, seed, dataset_hash)
    doc = {
        "format": "cascaderec-run",
        "version": 1,
        "package_version": __version__,
        "run_id": run_id,
        "command": command,
        "seed": seed,
        "config": config_doc,
        "dataset": {"path": str(dataset_path), "sha256": dataset_hash} if dataset_path else None,
        "outputs": {name: _sha256(path) for name, path in outputs},
    }
    path = Path(out_dir) / "manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return run_id


def _load_dataset(path):
    dataset = load_cache(path)
    if not dataset.test_item:
        raise DataError(f"{path}: cache has no leave-one-out split")
    return dataset


def _log(msg):
    print(msg, file=sys.stderr)


# ---- subcommands ------------------------------------------------------------


def cmd_gen_synthetic(args):
    records = generate_interactions(
        num_users=args.users, num_items=args.items, num_factors=args.factors,
        behaviors=args.behaviors.split(","), seed=args.seed,
        target_per_user=args.target_per_user, alignment=args.alignment,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_tsv(records, out)
    config_doc = {
        "users": args.users, "items": args.items, "factors": args.factors,
        "behaviors": args.behaviors, "target_per_user": args.target_per_user,
        "alignment": args.alignment,
    }
    manifest_dir = out.parent
    write_manifest(manifest_dir, "gen-synthetic", config_doc, args.seed,
                   outputs=[(out.name, out)])
    _log(f"wrote {len(records)} interactions to {out}")
    return 0


def cmd_preprocess(args):
    chain = args.behaviors.split(",")
    dataset = ingest(read_tsv(args.input), chain)
    dataset = split_leave_one_out(dataset)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache_path = out_dir / "dataset.bin"
    split_path = out_dir / "split_manifest.json"
    save_cache(dataset, cache_path)
    save_split_manifest(dataset, split_path)
    config_doc = {"input": str(args.input), "behaviors": chain}
    write_manifest(out_dir, "preprocess", config_doc, 0, dataset_path=cache_path,
                   outputs=[("dataset.bin", cache_path), ("split_manifest.json", split_path)])
    edge_counts = {name: len(dataset.interactions[b]) for b, name in enumerate(chain)}
    _log(f"users={dataset.num_users} items={dataset.num_items} edges={edge_counts}")
    _log(f"test holdouts={len(dataset.test_item)} validation holdouts={len(dataset.validation_item)}")
    return 0


def _write_dcor_csv(path, history, run_id):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# manifest: {run_id}\n")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "behavior", "matrix", "mean_pairwise_dcor"])
        for rec in history:
            for b in sorted(rec.dcor_diag):
                for side in ("user", "item"):
                    writer.writerow([rec.epoch, b, side, repr(rec.dcor_diag[b][side])])


def _train_once(cfg, dataset, out_dir, run_id, quiet=False):
    started = time.perf_counter()
    epoch_times = []

    def progress(rec, _params):
        epoch_times.append(time.perf_counter() - started)
        if not quiet:
            _log(f"epoch {rec.epoch}: loss_rec={rec.loss_rec:.4f} "
                 f"loss_ind={rec.loss_ind:.4f} val_recall@20={rec.val_recall20:.4f}")

    result = train(cfg, dataset, progress=progress)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.bin"
    log_path = out_dir / "train_log.jsonl"
    dcor_path = out_dir / "dcor_diagnostics.csv"
    summary_path = out_dir / "train_summary.json"
    save_checkpoint(dict(result.params.items()), ckpt_path, meta=f"manifest:{run_id}")
    with open(log_path, "w", encoding="utf-8") as fh:
        for line in result.log_lines():
            fh.write(line + "\n")
    _write_dcor_csv(dcor_path, result.history, run_id)
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "manifest": run_id,
                "best_epoch": result.best_epoch,
                "best_val_recall@20": result.best_val_recall20,
                "epochs_run": len(result.history),
                "diverged": result.diverged,
            },
            fh, indent=2, sort_keys=True,
        )
        fh.write("\n")
    # wall-clock timings are deliberately outside the deterministic artifacts
    with open(out_dir / "timing.txt", "w", encoding="utf-8") as fh:
        for epoch, t in enumerate(epoch_times, start=1):
            fh.write(f"epoch {epoch}: {t:.3f}s\n")
    return result, [("checkpoint.bin", ckpt_path), ("train_log.jsonl", log_path),
                    ("dcor_diagnostics.csv", dcor_path), ("train_summary.json", summary_path)]


def cmd_train(args):
    cfg = resolve_config(args)
    dataset = _load_dataset(args.data)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    run_id = _run_id("train", cfg.to_dict(), cfg.seed, _sha256(args.data))
    result, outputs = _train_once(cfg, dataset, out_dir, run_id)
    write_manifest(out_dir, "train", cfg.to_dict(), cfg.seed,
                   dataset_path=args.data, outputs=outputs)
    if result.diverged:
        _log("training diverged (non-finite loss); last good checkpoint written")
        return 3
    _log(f"best epoch {result.best_epoch}: val_recall@20={result.best_val_recall20:.4f}")
    return 0


def cmd_evaluate(args):
    cfg = resolve_config(args)
    dataset = _load_dataset(args.data)
    arrays, _ = load_checkpoint(args.checkpoint)
    params = params_from_arrays(cfg, dataset.num_users, dataset.num_items, arrays)
    chain = cfg.effective_behaviors()
    offset = dataset.num_behaviors - len(chain)
    graphs = [build_graph(dataset, offset + b) for b in range(len(chain))]
    cutoffs = tuple(int(x) for x in args.cutoffs.split(","))
    users = None
    if cfg.eval_users:
        rng = np.random.default_rng(cfg.seed)
        holdout = dataset.test_item if args.split == "test" else dataset.validation_item
        pool = sorted(holdout)
        if len(pool) > cfg.eval_users:
            users = sorted(rng.choice(pool, size=cfg.eval_users, replace=False))
    report = evaluate(params, dataset, graphs, cfg, cutoffs=cutoffs,
                      split=args.split, users=users, mask_train=not args.unmasked)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    run_id = _run_id("evaluate", cfg.to_dict(), cfg.seed, _sha256(args.data))
    report_path = out_dir / "report.json"
    doc = report.to_dict()
    doc["manifest"] = run_id
    doc["split"] = args.split
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    outputs = [("report.json", report_path)]
    if args.ranks:
        ranks_path = out_dir / "ranks.csv"
        with open(ranks_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(f"# manifest: {run_id}\n")
            writer = csv.writer(fh)
            writer.writerow(["user_key", "rank"])
            for u in sorted(report.ranks):
                writer.writerow([dataset.user_keys[u], report.ranks[u]])
        outputs.append(("ranks.csv", ranks_path))
    write_manifest(out_dir, "evaluate", cfg.to_dict(), cfg.seed,
                   dataset_path=args.data, outputs=outputs)
    for n in cutoffs:
        _log(f"recall@{n}={report.recall[n]:.4f} ndcg@{n}={report.ndcg[n]:.4f}")
    return 0


def cmd_ablate(args):
    cfg = resolve_config(args)
    dataset = _load_dataset(args.data)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cutoffs = tuple(int(x) for x in args.cutoffs.split(","))
    named_reports = []
    outputs = []
    for variant in ABLATION_VARIANTS:
        vcfg = cfg.with_variant(variant)
        vdir = out_dir / variant
        run_id = _run_id("ablate", vcfg.to_dict(), vcfg.seed, _sha256(args.data))
        _log(f"--- variant {variant} ---")
        result, v_outputs = _train_once(vcfg, dataset, vdir, run_id, quiet=True)
        chain = vcfg.effective_behaviors()
        offset = dataset.num_behaviors - len(chain)
        graphs = [build_graph(dataset, offset + b) for b in range(len(chain))]
        report = evaluate(result.params, dataset, graphs, vcfg, cutoffs=cutoffs, split="test")
        report_path = vdir / "report.json"
        with open(report_path, "w", encoding="utf-8") as fh:
            doc = report.to_dict()
            doc["manifest"] = run_id
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        named_reports.append((variant, report))
        outputs += [(f"{variant}/{name}", path) for name, path in v_outputs]
        outputs.append((f"{variant}/report.json", report_path))
        _log(f"{variant}: test recall@20={report.recall[20]:.4f}")
    rows = compare_runs(named_reports)
    table_path = out_dir / "comparison.txt"
    json_path = out_dir / "comparison.json"
    with open(table_path, "w", encoding="utf-8") as fh:
        fh.write(format_comparison(rows, named_reports) + "\n")
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)
        fh.write("\n")
    outputs += [("comparison.txt", table_path), ("comparison.json", json_path)]
    write_manifest(out_dir, "ablate", cfg.to_dict(), cfg.seed,
                   dataset_path=args.data, outputs=outputs)
    return 0


def cmd_sweep(args):
    cfg = resolve_config(args)
    dataset = _load_dataset(args.data)
    with open(args.grid, "r", encoding="utf-8") as fh:
        grid = json.load(fh)
    bad = sorted(set(grid) - set(cfg.to_dict()))
    if bad:
        raise ConfigError(f"unknown sweep keys: {', '.join(bad)}")
    keys = sorted(grid)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results_path = out_dir / "sweep_results.csv"
    best = None
    with open(results_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(keys + ["best_epoch", "best_val_recall@20"])
        for combo in itertools.product(*(grid[k] for k in keys)):
            doc = cfg.to_dict()
            doc.update(dict(zip(keys, combo)))
            run_cfg = TrainingConfig.from_dict(doc)
            result = train(run_cfg, dataset)
            writer.writerow(list(combo) + [result.best_epoch, repr(result.best_val_recall20)])
            _log(f"{dict(zip(keys, combo))} -> val_recall@20={result.best_val_recall20:.4f}")
            if best is None or result.best_val_recall20 > best[0]:
                best = (result.best_val_recall20, doc)
    best_path = out_dir / "best_config.json"
    with open(best_path, "w", encoding="utf-8") as fh:
        json.dump({"best_val_recall@20": best[0], "config": best[1]}, fh,
                  indent=2, sort_keys=True)
        fh.write("\n")
    write_manifest(out_dir, "sweep", {"base": cfg.to_dict(), "grid": grid}, cfg.seed,
                   dataset_path=args.data,
                   outputs=[("sweep_results.csv", results_path), ("best_config.json", best_path)])
    return 0


def cmd_export_attention(args):
    cfg = resolve_config(args)
    dataset = _load_dataset(args.data)
    arrays, _ = load_checkpoint(args.checkpoint)
    params = params_from_arrays(cfg, dataset.num_users, dataset.num_items, arrays)
    chain = cfg.effective_behaviors()
    offset = dataset.num_behaviors - len(chain)
    graphs = [build_graph(dataset, offset + b) for b in range(len(chain))]
    user_index = dataset.user_key_index()
    item_index = dataset.item_key_index()
    user_keys = args.users.split(",")
    item_keys = args.items.split(",")
    for key in user_keys:
        if key not in user_index:
            raise DataError(f"unknown user key {key!r}")
    for key in item_keys:
        if key not in item_index:
            raise DataError(f"unknown item key {key!r}")
    pairs = [(u, i) for u in user_keys for i in item_keys]
    users = np.array([user_index[u] for u, _ in pairs], dtype=np.int64)
    items = np.array([item_index[i] for _, i in pairs], dtype=np.int64)
    tape = Tape(record=False)
    cascade = forward_cascade(tape, params, graphs, cfg)
    table = attention_table(tape, params, cascade, users, items, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    run_id = _run_id("export-attention", cfg.to_dict(), cfg.seed, _sha256(args.data))
    with open(out, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# manifest: {run_id}\n")
        writer = csv.writer(fh)
        writer.writerow(["user_key", "item_key", "behavior", "factor", "weight"])
        for row, (ukey, ikey) in enumerate(pairs):
            for b, name in enumerate(chain):
                for k in range(cfg.num_factors):
                    writer.writerow([ukey, ikey, name, k, repr(table[row, b, k])])
    write_manifest(out.parent, "export-attention", cfg.to_dict(), cfg.seed,
                   dataset_path=args.data, outputs=[(out.name, out)])
    _log(f"wrote attention weights for {len(pairs)} pairs to {out}")
    return 0


# ---- parser -----------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cascaderec",
        description="Cascaded multi-behavior recommender: preprocess, train, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="emit a planted-factor TSV log")
    p.add_argument("--out", required=True)
    p.add_argument("--users", type=int, default=200)
    p.add_argument("--items", type=int, default=100)
    p.add_argument("--factors", type=int, default=2)
    p.add_argument("--behaviors", type=str, default="view,cart,buy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--target-per-user", type=int, default=6)
    p.add_argument("--alignment", type=float, default=0.5)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("preprocess", help="ingest a TSV log into a dataset cache")
    p.add_argument("--input", required=True)
    p.add_argument("--behaviors", type=str, default="view,cart,buy")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train on a dataset cache")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="rank holdouts with a saved checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--cutoffs", type=str, default="10,20,50")
    p.add_argument("--split", choices=("test", "validation"), default="test")
    p.add_argument("--unmasked", action="store_true",
                   help="keep training positives in the candidate set (diagnostic)")
    p.add_argument("--ranks", action="store_true", help="also write per-user ranks CSV")
    _add_config_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and compare full, wo_A, wo_T, wo_AT")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--cutoffs", type=str, default="10,20,50")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="grid-search config fields from a JSON grid")
    p.add_argument("--data", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--out-dir", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-attention", help="per-(user,item,behavior,factor) weights CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--users", required=True, help="comma-separated user keys")
    p.add_argument("--items", required=True, help="comma-separated item keys")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_export_attention)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataError, ConfigError, CheckpointError, KeyError, ValueError,
            FloatingPointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
