"""``selfgnn`` command line.

Subcommands: augment, train, embed, evaluate, ablate, report.  Every command
writes ``config.resolved`` to its output directory; feeding that file back
with ``--config`` reproduces the run.  Exit codes: 1 configuration error,
2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import features as fa
from .autodiff import NonFiniteError
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .cluster import cluster_batches, load_partition, merge_clusters, partition_graph, train_clustered
from .config import ConfigError, RunConfig, build_config, dump_config, load_config
from .diffusion import DiffusionError, diffusion_operator
from .evaluation import ProbeError, collapse_metrics, kfold_accuracy, split_accuracy, stratified_split
from .graph import Graph, GraphFormatError, load_graph_bundle, write_matrix_tsv
from .trainer import TOPOLOGY_VARIANTS, Batch, embed_batches, make_views, train

log = logging.getLogger("selfgnn")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3
REPORT_COLUMNS = ("dataset", "variant", "protocol", "accuracy_mean", "accuracy_std",
                  "collapse_mean_std", "effective_rank")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage mistakes are configuration errors
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


# ------------------------------------------------------------------ helpers


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    values = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    for key, attr in (("dataset", "dataset"), ("aug.variant", "variant"), ("train.epochs", "epochs"),
                      ("mode", "mode"), ("cluster.k", "clusters"), ("cluster.b", "batches"),
                      ("cluster.partition", "import_partition"), ("train.seed", "seed"),
                      ("model.precision", "precision")):
        val = getattr(args, attr, None)
        if val is not None:
            values[key] = str(val)
    return build_config(values, cfg)


def load_dataset(cfg: RunConfig) -> Graph:
    g = load_graph_bundle(cfg.dataset)
    if cfg.split_seed is not None:
        if g.labels is None:
            raise GraphFormatError("split.seed needs labels.tsv")
        g = g.with_split(stratified_split(g.labels, seed=cfg.split_seed))
    return g


def out_dir(args) -> Path:
    path = Path(args.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_snapshot(cfg: RunConfig, out: Path) -> None:
    (out / "config.resolved").write_text(dump_config(cfg))


def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if np.isnan(x) else repr(x)
    return str(x)


def write_history(history, path: Path) -> None:
    lines = ["epoch\tloss\tval_acc"]
    lines += [f"{r.epoch}\t{_fmt(r.loss)}\t{_fmt(r.val_acc)}" for r in history]
    path.write_text("\n".join(lines) + "\n")


def write_report(rows: list[dict], path: Path) -> None:
    lines = ["\t".join(REPORT_COLUMNS)]
    lines += ["\t".join(_fmt(r[c]) for c in REPORT_COLUMNS) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def read_report(path: Path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    head = lines[0].split("\t")
    return [dict(zip(head, ln.split("\t"))) for ln in lines[1:] if ln]


def write_timing(out: Path, command: str, seconds: float) -> None:
    with open(out / "timing.tsv", "a") as fh:
        fh.write(f"{command}\t{seconds:.3f}\n")


def prepare_batches(cfg: RunConfig, g: Graph, spec=None) -> list[Batch]:
    """The batches a run trains on; rebuilt identically for ``embed``."""
    spec = spec or cfg.aug
    dtype = cfg.train.model_config(1).dtype
    if cfg.mode == "full":
        return [Batch.prepare(make_views(g, spec), spec, dtype)]
    part = _partition(cfg, g)
    b = cfg.batches if cfg.batches is not None else max(1, part.num_clusters // 4)
    return cluster_batches(g, spec, merge_clusters(part, b, cfg.train.seed), dtype)


def _partition(cfg: RunConfig, g: Graph):
    if cfg.partition:
        return load_partition(cfg.partition, g.num_nodes)
    return partition_graph(g, cfg.clusters, cfg.train.seed)


def run_training(cfg: RunConfig, g: Graph, spec=None):
    spec = spec or cfg.aug
    if cfg.mode == "full":
        return train(g, spec, cfg.train, cfg.probe)
    return train_clustered(g, spec, cfg.train, cfg.clusters, cfg.batches, cfg.probe,
                           partition=_partition(cfg, g) if cfg.partition else None)


def evaluate_rows(cfg: RunConfig, g: Graph, emb: np.ndarray, variant: str) -> list[dict]:
    """Protocol A (train->test split) and protocol B (k-fold over labeled nodes)."""
    if g.labels is None:
        raise GraphFormatError("evaluation needs labels.tsv")
    cm = collapse_metrics(emb)
    common = dict(dataset=Path(cfg.dataset).name, variant=variant,
                  collapse_mean_std=cm.mean_std, effective_rank=cm.effective_rank)
    rows = []
    if g.split is not None:
        acc = split_accuracy(emb, g.labels, g.split, "train", "test", cfg.probe, g.num_classes)
        rows.append(dict(common, protocol="A", accuracy_mean=acc, accuracy_std=0.0))
    lab = g.labels >= 0
    mean, std, _ = kfold_accuracy(emb[lab], g.labels[lab], cfg.probe)
    rows.append(dict(common, protocol="B", accuracy_mean=mean, accuracy_std=std))
    return rows


# ----------------------------------------------------------------- commands


def cmd_augment(args, cfg: RunConfig) -> None:
    g = load_dataset(cfg)
    out = out_dir(args)
    write_snapshot(cfg, out)
    if args.feature:
        x = g.features
        views = {
            "split": lambda: fa.split(x),
            "standardize": lambda: (fa.standardize(x),),
            "ldp": lambda: (fa.ldp(g),),
            "paste": lambda: fa.paste(x, g),
        }[args.feature]()
        for i, v in enumerate(views, 1):
            write_matrix_tsv(v.matrix, out / f"{args.feature}.view{i}.tsv")
        return
    variant = cfg.aug.variant
    if variant not in TOPOLOGY_VARIANTS:
        raise ConfigError(f"augment without --feature needs a topological variant, got {variant!r}")
    dcfg = cfg.aug.diffusion_config()
    h = diffusion_operator(g, dcfg).to_scipy().tocoo()
    meta = " ".join(f"{k}={v}" for k, v in sorted(vars(dcfg).items()))
    lines = [f"# {meta}"]
    lines += [f"{u}\t{v}\t{w!r}" for u, v, w in zip(h.row.tolist(), h.col.tolist(), h.data.tolist())]
    (out / f"{variant}.weighted.tsv").write_text("\n".join(lines) + "\n")


def cmd_train(args, cfg: RunConfig) -> None:
    g = load_dataset(cfg)
    out = out_dir(args)
    write_snapshot(cfg, out)
    result = run_training(cfg, g)
    save_checkpoint(result.params, out / "checkpoint.sgnn")
    write_history(result.history, out / "history.tsv")
    if "peak_dense" in result.meta:
        (out / "cluster.tsv").write_text(
            f"batches\t{len(result.meta['batch_sizes'])}\n"
            f"largest_batch\t{max(result.meta['batch_sizes'])}\n"
            f"peak_dense_elements\t{result.meta['peak_dense']}\n"
        )
    print(f"best epoch {result.best_epoch} val_acc {_fmt(result.best_val)}")


def _embeddings(args, cfg: RunConfig, g: Graph, out: Path) -> np.ndarray:
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.sgnn"
    try:
        params = load_checkpoint(ckpt)
    except FileNotFoundError as exc:
        raise GraphFormatError(f"checkpoint not found: {ckpt}") from exc
    return embed_batches(params, prepare_batches(cfg, g), g.num_nodes, cfg.train.embed)


def cmd_embed(args, cfg: RunConfig) -> None:
    g = load_dataset(cfg)
    out = out_dir(args)
    write_snapshot(cfg, out)
    write_matrix_tsv(_embeddings(args, cfg, g, out), out / "embeddings.tsv")


def cmd_evaluate(args, cfg: RunConfig) -> None:
    g = load_dataset(cfg)
    out = out_dir(args)
    write_snapshot(cfg, out)
    if args.embeddings:
        try:
            emb = np.loadtxt(args.embeddings, delimiter="\t", ndmin=2)
        except OSError as exc:
            raise GraphFormatError(f"cannot read embeddings {args.embeddings}") from exc
        if emb.shape[0] != g.num_nodes:
            raise GraphFormatError(f"embeddings have {emb.shape[0]} rows, graph has {g.num_nodes}")
    else:
        emb = _embeddings(args, cfg, g, out)
    rows = evaluate_rows(cfg, g, emb, cfg.aug.variant)
    write_report(rows, out / "report.tsv")
    for r in rows:
        print(f"protocol {r['protocol']}: {r['accuracy_mean']:.4f}")


def _trained_rows(cfg: RunConfig, g: Graph, spec, label: str) -> list[dict]:
    res = run_training(cfg, g, spec)
    batches = res.meta["batches"]
    emb = embed_batches(res.params, batches, g.num_nodes, cfg.train.embed)
    return evaluate_rows(cfg, g, emb, label)


def cmd_ablate(args, cfg: RunConfig) -> None:
    g = load_dataset(cfg)
    out = out_dir(args)
    write_snapshot(cfg, out)
    rows = []
    if args.what == "split-perm":
        spec = replace(cfg.aug, variant="split", permutation_seed=None)
        rows += _trained_rows(cfg, g, spec, "split")
        for trial in range(args.trials):
            pspec = replace(spec, permutation_seed=cfg.train.seed * 1000 + trial + 1)
            rows += _trained_rows(cfg, g, pspec, f"split-perm{trial + 1}")
    else:
        for flag in (False, True):
            c = replace(cfg, train=replace(cfg.train, projector=flag))
            rows += _trained_rows(c, g, cfg.aug, f"{cfg.aug.variant}-projector-{'yes' if flag else 'no'}")
    rows = [r for r in rows if r["protocol"] == "A"] + [r for r in rows if r["protocol"] == "B"]
    write_report(rows, out / "ablation.tsv")
    for r in rows:
        print(f"{r['variant']}\t{r['protocol']}\t{r['accuracy_mean']:.4f}")


def cmd_report(args, cfg: RunConfig) -> None:
    rows = []
    for path in args.inputs:
        p = Path(path)
        p = p / "report.tsv" if p.is_dir() else p
        try:
            rows += read_report(p)
        except (OSError, IndexError) as exc:
            raise GraphFormatError(f"cannot read report {p}") from exc
    rows.sort(key=lambda r: (r["dataset"], r["variant"], r["protocol"]))
    out = out_dir(args)
    text = "\t".join(REPORT_COLUMNS) + "\n" + "".join(
        "\t".join(r[c] for c in REPORT_COLUMNS) + "\n" for r in rows
    )
    (out / "summary.tsv").write_text(text)
    sys.stdout.write(text)


COMMANDS = {
    "augment": cmd_augment, "train": cmd_train, "embed": cmd_embed,
    "evaluate": cmd_evaluate, "ablate": cmd_ablate, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int, help="run seed (overrides train.seed)")
    common.add_argument("--out", default="runs/default", help="output directory")
    common.add_argument("--threads", type=int, help="BLAS threads (fallback: SELFGNN_THREADS)")
    common.add_argument("--precision", choices=("f32", "f64"))
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--dataset", help="graph bundle directory")
    common.add_argument("-v", "--verbose", action="store_true")

    run = argparse.ArgumentParser(add_help=False)
    run.add_argument("--variant", help="augmentation variant")
    run.add_argument("--epochs", type=int)
    run.add_argument("--mode", choices=("full", "cluster"))
    run.add_argument("--clusters", type=int, help="number of clusters k")
    run.add_argument("--batches", type=int, help="number of merged batches b")
    run.add_argument("--import-partition", help="file with one cluster id per node")

    p = _Parser(prog="selfgnn", description="Negative-free student/teacher graph embeddings.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    a = sub.add_parser("augment", parents=[common, run], help="write an augmented view")
    a.add_argument("--feature", choices=("split", "standardize", "ldp", "paste"))
    sub.add_parser("train", parents=[common, run], help="train and save checkpoint + history")
    e = sub.add_parser("embed", parents=[common, run], help="write embeddings.tsv")
    e.add_argument("--checkpoint")
    ev = sub.add_parser("evaluate", parents=[common, run], help="probe accuracy into report.tsv")
    ev.add_argument("--checkpoint")
    ev.add_argument("--embeddings")
    ab = sub.add_parser("ablate", parents=[common, run], help="split-permutation or projection-head study")
    ab.add_argument("--what", choices=("split-perm", "projection-head"), required=True)
    ab.add_argument("--trials", type=int, default=5)
    r = sub.add_parser("report", parents=[common], help="merge report.tsv files")
    r.add_argument("inputs", nargs="+")
    return p


def _threads(args) -> int | None:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("SELFGNN_THREADS")
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"SELFGNN_THREADS must be an integer, got {env!r}") from exc
    return None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        n = _threads(args)
        limit = threadpool_limits(n) if n else contextlib.nullcontext()
        start = time.perf_counter()
        with limit:
            COMMANDS[args.command](args, cfg)
        if args.command != "report":
            write_timing(Path(args.out), args.command, time.perf_counter() - start)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GraphFormatError, CheckpointError, ProbeError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, DiffusionError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
