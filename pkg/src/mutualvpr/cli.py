"""Command line: ``mutualvpr {synth-gen,train,embed,eval,analyze}``.

Every command refuses to overwrite existing outputs unless ``--force`` is
given, and exits nonzero with a one-line diagnostic on stderr on failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as config_mod
from . import persist
from .clusterer import reassignment_diff
from .errors import GenerationError, ManifestParseError, NumericError, ParameterError
from .experiments import embed, make_synthetic
from .retrieval import occlusion_eval, recall_at_k, interclass_distance_report
from .synthworld import load_dataset, load_manifest, load_truth, sidecar_path, truth_path, write_manifest
from .trainer import initialize, train_epoch

log = logging.getLogger("mutualvpr")

EXIT_USAGE = 2
EXIT_FAILURE = 1


class CliError(Exception):
    def __init__(self, message, code=EXIT_FAILURE):
        super().__init__(message)
        self.code = code


def _claim(paths, force: bool):
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise CliError(f"refusing to overwrite {', '.join(existing)} (use --force)", EXIT_USAGE)


def _run_config(args, **flags):
    flags = {k: v for k, v in flags.items() if v is not None}
    if getattr(args, "seed", None) is not None:
        flags["seed"] = args.seed
    return config_mod.resolve(args.config, flags, args.set or ())


def _common(p, out_help):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--out", required=True, help=out_help)
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")


def _ks(text):
    try:
        return tuple(int(k) for k in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_synth_gen(args):
    cfg = _run_config(args)
    out = Path(args.out)
    names = ["train", "database", "queries"]
    targets = [out / "run.cfg"]
    for n in names:
        m = out / f"{n}.manifest"
        targets += [m, sidecar_path(m), truth_path(m)]
    _claim(targets, args.force)
    out.mkdir(parents=True, exist_ok=True)
    data = make_synthetic(cfg)
    for n, images in zip(names, (data.train, data.database, data.queries)):
        write_manifest(images, out / f"{n}.manifest")
    config_mod.write(cfg, out / "run.cfg")
    print(f"wrote {len(data.train)} train, {len(data.database)} database, {len(data.queries)} query images to {out}")


def _write_epoch(state, out: Path):
    persist.write_snapshot(state.clusters, out / "clusters" / f"epoch_{state.epoch:03d}.json")


def cmd_train(args):
    cfg = _run_config(args, K=args.k, dataset=args.dataset)
    if not cfg.dataset:
        raise CliError("no dataset: pass --dataset or set dataset in the config", EXIT_USAGE)
    out = Path(args.out)
    targets = [out / n for n in ("checkpoint.mvpr", "metrics.tsv", "run.cfg", "clusters")]
    if not args.resume:
        _claim(targets, args.force)
    images = load_dataset(cfg.dataset)
    tcfg = cfg.train_config()
    if args.resume:
        state, saved = persist.load_checkpoint(args.resume, images)
        if saved != tcfg:
            raise CliError("config differs from the checkpoint's training config", EXIT_USAGE)
    else:
        state = initialize(images, tcfg)
    (out / "clusters").mkdir(parents=True, exist_ok=True)
    config_mod.write(cfg, out / "run.cfg")
    if state.epoch == 0:
        persist.write_snapshot(state.clusters, out / "clusters" / "epoch_000.json")
    while state.epoch < tcfg.epochs:
        train_epoch(state, tcfg)
        m = state.history[-1]
        log.info("epoch %d loss %.4f purity %.4f reassignment %.4f", m.epoch, m.loss, m.purity, m.reassignment)
        _write_epoch(state, out)
        persist.write_metrics(state.history, out / "metrics.tsv")
        persist.save_checkpoint(state, tcfg, out / "checkpoint.mvpr")
    persist.write_metrics(state.history, out / "metrics.tsv")
    persist.save_checkpoint(state, tcfg, out / "checkpoint.mvpr")
    print(f"trained {state.epoch} epochs; checkpoint in {out / 'checkpoint.mvpr'}")


def cmd_embed(args):
    _claim([args.out], args.force)
    state, _ = persist.load_checkpoint(args.checkpoint)
    images = load_manifest(args.manifest)
    if not images:
        raise CliError(f"{args.manifest}: no images")
    persist.write_db(embed(images, state.params), args.out)
    print(f"wrote {len(images)} descriptors to {args.out}")


def cmd_eval(args):
    if args.out:
        _claim([args.out], args.force)
    db = persist.read_db(args.db)
    q = persist.read_db(args.queries)
    report = recall_at_k(db, q.descriptors, q.positions, args.k, args.radius, query_ids=q.ids)
    text = report.table()
    if args.query_manifest:
        truth = load_truth(args.query_manifest)
        mask = [truth.get(i, (None, False))[1] for i in q.ids]
        if any(mask):
            text += occlusion_eval(db, q.descriptors, q.positions, args.k, args.radius, occluded=mask,
                                   query_ids=q.ids).table()
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")


def cmd_analyze(args):
    if args.out:
        _claim([args.out], args.force)
    if args.before or args.after:
        if not (args.before and args.after):
            raise CliError("--before and --after go together", EXIT_USAGE)
        rep = reassignment_diff(persist.read_snapshot(args.before), persist.read_snapshot(args.after))
        lines = [f"# reassignment {rep.fraction:.4f} ({len(rep.moved)}/{rep.total} images)"]
        lines += [f"{c[0]}\t{c[1]}\t{f:.4f}" for c, f in sorted(rep.per_cell.items())]
        lines += [f"moved\t{i}" for i in rep.moved]
    else:
        if not (args.db and args.labels):
            raise CliError("analyze needs --db and --labels, or --before and --after", EXIT_USAGE)
        db = persist.read_db(args.db)
        labels = persist.read_snapshot(args.labels).labels()
        headings = None
        if args.manifest:
            headings = {im.id: im.heading for im in load_manifest(args.manifest)}
        labels = {i: labels[i] for i in db.ids if i in labels}
        missing = [i for i in db.ids if i not in labels]
        if missing:
            raise CliError(f"{len(missing)} database ids have no label (e.g. {missing[0]})")
        rep = interclass_distance_report(db, labels, headings)
        lines = [f"# adjacent pairs {len(rep.pairs)}  mean min {rep.mean_min:.4f}  mean mean {rep.mean_mean:.4f}"]
        lines += [f"{p.cell[0]}\t{p.cell[1]}\t{p.classes[0]}-{p.classes[1]}\t{p.min:.4f}\t{p.mean:.4f}"
                  for p in rep.pairs]
        counts, edges = rep.close_hist
        lines.append(f"# distances below {rep.close_threshold:g}")
        lines += [f"[{a:.3f},{b:.3f})\t{int(c)}" for a, b, c in zip(edges[:-1], edges[1:], counts)]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mutualvpr", description="Desk-scale place recognition with adaptive view labels.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate a synthetic world as manifests")
    _common(p, "output directory")
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("train", help="train the encoder with adaptive clustering")
    _common(p, "output directory")
    p.add_argument("--dataset", help="training manifest")
    p.add_argument("--k", type=int, help="clusters per grid cell")
    p.add_argument("--resume", help="continue from a checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="encode a manifest into a descriptor database")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("eval", help="Recall@K of query descriptors against a database")
    p.add_argument("--db", required=True)
    p.add_argument("--queries", required=True, help="descriptor database of the queries")
    p.add_argument("--query-manifest", help="query manifest; its .truth file marks occluded queries")
    p.add_argument("--k", type=_ks, default=(1, 5, 10, 20), help="comma-separated, e.g. 1,5,10")
    p.add_argument("--radius", type=float, default=25.0)
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="adjacent-class distances or reassignment between snapshots")
    p.add_argument("--db")
    p.add_argument("--labels", help="cluster snapshot JSON")
    p.add_argument("--manifest", help="manifest supplying headings for class ordering")
    p.add_argument("--before")
    p.add_argument("--after")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_analyze)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CliError as exc:
        print(f"mutualvpr: error: {exc}", file=sys.stderr)
        return exc.code
    except (ParameterError, ManifestParseError) as exc:
        print(f"mutualvpr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, GenerationError, NumericError) as exc:
        print(f"mutualvpr: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return 0


if __name__ == "__main__":
    sys.exit(main())
