"""Command-line pipeline: synth, train, embed, baseline, cluster, project, report, verify.

Every option can also come from an INI file passed with ``--config``; keys in
``[run]`` apply to all subcommands, keys in ``[<subcommand>]`` to that one,
and command-line flags override both. Keys are option names with dashes
(``batch-size``) or underscores (``batch_size``).

Exit codes: 0 success, 1 invalid usage or configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys

import numpy as np

from . import analysis, projection, verify
from .data import (
    MODALITIES,
    Split,
    StandardizeStats,
    SynthSpec,
    fit_dataset_stats,
    load_manifest,
    read_labels,
    read_matrix,
    save_dataset,
    standardize_dataset,
    synth_triplets,
    write_labels,
    write_npy,
)
from .exceptions import ConfigError, MmaeError, ValidationError
from .model import MmaeConfig, embed, load_checkpoint, mmae_init, save_checkpoint, train

MANIFEST = "MANIFEST.json"


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage().strip()}")


def _ints(text):
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _floats(text):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _names(text):
    return [v.strip() for v in str(text).split(",") if v.strip()]


# ---------------------------------------------------------------------------
# Output helpers


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


_PATH_KEYS = {"out", "data", "checkpoint", "embeddings", "labels", "overlay", "inputs", "config"}


def _run_digest(args, inputs=()) -> str:
    """Digest of non-path options plus the content of every input file."""
    opts = {k: v for k, v in sorted(vars(args).items())
            if k not in _PATH_KEYS and not k.startswith("_") and k != "command"}
    h = hashlib.sha256(json.dumps(opts, sort_keys=True, default=str).encode())
    for path in inputs:
        h.update(_sha256(path).encode())
    return h.hexdigest()[:16]


def _manifest_inputs(path) -> list:
    """The manifest itself plus every array file it references."""
    ini = configparser.ConfigParser()
    ini.read(path)
    base = os.path.dirname(os.path.abspath(path))
    files = [path]
    for section in ini.sections():
        files += [os.path.join(base, v) for k, v in sorted(ini[section].items())
                  if k in ("image", "audio", "text", "labels")]
    return [f for f in files if os.path.exists(f)]


def _header(args, inputs=()) -> str:
    return f"mmae {args.command} seed={args.seed} config={_run_digest(args, inputs)}"


def _record_outputs(out_dir, stage, seed, paths) -> None:
    """Merge produced files into ``MANIFEST.json`` with their sha256 digests."""
    manifest_path = os.path.join(out_dir, MANIFEST)
    entries = {}
    if os.path.exists(manifest_path):
        with open(manifest_path) as fh:
            entries = json.load(fh).get("files", {})
    for p in paths:
        entries[os.path.relpath(p, out_dir)] = {"sha256": _sha256(p), "stage": stage, "seed": seed}
    with open(manifest_path, "w", newline="\n") as fh:
        json.dump({"files": entries}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) in (None, [], "")]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise ConfigError(f"{args.command}: missing required option(s) {flags}")


def _out_dir(args) -> str:
    _require(args, "out")
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _stats_from_checkpoint(net):
    stats = {}
    for m in MODALITIES:
        mean, std = net.extras.get(f"{m.value}.mean"), net.extras.get(f"{m.value}.std")
        if mean is None or std is None:
            return None
        stats[m] = StandardizeStats(mean, std)
    return stats


def _load_standardized(manifest, splits):
    """Load splits and standardize them with train-split statistics when available."""
    names = set(splits)
    data = load_manifest(manifest)
    missing = [s for s in names if Split(s) not in data]
    if missing:
        raise ConfigError(f"{manifest}: no split(s) {', '.join(missing)}")
    shared = fit_dataset_stats(data[Split.TRAIN]) if Split.TRAIN in data else None
    out = {}
    for s in splits:
        d = data[Split(s)]
        out[Split(s)] = standardize_dataset(d, shared if shared is not None else fit_dataset_stats(d))
    return out


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args):
    out = _out_dir(args)
    if len(args.dims) != 3:
        raise ConfigError("--dims needs three values (image,audio,text)")
    spec = SynthSpec(args.classes, args.per_class, tuple(args.dims), args.separation, args.noise,
                     args.seed)
    datasets = {Split(s): synth_triplets(spec, s) for s in args.splits}
    path = save_dataset(out, datasets)
    produced = [path] + [os.path.join(out, f"{s.value}_{m}.npy") for s in datasets
                         for m in ("image", "audio", "text", "labels")]
    _record_outputs(out, "synth", args.seed, produced)
    print(f"wrote {len(datasets)} split(s) of {spec.n_classes * spec.samples_per_class} rows to {path}")


def _mmae_config(args, dims) -> MmaeConfig:
    return MmaeConfig(
        input_dims=dims, latent_dim=args.latent_dim, hidden_sizes=tuple(args.hidden),
        loss_weights=tuple(args.weights), fusion=args.fusion, align_weight=args.align_weight,
        reconstruction=args.reconstruction, learning_rate=args.lr, batch_size=args.batch_size,
        epochs=args.epochs, seed=args.seed, dtype=args.dtype,
    )


def cmd_train(args):
    _require(args, "data")
    out = _out_dir(args)
    raw = load_manifest(args.data, [Split.TRAIN])[Split.TRAIN]
    stats = fit_dataset_stats(raw)
    data = standardize_dataset(raw, stats)
    cfg = _mmae_config(args, data.dims)
    if len(cfg.loss_weights) != 3:
        raise ConfigError("--weights needs three values")

    def progress(rec):
        if not args.quiet:
            print(f"epoch {rec.epoch:4d} total={rec.loss.total:.6f}", file=sys.stderr)

    net, history = train(mmae_init(cfg), data, cfg, callback=progress)
    for m, s in stats.items():
        net.extras[f"{m.value}.mean"] = s.mean
        net.extras[f"{m.value}.std"] = s.std
    ckpt = os.path.join(out, "mmae.ckpt")
    save_checkpoint(net, ckpt)
    hist = os.path.join(out, "history.csv")
    history.to_csv(hist, _header(args, _manifest_inputs(args.data)))
    _record_outputs(out, "train", args.seed, [ckpt, hist])
    print(f"final loss {history.totals[-1]:.6f} after {cfg.epochs} epochs; wrote {ckpt}")


def cmd_embed(args):
    _require(args, "checkpoint", "data")
    out = _out_dir(args)
    net = load_checkpoint(args.checkpoint)
    stats = _stats_from_checkpoint(net)
    data = load_manifest(args.data, args.splits)
    if stats is None:
        fit_on = data[Split.TRAIN] if Split.TRAIN in data else next(iter(data.values()))
        stats = fit_dataset_stats(fit_on)
    produced = []
    for split, d in data.items():
        d = standardize_dataset(d, stats)
        for source in ("fused", "image", "audio", "text"):
            path = os.path.join(out, f"{split.value}_{source}.npy")
            write_npy(path, embed(net, d, source))
            produced.append(path)
        path = os.path.join(out, f"{split.value}_labels.npy")
        write_labels(path, d.labels)
        produced.append(path)
    _record_outputs(out, "embed", net.config.seed, produced)
    print(f"wrote embeddings for {', '.join(s.value for s in data)}")


def _kmeans_cfg(args, k=1):
    return analysis.KMeansConfig(k=k, n_restarts=args.restarts, max_iter=args.max_iter, seed=args.seed)


def cmd_baseline(args):
    _require(args, "data")
    out = _out_dir(args)
    d = _load_standardized(args.data, [args.split])[Split(args.split)]
    if len(args.pca_dims) != 3 or len(args.fusion_weights) != 3:
        raise ConfigError("--pca-dims and --fusion-weights need three values")
    cfg = _kmeans_cfg(args)
    rows = []
    for m, dim in zip(MODALITIES, args.pca_dims):
        X = d.modality(m).values
        dim = min(dim, X.shape[1], X.shape[0] - 1)
        Z = analysis.PCA(dim).fit_transform(X)
        for rep in analysis.grid_report(Z, d.labels, args.k, cfg):
            rows.append(("single-pca", m.value, rep, args.seed))
    fused = analysis.fuse_concat(*d.arrays, analysis.FusionWeights(*args.fusion_weights)).values
    dim = min(args.fusion_dim, fused.shape[1], fused.shape[0] - 1)
    Z = analysis.PCA(dim).fit_transform(fused)
    for rep in analysis.grid_report(Z, d.labels, args.k, cfg):
        rows.append(("fusion-pca", "concat", rep, args.seed))
    path = os.path.join(out, "baseline.csv")
    analysis.write_reports_csv(path, rows, _header(args, _manifest_inputs(args.data)))
    _record_outputs(out, "baseline", args.seed, [path])
    print(f"wrote {len(rows)} rows to {path}")


def cmd_cluster(args):
    _require(args, "embeddings", "labels")
    out = _out_dir(args)
    labels = read_labels(args.labels)
    rows = []
    for path in args.embeddings:
        X = read_matrix(path)
        source = os.path.splitext(os.path.basename(path))[0]
        for rep in analysis.grid_report(X, labels, args.k, _kmeans_cfg(args)):
            rows.append((args.method, source, rep, args.seed))
    path = os.path.join(out, "cluster.csv")
    analysis.write_reports_csv(path, rows, _header(args, list(args.embeddings) + [args.labels]))
    _record_outputs(out, "cluster", args.seed, [path])
    print(f"wrote {len(rows)} rows to {path}")


def cmd_project(args):
    _require(args, "labels")
    if not args.embeddings and not args.overlay:
        raise ConfigError("project: give --embeddings and/or --overlay IMAGE AUDIO TEXT")
    out = _out_dir(args)
    labels = read_labels(args.labels)
    jobs = []
    if args.embeddings:
        name = os.path.splitext(os.path.basename(args.embeddings))[0]
        jobs.append((name, read_matrix(args.embeddings), labels, labels, name, [args.embeddings]))
    if args.overlay:
        mats = [read_matrix(p) for p in args.overlay]
        X, tags = projection.overlay(*mats)
        jobs.append(("overlay", X, np.tile(labels, 3), tags, tags, list(args.overlay)))
    tcfg = projection.TsneConfig(perplexity=args.perplexity, n_iter=args.iters, seed=args.seed)
    produced = []
    for name, X, lab, colour_by, source, inputs in jobs:
        header = _header(args, inputs + [args.labels])
        for method in args.methods:
            if method == "tsne":
                proj = projection.tsne(X, tcfg)
            elif method == "pca":
                proj = projection.pca2d(X)
            else:
                raise ConfigError(f"unknown projection method {method!r}")
            svg = os.path.join(out, f"{name}_{method}.svg")
            csv = os.path.join(out, f"{name}_{method}.csv")
            projection.emit_scatter(proj, colour_by, svg, title=f"{name} ({method})")
            projection.write_coords_csv(csv, proj, lab, source, header)
            produced += [svg, csv]
    _record_outputs(out, "project", args.seed, produced)
    print(f"wrote {len(produced)} files to {out}")


def _read_report(path):
    seeds, header, rows = set(), None, []
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                for tok in line[1:].split():
                    if tok.startswith("seed="):
                        seeds.add(tok[5:])
            elif header is None:
                header = line.split(",")
            elif line:
                rows.append(dict(zip(header, line.split(","))))
    for r in rows:
        if "seed" in r:
            seeds.add(r["seed"])
    return header, rows, seeds


def cmd_report(args):
    _require(args, "inputs")
    out = _out_dir(args)
    merged, seeds = [], set()
    for path in args.inputs:
        header, rows, s = _read_report(path)
        if header is None or not set(analysis.REPORT_COLUMNS) <= set(header):
            raise ConfigError(f"{path}: not a cluster report CSV")
        merged.extend(rows)
        seeds |= s
    if len(seeds) > 1:
        raise ConfigError(f"refusing to merge reports from different seeds: {sorted(seeds)}")
    lines = [f"# mmae report seed={next(iter(seeds), '')} config={_run_digest(args, args.inputs)}",
             ",".join(analysis.REPORT_COLUMNS)]
    lines += [",".join(r[c] for c in analysis.REPORT_COLUMNS) for r in merged]
    path = os.path.join(out, "summary.csv")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    _record_outputs(out, "report", args.seed, [path])
    print(f"merged {len(merged)} rows into {path}")


def cmd_verify(args):
    results = verify.run_all()
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 2 if failed else 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mmae", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(_func=func)
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--seed", type=int, default=42)
        return p

    p = add("synth", cmd_synth, "write a synthetic aligned dataset")
    p.add_argument("--out")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--dims", type=_ints, default=[50, 1024, 768])
    p.add_argument("--separation", type=float, default=10.0)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--splits", type=_names, default=["train", "test"])

    p = add("train", cmd_train, "train the autoencoder; writes mmae.ckpt and history.csv")
    p.add_argument("--data", help="dataset manifest")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--latent-dim", type=int, default=128)
    p.add_argument("--hidden", type=_ints, default=[128, 128])
    p.add_argument("--weights", type=_floats, default=[1.0, 1.0, 1.0])
    p.add_argument("--fusion", choices=("mean", "image", "audio", "text"), default="mean")
    p.add_argument("--align-weight", type=float, default=0.0)
    p.add_argument("--reconstruction", choices=("mean", "sum"), default="mean")
    p.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    p.add_argument("--quiet", action="store_true")

    p = add("embed", cmd_embed, "extract fused and per-modality latents")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--splits", type=_names, default=None)
    p.add_argument("--out")

    def kmeans_opts(p):
        p.add_argument("--k", type=_ints, default=[30, 40, 42, 50, 60])
        p.add_argument("--restarts", type=int, default=10)
        p.add_argument("--max-iter", type=int, default=300)

    p = add("baseline", cmd_baseline, "single-modality PCA and fusion-PCA K-Means baselines")
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("--pca-dims", type=_ints, default=[50, 256, 256])
    p.add_argument("--fusion-weights", type=_floats, default=[1.0, 1.0, 1.0])
    p.add_argument("--fusion-dim", type=int, default=50)
    p.add_argument("--out")
    kmeans_opts(p)

    p = add("cluster", cmd_cluster, "K-Means grid report for embedding files")
    p.add_argument("--embeddings", nargs="+")
    p.add_argument("--labels")
    p.add_argument("--method", default="mmae")
    p.add_argument("--out")
    kmeans_opts(p)

    p = add("project", cmd_project, "t-SNE / PCA scatter plots of embeddings")
    p.add_argument("--embeddings")
    p.add_argument("--overlay", nargs=3, metavar=("IMAGE", "AUDIO", "TEXT"))
    p.add_argument("--labels")
    p.add_argument("--methods", type=_names, default=["tsne", "pca"])
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--out")

    p = add("report", cmd_report, "merge cluster report CSVs into summary.csv")
    p.add_argument("--inputs", nargs="+")
    p.add_argument("--out")

    add("verify", cmd_verify, "run gradient checks and metric oracles")
    return parser


def _apply_config(parser, argv, args):
    """Re-parse with defaults taken from the ``--config`` file."""
    ini = configparser.ConfigParser()
    try:
        with open(args.config) as fh:
            ini.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{args.config}: {exc}") from None
    values = {}
    for section in ("run", args.command):
        if ini.has_section(section):
            values.update({k.replace("-", "_"): v for k, v in ini[section].items()})
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, text in values.items():
        action = actions.get(key)
        if action is None:
            if ini.has_section(args.command) and key in ini[args.command]:
                raise ConfigError(f"{args.config}: unknown option {key!r} for {args.command}")
            continue
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = text.strip().lower() in ("1", "true", "yes", "on")
        elif action.nargs in ("+", 3):
            defaults[key] = text.split()
        elif action.type is not None:
            try:
                defaults[key] = action.type(text)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise ConfigError(f"{args.config}: bad value for {key}: {exc}") from None
        else:
            defaults[key] = text
        if action.choices is not None and defaults[key] not in action.choices:
            raise ConfigError(f"{args.config}: {key} must be one of {action.choices}")
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def run_cli(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    command = None
    try:
        args = parser.parse_args(argv)
        command = args.command
        if command is None:
            raise UsageError(parser.format_usage().strip())
        if args.config:
            args = _apply_config(parser, argv, args)
        status = args._func(args)
        return int(status or 0)
    except ValidationError as exc:
        print(f"error stage={command or '-'} kind={type(exc).__name__} message={json.dumps(str(exc))}",
              file=sys.stderr)
        return 1
    except (MmaeError, OSError, ArithmeticError, ValueError, MemoryError) as exc:
        print(f"error stage={command or '-'} kind={type(exc).__name__} message={json.dumps(str(exc))}",
              file=sys.stderr)
        return 2


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
