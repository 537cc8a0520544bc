"""``monoprobe`` command line: synth, pretrain, probe, finetune, report.

Exit codes: 0 success, 1 validation error, 2 runtime or training error,
3 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import config as C
from . import dataset as D
from . import pretext as P
from . import probe as PR
from .encoder import build_encoder, load_checkpoint, save_checkpoint
from .errors import FormatError, MonoprobeError, ValidationError

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3


def _say(*parts):
    print(*parts, flush=True)


def _write_json(obj, path):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


# --------------------------------------------------------------------------
# shared plumbing
# --------------------------------------------------------------------------


def _sources(cfg):
    paths = cfg["data"]["sources"]
    if not paths:
        raise ValidationError("data.sources: at least one source image path is required")
    return D.SourceSet.from_paths(paths)


def _dataset(cfg, sources=None):
    sources = sources or _sources(cfg)
    return D.SynthDataset(sources, cfg["data"]["d"], cfg["seeds"]["data_seed"], C.augment_config(cfg))


def _cifar(section, split):
    directory = section.get("cifar_dir") or D.default_cifar_dir()
    limit = section.get("train_limit") if split == "train" else section.get("val_limit")
    x, y = D.load_cifar(directory, split, limit)
    return D.cifar_to_nchw(x), y


def _encoder_for_eval(cfg, section):
    """(network, method label, N) from a checkpoint, or a random-init baseline."""
    path = section.get("checkpoint")
    if not path:
        net = build_encoder(C.encoder_config(cfg, 4), cfg["seeds"]["model_seed"])
        return net, "random", "-"
    net = load_checkpoint(path)
    want = C.encoder_config(cfg, net.config.num_classes).to_dict()
    have = net.config.to_dict()
    diff = {k: (have[k], want[k]) for k in ("variant", "input_size", "widths", "batchnorm") if have[k] != want[k]}
    if diff:
        raise FormatError(f"{path}: checkpoint does not match the encoder config (stored, requested): {diff}")
    label = net.meta.get("run_name") or net.meta.get("task") or Path(path).parent.name
    return net, label, net.meta.get("n_sources", "-")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_synth(cfg, args):
    ds = _dataset(cfg)
    checksum = D.dataset_checksum(ds, threads=cfg["threads"])
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    C.save_config(cfg, out / "config.json")
    _say(f"d={ds.d} N={ds.n_sources} checksum={checksum}")
    if args.dump:
        rng = np.random.default_rng(cfg["seeds"]["data_seed"])
        picks = np.sort(rng.choice(ds.d, min(args.dump, ds.d), replace=False))
        paths = D.dump_samples(ds, out / "dump", len(picks), indices=picks)
        _say(f"wrote {len(paths)} samples to {out / 'dump'}")
    _write_json({"d": ds.d, "n_sources": ds.n_sources, "checksum": checksum}, out / "synth.json")
    return EXIT_OK


def _pretrain_one(cfg, run_dir: Path, run_name, sources):
    task = cfg["pretext"]["task"]
    hyper = C.pretext_hyper(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    C.save_config(cfg, run_dir / "config.json")
    t0 = time.perf_counter()
    ds = _dataset(cfg, sources)
    data = D.materialize(ds, range(ds.d), cfg["threads"])
    checksum = D.array_checksum(data)
    classes = 4 if task == "rotnet" else hyper.clusters
    net = build_encoder(C.encoder_config(cfg, classes), cfg["seeds"]["model_seed"])
    net.meta.update(task=task, run_name=run_name or task, n_sources=ds.n_sources, d=ds.d, dataset_sha256=checksum)
    ckpt = run_dir / "model.ckpt"
    rows = []

    def on_epoch(n, row):
        n.meta["epoch"] = row["epoch"]
        save_checkpoint(n, ckpt)
        rows.append(row)
        P.write_stats_csv(rows, run_dir / "train.csv")
        _say(f"[{run_name or task}] epoch {row['epoch']} " + " ".join(
            f"{k}={v:.4f}" for k, v in row.items() if k != "epoch" and isinstance(v, float)
        ))

    try:
        if task == "rotnet":
            P.train_rotnet(data, net, hyper, on_epoch)
        else:
            P.deepcluster_train(data, net, hyper.clusters, hyper, on_epoch)
    except MonoprobeError as exc:
        kept = f"; last good checkpoint {ckpt}" if ckpt.exists() else ""
        exc.args = (f"{exc}{kept}",)
        raise
    if not rows:  # zero epochs still yields a loadable checkpoint
        save_checkpoint(net, ckpt)
        P.write_stats_csv(rows, run_dir / "train.csv")
    digest = save_checkpoint(net, ckpt)
    info = {
        "task": task,
        "d": ds.d,
        "n_sources": ds.n_sources,
        "dataset_sha256": checksum,
        "checkpoint_sha256": digest,
        "epochs": len(rows),
        "wall_clock": time.perf_counter() - t0,
    }
    _write_json(info, run_dir / "run.json")
    _say(f"[{run_name or task}] dataset={checksum} checkpoint={digest}")
    return info


def cmd_pretrain(cfg, args):
    if cfg["pretext"]["task"] == "deepcluster" and cfg["pretext"]["clusters"] > cfg["data"]["d"]:
        raise ValidationError(
            f"pretext.clusters={cfg['pretext']['clusters']} exceeds data.d={cfg['data']['d']}"
        )
    sources = _sources(cfg)
    out = Path(cfg["out_dir"])
    if args.ablate:
        for name, sub in C.ablation_matrix(cfg):
            _pretrain_one(sub, out / name, name, sources)
    else:
        _pretrain_one(cfg, out, None, sources)
    return EXIT_OK


def cmd_probe(cfg, args):
    t0 = time.perf_counter()
    section = cfg["probe"]
    net, label, n_sources = _encoder_for_eval(cfg, section)
    taps = section.get("taps") or list(net.taps)
    xtr, ytr = _cifar(section, "train")
    xva, yva = _cifar(section, "test")
    accs = {}
    for tap in taps:
        spec = C.probe_spec(cfg, tap)
        probe = PR.train_probe(net, tap, xtr, ytr, spec, num_classes=10)
        accs[tap] = PR.evaluate_probe(probe, net, xva, yva)
        _say(f"[{section.get('method') or label}] {tap}: {accs[tap]:.2f}%")
    report = PR.ProbeReport(
        method=section.get("method") or label,
        n_sources=n_sources,
        accuracies=accs,
        protocol="single-crop",
        seeds=dict(cfg["seeds"]),
        config=cfg,
        wall_clock=time.perf_counter() - t0,
    )
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    C.save_config(cfg, out / "config.json")
    report.save_json(out / "report.json")
    report.save_csv(out / "report.csv")
    return EXIT_OK


def cmd_finetune(cfg, args):
    section = cfg["finetune"]
    net, label, n_sources = _encoder_for_eval(cfg, section)
    xtr, ytr = _cifar(section, "train")
    xva, yva = _cifar(section, "test")
    k = int(section["k_frozen"])
    acc, model = PR.finetune_frozen(net, k, xtr, ytr, xva, yva, C.finetune_hyper(cfg), num_classes=10)
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    C.save_config(cfg, out / "config.json")
    _write_json(
        {"method": label, "n_sources": n_sources, "k_frozen": k, "accuracy": acc, "seeds": cfg["seeds"]},
        out / "finetune.json",
    )
    save_checkpoint(model, out / "finetuned.ckpt")
    _say(f"[{label}] finetune k_frozen={k}: {acc:.2f}%")
    return EXIT_OK


def collect_reports(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory}: not a directory")
    found = sorted(directory.rglob("report.json"))
    if not found:
        raise FileNotFoundError(f"{directory}: no runs found")
    reports = []
    for path in found:
        if not (path.parent / "config.json").exists():
            raise ValidationError(f"{path}: report has no config.json next to it")
        reports.append(PR.ProbeReport.load_json(path))
    return reports


def report_table(reports):
    """Header plus one row per report; random-init baselines come first."""
    taps = []
    for r in reports:
        taps += [t for t in r.accuracies if t not in taps]
    ordered = sorted(reports, key=lambda r: (r.method != "random", r.method))
    return [["method", "N"] + taps] + [r.csv_row(taps) for r in ordered]


def cmd_report(cfg, args):
    directory = args.directory or cfg["out_dir"]
    rows = report_table(collect_reports(directory))
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    for r in rows:
        _say("  ".join(str(v).ljust(w) for v, w in zip(r, widths)))
    with open(Path(directory) / "table.csv", "w", newline="") as f:
        csv.writer(f).writerows(rows)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "finetune": cmd_finetune,
    "report": cmd_report,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="monoprobe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config value")
        p.add_argument("--threads", type=int, help="sample-generation worker threads")
        p.add_argument("--out", help="output directory (same as --set out_dir=...)")
        if name == "synth":
            p.add_argument("--dump", type=int, default=0, metavar="N", help="write N random samples as PNG")
        if name == "pretrain":
            p.add_argument("--ablate", action="store_true", help="run all 8 scale/rotation/jitter combinations")
        if name == "report":
            p.add_argument("directory", nargs="?", help="directory holding probe runs")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        overrides = list(args.set)
        if args.threads is not None:
            overrides.append(f"threads={args.threads}")
        if args.out is not None:
            overrides.append(f"out_dir={json.dumps(args.out)}")
        cfg = C.load_config(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except ValidationError as exc:
        print(f"monoprobe: validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FormatError, OSError) as exc:
        print(f"monoprobe: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except MonoprobeError as exc:
        print(f"monoprobe: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ArithmeticError, MemoryError) as exc:
        print(f"monoprobe: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
