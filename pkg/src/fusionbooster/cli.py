"""
Batch command line: ``fusionbooster <command> [--flag value ...]``.

Commands: synth, fuse, train, boost, eval, ablate, degradation-study.

Every command accepts ``--config FILE`` (flat ``key=value`` lines, ``#``
comments); explicit flags override the file, the file overrides defaults.
Each run writes its resolved settings and the tool version to
``run_config.txt`` in its output directory.

Exit status: 0 on success, 1 when an entry failed or a contract check did
not hold, 2 for usage errors, 3 when there was no data to process.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .backbones import DegradeSpec, degrade, parse_backbone
from .booster import (
    ABLATION_MODES,
    BoosterConfig,
    Triple,
    ablation_run,
    boost,
    degradation_study,
    train_ase,
    train_probe,
    train_source_ase,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CheckpointFormatError, ContractError, ManifestError, UnsupportedFormatError
from .imaging import (
    SCENARIOS,
    ManifestEntry,
    PairManifest,
    load_image,
    read_manifest,
    save_image,
    synth_pair,
    write_manifest,
)
from .metrics import METRIC_COLUMNS, METRIC_NAMES, MetricReport, compute_row, delta_table, evaluate

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_NO_DATA = 0, 1, 2, 3

_TRAIN_KEYS = ("k", "epochs", "batch", "lr", "patch", "patches_per_pair", "seed")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

def read_config(path):
    """Parse a flat ``key=value`` file. Keys may use dashes or underscores."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _resolve(args, parser_defaults):
    """Merge defaults, config file and explicit flags into ``args`` in place."""
    explicit = {k: v for k, v in vars(args).items() if v is not None}
    resolved = dict(parser_defaults)
    if getattr(args, "config", None):
        file_cfg = read_config(args.config)
        unknown = set(file_cfg) - set(parser_defaults)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        resolved.update(file_cfg)
    resolved.update(explicit)
    for key, value in resolved.items():
        setattr(args, key, value)
    return {k: resolved[k] for k in parser_defaults}


def _write_snapshot(directory, command, resolved):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"# fusionbooster {__version__}", f"command={command}", f"version={__version__}"]
    resolved = dict(resolved)
    if resolved.get("out") is not None:
        # stored relative to the run directory so identical runs give identical directories
        resolved["out"] = os.path.relpath(Path(resolved["out"]).resolve(), directory.resolve())
    lines += [f"{k}={v}" for k, v in sorted(resolved.items()) if k != "config" and v is not None]
    (directory / "run_config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _booster_config(args):
    vals = {k: getattr(args, k) for k in _TRAIN_KEYS if getattr(args, k, None) is not None}
    return BoosterConfig.from_dict(vals)


def _prepare_out(out, force):
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _find_image(directory, entry_id):
    for ext in (".pgm", ".png"):
        p = Path(directory) / f"{entry_id}{ext}"
        if p.exists():
            return p
    return Path(directory) / f"{entry_id}.pgm"


def _load_triples(manifest):
    triples = []
    for e in manifest.entries:
        if e.path_fused is None:
            raise ManifestError(e.id, "entry has no fused image path")
        a, b, f = load_image(e.path_a), load_image(e.path_b), load_image(e.path_fused)
        if not a.shape == b.shape == f.shape:
            raise ManifestError(e.id, f"dimension mismatch: A {a.shape}, B {b.shape}, fused {f.shape}")
        triples.append(Triple(a, b, f))
    return triples


def _pair_seed(seed, index):
    return int(np.random.SeedSequence([int(seed), index]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    try:
        h, w = (int(v) for v in str(args.size).lower().split("x"))
    except ValueError:
        raise UsageError(f"--size must look like HxW, got {args.size!r}") from None
    out = _prepare_out(args.out, args.force)
    entries = []
    for i in range(int(args.pairs)):
        a, b = synth_pair(_pair_seed(args.seed, i), args.scenario, h, w)
        eid = f"pair_{i:04d}"
        pa, pb = out / f"{eid}_a.pgm", out / f"{eid}_b.pgm"
        save_image(a, pa)
        save_image(b, pb)
        entries.append(ManifestEntry(eid, pa, pb))
    write_manifest(PairManifest(entries), out / "manifest.tsv")
    print(f"pairs={len(entries)}")
    print(f"manifest={out / 'manifest.tsv'}")
    return EXIT_OK


def cmd_fuse(args):
    backbone = parse_backbone(args.backbone)
    spec = DegradeSpec.parse(args.degrade, seed=int(args.seed)) if args.degrade else None
    manifest = read_manifest(args.manifest)
    if backbone.kind == "external":
        manifest.check_files(require_fused=True)
    out = _prepare_out(args.out, args.force)
    entries = []
    for i, e in enumerate(manifest.entries):
        a, b = load_image(e.path_a), load_image(e.path_b)
        if backbone.kind == "external":
            f = load_image(e.path_fused)
            if f.shape != a.shape:
                raise ManifestError(e.id, f"fused image {f.shape} does not match sources {a.shape}")
        else:
            f = backbone(a, b)
        if spec is not None and not spec.is_identity:
            f = degrade(f, DegradeSpec(spec.noise_sigma, spec.blur_k, spec.contrast, spec.seed + i))
        path = out / f"{e.id}.pgm"
        save_image(f, path)
        entries.append(ManifestEntry(e.id, e.path_a, e.path_b, path))
    write_manifest(PairManifest(entries), out / "manifest.tsv")
    print(f"fused={len(entries)}")
    print(f"manifest={out / 'manifest.tsv'}")
    return EXIT_OK


def _write_loss_csv(path, probe_trace, ase_trace):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["phase", "epoch", "loss_a", "loss_b", "loss"])
        for i, total in enumerate(probe_trace["loss_per"]):
            w.writerow(["probe", i + 1, repr(probe_trace["loss_per_a"][i]), repr(probe_trace["loss_per_b"][i]),
                        repr(total)])
        for i, loss in enumerate(ase_trace["loss_rec"]):
            w.writerow(["ase", i + 1, "", "", repr(loss)])


def cmd_train(args):
    cfg = _booster_config(args)
    manifest = read_manifest(args.manifest)
    manifest.check_files(require_fused=True)
    triples = _load_triples(manifest)
    log = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    probe_a, probe_b, ptrace = train_probe(triples, cfg, log=log)
    ase, atrace = train_ase(triples, probe_a, probe_b, cfg, log=log)
    ckpt = Path(args.out)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, probe_a, probe_b, ase, cfg, {**ptrace, **atrace})
    loss_csv = ckpt.with_name(ckpt.stem + "_losses.csv")
    _write_loss_csv(loss_csv, ptrace, atrace)
    print(f"checkpoint={ckpt}")
    print(f"loss_csv={loss_csv}")
    print(f"loss_per_first={ptrace['loss_per'][0]!r}")
    print(f"loss_per_final={ptrace['loss_per'][-1]!r}")
    print(f"loss_rec_first={atrace['loss_rec'][0]!r}")
    print(f"loss_rec_final={atrace['loss_rec'][-1]!r}")
    converged = ptrace["loss_per"][-1] < ptrace["loss_per"][0] and atrace["loss_rec"][-1] < atrace["loss_rec"][0]
    if not converged:
        print("status=not-converged")
        return EXIT_FAILED
    print("status=ok")
    return EXIT_OK


def _save_outputs(out, manifest, images):
    entries = []
    for e, img in zip(manifest.entries, images):
        path = out / f"{e.id}.pgm"
        save_image(img, path)
        entries.append(ManifestEntry(e.id, e.path_a, e.path_b, path))
    write_manifest(PairManifest(entries), out / "manifest.tsv")


def cmd_boost(args):
    ckpt = load_checkpoint(args.ckpt)
    k = int(args.k) if args.k is not None else ckpt.config.k
    manifest = read_manifest(args.manifest)
    manifest.check_files(require_fused=True)
    triples = _load_triples(manifest)
    out = _prepare_out(args.out, args.force)
    images, times = [], []
    for t in triples:
        start = time.perf_counter()
        images.append(boost(*ckpt.models, t.fused, t.a, t.b, k))
        times.append(time.perf_counter() - start)
    _save_outputs(out, manifest, images)
    with open(out / "timing.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "boost_time"])
        for e, s in zip(manifest.entries, times):
            w.writerow([e.id, repr(s)])
    total = sum(times)
    print(f"boosted={len(images)}")
    print(f"total_added_time=+{total:.2f}")
    return EXIT_OK


def _read_timing(directory):
    path = Path(directory) / "timing.csv"
    if not path.exists():
        return {}
    with open(path, newline="", encoding="utf-8") as fh:
        return {row["id"]: float(row["boost_time"]) for row in csv.DictReader(fh)}


def _variant_manifest(manifest, directory):
    if directory is None:
        return manifest
    return PairManifest([ManifestEntry(e.id, e.path_a, e.path_b, _find_image(directory, e.id))
                         for e in manifest.entries])


def _write_delta(path, rows, improved):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("id",) + METRIC_NAMES)
        for row in rows:
            w.writerow([row["id"]] + [repr(row[m]) for m in METRIC_NAMES])
        w.writerow(["improved_fraction"] + [repr(improved[m]) for m in METRIC_NAMES])


def cmd_eval(args):
    manifest = read_manifest(args.manifest, check_files=False)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fused = evaluate(_variant_manifest(manifest, args.fused),
                     _read_timing(args.fused) if args.fused else None)
    fused.to_csv(out / "metrics_fused.csv")
    reports = [fused]
    print("[fused]")
    print(fused.summary())
    if args.boosted:
        boosted = evaluate(_variant_manifest(manifest, args.boosted), _read_timing(args.boosted))
        boosted.to_csv(out / "metrics_boosted.csv")
        rows, improved = delta_table(fused, boosted)
        _write_delta(out / "delta.csv", rows, improved)
        reports.append(boosted)
        print("[boosted]")
        print(boosted.summary())
        print("[delta]")
        for m in METRIC_NAMES:
            print(f"{m}_improved={improved[m]!r}")
    if not manifest.entries:
        return EXIT_NO_DATA
    return EXIT_FAILED if any(r.status == "failed" for r in reports) else EXIT_OK


def _metric_report(ids, triples, images):
    return MetricReport([compute_row(i, t.a, t.b, img) for i, t, img in zip(ids, triples, images)])


def cmd_ablate(args):
    if args.mode not in ABLATION_MODES:
        raise UsageError(f"--mode must be one of {', '.join(ABLATION_MODES)}")
    manifest = read_manifest(args.manifest)
    manifest.check_files(require_fused=True)
    triples = _load_triples(manifest)
    out = _prepare_out(args.out, args.force)
    kwargs = {}
    k = int(args.k) if args.k is not None else BoosterConfig().k
    if args.mode == "full":
        if not args.ckpt:
            raise UsageError("--mode full needs --ckpt")
        ckpt = load_checkpoint(args.ckpt)
        kwargs["models"] = ckpt.models
        if args.k is None:
            k = ckpt.config.k
    elif args.mode == "a":
        backbone = parse_backbone(args.backbone)
        spec = DegradeSpec.parse(args.degrade, seed=int(args.seed)) if args.degrade else None
        if spec is None or spec.is_identity:
            kwargs["backbone"] = backbone
        else:
            counter = iter(range(len(triples)))

            def degraded(a, b):
                i = next(counter)
                return degrade(backbone(a, b), DegradeSpec(spec.noise_sigma, spec.blur_k, spec.contrast,
                                                           spec.seed + i))
            kwargs["backbone"] = degraded
    elif args.mode in ("c", "d"):
        cfg = _booster_config(args)
        kwargs["source_ase"], _ = train_source_ase(triples, cfg)
    images = ablation_run(args.mode, triples, k, **kwargs)
    _save_outputs(out, manifest, images)
    report = _metric_report(manifest.ids(), triples, images)
    report.to_csv(out / f"metrics_{args.mode}.csv")
    print(f"mode={args.mode}")
    print(report.summary())
    return EXIT_OK


def cmd_degradation_study(args):
    ckpt = load_checkpoint(args.ckpt)
    manifest = read_manifest(args.manifest)
    manifest.check_files(require_fused=True)
    triples = _load_triples(manifest)
    sigmas = [float(s) for s in str(args.levels).split(",") if s.strip()]
    if not sigmas:
        raise UsageError("--levels needs at least one noise level")
    levels = [DegradeSpec(s, int(args.blur), float(args.contrast), int(args.seed)) for s in sigmas]
    report = degradation_study(triples, levels, ckpt.probe_a, ckpt.probe_b)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["level", "noise_sigma", "blur_k", "contrast", "err_a", "err_b", "err"]
    with open(out / "degradation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in report.rows:
            w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols])
    print(f"rows={len(report.rows)}")
    print(f"spearman={report.spearman!r}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_train_flags(p, defaults):
    cfg = BoosterConfig()
    for key in _TRAIN_KEYS:
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None)
        defaults[key] = getattr(cfg, key)


def build_parser():
    parser = argparse.ArgumentParser(prog="fusionbooster", description="Boost the output of any image fusion method.")
    parser.add_argument("--version", action="version", version=f"fusionbooster {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    defaults = {}

    def add(name, func, flags):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None)
        d = {}
        for flag, default in flags:
            if flag == "force" or flag == "verbose":
                p.add_argument(f"--{flag}", action="store_const", const=True, default=None)
                d[flag] = False
            else:
                p.add_argument(f"--{flag.replace('_', '-')}", dest=flag, default=None)
                d[flag] = default
        p.set_defaults(func=func)
        defaults[name] = d
        return p, d

    p, d = add("synth", cmd_synth, [("scenario", None), ("pairs", 4), ("size", "128x128"), ("seed", 0),
                                    ("out", None), ("force", False)])
    p, d = add("fuse", cmd_fuse, [("backbone", "mean"), ("degrade", None), ("seed", 0), ("manifest", None),
                                  ("out", None), ("force", False)])
    p, d = add("train", cmd_train, [("manifest", None), ("out", None), ("verbose", False)])
    _add_train_flags(p, d)
    p, d = add("boost", cmd_boost, [("ckpt", None), ("manifest", None), ("out", None), ("k", None),
                                    ("force", False)])
    p, d = add("eval", cmd_eval, [("manifest", None), ("fused", None), ("boosted", None), ("out", ".")])
    p, d = add("ablate", cmd_ablate, [("mode", None), ("ckpt", None), ("manifest", None), ("out", None),
                                      ("backbone", "mean"), ("degrade", None), ("force", False)])
    _add_train_flags(p, d)
    p, d = add("degradation-study", cmd_degradation_study,
               [("ckpt", None), ("manifest", None), ("out", None), ("levels", "0,0.02,0.04,0.06,0.08"),
                ("blur", 0), ("contrast", 1.0), ("seed", 0)])
    return parser, defaults


_REQUIRED = {
    "synth": ("scenario", "out"),
    "fuse": ("manifest", "out"),
    "train": ("manifest", "out"),
    "boost": ("ckpt", "manifest", "out"),
    "eval": ("manifest",),
    "ablate": ("mode", "manifest", "out"),
    "degradation-study": ("ckpt", "manifest", "out"),
}


def main(argv=None):
    parser, defaults = build_parser()
    args = parser.parse_args(argv)
    try:
        resolved = _resolve(args, defaults[args.command])
        missing = [k for k in _REQUIRED[args.command] if getattr(args, k) in (None, "")]
        if missing:
            raise UsageError(f"missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
        if args.command == "synth" and args.scenario not in SCENARIOS:
            raise UsageError(f"unknown scenario {args.scenario!r}; valid scenarios: {', '.join(SCENARIOS)}")
        if args.command == "ablate" and args.mode not in ABLATION_MODES:
            raise UsageError(f"unknown mode {args.mode!r}; valid modes: {', '.join(ABLATION_MODES)}")
        run_dir = Path(args.out) if args.command not in ("train",) else Path(args.out).parent
        status = args.func(args)
        _write_snapshot(run_dir, args.command, resolved)
        return status
    except UsageError as exc:
        parser.error(str(exc))
    except (ContractError, ManifestError, CheckpointFormatError, UnsupportedFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
