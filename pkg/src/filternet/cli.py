"""
Command line entry points.

Hyperparameters come from config files; flags only carry paths, folds and
seeds.  Exit codes: 0 success, 1 failed check, 2 usage or configuration
error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .checks import (EDGE_TOL, LAYER_TOL, NETWORK_TOL, gradcheck_edge_gate, gradcheck_layers,
                     gradcheck_network)
from .data.io import ManifestEntry, write_manifest, write_volume
from .data.phantom import PhantomSpec, generate_phantom, parse_phantom_spec
from .errors import (ConfigurationError, DegenerateInputError, DomainError, FileFormatError,
                     LocalizationError, NumericError)
from .evaluation import (REFERENCE_VARIANT, report, write_flagged, write_metrics,
                         write_plot_data, write_summary)
from .experiment import (crossval, evaluate_model, load_legs, plan_for, preprocess_manifest,
                         run_label, train_fold)
from .models import (VARIANTS, NetworkSpec, load_checkpoint, parameter_count,
                     read_checkpoint_spec, receptive_field)
from .training import format_config, load_config

log = logging.getLogger("filternet")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3
RUN_MANIFEST = "run_manifest.json"


class CheckFailed(Exception):
    pass


# ---------------------------------------------------------------------------
# run manifest


def content_hash(paths) -> str:
    """sha256 over (relative name, bytes) of every input file, in sorted order."""
    h = hashlib.sha256()
    files = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            files += [(f.relative_to(p).as_posix(), f) for f in sorted(p.rglob("*")) if f.is_file()]
        elif p.is_file():
            files.append((p.name, p))
    for name, f in sorted(files, key=lambda t: t[0]):
        h.update(name.encode() + b"\0")
        h.update(f.read_bytes())
    return h.hexdigest()


def write_run_manifest(out_dir, command: str, seed, config=None, inputs=()) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "config": None if config is None else str(config),
        "seed": seed,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "output_dir": str(out.resolve()),
        "input_hash": content_hash([p for p in inputs if p is not None]),
        "version": __version__,
    }
    path = out / RUN_MANIFEST
    path.write_text(json.dumps(record, indent=2) + "\n")
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_phantom(args) -> int:
    overrides = {} if args.seed is None else {"seed": args.seed}
    spec = (parse_phantom_spec(Path(args.spec).read_text(), **overrides) if args.spec
            else PhantomSpec(**overrides))
    if args.count < 0:
        raise ConfigurationError("--count must be >= 0")
    out = Path(args.out)
    write_run_manifest(out, "phantom", spec.seed, args.spec, [args.spec])
    entries = []
    for i in range(args.count):
        ph = generate_phantom(spec, i)
        img, lab = f"scan_{i:03d}.mvl", f"scan_{i:03d}_label.mvl"
        write_volume(out / img, ph.image, ph.spacing)
        write_volume(out / lab, ph.labels, ph.spacing)
        entries.append(ManifestEntry(img, ph.subject_id, "both",
                                     "diseased" if ph.diseased else "healthy", lab))
    write_manifest(out / "manifest.csv", entries)
    print(f"wrote {len(entries)} scans to {out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    manifest = Path(args.inp) / "manifest.csv"
    if not manifest.is_file():
        raise FileNotFoundError(f"no manifest.csv in {args.inp}")
    write_run_manifest(args.out, "preprocess", None, None, [args.inp])
    entries, failures = preprocess_manifest(manifest, args.out)
    for sid, reason in failures:
        print(f"skipped {sid}: {reason}", file=sys.stderr)
    print(f"wrote {len(entries)} legs to {args.out}")
    if failures and not entries:
        raise CheckFailed("every scan failed leg localization")
    return EXIT_OK


def _config(args):
    overrides = {} if getattr(args, "seed", None) is None else {"seed": args.seed}
    return load_config(args.config, overrides)


def _data(args) -> dict:
    manifest = Path(args.data) / "manifest.csv"
    if not manifest.is_file():
        raise FileNotFoundError(f"no manifest.csv in {args.data}")
    return load_legs(manifest)


def cmd_train(args) -> int:
    cfg = _config(args)
    subjects = _data(args)
    plan_for(cfg, subjects).test_subjects(args.fold)  # validates the fold
    out = Path(args.out)
    write_run_manifest(out, f"train --fold {args.fold}", cfg.seed, args.config,
                       [args.config, args.data])
    (out / "config.txt").write_text(format_config(cfg))
    res = train_fold(cfg, subjects, args.fold, out)
    last = res.log[-1] if res.log else None
    print(f"trained {cfg.variant} fold {args.fold}: {len(res.log)} steps"
          + ("" if last is None else f", final L={last.L:.5f}"))
    return EXIT_OK


def _check_spec(ckpt_spec: NetworkSpec, cfg) -> None:
    want = cfg.network
    fields = ("variant", "base_channels", "num_classes", "in_channels")
    if want.has_gate:
        fields += ("gate_mode",)
    bad = [f for f in fields if getattr(ckpt_spec, f) != getattr(want, f)]
    if bad:
        raise ConfigurationError(
            "checkpoint does not match config: "
            + ", ".join(f"{f} {getattr(ckpt_spec, f)!r} != {getattr(want, f)!r}" for f in bad))


def cmd_eval(args) -> int:
    cfg = _config(args)
    spec = read_checkpoint_spec(args.checkpoint)
    _check_spec(spec, cfg)
    subjects = _data(args)
    out = Path(args.out)
    write_run_manifest(out, f"eval --fold {args.fold}", cfg.seed, args.config,
                       [args.config, args.data, args.checkpoint])
    model = load_checkpoint(args.checkpoint, cfg.np_dtype)
    post = args.post_process or cfg.post_process
    base = replace(cfg, post_process="none")
    res = evaluate_model(model, base, subjects, args.fold, post_process=False)
    write_metrics(res.records, out / "metrics.csv")
    flagged = list(res.flagged)
    if post == "lcc":
        lcc = evaluate_model(model, base, subjects, args.fold, post_process=True)
        write_metrics(lcc.records, out / "metrics_lcc.csv")
        flagged += lcc.flagged
    write_flagged(flagged, out / "flagged.csv")
    print(f"evaluated {len({r.subject_id for r in res.records})} subjects, fold {args.fold}")
    return EXIT_OK


def cmd_crossval(args) -> int:
    cfgs = [load_config(c, {} if args.seed is None else {"seed": args.seed}) for c in args.config]
    labels = [run_label(c) for c in cfgs]
    if len(set(labels)) != len(labels):
        raise ConfigurationError(f"configs produce duplicate run labels {labels}")
    subjects = _data(args)
    out = Path(args.out)
    write_run_manifest(out, "crossval", [c.seed for c in cfgs], ",".join(args.config),
                       list(args.config) + [args.data])
    records, flagged = [], []
    for cfg, label in zip(cfgs, labels):
        res = crossval(cfg, subjects, out / label)
        records += res.records
        flagged += [(label, s, r) for s, r in res.flagged]
        print(f"{label}: {len({r.subject_id for r in res.records})} subjects evaluated")
    write_metrics(records, out / "metrics.csv")
    rows = report(records, REFERENCE_VARIANT)
    write_summary(rows, out / "summary.csv")
    write_plot_data(rows, out / "plot_data.csv")
    with open(out / "flagged.csv", "w") as fh:
        fh.write("variant,subject_id,reason\n")
        fh.writelines(f"{v},{s},{r}\n" for v, s, r in flagged)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ok = True
    if args.target == "edge_gate":
        errs = gradcheck_edge_gate(seed=args.seed)
        worst = max(errs)
        print(f"edge_gate sigma: {len(errs)} pairs, max relative error {worst:.3e} (tol {EDGE_TOL:g})")
        ok = worst <= EDGE_TOL
    elif args.target == "layers":
        for name, err in gradcheck_layers(args.seed).items():
            print(f"{name}: {err:.3e}")
            ok &= err <= LAYER_TOL
        print(f"tolerance {LAYER_TOL:g}")
    else:
        for v in args.variant or VARIANTS:
            err = gradcheck_network(v, seed=args.seed)
            print(f"network {v}: {err:.3e}")
            ok &= err <= NETWORK_TOL
        print(f"tolerance {NETWORK_TOL:g}")
    if not ok:
        raise CheckFailed("gradient check exceeded tolerance")
    return EXIT_OK


def cmd_rf(args) -> int:
    rf = receptive_field(NetworkSpec(args.variant, args.base_channels))
    ref = receptive_field(NetworkSpec("UNet", args.base_channels))
    print(f"{args.variant} receptive field x={rf[0]} y={rf[1]} z={rf[2]}")
    print(f"delta vs UNet x={rf[0] - ref[0]} y={rf[1] - ref[1]} z={rf[2] - ref[2]}")
    return EXIT_OK


def cmd_params(args) -> int:
    print(parameter_count(NetworkSpec(args.variant, args.base_channels)))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="filternet", description=__doc__.strip().splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="generate synthetic two-leg scans")
    s.add_argument("--spec", help="phantom spec file (key = value)")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("preprocess", help="standardize scans into single-leg volumes")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train one cross-validation fold")
    s.add_argument("--config", required=True)
    s.add_argument("--fold", type=int, required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on the held-out subjects of a fold")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--fold", type=int, required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--post-process", choices=("none", "lcc"))
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("crossval", help="train and evaluate all folds for one or more configs")
    s.add_argument("--config", required=True, nargs="+")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_crossval)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--target", choices=("edge_gate", "layers", "network"), required=True)
    s.add_argument("--variant", choices=VARIANTS, action="append")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    for name, func, text in (("rf", cmd_rf, "receptive field per axis"),
                             ("params", cmd_params, "exact trainable parameter count")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--variant", choices=VARIANTS, required=True)
        s.add_argument("--base-channels", type=int, default=16)
        s.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except FileFormatError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigurationError, DomainError, DegenerateInputError, LocalizationError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
