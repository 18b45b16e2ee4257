"""Command line front end.

One subcommand per workflow stage: ``synth`` writes a synthetic corpus,
``normalize`` windows a single radiograph, ``train`` fits a model from a
manifest, ``eval`` scores a manifest with a checkpoint, ``agree`` audits
reader annotations, ``band`` calibrates and reports an uncertainty band,
and ``sweep`` retrains on nested training-set sizes.

Every command that writes takes ``--out``; when omitted, the ``CXRKIT_OUT``
environment variable supplies the directory. All outputs are deterministic
functions of the inputs and flags, so a rerun with the same arguments
reproduces every file byte for byte. Hyperparameters are echoed to
``config.json`` next to the outputs (paths are deliberately left out of the
echo so it reproduces too).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .agreement import agreement_report, confidence_categories
from .band import apply_band, band_report, calibrate_band
from .datakit import (NUM_REGIONS, ScoreTable, SyntheticSpec, generate_corpus,
                      load_manifest, read_annotations, read_image_png,
                      read_manifest, read_scores, write_corpus,
                      write_image_png, write_scores)
from .exceptions import CxrkitError, IngestError, UndefinedMetricError
from .metrics import roc_auc
from .model import Model, ModelConfig, build_model
from .normalize import NormalizationParams, normalize_image
from .training import TrainConfig, predict_probs, run_size_sweep, train

OUT_DIR_ENV = "CXRKIT_OUT"


# ---------------------------------------------------------------- arg types

def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return value


def _float_list(text: str) -> tuple:
    try:
        return tuple(float(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _int_list(text: str) -> tuple:
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _name_list(text: str) -> tuple:
    parts = tuple(part.strip() for part in text.split(",") if part.strip())
    if not parts:
        raise argparse.ArgumentTypeError("expected a comma-separated list of names")
    return parts


# ---------------------------------------------------------------- output

def _resolve_out(args) -> Path:
    out = args.out or os.environ.get(OUT_DIR_ENV)
    if not out:
        args._parser.error(f"no output directory: pass --out or set {OUT_DIR_ENV}")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def _echo_config(out: Path, command: str, settings: dict) -> None:
    payload = {"command": command, **settings}
    (out / "config.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _windowed(samples, params: NormalizationParams | None = None):
    params = params or NormalizationParams()
    return [replace(s, image=normalize_image(s.image, params)) for s in samples]


# ---------------------------------------------------------------- commands

def _cmd_synth(args) -> int:
    out = _resolve_out(args)
    spec = SyntheticSpec(image_size=args.size, count=args.count,
                         images_per_patient=args.images_per_patient,
                         dataset_a_fraction=args.a_fraction,
                         reader_flip_probs=args.flip_probs, seed=args.seed)
    manifest_path = write_corpus(generate_corpus(spec), out)
    _echo_config(out, "synth", {
        "size": args.size, "count": args.count,
        "images_per_patient": args.images_per_patient,
        "a_fraction": args.a_fraction,
        "flip_probs": list(args.flip_probs), "seed": args.seed})
    print(f"wrote {manifest_path} ({args.count} images)")
    return 0


def _cmd_normalize(args) -> int:
    if args.out_image:
        target = Path(args.out_image)
        target.parent.mkdir(parents=True, exist_ok=True)
    else:
        target = _resolve_out(args) / (Path(args.image).stem + "_windowed.png")
    params = NormalizationParams(bin_count=args.bins,
                                 gaussian_sigma=args.sigma,
                                 median_window=args.median,
                                 tail_mass=args.tail)
    windowed = normalize_image(read_image_png(args.image), params)
    write_image_png(target, np.round(windowed * 65535.0).astype(np.uint16))
    print(f"wrote {target}")
    return 0


def _model_config(args, input_size: int, num_classes: int) -> ModelConfig:
    return ModelConfig(input_size=input_size,
                       dense_block_sizes=args.blocks,
                       growth_rate=args.growth,
                       num_abnormality_classes=num_classes,
                       num_spatial_classes=NUM_REGIONS,
                       seed=args.seed)


def _train_config(args) -> TrainConfig:
    return TrainConfig(batch_size=args.batch_size, initial_lr=args.lr,
                       max_epochs=args.epochs, seed=args.seed,
                       enabled_losses=args.losses,
                       split_fractions=args.split)


def _training_echo(args) -> dict:
    return {"blocks": list(args.blocks), "growth": args.growth,
            "epochs": args.epochs, "batch_size": args.batch_size,
            "lr": args.lr, "losses": list(args.losses),
            "split": list(args.split), "seed": args.seed}


def _cmd_train(args) -> int:
    out = _resolve_out(args)
    manifest = read_manifest(args.manifest)
    samples = _windowed(load_manifest(args.manifest))
    size = samples[0].image.shape[0]
    model = build_model(_model_config(args, size, manifest.num_classes))
    outcome = train(model, samples, _train_config(args))

    outcome.model.save(out / "model.ckpt")
    header = ["epoch", "train_loss", "val_loss", "lr"]
    header += [f"auc_{name}" for name in manifest.class_names]
    rows = [[e.epoch, e.train_loss, e.val_loss, e.lr, *e.val_auc]
            for e in outcome.history]
    _write_csv(out / "train_report.csv", header, rows)
    _echo_config(out, "train", _training_echo(args))
    print(f"wrote {out / 'model.ckpt'} "
          f"(final val macro AUC {outcome.final_val_auc():.4f})")
    return 0


def _cmd_eval(args) -> int:
    out = _resolve_out(args)
    manifest = read_manifest(args.manifest)
    model = Model.load(args.checkpoint)
    if model.config.num_abnormality_classes != manifest.num_classes:
        raise IngestError(
            f"checkpoint expects {model.config.num_abnormality_classes} classes "
            f"but the manifest declares {manifest.num_classes}")
    samples = _windowed(load_manifest(args.manifest))
    probs = predict_probs(model, [s.image for s in samples], args.batch_size)

    tables, report_rows = {}, []
    for n, name in enumerate(manifest.class_names):
        keep = [i for i, s in enumerate(samples)
                if s.labels.dataset_mask[n] == 1.0]
        auc = None
        if keep:
            table = ScoreTable(tuple(samples[i].sample_id for i in keep),
                               probs[keep, n],
                               [samples[i].labels.abnormality_labels[n]
                                for i in keep])
            tables[name] = table
            try:
                auc = roc_auc(table.scores, table.labels)
            except UndefinedMetricError:
                auc = None
        report_rows.append([name, len(keep), auc])
    defined = [r[2] for r in report_rows if r[2] is not None]
    macro = float(np.mean(defined)) if defined else None
    report_rows.append(["macro", len(samples), macro])

    write_scores(out / "scores.csv", tables)
    _write_csv(out / "eval_report.csv", ["abnormality", "cases", "auc"],
               report_rows)
    _echo_config(out, "eval", {"batch_size": args.batch_size, "seed": args.seed})
    shown = "undefined" if macro is None else f"{macro:.4f}"
    print(f"wrote {out / 'scores.csv'} (macro AUC {shown})")
    return 0


def _cmd_agree(args) -> int:
    out = _resolve_out(args)
    matrices = read_annotations(args.annotations)
    rows = []
    for index, matrix in enumerate(matrices, start=1):
        for row in agreement_report(matrix):
            rows.append([f"panel_{index}", row.abnormality,
                         matrix.n_cases, matrix.n_readers,
                         row.unanimous_positive, row.unanimous_negative,
                         row.split, row.ppa, row.npa,
                         row.positive_disagreement, row.kappa])
    _write_csv(out / "agreement_report.csv",
               ["panel", "abnormality", "cases", "readers",
                "unanimous_positive", "unanimous_negative", "split",
                "ppa", "npa", "positive_disagreement", "kappa"], rows)
    print(f"wrote {out / 'agreement_report.csv'} ({len(rows)} rows)")
    return 0


def _category_lookup(annotations_path) -> dict:
    """abnormality -> {case_id -> confidence code}, for three-reader panels."""
    lookup = {}
    for matrix in read_annotations(annotations_path):
        if matrix.n_readers != 3:
            continue
        codes = confidence_categories(matrix)
        for k, name in enumerate(matrix.abnormalities):
            lookup[name] = dict(zip(matrix.case_ids, codes[:, k].tolist()))
    return lookup


def _cmd_band(args) -> int:
    out = _resolve_out(args)
    tables = read_scores(args.scores)
    lookup = _category_lookup(args.annotations) if args.annotations else {}
    report_rows, params_echo = [], {}
    for name, table in tables.items():
        params = calibrate_band(table.scores, table.labels,
                                l_tp=args.l_tp, l_tn=args.l_tn)
        params_echo[name] = params.to_dict()
        if name in lookup:
            mapping = lookup[name]
            missing = [c for c in table.case_ids if c not in mapping]
            if missing:
                raise IngestError(
                    f"annotations lack confidence votes for case "
                    f"{missing[0]!r} of abnormality {name!r}")
            codes = np.array([mapping[c] for c in table.case_ids])
            rows = band_report(table.scores, codes, params)
        else:
            retained, _ = apply_band(table.scores, params)
            pct = (100.0 * len(retained) / len(table.scores)
                   if len(table.scores) else None)
            rows = [("total", len(table.scores), len(retained), pct)]
        for row in rows:
            entry = row if isinstance(row, tuple) else (
                row.category, row.before, row.after, row.retained_pct)
            report_rows.append([name, *entry])

    _write_csv(out / "band_report.csv",
               ["abnormality", "category", "before", "after", "retained_pct"],
               report_rows)
    (out / "band_params.json").write_text(
        json.dumps(params_echo, sort_keys=True, indent=2) + "\n")
    print(f"wrote {out / 'band_report.csv'} ({len(tables)} abnormalities)")
    return 0


def _cmd_sweep(args) -> int:
    out = _resolve_out(args)
    manifest = read_manifest(args.manifest)
    samples = _windowed(load_manifest(args.manifest))
    size = samples[0].image.shape[0]
    model_config = _model_config(args, size, manifest.num_classes)
    train_config = _train_config(args)

    rows = []
    for seed in args.seeds:
        for row in run_size_sweep(samples, model_config, train_config,
                                  fractions=args.fractions, seed=seed):
            rows.append([seed, row["fraction"], row["train_patients"],
                         row["val_auc"], *row["class_aucs"]])
    header = ["seed", "fraction", "train_patients", "macro_auc"]
    header += [f"auc_{name}" for name in manifest.class_names]
    _write_csv(out / "sweep.csv", header, rows)
    _echo_config(out, "sweep", {**_training_echo(args),
                                "fractions": list(args.fractions),
                                "seeds": list(args.seeds)})
    print(f"wrote {out / 'sweep.csv'} ({len(rows)} rows)")
    return 0


# ---------------------------------------------------------------- parser

def _add_out(parser) -> None:
    parser.add_argument("--out", help=f"output directory (default: ${OUT_DIR_ENV})")


def _add_training_flags(parser) -> None:
    parser.add_argument("--blocks", type=_int_list, default=(1, 1),
                        help="dense layers per block, comma separated")
    parser.add_argument("--growth", type=_positive_int, default=8,
                        help="feature maps added per dense layer")
    parser.add_argument("--epochs", type=_positive_int, default=20)
    parser.add_argument("--batch-size", type=_positive_int, default=8)
    parser.add_argument("--lr", type=_positive_float, default=1e-3)
    parser.add_argument("--losses", type=_name_list, default=("abn", "seg", "loc"),
                        help="enabled losses, e.g. abn or abn,seg,loc")
    parser.add_argument("--split", type=_float_list, default=(0.70, 0.10, 0.20),
                        help="train,val,test fractions")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cxrkit",
        description="Synthesize, window, train, score, and audit chest "
                    "radiograph corpora.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--size", type=_positive_int, default=64, help="image side length")
    p.add_argument("--count", type=_positive_int, default=200, help="number of images")
    p.add_argument("--images-per-patient", type=_positive_int, default=2)
    p.add_argument("--a-fraction", type=float, default=0.6,
                   help="fraction of patients drawn from dataset A")
    p.add_argument("--flip-probs", type=_float_list, default=(0.02, 0.06, 0.10),
                   help="per-reader label flip probabilities")
    p.add_argument("--seed", type=int, default=0)
    _add_out(p)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("normalize", help="dynamic-window one radiograph")
    p.add_argument("--image", required=True, help="input PNG")
    p.add_argument("--out-image", help="output PNG path (default: <out>/<stem>_windowed.png)")
    p.add_argument("--bins", type=_positive_int, default=256)
    p.add_argument("--sigma", type=_positive_float, default=2.0,
                   help="histogram smoothing strength")
    p.add_argument("--median", type=_positive_int, default=5,
                   help="median filter window (odd)")
    p.add_argument("--tail", type=_positive_float, default=0.005,
                   help="histogram tail mass ignored per side")
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; unused")
    _add_out(p)
    p.set_defaults(func=_cmd_normalize)

    p = sub.add_parser("train", help="fit a model from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_training_flags(p)
    _add_out(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score a manifest with a checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--batch-size", type=_positive_int, default=8)
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; unused")
    _add_out(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("agree", help="summarize reader agreement")
    p.add_argument("--annotations", required=True, help="annotation votes CSV")
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; unused")
    _add_out(p)
    p.set_defaults(func=_cmd_agree)

    p = sub.add_parser("band", help="calibrate an uncertainty band from scores")
    p.add_argument("--scores", required=True, help="scores CSV")
    p.add_argument("--annotations", help="annotation votes CSV for per-category retention")
    p.add_argument("--l-tp", type=_positive_float, default=20.0,
                   help="true positives sacrificeable per side")
    p.add_argument("--l-tn", type=_positive_float, default=20.0,
                   help="true negatives sacrificeable per side")
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; unused")
    _add_out(p)
    p.set_defaults(func=_cmd_band)

    p = sub.add_parser("sweep", help="AUC versus training-set size")
    p.add_argument("--manifest", required=True)
    p.add_argument("--fractions", type=_float_list, default=(0.1, 0.25, 0.5, 1.0),
                   help="training-set fractions to retrain on")
    p.add_argument("--seeds", type=_int_list, default=(0, 1, 2),
                   help="split/init seeds to average over")
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; unused")
    _add_training_flags(p)
    _add_out(p)
    p.set_defaults(func=_cmd_sweep)

    for sub_parser in sub.choices.values():
        sub_parser.set_defaults(_parser=sub_parser)
    return parser


def cli_dispatch(argv=None) -> int:
    """Run one command; returns the process exit code instead of exiting.

    Usage problems exit 2 (argparse convention), data or configuration
    problems print a diagnostic and exit 1.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return int(args.func(args) or 0)
    except SystemExit as exc:
        code = exc.code
        return int(code) if isinstance(code, int) else (0 if code is None else 2)
    except (CxrkitError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    raise SystemExit(cli_dispatch())
