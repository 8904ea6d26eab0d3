"""Command-line operator surface.

Subcommands: datagen, train, eval, ablate, export-heatmap, gradcheck.
Exit codes: 0 success, 1 config/input validation error, 2 runtime failure,
3 gradient-check failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .audio import crop_or_pad, load_wav, stft_magnitude
from .config import ConfigError, config_hash, load_run_config
from .datagen import dataset_up_to_date, gen_class_set, gen_dataset
from .encoders import encode_audio, encode_visual
from .evaluation import ciou, consensus_mask, evaluate, upsample_heatmap, write_report
from .loss import correspondence_map, loss_grad_check, trimap
from .manifest import read_manifest
from .tensor import Tensor, gradcheck_suite
from .tensorio import FormatError, load_tensor
from .train import TrainAbort, load_run_checkpoint, train
from .visualize import signed_to_bytes, unit_to_bytes, write_pgm

# ablation grid in the canonical row order: (model id, eps_pos, eps_neg, hard negatives)
ABLATION_MODELS = (
    ("a", 0.60, 0.60, False),
    ("b", 0.60, 0.60, True),
    ("c", 0.60, 0.45, True),
    ("d", 0.65, 0.45, True),
    ("e", 0.65, 0.40, True),
    ("f", 0.70, 0.30, True),
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_GRADCHECK = 3


def _echo(message: str) -> None:
    print(message)


def cmd_datagen(args) -> int:
    cfg = load_run_config(args.config)
    out_dir = Path(cfg.data.dir)
    if dataset_up_to_date(cfg.datagen, cfg.seed, out_dir):
        _echo(f"dataset {out_dir}: up-to-date")
        train_m = read_manifest(out_dir / "train.txt")
        seen_m = read_manifest(out_dir / "test_seen.txt")
        unseen_m = read_manifest(out_dir / "test_unseen.txt")
    else:
        classes = gen_class_set(
            cfg.datagen.num_classes,
            cfg.seed,
            rate=cfg.datagen.rate,
            texture_size=cfg.datagen.texture_size,
        )
        train_m, seen_m, unseen_m = gen_dataset(classes, cfg.datagen, cfg.seed, out_dir)
        _echo(f"dataset {out_dir}: generated")
    seen_classes = sorted({r.class_id for r in train_m.records})
    unseen_classes = sorted({r.class_id for r in unseen_m.records})
    _echo(f"classes: {len(seen_classes)} seen, {len(unseen_classes)} unseen")
    _echo(f"train: {len(train_m.records)}")
    _echo(f"test_seen: {len(seen_m.records)}")
    _echo(f"test_unseen: {len(unseen_m.records)}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    result = train(cfg, log=_echo)
    _echo(f"trained {result.steps} steps; final loss {result.losses[-1]:.6f}")
    _echo(f"curve: {result.curve_path}")
    _echo(f"checkpoint: {result.checkpoint_path}")
    return EXIT_OK


def _load_compatible_checkpoint(path, cfg):
    bundle = load_run_checkpoint(path)
    expected = config_hash(cfg)
    if bundle.config_hash != expected:
        raise ConfigError(
            f"checkpoint {path} was written under config hash "
            f"{bundle.config_hash[:12]}… but this config hashes to "
            f"{expected[:12]}…; refusing to evaluate under a mismatched "
            "encoder configuration"
        )
    return bundle


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    bundle = _load_compatible_checkpoint(args.checkpoint, cfg)
    manifest_path = (
        Path(args.manifest) if args.manifest else Path(cfg.data.dir) / cfg.data.eval_manifest
    )
    manifest = read_manifest(manifest_path)
    report = evaluate(bundle.params, cfg.encoder_config(), manifest, cfg.eval)
    out = Path(args.out) if args.out else Path(cfg.run_dir) / "reports" / f"{report.tag}.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(report, out)
    _echo(f"tag: {report.tag}")
    _echo(f"success@0.5: {report.success_at_half!r}")
    _echo(f"mean-ciou: {report.mean_ciou!r}")
    _echo(f"auc: {report.auc_value!r}")
    _echo(f"report: {out}")
    return EXIT_OK


def _parse_report_metrics(path) -> tuple:
    success = auc_value = None
    for line in Path(path).read_text(encoding="ascii").splitlines():
        if line.startswith("success@0.5="):
            success = float(line.split("=", 1)[1])
        elif line.startswith("auc="):
            auc_value = float(line.split("=", 1)[1])
    if success is None or auc_value is None:
        raise ValueError(f"report {path} is missing metric lines")
    return success, auc_value


def _run_ablation_cell(cfg, model_id, eps_pos, eps_neg, hard, seed):
    """Train+eval one (model, seed) cell, skipping work already on disk."""
    run_dir = Path(cfg.run_dir) / f"ablate_{model_id}_seed{seed}"
    report_path = run_dir / "report.txt"
    if (run_dir / "done.txt").exists() and report_path.exists():
        return _parse_report_metrics(report_path)
    sub_cfg = replace(
        cfg,
        run_dir=str(run_dir),
        seed=seed,
        loss=replace(
            cfg.loss,
            eps_pos=eps_pos,
            eps_neg=eps_neg,
            include_hard_negatives=hard,
        ),
    )
    result = train(sub_cfg)
    bundle = load_run_checkpoint(result.checkpoint_path)
    manifest = read_manifest(Path(cfg.data.dir) / cfg.data.eval_manifest)
    report = evaluate(bundle.params, sub_cfg.encoder_config(), manifest, sub_cfg.eval)
    write_report(report, report_path)
    return report.success_at_half, report.auc_value


def format_ablation_table(rows) -> str:
    """rows: (model id, eps_pos, eps_neg, hard, successes, aucs, failures)."""
    lines = [
        "ablation",
        "model  eps_pos  eps_neg  hard  success@0.5          auc                  seeds",
    ]
    for model_id, eps_pos, eps_neg, hard, successes, aucs, failures in rows:
        if successes:
            s = np.asarray(successes, dtype=np.float64)
            a = np.asarray(aucs, dtype=np.float64)
            cell = (
                f"{s.mean():.4f} +/- {s.std():.4f}  "
                f"{a.mean():.4f} +/- {a.std():.4f}  {len(successes)}"
            )
        else:
            cell = "-                    -                    0"
        tag = "on " if hard else "off"
        line = f"{model_id}      {eps_pos:.2f}     {eps_neg:.2f}     {tag}   {cell}"
        if failures:
            line += f"  [{failures} failed]"
        lines.append(line)
    return "".join(line + "\n" for line in lines)


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config)
    seeds = list(range(cfg.ablate.first_seed, cfg.ablate.first_seed + cfg.ablate.num_seeds))
    rows = []
    failures_total = 0
    for model_id, eps_pos, eps_neg, hard in ABLATION_MODELS:
        successes, aucs, failures = [], [], 0
        for seed in seeds:
            try:
                success, auc_value = _run_ablation_cell(
                    cfg, model_id, eps_pos, eps_neg, hard, seed
                )
            except (TrainAbort, ArithmeticError, ValueError, OSError) as err:
                _echo(f"model {model_id} seed {seed}: FAILED ({err})")
                failures += 1
                failures_total += 1
                continue
            successes.append(success)
            aucs.append(auc_value)
            _echo(
                f"model {model_id} seed {seed}: "
                f"success@0.5 {success!r} auc {auc_value!r}"
            )
        rows.append((model_id, eps_pos, eps_neg, hard, successes, aucs, failures))
    table = format_ablation_table(rows)
    out = Path(cfg.run_dir) / "ablation.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(table, encoding="ascii")
    _echo(table.rstrip("\n"))
    _echo(f"table: {out}")
    return EXIT_OK if failures_total == 0 else EXIT_RUNTIME


def cmd_export_heatmap(args) -> int:
    cfg = load_run_config(args.config)
    bundle = _load_compatible_checkpoint(args.checkpoint, cfg)
    manifest_path = (
        Path(args.manifest) if args.manifest else Path(cfg.data.dir) / cfg.data.eval_manifest
    )
    manifest = read_manifest(manifest_path)
    by_id = {r.sample_id: r for r in manifest.records}
    if args.sample not in by_id:
        raise ConfigError(
            f"sample {args.sample!r} is not in manifest {manifest_path} "
            f"({len(by_id)} records)"
        )
    record = by_id[args.sample]

    frozen = {name: t.detach() for name, t in bundle.params.items()}
    enc_cfg = cfg.encoder_config()
    image = load_tensor(manifest.path_for(record.image))
    samples, rate = load_wav(manifest.path_for(record.audio))
    samples = crop_or_pad(samples, cfg.eval.seconds, rate)
    spec = stft_magnitude(samples, cfg.eval.spectrogram)

    visual = encode_visual(Tensor(image), frozen, enc_cfg)
    audio_emb = encode_audio(Tensor(spec[None]), frozen, enc_cfg)
    sim = correspondence_map(audio_emb, visual)
    tri = trimap(sim, cfg.loss)
    heat = upsample_heatmap(sim.data, image.shape[1], image.shape[2])

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sid = record.sample_id
    files = (
        (f"{sid}_sim.pgm", signed_to_bytes(sim.data), "similarity [-1,1] -> [0,255]"),
        (f"{sid}_above_pos.pgm", unit_to_bytes(tri.above_pos.data), "soft positive [0,1] -> [0,255]"),
        (f"{sid}_above_neg.pgm", unit_to_bytes(tri.above_neg.data), "soft negative [0,1] -> [0,255]"),
        (f"{sid}_uncertain.pgm", np.where(tri.uncertain, 255, 0).astype(np.uint8),
         "uncertain band {0,1} -> {0,255}"),
        (f"{sid}_heatmap.pgm", unit_to_bytes(heat), "upsampled prediction [0,1] -> [0,255]"),
    )
    for name, payload, mapping in files:
        write_pgm(out_dir / name, payload)
        _echo(f"{out_dir / name}: {mapping}")
    gt = consensus_mask(record.boxes, image.shape[1], image.shape[2], cfg.eval.consensus)
    _echo(f"ciou: {ciou(heat, gt, cfg.eval.threshold)!r}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    checks = gradcheck_suite(tolerance=args.tolerance)
    failed = []
    for check in checks:
        status = "ok" if check.passed else "FAIL"
        _echo(f"op={check.op} max_rel_err={check.max_rel_err:.3e} {status}")
        if not check.passed:
            failed.append(check.op)
    for seed in range(3):
        err = loss_grad_check(seed=seed)
        status = "ok" if err < args.tolerance else "FAIL"
        _echo(f"op=selfsup_loss[batch {seed}] max_rel_err={err:.3e} {status}")
        if err >= args.tolerance:
            failed.append(f"selfsup_loss[batch {seed}]")
    if failed:
        _echo(f"gradcheck FAILED: {', '.join(failed)}")
        return EXIT_GRADCHECK
    _echo(f"gradcheck passed: {len(checks)} ops + full loss < {args.tolerance!r}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="avloc",
        description="Self-supervised audio-visual source localization workbench.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate the synthetic dataset tree")
    p.add_argument("--config", default=None, help="YAML run config (defaults apply without it)")
    p.set_defaults(handler=cmd_datagen)

    p = sub.add_parser("train", help="train from a run config")
    p.add_argument("--config", default=None)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--config", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", default=None, help="defaults to the config's eval manifest")
    p.add_argument("--out", default=None, help="report path")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("ablate", help="threshold ablation sweep, models a-f")
    p.add_argument("--config", default=None)
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("export-heatmap", help="write PGM maps for one sample")
    p.add_argument("--config", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", required=True, help="sample id from the manifest")
    p.add_argument("--manifest", default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(handler=cmd_export_heatmap)

    p = sub.add_parser("gradcheck", help="finite-difference check of ops and loss")
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.set_defaults(handler=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except (ConfigError, FormatError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FileNotFoundError, ValueError, KeyError, TypeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except TrainAbort as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ArithmeticError, RuntimeError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
