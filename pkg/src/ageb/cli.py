"""Command-line front door for the erosion-backdoor pipeline.

Subcommands: dataset, gradmap, poison, train, eval, ablate. Outputs of the
pipeline stages land in a run directory named <timestamp>-<confighash8>
under --out (pass --run-name for a fixed, reproducible directory name); the
dataset command writes its directory directly. Every command drops the
fully resolved config next to its outputs.

Failures print one line to stderr in the form ``error:<category>: message``
with category one of config, io, invariant, internal.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import config as cfgmod
from . import gradmap as gm
from . import harness, poison, report, trigger, vit
from .errors import ConfigError, FormatError
from .seeds import derive_seed

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_INVARIANT = 4
EXIT_INTERNAL = 1

_BLAS_PIN = None


def _pin_blas() -> None:
    # Single-threaded BLAS keeps reductions bit-identical regardless of --jobs.
    global _BLAS_PIN
    if _BLAS_PIN is None:
        from threadpoolctl import threadpool_limits

        _BLAS_PIN = threadpool_limits(limits=1)


def _common_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", type=Path, default=None, help="JSON config file")
    sub.add_argument("--seed", type=int, default=None, help="root seed override")
    sub.add_argument("--jobs", type=int, default=1, help="parallel worker count")
    sub.add_argument("--out", type=Path, default=Path("runs"), help="output root")
    sub.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted-key config override (repeatable)",
    )
    sub.add_argument(
        "--run-name",
        type=str,
        default=None,
        help="fixed run-directory name (default: timestamp + config hash)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ageb")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("dataset", help="generate or ingest a dataset directory")
    p.add_argument("kind", choices=["synth", "cifar10"])
    p.add_argument("--size", type=int, default=None, help="training sample count")
    p.add_argument("--test-size", type=int, default=None)
    p.add_argument("--cifar-dir", type=Path, default=None,
                   help="directory with CIFAR-10 binary batches")
    _common_flags(p)

    p = subs.add_parser("gradmap", help="export gradient map + mask for one image")
    p.add_argument("--model", type=Path, required=True, help="trained surrogate params")
    p.add_argument("--image", type=Path, required=True, help="input PNG")
    p.add_argument("--label", type=int, default=None,
                   help="class used for the loss (default: model's prediction)")
    _common_flags(p)

    p = subs.add_parser("poison", help="poison a dataset with a trained surrogate")
    p.add_argument("--data", type=Path, required=True,
                   help="dataset root containing train/ and test/")
    p.add_argument("--surrogate", type=Path, required=True)
    _common_flags(p)

    p = subs.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", type=Path, required=True, help="split directory (index.csv)")
    p.add_argument("--role", choices=["victim", "surrogate"], default="victim",
                   help="config section supplying the schedule")
    _common_flags(p)

    p = subs.add_parser("eval", help="measure CDA and ASR")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--clean", type=Path, required=True, help="clean test directory")
    p.add_argument("--triggered", type=Path, required=True,
                   help="triggered test directory")
    p.add_argument("--target", type=int, default=None,
                   help="target class (default: config poison.target_class)")
    _common_flags(p)

    p = subs.add_parser("ablate", help="run an ablation grid end to end")
    p.add_argument("--data", type=Path, required=True,
                   help="dataset root containing train/ and test/")
    p.add_argument("--grid", choices=["table3", "rates", "kernel", "fraction"],
                   default=None)
    _common_flags(p)

    return parser


def _resolve(args) -> dict:
    return cfgmod.load_config(args.config, args.overrides, args.seed)


def _run_dir(args, cfg: dict) -> Path:
    name = args.run_name
    if name is None:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        name = f"{stamp}-{cfgmod.config_hash(cfg)[:8]}"
    run = Path(args.out) / name
    run.mkdir(parents=True, exist_ok=True)
    return run


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_dataset(args) -> int:
    cfg = _resolve(args)
    ds_cfg = cfg["dataset"]
    kind = args.kind
    size = args.size if args.size is not None else int(ds_cfg["size"])
    test_size = args.test_size if args.test_size is not None else int(ds_cfg["test_size"])
    seed = cfg["seed"]
    out = Path(args.out)
    if kind == "synth":
        train_ds = harness.synth_dataset(size, derive_seed(seed, "dataset-train"),
                                         int(ds_cfg["image_size"]), split="train")
        test_ds = harness.synth_dataset(test_size, derive_seed(seed, "dataset-test"),
                                        int(ds_cfg["image_size"]), split="test")
    else:
        cifar_dir = args.cifar_dir or ds_cfg["cifar_dir"]
        if not cifar_dir:
            raise ConfigError("cifar10 ingestion needs --cifar-dir or dataset.cifar_dir")
        train_ds, test_ds = harness.load_cifar10(cifar_dir, size, test_size)
    poison.save_dataset(train_ds, out / "train")
    poison.save_dataset(test_ds, out / "test")
    cfg["dataset"]["kind"] = kind
    cfg["dataset"]["size"] = size
    cfg["dataset"]["test_size"] = test_size
    cfgmod.write_resolved(cfg, out)
    print(f"dataset written: {out} ({len(train_ds)} train, {len(test_ds)} test)")
    return 0


def cmd_gradmap(args) -> int:
    cfg = _resolve(args)
    params, model_cfg = vit.load_params(args.model)
    image = trigger.load_png(args.image)
    if image.shape[:2] != (model_cfg.image_size, model_cfg.image_size):
        raise ConfigError(
            f"image {image.shape[:2]} does not match model image_size "
            f"{model_cfg.image_size}"
        )
    label = args.label
    if label is None:
        logits, _ = vit.forward(params, model_cfg, image)
        label = int(logits.argmax())
    run = _run_dir(args, cfg)
    _, record, _ = vit.loss_backward(params, model_cfg, image, label)
    gmap = gm.pixel_gradient_map(record, model_cfg)
    mask = gm.mask_from_gradient(gmap, float(cfg["trigger"]["gradient_fraction"]))
    gm.save_gradient_map(run / "gradient_map.grd", gmap)
    gm.save_mask(run / "erosion_mask.msk", mask)
    report.save_gradmap_overlay(image, gmap, run / "overlay.png")
    cfgmod.write_resolved(cfg, run)
    print(f"gradmap written: {run}")
    return 0


def cmd_poison(args) -> int:
    cfg = _resolve(args)
    run = _run_dir(args, cfg)
    train_ds = poison.load_dataset(Path(args.data) / "train")
    test_ds = poison.load_dataset(Path(args.data) / "test")
    surrogate_params, surrogate_cfg = vit.load_params(args.surrogate)
    spec = cfgmod.poison_spec(cfg, seed=derive_seed(cfg["seed"], "poison"))
    poisoned, manifest = poison.poison_dataset(
        train_ds, spec, surrogate_params, surrogate_cfg, jobs=args.jobs
    )
    flags = [0] * len(poisoned)
    originals = [label for _, label in train_ds.samples]
    for entry in manifest.entries:
        flags[entry.index] = 1
    poison.save_dataset(poisoned, run / "poisoned_train", flags, originals)
    triggered = poison.triggered_test_set(
        test_ds, spec, surrogate_params, surrogate_cfg, jobs=args.jobs
    )
    poison.save_dataset(
        triggered, run / "triggered_test", [1] * len(triggered),
        [label for _, label in triggered.samples],
    )
    manifest.save(run / "manifest.json")
    cfgmod.write_resolved(cfg, run)
    print(
        f"poisoned {manifest.poisoned_samples}/{manifest.total_samples} samples -> {run}"
    )
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    run = _run_dir(args, cfg)
    dataset = poison.load_dataset(args.data)
    section = "train" if args.role == "victim" else "surrogate"
    spec = cfgmod.train_spec(cfg, section,
                             seed=derive_seed(cfg["seed"], f"train:{args.role}"))
    t0 = time.perf_counter()
    params, log = harness.train(dataset, spec)
    seconds = time.perf_counter() - t0
    vit.save_params(run / "model.bin", params, spec.vit)
    with open(run / "training_log.jsonl", "w") as fh:
        for row in log:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    if log:
        report.save_training_curves(log, run / "training_curve.png")
    (run / "timing.json").write_text(json.dumps({"seconds": seconds}) + "\n")
    cfgmod.write_resolved(cfg, run)
    final = log[-1] if log else {"loss": None, "accuracy": None}
    print(f"trained {args.role}: final train accuracy {final['accuracy']} -> {run}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    run = _run_dir(args, cfg)
    params, model_cfg = vit.load_params(args.model)
    clean = poison.load_dataset(args.clean)
    triggered = poison.load_dataset(args.triggered)
    target = args.target if args.target is not None else int(cfg["poison"]["target_class"])
    t0 = time.perf_counter()
    metrics = harness.evaluate(
        params, model_cfg, clean, triggered, target,
        batch_size=int(cfg["eval"]["batch_size"]),
    )
    metrics.spec_hashes = {"config": cfgmod.config_hash(cfg)}
    metrics.seconds = round(time.perf_counter() - t0, 3)
    (run / "metrics.json").write_text(
        json.dumps(metrics.to_dict(), indent=2, sort_keys=True) + "\n"
    )
    cfgmod.write_resolved(cfg, run)
    print(f"cda={metrics.cda:.4f} asr={metrics.asr:.4f} -> {run}")
    return 0


def _grid_cells(cfg: dict, grid: str) -> list[harness.AblationCell]:
    seed = cfg["seed"]
    base_trigger = cfgmod.trigger_config(cfg)
    cells = []

    def cell(cell_id: str, trig, mask_mode: str, rate: float) -> harness.AblationCell:
        spec = poison.PoisonSpec(
            rate=rate,
            target_class=int(cfg["poison"]["target_class"]),
            seed=derive_seed(seed, f"poison:{cell_id}"),
            trigger=trig,
            mask_mode=mask_mode,
        )
        tspec = cfgmod.train_spec(cfg, "train",
                                  seed=derive_seed(seed, f"victim:{cell_id}"))
        return harness.AblationCell(cell_id=cell_id, poison=spec, train=tspec)

    rate = float(cfg["poison"]["rate"])
    if grid == "table3":
        from dataclasses import replace

        variants = {
            "baseline": replace(base_trigger, blend_alpha=1.0, bias_epsilon=0.0),
            "signal": replace(base_trigger, blend_alpha=1.0),
            "mix_signal": base_trigger,
        }
        for method, trig in variants.items():
            for mode in ("gradient", "random"):
                cells.append(cell(f"{method}:{mode}", trig, mode, rate))
    elif grid == "rates":
        for r in cfg["ablation"]["rates"]:
            cells.append(cell(f"rate:{r}", base_trigger, cfg["poison"]["mask_mode"],
                              float(r)))
    elif grid == "kernel":
        from dataclasses import replace

        for size in cfg["ablation"]["kernel_sizes"]:
            for iters in cfg["ablation"]["iterations"]:
                trig = replace(base_trigger,
                               element=trigger.StructuringElement(int(size), int(iters)))
                cells.append(cell(f"k{size}:i{iters}", trig,
                                  cfg["poison"]["mask_mode"], rate))
    elif grid == "fraction":
        from dataclasses import replace

        for q in cfg["ablation"]["fractions"]:
            trig = replace(base_trigger, gradient_fraction=float(q))
            cells.append(cell(f"q:{q}", trig, cfg["poison"]["mask_mode"], rate))
    else:
        raise ConfigError(f"unknown ablation grid {grid!r}")
    return cells


def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    if args.grid is not None:
        cfg["ablation"]["grid"] = args.grid
    grid = cfg["ablation"]["grid"]
    run = _run_dir(args, cfg)
    train_ds = poison.load_dataset(Path(args.data) / "train")
    test_ds = poison.load_dataset(Path(args.data) / "test")

    surrogate_path = run / "surrogate.bin"
    surrogate_spec = cfgmod.train_spec(cfg, "surrogate",
                                       seed=derive_seed(cfg["seed"], "train:surrogate"))
    if surrogate_path.exists():
        surrogate_params, surrogate_cfg = vit.load_params(surrogate_path)
    else:
        surrogate_params, _ = harness.train(train_ds, surrogate_spec)
        surrogate_cfg = surrogate_spec.vit
        vit.save_params(surrogate_path, surrogate_params, surrogate_cfg)

    cells = _grid_cells(cfg, grid)
    rows = harness.run_ablation(
        cells, train_ds, test_ds, surrogate_params, surrogate_cfg,
        results_path=run / "results.jsonl", jobs=args.jobs,
    )
    (run / "summary.txt").write_text(harness.format_table(rows))
    report.save_ablation_bars(rows, run / "ablation_asr_cda.png")
    if grid == "rates":
        report.save_rate_curves(rows, run / "rate_curve.png")
    cfgmod.write_resolved(cfg, run)
    print(harness.format_table(rows), end="")
    print(f"ablation ({grid}) -> {run}")
    return 0


_COMMANDS = {
    "dataset": cmd_dataset,
    "gradmap": cmd_gradmap,
    "poison": cmd_poison,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    _pin_blas()
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error:config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, FileNotFoundError, OSError) as exc:
        print(f"error:io: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error:invariant: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except Exception as exc:  # pragma: no cover
        print(f"error:internal: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    raise SystemExit(main())
