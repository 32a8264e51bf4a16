"""Command line entry point: the full pipeline as subcommands.

Exit codes: 0 success, 1 usage error, 2 runtime/validation error.
Diagnostics go to stderr; results go to files or stdout. Every subcommand
accepts --seed; omitting it picks one and logs it so any run can be
reproduced after the fact. A flat ``key = value`` config file can supply
any flag (precedence: defaults < file < flags).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .cfl import build_nocfl_palette, build_palette, save_palette
from .data import ingest, load_samples, make_toy_dataset
from .generation import masks_to_boxes
from .imageio import load_mask_u8
from .metrics import (
    compute_stats,
    default_extractor,
    folder_features,
    frechet_distance,
    import_features,
    kid,
    save_sid_report,
    sid,
)
from .schedule import (
    DEFAULT_BETA_END,
    DEFAULT_BETA_START,
    DEFAULT_NUM_STEPS,
    make_linear_schedule,
    save_schedule_csv,
)


class _Parser(argparse.ArgumentParser):
    # argparse defaults to exit(2) on usage errors; the contract wants 1
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# types of flags whose default is None (config files arrive as strings)
_OPTION_TYPES = {"seed": int, "classes": int, "steps": int, "min_area": int}


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment; blank lines ignored."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _coerce(value: str, target: type) -> object:
    if target is bool:
        lowered = value.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {value!r}")
    return target(value)


def resolve_options(
    args: argparse.Namespace,
    defaults: dict[str, object],
    types: dict[str, type] | None = None,
) -> dict:
    """defaults < config file < explicit flags, returned as one dict.

    ``types`` declares the type of keys whose default is None; other keys
    coerce file values to their default's type.
    """
    file_values: dict[str, str] = {}
    if getattr(args, "config", None):
        file_values = parse_config_file(args.config)
    resolved = {}
    for key, default in defaults.items():
        cli_value = getattr(args, key, None)
        if cli_value is not None:
            resolved[key] = cli_value
        elif key in file_values:
            target = (types or {}).get(key, type(default) if default is not None else str)
            resolved[key] = _coerce(file_values[key], target)
        else:
            resolved[key] = default
    unknown = set(file_values) - set(defaults)
    if unknown:
        raise ValueError(f"unknown config file keys: {sorted(unknown)}")
    return resolved


def resolve_seed(resolved: dict) -> int:
    if resolved.get("seed") is None:
        resolved["seed"] = int.from_bytes(os.urandom(4), "little")
        _log(f"seed not given; selected seed = {resolved['seed']}")
    return int(resolved["seed"])


def _apply_thread_cap() -> None:
    import torch

    cap = os.environ.get("SIMGEN_THREADS")
    if cap:
        torch.set_num_threads(max(1, int(cap)))


def _write_run_config(out_dir: Path, command: str, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, **resolved}
    (out_dir / "config.json").write_text(json.dumps(doc, indent=2, default=str) + "\n")


def _features_or_folder(path: str, extractor):
    if str(path).endswith(".sgft"):
        return import_features(path)
    return folder_features(path, extractor)


# --- subcommand bodies ---------------------------------------------------------

def _cmd_palette(args) -> int:
    defaults = {"classes": None, "out": None, "nocfl": False, "seed": None}
    resolved = resolve_options(args, defaults, _OPTION_TYPES)
    if resolved["classes"] is None:
        args.parser.error("--classes is required")
    if resolved["out"] is None:
        args.parser.error("--out is required")
    builder = build_nocfl_palette if resolved["nocfl"] else build_palette
    save_palette(builder(int(resolved["classes"])), resolved["out"])
    _log(f"wrote {resolved['out']}")
    return 0


def _cmd_schedule(args) -> int:
    defaults = {
        "steps": DEFAULT_NUM_STEPS,
        "beta_start": DEFAULT_BETA_START,
        "beta_end": DEFAULT_BETA_END,
        "out": None,
        "seed": None,
    }
    resolved = resolve_options(args, defaults, _OPTION_TYPES)
    if resolved["out"] is None:
        args.parser.error("--out is required")
    schedule = make_linear_schedule(
        int(resolved["steps"]), float(resolved["beta_start"]), float(resolved["beta_end"])
    )
    save_schedule_csv(schedule, resolved["out"])
    _log(f"wrote {resolved['out']} ({schedule.num_steps} steps)")
    return 0


def _cmd_make_toy(args) -> int:
    defaults = {
        "out": None,
        "count": 256,
        "size": 32,
        "classes": 4,
        "seed": None,
    }
    resolved = resolve_options(args, defaults, _OPTION_TYPES)
    if resolved["out"] is None:
        args.parser.error("--out is required")
    seed = resolve_seed(resolved)
    manifest = make_toy_dataset(
        resolved["out"],
        count=int(resolved["count"]),
        size=int(resolved["size"]),
        num_classes=int(resolved["classes"]),
        seed=seed,
    )
    _write_run_config(Path(resolved["out"]), "make-toy", resolved)
    _log(f"wrote {len(manifest.ids)} pairs under {manifest.root}")
    return 0


def _cmd_train(args) -> int:
    defaults = {
        "data": None,
        "classes": None,
        "steps": None,
        "batch": 8,
        "lr": 1e-4,
        "seed": None,
        "out": None,
        "timesteps": DEFAULT_NUM_STEPS,
        "beta_start": DEFAULT_BETA_START,
        "beta_end": DEFAULT_BETA_END,
        "base_features": 16,
        "multipliers": "1,2,4,8",
        "encoding": "cfl",
        "split": "train",
        "ckpt_every": 1000,
        "log_every": 50,
        "resume": None,
    }
    resolved = resolve_options(args, defaults, _OPTION_TYPES)
    for key in ("data", "classes", "steps", "out"):
        if resolved[key] is None:
            args.parser.error(f"--{key} is required")
    seed = resolve_seed(resolved)
    _apply_thread_cap()

    from .denoiser import DenoiserConfig
    from .training import TrainConfig, train

    manifest = ingest(resolved["data"], int(resolved["classes"]))
    samples = load_samples(manifest, resolved["split"])
    if resolved["encoding"] == "nocfl":
        palette = build_nocfl_palette(manifest.num_classes)
    elif resolved["encoding"] == "cfl":
        palette = build_palette(manifest.num_classes)
    else:
        args.parser.error(f"--encoding must be cfl or nocfl, got {resolved['encoding']}")
    schedule = make_linear_schedule(
        int(resolved["timesteps"]), float(resolved["beta_start"]), float(resolved["beta_end"])
    )
    train_config = TrainConfig(
        total_steps=int(resolved["steps"]),
        learning_rate=float(resolved["lr"]),
        batch_size=int(resolved["batch"]),
        seed=seed,
        checkpoint_every=int(resolved["ckpt_every"]),
        log_every=int(resolved["log_every"]),
    )
    denoiser_config = DenoiserConfig(
        base_features=int(resolved["base_features"]),
        multipliers=tuple(int(m) for m in str(resolved["multipliers"]).split(",")),
    )
    out_dir = Path(resolved["out"])
    last = time.monotonic()

    def progress(step, loss, running):
        nonlocal last
        now = time.monotonic()
        rate = train_config.log_every / max(now - last, 1e-9)
        last = now
        _log(f"step {step} loss {loss:.6f} running {running:.6f} steps/sec {rate:.2f}")

    train(
        train_config,
        samples,
        palette,
        schedule,
        out_dir=out_dir,
        denoiser_config=denoiser_config,
        resume_from=resolved["resume"],
        log=progress,
        extra_config={"command": "train", **{k: str(v) if isinstance(v, Path) else v
                                             for k, v in resolved.items()}},
    )
    _log(f"finished {train_config.total_steps} steps; run directory: {out_dir}")
    return 0


def _cmd_sample(args) -> int:
    defaults = {
        "ckpt": None,
        "count": 16,
        "size": 32,
        "seed": None,
        "out": None,
        "boxes": False,
        "min_area": None,
    }
    resolved = resolve_options(args, defaults, _OPTION_TYPES)
    for key in ("ckpt", "out"):
        if resolved[key] is None:
            args.parser.error(f"--{key} is required")
    seed = resolve_seed(resolved)
    _apply_thread_cap()

    from .generation import export_batch, sample_pairs
    from .training import load_train_checkpoint

    state, _, palette, schedule = load_train_checkpoint(resolved["ckpt"])
    batch = sample_pairs(
        state.net,
        schedule,
        palette,
        count=int(resolved["count"]),
        size=int(resolved["size"]),
        seed=seed,
    )
    out_dir = Path(resolved["out"])
    export_batch(batch, out_dir, palette, min_area=resolved["min_area"])
    _write_run_config(out_dir, "sample", resolved)
    if resolved["boxes"]:
        sys.stdout.write((out_dir / "boxes.json").read_text())
    _log(f"wrote {len(batch.images)} pairs under {out_dir}")
    return 0


def _cmd_boxes(args) -> int:
    defaults = {"masks": None, "out": None, "min_area": None, "seed": None}
    resolved = resolve_options(args, defaults, _OPTION_TYPES)
    if resolved["masks"] is None:
        args.parser.error("--masks is required")
    records = []
    paths = sorted(Path(resolved["masks"]).glob("*.png"))
    if not paths:
        raise ValueError(f"no mask files under {resolved['masks']}")
    for path in paths:
        mask = load_mask_u8(path)
        for box in masks_to_boxes(mask.astype(np.int64), min_area=resolved["min_area"]):
            records.append(
                {
                    "image": path.stem,
                    "class": box.class_id,
                    "bbox": [box.x_min, box.y_min, box.x_max, box.y_max],
                }
            )
    text = json.dumps(records, indent=2) + "\n"
    if resolved["out"] is None:
        sys.stdout.write(text)
    else:
        Path(resolved["out"]).write_text(text)
        _log(f"wrote {resolved['out']}")
    return 0


def _cmd_eval_fid(args) -> int:
    defaults = {"real": None, "gen": None, "dim": 64, "seed": None}
    resolved = resolve_options(args, defaults, _OPTION_TYPES)
    for key in ("real", "gen"):
        if resolved[key] is None:
            args.parser.error(f"--{key} is required")
    extractor = default_extractor(
        seed=int(resolved["seed"] or 0), output_dim=int(resolved["dim"])
    )
    real = _features_or_folder(resolved["real"], extractor)
    gen = _features_or_folder(resolved["gen"], extractor)
    value = frechet_distance(
        compute_stats(real, 1e-6), compute_stats(gen, 1e-6)
    )
    print(repr(float(value)))
    return 0


def _cmd_eval_kid(args) -> int:
    defaults = {"real": None, "gen": None, "dim": 64, "block_size": 100, "seed": None}
    resolved = resolve_options(args, defaults, _OPTION_TYPES)
    for key in ("real", "gen"):
        if resolved[key] is None:
            args.parser.error(f"--{key} is required")
    extractor = default_extractor(
        seed=int(resolved["seed"] or 0), output_dim=int(resolved["dim"])
    )
    real = _features_or_folder(resolved["real"], extractor)
    gen = _features_or_folder(resolved["gen"], extractor)
    print(repr(float(kid(real, gen, block_size=int(resolved["block_size"])))))
    return 0


def _cmd_eval_sid(args) -> int:
    defaults = {
        "real": None,
        "gen": None,
        "crop": 64,
        "min_pixels": 32,
        "report": None,
        "dim": 64,
        "seed": None,
    }
    resolved = resolve_options(args, defaults, _OPTION_TYPES)
    for key in ("real", "gen"):
        if resolved[key] is None:
            args.parser.error(f"--{key} is required")
    extractor = default_extractor(
        seed=int(resolved["seed"] or 0), output_dim=int(resolved["dim"])
    )
    report = sid(
        resolved["real"],
        resolved["gen"],
        extractor,
        crop_size=int(resolved["crop"]),
        min_pixels=int(resolved["min_pixels"]),
    )
    if resolved["report"]:
        save_sid_report(report, resolved["report"])
        _log(f"wrote {resolved['report']}")
    print(json.dumps({"mean_sfid": report.mean_sfid, "mean_skid": report.mean_skid}))
    return 0


# --- parser wiring ---------------------------------------------------------------

def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--seed", type=int, default=None, help="random seed (logged if omitted)")
    sub.add_argument("--config", default=None, help="key = value config file")


def build_parser() -> _Parser:
    parser = _Parser(prog="simgen", description=__doc__)
    subs = parser.add_subparsers(dest="command")

    p = subs.add_parser("palette", parents=[], help="export a class palette as JSON")
    p.add_argument("--classes", type=int)
    p.add_argument("--out")
    p.add_argument("--nocfl", action="store_true", default=None,
                   help="use the seeded random ablation palette")
    _add_common(p)
    p.set_defaults(run=_cmd_palette)

    p = subs.add_parser("schedule", help="dump a noise schedule as CSV")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--beta-start", dest="beta_start", type=float, default=None)
    p.add_argument("--beta-end", dest="beta_end", type=float, default=None)
    p.add_argument("--out")
    _add_common(p)
    p.set_defaults(run=_cmd_schedule)

    p = subs.add_parser("make-toy", help="generate the synthetic shapes dataset")
    p.add_argument("--out")
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--classes", type=int, default=None)
    _add_common(p)
    p.set_defaults(run=_cmd_make_toy)

    p = subs.add_parser("train", help="train the joint diffusion model")
    p.add_argument("--data")
    p.add_argument("--classes", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--out")
    p.add_argument("--timesteps", type=int, default=None)
    p.add_argument("--beta-start", dest="beta_start", type=float, default=None)
    p.add_argument("--beta-end", dest="beta_end", type=float, default=None)
    p.add_argument("--base-features", dest="base_features", type=int, default=None)
    p.add_argument("--multipliers", default=None, help="comma-separated, e.g. 1,2,4,8")
    p.add_argument("--encoding", choices=("cfl", "nocfl"), default=None)
    p.add_argument("--split", default=None)
    p.add_argument("--ckpt-every", dest="ckpt_every", type=int, default=None)
    p.add_argument("--log-every", dest="log_every", type=int, default=None)
    p.add_argument("--resume", default=None, help="training checkpoint to continue from")
    _add_common(p)
    p.set_defaults(run=_cmd_train)

    p = subs.add_parser("sample", help="sample paired outputs from a checkpoint")
    p.add_argument("--ckpt")
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--out")
    p.add_argument("--boxes", action="store_true", default=None,
                   help="also print boxes.json to stdout")
    p.add_argument("--min-area", dest="min_area", type=int, default=None)
    _add_common(p)
    p.set_defaults(run=_cmd_sample)

    p = subs.add_parser("boxes", help="extract bounding boxes from mask files")
    p.add_argument("--masks")
    p.add_argument("--out")
    p.add_argument("--min-area", dest="min_area", type=int, default=None)
    _add_common(p)
    p.set_defaults(run=_cmd_boxes)

    p = subs.add_parser("eval", help="evaluate generated outputs")
    eval_subs = p.add_subparsers(dest="eval_command")
    for name, runner, extras in (
        ("fid", _cmd_eval_fid, ()),
        ("kid", _cmd_eval_kid, ("block_size",)),
        ("sid", _cmd_eval_sid, ("crop", "min_pixels", "report")),
    ):
        q = eval_subs.add_parser(name)
        q.add_argument("--real", help="folder of images (or .sgft feature file)")
        q.add_argument("--gen", help="folder of images (or .sgft feature file)")
        q.add_argument("--dim", type=int, default=None, help="extractor output dim")
        if "block_size" in extras:
            q.add_argument("--block-size", dest="block_size", type=int, default=None)
        if "crop" in extras:
            q.add_argument("--crop", type=int, default=None)
            q.add_argument("--min-pixels", dest="min_pixels", type=int, default=None)
            q.add_argument("--report", default=None, help="write the full report JSON here")
        _add_common(q)
        q.set_defaults(run=runner)

    p = subs.add_parser("version", help="print the package version")
    _add_common(p)
    p.set_defaults(run=lambda args: (print(__version__), 0)[1])

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "command", None) is None:
        parser.print_usage(sys.stderr)
        return 1
    if args.command == "eval" and getattr(args, "eval_command", None) is None:
        parser.print_usage(sys.stderr)
        return 1
    args.parser = parser
    try:
        return args.run(args)
    except SystemExit as exc:  # parser.error from inside a command
        return int(exc.code or 0)
    except (
        ValueError,
        OSError,
        RuntimeError,
        FloatingPointError,
        KeyError,
    ) as exc:
        _log(f"error: {exc}")
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
