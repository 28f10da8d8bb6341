"""Command-line entry point: ``dsfas <subcommand> ...``.

Every subcommand writes into one output directory, which is assembled in a
temporary sibling and renamed into place once complete.  The resolved
configuration is echoed there as ``config.txt``; passing that file back with
``--config`` reproduces the run.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .data import PATTERNS, SynthSpec, generate_dataset, load_directory, make_protocols, read_image, save_png
from .evaluate import (
    reconstruct,
    run_protocol,
    scores_csv,
    summary_json,
    summary_table,
    translate,
    features_csv,
)
from .models import CheckpointError, _atomic_write, checkpoint_bytes, load_checkpoint
from .tensor import Tensor
from .trainer import DivergenceError, TrainConfig, train_stage1, train_stage2

log = logging.getLogger("dsfas")

OUTPUT_ROOT_ENV = "DSFAS_OUTPUT_ROOT"
ABLATE_FLAGS = {
    "no-stage1": "disable_stage1",
    "no-discriminator": "disable_discriminator",
    "no-aux": "disable_aux_classifier",
    "no-triplet": "disable_triplet",
    "normal-triplet": "normal_triplet_only",
}


class UsageError(Exception):
    """Bad arguments or configuration (exit code 2)."""


# ---------------------------------------------------------------------------
# configuration


def _flatten(cfg: TrainConfig) -> dict[str, object]:
    flat = {}
    for k, v in cfg.to_dict().items():
        if isinstance(v, dict):
            flat.update({f"{k}.{kk}": vv for kk, vv in v.items()})
        else:
            flat[k] = v
    return flat


def _coerce(key: str, raw: str, like):
    try:
        if isinstance(like, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError:
        raise UsageError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_pairs(lines, source: str) -> dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for n, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_config(config_file=None, overrides=(), ablate=(), seed=None) -> TrainConfig:
    """Defaults, then the config file, then ``--set`` overrides, then flags."""
    flat = _flatten(TrainConfig())
    layers = []
    if config_file is not None:
        try:
            text = Path(config_file).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from None
        layers.append(parse_pairs(text.splitlines(), str(config_file)))
    layers.append(parse_pairs(overrides, "--set"))
    for layer in layers:
        for k, v in layer.items():
            if k not in flat:
                raise UsageError(f"unknown config key {k!r}")
            flat[k] = _coerce(k, v, flat[k])
    for a in ablate:
        flat[ABLATE_FLAGS[a]] = True
    if seed is not None:
        flat["seed"] = seed
    nested: dict = {}
    for k, v in flat.items():
        if "." in k:
            head, tail = k.split(".", 1)
            nested.setdefault(head, {})[tail] = v
        else:
            nested[k] = v
    try:
        return TrainConfig.from_dict(nested)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def config_text(cfg: TrainConfig) -> str:
    return "".join(f"{k}={v!r}\n" if isinstance(v, float) else f"{k}={v}\n" for k, v in sorted(_flatten(cfg).items()))


# ---------------------------------------------------------------------------
# output directories


class OutputDir:
    """Collects files in a temporary directory and publishes them on commit."""

    def __init__(self, target: Path, force: bool):
        self.target = Path(target)
        if self.target.exists() and (not self.target.is_dir() or any(self.target.iterdir())) and not force:
            raise UsageError(f"output directory {self.target} is not empty (use --force)")
        self.target.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(dir=self.target.parent, prefix=f".{self.target.name}.", suffix=".tmp"))

    def path(self, rel: str) -> Path:
        p = self.tmp / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write(self, rel: str, data: bytes | str) -> None:
        if isinstance(data, str):
            data = data.encode()
        _atomic_write(self.path(rel), data)

    def commit(self) -> None:
        trash = None
        if self.target.exists():
            trash = self.target.with_name(f".{self.target.name}.old.{os.getpid()}")
            os.replace(self.target, trash)
        os.replace(self.tmp, self.target)
        if trash is not None:
            shutil.rmtree(trash, ignore_errors=True)

    def discard(self) -> None:
        shutil.rmtree(self.tmp, ignore_errors=True)


def _output_target(args) -> Path:
    if args.out is not None:
        return Path(args.out)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / args.command


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, out: OutputDir) -> None:
    patterns = tuple(p.strip() for p in args.patterns.split(",") if p.strip())
    unknown = [p for p in patterns if p not in PATTERNS]
    if unknown:
        raise UsageError(f"unknown pattern(s) {unknown}; choose from {', '.join(PATTERNS)}")
    try:
        spec = SynthSpec(args.image_size, args.n_live, args.n_per_attack, patterns, args.noise, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ds = generate_dataset(spec)
    for s in ds:
        folder = "live" if s.is_live else s.attack_type
        save_png(s.image.data, out.path(f"{folder}/{s.id}.png"))
    out.write("manifest.csv", ds.manifest_csv())
    out.write("config.txt", "".join(f"{k}={v}\n" for k, v in sorted(dataclasses.asdict(spec).items())))
    log.info("wrote %d images", len(ds))


def _load_data(args, cfg: TrainConfig):
    try:
        ds = load_directory(args.data, cfg.image_size)
    except (FileNotFoundError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    if ds.skipped:
        log.warning("skipped %d unreadable images", ds.skipped)
    return ds


def cmd_train(args, out: OutputDir) -> None:
    cfg = resolve_config(args.config, args.set, args.ablate, args.seed)
    ds = _load_data(args, cfg)
    if args.stage == 1:
        ckpt, tlog = train_stage1(cfg, ds.live())
    else:
        stage1 = None
        if not cfg.disable_stage1:
            if args.stage1_ckpt is None:
                raise UsageError("stage 2 needs --stage1-ckpt (or --ablate no-stage1)")
            stage1 = load_checkpoint(args.stage1_ckpt, expected_stage="stage1")
        ckpt, tlog = train_stage2(cfg, stage1, ds)
    out.write(f"stage{args.stage}.ckpt", checkpoint_bytes(ckpt))
    out.write(f"stage{args.stage}_log.csv", tlog.to_csv())
    out.write("config.txt", config_text(cfg))


def _protocol_job(job):
    cfg, dataset, protocol = job
    return run_protocol(cfg, dataset, protocol)


def cmd_protocol(args, out: OutputDir) -> None:
    cfg = resolve_config(args.config, args.set, args.ablate, args.seed)
    ds = _load_data(args, cfg)
    try:
        protocols = make_protocols(ds)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    jobs = [(cfg, ds, p) for p in protocols]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_protocol_job, jobs))
    else:
        results = [_protocol_job(j) for j in jobs]
    reports = {}
    timing = ["protocol,seconds"]
    for res in results:
        name = res.protocol.name
        reports[name] = res.report
        out.write(f"{name}/report.json", res.report.to_json())
        out.write(f"{name}/report.txt", res.report.table())
        out.write(f"{name}/scores.csv", scores_csv(res.test_scores))
        out.write(f"{name}/train_scores.csv", scores_csv(res.train_scores))
        out.write(f"{name}/stage1.ckpt", checkpoint_bytes(res.stage1))
        out.write(f"{name}/stage2.ckpt", checkpoint_bytes(res.stage2))
        out.write(f"{name}/stage1_log.csv", res.stage1_log.to_csv())
        out.write(f"{name}/stage2_log.csv", res.stage2_log.to_csv())
        timing.append(f"{name},{res.seconds:.3f}")
        log.info("%s: AUC %.4f ACER %.4f (%.1fs)", name, res.report.auc, res.report.acer, res.seconds)
    table = summary_table(reports)
    out.write("summary.txt", table)
    out.write("summary.json", summary_json(reports))
    out.write("timing.csv", "\n".join(timing) + "\n")  # wall-clock, the only non-reproducible file
    out.write("config.txt", config_text(cfg))
    print(table, end="")


def cmd_translate(args, out: OutputDir) -> None:
    ckpt = load_checkpoint(args.ckpt, expected_stage="stage2")
    size = ckpt.arch["image_size"]
    try:
        a, b = (read_image(p, size) for p in (args.image_a, args.image_b))
    except OSError as exc:
        raise UsageError(f"cannot read image: {exc}") from None
    ta, tb = translate(ckpt, Tensor(a), Tensor(b))
    ra, rb = reconstruct(ckpt, Tensor(a)), reconstruct(ckpt, Tensor(b))
    images = {"a": a, "b": b, "a_translated": ta, "b_translated": tb, "a_reconstruction": ra, "b_reconstruction": rb}
    for name, img in images.items():
        save_png(img, out.path(f"{name}.png"))
    # rows: inputs, translations, reconstructions
    grid = np.concatenate(
        [np.concatenate(pair, axis=2) for pair in ((a, b), (ta, tb), (ra, rb))], axis=1
    )
    save_png(grid, out.path("grid.png"))


def cmd_export_features(args, out: OutputDir) -> None:
    ckpt = load_checkpoint(args.ckpt, expected_stage="stage2")
    cfg = TrainConfig.from_dict(ckpt.config) if ckpt.config else TrainConfig(**ckpt.arch)
    ds = _load_data(args, cfg)
    out.write("features.csv", features_csv(ckpt, ds))


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "protocol": cmd_protocol,
    "translate": cmd_translate,
    "export-features": cmd_export_features,
}


def _add_train_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="directory with live/ and one folder per attack type")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    p.add_argument("--ablate", action="append", default=[], choices=sorted(ABLATE_FLAGS))
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dsfas", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", help=f"output directory (default: ${OUTPUT_ROOT_ENV}/<command>)")
        p.add_argument("--force", action="store_true", help="replace a non-empty output directory")

    p = sub.add_parser("synth", help="generate a synthetic image dataset")
    common(p)
    p.add_argument("--patterns", default=",".join(SynthSpec().patterns))
    p.add_argument("--n-live", type=int, default=SynthSpec().n_live)
    p.add_argument("--n-per-attack", type=int, default=SynthSpec().n_per_attack)
    p.add_argument("--image-size", type=int, default=SynthSpec().image_size)
    p.add_argument("--noise", type=float, default=SynthSpec().noise)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train stage 1 or stage 2")
    common(p)
    _add_train_options(p)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--stage1-ckpt")

    p = sub.add_parser("protocol", help="run every leave-one-attack-type-out protocol")
    common(p)
    _add_train_options(p)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("translate", help="swap spoof features between two images")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("image_a")
    p.add_argument("image_b")

    p = sub.add_parser("export-features", help="dump live and spoof latents as CSV")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    out = None
    try:
        out = OutputDir(_output_target(args), args.force)
        COMMANDS[args.command](args, out)
        out.commit()
        return 0
    except UsageError as exc:
        print(f"dsfas {args.command}: error: {exc}", file=sys.stderr)
        code = 2
    except (DivergenceError, CheckpointError, OSError, ValueError) as exc:
        print(f"dsfas {args.command}: failed: {exc}", file=sys.stderr)
        code = 1
    if out is not None:
        out.discard()
    return code


if __name__ == "__main__":
    sys.exit(main())
