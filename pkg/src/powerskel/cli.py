"""Command-line surface for the pipeline.

Subcommands: gen, saf, simulate, collect, train, eval, render, ablate.
Every command writes a run manifest (command, config snapshot, seed, paths,
SHA-256 of produced artifacts) into its output directory so a run can be
reproduced from the manifest alone. Flag precedence: command line > config
file (--config, JSON) > built-in defaults. POWERSKEL_DATA_DIR sets the
default data root.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, datamodel, netsim, saf as saf_mod, synth, viz
from .checkpoint import load_ckdformer, save_ckdformer
from .distill import SinkhornConfig
from .pck import PCKConfig
from .synth import AugmentConfig, GeneratorConfig
from .train import TrainConfig, evaluate, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    """argparse that signals usage errors with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _data_root() -> Path:
    return Path(os.environ.get("POWERSKEL_DATA_DIR", "data"))


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_run_manifest(out_dir: Path, command: str, args: argparse.Namespace,
                       inputs: list[Path], outputs: list[Path]) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": {k: v for k, v in vars(args).items() if k not in ("func", "config")},
        "seed": getattr(args, "seed", None),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "artifact_sha256": {str(p): _sha256(Path(p)) for p in outputs if Path(p).is_file()},
        "created_unix": int(time.time()),
        "version": __version__,
    }
    path = out_dir / "run_manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return path


def _saf_config(args) -> saf_mod.SAFConfig:
    return saf_mod.SAFConfig(
        mu=args.mu,
        solver=args.solver,
        ridge_lambda=args.ridge_lambda,
        shared_dictionary_from_first_sample=args.shared_dictionary,
    )


def _augment_config(args) -> AugmentConfig:
    return AugmentConfig(
        strong_noise_sigma=args.aug_noise,
        weak_shift_max=args.aug_shift,
        seed=args.seed,
    )


def _sinkhorn_config(args) -> SinkhornConfig:
    return SinkhornConfig(
        epsilon=args.sinkhorn_epsilon,
        niter=args.sinkhorn_niter,
        thresh=args.sinkhorn_thresh,
    )


def _train_config(args, **overrides) -> TrainConfig:
    base = dict(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
        use_saf=args.saf,
        use_ckd=args.ckd,
        students=args.students,
        shared_backbone=not args.non_shared,
        blocks=args.blocks,
        heads=args.heads,
        d_ff=args.d_ff,
        kernel=args.kernel,
        head_hidden=args.head_hidden,
        single_token=args.single_token,
        beta=args.beta,
        cosine_lr=args.cosine_lr,
        grad_clip=args.grad_clip,
    )
    base.update(overrides)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    topology = datamodel.make_topology(args.sensors, args.subcarriers)
    config = GeneratorConfig(
        seed=args.seed,
        n_train=args.train,
        n_test=args.test,
        topology=topology,
        noise_sigma=args.noise_sigma,
        motion=args.motion,
    )
    train_ds, test_ds = synth.generate_dataset(config)
    out = Path(args.out)
    meta = {
        "seed": args.seed,
        "generator": {
            "noise_sigma": args.noise_sigma,
            "motion": args.motion,
        },
        "filtered": False,
    }
    paths = [
        datamodel.save_dataset(train_ds, out, **meta),
        datamodel.save_dataset(test_ds, out, **meta),
    ]
    write_run_manifest(out, "gen", args, [], paths + [out / "manifest.json"])
    print(f"wrote {len(train_ds)} train / {len(test_ds)} test samples to {out}")
    return EXIT_OK


def cmd_saf(args) -> int:
    src = Path(args.data)
    out = Path(args.out)
    config = _saf_config(args)
    written = []
    for split in args.splits:
        dataset = datamodel.load_dataset(src, split)
        result = saf_mod.saf_run([s.csi for s in dataset.samples], dataset.topology, config)
        filtered_samples = []
        for sample, rec in zip(dataset.samples, result.reconstructions):
            csi = datamodel.CSIFrame(
                timestamp_ms=sample.csi.timestamp_ms,
                values=rec.reshape(dataset.topology.e, dataset.topology.f),
                sequence_no=sample.csi.sequence_no,
            )
            filtered_samples.append(
                datamodel.Sample(csi=csi, label=sample.label, visibility=sample.visibility)
            )
        filtered = datamodel.Dataset(
            topology=dataset.topology, samples=tuple(filtered_samples), split=split
        )
        written.append(datamodel.save_dataset(filtered, out, filtered=True))
        if result.h_diverged:
            print(f"note: filter state diverged on split {split} (reconstruction unaffected)")
    write_run_manifest(out, "saf", args, [src / "manifest.json"], written)
    print(f"filtered {args.splits} -> {out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    dataset = datamodel.load_dataset(Path(args.data), args.split)
    report = netsim.run_sensors(
        dataset, args.rate, (args.host, args.port), limit=args.limit
    )
    print(
        f"sent {report.frames_sent} path-frames for {report.samples_sent} samples "
        f"in {report.duration_s:.2f}s to {args.host}:{args.port}"
    )
    return EXIT_OK


def cmd_collect(args) -> int:
    topology = datamodel.make_topology(args.sensors, args.subcarriers)
    frames, stats = netsim.collect(
        topology,
        host=args.host,
        port=args.port,
        timeout_ms=args.timeout_ms,
        stop_after=args.frames,
        idle_timeout_s=args.idle_timeout,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for item in frames:
            fh.write(
                json.dumps(
                    {
                        "timestamp_ms": item.frame.timestamp_ms,
                        "sequence_no": item.frame.sequence_no,
                        "csi": item.frame.values.reshape(-1).tolist(),
                        "missing_paths": list(item.missing_paths),
                    }
                )
            )
            fh.write("\n")
    print(stats.report())
    print(f"wrote {len(frames)} frames to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    dataset = datamodel.load_dataset(Path(args.data), "train")
    config = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def checkpoint_hook(epoch, model, stats):
        if args.checkpoint_every and (epoch + 1) % args.checkpoint_every == 0:
            save_ckdformer(
                model, out / f"checkpoint_epoch_{epoch + 1:04d}.ckpt", seed=config.seed,
                extra={"use_saf": config.use_saf, "epoch": epoch + 1},
            )

    result = train(
        dataset,
        config,
        sinkhorn=_sinkhorn_config(args),
        augment=_augment_config(args),
        saf_config=_saf_config(args),
        progress=True,
        on_epoch=checkpoint_hook,
    )
    ckpt = out / "checkpoint_final.ckpt"
    save_ckdformer(
        result.model,
        ckpt,
        seed=config.seed,
        extra={
            "use_saf": config.use_saf,
            "train_config": dataclasses.asdict(config),
        },
    )
    metrics = out / "metrics.jsonl"
    with open(metrics, "w", encoding="utf-8") as fh:
        for stats in result.history:
            fh.write(json.dumps(stats.as_dict()))
            fh.write("\n")
    write_run_manifest(out, "train", args, [Path(args.data) / "manifest.json"], [ckpt, metrics])
    print(f"final mean loss {result.loss_curve()[-1]:.6f}; checkpoint at {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    dataset = datamodel.load_dataset(Path(args.data), args.split)
    model, header = load_ckdformer(Path(args.checkpoint))
    use_saf = bool(header.get("extra", {}).get("use_saf", False))
    result = evaluate(
        dataset,
        model,
        use_saf=use_saf,
        saf_config=_saf_config(args),
        pck_config=PCKConfig(),
        student=args.student,
    )
    print(result.report_text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report_path = out / "pck_report.txt"
        report_path.write_text(result.report_text + "\n", encoding="utf-8")
        sidecar = out / "pck_report.json"
        with open(sidecar, "w", encoding="utf-8") as fh:
            json.dump(
                {
                    "alphas": list(result.table.alphas),
                    "keypoints": list(datamodel.KEYPOINT_NAMES),
                    "values_pct": (result.table.values * 100.0).tolist(),
                    "averages_pct": (result.table.averages() * 100.0).tolist(),
                    "excluded_samples": result.table.excluded_samples,
                },
                fh,
                indent=2,
            )
            fh.write("\n")
        write_run_manifest(out, "eval", args, [Path(args.checkpoint)], [report_path, sidecar])
    return EXIT_OK


def cmd_render(args) -> int:
    dataset = datamodel.load_dataset(Path(args.data), args.split)
    model, header = load_ckdformer(Path(args.checkpoint))
    use_saf = bool(header.get("extra", {}).get("use_saf", False))
    result = evaluate(dataset, model, use_saf=use_saf, saf_config=_saf_config(args))
    gts = [s.skeleton() for s in dataset.samples]
    out = Path(args.out)
    written = viz.render_predictions(result.predictions, gts, out, limit=args.limit)
    write_run_manifest(out, "render", args, [Path(args.checkpoint)], written)
    print(f"wrote {len(written)} overlays to {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    data_dir = Path(args.data)
    train_ds = datamodel.load_dataset(data_dir, "train")
    test_ds = datamodel.load_dataset(data_dir, "test")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = [
        ("base", False, False),
        ("saf", True, False),
        ("ckd", False, True),
        ("saf+ckd", True, True),
    ]
    rows = []
    outputs = []
    for name, use_saf, use_ckd in grid:
        config = _train_config(args, use_saf=use_saf, use_ckd=use_ckd)
        result = train(
            train_ds,
            config,
            sinkhorn=_sinkhorn_config(args),
            augment=_augment_config(args),
            saf_config=_saf_config(args),
        )
        ev = evaluate(test_ds, result.model, use_saf=use_saf, saf_config=_saf_config(args))
        rows.append((name, ev.table.averages() * 100.0, ev.table.alphas))
        ckpt = out / f"checkpoint_{name.replace('+', '_')}.ckpt"
        save_ckdformer(result.model, ckpt, seed=config.seed,
                       extra={"use_saf": use_saf, "variant": name})
        outputs.append(ckpt)
        print(f"{name}: average PCK {[f'{v:.2f}' for v in rows[-1][1]]}")
    alphas = rows[0][2]
    lines = ["variant".ljust(10) + "".join(f"PCK@{round(a*100):d}".rjust(9) for a in alphas)]
    for name, averages, _ in rows:
        lines.append(name.ljust(10) + "".join(f"{v:.2f}".rjust(9) for v in averages))
    table_text = "\n".join(lines)
    table_path = out / "ablation.txt"
    table_path.write_text(table_text + "\n", encoding="utf-8")
    outputs.append(table_path)
    write_run_manifest(out, "ablate", args, [data_dir / "manifest.json"], outputs)
    print(table_text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_saf_flags(p) -> None:
    p.add_argument("--mu", type=float, default=500.0, help="filter step size")
    p.add_argument("--solver", choices=["min_norm", "ridge"], default="min_norm")
    p.add_argument("--ridge-lambda", type=float, default=0.0, dest="ridge_lambda")
    p.add_argument("--shared-dictionary", action="store_true", dest="shared_dictionary",
                   help="build one dictionary from the first frame instead of per frame")


def _add_train_flags(p) -> None:
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=32, dest="batch_size")
    p.add_argument("--lr", type=float, default=0.2)
    p.add_argument("--saf", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--ckd", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--students", type=int, default=2)
    p.add_argument("--non-shared", action="store_true", dest="non_shared",
                   help="give each student its own backbone")
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--d-ff", type=int, default=64, dest="d_ff")
    p.add_argument("--kernel", type=int, default=5)
    p.add_argument("--head-hidden", type=int, default=64, dest="head_hidden")
    p.add_argument("--single-token", action="store_true", dest="single_token",
                   help="treat the flattened frame as one attention token")
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--cosine-lr", action="store_true", dest="cosine_lr")
    p.add_argument("--grad-clip", type=float, default=5.0, dest="grad_clip")
    p.add_argument("--aug-noise", type=float, default=0.05, dest="aug_noise")
    p.add_argument("--aug-shift", type=int, default=2, dest="aug_shift")
    p.add_argument("--sinkhorn-epsilon", type=float, default=0.01, dest="sinkhorn_epsilon")
    p.add_argument("--sinkhorn-niter", type=int, default=100, dest="sinkhorn_niter")
    p.add_argument("--sinkhorn-thresh", type=float, default=1e-6, dest="sinkhorn_thresh")
    _add_saf_flags(p)


def build_parser() -> _Parser:
    parser = _Parser(prog="powerskel", description=__doc__)
    parser.add_argument("--version", action="version", version=f"powerskel {__version__}")
    parser.add_argument("--config", type=str, default=None,
                        help="JSON file of flag defaults (command line overrides)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic paired dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", type=int, default=512)
    p.add_argument("--test", type=int, default=128)
    p.add_argument("--sensors", type=int, default=4)
    p.add_argument("--subcarriers", type=int, default=16)
    p.add_argument("--noise-sigma", type=float, default=0.05, dest="noise_sigma")
    p.add_argument("--motion", choices=list(synth.MOTION_TEMPLATES) + ["mixed"], default="mixed")
    p.add_argument("--out", type=str, default=str(_data_root() / "synthetic"))
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("saf", help="filter a dataset with sparse adaptive filtering")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data", type=str, default=str(_data_root() / "synthetic"))
    p.add_argument("--splits", nargs="+", default=["train", "test"])
    p.add_argument("--out", type=str, required=True)
    _add_saf_flags(p)
    p.set_defaults(func=cmd_saf)

    p = sub.add_parser("simulate", help="replay a dataset over UDP at a fixed rate")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data", type=str, default=str(_data_root() / "synthetic"))
    p.add_argument("--split", default="train")
    p.add_argument("--rate", type=float, default=30.0)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=netsim.DEFAULT_PORT)
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("collect", help="run the UDP ingestion server")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=netsim.DEFAULT_PORT)
    p.add_argument("--sensors", type=int, default=4)
    p.add_argument("--subcarriers", type=int, default=16)
    p.add_argument("--timeout-ms", type=int, default=200, dest="timeout_ms")
    p.add_argument("--frames", type=int, default=None, help="stop after this many frames")
    p.add_argument("--idle-timeout", type=float, default=5.0, dest="idle_timeout")
    p.add_argument("--out", type=str, default=str(_data_root() / "collected.jsonl"))
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("train", help="train the model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data", type=str, default=str(_data_root() / "synthetic"))
    p.add_argument("--out", type=str, default=str(_data_root() / "run"))
    p.add_argument("--checkpoint-every", type=int, default=0, dest="checkpoint_every",
                   help="also write a checkpoint every N epochs (0 = final only)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint with the PCK metric")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data", type=str, default=str(_data_root() / "synthetic"))
    p.add_argument("--split", default="test")
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--student", type=int, default=None,
                   help="evaluate one student instead of the consensus")
    p.add_argument("--out", type=str, default=None)
    _add_saf_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render predicted vs ground-truth skeleton overlays")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data", type=str, default=str(_data_root() / "synthetic"))
    p.add_argument("--split", default="test")
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--out", type=str, default=str(_data_root() / "overlays"))
    p.add_argument("--limit", type=int, default=8)
    _add_saf_flags(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("ablate", help="run the 2x2 SAF/CKD ablation grid")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data", type=str, default=str(_data_root() / "synthetic"))
    p.add_argument("--out", type=str, default=str(_data_root() / "ablation"))
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    # precedence: command line > config file > defaults
    if "--config" in argv:
        idx = argv.index("--config")
        if idx + 1 >= len(argv):
            print("error: --config needs a path", file=sys.stderr)
            return EXIT_USAGE
        try:
            with open(argv[idx + 1], "r", encoding="utf-8") as fh:
                defaults = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            print(f"error: cannot read config file: {exc}", file=sys.stderr)
            return EXIT_USAGE
        for action in parser._subparsers._group_actions:
            for sub_parser in getattr(action, "choices", {}).values():
                known = {a.dest for a in sub_parser._actions}
                sub_parser.set_defaults(**{k: v for k, v in defaults.items() if k in known})
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError, LookupError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
