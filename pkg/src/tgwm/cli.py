"""Command-line entry point.

Settings resolve in this order (later wins): built-in defaults, ``--config``
YAML file, ``AM_<FLAG>`` environment variables, explicit flags. Every command
that writes files also writes a ``*.run.json`` snapshot of its resolved
settings next to them.

Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import yaml

from . import __version__, backbone as bb_mod, distortion, evaluation, imageio, projector, trainer, watermark
from .losses import LossConfig

logger = logging.getLogger("tgwm")

ENV_PREFIX = "AM_"
CHECKPOINT_NAME = "projector.tgproj"


class UsageError(Exception):
    pass


# -- parser ---------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, d) -> None:
    p.add_argument("--seed", type=int, default=d(0), help="single seed for every random draw")
    p.add_argument("--config", default=d(None), help="YAML file of flag values (flags override it)")
    p.add_argument("--backbone", default=d("stub"), help="backbone adapter name")
    p.add_argument("--checkpoint", default=d(None), help="projector checkpoint; omit for a seeded untrained projector")
    p.add_argument("--hidden-dim", type=int, default=d(2048))
    p.add_argument("--out-dim", type=int, default=d(4096))
    p.add_argument("--jobs", type=int, default=d(1), help="per-image worker threads")
    p.add_argument("--log-level", default=d("WARNING"))


def _data(p, d) -> None:
    p.add_argument("--images", default=d(None), help="image directory")
    p.add_argument("--captions", default=d(None), help="captions file (name#idx<TAB>caption)")
    p.add_argument("--synthetic", type=int, default=d(None), help="use N generated images instead of files")
    p.add_argument("--size", type=int, default=d(224))


def _embed_opts(p, d) -> None:
    p.add_argument("--iterations", type=int, default=d(100))
    p.add_argument("--step-size", type=float, default=d(1e-2))
    p.add_argument("--lambda-w", type=float, default=d(1.0))
    p.add_argument("--mu", type=float, default=d(0.1))
    p.add_argument("--psnr", type=float, default=d(40.0), help="target PSNR floor in dB")


def build_parser(suppress: bool = False) -> argparse.ArgumentParser:
    """Build the parser; with ``suppress`` every default is omitted so only explicit flags appear."""

    def d(value):
        return argparse.SUPPRESS if suppress else value

    parser = argparse.ArgumentParser(prog="tgwm", description="Text-anchored invariant features and feature-space watermarking.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("synth", help="write a synthetic captioned corpus to disk")
    _common(p, d)
    p.add_argument("--n-images", type=int, default=d(64))
    p.add_argument("--size", type=int, default=d(224))
    p.add_argument("--out-dir", required=not suppress)

    p = sub.add_parser("train", help="train the projector")
    _common(p, d)
    _data(p, d)
    p.add_argument("--epochs", type=int, default=d(1))
    p.add_argument("--batch-size", type=int, default=d(64))
    p.add_argument("--lr", type=float, default=d(1e-4))
    p.add_argument("--max-steps", type=int, default=d(None))
    p.add_argument("--margin", type=float, default=d(0.2))
    p.add_argument("--tau", type=float, default=d(0.8))
    p.add_argument("--lambda-decorr", type=float, default=d(0.01))
    p.add_argument("--dropout", type=float, default=d(0.1))
    p.add_argument("--resume", default=d(None), help="checkpoint written by an earlier train run")
    p.add_argument("--out-dir", required=not suppress)

    p = sub.add_parser("keygen", help="generate a secret watermark key")
    _common(p, d)
    p.add_argument("--k", type=int, default=d(10), help="message length in bits")
    p.add_argument("--d", type=int, default=d(None), help="feature dimension (default: projector output dim)")
    p.add_argument("--out", required=not suppress)

    p = sub.add_parser("wm-embed", help="embed a message into an image")
    _common(p, d)
    _embed_opts(p, d)
    p.add_argument("--image", required=not suppress)
    p.add_argument("--key", required=not suppress)
    p.add_argument("--message", required=not suppress, help="bitstring, e.g. 1011001010")
    p.add_argument("--out", required=not suppress, help="output PNG")

    p = sub.add_parser("wm-extract", help="print the message carried by an image")
    _common(p, d)
    p.add_argument("--image", required=not suppress)
    p.add_argument("--key", required=not suppress)
    p.add_argument("--message", default=d(None), help="expected bitstring; also prints bit accuracy")

    p = sub.add_parser("attack", help="apply a named attack or a distortion kind to an image")
    _common(p, d)
    p.add_argument("--image", required=not suppress)
    p.add_argument("--attack", required=not suppress, help="attack-grid name (e.g. blur_k7) or distortion kind")
    p.add_argument("--strength", default=d(None), help="strength for a distortion kind")
    p.add_argument("--out", required=not suppress)

    p = sub.add_parser("eval-invariance", help="clean vs distorted cosine similarity sweep")
    _common(p, d)
    _data(p, d)
    p.add_argument("--strengths", action="append", default=d(None), help="NAME=v1,v2,... (repeatable); default: built-in sweep")
    p.add_argument("--grid", default=d(None), help="JSON/YAML distortion list instead of the test suite")
    p.add_argument("--raw", action="store_true", default=d(False), help="use backbone features without the projector")
    p.add_argument("--out-dir", required=not suppress)

    p = sub.add_parser("eval-compare", help="compare extractors on one distortion grid")
    _common(p, d)
    _data(p, d)
    p.add_argument("--extractors", default=d("backbone,projector"), help="comma-separated registered extractor names")
    p.add_argument("--grid", default=d(None))
    p.add_argument("--out-dir", required=not suppress)

    p = sub.add_parser("eval-linear", help="linear probe on frozen features under distortion")
    _common(p, d)
    _data(p, d)
    p.add_argument("--labels", default=d(None), help="file of name<TAB>label lines (default: synthetic shape labels)")
    p.add_argument("--train-fraction", type=float, default=d(0.7))
    p.add_argument("--iterations", type=int, default=d(500))
    p.add_argument("--grid", default=d(None))
    p.add_argument("--raw", action="store_true", default=d(False))
    p.add_argument("--out-dir", required=not suppress)

    p = sub.add_parser("eval-robustness", help="watermark bit accuracy under the attack grid")
    _common(p, d)
    _data(p, d)
    _embed_opts(p, d)
    p.add_argument("--key", default=d(None), help="key file (default: generate from --seed)")
    p.add_argument("--k", type=int, default=d(10))
    p.add_argument("--grid", default=d(None))
    p.add_argument("--out-dir", required=not suppress)

    p = sub.add_parser("report", help="render markdown tables and curve CSVs from evaluation outputs")
    p.add_argument("--results", required=not suppress)
    p.add_argument("--out-dir", default=d(None))
    p.add_argument("--config", default=d(None))
    p.add_argument("--log-level", default=d("WARNING"))
    return parser


# -- settings resolution --------------------------------------------------------


def _actions(parser: argparse.ArgumentParser, command: str) -> dict[str, argparse.Action]:
    for action in parser._subparsers._group_actions:  # noqa: SLF001 - argparse has no public accessor
        if isinstance(action, argparse._SubParsersAction):  # noqa: SLF001
            return {a.dest: a for a in action.choices[command]._actions if a.dest != "help"}
    return {}


def _coerce(action: argparse.Action, value, source: str):
    if value is None:
        return None
    if isinstance(action, argparse._StoreTrueAction):  # noqa: SLF001
        if isinstance(value, str):
            return value.strip().lower() in ("1", "true", "yes", "on")
        return bool(value)
    if isinstance(action, argparse._AppendAction):  # noqa: SLF001
        return list(value) if isinstance(value, (list, tuple)) else [str(value)]
    if action.type is not None and isinstance(value, str):
        try:
            return action.type(value)
        except ValueError as exc:
            raise UsageError(f"{source}: invalid value {value!r} for --{action.dest.replace('_', '-')}") from exc
    return value


def resolve_settings(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    explicit = vars(build_parser(suppress=True).parse_args(argv))
    actions = _actions(parser, args.command)

    config = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                config = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(config, dict):
            raise UsageError(f"config {args.config} must be a mapping of flag names to values")
        config = {str(k).replace("-", "_"): v for k, v in config.items()}
        unknown = sorted(set(config) - set(actions))
        if unknown:
            raise UsageError(f"config {args.config}: unknown keys for {args.command}: {unknown}")

    for dest, action in actions.items():
        if dest in explicit or dest == "command":
            continue
        env = os.environ.get(ENV_PREFIX + dest.upper())
        if env is not None:
            setattr(args, dest, _coerce(action, env, ENV_PREFIX + dest.upper()))
        elif dest in config:
            setattr(args, dest, _coerce(action, config[dest], args.config))
    for dest, action in actions.items():
        if action.required and getattr(args, dest, None) is None:
            raise UsageError(f"{args.command}: --{dest.replace('_', '-')} is required")
    return args


def write_snapshot(args: argparse.Namespace, path) -> Path:
    path = Path(path)
    snap = {
        "command": args.command,
        "settings": {k: v for k, v in sorted(vars(args).items()) if k != "command"},
        "version": __version__,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(snap, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def _snapshot_beside(args, out_file) -> None:
    out_file = Path(out_file)
    write_snapshot(args, out_file.with_name(out_file.name + ".run.json"))


# -- shared plumbing ------------------------------------------------------------


def _backbone(args):
    return bb_mod.get_backbone(args.backbone, seed=args.seed) if args.backbone == "stub" else bb_mod.get_backbone(args.backbone)


def _projector(args, backbone) -> projector.Projector:
    in_dim = backbone.descriptor.image_dim
    if args.checkpoint:
        params = projector.load_params(args.checkpoint)
        if params.dims.in_dim != in_dim:
            raise ValueError(
                f"checkpoint expects {params.dims.in_dim}-dim backbone features, backbone {args.backbone!r} gives {in_dim}"
            )
    else:
        params = projector.init_params(args.seed, projector.ProjectorDims(in_dim, args.hidden_dim, args.out_dim))
    for p in params.parameters():
        p.requires_grad_(False)
    return params.eval()


def _feature_fn(backbone, params=None):
    if params is None:
        return backbone.encode_image
    return lambda x: params(backbone.encode_image(x))


def _corpus(args) -> list[imageio.CaptionedSample]:
    if args.synthetic:
        return imageio.generate_synthetic_corpus(args.synthetic, args.seed, args.size)
    if not args.images:
        raise UsageError("give --images (with --captions) or --synthetic N")
    if args.captions:
        return imageio.load_captioned_corpus(args.images, args.captions, args.size)
    return [
        imageio.CaptionedSample(imageio.load_image(p, args.size), "", p.name, p.name)
        for p in sorted(Path(args.images).iterdir())
        if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp")
    ]


def _images(args) -> list[tuple[str, torch.Tensor]]:
    images = imageio.unique_images(_corpus(args))
    if not images:
        raise ValueError("no images found")
    return images


def _grid(args, default):
    if getattr(args, "grid", None):
        return [(s.name or s.kind, s) for s in distortion.load_grid(args.grid)]
    return default


def _parse_strengths(items) -> dict[str, list]:
    out = {}
    for item in items or ():
        name, sep, values = item.partition("=")
        if not sep or not values:
            raise UsageError(f"--strengths expects NAME=v1,v2,..., got {item!r}")
        out[name] = [float(v) for v in values.split(",")]
    return out


def _embed_config(args) -> watermark.EmbedConfig:
    return watermark.EmbedConfig(
        lambda_w=args.lambda_w,
        mu_margin=args.mu,
        iterations=args.iterations,
        step_size=args.step_size,
        budget=imageio.PerturbationBudget(args.psnr),
    )


# -- commands -------------------------------------------------------------------


def cmd_synth(args) -> int:
    samples = imageio.generate_synthetic_corpus(args.n_images, args.seed, args.size)
    captions = imageio.export_corpus(samples, args.out_dir)
    write_snapshot(args, Path(args.out_dir) / "synth.run.json")
    print(captions)
    return 0


def cmd_train(args) -> int:
    corpus = _corpus(args)
    backbone = _backbone(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = trainer.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        seed=args.seed,
        loss=LossConfig(args.margin, args.tau, args.lambda_decorr),
        pipeline_seed=args.seed,
        checkpoint_dir=str(out / "checkpoints"),
        hidden_dim=args.hidden_dim,
        out_dim=args.out_dim,
        dropout_rate=args.dropout,
        max_steps=args.max_steps,
        jobs=args.jobs,
    )
    write_snapshot(args, out / "train.run.json")
    metrics_path = out / "metrics.jsonl"
    if args.resume:
        params, metrics = trainer.resume(args.resume, corpus, backbone, cfg, metrics_path)
    else:
        params, metrics = trainer.train(corpus, backbone, cfg, metrics_path=metrics_path)
    projector.save_params(params, out / CHECKPOINT_NAME, meta={"seed": args.seed, "backbone": args.backbone})
    if metrics.steps:
        print(f"steps {metrics.steps[-1]['step']}  final loss {metrics.steps[-1]['total']:.4f}  probe cos {metrics.probe_history[-1]:.4f}")
    print(out / CHECKPOINT_NAME)
    return 0


def cmd_keygen(args) -> int:
    d = args.d
    if d is None:
        d = projector.load_params(args.checkpoint).dims.out_dim if args.checkpoint else args.out_dim
    key = watermark.generate_key(args.seed, args.k, d)
    watermark.save_key(key, args.out)
    _snapshot_beside(args, args.out)
    print(args.out)
    return 0


def cmd_wm_embed(args) -> int:
    msg = watermark.WatermarkMessage.from_bitstring(args.message)
    key = watermark.load_key(args.key)
    backbone = _backbone(args)
    fn = _feature_fn(backbone, _projector(args, backbone))
    img = imageio.load_image(args.image, backbone.descriptor.input_size)
    res = watermark.embed(img, key, msg, fn, cfg=_embed_config(args), rng=np.random.default_rng([args.seed, 5]))
    imageio.save_image(res.image, args.out)
    _snapshot_beside(args, args.out)
    print(f"psnr {res.psnr_db:.2f} dB  message loss {res.initial_loss:.4f} -> {res.final_loss:.4f}")
    if res.infeasible:
        print("error: message loss was not reduced; the output is the unmarked image", file=sys.stderr)
        return 1
    return 0


def cmd_wm_extract(args) -> int:
    key = watermark.load_key(args.key)
    backbone = _backbone(args)
    fn = _feature_fn(backbone, _projector(args, backbone))
    img = imageio.load_image(args.image, backbone.descriptor.input_size)
    decoded = watermark.extract(img, key, fn)
    print(decoded.to_bitstring())
    if args.message:
        truth = watermark.WatermarkMessage.from_bitstring(args.message)
        print(f"bit accuracy {watermark.bit_accuracy(truth, decoded):.4f}")
    return 0


def cmd_attack(args) -> int:
    named = dict(distortion.attack_grid())
    if args.attack in named:
        spec = named[args.attack]
    elif args.attack in distortion.KINDS:
        spec = distortion.DistortionSpec(args.attack)
        if args.strength is not None:
            spec = distortion.with_strength(spec, float(args.strength))
    else:
        raise UsageError(f"unknown attack {args.attack!r}; grid names: {sorted(named)}; kinds: {list(distortion.KINDS)}")
    img = imageio.load_image(args.image, imageio.DEFAULT_SIZE)
    out = distortion.apply(spec, img, np.random.default_rng([args.seed, 6]))
    imageio.save_image(out, args.out)
    _snapshot_beside(args, args.out)
    return 0


def cmd_eval_invariance(args) -> int:
    backbone = _backbone(args)
    fn = _feature_fn(backbone, None if args.raw else _projector(args, backbone))
    images = [img for _, img in _images(args)]
    suite = _grid(args, distortion.test_suite())
    strengths = _parse_strengths(args.strengths)
    if not strengths and not args.grid:
        strengths = {k: list(v) for k, v in distortion.DEFAULT_TEST_STRENGTHS.items()}
    report = evaluation.invariance_sweep(images, fn, suite, strengths, seed=args.seed, jobs=args.jobs)
    paths = evaluation.write_report(report, args.out_dir, "invariance")
    write_snapshot(args, Path(args.out_dir) / "invariance.run.json")
    for r in report.rows:
        print(f"{r.distortion:>18} {evaluation.format_strength(r.strength):>8}  {r.mean:.4f} ± {r.std:.4f} (n={r.n})")
    print(paths[0])
    return 0


def cmd_eval_compare(args) -> int:
    backbone = _backbone(args)
    evaluation.register_extractor("backbone", _feature_fn(backbone))
    evaluation.register_extractor("projector", _feature_fn(backbone, _projector(args, backbone)))
    names = [n.strip() for n in args.extractors.split(",") if n.strip()]
    images = [img for _, img in _images(args)]
    report = evaluation.compare_extractors(images, names, _grid(args, distortion.test_suite()), seed=args.seed, jobs=args.jobs)
    paths = evaluation.write_report(report, args.out_dir, "compare")
    write_snapshot(args, Path(args.out_dir) / "compare.run.json")
    print(paths[0])
    return 0


def _labels(args, samples) -> dict[str, int]:
    if args.labels:
        out = {}
        with open(args.labels, encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                if line.strip():
                    name, _, label = line.rstrip("\n").partition("\t")
                    try:
                        out[name] = int(label)
                    except ValueError:
                        raise ValueError(f"{args.labels}:{n}: bad label {label!r}") from None
        return out
    return {s.image_id: imageio.synthetic_label(s.caption) for s in samples}


def cmd_eval_linear(args) -> int:
    samples = _corpus(args)
    labels = _labels(args, samples)
    images = [(name, img) for name, img in imageio.unique_images(samples) if name in labels]
    if len(images) < 2:
        raise ValueError("need at least two labelled images")
    # stratified split: every class with two or more images lands on both sides
    rng = np.random.default_rng([args.seed, 8])
    train, test = [], []
    for c in sorted({labels[n] for n, _ in images}):
        members = [(img, c) for n, img in images if labels[n] == c]
        order = rng.permutation(len(members))
        n_train = max(1, min(len(members) - 1, int(round(args.train_fraction * len(members))))) if len(members) > 1 else 1
        train += [members[i] for i in order[:n_train]]
        test += [members[i] for i in order[n_train:]]
    if not test:
        raise ValueError("need at least one class with two or more images")
    backbone = _backbone(args)
    fn = _feature_fn(backbone, None if args.raw else _projector(args, backbone))
    grid = _grid(args, [("rotation", distortion.DistortionSpec("rotation", {"degrees": 20.0}, name="rotation"))])
    name = "backbone" if args.raw else "projector"
    report = evaluation.linear_probe(train, test, fn, grid, iterations=args.iterations, seed=args.seed, jobs=args.jobs, name=name)
    paths = evaluation.write_report(report, args.out_dir, "linear_probe")
    write_snapshot(args, Path(args.out_dir) / "linear_probe.run.json")
    for r in report.rows:
        print(f"{r.distortion:>18} {evaluation.format_strength(r.strength):>8}  {r.accuracy:.4f} (n={r.n})")
    print(paths[0])
    return 0


def cmd_eval_robustness(args) -> int:
    backbone = _backbone(args)
    params = _projector(args, backbone)
    fn = _feature_fn(backbone, params)
    key = watermark.load_key(args.key) if args.key else watermark.generate_key(args.seed, args.k, params.dims.out_dim)
    images = [img for _, img in _images(args)]
    rng = np.random.default_rng([args.seed, 9])
    messages = [watermark.WatermarkMessage.random(key.k, rng) for _ in images]
    report = evaluation.robustness_grid(
        images, key, messages, fn, _grid(args, distortion.attack_grid()), _embed_config(args), seed=args.seed, jobs=args.jobs
    )
    paths = evaluation.write_report(report, args.out_dir, "robustness")
    write_snapshot(args, Path(args.out_dir) / "robustness.run.json")
    for r in report.rows:
        print(f"{r.attack:>22}  {r.accuracy:.4f} (n={r.n_images})")
    if report.failures:
        print(f"{len(report.failures)} embeddings failed; see {paths[1]}", file=sys.stderr)
    print(paths[0])
    return 0


def cmd_report(args) -> int:
    written = evaluation.build_report(args.results, args.out_dir)
    for p in written:
        print(p)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "keygen": cmd_keygen,
    "wm-embed": cmd_wm_embed,
    "wm-extract": cmd_wm_extract,
    "attack": cmd_attack,
    "eval-invariance": cmd_eval_invariance,
    "eval-compare": cmd_eval_compare,
    "eval-linear": cmd_eval_linear,
    "eval-robustness": cmd_eval_robustness,
    "report": cmd_report,
}

DOMAIN_ERRORS = (
    ValueError,
    OSError,
    KeyError,
    watermark.EmbeddingError,
    trainer.TrainingDivergedError,
    evaluation.ReportError,
    RuntimeError,
)


def run(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = resolve_settings(argv)
    except SystemExit as exc:  # argparse usage errors and --help/--version
        return int(exc.code or 0) if not isinstance(exc.code, str) else 2
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except DOMAIN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
