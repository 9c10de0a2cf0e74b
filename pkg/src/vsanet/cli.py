"""Command-line entry points: ``vsanet {synth-data,train,translate,evaluate}``.

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
Each command prints tab-delimited ``key<TAB>value`` lines on stdout.
Seed precedence is ``--seed`` flag, then the VSANET_SEED environment variable, then the config.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import torch

from vsanet.core import TrainConfig, load_config

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _emit(*fields) -> None:
    print("\t".join(str(f) for f in fields))


def resolve_seed(flag: int | None, fallback: int) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("VSANET_SEED")
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"VSANET_SEED must be an integer, got {env!r}") from None
    return fallback


def _image_paths(items: list[str]) -> list[Path]:
    paths = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            paths += sorted(q for q in p.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES)
        else:
            paths.append(p)
    if not paths:
        raise UsageError(f"no images found in {', '.join(items)}")
    return paths


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth_data(args) -> int:
    from vsanet.data import synth_corpus

    seed = resolve_seed(args.seed, 0)
    path, manifest = synth_corpus(args.subjects, args.per_subject, seed, args.image_size, args.out)
    _emit("manifest", path)
    _emit("images", len(manifest))
    for key, n in manifest.counts().items():
        _emit(key, n)
    return EXIT_OK


def cmd_train(args) -> int:
    from vsanet.data import FaceDataset, load_manifest
    from vsanet.training import train_svae, train_translation

    if args.stage == "translation" and args.svae_ckpt is None:
        raise UsageError("--stage translation requires --svae-ckpt")
    config = load_config(args.config) if args.config else TrainConfig()
    config = config.replace(seed=resolve_seed(args.seed, config.seed))
    dataset = FaceDataset(load_manifest(args.manifest), config.image_size)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".ndjson")
    if args.stage == "svae":
        result = train_svae(dataset, config, out_path=out, log_path=log_path)
    else:
        result = train_translation(dataset, args.svae_ckpt, config, out_path=out, log_path=log_path)
    _emit("checkpoint", result.checkpoint)
    _emit("log", log_path)
    _emit("iterations", result.state.iteration)
    if args.plot:
        from vsanet.plotting import loss_curves

        _emit("figure", loss_curves(result.log, args.plot))
    if result.log:
        for key, value in result.log[-1].items():
            if key != "iteration":
                _emit(f"final_{key}", value)
    return EXIT_OK


def cmd_translate(args) -> int:
    from vsanet.data import load_image
    from vsanet.plotting import save_image, translation_grid
    from vsanet.training import Translator, load_checkpoint

    if args.mode == "exemplar" and not args.exemplar:
        raise UsageError("--mode exemplar requires --exemplar")
    models = load_checkpoint(args.ckpt)
    size = models.config.image_size
    translator = Translator(models, seed=resolve_seed(args.seed, models.config.seed))
    inputs = _image_paths(args.input)
    nir = torch.stack([load_image(p, size) for p in inputs])
    out = Path(args.out)
    written = []
    if args.mode == "exemplar":
        ex_paths = _image_paths(args.exemplar)
        vis = torch.stack([load_image(p, size) for p in ex_paths])
        z = translator.latent_from_exemplar(vis, sample=not args.posterior_mean)
        grid = torch.stack([translator.translate(x.expand(len(vis), -1, -1, -1), z) for x in nir])
        for i, src in enumerate(inputs):
            for j, ex in enumerate(ex_paths):
                written.append(save_image(grid[i, j], out / f"{src.stem}__{ex.stem}.png"))
    else:
        vis = None
        grid = translator.prior(nir)[:, None]
        for i, src in enumerate(inputs):
            written.append(save_image(grid[i, 0], out / f"{src.stem}__prior.png"))
    for p in written:
        _emit("output", p)
    _emit("grid", translation_grid(nir, vis, grid, out / "grid.png"))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from vsanet.data import load_manifest
    from vsanet.evaluation import far_threshold, run_protocol
    from vsanet.losses import StandInEmbedder
    from vsanet.training import Translator, load_checkpoint

    manifest = load_manifest(args.manifest)
    translate = None
    image_size = args.image_size
    seed = resolve_seed(args.seed, 0)
    if args.ckpt:
        models = load_checkpoint(args.ckpt)
        image_size = models.config.image_size
        translate = Translator(models, seed=seed).prior
    embedder = StandInEmbedder()
    sink = {}
    report = run_protocol(manifest, embedder, image_size or 64, translate=translate,
                          score_dump=args.scores, score_sink=sink)
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _emit("report", report_path)
    for mode in ("raw_nir", "translated"):
        for key, value in report.get(mode, {}).items():
            _emit(f"{mode}.{key}", f"{value:.6f}")
    _emit("n_probe", report["n_probe"])
    _emit("n_gallery", report["n_gallery"])
    if args.figures:
        from vsanet.plotting import score_histogram

        for mode, sm in sink.items():
            genuine, impostor = sm.genuine_impostor()
            path = score_histogram(genuine, impostor, Path(args.figures) / f"scores_{mode}.png",
                                   title=mode, threshold=far_threshold(impostor, 1e-2))
            _emit("figure", path)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vsanet", description="NIR to VIS face translation pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", help="render a synthetic NIR/VIS corpus and manifest")
    p.add_argument("--subjects", type=int, required=True)
    p.add_argument("--per-subject", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", type=int, default=64)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train the SVAE or the translation network")
    p.add_argument("--stage", choices=("svae", "translation"), required=True)
    p.add_argument("--config", help="JSON configuration; defaults apply to missing fields")
    p.add_argument("--manifest", required=True)
    p.add_argument("--svae-ckpt", help="stage-1 checkpoint (required for --stage translation)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="NDJSON loss log (default: checkpoint path with .ndjson)")
    p.add_argument("--plot", help="write loss curves to this PNG")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="translate NIR images to VIS")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", nargs="+", required=True, help="NIR images or a directory")
    p.add_argument("--mode", choices=("exemplar", "prior"), default="exemplar")
    p.add_argument("--exemplar", nargs="+", help="VIS exemplar images or a directory")
    p.add_argument("--posterior-mean", action="store_true",
                   help="use the exemplar posterior mean instead of a sample")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="run the gallery/probe protocol")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", help="translation checkpoint; adds translated-probe metrics")
    p.add_argument("--embedder", choices=("standin",), default="standin")
    p.add_argument("--image-size", type=int, help="image size without --ckpt (default 64)")
    p.add_argument("--report", required=True, help="JSON report path")
    p.add_argument("--scores", help="CSV path stem for score matrix dumps")
    p.add_argument("--figures", help="directory for score histograms")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"vsanet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        print(f"vsanet {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
