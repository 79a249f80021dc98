"""deltastyle-bridge: export embeddings into the pipeline's file formats."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import encoders, export


def _image_encoder(args):
    if args.backend == "stub":
        return encoders.StubImageEncoder(clip_dim=args.clip_dim)
    return encoders.ClipImageEncoder(args.clip_model)


def _text_encoder(args):
    if args.backend == "stub":
        return encoders.StubTextEncoder(clip_dim=args.clip_dim)
    return encoders.ClipTextEncoder(args.clip_model)


def _inverter(args):
    if args.backend == "stub":
        return encoders.StubStyleInverter(style_dim=args.style_dim)
    if not args.inverter_module:
        raise SystemExit("--inverter-module is required for the clip backend")
    return encoders.TorchScriptInverter(args.inverter_module,
                                        style_dim=args.style_dim)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deltastyle-bridge",
        description="export CLIP/StyleGAN embeddings as DEDS/DETT/DERM files")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--backend", choices=("clip", "stub"), default="clip",
                       help="stub produces deterministic content-keyed "
                            "embeddings for dry runs")
        p.add_argument("--clip-model",
                       default="openai/clip-vit-base-patch32")
        p.add_argument("--clip-dim", type=int, default=64,
                       help="embedding width (stub backend)")
        p.add_argument("--style-dim", type=int, default=352,
                       help="style code width (stub backend)")

    p = sub.add_parser("export-images",
                       help="embed + invert an image folder into a dataset")
    common(p)
    p.add_argument("--folder", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--inverter-module",
                   help="TorchScript inversion module path (clip backend)")
    p.add_argument("--batch-size", type=int, default=32)
    p.set_defaults(fn=cmd_export_images)

    p = sub.add_parser("export-texts",
                       help="embed whole prompts into a text table")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--prompts-file",
                   help="file with one prompt per line")
    p.add_argument("--category", default=export.PROMPT_CATEGORY)
    p.add_argument("--attrs",
                   help="comma-separated attributes; prompts are rendered "
                        "with the pipeline's template")
    p.add_argument("--pairs", action="store_true",
                   help="also render every attribute pair")
    p.set_defaults(fn=cmd_export_texts)

    p = sub.add_parser("probe-relevance",
                       help="probe a generator into a relevance file")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--probe", type=float, default=0.1)
    p.add_argument("--samples-per-channel", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_probe)

    return parser


def cmd_export_images(args) -> int:
    export.export_image_dataset(args.folder, args.out,
                                _image_encoder(args), _inverter(args),
                                batch_size=args.batch_size)
    return 0


def cmd_export_texts(args) -> int:
    if args.prompts_file:
        prompts = [line.strip()
                   for line in Path(args.prompts_file).read_text().splitlines()
                   if line.strip()]
        source = args.prompts_file
    elif args.attrs:
        attrs = [a.strip() for a in args.attrs.split(",") if a.strip()]
        prompts = export.attribute_prompts(attrs, category=args.category,
                                           pairs=args.pairs)
        source = f"<rendered: {args.category} + {attrs}>"
    else:
        raise SystemExit("pass --prompts-file or --attrs")
    export.export_text_table(prompts, args.out, _text_encoder(args),
                             source=source)
    return 0


def cmd_probe(args) -> int:
    if args.backend == "stub":
        generator = encoders.StubStyleGenerator(style_dim=args.style_dim,
                                                clip_dim=args.clip_dim,
                                                seed=args.seed)
    else:
        raise SystemExit(
            "probing a real generator needs a project-specific wrapper; "
            "implement StyleGenerator and call probe_relevance directly")
    export.probe_relevance(generator, args.out, probe=args.probe,
                           samples_per_channel=args.samples_per_channel,
                           seed=args.seed)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
