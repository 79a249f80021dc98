"""Operator entry point: world generation, training, editing and reports.

Every subcommand reads a flat key=value config with section headers (INI
syntax), applies --set overrides, and writes its outputs plus the fully
resolved config into a run directory addressed by the config digest and the
seed, so the same invocation never silently overwrites a different run.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import embedding_store as store
from . import evaluation, inference, relevance, synthetic_world, training
from .delta_mapper import PAPER_LAYOUT, TINY_LAYOUT, StyleLayout
from .errors import (
    ConfigError,
    DegenerateBatchError,
    DeltaStyleError,
    FormatError,
    NumericalError,
    UnknownAttributeError,
    ValidationError,
    ZeroNormError,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); we map usage to 1
        raise UsageError(message)


# --------------------------------------------------------------------------
# config handling

_LAYOUT_PRESETS = {"tiny": TINY_LAYOUT, "paper": PAPER_LAYOUT}

_SECTION_KEYS = {
    "world": {
        "preset", "seed", "records", "clip_dim", "feature_dim",
        "n_attributes", "support_size", "activation_level",
        "attribute_probability", "base_style_scale", "image_noise",
        "text_base_scale", "text_attr_scale", "gap_scale",
        "support_coherence", "tanh_mix",
        "coarse_layers", "coarse_dim", "medium_layers", "medium_dim",
        "fine_channels",
    },
    "train": {
        "preset", "mode", "batch_size", "steps", "learning_rate", "beta1",
        "beta2", "eps", "seed", "negative_slope", "rec_weight", "sim_weight",
        "val_fraction", "val_pairs", "dataset", "checkpoint_every",
    },
    "relevance": {"probe", "samples_per_channel", "sample_count", "seed"},
    "filter": {"beta", "strength", "scale_beta_to_clip_dim"},
    "eval": {"sources", "records", "pairs", "seed"},
}


def load_config(path: str | None, overrides: list[str]) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    if path is not None:
        target = Path(path)
        if not target.exists():
            raise FileNotFoundError(f"config file not found: {target}")
        parser.read(target)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise UsageError(f"override must look like section.key=value: "
                             f"{item!r}")
        key_part, value = item.split("=", 1)
        section, key = key_part.split(".", 1)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section.strip(), key.strip(), value.strip())
    for section in parser.sections():
        known = _SECTION_KEYS.get(section)
        if known is None:
            raise UsageError(f"unknown config section [{section}]")
        bad = set(parser[section]) - known
        if bad:
            raise UsageError(
                f"unknown key(s) in [{section}]: {sorted(bad)}")
    return parser


def _section(config: configparser.ConfigParser, name: str) -> dict[str, str]:
    return dict(config[name]) if config.has_section(name) else {}


def _layout_from(sec: dict[str, str], preset: str) -> StyleLayout:
    base = _LAYOUT_PRESETS.get(preset)
    if base is None:
        raise UsageError(f"unknown preset {preset!r}; "
                         f"choose from {sorted(_LAYOUT_PRESETS)}")
    return StyleLayout(
        coarse_layers=int(sec.get("coarse_layers", base.coarse_layers)),
        coarse_dim=int(sec.get("coarse_dim", base.coarse_dim)),
        medium_layers=int(sec.get("medium_layers", base.medium_layers)),
        medium_dim=int(sec.get("medium_dim", base.medium_dim)),
        fine_channels=int(sec.get("fine_channels", base.fine_channels)),
    )


def world_config_from(config: configparser.ConfigParser
                      ) -> tuple[synthetic_world.WorldConfig, int, int]:
    """(WorldConfig, seed, records) resolved from the [world] section."""
    sec = _section(config, "world")
    preset = sec.get("preset", "tiny")
    layout = _layout_from(sec, preset)
    defaults = synthetic_world.WorldConfig(layout=layout)
    cfg = synthetic_world.WorldConfig(
        layout=layout,
        clip_dim=int(sec.get("clip_dim", defaults.clip_dim)),
        feature_dim=int(sec.get("feature_dim", defaults.feature_dim)),
        n_attributes=int(sec.get("n_attributes", defaults.n_attributes)),
        support_size=int(sec.get("support_size", defaults.support_size)),
        activation_level=float(sec.get("activation_level",
                                       defaults.activation_level)),
        attribute_probability=float(sec.get("attribute_probability",
                                            defaults.attribute_probability)),
        base_style_scale=float(sec.get("base_style_scale",
                                       defaults.base_style_scale)),
        image_noise=float(sec.get("image_noise", defaults.image_noise)),
        text_base_scale=float(sec.get("text_base_scale",
                                      defaults.text_base_scale)),
        text_attr_scale=float(sec.get("text_attr_scale",
                                      defaults.text_attr_scale)),
        gap_scale=float(sec.get("gap_scale", defaults.gap_scale)),
        support_coherence=float(sec.get("support_coherence",
                                        defaults.support_coherence)),
        tanh_mix=float(sec.get("tanh_mix", defaults.tanh_mix)),
    )
    seed = int(sec.get("seed", 11))
    records = int(sec.get("records", 10000))
    return cfg, seed, records


def train_config_from(config: configparser.ConfigParser,
                      args) -> training.TrainConfig:
    sec = _section(config, "train")
    preset = sec.get("preset", "tiny")
    if preset == "paper":
        base = training.paper_preset()
    elif preset == "tiny":
        base = training.tiny_preset()
    else:
        raise UsageError(f"unknown preset {preset!r} in [train]")
    world_sec = _section(config, "world")
    layout = _layout_from(world_sec, world_sec.get("preset", preset))
    clip_dim = int(world_sec.get("clip_dim",
                                 64 if preset == "tiny" else 512))
    cfg = training.TrainConfig(
        mode=getattr(args, "mode", None) or sec.get("mode", base.mode),
        batch_size=int(sec.get("batch_size", base.batch_size)),
        steps=(args.steps if getattr(args, "steps", None) is not None
               else int(sec.get("steps", base.steps))),
        learning_rate=float(sec.get("learning_rate", base.learning_rate)),
        beta1=float(sec.get("beta1", base.beta1)),
        beta2=float(sec.get("beta2", base.beta2)),
        eps=float(sec.get("eps", base.eps)),
        seed=(args.seed if getattr(args, "seed", None) is not None
              else int(sec.get("seed", base.seed))),
        layout=layout,
        clip_dim=clip_dim,
        negative_slope=float(sec.get("negative_slope", base.negative_slope)),
        rec_weight=float(sec.get("rec_weight", base.rec_weight)),
        sim_weight=float(sec.get("sim_weight", base.sim_weight)),
        val_fraction=float(sec.get("val_fraction", base.val_fraction)),
        val_pairs=int(sec.get("val_pairs", base.val_pairs)),
        dataset_path=getattr(args, "dataset", None) or sec.get("dataset"),
        checkpoint_every=int(sec.get("checkpoint_every",
                                     base.checkpoint_every)),
    )
    return cfg


def filter_config_from(config: configparser.ConfigParser, args,
                       clip_dim: int) -> relevance.FilterConfig:
    sec = _section(config, "filter")
    beta = (args.beta if getattr(args, "beta", None) is not None
            else float(sec.get("beta", relevance.PAPER_BETA)))
    if sec.get("scale_beta_to_clip_dim", "false").lower() in ("1", "true",
                                                              "yes", "on"):
        beta = relevance.beta_for_clip_dim(clip_dim, beta)
    strength = (args.strength if getattr(args, "strength", None) is not None
                else float(sec.get("strength", 1.0)))
    return relevance.FilterConfig(beta=beta, strength=strength)


# --------------------------------------------------------------------------
# run directories


def resolved_config_text(config: configparser.ConfigParser) -> str:
    lines = []
    for section in sorted(config.sections()):
        lines.append(f"[{section}]")
        for key in sorted(config[section]):
            lines.append(f"{key} = {config[section][key]}")
        lines.append("")
    return "\n".join(lines)


def make_run_dir(root: str | Path, command: str,
                 config: configparser.ConfigParser, seed: int,
                 force: bool) -> Path:
    text = resolved_config_text(config)
    digest = store.fnv1a(text.encode("utf-8"))
    run = Path(root) / f"{command}-{digest:016x}-s{seed}"
    if run.exists() and not force:
        raise ConfigError(
            f"run directory {run} already exists for this config+seed; "
            f"pass --force to overwrite")
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.resolved.cfg").write_text(text + f"\n# seed = {seed}\n")
    return run


def _write_vector_csv(path: Path, values: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["channel", "value"])
        for i, v in enumerate(np.asarray(values, dtype=np.float64)):
            writer.writerow([i, repr(float(v))])


def _read_vector_csv(path: Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["channel", "value"]:
        raise FormatError(f"{path} is not a channel,value vector file")
    return np.array([float(r[1]) for r in rows[1:]], dtype=np.float64)


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_world(args) -> int:
    config = load_config(args.config, args.set)
    wc, seed, records = world_config_from(config)
    if args.seed is not None:
        seed = args.seed
    if args.records is not None:
        records = args.records
    run = make_run_dir(args.run_root, "gen-world", config, seed, args.force)
    world = synthetic_world.gen_world(wc, seed)
    dataset = synthetic_world.gen_dataset(world, records, seed)
    store.write_dataset(run / "dataset.deds", dataset)

    template = inference.PromptTemplate()
    names = [a.name for a in world.attributes]
    subsets = [(n,) for n in names]
    subsets += [(a, b) for i, a in enumerate(names) for b in names[i + 1:]]
    table = synthetic_world.export_text_table(world, subsets, template)
    store.write_text_table(run / "prompts.dett", table)

    summary = {
        "seed": seed,
        "records": records,
        "style_dim": world.style_dim,
        "clip_dim": world.clip_dim,
        "attributes": {a.name: a.support.tolist() for a in world.attributes},
    }
    (run / "world.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"world written to {run}")
    print(f"  dataset: {records} records, clip {world.clip_dim}, "
          f"style {world.style_dim}")
    print(f"  prompts: {len(table.names)} entries")
    return EXIT_OK


def cmd_train(args) -> int:
    config = load_config(args.config, args.set)
    cfg = train_config_from(config, args)
    if cfg.dataset_path is None:
        raise UsageError("a dataset is required (--dataset or [train] dataset)")
    if not Path(cfg.dataset_path).exists():
        raise FileNotFoundError(f"dataset file not found: {cfg.dataset_path}")
    run = make_run_dir(args.run_root, "train", config, cfg.seed, args.force)
    checkpoint_path = run / "checkpoint.dmap"
    ckpt, history = training.train(cfg, resume_from=args.resume,
                                   checkpoint_path=checkpoint_path)
    history.write_csv(run / "history.csv")
    last_val = (history.val_cosine[max(history.val_cosine)]
                if history.val_cosine else float("nan"))
    print(f"trained {cfg.mode} mapper for {cfg.steps} steps "
          f"(seed {cfg.seed}) -> {checkpoint_path}")
    print(f"  final loss {history.loss[-1]:.6f}" if history.loss
          else "  no steps executed")
    print(f"  held-out cosine {last_val:.4f}")
    return EXIT_OK


def cmd_relevance(args) -> int:
    config = load_config(args.config, args.set)
    wc, wseed, _ = world_config_from(config)
    sec = _section(config, "relevance")
    if not Path(args.dataset).exists():
        raise FileNotFoundError(f"dataset file not found: {args.dataset}")
    dataset = store.read_dataset(args.dataset)
    seed = int(sec.get("seed", 0))
    run = make_run_dir(args.run_root, "relevance", config, seed, args.force)
    world = synthetic_world.gen_world(wc, wseed)
    clean = synthetic_world.with_noise(world, 0.0)
    encoder = lambda s: synthetic_world.image_embed(clean, s)  # noqa: E731
    probe = sec.get("probe")
    # Isotropic codes around the dataset mean keep the probed rows close to
    # the encoder's true per-channel directions.
    samples = relevance.probe_samples(
        dataset.style_dim, int(sec.get("sample_count", 2048)), seed,
        center=dataset.styles.astype(np.float64).mean(axis=0))
    matrix = relevance.estimate_relevance(
        encoder, samples,
        probe=float(probe) if probe is not None else None,
        samples_per_channel=int(sec.get("samples_per_channel", 256)),
        seed=seed,
    )
    out = run / "relevance.derm"
    store.write_relevance(out, matrix)
    dead = int((np.linalg.norm(matrix.rows, axis=1) == 0).sum())
    print(f"relevance matrix written to {out}")
    print(f"  {matrix.style_dim} channels, probe {matrix.probe:.6g}, "
          f"{dead} dead")
    return EXIT_OK


def cmd_edit(args) -> int:
    config = load_config(args.config, args.set)
    ckpt = store.read_checkpoint(args.checkpoint)
    dataset = store.read_dataset(args.dataset)
    table = store.read_text_table(args.table, ckpt.clip_dim)
    if not 0 <= args.index < dataset.n:
        raise ValidationError(
            f"record index {args.index} outside dataset of {dataset.n}")
    attrs = tuple(a.strip() for a in args.attrs.split(",") if a.strip())
    fcfg = filter_config_from(config, args, ckpt.clip_dim)
    matrix = (store.read_relevance(args.relevance)
              if args.relevance else None)
    run = make_run_dir(args.run_root, "edit", config, ckpt.seed, args.force)

    template = inference.PromptTemplate()
    delta_t = inference.build_text_delta(attrs, table, template)
    s = dataset.styles[args.index].astype(np.float64)
    i = dataset.images[args.index].astype(np.float64)
    result = inference.edit(ckpt, s, i, delta_t, matrix=matrix, config=fcfg)

    _write_vector_csv(run / "s_prime.csv", result.s_prime)
    zeroed = int((result.delta == 0).sum())
    with open(run / "edit.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["attrs", "beta", "strength", "record",
                         "delta_norm", "channels_zeroed"])
        writer.writerow([";".join(attrs), repr(fcfg.beta),
                         repr(fcfg.strength), args.index,
                         repr(float(np.linalg.norm(result.delta))), zeroed])
    print(f"edit written to {run}")
    print(f"  attrs {attrs}, |delta| {np.linalg.norm(result.delta):.4f}, "
          f"{zeroed} channels zeroed")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = load_config(args.config, args.set)
    wc, wseed, _ = world_config_from(config)
    sec = _section(config, "eval")
    dataset = store.read_dataset(args.dataset)
    cfg = train_config_from(config, args)
    world = synthetic_world.gen_world(wc, wseed)
    run = make_run_dir(args.run_root, "eval", config, cfg.seed, args.force)
    if args.eval_mode == "compare":
        report = evaluation.compare_modes(
            world, dataset, cfg,
            eval_sources=int(sec.get("sources", 32)))
        report.write_csv(run / "compare.csv")
        for row in report.rows:
            print(f"  {row.mode:5s} accuracy {row.accuracy:.4f} "
                  f"leakage {row.leakage:.4f} variance {row.variance:.4f}")
    else:
        ckpt = store.read_checkpoint(args.checkpoint)
        styles = dataset.styles.astype(np.float64)
        images = dataset.images.astype(np.float64)
        n = min(int(sec.get("sources", 32)), dataset.n)
        report = evaluation.attribute_edit_report(
            ckpt.params, world, styles[:n], images[:n])
        with open(run / "attributes.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["attribute", "accuracy", "leakage", "variance"])
            for m in report.per_attribute:
                writer.writerow([m.name, repr(m.accuracy), repr(m.leakage),
                                 repr(m.variance)])
        print(f"  mean accuracy {report.accuracy:.4f}, "
              f"mean leakage {report.mean_leakage:.4f}")
    print(f"evaluation written to {run}")
    return EXIT_OK


def cmd_gap_stats(args) -> int:
    config = load_config(args.config, args.set)
    wc, wseed, _ = world_config_from(config)
    sec = _section(config, "eval")
    seed = int(sec.get("seed", wseed))
    run = make_run_dir(args.run_root, "gap-stats", config, seed, args.force)
    world = synthetic_world.gen_world(wc, wseed)
    samples = evaluation.world_gap_samples(
        world, records=int(sec.get("records", 2000)),
        pairs=int(sec.get("pairs", 2000)), seed=seed)
    stats = evaluation.gap_stats(samples.images, samples.texts,
                                 samples.delta_images, samples.delta_texts)
    with open(run / "stats.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["raw_mean", "raw_std", "delta_mean", "delta_std",
                         "margin"])
        writer.writerow([repr(stats.raw_mean), repr(stats.raw_std),
                         repr(stats.delta_mean), repr(stats.delta_std),
                         repr(stats.margin)])
    evaluation.export_projection(
        [("image", samples.images), ("text", samples.texts),
         ("delta_image", samples.delta_images),
         ("delta_text", samples.delta_texts)],
        run / "projection.csv")
    summary = (f"raw pairs:   {stats.raw_mean:.4f} +/- {stats.raw_std:.4f}\n"
               f"delta pairs: {stats.delta_mean:.4f} +/- "
               f"{stats.delta_std:.4f}\n"
               f"margin:      {stats.margin:.4f}\n")
    (run / "summary.txt").write_text(summary)
    print(summary, end="")
    print(f"gap statistics written to {run}")
    return EXIT_OK


def cmd_interpolate(args) -> int:
    a = _read_vector_csv(Path(args.a))
    b = _read_vector_csv(Path(args.b))
    mixed = inference.interpolate(a, b, args.omega)
    _write_vector_csv(Path(args.out), mixed)
    print(f"interpolated (omega={args.omega}) -> {args.out}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    magic = store.read_magic(path)
    findings = ()
    if magic == store.DATASET_MAGIC:
        ds = store.read_dataset(path)
        report = store.validate(ds)
        findings = report.findings
        print(f"dataset: {ds.n} records, clip {ds.clip_dim}, "
              f"style {ds.style_dim}")
        norms = np.linalg.norm(ds.images.astype(np.float64), axis=1)
        print(f"  image row norms {norms.min():.6f}..{norms.max():.6f}")
    elif magic == store.TEXT_MAGIC:
        if args.clip_dim is None:
            raise UsageError("--clip-dim is required to inspect a text table")
        table = store.read_text_table(path, args.clip_dim)
        findings = store.validate_text_table(table).findings
        print(f"text table: {len(table.names)} entries, "
              f"clip {table.clip_dim}")
        for name in table.names[:10]:
            print(f"  {name!r}")
        if len(table.names) > 10:
            print(f"  ... {len(table.names) - 10} more")
    elif magic == store.RELEVANCE_MAGIC:
        matrix = store.read_relevance(path)
        findings = store.validate_relevance(matrix).findings
        dead = int((np.linalg.norm(matrix.rows, axis=1) == 0).sum())
        print(f"relevance matrix: {matrix.style_dim} channels x "
              f"{matrix.clip_dim}, probe {matrix.probe:.6g}, "
              f"{matrix.samples_per_channel} samples/channel, {dead} dead")
    elif magic == store.CHECKPOINT_MAGIC:
        ckpt = store.read_checkpoint(path)
        lay = ckpt.layout
        from .delta_mapper import count_params
        print(f"checkpoint: layout {lay.coarse_layers}x{lay.coarse_dim}+"
              f"{lay.medium_layers}x{lay.medium_dim}+{lay.fine_channels}, "
              f"clip {ckpt.clip_dim}, seed {ckpt.seed}")
        print(f"  {count_params(ckpt.params)} parameters, trainer state "
              f"{'present' if ckpt.trainer_state else 'absent'}"
              + (f" (step {ckpt.trainer_state.step})"
                 if ckpt.trainer_state else ""))
    else:
        raise FormatError(f"unrecognized magic {magic!r}", offset=0)
    if findings:
        for f in findings:
            print(f"  finding: {f.message}")
        return EXIT_DATA
    print("  no findings")
    return EXIT_OK


# --------------------------------------------------------------------------
# wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="deltastyle",
                     description="delta-space style editing pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--set", action="append", default=[],
                       metavar="SECTION.KEY=VALUE",
                       help="override a config value")
        p.add_argument("--run-root", default="runs",
                       help="directory that receives run folders")
        p.add_argument("--force", action="store_true",
                       help="allow reusing an existing run directory")

    p = sub.add_parser("gen-world", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--records", type=int)
    p.set_defaults(fn=cmd_gen_world)

    p = sub.add_parser("train", help="train a mapper")
    common(p)
    p.add_argument("--dataset")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--mode", choices=training.MODES)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("relevance", help="estimate the relevance matrix")
    common(p)
    p.add_argument("--dataset", required=True)
    p.set_defaults(fn=cmd_relevance)

    p = sub.add_parser("edit", help="run a text-driven edit")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--attrs", required=True,
                   help="comma-separated attribute names")
    p.add_argument("--index", type=int, default=0,
                   help="source record index")
    p.add_argument("--relevance")
    p.add_argument("--beta", type=float)
    p.add_argument("--strength", type=float)
    p.set_defaults(fn=cmd_edit)

    p = sub.add_parser("eval", help="score trained mappers")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", dest="eval_mode", choices=("compare", "attrs"),
                   default="compare")
    p.add_argument("--checkpoint", help="required for --mode attrs")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gap-stats",
                       help="raw vs delta alignment statistics")
    common(p)
    p.set_defaults(fn=cmd_gap_stats)

    p = sub.add_parser("interpolate", help="blend two edited codes")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--omega", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_interpolate)

    p = sub.add_parser("inspect", help="describe and validate a file")
    p.add_argument("path")
    p.add_argument("--clip-dim", type=int,
                   help="vector width for text tables")
    p.set_defaults(fn=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, ZeroNormError, DegenerateBatchError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ValidationError, ConfigError, UnknownAttributeError,
            FileNotFoundError, KeyError, DeltaStyleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
