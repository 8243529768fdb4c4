"""Command-line entry point.

Subcommands cover the whole workflow: make-splits, train, eval,
aggregate, score, export-embeddings, plus make-glyphs to fabricate a
self-contained demo corpus. Configuration comes from one JSON document;
command-line flags win over it. Every artifact of a trial lives under
one directory named by protocol and seed.

Exit codes: 0 success (or "known" verdict), 10 "unknown" verdict from
``score``, 2 usage or format problems, 1 internal errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from . import evaluate as E
from . import glyphs
from . import model as M
from . import openset as O
from . import tensor as T
from . import train as TR
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, ContractError, FormatError, OsrKitError, ProtocolError

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_UNKNOWN_VERDICT = 10

DEFAULT_MODEL = {"patch_size": 7, "embed_dim": 64, "depth": 4, "heads": 4, "mlp_ratio": 4}


@dataclass
class RunConfig:
    dataset: str
    data: dict
    protocol: str
    seeds: list[int]
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    quantile: float = 0.95
    space: str = "detection"
    out: str = "runs"

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seed list must not be empty")
        if self.protocol not in D.PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        if self.space not in E.SPACES:
            raise ConfigError(f"unknown scoring space {self.space!r}")
        missing = [str(p) for p in self._referenced_paths() if not Path(p).exists()]
        if missing:
            raise ConfigError(f"dataset paths do not exist: {missing}")

    def _referenced_paths(self):
        for value in self.data.values():
            if isinstance(value, (list, tuple)):
                yield from value
            else:
                yield value


def load_run_config(path, overrides: argparse.Namespace) -> RunConfig:
    raw = json.loads(Path(path).read_text())
    for flag in ("protocol", "space", "quantile", "out"):
        value = getattr(overrides, flag, None)
        if value is not None:
            raw[flag] = value
    if getattr(overrides, "seed", None) is not None:
        raw["seeds"] = [overrides.seed]
    if getattr(overrides, "deterministic", False):
        raw.setdefault("train", {})["deterministic"] = True
    return RunConfig(**raw)


def load_bundle(config: RunConfig, split: D.SplitSpec) -> D.DatasetBundle:
    """Read the dataset files named in the config; the key set picks the format."""
    data = config.data
    if "train_images" in data:
        train = D.load_idx(data["train_images"], data["train_labels"])
        test = D.load_idx(data["test_images"], data["test_labels"])
        unknown_test = None
    elif "train_batches" in data:
        train = D.concat_image_sets([D.load_cifar_binary(p) for p in data["train_batches"]])
        test = D.concat_image_sets([D.load_cifar_binary(p) for p in data["test_batches"]])
        unknown_test = None
        if split.unknown_dataset == "cifar100":
            if "cifar100_test" not in data:
                raise ConfigError(f"protocol {split.protocol} needs data.cifar100_test")
            unknown_test = D.load_cifar100_binary(data["cifar100_test"])
    elif "train_mat" in data:
        train = D.load_svhn_mat(data["train_mat"])
        test = D.load_svhn_mat(data["test_mat"])
        unknown_test = None
    elif "train_dir" in data:
        train = D.load_image_folders(data["train_dir"])
        test = D.load_image_folders(data["test_dir"])
        unknown_test = None
    else:
        raise ConfigError(
            "config.data must name train_images/train_batches/train_mat/train_dir"
        )
    return D.DatasetBundle(train=train, test=test, unknown_test=unknown_test)


def model_config_for(config: RunConfig, bundle: D.DatasetBundle,
                     split: D.SplitSpec) -> M.ModelConfig:
    _, h, w, c = bundle.train.images.shape
    fields = dict(DEFAULT_MODEL)
    fields.update(config.model)
    return M.ModelConfig(height=h, width=w, channels=c, num_classes=split.num_known,
                         **fields)


def run_dir(config: RunConfig, seed: int) -> Path:
    return Path(config.out) / f"{config.protocol}-s{seed}"


def _resolve_split_path(config: RunConfig, args) -> Path:
    if getattr(args, "split", None):
        return Path(args.split)
    if getattr(args, "seed", None) is not None:
        return run_dir(config, args.seed) / "split.json"
    raise ConfigError("pass --split PATH or --seed N")


def train_config_for(config: RunConfig, seed: int) -> TR.TrainConfig:
    fields = dict(config.train)
    fields["seed"] = seed
    return TR.TrainConfig(**fields)


# -- commands -----------------------------------------------------------------


def cmd_make_splits(args) -> int:
    config = load_run_config(args.config, args)
    for seed in config.seeds:
        split = D.make_split(config.dataset, config.protocol, seed)
        directory = run_dir(config, seed)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "split.json"
        D.save_split(split, path)
        print(path)
    return EXIT_OK


def train_pipeline(config: RunConfig, split: D.SplitSpec, bundle: D.DatasetBundle,
                   directory: Path, stage2_only: bool = False,
                   from_checkpoint: Path | None = None) -> Path:
    """Stage 1, center anchoring, stage 2; checkpoints at both stage boundaries."""
    directory.mkdir(parents=True, exist_ok=True)
    train_cfg = train_config_for(config, split.seed)
    if train_cfg.deterministic:
        T.set_deterministic(True)
    model_cfg = model_config_for(config, bundle, split)
    stage1_path = directory / "checkpoint-stage1.ckpt"
    log_path = directory / "metrics.jsonl"

    with open(log_path, "a" if stage2_only else "w") as log:
        if stage2_only:
            source = from_checkpoint or stage1_path
            ckpt = load_checkpoint(source, precision=train_cfg.precision)
            if ckpt.config != model_cfg:
                raise ProtocolError(
                    f"stage-1 checkpoint config {ckpt.config} does not match run "
                    f"config {model_cfg}"
                )
            vit = ckpt.vit
            stream = D.TrainStream(bundle.train, split, train_cfg.batch_size,
                                   train_cfg.seed, stats=ckpt.norm_stats,
                                   augment=train_cfg.augment)
            init_seed = ckpt.init_seed
        else:
            init_seed = split.seed
            vit = M.init_vit(model_cfg, seed=init_seed, dtype=train_cfg.dtype)
            stream = D.TrainStream(bundle.train, split, train_cfg.batch_size,
                                   train_cfg.seed, augment=train_cfg.augment)
            TR.train_stage1(vit, model_cfg, stream, train_cfg, log=log)
            save_checkpoint(stage1_path, model_cfg, vit, init_seed=init_seed,
                            norm_stats=stream.stats, stage="stage1")

        head_seed = split.seed + 1
        head = O.init_detection_head(model_cfg, seed=head_seed, dtype=train_cfg.dtype)
        features, labels = TR.extract_training_features(stream, vit, model_cfg)
        centers = O.anchor_centers_from_features(features, labels, head,
                                                 model_cfg.num_classes)
        summary = TR.train_stage2(vit, model_cfg, head, centers, stream, train_cfg,
                                  log=log, features=features, labels=labels)

    final_path = directory / "checkpoint.ckpt"
    save_checkpoint(final_path, model_cfg, vit, head, centers, init_seed=init_seed,
                    head_seed=head_seed, norm_stats=stream.stats, stage="final")
    (directory / "train-summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"trained {final_path} "
          f"(intra-class distance {summary['intra_class_sq_dist_start']:.4g} -> "
          f"{summary['intra_class_sq_dist_end']:.4g})")
    return final_path


def cmd_train(args) -> int:
    config = load_run_config(args.config, args)
    split = D.load_split(_resolve_split_path(config, args))
    bundle = load_bundle(config, split)
    directory = run_dir(config, split.seed)
    train_pipeline(config, split, bundle, directory, stage2_only=args.stage2_only,
                   from_checkpoint=Path(args.from_checkpoint)
                   if args.from_checkpoint else None)
    return EXIT_OK


def cmd_eval(args) -> int:
    config = load_run_config(args.config, args)
    split = D.load_split(_resolve_split_path(config, args))
    bundle = load_bundle(config, split)
    directory = run_dir(config, split.seed)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else directory / "checkpoint.ckpt"
    ckpt = load_checkpoint(ckpt_path)
    tau = E.calibrate_tau(bundle, split, ckpt, space=config.space,
                          quantile=config.quantile)
    report = E.run_trial(bundle, split, ckpt, space=config.space)
    directory.mkdir(parents=True, exist_ok=True)
    report_path = directory / f"report-{config.space}.json"
    E.save_report(report, report_path, tau=tau)
    print(f"{report_path} accuracy={report.accuracy:.4f} auroc={report.auroc:.4f} "
          f"tau={tau:.6g}")
    return EXIT_OK


def cmd_aggregate(args) -> int:
    reports = [E.load_report(p) for p in args.reports]
    agg = E.aggregate(reports)
    table = E.format_table(agg)
    print(table, end="")
    if args.out:
        base = Path(args.out)
        base.parent.mkdir(parents=True, exist_ok=True)
        base.with_suffix(".txt").write_text(table)
        base.with_suffix(".tsv").write_text(E.reports_tsv(agg))
    return EXIT_OK


def _load_score_image(path, index: int, config: M.ModelConfig) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        image = np.load(path)
        if image.ndim == 2:
            image = image[:, :, None]
    else:
        image = D.load_idx_images(path)[index]
    expected = (config.height, config.width, config.channels)
    if image.shape != expected:
        raise ConfigError(f"image shape {image.shape} does not match model {expected}")
    return image.astype(np.float32)


def cmd_score(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.head is None or ckpt.centers is None:
        raise ProtocolError("checkpoint holds no detection head; train stage 2 first")
    image = _load_score_image(args.image, args.index, ckpt.config)
    image = D.standardize(image, ckpt.norm_stats)
    decision = O.decide(image, ckpt.vit, ckpt.config, ckpt.head, ckpt.centers,
                        tau=args.tau)
    label = "-" if decision.label is None else decision.label
    print(f"verdict={decision.verdict} label={label} score={decision.score!r} "
          f"tau={decision.threshold!r}")
    return EXIT_OK if decision.verdict == "known" else EXIT_UNKNOWN_VERDICT


def cmd_export_embeddings(args) -> int:
    config = load_run_config(args.config, args)
    split = D.load_split(_resolve_split_path(config, args))
    bundle = load_bundle(config, split)
    directory = run_dir(config, split.seed)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else directory / "checkpoint.ckpt"
    ckpt = load_checkpoint(ckpt_path)
    out = Path(args.out_file) if args.out_file else directory / f"embeddings-{config.space}.tsv"
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = E.export_embeddings(bundle, split, ckpt, config.space, out,
                               n_known=args.known, n_unknown=args.unknown,
                               seed=args.sample_seed)
    print(f"{out} rows={rows}")
    return EXIT_OK


def cmd_make_glyphs(args) -> int:
    paths = glyphs.write_glyph_corpus(args.out_dir, args.train_per_class,
                                      args.test_per_class, args.seed)
    for p in paths.values():
        print(p)
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="osrkit",
                                     description="open-set recognition toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="run configuration JSON")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--protocol", default=None, choices=sorted(D.PROTOCOLS))
        p.add_argument("--space", default=None, choices=list(E.SPACES))
        p.add_argument("--quantile", type=float, default=None)
        p.add_argument("--deterministic", action="store_true")
        p.add_argument("--out", default=None, help="base output directory")

    p = sub.add_parser("make-splits", help="write one split file per seed")
    common(p)
    p.set_defaults(func=cmd_make_splits)

    p = sub.add_parser("train", help="two-stage training to a checkpoint")
    common(p)
    p.add_argument("--split", default=None, help="split file (or use --seed)")
    p.add_argument("--stage2-only", action="store_true",
                   help="restart from a stage-1 checkpoint")
    p.add_argument("--from-checkpoint", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="calibrate tau and report accuracy/AUROC")
    common(p)
    p.add_argument("--split", default=None)
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("aggregate", help="average trial reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", default=None, help="basename for .txt/.tsv output")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("score", help="decide known/unknown for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help=".npy image or IDX images file")
    p.add_argument("--index", type=int, default=0, help="index into an IDX file")
    p.add_argument("--tau", type=float, required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("export-embeddings", help="dump embeddings for plotting")
    common(p)
    p.add_argument("--split", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out-file", default=None)
    p.add_argument("--known", type=int, default=4000)
    p.add_argument("--unknown", type=int, default=800)
    p.add_argument("--sample-seed", type=int, default=0)
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("make-glyphs", help="write a procedural IDX corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--train-per-class", type=int, default=600)
    p.add_argument("--test-per-class", type=int, default=150)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_glyphs)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FormatError, ConfigError, ProtocolError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ContractError, OsrKitError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
