"""Command-line entry point.

Commands: ``attrs``, ``synth``, ``train``, ``eval``, ``saliency``. Every
command takes --seed, --config and --out-dir, writes its artifacts under the
output directory, and records them in a run manifest. All randomness flows
from the single seed; identical flags reproduce identical artifact bytes.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .attributes import (
    ExtractionClientConfig,
    load_description_corpus,
    run_attribute_pipeline,
    save_attribute_records,
)
from .corpus import SyntheticCorpusSpec, generate_synthetic_corpus, load_corpus, save_corpus
from .evaluation import MetricReport, SplitMetrics, export_saliency, write_metric_csv
from .sti import DEFAULT_SALIENCY_TEMPERATURE, InteractionToggles
from .trainer import (
    Checkpoint,
    TrainConfig,
    few_shot_finetune,
    load_checkpoint,
    save_checkpoint,
    write_loss_csv,
)
from .workflow import (
    corpus_encoder_params,
    eval_group,
    eval_group_three_splits,
    params_from_store,
    train_on_corpus,
    training_data_for,
)

MANIFEST_FILENAME = "manifest.json"


class CliError(Exception):
    pass


def _hash_paths(paths) -> str:
    digest = hashlib.sha256()
    for path in sorted(Path(p) for p in paths):
        digest.update(path.name.encode("utf-8"))
        digest.update(path.read_bytes())
    return digest.hexdigest()


def corpus_fingerprint(corpus_dir) -> str:
    """Content hash over every file in a corpus directory."""
    corpus_dir = Path(corpus_dir)
    files = [p for p in sorted(corpus_dir.iterdir()) if p.is_file()]
    return _hash_paths(files)


def _write_manifest(
    out_dir: Path,
    command: str,
    config: dict,
    artifacts: list[Path],
    results: dict,
    started: float,
    fingerprint: str | None,
) -> Path:
    manifest = {
        "tool": f"stilab {__version__}",
        "command": command,
        "config": config,
        "seed": config.get("seed"),
        "corpus_fingerprint": fingerprint,
        "artifacts": sorted(str(p.relative_to(out_dir)) for p in artifacts),
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(started)),
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "results": results,
    }
    path = out_dir / MANIFEST_FILENAME
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    return path


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    payload = json.loads(Path(path).read_text("utf-8"))
    if not isinstance(payload, dict):
        raise CliError("--config file must hold a JSON object of flag values")
    return payload


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stilab",
        description="Descriptive attributes + spatial-temporal interaction, desk scale.",
    )
    parser.add_argument("--version", action="version", version=f"stilab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--seed", type=int, default=0, help="master seed for all randomness")
        p.add_argument("--config", type=Path, default=None, help="JSON file of flag defaults")
        p.add_argument("--out-dir", type=Path, default=Path("stilab-out"))

    p_attrs = sub.add_parser("attrs", help="build descriptive attributes from a description corpus")
    common(p_attrs)
    p_attrs.add_argument("--corpus", type=Path, required=True, help="descriptions JSONL file")
    p_attrs.add_argument("--num-attributes", type=int, default=8)
    p_attrs.add_argument(
        "--extractor", default="mock", help='"mock" or an HTTP endpoint URL'
    )

    p_synth = sub.add_parser("synth", help="generate a synthetic corpus directory")
    common(p_synth)
    p_synth.add_argument("--num-concepts", type=int, default=12)
    p_synth.add_argument("--seen-classes", type=int, default=8)
    p_synth.add_argument("--unseen-classes", type=int, default=4)
    p_synth.add_argument("--videos-per-class", type=int, default=20)
    p_synth.add_argument("--frames", type=int, default=8)
    p_synth.add_argument("--patches-per-frame", type=int, default=16)
    p_synth.add_argument("--dim", type=int, default=32)
    p_synth.add_argument("--noise-scale", type=float, default=0.1)

    p_train = sub.add_parser("train", help="train on a corpus's seen classes")
    common(p_train)
    p_train.add_argument("--corpus", type=Path, required=True, help="corpus directory")
    p_train.add_argument("--learning-rate", type=float, default=5e-5)
    p_train.add_argument("--weight-decay", type=float, default=0.05)
    p_train.add_argument("--epochs", type=int, default=30)
    p_train.add_argument("--batch-size", type=int, default=16)
    p_train.add_argument("--num-attributes", type=int, default=8)
    p_train.add_argument("--spatial", action=argparse.BooleanOptionalAction, default=True)
    p_train.add_argument("--temporal", action=argparse.BooleanOptionalAction, default=True)
    p_train.add_argument("--tau-saliency", type=float, default=DEFAULT_SALIENCY_TEMPERATURE)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    common(p_eval)
    p_eval.add_argument("--corpus", type=Path, required=True)
    p_eval.add_argument("--checkpoint", type=Path, required=True)
    p_eval.add_argument(
        "--mode", choices=("zero-shot", "seen", "few-shot"), default="zero-shot"
    )
    p_eval.add_argument("--shots", type=int, default=4, help="K for few-shot mode")
    p_eval.add_argument("--finetune-epochs", type=int, default=50)
    p_eval.add_argument("--subset-size", type=int, default=None,
                        help="classes sampled per split (default: all)")
    p_eval.add_argument("--num-attributes", type=int, default=None,
                        help="override the checkpoint's attribute count")
    p_eval.add_argument("--spatial", action=argparse.BooleanOptionalAction, default=None)
    p_eval.add_argument("--temporal", action=argparse.BooleanOptionalAction, default=None)
    p_eval.add_argument("--tau-saliency", type=float, default=DEFAULT_SALIENCY_TEMPERATURE)

    p_sal = sub.add_parser("saliency", help="export per-frame saliency for a (video, class) pair")
    common(p_sal)
    p_sal.add_argument("--corpus", type=Path, required=True)
    p_sal.add_argument("--checkpoint", type=Path, required=True)
    p_sal.add_argument("--video-id", required=True)
    p_sal.add_argument("--class-name", required=True)
    p_sal.add_argument("--num-attributes", type=int, default=None)
    p_sal.add_argument("--tau-saliency", type=float, default=DEFAULT_SALIENCY_TEMPERATURE)
    return parser


def _parse_args(argv) -> argparse.Namespace:
    parser = _build_parser()
    args = parser.parse_args(argv)
    file_values = _load_config_file(args.config)
    if file_values:
        # command line wins over the config file, which wins over defaults
        explicit = _explicit_flags(parser, argv or [])
        for key, value in file_values.items():
            dest = key.replace("-", "_")
            if hasattr(args, dest) and dest not in explicit:
                setattr(args, dest, value)
    return args


def _explicit_flags(parser: argparse.ArgumentParser, argv) -> set[str]:
    explicit: set[str] = set()
    for token in argv:
        if token.startswith("--"):
            name = token[2:].split("=", 1)[0]
            explicit.add(name.replace("-", "_"))
            if name.startswith("no-"):
                explicit.add(name[3:].replace("-", "_"))
    return explicit


def cmd_attrs(args) -> tuple[list[Path], dict, str | None]:
    corpus = load_description_corpus(args.corpus)
    client = ExtractionClientConfig(endpoint=args.extractor)
    records = run_attribute_pipeline(corpus, args.num_attributes, client)
    out = save_attribute_records(args.out_dir / "attributes.jsonl", records)
    results = {
        "classes": len(records),
        "shortfall_classes": sum(1 for r in records if r.shortfall),
    }
    return [out], results, _hash_paths([args.corpus])


def cmd_synth(args) -> tuple[list[Path], dict, str | None]:
    spec = SyntheticCorpusSpec(
        num_concepts=args.num_concepts,
        seen_classes=args.seen_classes,
        unseen_classes=args.unseen_classes,
        videos_per_class=args.videos_per_class,
        frames=args.frames,
        patches_per_frame=args.patches_per_frame,
        dim=args.dim,
        noise_scale=args.noise_scale,
        seed=args.seed,
    )
    corpus = generate_synthetic_corpus(spec)
    corpus_dir = args.out_dir / "corpus"
    artifacts = save_corpus(corpus, corpus_dir)
    results = {
        "classes": len(corpus.classes),
        "videos": len(corpus.videos),
        "corpus_dir": str(corpus_dir),
    }
    return artifacts, results, corpus_fingerprint(corpus_dir)


def cmd_train(args) -> tuple[list[Path], dict, str | None]:
    corpus = load_corpus(args.corpus)
    config = TrainConfig(
        learning_rate=args.learning_rate,
        weight_decay=args.weight_decay,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        spatial=args.spatial,
        temporal=args.temporal,
        num_attributes=args.num_attributes,
    )
    run = train_on_corpus(corpus, config, tau_saliency=args.tau_saliency)
    checkpoint = Checkpoint(
        config=config,
        epoch=run.result.epochs_completed,
        store=run.result.store,
        optimizer=run.result.optimizer,
        loss_history=run.result.loss_history,
    )
    ckpt_path = save_checkpoint(args.out_dir / "checkpoint.stickpt", checkpoint)
    loss_path = write_loss_csv(args.out_dir / "loss.csv", run.result.loss_history)
    results = {
        "epochs": run.result.epochs_completed,
        "first_epoch_loss": run.result.loss_history[0],
        "final_epoch_loss": run.result.loss_history[-1],
    }
    return [ckpt_path, loss_path], results, corpus_fingerprint(args.corpus)


def _toggles_for_eval(args, config: TrainConfig) -> InteractionToggles:
    spatial = config.spatial if args.spatial is None else args.spatial
    temporal = config.temporal if args.temporal is None else args.temporal
    return InteractionToggles(spatial=spatial, temporal=temporal)


def cmd_eval(args) -> tuple[list[Path], dict, str | None]:
    corpus = load_corpus(args.corpus)
    checkpoint = load_checkpoint(args.checkpoint)
    toggles = _toggles_for_eval(args, checkpoint.config)
    num_attributes = (
        checkpoint.config.num_attributes if args.num_attributes is None else args.num_attributes
    )
    enc, sti = params_from_store(
        checkpoint.store,
        text_table_seed=corpus.spec.seed,
        dim=corpus.spec.dim,
        tau_saliency=args.tau_saliency,
    )
    if args.mode == "few-shot":
        if not corpus.unseen_class_indices:
            raise CliError("corpus has no unseen classes for few-shot evaluation")
        data, _ = training_data_for(
            corpus, corpus.unseen_class_indices, num_attributes, enc
        )
        config = TrainConfig.desk_scale(
            learning_rate=checkpoint.config.learning_rate,
            weight_decay=checkpoint.config.weight_decay,
            epochs=args.finetune_epochs,
            seed=args.seed,
            spatial=toggles.spatial,
            temporal=toggles.temporal,
            num_attributes=num_attributes,
        )
        tuned = few_shot_finetune(
            checkpoint.store.copy(), data, args.shots, args.finetune_epochs, args.seed,
            config=config, tau_saliency=args.tau_saliency,
        )
        enc, sti = params_from_store(
            tuned.fit.store,
            text_table_seed=corpus.spec.seed,
            dim=corpus.spec.dim,
            tau_saliency=args.tau_saliency,
        )
        holdout = [i for i in range(len(data.videos)) if i not in set(tuned.sample.indices)]
        if not holdout:
            raise CliError("few-shot sampling consumed every video; nothing left to evaluate")
        eval_data = data.subset(holdout)
        from .evaluation import evaluate_split

        top1, top5 = evaluate_split(
            eval_data.videos, eval_data.labels,
            [ct.sequence for ct in data.class_texts], sti, enc, toggles,
        )
        report = MetricReport.from_splits([SplitMetrics(split_id=1, top1=top1, top5=top5)])
        results = {
            "mode": "few-shot",
            "shots": args.shots,
            "shortfall_classes": list(tuned.sample.shortfall_classes),
            "top1": top1,
            "top5": top5,
        }
    else:
        seen = args.mode == "seen"
        report = eval_group_three_splits(
            corpus, enc, sti,
            seen=seen,
            num_attributes=num_attributes,
            seed=args.seed,
            subset_size=args.subset_size,
            toggles=toggles,
        )
        results = {
            "mode": args.mode,
            "top1_mean": report.top1_mean,
            "top1_std": report.top1_std,
            "top5_mean": report.top5_mean,
            "top5_std": report.top5_std,
        }
    metrics_path = write_metric_csv(args.out_dir / "metrics.csv", report)
    return [metrics_path], results, corpus_fingerprint(args.corpus)


def cmd_saliency(args) -> tuple[list[Path], dict, str | None]:
    corpus = load_corpus(args.corpus)
    checkpoint = load_checkpoint(args.checkpoint)
    num_attributes = (
        checkpoint.config.num_attributes if args.num_attributes is None else args.num_attributes
    )
    enc, sti = params_from_store(
        checkpoint.store,
        text_table_seed=corpus.spec.seed,
        dim=corpus.spec.dim,
        tau_saliency=args.tau_saliency,
    )
    by_id = {video.video_id: video for video in corpus.videos}
    if args.video_id not in by_id:
        raise CliError(f"unknown video id {args.video_id!r}")
    names = [cls.name for cls in corpus.classes]
    if args.class_name not in names:
        raise CliError(f"unknown class name {args.class_name!r}")
    class_index = names.index(args.class_name)
    prepared = training_data_for(corpus, (class_index,), num_attributes, enc)[0]
    from .encoders import FrameEmbeddingSet

    video = FrameEmbeddingSet.from_raw(by_id[args.video_id].features)
    out_path = args.out_dir / f"saliency_{args.video_id}_{args.class_name}.csv"
    export_saliency(
        video, prepared.class_texts[0].sequence, sti, enc, out_path,
        toggles=checkpoint.config.toggles,
    )
    results = {"video_id": args.video_id, "class_name": args.class_name}
    return [out_path], results, corpus_fingerprint(args.corpus)


_COMMANDS = {
    "attrs": cmd_attrs,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "saliency": cmd_saliency,
}


def main(argv=None) -> int:
    started = time.time()
    try:
        args = _parse_args(argv if argv is not None else sys.argv[1:])
        args.out_dir.mkdir(parents=True, exist_ok=True)
        artifacts, results, fingerprint = _COMMANDS[args.command](args)
        config = {
            key: (str(value) if isinstance(value, Path) else value)
            for key, value in vars(args).items()
            if key not in ("command",)
        }
        _write_manifest(
            args.out_dir, args.command, config, list(artifacts), results, started, fingerprint
        )
    except SystemExit as exc:  # argparse errors carry their own exit code
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports and exits
        print(f"stilab: error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(results, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
