"""
stt command line: corpus tools, training, evaluation and localization
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from dotenv import load_dotenv

from config.settings import CONFIG_KEYS, load_run_config
from utils.alignment import describe_tactile
from utils.corpus import (
    dedup_by_content_hash,
    emit_concept_query_templates,
    extract_touch_instances,
    filter_by_prompt_argmax,
    format_instance_line,
    format_record_line,
    instance_length_histogram,
    limit_instances_per_video,
    load_embedding_list,
    load_prompt_set,
    split_by_video,
    write_manifest,
)
from utils.encoders import encode
from utils.errors import STTError, ValidationError
from utils.evaluation import (
    BaselineModel,
    evaluate_interactive,
    evaluate_localization,
    robustness_frame,
    robustness_report,
)
from utils.pairing import sample_training_batch
from utils import pipeline
from utils.synthetic import SyntheticCorpusSpec, generate_synthetic_corpus
from utils.training import Trainer, gradient_check_pipeline, load_item

logger = logging.getLogger("stt")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _emit(lines):
    for line in lines:
        print(line)


def _write_lines(path, lines) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def _extra(config) -> dict:
    return {"seed": config.seed}


# ── Commands ───────────────────────────────────────────────────────────────────

def cmd_synth(args, config):
    spec = SyntheticCorpusSpec(
        categories=args.categories,
        instances_per_category=args.instances,
        test_instances_per_category=args.test_instances,
        frames_per_instance=args.frames,
        grid=config.encoder.grid,
        patch_size=config.encoder.patch_size,
        feature_dim=config.encoder.backbone_dim,
        endpoint_noise=args.endpoint_noise,
        endpoint_floor=args.endpoint_floor,
        web_images_per_category=args.web_images,
        eval_scenes=args.eval_scenes,
        interactive_scenes=args.interactive_scenes,
    )
    corpus = generate_synthetic_corpus(spec, config.seed, config.corpus_dir)
    print(format_record_line({"corpus": str(corpus.root), "seed": config.seed, **corpus.counts}))


def cmd_extract_instances(args, config):
    records = pipeline.load_records(args.manifest or config.data_path("touch_manifest", "touch.manifest"),
                                    args.exclude)
    instances = limit_instances_per_video(extract_touch_instances([r for r in records if r.has_tactile]),
                                          config.data.max_instances_per_video)
    output = _write_lines(args.output or config.out_path / "instances.txt",
                          [format_instance_line(i) for i in instances])
    print(instance_length_histogram(instances).to_string(index=False))
    logger.info("%d instances written to %s", len(instances), output)


def cmd_split(args, config):
    path = args.manifest or config.data_path("touch_manifest", "touch.manifest")
    records = pipeline.load_records(path, args.exclude)
    instances = extract_touch_instances([r for r in records if r.has_tactile])
    train, test = split_by_video(instances, args.test_fraction, config.seed)
    test_videos = {instance.video_id for instance in test}
    tagged = [replace(r, split="test" if r.video_id in test_videos else "train") for r in records]
    output = Path(args.output or config.out_path / "split.manifest")
    output.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(tagged, output)
    print(format_record_line({"train_instances": len(train), "test_instances": len(test),
                              "test_videos": len(test_videos), "seed": config.seed, "manifest": str(output)}))


def cmd_dedup(args, config):
    paths = list(args.paths)
    if args.list:
        paths += [line.strip() for line in Path(args.list).read_text(encoding="utf-8").splitlines() if line.strip()]
    if not paths:
        raise ValidationError("dedup needs at least one file")
    result = dedup_by_content_hash(paths)
    _emit(format_record_line({"kept": path}) for path in result.kept)
    _emit(format_record_line({"dropped": path, "duplicate_of": twin}) for path, twin in result.dropped)


def cmd_filter(args, config):
    prompts = load_prompt_set(args.prompts)
    result = filter_by_prompt_argmax(load_embedding_list(args.embeddings), prompts)
    _emit(format_record_line({"retained": image_id, "category": prompts.category}) for image_id in result.retained)
    _emit(format_record_line({"rejected": image_id, "negative": negative}) for image_id, negative in result.rejected)


def cmd_queries(args, config):
    _emit(emit_concept_query_templates(args.category, args.objects, args.places))


def cmd_pairs(args, config):
    data = pipeline.load_training_data(config)
    count = args.count or config.optimizer.batch_size
    pairs = sample_training_batch(data.corpora, config.schedule, args.epoch, count, config.seed,
                                  args.batch, config.pairing)
    lines = [pair.to_line() for pair in pairs]
    _write_lines(args.output or config.out_path / "pairs.txt", lines)
    _emit(lines)


def cmd_prototypes(args, config):
    checkpoint = pipeline.load_checkpoint(config)
    table = pipeline.build_prototypes(checkpoint.params, config)
    lines = [format_record_line({"seed": config.seed})] + table.to_lines()
    _write_lines(config.out_path / "prototypes.txt", lines)
    _emit(lines[1:])


def cmd_train(args, config):
    data = pipeline.load_training_data(config)
    trainer = Trainer(pipeline.train_settings(config), data.corpora, data.store, config.out_path, config.echo())
    result = trainer.resume(args.resume) if args.resume else trainer.run()
    means = result.epoch_means
    for epoch, value in means.items():
        print(format_record_line({"epoch": epoch, "mean_loss": repr(value)}))
    if result.checkpoints:
        logger.info("final checkpoint %s", result.checkpoints[-1])


def cmd_eval(args, config):
    if args.baseline:
        samples = pipeline.load_eval_dataset(config, descriptors=False)
        model = BaselineModel(args.baseline)
        name = f"report-baseline-{args.baseline}.txt"
    else:
        context = pipeline.evaluation_context(config)
        samples = pipeline.load_eval_dataset(config, context)
        model = context.model
        name = "report-eval.txt"
    report = evaluate_localization(samples, model, config.evaluation, _extra(config))
    config.out_path.mkdir(parents=True, exist_ok=True)
    report.write(config.out_path / name)
    print(report.to_table())


def cmd_eval_interactive(args, config):
    context = pipeline.evaluation_context(config)
    samples = pipeline.load_interactive_dataset(config, context)
    iiou = evaluate_interactive(samples, context.model, config.evaluation)
    header = {**config.evaluation.echo(), **_extra(config)}
    _write_lines(config.out_path / "report-interactive.txt", [
        format_record_line(header),
        format_record_line({"scope": "overall", "IIoU": f"{iiou:.6f}", "samples": len(samples)}),
    ])
    print(f"IIoU: {iiou:.2f} ({len(samples)} scenes)")


def cmd_robustness(args, config):
    context = pipeline.evaluation_context(config)
    samples = pipeline.load_eval_dataset(config, context, descriptors=False)
    reports = robustness_report(context.test_instances, context.model, samples, config.evaluation,
                                context.describer, _extra(config))
    lines = []
    for report in reports.values():
        lines += report.to_records()
    _write_lines(config.out_path / "report-robustness.txt", lines)
    print(robustness_frame(reports).to_string(index=False, float_format=lambda v: f"{v:.2f}"))


def cmd_localize(args, config):
    if bool(args.category) == bool(args.tactile):
        raise ValidationError("localize needs exactly one of --category and --tactile")
    checkpoint = pipeline.load_checkpoint(config)
    if args.category:
        table = pipeline.build_prototypes(checkpoint.params, config)
        try:
            descriptor = table[args.category].at(config.evaluation.frame_position)
        except KeyError:
            raise ValidationError(f"no prototype for category {args.category!r}") from None
    else:
        descriptor = describe_tactile(encode(load_item(args.tactile), checkpoint.params, config.encoder, "tactile"))
    written = pipeline.localize(config, checkpoint.params, args.image, descriptor,
                                config.out_path / args.name, args.raster)
    print(format_record_line({"heatmap": str(written["heatmap"]), "overlay": str(written["overlay"])}))


def cmd_gradcheck(args, config):
    worst = 0.0
    failed = []
    for offset in range(args.seeds):
        seed = config.seed + offset
        report = gradient_check_pipeline(seed, tol=args.tol)
        worst = max(worst, report.worst)
        print(format_record_line({"seed": seed, "checked": report.checked,
                                  "max_relative_error": f"{report.worst:.3e}", "passed": report.passed}))
        if not report.passed:
            failed.append(seed)
    print(format_record_line({"max_relative_error": f"{worst:.3e}", "tol": args.tol, "passed": not failed}))
    if failed:
        raise STTError(f"gradient check failed for seeds {failed}")


COMMANDS = {
    "synth": cmd_synth,
    "extract-instances": cmd_extract_instances,
    "split": cmd_split,
    "dedup": cmd_dedup,
    "filter": cmd_filter,
    "queries": cmd_queries,
    "pairs": cmd_pairs,
    "prototypes": cmd_prototypes,
    "train": cmd_train,
    "eval": cmd_eval,
    "eval-interactive": cmd_eval_interactive,
    "robustness": cmd_robustness,
    "localize": cmd_localize,
    "gradcheck": cmd_gradcheck,
}


# ── Parser ─────────────────────────────────────────────────────────────────────

def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False, allow_abbrev=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = ArgumentParser(prog="stt", description="Tactile localization toolkit", allow_abbrev=False,
                            epilog="Any configuration key can be overridden with --<key> <value>.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name, help_text):
        return sub.add_parser(name, help=help_text, parents=[common], allow_abbrev=False)

    p = add("synth", "generate the synthetic corpus under <out>/corpus")
    p.add_argument("--categories", type=int, default=4)
    p.add_argument("--instances", type=int, default=6, help="training instances per category")
    p.add_argument("--test-instances", type=int, default=2, help="held-out instances per category")
    p.add_argument("--frames", type=int, default=5, help="frames per touch instance")
    p.add_argument("--endpoint-noise", type=float, default=0.0)
    p.add_argument("--endpoint-floor", type=float, default=0.4,
                   help="signature share kept by endpoint frames at full noise")
    p.add_argument("--web-images", type=int, default=6, help="out-domain images per category")
    p.add_argument("--eval-scenes", type=int, default=16)
    p.add_argument("--interactive-scenes", type=int, default=10)

    for name, help_text in (("extract-instances", "group frames into touch instances"),
                            ("split", "video-disjoint train/test split")):
        p = add(name, help_text)
        p.add_argument("--manifest")
        p.add_argument("--exclude", action="append", default=[], metavar="CATEGORY")
        p.add_argument("--output")
        if name == "split":
            p.add_argument("--test-fraction", type=float, default=0.2)

    p = add("dedup", "drop byte-identical files")
    p.add_argument("paths", nargs="*")
    p.add_argument("--list", help="file with one path per line")

    p = add("filter", "prompt-argmax filtering of web images")
    p.add_argument("--prompts", required=True)
    p.add_argument("--embeddings", required=True)

    p = add("queries", "scene and close-up query strings for a category")
    p.add_argument("--category", required=True)
    p.add_argument("--objects", nargs="*", default=[])
    p.add_argument("--places", nargs="*", default=[])

    p = add("pairs", "export one sampled training batch")
    p.add_argument("--epoch", type=int, default=0)
    p.add_argument("--batch", type=int, default=0)
    p.add_argument("--count", type=int, default=0)
    p.add_argument("--output")

    add("prototypes", "category prototype table from a checkpoint")

    p = add("train", "train the aligners with the curriculum")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = add("eval", "mAP / mIoU on the evaluation set")
    p.add_argument("--baseline", choices=["square", "circle"])

    add("eval-interactive", "IIoU on the two-query set")
    add("robustness", "Start / Middle / End tactile frame robustness")

    p = add("localize", "saliency heatmap for one image")
    p.add_argument("--image", required=True)
    p.add_argument("--category")
    p.add_argument("--tactile")
    p.add_argument("--raster", help="image the overlay is drawn on")
    p.add_argument("--name", default="heatmap")

    p = add("gradcheck", "finite-difference check of the full pipeline")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def parse_overrides(tokens) -> dict:
    """``--key value`` pairs for configuration keys; dashes and underscores are interchangeable."""
    overrides = {}
    tokens = list(tokens)
    index = 0
    while index < len(tokens):
        token = tokens[index]
        if not token.startswith("--"):
            raise UsageError(f"unexpected argument {token!r}")
        key, sep, value = token[2:].partition("=")
        key = key.replace("-", "_")
        if key != "preset" and key not in CONFIG_KEYS:
            raise UsageError(f"unrecognized arguments: {token}")
        if not sep:
            if index + 1 >= len(tokens):
                raise UsageError(f"{token} expects a value")
            index += 1
            value = tokens[index]
        overrides[key] = value
        index += 1
    return overrides


def main(argv=None) -> int:
    load_dotenv()
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        overrides = parse_overrides(extra)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"stt: error: {exc}", file=sys.stderr)
        return 1

    logging.basicConfig(level=args.log_level, format=LOG_FORMAT, stream=sys.stderr, force=True)
    try:
        config = load_run_config(args.config, overrides)
        COMMANDS[args.command](args, config)
    except ValidationError as exc:
        logger.error("%s", exc)
        return 1
    except (STTError, OSError) as exc:
        logger.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
