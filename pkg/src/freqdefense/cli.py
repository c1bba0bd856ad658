"""Command-line interface.

Subcommands mirror the pipeline stages: train-arbitrary, gen-attacks,
train-detector, adapt-detector, defend, evaluate, bench. Every
subcommand accepts ``--config FILE`` (JSON) whose keys provide defaults;
explicit flags override config values. The FREQDEFENSE_ROOT environment
variable (default ``./freqdefense-out``) roots all relative output
paths.

Exit codes: 0 ok, 2 config error, 3 data error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import data as datasets
from .attacks import AdversarialSet, AttackConfig, build_mixed_attack_set, filter_fooling
from .correction import CorrectionConfig
from .detector import (
    AdaptationConfig,
    TargetDetector,
    TrainConfig,
    adapt_target_detector,
    generate_detector_dataset,
    load_head,
    save_head,
    train_arbitrary_classifier,
    train_source_head,
)
from .errors import ConfigError, DefenseError
from .models import ClassifierHandle
from .perceptual import SsimConfig
from .pipeline import (
    bench_runtime,
    build_eval_set,
    defend,
    emit_report,
    evaluate,
    plot_radius_profile,
)
from .seeding import per_sample_seeds

logger = logging.getLogger(__name__)


def _output_root() -> Path:
    return Path(os.environ.get("FREQDEFENSE_ROOT", "freqdefense-out"))


def _resolve(path: str | Path) -> Path:
    path = Path(path)
    return path if path.is_absolute() else _output_root() / path


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return cfg


def _merged(args: argparse.Namespace, config: dict, key: str, default=None):
    value = getattr(args, key.replace("-", "_"), None)
    if value is not None:
        return value
    return config.get(key, default)


def _attack_config(args, config) -> AttackConfig:
    cfg = dict(config.get("attack", {}))
    for key in ("kind", "epsilon", "step_size", "num_steps", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    out = AttackConfig.from_dict(cfg) if cfg else AttackConfig()
    out.validate()
    return out


def _correction_config(args, config) -> CorrectionConfig:
    cfg = dict(config.get("correction", {}))
    for key in ("count", "radius_step"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    ssim_cfg = SsimConfig(**cfg.pop("ssim", {}))
    out = CorrectionConfig(ssim=ssim_cfg, **cfg)
    out.validate()
    return out


def _train_config(args, config, defaults: TrainConfig = TrainConfig()) -> TrainConfig:
    cfg = dict(config.get("train", {}))
    for key in ("epochs", "seed", "batch_size", "learning_rate", "label_smoothing"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    known = {f for f in TrainConfig.__dataclass_fields__}
    unknown = set(cfg) - known
    if unknown:
        raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
    merged = {**{k: getattr(defaults, k) for k in known}, **cfg}
    return TrainConfig(**merged)


def _dataset(args, config) -> tuple[torch.Tensor, np.ndarray, dict]:
    source = _merged(args, config, "dataset")
    if source is None:
        raise ConfigError("no dataset given (flag --dataset or config key 'dataset')")
    n = int(_merged(args, config, "n", 2000))
    seed = int(_merged(args, config, "data-seed", config.get("data_seed", 0)) or 0)
    side = int(_merged(args, config, "side", 32))
    return datasets.ingest_dataset(source, n=n, seed=seed, side=side)


# -- subcommand handlers -------------------------------------------------------


def _cmd_train_arbitrary(args) -> int:
    config = _load_config(args.config)
    images, labels, manifest = _dataset(args, config)
    handle = train_arbitrary_classifier(
        (images, labels),
        _train_config(args, config),
        dropout_rate=float(_merged(args, config, "dropout-rate", config.get("dropout_rate", 0.25)) or 0.25),
    )
    out = _resolve(_merged(args, config, "out", "arbitrary-model.pt"))
    handle.save_checkpoint(out)
    print(f"saved classifier to {out} (dataset: {manifest.get('source')})")
    return 0


def _cmd_gen_attacks(args) -> int:
    config = _load_config(args.config)
    model = ClassifierHandle.load_checkpoint(_resolve(args.model))
    images, labels, _ = _dataset(args, config)
    attack_cfgs = [AttackConfig.from_dict(c) for c in config.get("attacks", [])] or [_attack_config(args, config)]
    proportions = config.get("proportions", [1.0 / len(attack_cfgs)] * len(attack_cfgs))
    aset = build_mixed_attack_set(model, images, attack_cfgs, proportions,
                                  seed=int(_merged(args, config, "seed", 0) or 0), labels=labels)
    aset = filter_fooling(model, aset)
    if args.only_fooled:
        aset = aset.fooled_only()
    out = _resolve(_merged(args, config, "out", "attacks"))
    aset.save(out)
    fooled = int(aset.fooled_mask.sum())
    print(f"saved {len(aset)} adversarial samples ({fooled} fooling) to {out}")
    return 0


def _cmd_train_detector(args) -> int:
    config = _load_config(args.config)
    model = ClassifierHandle.load_checkpoint(_resolve(args.model))
    images, _, _ = _dataset(args, config)
    descriptors, labels = generate_detector_dataset(
        model, images, _attack_config(args, config),
        k=int(_merged(args, config, "k", 10)),
        only_fooled=bool(args.only_fooled),
    )
    head = train_source_head(descriptors, labels, _train_config(args, config, TrainConfig(epochs=25)))
    out = _resolve(_merged(args, config, "out", "source-head.pt"))
    save_head(head, out, source_dataset=str(_merged(args, config, "dataset", "")))
    print(f"saved source detection head to {out}")
    return 0


def _cmd_adapt_detector(args) -> int:
    config = _load_config(args.config)
    target = ClassifierHandle.load_checkpoint(_resolve(args.model))
    head = load_head(_resolve(args.detector))
    mix_set = AdversarialSet.load(_resolve(args.mix))
    mix = torch.cat([mix_set.clean, mix_set.adversarial])
    adapt_cfg = AdaptationConfig(
        delta=float(_merged(args, config, "delta", 1.0)),
        lambda_pl=float(getattr(args, "lambda_pl", None) or config.get("lambda", 0.3)),
        epochs=int(_merged(args, config, "epochs", 15)),
        seed=int(_merged(args, config, "seed", 0) or 0),
    )
    detector = adapt_target_detector(target, head, mix, adapt_cfg)
    out = _resolve(_merged(args, config, "out", "adapted-head.pt"))
    save_head(detector.head, out, source_dataset="adapted")
    print(f"saved adapted detection head to {out}")
    return 0


def _cmd_defend(args) -> int:
    config = _load_config(args.config)
    target = ClassifierHandle.load_checkpoint(_resolve(args.model))
    head = load_head(_resolve(args.detector))
    detector = TargetDetector(backbone=target, head=head, k=head.input_dim)
    aset = AdversarialSet.load(_resolve(args.input))
    batch = aset.adversarial
    cfg = _correction_config(args, config)
    mode = _merged(args, config, "mode", "soft")
    out = _resolve(_merged(args, config, "out", "defend-out"))
    out.mkdir(parents=True, exist_ok=True)

    if args.dump_spectra:
        _dump_spectra(batch, _resolve(args.dump_spectra))

    seeds = per_sample_seeds(cfg.seed, len(batch))
    predictions, traces = defend(target, detector, batch, cfg, mode, seeds, return_trace=True)
    np.save(out / "predictions.npy", predictions)
    if args.trace:
        with (out / "trace.jsonl").open("w") as fh:
            for trace in traces:
                fh.write(json.dumps(trace.to_dict()) + "\n")
    print(f"defended {len(batch)} samples ({mode} mode); predictions in {out}")
    return 0


def _cmd_evaluate(args) -> int:
    config = _load_config(args.config)
    target = ClassifierHandle.load_checkpoint(_resolve(args.model))
    head = load_head(_resolve(args.detector))
    detector = TargetDetector(backbone=target, head=head, k=head.input_dim)
    aset = AdversarialSet.load(_resolve(args.input))
    if aset.labels is None:
        raise ConfigError("evaluation needs an adversarial set saved with labels")
    eval_set = build_eval_set(
        (aset.clean, aset.labels),
        (aset.adversarial, aset.labels),
        ratio=_merged(args, config, "ratio", "1:1"),
        seed=int(_merged(args, config, "seed", 0) or 0),
        fooled_mask=aset.fooled_mask,
    )
    cfg = _correction_config(args, config)
    mode = _merged(args, config, "mode", "soft")
    report = evaluate(
        target, detector, eval_set.clean_images, eval_set.adv_images,
        (eval_set.clean_labels, eval_set.adv_labels), cfg, mode=mode,
        seed=int(_merged(args, config, "seed", 0) or 0),
        fooled_mask=eval_set.fooled_mask,
        config_snapshot={"ratio": eval_set.manifest.get("ratio"), "mode": mode},
    )
    out = _resolve(_merged(args, config, "out", "evaluation"))
    paths = emit_report(report, out)
    if args.plots:
        plot_radius_profile(target, eval_set.adv_images, eval_set.adv_labels, out / "plots" / "accuracy_vs_radius.png")
    print(f"TD.A {report.detection_clean:.2f}/{report.detection_adv:.2f}  "
          f"Co.A {report.correction_adv:.2f}  "
          f"Cb.A {report.combined_clean:.2f}/{report.combined_adv:.2f}  "
          f"baseline {report.baseline_clean:.2f}/{report.baseline_adv:.2f}")
    print(f"report written to {paths['json']}")
    return 0


def _cmd_bench(args) -> int:
    config = _load_config(args.config)
    target = ClassifierHandle.load_checkpoint(_resolve(args.model))
    head = load_head(_resolve(args.detector))
    detector = TargetDetector(backbone=target, head=head, k=head.input_dim)
    aset = AdversarialSet.load(_resolve(args.input))
    record = bench_runtime(
        target, detector, aset.adversarial, _correction_config(args, config),
        mode=_merged(args, config, "mode", "soft"),
        n_samples=args.n,
    )
    print(f"defended {record.n_samples} samples in {record.total_seconds:.2f}s "
          f"({record.per_sample_ms:.1f} ms/sample)")
    for stage, seconds in sorted(record.stage_seconds.items()):
        print(f"  {stage}: {seconds:.2f}s")
    return 0


def _dump_spectra(batch: torch.Tensor, out_dir: Path, limit: int = 8) -> None:
    from PIL import Image

    from .spectral import fft2

    out_dir.mkdir(parents=True, exist_ok=True)
    magnitude = fft2(batch[:limit]).abs().log1p()
    for i in range(magnitude.shape[0]):
        per_channel = magnitude[i].mean(dim=0)
        scaled = (255 * per_channel / per_channel.max()).clamp(0, 255).to(torch.uint8)
        Image.fromarray(scaled.numpy(), mode="L").save(out_dir / f"spectrum-{i:03d}.png")


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="freqdefense",
        description="Test-time adversarial defense: detection plus Fourier low-pass correction.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, handler, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config file; flags override its keys")
        p.set_defaults(handler=handler)
        return p

    p = add("train-arbitrary", _cmd_train_arbitrary, "train a classifier on an arbitrary labeled dataset")
    p.add_argument("--dataset"), p.add_argument("--n", type=int), p.add_argument("--side", type=int)
    p.add_argument("--epochs", type=int), p.add_argument("--seed", type=int), p.add_argument("--out")
    p.add_argument("--dropout-rate", type=float)

    p = add("gen-attacks", _cmd_gen_attacks, "generate adversarial examples for a model")
    p.add_argument("--model", required=True), p.add_argument("--dataset"), p.add_argument("--n", type=int)
    p.add_argument("--kind"), p.add_argument("--epsilon", type=float), p.add_argument("--step-size", type=float)
    p.add_argument("--num-steps", type=int), p.add_argument("--seed", type=int)
    p.add_argument("--only-fooled", action="store_true"), p.add_argument("--out")

    p = add("train-detector", _cmd_train_detector, "attack the arbitrary model and train the source head")
    p.add_argument("--model", required=True), p.add_argument("--dataset"), p.add_argument("--n", type=int)
    p.add_argument("--k", type=int), p.add_argument("--epochs", type=int), p.add_argument("--seed", type=int)
    p.add_argument("--only-fooled", action="store_true"), p.add_argument("--out")

    p = add("adapt-detector", _cmd_adapt_detector, "source-free adapt the head to an unlabeled mix")
    p.add_argument("--detector", required=True), p.add_argument("--model", required=True)
    p.add_argument("--mix", required=True, help="adversarial-set directory holding the unlabeled mix")
    p.add_argument("--delta", type=float), p.add_argument("--lambda", dest="lambda_pl", type=float)
    p.add_argument("--epochs", type=int), p.add_argument("--seed", type=int), p.add_argument("--out")

    p = add("defend", _cmd_defend, "run the defense over stored inputs")
    p.add_argument("--input", required=True, help="adversarial-set directory")
    p.add_argument("--detector", required=True), p.add_argument("--model", required=True)
    p.add_argument("--out"), p.add_argument("--mode", choices=["soft", "hard"])
    p.add_argument("--trace", action="store_true", help="write per-sample radius-search traces")
    p.add_argument("--count", type=int), p.add_argument("--radius-step", type=int), p.add_argument("--seed", type=int)
    p.add_argument("--dump-spectra", metavar="DIR", help="write magnitude heatmap PNGs")

    p = add("evaluate", _cmd_evaluate, "full evaluation: TD.A / Co.A / Cb.A report")
    p.add_argument("--input", required=True, help="adversarial-set directory (with labels)")
    p.add_argument("--detector", required=True), p.add_argument("--model", required=True)
    p.add_argument("--ratio"), p.add_argument("--mode", choices=["soft", "hard"])
    p.add_argument("--seed", type=int), p.add_argument("--out"), p.add_argument("--plots", action="store_true")
    p.add_argument("--count", type=int), p.add_argument("--radius-step", type=int)

    p = add("bench", _cmd_bench, "time the defense over n samples")
    p.add_argument("--input", required=True), p.add_argument("--detector", required=True)
    p.add_argument("--model", required=True), p.add_argument("--n", type=int)
    p.add_argument("--mode", choices=["soft", "hard"]), p.add_argument("--seed", type=int)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except DefenseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
