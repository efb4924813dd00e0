"""Command-line interface.

Subcommands: gen-data, train, sample, eval, inspect-params.  One master
seed per command flows into named substreams, every output file lands
atomically, and identical invocations produce identical bytes.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import data, diffusion, enrich, evaluate, ppm, training
from .errors import GarmentGenError
from .model import generate
from .training import TrainConfig


class _Formatter(argparse.HelpFormatter):
    """Pinned wrap width so --help output is byte-stable everywhere."""

    def __init__(self, prog):
        super().__init__(prog, width=100)


def _atomic_write_ppm(path: Path, img: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    os.close(fd)
    try:
        ppm.write_ppm(tmp, img)
        os.replace(tmp, path)
    except Exception:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="garmentgen", formatter_class=_Formatter,
        description="Garment-conditioned toy diffusion: data, training, sampling, evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", formatter_class=_Formatter,
                       help="write a synthetic garment corpus")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--seed", type=int, default=0, help="master seed (free-patch placement)")
    p.add_argument("--out", required=True, help="output directory (must not exist)")
    p.add_argument("--free-patch", action="store_true",
                   help="place garment patches at random positions instead of the torso")

    p = sub.add_parser("train", formatter_class=_Formatter, help="run one training stage")
    p.add_argument("--config", help="JSON training config (defaults otherwise)")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--mode", choices=sorted(training.MODE_GROUPS),
                   help="override the ablation mode")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--steps", type=int, help="override the step count")
    p.add_argument("--init", help="stage-0 checkpoint to start stage 1 from")
    p.add_argument("--resume", help="checkpoint to continue (its config wins)")

    p = sub.add_parser("sample", formatter_class=_Formatter,
                       help="generate one image from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True, help="user prompt")
    p.add_argument("--ref", help="reference image (PPM); omit for text-only generation")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=50, help="sampling steps")
    p.add_argument("--guidance", type=float, default=7.5, help="guidance weight")
    p.add_argument("--enrich", choices=["template", "external", "off"], default="template",
                   help="prompt enrichment mode")
    p.add_argument("--endpoint", help="rewrite service URL (enrich=external)")
    p.add_argument("--timeout", type=float, default=10.0, help="rewrite service timeout")
    p.add_argument("--out", required=True, help="output image path (PPM)")

    p = sub.add_parser("eval", formatter_class=_Formatter,
                       help="run the generation benchmark over a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--seeds", type=int, default=5, help="generations per reference")
    p.add_argument("--tier", choices=list(data.CAPTION_TIERS), default="simple")
    p.add_argument("--steps", type=int, default=12, help="sampling steps")
    p.add_argument("--guidance", type=float, default=2.0, help="guidance weight")
    p.add_argument("--max-samples", type=int, help="cap the number of references")
    p.add_argument("--no-baseline", action="store_true",
                   help="skip the unconditioned comparison arm")
    p.add_argument("--enrich-captions", action="store_true",
                   help="run template enrichment on each caption")
    p.add_argument("--min-texture-gap", type=float,
                   help="exit non-zero unless conditioned-minus-baseline reaches this")

    p = sub.add_parser("inspect-params", formatter_class=_Formatter,
                       help="print the parameter partition for a config/mode")
    p.add_argument("--config", help="JSON training config (defaults otherwise)")
    p.add_argument("--mode", choices=sorted(training.MODE_GROUPS),
                   help="ablation mode (default: config's mode)")
    p.add_argument("--json", action="store_true", help="emit JSON instead of a table")

    return parser


def _load_config(args) -> TrainConfig:
    config = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    overrides = {}
    for name in ("mode", "seed", "steps"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    return dataclasses.replace(config, **overrides) if overrides else config


def _cmd_gen_data(args) -> int:
    out = data.gen_dataset(args.n, args.seed, args.out, free_patch=args.free_patch)
    print(f"wrote {args.n} samples to {out}")
    return 0


def _cmd_train(args) -> int:
    dataset = data.Dataset.load(args.data)
    if args.resume:
        result = training.train(None, dataset, out_path=args.out,
                                resume_from=args.resume, steps_override=args.steps)
    else:
        config = _load_config(args)
        result = training.train(config, dataset, out_path=args.out, init_from=args.init)
    trace_path = Path(args.out).with_suffix(".loss.json")
    fd, tmp = tempfile.mkstemp(dir=trace_path.parent, prefix=trace_path.name + ".")
    with os.fdopen(fd, "w") as f:
        json.dump([round(x, 8) for x in result.loss_trace], f)
        f.write("\n")
    os.replace(tmp, trace_path)
    last = result.loss_trace[-min(100, len(result.loss_trace)):]
    print(f"trained {result.config.steps} steps (stage {result.config.stage}, "
          f"mode {result.config.mode}); final-100 mean loss {float(np.mean(last)):.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _cmd_sample(args) -> int:
    model, _, config = training.load_model(args.checkpoint)
    schedule = diffusion.make_schedule(config.timesteps, config.beta_start, config.beta_end)
    guidance = diffusion.GuidanceConfig(weight=args.guidance, num_steps=args.steps)
    ref = ppm.read_ppm(args.ref) if args.ref else None

    caption = args.prompt
    if args.enrich != "off":
        if ref is None:
            raise GarmentGenError("--enrich needs --ref; use --enrich off for text-only runs")
        if args.enrich == "external":
            if not args.endpoint:
                raise GarmentGenError("--enrich external needs --endpoint")
            result = enrich.enrich_external(args.prompt, ref, args.endpoint,
                                            timeout=args.timeout)
        else:
            result = enrich.enrich(args.prompt, ref)
        caption = result.text
        print(f"caption [{result.source}]: {caption}")
    else:
        print(f"caption [raw]: {caption}")

    img = generate(model, schedule, caption, ref, guidance, args.seed)
    _atomic_write_ppm(Path(args.out), img)
    print(f"image: {args.out}")
    return 0


def _cmd_eval(args) -> int:
    model, _, config = training.load_model(args.checkpoint)
    schedule = diffusion.make_schedule(config.timesteps, config.beta_start, config.beta_end)
    guidance = diffusion.GuidanceConfig(weight=args.guidance, num_steps=args.steps)
    dataset = data.Dataset.load(args.data)
    report = evaluate.run_benchmark(
        model, schedule, dataset, seeds=list(range(args.seeds)), tier=args.tier,
        guidance=guidance, baseline=not args.no_baseline,
        enrich_captions=args.enrich_captions, max_samples=args.max_samples,
        out_dir=args.out)
    agg = report["aggregates"]
    for arm in ("conditioned", "baseline"):
        if arm in agg:
            print(f"{arm}: texture_sim {agg[arm]['texture_sim_mean']:.4f} "
                  f"+/- {agg[arm]['texture_sim_std']:.4f} (n={agg[arm]['n']})")
    if "texture_gap" in agg:
        print(f"texture_gap: {agg['texture_gap']:.4f}")
    print(f"report: {args.out}")
    if args.min_texture_gap is not None:
        gap = agg.get("texture_gap")
        if gap is None or gap < args.min_texture_gap:
            print(f"FAIL: texture_gap {gap} below required {args.min_texture_gap}",
                  file=sys.stderr)
            return 1
    return 0


def _cmd_inspect_params(args) -> int:
    config = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    mode = args.mode or config.mode
    model = training.ToyUNet(config.model, training.substream(config.seed, "model-init"))
    if config.stage == 1:
        model.attach_lora(config.lora_rank, training.substream(config.seed, "lora-init"))
    report = training.report_params(model, mode)
    if args.json:
        print(json.dumps(report.to_json(), indent=1, sort_keys=True))
    else:
        print(report.to_text())
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "sample": _cmd_sample,
    "eval": _cmd_eval,
    "inspect-params": _cmd_inspect_params,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except GarmentGenError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
