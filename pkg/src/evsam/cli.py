"""Command-line entry point: ``evsam {gen,distill,train,eval,bench}``.

Exit codes: 0 success, 1 usage error, 2 config error (bad config file,
missing or mismatched checkpoint), 3 runtime or numeric error, 4 failed
acceptance check. Set ``EVSAM_LOG=debug`` for per-step logging.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

from .attention import AttentionConfig
from .backbone import ImageEncoder, ModelConfig
from .data.checkpoint import (Checkpoint, CheckpointError, CheckpointShapeError, check_compatible, dumps,
                              load_checkpoint)
from .data.config import ConfigError, parse_config, reference_config_path
from .data.dataset import gen_dataset, load_dataset, save_dataset
from .nn.tensor import NonFiniteError
from .sam_head import Predictor, SamModel
from .training import TrainingDivergedError, distill_loop, resize_longest, steps_per_epoch, train_loop

log = logging.getLogger("evsam")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


def exit_code(exc: BaseException) -> int:
    """Map an exception raised by a subcommand to its exit status."""
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, CheckFailed):
        return EXIT_CHECK
    if isinstance(exc, (ConfigError, CheckpointShapeError, FileNotFoundError)):
        return EXIT_CONFIG
    return EXIT_RUNTIME


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- helpers ------------------------------------------------------------------

def _load_configs(args):
    path = args.config or reference_config_path()
    model, train, loss, attention = parse_config(path)
    overrides = {k: getattr(args, k) for k in ("seed", "epochs", "batch_size", "lr_init")
                 if getattr(args, k, None) is not None}
    try:
        train = replace(train, **overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if getattr(args, "input_size", None):
        try:
            model = replace(model, input_size=args.input_size)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return model, train, loss, attention


def _arch_meta(model: ModelConfig, attention: AttentionConfig) -> dict:
    return {"model": asdict(model), "attention": asdict(attention)}


def _configs_from_meta(meta: dict):
    try:
        return ModelConfig(**meta["model"]), AttentionConfig(**meta["attention"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"checkpoint metadata lacks a usable architecture: {exc}") from None


def _write_trace(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(rows[0]) if rows else ["step"])
        for r in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in r.values()])


def _write_checkpoint(path: Path, state, meta: dict) -> None:
    path.write_bytes(dumps(Checkpoint(state, meta)))


def _dataset(path):
    if path is None:
        raise UsageError("--data is required")
    scenes = load_dataset(path)
    if not scenes:
        raise UsageError(f"dataset at {path} is empty")
    return scenes


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _step_logger(every: int = 10):
    def emit(row):
        if row["step"] % every == 0:
            log.info(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    return emit


# -- subcommands ----------------------------------------------------------------

def cmd_gen(args) -> int:
    try:
        scenes = gen_dataset(args.seed, args.count, args.size, args.max_instances)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    save_dataset(scenes, _out_dir(args.out))
    n = sum(len(s.instances) for s in scenes)
    print(f"wrote {len(scenes)} images with {n} instances to {args.out}")
    return EXIT_OK


def cmd_distill(args) -> int:
    model_cfg, train_cfg, _, attention = _load_configs(args)
    images = [resize_longest(s.image, [], model_cfg.input_size)[0] for s in _dataset(args.data)]
    student = ImageEncoder(model_cfg, attention, seed=train_cfg.seed)
    teacher = ImageEncoder(model_cfg, attention, seed=args.teacher_seed).freeze()
    start = 0
    steps = args.steps or train_cfg.epochs * steps_per_epoch(len(images), train_cfg.batch_size)
    total = start + steps
    if args.resume:
        ckpt = load_checkpoint(args.resume, student)
        start = int(ckpt.metadata.get("step", 0))
        total = max(int(ckpt.metadata.get("total_steps", start + steps)), start + steps)
    result = distill_loop(student, teacher, images, train_cfg, steps=steps, start_step=start,
                          total_steps=total, log=_step_logger())
    out = _out_dir(args.out)
    meta = dict(result.checkpoint.metadata, teacher_seed=args.teacher_seed, total_steps=total,
                **_arch_meta(model_cfg, attention))
    _write_checkpoint(out / "distill.ckpt", result.checkpoint.tensors, meta)
    _write_trace(out / "distill_trace.csv", result.trace)
    first, last = result.trace[0]["l2"], result.trace[-1]["l2"]
    print(f"distilled steps {start}..{start + steps - 1}: l2 {first:.6g} -> {last:.6g}")
    return EXIT_OK


def _load_init(model: SamModel, path) -> None:
    ckpt = load_checkpoint(path)
    if ckpt.metadata.get("phase") == "distill":
        check_compatible(ckpt, model.image_encoder)
        model.image_encoder.load_state_dict(ckpt.tensors)
    else:
        check_compatible(ckpt, model)
        model.load_state_dict(ckpt.tensors)


def cmd_train(args) -> int:
    model_cfg, train_cfg, loss_cfg, attention = _load_configs(args)
    scenes = _dataset(args.data)
    model = SamModel(model_cfg, attention, seed=train_cfg.seed)
    if args.init:
        _load_init(model, args.init)
    result = train_loop(model, scenes, train_cfg, loss_cfg, log=_step_logger(), max_steps=args.max_steps)
    out = _out_dir(args.out)
    meta = dict(result.checkpoint.metadata, **_arch_meta(model_cfg, attention))
    _write_checkpoint(out / "model.ckpt", result.checkpoint.tensors, meta)
    _write_trace(out / "train_trace.csv", result.trace)
    if result.trace:
        print(f"trained {result.steps} steps: loss {result.trace[0]['total']:.6g} -> "
              f"{result.trace[-1]['total']:.6g}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import (OraclePredictor, box_eval, box_summary, click_eval, click_summary, write_rows,
                             write_summary)

    scenes = _dataset(args.data)
    if args.oracle:
        size = args.input_size or (_load_configs(args)[0].input_size)
        predictor = OraclePredictor(scenes, size)
    else:
        if not args.ckpt:
            raise ConfigError("--ckpt is required unless --oracle is given")
        if not Path(args.ckpt).is_file():
            raise FileNotFoundError(f"checkpoint {args.ckpt} not found")
        ckpt = load_checkpoint(args.ckpt)
        if args.config:
            model_cfg, _, _, attention = _load_configs(args)
        else:
            model_cfg, attention = _configs_from_meta(ckpt.metadata)
        model = SamModel(model_cfg, attention, seed=0)
        check_compatible(ckpt, model)
        model.load_state_dict(ckpt.tensors)
        size = model_cfg.input_size
        predictor = Predictor(model)
    out = _out_dir(args.out)
    try:
        if args.mode == "point":
            budgets = sorted({1, 3, 5, args.clicks} & set(range(1, args.clicks + 1)))
            result = click_eval(predictor, scenes, size, clicks_at=budgets)
            summary = click_summary(result)
        else:
            result = box_eval(predictor, scenes, size)
            summary = box_summary(result)
    except ValueError as exc:
        if "no ground-truth masks" in str(exc):
            raise UsageError(str(exc)) from None
        raise
    write_rows(out / f"eval_{args.mode}.csv", result.rows)
    write_summary(out / f"eval_{args.mode}_summary.txt", summary)
    print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in summary.items()))
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import attention_scaling, count_macs, time_forward

    out = _out_dir(args.out) if args.out else None
    if args.mode == "attn-scaling":
        res = attention_scaling(reps=args.reps)
        text = res.to_table()
        print(text)
        if out:
            (out / "attn_scaling.txt").write_text(text + "\n")
        if args.check and not (res.fast_ratio <= 6 and res.quadratic_ratio >= 10):
            raise CheckFailed(f"scaling ratios fast {res.fast_ratio:.2f} (<= 6 required), "
                              f"quadratic {res.quadratic_ratio:.2f} (>= 10 required)")
        return EXIT_OK
    model_cfg, _, _, attention = _load_configs(args)
    if args.mode == "macs":
        report = count_macs(model_cfg, attention=attention)
        print(report.to_table())
        if out:
            (out / "cost.csv").write_text(report.to_csv())
        return EXIT_OK
    model = SamModel(model_cfg, attention, seed=0)
    timing = time_forward(model, warmup=args.warmup, reps=args.reps)
    text = (f"input {model_cfg.input_size}: median {timing.median_ms:.2f} ms, MAD {timing.mad_ms:.2f} ms, "
            f"{timing.images_per_s:.2f} images/s over {len(timing.samples_ms)} reps")
    print(text)
    if out:
        (out / "timing.txt").write_text(text + "\n" + "\n".join(f"{s:.3f}" for s in timing.samples_ms) + "\n")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="evsam", description="Desk-scale promptable segmentation with linear-attention encoders.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_flags(sp, training=True):
        sp.add_argument("--config", help="config file (default: the shipped desk.cfg)")
        if training:
            sp.add_argument("--seed", type=int, help="override [train] seed")
            sp.add_argument("--epochs", type=int, help="override [train] epochs")
            sp.add_argument("--batch-size", dest="batch_size", type=int, help="override [train] batch_size")
            sp.add_argument("--lr", dest="lr_init", type=float, help="override [train] lr_init")

    g = sub.add_parser("gen", help="write a synthetic dataset")
    g.add_argument("--seed", type=int, default=0, help="dataset seed (default 0)")
    g.add_argument("--count", type=int, default=10, help="number of images (default 10)")
    g.add_argument("--size", type=int, default=128, help="image side, a multiple of 32 (default 128)")
    g.add_argument("--max-instances", dest="max_instances", type=int, default=4,
                   help="maximum shapes per image (default 4)")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen)

    d = sub.add_parser("distill", help="distill a frozen teacher's image embeddings into the encoder")
    config_flags(d)
    d.add_argument("--teacher-seed", dest="teacher_seed", type=int, default=1,
                   help="init seed of the frozen teacher encoder (default 1)")
    d.add_argument("--data", help="dataset directory")
    d.add_argument("--steps", type=int, help="optimizer steps (default: epochs x batches per epoch)")
    d.add_argument("--resume", help="distillation checkpoint to continue from")
    d.add_argument("--out", required=True, help="output directory")
    d.set_defaults(func=cmd_distill)

    t = sub.add_parser("train", help="prompt-supervised end-to-end training")
    config_flags(t)
    t.add_argument("--init", help="distillation or model checkpoint to start from")
    t.add_argument("--data", help="dataset directory")
    t.add_argument("--max-steps", dest="max_steps", type=int, help="stop after this many steps")
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="click or box evaluation")
    e.add_argument("--mode", choices=("point", "box"), default="point", help="protocol (default point)")
    e.add_argument("--ckpt", help="model checkpoint")
    e.add_argument("--config", help="config file (default: architecture stored in the checkpoint)")
    e.add_argument("--data", help="dataset directory")
    e.add_argument("--clicks", type=int, default=5, help="largest click budget (default 5)")
    e.add_argument("--oracle", action="store_true", help="score the ground truth itself instead of a model")
    e.add_argument("--input-size", dest="input_size", type=int, help="input size for --oracle")
    e.add_argument("--out", required=True, help="output directory")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="MACs/params, forward timing or attention scaling")
    config_flags(b, training=False)
    b.add_argument("--input-size", dest="input_size", type=int, help="override the model input size")
    b.add_argument("--mode", choices=("macs", "time", "attn-scaling"), default="macs", help="(default macs)")
    b.add_argument("--reps", type=int, default=9, help="timed repetitions, >= 5 (default 9)")
    b.add_argument("--warmup", type=int, default=1, help="untimed warm-up runs (default 1)")
    b.add_argument("--check", action="store_true", help="attn-scaling: exit 4 unless fast <= 6 and quadratic >= 10")
    b.add_argument("--out", help="directory for report files")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    level = os.environ.get("EVSAM_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:          # --help, or a usage error already printed
        return int(exc.code or 0)
    if getattr(args, "clicks", 1) < 1 or getattr(args, "reps", 5) < 5 or getattr(args, "warmup", 1) < 1:
        print("evsam: error: --clicks >= 1, --reps >= 5 and --warmup >= 1 are required", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, CheckFailed, ConfigError, CheckpointError, FileNotFoundError, OSError,
            NonFiniteError, TrainingDivergedError, ValueError, ArithmeticError) as exc:
        code = exit_code(exc)
        print(f"evsam {args.command}: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
