"""Command line driver: train, eval, inspect, mask-report, gen-data.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
divergence.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

from .config import load_run_config
from .data import (
    Utterance,
    cmvn_utterance,
    generate_synthetic_task,
    load_dataset,
    write_dataset,
)
from .errors import ConfigError, DataError, DivergenceError
from .model import accumulated_window, count_parameters, load_checkpoint
from .training import evaluate, train_loop

FRAME_MS = 10  # 100 Hz frame rate


def _apply_cmvn(utterances):
    return [Utterance(u.id, cmvn_utterance(u.features), u.labels) for u in utterances]


def _load_labeled(path, apply_cmvn: bool):
    utts = load_dataset(path)
    if not utts:
        raise DataError(f"{path}: dataset is empty")
    return _apply_cmvn(utts) if apply_cmvn else utts


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    if args.seed is not None:
        run.seed = args.seed
    if args.out is not None:
        run.out_dir = args.out
    if args.data is not None:
        run.data = args.data
    if run.seed is None:
        raise ConfigError("seed must be set in the config file or via --seed")
    if run.data is None:
        raise ConfigError("data must be set in the config file or via --data")
    if run.out_dir is None:
        raise ConfigError("out_dir must be set in the config file or via --out")
    if not Path(run.data).exists():
        raise ConfigError(f"data path does not exist: {run.data}")
    run.model.validate()

    dataset = _load_labeled(run.data, run.apply_cmvn)
    out_dir = Path(run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = train_loop(
        run.model, dataset, run.schedule(), epochs=run.epochs,
        frames_per_batch=run.frames_per_batch, seed=run.seed, out_dir=out_dir,
        log_path=out_dir / "train.log", log_interval=run.log_interval,
        patience=run.patience, beta1=run.adam_beta1, beta2=run.adam_beta2,
        adam_eps=run.adam_eps, grad_clip=run.grad_clip)
    last = result.history[-1]
    summary = f"done epochs={len(result.history)} train_loss={last['train_loss']:.6g}"
    if "val_loss" in last:
        summary += f" val_loss={last['val_loss']:.6g} val_acc={last['val_acc']:.4g}"
    print(summary)
    return 0


def cmd_eval(args) -> int:
    config, params = load_checkpoint(args.checkpoint)
    utts = _load_labeled(args.data, not args.no_cmvn)
    for u in utts:
        if u.features.shape[1] != config.feature_dim:
            raise DataError(f"utterance {u.id!r} has feature dim "
                            f"{u.features.shape[1]}, checkpoint expects "
                            f"{config.feature_dim}")
    loss, acc = evaluate(config, params, utts)
    print(f"utterances={len(utts)} ce_loss={loss:.10g} frame_acc={acc:.6g}")
    return 0


_INSPECT_ROWS = [
    ("Input Linear Layer", "input_linear"),
    ("MultiHead Attention", "attention"),
    ("Layer Norm", "layer_norm"),
    ("Feedforward", "ffn"),
    ("1D-CNN", "conv"),
    ("Output Linear Layer", "output_linear"),
]


def cmd_inspect(args) -> int:
    config = load_run_config(args.config).model
    counts = count_parameters(config)
    L = config.num_layers
    norm_layers = 2 * L + (1 if config.extra_final_norm else 0)
    layer_counts = {
        "input_linear": 1,
        "attention": L,
        "layer_norm": norm_layers,
        "ffn": L,
        "conv": L if config.use_conv else 0,
        "output_linear": 1,
    }
    print(f"{'component':<22}{'layers':>8}{'parameters':>14}{'(M)':>8}")
    for label, key in _INSPECT_ROWS:
        n = counts[key]
        print(f"{label:<22}{layer_counts[key]:>8}{n:>14,}{n / 1e6:>8.2f}")
    print(f"{'Total':<22}{'':>8}{counts['total']:>14,}{counts['total'] / 1e6:>8.2f}")
    if L > 0:
        per_norm = 2 * config.model_dim
        print(f"note: {norm_layers} layer norms of dim {config.model_dim} hold "
              f"{norm_layers}x{per_norm} = {norm_layers * per_norm:,} parameters "
              f"(~{norm_layers * per_norm / 1e6:.3f}M), not the 0.12M sometimes "
              f"quoted for this component.")
    return 0


def _fmt_bound(v) -> str:
    return "inf" if math.isinf(v) else str(int(v))


def _fmt_frames(v) -> str:
    return "unbounded" if math.isinf(v) else str(int(v))


def cmd_mask_report(args) -> int:
    config = load_run_config(args.config).model
    config.validate()
    print(f"{'layer':<8}{'window':>14}")
    for i, w in enumerate(config.layer_windows()):
        label = f"[-{_fmt_bound(w.left)}, {_fmt_bound(w.right)}]"
        print(f"{i:<8}{label:>14}")
    left, right, conv_la, latency = accumulated_window(config)
    print(f"accumulated_attention_window=[-{_fmt_bound(left)}, {_fmt_bound(right)}]")
    print(f"conv_lookahead_frames={conv_la}")
    print(f"total_right_context_frames={_fmt_frames(latency)}")
    if math.isinf(latency):
        print("latency_ms_at_100hz=unbounded")
    else:
        print(f"latency_ms_at_100hz={int(latency) * FRAME_MS}")
    return 0


def cmd_gen_data(args) -> int:
    if args.min_len > args.max_len:
        raise ConfigError(f"--min-len {args.min_len} exceeds --max-len {args.max_len}")
    utts = generate_synthetic_task(args.num_utts, (args.min_len, args.max_len),
                                   args.dim, args.num_classes, seed=args.seed)
    manifest = write_dataset(args.out, utts)
    total = sum(u.num_frames for u in utts)
    print(f"wrote {len(utts)} utterances ({total} frames) to {manifest.parent}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="convattn",
        description="Interleaved conv/self-attention acoustic encoder tools")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True, help="key=value run config")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--out", help="override config out_dir")
    p.add_argument("--data", help="override config data path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory or manifest")
    p.add_argument("--no-cmvn", action="store_true",
                   help="skip utterance-level mean/variance normalization")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="print the per-component parameter budget")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("mask-report", help="print attention windows and latency")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_mask_report)

    p = sub.add_parser("gen-data", help="generate the synthetic frame task")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--num-utts", type=int, default=2000)
    p.add_argument("--min-len", type=int, default=20)
    p.add_argument("--max-len", type=int, default=40)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--num-classes", type=int, default=4)
    p.set_defaults(func=cmd_gen_data)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
