"""Command-line front end.

Subcommands: verify-equivalence, grad-check, count, train, ablate, gen-data.
Exit codes: 0 success, 1 a check failed or training diverged, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .complexity import count
from .data import generate_dataset, load_dataset, save_dataset
from .errors import ConfigurationError, ContractError, FormatError, TrainingDiverged
from .models import PRESETS, build_model, preset_config, save_checkpoint
from .train import (
    ABLATION_VARIANTS,
    TrainConfig,
    ablate,
    ablation_csv,
    train,
)
from .verify import equivalence_suite, grad_check_suite

GRAD_TOLERANCE = 1e-4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attnconv",
        description="Attention-as-dynamic-convolution toolkit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("verify-equivalence",
                       help="check attention vs convolution-form identities")
    p.add_argument("--n", type=int, default=None, help="token count (random if unset)")
    p.add_argument("--c", type=int, default=None, help="channels (random if unset)")
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", type=int, default=100)

    p = sub.add_parser("grad-check", help="finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("count", help="analytic complexity for a preset")
    p.add_argument("--preset", required=True, choices=PRESETS)
    p.add_argument("--activation", default="softmax")
    p.add_argument("--pos", default=None, choices=("abs", "rel"))
    p.add_argument("--kernel-type", default="pair", choices=("pair", "depthwise"))
    p.add_argument("--pooling", default=None,
                   choices=("class_token", "global_average"))
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--json", action="store_true", dest="as_json")

    p = sub.add_parser("train", help="train a toy model on a generated dataset")
    p.add_argument("--data-dir", required=True,
                   help="directory holding train.atcv / val.atcv")
    p.add_argument("--preset", default="toy-vit", choices=PRESETS)
    p.add_argument("--activation", default="softmax")
    p.add_argument("--pos", default=None, choices=("abs", "rel"))
    p.add_argument("--attention", default="standard", choices=("standard", "depthwise"))
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--warmup-epochs", type=int, default=3)
    p.add_argument("--weight-decay", type=float, default=0.05)
    p.add_argument("--label-smoothing", type=float, default=0.1)
    p.add_argument("--grad-clip", type=float, default=5.0)
    p.add_argument("--schedule", default="cosine", choices=("cosine", "constant"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="directory for logs and checkpoint")

    p = sub.add_parser("ablate", help="train several activation variants side by side")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--variants", required=True,
                   help=f"comma list from: {', '.join(ABLATION_VARIANTS)}")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="path for the comparative CSV")

    p = sub.add_parser("gen-data", help="write the seeded synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--train-size", type=int, default=512)
    p.add_argument("--val-size", type=int, default=128)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.6)
    return parser


def _cmd_verify(args) -> int:
    results = equivalence_suite(args.n, args.c, args.heads, args.seed, args.cases)
    ok = True
    for r in results:
        status = "ok" if r.ok else "FAIL"
        print(f"{r.name}: max |delta| = {r.max_abs:.3e} "
              f"(tolerance {r.tolerance:.0e}) {status}")
        ok = ok and r.ok
    print("all equivalence checks passed" if ok else "equivalence checks FAILED")
    return 0 if ok else 1


def _cmd_grad_check(args) -> int:
    ok = True
    for name, err in grad_check_suite(args.seed):
        status = "ok" if err < GRAD_TOLERANCE else "FAIL"
        print(f"{name}: max relative error = {err:.3e} "
              f"(tolerance {GRAD_TOLERANCE:.0e}) {status}")
        ok = ok and err < GRAD_TOLERANCE
    return 0 if ok else 1


def _cmd_count(args) -> int:
    overrides = {"activation": args.activation}
    if args.kernel_type == "depthwise":
        overrides["attention_kind"] = "depthwise"
    if args.pos is not None:
        overrides["positional"] = args.pos
    if args.pooling is not None:
        overrides["pooling"] = args.pooling
    cfg = preset_config(args.preset, **overrides)
    report = count(cfg, image_size=args.image_size)
    if args.as_json:
        print(report.to_json())
    else:
        print(f"{args.preset} activation={cfg.activation} pos={cfg.positional} "
              f"kind={cfg.attention_kind}")
        print(report.to_table())
    return 0


def _load_split(data_dir: str, split: str):
    path = Path(data_dir) / f"{split}.atcv"
    if not path.exists():
        raise FormatError(f"{path} not found; run gen-data first")
    return load_dataset(path, split=split)


def _cmd_train(args) -> int:
    data = _load_split(args.data_dir, "train")
    val = _load_split(args.data_dir, "val")
    overrides = {"activation": args.activation, "num_classes": data.num_classes,
                 "image_size": data.image_size}
    if args.attention == "depthwise":
        overrides["attention_kind"] = "depthwise"
    if args.pos is not None:
        overrides["positional"] = args.pos
    model_cfg = preset_config(args.preset, **overrides)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                      weight_decay=args.weight_decay, warmup_epochs=args.warmup_epochs,
                      schedule=args.schedule, label_smoothing=args.label_smoothing,
                      grad_clip=args.grad_clip, seed=args.seed)
    model = build_model(model_cfg, seed=args.seed)
    try:
        log = train(model, data, cfg, val, variant=args.activation)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1
    last = log.records[-1]
    print(f"epoch {last.epoch}: loss {last.train_loss:.4f} "
          f"train_acc {last.train_acc:.3f} val_acc {last.val_acc:.3f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "log.csv").write_text(log.to_csv())
        (out / "log.json").write_text(log.to_json())
        save_checkpoint(model, out / "checkpoint")
        print(f"wrote {out}/log.csv, log.json and checkpoint/")
    return 0


def _cmd_ablate(args) -> int:
    data = _load_split(args.data_dir, "train")
    val = _load_split(args.data_dir, "val")
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    base = preset_config("toy-vit", num_classes=data.num_classes,
                         image_size=data.image_size)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                      seed=args.seed)
    logs = ablate(variants, data, cfg, val, base_config=base)
    csv_text = ablation_csv(logs)
    for variant, log in logs.items():
        last = log.records[-1]
        print(f"{variant}: final loss {last.train_loss:.4f} "
              f"val_acc {last.val_acc:.3f}")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(csv_text)
        print(f"wrote {args.out}")
    else:
        print(csv_text, end="")
    return 0


def _cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_ds = generate_dataset(args.train_size, args.size, args.classes,
                                seed=args.seed, noise=args.noise, split="train")
    val_ds = generate_dataset(args.val_size, args.size, args.classes,
                              seed=args.seed + 1, noise=args.noise, split="val")
    save_dataset(train_ds, out / "train.atcv")
    save_dataset(val_ds, out / "val.atcv")
    print(f"wrote {out}/train.atcv ({len(train_ds)} images) and "
          f"{out}/val.atcv ({len(val_ds)} images)")
    return 0


_HANDLERS = {
    "verify-equivalence": _cmd_verify,
    "grad-check": _cmd_grad_check,
    "count": _cmd_count,
    "train": _cmd_train,
    "ablate": _cmd_ablate,
    "gen-data": _cmd_gen_data,
}


def cli_main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    if args.command is None:
        parser.print_help(sys.stderr)
        return 2
    try:
        return _HANDLERS[args.command](args)
    except (ConfigurationError, ContractError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
