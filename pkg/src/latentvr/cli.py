"""Command-line entry point: ``latentvr <verb> [flags]``.

Every verb exits 0 on success; on error it prints one line
``error: <verb>: <reason>`` to stderr and exits nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import TrainConfig, load_config
from .model import TinyVLM
from .synth import evaluate, read_dataset, train_test_split, write_dataset

log = logging.getLogger("latentvr")


class CliError(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    """Usage errors also become a single ``error:`` line."""

    def error(self, message: str):
        self.exit(2, f"error: {self.prog}: {' '.join(message.split())}\n")


def _cfg(args) -> TrainConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg.out_dir = args.out
    if args.k is not None:
        if args.k < 1:
            raise CliError("--k must be >= 1")
        cfg.K = cfg.vlpo.K = args.k
    return cfg


def _out(cfg: TrainConfig) -> Path:
    p = Path(cfg.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _data(cfg: TrainConfig):
    d = Path(cfg.out_dir)
    tr, te = d / "train.jsonl", d / "test.jsonl"
    if not tr.exists() or not te.exists():
        raise CliError(f"dataset missing under {d}; run gen-data first")
    return read_dataset(tr), read_dataset(te)


def _load(path: Path) -> TinyVLM:
    if not path.exists():
        raise CliError(f"checkpoint not found: {path}")
    return TinyVLM.load(path)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def cmd_gen_data(args) -> None:
    cfg = _cfg(args)
    out = _out(cfg)
    paths = [out / "train.jsonl", out / "test.jsonl"]
    existing = [str(p) for p in paths if p.exists()]
    if existing and not args.overwrite:
        raise CliError(f"refusing to overwrite {', '.join(existing)} (pass --overwrite)")
    cfg.task.seed = cfg.task.seed if args.seed is None else args.seed
    train, test = train_test_split(cfg.task)
    write_dataset(paths[0], train)
    write_dataset(paths[1], test)
    _emit({"train": str(paths[0]), "test": str(paths[1]), "n_train": len(train), "n_test": len(test)})


def cmd_train_sft(args) -> None:
    from .train import train_sft

    cfg = _cfg(args)
    train, test = _data(cfg)
    out = _out(cfg)
    res = train_sft(cfg, train, test, metrics_path=out / "sft_metrics.jsonl", checkpoint_path=out / "sft.ckpt")
    _emit({"checkpoint": str(out / "sft.ckpt"), **res.history[-1]} if res.history else {"checkpoint": str(out / "sft.ckpt")})


def cmd_train_vlpo(args) -> None:
    from .train import train_vlpo

    cfg = _cfg(args)
    train, _ = _data(cfg)
    out = _out(cfg)
    init = _load(Path(args.init) if args.init else out / "sft.ckpt")
    mode = args.mode or cfg.vlpo.mode
    res = train_vlpo(cfg, init, train, metrics_path=out / f"{mode}_metrics.jsonl",
                     checkpoint_path=out / f"{mode}.ckpt", rollout_path=out / f"{mode}_rollouts.jsonl", mode=mode)
    _emit({"checkpoint": str(out / f"{mode}.ckpt"), "steps": len(res.history)})


def _eval_target(args, cfg):
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(cfg.out_dir) / "sft.ckpt"
    model = _load(ckpt)
    if args.dataset:
        ds = read_dataset(args.dataset)
    else:
        ds = _data(cfg)[1]
    if not ds:
        raise CliError("evaluation dataset is empty")
    return model, ds


def cmd_eval(args) -> None:
    cfg = _cfg(args)
    model, ds = _eval_target(args, cfg)
    ev = evaluate(model, ds, K=cfg.K, force_latent=args.force_latent == "on")
    report = {k: ev[k] for k in ("accuracy", "format_rate", "mean_tokens", "wall_time", "n")}
    if args.report:
        Path(args.report).write_text(json.dumps(report, sort_keys=True) + "\n")
    _emit(report)


def cmd_sweep_k(args) -> None:
    from .train import sweep_k

    cfg = _cfg(args)
    model, ds = _eval_target(args, cfg)
    ks = [int(k) for k in args.ks.split(",")] if args.ks else [2, 4, 8, 14, 16]
    rows = sweep_k(model, ds, ks, force_latent=args.force_latent == "on")
    print("K\taccuracy")
    for k, acc in rows:
        print(f"{k}\t{acc:.6f}")


def cmd_attn_frac(args) -> None:
    from .train import attention_fraction

    cfg = _cfg(args)
    model, ds = _eval_target(args, cfg)
    fr = attention_fraction(model, ds[: args.limit], cfg.K)
    print("layer\tvisual_fraction")
    for i, f in enumerate(fr):
        print(f"{i}\t{f:.6f}")


def cmd_grad_check(args) -> None:
    from .checks import run_grad_checks

    cfg = _cfg(args)
    reports = run_grad_checks(seed=cfg.seed, align_to_visual=cfg.sft.align_to_visual)
    failed = [name for name, r in reports.items() if not r.passed]
    for name, r in reports.items():
        _emit({"target": name, "passed": r.passed, "max_rel_error": r.max_rel_error, "worst": r.worst_input})
    if failed:
        raise CliError(f"gradient check failed for {', '.join(failed)}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=None, help="key = value config file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None, help="output directory (overrides out_dir)")
    common.add_argument("--mode", choices=("vlpo", "grpo"), default=None)
    common.add_argument("--force-latent", choices=("on", "off"), default="off")
    common.add_argument("--k", type=int, default=None, help="latent budget K")
    common.add_argument("--overwrite", action="store_true")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="latentvr", description="Latent visual reasoning at desk scale.")
    sub = p.add_subparsers(dest="verb", required=True)
    sub.add_parser("gen-data", parents=[common], help="write train/test splits").set_defaults(fn=cmd_gen_data)
    sub.add_parser("train-sft", parents=[common], help="Stage 1: ROI-anchored SFT").set_defaults(fn=cmd_train_sft)
    v = sub.add_parser("train-vlpo", parents=[common], help="Stage 2: policy optimisation")
    v.add_argument("--init", default=None, help="init/reference checkpoint (default OUT/sft.ckpt)")
    v.set_defaults(fn=cmd_train_vlpo)
    for name, fn, helptext in (("eval", cmd_eval, "greedy evaluation report"),
                               ("sweep-k", cmd_sweep_k, "accuracy vs inference latent budget"),
                               ("attn-frac", cmd_attn_frac, "per-layer visual attention fraction")):
        e = sub.add_parser(name, parents=[common], help=helptext)
        e.add_argument("--checkpoint", default=None)
        e.add_argument("--dataset", default=None)
        if name == "eval":
            e.add_argument("--report", default=None, help="also write the report here")
        if name == "sweep-k":
            e.add_argument("--ks", default=None, help="comma-separated budgets (default 2,4,8,14,16)")
        if name == "attn-frac":
            e.add_argument("--limit", type=int, default=100)
        e.set_defaults(fn=fn)
    sub.add_parser("grad-check", parents=[common], help="finite-difference check of both objectives") \
        .set_defaults(fn=cmd_grad_check)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.fn(args)
    except Exception as exc:  # one machine-parsable line, nonzero exit
        reason = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {args.verb}: {reason}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
