"""Command line entry point: ``vecap <command> [options]``.

Machine-readable results go to stdout as JSON (``sample`` writes JSONL);
logs go to stderr. Exit codes: 0 ok, 2 usage, 3 I/O or bad input file,
4 numeric divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import EvalError, eval_report, recall_at_k
from .llmclient import LLMClient, RetryPolicy
from .loss import DivergenceDetected, ToyData, TrainConfig, make_synthetic, mixed_variant_hook, train_toy
from .mockllm import MockScript, serve
from .recaption import RecaptionConfig, recaption_shard
from .sampler import SamplerConfig, mix
from .shardio import FLAG_FAILED, FLAG_REFUSAL, FLAG_TRUNCATED, RecordReader, ShardError, read_embeddings

logger = logging.getLogger("vecap")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def _ks(text: str) -> list[int]:
    try:
        return [int(k) for k in text.split(",") if k.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


# --- commands ---------------------------------------------------------------


def cmd_recaption(args) -> int:
    cfg = RecaptionConfig(max_alttext_chars=args.max_alt_chars)
    policy = RetryPolicy(max_attempts=args.max_attempts, timeout=args.timeout)
    stats = recaption_shard(
        args.inp, args.out, cfg, args.captioner_url, args.fuser_url,
        client=LLMClient(), batch_size=args.batch_size, workers=args.workers, policy=policy,
    )
    _emit(stats.to_dict())
    return EXIT_OK


def cmd_sample(args) -> int:
    mixed = (not args.ser) if args.mixed is None else args.mixed
    cfg = SamplerConfig(
        alttext_mode=args.mode, mixed=mixed, ser=args.ser, seed=args.seed,
        fixed_source=args.fixed_source, resample=args.resample,
    )
    reader = RecordReader(args.inp)
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for step, rec in enumerate(reader):
            choice = mix(rec, cfg, args.epoch, step)
            row = {"record_id": rec.record_id, "epoch": args.epoch, **choice.to_dict()}
            out.write(json.dumps(row, ensure_ascii=False) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def _load_toy_data(args) -> ToyData:
    if args.images:
        if not args.texts:
            raise UsageError("--images needs --texts")
        img = read_embeddings(args.images).data.astype(np.float64)
        variants = [read_embeddings(args.texts).data.astype(np.float64)]
        if args.texts_alt:
            variants.append(read_embeddings(args.texts_alt).data.astype(np.float64))
        return ToyData(img, variants)
    return make_synthetic(args.n + args.held_out, args.feat_dim, args.feat_dim, seed=args.seed, noise=args.noise)


def cmd_train_toy(args) -> int:
    data = _load_toy_data(args)
    n_train = len(data) - args.held_out
    if n_train < args.batch_size:
        raise UsageError(f"only {n_train} training pairs for batch size {args.batch_size}")
    train = data.subset(np.arange(n_train))
    held = data.subset(np.arange(n_train, len(data)))
    cfg = TrainConfig(
        lr=args.lr, weight_decay=args.weight_decay, warmup_steps=min(args.warmup, args.steps),
        total_steps=args.steps, batch_size=args.batch_size, seed=args.seed, dim=args.dim,
        reduction=args.loss_reduction, aug_sigma=args.aug_sigma,
    )
    if args.sampling == "mixed" and len(train.txt_variants) > 1:
        hook = mixed_variant_hook(train, SamplerConfig(seed=args.seed, resample=args.resample))
    elif args.sampling == "vecap" and len(train.txt_variants) > 1:
        hook = lambda i, epoch, step: 1  # noqa: E731
    else:
        hook = None
    result = train_toy(train, cfg, hook)
    if args.history:
        Path(args.history).write_text(result.history_csv(), encoding="utf-8")
    summary = {
        "steps": args.steps,
        "seed": args.seed,
        "final_loss": result.history[-1][2] if result.history else None,
        "tau": result.tau,
        "history": args.history,
    }
    if len(held):
        heldout = {}
        for v, txt in enumerate(held.txt_variants):
            zi, zt = result.encode(held.img, txt)
            gt = {i: [i] for i in range(len(held))}
            heldout[f"variant{v}"] = {
                "i2t_r1": recall_at_k(zi, zt, gt, [1])[1],
                "t2i_r1": recall_at_k(zt, zi, gt, [1])[1],
            }
        summary["heldout"] = heldout
    _emit(summary)
    return EXIT_OK


def cmd_eval(args) -> int:
    report = eval_report(
        args.images, texts=args.texts, gt_path=args.gt, ks=args.ks,
        classes=args.classes, class_labels=args.labels, topk=args.topk, map_labels=args.map_labels,
    )
    if args.table:
        print(report.table(), file=sys.stderr)
    sys.stdout.write(report.to_json() + "\n")
    return EXIT_OK


def _histogram(lengths: list[int], width: int) -> dict[str, int]:
    counts = Counter((n // width) * width for n in lengths)
    return {f"{lo}-{lo + width - 1}": counts[lo] for lo in sorted(counts)}


def cmd_stats(args) -> int:
    reader = RecordReader(args.inp)
    flags: Counter[str] = Counter()
    alt_len, vec_len, vecap_len = [], [], []
    records = with_vec = with_vecap = over_limit = 0
    for rec in reader:
        records += 1
        flags.update(rec.flags)
        alt_len.extend(len(a) for a in rec.alt_texts)
        over_limit += sum(len(a) > args.max_alt_chars for a in rec.alt_texts)
        if rec.vec is not None:
            with_vec += 1
            vec_len.append(len(rec.vec.split()))
        if rec.vecap is not None:
            with_vecap += 1
            vecap_len.append(len(rec.vecap.split()))
    _emit({
        "records": records,
        "malformed": reader.skipped,
        "complete": reader.complete,
        "with_vec": with_vec,
        "with_vecap": with_vecap,
        "refusals": flags[FLAG_REFUSAL],
        "truncations": flags[FLAG_TRUNCATED],
        "failed": flags[FLAG_FAILED],
        "alttexts_over_limit": over_limit,
        "alttext_chars": _histogram(alt_len, 50),
        "vec_words": _histogram(vec_len, 5),
        "vecap_words": _histogram(vecap_len, 5),
    })
    return EXIT_OK


def cmd_mock_llm(args) -> int:
    script = MockScript.load(args.script) if args.script else MockScript(seed=args.seed)
    with serve(script, port=args.port, host=args.host) as server:
        _emit({"url": server.url})
        try:
            signal.pause()
        except KeyboardInterrupt:
            pass
    return EXIT_OK


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--log-level", default="WARNING")
    common.add_argument("--config", help="flat key=value file; command-line flags win")

    parser = argparse.ArgumentParser(prog="vecap", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("recaption", parents=[common], help="enrich a shard with VeC and VeCap")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--captioner-url", required=True)
    p.add_argument("--fuser-url", required=True)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--max-alt-chars", type=int, default=300)
    p.add_argument("--max-attempts", type=int, default=4)
    p.add_argument("--timeout", type=float, default=60.0)
    p.set_defaults(func=cmd_recaption)

    p = sub.add_parser("sample", parents=[common], help="emit the training caption chosen per record")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out")
    p.add_argument("--mode", choices=["hcs", "random"], default="hcs")
    p.add_argument("--mixed", action=argparse.BooleanOptionalAction, default=None,
                   help="AltText/VeCap mixing (default: on unless --ser)")
    p.add_argument("--ser", action="store_true")
    p.add_argument("--fixed-source", choices=["AltText", "VeCap"], default="AltText")
    p.add_argument("--epoch", type=int, default=0)
    p.add_argument("--resample", choices=["per-epoch", "per-step"], default="per-epoch")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train-toy", parents=[common], help="train linear encoders on toy data")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--n", type=int, default=256, help="synthetic training pairs")
    p.add_argument("--held-out", type=int, default=64)
    p.add_argument("--feat-dim", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--images")
    p.add_argument("--texts")
    p.add_argument("--texts-alt")
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=5e-3)
    p.add_argument("--weight-decay", type=float, default=0.1)
    p.add_argument("--warmup", type=int, default=50)
    p.add_argument("--aug-sigma", type=float, default=0.0)
    p.add_argument("--loss-reduction", choices=["mean", "sum"], default="mean")
    p.add_argument("--sampling", choices=["mixed", "alttext", "vecap"], default="mixed")
    p.add_argument("--resample", choices=["per-epoch", "per-step"], default="per-epoch")
    p.add_argument("--history", help="write step,lr,loss,tau CSV here")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("eval", parents=[common], help="retrieval, zero-shot and mAP metrics")
    p.add_argument("--images", required=True)
    p.add_argument("--texts")
    p.add_argument("--gt")
    p.add_argument("--ks", type=_ks, default=[1, 5, 10])
    p.add_argument("--classes")
    p.add_argument("--labels")
    p.add_argument("--topk", type=_ks, default=[1, 5])
    p.add_argument("--map-labels")
    p.add_argument("--table", action="store_true", help="also print a table on stderr")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", parents=[common], help="shard statistics")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--max-alt-chars", type=int, default=300)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("mock-llm", parents=[common], help="run the in-repo mock LLM server")
    p.add_argument("--script")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--host", default="127.0.0.1")
    p.set_defaults(func=cmd_mock_llm)
    return parser


def _read_config(path: str) -> dict[str, str]:
    out = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{line_no}: expected key=value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _config_path(argv: list[str]) -> str | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    path = _config_path(argv)
    commands = parser._subparsers._group_actions[0].choices
    command = next((tok for tok in argv if tok in commands), None)
    if path is None or command is None:
        return parser.parse_args(argv)
    values = _read_config(path)
    subparser = commands[command]
    # keys are flag names ("max-alt-chars" or "max_alt_chars"), not argparse dests
    actions = {}
    for a in subparser._actions:
        for opt in a.option_strings:
            if opt.startswith("--") and not opt.startswith("--no-") and a.dest not in ("help", "config"):
                actions[opt[2:].replace("-", "_")] = a
    unknown = sorted(set(values) - set(actions))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    defaults = {}
    for key, raw in values.items():
        action = actions[key]
        if action.nargs == 0:
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"config key {key} expects a boolean")
            defaults[action.dest] = raw.lower() in ("true", "1", "yes")
        else:
            defaults[action.dest] = raw
        # a value from the file satisfies a required flag
        action.required = False
    # defaults only: anything given on the command line still wins
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (UsageError, OSError) as exc:
        print(f"vecap: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"vecap: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceDetected as exc:
        print(f"vecap: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, ShardError, EvalError) as exc:
        print(f"vecap: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"vecap: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        print("vecap: interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
