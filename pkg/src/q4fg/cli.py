"""``q4fg`` command line.

Exit codes: 0 success, 2 usage error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from . import analysis, container, distill, pipeline
from .exceptions import ConfigError, Q4FGError
from .gemm import GEMM_CASES, GemmShapeCase, bench_gemm, write_bench_csv
from .model import ARCHS, PARTS, ModelConfig, QuantStrategy, build_model, canonical_part, forward, reduce_model
from .quant import PASSTHROUGH, QuantScheme, activation_scheme, weight_scheme
from .sparsity import CompositionOrder, parse_structure

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument types
# ---------------------------------------------------------------------------

def _parts_arg(text: str) -> list[str]:
    try:
        return pipeline.parse_parts(text)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _groups_arg(text: str):
    if text in ("d_in", "row", "rows"):
        return None
    if text == "tensor":
        return "tensor"
    try:
        g = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"groups must be an integer, 'd_in' or 'tensor', got {text!r}") from None
    if g < 1:
        raise argparse.ArgumentTypeError("groups must be >= 1")
    return g


def _clip_arg(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"clip must be 'LO,HI', got {text!r}") from None
    if not lo < hi:
        raise argparse.ArgumentTypeError("clip needs LO < HI")
    return lo, hi


def _bits_list(text: str) -> list[int]:
    try:
        out = [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bits must be a comma list of integers, got {text!r}") from None
    if not out or any(b not in (4, 8, 32) for b in out):
        raise argparse.ArgumentTypeError("bits must be drawn from 4, 8, 32")
    return out


def _cases_arg(text: str):
    if text == "all":
        return text
    try:
        return [canonical_part(x) for x in text.split(",") if x]
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _nm_arg(text: str):
    try:
        return parse_structure(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _weight_scheme(bits: int, mapping: str, groups) -> QuantScheme:
    if bits == 32:
        return PASSTHROUGH
    if groups == "tensor":
        return QuantScheme(bits=bits, symmetric=mapping == "sym", granularity="per_tensor")
    return weight_scheme(bits, mapping == "sym", groups)


def _act_scheme(bits: int, mapping: str, clip) -> QuantScheme:
    if bits == 32:
        return PASSTHROUGH
    return activation_scheme(bits, mapping == "sym", clip)


def _add_scheme_args(p: argparse.ArgumentParser, bits_default: int = 4) -> None:
    p.add_argument("--bits", type=int, choices=(4, 8, 32), default=bits_default, help="weight bits")
    p.add_argument("--mapping", choices=("sym", "asym"), default="sym")
    p.add_argument("--groups", type=_groups_arg, default=None, help="group count, 'd_in' (row-wise) or 'tensor'")
    p.add_argument("--act-bits", type=int, choices=(4, 8, 32), default=None, help="activation bits (default: --bits)")
    p.add_argument("--act-mapping", choices=("sym", "asym"), default="sym")
    p.add_argument("--clip", type=_clip_arg, default=None, help="activation clip range LO,HI")


def _schemes(args) -> tuple[QuantScheme, QuantScheme]:
    act_bits = args.act_bits if args.act_bits is not None else args.bits
    return _weight_scheme(args.bits, args.mapping, args.groups), _act_scheme(act_bits, args.act_mapping, args.clip)


def _order(c: container.ModelContainer) -> CompositionOrder:
    return CompositionOrder(c.extra.get("order", CompositionOrder.PRUNE_THEN_QUANT.value))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_init(args) -> int:
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            cfg = ModelConfig.from_dict(json.load(fh))
    else:
        cfg = ModelConfig(arch=args.arch, num_encoder_layers=args.enc, num_decoder_layers=args.dec,
                          hidden=args.hidden, heads=args.heads, ffn_mult=args.ffn_mult, ln_placement=args.ln,
                          vocab_size=args.vocab, max_seq=args.max_seq, num_labels=args.labels)
    model = build_model(cfg, seed=args.seed)
    container.save(args.out, model)
    return EXIT_OK


def cmd_quantize(args) -> int:
    c = container.load(args.model)
    w, a = _schemes(args)
    pipeline.quantize_parts(c.model, w, args.parts, c.masks, _order(c))
    prev = c.strategy
    flags = {p: (p in args.parts) or (prev is not None and prev.enabled(p)) for p in PARTS}
    c.strategy = QuantStrategy(**flags, weight_scheme=w, activation_scheme=a)
    container.save(args.out, c)
    return EXIT_OK


def _load_strategy(args, c: container.ModelContainer, m: int) -> QuantStrategy | None:
    spec = args.strategy
    if spec is None:
        return c.strategy
    if spec == "none":
        return None
    if spec == "auto":
        if not args.tune:
            raise UsageError("--strategy auto needs --tune FILE (a tune-strategy result)")
        return pipeline.StrategyTuneResult.load(args.tune).select(m)
    if len(spec) == 4 and set(spec) <= {"0", "1"}:
        base = c.strategy or QuantStrategy()
        return QuantStrategy.from_code(spec, base.weight_scheme, base.activation_scheme)
    with open(spec, encoding="utf-8") as fh:
        return QuantStrategy.from_dict(json.load(fh))


def _token_batch(path, model, seq_len):
    tokens = pipeline.read_tokens(path)
    if tokens.size == 0:
        raise ConfigError(f"{path}: no tokens")
    if tokens.max() >= model.cfg.vocab_size:
        raise ConfigError(f"{path}: token id {int(tokens.max())} outside vocabulary of {model.cfg.vocab_size}")
    seq = seq_len or min(tokens.size, model.cfg.max_seq)
    if tokens.size % seq:
        raise ConfigError(f"{tokens.size} tokens do not split into sequences of {seq}")
    return tokens.reshape(-1, seq)


def cmd_infer(args) -> int:
    c = container.load(args.model)
    model = c.model
    tokens = _token_batch(args.input, model, args.seq_len)
    strategy = _load_strategy(args, c, tokens.size)
    inputs = (tokens, tokens) if model.cfg.arch == "encoder_decoder" else tokens
    with pipeline.worker_limit():
        logits = forward(model, inputs, strategy, c.masks, order=_order(c)).logits.data
    with open(args.report, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        v = logits.shape[-1]
        if logits.ndim == 2:
            w.writerow(["sequence"] + [f"logit_{j}" for j in range(v)])
            for i, row in enumerate(logits):
                w.writerow([i] + [repr(float(x)) for x in row])
        else:
            w.writerow(["sequence", "position"] + [f"logit_{j}" for j in range(v)])
            for i in range(logits.shape[0]):
                for t in range(logits.shape[1]):
                    w.writerow([i, t] + [repr(float(x)) for x in logits[i, t]])
    return EXIT_OK


def cmd_tune(args) -> int:
    c = container.load(args.model)
    w, a = _schemes(args)
    result = pipeline.tune_strategy(c.model, pipeline.parse_shapes(args.shapes), w, a,
                                    repeats=args.repeats, seed=args.seed)
    result.save(args.out)
    for b in result.buckets:
        print(f"bs={b.batch_size} seq={b.seq_len} M={b.m}: {b.chosen} ({b.timings_ns[b.chosen]:.0f} ns)")
    return EXIT_OK


def cmd_train_qat(args) -> int:
    if not args.teacher and not args.student:
        raise UsageError("train-qat needs --teacher, --student, or both")
    teacher = container.load(args.teacher).model if args.teacher else None
    student_c = container.load(args.student or args.teacher)
    student = student_c.model
    cfg = student.cfg
    sizes = {"n_train": args.n_train, "n_val": args.n_val, "seq_len": args.seq_len}
    if args.task == "majority_classification":
        sizes["num_classes"] = cfg.num_labels or cfg.vocab_size
    elif args.task == "markov_lm":
        sizes["num_states"] = cfg.vocab_size
    else:
        sizes["num_symbols"] = cfg.vocab_size - 1
        sizes["copy_len"] = (args.seq_len - 1) // 2
    data = distill.synth_data(args.task, seed=args.data_seed if args.data_seed is not None else args.seed, **sizes)
    w, a = _schemes(args)
    strategy = None if (w.passthrough and a.passthrough) else QuantStrategy(
        **{p: p in args.parts for p in PARTS}, weight_scheme=w, activation_scheme=a)
    masks = student_c.masks or None
    if teacher is None:
        kd = distill.KDConfig(w_logit=0.0, w_task=1.0)
    else:
        kd = distill.KDConfig(args.w_logit, args.w_att, args.w_rep, args.w_task, args.att_variant, args.temperature)
    order = args.order or _order(student_c).value
    tcfg = distill.TrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size, dropout=args.dropout,
                               seed=args.seed, max_steps=args.steps, eval_every=args.eval_every, order=order)
    with pipeline.worker_limit():
        result = distill.qat_train(student, teacher, data, tcfg, kd, strategy, masks)
    student.load_state_dict(result.best_state)
    if args.log:
        result.write_csv(args.log)
    extra = dict(student_c.extra, order=order)
    container.save(args.out, container.ModelContainer(student, student_c.masks, strategy, extra))
    print(f"best step {result.best_step}: eval metric {result.best_metric!r}")
    return EXIT_OK


def cmd_prune(args) -> int:
    c = container.load(args.model)
    if args.nm is None and args.sparsity is None:
        raise UsageError("prune needs --nm N:M or --sparsity S")
    if args.nm is not None:
        n, m = args.nm
        structure, sparsity = f"{n}:{m}", n / m
    else:
        structure, sparsity = "unstructured", args.sparsity
    c.masks.update(pipeline.prune_parts(c.model, sparsity, structure, args.parts))
    c.extra = dict(c.extra, order=CompositionOrder(args.order).value)
    container.save(args.out, c)
    return EXIT_OK


def cmd_reduce(args) -> int:
    c = container.load(args.model)
    if c.model.qweights:
        raise ConfigError("reduce-layers needs a float container; quantize after reducing")
    student = reduce_model(c.model, args.enc, args.dec, encoder_policy=args.enc_policy,
                           decoder_policy=args.dec_policy)
    container.save(args.out, container.ModelContainer(student, {}, c.strategy, c.extra))
    print(json.dumps(student.layer_map, sort_keys=True))
    return EXIT_OK


def cmd_bench(args) -> int:
    cases = list(GEMM_CASES) if args.case == "all" else args.case
    records = []
    threads = pipeline.thread_count()
    with pipeline.worker_limit(threads):
        for name in cases:
            case = GemmShapeCase.from_batch(name, args.batch_size, args.seq_len, args.hidden)
            for bits in args.bits:
                records.append(bench_gemm(case, bits, repeats=args.repeats, seed=args.seed, threads=threads))
    write_bench_csv(records, args.out)
    return EXIT_OK


def cmd_analyze(args) -> int:
    if args.kind == "quant-error":
        if args.model:
            c = container.load(args.model)
            x = c.model.params[args.tensor].data
        else:
            x = np.random.default_rng(args.seed).standard_normal((args.rows, args.cols))
        schemes = [_weight_scheme(b, m, args.groups) for b in args.bits_list for m in ("sym", "asym")]
        analysis.emit_report(analysis.quant_error_report(x, schemes), args.out)
        return EXIT_OK
    if not args.model or not args.input:
        raise UsageError(f"analyze {args.kind} needs --model and --input")
    c = container.load(args.model)
    strategy = _load_strategy(args, c, 0)
    tokens = pipeline.read_tokens(args.input)
    with pipeline.worker_limit():
        if args.kind == "positional-ppl":
            stats = analysis.positional_perplexity(c.model, tokens, strategy, args.seq_len)
        else:
            batch = _token_batch(args.input, c.model, args.seq_len)
            step = args.batch_size
            batches = [batch[i:i + step] for i in range(0, len(batch), step)]
            stats = analysis.positional_activation_range(c.model, batches, args.layer, args.module, strategy)
    analysis.emit_report(stats, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="q4fg", description="Low-bit transformer quantization toolkit")
    parser.add_argument("--seed", type=int, default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="write a freshly initialized model container")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON model config (overrides the flags below)")
    p.add_argument("--arch", choices=ARCHS, default="encoder_only")
    p.add_argument("--enc", type=int, default=2)
    p.add_argument("--dec", type=int, default=0)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--ffn-mult", type=int, default=4)
    p.add_argument("--ln", choices=("pre", "post"), default="post")
    p.add_argument("--vocab", type=int, default=64)
    p.add_argument("--max-seq", type=int, default=64)
    p.add_argument("--labels", type=int, default=None)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("quantize", help="store integer weights for selected parts")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--parts", type=_parts_arg, default=pipeline.parse_parts(None))
    _add_scheme_args(p)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("infer", help="run a forward pass over a u32 token file")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--strategy", default=None, help="strategy JSON file, 4-digit code, 'auto' or 'none'")
    p.add_argument("--tune", default=None, help="tune-strategy result used by --strategy auto")
    p.add_argument("--seq-len", type=int, default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("tune-strategy", help="time all part-quantization strategies per batch shape")
    p.add_argument("--model", required=True)
    p.add_argument("--shapes", required=True, help="'bs,seq;bs,seq;...'")
    p.add_argument("--out", required=True)
    p.add_argument("--repeats", type=int, default=5)
    _add_scheme_args(p)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("train-qat", help="quantization-aware training with distillation on a synthetic task")
    p.add_argument("--teacher", default=None)
    p.add_argument("--student", default=None, help="student container (default: copy of the teacher)")
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None)
    p.add_argument("--task", choices=distill.TASKS, default="majority_classification")
    p.add_argument("--data-seed", type=int, default=None)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-val", type=int, default=500)
    p.add_argument("--seq-len", type=int, default=12)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--eval-every", type=int, default=100)
    p.add_argument("--w-logit", type=float, default=1.0)
    p.add_argument("--w-att", type=float, default=0.0)
    p.add_argument("--w-rep", type=float, default=0.0)
    p.add_argument("--w-task", type=float, default=0.0)
    p.add_argument("--att-variant", choices=("normalized", "prenorm"), default="prenorm")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--parts", type=_parts_arg, default=pipeline.parse_parts(None))
    p.add_argument("--order", choices=[o.value for o in CompositionOrder], default=None)
    _add_scheme_args(p)
    p.set_defaults(func=cmd_train_qat)

    p = sub.add_parser("prune", help="attach magnitude pruning masks")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--nm", type=_nm_arg, default=None, help="Pair-(N:M) structure, e.g. 2:4")
    p.add_argument("--sparsity", type=float, default=None, help="unstructured sparsity")
    p.add_argument("--parts", type=_parts_arg, default=pipeline.parse_parts(None))
    p.add_argument("--order", choices=[o.value for o in CompositionOrder],
                   default=CompositionOrder.PRUNE_THEN_QUANT.value)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("reduce-layers", help="copy a shallower student from a teacher container")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--enc", type=int, required=True)
    p.add_argument("--dec", type=int, required=True)
    p.add_argument("--enc-policy", default="first")
    p.add_argument("--dec-policy", default="even")
    p.set_defaults(func=cmd_reduce)

    p = sub.add_parser("bench", help="time the linear-layer GEMMs")
    p.add_argument("--case", type=_cases_arg, default="all", help="comma list of cases or 'all'")
    p.add_argument("--bits", type=_bits_list, default=[4, 8])
    p.add_argument("--hidden", type=int, default=256)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seq-len", type=int, default=32)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("analyze", help="positional activation range, positional perplexity, quant error")
    p.add_argument("kind", choices=("positional-range", "positional-ppl", "quant-error"))
    p.add_argument("--model", default=None)
    p.add_argument("--input", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--strategy", default=None)
    p.add_argument("--tune", default=None)
    p.add_argument("--seq-len", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--module", default="mlp_out")
    p.add_argument("--tensor", default=None, help="parameter name for quant-error")
    p.add_argument("--rows", type=int, default=64)
    p.add_argument("--cols", type=int, default=64)
    p.add_argument("--bits-list", type=_bits_list, default=[4, 8])
    p.add_argument("--groups", type=_groups_arg, default=None)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "bench" and args.repeats < 3:
        parser.error("bench needs --repeats >= 3")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"q4fg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (Q4FGError, ValueError, OSError, KeyError) as exc:
        print(f"q4fg: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
