"""Command-line surface: train, generate, eval, cost, gen-data, validate-schedule.

Exit codes: 0 on success, 2 for configuration problems, 3 for data problems
(malformed or mismatched files, corrupt checkpoints), 4 when training hits
non-finite numbers. All artifacts are deterministic functions of (config,
seed, data): JSON is emitted with sorted keys, CSVs with fixed columns, and
every file write goes through a temp-then-rename.

The eval command fans record decoding out over a thread pool; HDLM_THREADS
caps the worker count (default 1). Results are reduced in dataset order, so
the thread count never changes the output bytes.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from .checkpoint import Checkpoint, load_checkpoint, rng_state, save_checkpoint
from .config import RunConfig, load_run_config
from .costs import CostParams, savings_report
from .errors import ConfigError, DataError, DivergenceError, IntegrityError
from .inference import GenerationConfig, generate
from .metrics import evaluate_levels
from .model import ModelConfig, init_model, replicate_heads, validate_schedule
from .tasks import (
    SyntheticSpec,
    Tokenizer,
    encode_record,
    gen_hierarchy,
    gen_htc_records,
    gen_htg_records,
    read_jsonl,
    write_jsonl,
)
from .training import train_loop


# ---------------------------------------------------------------------------
# small shared plumbing
# ---------------------------------------------------------------------------

def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _dump_json(obj: dict, path: str | None) -> None:
    text = json.dumps(obj, sort_keys=True, ensure_ascii=False, indent=2) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        _write_text(Path(path), text)


def _threads() -> int:
    raw = os.environ.get("HDLM_THREADS", "")
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"HDLM_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("HDLM_THREADS must be at least 1")
    return n


def _int_tuple(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _schedule_dict(rep) -> dict:
    return {
        "feasible": rep.feasible,
        "min_layers_bound": rep.min_layers_bound,
        "violations": list(rep.violations),
    }


def _read_queries(path: str) -> list[tuple[int, str]]:
    """Input for generation: JSONL records needing only a 'query' string.
    An empty file is an empty work list, not an error."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"input file {p} does not exist")
    out = []
    with open(p, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{p}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict) or not isinstance(rec.get("query"), str):
                raise DataError(f"{p}:{lineno}: record needs a 'query' string")
            out.append((lineno, rec["query"]))
    return out


def _oov_check(text: str, tok: Tokenizer, where: str) -> None:
    oov = sorted({w for w in text.split() if w not in tok.token_to_id})
    if oov:
        raise DataError(f"{where}: tokens outside the model vocabulary: {oov}")


def _require_tokenizer(ckpt: Checkpoint) -> Tokenizer:
    if ckpt.tokenizer is None:
        raise ConfigError("checkpoint carries no tokenizer; cannot map text to ids")
    return ckpt.tokenizer


def _stop_ids(tok: Tokenizer, depth: int) -> list[int]:
    return [tok.level_end_id(d) for d in range(1, depth + 1)]


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _apply_overrides(rc: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        rc.seed = args.seed
    if args.mode is not None:
        rc.train.mode = args.mode
    model = dict(rc.model)
    if args.depth is not None:
        model["depth"] = args.depth
        if args.depth == 1:
            model["schedule"] = []
            model["loss_weights"] = []
    if args.k1 is not None:
        sched = list(model.get("schedule", [])) or [0]
        sched[0] = args.k1
        model["schedule"] = sched
        weights = list(model.get("loss_weights", []))
        model["loss_weights"] = weights or [1.0] * len(sched)
    rc.model = model
    return rc


def cmd_train(args) -> int:
    rc = _apply_overrides(load_run_config(args.config), args)
    data_path = Path(rc.train_data)
    if not data_path.is_file():
        raise ConfigError(f"training data {data_path} does not exist")
    records = read_jsonl(data_path)
    depth = int(rc.model.get("depth", 1))
    short = [i for i, r in enumerate(records) if len(r["responses"]) != depth]
    if short:
        raise DataError(
            f"{data_path}: {len(short)} records do not carry {depth} response levels "
            f"(first at record {short[0]})"
        )
    tok = Tokenizer.from_records(records, depth)
    mcfg = rc.model_config(vocab=tok.vocab_size)
    rep = validate_schedule(mcfg)
    if not rep.feasible:
        sys.stderr.write(json.dumps(_schedule_dict(rep), sort_keys=True) + "\n")
        raise ConfigError("infeasible layer schedule: " + "; ".join(rep.violations))
    samples = [encode_record(r, tok) for r in records]
    params = replicate_heads(init_model(mcfg, rc.seed), mode="copy", seed=rc.seed + 1)

    out_dir = Path(rc.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows: list[list] = []
    last_rng = [None]

    def on_step(step, br, params_now, opt_now, rng_now):
        rows.append([step, br.lr, *br.per_level, br.total])
        last_rng[0] = rng_now
        periodic = rc.checkpoint_every and (step + 1) % rc.checkpoint_every == 0
        if periodic and step + 1 < rc.train.total_steps:
            save_checkpoint(
                Checkpoint(mcfg, params_now, step + 1, opt_now, rng_state(rng_now), tok),
                out_dir / f"step_{step + 1:06d}.ckpt",
            )

    params, opt, history = train_loop(params, samples, rc.train, mcfg, rc.seed, on_step)

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "lr"] + [f"L_{d}" for d in range(1, mcfg.depth + 1)] + ["total"])
    writer.writerows(rows)
    _write_text(out_dir / "loss.csv", buf.getvalue())

    save_checkpoint(
        Checkpoint(mcfg, params, rc.train.total_steps, opt, rng_state(last_rng[0]), tok),
        out_dir / "final.ckpt",
    )
    print(f"trained {rc.train.total_steps} steps; final loss {history[-1].total:.6f}; "
          f"artifacts in {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    tok = _require_tokenizer(ckpt)
    queries = _read_queries(args.input)
    gcfg = GenerationConfig(max_len=args.max_len, temperature=args.temperature,
                            seed=args.seed if args.seed is not None else 0)
    stops = _stop_ids(tok, ckpt.config.depth)
    lines = []
    for lineno, text in queries:
        _oov_check(text, tok, f"{args.input}:{lineno}")
        out = generate(ckpt.params, ckpt.config, tok.encode_query(text), gcfg,
                       stops, mode=args.mode)
        rec = {
            "query": text,
            "responses": [tok.detokenize(ids) for ids in out.token_ids],
            "lengths": out.lengths,
            "mean_logprob": out.mean_logprob,
        }
        lines.append(json.dumps(rec, sort_keys=True, ensure_ascii=False))
    payload = "".join(line + "\n" for line in lines)
    if args.output is None:
        sys.stdout.write(payload)
    else:
        _write_text(Path(args.output), payload)
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    tok = _require_tokenizer(ckpt)
    records = read_jsonl(args.dataset)
    depth = ckpt.config.depth
    short = [i for i, r in enumerate(records) if len(r["responses"]) != depth]
    if short:
        raise DataError(
            f"{args.dataset}: dataset depth does not match the model's {depth} levels "
            f"(first mismatch at record {short[0]})"
        )
    for i, rec in enumerate(records):
        _oov_check(rec["query"], tok, f"{args.dataset} record {i}")
    gcfg = GenerationConfig(max_len=args.max_len)
    stops = _stop_ids(tok, depth)

    def run_one(rec):
        out = generate(ckpt.params, ckpt.config, tok.encode_query(rec["query"]),
                       gcfg, stops, mode=args.mode)
        return [tok.detokenize(ids) for ids in out.token_ids]

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        preds = list(pool.map(run_one, records))
    report = evaluate_levels(preds, [r["responses"] for r in records], beta=args.beta)
    payload = report.to_dict()
    _dump_json(payload, args.output)
    if args.output is not None:
        if "bottom_micro_f1" in payload:
            print(f"bottom-level micro-F1: {payload['bottom_micro_f1']:.2f}")
        else:
            print(f"bottom-level accuracy: {payload['levels'][-1]['accuracy']:.2f}")
    return 0


# ---------------------------------------------------------------------------
# cost
# ---------------------------------------------------------------------------

_COST_FLAGS = (
    ("batch", "B"), ("query_len", "L"), ("l1", "L1"), ("l2", "L2"),
    ("hidden", "E"), ("vocab", "V"), ("layers", "K"), ("k1", "k1"),
    ("ffn_mult", "c"),
)


def cmd_cost(args) -> int:
    base: dict = {}
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        base = dict(raw.get("cost", raw))
    for flag, field in _COST_FLAGS:
        value = getattr(args, flag)
        if value is not None:
            base[field] = value
    if args.cost_mode is not None:
        base["mode"] = args.cost_mode
    try:
        params = CostParams(**base)
    except TypeError as exc:
        raise ConfigError(f"bad cost parameters ({exc})") from exc
    _dump_json(savings_report(params).to_dict(), args.output)

    if args.sweep is not None:
        if args.csv is None:
            raise ConfigError("--sweep needs --csv PATH for the table")
        field = {"l2": "L2", "k1": "k1"}[args.sweep]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([args.sweep, "train_baseline", "train_hdlm", "train_savings",
                         "train_reduction", "infer_baseline", "infer_hdlm",
                         "infer_savings", "infer_reduction"])
        for value in args.sweep_values:
            rep = savings_report(replace(params, **{field: value}))
            writer.writerow([value, rep.train_baseline, rep.train_hdlm,
                             rep.train_savings, rep.train_reduction,
                             rep.infer_baseline, rep.infer_hdlm,
                             rep.infer_savings, rep.infer_reduction])
        _write_text(Path(args.csv), buf.getvalue())
    return 0


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    extra = {} if args.content_vocab is None else {"content_vocab": args.content_vocab}
    spec = SyntheticSpec(
        depth=args.depth,
        branching=args.branching,
        n_samples=args.samples,
        noise_rate=args.noise,
        seed=args.seed if args.seed is not None else 0,
        **extra,
    )
    if args.task == "htc":
        hierarchy = gen_hierarchy(spec.depth, spec.branching, spec.seed)
        records = gen_htc_records(hierarchy, spec)
    else:
        records = gen_htg_records(spec)
    write_jsonl(args.output, records)
    print(f"wrote {len(records)} records to {args.output}")
    return 0


# ---------------------------------------------------------------------------
# validate-schedule
# ---------------------------------------------------------------------------

def cmd_validate_schedule(args) -> int:
    if args.config is not None:
        rc = load_run_config(args.config)
        model = dict(rc.model)
        model.setdefault("vocab", 2)
        if args.depth is not None:
            model["depth"] = args.depth
        if args.k1 is not None:
            sched = list(model.get("schedule", [])) or [0]
            sched[0] = args.k1
            model["schedule"] = sched
        cfg = ModelConfig(**model)
    else:
        if args.layers is None or args.depth is None:
            raise ConfigError("validate-schedule needs --config, or --layers with --depth")
        schedule = args.schedule if args.schedule is not None else ()
        if args.k1 is not None:
            schedule = (args.k1,) + tuple(schedule[1:])
        cfg = ModelConfig(
            n_layers=args.layers, hidden=2, n_heads=1, ffn_mult=1, vocab=2,
            depth=args.depth, schedule=schedule,
            loss_weights=(1.0,) * (args.depth - 1),
        )
    rep = validate_schedule(cfg)
    _dump_json(_schedule_dict(rep), args.output)
    return 0 if rep.feasible else 2


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hdlm",
        description="Train, run, and price staged hierarchical decoders.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--mode", choices=("hier", "flat"), default=None,
                   help="override the training mode")
    p.add_argument("--k1", type=int, default=None, help="override the first cut depth")
    p.add_argument("--depth", type=int, default=None, help="override the response depth")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("generate", help="decode responses for query records")
    p.add_argument("checkpoint", help="trained checkpoint file")
    p.add_argument("input", help="JSONL with 'query' fields")
    p.add_argument("-o", "--output", default=None, help="output JSONL (default stdout)")
    p.add_argument("--mode", choices=("hier", "flat"), default="hier")
    p.add_argument("--max-len", type=int, default=32, help="per-level token cap")
    p.add_argument("--temperature", type=float, default=0.0, help="0 decodes greedily")
    p.add_argument("--seed", type=int, default=None, help="sampling seed")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("eval", help="score a checkpoint against a labelled set")
    p.add_argument("checkpoint")
    p.add_argument("dataset", help="JSONL with gold responses")
    p.add_argument("-o", "--output", default=None, help="report JSON path (default stdout)")
    p.add_argument("--mode", choices=("hier", "flat"), default="hier")
    p.add_argument("--max-len", type=int, default=32)
    p.add_argument("--beta", type=float, default=1.0,
                   help="recall weight for the subsequence-overlap score")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("cost", help="closed-form training/inference cost report")
    p.add_argument("--config", default=None, help="JSON with cost parameters")
    p.add_argument("--cost-mode", choices=("paper", "exact", "full"), default=None)
    p.add_argument("-o", "--output", default=None, help="report JSON path (default stdout)")
    p.add_argument("-B", "--batch", type=int, default=None)
    p.add_argument("-L", "--query-len", type=int, default=None)
    p.add_argument("--l1", type=int, default=None, help="level-1 response length")
    p.add_argument("--l2", type=int, default=None, help="level-2 response length")
    p.add_argument("-E", "--hidden", type=int, default=None)
    p.add_argument("-V", "--vocab", type=int, default=None)
    p.add_argument("-K", "--layers", type=int, default=None)
    p.add_argument("--k1", type=int, default=None)
    p.add_argument("-c", "--ffn-mult", type=int, default=None)
    p.add_argument("--sweep", choices=("l2", "k1"), default=None)
    p.add_argument("--sweep-values", type=_int_tuple, default=(128, 256, 512),
                   help="comma-separated values for the sweep")
    p.add_argument("--csv", default=None, help="sweep table path")
    p.set_defaults(fn=cmd_cost)

    p = sub.add_parser("gen-data", help="emit a synthetic JSONL corpus")
    p.add_argument("task", choices=("htc", "htg"))
    p.add_argument("-o", "--output", required=True, help="JSONL path")
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--branching", type=_int_tuple, default=(3, 4),
                   help="labels per level (htc) or objects,locations (htg)")
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--content-vocab", type=int, default=None,
                   help="distractor-word pool size")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("validate-schedule", help="check a cut-depth schedule")
    p.add_argument("--config", default=None, help="run config JSON to check")
    p.add_argument("-K", "--layers", type=int, default=None)
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--schedule", type=_int_tuple, default=None,
                   help="comma-separated cut depths k_1,...,k_{D-1}")
    p.add_argument("--k1", type=int, default=None)
    p.add_argument("-o", "--output", default=None, help="report JSON path (default stdout)")
    p.set_defaults(fn=cmd_validate_schedule)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, IntegrityError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
