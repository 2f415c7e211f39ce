"""Command line pipeline: pretrain -> pca-init -> distill -> search -> eval."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .allocation import RankAllocation
from .config import ConfigError, load_config
from .corpus import chunks, load_corpus, read_prompts
from .evaluation import SWEEP_BUDGETS, SWEEP_HEADER, SweepRow, evaluate, sweep
from .linalg import orthogonality_defect
from .model import ModelConfig, forward_baseline, forward_projected, init_weights
from .projections import collect_states, init_bank, iter_slots, load_bank, save_bank, second_moment_spectrum
from .search import Calibration, NotRepresentable, SearchConfig, budget, calib_kl, search_with_trace, uniform_allocation
from .training import METRICS_HEADER, PretrainConfig, Schedule, TrainConfig, distill, pretrain


class CLIError(Exception):
    pass


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def _corpus(path, train_fraction=0.9):
    try:
        return load_corpus(path, train_fraction)
    except FileNotFoundError:
        raise CLIError(f"corpus not found: {path}") from None


def _pca_prompts(corpus, config: ModelConfig, n: int):
    return chunks(corpus.train, config.context, n)


def cmd_pretrain(args) -> int:
    sections = load_config(args.config)
    model_cfg = ModelConfig(**sections["model"])
    pre = sections["pretrain"]
    if args.steps is not None:
        pre["steps"] = args.steps
    cfg = PretrainConfig(**pre, seed=args.seed)
    corpus = _corpus(args.corpus, sections["corpus"].get("train_fraction", 0.9))
    if len(corpus.data) < 10 * model_cfg.context:
        raise CLIError(f"corpus has {len(corpus.data)} bytes, need at least {10 * model_cfg.context}")
    weights = init_weights(model_cfg, args.seed)

    def report(step, loss):
        if args.log_every and step % args.log_every == 0:
            print(f"step {step} loss {_fmt(loss)}", file=sys.stderr)

    weights, losses = pretrain(weights, corpus.train, cfg, on_step=report)
    checkpoint.save_weights(weights, args.out)
    ev = evaluate(weights, model_cfg, None, None, corpus.eval)
    tail = losses[-min(50, len(losses)) :] if losses else [float("nan")]
    print(f"train_loss={_fmt(float(np.mean(tail)))} eval_loss={_fmt(ev.cross_entropy)}")
    return 0


def cmd_pca_init(args) -> int:
    weights = checkpoint.load_weights(args.ckpt)
    config = weights.config
    corpus = _corpus(args.corpus)
    prompts = _pca_prompts(corpus, config, args.prompts)
    bank = init_bank(weights, config, prompts)
    save_bank(bank, args.out)

    sample = collect_states(weights, config, prompts)
    schedule = Schedule.eighths(config.head_dim) if config.head_dim % 8 == 0 else Schedule((config.head_dim,))
    print("layer,head,kind,total_variance," + ",".join(f"tail_r{r}" for r in schedule.ranks))
    for slot in iter_slots(config):
        evals = second_moment_spectrum(sample[slot]).eigenvalues
        tails = [float(evals[r:].sum()) for r in schedule.ranks]
        l, g, kind = slot
        print(f"{l},{g},{kind},{_fmt(float(evals.sum()))}," + ",".join(_fmt(t) for t in tails))
    probe = prompts[: min(4, len(prompts))]
    diff = np.abs(forward_projected(weights, config, bank, RankAllocation.full(config), probe) - forward_baseline(weights, config, probe)).max()
    worst = max(orthogonality_defect(bank.matrix(s)) for s in iter_slots(config))
    status = "ok" if diff <= 1e-8 else "FAILED"
    print(f"full_rank_check={status} max_abs_diff={_fmt(float(diff))} max_orthogonality_defect={_fmt(worst)}")
    return 0 if status == "ok" else 1


def cmd_distill(args) -> int:
    weights = checkpoint.load_weights(args.ckpt)
    bank = load_bank(args.bank)
    sections = load_config(args.config)
    train = dict(sections["train"])
    if args.steps is not None:
        train["steps"] = args.steps
    cfg = TrainConfig(
        **train,
        seed=args.seed,
        fixed_rank=args.fixed_rank,
        no_orthogonality=args.no_orthogonality,
        random_init=args.random_init,
    )
    corpus = _corpus(args.corpus, sections["corpus"].get("train_fraction", 0.9))
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".metrics.csv")
    with open(log_path, "w", newline="\n") as log:
        print(METRICS_HEADER)
        log.write(METRICS_HEADER + "\n")

        def emit(m):
            row = m.csv_row()
            print(row)
            log.write(row + "\n")

        trained, _ = distill(weights, bank, corpus.train, cfg, on_step=emit)
    save_bank(trained, args.out)
    return 0


def cmd_search(args) -> int:
    weights = checkpoint.load_weights(args.ckpt)
    config = weights.config
    bank = load_bank(args.bank)
    try:
        prompts = read_prompts(args.calib)
    except FileNotFoundError as exc:
        raise CLIError(str(exc)) from None
    if not prompts:
        raise CLIError("calibration file has no prompts")
    prompts = [p[: config.context] for p in prompts]
    overrides = {}
    if args.delta_r is not None:
        overrides["delta_r"] = args.delta_r
    if args.floor is not None:
        overrides["floor"] = args.floor
    if args.parallel_accept is not None:
        overrides["parallel_accept"] = args.parallel_accept
    scfg = SearchConfig.for_model(config, args.gamma, **overrides)
    calib = Calibration.build(weights, config, prompts)
    result = search_with_trace(weights, config, bank, scfg, calib)
    Path(args.out).write_text(result.allocation.to_csv())
    kl = calib_kl(weights, config, bank, result.allocation, calib)
    d = config.head_dim
    print(f"budget={_fmt(result.budget)} calib_kl={_fmt(kl)} evaluations={result.evaluations}")
    print(
        f"mean_key_fraction={_fmt(result.allocation.r_k.mean() / d)} "
        f"mean_value_fraction={_fmt(result.allocation.r_v.mean() / d)}"
    )
    try:
        uni = uniform_allocation(args.gamma, config, scfg.delta_r, scfg.floor)
        print(f"uniform_budget={_fmt(budget(uni, config))} uniform_calib_kl={_fmt(calib_kl(weights, config, bank, uni, calib))}")
    except NotRepresentable:
        print("uniform_budget=n/a")
    return 0


def _parse_alloc(alloc_arg: str, config: ModelConfig) -> tuple[RankAllocation, str]:
    if alloc_arg.startswith("uniform:"):
        try:
            frac = float(alloc_arg.split(":", 1)[1])
        except ValueError:
            raise CLIError(f"bad allocation {alloc_arg!r}") from None
        return uniform_allocation(frac, config), "uniform"
    p = Path(alloc_arg)
    if not p.is_file():
        raise CLIError(f"allocation not found: {alloc_arg}")
    return RankAllocation.from_csv(p.read_text(), config), "searched"


def cmd_eval(args) -> int:
    weights = checkpoint.load_weights(args.ckpt)
    config = weights.config
    bank = load_bank(args.bank)
    alloc, mode = _parse_alloc(args.alloc, config)
    corpus = _corpus(args.corpus)
    r = evaluate(weights, config, bank, alloc, corpus.eval, max_chunks=args.max_chunks)
    print(SWEEP_HEADER)
    print(SweepRow(budget(alloc, config), mode, r.perplexity, r.accuracy, r.kd).csv_row())
    return 0


def cmd_sweep(args) -> int:
    weights = checkpoint.load_weights(args.ckpt)
    config = weights.config
    bank = load_bank(args.bank)
    corpus = _corpus(args.corpus)
    prompts = None
    if args.calib:
        try:
            prompts = [p[: config.context] for p in read_prompts(args.calib)]
        except FileNotFoundError as exc:
            raise CLIError(str(exc)) from None
    rows = sweep(weights, config, bank, corpus.eval, SWEEP_BUDGETS, prompts, max_chunks=args.max_chunks)
    text = SWEEP_HEADER + "\n" + "".join(r.csv_row() + "\n" for r in rows)
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return 0


HEATMAP_NOTE = "# rank / head_dim per (layer, kv_head); lighter = lower rank = more compression"


def heatmap_csv(alloc: RankAllocation, head_dim: int) -> str:
    L, H = alloc.r_k.shape
    lines = [HEATMAP_NOTE, "kind,layer," + ",".join(f"head{h}" for h in range(H))]
    for kind in ("K", "V"):
        grid = alloc.of(kind)
        for l in range(L):
            lines.append(f"{kind},{l}," + ",".join(_fmt(grid[l, h] / head_dim) for h in range(H)))
    return "\n".join(lines) + "\n"


def cmd_heatmap(args) -> int:
    p = Path(args.alloc)
    if not p.is_file():
        raise CLIError(f"allocation not found: {args.alloc}")
    if args.ckpt:
        config = checkpoint.load_weights(args.ckpt).config
        alloc = RankAllocation.from_csv(p.read_text(), config)
        d = config.head_dim
    else:
        rows = [ln.split(",") for ln in p.read_text().splitlines()[1:] if ln.strip()]
        L = 1 + max(int(r[0]) for r in rows)
        H = 1 + max(int(r[1]) for r in rows)
        alloc = RankAllocation.from_csv(p.read_text(), ModelConfig(n_layers=L, n_heads=H, n_kv_heads=H, head_dim=args.head_dim))
        d = args.head_dim
    Path(args.out).write_text(heatmap_csv(alloc, d))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nkv", description="Low-rank KV cache projections for a toy transformer")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--seed", type=int, default=42)
        p.set_defaults(func=fn)
        return p

    p = add("pretrain", cmd_pretrain, "train the base model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--log-every", type=int, default=0)

    p = add("pca-init", cmd_pca_init, "build the PCA projection bank")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prompts", type=int, default=32, help="number of context-length training windows")

    p = add("distill", cmd_distill, "nested-rank distillation of the bank")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--log")
    p.add_argument("--fixed-rank", type=int)
    p.add_argument("--no-orthogonality", action="store_true")
    p.add_argument("--random-init", action="store_true")

    p = add("search", cmd_search, "greedy per-head rank search")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--delta-r", type=int)
    p.add_argument("--floor", type=int)
    p.add_argument("--parallel-accept", type=int)

    p = add("eval", cmd_eval, "evaluate one allocation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--alloc", required=True, help="allocation CSV or uniform:FRACTION")
    p.add_argument("--corpus", required=True)
    p.add_argument("--max-chunks", type=int, default=64)

    p = add("sweep", cmd_sweep, "evaluate the seven-budget grid")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--calib")
    p.add_argument("--out")
    p.add_argument("--max-chunks", type=int, default=64)

    p = add("heatmap", cmd_heatmap, "layer x head rank-fraction grids")
    p.add_argument("--alloc", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--head-dim", type=int, default=16)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CLIError, ConfigError, FileNotFoundError, checkpoint.FormatVersionMismatch, NotRepresentable) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, ArithmeticError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
