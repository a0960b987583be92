"""Command line entry point: ``plateau-lab <subcommand> [--key=value ...]``.

Config keys are accepted as ``--key=value`` (or ``--key value``) on
``train`` and ``sweep``; ``--seed`` may repeat. Any failure prints a single
``error: {json}`` line on stderr and exits nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from plateau_lab import checkpoint, sgd_analog, trainer
from plateau_lab.config import ConfigError, TrainConfig, apply_overrides, load_config

EXIT_USAGE = 2
EXIT_FAILURE = 1


class UsageError(Exception):
    pass


def _split_overrides(extra: list[str]) -> dict[str, str]:
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or tok == "--":
            raise UsageError(f"unexpected argument {tok!r}")
        body = tok[2:]
        if "=" in body:
            key, val = body.split("=", 1)
        elif i + 1 < len(extra) and not extra[i + 1].startswith("--"):
            key, val = body, extra[i + 1]
            i += 1
        else:
            raise UsageError(f"missing value for --{body}")
        key = key.replace("-", "_")
        if key in out:
            raise UsageError(f"--{key} given twice")
        out[key] = val
        i += 1
    return out


def _config(args, extra) -> TrainConfig:
    base = load_config(args.config) if args.config else TrainConfig()
    return apply_overrides(base, _split_overrides(extra)).validate()


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# -- subcommands ---------------------------------------------------------------------

def cmd_train(args, extra):
    cfg = _config(args, extra)
    seeds = args.seed or [cfg.seed]
    out = Path(args.out)
    for s in seeds:
        run_dir = out if len(seeds) == 1 else out / f"seed={s}"
        res = trainer.train(apply_overrides(cfg, {"seed": s}), run_dir)
        _emit({"run_dir": str(res.run_dir), "seed": s, "updates": res.state.update,
               "solve_rate": res.final_eval.solve_rate, "max_solve_rate": res.max_solve_rate})


def cmd_resume(args, extra):
    overrides = _split_overrides(extra)
    config = load_config(args.config) if args.config else None
    res = trainer.resume(args.checkpoint, args.out, overrides, config)
    _emit({"run_dir": str(res.run_dir), "updates": res.state.update, "solve_rate": res.final_eval.solve_rate})


def cmd_eval(args, extra):
    if extra:
        raise UsageError(f"unexpected arguments {extra}")
    st = trainer.TrainState.from_checkpoint(checkpoint.load(args.checkpoint))
    cfg = st.cfg
    if args.levels is not None:
        cfg = apply_overrides(cfg, {"eval_levels": args.levels})
    res = trainer.evaluate_params(cfg, st.params, episodes=args.episodes, seed=args.eval_seed)
    _emit({"update": st.update, "env_steps": st.env_steps, "solve_rate": res.solve_rate,
           "mean_return": res.mean_return, "levels": int(res.successes.shape[0])})


def _parse_axis(text: str) -> tuple[str, list[str]]:
    if "=" not in text:
        raise UsageError(f"--grid wants key=v1,v2,...; got {text!r}")
    key, vals = text.split("=", 1)
    return key.replace("-", "_"), [v for v in vals.split(",") if v]


def cmd_sweep(args, extra):
    from plateau_lab import sweep

    cfg = _config(args, extra)
    grid = dict(_parse_axis(a) for a in args.grid or [])
    if args.lr_grid:
        grid.update({k: v for k, v in sweep.LR_TUNING_GRID.items() if k not in grid})
    seeds = args.seed or [cfg.seed]
    rows = sweep.run_sweep(cfg, grid, seeds, args.out, workers=args.workers)
    _emit({"summary": str(Path(args.out) / "summary.csv"), "runs": len(rows)})


def _parse_schedule(text: str):
    if ":" not in text:
        return float(text)
    return [(int(s), float(v)) for s, v in (part.split(":") for part in text.split(","))]


def cmd_sgd_analog(args, extra):
    if extra:
        raise UsageError(f"unexpected arguments {extra}")
    cfg = sgd_analog.QuadConfig(dim=args.dim, noise_std=args.noise_std, lr=_parse_schedule(args.lr),
                                total_steps=args.steps, seed=(args.seed or [0])[0])
    trace = sgd_analog.run_quad(cfg)
    sched = cfg.schedule()
    if args.out:
        sgd_analog.write_trace_csv(trace, args.out, sched)
    window = min(args.window, args.steps)
    last_lr = sched[-1][1]
    _emit({"trailing_mean_sq_norm": trace.trailing_mean(args.steps + 1 - window),
           "oracle": sgd_analog.stationary_second_moment(last_lr, cfg.noise_std, cfg.dim) if 0 < last_lr < 1 else None,
           "window": window, "trace": args.out})


def cmd_plot(args, extra):
    if extra:
        raise UsageError(f"unexpected arguments {extra}")
    from plateau_lab import plot

    path = plot.plot_runs(args.runs, args.out, [c for c in args.columns.split(",") if c])
    _emit({"svg": str(path)})


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="plateau-lab", allow_abbrev=False, description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", allow_abbrev=False, help="train from scratch (config keys as --key=value)")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--out", required=True, help="run directory (one subdirectory per seed when several)")
    t.add_argument("--seed", type=int, action="append")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("resume", allow_abbrev=False, help="continue from a checkpoint; --com/--clip_eps/--lr/--total_env_steps")
    r.add_argument("checkpoint")
    r.add_argument("--out", required=True)
    r.add_argument("--config", help="must match the checkpoint (plain resume only)")
    r.set_defaults(func=cmd_resume)

    e = sub.add_parser("eval", allow_abbrev=False, help="evaluate a checkpoint on the held-out level set")
    e.add_argument("checkpoint")
    e.add_argument("--levels", type=int)
    e.add_argument("--episodes", type=int)
    e.add_argument("--eval-seed", type=int)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", allow_abbrev=False, help="grid of runs plus summary.csv")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--grid", action="append", help="key=v1,v2,... (repeat for more axes)")
    s.add_argument("--lr-grid", action="store_true", help="add the default lr x anneal tuning axes")
    s.add_argument("--seed", type=int, action="append")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    q = sub.add_parser("sgd-analog", allow_abbrev=False, help="noisy quadratic SGD trace")
    q.add_argument("--lr", default="0.1", help="constant, or schedule like 0:0.2,5000:0.02")
    q.add_argument("--steps", type=int, default=10_000)
    q.add_argument("--dim", type=int, default=sgd_analog.DEFAULT_DIM)
    q.add_argument("--noise-std", type=float, default=sgd_analog.DEFAULT_NOISE_STD)
    q.add_argument("--seed", type=int, action="append")
    q.add_argument("--window", type=int, default=5000, help="trailing window for the reported mean")
    q.add_argument("--out", help="trace CSV path")
    q.set_defaults(func=cmd_sgd_analog)

    pl = sub.add_parser("plot", allow_abbrev=False, help="render metrics CSVs to an SVG")
    pl.add_argument("runs", nargs="+", help="run directories or metrics.csv files")
    pl.add_argument("--out", required=True)
    pl.add_argument("--columns", default="solve_rate,kl_behavior")
    pl.set_defaults(func=cmd_plot)
    return p


def _fail(kind: str, message: str, code: int) -> int:
    print("error: " + json.dumps({"type": kind, "message": message}, sort_keys=True), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args, extra)
    except (UsageError, ConfigError) as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_USAGE)
    except (checkpoint.CheckpointError, trainer.TrainingAborted, sgd_analog.DivergenceError,
            ValueError, OSError) as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_FAILURE)
    return 0


if __name__ == "__main__":
    sys.exit(main())
