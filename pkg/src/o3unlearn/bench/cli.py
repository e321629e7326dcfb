"""Command line entry point: ``o3unlearn <subcommand> [flags]``.

Subcommands: pretrain, unlearn, run, score, infer, report. Failures print
``error [stage]: message`` to stderr and exit with status 2, as do usage
errors reported by argparse.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from ..gate import GateConfig, gated_infer
from .config import RunConfig, load_config
from .pipeline import (Benchmark, StageError, build_report, detector_aurocs, evaluate, option_ids, pretrain,
                       run_request)
from .report import dumps_report, emit_report, write_auroc_csv
from .state import load_state, save_state

STATE_NAME = "state.o3s"


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    overrides = {"run__seed": args.seed, "unlearn__lambda_orth": args.lam, "gate__zeta": args.zeta,
                 "gate__mode": args.gate, "scoring__gamma": args.gamma, "scoring__nu": args.nu}
    return cfg.replace(**{k: v for k, v in overrides.items() if v is not None})


def _gate(args, cfg: RunConfig) -> GateConfig:
    return GateConfig(args.zeta if args.zeta is not None else cfg.gate.zeta,
                      args.gate if args.gate is not None else cfg.gate.mode)


def _state_in(args):
    if not args.state:
        raise StageError("load", "--state is required")
    try:
        return load_state(args.state)
    except (OSError, ValueError) as exc:
        raise StageError("load", str(exc)) from exc


def _out_dir(args) -> Path:
    out = Path(args.out or "o3-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def cmd_pretrain(args) -> None:
    cfg = _config(args)
    state = pretrain(cfg)
    path = _out_dir(args) / STATE_NAME
    save_state(path, state)
    _print({"state": str(path), "base": state.base})


def cmd_unlearn(args) -> None:
    state = _state_in(args)
    bench = Benchmark.from_config(state.cfg)
    run_request(state, bench)
    path = Path(args.out) / STATE_NAME if args.out else Path(args.state)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_state(path, state)
    _print({"state": str(path), "request": state.completed, "stage": state.stages[-1]})


def cmd_run(args) -> None:
    cfg = _config(args)
    bench = Benchmark.from_config(cfg)
    out = _out_dir(args)
    state = pretrain(cfg, bench)
    while state.completed < bench.n_requests:
        run_request(state, bench)
    save_state(out / STATE_NAME, state)
    paths = emit_report(build_report(state), out)
    _print({k: str(v) for k, v in paths.items()} | {"state": str(out / STATE_NAME)})


def cmd_score(args) -> None:
    state = _state_in(args)
    bench = Benchmark.from_config(state.cfg)
    table = [{"request": det.request_index, **detector_aurocs(state, bench, det)} for det in state.detectors]
    if args.out:
        out = _out_dir(args)
        write_auroc_csv(table, out / "auroc.csv")
        (out / "auroc.json").write_text(json.dumps(table, sort_keys=True, indent=2) + "\n")
    _print(table)


def cmd_infer(args) -> None:
    state = _state_in(args)
    if not state.detectors:
        raise StageError("infer", "state has no trained detectors")
    try:
        tokens = [int(t) for t in args.input.replace(",", " ").split()]
    except ValueError as exc:
        raise StageError("infer", f"--input must be integer token ids: {exc}") from exc
    options = None if args.generate else option_ids(state.cfg)
    result = gated_infer(tokens, state.detectors, state.target_params, state.target_cfg, state.stack,
                         state.encoder_params, state.encoder_cfg, _gate(args, state.cfg), options=options)
    _print(result)


def cmd_report(args) -> None:
    state = _state_in(args)
    if args.gate is not None or args.zeta is not None:
        # re-evaluate the final stage under another gate without touching the state
        bench = Benchmark.from_config(state.cfg)
        final = evaluate(state, bench, gated=True, gate=_gate(args, state.cfg))
        if state.stages:
            state.stages[-1] = {**state.stages[-1], **final}
    report = build_report(state)
    if args.out:
        paths = emit_report(report, _out_dir(args))
        _print({k: str(v) for k, v in paths.items()})
    else:
        sys.stdout.write(dumps_report(report))


COMMANDS = {"pretrain": cmd_pretrain, "unlearn": cmd_unlearn, "run": cmd_run, "score": cmd_score,
            "infer": cmd_infer, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="o3unlearn", description="Orthogonal-LoRA continual unlearning bench")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--state", help="state file to read")
        p.add_argument("--out", help="output directory")
        p.add_argument("--gate", choices=("soft", "hard"))
        p.add_argument("--lambda", dest="lam", type=float, help="orthogonal loss weight")
        p.add_argument("--zeta", type=float)
        p.add_argument("--gamma", type=float)
        p.add_argument("--nu", type=float)
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "infer":
            p.add_argument("--input", required=True, help="question token ids, space or comma separated")
            p.add_argument("--generate", action="store_true", help="greedy decoding instead of option logits")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        COMMANDS[args.command](args)
    except StageError as exc:
        print(f"error [{exc.stage}]: {exc.message}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        stage = "config" if args.command in ("pretrain", "run") else args.command
        print(f"error [{stage}]: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
