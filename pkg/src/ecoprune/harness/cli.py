"""Command-line entry point: ``ecoprune <command> --config PATH [...]``."""
from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from ..compactor import EmptyBlockWarning, compact_model, count_params
from ..diffusion import full_sample
from ..gates import gate_groups, threshold_mask
from ..pruning import DivergenceError
from . import archive, experiments
from .archive import ArchiveFormatError
from .config import ConfigError, load_config, parse_float_list
from .reports import write_csv

log = logging.getLogger("ecoprune")

COMMANDS = ("train-base", "learn-mask", "prune", "sample", "eval", "profile", "gate-curve")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecoprune",
                                     description="End-to-end structural pruning of a toy "
                                                 "latent diffusion denoiser.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="run configuration file")
        p.add_argument("--seed", type=int, help="override [run] seed")
        p.add_argument("--out", help="output directory (overrides [run] out)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("learn-mask", "prune", "sample", "eval"):
            p.add_argument("--base", help="base model archive (default OUT/base.ecod)")
        if name in ("prune", "eval"):
            p.add_argument("--gates", help="mask logits archive (default OUT/gates.ecod)")
            p.add_argument("--sparsity", type=float, help="target pruning ratio in [0, 1)")
            p.add_argument("--mode", choices=("global", "local"), help="thresholding scope")
        if name == "learn-mask":
            p.add_argument("--conditions", help="comma-separated condition ids or 'all'")
        if name == "sample":
            p.add_argument("--model", help="archive to sample from (default: --base)")
            p.add_argument("--conditions", help="comma-separated condition ids or 'all'")
            p.add_argument("--n", type=int, default=1, help="samples per condition")
        if name == "eval":
            p.add_argument("--pruned", help="pruned model archive; when omitted the mask "
                                            "from --gates is applied as binary gates")
        if name == "profile":
            p.add_argument("--T", dest="T_values", help="comma-separated step counts")
        if name in ("profile", "learn-mask"):
            p.add_argument("--timing", action="store_true",
                           help="add wall-time columns (output is then not reproducible)")
    return parser


def _out_dir(cfg) -> Path:
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train_base(cfg, args):
    out = _out_dir(cfg)
    model, rows = experiments.train_base(cfg)
    archive.save_model(out / "base.ecod", model)
    write_csv(out / "train_base.csv", ("step", "loss"), rows)
    log.info("base model: %d params, final loss %.4g", count_params(model), rows[-1]["loss"] if rows else float("nan"))


def _base_path(cfg, args) -> Path:
    return Path(args.base) if args.base else Path(cfg.run.out) / "base.ecod"


def cmd_learn_mask(cfg, args):
    out = _out_dir(cfg)
    base = archive.load_model(_base_path(cfg, args))
    conditions = cfg.condition_ids(args.conditions) if args.conditions else None
    lam, report = experiments.run_learn_mask(cfg, base, conditions)
    mcfg = base.config
    archive.save_gates(out / "gates.ecod", lam, gate_groups(mcfg.n_blocks, mcfg.n_heads, mcfg.d_ff))
    header, rows = experiments.report_rows(report, cfg.run.record_timing or args.timing)
    write_csv(out / "learn_mask.csv", header, rows)


def _mask(cfg, args, base):
    from ..gates import BinaryMask
    sparsity = cfg.run.sparsity if args.sparsity is None else args.sparsity
    mode = args.mode or cfg.run.mode
    gates_path = Path(args.gates) if args.gates else Path(cfg.run.out) / "gates.ecod"
    lam, groups, _ = archive.load_gates(gates_path)
    if sum(n for _, n in groups) != base.config.n_gates:
        raise ArchiveFormatError(f"{gates_path} does not match the base model's gate count")
    mask: BinaryMask = threshold_mask(lam, sparsity, mode, groups)
    return mask, sparsity, mode


def cmd_prune(cfg, args):
    out = _out_dir(cfg)
    base = archive.load_model(_base_path(cfg, args))
    mask, sparsity, mode = _mask(cfg, args, base)
    pruned = compact_model(base, mask)
    archive.save_model(out / "pruned.ecod", pruned, sparsity=sparsity, mode=mode,
                       achieved_sparsity=mask.achieved_sparsity)
    log.info("pruned %d -> %d params (%.1f%% of units removed)", count_params(base),
             count_params(pruned), 100 * mask.achieved_sparsity)


def cmd_sample(cfg, args):
    out = _out_dir(cfg)
    model = archive.load_model(Path(args.model) if args.model else _base_path(cfg, args))
    conditions = cfg.condition_ids(args.conditions) if args.conditions else cfg.condition_ids()
    schedule = experiments.schedule_for(cfg)
    mode = experiments.sampler_for(cfg)
    rng = np.random.default_rng([cfg.run.seed, 5])
    mcfg = model.config
    dims = mcfg.seq_len * mcfg.d_model
    rows = []
    for c in conditions:
        z_T = rng.standard_normal((args.n, mcfg.seq_len, mcfg.d_model))
        z0 = np.asarray(full_sample(z_T, np.full(args.n, c), model, schedule, None, mode))
        for i in range(args.n):
            rows.append([c, i, *z0[i].reshape(-1)])
    header = ["condition", "sample", *[f"z{j}" for j in range(dims)]]
    write_csv(out / "samples.csv", header, rows)


def cmd_eval(cfg, args):
    out = _out_dir(cfg)
    base = archive.load_model(_base_path(cfg, args))
    schedule = experiments.schedule_for(cfg)
    if args.pruned:
        other, gates = archive.load_model(args.pruned), None
        sized = other
    else:
        mask, _, _ = _mask(cfg, args, base)
        other, gates = base, mask.as_gates()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", EmptyBlockWarning)
            sized = compact_model(base, mask)
    conditions = cfg.condition_ids(cfg.run.eval_conditions)
    rows = experiments.eval_run(base, other, cfg.run.eval_samples, conditions, schedule,
                                cfg.run.seed, gates, experiments.sampler_for(cfg), sized)
    write_csv(out / "eval.csv", experiments.EVAL_HEADER, rows)


def cmd_profile(cfg, args):
    out = _out_dir(cfg)
    spec = args.T_values or cfg.run.profile_T
    T_values = [int(t) for t in parse_float_list(spec)]
    rows = experiments.profile_engines(T_values, cfg.run.profile_repeats, cfg.run.profile_batch,
                                       cfg.model, cfg.gates, cfg.prune.beta_reg, cfg.run.seed)
    header = [c for c in experiments.PROFILE_HEADER
              if cfg.run.record_timing or args.timing or c != "median_wall_time"]
    write_csv(out / "profile.csv", header, rows)


def cmd_gate_curve(cfg, args):
    out = _out_dir(cfg)
    write_csv(out / "gate_curve.csv", experiments.GATE_CURVE_HEADER,
              experiments.gate_curve_from_config(cfg))


HANDLERS = {
    "train-base": cmd_train_base, "learn-mask": cmd_learn_mask, "prune": cmd_prune,
    "sample": cmd_sample, "eval": cmd_eval, "profile": cmd_profile,
    "gate-curve": cmd_gate_curve,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.out is not None:
            cfg = cfg.with_out(args.out)
        if getattr(args, "sparsity", None) is not None and not 0.0 <= args.sparsity < 1.0:
            raise ConfigError(f"--sparsity must lie in [0, 1), got {args.sparsity}")
        HANDLERS[args.command](cfg, args)
    except (ConfigError, ArchiveFormatError, FileNotFoundError, DivergenceError, ValueError) as exc:
        print(f"ecoprune {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
