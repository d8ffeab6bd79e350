"""photocert command line.

    photocert plan --config exp.json
    photocert certify --config exp.json --seed 7 --out run/
    photocert verify --config exp.json --trials 100 --out run/
    photocert nullifier-check --config exp.json --cutoff 12
    photocert oracle --config exp.json

certify exits 0 on accept, 1 on reject and 2 on any error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from . import certifier as ct
from . import harness as hs

EXIT_ACCEPT, EXIT_REJECT, EXIT_ERROR = 0, 1, 2


def _config(args) -> hs.ExperimentConfig:
    cfg = hs.ExperimentConfig.load(args.config)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "trials", None) is not None:
        changes["trials"] = args.trials
    if getattr(args, "budget_mode", None) is not None:
        changes["budget_mode"] = args.budget_mode
    return dataclasses.replace(cfg, **changes) if changes else cfg


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=float)


def cmd_plan(args) -> int:
    cfg = _config(args)
    proto = hs.Protocol.build(cfg)
    bounds = proto.fixed_bounds()
    if bounds is None:
        bounds = hs.pilot_bounds(proto, hs.build_scenario(cfg), hs.trial_seed(cfg.seed, 0, 0))
    reduced = hs.parse_budget_mode(cfg.budget_mode)
    eps = float(cfg.test["epsilon"]) if reduced is None else proto.epsilon_for(reduced, bounds)
    plan = proto.sample_plan(bounds, eps)
    print(plan.table())
    print(f"epsilon          {eps:.6g}")
    print(f"measured labels  {len(proto.labels)}")
    print(f"settings used    {len(proto.plan)}")
    for i, s in enumerate(proto.plan.settings):
        print(f"  setting {i}: " + " ".join(f"{a:.4f}" for a in proto.plan.angles(i)))
    if args.out:
        hs.write_artifacts(args.out, {"plan.json": plan.to_json() + "\n",
                                      "settings.json": _dump(proto.plan.to_dict()) + "\n"})
    return 0


def cmd_certify(args) -> int:
    cfg = _config(args)
    res = hs.certify(cfg, 0)
    v = res.verdict
    print(f"estimate {v.estimate:.6f}  threshold {v.config.F_T + v.config.epsilon:.6f}  "
          f"epsilon {v.config.epsilon:.6f}  -> {'ACCEPT' if v.accept else 'REJECT'}")
    if args.out:
        hs.write_artifacts(args.out, res.artifacts())
    return EXIT_ACCEPT if v.accept else EXIT_REJECT


def cmd_verify(args) -> int:
    cfg = _config(args)
    if cfg.trials < 30:
        raise ValueError("verify needs at least 30 trials")
    rep = hs.verify(cfg)
    d = rep.to_dict()
    print(f"trials {d['trials']}  accept rate {d['accept_rate']:.3f} "
          f"[{d['accept_wilson95'][0]:.3f}, {d['accept_wilson95'][1]:.3f}]  "
          f"reject rate {d['reject_rate']:.3f}  target {d['target_rate']:.3f}")
    if args.out:
        hs.write_artifacts(args.out, {"rates.json": _dump(d) + "\n",
                                      "estimates.csv": "trial,estimate,epsilon\n" + "".join(
                                          f"{i},{e!r},{x!r}\n" for i, (e, x) in enumerate(zip(rep.estimates, rep.epsilons)))})
    return 0


def cmd_nullifier(args) -> int:
    cfg = _config(args)
    rep = hs.nullifier_report(cfg.network, args.cutoff, cfg.postselection)
    print(_dump(rep))
    if args.out:
        hs.write_artifacts(args.out, {"nullifiers.json": _dump(rep) + "\n"})
    return 0


def cmd_oracle(args) -> int:
    cfg = _config(args)
    rep = hs.oracle_report(cfg)
    print(_dump(rep))
    if args.out:
        hs.write_artifacts(args.out, {"oracle.json": _dump(rep) + "\n"})
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="photocert", description="Homodyne fidelity certification experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="experiment configuration (JSON)")
        sp.add_argument("--seed", type=int, default=None, help="experiment seed (unsigned 64-bit)")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--budget-mode", default=None, help="literal or reduced:N")
        sp.add_argument("--trials", type=int, default=None)

    for name, fn in (("plan", cmd_plan), ("certify", cmd_certify), ("verify", cmd_verify), ("oracle", cmd_oracle)):
        sp = sub.add_parser(name)
        common(sp)
        sp.set_defaults(func=fn)
    sp = sub.add_parser("nullifier-check")
    common(sp)
    sp.add_argument("--cutoff", type=int, default=12)
    sp.set_defaults(func=cmd_nullifier)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_ERROR
    try:
        return args.func(args)
    except (hs.StageError, ct.PlanningError, ValueError, OSError, KeyError, ArithmeticError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
