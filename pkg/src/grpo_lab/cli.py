"""Command-line front end.

Commands: ``bounds``, ``simulate``, ``entropy-step``, ``misalign`` and
``verify``. Exit status is 0 on success, 1 when a check fails and 2 on a
configuration error.
"""

from __future__ import annotations

import argparse
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .advantage import cached_moment
from .clip_bounds import ClipBoundInputs, advantage_bound, clip_bound_report
from .config import ConfigError, PRESETS, RunManifest, hyperparams, parse_overrides, resolve
from .entropy import (
    ClippedEntropyParams,
    atilde_moment_formulas,
    c_G,
    cap_inactive_predicate,
    collision_bound,
    entropy,
    exact_entropy_step_oracle,
    floor_fourth_moment,
    predicted_entropy_step_clipped_bound,
    predicted_entropy_step_unclipped,
    remainder_constant,
    skewness_phi,
)
from .misalignment import (
    MisalignConfig,
    conditional_damage,
    conditional_variance_formula,
    damage_moments,
    fraction_monotonicity_scan,
)
from .report import jsonable, write_json, write_trajectory_csv
from .simulate import SimConfig, SimulationError, run_seeds, summarize
from .verify import SUITES, run_suites

EXIT_OK, EXIT_CHECK, EXIT_CONFIG = 0, 1, 2


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


def bounds_report(cfg: dict) -> dict:
    P = hyperparams(cfg)
    ea = cfg["mean_abs_advantage"]
    if ea is None:
        ea = cached_moment(P.G, 1) if P.G <= 24 else None
        if ea is None:
            raise ConfigError("mean_abs_advantage: required when group_size > 24")
    M = cfg["m_constant"] if cfg["m_constant"] is not None else advantage_bound(P.G, cfg["m_preset"])
    try:
        clip = clip_bound_report(ClipBoundInputs(P, cfg["activation_rate"], ea, M))
    except OverflowError:
        raise ConfigError(
            f"step_size/policy_floor: exp(eta/pi_min) overflows for eta={P.eta}, pi_min={P.pi_min}"
        ) from None
    out: dict = {
        "clip": {**clip.as_dict(), "mean_abs_advantage": ea, "M": M,
                 "activation_rate": cfg["activation_rate"]},
        "cap_inactive": cap_inactive_predicate(P),
    }
    p_thr = cfg["p_threshold"]
    if p_thr is not None:
        V = P.V
        cp = ClippedEntropyParams(cfg["rho"], cfg["delta"], p_thr)
        phi = cfg["phi_override"]
        pi_hat = cfg["pi_hat"]
        ent: dict = {"c_G": c_G(P.G), "c_G_eta2": c_G(P.G) * P.eta**2, "phi": phi}
        m4 = floor_fourth_moment(P.G, V)
        for conv in ("floor", "local"):
            rep = predicted_entropy_step_clipped_bound(None, P, cp, phi=phi, pi_hat=pi_hat, convention=conv)
            ent[conv] = {
                "leading": rep.leading,
                "remainder": rep.remainder,
                "C_pi_hat": remainder_constant(pi_hat or P.pi_min, P.pi_min, P.eta, m4, conv),
                "C_pi_min": remainder_constant(P.pi_min, P.pi_min, P.eta, m4, conv),
                "total_bound": rep.total,
            }
        ent["constants"] = rep.constants  # identical under both conventions
        ent["convention"] = cfg["remainder_convention"]
        ent["bound"] = ent[cfg["remainder_convention"]]["total_bound"]
        ent["remainder"] = ent[cfg["remainder_convention"]]["remainder"]
        if pi_hat is not None:
            ent["collision_bound"] = collision_bound(P.G, V, pi_hat)
        out["entropy"] = ent
    return out


def _sim_config(cfg: dict) -> SimConfig:
    P = hyperparams(cfg)
    try:
        return SimConfig(
            params=P,
            initial_policy=cfg["initial_policy"],
            beta=cfg["beta"],
            policy_vector=cfg["policy_vector"],
            reward_mode=cfg["reward_mode"],
            correct_arm=cfg["correct_arm"],
            update_mode=cfg["update_mode"],
            steps=cfg["steps"],
            groups_per_step=cfg["groups_per_step"],
            seed=cfg["seed"],
            record_every=cfg["record_every"],
            enforce_floor=cfg["enforce_floor"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_bounds(cfg: dict, out: Path, args) -> tuple[int, list[Path]]:
    rep = bounds_report(cfg)
    path = write_json(rep, out / "bounds.json")
    c = rep["clip"]
    print(f"R_max={c['r_max']:.6g} phi(R_max)={c['phi_r']:.6g} Delta_+={c['delta_plus']:.6g} "
          f"bound={c['bound_ctot']:.6g} lower={c['lower_nraw']:.6g} ratio={c['ratio']:.6g}")
    if "entropy" in rep:
        e = rep["entropy"]
        k = e["constants"]
        print(f"X_max={k.x_max:.6g} M(p)={k.m_p:.6g} delta_eff={k.delta_eff:.6g} c(p)={k.c_p:.6g} "
              f"clipped_term={k.clipped_term:.6g} remainder={e['remainder']:.6g} "
              f"bound={e['bound']:.6g} [{e['convention']}]")
    return EXIT_OK, [path]


def cmd_simulate(cfg: dict, out: Path, args) -> tuple[int, list[Path]]:
    sc = _sim_config(cfg)
    try:
        trajs = run_seeds(sc, cfg["n_seeds"], threads=args.threads)
    except SimulationError as exc:
        print(f"simulation failed: {exc}", file=sys.stderr)
        return EXIT_CHECK, []
    paths = []
    if len(trajs) == 1:
        paths.append(write_trajectory_csv(trajs[0], out / "trajectory.csv"))
    else:
        for t, tr in enumerate(trajs):
            paths.append(write_trajectory_csv(tr, out / f"trajectory_trial{t:03d}.csv"))
    summaries = [summarize(tr) for tr in trajs]
    finals = np.array([s.final_entropy for s in summaries])
    summary = {
        "trials": summaries,
        "mean_initial_entropy": summaries[0].initial_entropy,
        "mean_final_entropy": float(finals.mean()),
        "floor_drift": [tr.floor_drift for tr in trajs],
    }
    paths.append(write_json(summary, out / "summary.json"))
    print(f"initial entropy {summaries[0].initial_entropy:.6g}, mean final entropy {finals.mean():.6g} "
          f"over {len(trajs)} trial(s)")
    return EXIT_OK, paths


def cmd_entropy_step(cfg: dict, out: Path, args) -> tuple[int, list[Path]]:
    sc = _sim_config(cfg)
    P = sc.params
    pi = sc.initial()
    try:
        measured = exact_entropy_step_oracle(pi, P, cfg["oracle_mode"], threads=args.threads)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    rep = predicted_entropy_step_unclipped(pi, P, measured, cfg["remainder_convention"])
    result = {
        "policy": pi,
        "entropy": entropy(pi),
        "phi": skewness_phi(pi),
        "mode": cfg["oracle_mode"],
        "report": rep,
        "within_budget": rep.within_budget,
        "moments": atilde_moment_formulas(P, pi),
    }
    path = write_json(result, out / "entropy_step.json")
    print(f"measured {measured:.6e} predicted {rep.delta_predicted_leading:.6e} "
          f"budget {rep.remainder_budget:.3e}")
    return EXIT_OK, [path]


def cmd_misalign(cfg: dict, out: Path, args) -> tuple[int, list[Path]]:
    try:
        mc = MisalignConfig(cfg["n_c"], cfg["n_i"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    try:
        cond = conditional_damage(mc)
    except AssertionError as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK, []
    vf, vg = conditional_variance_formula(mc)
    result = {
        "n_c": mc.n_c,
        "n_i": mc.n_i,
        "closed_form": damage_moments(mc, "closed_form"),
        "oracle": damage_moments(mc, "oracle"),
        "conditional": cond,
        "variance_formula": {"given_f_gt_g": float(vf), "given_g_gt_f": float(vg)},
        "fraction_scan": fraction_monotonicity_scan(mc.G),
    }
    path = write_json(result, out / "misalign.json")
    print(f"mean {cond.mean:.6g} variance {cond.variance:.6g} "
          f"E[D 1{{f>g}}]={cond.e_delta_f_gt_g:.6g} E[D 1{{g>f}}]={cond.e_delta_g_gt_f:.6g}")
    return EXIT_OK, [path]


def cmd_verify(cfg: dict, out: Path, args) -> tuple[int, list[Path]]:
    results = run_suites(args.suite)
    failed = [r for r in results if not r.passed]
    path = write_json({"results": results, "failed": len(failed)}, out / "verify.json")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return (EXIT_CHECK if failed else EXIT_OK), [path]


COMMANDS = {
    "bounds": cmd_bounds,
    "simulate": cmd_simulate,
    "entropy-step": cmd_entropy_step,
    "misalign": cmd_misalign,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value config file")
    common.add_argument("--seed", type=int, metavar="U64", help="64-bit seed")
    common.add_argument("--out", metavar="DIR", default=".", help="output directory")
    common.add_argument("--threads", type=int, default=1, metavar="N")
    common.add_argument("--preset", choices=sorted(PRESETS), help="named parameter set")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")

    parser = argparse.ArgumentParser(prog="grpo-lab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("bounds", "simulate", "entropy-step", "misalign"):
        sub.add_parser(name, parents=[common])
    v = sub.add_parser("verify", parents=[common])
    v.add_argument("suite", nargs="?", default="all", choices=("all",) + SUITES)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    started = _now()
    try:
        overrides = parse_overrides(args.overrides)
        if args.seed is not None:
            overrides["seed"] = args.seed
        cfg = resolve(args.config, args.preset, overrides)
        if args.threads < 1:
            raise ConfigError("threads: N >= 1 required")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        code, paths = COMMANDS[args.command](cfg, out, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_CHECK
    manifest = RunManifest(
        command=args.command,
        config=jsonable(cfg),
        seed=cfg["seed"],
        version=__version__,
        started=started,
        finished=_now(),
        outputs=[str(p) for p in paths],
    )
    write_json({**manifest.__dict__, "preset": args.preset, "seconds": time.perf_counter() - t0},
               out / "manifest.json")
    return code


if __name__ == "__main__":
    sys.exit(main())
