"""Command line entry point: ``mixsim <command> --config PATH [options]``.

Exit codes: 0 success, 1 configuration error, 2 model validity error
(non-congested or degenerate mode), 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, csvio
from .analysis import (CertificationError, LyapunovMonitor, RealizationError, f_term_norms,
                       fit_linear_bound, mean_square_ensemble, select_lyapunov_params)
from .backstepping import KernelError, kernel_residual, solve_kernels
from .markov import kolmogorov_forward
from .model import (ModelError, Regime, beta_coefficients, characteristic_speeds,
                    classify_regime, equilibrium, linearize)
from .params import Config, ConfigError, load_config
from .sim import CFLError, Simulator, scenario_from_config

log = logging.getLogger("mixsim")

EXIT_OK, EXIT_CONFIG, EXIT_MODEL, EXIT_NUMERIC = 0, 1, 2, 3
KMH = 3.6


class _Run:
    """Bookkeeping shared by the commands: output dir, written files, manifest."""

    def __init__(self, args):
        self.args = args
        self.out = Path(args.out) if args.out else None
        self.outputs: list[str] = []
        self.t0 = time.perf_counter()

    def path(self, name: str) -> Path | None:
        if self.out is None:
            return None
        p = self.out / name
        self.outputs.append(name)
        return p

    def plot(self, fn, name, *a):
        if self.out is not None and self.args.plot:
            fn(*a, self.path(name))

    def finish(self):
        if self.out is None:
            return
        self.out.mkdir(parents=True, exist_ok=True)
        csvio.RunManifest(str(self.args.config), self.args.command, self.args.seed,
                          str(self.out), __version__, time.perf_counter() - self.t0,
                          tuple(self.outputs)).write()


# ---------------------------------------------------------------------------


def cmd_equilibrium(cfg: Config, args, run: _Run) -> int:
    p = cfg.traffic
    rows = []
    print(f"{'s2 [m]':>8} {'v1* [km/h]':>11} {'v2* [km/h]':>11} {'AO':>7} "
          f"{'lam1':>8} {'lam2':>8} {'lam3':>8} {'lam4':>8}  regime")
    bad = False
    for s2 in cfg.modes.states:
        eq = equilibrium(p, s2)
        beta = beta_coefficients(p, s2)
        try:
            lam, _ = characteristic_speeds(eq.v1_star, eq.v2_star, p.rho1_star, p.rho2_star, beta)
            regime = classify_regime(lam)
        except ModelError:
            lam, regime = np.full(4, np.nan), Regime.INVALID
        bad |= regime is not Regime.CONGESTED
        nominal = "  (nominal)" if s2 == cfg.modes.nominal else ""
        print(f"{s2:8.3g} {eq.v1_star * KMH:11.3f} {eq.v2_star * KMH:11.3f} {eq.AO:7.4f} "
              + " ".join(f"{v:8.3f}" for v in lam) + f"  {regime.value}{nominal}")
        rows.append((s2, eq.v1_star, eq.v2_star, eq.q1_star, eq.q2_star, *lam, regime.value))
    print("speeds lam in m/s")
    out = run.path("equilibrium.csv")
    if out:
        csvio.write_rows(out, ("mode_s2", "v1_star", "v2_star", "q1_star", "q2_star",
                               "lambda1", "lambda2", "lambda3", "lambda4", "regime"), rows)
    if bad and args.require_congested:
        print("error: not every mode is congested", file=sys.stderr)
        return EXIT_MODEL
    return EXIT_OK


def _kernel_settings(cfg: Config, args):
    ker = cfg.section("kernels")
    n = args.n if getattr(args, "n", None) is not None else int(ker.get("n", 64))
    tol = args.tol if getattr(args, "tol", None) is not None else float(ker.get("tol", 1e-8))
    max_iter = int(ker.get("max_iter", 200))
    return n, tol, max_iter


def cmd_kernels(cfg: Config, args, run: _Run) -> int:
    n, tol, max_iter = _kernel_settings(cfg, args)
    nominal = linearize(cfg.traffic, cfg.modes.nominal)
    kg = solve_kernels(nominal, n, tol, max_iter)
    res = kernel_residual(kg, nominal)
    print(f"kernel grid n={n}: converged={kg.converged} after {kg.iterations} iterations "
          f"(relative change {kg.residual:.3e})")
    print(f"residuals: pde_K={res.pde_K:.3e} pde_N={res.pde_N:.3e} "
          f"bc_diag={res.bc_diag:.3e} bc_base={res.bc_base:.3e}")
    print(f"controller: R0={np.array2string(nominal.R, precision=6)} "
          f"u_scale={1.0 / nominal.u_bar_gain:.6g}")
    modes = [linearize(cfg.traffic, s) for s in cfg.modes.states]
    norms = f_term_norms(kg, modes)
    fit = fit_linear_bound(norms, cfg.modes.nominal)
    for f in norms:
        print(f"  s2={f.s2:g}: f1={f.f1:.3e} f2={f.f2:.3e} f3={f.f3:.3e} f4={f.f4:.3e}")
    print(f"perturbation bound: slope {fit.M0:.4g} (r2={fit.r_squared:.3f}), "
          f"envelope {fit.envelope:.4g}, nominal floor {fit.floor:.3e}")
    out = run.path("kernels.csv")
    if out:
        csvio.write_kernels(out, kg)
        csvio.write_rows(run.path("kernel_residuals.csv"),
                         ("n", "iterations", "pde_K", "pde_N", "bc_diag", "bc_base"),
                         [(n, kg.iterations, res.pde_K, res.pde_N, res.bc_diag, res.bc_base)])
        csvio.write_lemma3(run.path("lemma3.csv"), norms)
        from . import plotting
        run.plot(plotting.plot_kernels, "kernels.png", kg)
    return EXIT_OK


def cmd_simulate(cfg: Config, args, run: _Run) -> int:
    over = {}
    if args.loop:
        over["loop"] = args.loop
    if args.horizon is not None:
        over["horizon"] = args.horizon
    if args.n_cells is not None:
        over["n_cells"] = args.n_cells
    if args.seed is not None:
        over["seed"] = args.seed
    sc = scenario_from_config(cfg, **over)
    n, tol, max_iter = _kernel_settings(cfg, args)
    sc = sc.with_(kernel_n=n, kernel_tol=tol, kernel_max_iter=max_iter)
    if args.pin_path:
        try:
            path = csvio.read_mode_path(args.pin_path, sc.horizon)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"--pin-path: {exc}") from None
        if max(path.mode_indices) >= cfg.modes.r or min(path.mode_indices) < 0:
            raise ConfigError("--pin-path mode index out of range")
        sc = sc.with_(path=path)
    # the Lyapunov weights are tuned on the nominal closed loop in either case
    closed = Simulator(sc.with_(loop="closed"))
    lcfg = select_lyapunov_params(closed.nominal, closed, closed.modes)
    sim = closed if sc.loop == "closed" else Simulator(sc, kernels=closed.kernels)
    mon = LyapunovMonitor(closed.kernels, sim.grids, lcfg)
    tr = sim.run(monitor=mon)
    print(f"{sc.loop} loop, {tr.path.n_jumps} jumps, dt={sim.dt:.4g} s, "
          f"Lyapunov nu={lcfg.nu:g} a={lcfg.a:.4g}")
    print(f"l2: initial {tr.l2[0]:.6g}, final {tr.l2[-1]:.6g} "
          f"(ratio {tr.l2[-1] / tr.l2[0] if tr.l2[0] else float('nan'):.4g})")
    out = run.path("trace.csv")
    if out:
        csvio.write_trace(out, tr)
        csvio.write_snapshots(run.path("snapshots.csv"), tr)
        from . import plotting
        run.plot(plotting.plot_trace, "trace.png", tr)
        run.plot(plotting.plot_snapshots, "snapshots.png", tr)
    return EXIT_OK


def cmd_montecarlo(cfg: Config, args, run: _Run) -> int:
    over = {"loop": "closed"}
    if args.horizon is not None:
        over["horizon"] = args.horizon
    if args.n_cells is not None:
        over["n_cells"] = args.n_cells
    sc = scenario_from_config(cfg, **over)
    n, tol, max_iter = _kernel_settings(cfg, argparse.Namespace())
    sc = sc.with_(kernel_n=n, kernel_tol=tol, kernel_max_iter=max_iter)
    window = args.window or cfg.section("analysis").get("fit_window")
    if window is not None:
        window = (float(window[0]), float(window[1]))
    base = sc.seed if args.seed is None else args.seed
    res = mean_square_ensemble(sc, args.n, base, window)
    print(f"{res.n_realizations} realizations, seeds {base}..{base + res.n_realizations - 1}")
    print(f"fit on [{res.window[0]:g}, {res.window[1]:g}] s: zeta={res.fitted_zeta:.6g} 1/s, "
          f"varsigma={res.fitted_varsigma:.6g}, r2={res.r_squared:.4f}")
    ratio = res.mean_sq[-1] / res.mean_sq[0] if res.mean_sq[0] > 0 else float("nan")
    print(f"mean square: final/initial = {ratio:.4g}")
    out = run.path("ensemble.csv")
    if out:
        csvio.write_ensemble(out, res)
        csvio.write_rows(run.path("ensemble_fit.csv"),
                         ("n_realizations", "window_start", "window_end", "zeta", "varsigma",
                          "r_squared"),
                         [(res.n_realizations, *res.window, res.fitted_zeta,
                           res.fitted_varsigma, res.r_squared)])
        from . import plotting
        run.plot(plotting.plot_ensemble, "ensemble.png", res)
    return EXIT_OK


def cmd_markov(cfg: Config, args, run: _Run) -> int:
    sc = scenario_from_config(cfg)
    chain = sc.chain
    horizon = args.horizon if args.horizon is not None else sc.horizon
    dt = args.dt
    if dt is None:
        dt = 0.1 / chain.tau_star if chain.tau_star > 0 else 0.1
    pt = kolmogorov_forward(chain, horizon, dt, record_every=args.record_every)
    m = pt.marginals(chain.initial_distribution)
    rows = np.abs(pt.P.sum(axis=2) - 1).max()
    print(f"{len(pt.t_grid)} records, dt={dt:g} s, max row-sum error {rows:.2e}")
    print("t={:g}: ".format(pt.t_grid[-1]) + "  ".join(
        f"{s:g} m: {p:.4f}" for s, p in zip(cfg.modes.states, m[-1])))
    out = run.path("probability.csv")
    if out:
        csvio.write_probability(out, pt, chain.initial_distribution)
        from . import plotting
        run.plot(plotting.plot_probability, "probability.png", pt,
                 chain.initial_distribution, cfg.modes.states)
    return EXIT_OK


COMMANDS = {
    "equilibrium": cmd_equilibrium,
    "kernels": cmd_kernels,
    "simulate": cmd_simulate,
    "montecarlo": cmd_montecarlo,
    "markov": cmd_markov,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True,
                        help="TOML/JSON config file, or 'paper_s5' for the bundled one")
    common.add_argument("--out", help="output directory (created if absent)")
    common.add_argument("--seed", type=int, help="random seed (default from config)")
    common.add_argument("--plot", action="store_true", help="also write PNG figures to --out")
    common.add_argument("-v", "--verbose", action="count", default=0)

    ap = argparse.ArgumentParser(prog="mixsim", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"mixsim {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("equilibrium", parents=[common], help="equilibria and regimes per mode")
    p.add_argument("--require-congested", action="store_true",
                   help="exit 2 unless every mode is congested")

    p = sub.add_parser("kernels", parents=[common], help="solve the nominal kernels")
    p.add_argument("--n", type=int, help="triangle grid resolution")
    p.add_argument("--tol", type=float, help="relative fixed-point tolerance")

    p = sub.add_parser("simulate", parents=[common], help="one open- or closed-loop run")
    p.add_argument("--loop", choices=("open", "closed"))
    p.add_argument("--pin-path", help="CSV 't, mode_index' fixing the mode path")
    p.add_argument("--horizon", type=float)
    p.add_argument("--n-cells", type=int)

    p = sub.add_parser("montecarlo", parents=[common], help="closed-loop ensemble")
    p.add_argument("--n", type=int, default=50, help="number of realizations")
    p.add_argument("--window", type=float, nargs=2, metavar=("T_A", "T_B"))
    p.add_argument("--horizon", type=float)
    p.add_argument("--n-cells", type=int)

    p = sub.add_parser("markov", parents=[common], help="Kolmogorov forward probabilities")
    p.add_argument("--horizon", type=float)
    p.add_argument("--dt", type=float)
    p.add_argument("--record-every", type=float, default=1.0)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    run = _Run(args)
    try:
        cfg = load_config(args.config)
        code = COMMANDS[args.command](cfg, args, run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ModelError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except (KernelError, CFLError, CertificationError, RealizationError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    run.finish()
    return code


if __name__ == "__main__":
    sys.exit(main())
