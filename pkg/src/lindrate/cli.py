"""Command-line entry point.

Binds a model (the builtin two-level example or a TOML model file) to a
method and writes reproducible artifacts: JSON for scalar summaries, CSV
for paths and grids, plus a manifest recording the configuration hash,
the seed and the library versions.  Identical configuration and seed
give byte-identical numeric payloads.

Exit status: 0 success, 2 configuration problem, 3 model validation
failure, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy

from . import __version__, master, sde_linear, sde_nonlinear, sme, twolevel
from .blockalg import BlockDensity, block_sum, trace_norm
from .master import DegenerateEquilibriumError, Propagator, equilibrium, evolve
from .model import ModelFileError, load_model, rate_generator, validate
from .twolevel import (QuadratureError, TwoLevelParams, build_model,
                       equilibrium_closed_form, power_monte_carlo,
                       power_quadrature, spectrum_form_a, spectrum_form_b)

METHODS = ("ode", "linear-sse", "nonlinear-sse", "linear-sme",
           "nonlinear-sme", "spectrum", "equilibrium")

EXIT_CONFIG = 2
EXIT_VALIDATION = 3
EXIT_NUMERICAL = 4


@dataclass
class RunConfig:
    model: str = "twolevel"
    method: str = "ode"
    horizon: float = 2.0
    dt: float = 1e-3
    n_traj: int = 1000
    seed: int = 0
    nu_min: float = -4.0
    nu_max: float = 6.0
    nu_points: int = 200
    out: str = "run"
    dump_paths: bool = False
    with_quadrature: bool = False
    with_mc: bool = False
    params: dict = field(default_factory=dict)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="lindrate",
        description="Simulate block master equations, their unravellings and spectra.")
    p.add_argument("--model", default="twolevel",
                   help="'twolevel' or a path to a TOML model file")
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--t", dest="horizon", type=float, default=2.0,
                   help="time horizon")
    p.add_argument("--dt", type=float, default=1e-3, help="integration step")
    p.add_argument("--ntraj", dest="n_traj", type=int, default=1000,
                   help="number of trajectories")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--nu-min", dest="nu_min", type=float, default=-4.0)
    p.add_argument("--nu-max", dest="nu_max", type=float, default=6.0)
    p.add_argument("--nu-points", dest="nu_points", type=int, default=200)
    p.add_argument("--out", default="run", help="output path prefix")
    p.add_argument("--dump-paths", dest="dump_paths", action="store_true",
                   help="retain full sampled paths, not only summaries")
    p.add_argument("--with-quadrature", action="store_true",
                   help="add the quadrature power column to spectrum output")
    p.add_argument("--with-mc", action="store_true",
                   help="add the Monte Carlo power column to spectrum output")
    p.add_argument("--param", action="append", default=[], metavar="KEY=VALUE",
                   help="override a builtin two-level parameter (repeatable)")
    p.add_argument("--verify", action="store_true",
                   help="run the oracle cross-checks and report tolerances")
    return p


def parse_config(argv) -> tuple[RunConfig, bool]:
    args = build_parser().parse_args(argv)
    overrides = {}
    for item in args.param:
        if "=" not in item:
            raise ModelFileError(f"--param {item!r}: expected KEY=VALUE")
        key, value = item.split("=", 1)
        overrides[key.strip()] = float(value)
    cfg = RunConfig(
        model=args.model, method=args.method, horizon=args.horizon, dt=args.dt,
        n_traj=args.n_traj, seed=args.seed, nu_min=args.nu_min,
        nu_max=args.nu_max, nu_points=args.nu_points, out=args.out,
        dump_paths=args.dump_paths, with_quadrature=args.with_quadrature,
        with_mc=args.with_mc, params=overrides)
    if cfg.dt <= 0 or cfg.horizon <= 0 or cfg.n_traj < 1:
        raise ModelFileError("need dt > 0, t > 0 and ntraj >= 1")
    if cfg.method == "spectrum" and cfg.nu_points < 1:
        raise ModelFileError("spectrum runs need a nonempty frequency grid")
    return cfg, args.verify


def _config_hash(cfg: RunConfig) -> str:
    payload = json.dumps(asdict(cfg), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()


def _load(cfg: RunConfig):
    if cfg.model == "twolevel":
        params = TwoLevelParams(**cfg.params)
        return build_model(params), params
    if cfg.params:
        raise ModelFileError("--param overrides apply to the builtin model only")
    return load_model(cfg.model), None


def _density_payload(blocks: np.ndarray) -> list:
    return [[[ [float(v.real), float(v.imag)] for v in row] for row in b]
            for b in np.asarray(blocks)]


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _estimate_payload(est) -> dict:
    return {
        "blocks": _density_payload(est.mean.blocks),
        "entry_stderr": np.asarray(est.entry_stderr).tolist(),
        "block_stderr": np.asarray(est.block_stderr).tolist(),
        "n_traj": est.n_traj,
        "total_variance": est.total_variance,
    }


def run(cfg: RunConfig) -> int:
    """Execute one configured run; returns the exit status."""
    try:
        model, params = _load(cfg)
    except (ModelFileError, ValueError, TypeError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    problems = validate(model)
    if problems:
        for line in problems:
            print(f"model validation: {line}", file=sys.stderr)
        return EXIT_VALIDATION

    manifest = {
        "config": asdict(cfg),
        "config_hash": _config_hash(cfg),
        "seed": cfg.seed,
        "versions": {"lindrate": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__},
    }
    try:
        artifacts = _dispatch(cfg, model, params)
    except DegenerateEquilibriumError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except QuadratureError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    manifest["artifacts"] = artifacts
    _write_json(f"{cfg.out}.manifest.json", manifest)
    print(f"wrote {', '.join(artifacts)} and {cfg.out}.manifest.json")
    return 0


def _initial_state(model, params) -> BlockDensity:
    if params is not None:
        _, eq = equilibrium_closed_form(params)
        return eq
    return equilibrium(model)


def _dispatch(cfg: RunConfig, model, params) -> list[str]:
    out = cfg.out
    artifacts = []
    if cfg.method == "equilibrium":
        eq = equilibrium(model)
        payload = {"blocks": _density_payload(eq.blocks),
                   "system_state": _density_payload(block_sum(eq)[None])[0]}
        if params is not None:
            coeffs, closed = equilibrium_closed_form(params)
            payload.update({
                "p": coeffs.p, "z1_plus": coeffs.z1_plus, "z2_plus": coeffs.z2_plus,
                "kappa2": coeffs.kappa2,
                "closed_vs_nullspace_tracenorm": trace_norm(
                    BlockDensity(eq.blocks - closed.blocks)),
            })
        _write_json(f"{out}.equilibrium.json", payload)
        artifacts.append(f"{out}.equilibrium.json")

    elif cfg.method == "ode":
        eta0 = _initial_state(model, params)
        grid = np.linspace(0.0, cfg.horizon, max(2, int(round(cfg.horizon / cfg.dt)) + 1))
        states = evolve(model, eta0, grid)
        master.write_evolution_csv(f"{out}.evolution.csv", grid, states)
        artifacts.append(f"{out}.evolution.csv")

    elif cfg.method in ("linear-sse", "nonlinear-sse"):
        eta0 = _initial_state(model, params)
        if cfg.method == "linear-sse":
            est = sde_linear.unravel_weighted(
                model, eta0, cfg.horizon, cfg.n_traj, cfg.dt, cfg.seed,
                weight_times=(cfg.horizon,))
            payload = _estimate_payload(est)
            payload["weight_stats"] = {str(k): v for k, v in est.weight_stats.items()}
        else:
            est = sde_nonlinear.unravel_normalized(
                model, eta0, cfg.horizon, cfg.n_traj, cfg.dt, cfg.seed)
            payload = _estimate_payload(est)
        ode = evolve(model, eta0, [cfg.horizon])[0]
        payload["ode_reference"] = _density_payload(ode.blocks)
        payload["tracenorm_gap_vs_ode"] = trace_norm(
            BlockDensity(est.mean.blocks - ode.blocks))
        _write_json(f"{out}.estimate.json", payload)
        artifacts.append(f"{out}.estimate.json")
        if cfg.dump_paths:
            traj = sde_linear.simulate_linear(
                model, _first_vector(eta0), cfg.horizon, cfg.dt, cfg.seed, 0)
            sde_linear.write_trajectory_csv(f"{out}.path.csv", traj)
            sde_linear.write_jump_sidecar_csv(f"{out}.jumps.csv", traj)
            artifacts += [f"{out}.path.csv", f"{out}.jumps.csv"]

    elif cfg.method == "linear-sme":
        eta0 = _initial_state(model, params)
        run_ = sme.simulate_linear_sme(model, eta0, cfg.horizon, cfg.dt,
                                       cfg.seed, 0, store_path=cfg.dump_paths)
        run_.record.save_csv(f"{out}.record.csv")
        artifacts.append(f"{out}.record.csv")
        payload = {
            "sigma_final": _density_payload(run_.sigma_final),
            "likelihood_final": float(run_.likelihood_path[-1]),
        }
        _write_json(f"{out}.filtering.json", payload)
        artifacts.append(f"{out}.filtering.json")

    elif cfg.method == "nonlinear-sme":
        eta0 = _initial_state(model, params)
        run_ = sme.simulate_nonlinear_sme(model, eta0, cfg.horizon, cfg.dt,
                                          cfg.seed, 0, store_path=cfg.dump_paths)
        run_.record.save_csv(f"{out}.record.csv")
        artifacts.append(f"{out}.record.csv")
        _write_json(f"{out}.filtering.json",
                    {"rho_final": _density_payload(run_.rho_final)})
        artifacts.append(f"{out}.filtering.json")

    elif cfg.method == "spectrum":
        if params is None:
            raise ModelFileError("spectrum runs need the builtin two-level model")
        nu = np.linspace(cfg.nu_min, cfg.nu_max, cfg.nu_points)
        fa = spectrum_form_a(params, nu)
        fb = spectrum_form_b(params, nu)
        quad = mc = mc_se = None
        if cfg.with_quadrature:
            quad = np.array([power_quadrature(params, cfg.horizon, v) for v in nu])
        if cfg.with_mc:
            mc = np.empty(len(nu))
            mc_se = np.empty(len(nu))
            for i, v in enumerate(nu):
                pv = TwoLevelParams(**{**_params_dict(params), "lo_freq": float(v)})
                mc[i], mc_se[i] = power_monte_carlo(
                    pv, cfg.horizon, cfg.n_traj, cfg.dt, cfg.seed)
        twolevel.write_spectrum_csv(f"{out}.spectrum.csv", nu, fa, fb, quad, mc, mc_se)
        artifacts.append(f"{out}.spectrum.csv")
        gap = float(np.max(np.abs(fa - fb) / np.maximum(np.abs(fb), 1e-300)))
        _write_json(f"{out}.spectrum.json", {"max_relative_form_gap": gap})
        artifacts.append(f"{out}.spectrum.json")

    else:
        raise ModelFileError(f"unknown method {cfg.method!r}")
    return artifacts


def _params_dict(params: TwoLevelParams) -> dict:
    d = asdict(params)
    d["ref_jump_rates"] = tuple(d["ref_jump_rates"])
    return d


def _first_vector(eta0: BlockDensity):
    from .sde_linear import InitialSampler
    from .blockalg import BlockVector
    return BlockVector(InitialSampler.from_density(eta0).vectors[0])


def verify(cfg: RunConfig) -> int:
    """Run the module-level oracle cross-checks; report measured gaps."""
    try:
        model, params = _load(cfg)
    except (ModelFileError, ValueError, TypeError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    problems = validate(model)
    if problems:
        for line in problems:
            print(f"model validation: {line}", file=sys.stderr)
        return EXIT_VALIDATION

    checks = []
    rng = np.random.default_rng(cfg.seed)

    from .model import diag_blocks_to_full, extended_generator, full_to_diag_blocks
    n, d = model.n, model.d
    worst = 0.0
    for _ in range(20):
        blocks = rng.standard_normal((n, d, d)) + 1j * rng.standard_normal((n, d, d))
        blocks = blocks + np.conj(np.swapaxes(blocks, -1, -2))
        full = extended_generator(model, diag_blocks_to_full(blocks))
        gap = np.max(np.abs(full_to_diag_blocks(full, n, d)
                            - rate_generator(model, blocks)))
        worst = max(worst, float(gap))
    checks.append(("generator block equivalence", worst, 1e-13))

    try:
        eq = equilibrium(model)
        resid = float(np.max(np.abs(rate_generator(model, eq.blocks))))
        checks.append(("equilibrium residual", resid, 1e-10))
    except DegenerateEquilibriumError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL

    t_grid = [1.0]
    a = evolve(model, eq, t_grid, method="rk4")[0]
    b = evolve(model, eq, t_grid, method="expm")[0]
    checks.append(("rk4 vs expm at t=1", trace_norm(BlockDensity(a.blocks - b.blocks)),
                   1e-8))

    if params is not None:
        coeffs, closed = equilibrium_closed_form(params)
        checks.append(("closed-form vs nullspace equilibrium",
                       trace_norm(BlockDensity(eq.blocks - closed.blocks)), 1e-10))
        nu = np.linspace(params.omega1 - 10, params.omega2 + 10, 1000)
        fa = spectrum_form_a(params, nu)
        fb = spectrum_form_b(params, nu)
        gap = float(np.max(np.abs(fa - fb) / np.maximum(np.abs(fb), 1e-300)))
        checks.append(("spectrum form A vs form B (relative)", gap, 1e-10))

    failed = False
    for name, measured, tol in checks:
        ok = measured <= tol
        failed |= not ok
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {measured:.3e} (tolerance {tol:.1e})")
    return EXIT_NUMERICAL if failed else 0


def main(argv=None) -> int:
    try:
        cfg, do_verify = parse_config(argv)
    except ModelFileError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if do_verify:
        return verify(cfg)
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
