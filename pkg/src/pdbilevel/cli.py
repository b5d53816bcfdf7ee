"""Experiment runner.

Subcommands: ``train``, ``check-grad``, ``denoise``, ``budget-bench``.
Configuration is a single flat JSON document with a strictly validated
key set (unknown keys are rejected so hyperparameter typos fail loudly).
Exit codes: 0 success, 2 configuration/format errors, 3 numerical
stagnation.
"""

import argparse
import json
import os
import sys

import numpy as np

from .errors import FormatError, OracleSizeError, StagnationError
from .hypergrad import inexact_piggyback
from .imaging import add_gaussian_noise, load_pgm, psnr, save_pgm, ssim, synthetic_image
from .maid import CsvLog, LogRow, MaidConfig, maid_run, nonadaptive_run
from .problems import TrainingPair, make_problem
from .saddle import solve_saddle
from .tensorio import load_f64t, save_f64t

# key -> (type, default); None default means "no default, optional"
CONFIG_SCHEMA = {
    "problem": (str, "tvdisc"),
    "n_filters": (int, 8),
    "n_filters2": (int, 4),
    "kernel_size": (int, 5),
    "lambda_reg": (float, 20.0),
    "gamma": (float, 1.0),
    "mu_g": (float, 1.0),
    "eps_smooth": (float, 1e-3),
    "w_smooth": (float, 0.01),
    "mu_q": (float, 1e-2),
    "mu_fstar": (float, 1e-2),
    "mu_z": (float, 1e-3),
    "mu_reg": (float, 1e-3),
    "nonsmooth_tv": (bool, False),
    "images": (list, None),
    "synthetic_count": (int, 4),
    "synthetic_size": (int, 32),
    "synthetic_seed": (int, 100),
    "noise_sigma": (float, 25.5),
    "noise_seed": (int, 0),
    "init_seed": (int, 0),
    "alpha0": (float, 1e-2),
    "eps_x0": (float, 1.0),
    "eps_y0": (float, 1.0),
    "delta_x0": (float, 1.0),
    "delta_y0": (float, 1.0),
    "rho_down": (float, 0.5),
    "rho_up": (float, 10.0 / 9.0),
    "nu_down": (float, 0.5),
    "nu_up": (float, 1.05),
    "max_bt": (int, 5),
    "lambda_armijo": (float, 1e-4),
    "max_outer": (int, 30),
    "budget_cap": (int, None),
    "check_grad_tolerances": (list, (1e-2, 1e-4, 1e-6)),
    "denoise_tol": (float, 1e-6),
    "out_dir": (str, "."),
}


class ConfigError(ValueError):
    pass


def load_config(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - set(CONFIG_SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = {}
    for key, (want, default) in CONFIG_SCHEMA.items():
        if key not in raw:
            cfg[key] = list(default) if isinstance(default, tuple) else default
            continue
        val = raw[key]
        if val is None:
            cfg[key] = None
            continue
        if want is float and isinstance(val, (int, float)) and not isinstance(val, bool):
            cfg[key] = float(val)
        elif want is int and isinstance(val, int) and not isinstance(val, bool):
            cfg[key] = int(val)
        elif want is bool and isinstance(val, bool):
            cfg[key] = val
        elif want is str and isinstance(val, str):
            cfg[key] = val
        elif want is list and isinstance(val, list):
            cfg[key] = val
        else:
            raise ConfigError(f"config key {key!r}: expected {want.__name__}")
    return cfg


def factory_from_config(cfg):
    kind = cfg["problem"]
    if kind == "quadratic":
        return make_problem(
            kind, mu_g=cfg["mu_g"], mu_fstar=cfg["mu_fstar"],
            n_filters=cfg["n_filters"], kernel_size=cfg["kernel_size"],
        )
    if kind == "tvdisc":
        return make_problem(
            kind, lambda_reg=cfg["lambda_reg"], mu_g=cfg["mu_g"],
            eps_s=cfg["eps_smooth"], n_filters=cfg["n_filters"],
            kernel_size=cfg["kernel_size"], mu_q=cfg["mu_q"],
            mu_fstar=cfg["mu_fstar"], nonsmooth=cfg["nonsmooth_tv"],
        )
    if kind == "foe":
        return make_problem(
            kind, gamma=cfg["gamma"], mu_g=cfg["mu_g"], w=cfg["w_smooth"],
            n_filters=cfg["n_filters"], kernel_size=cfg["kernel_size"],
        )
    if kind == "icnn2":
        return make_problem(
            kind, gamma=cfg["gamma"], mu_g=cfg["mu_g"], w=cfg["w_smooth"],
            n_filters1=cfg["n_filters"], n_filters2=cfg["n_filters2"],
            kernel_size=cfg["kernel_size"], mu_z=cfg["mu_z"],
            mu_reg=cfg["mu_reg"],
        )
    raise ConfigError(f"unknown problem kind: {kind!r}")


def maid_config_from(cfg):
    return MaidConfig(
        rho_down=cfg["rho_down"], rho_up=cfg["rho_up"], nu_down=cfg["nu_down"],
        nu_up=cfg["nu_up"], max_bt=cfg["max_bt"], lam=cfg["lambda_armijo"],
        alpha0=cfg["alpha0"], eps_x0=cfg["eps_x0"], eps_y0=cfg["eps_y0"],
        delta_x0=cfg["delta_x0"], delta_y0=cfg["delta_y0"],
        max_outer=cfg["max_outer"], budget_cap=cfg["budget_cap"],
    )


def training_pairs(cfg):
    """Clean images from disk or the synthetic generator, plus noise."""
    if cfg["images"]:
        cleans = [load_pgm(p) for p in cfg["images"]]
    else:
        size = cfg["synthetic_size"]
        cleans = [
            synthetic_image(size, size, cfg["synthetic_seed"] + i)
            for i in range(cfg["synthetic_count"])
        ]
    return [
        TrainingPair(
            clean,
            add_gaussian_noise(clean, cfg["noise_sigma"], cfg["noise_seed"] + i),
            noise_seed=cfg["noise_seed"] + i,
        )
        for i, clean in enumerate(cleans)
    ]


def cmd_train(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    pairs = training_pairs(cfg)
    factory = factory_from_config(cfg)
    theta0 = factory.init_theta(cfg["init_seed"])
    save_f64t(os.path.join(out_dir, "filters_init.f64t"), theta0)
    history = CsvLog(os.path.join(out_dir, "history.csv"), LogRow.FIELDS)
    budget = CsvLog(
        os.path.join(out_dir, "budget.csv"),
        ("cumulative_lower_iters", "loss_upper_bound"),
    )
    try:
        result = maid_run(
            maid_config_from(cfg), factory, theta0, pairs,
            history_log=history, budget_log=budget,
        )
    except StagnationError as exc:
        print(f"stagnation: {exc}", file=sys.stderr)
        return 3
    finally:
        history.close()
        budget.close()
    save_f64t(os.path.join(out_dir, "filters.f64t"), result.theta)
    print(
        f"train: status={result.status} accepted={result.accepted_steps} "
        f"lower_iters={result.cumulative_lower_iters}"
    )
    return 0


def _fd_reference(factory, theta, pairs, direction, step=1e-5, tol=1e-10):
    def tight_loss(th):
        total = 0.0
        for pair in pairs:
            inst = factory.build(th, pair)
            x, _, _ = solve_saddle(inst.spec, tol, tol, warm=inst.initial_state())
            total += inst.loss1.value(x)
        return total / len(pairs)

    return (tight_loss(theta + step * direction) - tight_loss(theta - step * direction)) / (2 * step)


def cmd_check_grad(cfg, out_dir):
    pairs = training_pairs(cfg)
    if pairs[0].clean.size > 1024:
        raise OracleSizeError("check-grad requires images of at most 32x32")
    factory = factory_from_config(cfg)
    theta = factory.init_theta(cfg["init_seed"])
    heuristic = factory.bounds_heuristic
    all_sound = True
    print("eps,err,bound_theta,sound" + (",heuristic" if heuristic else ""))
    for tol in cfg["check_grad_tolerances"]:
        tol = float(tol)
        z = None
        bound = 0.0
        for pair in pairs:
            r = inexact_piggyback(factory, theta, pair, tol, tol, tol, tol)
            z = r.z_theta if z is None else z + r.z_theta
            bound += r.bound_theta
        z /= len(pairs)
        bound /= len(pairs)
        if factory.kind == "quadratic":
            ref = np.mean(
                [factory.exact_hypergradient(theta, p) for p in pairs], axis=0
            )
            err = float(np.linalg.norm(z - ref))
        else:
            # finite-difference reference along the normalized error proxy
            rng = np.random.default_rng(0)
            err = 0.0
            for _ in range(3):
                d = rng.standard_normal(z.shape)
                d /= np.linalg.norm(d)
                fd = _fd_reference(factory, theta, pairs, d)
                err = max(err, abs(float(np.vdot(z, d)) - fd))
        sound = err <= bound + 1e-6
        all_sound &= sound
        marker = ",heuristic" if heuristic else ""
        print(f"{tol:.1e},{err:.6e},{bound:.6e},{int(sound)}{marker}")
    if heuristic:
        return 0
    return 0 if all_sound else 1


def cmd_denoise(cfg, out_dir, filters_path, image_path, clean_path=None):
    os.makedirs(out_dir, exist_ok=True)
    factory = factory_from_config(cfg)
    theta = load_f64t(filters_path)
    expected = factory.init_theta(cfg["init_seed"]).shape
    if tuple(theta.shape) != expected:
        raise ConfigError(
            f"filters geometry {theta.shape} does not match configured {expected}"
        )
    noisy = load_pgm(image_path)
    pair = TrainingPair(noisy, noisy)
    inst = factory.build(theta, pair)
    tol = cfg["denoise_tol"]
    x, _, iters = solve_saddle(inst.spec, tol, tol, warm=inst.initial_state())
    recon = inst.extract_image(x).reshape(noisy.shape)
    out_path = os.path.join(out_dir, "reconstruction.pgm")
    save_pgm(out_path, recon)
    print(f"denoise: wrote {out_path} after {iters} iterations")
    if clean_path:
        clean = load_pgm(clean_path)
        print(f"psnr_noisy={psnr(noisy, clean):.4f} psnr_recon={psnr(recon, clean):.4f}")
        if min(clean.shape) >= 11:
            print(f"ssim_noisy={ssim(noisy, clean):.4f} ssim_recon={ssim(recon, clean):.4f}")
    return 0


def cmd_budget_bench(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    pairs = training_pairs(cfg)
    factory = factory_from_config(cfg)
    theta0 = factory.init_theta(cfg["init_seed"])
    mcfg = maid_config_from(cfg)
    log_a = CsvLog(
        os.path.join(out_dir, "budget_adaptive.csv"),
        ("cumulative_lower_iters", "loss_upper_bound"),
    )
    try:
        res_a = maid_run(mcfg, factory, theta0, pairs, budget_log=log_a)
    except StagnationError as exc:
        print(f"stagnation: {exc}", file=sys.stderr)
        return 3
    finally:
        log_a.close()
    log_b = CsvLog(
        os.path.join(out_dir, "budget_nonadaptive.csv"),
        ("cumulative_lower_iters", "loss_upper_bound"),
    )
    try:
        res_b = nonadaptive_run(mcfg, factory, theta0, pairs, budget_log=log_b)
    finally:
        log_b.close()
    print(
        f"budget-bench: adaptive steps={res_a.accepted_steps} "
        f"iters={res_a.cumulative_lower_iters}; "
        f"non-adaptive steps={res_b.accepted_steps} "
        f"iters={res_b.cumulative_lower_iters}"
    )
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pdbilevel",
        description="Bilevel filter learning with certified inexact hypergradients",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "check-grad", "budget-bench"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None)
        p.add_argument("--seed", type=int, default=None)
    p = sub.add_parser("denoise")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("filters")
    p.add_argument("image")
    p.add_argument("--clean", default=None)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["noise_seed"] = args.seed
            cfg["init_seed"] = args.seed
        out_dir = args.out if args.out is not None else cfg["out_dir"]
        if args.command == "train":
            return cmd_train(cfg, out_dir)
        if args.command == "check-grad":
            return cmd_check_grad(cfg, out_dir)
        if args.command == "denoise":
            return cmd_denoise(cfg, out_dir, args.filters, args.image, args.clean)
        if args.command == "budget-bench":
            return cmd_budget_bench(cfg, out_dir)
        raise AssertionError(args.command)
    except (ConfigError, FormatError, OracleSizeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StagnationError as exc:
        print(f"stagnation: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
