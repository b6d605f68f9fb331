"""Command-line surface: verification suites, reports, curves, benchmarks.

Every command resolves its configuration (flags override an optional JSON
config file; the seed falls back to ATTNLAB_SEED) and echoes the resolved
values in its output, so a run can be reproduced from the artifact alone.
Exit codes: 0 success, 1 verification failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import io
import json
import math
import os
import sys
from typing import Optional, Sequence

import numpy as np

from . import attention, bench, dilution, grad, kernels, linalg, model
from .attention import AttentionSpec

DEFAULT_SEED = 7


# ---------------------------------------------------------------------------
# Verification suites (exposed for tests as well as the CLI)
# ---------------------------------------------------------------------------


def _seeded_qkv(seed: int, n: int, d: int, lo: float = -1.0, hi: float = 1.0):
    Q = linalg.uniform(n, d, linalg.split_seed(seed, 1), lo, hi)
    K = linalg.uniform(n, d, linalg.split_seed(seed, 2), lo, hi)
    V = linalg.uniform(n, d, linalg.split_seed(seed, 3), lo, hi)
    return Q, K, V


def verify_bounds(seed: int = DEFAULT_SEED, trials: int = 200) -> dict:
    """Map-Jacobian and loss-gradient bounds plus the matrix norm facts."""
    checks = {}
    failing = []

    worst_vanilla = 0.0
    for t in range(trials):
        s = linalg.split_seed(seed, 10, t)
        n = 2 + s % 15
        d = 1 + (s >> 8) % 8
        Q, K, V = _seeded_qkv(s, n, d)
        S = linalg.matmul(Q, linalg.transpose(K)) / math.sqrt(d)
        P = linalg.row_softmax(S)
        J = grad.unified_dp_ds(P, S, kernels.get_kernel("exp"))
        m = float(np.max(np.abs(J)))
        if m > worst_vanilla:
            worst_vanilla = m
        if m > 0.25 + 1e-12:
            failing.append(("vanilla_dp_ds", s))
    checks["vanilla_max_dp_ds"] = {"value": worst_vanilla, "bound": 0.25 + 1e-12,
                                   "pass": worst_vanilla <= 0.25 + 1e-12}

    worst_linear_excess = -math.inf
    for t in range(trials):
        s = linalg.split_seed(seed, 11, t)
        n = 2 + s % 7
        d = 1 + (s >> 8) % 4
        Q, K, V = _seeded_qkv(s, n, d)
        spec = AttentionSpec("linear", kernel="1+elu")
        kern = spec.kernel_fn
        S = linalg.matmul(kern.apply(Q), linalg.transpose(kern.apply(K)))
        P = S / linalg.row_sums(S)[:, None]
        J = grad.unified_dp_ds(P, S, kernels.get_kernel("identity"))
        c3 = float(np.min(np.abs(S)))
        excess = float(np.max(np.abs(J))) - 1.0 / (4.0 * c3)
        worst_linear_excess = max(worst_linear_excess, excess)
        if excess > 1e-9:
            failing.append(("linear_dp_ds", s))
    checks["linear_dp_ds_excess_over_quarter_c3"] = {
        "value": worst_linear_excess, "bound": 1e-9,
        "pass": worst_linear_excess <= 1e-9}

    worst_norm_frac = 0.0
    for t in range(trials):
        s = linalg.split_seed(seed, 12, t)
        eps = 1e-3 if t % 2 == 0 else 1e-5
        Q, K, V = _seeded_qkv(s, 8, 8)
        dO = linalg.uniform(8, 8, linalg.split_seed(s, 4))
        spec = AttentionSpec("norm", kernel="1+elu", epsilon=eps)
        _, _, _, rep = grad.norm_backward(Q, K, V, dO, spec)
        frac = rep.max_abs_dL_ds / rep.theoretical_bound
        worst_norm_frac = max(worst_norm_frac, frac)
        if rep.max_abs_dL_ds > rep.theoretical_bound:
            failing.append(("norm_bound", s))
    checks["norm_dL_ds_over_bound"] = {"value": worst_norm_frac, "bound": 1.0,
                                       "pass": worst_norm_frac <= 1.0}

    worst_h = -math.inf
    worst_spec = -math.inf
    for t in range(trials):
        s = linalg.split_seed(seed, 13, t)
        n = 1 + s % 32
        r = 1 + (s >> 8) % 32
        m = 1 + (s >> 16) % 32
        X = linalg.uniform(n, m, linalg.split_seed(s, 1))
        Y = linalg.uniform(r, m, linalg.split_seed(s, 2))
        lhs = linalg.row_norm_max(linalg.matmul(X, linalg.transpose(Y)))
        rhs = math.sqrt(r) * linalg.row_norm_max(X) * linalg.row_norm_max(Y)
        worst_h = max(worst_h, lhs - rhs)
        est = linalg.spectral_norm_estimate(X, 200)
        worst_spec = max(worst_spec, est - math.sqrt(n) * linalg.row_norm_max(X))
        if lhs - rhs > 1e-9 or est - math.sqrt(n) * linalg.row_norm_max(X) > 1e-9:
            failing.append(("matrix_props", s))
    checks["h_submultiplicativity_excess"] = {"value": worst_h, "bound": 1e-9,
                                              "pass": worst_h <= 1e-9}
    checks["spectral_vs_sqrt_n_h_excess"] = {"value": worst_spec, "bound": 1e-9,
                                             "pass": worst_spec <= 1e-9}
    return _suite_result("bounds", checks, failing, seed)


def verify_oracle(seed: int = DEFAULT_SEED, trials: int = 200) -> dict:
    """Efficient vs reference forms, plus the block-attention degeneracies."""
    checks = {}
    failing = []
    worst = {"linear": 0.0, "norm": 0.0}
    for t in range(trials):
        s = linalg.split_seed(seed, 20, t)
        n = 2 + s % 63
        d = 1 + (s >> 8) % 16
        causal = (t % 3 == 0)
        Q, K, V = _seeded_qkv(s, n, d)
        for mech in ("linear", "norm"):
            spec = AttentionSpec(mech, kernel="1+elu", causal=causal)
            eff = attention.forward(Q, K, V, spec).O
            ref = attention.forward(Q, K, V, spec, reference=True).O
            diff = float(np.max(np.abs(eff - ref)))
            worst[mech] = max(worst[mech], diff)
            if diff > 1e-10:
                failing.append((f"{mech}_oracle", s))
    checks["linear_efficient_vs_reference"] = {"value": worst["linear"],
                                               "bound": 1e-10,
                                               "pass": worst["linear"] <= 1e-10}
    checks["norm_efficient_vs_reference"] = {"value": worst["norm"], "bound": 1e-10,
                                             "pass": worst["norm"] <= 1e-10}

    worst_mask = 0.0
    for t in range(50):
        s = linalg.split_seed(seed, 21, t)
        w = 2 + s % 6
        blocks = 1 + (s >> 8) % 4
        n = w * blocks
        d = 1 + (s >> 16) % 8
        Q, K, V = _seeded_qkv(s, n, d)
        spec = AttentionSpec("diag", block_size=w)
        got = attention.diag_forward(Q, K, V, spec).O
        want = _masked_vanilla(Q, K, V, w)
        diff = float(np.max(np.abs(got - want)))
        worst_mask = max(worst_mask, diff)
        if diff > 1e-12:
            failing.append(("diag_masked", s))
    checks["diag_vs_masked_vanilla"] = {"value": worst_mask, "bound": 1e-12,
                                        "pass": worst_mask <= 1e-12}

    worst_degen = 0.0
    for t in range(50):
        s = linalg.split_seed(seed, 22, t)
        n = 2 + s % 15
        d = 1 + (s >> 8) % 8
        Q, K, V = _seeded_qkv(s, n, d)
        got = attention.diag_forward(Q, K, V, AttentionSpec("diag", block_size=n)).O
        want = attention.vanilla_forward(Q, K, V).O
        diff = float(np.max(np.abs(got - want)))
        worst_degen = max(worst_degen, diff)
        if diff > 1e-14:
            failing.append(("diag_degenerate", s))
    checks["diag_w_eq_n_vs_vanilla"] = {"value": worst_degen, "bound": 1e-14,
                                        "pass": worst_degen <= 1e-14}
    return _suite_result("oracle", checks, failing, seed)


def _masked_vanilla(Q, K, V, w):
    n, d = Q.shape
    S = linalg.matmul(Q, linalg.transpose(K)) / math.sqrt(d)
    mask = np.full((n, n), -np.inf)
    for start in range(0, n, w):
        mask[start:start + w, start:start + w] = 0.0
    P = linalg.row_softmax(S + mask)
    return linalg.matmul(P, V)


def verify_fd(seed: int = DEFAULT_SEED) -> dict:
    """Finite-difference agreement for every analytic backward."""
    checks = {}
    failing = []
    tol = 1e-6

    def record(name, err, s):
        checks[name] = {"value": err, "bound": tol, "pass": err <= tol}
        if err > tol:
            failing.append((name, s))

    s = linalg.split_seed(seed, 30)
    Q, K, V = _seeded_qkv(s, 6, 4)
    dO = linalg.uniform(6, 4, linalg.split_seed(s, 4))
    spec = AttentionSpec("vanilla")
    dQ, dK, dV = grad.vanilla_backward(Q, K, V, dO, spec)
    record("fd_vanilla", grad._fd_for_mechanism(Q, K, V, dO, spec, (dQ, dK, dV)), s)

    Q, K, V = _seeded_qkv(linalg.split_seed(seed, 31), 8, 4)
    dO = linalg.uniform(8, 4, linalg.split_seed(seed, 31, 4))
    spec = AttentionSpec("linear", kernel="1+elu")
    _, _, _, rep = grad.linear_scaled_backward(Q, K, V, dO, spec, with_fd=True)
    record("fd_linear", rep.fd_max_error, seed)

    Q, K, V = _seeded_qkv(linalg.split_seed(seed, 32), 8, 8)
    dO = linalg.uniform(8, 8, linalg.split_seed(seed, 32, 4))
    spec = AttentionSpec("norm", kernel="1+elu", epsilon=1e-5)
    _, _, _, rep = grad.norm_backward(Q, K, V, dO, spec, with_fd=True)
    record("fd_norm", rep.fd_max_error, seed)

    Q, K, V = _seeded_qkv(linalg.split_seed(seed, 33), 8, 4)
    dO = linalg.uniform(8, 4, linalg.split_seed(seed, 33, 4))
    spec = AttentionSpec("diag", block_size=4)
    dQ, dK, dV = grad.diag_backward(Q, K, V, dO, spec)
    err = grad.finite_diff_check(
        lambda p: attention.diag_forward(p["Q"], p["K"], p["V"], spec).O,
        {"Q": Q.copy(), "K": K.copy(), "V": V.copy()},
        {"Q": dQ, "K": dK, "V": dV}, dO)
    record("fd_diag", err, seed)

    cfg = model.ModelConfig(n_layers=1, n_early=1, d_model=8, n_heads=2,
                            block_size=4, glu_dim=12, variant="t2", seed=seed)
    params = model.init_layer(cfg, 0)
    x = linalg.uniform(8, 8, linalg.split_seed(seed, 34))
    d_out = linalg.uniform(8, 8, linalg.split_seed(seed, 34, 2))
    dx, grads_ = model.glu_ffn_backward(x, params, d_out)
    err = grad.finite_diff_check(
        lambda p: model.glu_ffn(p["x"], model.LayerParams(
            params.W_Q, params.W_K, params.W_V, params.W_O,
            p["W_g"], p["W_u"], p["W_down"])),
        {"x": x.copy(), "W_g": params.W_g.copy(), "W_u": params.W_u.copy(),
         "W_down": params.W_down.copy()},
        {"x": dx, **grads_}, d_out)
    record("fd_glu", err, seed)

    err = _fd_layer(cfg, params, x, d_out)
    record("fd_layer_diag", err, seed)
    cfg_norm = model.ModelConfig(n_layers=1, n_early=0, d_model=8, n_heads=2,
                                 block_size=4, glu_dim=12, variant="t2", seed=seed)
    err = _fd_layer(cfg_norm, model.init_layer(cfg_norm, 0), x, d_out)
    record("fd_layer_norm", err, seed)
    return _suite_result("fd", checks, failing, seed)


def _fd_layer(cfg, params, x, d_out) -> float:
    dx, grads_ = model.layer_backward(x, params, 0, cfg, d_out)

    def fwd(p):
        lp = model.LayerParams(p["W_Q"], p["W_K"], p["W_V"], p["W_O"],
                               p["W_g"], p["W_u"], p["W_down"])
        return model.layer_forward(p["x"], lp, 0, cfg)

    named = {"x": x.copy(), **{k: v.copy() for k, v in params.named().items()}}
    return grad.finite_diff_check(fwd, named, {"x": dx, **grads_}, d_out)


def verify_dilution(seed: int = DEFAULT_SEED) -> dict:
    checks = {}
    failing = []
    m = 64
    ident = dilution.dilution_curve(np.eye(m))
    err_ident = float(np.max(np.abs(ident.ratios[1:] - 1.0 / m)))
    checks["identity_curve"] = {"value": err_ident, "bound": 2.0 / m,
                                "pass": err_ident <= 2.0 / m}
    uni = dilution.dilution_curve(np.full((m, m), 1.0 / m))
    err_uni = float(np.max(np.abs(uni.ratios[1:] - uni.thresholds[1:])))
    checks["uniform_curve"] = {"value": err_uni, "bound": 2.0 / m,
                               "pass": err_uni <= 2.0 / m}

    neg = 0
    worst_area = math.inf
    for t in range(100):
        s = linalg.split_seed(seed, 40, t)
        Q, K, V = _seeded_qkv(s, 32, 8)
        Pd = attention.diag_forward(Q, K, V, AttentionSpec("diag", block_size=4),
                                    reference=True).P
        Pl = attention.linear_scaled_forward(
            Q, K, V, AttentionSpec("linear", kernel="1+elu"), reference=True).P
        area = dilution.compare_curves(dilution.dilution_curve(Pd),
                                       dilution.dilution_curve(Pl))
        worst_area = min(worst_area, area)
        if area <= 0:
            neg += 1
            failing.append(("diag_vs_linear_area", s))
    checks["diag_vs_linear_min_area"] = {"value": worst_area, "bound": 0.0,
                                         "pass": neg == 0}
    if err_ident > 2.0 / m or err_uni > 2.0 / m:
        failing.append(("analytic_curves", seed))
    return _suite_result("dilution", checks, failing, seed)


def _suite_result(name, checks, failing, seed) -> dict:
    return {
        "suite": name,
        "seed": seed,
        "pass": all(c["pass"] for c in checks.values()),
        "checks": checks,
        "failing_seeds": [{"check": c, "seed": s} for c, s in failing],
    }


SUITES = {
    "bounds": verify_bounds,
    "oracle": verify_oracle,
    "fd": verify_fd,
    "dilution": verify_dilution,
}


# ---------------------------------------------------------------------------
# JSON / matrix-file helpers
# ---------------------------------------------------------------------------


def _sanitize(obj):
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.floating):
        obj = float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return [_sanitize(v) for v in obj.tolist()]
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)  # 'inf', '-inf', 'nan'
    return obj


def _emit(payload: dict, out: Optional[str]) -> None:
    text = json.dumps(_sanitize(payload), sort_keys=True, indent=2) + "\n"
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    sys.stdout.write(text)


def read_matrix_file(path: str):
    with open(path) as fh:
        content = fh.read()
    if not content.strip():
        return np.zeros((0, 0))
    return np.loadtxt(io.StringIO(content), dtype=np.float64, ndmin=2)


def write_matrix_file(path: str, m) -> None:
    np.savetxt(path, m, fmt="%.17g")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _resolve_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("ATTNLAB_SEED")
    if env is not None:
        return int(env)
    return DEFAULT_SEED


def _load_config_file(args) -> dict:
    if getattr(args, "config", None):
        with open(args.config) as fh:
            return json.load(fh)
    return {}


def cmd_verify(args) -> int:
    seed = _resolve_seed(args)
    names = list(SUITES) if args.suite == "all" else [args.suite]
    results = {name: SUITES[name](seed) for name in names}
    ok = all(r["pass"] for r in results.values())
    _emit({"command": "verify",
           "config": {"suite": args.suite, "seed": seed, "threads": args.threads},
           "pass": ok,
           "results": results}, args.out)
    return 0 if ok else 1


def cmd_adversarial(args) -> int:
    seed = _resolve_seed(args)
    kern = kernels.get_kernel(args.kernel)
    points = []
    x0_values = [args.x0sq]
    if args.sweep:
        x0_values = [1e-2, 1e-4, 1e-6]
    for x0sq in x0_values:
        inst = grad.build_adversarial(args.n, args.d, x0sq, kern)
        observed = grad.adversarial_observed(inst, kern)
        points.append({
            "x0_norm_sq": x0sq,
            "predicted": inst.predicted_grad_magnitude,
            "observed": observed,
            "relative_error": abs(observed - inst.predicted_grad_magnitude)
            / inst.predicted_grad_magnitude,
        })
    _emit({"command": "adversarial",
           "config": {"n": args.n, "d": args.d, "x0sq": args.x0sq,
                      "kernel": args.kernel, "sweep": args.sweep, "seed": seed},
           "vanilla_bound": 0.25,
           "points": points}, args.out)
    return 0


def cmd_dilution(args) -> int:
    seed = _resolve_seed(args)
    outdir = args.out or "."
    os.makedirs(outdir, exist_ok=True)
    if args.config:
        return _dilution_from_model(args, seed, outdir)
    if args.input:
        X = read_matrix_file(args.input)
        n, d = X.shape
    else:
        n, d = args.n, args.d
        X = linalg.uniform(n, d, linalg.split_seed(seed, 1))
    written = {}
    curves = {}
    mechanisms = args.mechanisms.split(",")
    for mech in mechanisms:
        Q = linalg.matmul(X, linalg.normal(d, d, linalg.split_seed(seed, 2), std=1 / math.sqrt(d)))
        K = linalg.matmul(X, linalg.normal(d, d, linalg.split_seed(seed, 3), std=1 / math.sqrt(d)))
        V = linalg.matmul(X, linalg.normal(d, d, linalg.split_seed(seed, 4), std=1 / math.sqrt(d)))
        spec = _bench_spec(mech, args)
        P = attention.forward(Q, K, V, spec, reference=True).P
        if mech == "norm":
            P = dilution.scores_to_distribution(P)  # raw scores, not stochastic
        curve = dilution.dilution_curve(P)
        curves[mech] = curve
        path = os.path.join(outdir, f"dilution_{mech}.csv")
        with open(path, "w") as fh:
            fh.write(curve.to_csv())
        written[mech] = path
    areas = {}
    names = [m for m in mechanisms if m in curves]
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            areas[f"{a}_minus_{b}"] = dilution.compare_curves(curves[a], curves[b])
    _emit({"command": "dilution",
           "config": {"mechanisms": args.mechanisms, "n": n, "d": d, "seed": seed,
                      "block_size": args.block_size or 64, "input": args.input},
           "files": written,
           "signed_areas": areas}, None)
    return 0


def _dilution_from_model(args, seed: int, outdir: str) -> int:
    """Per-layer curves of a configured model on seeded or file input."""
    config = model.ModelConfig(**_load_config_file(args))
    if args.input:
        X = read_matrix_file(args.input)
    else:
        X = linalg.uniform(args.n, config.d_model, linalg.split_seed(seed, 1))
    _, diag = model.model_forward(X, config, collect_diagnostics=True)
    written = {}
    curves = {}
    for i, curve in enumerate(diag.dilution_curves):
        name = f"layer{i}_{config.layer_mechanism(i)}"
        path = os.path.join(outdir, f"dilution_{name}.csv")
        with open(path, "w") as fh:
            fh.write(curve.to_csv())
        written[name] = path
        curves[name] = curve
    names = sorted(curves)
    areas = {}
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            areas[f"{a}_minus_{b}"] = dilution.compare_curves(curves[a], curves[b])
    _emit({"command": "dilution",
           "config": json.loads(config.to_json()) | {"seed": seed, "n": X.shape[0]},
           "files": written,
           "signed_areas": areas}, None)
    return 0


def _bench_spec(mech: str, args) -> AttentionSpec:
    if mech == "diag":
        return AttentionSpec("diag", block_size=args.block_size or 64,
                             causal=args.causal)
    if mech in ("linear", "norm"):
        return AttentionSpec(mech, kernel=args.kernel, causal=args.causal,
                             epsilon=args.epsilon or 1e-5)
    return AttentionSpec("vanilla", causal=args.causal)


def cmd_bench(args) -> int:
    seed = _resolve_seed(args)
    lengths = [int(v) for v in args.lengths.split(",")]
    mechanisms = args.mechanisms.split(",")
    results = bench.run_scaling(mechanisms, lengths, d=args.d, reps=args.reps,
                                seed=seed, mode=args.mode)
    csv_text = bench.results_to_csv(results)
    if not args.out:
        sys.stdout.write(csv_text)  # CSV alone keeps stdout parseable
        return 0
    with open(args.out, "w") as fh:
        fh.write(csv_text)
    slopes = {}
    for mech in mechanisms:
        try:
            slopes[mech] = bench.loglog_slope(results, mech)
        except ValueError:
            slopes[mech] = None
    _emit({"command": "bench",
           "config": {"lengths": lengths, "mechanisms": mechanisms, "d": args.d,
                      "reps": args.reps, "mode": args.mode, "seed": seed,
                      "threads": args.threads},
           "loglog_slopes": slopes,
           "csv": args.out}, None)
    return 0


def cmd_stability(args) -> int:
    seed = _resolve_seed(args)
    specs = []
    for mech in args.mechanisms.split(","):
        if mech == "norm":
            specs.append(AttentionSpec("norm", kernel=args.kernel,
                                       epsilon=args.epsilon or 1e-4))
        elif mech == "linear":
            specs.append(AttentionSpec("linear", kernel=args.kernel))
        else:
            specs.append(AttentionSpec(mech))
    report = grad.grad_stability_experiment(specs, steps=args.steps, seed=seed,
                                            learning_rate=args.lr)
    _emit({"command": "stability",
           "config": {"mechanisms": args.mechanisms, "steps": args.steps,
                      "lr": args.lr, "seed": seed, "kernel": args.kernel},
           "rsd": report.rsd,
           "replicas": report.replicas}, args.out)
    return 0


def cmd_pad_forward(args) -> int:
    file_cfg = _load_config_file(args)
    cfg_kwargs = dict(file_cfg)
    # only explicitly-given flags override the config file
    if args.block_size is not None:
        cfg_kwargs["block_size"] = args.block_size
    if args.causal:
        cfg_kwargs["causal"] = True
    if args.seed is not None:
        cfg_kwargs["seed"] = args.seed
    if args.heads is not None:
        cfg_kwargs["n_heads"] = args.heads
    if args.variant is not None:
        cfg_kwargs["variant"] = args.variant
    if args.epsilon is not None:
        cfg_kwargs["epsilon"] = args.epsilon
    cfg_kwargs.setdefault("seed", _resolve_seed(args))
    config = model.ModelConfig(**cfg_kwargs)
    X = read_matrix_file(args.input)
    if X.size == 0:
        write_matrix_file(args.out, np.zeros((0, config.d_model)))
        _emit({"command": "pad_forward", "config": json.loads(config.to_json()),
               "rows_in": 0, "rows_out": 0, "padded_to": 0}, None)
        return 0
    n = X.shape[0]
    w = config.block_size
    padded_n = ((n + w - 1) // w) * w
    if X.shape[1] != config.d_model:
        print(f"input has {X.shape[1]} columns, model wants {config.d_model}",
              file=sys.stderr)
        return 2
    Xp = np.zeros((padded_n, config.d_model))
    Xp[:n] = X
    out = model.model_forward(Xp, config)
    write_matrix_file(args.out, out[:n])
    _emit({"command": "pad_forward", "config": json.loads(config.to_json()),
           "rows_in": n, "rows_out": n, "padded_to": padded_n}, None)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attnlab",
        description="attention mechanisms: verification, reports, benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None,
                       help="root seed (or ATTNLAB_SEED env var; default 7)")
        p.add_argument("--n", type=int, default=32)
        p.add_argument("--d", type=int, default=8)
        p.add_argument("--heads", type=int, default=None)
        p.add_argument("--block-size", type=int, default=None, dest="block_size")
        p.add_argument("--epsilon", type=float, default=None)
        p.add_argument("--kernel", default="1+elu",
                       choices=sorted(kernels.KERNELS))
        p.add_argument("--variant", choices=("t1", "t2"), default=None)
        p.add_argument("--causal", action="store_true")
        p.add_argument("--out", default=None)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("verify", help="run the property suites")
    common(p)
    p.add_argument("--suite", choices=("all",) + tuple(SUITES), default="all")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("adversarial", help="map-Jacobian blow-up instance")
    common(p)
    p.add_argument("--x0sq", type=float, default=1e-6,
                   help="squared norm of the shared feature vector")
    p.add_argument("--sweep", action="store_true")
    p.set_defaults(fn=cmd_adversarial, n=4)
    p.set_defaults(d=4)

    p = sub.add_parser("dilution", help="write locality curves as CSV")
    common(p)
    p.add_argument("--mechanisms", default="vanilla,linear,diag")
    p.add_argument("--input", default=None,
                   help="whitespace-separated matrix file (else seeded random)")
    p.set_defaults(fn=cmd_dilution, n=64, d=16, block_size=8)

    p = sub.add_parser("bench", help="scaling benchmark, CSV output")
    common(p)
    p.add_argument("--lengths", default="1024,2048,3072,4096,5120")
    p.add_argument("--mechanisms", default="vanilla,norm,diag")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--mode", choices=("forward", "forward_backward"),
                   default="forward")
    p.set_defaults(fn=cmd_bench, d=16)

    p = sub.add_parser("stability", help="gradient-stability experiment")
    common(p)
    p.add_argument("--mechanisms", default="vanilla,linear,norm")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.25)
    p.set_defaults(fn=cmd_stability)

    p = sub.add_parser("pad-forward", help="zero-pad, run the model, strip padding")
    common(p)
    p.add_argument("--input", required=True)
    p.set_defaults(fn=cmd_pad_forward)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "pad-forward" and not args.out:
        print("pad-forward requires --out", file=sys.stderr)
        return 2
    try:
        return args.fn(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
