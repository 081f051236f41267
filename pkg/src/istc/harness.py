"""Experiment runners behind the command line.

Each runner takes a resolved settings dict (see ``DEFAULTS``), writes its
artifacts into ``out`` and returns ``(exit_code, summary)``.  Every output
directory receives a ``manifest.txt`` with the experiment kind, tool version
and resolved settings.  Outputs depend only on the settings, so two runs
with the same seed produce byte-identical files.
"""

import math
from pathlib import Path

import numpy as np

from . import __version__
from .certify import EXIT_UNCERTIFIED, EXIT_VERIFIED, EXIT_VIOLATED, certified_schedule, certify, pick_gamma, verify_trace
from .core import cross_coherence, lagrangian, normalize_columns, relative_mse
from .errors import CertificationUnreachable, DivergedLoss, NoKKTPoint
from .io import (
    fmt,
    read_keyvalue,
    read_matrix,
    read_pnm,
    read_tensor,
    write_keyvalue,
    write_matrix,
    write_tensor,
)
from .oracle import ProblemSpec, adversarial_auxiliary, exact_positive_lasso, generate_planted, kkt_check
from .prox import SolverConfig, make_schedule, solve_fista, solve_generalized_istc, solve_ista, solve_istc
from .scattering import (
    ScatteringConfig,
    apply_reduction,
    build_morlet_bank,
    channel_count,
    channel_descriptors,
    fit_reduction,
    format_descriptor,
    scatter,
)
from .unrolled import ToyClassifier, TrainConfig, UnrolledParams, make_toy_dataset, train_toy

EXIT_DIVERGED = 3

_PROBLEM = {
    "signal_dim": 32,
    "atom_count": 8,
    "support_size": 2,
    "noise_level": 0.0,
    "coef_low": 1.0,
    "coef_high": 2.0,
    "certified": True,
    "coherence_target": 0.5,
    "max_retries": 10000,
}

DEFAULTS = {
    "benchmark": {
        "seed": 0,
        "n_instances": 50,
        **_PROBLEM,
        "lambda_ratio": 1e-5,
        "n_iterations": 12,
        "report_iteration": 12,
        "adversarial": False,
        "adversarial_s_mu": 10.0,
        "max_support_extra": 3,
    },
    "certify": {
        "seed": 0,
        "n_instances": 100,
        **_PROBLEM,
        "signal_dim": 64,
        "noise_level": 0.02,
        "coherence_target": 0.4,
        "ensemble": "certified",
        "gamma_fraction": 0.25,
        "gamma": 1.5,
        "max_layers": 12,
        "adversarial_s_mu": 10.0,
    },
    "scatter": {
        "seed": 0,
        "J": 3,
        "n_angles": 4,
        "n_phases": 4,
        "n_colors": 1,
        "height": 32,
        "width": 32,
        "inputs": "",
        "n_random": 0,
        "reduce_dim": 0,
        "manifest_only": False,
    },
    "train-toy": {
        "seed": 0,
        "signal_dim": 16,
        "atom_count": 12,
        "support_size": 2,
        "n_train": 500,
        "n_val": 200,
        "noise": 0.05,
        "epochs": 50,
        "lr": 0.05,
        "batch_size": 10,
        "lambda_star": 0.2,
        "lambda_lr_scale": 0.1,
        "n_layers": 12,
        "tied": True,
        "shuffle_labels": False,
        "resume": "",
    },
    "oracle-check": {
        "seed": 0,
        "n_instances": 50,
        **_PROBLEM,
        "atom_count": 12,
        "certified": False,
        "lambda_ratio": 1e-5,
        "n_layers": 200,
        "tolerance": 1e-6,
        "kkt_tol": 1e-9,
        "max_support_extra": 3,
    },
}


def _coerce(value, default):
    if isinstance(value, str) and not isinstance(default, str):
        if isinstance(default, bool):
            v = value.strip().lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    return value


def resolve_config(kind, file_values=None, overrides=None):
    """Defaults, then config-file values, then overrides; unknown keys are errors."""
    base = DEFAULTS[kind]
    out = dict(base)
    for source in (file_values or {}, overrides or {}):
        for k, v in source.items():
            if k not in base:
                raise KeyError(f"unknown setting {k!r} for {kind}; known: {sorted(base)}")
            out[k] = _coerce(v, base[k])
    return out


def load_config(kind, path=None, overrides=None):
    return resolve_config(kind, read_keyvalue(path) if path else None, overrides)


def write_manifest(out, kind, cfg):
    items = [("experiment", kind), ("tool", "istc"), ("version", __version__)]
    for k in sorted(cfg):
        v = cfg[k]
        if isinstance(v, bool):
            v = str(v).lower()
        items.append((k, fmt(v) if isinstance(v, float) else v))
    write_keyvalue(Path(out) / "manifest.txt", items)


def _spec(cfg, seed):
    return ProblemSpec(
        cfg["signal_dim"],
        cfg["atom_count"],
        cfg["support_size"],
        cfg["noise_level"],
        (cfg["coef_low"], cfg["coef_high"]),
        seed,
        cfg["certified"],
        cfg["max_retries"],
        cfg["coherence_target"],
    )


def _instance_seed(cfg, i):
    # distinct, reproducible stream per instance
    return int(np.random.SeedSequence([cfg["seed"], i]).generate_state(1)[0])


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        f.write(",".join(header) + "\n")
        for r in rows:
            f.write(",".join(fmt(x) if isinstance(x, float) else str(x) for x in r) + "\n")


# --------------------------------------------------------------------- benchmark


def benchmark_instance(cfg, i):
    """Instance ``i`` of a benchmark ensemble: ``(instance, lambda_star, oracle_code)``."""
    inst = generate_planted(_spec(cfg, _instance_seed(cfg, i)))
    D, beta = inst.dictionary, inst.signal
    lam = cfg["lambda_ratio"] * float(np.max(np.abs(D.T @ beta)))
    max_support = min(D.shape[1], inst.s + cfg["max_support_extra"])
    return inst, lam, exact_positive_lasso(D, beta, lam, max_support)


def run_benchmark(cfg, out):
    out = Path(out)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    write_manifest(out, "benchmark", cfg)
    n_iter, k_rep = cfg["n_iterations"], cfg["report_iteration"]
    solvers = ["istc", "fista", "ista"] + (["gistc_adversarial"] if cfg["adversarial"] else [])
    rows = []
    for i in range(cfg["n_instances"]):
        inst, lam, oracle = benchmark_instance(cfg, i)
        D, beta = inst.dictionary, inst.signal
        lmax = float(np.max(np.abs(D.T @ beta)))
        traces = {}
        sc = SolverConfig(n_iterations=n_iter)
        traces["ista"] = solve_ista(D, beta, lam, sc, oracle.values)[1]
        traces["fista"] = solve_fista(D, beta, lam, sc, oracle.values)[1]
        if n_iter >= 1:
            sched = make_schedule(lmax, lam, n_iter)
            traces["istc"] = solve_istc(D, beta, sched, oracle.values)[1]
        else:
            traces["istc"] = solve_ista(D, beta, lam, sc, oracle.values)[1]
        if cfg["adversarial"]:
            rng = np.random.default_rng([cfg["seed"], i, 1])
            W = adversarial_auxiliary(D, inst.s, cfg["adversarial_s_mu"], rng)
            wmax = float(np.max(np.abs(W.T @ beta)))
            if n_iter >= 1:
                traces["gistc_adversarial"] = solve_generalized_istc(
                    D, W, beta, make_schedule(wmax, lam, n_iter), oracle.values
                )[1]
            else:
                traces["gistc_adversarial"] = traces["istc"]
        oracle_L = lagrangian(D, beta, oracle.values, lam)
        for name in solvers:
            tr = traces[name]
            tr.to_csv(out / "traces" / f"instance_{i:03d}_{name}.csv")
            k = min(k_rep, len(tr) - 1)
            rows.append(
                (
                    i,
                    name,
                    tr[-1].lagrangian,
                    oracle_L,
                    tr[k].linf_to_ref,
                    relative_mse(oracle.values, tr.code(k).values),
                    tr[-1].linf_to_ref,
                    relative_mse(oracle.values, tr.code(len(tr) - 1).values),
                )
            )
    header = [
        "instance", "solver", "final_lagrangian", "oracle_lagrangian",
        "linf_at_report", "rmse_at_report", "linf_final", "rmse_final",
    ]
    _write_csv(out / "summary.csv", header, rows)
    stats = {}
    for name in solvers:
        sub = [r for r in rows if r[1] == name]
        stats[name] = {
            "median_rmse_at_report": float(np.median([r[5] for r in sub])),
            "median_final_lagrangian": float(np.median([r[2] for r in sub])),
            "median_lagrangian_excess": float(np.median([r[2] / r[3] for r in sub])),
        }
    items = []
    for name in solvers:
        for k, v in stats[name].items():
            items.append((f"{name}.{k}", v))
    write_keyvalue(out / "summary.txt", items)
    return 0, {"rows": rows, "stats": stats}


# ----------------------------------------------------------------------- certify


def certify_instance(cfg, i):
    """Build, certify and solve instance ``i``; returns a dict of results."""
    seed = _instance_seed(cfg, i)
    ensemble = cfg["ensemble"]
    spec_cfg = dict(cfg)
    spec_cfg["certified"] = ensemble == "certified"
    inst = generate_planted(_spec(spec_cfg, seed))
    D, beta = inst.dictionary, inst.signal
    if ensemble == "adversarial":
        W = adversarial_auxiliary(D, inst.s, cfg["adversarial_s_mu"], np.random.default_rng([cfg["seed"], i, 1]))
        inst = inst.with_auxiliary(W)
    W = inst.auxiliary
    lmax = float(np.max(np.abs(W.T @ beta)))
    mu = cross_coherence(W, D)
    gamma = pick_gamma(mu, inst.s, cfg["gamma_fraction"]) if ensemble == "certified" else None
    if gamma is None:
        gamma = cfg["gamma"]
    cert = certify(inst, gamma, lmax, cfg["max_layers"])
    sched = certified_schedule(cert, cfg["max_layers"])
    if sched is None:
        n = cfg["max_layers"]
        sched = make_schedule(lmax, lmax * gamma ** (-n), n)
    _, trace = solve_generalized_istc(D, W, beta, sched, inst.planted_code.values)
    report = verify_trace(inst, trace, cert)
    return {"instance": inst, "certificate": cert, "schedule": sched, "trace": trace, "report": report}


def run_certify(cfg, out):
    out = Path(out)
    (out / "certificates").mkdir(parents=True, exist_ok=True)
    write_manifest(out, "certify", cfg)
    rows = []
    n_cert = n_cert_fail = n_uncert = n_uncert_pass = 0
    for i in range(cfg["n_instances"]):
        try:
            r = certify_instance(cfg, i)
        except CertificationUnreachable as e:
            rows.append((i, "unreachable", "", "", "", "", "", str(e).replace(",", ";")))
            n_uncert += 1
            continue
        cert, rep = r["certificate"], r["report"]
        guaranteed = cert.certified and rep.guaranteed
        (out / "certificates" / f"instance_{i:03d}.txt").write_text(
            cert.report() + f"n_layers = {r['schedule'].n_layers}\n" + rep.report()
        )
        if guaranteed:
            n_cert += 1
            n_cert_fail += not rep.passed
        else:
            n_uncert += 1
            n_uncert_pass += rep.passed
        fv = "" if rep.first_violation is None else rep.first_violation
        rows.append(
            (i, "certified" if guaranteed else "uncertified", cert.s * cert.mu_tilde, cert.gamma,
             r["schedule"].n_layers, str(rep.passed).lower(), fv, "")
        )
    _write_csv(
        out / "summary.csv",
        ["instance", "status", "s_mu_tilde", "gamma", "n_layers", "passed", "first_violation", "note"],
        rows,
    )
    if n_cert_fail:
        code = EXIT_VIOLATED
    elif n_uncert:
        code = EXIT_UNCERTIFIED
    else:
        code = EXIT_VERIFIED
    summary = {
        "certified": n_cert,
        "certified_violated": n_cert_fail,
        "uncertified": n_uncert,
        "uncertified_empirical_pass": n_uncert_pass,
        "exit_code": code,
    }
    write_keyvalue(out / "summary.txt", list(summary.items()))
    return code, summary


# ----------------------------------------------------------------------- scatter


def _load_image(path):
    p = Path(path)
    if p.suffix.lower() in (".pgm", ".ppm", ".pnm"):
        return read_pnm(p)
    return read_tensor(p)


def natural_image(rng, shape, exponent=1.0):
    """Random image with a ``1/|k|**exponent`` amplitude spectrum, scaled to ``[0, 1]``."""
    h, w = shape
    k1 = np.fft.fftfreq(h)[:, None]
    k2 = np.fft.fftfreq(w)[None, :]
    k = np.sqrt(k1**2 + k2**2)
    k[0, 0] = 1.0
    spec = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / k**exponent
    spec[0, 0] = 0.0
    x = np.real(np.fft.ifft2(spec))
    return (x - x.min()) / (x.max() - x.min())


def run_scatter(cfg, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, "scatter", cfg)
    sc = ScatteringConfig(cfg["J"], cfg["n_angles"], cfg["n_phases"], cfg["n_colors"], (cfg["height"], cfg["width"]))
    desc = channel_descriptors(sc)
    (out / "channels.txt").write_text("".join(f"{i} {format_descriptor(d)}\n" for i, d in enumerate(desc)))
    summary = {"channels": channel_count(sc), "output_size": sc.output_size, "images": 0}
    if cfg["manifest_only"]:
        return 0, summary

    images = [_load_image(p) for p in cfg["inputs"].split(",") if p.strip()]
    rng = np.random.default_rng(cfg["seed"])
    for _ in range(cfg["n_random"]):
        img = np.stack([natural_image(rng, sc.image_size) for _ in range(sc.n_colors)])
        images.append(img[0] if sc.n_colors == 1 else img)
    bank = build_morlet_bank(sc)
    outputs = []
    for i, img in enumerate(images):
        s = scatter(img, bank, sc)
        write_tensor(out / f"scatter_{i:03d}.tensor", s.tensor)
        outputs.append(s)
    summary["images"] = len(outputs)
    if cfg["reduce_dim"] > 0 and outputs:
        op = fit_reduction(outputs, cfg["reduce_dim"])
        write_matrix(out / "reduction.bin", op.projection.T)
        write_matrix(out / "reduction_mean.bin", op.mean)
        for i, s in enumerate(outputs):
            write_tensor(out / f"reduced_{i:03d}.tensor", apply_reduction(op, s))
        gram = op.projection @ op.projection.T
        summary["orthonormal_error"] = float(np.max(np.abs(gram - np.eye(op.target_dim))))
        summary["explained_variance"] = float(op.explained_variance.sum())
    write_keyvalue(
        out / "summary.txt",
        [(k, v if not isinstance(v, tuple) else "x".join(map(str, v))) for k, v in summary.items()],
    )
    return 0, summary


# --------------------------------------------------------------------- train-toy


def save_checkpoint(directory, params, classifier, epoch, seed):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_matrix(d / "D.bin", params.D)
    if not params.tied:
        write_matrix(d / "W.bin", params.W)
    write_matrix(d / "classifier_weights.bin", classifier.weights)
    write_matrix(d / "classifier_bias.bin", classifier.bias)
    write_keyvalue(
        d / "meta.txt",
        [
            ("lambda_star", params.lambda_star),
            ("log_lambda_star", float(params.log_lambda_star)),
            ("n_layers", params.n_layers),
            ("tied", int(params.tied)),
            ("epoch", epoch),
            ("seed", seed),
        ],
    )


def load_checkpoint(directory):
    d = Path(directory)
    meta = read_keyvalue(d / "meta.txt")
    tied = bool(int(meta["tied"]))
    params = UnrolledParams(
        read_matrix(d / "D.bin"),
        None if tied else read_matrix(d / "W.bin"),
        float(meta["log_lambda_star"]),
        int(meta["n_layers"]),
    )
    clf = ToyClassifier(read_matrix(d / "classifier_weights.bin"), read_matrix(d / "classifier_bias.bin")[:, 0])
    return params, clf, int(meta["epoch"]), int(meta["seed"])


def toy_dataset(cfg):
    ds = make_toy_dataset(
        cfg["signal_dim"], cfg["atom_count"], cfg["support_size"], cfg["n_train"], cfg["n_val"],
        cfg["noise"], cfg["seed"],
    )
    return ds.shuffled_labels(cfg["seed"] + 1) if cfg["shuffle_labels"] else ds


def initial_model(cfg, ds):
    rng = np.random.default_rng([cfg["seed"], 7])
    D = normalize_columns(rng.standard_normal((cfg["signal_dim"], cfg["atom_count"])))
    params = UnrolledParams(D, None if cfg["tied"] else D.copy(), math.log(cfg["lambda_star"]), cfg["n_layers"])
    return params, ToyClassifier.zeros(ds.n_classes, cfg["atom_count"])


METRICS_HEADER = ["epoch", "train_loss", "val_acc", "mean_sparsity", "train_acc", "norm_error"]


def run_train_toy(cfg, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, "train-toy", cfg)
    ds = toy_dataset(cfg)
    if cfg["resume"]:
        params, clf, start, _ = load_checkpoint(cfg["resume"])
    else:
        params, clf = initial_model(cfg, ds)
        start = 0
    ckpt = out / "checkpoint"
    save_checkpoint(ckpt, params, clf, start, cfg["seed"])
    tc = TrainConfig(
        epochs=cfg["epochs"], lr=cfg["lr"], batch_size=cfg["batch_size"], seed=cfg["seed"],
        lambda_lr_scale=cfg["lambda_lr_scale"], start_epoch=start,
    )
    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w") as f:
        f.write(",".join(METRICS_HEADER) + "\n")

    def on_epoch(m, p, c):
        with open(metrics_path, "a") as f:
            f.write(",".join([str(m.epoch), fmt(m.train_loss), fmt(m.val_acc), fmt(m.mean_sparsity),
                              fmt(m.train_acc), fmt(m.norm_error)]) + "\n")
        save_checkpoint(ckpt, p, c, m.epoch, cfg["seed"])

    try:
        result = train_toy(ds, params, clf, tc, on_epoch=on_epoch)
    except DivergedLoss as e:
        return EXIT_DIVERGED, {"diverged_epoch": e.epoch, "checkpoint": str(ckpt)}
    last = result.metrics[-1] if result.metrics else None
    summary = {"epochs_run": len(result.metrics), "final_epoch": start + len(result.metrics)}
    if last is not None:
        summary.update(val_acc=float(last.val_acc), mean_sparsity=float(last.mean_sparsity),
                       lambda_star=result.params.lambda_star)
    return 0, summary


# ------------------------------------------------------------------ oracle-check


def run_oracle_check(cfg, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, "oracle-check", cfg)
    rows = []
    ok = True
    for i in range(cfg["n_instances"]):
        inst = generate_planted(_spec(cfg, _instance_seed(cfg, i)))
        D, beta = inst.dictionary, inst.signal
        lmax = float(np.max(np.abs(D.T @ beta)))
        lam = cfg["lambda_ratio"] * lmax
        try:
            oracle = exact_positive_lasso(D, beta, lam, min(D.shape[1], inst.s + cfg["max_support_extra"]))
        except NoKKTPoint:
            rows.append((i, lam, "", "false", "false"))
            ok = False
            continue
        code, _ = solve_istc(D, beta, make_schedule(lmax, lam, cfg["n_layers"]), record_trace=False)
        dist = float(np.max(np.abs(code.values - oracle.values)))
        kkt = kkt_check(D, beta, oracle, lam, cfg["kkt_tol"])
        passed = dist <= cfg["tolerance"] and kkt
        ok &= passed
        rows.append((i, lam, dist, str(kkt).lower(), str(passed).lower()))
    _write_csv(out / "oracle_check.csv", ["instance", "lambda_star", "linf_istc_oracle", "kkt_ok", "passed"], rows)
    return (0 if ok else EXIT_VIOLATED), {"rows": rows, "all_passed": ok}


RUNNERS = {
    "benchmark": run_benchmark,
    "certify": run_certify,
    "scatter": run_scatter,
    "train-toy": run_train_toy,
    "oracle-check": run_oracle_check,
}
