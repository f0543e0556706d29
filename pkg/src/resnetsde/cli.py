"""Command-line experiment runner.

Subcommands map onto the package's experiment surface:

    simulate-resnet    terminal samples of the finite recursion (fc / cnn)
    simulate-sde       Euler samples of the limit dynamics (fc-driven,
                       fc-iid, cnn-iid, jacobian)
    solve-ode          RK4 trajectory of the summary-statistic system
    explosion-time     deterministic blow-up time of the explosive regime
    kernel             analytic kernel evaluation over input pairs
    ntk-empirical      empirical tangent kernel draws of a finite net
    compare-modes      three-route agreement report
    correlation-grid   output correlation heatmap over a scalar-input grid
    function-samples   per-input output quantiles over a scalar-input grid
    regress            kernel classification on an IDX dataset
    train              GD/SGD/Adam training of the finite completed model

Every run writes its outputs plus a ``manifest.json`` echoing the resolved
configuration, seed, versions and wall time into ``--out-dir``.  A config
file of ``key = value`` lines may supply any flag's value; explicit flags
override the file, unknown keys are rejected.  Identical configuration and
seed give byte-identical CSV outputs on one platform.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .activations import get_activation
from .forward import (NetConfig, cnn_terminal_samples, copy_inputs,
                      fc_terminal_samples, feedforward_baseline)
from .idx import data_dir, find_mnist, load_idx
from .inference import (CompletedResNet, Dataset, krr_classify, make_one_hot,
                        train as train_model)
from .kernels import (KernelSpec, empirical_ntk_samples, kernel_gram,
                      ntk_kernel, weak_kernel)
from .moments import (MomentState, explosion_time, fit_explosive_constants,
                      integrate_moments)
from .paramdist import (CnnFullIID, CnnTensorGaussian, FullIID,
                        GeneralGaussian, MatrixGaussian)
from .sde import (SdeSimConfig, simulate_cnn_iid_joint, simulate_fc_driven,
                  simulate_fc_iid_joint, simulate_jacobian_sde)
from .stats import (analytic_correlation_surface, compare_modes,
                    correlation_grid, function_quantiles)

__all__ = ["main"]


def _float_cell(value) -> str:
    return repr(float(value))


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(
                _float_cell(v) if isinstance(v, (float, np.floating)) else str(v)
                for v in row) + "\n")


def _write_manifest(out_dir: Path, subcommand: str, args: argparse.Namespace,
                    started: float, extra: dict | None = None) -> None:
    import scipy
    resolved = {k: v for k, v in vars(args).items()
                if k not in ("func", "config") and not k.startswith("_")}
    manifest = {
        "subcommand": subcommand,
        "config": resolved,
        "seed": resolved.get("seed"),
        "versions": {
            "resnetsde": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": sys.version.split()[0],
        },
        "wall_time_s": time.time() - started,
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, default=str)
        fh.write("\n")


def _load_matrix(path: str) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def parse_scheme_config(path) -> object:
    """Build a parameter scheme from a key=value file; matrices come from CSV."""
    fields = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    variant = fields.pop("variant", None)
    if variant == "full_iid":
        return FullIID(int(fields["dim"]), float(fields.get("sigma_w", 1.0)),
                       float(fields.get("sigma_b", 1.0)))
    if variant == "cnn_full_iid":
        return CnnFullIID(int(fields["channels"]), int(fields["filter_size"]),
                          float(fields.get("sigma_w", 1.0)),
                          float(fields.get("sigma_b", 1.0)))
    if variant == "matrix_gaussian":
        return MatrixGaussian(_load_matrix(fields["weight_drift"]),
                              _load_matrix(fields["bias_drift"]).ravel(),
                              _load_matrix(fields["out_cov"]),
                              _load_matrix(fields["in_cov"]),
                              _load_matrix(fields["bias_cov"]))
    if variant == "general_gaussian":
        return GeneralGaussian(_load_matrix(fields["weight_drift"]),
                               _load_matrix(fields["bias_drift"]).ravel(),
                               _load_matrix(fields["weight_cov"]),
                               _load_matrix(fields["bias_cov"]))
    if variant == "cnn_tensor_gaussian":
        k = int(fields["filter_size"])
        channels = int(fields["channels"])
        drift = _load_matrix(fields["weight_drift"]).reshape(channels, k, k, channels)
        return CnnTensorGaussian(drift, _load_matrix(fields["bias_drift"]).ravel(),
                                 _load_matrix(fields["out_cov"]),
                                 _load_matrix(fields["row_cov"]),
                                 _load_matrix(fields["col_cov"]),
                                 _load_matrix(fields["in_cov"]),
                                 _load_matrix(fields["bias_cov"]))
    raise ValueError(f"unknown scheme variant {variant!r}")


def _limit_threads(n: int | None) -> None:
    if not n:
        return
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(n)
    except ImportError:
        print("threadpoolctl not installed; --threads ignored", file=sys.stderr)


def _parse_z_list(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split(",")])


def _resolve_inputs(args, width: int) -> np.ndarray:
    if args.inputs:
        return np.loadtxt(args.inputs, delimiter=",", ndmin=2)
    return copy_inputs(_parse_z_list(args.z), width)


def _sample_rows(samples: np.ndarray, record_dims: int):
    """(draws, N, D) -> rows draw_id, input_id, dim, value (dims 1-based)."""
    n_draws, n_inputs, width = samples.shape
    dims = min(record_dims, width)
    for b in range(n_draws):
        for i in range(n_inputs):
            for d in range(dims):
                yield b, i, d + 1, samples[b, i, d]


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------

def _cmd_simulate_resnet(args, out_dir: Path) -> None:
    phi = get_activation(args.activation)
    if args.arch == "fc":
        scheme = FullIID(args.width, np.sqrt(args.sigw2), np.sqrt(args.sigb2)) \
            if not args.scheme_config else parse_scheme_config(args.scheme_config)
        x0 = _resolve_inputs(args, args.width)
        if args.baseline:
            samples, exploded = feedforward_baseline(
                args.width, args.depth, args.sigw2, args.sigb2, phi, x0,
                args.draws, args.seed)
        else:
            cfg = NetConfig(args.width, args.depth, scheme, phi,
                            get_activation(args.psi), args.horizon)
            samples, exploded = fc_terminal_samples(cfg, x0, args.draws,
                                                    args.seed, args.method)
    else:
        if args.scheme_config:
            scheme = parse_scheme_config(args.scheme_config)
        else:
            scheme = CnnFullIID(args.width, args.filter_size,
                                np.sqrt(args.sigw2), np.sqrt(args.sigb2))
        u = v = args.image_size
        raw = np.loadtxt(args.inputs, delimiter=",", ndmin=2)
        x0 = raw.reshape(raw.shape[0], u, v, args.width)
        cfg = NetConfig(args.width, args.depth, scheme, phi,
                        get_activation(args.psi), args.horizon)
        samples, exploded = cnn_terminal_samples(cfg, x0, args.draws, args.seed)
        samples = samples.reshape(args.draws, x0.shape[0], -1)
    write_csv(out_dir / args.out, ["draw_id", "input_id", "dim", "value"],
              _sample_rows(samples, args.record_dims))
    print(f"wrote {args.out}; exploded draws: {int(exploded.sum())}")


def _cmd_simulate_sde(args, out_dir: Path) -> None:
    phi = get_activation(args.activation)
    if args.mode == "jacobian":
        path = simulate_jacobian_sde(args.width, args.steps, phi,
                                     np.sqrt(args.sigw2), np.sqrt(args.sigb2),
                                     args.draws, args.seed,
                                     with_inverse=args.with_inverse,
                                     horizon=args.horizon)
        d = args.width
        rows = []
        for b in range(args.draws):
            g = path.jac[b]
            row = [b, float(np.linalg.norm(g)), float(np.trace(g.T @ g) / d)]
            if args.with_inverse:
                row.append(float(np.linalg.norm(g @ path.inv[b] - np.eye(d))
                                 / np.sqrt(d)))
            rows.append(row)
        header = ["draw_id", "g_frobenius", "trace_ratio"]
        if args.with_inverse:
            header.append("inverse_defect")
        write_csv(out_dir / args.out, header, rows)
        print(f"wrote {args.out}; exploded draws: {int(path.exploded.sum())}")
        return
    if args.mode == "cnn-iid":
        scheme = CnnFullIID(args.width, args.filter_size, np.sqrt(args.sigw2),
                            np.sqrt(args.sigb2))
        u = v = args.image_size
        raw = np.loadtxt(args.inputs, delimiter=",", ndmin=2)
        x0 = raw.reshape(raw.shape[0], u, v, args.width)
        cfg = SdeSimConfig(args.steps, scheme, phi, horizon=args.horizon)
        samples, exploded = simulate_cnn_iid_joint(cfg, x0, args.draws, args.seed)
        samples = samples.reshape(args.draws, x0.shape[0], -1)
    else:
        scheme = FullIID(args.width, np.sqrt(args.sigw2), np.sqrt(args.sigb2))
        x0 = _resolve_inputs(args, args.width)
        cfg = SdeSimConfig(args.steps, scheme, phi,
                           get_activation(args.psi), args.horizon)
        sim = simulate_fc_driven if args.mode == "fc-driven" else simulate_fc_iid_joint
        samples, exploded = sim(cfg, x0, args.draws, args.seed)
    write_csv(out_dir / args.out, ["draw_id", "input_id", "dim", "value"],
              _sample_rows(samples, args.record_dims))
    print(f"wrote {args.out}; exploded draws: {int(exploded.sum())}")


def _cmd_solve_ode(args, out_dir: Path) -> None:
    start = MomentState.create([args.m0], [args.q0], [[args.q0]]) \
        if args.lambda0 is None else MomentState.create(
            [args.m0, args.m0_b], [args.q0, args.q0_b],
            [[args.q0, args.lambda0], [args.lambda0, args.q0_b]])
    traj = integrate_moments(start, args.horizon, args.step, args.phi1,
                             args.phi2, args.sigw2, args.sigb2)
    rows = []
    for t, s in zip(traj.times, traj.states):
        lam = s.inner[0, 1] if s.n_inputs > 1 else s.inner[0, 0]
        rows.append([t, s.coord_mean[0], s.sq_norm[0], lam])
    write_csv(out_dir / args.out, ["t", "m", "q", "lambda"], rows)
    status = "exploded" if traj.exploded else "completed"
    print(f"wrote {args.out}; {status} at t={traj.last_valid_time!r}")


def _cmd_explosion_time(args, out_dir: Path) -> None:
    consts = fit_explosive_constants(args.m0, args.q0, args.phi1, args.phi2,
                                     args.sigw2, args.sigb2)
    tstar = explosion_time(consts)
    if tstar is None:
        print(f"no finite explosion time (C={consts.c_value!r}, regime "
              f"{consts.regime})")
    else:
        print(f"T* = {tstar!r} (C={consts.c_value!r}, regime {consts.regime})")


def _make_kernel_spec(args) -> KernelSpec:
    phi = get_activation(args.activation)
    family = args.family.replace("-", "_")
    return KernelSpec(family, phi.d1_at_zero, args.sigw2, args.sigb2,
                      args.horizon,
                      sigma_z2=args.sigz2, sigma_y2=args.sigy2)


def _cmd_kernel(args, out_dir: Path) -> None:
    spec = _make_kernel_spec(args)
    table = np.loadtxt(args.inputs, delimiter=",", ndmin=2)
    rows = []
    if spec.family in ("weak", "ntk"):
        # one initial inner product per row
        for i, inner0 in enumerate(table[:, 0]):
            if spec.family == "weak":
                rows.append([i, weak_kernel(inner0, spec)])
            else:
                rows.append([i, *ntk_kernel(inner0, spec)])
        header = ["pair_id", "value"] if spec.family == "weak" else \
            ["pair_id", "k_w", "k_b", "k_total"]
    else:
        # each row is z and z' concatenated
        half = table.shape[1] // 2
        left, right = table[:, :half], table[:, half:]
        gram = kernel_gram(spec, left, right)
        rows = [[i, float(gram[i, i])] for i in range(table.shape[0])]
        header = ["pair_id", "value"]
    write_csv(out_dir / args.out, header, rows)
    print(f"wrote {args.out}")


def _cmd_ntk_empirical(args, out_dir: Path) -> None:
    phi = get_activation(args.activation)
    x0 = copy_inputs([args.z1, args.z2], args.width)
    samples = empirical_ntk_samples(phi, np.sqrt(args.sigw2), np.sqrt(args.sigb2),
                                    args.width, args.depth, x0, args.draws,
                                    args.seed, horizon=args.horizon)
    write_csv(out_dir / args.out, ["draw_id", "K_W", "K_b"],
              ([b, samples[b, 0], samples[b, 1]] for b in range(args.draws)))
    print(f"wrote {args.out}; mean K_W={samples[:, 0].mean()!r} "
          f"K_b={samples[:, 1].mean()!r}")


def _cmd_compare_modes(args, out_dir: Path) -> None:
    phi = get_activation(args.activation)
    report = compare_modes(_parse_z_list(args.z), args.depth, args.width,
                           args.steps, args.draws, phi, args.sigw2, args.sigb2,
                           args.seed, args.horizon)
    rows = []
    for (a, b), dev in report.mean_dev_se.items():
        for j, v in enumerate(dev):
            rows.append([f"mean_dev_se[{j}]", a, b, v, report.se_limit,
                         int(v <= report.se_limit)])
    for (a, b), dev in report.var_dev_se.items():
        for j, v in enumerate(dev):
            rows.append([f"var_dev_se[{j}]", a, b, v, report.se_limit,
                         int(v <= report.se_limit)])
    for (a, b), v in report.corr_dev.items():
        rows.append(["corr_dev", a, b, v, report.corr_limit,
                     int(v <= report.corr_limit)])
    for (a, b), dev in report.ks.items():
        for j, v in enumerate(dev):
            rows.append([f"ks[{j}]", a, b, v, report.ks_threshold,
                         int(v <= report.ks_threshold)])
    write_csv(out_dir / args.out,
              ["statistic", "mode_a", "mode_b", "value", "threshold", "ok"], rows)
    hist_rows = []
    for name, st in report.stats.items():
        for j in range(st.hist_counts.shape[0]):
            for b in range(st.hist_counts.shape[1]):
                hist_rows.append([name, j, st.hist_edges[j, b],
                                  st.hist_edges[j, b + 1],
                                  int(st.hist_counts[j, b])])
    write_csv(out_dir / "histograms.csv",
              ["mode", "input_id", "bin_lo", "bin_hi", "count"], hist_rows)
    print(f"wrote {args.out}; agree={report.agree}")
    if not report.agree:
        sys.exit(1)


def _grid_samples(args, phi):
    grid = np.linspace(args.grid_min, args.grid_max, args.grid_size)
    x0 = copy_inputs(grid, args.width)
    if args.model == "eoc":
        samples, _ = feedforward_baseline(args.width, args.depth, args.sigw2,
                                          args.sigb2, phi, x0, args.draws,
                                          args.seed)
    else:
        scheme = FullIID(args.width, np.sqrt(args.sigw2), np.sqrt(args.sigb2))
        cfg = NetConfig(args.width, args.depth, scheme, phi, horizon=args.horizon)
        samples, _ = fc_terminal_samples(cfg, x0, args.draws, args.seed)
    return grid, samples[:, :, 0]


def _cmd_correlation_grid(args, out_dir: Path) -> None:
    phi = get_activation(args.activation)
    grid, dim1 = _grid_samples(args, phi)
    rho = correlation_grid(dim1)
    analytic = None
    if args.model == "diffusion" and abs(phi.d2_at_zero) < 1e-14:
        analytic = analytic_correlation_surface(grid, args.sigb2 / args.sigw2)
    rows = []
    for i in range(grid.size):
        for j in range(grid.size):
            row = [grid[i], grid[j], rho[i, j]]
            row.append(analytic[i, j] if analytic is not None else "")
            rows.append(row)
    write_csv(out_dir / args.out, ["z_i", "z_j", "rho_empirical", "rho_analytic"],
              rows)
    print(f"wrote {args.out}")


def _cmd_function_samples(args, out_dir: Path) -> None:
    phi = get_activation(args.activation)
    grid, dim1 = _grid_samples(args, phi)
    quants = function_quantiles(dim1)
    write_csv(out_dir / args.out, ["z", "q05", "q50", "q95"],
              ([grid[i], quants[0, i], quants[1, i], quants[2, i]]
               for i in range(grid.size)))
    print(f"wrote {args.out}")


def _load_split(name: str, flatten: bool = True):
    if name in ("mnist-train", "mnist-test"):
        split = name.split("-")[1]
        found = find_mnist(split)
        if found is None:
            raise FileNotFoundError(
                f"MNIST {split} files not found under {data_dir()} "
                f"(set ${'RESNETSDE_DATA'} or place the IDX files there)")
        return load_idx(*found, flatten=flatten)
    images_path, labels_path = name.split(",")
    return load_idx(images_path, labels_path, flatten=flatten)


def _subsample(rng: np.random.Generator, n_total: int, n_keep: int) -> np.ndarray:
    if n_keep and n_keep < n_total:
        return rng.choice(n_total, size=n_keep, replace=False)
    return np.arange(n_total)


def _cmd_regress(args, out_dir: Path) -> None:
    raw_train = _load_split(args.train)
    raw_test = _load_split(args.test)
    rng = np.random.default_rng(args.seed)
    idx = _subsample(rng, len(raw_train), args.subsample)
    if args.sigz2 is None:
        args.sigz2 = 1.0 / raw_train.images.shape[1]
    train_ds = Dataset(raw_train.images[idx],
                       make_one_hot(raw_train.labels[idx], 10))
    test_ds = Dataset(raw_test.images, make_one_hot(raw_test.labels, 10), "test")
    spec = _make_kernel_spec(args)
    jitter = None if args.jitter == "auto" else float(args.jitter)
    result = krr_classify(spec, train_ds, test_ds, jitter)
    write_csv(out_dir / args.out, ["n_train", "n_test", "jitter", "accuracy"],
              [[len(train_ds), len(test_ds), result["jitter"],
                result["accuracy"]]])
    print(f"test accuracy: {result['accuracy']:.4f} "
          f"(n_train={len(train_ds)}, jitter={result['jitter']!r})")


def _cmd_train(args, out_dir: Path) -> None:
    raw_train = _load_split(args.train)
    raw_test = _load_split(args.test)
    rng = np.random.default_rng(args.seed)
    idx = _subsample(rng, len(raw_train), args.subsample)
    train_ds = Dataset(raw_train.images[idx],
                       make_one_hot(raw_train.labels[idx], 10))
    test_idx = _subsample(rng, len(raw_test), args.test_subsample)
    test_ds = Dataset(raw_test.images[test_idx],
                      make_one_hot(raw_test.labels[test_idx], 10), "test")
    phi = get_activation(args.activation)
    model = CompletedResNet(args.width, args.depth, train_ds.inputs.shape[1], 10,
                            phi, args.sigw2, args.sigb2, args.sigz2, args.sigy2,
                            args.horizon, seed=args.seed)
    history = train_model(model, train_ds, args.opt, args.lr, args.epochs,
                          batch_size=args.batch, seed=args.seed,
                          test_data=test_ds)
    write_csv(out_dir / args.out, ["epoch", "train_loss", "test_accuracy"],
              ([h["epoch"], h["train_loss"], h["test_accuracy"]]
               for h in history))
    print(f"final test accuracy: {history[-1]['test_accuracy']:.4f}")


# ---------------------------------------------------------------------------
# parser assembly
# ---------------------------------------------------------------------------

def _add_common(sp, *, seed=0):
    sp.add_argument("--seed", type=int, default=seed)
    sp.add_argument("--out-dir", default=".")
    sp.add_argument("--config", default=None,
                    help="key = value file supplying defaults; flags override")
    sp.add_argument("--threads", type=int, default=None,
                    help="cap BLAS parallelism (needs threadpoolctl)")


def _add_model_flags(sp, width=500, depth=500):
    sp.add_argument("--activation", default="tanh")
    sp.add_argument("--psi", default="identity")
    sp.add_argument("--width", type=int, default=width)
    sp.add_argument("--depth", type=int, default=depth)
    sp.add_argument("--sigw2", type=float, default=1.0)
    sp.add_argument("--sigb2", type=float, default=1.0)
    sp.add_argument("--horizon", type=float, default=1.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="resnetsde",
        description="Residual networks, their depth-limit dynamics, and the "
                    "wide-limit kernels, runnable at desk scale.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    sp = sub.add_parser("simulate-resnet", help="finite recursion samples")
    _add_common(sp)
    _add_model_flags(sp)
    sp.add_argument("--arch", choices=["fc", "cnn"], default="fc")
    sp.add_argument("--draws", type=int, default=10000)
    sp.add_argument("--inputs", default=None, help="CSV of input rows")
    sp.add_argument("--z", default="0,1",
                    help="comma list of scalars copied across dimensions")
    sp.add_argument("--method", choices=["auto", "projected", "explicit"],
                    default="auto")
    sp.add_argument("--baseline", action="store_true",
                    help="plain feedforward net instead of the residual one")
    sp.add_argument("--scheme-config", default=None)
    sp.add_argument("--filter-size", type=int, default=3)
    sp.add_argument("--image-size", type=int, default=1)
    sp.add_argument("--record-dims", type=int, default=1)
    sp.add_argument("--out", default="samples.csv")
    sp.set_defaults(func=_cmd_simulate_resnet)

    sp = sub.add_parser("simulate-sde", help="Euler samples of the limits")
    _add_common(sp)
    _add_model_flags(sp)
    sp.add_argument("--mode", choices=["fc-driven", "fc-iid", "cnn-iid",
                                       "jacobian"], default="fc-iid")
    sp.add_argument("--steps", type=int, default=500)
    sp.add_argument("--draws", type=int, default=10000)
    sp.add_argument("--inputs", default=None)
    sp.add_argument("--z", default="0,1")
    sp.add_argument("--with-inverse", action="store_true")
    sp.add_argument("--filter-size", type=int, default=3)
    sp.add_argument("--image-size", type=int, default=1)
    sp.add_argument("--record-dims", type=int, default=1)
    sp.add_argument("--out", default="samples.csv")
    sp.set_defaults(func=_cmd_simulate_sde)

    sp = sub.add_parser("solve-ode", help="summary-statistic trajectory")
    _add_common(sp)
    sp.add_argument("--phi1", type=float, default=1.0)
    sp.add_argument("--phi2", type=float, default=0.0)
    sp.add_argument("--sigw2", type=float, default=1.0)
    sp.add_argument("--sigb2", type=float, default=1.0)
    sp.add_argument("--m0", type=float, default=0.0)
    sp.add_argument("--q0", type=float, default=1.0)
    sp.add_argument("--m0-b", type=float, default=0.0)
    sp.add_argument("--q0-b", type=float, default=1.0)
    sp.add_argument("--lambda0", type=float, default=None)
    sp.add_argument("--horizon", "--T", dest="horizon", type=float, default=1.0)
    sp.add_argument("--step", type=float, default=1e-3)
    sp.add_argument("--out", default="trajectory.csv")
    sp.set_defaults(func=_cmd_solve_ode)

    sp = sub.add_parser("explosion-time", help="deterministic blow-up time")
    _add_common(sp)
    sp.add_argument("--phi1", type=float, default=0.5)
    sp.add_argument("--phi2", type=float, default=0.5)
    sp.add_argument("--sigw2", type=float, default=1.0)
    sp.add_argument("--sigb2", type=float, default=1.0)
    sp.add_argument("--m0", type=float, default=1.0)
    sp.add_argument("--q0", type=float, default=1.0)
    sp.set_defaults(func=_cmd_explosion_time)

    sp = sub.add_parser("kernel", help="analytic kernel evaluation")
    sp.add_argument("action", choices=["eval"])
    _add_common(sp)
    sp.add_argument("--family", default="ntk",
                    choices=["weak", "ntk", "completed-weak", "completed-ntk"])
    sp.add_argument("--activation", default="tanh")
    sp.add_argument("--sigw2", type=float, default=1.0)
    sp.add_argument("--sigb2", type=float, default=1.0)
    sp.add_argument("--sigz2", type=float, default=None)
    sp.add_argument("--sigy2", type=float, default=None)
    sp.add_argument("--horizon", type=float, default=1.0)
    sp.add_argument("--inputs", required=True)
    sp.add_argument("--out", default="k.csv")
    sp.set_defaults(func=_cmd_kernel)

    sp = sub.add_parser("ntk-empirical", help="empirical tangent kernel draws")
    _add_common(sp)
    _add_model_flags(sp, width=256, depth=256)
    sp.add_argument("--draws", type=int, default=100)
    sp.add_argument("--z1", type=float, default=1.0)
    sp.add_argument("--z2", type=float, default=2.0)
    sp.add_argument("--out", default="k_emp.csv")
    sp.set_defaults(func=_cmd_ntk_empirical)

    sp = sub.add_parser("compare-modes", help="three-route agreement report")
    _add_common(sp)
    _add_model_flags(sp)
    sp.add_argument("--steps", type=int, default=500)
    sp.add_argument("--draws", type=int, default=10000)
    sp.add_argument("--z", default="0,1")
    sp.add_argument("--out", default="agreement.csv")
    sp.set_defaults(func=_cmd_compare_modes)

    for name, handler in (("correlation-grid", _cmd_correlation_grid),
                          ("function-samples", _cmd_function_samples)):
        sp = sub.add_parser(name)
        _add_common(sp)
        _add_model_flags(sp)
        sp.add_argument("--model", choices=["diffusion", "eoc"],
                        default="diffusion")
        sp.add_argument("--grid-min", type=float, default=-2.0)
        sp.add_argument("--grid-max", type=float, default=2.0)
        sp.add_argument("--grid-size", type=int, default=20)
        sp.add_argument("--draws", type=int, default=2000)
        sp.add_argument("--out", default=f"{name.replace('-', '_')}.csv")
        sp.set_defaults(func=handler)

    sp = sub.add_parser("regress", help="kernel classification on IDX data")
    _add_common(sp)
    sp.add_argument("--kernel", dest="family", default="completed-ntk",
                    choices=["completed-weak", "completed-ntk"])
    sp.add_argument("--activation", default="tanh")
    sp.add_argument("--train", default="mnist-train")
    sp.add_argument("--test", default="mnist-test")
    sp.add_argument("--subsample", type=int, default=20000)
    sp.add_argument("--jitter", default="auto")
    sp.add_argument("--sigw2", type=float, default=1.0)
    sp.add_argument("--sigb2", type=float, default=0.01)
    sp.add_argument("--sigz2", type=float, default=None)
    sp.add_argument("--sigy2", type=float, default=1.0)
    sp.add_argument("--horizon", type=float, default=1.0)
    sp.add_argument("--out", default="regress.csv")
    sp.set_defaults(func=_cmd_regress)

    sp = sub.add_parser("train", help="finite completed-model training")
    _add_common(sp)
    sp.add_argument("--opt", choices=["gd", "sgd", "adam"], default="gd")
    sp.add_argument("--lr", type=float, required=True)
    sp.add_argument("--epochs", type=int, default=120)
    sp.add_argument("--batch", type=int, default=None)
    sp.add_argument("--activation", default="tanh")
    sp.add_argument("--width", type=int, default=32)
    sp.add_argument("--depth", type=int, default=32)
    sp.add_argument("--sigw2", type=float, default=1.0)
    sp.add_argument("--sigb2", type=float, default=0.01)
    sp.add_argument("--sigz2", type=float, default=None)
    sp.add_argument("--sigy2", type=float, default=1.0)
    sp.add_argument("--horizon", type=float, default=1.0)
    sp.add_argument("--train", default="mnist-train")
    sp.add_argument("--test", default="mnist-test")
    sp.add_argument("--subsample", type=int, default=2000)
    sp.add_argument("--test-subsample", type=int, default=None)
    sp.add_argument("--out", default="metrics.csv")
    sp.set_defaults(func=_cmd_train)

    return parser


def _apply_config_file(parser: argparse.ArgumentParser,
                       args: argparse.Namespace, argv: list[str]) -> None:
    """Fill flags from a key = value file; explicit flags win, unknown keys fail."""
    if not getattr(args, "config", None):
        return
    entries = {}
    for line in Path(args.config).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise SystemExit(f"config line not of the form key = value: {line!r}")
        entries[key.strip().replace("-", "_")] = value.strip()
    valid = set(vars(args))
    explicit = {token.split("=", 1)[0].lstrip("-").replace("-", "_")
                for token in argv if token.startswith("--")}
    for key, raw in entries.items():
        if key not in valid:
            parser.error(f"unknown config key {key!r}")
        if key in explicit:
            continue
        current = getattr(args, key)
        if isinstance(current, bool):
            value = raw.lower() in ("1", "true", "yes")
        elif isinstance(current, int):
            value = int(raw)
        elif isinstance(current, float):
            value = float(raw)
        else:
            value = raw
        setattr(args, key, value)


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_config_file(parser, args, argv)
    _limit_threads(getattr(args, "threads", None))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.time()
    try:
        args.func(args, out_dir)
    except SystemExit:
        raise
    except (ValueError, FileNotFoundError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    _write_manifest(out_dir, args.subcommand, args, started)
    return 0


if __name__ == "__main__":
    sys.exit(main())
