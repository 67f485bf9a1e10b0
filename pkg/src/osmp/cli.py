"""Command-line entry point.

Exit codes: 0 success (including evaluations with flagged divergent
rollouts), 1 usage or configuration error, 2 divergence or non-finite abort.
Settings come from built-in defaults, then ``--config`` (JSON), then flags;
the merged result is written to ``<output stem>.run.json``.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import math
import sys
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np
import torch

from . import __version__
from .data import DatasetError, load_dataset, normalize, save_dataset, synth_oracle
from .encoder import DTYPE, EncoderConfig, NonFiniteError
from .evaluation import evaluate, rollout
from .io import ModelFormatError, load_policy, save_policy, shaping_from_header
from .latent import HopfParams
from .policy import ShapingState, SingularJacobianError
from .sync import SyncGroup, simulate_group
from .training import LossWeights, NonFiniteLossError, TrainConfig, config_to_dict, from_dict, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- settings ---------------------------------------------------------------------

def _load_config(path):
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    return cfg


def _merge(defaults: dict, config: dict, flags: dict) -> dict:
    unknown = set(config) - set(defaults)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    merged = dict(defaults)
    merged.update(config)
    merged.update({k: v for k, v in flags.items() if v is not None and k in defaults})
    return merged


def _manifest_path(out) -> Path:
    out = Path(out)
    if out.suffix == "" and (out.is_dir() or not out.exists()):
        return out / "run.json" if out.is_dir() else out.with_name(out.name + ".run.json")
    return out.with_name(out.stem + ".run.json")


def _write_manifest(command, args, settings, inputs, outputs, extra=None):
    manifest = {
        "command": command,
        "version": __version__,
        "config": args.config,
        "seed": settings.get("seed"),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "settings": settings,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    if extra:
        manifest.update(extra)
    path = _manifest_path(args.out)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _json_arg(text, what):
    if text is None:
        return None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} is not valid JSON: {exc}") from exc


def _load_policy(path):
    try:
        return load_policy(path, with_header=True)
    except ModelFormatError as exc:
        raise UsageError(str(exc)) from exc


def _load_data(path):
    try:
        return load_dataset(path)
    except DatasetError as exc:
        raise UsageError(str(exc)) from exc


# -- commands ---------------------------------------------------------------------

def cmd_oracle_gen(args):
    defaults = {"kind": None, "params": {}, "samples": 500, "period": None, "seed": 0,
                "normalize": True, "velocity": True}
    flags = {"kind": args.kind, "params": _json_arg(args.params, "--params"), "samples": args.samples,
             "period": args.period, "seed": args.seed,
             "normalize": False if args.raw else None,
             "velocity": False if args.no_velocity else None}
    s = _merge(defaults, _load_config(args.config), flags)
    if s["kind"] is None:
        raise UsageError("oracle kind is required")
    try:
        ds = synth_oracle(s["kind"], s["params"], s["samples"], s["period"], s["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if s["normalize"]:
        ds, _ = normalize(ds)
    save_dataset(ds, args.out, write_velocity=s["velocity"])
    _write_manifest("oracle-gen", args, s, [], [args.out])
    print(f"wrote {len(ds)} samples to {args.out}")


TRAIN_DEFAULTS = {"dataset": None, "encoder": {}, "hopf": {}, "weights": {}, "train": {},
                  "seed": None, "epochs": None, "lr": None, "resume": None}


def _train_setup(s, dataset):
    try:
        enc = dict(s["encoder"])
        enc.setdefault("n", dataset.n)
        enc.setdefault("conditioning", dataset.z is not None)
        encoder_cfg = EncoderConfig(**enc)
        hopf = HopfParams(**s["hopf"]) if s["hopf"] else None
        weights = from_dict(LossWeights, s["weights"])
        tr = dict(s["train"])
        for key in ("seed", "epochs", "lr"):
            if s[key] is not None:
                tr[key] = s[key]
        cfg = from_dict(TrainConfig, tr)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from exc
    if encoder_cfg.n != dataset.n:
        raise UsageError(f"encoder dimension {encoder_cfg.n} does not match dataset ({dataset.n})")
    return encoder_cfg, hopf, weights, cfg


def cmd_train(args):
    flags = {"dataset": args.dataset, "seed": args.seed, "epochs": args.epochs, "lr": args.lr,
             "resume": args.resume}
    config = _load_config(args.config)
    if config.get("dataset") and args.dataset is None:
        # dataset paths inside a config file are relative to that file
        config["dataset"] = str(Path(args.config).parent / config["dataset"])
    s = _merge(TRAIN_DEFAULTS, config, flags)
    if s["dataset"] is None:
        raise UsageError("a dataset is required (--dataset or config 'dataset')")
    ds = _load_data(s["dataset"])
    encoder_cfg, hopf, weights, cfg = _train_setup(s, ds)
    policy = None
    if s["resume"]:
        policy, _ = _load_policy(s["resume"])
        if policy.n != ds.n:
            raise UsageError("resumed policy dimension does not match the dataset")
    try:
        policy, report = train(ds, encoder_cfg, hopf, weights, cfg, policy=policy)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    out = Path(args.out)
    save_policy(policy, out, extra={"dataset": str(s["dataset"]), "checksum": report.checksum})
    log = out.with_name(out.stem + ".log.csv")
    report.to_csv(log)
    s.update({"encoder": encoder_cfg.to_dict(), "weights": config_to_dict(weights),
              "train": config_to_dict(cfg), "seed": cfg.seed})
    _write_manifest("train", args, s, [s["dataset"]] + ([s["resume"]] if s["resume"] else []),
                    [out, log], {"checksum": report.checksum, "epochs_trained": policy.epochs_trained})
    print(f"trained to epoch {policy.epochs_trained}; final loss {report.final_loss:.6g}; "
          f"wrote {out}")
    return EXIT_OK


def cmd_eval(args):
    defaults = {"policy": None, "dataset": None, "seeds": [0, 1, 2], "n_inits": 25}
    flags = {"policy": args.policy, "dataset": args.dataset, "seeds": args.seeds,
             "n_inits": args.n_inits}
    s = _merge(defaults, _load_config(args.config), flags)
    if s["policy"] is None or s["dataset"] is None:
        raise UsageError("--policy and --dataset are required")
    policy, _ = _load_policy(s["policy"])
    ds = _load_data(s["dataset"])
    if ds.n != policy.n:
        raise UsageError("policy and dataset dimensions differ")
    report = evaluate(policy, ds, s["seeds"], s["n_inits"])
    report.to_csv(args.out)
    _write_manifest("eval", args, s, [s["policy"], s["dataset"]], [args.out],
                    {"flagged": report.flagged})
    print(report.table())
    return EXIT_OK


def _shaping(base: ShapingState, args) -> ShapingState:
    kw = {}
    for name in ("s_f", "s_omega", "k_conv", "r_sm", "sigma_sm"):
        v = getattr(args, name)
        if v is not None:
            kw[name] = v
    if args.x_o is not None:
        kw["x_o"] = tuple(args.x_o)
    if args.gate:
        kw["gate_enabled"] = True
    try:
        return base.with_(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_rollout(args):
    defaults = {"policy": None, "x0": None, "from_dataset": None, "z": None, "dt": None,
                "steps": None, "seed": 0}
    flags = {"policy": args.policy, "x0": args.x0, "from_dataset": args.from_dataset, "z": args.z,
             "dt": args.dt, "steps": args.steps, "seed": args.seed}
    s = _merge(defaults, _load_config(args.config), flags)
    if s["policy"] is None:
        raise UsageError("--policy is required")
    policy, header = _load_policy(s["policy"])
    dt, steps, z = s["dt"], s["steps"], s["z"]
    inputs = [s["policy"]]
    if s["from_dataset"]:
        ds = _load_data(s["from_dataset"])
        inputs.append(s["from_dataset"])
        x0 = ds.x[0]
        if z is None and ds.z is not None:
            z = float(ds.z[0])
        dt = dt if dt is not None else ds.dt
        steps = steps if steps is not None else len(ds) - 1
    elif s["x0"] is not None:
        x0 = np.asarray(s["x0"], dtype=float)
    else:
        raise UsageError("give --x0 or --from-dataset")
    if x0.shape != (policy.n,):
        raise UsageError(f"initial state must have {policy.n} entries")
    if dt is None or steps is None:
        raise UsageError("--dt and --steps are required without --from-dataset")
    if not dt > 0 or steps < 1:
        raise UsageError("need dt > 0 and steps >= 1")
    if policy.conditioned and z is None:
        raise UsageError("this policy is conditioned; pass --z")
    shape = _shaping(shaping_from_header(header), args)
    traj = rollout(policy, x0, z, dt, steps, shape)
    save_dataset(traj.to_dataset(), args.out)
    s.update({"dt": dt, "steps": steps, "z": z, "shaping": shape.__dict__})
    _write_manifest("rollout", args, s, inputs, [args.out], {"diverged": traj.diverged})
    if traj.diverged:
        print("rollout diverged", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote {steps + 1} states to {args.out}")
    return EXIT_OK


def _grid(spec, n, slice_values):
    try:
        parts = [float(v) for v in spec.split(",")]
    except ValueError as exc:
        raise UsageError("grid must be 'x_min,x_max,n_x,y_min,y_max,n_y'") from exc
    if len(parts) != 6 or parts[2] < 1 or parts[5] < 1:
        raise UsageError("grid must be 'x_min,x_max,n_x,y_min,y_max,n_y'")
    xs = np.linspace(parts[0], parts[1], int(parts[2]))
    ys = np.linspace(parts[3], parts[4], int(parts[5]))
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    pts = np.zeros((gx.size, n))
    pts[:, 0], pts[:, 1] = gx.ravel(), gy.ravel()
    if n > 2:
        rest = np.zeros(n - 2) if slice_values is None else np.asarray(slice_values, dtype=float)
        if rest.shape != (n - 2,):
            raise UsageError(f"--slice needs {n - 2} values")
        pts[:, 2:] = rest
    return pts, parts


def quiver_svg(points, vel, bounds, size=480) -> str:
    """Minimal SVG arrow plot of a planar velocity field."""
    x0, x1, _, y0, y1, _ = bounds
    span = max(x1 - x0, y1 - y0) or 1.0
    scale = size / span
    speed = np.linalg.norm(vel[:, :2], axis=1)
    top = float(speed.max()) if len(speed) and speed.max() > 0 else 1.0
    cell = span / max(math.sqrt(len(points)), 1.0)
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">',
             f'<title>{escape("velocity field")}</title>']
    for p, v, sp in zip(points, vel, speed):
        if not np.all(np.isfinite(v)):
            continue
        ax, ay = (p[0] - x0) * scale, size - (p[1] - y0) * scale
        d = v[:2] / top * 0.9 * cell * scale
        bx, by = ax + d[0], ay - d[1]
        shade = int(255 * sp / top)
        lines.append(f'<line x1="{ax:.2f}" y1="{ay:.2f}" x2="{bx:.2f}" y2="{by:.2f}" '
                     f'stroke="rgb({shade},0,{255 - shade})" stroke-width="1"/>')
        lines.append(f'<circle cx="{bx:.2f}" cy="{by:.2f}" r="1.2" fill="rgb({shade},0,{255 - shade})"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def cmd_field(args):
    defaults = {"policy": None, "grid": "-0.5,0.5,21,-0.5,0.5,21", "z": None, "slice": None,
                "seed": 0}
    flags = {"policy": args.policy, "grid": args.grid, "z": args.z, "slice": args.slice,
             "seed": args.seed}
    s = _merge(defaults, _load_config(args.config), flags)
    if s["policy"] is None:
        raise UsageError("--policy is required")
    policy, header = _load_policy(s["policy"])
    if policy.conditioned and s["z"] is None:
        raise UsageError("this policy is conditioned; pass --z")
    pts, bounds = _grid(s["grid"], policy.n, s["slice"])
    with torch.no_grad():
        vel = policy.velocity(torch.as_tensor(pts, dtype=DTYPE), s["z"],
                              shaping_from_header(header)).numpy()
    n = policy.n
    cols = [f"x_{i + 1}" for i in range(n)] + [f"v_{i + 1}" for i in range(n)]
    np.savetxt(args.out, np.hstack([pts, vel]), delimiter=",", header=",".join(cols), comments="",
               fmt="%.17g")
    outputs = [args.out]
    if args.svg:
        Path(args.svg).write_text(quiver_svg(pts, vel, bounds))
        outputs.append(args.svg)
    _write_manifest("field", args, s, [s["policy"]], outputs)
    print(f"wrote {len(pts)} grid points to {args.out}")
    return EXIT_OK


def cmd_sync_sim(args):
    defaults = {"policies": None, "offsets": None, "k_ps": 0.5, "x0": None, "zs": None,
                "phase_gap": math.pi / 2, "dt": 0.01, "steps": 2000, "seed": 0}
    flags = {"policies": args.policies, "offsets": _json_arg(args.offsets, "--offsets"),
             "k_ps": args.k_ps, "x0": _json_arg(args.x0, "--x0"), "zs": args.zs,
             "phase_gap": args.phase_gap, "dt": args.dt, "steps": args.steps, "seed": args.seed}
    s = _merge(defaults, _load_config(args.config), flags)
    if not s["policies"]:
        raise UsageError("--policies is required")
    policies = [_load_policy(p)[0] for p in s["policies"]]
    try:
        group = SyncGroup(policies, s["offsets"], s["k_ps"], s["zs"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if s["x0"] is None:
        x0 = []
        for i, (pol, z) in enumerate(zip(policies, group.zs)):
            y = np.zeros(pol.n)
            y[0] = pol.radius * math.cos(i * s["phase_gap"])
            y[1] = pol.radius * math.sin(i * s["phase_gap"])
            with torch.no_grad():
                x0.append(pol.encoder.decode(torch.as_tensor(y, dtype=DTYPE), z).numpy())
    else:
        x0 = np.asarray(s["x0"], dtype=float)
        if x0.shape != (group.size, group.n):
            raise UsageError(f"--x0 must be a {group.size}x{group.n} JSON array")
    trace = simulate_group(group, x0, s["dt"], s["steps"])
    out = Path(args.out)
    paths = trace.export(out)
    _write_manifest("sync-sim", args, s, s["policies"], paths,
                    {"diverged": trace.diverged.tolist()})
    print(f"final max pairwise phase error {trace.max_abs_error(len(trace.t) - 1):.4f} deg")
    return EXIT_RUNTIME if trace.diverged.any() else EXIT_OK


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="osmp", description="Orbitally stable periodic motion policies.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_help):
        p.add_argument("--seed", type=int)
        p.add_argument("--config", help="JSON file with settings (flags take precedence)")
        p.add_argument("--out", required=True, help=out_help)

    p = sub.add_parser("oracle-gen", help="generate a synthetic demonstration")
    p.add_argument("kind", nargs="?", help="ellipse | square | star | swim")
    p.add_argument("--params", help="generator parameters as JSON")
    p.add_argument("--samples", type=int)
    p.add_argument("--period", type=float)
    p.add_argument("--raw", action="store_true", help="skip normalization")
    p.add_argument("--no-velocity", action="store_true", help="omit velocity columns")
    common(p, "dataset CSV path")
    p.set_defaults(func=cmd_oracle_gen)

    p = sub.add_parser("train", help="train a policy")
    p.add_argument("--dataset")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--resume", help="policy file to continue training")
    common(p, "policy file path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a policy against a dataset")
    p.add_argument("--policy")
    p.add_argument("--dataset")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--n-inits", type=int, dest="n_inits")
    common(p, "report CSV path")
    p.set_defaults(func=cmd_eval)

    def shaping_flags(p):
        p.add_argument("--s-f", type=float, dest="s_f")
        p.add_argument("--x-o", type=float, nargs="+", dest="x_o")
        p.add_argument("--s-omega", type=float, dest="s_omega")
        p.add_argument("--k-conv", type=float, dest="k_conv")
        p.add_argument("--gate", action="store_true")
        p.add_argument("--r-sm", type=float, dest="r_sm")
        p.add_argument("--sigma-sm", type=float, dest="sigma_sm")

    p = sub.add_parser("rollout", help="integrate a policy")
    p.add_argument("--policy")
    p.add_argument("--x0", type=float, nargs="+")
    p.add_argument("--from-dataset", dest="from_dataset")
    p.add_argument("--z", type=float)
    p.add_argument("--dt", type=float)
    p.add_argument("--steps", type=int)
    shaping_flags(p)
    common(p, "trajectory CSV path")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("field", help="export the velocity field on a grid")
    p.add_argument("--policy")
    p.add_argument("--grid", help="x_min,x_max,n_x,y_min,y_max,n_y")
    p.add_argument("--z", type=float)
    p.add_argument("--slice", type=float, nargs="+", help="fixed values of coordinates 3..n")
    p.add_argument("--svg", help="also write an SVG quiver plot")
    common(p, "grid CSV path")
    p.set_defaults(func=cmd_field)

    p = sub.add_parser("sync-sim", help="simulate phase-coupled policies")
    p.add_argument("--policies", nargs="+")
    p.add_argument("--offsets", help="desired phase offsets, JSON n_s x n_s matrix (rad)")
    p.add_argument("--k-ps", type=float, dest="k_ps")
    p.add_argument("--x0", help="initial states, JSON n_s x n array")
    p.add_argument("--zs", type=float, nargs="+")
    p.add_argument("--phase-gap", type=float, dest="phase_gap",
                   help="latent phase spacing of default initial states (rad)")
    p.add_argument("--dt", type=float)
    p.add_argument("--steps", type=int)
    common(p, "output directory")
    p.set_defaults(func=cmd_sync_sim)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        code = args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, SingularJacobianError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
