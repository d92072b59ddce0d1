"""
Command-line entry point.

Subcommands
-----------
plain   Monte Carlo optimization of random two-component mixtures.
psr     Monte Carlo point set registration in 2D and 3D.
scan    Cost and pseudo-Hessian of one loss over a grid, for plotting.

Exit codes are 0 on success, 2 for usage or configuration errors and 3 for
failures while running.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .experiments import (
    PlainExperimentConfig,
    PsrExperimentConfig,
    MixtureSamplingSpec,
    records_to_csv,
    run_plain_experiment,
    run_psr_experiment,
)
from .gmm import GaussianMixture
from .loss import LOSS_NAMES, MixtureLossConfig, make_loss

log = logging.getLogger("mixlsq")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3

# full-scale counts; desk scale is the dataclass default
PAPER_SCALE = {
    "plain": {"mixtures": 1000, "starts": 100},
    "psr": {"configurations": 100, "runs": 1000},
}


class UsageError(Exception):
    pass


def version_string() -> str:
    return f"v{__version__}"


# -- configuration ----------------------------------------------------------

def load_config(path: str | None, experiment: str) -> dict:
    """Read a JSON config. It must carry ``schema_version`` and may name the
    experiment it belongs to; the remaining keys override config fields."""
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError("config must be a JSON object")
    version = data.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise UsageError(f"config schema_version must be {SCHEMA_VERSION}, got {version!r}")
    named = data.pop("experiment", experiment)
    if named != experiment:
        raise UsageError(f"config is for '{named}', not '{experiment}'")
    return data


def parse_losses(text: str | None, allowed=LOSS_NAMES) -> list[str]:
    if text is None:
        return list(allowed)
    names = [t.strip().lower() for t in text.split(",") if t.strip()]
    unknown = [n for n in names if n not in LOSS_NAMES]
    if unknown or not names:
        raise UsageError(f"unknown loss {', '.join(unknown) or '(empty)'}; valid names: {', '.join(LOSS_NAMES)}")
    return names


def _build(cls, fields: dict, **overrides):
    known = {f.name for f in dataclasses.fields(cls)}
    bad = sorted(set(fields) - known)
    if bad:
        raise UsageError(f"unknown {cls.__name__} field(s): {', '.join(bad)}")
    values = dict(fields)
    values.update({k: v for k, v in overrides.items() if v is not None})
    if isinstance(values.get("sampling"), dict):
        values["sampling"] = MixtureSamplingSpec(**{k: tuple(v) for k, v in values["sampling"].items()})
    for key in ("start_range", "shell_radius"):
        if key in values:
            values[key] = tuple(values[key])
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {cls.__name__}: {exc}") from exc


def config_dict(config) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(config)))


def config_hash(payload) -> str:
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# -- output -----------------------------------------------------------------

def prepare_out(path: str) -> Path:
    out = Path(path)
    if not out.exists():
        log.warning("output directory %s does not exist; creating it", out)
        out.mkdir(parents=True)
    elif not out.is_dir():
        raise UsageError(f"{out} is not a directory")
    return out


def _timestamp() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def comment_header(seed, digest: str) -> str:
    # the timestamp sits on its own line so reruns differ only there
    seed = "none" if seed is None else seed
    return (f"# mixlsq {version_string()}\n# seed: {seed}\n# config_hash: {digest}\n"
            f"# generated: {_timestamp()}\n")


def write_csv(path: Path, body: str, seed, digest: str) -> None:
    path.write_text(comment_header(seed, digest) + body)


def write_json(path: Path, payload: dict, seed, digest: str) -> None:
    doc = {"version": version_string(), "seed": seed, "config_hash": digest,
           "generated": _timestamp(), **payload}
    path.write_text(json.dumps(doc, indent=1) + "\n")


def _clean_rows(rows, timing: bool):
    out = []
    for r in rows:
        r = dict(r)
        if not timing:
            r.pop("mean_time_us", None)
        # strict JSON has no NaN
        out.append({k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in r.items()})
    return out


# -- commands ---------------------------------------------------------------

def _scenarios_plain(args, fields: dict):
    """(dimension, symmetric) cells: flags win over the config, which wins
    over running all four."""
    dim = args.dim or fields.pop("dimension", None)
    sym = args.symmetric if args.symmetric is not None else fields.pop("symmetric", None)
    fields.pop("dimension", None)
    fields.pop("symmetric", None)
    dims = [dim] if dim else [1, 2]
    syms = [sym] if sym is not None else [True, False]
    return [(d, s) for d in dims for s in syms]


def plain_configs(args) -> list[PlainExperimentConfig]:
    fields = load_config(args.config, "plain")
    scale = PAPER_SCALE["plain"] if args.scale == "paper" else {}
    cells = _scenarios_plain(args, fields)
    return [_build(PlainExperimentConfig, {**scale, **fields}, dimension=d, symmetric=sym, seed=args.seed)
            for d, sym in cells]


def cmd_plain(args) -> int:
    configs = plain_configs(args)
    losses = parse_losses(args.losses)
    out = prepare_out(args.out)
    payload = {"experiment": "plain", "losses": losses, "configs": [config_dict(c) for c in configs]}
    digest = config_hash(payload)
    seed = configs[0].seed
    tables, csv_parts = {}, []
    for cfg in configs:
        log.info("running %s (%d mixtures x %d starts)", cfg.name, cfg.mixtures, cfg.starts)
        rows, records = run_plain_experiment(cfg, losses, workers=args.threads)
        tables[cfg.name] = {r["loss"]: r for r in _clean_rows(rows, not args.no_timing)}
        csv_parts.append((cfg.name, records_to_csv(records, timing=not args.no_timing)))
    write_json(out / "plain_results.json", {**payload, "results": tables}, seed, digest)
    write_csv(out / "plain_trials.csv", _join_csv(csv_parts), seed, digest)
    return EXIT_OK


def _join_csv(parts) -> str:
    # one header row, then each scenario's rows under a "# scenario:" marker
    head = parts[0][1].split("\n", 1)[0] + "\n"
    body = "".join(f"# scenario: {name}\n" + text.split("\n", 1)[1] for name, text in parts)
    return head + body


def psr_configs(args) -> list[PsrExperimentConfig]:
    fields = load_config(args.config, "psr")
    scale = PAPER_SCALE["psr"] if args.scale == "paper" else {}
    dim = args.dim or fields.pop("dimension", None)
    fields.pop("dimension", None)
    dims = [dim] if dim else [2, 3]
    return [_build(PsrExperimentConfig, {**scale, **fields}, dimension=d, seed=args.seed) for d in dims]


def cmd_psr(args) -> int:
    configs = psr_configs(args)
    losses = parse_losses(args.losses, allowed=("mm", "sm", "msm"))
    if "dcs" in losses:
        raise UsageError("dcs is not available for registration; use mm, sm, msm")
    out = prepare_out(args.out)
    payload = {"experiment": "psr", "losses": losses, "configs": [config_dict(c) for c in configs]}
    digest = config_hash(payload)
    seed = configs[0].seed
    tables, csv_parts = {}, []
    for cfg in configs:
        log.info("running %s (%d configurations x %d runs)", cfg.name, cfg.configurations, cfg.runs)
        rows, records = run_psr_experiment(cfg, losses, workers=args.threads)
        tables[cfg.name] = {r["loss"]: r for r in _clean_rows(rows, not args.no_timing)}
        csv_parts.append((cfg.name, records_to_csv(records, timing=not args.no_timing)))
    write_json(out / "psr_results.json", {**payload, "results": tables}, seed, digest)
    write_csv(out / "psr_trials.csv", _join_csv(csv_parts), seed, digest)
    return EXIT_OK


def scan_grid(mixture: GaussianMixture, loss_name: str, lo: float, hi: float, resolution: float,
              damping: float = 10.0, phi: float = 1.0):
    """Cost ``1/2 ||rho||^2`` and pseudo-Hessian ``J^T J`` over a regular grid.

    Returns ``(points, costs, hessians)``; in 2D the grid is the square
    ``[lo, hi]^2`` traversed row-major in the first coordinate.
    """
    if not resolution > 0 or not hi > lo:
        raise ValueError("scan needs hi > lo and resolution > 0")
    n = int(math.floor((hi - lo) / resolution + 1e-9)) + 1
    axis = lo + resolution * np.arange(n)
    d = mixture.dimension
    if d == 1:
        points = axis[:, None]
    elif d == 2:
        gx, gy = np.meshgrid(axis, axis, indexing="ij")
        points = np.stack([gx.ravel(), gy.ravel()], axis=1)
    else:
        raise ValueError("scan supports 1D and 2D mixtures")
    loss = make_loss(loss_name, mixture, MixtureLossConfig(damping=damping), phi)
    costs = np.empty(len(points))
    hess = np.empty((len(points), d, d))
    for i, p in enumerate(points):
        ev = loss.evaluate(p)
        costs[i] = 0.5 * float(ev.value @ ev.value)
        hess[i] = ev.jacobian.T @ ev.jacobian
    return points, costs, hess


def scan_csv(points, costs, hess) -> str:
    lines = []
    if points.shape[1] == 1:
        lines.append("x,cost,h")
        for p, c, h in zip(points, costs, hess):
            lines.append(f"{float(p[0])!r},{float(c)!r},{float(h[0, 0])!r}")
    else:
        lines.append("x0,x1,cost,h00,h01,h11,h_min_eig")
        eig = np.linalg.eigvalsh(hess)[:, 0]
        for p, c, h, e in zip(points, costs, hess, eig):
            vals = (p[0], p[1], c, h[0, 0], h[0, 1], h[1, 1], e)
            lines.append(",".join(repr(float(v)) for v in vals))
    return "\n".join(lines) + "\n"


def cmd_scan(args) -> int:
    if args.mixture is None:
        raise UsageError("scan needs --mixture <json>")
    try:
        mixture = GaussianMixture.from_json(Path(args.mixture).read_text())
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"cannot read mixture {args.mixture}: {exc}") from exc
    loss = parse_losses(args.loss)
    if len(loss) != 1:
        raise UsageError("scan takes exactly one loss")
    loss = loss[0]
    lo, hi = args.range
    try:
        points, costs, hess = scan_grid(mixture, loss, lo, hi, args.resolution, args.damping, args.phi)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = prepare_out(args.out)
    payload = {"experiment": "scan", "mixture": mixture.to_dict(), "loss": loss, "range": [lo, hi],
               "resolution": args.resolution, "damping": args.damping, "phi": args.phi}
    digest = config_hash(payload)
    name = args.name or (f"scan_{loss}_delta{args.damping:g}.csv" if loss == "msm" else f"scan_{loss}.csv")
    write_csv(out / name, scan_csv(points, costs, hess), args.seed, digest)
    return EXIT_OK


# -- parser -----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config with schema_version")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", default="results", help="output directory (created when missing)")
    common.add_argument("--losses", help=f"comma separated subset of {','.join(LOSS_NAMES)}")
    common.add_argument("--scale", choices=("desk", "paper"), default="desk")
    common.add_argument("--threads", type=int, default=1, help="worker processes")
    common.add_argument("--no-timing", action="store_true",
                        help="leave wall-time columns empty so reruns are byte-identical")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="mixlsq", description="Gaussian-mixture least-squares experiments")
    parser.add_argument("--version", action="version", version=f"mixlsq {version_string()}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("plain", parents=[common], help="plain mixture optimization")
    p.add_argument("--dim", type=int, choices=(1, 2))
    g = p.add_mutually_exclusive_group()
    g.add_argument("--symmetric", dest="symmetric", action="store_true", default=None)
    g.add_argument("--asymmetric", dest="symmetric", action="store_false")
    p.set_defaults(func=cmd_plain)

    p = sub.add_parser("psr", parents=[common], help="point set registration")
    p.add_argument("--dim", type=int, choices=(2, 3))
    p.set_defaults(func=cmd_psr)

    p = sub.add_parser("scan", parents=[common], help="cost and pseudo-Hessian over a grid")
    p.add_argument("--mixture", help="mixture JSON file")
    p.add_argument("--loss", default="msm")
    p.add_argument("--range", type=float, nargs=2, default=(-4.0, 4.0), metavar=("LO", "HI"))
    p.add_argument("--resolution", type=float, default=0.01)
    p.add_argument("--damping", type=float, default=10.0, help="MSM damping")
    p.add_argument("--phi", type=float, default=1.0, help="DCS kernel width")
    p.add_argument("--name", help="output file name")
    p.set_defaults(func=cmd_scan)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"mixlsq: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("mixlsq: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"mixlsq: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - any failure inside a run maps to exit 3
        log.debug("run failed", exc_info=True)
        print(f"mixlsq: run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
