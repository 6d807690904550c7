"""Command-line entry point.

Each run writes its outputs plus ``manifest.json`` (command, resolved
config, config hash, seed, package versions, output digests) into one run
directory.  Exit status: 0 on success, 2 on configuration errors, 1 on
runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis as an
from . import ber, pretrained
from .channel import ChannelConfig
from .codec import calibrate_normalization
from .config import ConfigError, config_hash, load, schema_markdown, train_config
from .params import ParamFileError, all_sign_variants, dumps, load_params, save_params, to_document
from .trainer import TrainingDiverged, train

log = logging.getLogger("feedbackcode")

OUT_ENV = "FEEDBACKCODE_OUT"
COMMANDS = ("train", "eval-ber", "sweep", "influence", "outliers", "pwl-fit", "scatter", "variants", "calibrate")


class Run:
    """Output directory plus the manifest describing it."""

    def __init__(self, command: str, cfg: dict, out: Path, workers: int):
        self.command = command
        self.cfg = cfg
        self.out = out
        self.workers = workers
        self.files: dict[str, str] = {}
        out.mkdir(parents=True, exist_ok=True)

    def write(self, name: str, text: str) -> Path:
        path = self.out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        data = text.encode()
        path.write_bytes(data)
        self.files[name] = hashlib.sha256(data).hexdigest()
        return path

    def write_params(self, name: str, params) -> Path:
        return self.write(name, dumps(to_document(params)))

    def finish(self) -> None:
        import scipy

        manifest = {
            "command": self.command,
            "config": self.cfg,
            "config_hash": config_hash(self.cfg),
            "seed": self.cfg["seed"],
            "workers": self.workers,
            "versions": {
                "feedbackcode": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "python": platform.python_version(),
            },
            "outputs": self.files,
        }
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _params(cfg: dict):
    path = cfg["params"]
    if path is None:
        raise ConfigError("params: a ParamSet path is required (config key 'params' or --params)")
    try:
        return load_params(pretrained.resolve(path, "params"))
    except FileNotFoundError:
        raise ConfigError(f"params: file not found: {path}") from None
    except ParamFileError as exc:
        raise ConfigError(f"params: {path}: {exc}") from None


def _channel(cfg: dict) -> ChannelConfig:
    return ChannelConfig.from_snr(cfg["channel"]["snr_f_db"], cfg["channel"]["snr_fb_db"])


def _ber_kwargs(cfg: dict, workers: int) -> dict:
    b = cfg["ber"]
    return dict(min_errors=b["min_errors"], max_bits=b["max_bits"], seed=cfg["seed"],
                chunk_blocks=b["chunk_blocks"], workers=workers)


def _loss_csv(result) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("step", "loss", "lr"))
    for i, (loss, lr) in enumerate(zip(result.losses, result.lrs), start=1):
        w.writerow((i, f"{loss:.17g}", f"{lr:.17g}"))
    return buf.getvalue()


# ---------------------------------------------------------------------------
# commands


def cmd_train(run: Run) -> None:
    tc = train_config(run.cfg)
    result = train(tc, log_every=max(1, tc.steps // 20))
    run.write_params("params.json", result.params)
    run.write("loss.csv", _loss_csv(result))


def cmd_eval_ber(run: Run) -> None:
    params = _params(run.cfg)
    est = ber.estimate_ber(params, _channel(run.cfg), **_ber_kwargs(run.cfg, run.workers))
    run.write("ber.csv", ber.to_csv([est]))
    log.info("BER %.4e (%d errors / %d bits)", est.ber, est.bit_errors, est.bits_tested)


def cmd_sweep(run: Run) -> None:
    s = run.cfg["sweep"]
    if s["params_by_snr_f"]:
        table = {}
        for key, path in s["params_by_snr_f"].items():
            try:
                table[float(key)] = load_params(pretrained.resolve(path, "params"))
            except ValueError:
                raise ConfigError(f"sweep.params_by_snr_f: bad SNR key {key!r}") from None
            except FileNotFoundError:
                raise ConfigError(f"sweep.params_by_snr_f.{key}: file not found: {path}") from None
        source = table
    else:
        source = _params(run.cfg)
    kw = _ber_kwargs(run.cfg, run.workers)
    try:
        rows = ber.sweep(source, s["snr_f_db"], s["snr_fb_db"], **kw)
    except KeyError as exc:
        raise ConfigError(f"sweep.params_by_snr_f: {exc.args[0]}") from None
    run.write("sweep.csv", ber.to_csv(rows))


def cmd_influence(run: Run) -> None:
    params = _params(run.cfg)
    inf = run.cfg["influence"]
    curves, lengths = [], []
    for target in inf["targets"]:
        deltas = [1.0] if target == "bit" else inf["deltas"]
        for delta in deltas:
            try:
                spec = an.PerturbSpec(target, delta, inf["t"], inf["samples"], inf["delta_threshold"])
            except ValueError as exc:
                raise ConfigError(f"influence: {exc}") from None
            curve = an.perturbation_curve(params, spec, _channel(run.cfg), seed=run.cfg["seed"])
            for i, v in zip(curve.steps, curve.values):
                curves.append((target, f"{delta:g}", int(i), f"{v:.17g}"))
            lengths.append((target, f"{delta:g}", an.influence_length(curve, spec.delta_threshold)))
    run.write("influence.csv", an._csv(("target", "delta", "i", "L"), curves))
    run.write("influence_length.csv", an._csv(("target", "delta", "length"), lengths))


def cmd_outliers(run: Run) -> None:
    params = _params(run.cfg)
    o = run.cfg["outliers"]
    report = an.outlier_stats(params, _channel(run.cfg), o["blocks"], o["threshold"], seed=run.cfg["seed"])
    run.write("outliers.csv", report.summary_csv())
    run.write("outlier_histogram.csv", report.histogram_csv())


def cmd_scatter(run: Run) -> None:
    params = _params(run.cfg)
    rows = an.scatter_export(params, _channel(run.cfg), run.cfg["scatter"]["samples"], seed=run.cfg["seed"])
    run.write("scatter.csv", an.scatter_csv(rows))


def _read_scatter(path: str) -> np.ndarray:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(an.SCATTER_COLUMNS) - set(reader.fieldnames or ())
            if missing:
                raise ConfigError(f"pwl.input: {path} lacks columns {sorted(missing)}")
            return np.array([[float(r[c]) for c in an.SCATTER_COLUMNS] for r in reader])
    except FileNotFoundError:
        raise ConfigError(f"pwl.input: file not found: {path}") from None


def cmd_pwl_fit(run: Run) -> None:
    p = run.cfg["pwl"]
    if p["parity"] not in ("parity1", "parity2"):
        raise ConfigError(f"pwl.parity: expected parity1 or parity2, got {p['parity']!r}")
    if p["input"]:
        rows = _read_scatter(p["input"])
    else:
        rows = an.scatter_export(_params(run.cfg), _channel(run.cfg), run.cfg["scatter"]["samples"],
                                 seed=run.cfg["seed"])
    col = an.SCATTER_COLUMNS.index(p["parity"])
    segs, knees = [], []
    for bit in (0, 1):
        sel = rows[rows[:, 1] == bit]
        order = np.argsort(sel[:, 2], kind="stable")
        x, y = sel[order, 2], sel[order, col]
        fit = an.segmented_least_squares(x, y, p["penalty"], max_points=p["max_points"])
        for k, s in enumerate(fit.segments):
            segs.append((bit, k, f"{s.x_start:.17g}", f"{s.x_end:.17g}", f"{s.slope:.17g}",
                         f"{s.intercept:.17g}", s.n_points, f"{s.sse:.17g}"))
        kf = an.knee_fit(x, y, fix_knee_at_zero=p["fix_knee_at_zero"], side="right" if bit == 0 else "left")
        knees.append((bit, f"{kf.slope:.17g}", f"{kf.knee:.17g}", kf.side, f"{kf.sse:.17g}"))
    run.write("pwl.csv", an._csv(("bit", "segment", "x_start", "x_end", "slope", "intercept", "n_points", "sse"),
                                 segs))
    run.write("knee.csv", an._csv(("bit", "slope", "knee", "steep_side", "sse"), knees))


def cmd_variants(run: Run) -> None:
    base = run.cfg["train"]["variant"]
    rows = []
    for v in all_sign_variants(base["n_hidden"], base["knee_mode"]):
        cfg = json.loads(json.dumps(run.cfg))
        cfg["train"]["variant"] = v.to_dict()
        result = train(train_config(cfg))
        run.write_params(f"params/{v.label()}.json", result.params)
        est = ber.estimate_ber(result.params, _channel(run.cfg), **_ber_kwargs(run.cfg, run.workers))
        rows.append((v.label(), v.sign_type, v.s4, v.s5, est.bits_tested, est.bit_errors, f"{est.ber:.6e}",
                     f"{est.ci_low:.6e}", f"{est.ci_high:.6e}"))
        log.info("%s BER %.4e", v.label(), est.ber)
    run.write("variants.csv", an._csv(
        ("variant", "sign_type", "h4_rest", "h5_rest", "bits", "errors", "ber", "ci_low", "ci_high"), rows))


def cmd_calibrate(run: Run) -> None:
    params = _params(run.cfg)
    try:
        norm = calibrate_normalization(params, _channel(run.cfg), run.cfg["calibrate"]["blocks"],
                                       seed=run.cfg["seed"])
    except ValueError as exc:
        raise ConfigError(f"calibrate: {exc}") from None
    run.write_params("params.json", params.with_norm(norm))


HANDLERS = {
    "train": cmd_train,
    "eval-ber": cmd_eval_ber,
    "sweep": cmd_sweep,
    "influence": cmd_influence,
    "outliers": cmd_outliers,
    "pwl-fit": cmd_pwl_fit,
    "scatter": cmd_scatter,
    "variants": cmd_variants,
    "calibrate": cmd_calibrate,
}


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feedbackcode", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration or shipped config name (defaults fill gaps)")
        p.add_argument("--out", help=f"run directory (default: ${OUT_ENV} or ./runs, then <command>-<hash>)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--workers", type=int, default=1, help="cap on parallel BER workers")
        p.add_argument("--params", help="override the config 'params' path")
        p.add_argument("-q", "--quiet", action="store_true")
    sub.add_parser("schema", help="print the config schema as a markdown table")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "schema":
        print(schema_markdown())
        return 0
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = load(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.params is not None:
            cfg["params"] = args.params
        if args.workers < 1:
            raise ConfigError("--workers: must be >= 1")
        if args.out:
            out = Path(args.out)
        else:
            root = Path(os.environ.get(OUT_ENV, "runs"))
            out = root / f"{args.command}-{config_hash(cfg)[:10]}"
        run = Run(args.command, cfg, out, args.workers)
        HANDLERS[args.command](run)
        run.finish()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, ValueError, OSError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
