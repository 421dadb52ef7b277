"""``ntklab`` command line: gen-data, train, ntk, genloss, eval, report.

Exit codes: 0 ok, 1 runtime failure, 2 bad arguments or layout, 3 domain
infeasibility (for example epsilon >= 1 in the generalization-loss solver).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    ConfigError,
    DimensionError,
    DivergenceError,
    DomainError,
    LayoutError,
    NtkLabError,
    SamplingError,
)
from .fscil import FscilDataset, SessionReport, make_synthetic
from .genloss import SpectralProblem, generalization_loss, read_spectrum_csv
from .losses import MarginConfig
from .model import ConvLayer, NetworkSpec, load_params, save_matrix, save_params
from .ntk import empirical_ntk
from .numerics import make_rng
from .trainer import AUTO_ETA0, TrainConfig, TrainState, run_protocol, train_base_session

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("ntklab")

EXIT_OK, EXIT_RUNTIME, EXIT_ARGS, EXIT_DOMAIN = 0, 1, 2, 3


class UsageError(ConfigError):
    """Bad command-line or config input."""


# ---------------------------------------------------------------- experiment config


@dataclass
class NetworkConfig:
    hidden: list = field(default_factory=lambda: [64])
    output_dim: int = 32
    sigma_w: float = 1.0
    sigma_b: float = 0.1
    image: list | None = None  # [channels, height, width] when a conv front is used
    conv: list = field(default_factory=list)  # [[out_channels, kernel_h, kernel_w], ...]

    def build(self, input_dim: int) -> NetworkSpec:
        layers = []
        if self.conv:
            if not self.image or len(self.image) != 3:
                raise UsageError("network.conv needs network.image = [channels, height, width]")
            c, h, w = (int(v) for v in self.image)
            if c * h * w != input_dim:
                raise UsageError(f"network.image {self.image} has {c * h * w} values but features have {input_dim}")
            for spec in self.conv:
                if len(spec) != 3:
                    raise UsageError(f"conv layer must be [out_channels, kernel_h, kernel_w], got {spec}")
                oc, kh, kw = (int(v) for v in spec)
                layer = ConvLayer(oc, c, kh, kw, h, w)
                layers.append(layer)
                c, h, w = oc, layer.out_h, layer.out_w
        return NetworkSpec(input_dim, tuple(int(v) for v in self.hidden), int(self.output_dim), float(self.sigma_w), float(self.sigma_b), tuple(layers))


@dataclass
class ExperimentConfig:
    data: str | None = None
    out: str | None = None
    init_weights: str | None = None
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: dict = field(default_factory=dict)
    margin: dict = field(default_factory=dict)

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(**self.train, margin=MarginConfig(**self.margin))
        except TypeError as e:
            raise UsageError(str(e)) from e

    def resolved(self) -> dict:
        cfg = self.train_config()
        train = {k: v for k, v in asdict(cfg).items() if k != "margin"}
        return {
            "version": __version__,
            "data": self.data,
            "out": self.out,
            "init_weights": self.init_weights,
            "network": asdict(self.network),
            "train": train,
            "margin": asdict(cfg.margin),
        }


_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"margin"}
_MARGIN_KEYS = {f.name for f in fields(MarginConfig)}
_NET_KEYS = {f.name for f in fields(NetworkConfig)}
_TOP_KEYS = {"data", "out", "init_weights", "network", "train", "margin", "version"}


def _reject_unknown(section: str, got: dict, allowed: set) -> None:
    extra = sorted(set(got) - allowed)
    if extra:
        raise UsageError(f"unknown key(s) in {section}: {', '.join(extra)}")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    text = path.read_text()
    try:
        doc = tomllib.loads(text) if path.suffix == ".toml" else json.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise UsageError(f"{path}: {e}") from e
    return config_from_dict(doc)


def config_from_dict(doc: dict) -> ExperimentConfig:
    _reject_unknown("config", doc, _TOP_KEYS)
    net = doc.get("network", {})
    _reject_unknown("network", net, _NET_KEYS)
    train = dict(doc.get("train", {}))
    _reject_unknown("train", train, _TRAIN_KEYS)
    margin = dict(doc.get("margin", {}))
    _reject_unknown("margin", margin, _MARGIN_KEYS)
    return ExperimentConfig(doc.get("data"), doc.get("out"), doc.get("init_weights"), NetworkConfig(**net), train, margin)


# ---------------------------------------------------------------- small file helpers


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_column_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([v if isinstance(v, (int, np.integer)) else repr(float(v)) for v in r])


def _lr_arg(text: str):
    if text == AUTO_ETA0:
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive number or {AUTO_ETA0!r}, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    ds = make_synthetic(
        args.classes,
        args.per_class,
        args.dim,
        args.spread,
        make_rng(args.seed),
        sessions=args.sessions,
        ways=args.ways,
        shots=args.shots,
        test_per_class=args.test_per_class,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds.save(out / "data.csv", out / "data.json")
    print(f"wrote {out / 'data.csv'}: {ds.num_classes} classes, {ds.base_classes} base, {ds.sessions} sessions")
    return EXIT_OK


_TRAIN_FLAGS = {
    "steps": "steps",
    "batch_size": "batch_size",
    "lr": "lr",
    "gamma": "gamma",
    "alpha": "alpha",
    "beta_hyper": "beta_hyper",
    "mix_alpha": "mix_alpha",
    "ways": "ways",
    "shots": "shots",
    "queries": "queries",
    "spectrum_every": "spectrum_every",
    "probe_size": "probe_size",
    "seed": "seed",
}


def _experiment_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    for flag, key in _TRAIN_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            cfg.train[key] = value
    for flag in ("margin_s", "margin_m"):
        value = getattr(args, flag)
        if value is not None:
            cfg.margin[flag.split("_")[1]] = value
    if args.hidden is not None:
        cfg.network = replace(cfg.network, hidden=args.hidden)
    if args.output_dim is not None:
        cfg.network = replace(cfg.network, output_dim=args.output_dim)
    cfg.data = args.data or cfg.data
    cfg.out = args.out or cfg.out
    cfg.init_weights = args.init_weights or cfg.init_weights
    if not cfg.data or not cfg.out:
        raise UsageError("train needs a dataset (--data) and an output directory (--out)")
    return cfg


def _write_run(out: Path, state, report: SessionReport) -> None:
    save_params(state.params, out / "params.ntkp")
    save_matrix(state.classifier, out / "classifier.ntkm")
    _write_column_csv(out / "loss_trace.csv", ["step", "loss"], enumerate(state.loss_trace))
    state.spectrum_trace.to_csv(out / "spectrum.csv")
    _write_json(out / "report.json", report.to_dict())
    if state.convergence is not None:
        c = state.convergence
        _write_json(
            out / "convergence.json",
            {"eta0": c.eta0, "sigma_min": c.sigma_min, "sigma_max": c.sigma_max, "R": c.R, "all_satisfied": c.all_satisfied},
        )


def cmd_train(args) -> int:
    cfg = _experiment_from_args(args)
    tcfg = cfg.train_config()
    ds = FscilDataset.load(cfg.data)
    spec = cfg.network.build(ds.dim)
    hook = None
    if cfg.init_weights:
        hook = load_params(cfg.init_weights).theta
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.resolved())
    state = train_base_session(ds, spec, tcfg, init_hook=hook)
    report = run_protocol(state, ds)
    _write_run(out, state, report)
    print(json.dumps(report.to_dict()))
    return EXIT_OK


def cmd_ntk(args) -> int:
    params = load_params(args.checkpoint)
    ds = FscilDataset.load(args.data)
    train = ds.train_indices(0)
    if args.probe < 1 or args.probe > train.size:
        raise UsageError(f"--probe must be in [1, {train.size}] for this dataset, got {args.probe}")
    idx = np.sort(make_rng(args.seed).choice(train, size=args.probe, replace=False))
    ntk = empirical_ntk(params, ds.features[idx], restrict=args.restrict)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_matrix(ntk.gram, out / "gram.ntkm")
    _write_column_csv(out / "eigenvalues.csv", ["eigenvalue"], ([v] for v in ntk.eigenvalues))
    summary = {
        "probe": int(args.probe),
        "restrict": args.restrict,
        "lambda_max": ntk.lambda_max,
        "lambda_min": ntk.lambda_min,
        "condition_number": ntk.condition_number,
    }
    _write_json(out / "condition.json", summary)
    print(json.dumps(summary))
    return EXIT_OK


def _read_weights(path: str, modes: int) -> np.ndarray:
    vals = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        try:
            vals.append(float(line.split(",")[0]))
        except ValueError:
            if vals:
                raise UsageError(f"{path}: not a number: {line!r}") from None
    if len(vals) != modes:
        raise UsageError(f"{path}: expected {modes} weights, got {len(vals)}")
    return np.array(vals)


def cmd_genloss(args) -> int:
    lam, w = read_spectrum_csv(args.spectrum)
    if lam.size == 0:
        raise UsageError(f"{args.spectrum}: no positive eigenvalues")
    if args.weights == "unit":
        w = np.ones_like(lam) if w is None else w
    else:
        w = _read_weights(args.weights, lam.size)
    report = generalization_loss(SpectralProblem(lam, w, args.n, args.noise))
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_eval(args) -> int:
    run = Path(args.run)
    params = load_params(run / "params.ntkp")
    data = args.data or json.loads((run / "config.json").read_text())["data"]
    # the protocol only needs the parameters, not the classifier
    report = run_protocol(TrainState(params=params, classifier=np.zeros((0, 0))), FscilDataset.load(data))
    print(json.dumps(report.to_dict()))
    return EXIT_OK


def cmd_report(args) -> int:
    rows = []
    for run in args.runs:
        rep = SessionReport.from_dict(json.loads((Path(run) / "report.json").read_text()))
        rows.append((run, rep))
        accs = " ".join(f"{a:.3f}" for a in rep.accuracies)
        print(f"{run}: sessions [{accs}] PD {rep.pd:.3f} HM {rep.harmonic_mean:.3f}")
    if len(rows) > 1:
        finals = [r.accuracies[-1] for _, r in rows]
        print(f"median final accuracy over {len(rows)} runs: {float(np.median(finals)):.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- parser and dispatch


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ntklab", description="NTK-guided few-shot class-incremental experiments.")
    p.add_argument("--version", action="version", version=f"ntklab {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a seeded synthetic FSCIL dataset (CSV + manifest)")
    g.add_argument("--classes", type=int, default=100)
    g.add_argument("--per-class", type=int, default=40, help="base-session samples per class, test included")
    g.add_argument("--test-per-class", type=int, default=None)
    g.add_argument("--dim", type=int, default=36)
    g.add_argument("--spread", type=float, default=1.0, help="within-class noise scale")
    g.add_argument("--sessions", type=int, default=8)
    g.add_argument("--ways", type=int, default=5)
    g.add_argument("--shots", type=int, default=5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="data")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="meta-train on the base session, then run the session protocol")
    t.add_argument("--config", help="JSON or TOML experiment config; flags override it")
    t.add_argument("--data", help="dataset CSV (manifest beside it)")
    t.add_argument("--out", help="run directory")
    t.add_argument("--init-weights", help="checkpoint whose parameters replace the random init")
    t.add_argument("--hidden", type=_int_list, help="hidden widths, e.g. 64 or 128,64")
    t.add_argument("--output-dim", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=_lr_arg, help=f"step size or {AUTO_ETA0}")
    t.add_argument("--gamma", type=float, help="adaptability loss weight")
    t.add_argument("--alpha", type=float, help="conv spectral regularizer weight")
    t.add_argument("--beta-hyper", type=float, help="linear NTK regularizer weight")
    t.add_argument("--mix-alpha", type=float)
    t.add_argument("--margin-s", type=float)
    t.add_argument("--margin-m", type=float)
    t.add_argument("--ways", type=int)
    t.add_argument("--shots", type=int)
    t.add_argument("--queries", type=int)
    t.add_argument("--spectrum-every", type=int)
    t.add_argument("--probe-size", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    n = sub.add_parser("ntk", help="empirical NTK of a checkpoint on a probe of base training samples")
    n.add_argument("--checkpoint", required=True)
    n.add_argument("--data", required=True)
    n.add_argument("--probe", type=int, default=32)
    n.add_argument("--restrict", choices=("all", "linear"), default="all")
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--out", default="ntk")
    n.set_defaults(func=cmd_ntk)

    s = sub.add_parser("genloss", help="expected generalization loss from a kernel spectrum")
    s.add_argument("--spectrum", required=True, help="CSV of eigenvalue[,weight]")
    s.add_argument("--n", type=int, required=True, help="training sample count")
    s.add_argument("--noise", type=float, default=0.0, help="label noise variance")
    s.add_argument("--weights", default="unit", help="'unit' or a file with one target weight per mode")
    s.add_argument("--out", help="also write the JSON report here")
    s.set_defaults(func=cmd_genloss)

    e = sub.add_parser("eval", help="re-run the session protocol from a run directory's checkpoint")
    e.add_argument("--run", required=True)
    e.add_argument("--data", help="dataset CSV (defaults to the one recorded in the run config)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="summarize one or more run directories")
    r.add_argument("runs", nargs="+")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except DomainError as e:
        print(f"ntklab: domain error: {e}", file=sys.stderr)
        return EXIT_DOMAIN
    except (ConfigError, LayoutError, DimensionError, SamplingError) as e:
        print(f"ntklab: {e}", file=sys.stderr)
        return EXIT_ARGS
    except DivergenceError as e:
        print(f"ntklab: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (NtkLabError, OSError) as e:
        print(f"ntklab: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
