"""Command-line toolkit binding the simulator, baselines, network, and
evaluation into reproducible experiments.

Subcommands: gen, calibrate, dict, train, tune, eval, explain, ablate.
Exit codes: 0 success, 2 configuration error, 3 I/O or file-format error,
4 numeric failure (divergence, degenerate calibration, failed search).

Every report is a CSV file with a ``# key=value`` metadata preamble that
embeds the configuration hash and seeds but no timestamps, so re-running a
command with the same inputs produces a byte-identical report.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import sys

import numpy as np

from .baseline import calibrate_from_dataset, predict_shape_bl
from .datafile import (
    dataset_header,
    effects_from_dict,
    effects_to_dict,
    layout_from_dict,
    layout_to_dict,
    load_calibration,
    load_checkpoint,
    load_dataset,
    load_dictionary,
    sampler_from_dict,
    sampler_to_dict,
    save_calibration,
    save_checkpoint,
    save_dataset,
    save_dictionary,
    _strict_dataclass,
)
from .dictionary import dictionary_from_dataset, query_batch
from .errors import (
    CalibrationDegenerateError,
    DataFormatError,
    EdgeFbgError,
    InsufficientExcitationError,
    InvalidInputError,
    SearchFailedError,
    TrainingDivergedError,
)
from .explain import loss_saliency, marker_saliency
from .metrics import ShapeErrorStats, SplitSpec, resolution_ablation, split_dataset
from .nn import (
    Model,
    TrainConfig,
    paper_architecture,
    predict_batch,
    scaled_architecture,
    train,
)
from .optics import (
    Dataset,
    EffectsConfig,
    ShapeSamplerConfig,
    default_layout,
    generate_dataset,
    sample_random_shape,
)
from .tuner import SearchSpace, run_search

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

_MODEL_PROFILES = {"scaled": scaled_architecture, "paper": paper_architecture}


# ---------------------------------------------------------------------------
# experiment configuration


@dataclasses.dataclass(frozen=True)
class ModelSection:
    profile: str = "scaled"
    init_scheme: str = "standard"
    seed: int = 0

    def __post_init__(self):
        if self.profile not in _MODEL_PROFILES:
            raise InvalidInputError(f"unknown model profile {self.profile!r}")

    def build(self) -> Model:
        config = _MODEL_PROFILES[self.profile](self.init_scheme)
        return Model(config, seed=self.seed, dtype=np.float32)


@dataclasses.dataclass(frozen=True)
class TunerSection:
    n_configs: int = 9
    eta: int = 3
    base_epochs: int = 1
    max_epochs: int = 27
    seed: int = 0
    space: SearchSpace = dataclasses.field(default_factory=SearchSpace)


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """One structured document driving every subcommand; strict keys."""

    layout: object
    effects: EffectsConfig
    sampler: ShapeSamplerConfig
    model: ModelSection
    train: TrainConfig
    tuner: TunerSection
    split: SplitSpec

    def to_dict(self) -> dict:
        return {
            "layout": layout_to_dict(self.layout),
            "effects": effects_to_dict(self.effects),
            "sampler": sampler_to_dict(self.sampler),
            "model": dataclasses.asdict(self.model),
            "train": dataclasses.asdict(self.train),
            "tuner": dataclasses.asdict(self.tuner),
            "split": dataclasses.asdict(self.split),
        }

    @property
    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise InvalidInputError("configuration must be a JSON object")
    allowed = {"layout", "effects", "sampler", "model", "train", "tuner", "split"}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise InvalidInputError(f"unknown configuration sections: {unknown}")
    tuner_doc = dict(data.get("tuner", {}))
    space_doc = tuner_doc.pop("space", None)
    tuner = _strict_dataclass(TunerSection, tuner_doc, "tuner")
    if space_doc is not None:
        tuner = dataclasses.replace(
            tuner, space=_strict_dataclass(SearchSpace, space_doc, "tuner.space")
        )
    return ExperimentConfig(
        layout=layout_from_dict(data["layout"]) if "layout" in data else default_layout(),
        effects=effects_from_dict(data.get("effects", {})),
        sampler=sampler_from_dict(data.get("sampler", {})),
        model=_strict_dataclass(ModelSection, data.get("model", {}), "model"),
        train=_strict_dataclass(TrainConfig, data.get("train", {}), "train"),
        tuner=tuner,
        split=_strict_dataclass(SplitSpec, data.get("split", {}), "split"),
    )


def load_config(path) -> ExperimentConfig:
    if path is None:
        return config_from_dict({})
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"configuration is not valid JSON: {exc}") from exc
    return config_from_dict(data)


# ---------------------------------------------------------------------------
# reports


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.9g}"
    return str(value)


def write_report(path, meta: dict, columns, rows) -> None:
    """CSV report with a deterministic ``# key=value`` preamble."""
    buf = io.StringIO()
    for key in sorted(meta):
        buf.write(f"# {key}={_fmt(meta[key])}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def _dataset_meta(dataset, path) -> dict:
    blob = json.dumps(dataset_header(dataset), sort_keys=True).encode("utf-8")
    return {
        "dataset": str(path),
        "dataset_hash": hashlib.sha256(blob).hexdigest()[:16],
        "dataset_kind": dataset.kind,
        "dataset_count": len(dataset),
        "dataset_seed": dataset.seed,
    }


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> None:
    cfg = load_config(args.config)
    dataset = generate_dataset(
        args.kind, args.count, cfg.layout, cfg.effects, cfg.sampler, args.seed
    )
    save_dataset(dataset, args.out)


def cmd_calibrate(args) -> None:
    dataset = load_dataset(args.dataset)
    calib = calibrate_from_dataset(dataset)
    save_calibration(calib, args.out)
    if args.report:
        rows = [
            (
                j,
                dataset.layout.fbgs[j].plane_index,
                dataset.layout.fbgs[j].lambda_bragg,
                float(calib.i0[j]),
                float(calib.gain[j]),
                float(calib.phi[j]),
                float(calib.residual_rms[j]),
            )
            for j in range(len(dataset.layout.fbgs))
        ]
        write_report(
            args.report,
            _dataset_meta(dataset, args.dataset),
            ("fbg", "plane", "lambda_bragg_nm", "i0", "gain_m", "phi_rad", "residual_rms"),
            rows,
        )


def cmd_dict(args) -> None:
    parts = [load_dataset(p) for p in args.dataset]
    dataset = parts[0] if len(parts) == 1 else Dataset.concatenate(parts)
    dictionary = dictionary_from_dataset(dataset)
    save_dictionary(dictionary, args.out)
    if args.report:
        meta = _dataset_meta(dataset, ";".join(map(str, args.dataset)))
        write_report(args.report, meta, ("entries",), [(len(dictionary),)])


def _split_features(dataset, split: SplitSpec):
    tr, va, te = split_dataset(dataset, split)
    return tr, va, te


def cmd_train(args) -> None:
    cfg = load_config(args.config)
    dataset = load_dataset(args.dataset)
    tr, va, _ = _split_features(dataset, cfg.split)
    model = cfg.model.build()
    history = train(
        model,
        tr.spectra,
        tr.targets(),
        va.spectra,
        va.targets(),
        cfg.train,
    )
    save_checkpoint(
        model,
        args.out,
        meta={
            "config_hash": cfg.hash,
            "train_seed": cfg.train.seed,
            "model_seed": cfg.model.seed,
            "profile": cfg.model.profile,
        },
    )
    if args.report:
        meta = {
            "config_hash": cfg.hash,
            "train_seed": cfg.train.seed,
            "model_seed": cfg.model.seed,
            "split_seed": cfg.split.seed,
            "best_epoch": history.best_epoch,
            "best_val_loss": float(history.best_val_loss),
            **_dataset_meta(dataset, args.dataset),
        }
        rows = [
            (epoch, float(t), float(v))
            for epoch, (t, v) in enumerate(zip(history.train_loss, history.val_loss))
        ]
        write_report(args.report, meta, ("epoch", "train_loss", "val_loss"), rows)


def cmd_tune(args) -> None:
    cfg = load_config(args.config)
    dataset = load_dataset(args.dataset)
    tr, va, _ = _split_features(dataset, cfg.split)
    data = (tr.spectra, tr.targets(), va.spectra, va.targets())
    best = run_search(
        cfg.tuner.space,
        data,
        n_configs=cfg.tuner.n_configs,
        eta=cfg.tuner.eta,
        base_epochs=cfg.tuner.base_epochs,
        max_epochs=cfg.tuner.max_epochs,
        seed=cfg.tuner.seed,
        log_path=args.log,
    )
    if args.report:
        meta = {
            "config_hash": cfg.hash,
            "tuner_seed": cfg.tuner.seed,
            "split_seed": cfg.split.seed,
            **_dataset_meta(dataset, args.dataset),
        }
        doc = dataclasses.asdict(best.config)
        doc["conv_channels"] = "x".join(map(str, best.config.conv_channels))
        columns = ("trial", "epochs", "val_rmse_mm", *sorted(doc))
        row = (best.index, best.epochs, best.val_rmse, *(doc[k] for k in sorted(doc)))
        write_report(args.report, meta, columns, [row])


def _predictions(method, dataset, args):
    if method == "bl":
        if not args.calibration:
            raise InvalidInputError("method bl requires --calibration")
        calib = load_calibration(args.calibration)
        return np.stack(
            [
                predict_shape_bl(
                    dataset.spectra[i, 0].astype(float), calib, dataset.layout
                ).coords
                for i in range(len(dataset))
            ]
        )
    if method == "dl":
        if not args.model:
            raise InvalidInputError("method dl requires --model")
        model, _ = load_checkpoint(args.model)
        return predict_batch(model, dataset.spectra)
    if method == "dict":
        if not args.dictionary:
            raise InvalidInputError("method dict requires --dictionary")
        dictionary = load_dictionary(args.dictionary)
        idx, _ = query_batch(dictionary, dataset.features())
        return dictionary.shapes[idx].astype(float)
    raise InvalidInputError(f"unknown evaluation method {method!r}")


def cmd_eval(args) -> None:
    dataset = load_dataset(args.dataset)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    if not methods:
        raise InvalidInputError("need at least one evaluation method")
    rows = []
    for method in methods:
        pred = _predictions(method, dataset, args)
        stats = ShapeErrorStats.from_predictions(pred, dataset.shapes.astype(float))
        tip_med, tip_iqr, tip_mean = stats.tip_summary
        rmse_med, rmse_iqr, rmse_mean = stats.rmse_summary
        rows.append(
            (method, tip_med, tip_iqr, tip_mean, rmse_med, rmse_iqr, rmse_mean)
        )
    write_report(
        args.report,
        _dataset_meta(dataset, args.dataset),
        (
            "method",
            "tip_median_mm",
            "tip_iqr_mm",
            "tip_mean_mm",
            "rmse_median_mm",
            "rmse_iqr_mm",
            "rmse_mean_mm",
        ),
        rows,
    )


def cmd_explain(args) -> None:
    dataset = load_dataset(args.dataset)
    if not 0 <= args.sample_id < len(dataset):
        raise InvalidInputError(
            f"sample id {args.sample_id} outside the dataset of {len(dataset)} samples"
        )
    model, _ = load_checkpoint(args.model)
    scans = dataset.spectra[args.sample_id].astype(float)
    target = dataset.shapes[args.sample_id].astype(float)
    loss_map = loss_saliency(model, scans, target, h=args.spacing)
    marker_map = marker_saliency(model, scans, h=args.spacing)
    loss_map.to_csv(f"{args.out_prefix}_loss.csv")
    marker_map.to_csv(f"{args.out_prefix}_markers.csv")


def cmd_ablate(args) -> None:
    cfg = load_config(args.config)
    try:
        spacings_mm = [float(x) for x in args.spacings.split(",") if x.strip()]
    except ValueError as exc:
        raise InvalidInputError(f"bad spacing list {args.spacings!r}") from exc
    if not spacings_mm or any(x <= 0 for x in spacings_mm):
        raise InvalidInputError("spacings must be positive millimetres")
    rng = np.random.default_rng(args.seed)
    profiles = [sample_random_shape(cfg.sampler, rng) for _ in range(args.count)]
    result = resolution_ablation(profiles, [x / 1000.0 for x in spacings_mm])
    meta = {
        "config_hash": cfg.hash,
        "seed": args.seed,
        "count": args.count,
    }
    rows = [(mm, result[mm / 1000.0]) for mm in spacings_mm]
    write_report(args.report, meta, ("spacing_mm", "median_tip_error_mm"), rows)


# ---------------------------------------------------------------------------
# argument parsing and entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edgefbg", description="Eccentric-FBG shape sensing toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a dataset file")
    p.add_argument("--kind", required=True, choices=("random", "trajectory", "template"))
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("calibrate", help="fit the intensity baseline")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("dict", help="build a nearest-neighbor dictionary")
    p.add_argument("--dataset", required=True, nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_dict)

    p = sub.add_parser("train", help="train the network on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("tune", help="successive-halving hyperparameter search")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config")
    p.add_argument("--log", help="JSONL trial log path")
    p.add_argument("--report")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("eval", help="evaluate methods on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--methods", default="bl,dl,dict")
    p.add_argument("--model")
    p.add_argument("--calibration")
    p.add_argument("--dictionary")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="perturbation saliency maps for one sample")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--sample-id", type=int, required=True)
    p.add_argument("--spacing", type=float, default=0.1)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("ablate", help="sensing-plane resolution ablation")
    p.add_argument("--spacings", default="50,25,10")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (
        TrainingDivergedError,
        SearchFailedError,
        CalibrationDegenerateError,
        InsufficientExcitationError,
    ) as exc:
        print(f"edgefbg: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataFormatError as exc:
        print(f"edgefbg: file format error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (InvalidInputError, EdgeFbgError) as exc:
        print(f"edgefbg: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"edgefbg: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
