"""Persistent file formats: binary datasets, model checkpoints, calibration
tables, and dictionary indices.

The dataset format is little-endian binary: an 8-byte magic, a
length-prefixed JSON header (format version, scenario kind, count, seed, and
the full layout/effects/sampler configuration), the sample arrays in fixed
order, and a trailing CRC-32 over everything after the magic. Loading
re-validates the magic, version, CRC, and byte counts before any computation,
so corrupted or truncated files fail fast with ``DataFormatError``.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import zlib

import numpy as np

from .baseline import BlCalibration
from .dictionary import SpectrumDictionary, build_dictionary
from .errors import DataFormatError, InvalidInputError
from .nn import (
    Adam,
    BatchNormSpec,
    ConvSpec,
    DenseSpec,
    DropoutSpec,
    FlattenSpec,
    Model,
    ModelConfig,
    PoolSpec,
    ReluSpec,
)
from .optics import (
    BendLossConfig,
    CladdingConfig,
    Dataset,
    EffectsConfig,
    FbgDescriptor,
    FresnelConfig,
    N_GRID,
    N_MARKERS,
    N_PLANES,
    PdlConfig,
    SensorLayout,
    ShapeSamplerConfig,
)

MAGIC = b"EFBGDS01"
FORMAT_VERSION = 1

# Fixed on-disk column order: (field name, little-endian dtype, per-sample shape).
_COLUMNS = (
    ("spectra", "<f4", (3, N_GRID)),
    ("shapes", "<f4", (N_MARKERS, 3)),
    ("plane_kappa", "<f4", (N_PLANES,)),
    ("plane_theta", "<f4", (N_PLANES,)),
    ("sample_seeds", "<u8", ()),
    ("pose_ids", "<i4", ()),
)


# ---------------------------------------------------------------------------
# config (de)serialization


def _strict_dataclass(cls, data, ctx: str, nested: dict | None = None):
    """Build a (frozen) config dataclass from a dict, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise InvalidInputError(f"{ctx} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise InvalidInputError(f"unknown keys in {ctx}: {unknown}")
    kwargs = {}
    for name, value in data.items():
        if nested and name in nested:
            value = _strict_dataclass(nested[name], value, f"{ctx}.{name}")
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise InvalidInputError(f"bad value in {ctx}: {exc}") from exc


_EFFECTS_NESTED = {
    "bendloss": BendLossConfig,
    "pdl": PdlConfig,
    "cladding": CladdingConfig,
    "fresnel_tail": FresnelConfig,
}


def effects_to_dict(effects: EffectsConfig) -> dict:
    return dataclasses.asdict(effects)


def effects_from_dict(data: dict, ctx: str = "effects") -> EffectsConfig:
    return _strict_dataclass(EffectsConfig, data, ctx, _EFFECTS_NESTED)


def sampler_to_dict(sampler: ShapeSamplerConfig) -> dict:
    return dataclasses.asdict(sampler)


def sampler_from_dict(data: dict, ctx: str = "sampler") -> ShapeSamplerConfig:
    return _strict_dataclass(ShapeSamplerConfig, data, ctx)


def layout_to_dict(layout: SensorLayout) -> dict:
    return {
        "length": layout.length,
        "plane_positions": [float(x) for x in layout.plane_positions],
        "grid_start": float(layout.grid[0]),
        "grid_stop": float(layout.grid[-1]),
        "fbgs": [dataclasses.asdict(f) for f in layout.fbgs],
    }


def layout_from_dict(data: dict, ctx: str = "layout") -> SensorLayout:
    if not isinstance(data, dict):
        raise InvalidInputError(f"{ctx} must be a mapping")
    allowed = {"length", "plane_positions", "grid_start", "grid_stop", "fbgs"}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise InvalidInputError(f"unknown keys in {ctx}: {unknown}")
    missing = sorted(allowed - set(data))
    if missing:
        raise InvalidInputError(f"missing keys in {ctx}: {missing}")
    fbgs = tuple(
        _strict_dataclass(FbgDescriptor, f, f"{ctx}.fbgs[{i}]")
        for i, f in enumerate(data["fbgs"])
    )
    return SensorLayout(
        length=float(data["length"]),
        plane_positions=np.asarray(data["plane_positions"], dtype=float),
        fbgs=fbgs,
        grid=np.linspace(float(data["grid_start"]), float(data["grid_stop"]), N_GRID),
    )


# ---------------------------------------------------------------------------
# dataset files


def dataset_header(dataset: Dataset) -> dict:
    return {
        "version": FORMAT_VERSION,
        "kind": dataset.kind,
        "count": len(dataset),
        "seed": dataset.seed,
        "layout": layout_to_dict(dataset.layout),
        "effects": effects_to_dict(dataset.effects),
        "sampler": sampler_to_dict(dataset.sampler),
    }


def save_dataset(dataset: Dataset, path) -> None:
    header = json.dumps(dataset_header(dataset), sort_keys=True).encode("utf-8")
    body = bytearray()
    body += struct.pack("<I", len(header))
    body += header
    n = len(dataset)
    for name, dtype, shape in _COLUMNS:
        arr = np.ascontiguousarray(getattr(dataset, name), dtype=dtype)
        if arr.shape != (n, *shape):
            raise InvalidInputError(f"dataset column {name} has shape {arr.shape}")
        body += arr.tobytes()
    crc = zlib.crc32(bytes(body))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(body)
        fh.write(struct.pack("<I", crc))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 8:
        raise DataFormatError("dataset file is truncated")
    if raw[: len(MAGIC)] != MAGIC:
        raise DataFormatError("bad magic bytes: not a dataset file")
    body, (crc,) = raw[len(MAGIC) : -4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise DataFormatError("checksum mismatch: dataset file is corrupted")
    (header_len,) = struct.unpack("<I", body[:4])
    if 4 + header_len > len(body):
        raise DataFormatError("dataset header overruns the file")
    try:
        header = json.loads(body[4 : 4 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"unreadable dataset header: {exc}") from exc
    if header.get("version") != FORMAT_VERSION:
        raise DataFormatError(f"unsupported format version {header.get('version')!r}")
    n = header.get("count")
    if not isinstance(n, int) or n < 0:
        raise DataFormatError("dataset header has no valid sample count")

    columns = {}
    offset = 4 + header_len
    for name, dtype, shape in _COLUMNS:
        dt = np.dtype(dtype)
        nbytes = n * dt.itemsize * int(np.prod(shape, dtype=int))
        if offset + nbytes > len(body):
            raise DataFormatError(f"dataset column {name} is truncated")
        columns[name] = np.frombuffer(body, dtype=dt, count=n * int(np.prod(shape, dtype=int)), offset=offset).reshape(
            (n, *shape)
        ).copy()
        offset += nbytes
    if offset != len(body):
        raise DataFormatError("trailing bytes after the last dataset column")

    try:
        layout = layout_from_dict(header["layout"])
        effects = effects_from_dict(header["effects"])
        sampler = sampler_from_dict(header["sampler"])
    except (KeyError, InvalidInputError) as exc:
        raise DataFormatError(f"invalid dataset header: {exc}") from exc
    return Dataset(
        kind=header["kind"],
        seed=header["seed"],
        layout=layout,
        effects=effects,
        sampler=sampler,
        **columns,
    )


# ---------------------------------------------------------------------------
# model checkpoints


_SPEC_CLASSES = {
    "conv": ConvSpec,
    "pool": PoolSpec,
    "batchnorm": BatchNormSpec,
    "dropout": DropoutSpec,
    "dense": DenseSpec,
    "relu": ReluSpec,
    "flatten": FlattenSpec,
}
_SPEC_NAMES = {cls: name for name, cls in _SPEC_CLASSES.items()}


def _spec_to_dict(spec) -> dict:
    return {"type": _SPEC_NAMES[type(spec)], **dataclasses.asdict(spec)}


def _spec_from_dict(data: dict, ctx: str):
    kind = data.get("type")
    if kind not in _SPEC_CLASSES:
        raise DataFormatError(f"unknown layer type {kind!r} in {ctx}")
    rest = {k: v for k, v in data.items() if k != "type"}
    try:
        return _strict_dataclass(_SPEC_CLASSES[kind], rest, ctx)
    except InvalidInputError as exc:
        raise DataFormatError(str(exc)) from exc


def save_checkpoint(model: Model, path, optimizer: Adam | None = None, meta: dict | None = None) -> None:
    doc = {
        "format": "edgefbg-checkpoint",
        "version": FORMAT_VERSION,
        "init_scheme": model.config.init_scheme,
        "dtype": model.dtype.name,
        "layers": [_spec_to_dict(s) for s in model.config.layers],
        "shape_trace": [list(s) for s in model.shape_trace],
        "meta": meta or {},
    }
    arrays = {}
    for name, value in model.state_dict().items():
        arrays[f"state/{name}"] = value
    if optimizer is not None:
        doc["adam"] = {"t": optimizer.t, "lr": optimizer.lr, "l2": optimizer.l2}
        for name, value in optimizer.m.items():
            arrays[f"adam.m/{name}"] = value
        for name, value in optimizer.v.items():
            arrays[f"adam.v/{name}"] = value
    arrays["doc"] = np.frombuffer(
        json.dumps(doc, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def _load_npz(path, expected_format: str):
    try:
        archive = np.load(path)
    except (OSError, ValueError) as exc:
        raise DataFormatError(f"unreadable archive {path}: {exc}") from exc
    try:
        doc = json.loads(bytes(archive["doc"]).decode("utf-8"))
    except (KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"missing or invalid document in {path}") from exc
    if doc.get("format") != expected_format:
        raise DataFormatError(f"{path} is not a {expected_format} file")
    return archive, doc


def load_checkpoint(path) -> tuple[Model, dict]:
    archive, doc = _load_npz(path, "edgefbg-checkpoint")
    layers = tuple(
        _spec_from_dict(d, f"layers[{i}]") for i, d in enumerate(doc["layers"])
    )
    config = ModelConfig(layers=layers, init_scheme=doc["init_scheme"])
    model = Model(config, seed=0, dtype=np.dtype(doc["dtype"]))
    try:
        state = {
            name: archive[f"state/{name}"] for name in model.state_dict()
        }
        model.load_state_dict(state)
    except KeyError as exc:
        raise DataFormatError(f"checkpoint is missing parameter {exc}") from exc
    return model, doc


def load_optimizer(model: Model, path) -> Adam:
    """Rebuild the Adam state saved next to a checkpoint's parameters."""
    archive, doc = _load_npz(path, "edgefbg-checkpoint")
    if "adam" not in doc:
        raise DataFormatError("checkpoint carries no optimizer state")
    opt = Adam(model, lr=doc["adam"]["lr"], l2=doc["adam"]["l2"])
    opt.t = int(doc["adam"]["t"])
    try:
        for name in opt.m:
            opt.m[name][...] = archive[f"adam.m/{name}"]
            opt.v[name][...] = archive[f"adam.v/{name}"]
    except KeyError as exc:
        raise DataFormatError(f"checkpoint is missing optimizer slot {exc}") from exc
    return opt


# ---------------------------------------------------------------------------
# calibration and dictionary artifacts


def save_calibration(calib: BlCalibration, path) -> None:
    doc = {"format": "edgefbg-calibration", "version": FORMAT_VERSION}
    with open(path, "wb") as fh:
        np.savez(
            fh,
            doc=np.frombuffer(json.dumps(doc, sort_keys=True).encode("utf-8"), dtype=np.uint8),
            i0=calib.i0,
            gain=calib.gain,
            phi=calib.phi,
            plane_positions=calib.plane_positions,
            residual_rms=calib.residual_rms,
        )


def load_calibration(path) -> BlCalibration:
    archive, _ = _load_npz(path, "edgefbg-calibration")
    try:
        return BlCalibration(
            i0=archive["i0"],
            gain=archive["gain"],
            phi=archive["phi"],
            plane_positions=archive["plane_positions"],
            residual_rms=archive["residual_rms"],
        )
    except KeyError as exc:
        raise DataFormatError(f"calibration file is missing array {exc}") from exc


def save_dictionary(dictionary: SpectrumDictionary, path) -> None:
    doc = {"format": "edgefbg-dictionary", "version": FORMAT_VERSION}
    with open(path, "wb") as fh:
        np.savez(
            fh,
            doc=np.frombuffer(json.dumps(doc, sort_keys=True).encode("utf-8"), dtype=np.uint8),
            features=dictionary.features,
            shapes=dictionary.shapes,
        )


def load_dictionary(path) -> SpectrumDictionary:
    archive, _ = _load_npz(path, "edgefbg-dictionary")
    try:
        return build_dictionary(archive["features"], archive["shapes"])
    except KeyError as exc:
        raise DataFormatError(f"dictionary file is missing array {exc}") from exc
