"""
On-disk formats: tensor files, checkpoint and dataset directories, and the
CSV and text reports written by the command line.

Tensor file layout: the magic bytes, a version byte, a dtype byte, a rank
byte, ``rank`` little-endian u64 dimensions and the row-major little-endian
payload. Complex arrays are stored as real arrays with a trailing axis of 2.
"""
import logging
import os
import struct

import numpy as np

from ifnoapp.config import ModelConfig
from ifnoapp.constants import (
    CHECKPOINT_DIR,
    DATASET_MANIFEST,
    DTYPE_REAL32,
    DTYPE_REAL64,
    LOSS_HISTORY_HEADER,
    MANIFEST_FILE,
    META_FILE,
    METRICS_HEADER,
    STATS_DIR,
    TENSOR_MAGIC,
    TENSOR_SUFFIX,
    TENSOR_VERSION)
from ifnoapp.datagen import DarcyDataset, Normalizer
from ifnoapp.ifno import IFNOModel
from ifnoapp.utils import (
    FingerprintError,
    StorageError,
    fingerprint,
    format_key_values,
    format_mean_std,
    parse_key_values)
from ifnoapp.vae import VAEParams

logger = logging.getLogger(__name__)

_DTYPE_CODES = {np.dtype(np.float32): DTYPE_REAL32, np.dtype(np.float64): DTYPE_REAL64}
_CODE_DTYPES = {DTYPE_REAL32: np.dtype("<f4"), DTYPE_REAL64: np.dtype("<f8")}
_MANIFEST_DTYPES = {"f32": np.float32, "f64": np.float64,
                    "c64": np.complex64, "c128": np.complex128}
_DTYPE_NAMES = {np.dtype(value): key for key, value in _MANIFEST_DTYPES.items()}
NORMALIZER_FIELDS = ("a_mean", "a_std", "u_mean", "u_std")


def encode_tensor(array):
    """
    Serialize a real float32/float64 array to bytes.
    """
    array = np.asarray(array)
    code = _DTYPE_CODES.get(array.dtype)
    if code is None:
        raise StorageError(f"unsupported tensor dtype {array.dtype}")
    if array.ndim > 255:
        raise StorageError(f"rank {array.ndim} does not fit the tensor header")
    header = TENSOR_MAGIC + struct.pack("<BBB", TENSOR_VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + np.ascontiguousarray(array, dtype=_CODE_DTYPES[code]).tobytes()


def decode_tensor(blob, source="<bytes>"):
    """
    Parse bytes produced by encode_tensor.
    """
    prefix = len(TENSOR_MAGIC) + 3
    if len(blob) < prefix or blob[:len(TENSOR_MAGIC)] != TENSOR_MAGIC:
        raise StorageError(f"{source}: not a tensor file")
    version, code, rank = struct.unpack("<BBB", blob[len(TENSOR_MAGIC):prefix])
    if version != TENSOR_VERSION:
        raise StorageError(f"{source}: unsupported tensor version {version}")
    if code not in _CODE_DTYPES:
        raise StorageError(f"{source}: unknown dtype code {code}")
    dims_end = prefix + 8 * rank
    if len(blob) < dims_end:
        raise StorageError(f"{source}: truncated header")
    shape = struct.unpack(f"<{rank}Q", blob[prefix:dims_end])
    dtype = _CODE_DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(blob) - dims_end != expected:
        raise StorageError(f"{source}: payload has {len(blob) - dims_end} bytes, expected {expected}")
    data = np.frombuffer(blob, dtype=dtype, offset=dims_end).reshape(shape)
    return data.astype(dtype.newbyteorder("="))


def write_tensor(path, array):
    """
    Write a real array to ``path``.
    """
    try:
        with open(path, "wb") as handle:
            handle.write(encode_tensor(array))
    except OSError as error:
        raise StorageError(f"cannot write tensor '{path}': {error}") from error


def read_tensor(path):
    """
    Read a real array from ``path``.
    """
    try:
        with open(path, "rb") as handle:
            blob = handle.read()
    except OSError as error:
        raise StorageError(f"cannot read tensor '{path}': {error}") from error
    return decode_tensor(blob, source=path)


def to_storable(array):
    """
    Real view of an array: complex values become a trailing (real, imag) axis.
    """
    array = np.asarray(array)
    if np.iscomplexobj(array):
        return np.stack([array.real, array.imag], axis=-1)
    return array


def from_storable(array, dtype):
    dtype = np.dtype(dtype)
    if dtype.kind == "c":
        if array.shape[-1:] != (2,):
            raise StorageError(f"complex tensor needs a trailing axis of 2, got {array.shape}")
        return (array[..., 0] + 1j * array[..., 1]).astype(dtype)
    return array.astype(dtype)


def write_text(path, text):
    try:
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(text)
    except OSError as error:
        raise StorageError(f"cannot write '{path}': {error}") from error


def read_text(path):
    try:
        with open(path, "r", encoding="utf-8") as handle:
            return handle.read()
    except OSError as error:
        raise StorageError(f"cannot read '{path}': {error}") from error


def ensure_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as error:
        raise StorageError(f"cannot create directory '{path}': {error}") from error
    return path


def _read_key_value_file(path):
    values = {}
    for line in read_text(path).splitlines():
        line = line.strip()
        if line:
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


class Checkpoint:
    """
    Trained parameters with their architecture and normalization statistics.
    """

    def __init__(self, model, vae, normalizer, config):
        self.model = model
        self.vae = vae
        self.normalizer = normalizer
        self.config = config

    def named_parameters(self):
        yield from self.model.named_parameters()
        yield from self.vae.named_parameters()


def save_checkpoint(path, model, vae, normalizer):
    """
    Write one tensor per named parameter, ``manifest.txt``, ``meta.txt``
    and the normalization statistics under ``path``.
    """
    ensure_dir(path)
    ensure_dir(os.path.join(path, STATS_DIR))
    lines = []
    for name, param in list(model.named_parameters()) + list(vae.named_parameters()):
        relative = name + TENSOR_SUFFIX
        write_tensor(os.path.join(path, relative), to_storable(param.data))
        shape = "x".join(str(dim) for dim in param.shape)
        lines.append(f"{name}={relative} shape={shape} dtype={_DTYPE_NAMES[param.dtype]}\n")
    write_text(os.path.join(path, MANIFEST_FILE), "".join(lines))

    meta = model.config.serialize()
    meta_lines = [f"{key}={meta[key]}\n" for key in sorted(meta)]
    meta_lines.append(f"fingerprint={fingerprint(meta)}\n")
    write_text(os.path.join(path, META_FILE), "".join(meta_lines))

    for key, value in normalizer.serialize().items():
        write_tensor(os.path.join(path, STATS_DIR, key + TENSOR_SUFFIX), value)
    logger.info("Saved checkpoint to %s", path)


def read_meta(path):
    """
    Model configuration of a checkpoint, verified against its stored fingerprint.
    """
    meta = _read_key_value_file(os.path.join(path, META_FILE))
    stored = meta.pop("fingerprint", None)
    if stored != fingerprint(meta):
        raise FingerprintError(f"meta of '{path}' does not match its fingerprint")
    try:
        return ModelConfig.from_mapping(meta)
    except (KeyError, ValueError) as error:
        raise StorageError(f"malformed meta in '{path}': {error}") from error


def _read_manifest(path):
    entries = {}
    for line in read_text(os.path.join(path, MANIFEST_FILE)).splitlines():
        if not line.strip():
            continue
        tokens = parse_key_values(line)
        name, relative = next(iter(tokens.items()))
        shape = tuple(int(dim) for dim in tokens.get("shape", "").split("x") if dim)
        dtype = _MANIFEST_DTYPES.get(tokens.get("dtype"))
        if dtype is None:
            raise StorageError(f"manifest entry '{name}' has an unknown dtype")
        entries[name] = (relative, shape, dtype)
    return entries


def load_checkpoint(path, expected=None):
    """
    Load a checkpoint directory.

    :param expected: Optional ModelConfig the checkpoint must match.
    :raises FingerprintError: The checkpoint was written for another configuration.
    """
    if not os.path.isdir(path):
        raise StorageError(f"checkpoint '{path}' does not exist")
    config = read_meta(path)
    if expected is not None and expected.fingerprint() != config.fingerprint():
        raise FingerprintError(
            f"checkpoint '{path}' has fingerprint {config.fingerprint()}, "
            f"configuration expects {expected.fingerprint()}")

    rng = np.random.default_rng(0)
    model = IFNOModel.init(config, rng)
    vae = VAEParams.init(config, rng)
    entries = _read_manifest(path)
    for name, param in list(model.named_parameters()) + list(vae.named_parameters()):
        if name not in entries:
            raise StorageError(f"checkpoint '{path}' has no parameter '{name}'")
        relative, shape, dtype = entries[name]
        data = from_storable(read_tensor(os.path.join(path, relative)), dtype)
        if data.shape != param.shape or shape != param.shape:
            raise StorageError(f"parameter '{name}' has shape {data.shape}, expected {param.shape}")
        param.data = np.ascontiguousarray(data.astype(param.dtype))

    stats = {key: read_tensor(os.path.join(path, STATS_DIR, key + TENSOR_SUFFIX))
             for key in NORMALIZER_FIELDS}
    return Checkpoint(model, vae, Normalizer(**stats), config)


def stage_checkpoint_path(out_dir, name):
    return os.path.join(out_dir, CHECKPOINT_DIR, name)


def _geometry_tokens(geometry):
    tokens = {}
    for key, value in geometry.serialize().items():
        if isinstance(value, (tuple, list)):
            value = ",".join(repr(float(v)) for v in value)
        else:
            value = repr(float(value))
        tokens[key] = value
    return tokens


def sample_file(path, field_name, index):
    return os.path.join(path, f"{field_name}_{index:05d}{TENSOR_SUFFIX}")


def save_dataset(path, train, test, info, noise, normalizer):
    """
    Write every sample as ``a_k``/``u_k`` tensor files (training split first),
    the ``dataset.txt`` manifest and the ``stats/`` directory.

    :param info: Mapping written as the first manifest line.
    :param noise: NoiseSpec of the training split.
    """
    ensure_dir(path)
    ensure_dir(os.path.join(path, STATS_DIR))
    lines = [format_key_values(info) + "\n"]
    index = 0
    for split, dataset in (("train", train), ("test", test)):
        for k in range(len(dataset)):
            write_tensor(sample_file(path, "a", index), dataset.a[k])
            write_tensor(sample_file(path, "u", index), dataset.u[k])
            tokens = {"index": index, "seed": dataset.seeds[k], "kind": dataset.kind,
                      "eta": info.get("eta", 0.0) if split == "train" else 0.0,
                      "split": split}
            if dataset.geometries:
                tokens.update(_geometry_tokens(dataset.geometries[k]))
            lines.append(format_key_values(tokens) + "\n")
            index += 1
    write_text(os.path.join(path, DATASET_MANIFEST), "".join(lines))

    write_tensor(os.path.join(path, STATS_DIR, "sigma_f" + TENSOR_SUFFIX), noise.sigma_f)
    write_tensor(os.path.join(path, STATS_DIR, "sigma_u" + TENSOR_SUFFIX), noise.sigma_u)
    for key, value in normalizer.serialize().items():
        write_tensor(os.path.join(path, STATS_DIR, key + TENSOR_SUFFIX), value)
    logger.info("Saved %d samples to %s", index, path)


def load_dataset(path):
    """
    Read a dataset directory.

    :return: (train DarcyDataset, test DarcyDataset, info mapping)
    """
    manifest = os.path.join(path, DATASET_MANIFEST)
    if not os.path.isfile(manifest):
        raise StorageError(f"dataset '{path}' has no {DATASET_MANIFEST}")
    lines = [line for line in read_text(manifest).splitlines() if line.strip()]
    if not lines:
        raise StorageError(f"dataset manifest '{manifest}' is empty")
    info = parse_key_values(lines[0])
    splits = {"train": ([], [], []), "test": ([], [], [])}
    for line in lines[1:]:
        tokens = parse_key_values(line)
        try:
            index = int(tokens["index"])
            a_list, u_list, seeds = splits[tokens["split"]]
            seeds.append(int(tokens["seed"]))
        except (KeyError, ValueError) as error:
            raise StorageError(f"malformed manifest line '{line}'") from error
        a_list.append(read_tensor(sample_file(path, "a", index)))
        u_list.append(read_tensor(sample_file(path, "u", index)))

    kind = info.get("kind", "dline")
    datasets = []
    for split in ("train", "test"):
        a_list, u_list, seeds = splits[split]
        if not a_list:
            raise StorageError(f"dataset '{path}' has no {split} samples")
        datasets.append(DarcyDataset(a=np.stack(a_list), u=np.stack(u_list),
                                     kind=kind, seeds=seeds))
    return datasets[0], datasets[1], info


def read_dataset_normalizer(path):
    stats = {key: read_tensor(os.path.join(path, STATS_DIR, key + TENSOR_SUFFIX))
             for key in NORMALIZER_FIELDS}
    return Normalizer(**stats)


def write_loss_history(path, history):
    rows = [LOSS_HISTORY_HEADER + "\n"] + [report.csv_row() + "\n" for report in history]
    write_text(path, "".join(rows))


def read_loss_history(path, report_type):
    """
    Parse a loss history CSV into ``report_type`` instances.
    """
    reports = []
    lines = read_text(path).splitlines()
    if not lines or lines[0].strip() != LOSS_HISTORY_HEADER:
        raise StorageError(f"'{path}' is not a loss history")
    columns = LOSS_HISTORY_HEADER.split(",")
    for line in lines[1:]:
        if not line.strip():
            continue
        values = dict(zip(columns, line.split(",")))
        reports.append(report_type(
            epoch=int(values.pop("epoch")), stage=int(values.pop("stage")),
            **{key: float(value) for key, value in values.items()}))
    return reports


def write_metrics(path, report):
    """
    Per-sample metrics as ``sample,rel_l2_fwd,rel_l2_inv`` rows.
    """
    rows = [METRICS_HEADER + "\n"]
    for index, (fwd, inv) in enumerate(zip(report.forward, report.inverse)):
        rows.append(f"{index},{float(fwd)!r},{float(inv)!r}\n")
    write_text(path, "".join(rows))


def write_summary(path, report, label=None):
    lines = []
    if label:
        lines.append(f"{label}\n")
    lines.append(f"forward {format_mean_std(report.forward_mean, report.forward_std)}\n")
    lines.append(f"inverse {format_mean_std(report.inverse_mean, report.inverse_std)}\n")
    lines.append(f"samples {len(report.forward)}\n")
    if report.seed is not None:
        lines.append(f"seed {report.seed}\n")
    if report.fingerprint:
        lines.append(f"fingerprint {report.fingerprint}\n")
    write_text(path, "".join(lines))


def write_grid_csv(path, grid):
    """
    Write a 2-D array as comma separated rows.
    """
    try:
        np.savetxt(path, np.asarray(grid), fmt="%.17g", delimiter=",")
    except OSError as error:
        raise StorageError(f"cannot write '{path}': {error}") from error


def write_map(out_dir, name, grid):
    """
    Write ``name.tnsr`` and ``name.csv`` for a 2-D map.
    """
    write_tensor(os.path.join(out_dir, name + TENSOR_SUFFIX), np.asarray(grid))
    write_grid_csv(os.path.join(out_dir, name + ".csv"), grid)
