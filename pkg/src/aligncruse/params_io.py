"""Binary parameter container ("ACRS" format).

Layout: magic ``ACRS``, u32 LE format version, u32 LE record count, then per
record: u32 name length, UTF-8 name, u32 dtype code (0 = f32, 1 = f64),
u32 rank, u32 dims, raw little-endian IEEE-754 payload. The first record is
a numeric echo of the model configuration so shapes are validated on load.
"""

from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

from .autodiff import BnStats, Tensor
from .errors import ConfigurationError, ShapeError
from .model import BN_LAYERS, ModelConfig, ParamStore, param_shapes

MAGIC = b"ACRS"
VERSION = 1
CONFIG_RECORD = "__config__"
_ARCH_CODES = {"align": 0.0, "cruse": 1.0}
_ARCH_NAMES = {0.0: "align", 1.0: "cruse"}


def _config_vector(cfg: ModelConfig, arch: str) -> np.ndarray:
    vec = [
        _ARCH_CODES[arch],
        len(cfg.mic_channels), *cfg.mic_channels,
        len(cfg.far_channels), *cfg.far_channels,
        len(cfg.dec_channels), *cfg.dec_channels,
        *cfg.conv_kernel, cfg.conv_stride_f, cfg.dec_kernel_f,
        cfg.align_pool, cfg.align_proj, cfg.d_max, cfg.gru_channels,
        cfg.n_bins, cfg.causal_decay,
    ]
    return np.asarray(vec, dtype=np.float64)


def _config_from_vector(vec: np.ndarray) -> tuple[ModelConfig, str]:
    it = iter(vec.tolist())
    arch = _ARCH_NAMES.get(next(it))
    if arch is None:
        raise ConfigurationError("unknown architecture code in parameter file")

    def take(n):
        return tuple(int(next(it)) for _ in range(n))

    mic = take(int(next(it)))
    far = take(int(next(it)))
    dec = take(int(next(it)))
    kt, kf, stride, dec_kf, pool, proj, d_max, gru_ch, n_bins = take(9)
    decay = float(next(it))
    cfg = ModelConfig(
        mic_channels=mic, far_channels=far, dec_channels=dec,
        conv_kernel=(kt, kf), conv_stride_f=stride, dec_kernel_f=dec_kf,
        align_pool=pool, align_proj=proj, d_max=d_max, gru_channels=gru_ch,
        n_bins=n_bins, causal_decay=decay,
    )
    return cfg, arch


def write_records(path, records: OrderedDict, dtype: str = "f64") -> None:
    code = {"f32": 0, "f64": 1}[dtype]
    np_dtype = {"f32": "<f4", "f64": "<f8"}[dtype]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(records)))
        for name, arr in records.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr, dtype=np.float64)
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", code, arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.astype(np_dtype).tobytes())


def read_records(path) -> OrderedDict:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ConfigurationError(f"{path}: not a parameter file (bad magic)")
        version, count = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ConfigurationError(f"{path}: unsupported format version {version}")
        records: OrderedDict[str, np.ndarray] = OrderedDict()
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            code, rank = struct.unpack("<II", fh.read(8))
            if code not in (0, 1):
                raise ConfigurationError(f"{path}: unknown dtype code {code}")
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(rank))
            np_dtype = "<f4" if code == 0 else "<f8"
            n_bytes = int(np.prod(shape, dtype=np.int64)) * (4 if code == 0 else 8)
            data = np.frombuffer(fh.read(n_bytes), dtype=np_dtype).astype(np.float64)
            records[name] = data.reshape(shape)
    return records


def save_params(path, store: ParamStore, extra: dict | None = None, dtype: str = "f64") -> None:
    """Writes parameters, batch-norm statistics and optional extra records
    (optimizer state, counters) to one container."""
    records: OrderedDict[str, np.ndarray] = OrderedDict()
    records[CONFIG_RECORD] = _config_vector(store.cfg, store.arch)
    for name, tensor in store.tensors.items():
        records[name] = tensor.data
    for layer, stats in store.bn_stats.items():
        records[f"{layer}.bn.running_mean"] = stats.mean
        records[f"{layer}.bn.running_var"] = stats.var
    for name, arr in (extra or {}).items():
        records[f"extra.{name}"] = np.asarray(arr, dtype=np.float64)
    write_records(path, records, dtype=dtype)


def load_params(path) -> tuple[ParamStore, dict]:
    """Rebuilds a ParamStore; every tensor shape is validated against the
    configuration echoed in the file."""
    records = read_records(path)
    if CONFIG_RECORD not in records:
        raise ConfigurationError(f"{path}: missing configuration record")
    cfg, arch = _config_from_vector(records.pop(CONFIG_RECORD))
    expected = param_shapes(cfg, arch)
    store = ParamStore(cfg, arch)
    for name, shape in expected.items():
        if name not in records:
            raise ShapeError(f"{path}: missing tensor {name!r}")
        arr = records.pop(name)
        if arr.shape != shape:
            raise ShapeError(f"{path}: tensor {name!r} has shape {arr.shape}, expected {shape}")
        store.tensors[name] = Tensor(arr, requires_grad=True)
    for layer in BN_LAYERS:
        stats = BnStats(store.tensors[f"{layer}.bn.gamma"].size)
        mean = records.pop(f"{layer}.bn.running_mean", None)
        var = records.pop(f"{layer}.bn.running_var", None)
        if mean is not None and var is not None:
            if mean.shape != stats.mean.shape or var.shape != stats.var.shape:
                raise ShapeError(f"{path}: bad running-stat shapes for {layer!r}")
            stats.mean, stats.var = mean.copy(), var.copy()
        stats.initialized = True
        store.bn_stats[layer] = stats
    extra = {k[len("extra."):]: v for k, v in records.items() if k.startswith("extra.")}
    return store, extra
