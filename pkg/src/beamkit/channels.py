"""Channel sample generation and the BFDS dataset file format.

Every sample ``i`` draws from its own Philox stream keyed by
``SeedSequence(seed, spawn_key=(i,))``, so a sample's content depends only on
the dataset seed and its index, never on generation order.  Within a stream
the draw order is fixed: user count (only when several are allowed), the
small-scale fading, then distances (only for path-loss modes).

Fading modes:

``rayleigh``
    ``h_k ~ CN(0, I)``: unit average gain per antenna.  The default.
``pathloss``
    ``h_k = sqrt(beta_k / m) g_k`` with ``beta_k`` from the distance path-loss
    model and ``m`` its population mean over the distance range, so the
    average gain is still one.
``raw``
    ``h_k = sqrt(beta_k / noise) g_k`` using the physical noise power
    (-162 dBm/Hz over 10 MHz).

In all modes the receiver noise power of every user is ``gamma``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import crcmod.predefined
import numpy as np

from .core import ChannelSet, SystemConfig
from .errors import CapacityError, FormatError, InvalidInputError

MAGIC = b"BFDS"
VERSION = 1
FLAG_LABELS = 1
FLAG_VARIOUS_K = 2
HEADER = struct.Struct("<4sIIQI")

MAX_ENTRIES = 1 << 28

KINDS = ("TRAIN", "TEST", "BOTH")
FADING_MODES = ("rayleigh", "pathloss", "raw")

BANDWIDTH_HZ = 10e6
NOISE_PSD_DBM_HZ = -162.0
DISTANCE_RANGE_KM = (0.05, 0.3)
PATHLOSS_MODEL = "10^(-(140.7 + 36.7 log10(d_km)) / 10)"

_crc64 = crcmod.predefined.mkCrcFun("crc-64")


def crc64(payload: bytes) -> str:
    return f"{_crc64(payload):016x}"


def pathloss_gain(d_km) -> np.ndarray:
    return 10.0 ** (-(140.7 + 36.7 * np.log10(d_km)) / 10.0)


def physical_noise_power() -> float:
    """Noise power in watts for the stored bandwidth and noise density."""
    return 10.0 ** ((NOISE_PSD_DBM_HZ - 30.0) / 10.0) * BANDWIDTH_HZ


def mean_pathloss_gain() -> float:
    """Population mean of the path-loss gain for distances uniform on the range."""
    lo, hi = DISTANCE_RANGE_KM
    expo = 3.67
    c = 10.0 ** (-14.07)
    # integral of c * d^-expo over [lo, hi], divided by the range length
    return c * (lo ** (1 - expo) - hi ** (1 - expo)) / ((expo - 1) * (hi - lo))


@dataclass(frozen=True)
class DatasetSpec:
    n_antennas: int
    k_users_list: Tuple[int, ...]
    gamma: float
    xi: float
    count: int
    seed: int
    kind: str = "BOTH"
    fading: str = "rayleigh"

    def __post_init__(self):
        ks = tuple(int(k) for k in np.atleast_1d(self.k_users_list))
        object.__setattr__(self, "k_users_list", ks)
        if not ks:
            raise InvalidInputError("k_users_list must be non-empty")
        if any(k < 1 for k in ks):
            raise InvalidInputError("every user count must be at least 1")
        if self.n_antennas < 1:
            raise InvalidInputError("n_antennas must be at least 1")
        if not self.gamma > 0:
            raise InvalidInputError("gamma must be positive")
        if self.xi < 0:
            raise InvalidInputError("xi must be non-negative")
        if self.count < 1:
            raise InvalidInputError("count must be at least 1")
        if not 0 <= self.seed < 2 ** 64:
            raise InvalidInputError("seed must fit in 64 unsigned bits")
        if self.kind not in KINDS:
            raise InvalidInputError(f"kind must be one of {KINDS}")
        if self.fading not in FADING_MODES:
            raise InvalidInputError(f"fading must be one of {FADING_MODES}")

    @property
    def various(self) -> bool:
        return len(set(self.k_users_list)) > 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["k_users_list"] = list(self.k_users_list)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        d["k_users_list"] = tuple(d["k_users_list"])
        return cls(**d)


@dataclass
class Dataset:
    spec: DatasetSpec
    samples: List[ChannelSet]
    labels: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.samples) != self.spec.count:
            raise InvalidInputError(f"{len(self.samples)} samples for a spec of {self.spec.count}")
        for s in self.samples:
            if s.n_antennas != self.spec.n_antennas or s.k_users not in self.spec.k_users_list:
                raise InvalidInputError(f"sample of shape {s.h.shape} does not match the dataset specification")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.float64)
            if self.labels.shape != (self.spec.count,):
                raise InvalidInputError("labels must have one entry per sample")

    def __len__(self):
        return len(self.samples)

    def system_config(self, k_users: int, p_max: float = 1.0, p_circuit: float = 0.5) -> SystemConfig:
        return SystemConfig.uniform(k_users, self.spec.gamma, self.spec.xi, p_max, p_circuit)

    def config_for(self, index: int) -> SystemConfig:
        return self.system_config(self.samples[index].k_users)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        indices = list(indices)
        spec = DatasetSpec(**{**self.spec.to_dict(), "k_users_list": self.spec.k_users_list,
                              "count": len(indices)})
        labels = None if self.labels is None else self.labels[indices]
        return Dataset(spec, [self.samples[i] for i in indices], labels, dict(self.meta))

    def manifest(self) -> dict:
        return {
            "format": MAGIC.decode(),
            "version": VERSION,
            "spec": self.spec.to_dict(),
            "seed": self.spec.seed,
            "creation": {
                "bandwidth_hz": BANDWIDTH_HZ,
                "noise_psd_dbm_hz": NOISE_PSD_DBM_HZ,
                "pathloss_model": PATHLOSS_MODEL,
                "distance_range_km": list(DISTANCE_RANGE_KM),
                "fading": self.spec.fading,
                "rng": "Philox, SeedSequence(seed, spawn_key=(sample_index,))",
            },
            "labels_present": self.labels is not None,
            **self.meta,
        }


def sample_stream(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(index,))))


def generate_sample(spec: DatasetSpec, index: int) -> ChannelSet:
    rng = sample_stream(spec.seed, index)
    ks = spec.k_users_list
    k = ks[int(rng.integers(len(ks)))] if len(ks) > 1 else ks[0]
    n = spec.n_antennas
    g = (rng.standard_normal((k, n)) + 1j * rng.standard_normal((k, n))) / np.sqrt(2.0)
    if spec.fading == "rayleigh":
        return ChannelSet(g)
    d = rng.uniform(*DISTANCE_RANGE_KM, size=k)
    beta = pathloss_gain(d)
    if spec.fading == "pathloss":
        scale = beta / mean_pathloss_gain()
    else:
        scale = beta / physical_noise_power()
    return ChannelSet(np.sqrt(scale)[:, None] * g)


def generate(spec: DatasetSpec) -> Dataset:
    if spec.count * max(spec.k_users_list) * spec.n_antennas > MAX_ENTRIES:
        raise CapacityError(
            f"{spec.count} samples of up to {max(spec.k_users_list)}x{spec.n_antennas} "
            f"exceed the {MAX_ENTRIES}-entry budget")
    return Dataset(spec, [generate_sample(spec, i) for i in range(spec.count)])


def attach_labels(ds: Dataset, labels, source: Optional[str] = None) -> Dataset:
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != (ds.spec.count,):
        raise InvalidInputError(f"expected {ds.spec.count} labels, got {labels.shape}")
    meta = dict(ds.meta)
    if ds.spec.kind == "TRAIN":
        meta["labels_on_train_set"] = True
    if source is not None:
        meta["label_source"] = source
    return Dataset(ds.spec, list(ds.samples), labels.copy(), meta)


# serialization -------------------------------------------------------------

def encode(ds: Dataset) -> bytes:
    flags = (FLAG_LABELS if ds.labels is not None else 0) | (FLAG_VARIOUS_K if ds.spec.various else 0)
    parts = [HEADER.pack(MAGIC, VERSION, ds.spec.n_antennas, ds.spec.count, flags)]
    for s in ds.samples:
        parts.append(struct.pack("<I", s.k_users))
        parts.append(s.h.astype("<c16").tobytes())
    if ds.labels is not None:
        parts.append(ds.labels.astype("<f8").tobytes())
    return b"".join(parts)


def atomic_write(path, data, mode: str = "wb"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def manifest_path(path) -> Path:
    return Path(str(path) + ".json")


def save(ds: Dataset, path) -> dict:
    """Write ``path`` and its ``path.json`` manifest; returns the manifest."""
    payload = encode(ds)
    manifest = ds.manifest()
    manifest["checksum"] = {"algorithm": "crc-64", "value": crc64(payload)}
    manifest["payload_bytes"] = len(payload)
    atomic_write(path, payload)
    atomic_write(manifest_path(path), json.dumps(manifest, indent=2, sort_keys=True) + "\n", "w")
    return manifest


def _take(buf: bytes, offset: int, size: int, what: str) -> bytes:
    if offset + size > len(buf):
        raise FormatError(f"truncated file while reading {what}", offset)
    return buf[offset:offset + size]


def decode(buf: bytes):
    """Parse a BFDS payload into (n_antennas, channel arrays, labels or None, flags)."""
    head = _take(buf, 0, HEADER.size, "header")
    magic, version, n_antennas, count, flags = HEADER.unpack(head)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if n_antennas < 1:
        raise FormatError("n_antennas must be positive", 8)
    offset = HEADER.size
    arrays = []
    for _ in range(count):
        (k,) = struct.unpack("<I", _take(buf, offset, 4, "user count"))
        if k < 1:
            raise FormatError("sample with zero users", offset)
        offset += 4
        nbytes = 16 * k * n_antennas
        raw = _take(buf, offset, nbytes, "channel entries")
        arrays.append(np.frombuffer(raw, dtype="<c16").astype(np.complex128).reshape(k, n_antennas))
        offset += nbytes
    labels = None
    if flags & FLAG_LABELS:
        raw = _take(buf, offset, 8 * count, "labels")
        labels = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        offset += 8 * count
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes after payload", offset)
    return n_antennas, arrays, labels, flags


def load(path) -> Dataset:
    path = Path(path)
    buf = path.read_bytes()
    n_antennas, arrays, labels, flags = decode(buf)
    mpath = manifest_path(path)
    if not mpath.exists():
        raise FormatError(f"manifest {mpath} not found")
    try:
        manifest = json.loads(mpath.read_text())
        spec = DatasetSpec.from_dict(manifest["spec"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable manifest {mpath}: {exc}") from None
    expected = manifest.get("checksum", {}).get("value")
    if expected is not None and expected != crc64(buf):
        raise FormatError("payload checksum does not match manifest")
    if spec.n_antennas != n_antennas or spec.count != len(arrays):
        raise FormatError("payload dimensions disagree with manifest", 8)
    if bool(flags & FLAG_VARIOUS_K) != spec.various:
        raise FormatError("various-K flag disagrees with manifest", 20)
    for a in arrays:
        if a.shape[0] not in spec.k_users_list:
            raise FormatError(f"sample with K={a.shape[0]} not in {spec.k_users_list}")
    meta = {k: manifest[k] for k in ("labels_on_train_set", "label_source") if k in manifest}
    return Dataset(spec, [ChannelSet(a) for a in arrays], labels, meta)
