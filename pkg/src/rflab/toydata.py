"""Synthetic conditional tasks with known ground truth.

* Gauss: K classes, x1 ~ N(mu_k, sigma^2 I); the condition is a one-hot
  class vector of length 1.
* Events: a condition sequence of one-hot event ids (or silence); latent
  block ``j`` (frames ``[j r, (j+1) r)``) carries the event's template plus
  Gaussian jitter. A stand-in for audio-visual synchrony.

Dataset files use the ``RFDS`` layout::

    b"RFDS" | u32 version=1 | u32 count
    per item: tensor container {"x1", "c"} | u8 null flag
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from rflab.errors import ConfigurationError, FormatError
from rflab.rng import substream
from rflab.tensor_core.io import read_tensors, write_tensors
from rflab.training import Dataset

DS_MAGIC = b"RFDS"
DS_VERSION = 1
_U32 = struct.Struct("<I")


@dataclass
class GaussTaskSpec:
    num_classes: int = 8
    dim: int = 2
    sigma: float = 0.1
    samples_per_class: int = 1000
    regulate_ratio: int = 1
    radius: float = 2.0
    means: list | None = None
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigurationError(f"sigma must be non-negative, got {self.sigma}")
        mu = self.class_means()
        if mu.shape != (self.num_classes, self.dim):
            raise ConfigurationError(f"means must be {self.num_classes}x{self.dim}, got {mu.shape}")
        diffs = np.linalg.norm(mu[:, None] - mu[None], axis=-1) + np.eye(self.num_classes)
        if np.any(diffs == 0):
            raise ConfigurationError("class means must be pairwise distinct")

    def class_means(self) -> np.ndarray:
        if self.means is not None:
            return np.asarray(self.means, dtype=np.float64)
        if self.dim == 2:
            ang = 2 * np.pi * np.arange(self.num_classes) / self.num_classes
            return self.radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        rng = substream(self.seed, 0, "gauss.means")
        return self.radius * rng.standard_normal((self.num_classes, self.dim))

    @property
    def latent_len(self) -> int:
        return self.regulate_ratio

    def to_dict(self) -> dict:
        return {"kind": "gauss", **asdict(self)}


@dataclass
class EventTaskSpec:
    cond_len: int = 16
    regulate_ratio: int = 4
    num_events: int = 4
    dim: int = 4
    jitter: float = 0.05
    density: float = 0.25
    num_items: int = 2000
    templates: list | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.density <= 1.0:
            raise ConfigurationError(f"density must be in [0, 1], got {self.density}")
        bank = self.template_bank()
        flat = bank.reshape(self.num_events, -1)
        unit = flat / np.linalg.norm(flat, axis=1, keepdims=True)
        cos = np.abs(unit @ unit.T) - np.eye(self.num_events)
        if np.any(cos > 1 - 1e-6):
            raise ConfigurationError("event templates must be pairwise non-collinear")

    def template_bank(self) -> np.ndarray:
        """[K, r, D] templates with unit RMS amplitude."""
        if self.templates is not None:
            return np.asarray(self.templates, dtype=np.float64)
        rng = substream(self.seed, 0, "events.templates")
        shape = (self.regulate_ratio, self.dim)
        bank = []
        while len(bank) < self.num_events:
            cand = rng.standard_normal(shape)
            cand /= np.sqrt(np.mean(cand * cand))
            if all(abs(_cosine(cand, b)) < 0.5 for b in bank):
                bank.append(cand)
        return np.stack(bank)

    @property
    def latent_len(self) -> int:
        return self.cond_len * self.regulate_ratio

    def to_dict(self) -> dict:
        return {"kind": "events", **asdict(self)}


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sum(a * b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def spec_from_dict(d: dict) -> GaussTaskSpec | EventTaskSpec:
    d = dict(d)
    kind = d.pop("kind", None)
    cls = {"gauss": GaussTaskSpec, "events": EventTaskSpec}.get(kind)
    if cls is None:
        raise ConfigurationError(f"unknown task kind {kind!r} (expected 'gauss' or 'events')")
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigurationError(f"unknown {kind} task keys: {sorted(unknown)}")
    return cls(**d)


def gauss_conditions(spec: GaussTaskSpec, labels: np.ndarray) -> np.ndarray:
    return np.eye(spec.num_classes, dtype=np.float32)[labels][:, None, :]


def gen_gauss(spec: GaussTaskSpec, seed: int | None = None, samples_per_class: int | None = None) -> Dataset:
    """Class-major dataset; item ``i`` has label ``i // samples_per_class``."""
    seed = spec.seed if seed is None else seed
    n = spec.samples_per_class if samples_per_class is None else samples_per_class
    labels = np.repeat(np.arange(spec.num_classes), n)
    rng = substream(seed, 0, "gauss.samples")
    noise = rng.standard_normal((labels.size, spec.regulate_ratio, spec.dim))
    x1 = spec.class_means()[labels][:, None, :] + spec.sigma * noise
    return Dataset(x1.astype(np.float32), gauss_conditions(spec, labels))


def gauss_labels(dataset: Dataset) -> np.ndarray:
    return np.argmax(dataset.c[:, 0, :], axis=-1)


def event_conditions(spec: EventTaskSpec, n: int, seed: int) -> np.ndarray:
    """[n, L_c, K] one-hot event ids; all-zero rows are silence."""
    rng = substream(seed, 0, "events.conditions")
    present = rng.random((n, spec.cond_len)) < spec.density
    ids = rng.integers(0, spec.num_events, size=(n, spec.cond_len))
    c = np.zeros((n, spec.cond_len, spec.num_events), dtype=np.float32)
    c[present, ids[present]] = 1.0
    return c


def render_events(spec: EventTaskSpec, c: np.ndarray, jitter_rng: np.random.Generator | None) -> np.ndarray:
    bank = spec.template_bank()
    blocks = np.einsum("njk,krd->njrd", c.astype(np.float64), bank)
    x = blocks.reshape(c.shape[0], spec.latent_len, spec.dim)
    if jitter_rng is not None and spec.jitter > 0:
        x = x + spec.jitter * jitter_rng.standard_normal(x.shape)
    return x.astype(np.float32)


def gen_events(spec: EventTaskSpec, seed: int | None = None, num_items: int | None = None) -> Dataset:
    seed = spec.seed if seed is None else seed
    n = spec.num_items if num_items is None else num_items
    c = event_conditions(spec, n, seed)
    x1 = render_events(spec, c, substream(seed, 0, "events.jitter"))
    return Dataset(x1, c)


def generate(spec, seed: int | None = None) -> Dataset:
    return gen_gauss(spec, seed) if isinstance(spec, GaussTaskSpec) else gen_events(spec, seed)


# --------------------------------------------------------------------------
# Dataset files
# --------------------------------------------------------------------------

def write_dataset(stream, dataset: Dataset) -> None:
    stream.write(DS_MAGIC)
    stream.write(_U32.pack(DS_VERSION))
    stream.write(_U32.pack(len(dataset)))
    for i in range(len(dataset)):
        write_tensors(stream, {"x1": dataset.x1[i], "c": dataset.c[i]})
        stream.write(struct.pack("<B", int(dataset.null[i])))


def store_dataset(path, dataset: Dataset) -> None:
    buf = io.BytesIO()
    write_dataset(buf, dataset)
    Path(path).write_bytes(buf.getvalue())


def read_dataset(stream) -> Dataset:
    head = stream.read(12)
    if len(head) < 12:
        raise FormatError(f"truncated dataset header: {head!r}")
    if head[:4] != DS_MAGIC:
        raise FormatError(f"bad dataset magic {head[:4]!r} (expected {DS_MAGIC!r})")
    (version,) = _U32.unpack(head[4:8])
    if version != DS_VERSION:
        raise FormatError(f"unsupported dataset version {version} (bytes {head[4:8]!r})")
    (count,) = _U32.unpack(head[8:12])
    xs, cs, nulls = [], [], []
    for i in range(count):
        tensors = read_tensors(stream)
        if set(tensors) != {"x1", "c"}:
            raise FormatError(f"dataset item {i} has tensors {sorted(tensors)}, expected ['c', 'x1']")
        flag = stream.read(1)
        if len(flag) != 1:
            raise FormatError(f"truncated dataset: item {i} has no null flag byte")
        xs.append(tensors["x1"])
        cs.append(tensors["c"])
        nulls.append(flag[0] != 0)
    if stream.read(1):
        raise FormatError("trailing bytes after dataset")
    if count == 0:
        return Dataset(np.zeros((0, 0, 0)), np.zeros((0, 0, 0)))
    return Dataset(np.stack(xs), np.stack(cs), np.array(nulls))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return read_dataset(fh)


def store_spec_sidecar(path, spec, extra: dict | None = None) -> None:
    Path(path).write_text(json.dumps({"spec": spec.to_dict(), **(extra or {})}, indent=2, sort_keys=True))
