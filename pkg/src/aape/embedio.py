"""Embedding banks, dataset manifests, split samplers and the planted synthetic benchmark.

Bank file layout (little-endian)::

    b"AAPB" | u32 version=1 | u8 dtype (1=f32, 2=f64) | u32 dim | u64 count | count*dim values

Rows are addressed by their position (ids are dense 0..count-1).
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from .errors import ConfigError, DataError, FormatError

BANK_MAGIC = b"AAPB"
BANK_VERSION = 1
_HEADER = struct.Struct("<4sIBIQ")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPE_CODES = {"f32": 1, "f64": 2}
NOISE_TAGS = ("relevant", "redundant", "irrelevant")


@dataclass(frozen=True)
class EmbeddingBank:
    vectors: np.ndarray
    dtype: str = "f32"

    def __post_init__(self):
        if self.dtype not in _DTYPE_CODES:
            raise ConfigError(f"unknown bank dtype {self.dtype!r}")
        arr = np.ascontiguousarray(self.vectors, dtype=_DTYPES[_DTYPE_CODES[self.dtype]].newbyteorder("="))
        if arr.ndim != 2:
            raise ConfigError(f"bank vectors must be 2-D, got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "vectors", arr)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    def __len__(self):
        return self.count

    def rows(self, ids) -> np.ndarray:
        """Rows promoted to float64 (training always runs in 64-bit)."""
        return self.vectors[np.asarray(ids, dtype=np.int64)].astype(np.float64)

    def to_bytes(self) -> bytes:
        code = _DTYPE_CODES[self.dtype]
        header = _HEADER.pack(BANK_MAGIC, BANK_VERSION, code, self.dim, self.count)
        return header + self.vectors.astype(_DTYPES[code], copy=False).tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, source: str = "<bytes>") -> "EmbeddingBank":
        bank, used = _parse_bank(data, 0, source)
        if used != len(data):
            raise FormatError(f"{source}: {len(data) - used} trailing bytes after payload")
        return bank


def _parse_bank(data: bytes, offset: int, source: str):
    if len(data) - offset < _HEADER.size:
        raise FormatError(f"{source}: truncated header ({len(data) - offset} < {_HEADER.size} bytes)")
    magic, version, code, dim, count = _HEADER.unpack_from(data, offset)
    if magic != BANK_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    if version != BANK_VERSION:
        raise FormatError(f"{source}: unsupported version {version}")
    if code not in _DTYPES:
        raise FormatError(f"{source}: unknown dtype code {code}")
    dt = _DTYPES[code]
    start = offset + _HEADER.size
    nbytes = dim * count * dt.itemsize
    if len(data) - start < nbytes:
        raise FormatError(f"{source}: truncated payload (count={count}, dim={dim})")
    values = np.frombuffer(data, dtype=dt, count=dim * count, offset=start).reshape(count, dim)
    dtype = "f32" if code == 1 else "f64"
    return EmbeddingBank(values.copy(), dtype), start + nbytes


def write_bank(bank: EmbeddingBank, path) -> Path:
    path = Path(path)
    path.write_bytes(bank.to_bytes())
    return path


def read_bank(path) -> EmbeddingBank:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read bank {path}: {exc.strerror}") from exc
    return EmbeddingBank.from_bytes(data, str(path))


def normalize_bank(bank: EmbeddingBank) -> EmbeddingBank:
    v = bank.vectors.astype(np.float64)
    norms = np.linalg.norm(v, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise DataError(f"cannot normalize zero-norm row id {int(zero[0])}")
    return EmbeddingBank(v / norms[:, None], bank.dtype)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ClassRecord:
    name: str
    template_id: int
    prompt_ids: list[int]
    noise_mask: list[str] | None = None

    def to_json(self) -> dict:
        out = {"name": self.name, "template_id": self.template_id, "prompt_ids": list(self.prompt_ids)}
        if self.noise_mask is not None:
            out["noise_mask"] = list(self.noise_mask)
        return out


@dataclass
class ImageRecord:
    embed_id: int
    label: int
    split: str
    fold: str

    def to_json(self) -> dict:
        return {"embed_id": self.embed_id, "class": self.label, "split": self.split, "fold": self.fold}


@dataclass
class DatasetManifest:
    classes: list[ClassRecord]
    images: list[ImageRecord]
    captions: dict[int, list[int]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "classes": [c.to_json() for c in self.classes],
            "images": [im.to_json() for im in self.images],
            "captions": {str(k): list(v) for k, v in sorted(self.captions.items())},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DatasetManifest":
        try:
            classes = [ClassRecord(c["name"], int(c["template_id"]), [int(i) for i in c["prompt_ids"]],
                                   c.get("noise_mask")) for c in doc["classes"]]
            images = [ImageRecord(int(im["embed_id"]), int(im["class"]), im["split"], im["fold"])
                      for im in doc["images"]]
            captions = {int(k): [int(i) for i in v] for k, v in doc.get("captions", {}).items()}
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed manifest: {exc}") from exc
        return cls(classes, images, captions)

    def fold(self, fold: str) -> list[ImageRecord]:
        return [im for im in self.images if im.fold == fold]


@dataclass
class Dataset:
    """A manifest bound to its image bank and text bank (prompts, templates, captions)."""

    manifest: DatasetManifest
    images: EmbeddingBank
    texts: EmbeddingBank

    @property
    def dim(self) -> int:
        return self.images.dim

    @property
    def num_classes(self) -> int:
        return len(self.manifest.classes)

    def with_images(self, images: list[ImageRecord]) -> "Dataset":
        return Dataset(replace(self.manifest, images=images), self.images, self.texts)

    def image_arrays(self, fold: str, classes=None):
        recs = [im for im in self.manifest.fold(fold) if classes is None or im.label in classes]
        ids = [im.embed_id for im in recs]
        x = self.images.rows(ids) if ids else np.zeros((0, self.dim))
        return x, np.array([im.label for im in recs], dtype=np.int64), ids

    def templates(self, classes=None) -> np.ndarray:
        classes = range(self.num_classes) if classes is None else classes
        return self.texts.rows([self.manifest.classes[c].template_id for c in classes])

    def prompt_set(self, label: int) -> np.ndarray:
        return self.texts.rows(self.manifest.classes[label].prompt_ids)

    def caption_set(self, embed_id: int) -> np.ndarray:
        return self.texts.rows(self.manifest.captions[embed_id])

    def classes_with_split(self, split: str) -> list[int]:
        return sorted({im.label for im in self.manifest.images if im.split == split})

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.to_bytes())
        h.update(self.texts.to_bytes())
        h.update(json.dumps(self.manifest.to_json(), sort_keys=True).encode())
        return h.hexdigest()


def validate_dataset(ds: Dataset) -> None:
    """Reference integrity, per-class test coverage, split disjointness and fold leakage."""
    m = ds.manifest
    n_img, n_txt = ds.images.count, ds.texts.count
    if ds.images.dim != ds.texts.dim:
        raise DataError(f"image dim {ds.images.dim} != text dim {ds.texts.dim}")
    for ci, c in enumerate(m.classes):
        if not c.prompt_ids:
            raise DataError(f"class {c.name!r} has an empty prompt set")
        for tid in [c.template_id, *c.prompt_ids]:
            if not 0 <= tid < n_txt:
                raise DataError(f"class {c.name!r} references missing text id {tid}")
        if c.noise_mask is not None and len(c.noise_mask) != len(c.prompt_ids):
            raise DataError(f"class {c.name!r} noise mask does not cover all prompts")
    split_of: dict[int, str] = {}
    for im in m.images:
        if not 0 <= im.embed_id < n_img:
            raise DataError(f"image references missing embedding id {im.embed_id}")
        if not 0 <= im.label < len(m.classes):
            raise DataError(f"image {im.embed_id} has invalid class {im.label}")
        if im.split not in ("base", "new"):
            raise DataError(f"image {im.embed_id} has missing/invalid split tag {im.split!r}")
        if im.fold not in ("train", "test"):
            raise DataError(f"image {im.embed_id} has missing/invalid fold tag {im.fold!r}")
        if split_of.setdefault(im.label, im.split) != im.split:
            raise DataError(f"class {m.classes[im.label].name!r} appears in both base and new splits")
    tested = {im.label for im in m.images if im.fold == "test"}
    for ci, c in enumerate(m.classes):
        if ci not in tested:
            raise DataError(f"class {c.name!r} has no test image")
    check_leakage(m)
    for ids in m.captions.values():
        for tid in ids:
            if not 0 <= tid < n_txt:
                raise DataError(f"caption references missing text id {tid}")


def check_leakage(m: DatasetManifest) -> None:
    train = {im.embed_id for im in m.images if im.fold == "train"}
    test = {im.embed_id for im in m.images if im.fold == "test"}
    both = train & test
    if both:
        raise DataError(f"embedding id {min(both)} appears in both train and test folds")
    train_caps = {c for i in train for c in m.captions.get(i, [])}
    test_caps = {c for i in test for c in m.captions.get(i, [])}
    if train_caps & test_caps:
        raise DataError(f"caption id {min(train_caps & test_caps)} shared by train and test images")


def save_dataset(ds: Dataset, directory) -> dict[str, str]:
    """Write images.aapb, texts.aapb and manifest.json; returns sha256 per file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_bank(ds.images, directory / "images.aapb")
    write_bank(ds.texts, directory / "texts.aapb")
    (directory / "manifest.json").write_text(json.dumps(ds.manifest.to_json(), indent=1, sort_keys=True))
    return {name: hashlib.sha256((directory / name).read_bytes()).hexdigest()
            for name in ("images.aapb", "texts.aapb", "manifest.json")}


def load_dataset(directory, normalize: bool = True) -> Dataset:
    directory = Path(directory)
    try:
        doc = json.loads((directory / "manifest.json").read_text())
    except OSError as exc:
        raise DataError(f"cannot read {directory / 'manifest.json'}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{directory / 'manifest.json'}: {exc}") from exc
    images = read_bank(directory / "images.aapb")
    texts = read_bank(directory / "texts.aapb")
    if normalize:
        images, texts = normalize_bank(images), normalize_bank(texts)
    ds = Dataset(DatasetManifest.from_json(doc), images, texts)
    validate_dataset(ds)
    return ds


# ---------------------------------------------------------------------------
# samplers and views


def kshot_sample(ds: Dataset, k: int, seed: int) -> Dataset:
    """Keep exactly k train images per class that has train images; test fold untouched."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[ImageRecord]] = {}
    for im in ds.manifest.images:
        if im.fold == "train":
            by_class.setdefault(im.label, []).append(im)
    keep: set[int] = set()
    for label in sorted(by_class):
        recs = by_class[label]
        if len(recs) < k:
            raise DataError(f"class {ds.manifest.classes[label].name!r} has {len(recs)} train images, needs {k}")
        chosen = rng.choice(len(recs), size=k, replace=False)
        keep.update(recs[i].embed_id for i in sorted(chosen))
    images = [im for im in ds.manifest.images if im.fold == "test" or im.embed_id in keep]
    return ds.with_images(images)


def base_new_split(ds: Dataset) -> tuple[Dataset, Dataset]:
    """Base view keeps base classes (train + test); new view keeps only new-class test images."""
    for im in ds.manifest.images:
        if im.split not in ("base", "new"):
            raise DataError(f"image {im.embed_id} is missing a base/new split tag")
    base = [im for im in ds.manifest.images if im.split == "base"]
    new = [im for im in ds.manifest.images if im.split == "new" and im.fold == "test"]
    return ds.with_images(base), ds.with_images(new)


# ---------------------------------------------------------------------------
# planted synthetic benchmark


@dataclass(frozen=True)
class SynthConfig:
    """Planted-structure generator settings (defaults are the acceptance benchmark)."""

    classes: int = 20
    dim: int = 64
    images_per_class: int = 32
    prompts: int = 30
    fractions: tuple = (0.4, 0.3, 0.3)
    sigma_img: float = 0.15
    sigma_p: float = 0.15
    modality_offset: float = 0.5
    rotation: float = 1.0
    latent_dim: int | None = None
    centroid_shared: float = 0.0
    template_noise: float = 0.0
    irrelevant_jitter: float | None = None
    train_per_class: int = 16
    captions_per_image: int = 0
    seed: int = 0
    dtype: str = "f32"

    def validate(self) -> None:
        if len(self.fractions) != 3 or any(f < 0 for f in self.fractions):
            raise ConfigError(f"fractions must be three non-negative numbers, got {self.fractions}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError(f"fractions must sum to 1, got {sum(self.fractions)}")
        if self.classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.dim < 8:
            raise ConfigError("dim must be >= 8")
        if self.prompts < 1 or self.images_per_class < 2:
            raise ConfigError("need >= 1 prompt and >= 2 images per class")
        if not 1 <= self.train_per_class < self.images_per_class:
            raise ConfigError("train_per_class must leave at least one test image per class")
        if self.latent_dim is not None and not 1 <= self.latent_dim <= self.dim:
            raise ConfigError("latent_dim must be in [1, dim]")
        if self.centroid_shared < 0 or self.template_noise < 0 or self.rotation < 0:
            raise ConfigError("centroid_shared, template_noise and rotation must be >= 0")

    def to_json(self) -> dict:
        out = asdict(self)
        out["fractions"] = list(self.fractions)
        return out


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def modality_rotation(dim: int, angle: float, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal matrix exp(angle * S) for a random unit-Frobenius-scaled skew-symmetric S."""
    m = rng.normal(size=(dim, dim))
    skew = m - m.T
    skew *= math.sqrt(dim) / np.linalg.norm(skew)
    return expm(angle * skew)


def _prompt_counts(n: int, fractions) -> tuple[int, int, int]:
    rel = max(1, int(round(fractions[0] * n)))
    red = int(round(fractions[1] * n))
    if fractions[0] == 0:
        rel = 0
    red = min(red, n - rel)
    return rel, red, n - rel - red


def synth_dataset(cfg: SynthConfig) -> Dataset:
    """Generate a planted benchmark; a pure function of `cfg`.

    Class centroids are random directions (optionally confined to a
    `latent_dim` subspace and sharing a common component); text vectors see
    the centroids through a fixed rotation (templates also through a fixed
    bias), which plants a nonzero image/text modality gap.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    C, d = cfg.classes, cfg.dim
    r = d if cfg.latent_dim is None else cfg.latent_dim
    basis = np.linalg.qr(rng.normal(size=(d, r)))[0]
    anchor = _unit(rng.normal(size=r))
    z = _unit(cfg.centroid_shared * anchor + rng.normal(size=(C, r)) / math.sqrt(r))
    centroids = z @ basis.T
    rot = modality_rotation(d, cfg.rotation, rng)
    bias = _unit(rng.normal(size=d))
    text_centroids = centroids @ rot.T

    n_img = C * cfg.images_per_class
    labels = np.repeat(np.arange(C), cfg.images_per_class)
    img_vecs = _unit(centroids[labels] + cfg.sigma_img * rng.normal(size=(n_img, d)))

    texts: list[np.ndarray] = []

    def add_text(v: np.ndarray) -> int:
        texts.append(v)
        return len(texts) - 1

    n_rel, n_red, n_irr = _prompt_counts(cfg.prompts, cfg.fractions)
    classes = []
    for c in range(C):
        name_dir = _unit(text_centroids[c] + cfg.template_noise * _unit(rng.normal(size=d)))
        template = _unit(name_dir + cfg.modality_offset * bias)
        tid = add_text(template)
        rel = _unit(text_centroids[c] + cfg.sigma_p * rng.normal(size=(n_rel, d)))
        parents = rng.integers(0, max(n_rel, 1), size=n_red)
        red = _unit(rel[parents] + 0.1 * cfg.sigma_p * rng.normal(size=(n_red, d))) if n_red else np.zeros((0, d))
        if cfg.irrelevant_jitter is None:
            irr = _unit(rng.normal(size=(n_irr, d)))
        else:
            # off-topic prompts of one class share a random theme direction
            theme = _unit(rng.normal(size=d))
            irr = _unit(theme + cfg.irrelevant_jitter * rng.normal(size=(n_irr, d)) / math.sqrt(d))
        vecs = np.concatenate([rel, red, irr])
        tags = ["relevant"] * n_rel + ["redundant"] * n_red + ["irrelevant"] * n_irr
        order = rng.permutation(cfg.prompts)
        pids = [add_text(vecs[i]) for i in order]
        classes.append(ClassRecord(f"class_{c:03d}", tid, pids, [tags[i] for i in order]))

    n_base = math.ceil(C / 2)
    images = []
    captions: dict[int, list[int]] = {}
    for c in range(C):
        ids = np.flatnonzero(labels == c)
        train = set(rng.choice(ids, size=cfg.train_per_class, replace=False).tolist())
        for i in ids:
            images.append(ImageRecord(int(i), c, "base" if c < n_base else "new",
                                      "train" if i in train else "test"))
    if cfg.captions_per_image:
        # captions describe the specific image content, seen through the text-side rotation
        content = img_vecs
        for i in range(n_img):
            caps = _unit(content[i] @ rot.T + cfg.sigma_p * rng.normal(size=(cfg.captions_per_image, d)))
            captions[i] = [add_text(v) for v in caps]

    dtype = cfg.dtype
    ds = Dataset(DatasetManifest(classes, images, captions),
                 EmbeddingBank(img_vecs, dtype), EmbeddingBank(np.array(texts), dtype))
    ds = Dataset(ds.manifest, normalize_bank(ds.images), normalize_bank(ds.texts))
    validate_dataset(ds)
    return ds
