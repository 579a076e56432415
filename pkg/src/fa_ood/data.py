"""Dataset manifests, the benchmark registry and embedding caches.

A manifest is a small JSON document::

    {"schema_version": 1, "name": "toy_id", "class_names": ["class 00", ...],
     "entries": [{"path": "toy_id.npy", "row": 0, "label": 3, "split": "train"}, ...]}

``path`` is relative to the manifest's directory. ``row`` selects a row of
a ``.npy`` array of raw image vectors; entries without ``row`` point at an
image file (real-checkpoint adapter only). OOD manifests have no class
names and every label is ``-1``.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
import numpy as np

from .backend import MIX_GAIN, TOKEN_STD, CacheBackend, l2_normalize, make_toy_backend, write_embedding_cache
from .errors import ConfigError, DataError, FormatError

SCHEMA_VERSION = 1
DATA_ROOT_ENV = "FA_OOD_DATA_ROOT"
SPLITS = ("train", "test")


@dataclass
class ManifestEntry:
    path: str
    label: int
    split: str = "test"
    row: int | None = None

    def to_dict(self) -> dict:
        d = {"path": self.path, "label": self.label, "split": self.split}
        if self.row is not None:
            d["row"] = self.row
        return d


@dataclass
class DatasetManifest:
    name: str
    class_names: list
    entries: list
    base_dir: Path = field(default=Path("."), compare=False)

    @property
    def is_ood(self) -> bool:
        return not self.class_names

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def labels(self, split: str | None = None) -> np.ndarray:
        return np.array([e.label for e in self.select(split)], dtype=np.int64)

    def select(self, split: str | None = None) -> list:
        return [e for e in self.entries if split is None or e.split == split]

    def indices(self, split: str | None = None) -> np.ndarray:
        return np.array([i for i, e in enumerate(self.entries) if split is None or e.split == split], dtype=np.int64)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "class_names": list(self.class_names),
            "entries": [e.to_dict() for e in self.entries],
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _fail(path, pointer: str, msg: str):
    raise FormatError(f"{path}: {pointer or '/'}: {msg}")


def validate_manifest(doc: dict, path="<manifest>") -> DatasetManifest:
    if not isinstance(doc, dict):
        _fail(path, "", "manifest must be a JSON object")
    if doc.get("schema_version") != SCHEMA_VERSION:
        _fail(path, "/schema_version", f"unsupported version {doc.get('schema_version')!r}")
    name = doc.get("name")
    if not isinstance(name, str) or not name:
        _fail(path, "/name", "must be a non-empty string")
    classes = doc.get("class_names", [])
    if not isinstance(classes, list) or not all(isinstance(c, str) for c in classes):
        _fail(path, "/class_names", "must be a list of strings")
    if len(set(classes)) != len(classes):
        _fail(path, "/class_names", "duplicate class names")
    entries = doc.get("entries")
    if not isinstance(entries, list):
        _fail(path, "/entries", "must be a list")
    out = []
    for i, e in enumerate(entries):
        ptr = f"/entries/{i}"
        if not isinstance(e, dict):
            _fail(path, ptr, "must be an object")
        if not isinstance(e.get("path"), str):
            _fail(path, ptr + "/path", "must be a string")
        label = e.get("label")
        if not isinstance(label, int) or isinstance(label, bool):
            _fail(path, ptr + "/label", "must be an integer")
        if classes and not 0 <= label < len(classes):
            _fail(path, ptr + "/label", f"{label} outside [0, {len(classes)})")
        if not classes and label != -1:
            _fail(path, ptr + "/label", f"OOD manifests need label -1, got {label}")
        split = e.get("split", "test")
        if split not in SPLITS:
            _fail(path, ptr + "/split", f"must be one of {SPLITS}")
        row = e.get("row")
        if row is not None and (not isinstance(row, int) or row < 0):
            _fail(path, ptr + "/row", "must be a non-negative integer")
        out.append(ManifestEntry(e["path"], label, split, row))
    return DatasetManifest(name, list(classes), out, Path(path).parent)


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    except ValueError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    return validate_manifest(doc, path)


def save_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=1) + "\n")


def load_raw_images(manifest: DatasetManifest) -> np.ndarray:
    """Raw image vectors for every entry, read from the referenced ``.npy`` rows."""
    arrays: dict[str, np.ndarray] = {}
    rows = []
    for i, e in enumerate(manifest.entries):
        if e.row is None:
            raise DataError(f"{manifest.name}: entry {i} ({e.path}) is an image file, not an array row")
        if e.path not in arrays:
            p = manifest.base_dir / e.path
            try:
                arrays[e.path] = np.load(p)
            except OSError as exc:
                raise DataError(f"{manifest.name}: cannot read {p}: {exc}") from exc
        arr = arrays[e.path]
        if e.row >= len(arr):
            raise DataError(f"{manifest.name}: entry {i} row {e.row} beyond {len(arr)} rows of {e.path}")
        rows.append(arr[e.row])
    return np.stack(rows) if rows else np.zeros((0, 0))


# ---------------------------------------------------------------------------
# encoded features
# ---------------------------------------------------------------------------

@dataclass
class EncodedDataset:
    name: str
    globals_: np.ndarray  # (n, d)
    locals_: np.ndarray  # (n, N, d)
    labels: np.ndarray
    splits: np.ndarray

    def subset(self, split: str) -> "EncodedDataset":
        m = self.splits == split
        return EncodedDataset(self.name, self.globals_[m], self.locals_[m], self.labels[m], self.splits[m])


def encode_manifest(manifest: DatasetManifest, backend) -> EncodedDataset:
    """Run the image side of ``backend`` over every manifest entry."""
    labels = manifest.labels()
    splits = np.array([e.split for e in manifest.entries])
    if isinstance(backend, CacheBackend):
        if len(backend.globals_) != len(manifest.entries):
            raise DataError(
                f"cache {backend.path} holds {len(backend.globals_)} rows, manifest {manifest.name} has {len(manifest.entries)}"
            )
        g, loc = backend.encode_indices(np.arange(len(manifest.entries)))
    elif hasattr(backend, "encode_paths"):
        g, loc = backend.encode_paths([manifest.base_dir / e.path for e in manifest.entries])
    else:
        g, loc = backend.encode_images(load_raw_images(manifest))
    return EncodedDataset(manifest.name, g, loc, labels, splits)


def cache_embeddings(manifest: DatasetManifest, backend, out_path) -> Path:
    """Encode ``manifest`` with ``backend`` and write an FAEMB1 cache + sidecar."""
    enc = encode_manifest(manifest, backend)
    rows = [{"split": e.split, "label": e.label, "source": e.path} for e in manifest.entries]
    out_path = Path(out_path)
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        write_embedding_cache(out_path, enc.globals_, enc.locals_, rows)
    except OSError as exc:
        raise DataError(f"cannot write cache {out_path}: {exc}") from exc
    return out_path


# ---------------------------------------------------------------------------
# benchmark registry
# ---------------------------------------------------------------------------

@dataclass
class BenchmarkSpec:
    name: str
    id_dataset: DatasetManifest
    ood_datasets: list
    root: Path
    synthetic: dict | None = None

    def __post_init__(self):
        if self.id_dataset.num_classes < 2:
            raise DataError(f"{self.name}: ID dataset needs >= 2 classes")
        if not self.ood_datasets:
            raise DataError(f"{self.name}: no OOD datasets")
        names = [m.name for m in self.ood_datasets]
        if self.id_dataset.name in names:
            raise DataError(f"{self.name}: {self.id_dataset.name} listed as both ID and OOD")

    def digests(self) -> dict:
        return {m.name: m.digest() for m in [self.id_dataset, *self.ood_datasets]}


def default_registry_path() -> Path:
    return Path(str(resources.files("fa_ood") / "registry.json"))


def data_root(explicit=None) -> Path:
    if explicit is not None:
        return Path(explicit)
    return Path(os.environ.get(DATA_ROOT_ENV, "fa_ood_data"))


def load_registry(registry_path=None) -> dict:
    path = Path(registry_path) if registry_path else default_registry_path()
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"registry not found: {path}") from None
    if doc.get("schema_version") != SCHEMA_VERSION or not isinstance(doc.get("benchmarks"), dict):
        raise FormatError(f"{path}: not a version-{SCHEMA_VERSION} benchmark registry")
    return doc["benchmarks"]


def resolve_benchmark(name: str, registry_path=None, root=None) -> BenchmarkSpec:
    """Look ``name`` up in the registry and load its manifests.

    Manifest paths are relative to ``root`` (default: ``$FA_OOD_DATA_ROOT``,
    else ``./fa_ood_data``). Synthetic entries are generated there on first use.
    """
    registry = load_registry(registry_path)
    if name not in registry:
        raise ConfigError(f"unknown benchmark {name!r}; registry has {sorted(registry)}")
    entry = registry[name]
    root = data_root(root)
    synth = entry.get("synthetic")
    if synth is not None:
        out_dir = (root / entry["id"]).parent
        stamp = out_dir / ".synthetic.json"
        want = json.dumps({"params": synth, "encoder": toy_constants()}, sort_keys=True)
        if not stamp.exists() or stamp.read_text() != want:
            make_toy_benchmark(out_dir, **synth)
            stamp.write_text(want)
    paths = [entry["id"], *entry["ood"]]
    missing = [str(root / p) for p in paths if not (root / p).exists()]
    if missing:
        raise DataError(
            f"benchmark {name!r}: missing manifests {missing}; place the datasets under "
            f"{root} (or set {DATA_ROOT_ENV}) following the registry paths"
        )
    manifests = [load_manifest(root / p) for p in paths]
    return BenchmarkSpec(name, manifests[0], manifests[1:], root, synth)


# ---------------------------------------------------------------------------
# bundled synthetic benchmark
# ---------------------------------------------------------------------------

def toy_constants() -> dict:
    """Toy-encoder scale constants; part of the synthetic data's identity."""
    return {"token_std": TOKEN_STD, "mix_gain": MIX_GAIN}


def toy_class_names(num_classes: int) -> list:
    return [f"class {i:02d}" for i in range(num_classes)]


def toy_backend_for(synthetic: dict):
    """The toy encoder a synthetic benchmark was generated against."""
    return make_toy_backend(
        toy_class_names(synthetic["num_classes"]),
        seed=synthetic.get("encoder_seed", 0),
        embed_dim=synthetic.get("embed_dim", 32),
        token_dim=synthetic.get("token_dim", 16),
        num_locals=synthetic.get("num_locals", 4),
        max_context_len=synthetic.get("max_context_len", 8),
    )


def _raw_from_targets(backend, targets: np.ndarray, rng) -> np.ndarray:
    """Invert the toy image encoder: per-slice feature targets -> raw vectors."""
    scale = rng.uniform(0.5, 2.0, size=targets.shape[:2] + (1,))
    slices = (targets * scale) @ backend.A  # A orthogonal: A^T applied row-wise
    return slices.reshape(len(targets), -1).astype(np.float32)


def make_toy_benchmark(
    out_dir,
    num_classes: int = 20,
    train_per_class: int = 20,
    test_per_class: int = 25,
    ood_per_set: int = 500,
    encoder_seed: int = 0,
    data_seed: int = 0,
    embed_dim: int = 32,
    token_dim: int = 16,
    num_locals: int = 4,
    max_context_len: int = 8,
    text_weight: float = 1.0,
    class_weight: float = 0.8,
    domain_weight: float = 0.8,
    noise: float = 0.1,
    near_text_weight: float = 0.7,
    name: str = "toy",
) -> list:
    """Write Gaussian-cluster ID/OOD sets in the toy encoder's feature space.

    ID class ``c`` clusters around ``normalize(a t_c + b r_c + g u)`` where
    ``t_c`` is the manual-prompt text feature, ``r_c`` a class-specific random
    direction and ``u`` a direction shared by all ID images. The "near" OOD
    set clusters around random text features without ``r_c`` or ``u``; the
    "far" set around random directions. Returns the written manifest paths.
    """
    from .prompts import build_dual_prompts

    synth = dict(
        num_classes=num_classes, encoder_seed=encoder_seed, embed_dim=embed_dim,
        token_dim=token_dim, num_locals=num_locals, max_context_len=max_context_len,
    )
    backend = toy_backend_for(synth)
    names = toy_class_names(num_classes)
    bank = build_dual_prompts(names, backend.spec, K=0)
    t_o = backend.encode_text(bank.original)
    d, n_slices = embed_dim, max(num_locals, 1)
    rng = np.random.default_rng(data_seed)
    unit = lambda shape: l2_normalize(rng.standard_normal(shape))  # noqa: E731
    domain = unit(d)
    class_dirs = unit((num_classes, d))
    centers = l2_normalize(text_weight * t_o + class_weight * class_dirs + domain_weight * domain)

    def samples(center_rows: np.ndarray) -> np.ndarray:
        targets = center_rows[:, None, :] + noise * rng.standard_normal((len(center_rows), n_slices, d))
        return _raw_from_targets(backend, l2_normalize(targets), rng)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    labels = np.concatenate([
        np.repeat(np.arange(num_classes), train_per_class),
        np.repeat(np.arange(num_classes), test_per_class),
    ])
    split = ["train"] * (num_classes * train_per_class) + ["test"] * (num_classes * test_per_class)
    id_raw = samples(centers[labels])
    sets = [(f"{name}_id", names, id_raw, labels.tolist(), split)]

    near_src = rng.integers(0, num_classes, size=ood_per_set)
    near_centers = l2_normalize(near_text_weight * t_o[near_src] + class_weight * unit((ood_per_set, d)))
    sets.append((f"{name}_ood_near", [], samples(near_centers), [-1] * ood_per_set, ["test"] * ood_per_set))
    sets.append((f"{name}_ood_far", [], samples(unit((ood_per_set, d))), [-1] * ood_per_set, ["test"] * ood_per_set))

    for ds_name, classes, raw, labs, spl in sets:
        np.save(out_dir / f"{ds_name}.npy", raw)
        entries = [
            ManifestEntry(f"{ds_name}.npy", int(lab), s, i) for i, (lab, s) in enumerate(zip(labs, spl))
        ]
        mpath = out_dir / f"{ds_name}.json"
        save_manifest(DatasetManifest(ds_name, classes, entries, out_dir), mpath)
        written.append(mpath)
    return written
