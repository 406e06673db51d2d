"""Task sequences: synthetic split benchmarks and a raw-tensor dataset loader.

Raw-tensor dataset layout
-------------------------
A manifest (JSON) describes one or more splits stored as raw payloads::

    {
      "format": "dualprompt-raw", "version": 1,
      "sample_shape": [8, 8], "num_classes": 20,
      "splits": {
        "train": {"data_file": "train.bin", "data_offset": 0,
                  "label_file": "train.bin", "label_offset": 40960,
                  "count": 80, "sha256": "<hex>"},
        "test": {...}
      }
    }

``data_file`` holds ``count * prod(sample_shape)`` little-endian float64 values
starting at byte ``data_offset``; ``label_file`` holds ``count`` little-endian
int64 labels starting at ``label_offset``.  ``sha256`` covers the data bytes
followed by the label bytes.  Paths are relative to the manifest.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

UPSTREAM_CLASS_OFFSET = 1000


class DataError(ValueError):
    """Inconsistent dataset or task-sequence specification."""


class CorruptionError(DataError):
    """Payload bytes are missing or do not match their checksum."""


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise DataError(f"{len(self.x)} samples but {len(self.y)} labels")

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "Split":
        return Split(self.x[idx], self.y[idx])

    @staticmethod
    def concat(parts: list["Split"]) -> "Split":
        return Split(np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]))


@dataclass
class Task:
    index: int
    classes: tuple[int, ...]
    train: Split
    val: Split
    test: Split


@dataclass
class LabeledDataset:
    train: Split
    test: Split
    upstream: Optional[Split] = None

    @property
    def classes(self) -> list[int]:
        return sorted(set(self.train.y.tolist()) | set(self.test.y.tolist()))


@dataclass
class TaskSequence:
    tasks: list[Task]
    upstream: Optional[Split] = None

    def __len__(self) -> int:
        return len(self.tasks)

    def check(self) -> None:
        seen: set[int] = set()
        for t in self.tasks:
            cls = set(t.classes)
            if cls & seen:
                raise DataError(f"task {t.index} reuses classes {sorted(cls & seen)}")
            seen |= cls
            for name in ("train", "val", "test"):
                labels = set(getattr(t, name).y.tolist())
                if not labels <= cls:
                    raise DataError(f"task {t.index} {name} split has foreign labels {sorted(labels - cls)}")
        if self.upstream is not None and len(self.upstream):
            overlap = set(self.upstream.y.tolist()) & seen
            if overlap:
                raise DataError(f"upstream classes overlap downstream classes {sorted(overlap)}")

    def export_labels_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["task", "split", "index", "label"])
            for t in self.tasks:
                for name in ("train", "val", "test"):
                    for i, y in enumerate(getattr(t, name).y):
                        w.writerow([t.index, name, i, int(y)])
            if self.upstream is not None:
                for i, y in enumerate(self.upstream.y):
                    w.writerow(["upstream", "train", i, int(y)])


# ---------------------------------------------------------------- synthetic generator

@dataclass
class SyntheticSpec:
    num_tasks: int = 5
    classes_per_task: int = 4
    train_per_class: int = 200
    test_per_class: int = 50
    grid: int = 8
    noise: float = 0.3
    diversity: float = 0.5
    task_style: float = 2.5
    upstream_classes: int = 40
    upstream_per_class: int = 50
    domain_offset: float = 0.4
    val_fraction: float = 0.2

    def check(self) -> None:
        if self.num_tasks < 1 or self.classes_per_task < 1:
            raise DataError("need at least one task and one class per task")
        if self.train_per_class < 2 or self.test_per_class < 1:
            raise DataError("train_per_class must be >= 2 and test_per_class >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise DataError(f"val_fraction {self.val_fraction} outside [0, 1)")
        if self.noise < 0 or self.diversity < 0 or self.task_style < 0:
            raise DataError("noise, diversity and task_style must be non-negative")
        if self.grid < 2:
            raise DataError("grid must be >= 2")
        if not np.isfinite(self.domain_offset):
            raise DataError("domain_offset must be finite")

    def to_dict(self) -> dict:
        return asdict(self)


def _pattern(rng: np.random.Generator, g: int) -> np.ndarray:
    """A smooth random field: a few signed Gaussian bumps plus one grating, unit std."""
    yy, xx = np.mgrid[0:g, 0:g].astype(np.float64)
    img = np.zeros((g, g))
    for _ in range(3):
        cy, cx = rng.uniform(0, g - 1, size=2)
        width = rng.uniform(0.8, 2.0)
        img += rng.choice([-1.0, 1.0]) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
    fy, fx = rng.uniform(0.2, 1.2, size=2)
    img += 0.5 * np.cos(fy * yy + fx * xx + rng.uniform(0, 2 * np.pi))
    img -= img.mean()
    return img / (img.std() + 1e-12)


def _draw(rng: np.random.Generator, modes: list[np.ndarray], n: int, spec: SyntheticSpec) -> np.ndarray:
    out = np.empty((n, spec.grid, spec.grid))
    max_shift = int(round(2 * spec.diversity))
    for i in range(n):
        img = modes[rng.integers(len(modes))]
        if max_shift:
            img = np.roll(img, tuple(rng.integers(-max_shift, max_shift + 1, size=2)), axis=(0, 1))
        amp = 1.0 + spec.diversity * rng.uniform(-0.3, 0.3)
        out[i] = amp * img + spec.noise * rng.normal(size=img.shape)
    return out


def _class_modes(rng: np.random.Generator, base: np.ndarray, spec: SyntheticSpec) -> list[np.ndarray]:
    if spec.diversity == 0:
        return [base]
    return [base + spec.diversity * _pattern(rng, spec.grid) for _ in range(3)]


def make_synthetic_sequence(spec: SyntheticSpec, seed: int = 0) -> TaskSequence:
    """Deterministic split benchmark: per-class prototypes, per-task style, perturbations.

    Each task shares a style pattern (weight ``task_style``) across its classes.
    Upstream class ``j`` carries style ``j mod T`` with its own fresh pattern, so
    pre-training sees the styles but never a downstream class.  Each class has
    three perturbed modes when ``diversity > 0``.  Samples get a
    random cyclic shift (up to ``2 * diversity`` pixels), amplitude jitter and
    Gaussian noise.  ``domain_offset`` is added to every downstream pixel but not
    to the upstream split, a domain gap shared by all tasks.  Downstream class ids are ``0 .. T*C-1`` assigned to tasks by
    a random permutation; upstream ids start at 1000.
    """
    spec.check()
    rng = np.random.default_rng(seed)
    g = spec.grid
    n_cls = spec.num_tasks * spec.classes_per_task
    perm = rng.permutation(n_cls)

    styles = [spec.task_style * _pattern(rng, g) for _ in range(spec.num_tasks)]
    train_parts, test_parts = [], []
    for t in range(spec.num_tasks):
        style = styles[t]
        for j in range(spec.classes_per_task):
            cid = int(perm[t * spec.classes_per_task + j])
            modes = _class_modes(rng, _pattern(rng, g) + style, spec)
            train_parts.append(Split(_draw(rng, modes, spec.train_per_class, spec) + spec.domain_offset,
                                     np.full(spec.train_per_class, cid)))
            test_parts.append(Split(_draw(rng, modes, spec.test_per_class, spec) + spec.domain_offset,
                                    np.full(spec.test_per_class, cid)))

    up_parts = []
    for j in range(spec.upstream_classes):
        modes = _class_modes(rng, _pattern(rng, g) + styles[j % spec.num_tasks], spec)
        up_parts.append(Split(_draw(rng, modes, spec.upstream_per_class, spec),
                              np.full(spec.upstream_per_class, UPSTREAM_CLASS_OFFSET + j)))
    upstream = Split.concat(up_parts) if up_parts else Split(np.zeros((0, g, g)), np.zeros(0))

    # tasks follow the generation groups, so the style stays task-specific
    groups = [[int(perm[t * spec.classes_per_task + j]) for j in range(spec.classes_per_task)]
              for t in range(spec.num_tasks)]
    ds = LabeledDataset(Split.concat(train_parts), Split.concat(test_parts), upstream)
    seq = _build_tasks(ds, groups, spec.val_fraction, np.random.default_rng(seed + 1))
    seq.check()
    return seq


def _build_tasks(ds: LabeledDataset, groups: list[list[int]], val_fraction: float,
                 rng: np.random.Generator) -> TaskSequence:
    tasks = []
    for t, classes in enumerate(groups):
        tr_idx, va_idx = [], []
        for c in classes:
            idx = np.flatnonzero(ds.train.y == c)
            idx = idx[rng.permutation(len(idx))]
            n_val = int(round(val_fraction * len(idx)))
            va_idx.append(np.sort(idx[:n_val]))
            tr_idx.append(np.sort(idx[n_val:]))
        tr = np.concatenate(tr_idx) if tr_idx else np.zeros(0, dtype=int)
        va = np.concatenate(va_idx) if va_idx else np.zeros(0, dtype=int)
        te = np.flatnonzero(np.isin(ds.test.y, classes))
        tasks.append(Task(t, tuple(sorted(classes)), ds.train.subset(tr), ds.train.subset(va), ds.test.subset(te)))
    return TaskSequence(tasks, ds.upstream)


def split_by_class(dataset: LabeledDataset, num_tasks: int, seed: int = 0,
                   val_fraction: float = 0.2) -> TaskSequence:
    """Randomly partition the classes into ``num_tasks`` disjoint groups.

    Group sizes differ by at most one; the first ``C mod T`` tasks get the extra class.
    """
    classes = dataset.classes
    if num_tasks < 1 or len(classes) < num_tasks:
        raise DataError(f"cannot split {len(classes)} classes into {num_tasks} tasks")
    rng = np.random.default_rng(seed)
    order = [classes[i] for i in rng.permutation(len(classes))]
    base, extra = divmod(len(classes), num_tasks)
    groups, pos = [], 0
    for t in range(num_tasks):
        size = base + (1 if t < extra else 0)
        groups.append(order[pos:pos + size])
        pos += size
    seq = _build_tasks(dataset, groups, val_fraction, rng)
    seq.check()
    return seq


# ---------------------------------------------------------------- raw tensor files

def _digest(data: bytes, labels: bytes) -> str:
    h = hashlib.sha256()
    h.update(data)
    h.update(labels)
    return h.hexdigest()


def write_raw_tensor_dataset(dataset: LabeledDataset, directory: str | Path,
                             num_classes: Optional[int] = None) -> Path:
    """Write ``dataset`` as a manifest plus one payload file per split."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    splits = {"train": dataset.train, "test": dataset.test}
    if dataset.upstream is not None:
        splits["upstream"] = dataset.upstream
    sample_shape = list(dataset.train.x.shape[1:])
    entries = {}
    for name, split in splits.items():
        data = np.ascontiguousarray(split.x, dtype="<f8").tobytes()
        labels = np.ascontiguousarray(split.y, dtype="<i8").tobytes()
        fname = f"{name}.bin"
        (root / fname).write_bytes(data + labels)
        entries[name] = {
            "data_file": fname, "data_offset": 0,
            "label_file": fname, "label_offset": len(data),
            "count": len(split), "sha256": _digest(data, labels),
        }
    manifest = {
        "format": "dualprompt-raw", "version": 1,
        "sample_shape": sample_shape,
        "num_classes": num_classes if num_classes is not None else len(dataset.classes),
        "splits": entries,
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _read_region(path: Path, offset: int, nbytes: int, what: str) -> bytes:
    if not path.exists():
        raise CorruptionError(f"{what}: payload file {path} is missing")
    with open(path, "rb") as fh:
        fh.seek(offset)
        blob = fh.read(nbytes)
    if len(blob) != nbytes:
        raise CorruptionError(f"{what}: expected {nbytes} bytes at offset {offset} of {path.name}, got {len(blob)}")
    return blob


def load_raw_tensor_dataset(manifest_path: str | Path) -> LabeledDataset:
    mpath = Path(manifest_path)
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {mpath} is not valid JSON: {exc}") from None
    if manifest.get("format") != "dualprompt-raw" or manifest.get("version") != 1:
        raise DataError(f"unsupported manifest format {manifest.get('format')!r} v{manifest.get('version')}")
    shape = tuple(int(s) for s in manifest["sample_shape"])
    if not shape or any(s < 1 for s in shape):
        raise DataError(f"invalid sample_shape {shape}")
    per_sample = int(np.prod(shape))
    splits = {}
    for name, e in manifest["splits"].items():
        n = int(e["count"])
        data = _read_region(mpath.parent / e["data_file"], int(e["data_offset"]), 8 * n * per_sample, name)
        labels = _read_region(mpath.parent / e["label_file"], int(e["label_offset"]), 8 * n, name)
        if _digest(data, labels) != e["sha256"]:
            raise CorruptionError(f"{name}: checksum mismatch")
        x = np.frombuffer(data, dtype="<f8").reshape((n,) + shape).astype(np.float64)
        y = np.frombuffer(labels, dtype="<i8").astype(np.int64)
        splits[name] = Split(x, y)
    if "train" not in splits or "test" not in splits:
        raise DataError("manifest needs at least 'train' and 'test' splits")
    ds = LabeledDataset(splits["train"], splits["test"], splits.get("upstream"))
    declared = int(manifest["num_classes"])
    if len(ds.classes) != declared:
        raise DataError(f"manifest declares {declared} classes but labels contain {len(ds.classes)}")
    return ds
