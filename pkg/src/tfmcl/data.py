"""Dataset container, on-disk format, subject-aware splitting and batching."""

from __future__ import annotations

import json
import os
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from tfmcl.errors import DatasetError, InvalidArgumentError
from tfmcl.signal import Window

FORMAT_VERSION = 1
MANIFEST = "manifest.json"


class Dataset:
    """Immutable list of windows sharing (E, T, fs_hz)."""

    def __init__(self, windows: Sequence[Window], ids: Optional[Sequence[str]] = None):
        windows = list(windows)
        if not windows:
            raise DatasetError("dataset is empty")
        first = windows[0]
        for i, w in enumerate(windows):
            if w.samples.shape != first.samples.shape or w.fs_hz != first.fs_hz:
                raise DatasetError(
                    f"window {i} has shape {w.samples.shape} @ {w.fs_hz} Hz, "
                    f"expected {first.samples.shape} @ {first.fs_hz} Hz"
                )
        self.windows: Tuple[Window, ...] = tuple(windows)
        self.ids: Tuple[str, ...] = tuple(ids) if ids is not None else tuple(
            f"w{i:05d}" for i in range(len(windows))
        )
        if len(self.ids) != len(self.windows) or len(set(self.ids)) != len(self.ids):
            raise DatasetError("window ids must be unique and one per window")

    def __len__(self):
        return len(self.windows)

    def __getitem__(self, i):
        return self.windows[i]

    @property
    def fs_hz(self) -> float:
        return self.windows[0].fs_hz

    @property
    def n_channels(self) -> int:
        return self.windows[0].n_channels

    @property
    def window_len(self) -> int:
        return self.windows[0].n_times

    @property
    def labels(self) -> List[Optional[int]]:
        return [w.label for w in self.windows]

    @property
    def is_labeled(self) -> bool:
        return all(w.label is not None for w in self.windows)

    def by_subject(self) -> Dict[str, List[int]]:
        index: Dict[str, List[int]] = defaultdict(list)
        for i, w in enumerate(self.windows):
            index[w.subject_id].append(i)
        return dict(index)

    def subset(self, indices) -> "Dataset":
        indices = list(indices)
        return Dataset([self.windows[i] for i in indices], [self.ids[i] for i in indices])

    def with_labels(self, labels) -> "Dataset":
        ws = [Window(w.samples, w.fs_hz, w.subject_id, None if y is None else int(y))
              for w, y in zip(self.windows, labels)]
        return Dataset(ws, self.ids)

    def require_labels(self):
        for i, w in enumerate(self.windows):
            if w.label is None:
                raise InvalidArgumentError(f"window {self.ids[i]} is unlabeled")


def save_dataset(ds: Dataset, dir_path) -> None:
    os.makedirs(dir_path, exist_ok=True)
    entries = []
    for wid, w in zip(ds.ids, ds.windows):
        fname = f"{wid}.f32"
        np.ascontiguousarray(w.samples, dtype="<f4").tofile(os.path.join(dir_path, fname))
        entries.append({"file": fname, "subject": w.subject_id, "label": w.label})
    manifest = {
        "format_version": FORMAT_VERSION,
        "fs_hz": ds.fs_hz,
        "n_channels": ds.n_channels,
        "window_len": ds.window_len,
        "windows": entries,
    }
    with open(os.path.join(dir_path, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=1)


def _check_manifest(m) -> None:
    if not isinstance(m, dict):
        raise DatasetError("manifest must be a JSON object")
    required = {"format_version", "fs_hz", "n_channels", "window_len", "windows"}
    missing = required - set(m)
    if missing:
        raise DatasetError(f"manifest missing fields: {sorted(missing)}")
    extra = set(m) - required
    if extra:
        raise DatasetError(f"manifest has unknown fields: {sorted(extra)}")
    if m["format_version"] != FORMAT_VERSION:
        raise DatasetError(f"unsupported format_version {m['format_version']!r}")
    for key in ("n_channels", "window_len"):
        if not isinstance(m[key], int) or isinstance(m[key], bool) or m[key] < 1:
            raise DatasetError(f"manifest {key} must be a positive integer")
    if m["window_len"] < 8 or m["window_len"] % 2:
        raise DatasetError("manifest window_len must be even and >= 8")
    if not isinstance(m["fs_hz"], (int, float)) or isinstance(m["fs_hz"], bool) or not m["fs_hz"] > 0:
        raise DatasetError("manifest fs_hz must be a positive number")
    if not isinstance(m["windows"], list) or not m["windows"]:
        raise DatasetError("manifest windows must be a non-empty list")
    for i, e in enumerate(m["windows"]):
        if not isinstance(e, dict) or set(e) != {"file", "subject", "label"}:
            raise DatasetError(f"manifest window entry {i} must have exactly file, subject, label")
        if not isinstance(e["file"], str) or not e["file"]:
            raise DatasetError(f"manifest window entry {i}: file must be a non-empty string")
        if not isinstance(e["subject"], str):
            raise DatasetError(f"manifest window entry {i}: subject must be a string")
        if e["label"] not in (None, 0, 1) or isinstance(e["label"], bool):
            raise DatasetError(f"manifest window entry {i}: label must be 0, 1 or null")


def load_dataset(dir_path) -> Dataset:
    """Read and validate a dataset directory; errors name the offending file."""
    path = os.path.join(dir_path, MANIFEST)
    if not os.path.isfile(path):
        raise DatasetError(f"no {MANIFEST} in {dir_path}")
    try:
        with open(path) as fh:
            m = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{MANIFEST}: invalid JSON ({exc})") from exc
    _check_manifest(m)
    n_ch, n_t = m["n_channels"], m["window_len"]
    expected = n_ch * n_t * 4
    windows, ids = [], []
    for e in m["windows"]:
        fpath = os.path.join(dir_path, e["file"])
        if not os.path.isfile(fpath):
            raise DatasetError(f"{e['file']}: file not found")
        size = os.path.getsize(fpath)
        if size != expected:
            raise DatasetError(f"{e['file']}: {size} bytes, expected {expected}")
        x = np.fromfile(fpath, dtype="<f4").reshape(n_ch, n_t)
        if not np.all(np.isfinite(x)):
            raise DatasetError(f"{e['file']}: non-finite values in payload")
        windows.append(Window(x.astype(np.float32), float(m["fs_hz"]), e["subject"], e["label"]))
        ids.append(os.path.splitext(e["file"])[0])
    try:
        return Dataset(windows, ids)
    except DatasetError as exc:
        raise DatasetError(f"{dir_path}: {exc}") from exc


@dataclass(frozen=True)
class SplitSpec:
    strategy: str = "subject_wise"
    fractions: Tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in ("subject_wise", "window_wise"):
            raise InvalidArgumentError(f"unknown split strategy {self.strategy!r}")
        fr = tuple(float(f) for f in self.fractions)
        if len(fr) != 3 or min(fr) <= 0 or abs(sum(fr) - 1) > 1e-9:
            raise InvalidArgumentError(f"fractions must be 3 positive numbers summing to 1, got {fr}")
        object.__setattr__(self, "fractions", fr)


def _counts(n: int, fractions) -> Tuple[int, int, int]:
    n_val = int(round(n * fractions[1]))
    n_test = int(round(n * fractions[2]))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise InvalidArgumentError(f"{n} units cannot be split into {fractions} with every part non-empty")
    return n_train, n_val, n_test


def _interleave_by_label(units, unit_label, rng):
    """Shuffle units within each label, then round-robin across labels."""
    groups = defaultdict(list)
    for u in units:
        groups[unit_label.get(u)].append(u)
    keys = sorted(groups, key=lambda k: (k is None, k))
    shuffled = [[groups[k][i] for i in rng.permutation(len(groups[k]))] for k in keys]
    out = []
    for i in range(max(len(g) for g in shuffled)):
        out.extend(g[i] for g in shuffled if i < len(g))
    return out


def split(ds: Dataset, spec: SplitSpec):
    """Disjoint, exhaustive (train, val, test) partition.

    Units (subjects or windows) are class-interleaved before cutting, so val and
    test stay close to balanced when labels are present.
    """
    rng = np.random.default_rng(spec.seed)
    if spec.strategy == "subject_wise":
        index = ds.by_subject()
        if len(index) < 3:
            raise InvalidArgumentError(f"subject_wise split needs >= 3 subjects, got {len(index)}")
        units = sorted(index)
        unit_label = {s: ds[index[s][0]].label for s in units}
    else:
        index = {i: [i] for i in range(len(ds))}
        units = list(range(len(ds)))
        unit_label = {i: ds[i].label for i in units}
    n_train, n_val, n_test = _counts(len(units), spec.fractions)
    order = _interleave_by_label(units, unit_label, rng)
    parts = (order[n_test + n_val:], order[n_test:n_test + n_val], order[:n_test])
    return tuple(ds.subset(sorted(i for u in p for i in index[u])) for p in parts)


def make_batches(ds, batch_size: int, seed: int, epoch: int, drop_last: bool = True):
    """Shuffled index batches for one epoch; the permutation depends only on (seed, epoch).

    ``ds`` is a Dataset or a window count.
    """
    n_windows = ds if isinstance(ds, (int, np.integer)) else len(ds)
    if batch_size < 2:
        raise InvalidArgumentError(f"batch_size must be >= 2, got {batch_size}")
    perm = np.random.default_rng([seed, epoch]).permutation(n_windows)
    batches = [perm[i:i + batch_size] for i in range(0, n_windows, batch_size)]
    if batches and (len(batches[-1]) < 2 or (drop_last and len(batches[-1]) < batch_size)):
        batches.pop()
    return batches
