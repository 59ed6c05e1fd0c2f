"""EEG recordings, annotation files, one-second windowing and dataset splits."""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, FormatError

CANONICAL_ELECTRODES = ("Fp1", "Fp2", "F3", "F4", "C3", "C4", "P3", "P4",
                        "O1", "O2", "F7", "F8", "T3", "T4", "T5", "T6")
KNOWN_ELECTRODES = frozenset(CANONICAL_ELECTRODES + (
    "Fz", "Cz", "Pz", "Oz", "A1", "A2", "T7", "T8", "P7", "P8", "Fpz"))
RECORDING_MAGIC = b"meegnet-recording\n"
RECORDING_VERSION = 1
MANIFEST_VERSION = 1


@dataclass
class Recording:
    case_id: str
    samples: np.ndarray  # (electrodes, n_samples), float32 microvolts
    sampling_rate_hz: int = 500
    electrode_names: tuple[str, ...] = CANONICAL_ELECTRODES
    sex: str = "M"
    age_years: float = 0.0
    syndrome: str = "CAE"

    def __post_init__(self):
        self.electrode_names = tuple(self.electrode_names)
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 2 or self.samples.shape[0] != len(self.electrode_names):
            raise FormatError(
                f"{self.case_id}: samples shape {self.samples.shape} does not match "
                f"{len(self.electrode_names)} electrodes")
        if self.sampling_rate_hz <= 0:
            raise FormatError(f"{self.case_id}: sampling rate must be positive")
        unknown = [e for e in self.electrode_names if e not in KNOWN_ELECTRODES]
        if unknown:
            raise FormatError(f"{self.case_id}: unknown electrode profile, names {unknown}")

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_sec(self) -> float:
        return self.n_samples / self.sampling_rate_hz


@dataclass(frozen=True)
class Annotation:
    onset_sec: float
    offset_sec: float
    electrodes: tuple[int, ...] | str = "all"

    def __post_init__(self):
        if not self.offset_sec > self.onset_sec:
            raise FormatError(f"annotation offset {self.offset_sec} <= onset {self.onset_sec}")
        if self.electrodes != "all":
            object.__setattr__(self, "electrodes", tuple(sorted(set(int(e) for e in self.electrodes))))
            if not self.electrodes:
                raise FormatError("annotation electrode set is empty")

    @property
    def duration(self) -> float:
        return self.offset_sec - self.onset_sec

    def electrode_indices(self, n_electrodes=16) -> tuple[int, ...]:
        if self.electrodes == "all":
            return tuple(range(n_electrodes))
        return self.electrodes


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def recording_bytes(rec: Recording) -> bytes:
    header = {
        "format_version": RECORDING_VERSION,
        "case_id": rec.case_id,
        "sex": rec.sex,
        "age": rec.age_years,
        "syndrome": rec.syndrome,
        "sampling_rate_hz": rec.sampling_rate_hz,
        "electrode_names": list(rec.electrode_names),
        "n_samples_per_electrode": rec.n_samples,
    }
    payload = np.ascontiguousarray(rec.samples.T, dtype="<f4").tobytes()
    return RECORDING_MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" + payload


def save_recording(path, rec: Recording) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(recording_bytes(rec))
    return path


def load_recording(path) -> Recording:
    raw = Path(path).read_bytes()
    if not raw.startswith(RECORDING_MAGIC):
        raise FormatError(f"{path}: not a recording file")
    rest = raw[len(RECORDING_MAGIC):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: header is not terminated")
    try:
        header = json.loads(rest[:nl])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: header is not valid JSON ({exc})") from None
    if header.get("format_version") != RECORDING_VERSION:
        raise FormatError(f"{path}: unsupported format version {header.get('format_version')!r}")
    names = header["electrode_names"]
    n = int(header["n_samples_per_electrode"])
    payload = rest[nl + 1:]
    expected = n * len(names)
    if len(payload) != 4 * expected:
        raise FormatError(
            f"{path}: payload holds {len(payload) // 4} values, header promises {expected} "
            f"({n} samples x {len(names)} electrodes)")
    samples = np.frombuffer(payload, dtype="<f4").reshape(n, len(names)).T
    return Recording(case_id=header["case_id"], samples=samples.astype(np.float32),
                     sampling_rate_hz=int(header["sampling_rate_hz"]),
                     electrode_names=tuple(names), sex=header["sex"],
                     age_years=header["age"], syndrome=header["syndrome"])


def annotations_text(annotations: Sequence[Annotation], electrode_names=CANONICAL_ELECTRODES) -> str:
    buf = io.StringIO()
    buf.write("# onset_sec,offset_sec,electrodes\n")
    for a in annotations:
        if a.electrodes == "all":
            which = "all"
        else:
            which = ";".join(electrode_names[i] for i in a.electrodes)
        buf.write(f"{a.onset_sec!r},{a.offset_sec!r},{which}\n")
    return buf.getvalue()


def save_annotations(path, annotations, electrode_names=CANONICAL_ELECTRODES) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(annotations_text(annotations, electrode_names))
    return path


def parse_annotations(text: str, electrode_names=CANONICAL_ELECTRODES) -> list[Annotation]:
    index = {name: i for i, name in enumerate(electrode_names)}
    out = []
    for row_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = next(csv.reader([line]))
        if len(parts) != 3:
            raise FormatError(f"annotation row {row_no}: expected 3 fields, got {len(parts)}")
        try:
            onset, offset = float(parts[0]), float(parts[1])
        except ValueError:
            raise FormatError(f"annotation row {row_no}: onset/offset are not numbers") from None
        if not offset > onset:
            raise FormatError(f"annotation row {row_no}: offset {offset} <= onset {onset}")
        which = parts[2].strip()
        if which == "all":
            electrodes = "all"
        else:
            names = [n.strip() for n in which.split(";") if n.strip()]
            missing = [n for n in names if n not in index]
            if missing or not names:
                raise FormatError(f"annotation row {row_no}: unknown electrodes {missing or which!r}")
            electrodes = tuple(index[n] for n in names)
        out.append(Annotation(onset, offset, electrodes))
    return out


def load_annotations(path, electrode_names=CANONICAL_ELECTRODES) -> list[Annotation]:
    return parse_annotations(Path(path).read_text(), electrode_names)


def load_case(recording_path, annotation_path=None):
    """Recording plus its annotations (empty if no annotation file is given)."""
    rec = load_recording(recording_path)
    anns = [] if annotation_path is None else load_annotations(annotation_path, rec.electrode_names)
    for a in anns:
        if a.offset_sec > rec.duration_sec + 1e-9:
            raise FormatError(
                f"{annotation_path}: annotation {a.onset_sec}-{a.offset_sec} s exceeds the "
                f"recording length {rec.duration_sec} s")
    return rec, anns


def write_manifest(path, cases, recording_paths, annotation_paths):
    """Dataset manifest: one entry per case with paths relative to the manifest."""
    path = Path(path)
    root = path.parent
    entries = []
    for (rec, _), rp, ap in zip(cases, recording_paths, annotation_paths):
        entries.append({
            "case_id": rec.case_id, "sex": rec.sex, "age": rec.age_years,
            "syndrome": rec.syndrome,
            "recording": Path(rp).relative_to(root).as_posix(),
            "annotations": Path(ap).relative_to(root).as_posix(),
        })
    doc = {"format_version": MANIFEST_VERSION, "cases": entries}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def load_manifest(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: manifest is not valid JSON ({exc})") from None
    if doc.get("format_version") != MANIFEST_VERSION:
        raise FormatError(f"{path}: unsupported manifest version {doc.get('format_version')!r}")
    cases = []
    for entry in doc["cases"]:
        ann = entry.get("annotations")
        cases.append(load_case(path.parent / entry["recording"],
                               None if ann is None else path.parent / ann))
    return cases


# ---------------------------------------------------------------------------
# windowing
# ---------------------------------------------------------------------------

@dataclass
class WindowedDataset:
    X: np.ndarray  # (N, electrodes, samples_per_window)
    Y: np.ndarray  # (N, electrodes) in {0, 1}
    case_ids: np.ndarray  # (N,) str
    onsets: np.ndarray  # (N,) int seconds
    abnormal_seconds: dict = field(default_factory=dict)
    total_seconds: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.X)

    @property
    def cases(self) -> list[str]:
        # order of first appearance
        seen = dict.fromkeys(self.case_ids.tolist())
        return list(seen)

    def subset(self, idx) -> "WindowedDataset":
        idx = np.asarray(idx, dtype=int)
        keep = set(self.case_ids[idx].tolist())
        return WindowedDataset(self.X[idx], self.Y[idx], self.case_ids[idx], self.onsets[idx],
                               {k: v for k, v in self.abnormal_seconds.items() if k in keep},
                               {k: v for k, v in self.total_seconds.items() if k in keep})

    @staticmethod
    def concat(parts: Sequence["WindowedDataset"]) -> "WindowedDataset":
        if not parts:
            raise ConfigError("cannot concatenate an empty list of datasets")
        ab, tot = {}, {}
        for p in parts:
            ab.update(p.abnormal_seconds)
            tot.update(p.total_seconds)
        return WindowedDataset(np.concatenate([p.X for p in parts]),
                               np.concatenate([p.Y for p in parts]),
                               np.concatenate([p.case_ids for p in parts]),
                               np.concatenate([p.onsets for p in parts]), ab, tot)


def _merge(intervals):
    out = []
    for a, b in sorted(intervals):
        if out and a <= out[-1][1]:
            out[-1][1] = max(out[-1][1], b)
        else:
            out.append([a, b])
    return out


def overlap_matrix(n_windows, annotations, n_electrodes, window_sec=1.0):
    """Seconds of annotated time inside each (window, electrode) cell."""
    per_electrode = [[] for _ in range(n_electrodes)]
    for a in annotations:
        for e in a.electrode_indices(n_electrodes):
            per_electrode[e].append((a.onset_sec, a.offset_sec))
    ov = np.zeros((n_windows, n_electrodes))
    starts = np.arange(n_windows) * window_sec
    for e, ivs in enumerate(per_electrode):
        for a, b in _merge(ivs):
            ov[:, e] += np.clip(np.minimum(starts + window_sec, b) - np.maximum(starts, a), 0, None)
    return ov


def label_cells(overlap, rule="majority", min_overlap=0.5):
    if rule == "majority":
        return (overlap >= min_overlap - 1e-9).astype(np.uint8)
    if rule == "any":
        return (overlap > 1e-9).astype(np.uint8)
    raise ConfigError(f"unknown labelling rule {rule!r}; expected 'majority' or 'any'")


def window(rec: Recording, annotations=(), rule="majority", min_overlap=0.5) -> WindowedDataset:
    """Cut a recording into consecutive non-overlapping 1 s windows with per-electrode labels."""
    fs = rec.sampling_rate_hz
    n = rec.n_samples // fs
    if n < 1:
        raise ConfigError(f"{rec.case_id}: recording shorter than one second")
    c = rec.samples.shape[0]
    X = rec.samples[:, :n * fs].reshape(c, n, fs).transpose(1, 0, 2).copy()
    Y = label_cells(overlap_matrix(n, annotations, c), rule, min_overlap)
    abnormal = _annotated_time(annotations)
    return WindowedDataset(X, Y, np.full(n, rec.case_id, dtype=object), np.arange(n),
                           {rec.case_id: abnormal}, {rec.case_id: rec.duration_sec})


def _annotated_time(annotations):
    """Length of the union of annotated intervals, ignoring electrodes."""
    return float(sum(b - a for a, b in _merge([(a.onset_sec, a.offset_sec) for a in annotations])))


def window_cases(cases, rule="majority", min_overlap=0.5) -> WindowedDataset:
    return WindowedDataset.concat([window(r, a, rule, min_overlap) for r, a in cases])


def imbalance_factor(total_time, abnormal_time) -> float:
    """(normal time) / (abnormal time)."""
    if abnormal_time <= 0:
        raise ConfigError("imbalance factor undefined: no abnormal time")
    return (total_time - abnormal_time) / abnormal_time


def dataset_imbalance(ds: WindowedDataset) -> float:
    return imbalance_factor(sum(ds.total_seconds.values()), sum(ds.abnormal_seconds.values()))


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass
class SplitPlan:
    kind: str  # "kfold" or "loco"
    seed: int | None
    folds: list[tuple[np.ndarray, np.ndarray]]
    keys: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.folds)

    def __iter__(self):
        return iter(self.folds)

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.kind.encode())
        for train, test in self.folds:
            h.update(np.asarray(train, dtype="<i8").tobytes())
            h.update(b"|")
            h.update(np.asarray(test, dtype="<i8").tobytes())
            h.update(b"#")
        return h.hexdigest()


def split_kfold(n_or_dataset, k=5, seed=0) -> SplitPlan:
    """Window-level random partition into ``k`` blocks whose sizes differ by at most one."""
    n = n_or_dataset if isinstance(n_or_dataset, (int, np.integer)) else len(n_or_dataset)
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    if n < k:
        raise ConfigError(f"cannot split {n} windows into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    blocks = np.array_split(perm, k)
    folds = []
    for i, test in enumerate(blocks):
        train = np.concatenate([b for j, b in enumerate(blocks) if j != i])
        folds.append((np.sort(train), np.sort(test)))
    return SplitPlan("kfold", seed, folds, [f"fold{i}" for i in range(k)])


def split_loco(ds: WindowedDataset) -> SplitPlan:
    cases = ds.cases
    if len(cases) < 2:
        raise ConfigError("leave-one-case-out needs at least two cases")
    folds = []
    for case in cases:
        mask = ds.case_ids == case
        folds.append((np.flatnonzero(~mask), np.flatnonzero(mask)))
    return SplitPlan("loco", None, folds, list(cases))
