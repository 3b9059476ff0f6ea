"""Volume files, brain masks, dataset manifests and the synthetic fMRI generator.

Binary layouts (little-endian throughout)::

    volume file  "BVOL" u32 version u32 nx u32 ny u32 nz u32 n_timepoints
                 u8 label[n_timepoints]
                 f32 voxels[n_timepoints][nz][ny][nx]      (x fastest)

    mask file    "BMSK" u32 version u32 nx u32 ny u32 nz
                 u8 keep[nz][ny][nx]                       (x fastest)

The file order is recovered with a Fortran-order ravel of each volume.
In memory, volumes are float64 ``(n_timepoints, nx, ny, nz)`` arrays; writing
rounds them to float32, so a series read back from disk round-trips exactly.
"""
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .exceptions import FormatError
from .linalg import random_orthogonal

VOLUME_MAGIC = b"BVOL"
MASK_MAGIC = b"BMSK"
FORMAT_VERSION = 1

REST, NEUTRAL, NEGATIVE = 0, 1, 2
CONDITION_NAMES = ("rest", "neutral", "negative")

_VOL_HEADER = struct.Struct("<4s5I")
_MASK_HEADER = struct.Struct("<4s4I")


@dataclass
class VolumeSeries:
    subject_id: str
    run_id: str
    volumes: np.ndarray  # (n_timepoints, nx, ny, nz) float64
    labels: np.ndarray  # (n_timepoints,) uint8

    def __post_init__(self):
        self.volumes = np.asarray(self.volumes, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.volumes.ndim != 4:
            raise ValueError(f"volumes must have shape (t, nx, ny, nz), got {self.volumes.shape}")
        if len(self.labels) != len(self.volumes):
            raise ValueError(
                f"{len(self.labels)} labels for {len(self.volumes)} volumes"
            )
        if not np.all(np.isfinite(self.volumes)):
            raise ValueError("volumes contain non-finite intensities")

    @property
    def dims(self):
        return tuple(int(d) for d in self.volumes.shape[1:])

    def __len__(self):
        return len(self.labels)

    def __eq__(self, other):
        if not isinstance(other, VolumeSeries):
            return NotImplemented
        return (
            self.subject_id == other.subject_id
            and self.run_id == other.run_id
            and self.volumes.shape == other.volumes.shape
            and np.array_equal(self.volumes.view(np.uint64), other.volumes.view(np.uint64))
            and np.array_equal(self.labels, other.labels)
        )


@dataclass
class BrainMask:
    keep: np.ndarray  # (nx, ny, nz) bool

    def __post_init__(self):
        self.keep = np.asarray(self.keep, dtype=bool)
        if self.keep.ndim != 3:
            raise ValueError("mask must be 3-D")
        if not self.keep.any():
            raise ValueError("mask keeps no voxels")

    @property
    def dims(self):
        return tuple(int(d) for d in self.keep.shape)

    @property
    def flat_indices(self):
        """Kept voxel indices in x-fastest order."""
        return np.flatnonzero(self.keep.ravel(order="F"))

    @classmethod
    def full(cls, dims):
        return cls(np.ones(dims, dtype=bool))

    @classmethod
    def ellipsoid(cls, dims):
        axes = [(np.arange(n) - (n - 1) / 2.0) / (n / 2.0) for n in dims]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return cls(gx**2 + gy**2 + gz**2 <= 1.0)


def write_volume_file(path, series):
    nt = len(series)
    nx, ny, nz = series.dims
    with open(path, "wb") as fh:
        fh.write(_VOL_HEADER.pack(VOLUME_MAGIC, FORMAT_VERSION, nx, ny, nz, nt))
        fh.write(series.labels.astype(np.uint8).tobytes())
        payload = np.ascontiguousarray(series.volumes.transpose(0, 3, 2, 1), dtype="<f4")
        fh.write(payload.tobytes())


def read_volume_file(path, subject_id=None, run_id=None):
    """Read a BVOL file; ids default to the file stem."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _VOL_HEADER.size:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    magic, version, nx, ny, nz, nt = _VOL_HEADER.unpack_from(raw, 0)
    if magic != VOLUME_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    if min(nx, ny, nz) == 0:
        raise FormatError(f"{path}: zero volume dimension", offset=8)
    off = _VOL_HEADER.size
    if len(raw) < off + nt:
        raise FormatError(f"{path}: truncated label block", offset=len(raw))
    labels = np.frombuffer(raw, dtype=np.uint8, count=nt, offset=off).copy()
    off += nt
    n_vox = nx * ny * nz
    expected = off + 4 * nt * n_vox
    if len(raw) < expected:
        raise FormatError(
            f"{path}: truncated payload, expected {expected} bytes, found {len(raw)}",
            offset=len(raw),
        )
    if len(raw) > expected:
        raise FormatError(f"{path}: {len(raw) - expected} trailing bytes", offset=expected)
    data = np.frombuffer(raw, dtype="<f4", count=nt * n_vox, offset=off)
    volumes = data.reshape(nt, nz, ny, nx).transpose(0, 3, 2, 1).astype(np.float64)
    stem = os.path.splitext(os.path.basename(path))[0]
    return VolumeSeries(
        subject_id=stem if subject_id is None else subject_id,
        run_id=stem if run_id is None else run_id,
        volumes=volumes,
        labels=labels,
    )


def write_mask_file(path, mask):
    nx, ny, nz = mask.dims
    with open(path, "wb") as fh:
        fh.write(_MASK_HEADER.pack(MASK_MAGIC, FORMAT_VERSION, nx, ny, nz))
        fh.write(mask.keep.ravel(order="F").astype(np.uint8).tobytes())


def read_mask_file(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _MASK_HEADER.size:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    magic, version, nx, ny, nz = _MASK_HEADER.unpack_from(raw, 0)
    if magic != MASK_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    n = nx * ny * nz
    if len(raw) != _MASK_HEADER.size + n:
        raise FormatError(
            f"{path}: expected {n} mask bytes, found {len(raw) - _MASK_HEADER.size}",
            offset=min(len(raw), _MASK_HEADER.size + n),
        )
    flat = np.frombuffer(raw, dtype=np.uint8, offset=_MASK_HEADER.size)
    if np.any(flat > 1):
        bad = int(np.argmax(flat > 1))
        raise FormatError(f"{path}: mask byte is not 0/1", offset=_MASK_HEADER.size + bad)
    return BrainMask(flat.reshape(nz, ny, nx).transpose(2, 1, 0).astype(bool))


def apply_mask(series, mask):
    """Return the ``timepoints x kept-voxels`` float64 matrix of a series."""
    if series.dims != mask.dims:
        raise ValueError(f"series dims {series.dims} do not match mask dims {mask.dims}")
    flat = series.volumes.transpose(0, 3, 2, 1).reshape(len(series), -1)
    return flat[:, mask.flat_indices]


# -- manifests ---------------------------------------------------------------


def write_manifest(path, entries):
    """Write ``(subject_id, run_id, path)`` triples as JSON lines."""
    with open(path, "w", encoding="utf-8") as fh:
        for subject_id, run_id, vol_path in entries:
            fh.write(json.dumps({"subject_id": subject_id, "run_id": run_id, "path": vol_path}))
            fh.write("\n")


def read_manifest(path):
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                entries.append((str(obj["subject_id"]), str(obj["run_id"]), str(obj["path"])))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: bad manifest line ({exc})") from exc
    return entries


def load_dataset(directory):
    """Load ``manifest.jsonl`` and ``mask.bmsk`` from a dataset directory.

    Relative volume paths are resolved against the directory. Returns
    ``(series_list, mask)``; the mask is ``None`` when no mask file exists.
    """
    manifest = os.path.join(directory, "manifest.jsonl")
    if not os.path.exists(manifest):
        raise FileNotFoundError(manifest)
    series = []
    for subject_id, run_id, vol_path in read_manifest(manifest):
        full = vol_path if os.path.isabs(vol_path) else os.path.join(directory, vol_path)
        series.append(read_volume_file(full, subject_id=subject_id, run_id=run_id))
    mask_path = os.path.join(directory, "mask.bmsk")
    mask = read_mask_file(mask_path) if os.path.exists(mask_path) else None
    return series, mask


# -- synthetic data ----------------------------------------------------------


@dataclass
class SynthSpec:
    n_subjects: int = 11
    # int, or one run count per subject
    runs_per_subject: object = 2
    timepoints_per_run: int = 200
    n_voxels_latent: int = 300
    dims: tuple = (16, 16, 11)
    class_signal_amplitude: float = 1.0
    noise_sigma: float = 0.1
    seed: int = 0
    block_length: int = 10

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        runs = self.run_counts()
        if self.n_subjects < 1 or self.timepoints_per_run < 1 or self.n_voxels_latent < 1:
            raise ValueError("synthetic counts must be >= 1")
        if min(runs) < 1 or len(runs) != self.n_subjects:
            raise ValueError("need one run count >= 1 per subject")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError("dims must be three positive voxel counts")

    def run_counts(self):
        if isinstance(self.runs_per_subject, (int, np.integer)):
            return [int(self.runs_per_subject)] * self.n_subjects
        return [int(r) for r in self.runs_per_subject]

    def to_dict(self):
        d = dict(self.__dict__)
        d["dims"] = list(self.dims)
        if not isinstance(self.runs_per_subject, (int, np.integer)):
            d["runs_per_subject"] = [int(r) for r in self.runs_per_subject]
        return d


@dataclass
class GroundTruth:
    latent_patterns: np.ndarray  # (n_classes, n_voxels_latent)
    informative_indices: dict  # subject_id -> flat x-fastest voxel indices
    mixing_seeds: dict  # subject_id -> seed of the orthogonal mixing
    mixing: dict = field(default_factory=dict)  # subject_id -> (k, k)

    def mixing_for(self, subject_id):
        if subject_id not in self.mixing:
            k = self.latent_patterns.shape[1]
            self.mixing[subject_id] = random_orthogonal(k, self.mixing_seeds[subject_id])
        return self.mixing[subject_id]

    def to_json(self):
        return json.dumps(
            {
                "latent_patterns": self.latent_patterns.tolist(),
                "informative_indices": {k: v.tolist() for k, v in self.informative_indices.items()},
                "mixing_seeds": self.mixing_seeds,
            }
        )

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        return cls(
            latent_patterns=np.asarray(obj["latent_patterns"], dtype=np.float64),
            informative_indices={
                k: np.asarray(v, dtype=np.int64) for k, v in obj["informative_indices"].items()
            },
            mixing_seeds={k: int(v) for k, v in obj["mixing_seeds"].items()},
        )

    def nearest_mean_predict(self, series):
        """Classify each volume by its nearest latent class pattern after unmixing."""
        flat = series.volumes.transpose(0, 3, 2, 1).reshape(len(series), -1).astype(np.float64)
        signal = flat[:, self.informative_indices[series.subject_id]]
        latent = signal @ self.mixing_for(series.subject_id).T
        d = ((latent[:, None, :] - self.latent_patterns[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(d, axis=1)


def block_design(n_timepoints, run_index=0, block_length=10):
    """Condition label per timepoint.

    Blocks cycle rest, neutral, rest, negative (odd runs swap the two task
    blocks), giving a 50/25/25 rest/neutral/negative split.
    """
    cycle = [REST, NEUTRAL, REST, NEGATIVE] if run_index % 2 == 0 else [REST, NEGATIVE, REST, NEUTRAL]
    blocks = np.arange(n_timepoints) // block_length
    return np.array([cycle[b % 4] for b in blocks], dtype=np.uint8)


def synth_generate(spec):
    """Generate ``(series_list, mask, ground_truth)`` for a :class:`SynthSpec`.

    Each condition has one latent pattern in a shared ``n_voxels_latent``
    space. Every subject sees the same block design and expresses the latent
    pattern through its own orthogonal mixing, written into a fixed set of
    voxels inside the brain mask; i.i.d. Gaussian noise is added everywhere.
    """
    ss = np.random.SeedSequence(spec.seed)
    pattern_seq, index_seq, mixing_seq, noise_seq = ss.spawn(4)
    k = spec.n_voxels_latent
    mask = BrainMask.ellipsoid(spec.dims)
    inside = mask.flat_indices
    if k > len(inside):
        raise ValueError(f"n_voxels_latent={k} exceeds the {len(inside)} in-mask voxels")

    patterns = spec.class_signal_amplitude * np.random.default_rng(pattern_seq).standard_normal(
        (len(CONDITION_NAMES), k)
    )
    informative = np.sort(np.random.default_rng(index_seq).choice(inside, size=k, replace=False))
    mixing_seeds = np.random.default_rng(mixing_seq).integers(0, 2**31 - 1, size=spec.n_subjects)
    noise_rngs = [np.random.default_rng(s) for s in noise_seq.spawn(spec.n_subjects)]

    n_vox = int(np.prod(spec.dims))
    nx, ny, nz = spec.dims
    series = []
    truth = GroundTruth(latent_patterns=patterns, informative_indices={}, mixing_seeds={})
    for s, n_runs in enumerate(spec.run_counts()):
        subject_id = f"sub-{s:02d}"
        truth.informative_indices[subject_id] = informative
        truth.mixing_seeds[subject_id] = int(mixing_seeds[s])
        mixing = truth.mixing_for(subject_id)
        expressed = patterns @ mixing  # (n_classes, k) in the subject's voxel space
        for r in range(n_runs):
            labels = block_design(spec.timepoints_per_run, r, spec.block_length)
            flat = np.zeros((spec.timepoints_per_run, n_vox))
            flat[:, informative] = expressed[labels]
            if spec.noise_sigma > 0:
                flat += spec.noise_sigma * noise_rngs[s].standard_normal(flat.shape)
            volumes = flat.reshape(-1, nz, ny, nx).transpose(0, 3, 2, 1)
            series.append(VolumeSeries(subject_id, f"run-{r + 1:02d}", volumes, labels))
    return series, mask, truth


def subject_matrices(series_list, mask):
    """Concatenate each subject's runs (in run order) into one masked matrix.

    Returns an ordered dict-like list of ``(subject_id, X, labels)``.
    """
    by_subject = {}
    for s in series_list:
        by_subject.setdefault(s.subject_id, []).append(s)
    out = []
    for subject_id in sorted(by_subject):
        runs = sorted(by_subject[subject_id], key=lambda s: s.run_id)
        X = np.vstack([apply_mask(r, mask) for r in runs])
        y = np.concatenate([r.labels for r in runs]).astype(np.int64)
        out.append((subject_id, X, y))
    return out
