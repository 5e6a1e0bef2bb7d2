"""Feature/label files, action intervals and the synthetic stream generator.

File formats (text, one record per line)::

    REDFEAT v1 dim=<d> chunks=<n> chunk_seconds=<x>
    <d space-separated floats>          # n lines

    REDLAB v1 classes=<C> chunks=<n>
    <int label>                         # n lines, 0 = background

A manifest lists ``<features path> [<labels path>]`` per line; relative
paths resolve against the manifest's directory.
"""
from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

FEAT_MAGIC = "REDFEAT v1"
LAB_MAGIC = "REDLAB v1"


class DataError(ValueError):
    pass


def _parse_error(path, lineno, msg):
    return DataError(f"{path}:{lineno}: {msg}")


def fmt_float(x: float) -> str:
    return "%.17g" % x


class ActionInterval(NamedTuple):
    t_s: int  # inclusive
    t_e: int  # inclusive
    cls: int


@dataclass
class FeatureSequence:
    video_id: str
    chunks: np.ndarray  # (n, d)
    chunk_seconds: float = 0.25

    def __post_init__(self):
        self.chunks = np.asarray(self.chunks, dtype=np.float64)
        if self.chunks.ndim != 2 or len(self.chunks) == 0 or self.chunks.shape[1] == 0:
            raise DataError(f"{self.video_id}: features must be a nonempty (n, d) array")

    @property
    def d(self) -> int:
        return self.chunks.shape[1]

    def __len__(self) -> int:
        return len(self.chunks)


@dataclass
class LabelTrack:
    labels: np.ndarray  # (n,) ints in 0..C
    n_classes: int
    intervals: list = field(init=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1:
            raise DataError("labels must be one-dimensional")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > self.n_classes):
            raise DataError(f"label outside 0..{self.n_classes}")
        self.intervals = intervals_from_labels(self.labels)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Video:
    features: FeatureSequence
    labels: LabelTrack | None = None

    def __post_init__(self):
        if self.labels is not None and len(self.labels) != len(self.features):
            raise DataError(
                f"{self.features.video_id}: {len(self.labels)} labels for "
                f"{len(self.features)} feature chunks")

    @property
    def video_id(self) -> str:
        return self.features.video_id


def intervals_from_labels(labels) -> list[ActionInterval]:
    """Maximal runs of identical nonzero labels."""
    labels = np.asarray(labels)
    out = []
    t = 0
    n = len(labels)
    while t < n:
        if labels[t] == 0:
            t += 1
            continue
        s = t
        while t + 1 < n and labels[t + 1] == labels[s]:
            t += 1
        out.append(ActionInterval(s, t, int(labels[s])))
        t += 1
    return out


def paint_intervals(n: int, intervals) -> np.ndarray:
    labels = np.zeros(n, dtype=np.int64)
    for iv in intervals:
        labels[iv.t_s:iv.t_e + 1] = iv.cls
    return labels


# ---------------------------------------------------------------- files

def _write_atomic(path, text: str):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def save_features(path, seq: FeatureSequence):
    n, d = seq.chunks.shape
    lines = [f"{FEAT_MAGIC} dim={d} chunks={n} chunk_seconds={fmt_float(seq.chunk_seconds)}"]
    lines.extend(" ".join(fmt_float(x) for x in row) for row in seq.chunks)
    _write_atomic(path, "\n".join(lines) + "\n")


def save_labels(path, track: LabelTrack):
    lines = [f"{LAB_MAGIC} classes={track.n_classes} chunks={len(track)}"]
    lines.extend(str(int(x)) for x in track.labels)
    _write_atomic(path, "\n".join(lines) + "\n")


def _header(path, line, magic, keys):
    if not line.startswith(magic + " "):
        raise _parse_error(path, 1, f"expected header starting with {magic!r}")
    fields_ = dict(kv.split("=", 1) for kv in line[len(magic) + 1:].split() if "=" in kv)
    missing = [k for k in keys if k not in fields_]
    if missing:
        raise _parse_error(path, 1, f"header missing {', '.join(missing)}")
    return fields_


def _read_lines(path):
    try:
        with open(path) as fh:
            return fh.read().splitlines()
    except OSError as e:
        raise DataError(f"{path}: cannot read ({e.strerror})") from None


def load_features(path, video_id: str | None = None) -> FeatureSequence:
    lines = _read_lines(path)
    if not lines:
        raise _parse_error(path, 1, "empty file")
    hdr = _header(path, lines[0], FEAT_MAGIC, ("dim", "chunks", "chunk_seconds"))
    try:
        d, n = int(hdr["dim"]), int(hdr["chunks"])
        secs = float(hdr["chunk_seconds"])
    except ValueError:
        raise _parse_error(path, 1, "malformed header value") from None
    if d < 1 or n < 1 or not secs > 0:
        raise _parse_error(path, 1, "header values must be positive")
    body = lines[1:]
    if len(body) != n:
        raise _parse_error(path, len(lines), f"expected {n} chunk lines, found {len(body)}")
    rows = np.empty((n, d))
    for i, line in enumerate(body):
        parts = line.split()
        if len(parts) != d:
            raise _parse_error(path, i + 2, f"expected {d} values, found {len(parts)}")
        try:
            rows[i] = [float(p) for p in parts]
        except ValueError:
            raise _parse_error(path, i + 2, "unparseable number") from None
        if not np.all(np.isfinite(rows[i])):
            raise _parse_error(path, i + 2, "non-finite feature value")
    vid = video_id if video_id is not None else Path(path).name.split(".")[0]
    return FeatureSequence(vid, rows, secs)


def load_labels(path, n_classes: int | None = None) -> LabelTrack:
    lines = _read_lines(path)
    if not lines:
        raise _parse_error(path, 1, "empty file")
    hdr = _header(path, lines[0], LAB_MAGIC, ("classes", "chunks"))
    try:
        C, n = int(hdr["classes"]), int(hdr["chunks"])
    except ValueError:
        raise _parse_error(path, 1, "malformed header value") from None
    if n_classes is not None and C != n_classes:
        raise _parse_error(path, 1, f"file declares {C} classes, expected {n_classes}")
    if C < 1 or n < 1:
        raise _parse_error(path, 1, "header values must be positive")
    body = lines[1:]
    if len(body) != n:
        raise _parse_error(path, len(lines), f"expected {n} label lines, found {len(body)}")
    labels = np.empty(n, dtype=np.int64)
    for i, line in enumerate(body):
        s = line.strip()
        if not re.fullmatch(r"-?\d+", s):
            raise _parse_error(path, i + 2, f"not an integer label: {line!r}")
        v = int(s)
        if not 0 <= v <= C:
            raise _parse_error(path, i + 2, f"label {v} outside 0..{C}")
        labels[i] = v
    return LabelTrack(labels, C)


def read_manifest(path) -> list[tuple[Path, Path | None]]:
    base = Path(path).parent
    entries = []
    for i, line in enumerate(_read_lines(path)):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if len(parts) > 2:
            raise _parse_error(path, i + 1, "expected '<features> [<labels>]'")
        feat = base / parts[0]
        lab = base / parts[1] if len(parts) == 2 else None
        entries.append((feat, lab))
    if not entries:
        raise DataError(f"{path}: manifest lists no videos")
    return entries


def write_manifest(path, entries):
    lines = [" ".join(str(p) for p in e if p is not None) for e in entries]
    _write_atomic(path, "\n".join(lines) + "\n")


def load_dataset(manifest, n_classes: int | None = None,
                 require_labels: bool = False) -> list[Video]:
    videos = []
    for feat, lab in read_manifest(manifest):
        if lab is None and require_labels:
            raise DataError(f"{manifest}: {feat.name} has no label file")
        fs = load_features(feat)
        lt = load_labels(lab, n_classes) if lab is not None else None
        if lt is not None and len(lt) != len(fs):
            raise DataError(f"{lab}: {len(lt)} labels but {feat} has {len(fs)} chunks")
        videos.append(Video(fs, lt))
    return videos


# ---------------------------------------------------------------- synthetic data

@dataclass(frozen=True)
class SyntheticSpec:
    d: int = 16
    c: int = 3
    videos: int = 8
    chunks: int = 400
    action_rate: float = 0.3
    separation: float = 3.0
    noise: float = 1.0
    smoothing: float = 0.8
    seed: int = 7
    min_action: int = 8
    max_action: int = 24
    chunk_seconds: float = 0.25

    def validate(self):
        if self.d < 1 or self.c < 1 or self.videos < 1 or self.chunks < 1:
            raise ValueError("d, c, videos and chunks must be >= 1")
        if not self.separation > 0:
            raise ValueError("separation must be positive")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")
        if not 0 <= self.smoothing < 1:
            raise ValueError("smoothing must lie in [0, 1)")
        if not 0 <= self.action_rate < 1:
            raise ValueError("action_rate must lie in [0, 1)")
        if not 1 <= self.min_action <= self.max_action:
            raise ValueError("need 1 <= min_action <= max_action")

    def describe(self) -> str:
        return "\n".join(f"{k}={fmt_float(v) if isinstance(v, float) else v}"
                         for k, v in self.__dict__.items()) + "\n"


def class_means(spec: SyntheticSpec) -> np.ndarray:
    """(C+1, d) means; row 0 (background) is zero, rows 1..C have norm s.

    Means are mutually orthogonal when C <= d.
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))
    A = rng.standard_normal((spec.d, spec.c))
    if spec.c <= spec.d:
        Q, R = np.linalg.qr(A)
        A = Q * np.sign(np.diag(R))
    A = A / np.linalg.norm(A, axis=0)
    mu = np.zeros((spec.c + 1, spec.d))
    mu[1:] = spec.separation * A.T
    return mu


def _synthetic_labels(spec: SyntheticSpec, rng) -> np.ndarray:
    n = spec.chunks
    if spec.action_rate == 0:
        return np.zeros(n, dtype=np.int64)
    mean_action = 0.5 * (spec.min_action + spec.max_action)
    mean_gap = mean_action * (1 - spec.action_rate) / spec.action_rate
    lo, hi = max(1, int(round(0.5 * mean_gap))), max(1, int(round(1.5 * mean_gap)))
    labels = np.zeros(n, dtype=np.int64)
    t = int(rng.integers(lo, hi + 1))
    while t < n:
        length = int(rng.integers(spec.min_action, spec.max_action + 1))
        labels[t:t + length] = int(rng.integers(1, spec.c + 1))
        t += length + int(rng.integers(lo, hi + 1))
    return labels


def synthetic_mean_track(labels, mu: np.ndarray, smoothing: float) -> np.ndarray:
    """Noise-free feature track.

    Action chunks sit at their class mean. Background chunks follow the
    backward recursion m[k] = rho * m[k+1] toward the next action, so a
    background chunk delta steps before an onset of class c carries
    rho**delta * mu_c.
    """
    labels = np.asarray(labels)
    m = mu[labels].copy()
    nxt = np.zeros(mu.shape[1])
    for k in range(len(labels) - 1, -1, -1):
        if labels[k] == 0:
            nxt = smoothing * nxt
            m[k] = nxt
        else:
            nxt = m[k]
    return m


def gen_synthetic(spec: SyntheticSpec) -> list[Video]:
    spec.validate()
    mu = class_means(spec)
    videos = []
    for v in range(spec.videos):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 2, v]))
        labels = _synthetic_labels(spec, rng)
        feats = synthetic_mean_track(labels, mu, spec.smoothing)
        if spec.noise > 0:
            feats = feats + spec.noise * rng.standard_normal(feats.shape)
        fs = FeatureSequence(f"video_{v:04d}", feats, spec.chunk_seconds)
        videos.append(Video(fs, LabelTrack(labels, spec.c)))
    return videos


def write_dataset(out_dir, videos: list[Video], spec: SyntheticSpec | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for v in videos:
        fname = f"{v.video_id}.feat"
        save_features(out / fname, v.features)
        lname = None
        if v.labels is not None:
            lname = f"{v.video_id}.lab"
            save_labels(out / lname, v.labels)
        entries.append((fname, lname))
    write_manifest(out / "manifest.txt", entries)
    if spec is not None:
        _write_atomic(out / "spec.txt", spec.describe())
    return out / "manifest.txt"
