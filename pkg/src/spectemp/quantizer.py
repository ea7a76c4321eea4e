"""K-means codebooks that turn spectral patches and temporal frames into labels."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .gridding import GridConfig, patch_vectors, frame_vectors

CODEBOOK_MAGIC = b"STCB"
CODEBOOK_VERSION = 1
FRAMES_MAGIC = b"STXF"
FRAMES_VERSION = 1

SOURCES = ("spectral_patch", "temporal_frame", "external_embedding")
PROJECTIONS = ("identity", "fixed_random_orthonormal")
SPECTRAL_TARGET_DIM = 256


class CodebookError(ValueError):
    pass


@dataclass
class ProjectionSpec:
    in_dim: int
    out_dim: int
    kind: str = "identity"
    matrix: np.ndarray | None = None  # (out_dim, in_dim) float32; None for identity

    def __post_init__(self):
        if self.kind not in PROJECTIONS:
            raise CodebookError(f"unknown projection kind {self.kind!r}")
        if self.kind == "identity":
            if self.in_dim != self.out_dim:
                raise CodebookError("identity projection requires in_dim == out_dim")
            self.matrix = None
        else:
            m = np.asarray(self.matrix, dtype=np.float32)
            if m.shape != (self.out_dim, self.in_dim):
                raise CodebookError(f"projection matrix shape {m.shape} != {(self.out_dim, self.in_dim)}")
            self.matrix = m

    @classmethod
    def identity(cls, dim: int) -> "ProjectionSpec":
        return cls(dim, dim, "identity")

    @classmethod
    def random_orthonormal(cls, in_dim: int, out_dim: int, seed: int = 0) -> "ProjectionSpec":
        if out_dim > in_dim:
            raise CodebookError("orthonormal rows need out_dim <= in_dim")
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((in_dim, out_dim)))
        return cls(in_dim, out_dim, "fixed_random_orthonormal", q.T)

    @classmethod
    def for_patches(cls, patch_dim: int, seed: int = 0) -> "ProjectionSpec":
        # 16x16 patches already have 256 entries; smaller patches are left alone
        if patch_dim <= SPECTRAL_TARGET_DIM:
            return cls.identity(patch_dim)
        return cls.random_orthonormal(patch_dim, SPECTRAL_TARGET_DIM, seed)

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise CodebookError(f"vector length {x.shape[-1]} != projection input {self.in_dim}")
        if self.matrix is None:
            return x
        return x @ self.matrix.astype(np.float64).T


@dataclass
class Codebook:
    centroids: np.ndarray  # (K, d) float32
    projection: ProjectionSpec
    source: str = "spectral_patch"
    metric: str = "euclidean"

    def __post_init__(self):
        self.centroids = np.ascontiguousarray(self.centroids, dtype=np.float32)
        if self.source not in SOURCES:
            raise CodebookError(f"unknown codebook source {self.source!r}")
        if self.metric != "euclidean":
            raise CodebookError("only the euclidean metric is supported")
        if self.centroids.ndim != 2 or self.centroids.shape[1] != self.projection.out_dim:
            raise CodebookError("centroid width must match projection output")

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Codebook):
            return NotImplemented
        a, b = self.projection, other.projection
        same_proj = (a.kind, a.in_dim, a.out_dim) == (b.kind, b.in_dim, b.out_dim) and (
            (a.matrix is None and b.matrix is None)
            or (a.matrix is not None and b.matrix is not None
                and a.matrix.tobytes() == b.matrix.tobytes())
        )
        return (
            same_proj
            and self.source == other.source
            and self.metric == other.metric
            and self.centroids.shape == other.centroids.shape
            and self.centroids.tobytes() == other.centroids.tobytes()
        )


def _sq_distances(x, c):
    """Squared distances via the expansion; fast but not tie-exact."""
    d = (x * x).sum(1)[:, None] - 2.0 * (x @ c.T) + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def nearest(x: np.ndarray, c: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Index of the nearest row of ``c`` for each row of ``x``; ties go to the lowest index.

    Candidates within a small slack of the fast estimate are re-scored with
    exact differences so the result equals an exhaustive scan.
    """
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    out = np.empty(len(x), dtype=np.int64)
    c_norm = (c * c).sum(1)
    for start in range(0, len(x), chunk):
        xb = x[start:start + chunk]
        d = _sq_distances(xb, c)
        dmin = d.min(1, keepdims=True)
        slack = 1e-9 * (dmin + (xb * xb).sum(1, keepdims=True) + c_norm.max()) + 1e-300
        cand = d <= dmin + slack
        lab = np.argmax(cand, axis=1)
        multi = np.flatnonzero(cand.sum(1) > 1)
        for i in multi:
            cols = np.flatnonzero(cand[i])
            exact = ((c[cols] - xb[i]) ** 2).sum(1)
            lab[i] = cols[np.argmin(exact)]
        out[start:start + chunk] = lab
    return out


def inertia(x: np.ndarray, centroids: np.ndarray, labels: np.ndarray | None = None) -> float:
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    if labels is None:
        labels = nearest(x, c)
    return float(((x - c[labels]) ** 2).sum())


def _kmeans_pp(x, K, rng):
    n = len(x)
    centers = np.empty((K, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for i in range(1, K):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[i] = x[idx]
        d2 = np.minimum(d2, ((x - centers[i]) ** 2).sum(1))
    return centers


def _centroid_sums(x, labels, K):
    # bincount reduces in a fixed order, independent of any worker split
    sums = np.stack([np.bincount(labels, weights=x[:, j], minlength=K) for j in range(x.shape[1])], 1)
    counts = np.bincount(labels, minlength=K)
    return sums, counts


def lloyd(x, centers, max_iters=100, tol=1e-6, history=None):
    """Lloyd iterations from ``centers``. Appends inertia per iteration to ``history``."""
    K = len(centers)
    centers = centers.copy()
    for _ in range(max_iters):
        labels = nearest(x, centers)
        if history is not None:
            history.append(inertia(x, centers, labels))
        sums, counts = _centroid_sums(x, labels, K)
        new = centers.copy()
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        empty = np.flatnonzero(~filled)
        if len(empty):
            dist = ((x - new[labels]) ** 2).sum(1)
            taken = set()
            for e in empty:
                order = np.argsort(-dist, kind="stable")
                pick = next(i for i in order if i not in taken)
                taken.add(pick)
                new[e] = x[pick]
                dist[pick] = -1.0
        shift = np.sqrt(((new - centers) ** 2).sum(1).max())
        centers = new
        if shift < tol and not len(empty):
            break
    if history is not None:
        history.append(inertia(x, centers))
    return centers


def transfer_refine(x, centers, max_sweeps=100):
    """Hartigan single-point transfers after Lloyd.

    A point moves from cluster a to b when that lowers the total inertia once both
    centroids are updated: n_b/(n_b+1)·|x-c_b|² < n_a/(n_a-1)·|x-c_a|². Lloyd
    fixed points with a costly stray point get escaped this way. The result is
    still a Lloyd fixed point.
    """
    K = len(centers)
    labels = nearest(x, centers)
    sums, counts = _centroid_sums(x, labels, K)
    counts = counts.astype(np.float64)
    c = np.where(counts[:, None] > 0, sums / np.maximum(counts, 1)[:, None], centers)
    rows = np.arange(len(x))
    for _ in range(max_sweeps):
        d = _sq_distances(x, c)
        own_n = counts[labels]
        removal = np.where(own_n > 1, own_n / np.maximum(own_n - 1, 1) * d[rows, labels], -np.inf)
        add = counts / (counts + 1) * d
        add[rows, labels] = np.inf
        # screen with a little slack, then re-check exactly against the live state
        cand = np.flatnonzero(add.min(1) < removal * (1 + 1e-9))
        moved = False
        for i in cand:
            a = labels[i]
            if counts[a] <= 1:
                continue
            dd = ((c - x[i]) ** 2).sum(1)
            cost_out = counts[a] / (counts[a] - 1) * dd[a]
            cost_in = counts / (counts + 1) * dd
            cost_in[a] = np.inf
            b = int(np.argmin(cost_in))
            if cost_in[b] < cost_out * (1 - 1e-12):
                sums[a] -= x[i]
                sums[b] += x[i]
                counts[a] -= 1
                counts[b] += 1
                c[a] = sums[a] / counts[a]
                c[b] = sums[b] / counts[b]
                labels[i] = b
                moved = True
        if not moved:
            break
    sums, n = _centroid_sums(x, labels, K)
    return np.where(n[:, None] > 0, sums / np.maximum(n, 1)[:, None], c)


def fit_kmeans(
    vectors: np.ndarray,
    K: int,
    seed: int = 0,
    max_iters: int = 100,
    tol: float = 1e-6,
    projection: ProjectionSpec | None = None,
    source: str = "spectral_patch",
    history: list | None = None,
    n_init: int = 1,
) -> Codebook:
    """k-means++ seeding, Lloyd iterations, then single-point transfer refinement.

    With ``n_init > 1`` the lowest-inertia of several independently seeded runs is kept.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2:
        raise CodebookError("vectors must be a 2-D array")
    if len(vectors) < K:
        raise CodebookError(f"need at least K={K} vectors, got {len(vectors)}")
    if projection is None:
        projection = ProjectionSpec.identity(vectors.shape[1])
    x = projection.apply(vectors)
    if n_init < 1:
        raise CodebookError("n_init must be >= 1")
    rng = np.random.default_rng(seed)
    best, best_inertia = None, np.inf
    for _ in range(n_init):
        centers = transfer_refine(x, lloyd(x, _kmeans_pp(x, K, rng), max_iters, tol, history))
        if history is not None:
            history.append(inertia(x, centers))
        score = inertia(x, centers)
        if score < best_inertia:
            best, best_inertia = centers, score
    return Codebook(best, projection, source)


def assign(vec: np.ndarray, cb: Codebook) -> np.ndarray | int:
    """Nearest-centroid label(s). A single vector gives an int, a 2-D batch gives an array."""
    vec = np.asarray(vec)
    single = vec.ndim == 1
    x = cb.projection.apply(np.atleast_2d(vec))
    labels = nearest(x, cb.centroids)
    return int(labels[0]) if single else labels


@dataclass
class TargetSet:
    spectral: np.ndarray  # (N, R_s) int
    temporal: np.ndarray  # (N, R_t) int


def build_targets(spec, grid: GridConfig, cb_s: Codebook, cb_t: Codebook,
                  external_labels: np.ndarray | None = None) -> TargetSet:
    if cb_s.source != "spectral_patch":
        raise CodebookError(f"spectral codebook has source {cb_s.source!r}")
    values = np.asarray(getattr(spec, "values", spec))
    N = grid.n_segments(values.shape[1])
    spectral = assign(patch_vectors(values, grid), cb_s).reshape(N, grid.R_s)
    if cb_t.source == "temporal_frame":
        temporal = assign(frame_vectors(values, grid), cb_t).reshape(N, grid.R_t)
    elif cb_t.source == "external_embedding":
        if external_labels is None:
            raise CodebookError("external temporal labels missing for this clip")
        ext = np.asarray(external_labels)
        if ext.shape != (N * grid.R_t,):
            raise CodebookError(f"external labels shape {ext.shape}, expected {(N * grid.R_t,)}")
        if ext.min() < 0 or ext.max() >= cb_t.K:
            raise CodebookError("external label outside codebook range")
        temporal = ext.astype(np.int64).reshape(N, grid.R_t)
    else:
        raise CodebookError(f"temporal codebook has source {cb_t.source!r}")
    return TargetSet(spectral, temporal)


# -- codebook files ---------------------------------------------------------

_HEADER = struct.Struct("<4sIIIIBBB")


def save_codebook(cb: Codebook, path) -> None:
    proj = cb.projection
    header = _HEADER.pack(
        CODEBOOK_MAGIC, CODEBOOK_VERSION, cb.K, cb.dim, proj.in_dim,
        PROJECTIONS.index(proj.kind), SOURCES.index(cb.source), 0,
    )
    payload = cb.centroids.astype("<f4").tobytes()
    if proj.matrix is not None:
        payload += proj.matrix.astype("<f4").tobytes()
    body = header + payload
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_codebook(path) -> Codebook:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size + 4:
        raise CodebookError(f"{path}: truncated codebook file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    magic, version, K, d, in_dim, kind, source, metric = _HEADER.unpack_from(body)
    if magic != CODEBOOK_MAGIC:
        raise CodebookError(f"{path}: not a codebook file")
    if version != CODEBOOK_VERSION:
        raise CodebookError(f"{path}: codebook version {version}, expected {CODEBOOK_VERSION}")
    if zlib.crc32(body) != crc:
        raise CodebookError(f"{path}: checksum mismatch (corrupt or truncated)")
    if kind >= len(PROJECTIONS) or source >= len(SOURCES) or metric != 0:
        raise CodebookError(f"{path}: unknown enum value in header")
    off = _HEADER.size
    expect = K * d + (d * in_dim if PROJECTIONS[kind] != "identity" else 0)
    if len(body) - off != 4 * expect:
        raise CodebookError(f"{path}: payload size mismatch")
    centroids = np.frombuffer(body, "<f4", K * d, off).reshape(K, d).astype(np.float32)
    off += 4 * K * d
    matrix = None
    if PROJECTIONS[kind] != "identity":
        matrix = np.frombuffer(body, "<f4", d * in_dim, off).reshape(d, in_dim).astype(np.float32)
    proj = ProjectionSpec(in_dim, d, PROJECTIONS[kind], matrix)
    return Codebook(centroids, proj, SOURCES[source])


# -- external frame files ---------------------------------------------------

FRAME_KIND_EMBEDDING = 0
FRAME_KIND_LABELS = 1


def export_external_frames(records: dict, path, rate: float = 50.0) -> None:
    """Write per-clip frames. Values are (n_frames, dim) float embeddings or (n_frames,) int labels."""
    out = bytearray(FRAMES_MAGIC + struct.pack("<IfI", FRAMES_VERSION, rate, len(records)))
    for clip_id, arr in records.items():
        arr = np.asarray(arr)
        key = clip_id.encode("utf-8")
        out += struct.pack("<H", len(key)) + key
        if arr.ndim == 1:
            out += struct.pack("<BII", FRAME_KIND_LABELS, len(arr), 1)
            out += arr.astype("<i4").tobytes()
        else:
            out += struct.pack("<BII", FRAME_KIND_EMBEDDING, arr.shape[0], arr.shape[1])
            out += arr.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def read_external_frames(path) -> tuple[float, dict]:
    data = Path(path).read_bytes()
    try:
        if data[:4] != FRAMES_MAGIC:
            raise CodebookError(f"{path}: not an external frame file")
        version, rate, count = struct.unpack_from("<IfI", data, 4)
        if version != FRAMES_VERSION:
            raise CodebookError(f"{path}: frame file version {version}")
        off = 16
        records = {}
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", data, off)
            off += 2
            key = data[off:off + klen].decode("utf-8")
            off += klen
            kind, n, dim = struct.unpack_from("<BII", data, off)
            off += 9
            if kind == FRAME_KIND_LABELS:
                arr = np.frombuffer(data, "<i4", n, off).astype(np.int64)
                off += 4 * n
            elif kind == FRAME_KIND_EMBEDDING:
                arr = np.frombuffer(data, "<f4", n * dim, off).reshape(n, dim).astype(np.float32)
                off += 4 * n * dim
            else:
                raise CodebookError(f"{path}: unknown record kind {kind}")
            records[key] = arr
    except (struct.error, ValueError) as exc:
        if isinstance(exc, CodebookError):
            raise
        raise CodebookError(f"{path}: truncated external frame file") from exc
    if off != len(data):
        raise CodebookError(f"{path}: trailing bytes in external frame file")
    return rate, records


def import_external_frames(path, expected_rate: float = 50.0, clip_seconds: float = 8.0,
                           codebook: Codebook | None = None, clip_ids=None) -> dict:
    """Per-clip label sequences of length ``expected_rate * clip_seconds``.

    Embedding records are quantized with ``codebook`` at import time. Frame
    ``(n, j)`` of a clip maps to external frame ``n * R_t + j``.
    """
    rate, records = read_external_frames(path)
    if abs(rate - expected_rate) > 1e-6:
        raise CodebookError(f"{path}: frame rate {rate} Hz, expected {expected_rate} Hz")
    n_expected = int(round(expected_rate * clip_seconds))
    if clip_ids is not None:
        missing = [c for c in clip_ids if c not in records]
        if missing:
            raise CodebookError(f"{path}: unknown clip id(s) {missing[:3]}")
    labels = {}
    for clip_id, arr in records.items():
        if len(arr) != n_expected:
            raise CodebookError(f"{clip_id}: {len(arr)} frames, expected {n_expected}")
        if arr.ndim == 2:
            if codebook is None:
                raise CodebookError("embedding records need a codebook to quantize")
            arr = assign(arr, codebook)
        labels[clip_id] = np.asarray(arr, dtype=np.int64)
    return labels
