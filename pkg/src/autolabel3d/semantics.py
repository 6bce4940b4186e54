"""Vision-language embedding handling.

Cosine similarity against text queries, background masking, open-vocabulary
point/box category assignment, streaming PCA compression and unprojection of
per-pixel camera features onto LiDAR points.

Raw features are stored unnormalized; normalization happens inside the
similarity computations. Rows with zero norm (points no camera saw) carry no
semantic evidence: they are never background and never vote.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from ._validation import check_matrix, check_points
from .geometry import Pose, points_in_box

UNASSIGNED = -1


def cosine_similarity(u, v):
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape[0]} vs {v.shape[0]}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity is undefined for a zero-norm vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def cosine_distance(u, v):
    return 1.0 - cosine_similarity(u, v)


@dataclass(frozen=True)
class TextQuery:
    """A named category with one embedding row per prompt."""

    category_name: str
    prompts: tuple
    embeddings: np.ndarray = field(repr=False)

    def __post_init__(self):
        emb = check_matrix(self.embeddings, f"embeddings of {self.category_name!r}")
        prompts = tuple(self.prompts)
        if len(prompts) < 1 or len(prompts) != emb.shape[0]:
            raise ValueError(
                f"query {self.category_name!r}: {len(prompts)} prompts vs {emb.shape[0]} embedding rows"
            )
        if (np.linalg.norm(emb, axis=1) == 0).any():
            raise ValueError(f"query {self.category_name!r} has a zero-norm prompt embedding")
        emb.flags.writeable = False
        object.__setattr__(self, "prompts", prompts)
        object.__setattr__(self, "embeddings", emb)

    @property
    def dim(self):
        return self.embeddings.shape[1]


def _unit_rows(x):
    norms = np.linalg.norm(x, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    return x / safe[:, None], norms > 0


def category_similarities(features, queries):
    """(N, C) matrix: per point, best cosine similarity over each category's prompts.

    Also returns the mask of rows with non-zero norm; other rows are 0.
    """
    if not queries:
        raise ValueError("at least one text query is required")
    dim = queries[0].dim
    for q in queries:
        if q.dim != dim:
            raise ValueError(f"query {q.category_name!r} has dim {q.dim}, expected {dim}")
    feats = check_matrix(features, "features") if len(features) else np.zeros((0, dim))
    if feats.shape[1] != dim:
        raise ValueError(f"features have dim {feats.shape[1]} but queries have dim {dim}")
    unit, valid = _unit_rows(feats)
    sims = np.empty((feats.shape[0], len(queries)))
    for c, q in enumerate(queries):
        qu, _ = _unit_rows(q.embeddings)
        sims[:, c] = (unit @ qu.T).max(axis=1)
    sims[~valid] = 0.0
    return sims, valid


def background_mask(features, bg_queries, eps_bg=0.02):
    """True where a point's best similarity to any background prompt is >= ``eps_bg``."""
    if not math.isfinite(eps_bg):
        raise ValueError("eps_bg must be finite")
    sims, valid = category_similarities(features, bg_queries)
    if sims.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    return valid & (sims.max(axis=1) >= eps_bg)


def assign_point_categories(features, queries):
    """Per-point (category index, similarity). Zero-norm rows get ``UNASSIGNED``."""
    sims, valid = category_similarities(features, queries)
    if sims.shape[0] == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    cats = np.argmax(sims, axis=1).astype(np.int64)
    scores = sims[np.arange(len(cats)), cats]
    cats[~valid] = UNASSIGNED
    scores = np.where(valid, scores, np.nan)
    return cats, scores


def vote_category(categories, scores):
    """Mode of ``categories`` ignoring ``UNASSIGNED``.

    Ties fall to the higher mean similarity, then the lower category index.
    """
    categories = np.asarray(categories).reshape(-1)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    keep = categories != UNASSIGNED
    if not keep.any():
        return UNASSIGNED
    cats, sc = categories[keep], scores[keep]
    labels, counts = np.unique(cats, return_counts=True)
    best = None
    for lab, cnt in zip(labels, counts):
        key = (int(cnt), float(sc[cats == lab].mean()), -int(lab))
        if best is None or key > best[0]:
            best = (key, int(lab))
    return best[1]


def assign_box_category(box, points, point_categories, point_scores):
    """Majority vote over the points enclosed by ``box``."""
    inside = points_in_box(box, points)
    cats = np.asarray(point_categories).reshape(-1)
    scores = np.asarray(point_scores, dtype=np.float64).reshape(-1)
    return vote_category(cats[inside], scores[inside])


class OpenVocabularyClassifier(ClassifierMixin, BaseEstimator):
    """Assigns each embedding the text query it is most cosine-similar to.

    ``fit`` takes a list of :class:`TextQuery`; ``predict`` returns category
    indices (``UNASSIGNED`` for zero-norm rows).
    """

    def __init__(self, pca=None):
        self.pca = pca

    def fit(self, queries, y=None):
        queries = list(queries)
        if not queries:
            raise ValueError("at least one text query is required")
        if self.pca is not None:
            queries = [compress_query(q, self.pca) for q in queries]
        self.queries_ = queries
        self.classes_ = np.array([q.category_name for q in queries])
        return self

    def _check(self):
        if not hasattr(self, "queries_"):
            raise NotFittedError("OpenVocabularyClassifier is not fitted; call fit(queries) first")

    def _features(self, X):
        X = check_matrix(X, "X")
        if self.pca is not None:
            X = pca_transform(self.pca, X)
        return X

    def decision_function(self, X):
        self._check()
        return category_similarities(self._features(X), self.queries_)[0]

    def predict(self, X):
        self._check()
        return assign_point_categories(self._features(X), self.queries_)[0]

    def predict_box(self, box, points, X):
        cats, scores = assign_point_categories(self._features(X), self.queries_)
        return assign_box_category(box, points, cats, scores)


# --------------------------------------------------------------------------
# PCA
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray
    explained_variances: np.ndarray

    @property
    def n_components(self):
        return self.components.shape[0]


class MomentAccumulator:
    """Streaming count / mean / scatter matrix, mergeable across workers
    (pairwise update of Chan, Golub and LeVeque)."""

    def __init__(self, dim):
        self.n = 0
        self.mean = np.zeros(dim)
        self.scatter = np.zeros((dim, dim))

    @property
    def dim(self):
        return self.mean.shape[0]

    def update(self, batch):
        x = check_matrix(batch, "batch", n_cols=self.dim)
        if len(x) == 0:
            return self
        other = MomentAccumulator(self.dim)
        other.n = len(x)
        other.mean = x.mean(axis=0)
        xc = x - other.mean
        other.scatter = xc.T @ xc
        return self.merge(other)

    def merge(self, other):
        if other.n == 0:
            return self
        n = self.n + other.n
        delta = other.mean - self.mean
        self.scatter = self.scatter + other.scatter + np.outer(delta, delta) * (self.n * other.n / n)
        self.mean = self.mean + delta * (other.n / n)
        self.n = n
        return self

    def covariance(self):
        """Population covariance (divides by n)."""
        return self.scatter / self.n


def _model_from_moments(acc, k):
    cov = 0.5 * (acc.covariance() + acc.covariance().T)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    comps = evecs[:, order].T
    # deterministic sign: largest-magnitude entry of each component positive
    signs = np.sign(comps[np.arange(k), np.abs(comps).argmax(axis=1)])
    comps = comps * np.where(signs == 0, 1.0, signs)[:, None]
    return PcaModel(acc.mean.copy(), comps, np.clip(evals[order], 0.0, None))


def pca_fit(batches, n_components):
    """Single-pass PCA over an iterable of (B, D) batches (or single D-vectors).

    Explained variances use the population normalization, so the mean squared
    reconstruction error equals the sum of the discarded variances.
    """
    if n_components < 1:
        raise ValueError("n_components must be >= 1")
    acc = None
    for batch in batches:
        b = np.asarray(batch, dtype=np.float64)
        if b.ndim == 1:
            b = b.reshape(1, -1)
        if acc is None:
            if n_components > b.shape[1]:
                raise ValueError(f"n_components={n_components} exceeds dimensionality {b.shape[1]}")
            acc = MomentAccumulator(b.shape[1])
        acc.update(b)
    if acc is None or acc.n < n_components:
        raise ValueError(f"need at least {n_components} vectors to fit, got {0 if acc is None else acc.n}")
    return _model_from_moments(acc, n_components)


def pca_transform(model, x):
    x = np.asarray(x, dtype=np.float64)
    return (x - model.mean) @ model.components.T


def pca_inverse(model, z):
    z = np.asarray(z, dtype=np.float64)
    return z @ model.components + model.mean


def compress_query(query, model):
    """Project a text query into the PCA space used for point features."""
    return TextQuery(query.category_name, query.prompts, pca_transform(model, query.embeddings))


class StreamingPCA(TransformerMixin, BaseEstimator):
    """Incremental PCA with bounded memory (D x D moments), sklearn-style."""

    def __init__(self, n_components=64):
        self.n_components = n_components

    def partial_fit(self, X, y=None):
        X = check_matrix(X, "X")
        if not hasattr(self, "moments_"):
            if self.n_components < 1:
                raise ValueError("n_components must be >= 1")
            if self.n_components > X.shape[1]:
                raise ValueError(
                    f"n_components={self.n_components} exceeds dimensionality {X.shape[1]}"
                )
            self.moments_ = MomentAccumulator(X.shape[1])
        self.moments_.update(X)
        if self.moments_.n >= self.n_components:
            self.model_ = _model_from_moments(self.moments_, self.n_components)
        return self

    def fit(self, X, y=None, batch_size=None):
        for attr in ("moments_", "model_"):
            if hasattr(self, attr):
                delattr(self, attr)
        X = check_matrix(X, "X")
        step = batch_size or max(len(X), 1)
        for start in range(0, len(X), step):
            self.partial_fit(X[start:start + step])
        if not hasattr(self, "model_"):
            raise ValueError(f"need at least {self.n_components} samples to fit")
        return self

    def _check(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("StreamingPCA is not fitted")

    @property
    def components_(self):
        self._check()
        return self.model_.components

    @property
    def explained_variance_(self):
        self._check()
        return self.model_.explained_variances

    @property
    def mean_(self):
        self._check()
        return self.model_.mean

    def transform(self, X):
        self._check()
        return pca_transform(self.model_, check_matrix(X, "X", n_cols=self.model_.mean.shape[0]))

    def inverse_transform(self, Z):
        self._check()
        return pca_inverse(self.model_, check_matrix(Z, "Z", n_cols=self.model_.n_components))


# --------------------------------------------------------------------------
# Unprojection
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PinholeCamera:
    """Pinhole camera. ``sensor_to_camera`` maps LiDAR-frame points into the
    camera frame (x right, y down, z along the optical axis)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    sensor_to_camera: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(math.isfinite(float(v)) for v in vals) or self.fx == 0 or self.fy == 0:
            raise ValueError(f"invalid camera intrinsics {vals}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("camera image size must be positive")

    def project(self, points):
        """Pixel coordinates (u, v) and depth of sensor-frame points."""
        cam = self.sensor_to_camera.apply(points)
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * cam[:, 0] / z + self.cx
            v = self.fy * cam[:, 1] / z + self.cy
        return u, v, z


def unproject_pixel_features(points, feature_maps, cameras, min_depth=1e-6):
    """Gather per-pixel features for sensor-frame ``points``.

    A point takes the feature of the pixel nearest its projection (pixel
    centres at integer coordinates, halves rounded up). Cameras are tried in
    list order and the first that sees the point wins. Returns the (N, D)
    features and the visibility mask; unseen points get zeros.
    """
    pts = check_points(points)
    if len(feature_maps) != len(cameras):
        raise ValueError("one feature map per camera is required")
    if not cameras:
        raise ValueError("at least one camera is required")
    dim = np.asarray(feature_maps[0]).shape[-1]
    feats = np.zeros((len(pts), dim), dtype=np.float32)
    seen = np.zeros(len(pts), dtype=bool)
    for fmap, cam in zip(feature_maps, cameras):
        fmap = np.asarray(fmap)
        if fmap.ndim != 3 or fmap.shape[:2] != (cam.height, cam.width) or fmap.shape[2] != dim:
            raise ValueError(
                f"feature map shape {fmap.shape} does not match camera {cam.height}x{cam.width}x{dim}"
            )
        u, v, z = cam.project(pts)
        col = np.floor(u + 0.5)
        row = np.floor(v + 0.5)
        ok = (~seen) & (z > min_depth) & np.isfinite(col) & np.isfinite(row)
        ok &= (col >= 0) & (col < cam.width) & (row >= 0) & (row < cam.height)
        idx = np.flatnonzero(ok)
        feats[idx] = fmap[row[idx].astype(np.intp), col[idx].astype(np.intp)]
        seen[idx] = True
    return feats, seen
