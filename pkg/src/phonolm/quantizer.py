"""Discretization layer: K-means tokens, residual vector quantization, and
the 2:3 token-rate upsampler.

Nearest-centroid assignment everywhere uses explicit squared differences
(chunked over rows) with first-minimum tie breaking, so results are exactly
reproducible against a brute-force search. Empty clusters are repaired by
moving their centroid onto the point farthest from its current centroid,
which keeps Lloyd's distortion monotone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .numerics import ContractError, ShapeError

_ASSIGN_CHUNK = 2048


@dataclass
class Codebook:
    centroids: np.ndarray          # (K, d)
    iterations_run: int = 0
    final_distortion: float = 0.0  # mean squared distance at convergence
    distortion_history: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


@dataclass
class RvqModel:
    layers: list                          # Codebook per layer, residual-fit order
    residual_energy: list = field(default_factory=list)  # mean ||r||^2 after each layer

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def dim(self) -> int:
        return self.layers[0].dim

    @property
    def vocab(self) -> int:
        return self.layers[0].k


@dataclass
class Quantizers:
    """The fitted pair used by the pipeline: phonetic codebook + acoustic RVQ."""

    phonetic: Codebook
    rvq: RvqModel


def _nearest(vectors: np.ndarray, centroids: np.ndarray) -> tuple:
    """(ids, squared distances) of the nearest centroid per vector.

    Ties resolve to the lowest centroid index (argmin picks the first min).
    """
    n = vectors.shape[0]
    ids = np.empty(n, dtype=np.int64)
    dists = np.empty(n, dtype=np.float64)
    for start in range(0, n, _ASSIGN_CHUNK):
        chunk = vectors[start : start + _ASSIGN_CHUNK]
        d2 = ((chunk[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        ids[start : start + _ASSIGN_CHUNK] = d2.argmin(axis=1)
        dists[start : start + _ASSIGN_CHUNK] = d2[np.arange(chunk.shape[0]), ids[start : start + chunk.shape[0]]]
    return ids, dists


def _kmeans_pp_init(vectors: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: next centroid drawn with probability ~ D^2."""
    n = vectors.shape[0]
    centroids = np.empty((k, vectors.shape[1]))
    centroids[0] = vectors[int(rng.integers(n))]
    d2 = ((vectors - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))  # all points coincide with chosen seeds
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[j] = vectors[idx]
        d2 = np.minimum(d2, ((vectors - centroids[j]) ** 2).sum(axis=1))
    return centroids


def kmeans_fit(
    vectors: np.ndarray,
    k: int,
    max_iters: int = 50,
    seed: int = 0,
    init_centroids: np.ndarray | None = None,
) -> Codebook:
    """Lloyd's algorithm from a k-means++ seeding (or a warm start).

    Stops at assignment fixpoint or after `max_iters` assign/update rounds.
    Distortion (mean squared distance) is recorded after every assignment and
    is non-increasing by construction.
    """
    vectors = np.ascontiguousarray(np.asarray(vectors, dtype=np.float64))
    if vectors.ndim != 2:
        raise ShapeError(f"expected (n, d) vectors, got {vectors.shape}")
    n = vectors.shape[0]
    if n < k:
        raise ContractError(f"need at least k={k} vectors, got {n}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x6B6D])))
    if init_centroids is not None:
        centroids = np.array(init_centroids, dtype=np.float64)
        if centroids.shape != (k, vectors.shape[1]):
            raise ShapeError("init_centroids shape mismatch")
    else:
        centroids = _kmeans_pp_init(vectors, k, rng)
    assignments = None
    history = []
    iters = 0
    for _ in range(max_iters):
        ids, d2 = _nearest(vectors, centroids)
        history.append(float(d2.mean()))
        if assignments is not None and np.array_equal(ids, assignments):
            break
        assignments = ids
        iters += 1
        sums = np.zeros_like(centroids)
        np.add.at(sums, ids, vectors)
        counts = np.bincount(ids, minlength=k)
        occupied = counts > 0
        centroids[occupied] = sums[occupied] / counts[occupied, None]
        empties = np.flatnonzero(~occupied)
        if empties.size:
            _, dist_now = _nearest(vectors, centroids[occupied])
            for e in empties:
                far = int(dist_now.argmax())
                centroids[e] = vectors[far]
                dist_now[far] = 0.0
    ids, d2 = _nearest(vectors, centroids)
    final = float(d2.mean())
    if not history or final != history[-1]:
        history.append(final)
    return Codebook(
        centroids=centroids,
        iterations_run=iters,
        final_distortion=final,
        distortion_history=history,
    )


def kmeans_assign(vectors: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Token ids of the nearest centroid per vector (lowest index on ties)."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[1] != codebook.dim:
        raise ContractError(
            f"vectors {vectors.shape} do not match codebook dim {codebook.dim}"
        )
    return _nearest(vectors, codebook.centroids)[0]


# ---------------------------------------------------------------------------
# residual vector quantization
# ---------------------------------------------------------------------------


def rvq_fit(
    vectors: np.ndarray,
    layers: int = 8,
    k: int = 32,
    max_iters: int = 50,
    seed: int = 0,
) -> RvqModel:
    """Fit `layers` codebooks, each on the residuals of the ones before it.

    Mean residual energy after each layer is recorded; because every layer's
    k-means does at least as well as quantizing to the residual mean, the
    energy sequence is non-increasing.
    """
    residual = np.array(vectors, dtype=np.float64)
    books = []
    energy = []
    for j in range(layers):
        book = kmeans_fit(residual, k, max_iters=max_iters, seed=seed + j)
        ids, _ = _nearest(residual, book.centroids)
        residual = residual - book.centroids[ids]
        books.append(book)
        energy.append(float((residual**2).sum(axis=1).mean()))
    return RvqModel(layers=books, residual_energy=energy)


def rvq_encode(frames: np.ndarray, model: RvqModel) -> np.ndarray:
    """Greedy per-layer nearest-centroid codes: (T, n_layers) int matrix."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != model.dim:
        raise ContractError(f"frames {frames.shape} do not match RVQ dim {model.dim}")
    codes = np.empty((frames.shape[0], model.n_layers), dtype=np.int64)
    residual = frames.copy()
    for j, book in enumerate(model.layers):
        ids, _ = _nearest(residual, book.centroids)
        codes[:, j] = ids
        residual -= book.centroids[ids]
    return codes


def rvq_decode(codes: np.ndarray, model: RvqModel, n_layers: int | None = None) -> np.ndarray:
    """Sum of selected centroids across the first `n_layers` layers."""
    codes = np.asarray(codes, dtype=np.int64)
    if codes.ndim != 2:
        raise ShapeError(f"codes must be (T, layers), got {codes.shape}")
    use = model.n_layers if n_layers is None else n_layers
    if codes.shape[1] < use:
        raise ContractError(f"codes have {codes.shape[1]} layers, need {use}")
    out = np.zeros((codes.shape[0], model.dim))
    for j in range(use):
        ids = codes[:, j]
        book = model.layers[j]
        if ids.size and (ids.min() < 0 or ids.max() >= book.k):
            raise ContractError(f"layer {j} id out of range [0, {book.k})")
        out += book.centroids[ids]
    return out


# ---------------------------------------------------------------------------
# rate upsampler
# ---------------------------------------------------------------------------


def upsample_tokens(seq) -> np.ndarray:
    """Repeat tokens 2->3: output length ceil(3L/2), output[t] = input[2t//3]."""
    seq = np.asarray(seq, dtype=np.int64)
    if seq.ndim != 1:
        raise ShapeError(f"token sequence must be 1-D, got {seq.shape}")
    if seq.size == 0:
        return seq.copy()
    out_len = -(-3 * seq.size // 2)
    idx = (2 * np.arange(out_len)) // 3
    return seq[idx]


# ---------------------------------------------------------------------------
# checkpoint container round trip
# ---------------------------------------------------------------------------


def save_quantizers(q: Quantizers, path, meta_path=None) -> None:
    tensors = {"phonetic/centroids": q.phonetic.centroids}
    for j, book in enumerate(q.rvq.layers):
        tensors[f"rvq/layer{j}/centroids"] = book.centroids
    checkpoint.save_tensors(path, tensors)
    meta = {
        "phonetic": {
            "k": q.phonetic.k,
            "iterations_run": q.phonetic.iterations_run,
            "final_distortion": q.phonetic.final_distortion,
        },
        "rvq": {
            "n_layers": q.rvq.n_layers,
            "k": q.rvq.vocab,
            "residual_energy": q.rvq.residual_energy,
            "layer_distortions": [b.final_distortion for b in q.rvq.layers],
        },
    }
    if meta_path is None:
        meta_path = Path(path).with_suffix(".json")
    Path(meta_path).write_text(json.dumps(meta, indent=2) + "\n")


def load_quantizers(path, meta_path=None) -> Quantizers:
    tensors = checkpoint.load_tensors(path)
    if meta_path is None:
        meta_path = Path(path).with_suffix(".json")
    meta = json.loads(Path(meta_path).read_text()) if Path(meta_path).exists() else {}
    phonetic = Codebook(centroids=tensors["phonetic/centroids"])
    if meta:
        phonetic.iterations_run = meta["phonetic"]["iterations_run"]
        phonetic.final_distortion = meta["phonetic"]["final_distortion"]
    books = []
    j = 0
    while f"rvq/layer{j}/centroids" in tensors:
        books.append(Codebook(centroids=tensors[f"rvq/layer{j}/centroids"]))
        j += 1
    rvq = RvqModel(layers=books)
    if meta:
        rvq.residual_energy = meta["rvq"]["residual_energy"]
        for book, d in zip(books, meta["rvq"]["layer_distortions"]):
            book.final_distortion = d
    return Quantizers(phonetic=phonetic, rvq=rvq)
