"""Residual vector quantization: nearest-neighbor search on normalized
vectors, residual cascading, EMA codebook learning with k-means
initialization, dead-code reinitialization, and the commitment loss.

Codewords are matched in normalized space but stored and subtracted raw:
the residual update and the telescoping identity operate on the codeword
actually selected, not its normalization.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, straight_through  # noqa: F401  (re-exported)
from .errors import ConfigError, ShapeError
from .optim import Parameter

#: Laplace smoothing constant for EMA cluster sizes.
EMA_EPS = 1e-5
#: An entry whose per-epoch peak EMA size stays below this is considered dead.
DEAD_CODE_THRESHOLD = 1.0
#: Rows of recent level inputs kept for dead-code reinitialization.
RESERVOIR_CAP = 512


def normalize_rows(v: np.ndarray) -> np.ndarray:
    """Unit-normalize rows; zero rows are returned unchanged."""
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return v / safe


@dataclass
class Codebook:
    """One quantization level: codeword table plus EMA learning state."""

    entries: np.ndarray                 # (K, d_c)
    ema_size: np.ndarray = None         # (K,)
    ema_sum: np.ndarray = None          # (K, d_c)
    usage: np.ndarray = None            # assignments since epoch start
    epoch_peak_size: np.ndarray = None  # max EMA size seen this epoch
    reservoir: np.ndarray = None        # recent level inputs, for reinit

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        if self.entries.ndim != 2 or self.entries.shape[0] == 0:
            raise ConfigError("codebook needs a non-empty (K, d_c) entry table")
        if not np.isfinite(self.entries).all():
            raise ConfigError("codebook entries must be finite")
        K = self.entries.shape[0]
        if self.ema_size is None:
            self.ema_size = np.zeros(K)
        if self.ema_sum is None:
            self.ema_sum = self.entries.copy()
        if self.usage is None:
            self.usage = np.zeros(K, dtype=np.int64)
        if self.epoch_peak_size is None:
            self.epoch_peak_size = np.zeros(K)
        if self.reservoir is None:
            self.reservoir = np.zeros((0, self.entries.shape[1]))

    @property
    def K(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]


def quantize_level(p: np.ndarray, book: Codebook,
                   metric: str = "normalized") -> tuple[np.ndarray, np.ndarray]:
    """Nearest codeword per row of p; returns (indices, raw codewords).

    The normalized metric compares unit-scaled query and codewords; queries
    that normalize to zero fall back to raw Euclidean distance.  Ties break
    toward the lowest index.  Accepts a single vector or a (B, d) batch.
    """
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    q = p[None, :] if single else p
    if q.shape[-1] != book.dim:
        raise ShapeError(f"query dim {q.shape[-1]} != codebook dim {book.dim}")
    if metric == "normalized":
        qn = normalize_rows(q)
        vn = normalize_rows(book.entries)
        d = ((qn[:, None, :] - vn[None, :, :]) ** 2).sum(axis=-1)
        zero_rows = np.linalg.norm(q, axis=-1) == 0.0
        if zero_rows.any():
            raw = ((q[zero_rows][:, None, :] - book.entries[None, :, :]) ** 2).sum(axis=-1)
            d[zero_rows] = raw
    elif metric == "euclidean":
        d = ((q[:, None, :] - book.entries[None, :, :]) ** 2).sum(axis=-1)
    else:
        raise ConfigError(f"unknown quantization metric {metric!r}")
    idx = np.argmin(d, axis=1)
    z = book.entries[idx]
    if single:
        return idx[0], z[0]
    return idx, z


@dataclass
class TokenAssignment:
    """Per-level indices and codewords for one batch of code-space inputs."""

    indices: np.ndarray       # (B, N)
    codewords: np.ndarray     # (N, B, d_c) raw selected codewords
    level_inputs: np.ndarray  # (N, B, d_c) residual fed to each level
    residual: np.ndarray      # (B, d_c) after the last level

    @property
    def reconstruction(self) -> np.ndarray:
        return self.codewords.sum(axis=0)


@dataclass
class RVQStack:
    """An ordered cascade of codebooks with D <-> code-space projections."""

    codebooks: list[Codebook]
    down_proj: Parameter
    up_proj: Parameter
    metric: str = "normalized"

    def __post_init__(self):
        if not self.codebooks:
            raise ConfigError("RVQ stack needs at least one codebook")
        dims = {b.dim for b in self.codebooks}
        sizes = {b.K for b in self.codebooks}
        if len(dims) != 1 or len(sizes) != 1:
            raise ConfigError("all codebooks in a stack must share K and d_c")

    @property
    def levels(self) -> int:
        return len(self.codebooks)

    @property
    def code_dim(self) -> int:
        return self.codebooks[0].dim

    @classmethod
    def create(cls, model_dim: int, code_dim: int, levels: int, entries: int,
               rng: np.random.Generator, name: str = "rvq",
               metric: str = "normalized") -> "RVQStack":
        books = [Codebook(rng.normal(scale=1.0 / np.sqrt(code_dim),
                                     size=(entries, code_dim)))
                 for _ in range(levels)]
        limit = np.sqrt(6.0 / (model_dim + code_dim))
        down = Parameter(rng.uniform(-limit, limit, size=(model_dim, code_dim)),
                         f"{name}.down_proj")
        up = Parameter(rng.uniform(-limit, limit, size=(code_dim, model_dim)),
                       f"{name}.up_proj")
        return cls(books, down, up, metric)

    def quantize_codes(self, p_code: np.ndarray,
                       forced_indices: np.ndarray | None = None) -> TokenAssignment:
        """Cascade the levels over code-space inputs (B, d_c).

        ``forced_indices`` (B, N) bypasses the nearest-neighbor search and is
        used by finite-difference checks that must freeze assignments.
        """
        p_code = np.asarray(p_code, dtype=np.float64)
        if p_code.ndim != 2:
            raise ShapeError("quantize_codes expects a (B, d_c) batch")
        B = p_code.shape[0]
        N = self.levels
        indices = np.zeros((B, N), dtype=np.int64)
        codewords = np.zeros((N, B, self.code_dim))
        level_inputs = np.zeros((N, B, self.code_dim))
        resid = p_code.copy()
        for i, book in enumerate(self.codebooks):
            level_inputs[i] = resid
            if forced_indices is not None:
                idx = np.asarray(forced_indices[:, i], dtype=np.int64)
                z = book.entries[idx]
            else:
                idx, z = quantize_level(resid, book, self.metric)
            indices[:, i] = idx
            codewords[i] = z
            resid = resid - z
        return TokenAssignment(indices, codewords, level_inputs, resid)


def rvq_quantize(p: np.ndarray, stack: RVQStack,
                 forced_indices: np.ndarray | None = None
                 ) -> tuple[TokenAssignment, np.ndarray]:
    """Project down, cascade the codebooks, project the code sum back up.

    Accepts a (D,) vector or a (B, D) batch; returns the assignment and the
    up-projected reconstruction with matching leading shape.
    """
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    x = p[None, :] if single else p
    if x.shape[-1] != stack.down_proj.data.shape[0]:
        raise ShapeError(f"input dim {x.shape[-1]} != stack input dim "
                         f"{stack.down_proj.data.shape[0]}")
    p_code = x @ stack.down_proj.data
    assign = stack.quantize_codes(p_code, forced_indices)
    p_hat = assign.reconstruction @ stack.up_proj.data
    if single:
        return assign, p_hat[0]
    return assign, p_hat


def quantization_loss(p_levels, z_levels, beta: float = 0.25) -> Tensor:
    """Commitment loss: beta * mean over levels/bins of (p - stopgrad(z))^2.

    ``p_levels`` may hold Tensors (training path) or arrays; ``z_levels``
    are treated as constants either way — the codebooks learn by EMA, not
    by gradient.
    """
    if len(p_levels) != len(z_levels):
        raise ShapeError("p_levels and z_levels must align")
    if not p_levels:
        raise ShapeError("quantization_loss needs at least one level")
    total = None
    for p_i, z_i in zip(p_levels, z_levels):
        p_t = ad._as_tensor(p_i)
        z_c = Tensor(np.asarray(z_i.data if isinstance(z_i, Tensor) else z_i))
        term = ad.tmean(ad.square(ad.sub(p_t, z_c)))
        total = term if total is None else ad.add(total, term)
    scale = beta / len(p_levels)
    return ad.mul(Tensor(np.asarray(scale, dtype=total.dtype)), total)


def ema_update(book: Codebook, indices: np.ndarray, inputs: np.ndarray,
               decay: float = 0.99) -> None:
    """EMA codebook update from one batch of (index, residual input) pairs.

    Entries assigned in this batch move toward their smoothed cluster means;
    unassigned entries keep their value (their EMA mass still decays).
    """
    if not (0.0 < decay < 1.0):
        raise ConfigError(f"decay must lie in (0, 1), got {decay}")
    indices = np.asarray(indices, dtype=np.int64)
    inputs = np.asarray(inputs, dtype=np.float64)
    K = book.K
    counts = np.bincount(indices, minlength=K).astype(np.float64)
    sums = np.zeros_like(book.ema_sum)
    np.add.at(sums, indices, inputs)
    book.ema_size = decay * book.ema_size + (1.0 - decay) * counts
    book.ema_sum = decay * book.ema_sum + (1.0 - decay) * sums
    n = book.ema_size.sum()
    if n > 0:
        smoothed = (book.ema_size + EMA_EPS) / (n + K * EMA_EPS) * n
        touched = counts > 0
        book.entries[touched] = book.ema_sum[touched] / smoothed[touched, None]
    book.usage += counts.astype(np.int64)
    book.epoch_peak_size = np.maximum(book.epoch_peak_size, book.ema_size)
    if inputs.size:
        book.reservoir = np.vstack([book.reservoir, inputs])[-RESERVOIR_CAP:]
    if not np.isfinite(book.entries).all():
        raise ArithmeticError("EMA update produced non-finite codewords")


def begin_epoch(book: Codebook) -> None:
    book.usage[:] = 0
    book.epoch_peak_size[:] = 0.0


def end_epoch_reinit(book: Codebook, samples: np.ndarray | None = None,
                     rng: np.random.Generator | None = None,
                     threshold: float = DEAD_CODE_THRESHOLD) -> int:
    """Reinitialize entries whose EMA size stayed below threshold all epoch.

    Replacements default to the book's own reservoir of recent level inputs,
    which keeps the reseeded codewords at the magnitude this level actually
    sees.  Returns the number of entries reset.
    """
    rng = rng or np.random.default_rng(0)
    if samples is None:
        samples = book.reservoir
    dead = np.flatnonzero(book.epoch_peak_size < threshold)
    if dead.size == 0 or len(samples) == 0:
        return 0
    picks = rng.integers(0, len(samples), size=dead.size)
    book.entries[dead] = samples[picks]
    book.ema_sum[dead] = samples[picks]
    book.ema_size[dead] = 1.0
    return int(dead.size)


def kmeans_init(book: Codebook, samples: np.ndarray, iters: int = 10,
                rng: np.random.Generator | None = None) -> Codebook:
    """Seed the codebook by k-means++ plus Lloyd iterations.

    Cluster geometry lives in normalized space (matching the quantizer's
    metric); the stored codewords are the raw means of each cluster's
    members, so a book with K == n distinct samples reproduces the samples.
    Fewer than K distinct samples pads with perturbed duplicates and warns.
    """
    rng = rng or np.random.default_rng(0)
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[1] != book.dim:
        raise ShapeError(f"samples must be (n, {book.dim})")
    K = book.K
    if samples.shape[0] < K:
        raise ConfigError(f"need at least {K} samples, got {samples.shape[0]}")
    distinct = np.unique(samples, axis=0)
    padded = False
    if distinct.shape[0] < K:
        deficit = K - distinct.shape[0]
        picks = rng.integers(0, distinct.shape[0], size=deficit)
        jitter = 1e-4 * rng.standard_normal((deficit, book.dim))
        samples = np.vstack([samples, distinct[picks] + jitter])
        padded = True

    sn = normalize_rows(samples)

    # k-means++ seeding on the normalized points
    centers = np.empty((K, book.dim))
    first = rng.integers(0, sn.shape[0])
    centers[0] = sn[first]
    d2 = ((sn - centers[0]) ** 2).sum(axis=1)
    for j in range(1, K):
        total = d2.sum()
        if total <= 0:
            pick = rng.integers(0, sn.shape[0])
        else:
            pick = rng.choice(sn.shape[0], p=d2 / total)
        centers[j] = sn[pick]
        d2 = np.minimum(d2, ((sn - centers[j]) ** 2).sum(axis=1))

    assign = np.argmin(((sn[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1), axis=1)
    for _ in range(iters):
        for j in range(K):
            members = assign == j
            if members.any():
                centers[j] = sn[members].mean(axis=0)
        new_assign = np.argmin(((sn[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1),
                               axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign

    # store raw cluster means; empty clusters keep a raw sample as their entry
    counts = np.bincount(assign, minlength=K).astype(np.float64)
    raw_sums = np.zeros((K, book.dim))
    np.add.at(raw_sums, assign, samples)
    for j in range(K):
        if counts[j] > 0:
            book.entries[j] = raw_sums[j] / counts[j]
        else:
            book.entries[j] = samples[rng.integers(0, samples.shape[0])]
            counts[j] = 1.0
            raw_sums[j] = book.entries[j]
    book.ema_size = counts.copy()
    book.ema_sum = raw_sums.copy()
    if padded:
        warnings.warn("kmeans_init: fewer distinct samples than codewords; "
                      "padded with perturbed duplicates", stacklevel=2)
    return book


def kmeans_init_stack(stack: RVQStack, p_code: np.ndarray, iters: int = 10,
                      rng: np.random.Generator | None = None) -> None:
    """Initialize every level on the residual distribution it will see."""
    resid = np.asarray(p_code, dtype=np.float64).copy()
    for book in stack.codebooks:
        kmeans_init(book, resid, iters=iters, rng=rng)
        _, z = quantize_level(resid, book, stack.metric)
        resid = resid - z
