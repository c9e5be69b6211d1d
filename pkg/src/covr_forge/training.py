"""Contrastive training of the MLP fusion head on mined triplets.

The objective is the hard-negative-weighted symmetric contrastive loss over a
batch similarity matrix S (rows: composed queries f_i, columns: target video
embeddings h_j):

    L = -sum_i log( e^{S_ii/t} / (a e^{S_ii/t} + sum_{j!=i} e^{S_ij/t} w_ij) )
        -sum_i log( e^{S_ii/t} / (a e^{S_ii/t} + sum_{j!=i} e^{S_ji/t} w'_ji) )

with row weights w_ij = (B-1) e^{b S_ij/t} / sum_{k!=i} e^{b S_ik/t} and the
mirrored column weights, so each weight family sums to B-1. Everything is
computed in log space; gradients are exact closed forms, backpropagated by
hand through the fusion MLP and its output normalization (targets are frozen
inputs). Batches iterate over distinct target videos, picking one associated
(visual, text) query per target uniformly at random.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

BY_TARGET = "by_target"
BY_TRIPLET = "by_triplet"


class TrainingError(Exception):
    pass


@dataclass
class HnNceConfig:
    tau: float = 0.07
    alpha: float = 1.0
    beta: float = 0.5
    batch_size: int = 32
    learning_rate: float = 0.1
    epochs: int = 60
    seed: int = 0
    mode: str = BY_TARGET
    h_dim: Optional[int] = None

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise TrainingError("tau must be > 0")
        if self.alpha < 0 or self.beta < 0:
            raise TrainingError("alpha and beta must be >= 0")


@dataclass
class FusionHead:
    """Two-layer MLP mapping concat(visual, text) to a unit query vector."""

    W1: np.ndarray  # (2d, h_dim)
    b1: np.ndarray  # (h_dim,)
    W2: np.ndarray  # (h_dim, d)
    b2: np.ndarray  # (d,)

    @property
    def dim(self) -> int:
        return self.W2.shape[1]

    @property
    def h_dim(self) -> int:
        return self.W1.shape[1]

    def forward(self, visual: np.ndarray, text: np.ndarray) -> np.ndarray:
        if visual.shape != (self.dim,) or text.shape != (self.dim,):
            raise TrainingError(
                f"expected two ({self.dim},) vectors, got {visual.shape} and {text.shape}"
            )
        f, _, _, _ = _forward_batch(self, visual[None, :], text[None, :])
        return f[0]

    def params(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}


def init_head(dim: int, seed: int, h_dim: Optional[int] = None) -> FusionHead:
    """Seeded uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] per layer."""
    h = h_dim if h_dim is not None else 2 * dim
    rng = np.random.Generator(np.random.PCG64(seed))
    bound1 = 1.0 / math.sqrt(2 * dim)
    bound2 = 1.0 / math.sqrt(h)
    return FusionHead(
        W1=rng.uniform(-bound1, bound1, size=(2 * dim, h)),
        b1=rng.uniform(-bound1, bound1, size=h),
        W2=rng.uniform(-bound2, bound2, size=(h, dim)),
        b2=rng.uniform(-bound2, bound2, size=dim),
    )


def fusion_forward(head: FusionHead, visual: np.ndarray, text: np.ndarray) -> np.ndarray:
    return head.forward(visual, text)


def _forward_batch(head: FusionHead, V: np.ndarray, T: np.ndarray):
    """Forward pass for a batch; returns (F, X, Z, U) for backprop."""
    X = np.concatenate([V, T], axis=1).astype(np.float64)
    Z = X @ head.W1 + head.b1
    A = np.maximum(Z, 0.0)
    U = A @ head.W2 + head.b2
    norms = np.linalg.norm(U, axis=1)
    if np.any(norms < 1e-12):
        raise TrainingError("fusion head produced a zero vector before normalization")
    F = U / norms[:, None]
    return F, X, Z, U


def _logsumexp_offdiag(M: np.ndarray) -> np.ndarray:
    """Row-wise logsumexp of a square matrix excluding the diagonal."""
    work = M.copy()
    np.fill_diagonal(work, -np.inf)
    m = work.max(axis=1)
    return m + np.log(np.exp(work - m[:, None]).sum(axis=1))


def _row_terms(S: np.ndarray, cfg: HnNceConfig):
    """Per-row log pieces of the loss denominator for the row direction."""
    B = S.shape[0]
    diag = np.diag(S)
    gamma = (1.0 + cfg.beta) / cfg.tau
    delta = cfg.beta / cfg.tau
    logA = _logsumexp_offdiag(gamma * S)
    logC = _logsumexp_offdiag(delta * S)
    with np.errstate(divide="ignore"):
        term1 = np.log(cfg.alpha) + diag / cfg.tau
    term2 = math.log(B - 1) + logA - logC
    logD = np.logaddexp(term1, term2)
    return term1, term2, logA, logC, logD


def hn_nce_loss(S: np.ndarray, cfg: HnNceConfig) -> float:
    """Total (summed over the batch) loss for a similarity matrix."""
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise TrainingError(f"S must be square, got shape {S.shape}")
    if np.isnan(S).any():
        raise TrainingError("NaN in similarity matrix")
    B = S.shape[0]
    if B == 1:
        return 2.0 * float(np.log(cfg.alpha))
    total = 0.0
    for M in (S, S.T):
        _, _, _, _, logD = _row_terms(M, cfg)
        total += float((-np.diag(M) / cfg.tau + logD).sum())
    return total


def hn_nce_weights(S: np.ndarray, cfg: HnNceConfig) -> tuple[np.ndarray, np.ndarray]:
    """The (row, column) weight matrices; diagonals are zero.

    Row weights satisfy sum_{j!=i} w[i, j] = B-1; column weights satisfy
    sum_{j!=i} w_col[j, i] = B-1.
    """
    S = np.asarray(S, dtype=np.float64)
    B = S.shape[0]
    delta = cfg.beta / cfg.tau

    def row_weights(M: np.ndarray) -> np.ndarray:
        logC = _logsumexp_offdiag(delta * M)
        W = np.exp(math.log(B - 1) + delta * M - logC[:, None])
        np.fill_diagonal(W, 0.0)
        return W

    return row_weights(S), row_weights(S.T).T


def _loss_grad_S(S: np.ndarray, cfg: HnNceConfig) -> tuple[float, np.ndarray]:
    """Loss and its exact gradient with respect to every entry of S."""
    B = S.shape[0]
    if B == 1:
        return 2.0 * float(np.log(cfg.alpha)), np.zeros_like(S)
    gamma = (1.0 + cfg.beta) / cfg.tau
    delta = cfg.beta / cfg.tau
    logB1 = math.log(B - 1)
    total = 0.0
    grad = np.zeros_like(S)
    for transposed in (False, True):
        M = S.T if transposed else S
        term1, _, logA, logC, logD = _row_terms(M, cfg)
        total += float((-np.diag(M) / cfg.tau + logD).sum())
        g = gamma * np.exp(logB1 + gamma * M - logD[:, None] - logC[:, None])
        g -= delta * np.exp(logB1 + logA[:, None] + delta * M - logD[:, None] - 2.0 * logC[:, None])
        np.fill_diagonal(g, -1.0 / cfg.tau + np.exp(term1 - logD) / cfg.tau)
        grad += g.T if transposed else g
    return total, grad


@dataclass(frozen=True)
class TrainingRow:
    """One triplet resolved to vectors: the frozen query visual embedding,
    modification-text embedding, and target video embedding."""

    target_id: str
    visual: np.ndarray
    text: np.ndarray
    target: np.ndarray


@dataclass
class TrainingBatch:
    rows: list[TrainingRow]

    def __post_init__(self) -> None:
        if len(self.rows) < 1:
            raise TrainingError("empty batch")

    def __len__(self) -> int:
        return len(self.rows)

    def matrices(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        V = np.stack([r.visual for r in self.rows]).astype(np.float64)
        T = np.stack([r.text for r in self.rows]).astype(np.float64)
        H = np.stack([r.target for r in self.rows]).astype(np.float64)
        return V, T, H

    def target_ids(self) -> list[str]:
        return [r.target_id for r in self.rows]


def loss_gradient(
    batch: TrainingBatch, head: FusionHead, cfg: HnNceConfig
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean loss over the batch and its exact gradient w.r.t. head params.

    Differentiates through the loss, the cosine matrix, the output
    normalization, and both MLP layers; target embeddings are constants.
    """
    V, T, H = batch.matrices()
    F, X, Z, U = _forward_batch(head, V, T)
    S = F @ H.T
    if np.isnan(S).any():
        raise TrainingError("NaN in similarity matrix")
    B = len(batch)
    total, dS = _loss_grad_S(S, cfg)
    loss = total / B
    dS = dS / B

    dF = dS @ H
    norms = np.linalg.norm(U, axis=1)
    dU = (dF - (F * dF).sum(axis=1)[:, None] * F) / norms[:, None]
    A = np.maximum(Z, 0.0)
    dW2 = A.T @ dU
    db2 = dU.sum(axis=0)
    dA = dU @ head.W2.T
    dZ = dA * (Z > 0.0)
    dW1 = X.T @ dZ
    db1 = dZ.sum(axis=0)
    return loss, {"W1": dW1, "b1": db1, "W2": dW2, "b2": db2}


def batch_loss(batch: TrainingBatch, head: FusionHead, cfg: HnNceConfig) -> float:
    V, T, H = batch.matrices()
    F, _, _, _ = _forward_batch(head, V, T)
    return hn_nce_loss(F @ H.T, cfg) / len(batch)


def sample_batches(
    rows: Sequence[TrainingRow],
    batch_size: int,
    seed: int,
    mode: str = BY_TARGET,
) -> Iterator[TrainingBatch]:
    """One epoch of batches.

    by_target: shuffle the distinct target ids, emit batches of that many
    targets, and pick one associated row per target uniformly at random, so
    no batch repeats a target. by_triplet: plain shuffled row batches (the
    ablation baseline; targets may repeat).
    """
    if not rows:
        raise TrainingError("no training rows")
    if batch_size < 2:
        raise TrainingError("batch_size must be >= 2")
    rng = np.random.Generator(np.random.PCG64(seed))
    if mode == BY_TARGET:
        groups: dict[str, list[TrainingRow]] = {}
        for row in rows:
            groups.setdefault(row.target_id, []).append(row)
        target_ids = sorted(groups)
        order = rng.permutation(len(target_ids))
        picked = []
        for idx in order:
            group = groups[target_ids[idx]]
            picked.append(group[int(rng.integers(len(group)))])
        for start in range(0, len(picked), batch_size):
            batch = TrainingBatch(picked[start : start + batch_size])
            assert len(set(batch.target_ids())) == len(batch), "duplicate target in by_target batch"
            yield batch
    elif mode == BY_TRIPLET:
        order = rng.permutation(len(rows))
        shuffled = [rows[i] for i in order]
        for start in range(0, len(shuffled), batch_size):
            yield TrainingBatch(shuffled[start : start + batch_size])
    else:
        raise TrainingError(f"unknown batch mode: {mode!r}")


@dataclass
class TrainResult:
    head: FusionHead
    loss_curve: list[float] = field(default_factory=list)  # index 0 = before training


def train(rows: Sequence[TrainingRow], dim: int, cfg: HnNceConfig) -> TrainResult:
    """Plain seeded gradient descent over epochs of sampled batches.

    The loss curve holds a deterministic full-data evaluation (fixed batching
    seeded by cfg.seed) before training and after each epoch, so a zero
    learning rate yields a constant curve.
    """
    head = init_head(dim, cfg.seed, cfg.h_dim)

    def eval_loss() -> float:
        total, n = 0.0, 0
        for batch in sample_batches(rows, cfg.batch_size, cfg.seed, cfg.mode):
            total += batch_loss(batch, head, cfg) * len(batch)
            n += len(batch)
        return total / n

    curve = [eval_loss()]
    for epoch in range(cfg.epochs):
        for batch in sample_batches(rows, cfg.batch_size, cfg.seed + 1 + epoch, cfg.mode):
            loss, grads = loss_gradient(batch, head, cfg)
            if not math.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}: {loss}")
            head.W1 -= cfg.learning_rate * grads["W1"]
            head.b1 -= cfg.learning_rate * grads["b1"]
            head.W2 -= cfg.learning_rate * grads["W2"]
            head.b2 -= cfg.learning_rate * grads["b2"]
        curve.append(eval_loss())
    return TrainResult(head=head, loss_curve=curve)


def save_head(head: FusionHead, path: str | Path, meta: Optional[dict] = None) -> None:
    """Checkpoint: u32 LE header length, JSON header, then all parameters as
    a little-endian f32 blob in W1, b1, W2, b2 order."""
    header = {"dim": head.dim, "h_dim": head.h_dim}
    if meta:
        header.update(meta)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for name in ("W1", "b1", "W2", "b2"):
            fh.write(np.ascontiguousarray(head.params()[name], dtype="<f4").tobytes())


def load_head(path: str | Path) -> tuple[FusionHead, dict]:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise TrainingError(f"{path}: truncated checkpoint")
    (header_len,) = struct.unpack_from("<I", data, 0)
    header = json.loads(data[4 : 4 + header_len].decode("utf-8"))
    dim, h_dim = header["dim"], header["h_dim"]
    offset = 4 + header_len
    shapes = [("W1", (2 * dim, h_dim)), ("b1", (h_dim,)), ("W2", (h_dim, dim)), ("b2", (dim,))]
    params = {}
    for name, shape in shapes:
        size = int(np.prod(shape))
        if offset + 4 * size > len(data):
            raise TrainingError(f"{path}: truncated parameter blob at {name}")
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=offset)
        params[name] = arr.reshape(shape).astype(np.float64)
        offset += 4 * size
    return FusionHead(**params), header
