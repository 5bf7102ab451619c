"""Empirical NTK assembly and kernel analytics.

Kernels are built from per-sample parameter Jacobians (reverse mode, vmapped
over samples) at a frozen parameter point with inference-mode batch norm.
All metric functions work on float64 numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch.func import jacrev, vmap

from . import io
from .engine import _apply
from .models import ModelSnapshot

KERNEL_MAGIC = b"NTKKERN1"


class KernelSymmetryError(RuntimeError):
    """Assembled kernel is not symmetric; indicates a differentiation bug."""


class EigenSolverError(RuntimeError):
    pass


@dataclass
class ClassKernel:
    """Class-resolved empirical NTK.

    ``blocks`` has shape [C, N, N] (diagonal class blocks only) or
    [C, C, N, N] when ``full`` is set.
    """

    blocks: np.ndarray
    full: bool = False
    sample_ids: list = field(default_factory=list)
    epoch: int = 0
    snapshot_id: str = ""
    config_hash: str = ""
    class_indices: list | None = None

    @property
    def C(self) -> int:
        return self.blocks.shape[0]

    @property
    def N(self) -> int:
        return self.blocks.shape[-1]

    def diag(self, c: int) -> np.ndarray:
        return self.blocks[c, c] if self.full else self.blocks[c]

    def diagonal_blocks(self) -> np.ndarray:
        if self.full:
            return np.stack([self.blocks[c, c] for c in range(self.C)])
        return self.blocks

    def trace_kernel(self) -> np.ndarray:
        """Mean of the class-diagonal blocks."""
        return self.diagonal_blocks().mean(axis=0)

    def flat_matrix(self) -> np.ndarray:
        """The full kernel as a (C*N) x (C*N) matrix, class-major."""
        if not self.full:
            raise ValueError("off-diagonal blocks were not computed")
        C, N = self.C, self.N
        return self.blocks.transpose(0, 2, 1, 3).reshape(C * N, C * N)

    def save(self, path) -> Path:
        header = {
            "format": "ntkk",
            "epoch": self.epoch,
            "snapshot_id": self.snapshot_id,
            "sample_ids": [int(i) for i in self.sample_ids],
            "C": self.C,
            "N": self.N,
            "full": self.full,
            "class_indices": self.class_indices,
            "config_hash": self.config_hash,
        }
        return io.write_container(path, KERNEL_MAGIC, header, {"blocks": self.blocks})

    @classmethod
    def load(cls, path) -> "ClassKernel":
        header, arrays = io.read_container(path, KERNEL_MAGIC)
        return cls(
            arrays["blocks"],
            header["full"],
            header["sample_ids"],
            header["epoch"],
            header["snapshot_id"],
            header.get("config_hash", ""),
            header.get("class_indices"),
        )


def class_jacobians(snapshot: ModelSnapshot, samples, class_indices: Sequence[int] | None = None,
                    chunk: int = 64) -> np.ndarray:
    """Per-sample Jacobians of the selected class outputs, shape [c, N, P]."""
    params, stats = snapshot.restore(torch.float64)
    graph = snapshot.arch.graph
    x = torch.as_tensor(samples).to(torch.float64)
    classes = list(range(snapshot.arch.num_classes)) if class_indices is None else list(class_indices)
    idx = torch.tensor(classes, dtype=torch.long)

    def f_single(p, xi):
        return _apply(graph, p, xi[None], stats, False, False)[0][0, idx]

    per_sample = vmap(jacrev(f_single), in_dims=(None, 0))
    blocks = []
    for start in range(0, len(x), chunk):
        jac = per_sample(params.tensors, x[start : start + chunk])
        flat = torch.cat([jac[k].reshape(jac[k].shape[0], len(classes), -1) for k in params.tensors], dim=2)
        blocks.append(flat.transpose(0, 1))
    if not blocks:
        return np.zeros((len(classes), 0, params.total_len))
    return torch.cat(blocks, dim=1).numpy()


def _symmetrize(K: np.ndarray, tol: float) -> np.ndarray:
    scale = max(1.0, float(np.abs(K).max(initial=0.0)))
    asym = float(np.abs(K - K.T).max(initial=0.0))
    if asym > tol * scale:
        raise KernelSymmetryError(f"kernel asymmetry {asym:.3e} exceeds {tol:.1e} x {scale:.3e}")
    return 0.5 * (K + K.T)


def compute_ntk(snapshot: ModelSnapshot, samples, classes: str = "diagonal", *,
                class_indices: Sequence[int] | None = None, sample_ids=None,
                chunk: int = 64, sym_tol: float = 1e-9) -> ClassKernel:
    """Empirical NTK K[c, c'][i, j] = grad f_c(x_i) . grad f_c'(x_j) at the snapshot.

    ``classes="diagonal"`` computes only the C class-diagonal blocks.
    """
    if classes not in ("diagonal", "full"):
        raise ValueError("classes must be 'diagonal' or 'full'")
    class_list = list(range(snapshot.arch.num_classes)) if class_indices is None else list(class_indices)
    n = len(samples)
    if classes == "full":
        J = class_jacobians(snapshot, samples, class_list, chunk)
        C = len(class_list)
        Jf = J.reshape(C * n, -1)
        flat = _symmetrize(Jf @ Jf.T, sym_tol)
        blocks = flat.reshape(C, n, C, n).transpose(0, 2, 1, 3).copy()
    else:
        out = []
        for c in class_list:
            Jc = class_jacobians(snapshot, samples, [c], chunk)[0]
            out.append(_symmetrize(Jc @ Jc.T, sym_tol))
        blocks = np.stack(out) if out else np.zeros((0, n, n))
    return ClassKernel(
        blocks,
        classes == "full",
        list(range(n)) if sample_ids is None else [int(i) for i in sample_ids],
        snapshot.spawn_epoch,
        snapshot.id,
        snapshot.config_hash,
        class_list if class_indices is not None else None,
    )


# -- metrics ------------------------------------------------------------------


def kernel_distance(K1, K2) -> float:
    """1 - <K1, K2>_F / (|K1|_F |K2|_F).

    Evaluated as |K1/|K1| - K2/|K2||_F^2 / 2, which is algebraically the same
    and exactly zero for identical inputs.
    """
    K1 = np.asarray(K1, dtype=np.float64)
    K2 = np.asarray(K2, dtype=np.float64)
    if K1.shape != K2.shape:
        raise ValueError(f"kernel shapes differ: {K1.shape} vs {K2.shape}")
    n1, n2 = np.linalg.norm(K1), np.linalg.norm(K2)
    if n1 == 0 or n2 == 0:
        raise ValueError("kernel distance is undefined for a zero-norm kernel")
    d = K1 / n1 - K2 / n2
    return float(0.5 * np.vdot(d, d))


def _check_epochs(trace) -> list[int]:
    epochs = [int(e) for e, _ in trace]
    if len(set(epochs)) != len(epochs):
        raise ValueError("duplicate epochs in kernel trace")
    if any(b <= a for a, b in zip(epochs, epochs[1:])):
        raise ValueError("kernel trace epochs must be strictly increasing")
    return epochs


def kernel_velocity(trace) -> list[tuple[int, float]]:
    """Finite-difference dS/dt between neighbouring entries, divided by the epoch gap."""
    epochs = _check_epochs(trace)
    return [
        (epochs[i + 1], kernel_distance(trace[i][1], trace[i + 1][1]) / (epochs[i + 1] - epochs[i]))
        for i in range(len(trace) - 1)
    ]


def distance_to_final(trace) -> list[tuple[int, float]]:
    epochs = _check_epochs(trace)
    final = trace[-1][1]
    return [(e, kernel_distance(K, final)) for e, (_, K) in zip(epochs, trace)]


def symmetric_eigh(K, *, descending: bool = True, check: bool = True, tol: float = 1e-8):
    """Eigen-decomposition of a symmetric matrix via LAPACK, residual-checked."""
    K = np.asarray(K, dtype=np.float64)
    try:
        w, V = np.linalg.eigh(K)
    except np.linalg.LinAlgError as exc:
        raise EigenSolverError(str(exc)) from exc
    if check:
        norm = np.linalg.norm(K)
        if np.linalg.norm(K @ V - V * w) > tol * max(norm, np.finfo(float).tiny):
            raise EigenSolverError("eigendecomposition residual too large")
    if descending:
        w, V = w[::-1].copy(), V[:, ::-1].copy()
    return w, V


def effective_rank(K) -> float:
    """exp(Shannon entropy) of the normalized eigenvalue spectrum; negatives clip to 0."""
    K = np.asarray(K, dtype=np.float64)
    if np.abs(K - K.T).max(initial=0.0) > 1e-9 * max(1.0, np.abs(K).max(initial=0.0)):
        raise ValueError("effective rank needs a symmetric matrix")
    lam = np.clip(symmetric_eigh(K, descending=False)[0], 0.0, None)
    total = lam.sum()
    if total <= 0:
        raise ValueError("effective rank undefined: eigenvalues sum to zero")
    p = lam[lam > 0] / total
    return float(np.exp(-np.sum(p * np.log(p))))


def psd_violation(K) -> float:
    """min eigenvalue relative to trace/N; PSD kernels give >= -1e-8."""
    K = np.asarray(K, dtype=np.float64)
    lam_min = symmetric_eigh(K, descending=False, check=False)[0][0]
    scale = np.trace(K) / K.shape[0]
    return float(lam_min / scale) if scale > 0 else float(lam_min)


def label_indicators(labels, num_classes: int, encoding: str = "onehot") -> np.ndarray:
    """[C, N] class indicator vectors: 0/1 (``onehot``) or -1/+1 (``pm1``)."""
    labels = np.asarray(labels, dtype=np.int64)
    Y = (labels[None, :] == np.arange(num_classes)[:, None]).astype(np.float64)
    if encoding == "pm1":
        return 2.0 * Y - 1.0
    if encoding != "onehot":
        raise ValueError(f"unknown label encoding {encoding!r}")
    return Y


def alignment(K, y) -> float:
    """Cosine similarity between K and y y^T, i.e. 1 - S(K, y y^T)."""
    y = np.asarray(y, dtype=np.float64)
    return 1.0 - kernel_distance(K, np.outer(y, y))


def ksm(class_kernel: ClassKernel, labels, encoding: str = "onehot") -> np.ndarray:
    """Kernel specialization matrix M[c, c'] = A(K_cc, y_c') / mean_d A(K_dd, y_c')."""
    C = class_kernel.C
    Y = label_indicators(labels, C, encoding)
    A = np.array([[alignment(class_kernel.diag(c), Y[cp]) for cp in range(C)] for c in range(C)])
    denom = A.mean(axis=0)
    if np.any(denom <= 0):
        raise ValueError("kernel specialization undefined: zero mean alignment for some class")
    return A / denom[None, :]


def mean_ksm(M) -> float:
    return float(np.mean(np.diag(np.asarray(M))))
