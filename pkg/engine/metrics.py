"""
Rank correlation, continual-learning indices and the KL analysis of BN banks.

Matrices are T×T float arrays indexed [t, k] (model after task t, test set k)
with NaN where an entry is undefined.
"""
from dataclasses import dataclass, field
import logging

import numpy as np
from scipy.stats import rankdata

from engine.errors import InvalidArgumentError, UndefinedCorrelationError

logger = logging.getLogger(__name__)


def srcc(a, b) -> float:
    """Spearman correlation with average ranks for ties"""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise InvalidArgumentError(f'srcc needs equal lengths, got {a.shape[0]} and {b.shape[0]}')
    if a.shape[0] < 2:
        raise UndefinedCorrelationError('srcc needs at least two samples')
    ra = rankdata(a, method='average')
    rb = rankdata(b, method='average')
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra * ra).sum() * (rb * rb).sum())
    if denom == 0:
        raise UndefinedCorrelationError('srcc is undefined for constant ranks')
    return float(np.clip((ra * rb).sum() / denom, -1.0, 1.0))


def msrcc(final_row) -> float:
    return float(np.mean(np.asarray(final_row, dtype=np.float64)))


def mpi(diagonal) -> float:
    return float(np.mean(np.asarray(diagonal, dtype=np.float64)))


def msi(cross_matrix) -> tuple[list[float], float]:
    """SI_1 = 1; SI_t = mean over k<t of the model-t vs model-k correlation"""
    cross = np.asarray(cross_matrix, dtype=np.float64)
    if cross.ndim != 2 or cross.shape[0] != cross.shape[1]:
        raise InvalidArgumentError(f'cross matrix must be square, got {cross.shape}')
    si = [1.0]
    for t in range(1, cross.shape[0]):
        row = cross[t, :t]
        if not np.all(np.isfinite(row)):
            raise InvalidArgumentError(f'cross matrix misses entries for model {t + 1}')
        si.append(float(row.mean()))
    return si, float(np.mean(si))


def mpsi(pi, si) -> tuple[list[float], float]:
    pi = np.asarray(pi, dtype=np.float64)
    si = np.asarray(si, dtype=np.float64)
    if pi.shape != si.shape:
        raise InvalidArgumentError('plasticity and stability vectors differ in length')
    psi = (pi + si) / 2.0
    return psi.tolist(), float(psi.mean())


def length_curve(psi) -> list[float]:
    """mPSI of every prefix length: mean of PSI_1..PSI_t"""
    psi = np.asarray(psi, dtype=np.float64)
    return (np.cumsum(psi) / np.arange(1, psi.shape[0] + 1)).tolist()


@dataclass
class SequenceResults:
    task_ids: list[str]
    srcc_matrix: np.ndarray
    cross_matrix: np.ndarray
    msrcc: float = float('nan')
    pi: list[float] = field(default_factory=list)
    mpi: float = float('nan')
    si: list[float] = field(default_factory=list)
    msi: float = float('nan')
    psi: list[float] = field(default_factory=list)
    mpsi: float = float('nan')

    @classmethod
    def from_matrices(cls, task_ids, srcc_matrix, cross_matrix) -> 'SequenceResults':
        srcc_matrix = np.asarray(srcc_matrix, dtype=np.float64)
        cross_matrix = np.asarray(cross_matrix, dtype=np.float64)
        results = cls(list(task_ids), srcc_matrix, cross_matrix)
        results.msrcc = msrcc(srcc_matrix[-1])
        results.pi = np.diag(srcc_matrix).tolist()
        results.mpi = mpi(results.pi)
        results.si, results.msi = msi(cross_matrix)
        results.psi, results.mpsi = mpsi(results.pi, results.si)
        return results

    def length_curve(self) -> list[float]:
        return length_curve(self.psi)

    def scalars(self) -> dict:
        return {'mSRCC': self.msrcc, 'mPI': self.mpi, 'mSI': self.msi, 'mPSI': self.mpsi}

    def to_dict(self) -> dict:
        return {
            'task_ids': self.task_ids,
            'srcc': self.srcc_matrix.tolist(),
            'srcc_hat': self.cross_matrix.tolist(),
            'PI': self.pi, 'SI': self.si, 'PSI': self.psi,
            'mPSI_curve': self.length_curve(),
            **self.scalars(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'SequenceResults':
        def matrix(rows):
            return np.array([[np.nan if v is None else v for v in row] for row in rows], dtype=np.float64)
        return cls.from_matrices(data['task_ids'], matrix(data['srcc']), matrix(data['srcc_hat']))


# ---------------------------------------------------------------------------
# BN bank divergence
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BankGaussian:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def from_bank(cls, bank) -> 'BankGaussian':
        """Diagonal Gaussian of the last BN site's running statistics"""
        site = bank.sites[-1]
        return cls(np.asarray(site.mean, dtype=np.float64), np.asarray(site.var, dtype=np.float64))


def bank_kl(p: BankGaussian, q: BankGaussian) -> float:
    """KL(p ‖ q) between diagonal Gaussians"""
    if p.mean.shape != q.mean.shape or p.var.shape != p.mean.shape or q.var.shape != q.mean.shape:
        raise InvalidArgumentError('Gaussians must share one dimension')
    if np.any(p.var <= 0) or np.any(q.var <= 0):
        raise InvalidArgumentError('variances must be positive')
    terms = 0.5 * np.log(q.var / p.var) + (p.var + (p.mean - q.mean) ** 2) / (2.0 * q.var) - 0.5
    return float(max(terms.sum(), 0.0))


def kl_matrix(gaussians: list[BankGaussian]) -> np.ndarray:
    n = len(gaussians)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                out[i, j] = bank_kl(gaussians[i], gaussians[j])
    return out


def kl_vs_srcc_correlation(kl, cross_task_srcc) -> float:
    """Spearman correlation over off-diagonal entries of the two matrices"""
    kl = np.asarray(kl, dtype=np.float64)
    cross = np.asarray(cross_task_srcc, dtype=np.float64)
    if kl.shape != cross.shape or kl.ndim != 2 or kl.shape[0] != kl.shape[1]:
        raise InvalidArgumentError(f'matrices must be square and equal in shape: {kl.shape} vs {cross.shape}')
    off = ~np.eye(kl.shape[0], dtype=bool)
    if off.sum() < 2:
        raise UndefinedCorrelationError('need at least two off-diagonal pairs')
    return srcc(kl[off], cross[off])
