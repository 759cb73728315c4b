"""IHT and consistent-IHT declipping with an overcomplete DCT dictionary.

Frames are solved in batches. Each frame keeps its own sparsity level and
step size, so a residual increase in one frame only slows that frame down,
and frames leave the batch once their residual drops below tolerance or
their level schedule runs out.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.fft

from .signal_core import Waveform

log = logging.getLogger(__name__)

RELIABLE, CLIPPED_POS, CLIPPED_NEG = 0, 1, -1
DETECTION_TOL = 1e-4


@dataclass(frozen=True)
class ClipMask:
    labels: np.ndarray  # int8 in {RELIABLE, CLIPPED_POS, CLIPPED_NEG}
    theta: float

    @property
    def reliable(self) -> np.ndarray:
        return self.labels == RELIABLE

    @property
    def positive(self) -> np.ndarray:
        return self.labels == CLIPPED_POS

    @property
    def negative(self) -> np.ndarray:
        return self.labels == CLIPPED_NEG

    def __len__(self):
        return self.labels.shape[0]

    def __getitem__(self, sl: slice) -> "ClipMask":
        return ClipMask(self.labels[sl], self.theta)


def build_clip_mask(y, theta: float, tol: float = DETECTION_TOL) -> ClipMask:
    if theta <= 0:
        raise ValueError("theta must be positive")
    ys = y.samples if isinstance(y, Waveform) else np.asarray(y, dtype=np.float64)
    level = theta * (1.0 - tol)
    labels = np.zeros(ys.shape, dtype=np.int8)
    labels[ys >= level] = CLIPPED_POS
    labels[ys <= -level] = CLIPPED_NEG
    return ClipMask(labels, float(theta))


@dataclass(frozen=True)
class Dictionary:
    atoms: np.ndarray  # (frame_len, n_atoms), unit-norm columns
    dct_norms: np.ndarray | None = None  # set for DCT atoms; enables FFT-based products

    def synthesize(self, coefs: np.ndarray) -> np.ndarray:
        """Row-wise ``D @ a``: (n, n_atoms) coefficients to (n, frame_len) frames."""
        if self.dct_norms is None:
            return coefs @ self.atoms.T
        b = coefs / self.dct_norms
        # unnormalised DCT-III: y = b0 + 2 sum_j b_j cos(pi j (2n+1) / 2K)
        y = scipy.fft.dct(b, type=3, axis=-1)
        return 0.5 * (y[..., : self.frame_len] + b[..., :1])

    def analyze(self, frames: np.ndarray) -> np.ndarray:
        """Row-wise ``D^T r``: (n, frame_len) residuals to (n, n_atoms)."""
        if self.dct_norms is None:
            return frames @ self.atoms
        padded = np.zeros(frames.shape[:-1] + (self.n_atoms,))
        padded[..., : self.frame_len] = frames
        return 0.5 * scipy.fft.dct(padded, type=2, axis=-1) / self.dct_norms

    @property
    def frame_len(self) -> int:
        return self.atoms.shape[0]

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[1]

    def spectral_norm_sq(self, n_iter: int = 100, seed: int = 0) -> float:
        """Power-iteration estimate of the largest eigenvalue of D^T D."""
        v = np.random.default_rng(seed).standard_normal(self.n_atoms)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(n_iter):
            w = self.analyze(self.synthesize(v[None, :]))[0]
            lam = float(np.linalg.norm(w))
            if lam == 0.0:
                break
            v = w / lam
        return lam


def dct_dictionary(frame_len: int = 512, n_atoms: int = 1024) -> Dictionary:
    """Sampled DCT-II cosines at ``n_atoms`` uniformly spaced frequencies."""
    if frame_len < 1 or n_atoms < frame_len:
        raise ValueError(f"need 1 <= frame_len <= n_atoms, got {frame_len}, {n_atoms}")
    n = np.arange(frame_len)[:, None]
    j = np.arange(n_atoms)[None, :]
    atoms = np.cos(np.pi * j * (2 * n + 1) / (2 * n_atoms))
    norms = np.linalg.norm(atoms, axis=0)
    return Dictionary(atoms / norms, norms)


@dataclass(frozen=True)
class SparseSolverConfig:
    frame_len: int = 512
    frame_shift: int = 128
    k_start: int = 1
    k_step: int = 1
    k_max: int | None = None  # defaults to frame_len // 8
    max_iters: int = 50  # iterations per sparsity level
    step_size: float | None = None  # defaults to 1 / ||D||^2
    tolerance: float = 1e-10  # residual norm relative to the observed-sample norm
    stall_tol: float = 1e-3  # relative cost decrease that ends a sparsity level early

    def __post_init__(self):
        for name in ("frame_len", "frame_shift", "k_start", "k_step", "max_iters"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.stall_tol < 0:
            raise ValueError("stall_tol must be non-negative")
        if self.tolerance <= 0 or (self.step_size is not None and self.step_size <= 0):
            raise ValueError("tolerance and step_size must be positive")

    def k_cap(self, n_atoms: int) -> int:
        cap = self.frame_len // 8 if self.k_max is None else self.k_max
        if cap > n_atoms:
            raise ValueError(f"k cap {cap} exceeds dictionary size {n_atoms}")
        return max(cap, self.k_start)


class FrameSolution(NamedTuple):
    frame: np.ndarray
    coefficients: np.ndarray
    converged: bool
    iterations: int
    residuals: list  # residual norm after each iteration


def consistency_project(x_hat, y_frame, mask: ClipMask, theta: float | None = None) -> np.ndarray:
    """Closest point of the clipping-consistent set, componentwise."""
    theta = mask.theta if theta is None else theta
    out = np.array(x_hat, dtype=np.float64, copy=True)
    y_frame = np.asarray(y_frame, dtype=np.float64)
    rel, pos, neg = mask.reliable, mask.positive, mask.negative
    out[rel] = y_frame[rel]
    out[pos] = np.maximum(out[pos], theta)
    out[neg] = np.minimum(out[neg], -theta)
    return out


def _residual(Y, Z, rel, pos, neg, theta, consistent):
    """Residual whose squared norm is the cost; its back-projection is the descent direction."""
    r = np.where(rel, Y - Z, 0.0)
    if consistent:
        r = r + np.where(pos, np.maximum(0.0, theta - Z), 0.0)
        r = r + np.where(neg, np.minimum(0.0, -theta - Z), 0.0)
    return r


def _hard_threshold(B: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Keep the ``k[i]`` largest-magnitude entries of row ``i``."""
    out = np.zeros_like(B)
    for kk in np.unique(k):
        rows = np.flatnonzero(k == kk)
        if kk >= B.shape[1]:
            out[rows] = B[rows]
            continue
        sub = B[rows]
        idx = np.argpartition(-np.abs(sub), kk - 1, axis=1)[:, :kk]
        r = np.arange(rows.size)[:, None]
        kept = np.zeros_like(sub)
        kept[r, idx] = sub[r, idx]
        out[rows] = kept
    return out


def _solve_batch(Y, labels, theta, dictionary: Dictionary, cfg: SparseSolverConfig,
                 consistent: bool, track: bool = False):
    """Run the (consistent) IHT iteration on every row of ``Y`` at once.

    Each row advances its own sparsity level after ``max_iters`` iterations,
    or earlier once its cost stops decreasing by more than ``stall_tol``
    (relative). Returns coefficients, converged flags, iteration counts and,
    if ``track``, the per-iteration residual norms of each row.
    """
    n_frames = Y.shape[0]
    rel, pos, neg = labels == RELIABLE, labels == CLIPPED_POS, labels == CLIPPED_NEG
    mu0 = cfg.step_size if cfg.step_size is not None else 1.0 / dictionary.spectral_norm_sq()
    mu = np.full(n_frames, mu0)
    A = np.zeros((n_frames, dictionary.n_atoms))
    scale = np.linalg.norm(np.where(rel, Y, 0.0), axis=1)
    if consistent:
        scale = np.sqrt(scale**2 + theta**2 * (pos | neg).sum(axis=1))
    scale = np.where(scale > 0, scale, 1.0)
    goal = cfg.tolerance * scale

    R = _residual(Y, np.zeros_like(Y), rel, pos, neg, theta, consistent)
    cost = np.einsum("ij,ij->i", R, R)
    converged = np.sqrt(cost) <= goal
    iters = np.zeros(n_frames, dtype=int)
    history = [[] for _ in range(n_frames)] if track else None

    k_cap = cfg.k_cap(dictionary.n_atoms)
    k = np.full(n_frames, min(cfg.k_start, k_cap))
    at_level = np.zeros(n_frames, dtype=int)
    active = np.flatnonzero(~converged)
    while active.size:
        a_act = A[active]
        grad = dictionary.analyze(R[active])
        todo = np.arange(active.size)
        new_a = np.empty_like(a_act)
        new_R = np.empty((active.size, Y.shape[1]))
        new_cost = np.empty(active.size)
        for _halving in range(30):
            rows = active[todo]
            cand = _hard_threshold(a_act[todo] + mu[rows, None] * grad[todo], k[rows])
            Rc = _residual(Y[rows], dictionary.synthesize(cand), rel[rows], pos[rows],
                           neg[rows], theta, consistent)
            cc = np.einsum("ij,ij->i", Rc, Rc)
            new_a[todo], new_R[todo], new_cost[todo] = cand, Rc, cc
            worse = cc > cost[rows] * (1.0 + 1e-12) + 1e-300
            if not worse.any():
                break
            mu[rows[worse]] *= 0.5
            todo = todo[worse]
        stalled = cost[active] - new_cost <= cfg.stall_tol * cost[active]
        A[active] = new_a
        R[active] = new_R
        cost[active] = new_cost
        iters[active] += 1
        at_level[active] += 1
        if track:
            for i, f in enumerate(active):
                history[f].append(float(np.sqrt(new_cost[i])))
        done = np.sqrt(new_cost) <= goal[active]
        converged[active[done]] = True
        level_over = ~done & ((at_level[active] >= cfg.max_iters) | stalled)
        exhausted = level_over & (k[active] >= k_cap)
        bump = active[level_over & ~exhausted]
        k[bump] = np.minimum(k[bump] + cfg.k_step, k_cap)
        at_level[bump] = 0
        active = active[~(done | exhausted)]
    return A, converged, iters, history


def _frame_labels(mask: ClipMask) -> np.ndarray:
    return np.asarray(mask.labels, dtype=np.int8)


def _declip_frame(y_frame, mask, dictionary, cfg, consistent) -> FrameSolution:
    y_frame = np.asarray(y_frame, dtype=np.float64)
    if y_frame.shape[0] != dictionary.frame_len or len(mask) != dictionary.frame_len:
        raise ValueError(
            f"frame length {y_frame.shape[0]} does not match dictionary ({dictionary.frame_len})"
        )
    A, conv, iters, hist = _solve_batch(
        y_frame[None, :], _frame_labels(mask)[None, :], mask.theta, dictionary, cfg,
        consistent, track=True,
    )
    a = A[0]
    estimate = dictionary.synthesize(a[None, :])[0]
    if consistent:
        out = consistency_project(estimate, y_frame, mask)
    else:
        out = np.where(mask.reliable, y_frame, estimate)
    return FrameSolution(out, a, bool(conv[0]), int(iters[0]), hist[0])


def iht_declip_frame(y_frame, mask: ClipMask, dictionary: Dictionary,
                     cfg: SparseSolverConfig = SparseSolverConfig()) -> FrameSolution:
    """Plain IHT fit to the reliable samples; clipped samples are free."""
    return _declip_frame(y_frame, mask, dictionary, cfg, consistent=False)


def consistent_iht_declip_frame(y_frame, mask: ClipMask, dictionary: Dictionary,
                                cfg: SparseSolverConfig = SparseSolverConfig()) -> FrameSolution:
    """IHT with one-sided penalties pushing clipped samples beyond theta."""
    return _declip_frame(y_frame, mask, dictionary, cfg, consistent=True)


VARIANTS = ("iht", "consistent_iht")


class BatchSolution(NamedTuple):
    frames: np.ndarray
    coefficients: np.ndarray
    converged: np.ndarray


def declip_frames(frames, masks, dictionary: Dictionary,
                  cfg: SparseSolverConfig = SparseSolverConfig(),
                  variant: str = "consistent_iht"):
    """Batched form of the frame solvers; all masks must share one theta."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    Y = np.asarray(frames, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[1] != dictionary.frame_len or len(masks) != Y.shape[0]:
        raise ValueError("frames must be (n, frame_len) with one mask per frame")
    thetas = {m.theta for m in masks}
    if len(thetas) != 1:
        raise ValueError("all masks must share the same theta")
    theta = thetas.pop()
    labels = np.stack([_frame_labels(m) for m in masks])
    consistent = variant == "consistent_iht"
    A, conv, _, _ = _solve_batch(Y, labels, theta, dictionary, cfg, consistent)
    est = dictionary.synthesize(A)
    out = np.where(labels == RELIABLE, Y, est)
    if consistent:
        out = np.where(labels == CLIPPED_POS, np.maximum(out, theta), out)
        out = np.where(labels == CLIPPED_NEG, np.minimum(out, -theta), out)
    return BatchSolution(out, A, conv)


def declip_signal(y: Waveform, theta: float, dictionary: Dictionary | None = None,
                  cfg: SparseSolverConfig = SparseSolverConfig(),
                  variant: str = "consistent_iht") -> Waveform:
    """Frame, declip and overlap-add a whole signal.

    Frames without clipped samples are copied through, frames without any
    reliable sample are left unchanged and counted as unsolvable.
    """
    if theta <= 0:
        raise ValueError("theta must be positive")
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if dictionary is None:
        dictionary = dct_dictionary(cfg.frame_len, 2 * cfg.frame_len)
    if dictionary.frame_len != cfg.frame_len:
        raise ValueError("dictionary frame length differs from solver config")
    consistent = variant == "consistent_iht"
    N, L, H = len(y), cfg.frame_len, cfg.frame_shift
    pad = L - H
    n_frames = (N - 1 + pad) // H + 1
    total = (n_frames - 1) * H + L
    buf = np.zeros(total)
    buf[pad : pad + N] = y.samples
    frames = np.lib.stride_tricks.sliding_window_view(buf, L)[::H][:n_frames].copy()
    mask = build_clip_mask(buf, theta)
    labels = np.lib.stride_tricks.sliding_window_view(mask.labels, L)[::H][:n_frames]

    clipped_any = (labels != RELIABLE).any(axis=1)
    reliable_any = (labels == RELIABLE).any(axis=1)
    solve = np.flatnonzero(clipped_any & reliable_any)
    n_unsolvable = int((~reliable_any).sum())
    estimates = frames.copy()
    if solve.size:
        A, conv, _, _ = _solve_batch(frames[solve], labels[solve], float(theta),
                                     dictionary, cfg, consistent)
        est = dictionary.synthesize(A)
        rel = labels[solve] == RELIABLE
        estimates[solve] = np.where(rel, frames[solve], est)
        n_unconverged = int((~conv).sum())
    else:
        n_unconverged = 0
    log.debug("declip_signal: %d frames, %d solved, %d unsolvable, %d unconverged",
              n_frames, solve.size, n_unsolvable, n_unconverged)

    w2 = np.hanning(L + 1)[:L] ** 2  # periodic Hann, squared
    out = np.zeros(total)
    norm = np.zeros(total)
    for t in range(n_frames):
        s = t * H
        out[s : s + L] += w2 * estimates[t]
        norm[s : s + L] += w2
    out = out[pad : pad + N] / norm[pad : pad + N]
    sig_mask = mask[pad : pad + N]
    if consistent:
        out = consistency_project(out, y.samples, sig_mask)
    else:
        out = np.where(sig_mask.reliable, y.samples, out)
    return y.with_samples(out)
