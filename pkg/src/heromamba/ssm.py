"""Selective state-space scan (S6) and its four-direction 2-D wrapper (SS2D).

The recurrence per channel ``d`` and state ``s`` is::

    h[t] = exp(delta[t] * A[d, s]) * h[t-1] + delta[t] * B[t, s] * u[t]
    y[t] = sum_s C[t, s] * h[t] + D[d] * u[t]

with ``h[-1] = 0``. Forward and backward are sequential in ``t`` and run in
numba kernels, O(L * d_inner * d_state).
"""

from __future__ import annotations

import csv
import gc
import io
import time
from dataclasses import dataclass
from typing import Iterable, Optional

import numba
import numpy as np

from . import tensor as T
from .nn import Conv2d, LayerNorm2d, Module, Parameter, trunc_normal
from .tensor import Tensor, no_grad

DIRECTIONS = ("row", "row_rev", "col", "col_rev")


@numba.njit(cache=True)
def _scan_fwd(u, delta, A, B, C, D, hs):
    n_b, n_l, n_d = u.shape
    n_s = A.shape[1]
    y = np.zeros_like(u)
    h = np.zeros((n_d, n_s), dtype=u.dtype)
    for b in range(n_b):
        h[:, :] = 0.0
        for t in range(n_l):
            for d in range(n_d):
                dt = delta[b, t, d]
                du = dt * u[b, t, d]
                acc = D[d] * u[b, t, d]
                for s in range(n_s):
                    hv = np.exp(dt * A[d, s]) * h[d, s] + du * B[b, t, s]
                    h[d, s] = hv
                    hs[b, t, d, s] = hv
                    acc += C[b, t, s] * hv
                y[b, t, d] = acc
    return y


@numba.njit(cache=True)
def _scan_bwd(u, delta, A, B, C, D, hs, gy):
    n_b, n_l, n_d = u.shape
    n_s = A.shape[1]
    gu = np.zeros_like(u)
    gdelta = np.zeros_like(delta)
    gA = np.zeros_like(A)
    gB = np.zeros_like(B)
    gC = np.zeros_like(C)
    gD = np.zeros_like(D)
    # carry[d, s] = dLoss/dh[t] contributed by steps after t
    carry = np.zeros((n_d, n_s), dtype=u.dtype)
    for b in range(n_b):
        carry[:, :] = 0.0
        for t in range(n_l - 1, -1, -1):
            for d in range(n_d):
                dt = delta[b, t, d]
                ut = u[b, t, d]
                g_out = gy[b, t, d]
                gD[d] += g_out * ut
                acc_u = g_out * D[d]
                acc_dt = 0.0
                for s in range(n_s):
                    a = A[d, s]
                    gh = carry[d, s] + g_out * C[b, t, s]
                    gC[b, t, s] += g_out * hs[b, t, d, s]
                    hprev = hs[b, t - 1, d, s] if t > 0 else 0.0
                    abar = np.exp(dt * a)
                    g_abar = gh * hprev * abar
                    acc_dt += g_abar * a + gh * B[b, t, s] * ut
                    gA[d, s] += g_abar * dt
                    gB[b, t, s] += gh * dt * ut
                    acc_u += gh * dt * B[b, t, s]
                    carry[d, s] = gh * abar
                gdelta[b, t, d] = acc_dt
                gu[b, t, d] = acc_u
    return gu, gdelta, gA, gB, gC, gD


def selective_scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor) -> Tensor:
    """Run the discretised recurrence with explicit per-step parameters.

    Shapes: ``u, delta`` are (batch, L, d_inner); ``A`` is (d_inner, d_state);
    ``B, C`` are (batch, L, d_state); ``D`` is (d_inner,).
    """
    tensors = [T.as_tensor(v) for v in (u, delta, A, B, C, D)]
    u, delta, A, B, C, D = tensors
    if u.ndim != 3:
        raise ValueError(f"u must be (batch, L, d_inner), got {u.shape}")
    nb, length, nd = u.shape
    if length == 0:
        raise ValueError("selective scan needs a sequence of length >= 1")
    ns = A.shape[1]
    if delta.shape != u.shape or A.shape != (nd, ns) or D.shape != (nd,):
        raise ValueError(f"parameter shapes inconsistent with u {u.shape}")
    if B.shape != (nb, length, ns) or C.shape != (nb, length, ns):
        raise ValueError(f"B/C must be {(nb, length, ns)}, got {B.shape} and {C.shape}")
    if not np.isfinite(u.data).all():
        raise T.NonFiniteError("selective scan input contains non-finite values")
    dtype = np.result_type(*[t.data for t in tensors])
    arrs = [np.ascontiguousarray(t.data, dtype=dtype) for t in tensors]
    hs = np.empty((nb, length, nd, ns), dtype=dtype)
    y = _scan_fwd(*arrs, hs)

    def bw(g):
        return _scan_bwd(*arrs, hs, np.ascontiguousarray(g, dtype=dtype))

    return T._make(y, tensors, bw, "selective_scan")


class SelectiveScanParams(Module):
    """Δ/A/B/C/D parameter set for one scan direction.

    ``A`` is stored as ``A_log`` and used as ``-exp(A_log)`` so that every
    effective entry is strictly negative. Δ, B and C are projected from the
    input at every step; Δ goes through softplus after a learned bias.
    """

    def __init__(self, d_inner: int, d_state: int, rng: np.random.Generator,
                 dt_min: float = 1e-3, dt_max: float = 1e-1, std: float = 0.02):
        super().__init__()
        self.d_inner = d_inner
        self.d_state = d_state
        self.x_proj = Parameter(trunc_normal(rng, (d_inner, d_inner + 2 * d_state), std, fan_in=d_inner))
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=d_inner))
        # inverse softplus so softplus(dt_bias) == dt
        self.dt_bias = Parameter(dt + np.log(-np.expm1(-dt)))
        self.A_log = Parameter(np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_inner, 1))))
        self.D = Parameter(np.ones(d_inner))

    def project(self, u: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """Return (delta, A, B, C) for the sequence ``u``."""
        proj = T.linear(u, self.x_proj)
        d, s = self.d_inner, self.d_state
        delta = T.softplus(proj[..., :d] + self.dt_bias)
        B = proj[..., d:d + s]
        C = proj[..., d + s:]
        A = -T.exp(self.A_log)
        return delta, A, B, C


def selective_scan_1d(u: Tensor, p: SelectiveScanParams) -> Tensor:
    """Input-dependent S6 scan of ``u`` (L x d_inner or batch x L x d_inner)."""
    u = T.as_tensor(u)
    squeeze = u.ndim == 2
    if squeeze:
        u = u.reshape(1, *u.shape)
    if u.shape[1] == 0:
        raise ValueError("selective scan needs a sequence of length >= 1")
    if u.shape[-1] != p.d_inner:
        raise ValueError(f"u has {u.shape[-1]} channels, params expect d_inner={p.d_inner}")
    if not np.isfinite(u.data).all():
        raise T.NonFiniteError("selective scan input contains non-finite values")
    delta, A, B, C = p.project(u)
    y = selective_scan(u, delta, A, B, C, p.D)
    return y.reshape(*y.shape[1:]) if squeeze else y


# ---------------------------------------------------------------------------
# SS2D
# ---------------------------------------------------------------------------


def to_sequence(x: Tensor, direction: str) -> Tensor:
    """N x d x H x W feature map -> N x L x d sequence in ``direction`` order."""
    n, d, h, w = x.shape
    if direction in ("col", "col_rev"):
        x = x.transpose(0, 1, 3, 2)
    seq = x.reshape(n, d, h * w).transpose(0, 2, 1)
    if direction.endswith("_rev"):
        seq = T.flip(seq, 1)
    return seq


def from_sequence(seq: Tensor, direction: str, h: int, w: int) -> Tensor:
    """Inverse of :func:`to_sequence`."""
    n, _, d = seq.shape
    if direction.endswith("_rev"):
        seq = T.flip(seq, 1)
    x = seq.transpose(0, 2, 1)
    if direction in ("col", "col_rev"):
        return x.reshape(n, d, w, h).transpose(0, 1, 3, 2)
    return x.reshape(n, d, h, w)


class SS2D(Module):
    """Pre-norm, gated, four-direction selective-scan block with residual.

    x -> LayerNorm -> 1x1 proj to (u, gate) -> depthwise 3x3 + SiLU on u
      -> scan along row / reversed row / column / reversed column -> sum
      -> * SiLU(gate) -> 1x1 out proj (zero init) -> + x
    """

    def __init__(self, d_model: int, rng: np.random.Generator, d_state: int = 4,
                 expand: int = 2, tie_directions: bool = False, std: float = 0.02):
        super().__init__()
        self.d_model = d_model
        self.d_inner = d_inner = expand * d_model
        self.norm = LayerNorm2d(d_model)
        self.in_proj = Conv2d(d_model, 2 * d_inner, 1, rng, std=std)
        self.dwconv = Conv2d(d_inner, d_inner, 3, rng, groups=d_inner, std=std)
        n_sets = 1 if tie_directions else len(DIRECTIONS)
        self.scans = [SelectiveScanParams(d_inner, d_state, rng, std=std) for _ in range(n_sets)]
        self.out_proj = Conv2d(d_inner, d_model, 1, rng, zero_init=True)

    def scan_params(self, k: int) -> SelectiveScanParams:
        return self.scans[k % len(self.scans)]

    def merged_scan(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Return (sum of the four directional scans, gate) before gating."""
        n, c, h, w = x.shape
        if c != self.d_model:
            raise ValueError(f"SS2D expects {self.d_model} channels, got {c}")
        z = self.in_proj(self.norm(x))
        u = T.silu(self.dwconv(z[:, :self.d_inner]))
        gate = z[:, self.d_inner:]
        merged = None
        for k, direction in enumerate(DIRECTIONS):
            y = selective_scan_1d(to_sequence(u, direction), self.scan_params(k))
            y = from_sequence(y, direction, h, w)
            merged = y if merged is None else merged + y
        return merged, gate

    def forward(self, x: Tensor) -> Tensor:
        merged, gate = self.merged_scan(x)
        return x + self.out_proj(merged * T.silu(gate))


def ss2d_layer(x: Tensor, p: SS2D) -> Tensor:
    return p(x)


# ---------------------------------------------------------------------------
# complexity probe
# ---------------------------------------------------------------------------


@dataclass
class ProbeRow:
    L: int
    seconds: float


def scan_complexity_probe(
    lengths: Iterable[int],
    d_inner: int = 32,
    d_state: int = 4,
    kind: str = "scan",
    repeats: int = 5,
    seed: int = 0,
) -> list[ProbeRow]:
    """Time one forward pass per sequence length (best of ``repeats``).

    ``kind="scan"`` times :func:`selective_scan_1d`; ``kind="attention"`` times
    a dense softmax(QK^T)V over the same sequence as a quadratic contrast.
    Repeats run round-robin over the lengths, so a burst of machine load
    slows one sample of every length instead of every sample of one.
    """
    rng = np.random.default_rng(seed)
    params = SelectiveScanParams(d_inner, d_state, rng)
    lengths = list(lengths)
    runs = []
    for length in lengths:
        u = Tensor(rng.normal(size=(1, length, d_inner)).astype(np.float32))
        if kind == "scan":
            def run(u=u):
                with no_grad():
                    selective_scan_1d(u, params)
        elif kind == "attention":
            q = u.data[0]

            def run(q=q):
                scores = q @ q.T
                scores -= scores.max(axis=1, keepdims=True)
                np.exp(scores, out=scores)
                scores /= scores.sum(axis=1, keepdims=True)
                return scores @ q
        else:
            raise ValueError(f"unknown probe kind {kind!r}")
        run()  # warm-up / jit
        runs.append(run)
    best = [float("inf")] * len(runs)
    # as timeit does: a collection sweeping a large heap is a per-call
    # constant that would flatten the length scaling
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(repeats):
            for k, run in enumerate(runs):
                run()  # re-warm caches and allocator after the previous length
                t0 = time.perf_counter()
                run()
                best[k] = min(best[k], time.perf_counter() - t0)
    finally:
        if gc_was_enabled:
            gc.enable()
    return [ProbeRow(length, t) for length, t in zip(lengths, best)]


def probe_csv(rows: list[ProbeRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["L", "seconds"])
    for r in rows:
        writer.writerow([r.L, f"{r.seconds:.9f}"])
    return buf.getvalue()
