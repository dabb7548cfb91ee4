"""The modality-routed selective-SSM block.

The block runs: fused in-projection (split into x and z), causal depthwise
conv + SiLU, fused x-projection (split into delta, B, C), discretization of
the shared state matrix A by the softplus time step, the selective scan
recurrence, the (y + u) * SiLU(z) gate, and the out-projection. Each of the
four projections can be routed per modality; the conv kernel and A are always
shared.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .routing import ModalityMask, RoutedWeights, modal_linear

DISCRETIZATION_MODES = ("literal", "zoh_exp")


@dataclass(frozen=True)
class BlockDims:
    """Shape parameters: model dim f, expanded dim d, state dim n, dt-rank r, conv width k."""

    f: int
    d: int
    n: int
    r: int
    k: int

    def __post_init__(self) -> None:
        for name in ("f", "d", "n", "r", "k"):
            v = getattr(self, name)
            if v < 1:
                raise T.ValidationError(f"BlockDims.{name} must be positive, got {v}")
        if self.r > self.d:
            raise T.ValidationError(f"BlockDims: r ({self.r}) must be <= d ({self.d})")


@dataclass(frozen=True)
class SparsityConfig:
    """Which of the four projections are decoupled per modality."""

    decouple_in_proj: bool = False
    decouple_x_proj: bool = False
    decouple_dt_proj: bool = False
    decouple_out_proj: bool = False

    def flags(self) -> tuple[bool, bool, bool, bool]:
        return (self.decouple_in_proj, self.decouple_x_proj,
                self.decouple_dt_proj, self.decouple_out_proj)

    @classmethod
    def all_shared(cls) -> "SparsityConfig":
        return cls()

    @classmethod
    def all_decoupled(cls) -> "SparsityConfig":
        return cls(True, True, True, True)

    @classmethod
    def from_flags(cls, flags) -> "SparsityConfig":
        a, b, c, d = flags
        return cls(bool(a), bool(b), bool(c), bool(d))


@dataclass
class MoMBlockParams:
    """Per-modality projection weights plus the shared conv kernel and A."""

    dims: BlockDims
    sparsity: SparsityConfig
    in_proj: RoutedWeights      # [f, 2d], fused x,z
    x_proj: RoutedWeights       # [d, r+2n], fused delta,B,C
    dt_proj: RoutedWeights      # [r, d] with bias [d]
    out_proj: RoutedWeights     # [d, f]
    conv_kernel: T.Tensor       # [d, k], always shared
    a_matrix: T.Tensor          # [d, n], always shared

    def __post_init__(self) -> None:
        dims = self.dims
        expect = {
            "in_proj": (self.in_proj, (dims.f, 2 * dims.d), self.sparsity.decouple_in_proj),
            "x_proj": (self.x_proj, (dims.d, dims.r + 2 * dims.n), self.sparsity.decouple_x_proj),
            "dt_proj": (self.dt_proj, (dims.r, dims.d), self.sparsity.decouple_dt_proj),
            "out_proj": (self.out_proj, (dims.d, dims.f), self.sparsity.decouple_out_proj),
        }
        for name, (rw, shape, decoupled) in expect.items():
            if (rw.in_features, rw.out_features) != shape:
                raise T.ShapeError(f"{name}: expected {shape}, got "
                                   f"({rw.in_features}, {rw.out_features})")
            if not decoupled and not rw.shared:
                raise T.ShapeError(f"{name}: sparsity flag is off but weights are per-modality")
        if self.dt_proj.biases is None:
            raise T.ValidationError("dt_proj must carry its bias")
        if self.conv_kernel.shape != (dims.d, dims.k):
            raise T.ShapeError(f"conv_kernel: expected {(dims.d, dims.k)}, got {self.conv_kernel.shape}")
        if self.a_matrix.shape != (dims.d, dims.n):
            raise T.ShapeError(f"A: expected {(dims.d, dims.n)}, got {self.a_matrix.shape}")

    def tensors(self) -> list[T.Tensor]:
        out: list[T.Tensor] = []
        for rw in (self.in_proj, self.x_proj, self.dt_proj, self.out_proj):
            out.extend(rw.tensors())
        out.append(self.conv_kernel)
        out.append(self.a_matrix)
        return out


def _check_mode(mode: str) -> None:
    if mode not in DISCRETIZATION_MODES:
        raise T.ValidationError(
            f"discretization mode must be one of {DISCRETIZATION_MODES}, got {mode!r}")


def discretize(u: T.Tensor, delta: T.Tensor, b_sel: T.Tensor,
               params: MoMBlockParams, mask: ModalityMask,
               mode: str = "zoh_exp") -> tuple[T.Tensor, T.Tensor, T.Tensor]:
    """Turn the low-rank time step into per-step recurrence coefficients.

    dt = softplus(routed dt-projection of delta); literal mode multiplies
    dt into A directly, zoh_exp exponentiates the product; in both modes
    Bbar = dt * (u outer B). Returns (Abar, Bbar, dt).
    """
    _check_mode(mode)
    dims = params.dims
    dt = T.softplus(modal_linear(delta, params.dt_proj, mask, flop_bucket="dt_proj"))
    prod = T.bcast_mul_dn(dt, params.a_matrix)
    abar = prod if mode == "literal" else T.exp(prod)
    bbar = T.mul_dn(dt, T.outer_bl(u, b_sel))
    # Documented discretization cost: one mul-add per (d,n) lane per token.
    b, l = mask.batch, mask.length
    T.meter_add("discretize", b * l * dims.d * dims.n)
    return abar, bbar, dt


# ---------------------------------------------------------------------------
# Selective scan: h_t = h_{t-1} * Abar_t + Bbar_t, y_t[c] = sum_s h_t[c,s] C_t[s]
# ---------------------------------------------------------------------------


def _tx(x: np.ndarray) -> np.ndarray:
    # time-major contiguous copy so the recurrence reads/writes whole blocks
    return np.ascontiguousarray(x.transpose(1, 0, 2, 3))


def _scan_sequential(at: np.ndarray, bt: np.ndarray) -> np.ndarray:
    """Time-major recurrence; returns all states [l,b,d,n]."""
    l = at.shape[0]
    states = np.empty_like(at)
    h = np.zeros_like(at[0])
    for t in range(l):
        np.multiply(h, at[t], out=states[t])
        states[t] += bt[t]
        h = states[t]
    return states


def _scan_chunked(at: np.ndarray, bt: np.ndarray, chunk: int) -> np.ndarray:
    # Within each segment: states with zero initial h plus the carried state
    # propagated by the running product of Abar. Exact decomposition, no
    # divisions, so Abar entries may be zero.
    l = at.shape[0]
    states = np.empty_like(at)
    carry = np.zeros_like(at[0])
    for c0 in range(0, l, chunk):
        c1 = min(c0 + chunk, l)
        a = at[c0:c1]
        prods = np.cumprod(a, axis=0)
        local = _scan_sequential(a, bt[c0:c1])
        states[c0:c1] = prods * carry + local
        carry = states[c1 - 1]
    return states


def selective_scan(abar: T.Tensor, bbar: T.Tensor, c_sel: T.Tensor,
                   chunk_size: Optional[int] = None) -> T.Tensor:
    """Run the recurrence over the sequence axis and read out against C.

    `chunk_size=None` is the sequential reference; an integer runs the
    chunked variant, which carries the state across segments and must agree
    with the reference for every chunk size.
    """
    if abar.shape != bbar.shape or abar.ndim != 4:
        raise T.ShapeError(
            f"selective_scan: Abar {abar.shape} and Bbar {bbar.shape} must both be [b,l,d,n]")
    b, l, d, n = abar.shape
    if c_sel.shape != (b, l, n):
        raise T.ShapeError(
            f"selective_scan: C must be [b,l,n]={(b, l, n)}, got {c_sel.shape}")
    if chunk_size is not None and chunk_size < 1:
        raise T.ValidationError(f"selective_scan: chunk_size must be >= 1, got {chunk_size}")

    at, bt = _tx(abar.data), _tx(bbar.data)
    if chunk_size is None:
        states = _scan_sequential(at, bt)
    else:
        states = _scan_chunked(at, bt, chunk_size)
    cd = c_sel.data
    y = np.einsum("lbds,bls->bld", states, cd)
    T.meter_add("scan", 2 * b * l * d * n)

    def vjp(gy):
        gc = np.einsum("lbds,bld->bls", states, gy)
        # gh_t = dy_t x C_t + Abar_{t+1} * gh_{t+1}, swept backwards
        dyc = np.ascontiguousarray(
            (gy[:, :, :, None] * cd[:, :, None, :]).transpose(1, 0, 2, 3))
        gh = dyc
        for t in range(l - 2, -1, -1):
            gh[t] += gh[t + 1] * at[t + 1]
        gb = gh.transpose(1, 0, 2, 3)
        ga = np.empty_like(gh)
        ga[0] = 0.0
        np.multiply(gh[1:], states[:-1], out=ga[1:])
        return (ga.transpose(1, 0, 2, 3), gb, gc)

    return T.record(y, (abar, bbar, c_sel), vjp)


def swiglu_gate(y: T.Tensor, u: T.Tensor, z: T.Tensor) -> T.Tensor:
    """(y + u) * SiLU(z): residual into the scan output, then the gate."""
    b, l, d = y.shape
    out = T.mul(T.add(y, u), T.silu(z))
    T.meter_add("gate", b * l * d)
    return out


def mom_block_forward(f_in: T.Tensor, params: MoMBlockParams, mask: ModalityMask,
                      mode: str = "zoh_exp",
                      chunk_size: Optional[int] = None) -> T.Tensor:
    """Full block: routed projections around the shared conv + scan core."""
    _check_mode(mode)
    dims = params.dims
    if f_in.ndim != 3 or f_in.shape[2] != dims.f:
        raise T.ShapeError(
            f"mom_block_forward: input must be [b,l,{dims.f}], got {f_in.shape}")

    xz = modal_linear(f_in, params.in_proj, mask, flop_bucket="in_proj")
    x = T.slice_last(xz, 0, dims.d)
    z = T.slice_last(xz, dims.d, 2 * dims.d)

    u = T.silu(T.conv1d_causal_depthwise(x, params.conv_kernel))

    dbc = modal_linear(u, params.x_proj, mask, flop_bucket="x_proj")
    delta = T.slice_last(dbc, 0, dims.r)
    b_sel = T.slice_last(dbc, dims.r, dims.r + dims.n)
    c_sel = T.slice_last(dbc, dims.r + dims.n, dims.r + 2 * dims.n)

    abar, bbar, _ = discretize(u, delta, b_sel, params, mask, mode)
    y = selective_scan(abar, bbar, c_sel, chunk_size=chunk_size)

    o = swiglu_gate(y, u, z)
    return modal_linear(o, params.out_proj, mask, flop_bucket="out_proj")
