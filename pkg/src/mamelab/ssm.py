"""Selective state-space layers: ZOH discretization, the recurrent scan, and a
bidirectional Vision-Mamba style block.

The block is deliberately stripped down to ``norm -> in_proj -> SiLU ->
{forward scan, backward scan} -> out_proj -> residual``. There is no causal
conv1d and no gating branch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor

try:
    from . import _kernels
except ImportError:  # pragma: no cover - numba missing
    _kernels = None


class NonPositiveStepError(ValueError):
    pass


def discretize(A, B, delta):
    """Zero-order-hold discretization for a diagonal state matrix.

    ``A`` holds the diagonal entries (negative), ``B`` the input row and
    ``delta`` the step size; all broadcast against each other. Returns
    ``(A_bar, B_bar)`` with ``A_bar = exp(delta*A)`` and
    ``B_bar = (delta*A)^-1 (exp(delta*A) - 1) * delta*B`` evaluated per channel.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta <= 0):
        raise NonPositiveStepError("nonpositive step: delta must be > 0")
    dA = delta * A
    gain, _, _ = nx._phi1_array(dA, with_grad=False)
    return np.exp(dA), gain * delta * B


@dataclass
class DirectionParams:
    """Per-direction selective-SSM parameters.

    ``a_log`` stores log(-A), shape (D_inner, C_state). The step size is
    ``softplus(x @ dt_down @ dt_up + dt_bias)`` (low-rank, Mamba style).
    """

    a_log: Tensor
    proj_B: Tensor
    proj_C: Tensor
    dt_down: Tensor
    dt_up: Tensor
    dt_bias: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {
            "a_log": self.a_log,
            "proj_B": self.proj_B,
            "proj_C": self.proj_C,
            "dt_down": self.dt_down,
            "dt_up": self.dt_up,
            "dt_bias": self.dt_bias,
        }

    @property
    def A(self) -> np.ndarray:
        return -np.exp(self.a_log.data)


@dataclass
class BlockParams:
    norm: Tensor
    in_proj: Tensor
    out_proj: Tensor
    fwd: DirectionParams
    bwd: DirectionParams

    def tensors(self) -> dict[str, Tensor]:
        out = {"norm": self.norm, "in_proj": self.in_proj, "out_proj": self.out_proj}
        for tag, d in (("fwd", self.fwd), ("bwd", self.bwd)):
            for k, v in d.tensors().items():
                out[f"{tag}.{k}"] = v
        return out


def init_direction(rng: np.random.Generator, d_inner: int, d_state: int, dt_rank: int,
                   dtype=np.float32, dt_min: float = 0.01, dt_max: float = 0.1) -> DirectionParams:
    # A = -(1..d_state) on every channel
    a_log = np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_inner, 1)))
    dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=d_inner))
    scale_in = 1.0 / np.sqrt(d_inner)
    return DirectionParams(
        a_log=Tensor(a_log, requires_grad=True, dtype=dtype),
        proj_B=Tensor(rng.normal(0, scale_in, (d_inner, d_state)), requires_grad=True, dtype=dtype),
        proj_C=Tensor(rng.normal(0, scale_in, (d_inner, d_state)), requires_grad=True, dtype=dtype),
        dt_down=Tensor(rng.normal(0, scale_in, (d_inner, dt_rank)), requires_grad=True, dtype=dtype),
        dt_up=Tensor(rng.normal(0, dt_rank ** -0.5 * 0.1, (dt_rank, d_inner)), requires_grad=True, dtype=dtype),
        dt_bias=Tensor(nx.softplus_inverse(dt), requires_grad=True, dtype=dtype),
    )


def init_block(rng: np.random.Generator, d_model: int, d_inner: int, d_state: int, dt_rank: int,
               dtype=np.float32, out_scale: float = 0.5) -> BlockParams:
    return BlockParams(
        norm=Tensor(np.ones(d_model), requires_grad=True, dtype=dtype),
        in_proj=Tensor(rng.normal(0, d_model ** -0.5, (d_model, d_inner)), requires_grad=True, dtype=dtype),
        out_proj=Tensor(rng.normal(0, out_scale * d_inner ** -0.5, (d_inner, d_model)),
                        requires_grad=True, dtype=dtype),
        fwd=init_direction(rng, d_inner, d_state, dt_rank, dtype),
        bwd=init_direction(rng, d_inner, d_state, dt_rank, dtype),
    )


def scan_kernel_numpy(x: Tensor, delta: Tensor, A: Tensor, Bm: Tensor, Cm: Tensor) -> Tensor:
    """Fused discretize + recurrence + readout over the token axis.

    Shapes: x, delta (..., N, Di); A (Di, S); Bm, Cm (..., N, S). Returns
    y (..., N, Di). Internally the token axis is moved to the front so each
    recurrence step touches one contiguous block. Only the state history is
    kept for the adjoint; the discretized factors are recomputed.
    """
    def front(v):
        return np.ascontiguousarray(np.moveaxis(v, -2, 0))

    xv, dv, bv, cv = front(x.data), front(delta.data), front(Bm.data), front(Cm.data)
    av = A.data
    dA = dv[..., None] * av
    gain, _, em1 = nx._phi1_array(dA, with_grad=False)
    decay = em1
    decay += 1.0
    drive = gain
    drive *= (dv * xv)[..., None]
    drive *= bv[..., None, :]
    n = xv.shape[0]
    hist = np.empty_like(drive)
    h = np.zeros_like(drive[0])
    for t in range(n):
        np.multiply(decay[t], h, out=h)
        h += drive[t]
        hist[t] = h
    del drive, decay, dA
    y = np.einsum("n...ds,n...s->n...d", hist, cv)

    def vjp(gy):
        gy = front(gy)
        dA = dv[..., None] * av
        gain, dgain, em1 = nx._phi1_array(dA)
        decay = em1 + 1.0
        g_c = np.einsum("n...ds,n...d->n...s", hist, gy)
        g_h = gy[..., None] * cv[..., None, :]
        # adjoint recurrence, in place over g_h
        acc = np.zeros_like(h)
        g_decay = np.empty_like(hist)
        for t in range(n - 1, -1, -1):
            acc += g_h[t]
            g_h[t] = acc
            if t > 0:
                np.multiply(acc, hist[t - 1], out=g_decay[t])
            else:
                g_decay[t] = 0.0
            acc *= decay[t]
        g_drive = g_h
        dx = dv * xv
        q = dx[..., None] * bv[..., None, :]
        g_dA = g_decay * decay
        g_dA += g_drive * q * dgain
        g_q = g_drive * gain
        del g_decay, g_drive, q
        # q = delta * x * B
        gq_b = np.einsum("n...ds,n...s->n...d", g_q, bv)
        g_x = gq_b * dv
        g_delta = gq_b * xv + np.einsum("n...ds,ds->n...d", g_dA, av)
        g_b = np.einsum("n...ds,n...d->n...s", g_q, dx)
        g_a = (g_dA * dv[..., None]).reshape((-1,) + av.shape).sum(axis=0)

        def back(v):
            return np.moveaxis(v, 0, -2)

        return back(g_x), back(g_delta), g_a, back(g_b), back(g_c)

    return nx._record(np.moveaxis(y, 0, -2), (x, delta, A, Bm, Cm), vjp)


def _as3d(v: np.ndarray, lead: tuple[int, ...]) -> np.ndarray:
    return np.ascontiguousarray(v.reshape((int(np.prod(lead)),) + v.shape[len(lead):]))


def scan_kernel(x: Tensor, delta: Tensor, A: Tensor, Bm: Tensor, Cm: Tensor) -> Tensor:
    """Same contract as :func:`scan_kernel_numpy`, run by the fused numba loops."""
    if _kernels is None:
        return scan_kernel_numpy(x, delta, A, Bm, Cm)
    lead = x.shape[:-2]
    xv, dv = _as3d(x.data, lead), _as3d(delta.data, lead)
    bv, cv = _as3d(Bm.data, lead), _as3d(Cm.data, lead)
    av = np.ascontiguousarray(A.data)
    if not nx.recording((x, delta, A, Bm, Cm)):
        return Tensor(_kernels.infer(xv, dv, av, bv, cv).reshape(x.shape))
    y, saved = _kernels.forward(xv, dv, av, bv, cv)

    def vjp(gy):
        gx, gdt, ga, gb, gc = _kernels.backward(xv, dv, bv, cv, saved, _as3d(gy, lead))
        return (gx.reshape(x.shape), gdt.reshape(delta.shape), ga,
                gb.reshape(Bm.shape), gc.reshape(Cm.shape))

    return nx._record(y.reshape(x.shape), (x, delta, A, Bm, Cm), vjp)


@dataclass
class ScanOutput:
    y: Tensor
    delta: Tensor


def selective_scan(x: Tensor, params: DirectionParams, reverse: bool = False) -> ScanOutput:
    """Run one selective SSM direction over the token axis (-2).

    B, C and delta are functions of each token. With ``reverse`` the sequence
    is scanned back to front and both outputs are flipped back to the input
    order.
    """
    if x.shape[-2] < 1:
        raise ValueError("selective_scan needs at least one token")
    if reverse:
        x = nx.flip(x, -2)
    Bm = nx.matmul(x, params.proj_B)
    Cm = nx.matmul(x, params.proj_C)
    pre = nx.add(nx.matmul(nx.matmul(x, params.dt_down), params.dt_up), params.dt_bias)
    for name, t in (("B", Bm), ("C", Cm), ("delta", pre)):
        if not np.all(np.isfinite(t.data)):
            raise FloatingPointError(f"nonfinite values in {name} projection")
    delta = nx.softplus(pre)
    A = nx.mul(nx.exp(params.a_log), -1.0)
    y = scan_kernel(x, delta, A, Bm, Cm)
    if reverse:
        y = nx.flip(y, -2)
        delta = nx.flip(delta, -2)
    return ScanOutput(y=y, delta=delta)


@dataclass
class BlockOutput:
    t_star: Tensor
    t_next: object
    delta_f: Tensor
    delta_b: Tensor


def vim_block(t_prev, params: BlockParams) -> BlockOutput:
    """Bidirectional block: T* = Linear(Y_f + Y_b), T_next = T* + T_prev.

    ``t_prev`` may be a bare (..., N, D) tensor or a token sequence with a
    ``values`` attribute; in the latter case ``t_next`` is returned as the same
    kind of sequence with the bookkeeping carried over.
    """
    values = getattr(t_prev, "values", t_prev)
    u = nx.rms_norm(values, params.norm)
    x = nx.silu(nx.matmul(u, params.in_proj))
    fwd = selective_scan(x, params.fwd)
    bwd = selective_scan(x, params.bwd, reverse=True)
    t_star = nx.matmul(nx.add(fwd.y, bwd.y), params.out_proj)
    summed = nx.add(t_star, values)
    t_next = t_prev.with_values(summed) if hasattr(t_prev, "with_values") else summed
    return BlockOutput(t_star=t_star, t_next=t_next, delta_f=fwd.delta, delta_b=bwd.delta)
