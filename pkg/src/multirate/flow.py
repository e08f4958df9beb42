"""Occlusion-aware photometric loss kernels with analytic flow gradients.

The loss reconstructs each frame of a pair from the other one by inverse
warping with the corresponding flow, penalizes the residual with a
generalized Charbonnier function, and drops pixels flagged occluded by a
forward-backward consistency check (plus pixels whose warp sample falls
outside the image). Gradients with respect to the flow are derived by the
chain rule through the bilinear interpolation; the occlusion/validity masks
are treated as constants (no gradient through the indicator), so the
finite-difference verifier must evaluate the loss with frozen masks.

Coordinates: i is horizontal (columns, paired with u), j vertical (rows,
paired with v); a warp samples the source at (i + u, j + v).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .kernels import bilinear_sample, bilinear_sample_grad
from .media import BinaryMask, FlowField, Frame


@dataclass(frozen=True)
class CharbonnierParams:
    """Robust penalty rho(x) = (x^2 + epsilon^2)^alpha."""

    alpha: float = 0.45
    epsilon: float = 1e-3

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be > 0")


@dataclass(frozen=True)
class OcclusionParams:
    """Tolerances of the forward-backward consistency check."""

    alpha1: float = 0.01
    alpha2: float = 0.5

    def __post_init__(self):
        if self.alpha1 < 0.0 or self.alpha2 < 0.0:
            raise ValueError("occlusion tolerances must be >= 0")


@dataclass(frozen=True)
class LossReport:
    value: float
    forward_term: float
    backward_term: float
    nonoccluded_fraction_fwd: float
    nonoccluded_fraction_bwd: float


@dataclass(frozen=True)
class LossMasks:
    """Per-direction inclusion masks, frozen for gradient computations."""

    include_fwd: BinaryMask
    include_bwd: BinaryMask
    occluded_fwd: BinaryMask
    occluded_bwd: BinaryMask


@lru_cache(maxsize=32)
def _grids(height: int, width: int):
    cols, rows = np.meshgrid(np.arange(width, dtype=np.float64),
                             np.arange(height, dtype=np.float64))
    cols.setflags(write=False)
    rows.setflags(write=False)
    return cols, rows


def _check_same_shape(*shapes):
    first = shapes[0]
    for s in shapes[1:]:
        if s != first:
            raise ValueError(f"dimension mismatch: {first} vs {s}")


def charbonnier(x, params: CharbonnierParams = CharbonnierParams()):
    """(x^2 + eps^2)^alpha, elementwise; even in x, monotone in |x|."""
    x = np.asarray(x, dtype=np.float64)
    return np.power(x * x + params.epsilon * params.epsilon, params.alpha)


def charbonnier_deriv(x, params: CharbonnierParams = CharbonnierParams()):
    """d/dx of charbonnier: 2*alpha*x*(x^2 + eps^2)^(alpha - 1)."""
    x = np.asarray(x, dtype=np.float64)
    return 2.0 * params.alpha * x * np.power(
        x * x + params.epsilon * params.epsilon, params.alpha - 1.0)


def inverse_warp(target: Frame, flow: FlowField):
    """Reconstructs the reference frame by sampling `target` at the
    flow-displaced positions (bilinear, clamped to the image rectangle).

    Returns (warped Frame, validity BinaryMask); a pixel is valid iff its
    unclamped sample point lies inside [0, W-1] x [0, H-1].
    """
    _check_same_shape((target.height, target.width), (flow.height, flow.width))
    cols, rows = _grids(flow.height, flow.width)
    out, inb = bilinear_sample(target.data.astype(np.float64), cols + flow.u, rows + flow.v)
    return Frame(out.astype(np.float32)), BinaryMask(inb)


def warp_validity(flow: FlowField) -> BinaryMask:
    """Pixels whose flow-displaced sample point stays inside the image."""
    cols, rows = _grids(flow.height, flow.width)
    sx = cols + flow.u
    sy = rows + flow.v
    inside = (sx >= 0.0) & (sx <= flow.width - 1.0) & \
             (sy >= 0.0) & (sy <= flow.height - 1.0)
    return BinaryMask(inside)


def warp_flow(mb: FlowField, mf: FlowField) -> FlowField:
    """Resamples flow `mb` at the positions displaced by `mf` (bilinear,
    clamped): the backward flow seen from each forward-displaced pixel."""
    _check_same_shape((mb.height, mb.width), (mf.height, mf.width))
    cols, rows = _grids(mf.height, mf.width)
    stacked = np.stack([mb.u, mb.v], axis=-1)
    out, _ = bilinear_sample(stacked, cols + mf.u, rows + mf.v)
    return FlowField(out[:, :, 0], out[:, :, 1])


def compose_flows(first: FlowField, then: FlowField) -> FlowField:
    """Displacement field of applying `first` (X->Y) then `then` (Y->Z)."""
    hopped = warp_flow(then, first)
    return FlowField(first.u + hopped.u, first.v + hopped.v)


def occlusion_flags(mf: FlowField, mb: FlowField,
                    params: OcclusionParams = OcclusionParams()):
    """Forward and backward occlusion masks from flow consistency.

    A pixel is flagged occluded whenever
        |flow + other_flow_at_displaced_pos|^2
            >= alpha1 * (|flow|^2 + |other_flow_at_displaced_pos|^2) + alpha2
    (squared Euclidean norms of the 2-vectors; ties count as violations).
    """
    _check_same_shape((mf.height, mf.width), (mb.height, mb.width))

    def one_direction(a: FlowField, b: FlowField) -> BinaryMask:
        bw = warp_flow(b, a)
        su = a.u + bw.u
        sv = a.v + bw.v
        mismatch = su * su + sv * sv
        norms = (a.u * a.u + a.v * a.v) + (bw.u * bw.u + bw.v * bw.v)
        return BinaryMask(mismatch >= params.alpha1 * norms + params.alpha2)

    return one_direction(mf, mb), one_direction(mb, mf)


def compute_loss_masks(mf: FlowField, mb: FlowField,
                       params: OcclusionParams = OcclusionParams()) -> LossMasks:
    """Inclusion masks: not occluded and warp sample in bounds, per direction."""
    of, ob = occlusion_flags(mf, mb, params)
    return LossMasks(
        include_fwd=BinaryMask(~of.bits & warp_validity(mf).bits),
        include_bwd=BinaryMask(~ob.bits & warp_validity(mb).bits),
        occluded_fwd=of,
        occluded_bwd=ob,
    )


def _masked_mean_penalty(residual, include_bits, params: CharbonnierParams) -> float:
    """Mean of charbonnier(residual) over included pixels and all channels."""
    n = int(include_bits.sum())
    if n == 0:
        return 0.0
    rho = charbonnier(residual[include_bits], params)
    return float(rho.sum() / (n * residual.shape[-1]))


def photometric_term(ref_f64, src_f64, u, v, include_bits,
                     params: CharbonnierParams) -> float:
    """Loss term for one direction, on raw float64 arrays (hot path)."""
    cols, rows = _grids(u.shape[0], u.shape[1])
    warped, _ = bilinear_sample(src_f64, cols + u, rows + v)
    return _masked_mean_penalty(ref_f64 - warped, include_bits, params)


def reconstruction_loss(i1: Frame, i1_prime: Frame, include: BinaryMask,
                        params: CharbonnierParams = CharbonnierParams()) -> float:
    """Mean charbonnier penalty of (i1 - i1_prime) over included pixels
    (and channels); 0 when nothing is included."""
    _check_same_shape(i1.data.shape, i1_prime.data.shape)
    _check_same_shape((i1.height, i1.width), (include.height, include.width))
    residual = i1.data.astype(np.float64) - i1_prime.data.astype(np.float64)
    return _masked_mean_penalty(residual, include.bits, params)


def occlusion_aware_loss(i1: Frame, i2: Frame, mf: FlowField, mb: FlowField,
                         cparams: CharbonnierParams = CharbonnierParams(),
                         oparams: OcclusionParams = OcclusionParams(),
                         masks: LossMasks | None = None) -> LossReport:
    """Sum of the two directional reconstruction losses, each restricted to
    its non-occluded, in-bounds pixels.

    `masks` overrides the computed inclusion masks; gradient verification
    passes the masks of the unperturbed flows here so the loss stays smooth.
    """
    _check_same_shape(i1.data.shape, i2.data.shape)
    _check_same_shape((i1.height, i1.width), (mf.height, mf.width),
                      (mb.height, mb.width))
    if masks is None:
        masks = compute_loss_masks(mf, mb, oparams)
    fwd = photometric_term(i1.data.astype(np.float64), i2.data.astype(np.float64),
                           mf.u, mf.v, masks.include_fwd.bits, cparams)
    bwd = photometric_term(i2.data.astype(np.float64), i1.data.astype(np.float64),
                           mb.u, mb.v, masks.include_bwd.bits, cparams)
    return LossReport(
        value=fwd + bwd,
        forward_term=fwd,
        backward_term=bwd,
        nonoccluded_fraction_fwd=1.0 - masks.occluded_fwd.fraction_set(),
        nonoccluded_fraction_bwd=1.0 - masks.occluded_bwd.fraction_set(),
    )


def _direction_gradient(ref_f64, src_f64, u, v, include_bits,
                        params: CharbonnierParams):
    """d(term)/du, d(term)/dv for one direction with a frozen include mask."""
    n = int(include_bits.sum())
    if n == 0:
        return np.zeros_like(u), np.zeros_like(v)
    cols, rows = _grids(u.shape[0], u.shape[1])
    warped, gx, gy, _ = bilinear_sample_grad(src_f64, cols + u, rows + v)
    # term = sum over included px, channels of rho(ref - warped) / (n * C)
    coeff = charbonnier_deriv(ref_f64 - warped, params) * (-1.0 / (n * ref_f64.shape[-1]))
    du = np.where(include_bits, (coeff * gx).sum(axis=2), 0.0)
    dv = np.where(include_bits, (coeff * gy).sum(axis=2), 0.0)
    return du, dv


def loss_gradient_wrt_flow(i1: Frame, i2: Frame, mf: FlowField, mb: FlowField,
                           cparams: CharbonnierParams = CharbonnierParams(),
                           oparams: OcclusionParams = OcclusionParams(),
                           masks: LossMasks | None = None):
    """Analytic gradient of occlusion_aware_loss().value wrt both flows.

    Masks act as stop-gradient constants, so the forward term only reaches
    mf and the backward term only reaches mb; excluded pixels get exactly 0.
    """
    _check_same_shape(i1.data.shape, i2.data.shape)
    _check_same_shape((i1.height, i1.width), (mf.height, mf.width),
                      (mb.height, mb.width))
    if masks is None:
        masks = compute_loss_masks(mf, mb, oparams)
    i1_f64 = i1.data.astype(np.float64)
    i2_f64 = i2.data.astype(np.float64)
    du_f, dv_f = _direction_gradient(i1_f64, i2_f64, mf.u, mf.v,
                                     masks.include_fwd.bits, cparams)
    du_b, dv_b = _direction_gradient(i2_f64, i1_f64, mb.u, mb.v,
                                     masks.include_bwd.bits, cparams)
    return FlowField(du_f, dv_f), FlowField(du_b, dv_b)


def finite_difference_gradient(loss_fn, mf: FlowField, mb: FlowField, h: float,
                               components: BinaryMask | None = None):
    """Central-difference gradient (f(x+h) - f(x-h)) / (2h) of a scalar
    loss_fn(mf, mb) with respect to every flow component.

    `components` optionally restricts evaluation to a pixel subset (gradient
    entries elsewhere are 0); useful because the full sweep costs
    2 * 2 * 2 * H * W loss evaluations.
    """
    if h <= 0.0:
        raise ValueError("step must be > 0")
    sel = None if components is None else components.bits
    results = []
    for which in (0, 1):
        base = (mf, mb)[which]
        grads = []
        for comp in ("u", "v"):
            arr = getattr(base, comp).copy()
            grad = np.zeros_like(arr)
            it = np.ndindex(arr.shape)
            for pos in it:
                if sel is not None and not sel[pos]:
                    continue
                orig = arr[pos]
                evals = []
                for delta in (h, -h):
                    arr[pos] = orig + delta
                    # copy: FlowField freezes its arrays, arr stays scratch
                    perturbed = (FlowField(arr.copy(), base.v) if comp == "u"
                                 else FlowField(base.u, arr.copy()))
                    evals.append(loss_fn(perturbed, mb) if which == 0
                                 else loss_fn(mf, perturbed))
                arr[pos] = orig
                grad[pos] = (evals[0] - evals[1]) / (2.0 * h)
            grads.append(grad)
        results.append(FlowField(grads[0], grads[1]))
    return results[0], results[1]
