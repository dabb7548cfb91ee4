"""Rule-based modality routing: apply modality m's weights to modality m's tokens.

Tokens are gathered per modality into contiguous buffers, pushed through one
dense matmul per modality, and scattered back in original order, so the output
is laid out exactly like the unrouted linear it replaces and the per-token
multiply-add count never depends on the mask.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import (ShapeError, Tensor, ValidationError, meter_add, record)


class ModalityMask:
    """Per-token modality ids for a batch of sequences, shape [b, l].

    Immutable for the lifetime of a batch; index sets are computed once and
    cached.
    """

    def __init__(self, ids: np.ndarray, num_modalities: int) -> None:
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ShapeError(f"mask ids must be [b,l], got shape {ids.shape}")
        if num_modalities < 1:
            raise ValidationError(f"num_modalities must be >= 1, got {num_modalities}")
        if ids.size and (ids.min() < 0 or ids.max() >= num_modalities):
            bad = int(np.flatnonzero((ids < 0) | (ids >= num_modalities)).reshape(-1)[0])
            raise ValidationError(
                f"modality id out of range at flat position {bad}: "
                f"{ids.reshape(-1)[bad]} not in [0, {num_modalities})")
        ids = ids.astype(np.int64)
        ids.setflags(write=False)
        self.ids = ids
        self.num_modalities = int(num_modalities)
        self._partition: Optional[list[np.ndarray]] = None

    @property
    def batch(self) -> int:
        return self.ids.shape[0]

    @property
    def length(self) -> int:
        return self.ids.shape[1]

    @property
    def flat(self) -> np.ndarray:
        return self.ids.reshape(-1)

    def counts(self) -> np.ndarray:
        return np.bincount(self.flat, minlength=self.num_modalities)

    def __eq__(self, other) -> bool:
        return (isinstance(other, ModalityMask)
                and self.num_modalities == other.num_modalities
                and np.array_equal(self.ids, other.ids))

    def __repr__(self) -> str:
        return f"ModalityMask(b={self.batch}, l={self.length}, m={self.num_modalities})"


def modality_partition(mask: ModalityMask) -> list[np.ndarray]:
    """Ascending flat token indices per modality; disjoint, covering union."""
    if mask._partition is None:
        flat = mask.flat
        mask._partition = [np.flatnonzero(flat == m) for m in range(mask.num_modalities)]
    return mask._partition


class RoutedWeights:
    """One weight tensor per modality, or a single tensor shared by all.

    Every modality's weight has the same [f_in, f_out] shape; that equality is
    what keeps per-token compute identical to the dense model.
    """

    def __init__(self, weights: Sequence[Tensor],
                 biases: Optional[Sequence[Tensor]] = None) -> None:
        if not weights:
            raise ValidationError("RoutedWeights needs at least one weight tensor")
        shape = weights[0].shape
        for w in weights:
            if w.shape != shape:
                raise ShapeError(
                    f"all modality weights must share one shape, got {w.shape} vs {shape}")
        if biases is not None:
            if len(biases) != len(weights):
                raise ShapeError(
                    f"{len(biases)} biases for {len(weights)} weights")
            bshape = (shape[-1],)
            for b in biases:
                if b.shape != bshape:
                    raise ShapeError(f"bias shape {b.shape} != {bshape}")
        self.weights = list(weights)
        self.biases = list(biases) if biases is not None else None

    @property
    def shared(self) -> bool:
        return len(self.weights) == 1

    @property
    def in_features(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_features(self) -> int:
        return self.weights[0].shape[1]

    def tensors(self) -> list[Tensor]:
        return list(self.weights) + (list(self.biases) if self.biases else [])


def modal_linear(x: Tensor, weights: RoutedWeights, mask: ModalityMask,
                 flop_bucket: str = "linear") -> Tensor:
    """Y_i = X_i @ W_{m_i} + b_{m_i}, output rows in original token order.

    With a single shared weight this is exactly the plain linear transform.
    Gradients flow only to the weights whose modality appears in the batch;
    zero-token modalities skip their matmul entirely.
    """
    if x.ndim != 3:
        raise ShapeError(f"modal_linear: x must be [b,l,f], got {x.shape}")
    if (x.shape[0], x.shape[1]) != (mask.batch, mask.length):
        raise ShapeError(
            f"modal_linear: x batch/length {x.shape[:2]} != mask {(mask.batch, mask.length)}")
    if x.shape[2] != weights.in_features:
        raise ShapeError(
            f"modal_linear: x feature axis {x.shape[2]} != weight in axis {weights.in_features}")
    if not weights.shared and len(weights.weights) != mask.num_modalities:
        raise ShapeError(
            f"modal_linear: {len(weights.weights)} weight sets for "
            f"{mask.num_modalities} modalities")

    if weights.shared:
        from .tensor import linear
        bias = weights.biases[0] if weights.biases else None
        return linear(x, weights.weights[0], bias, flop_bucket=flop_bucket)

    b, l, f_in = x.shape
    f_out = weights.out_features
    parts = modality_partition(mask)
    x2 = x.data.reshape(-1, f_in)
    out = np.zeros((b * l, f_out), dtype=x.dtype)
    gathered: list[Optional[np.ndarray]] = [None] * mask.num_modalities
    for m, idx in enumerate(parts):
        if idx.size == 0:
            continue
        xm = x2[idx]
        gathered[m] = xm
        ym = xm @ weights.weights[m].data
        if weights.biases is not None:
            ym += weights.biases[m].data
        out[idx] = ym
        meter_add(flop_bucket, idx.size * f_in * f_out)

    w_data = [w.data for w in weights.weights]
    has_bias = weights.biases is not None

    def vjp(g):
        g2 = g.reshape(-1, f_out)
        gx = np.zeros_like(x2)
        gws: list[Optional[np.ndarray]] = []
        gbs: list[Optional[np.ndarray]] = []
        for m, idx in enumerate(parts):
            if idx.size == 0:
                gws.append(None)
                gbs.append(None)
                continue
            gm = g2[idx]
            gx[idx] = gm @ w_data[m].T
            gws.append(gathered[m].T @ gm)
            gbs.append(gm.sum(axis=0) if has_bias else None)
        grads = [gx.reshape(x.data.shape)] + gws
        if has_bias:
            grads += gbs
        return tuple(grads)

    inputs = [x] + weights.tensors()
    return record(out.reshape(b, l, f_out), inputs, vjp)
