"""Masked autoregressive flow built from MADE-style blocks.

Each block applies z_i = (u_i - mu_i(u_<i)) * exp(-a_i(u_<i)) where the
conditioners are a single-hidden-layer network with connectivity masks that
forbid output i from seeing inputs at position i or later. The density
direction (x -> z) is one parallel pass per block; the sampling direction
(z -> x) needs one sequential pass per dimension. Blocks alternate between
identity and reversal input orderings so later positions also get
conditioned on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Node, Parameter, Tape
from .errors import ContractError, NumericError

# log-scale outputs are squashed to (-ALPHA_CAP, ALPHA_CAP) to keep exp() tame
ALPHA_CAP = 5.0


def _degrees(dim: int, hidden: int) -> tuple[np.ndarray, np.ndarray]:
    """Input degrees 1..dim; hidden degrees cycle 1..dim-1 (0 when dim == 1)."""
    d_in = np.arange(1, dim + 1)
    if dim == 1:
        d_hidden = np.zeros(hidden, dtype=int)
    else:
        d_hidden = (np.arange(hidden) % (dim - 1)) + 1
    return d_in, d_hidden


def _masks(dim: int, hidden: int) -> tuple[np.ndarray, np.ndarray]:
    d_in, d_hid = _degrees(dim, hidden)
    # hidden h sees input d iff deg(h) >= deg(d); output i sees h iff deg(i) > deg(h)
    mask_hidden = (d_hid[:, None] >= d_in[None, :]).astype(np.float64)
    mask_out = (d_in[:, None] > d_hid[None, :]).astype(np.float64)
    return mask_hidden, mask_out


@dataclass
class MadeBlock:
    """One masked conditioner with shift and log-scale heads."""

    w1: Parameter
    b1: Parameter
    w_shift: Parameter
    b_shift: Parameter
    w_scale: Parameter
    b_scale: Parameter
    mask_hidden: np.ndarray
    mask_out: np.ndarray
    reverse: bool

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w_shift, self.b_shift, self.w_scale, self.b_scale]

    def conditioner(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Shift and squashed log-scale as plain arrays."""
        h = np.tanh(u @ (self.w1.values * self.mask_hidden).T + self.b1.values)
        shift = h @ (self.w_shift.values * self.mask_out).T + self.b_shift.values
        raw = h @ (self.w_scale.values * self.mask_out).T + self.b_scale.values
        return shift, ALPHA_CAP * np.tanh(raw / ALPHA_CAP)

    def conditioner_tape(self, t: Tape, u: Node) -> tuple[Node, Node]:
        h = t.tanh(t.affine(u, self.w1, self.b1, mask=self.mask_hidden))
        shift = t.affine(h, self.w_shift, self.b_shift, mask=self.mask_out)
        raw = t.affine(h, self.w_scale, self.b_scale, mask=self.mask_out)
        scale = t.mul(t.tanh(t.mul(raw, 1.0 / ALPHA_CAP)), ALPHA_CAP)
        return shift, scale


class FlowStack:
    """Stack of MADE blocks sharing one feature dimensionality."""

    def __init__(self, dim: int, blocks: list[MadeBlock]):
        self.dim = dim
        self.blocks = blocks

    def parameters(self) -> list[Parameter]:
        out = []
        for b in self.blocks:
            out.extend(b.parameters())
        return out

    # ----- density direction (x -> z), parallel ---------------------------

    def inverse_with_logdet(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map features to latent codes; also return per-sample log |det dz/dx|."""
        v = self._check_input(x)
        logdet = np.zeros(v.shape[0])
        for i, blk in enumerate(self.blocks):
            u = v[:, ::-1] if blk.reverse else v
            shift, scale = blk.conditioner(u)
            v = (u - shift) * np.exp(-scale)
            logdet = logdet - scale.sum(axis=1)
            if not np.isfinite(v).all():
                raise NumericError(f"non-finite values after flow block {i}")
        return v, logdet

    def inverse_with_logdet_tape(self, t: Tape, x: np.ndarray) -> tuple[Node, Node]:
        """Differentiable version of inverse_with_logdet; logdet has shape (N,)."""
        v = t.const(self._check_input(x))
        logdet = t.const(np.zeros(x.shape[0]))
        for i, blk in enumerate(self.blocks):
            u = self._permute_tape(t, v, blk.reverse) if blk.reverse else v
            shift, scale = blk.conditioner_tape(t, u)
            v = t.mul(t.add(u, t.mul(shift, -1.0)), t.exp(t.mul(scale, -1.0)))
            logdet = t.add(logdet, t.mul(t.sum(scale, axis=1), -1.0))
            if not np.isfinite(v.value).all():
                raise NumericError(f"non-finite values after flow block {i}")
        return v, logdet

    def _permute_tape(self, t: Tape, v: Node, reverse: bool) -> Node:
        if not reverse:
            return v
        # column reversal as multiplication by a (symmetric) permutation matrix
        return t.affine(v, t.const(np.eye(self.dim)[::-1].copy()))

    # ----- sampling direction (z -> x), sequential -------------------------

    def forward(self, z: np.ndarray) -> np.ndarray:
        """Map latent codes to feature space (one pass per dimension per block)."""
        v = self._check_input(z)
        for i, blk in reversed(list(enumerate(self.blocks))):
            u = np.zeros_like(v)
            for _ in range(self.dim):
                shift, scale = blk.conditioner(u)
                u = v * np.exp(scale) + shift
            v = u[:, ::-1] if blk.reverse else u
            if not np.isfinite(v).all():
                raise NumericError(f"non-finite values after flow block {i}")
        return v

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ContractError(f"expected (N, {self.dim}) input, got {x.shape}")
        return x


def build_flow(dim: int, n_blocks: int = 2, hidden: int = 64, seed: int = 0) -> FlowStack:
    """Identity-initialised flow: hidden weights random, head weights zero.

    At init inverse_with_logdet(x) returns (x, 0) up to the block orderings,
    so early training starts from the raw feature density.
    """
    if dim < 1:
        raise ContractError(f"feature dimension must be >= 1, got {dim}")
    if n_blocks < 1:
        raise ContractError(f"need at least one flow block, got {n_blocks}")
    if hidden < 1:
        raise ContractError(f"hidden width must be >= 1, got {hidden}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    mask_hidden, mask_out = _masks(dim, hidden)
    blocks = []
    for b in range(n_blocks):
        blocks.append(MadeBlock(
            w1=Parameter(rng.normal(size=(hidden, dim)) * 0.1, name=f"block{b}.w1"),
            b1=Parameter(np.zeros(hidden), name=f"block{b}.b1"),
            w_shift=Parameter(np.zeros((dim, hidden)), name=f"block{b}.w_shift"),
            b_shift=Parameter(np.zeros(dim), name=f"block{b}.b_shift"),
            w_scale=Parameter(np.zeros((dim, hidden)), name=f"block{b}.w_scale"),
            b_scale=Parameter(np.zeros(dim), name=f"block{b}.b_scale"),
            mask_hidden=mask_hidden,
            mask_out=mask_out,
            reverse=(b % 2 == 1),
        ))
    return FlowStack(dim, blocks)
