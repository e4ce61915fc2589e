"""Single-codebook vector quantization and product quantization.

Both quantizers project latent frames into a small code space, L2-normalize
there, pick the nearest unit-norm code and project back.  The product
quantizer runs one such VQ per channel group and folds the group indices
into a single integer token.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import kernels

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class VQConfig:
    codebook_size: int = 8192
    code_dim: int = 8
    input_dim: int = 256
    commitment_beta: float = 0.25
    normalize_before_projection: bool = False

    def __post_init__(self):
        if self.codebook_size < 2:
            raise ValueError("codebook_size must be >= 2")
        if not 0 < self.code_dim <= self.input_dim:
            raise ValueError(f"need 0 < code_dim <= input_dim, got {self.code_dim}, {self.input_dim}")
        if self.commitment_beta < 0:
            raise ValueError("commitment_beta must be >= 0")

    @property
    def effective_size(self) -> int:
        return self.codebook_size

    @property
    def group_sizes(self) -> tuple[int, ...]:
        return (self.codebook_size,)


@dataclass(frozen=True)
class PQConfig:
    group_sizes: tuple[int, ...] = (16, 16, 16, 16)
    code_dim: int = 8
    input_dim: int = 256
    commitment_beta: float = 0.25
    normalize_before_projection: bool = False

    def __post_init__(self):
        object.__setattr__(self, "group_sizes", tuple(int(s) for s in self.group_sizes))
        if not self.group_sizes or any(s < 2 for s in self.group_sizes):
            raise ValueError(f"group sizes must all be >= 2, got {self.group_sizes}")
        if self.input_dim % len(self.group_sizes):
            raise ValueError(f"input_dim {self.input_dim} not divisible into {len(self.group_sizes)} groups")
        self.group_config(0)  # validates code_dim against the group width

    @property
    def group_dim(self) -> int:
        return self.input_dim // len(self.group_sizes)

    @property
    def effective_size(self) -> int:
        return int(np.prod(self.group_sizes, dtype=object))

    def group_config(self, i: int) -> VQConfig:
        return VQConfig(self.group_sizes[i], self.code_dim, self.group_dim,
                        self.commitment_beta, self.normalize_before_projection)


@dataclass
class QuantizerOutput:
    quantized: torch.Tensor  # (B, C, T), straight-through gradient to the projected latent
    indices: torch.Tensor  # (B, T) int64
    vq_loss: torch.Tensor
    io_mse: torch.Tensor
    utilization: float


def bitrate(effective_size: int, token_rate: float) -> float:
    """Bits per second for one token stream: ceil(log2(size)) * rate."""
    if effective_size < 2:
        raise ValueError("effective codebook size must be >= 2")
    if token_rate <= 0:
        raise ValueError("token_rate must be positive")
    bits = (int(effective_size) - 1).bit_length()
    return bits * token_rate


def pq_compose(sub_indices, group_sizes: Sequence[int]) -> np.ndarray:
    """Fold per-group indices (..., Nq) into one integer per frame, most significant group first."""
    sizes = np.asarray(group_sizes, dtype=np.int64)
    sub = np.asarray(sub_indices, dtype=np.int64)
    if sub.shape[-1] != sizes.shape[0]:
        raise ValueError(f"expected {sizes.shape[0]} sub-indices per frame, got {sub.shape[-1]}")
    if np.any(sub < 0) or np.any(sub >= sizes):
        raise ValueError("sub-index out of range for its group")
    flat = np.ascontiguousarray(sub.reshape(-1, sizes.shape[0]))
    return kernels.pq_compose(flat, sizes).reshape(sub.shape[:-1])


def pq_decompose(codes, group_sizes: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`pq_compose`: (...,) codes -> (..., Nq) sub-indices."""
    sizes = np.asarray(group_sizes, dtype=np.int64)
    codes = np.asarray(codes, dtype=np.int64)
    total = int(np.prod(sizes, dtype=object))
    if np.any(codes < 0) or np.any(codes >= total):
        raise ValueError(f"code out of range [0, {total})")
    flat = np.ascontiguousarray(codes.reshape(-1))
    return kernels.pq_decompose(flat, sizes).reshape(*codes.shape, sizes.shape[0])


# -- codebook initialization ------------------------------------------------------


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def _nearest(x: np.ndarray, centers: np.ndarray, chunk: int = 4096) -> np.ndarray:
    out = np.empty(x.shape[0], dtype=np.int64)
    for s in range(0, x.shape[0], chunk):
        out[s:s + chunk] = np.argmax(x[s:s + chunk] @ centers.T, axis=1)
    return out


def codebook_init(samples: np.ndarray | None, codebook_size: int, code_dim: int,
                  rng: np.random.Generator, lloyd_iters: int = 10) -> np.ndarray:
    """Unit-norm initial codes, (codebook_size, code_dim).

    With a sample buffer of projected latents: spherical k-means seeded by
    k-means++.  Without one (or with too few distinct samples) the codes are
    normalized Gaussian draws.
    """
    def gaussian():
        return _normalize_rows(rng.standard_normal((codebook_size, code_dim)))

    if samples is None or len(samples) == 0:
        return gaussian()
    x = _normalize_rows(np.asarray(samples, dtype=np.float64).reshape(-1, code_dim))
    if len(np.unique(x, axis=0)) < codebook_size:
        warnings.warn(
            f"only {len(np.unique(x, axis=0))} distinct samples for {codebook_size} codes; "
            "falling back to Gaussian codebook init", RuntimeWarning, stacklevel=2,
        )
        return gaussian()

    # k-means++ seeding on squared chord distance
    n = x.shape[0]
    centers = np.empty((codebook_size, code_dim))
    centers[0] = x[rng.integers(n)]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for k in range(1, codebook_size):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers[k] = x[idx]
        np.minimum(d2, np.sum((x - centers[k]) ** 2, axis=1), out=d2)

    for _ in range(lloyd_iters):
        assign = _nearest(x, centers)
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, x)
        counts = np.bincount(assign, minlength=codebook_size)
        live = counts > 0
        centers[live] = _normalize_rows(sums[live])
    return _normalize_rows(centers)


# -- quantizer modules ------------------------------------------------------------


class VectorQuantizer(nn.Module):
    """Nearest-code lookup in an L2-normalized low-dimensional projection.

    Loss per frame: ||sg(z) - c||^2 + beta * ||z - sg(c)||^2, averaged over
    frames.  Ties in the nearest-code search resolve to the lowest index.
    """

    def __init__(self, config: VQConfig):
        super().__init__()
        self.config = config
        self.down_proj = nn.Linear(config.input_dim, config.code_dim, bias=False)
        self.up_proj = nn.Linear(config.code_dim, config.input_dim, bias=False)
        self.codebook = nn.Parameter(F.normalize(torch.randn(config.codebook_size, config.code_dim), dim=1))

    @property
    def group_sizes(self) -> tuple[int, ...]:
        return (self.config.codebook_size,)

    @property
    def effective_size(self) -> int:
        return self.config.codebook_size

    def codes(self) -> torch.Tensor:
        return F.normalize(self.codebook, dim=1)

    def project(self, latent: torch.Tensor) -> torch.Tensor:
        """(B, C, T) latent -> (B, T, code_dim) unit-norm projected frames."""
        h = latent.transpose(1, 2)
        if self.config.normalize_before_projection:
            h = F.normalize(h, dim=-1)
        return F.normalize(self.down_proj(h), dim=-1)

    def nearest(self, z: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            sim = z @ self.codes().detach().T
            return sim.argmax(dim=-1)

    def quantize_projected(self, z: torch.Tensor):
        """Snap unit-norm frames to codes.

        Returns (z_q, codes, indices).  z_q has exactly the code values in
        the forward pass and passes gradients to ``z`` unchanged.
        """
        idx = self.nearest(z)
        c = self.codes()[idx]
        z_q = c.detach() + (z - z.detach())
        return z_q, c, idx

    def forward(self, latent: torch.Tensor) -> QuantizerOutput:
        z = self.project(latent)
        z_q, c, idx = self.quantize_projected(z)
        quantized = self.up_proj(z_q).transpose(1, 2)
        if z.shape[1] == 0:
            zero = latent.new_zeros(())
            return QuantizerOutput(quantized, idx, zero, zero, 0.0)
        codebook_term = (z.detach() - c).pow(2).sum(-1).mean()
        commit_term = (z - c.detach()).pow(2).sum(-1).mean()
        vq_loss = codebook_term + self.config.commitment_beta * commit_term
        io_mse = (latent - quantized).pow(2).mean()
        used = torch.unique(idx).numel()
        return QuantizerOutput(quantized, idx, vq_loss, io_mse, used / self.config.codebook_size)

    @torch.no_grad()
    def lookup(self, indices) -> torch.Tensor:
        """(B, T) indices -> (B, input_dim, T) up-projected unit-norm codes."""
        indices = torch.as_tensor(indices, dtype=torch.long)
        if indices.numel() and (indices.min() < 0 or indices.max() >= self.config.codebook_size):
            raise ValueError(f"index out of range [0, {self.config.codebook_size})")
        return self.up_proj(self.codes()[indices]).transpose(1, 2)

    @torch.no_grad()
    def init_codebook(self, latents: torch.Tensor | None, rng: np.random.Generator) -> None:
        samples = None
        if latents is not None:
            samples = self.project(latents).reshape(-1, self.config.code_dim).double().numpy()
        init = codebook_init(samples, self.config.codebook_size, self.config.code_dim, rng)
        self.codebook.copy_(torch.from_numpy(init).to(self.codebook.dtype))


class ProductQuantizer(nn.Module):
    """Independent VQs over contiguous channel groups; indices composed into one token."""

    def __init__(self, config: PQConfig):
        super().__init__()
        self.config = config
        self.groups = nn.ModuleList([VectorQuantizer(config.group_config(i)) for i in range(len(config.group_sizes))])

    @property
    def group_sizes(self) -> tuple[int, ...]:
        return self.config.group_sizes

    @property
    def effective_size(self) -> int:
        return self.config.effective_size

    def _compose(self, sub: list[torch.Tensor]) -> torch.Tensor:
        stacked = torch.stack(sub, dim=-1).numpy()
        return torch.from_numpy(pq_compose(stacked, self.config.group_sizes))

    def forward(self, latent: torch.Tensor, return_groups: bool = False):
        chunks = latent.split(self.config.group_dim, dim=1)
        outs = [vq(chunk) for vq, chunk in zip(self.groups, chunks)]
        quantized = torch.cat([o.quantized for o in outs], dim=1)
        indices = self._compose([o.indices for o in outs])
        vq_loss = outs[0].vq_loss
        for o in outs[1:]:
            vq_loss = vq_loss + o.vq_loss
        if latent.shape[-1] == 0:
            io_mse = latent.new_zeros(())
            util = 0.0
        else:
            io_mse = (latent - quantized).pow(2).mean()
            util = torch.unique(indices).numel() / self.effective_size
        out = QuantizerOutput(quantized, indices, vq_loss, io_mse, util)
        return (out, outs) if return_groups else out

    @torch.no_grad()
    def lookup(self, indices) -> torch.Tensor:
        indices = torch.as_tensor(indices, dtype=torch.long)
        sub = torch.from_numpy(pq_decompose(indices.numpy(), self.config.group_sizes))
        return torch.cat([vq.lookup(sub[..., i]) for i, vq in enumerate(self.groups)], dim=1)

    @torch.no_grad()
    def init_codebook(self, latents: torch.Tensor | None, rng: np.random.Generator) -> None:
        chunks = latents.split(self.config.group_dim, dim=1) if latents is not None else [None] * len(self.groups)
        for vq, chunk in zip(self.groups, chunks):
            vq.init_codebook(chunk, rng)


def build_quantizer(config: VQConfig | PQConfig) -> nn.Module:
    if isinstance(config, PQConfig):
        return ProductQuantizer(config)
    return VectorQuantizer(config)
