"""Domain expansion generator.

Tensors are channels-first throughout (``N x C x H x W``). The generator turns a
source minibatch into an extended-domain minibatch through three flows:

* spatial: 1x1 reduction to 3 channels, style mixing with a random minibatch
  partner, transposed-conv expansion;
* spectral: patch-sized convolution to a ``d_se`` vector, content swap with a
  random partner, transposed-conv expansion;
* morphological: 1x1 reduction to one channel, learnable opening/closing with
  top-hat and black-hat residuals, noise-driven AdaIN.

The three are concatenated and decoded back to ``d`` bands in [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import PatchBatch

EPS = 1e-5
NOISE_DIM = 64


class StyleStats(NamedTuple):
    mean: torch.Tensor
    std: torch.Tensor


def channel_stats(z: torch.Tensor, eps: float = EPS) -> StyleStats:
    """Spatial mean and epsilon-stabilized std per channel of ``(..., C, H, W)``.

    Results keep the spatial dims (size 1) so they broadcast against ``z``.
    """
    mean = z.mean(dim=(-2, -1), keepdim=True)
    var = (z - mean).pow(2).mean(dim=(-2, -1), keepdim=True)
    return StyleStats(mean, torch.sqrt(var + eps))


def _as_channel_param(p, z: torch.Tensor, name: str) -> torch.Tensor:
    p = torch.as_tensor(p, dtype=z.dtype, device=z.device)
    if p.dim() >= 2 and p.shape[-2:] == (1, 1):
        p = p[..., 0, 0]
    if p.dim() == 0 or p.shape[-1] != z.shape[-3]:
        raise ValueError(f"{name} has {tuple(p.shape)} entries, expected {z.shape[-3]} channels")
    return p[..., None, None]


def adain(z: torch.Tensor, scale, shift, eps: float = EPS) -> torch.Tensor:
    """``scale * (z - mu(z)) / sigma(z) + shift`` with per-channel ``scale``/``shift``."""
    scale = _as_channel_param(scale, z, "scale")
    shift = _as_channel_param(shift, z, "shift")
    mu, sigma = channel_stats(z, eps)
    return scale * (z - mu) / sigma + shift


def spatial_randomize(
    z: torch.Tensor,
    z_prime: torch.Tensor,
    alpha,
    swap_stat_roles: bool = False,
    eps: float = EPS,
) -> torch.Tensor:
    """Re-style ``z`` with a convex blend of its own and ``z_prime``'s channel statistics.

    With ``swap_stat_roles`` the blended mean is used as the scale and the blended
    std as the shift, swapping the conventional AdaIN roles.
    """
    if z.shape != z_prime.shape:
        raise ValueError(f"shape mismatch: {tuple(z.shape)} vs {tuple(z_prime.shape)}")
    mu, sigma = channel_stats(z, eps)
    mu_p, sigma_p = channel_stats(z_prime, eps)
    mu_hat = alpha * mu + (1 - alpha) * mu_p
    sigma_hat = alpha * sigma + (1 - alpha) * sigma_p
    normed = (z - mu) / sigma
    if swap_stat_roles:
        return mu_hat * normed + sigma_hat
    return sigma_hat * normed + mu_hat


def spectral_randomize(z: torch.Tensor, z_prime: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Keep the mean/std of each ``z`` vector, take the normalized content of ``z_prime``.

    Statistics run over the last axis (the ``d_se`` embedding channels).
    """
    if z.shape != z_prime.shape:
        raise ValueError(f"shape mismatch: {tuple(z.shape)} vs {tuple(z_prime.shape)}")
    if z.shape[-1] < 2:
        raise ValueError("spectral randomization needs at least 2 channels")

    def stats(v):
        m = v.mean(dim=-1, keepdim=True)
        return m, torch.sqrt((v - m).pow(2).mean(dim=-1, keepdim=True) + eps)

    mu, sigma = stats(z)
    mu_p, sigma_p = stats(z_prime)
    return sigma * (z_prime - mu_p) / sigma_p + mu


# -- morphology ---------------------------------------------------------------

def _windows(z: torch.Tensor, k: int) -> Tuple[torch.Tensor, tuple]:
    """Zero-padded ``k x k`` windows of ``(..., H, W)`` as ``(B, k*k, H*W)``."""
    if k % 2 == 0:
        raise ValueError(f"structural element must be odd-sized, got {k}")
    lead = z.shape[:-2]
    h, w = z.shape[-2:]
    flat = z.reshape(-1, 1, h, w)
    r = k // 2
    cols = F.unfold(F.pad(flat, (r, r, r, r)), kernel_size=k)
    return cols, (lead, h, w)


def dilation2d(z: torch.Tensor, w_d: torch.Tensor) -> torch.Tensor:
    """Grayscale dilation: max over the window of ``z + w_d`` (zero padding).

    ``z`` is ``(..., H, W)``; every leading slice uses the same ``k x k`` element.
    Ties route the gradient to the first window position in row-major order.
    """
    cols, (lead, h, w) = _windows(z, w_d.shape[-1])
    out = (cols + w_d.reshape(1, -1, 1)).max(dim=1).values
    return out.reshape(*lead, h, w)


def erosion2d(z: torch.Tensor, w_e: torch.Tensor) -> torch.Tensor:
    """Grayscale erosion: min over the window of ``z - w_e`` (zero padding)."""
    cols, (lead, h, w) = _windows(z, w_e.shape[-1])
    out = (cols - w_e.reshape(1, -1, 1)).min(dim=1).values
    return out.reshape(*lead, h, w)


def morph_tie_gap(z: torch.Tensor, w: torch.Tensor, op: str) -> float:
    """Smallest gap between the best and second-best candidate over all windows."""
    cols, _ = _windows(z.detach(), w.shape[-1])
    w = w.detach()
    if op == "dilation":
        cand = cols + w.reshape(1, -1, 1)
    elif op == "erosion":
        cand = -(cols - w.reshape(1, -1, 1))
    else:
        raise ValueError(op)
    top2 = cand.topk(2, dim=1).values
    return float((top2[:, 0] - top2[:, 1]).min())


class MorphEncoder(nn.Module):
    """Learnable opening/closing template extractor followed by noise-driven AdaIN.

    Following the naming used for this architecture, the "opening" branch runs
    dilation then erosion, and "closing" runs erosion then dilation, each block
    applied twice with separate structural elements.
    """

    def __init__(self, in_bands: int, element_size: int = 3, noise_dim: int = NOISE_DIM, blocks: int = 2):
        super().__init__()
        self.reduce = nn.Conv2d(in_bands, 1, kernel_size=1)
        k = element_size

        def element():
            return nn.Parameter(torch.empty(k, k).uniform_(-0.01, 0.01))

        # each block: (first op element, second op element)
        self.open_d = nn.ParameterList([element() for _ in range(blocks)])
        self.open_e = nn.ParameterList([element() for _ in range(blocks)])
        self.close_e = nn.ParameterList([element() for _ in range(blocks)])
        self.close_d = nn.ParameterList([element() for _ in range(blocks)])
        self.noise_dim = noise_dim
        self.noise_scale = nn.Linear(noise_dim, 4)
        self.noise_shift = nn.Linear(noise_dim, 4)
        with torch.no_grad():
            self.noise_scale.bias.fill_(1.0)
            self.noise_shift.bias.zero_()

    def template(self, x: torch.Tensor) -> torch.Tensor:
        """Opening, closing, top-hat and black-hat maps, ``N x 4 x H x W``."""
        zm = self.reduce(x)[:, 0]
        opened = zm
        for wd, we in zip(self.open_d, self.open_e):
            opened = erosion2d(dilation2d(opened, wd), we)
        closed = zm
        for we, wd in zip(self.close_e, self.close_d):
            closed = dilation2d(erosion2d(closed, we), wd)
        return torch.stack([opened, closed, zm - opened, closed - zm], dim=1)

    def forward(self, x: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        t = self.template(x)
        return adain(t, self.noise_scale(noise), self.noise_shift(noise))


class Generator(nn.Module):
    """Maps ``N x d x s x s`` source patches to extended-domain patches in [0, 1].

    ``use_semantic`` / ``use_morph`` switch the corresponding flows off by
    feeding zeros to the decoder in their place (decoder width is unchanged).
    """

    def __init__(
        self,
        in_bands: int,
        d_se: int = 64,
        patch_size: int = 13,
        use_semantic: bool = True,
        use_morph: bool = True,
        spar_swap_stat_roles: bool = False,
    ):
        super().__init__()
        self.in_bands = in_bands
        self.d_se = d_se
        self.patch_size = patch_size
        self.use_semantic = use_semantic
        self.use_morph = use_morph
        self.spar_swap_stat_roles = spar_swap_stat_roles

        self.alpha_raw = nn.Parameter(torch.zeros(()))
        self.spatial_reduce = nn.Conv2d(in_bands, 3, kernel_size=1)
        self.spa_expand = nn.ConvTranspose2d(3, d_se, kernel_size=1)
        self.spectral_compress = nn.Conv2d(in_bands, d_se, kernel_size=patch_size)
        self.spe_expand = nn.ConvTranspose2d(d_se, d_se, kernel_size=patch_size)
        self.morph = MorphEncoder(in_bands)
        width = 2 * d_se + 4
        self.decoder = nn.Sequential(
            nn.Conv2d(width, d_se, kernel_size=3, padding=1),
            nn.ReLU(),
            nn.Conv2d(d_se, d_se, kernel_size=3, padding=1),
            nn.ReLU(),
            nn.Conv2d(d_se, in_bands, kernel_size=1),
            nn.Sigmoid(),
        )

    @property
    def alpha(self) -> torch.Tensor:
        return torch.sigmoid(self.alpha_raw)

    def semantic(self, x: torch.Tensor, spa_perm: torch.Tensor, spe_perm: torch.Tensor) -> torch.Tensor:
        z_spa = self.spatial_reduce(x)
        spa = spatial_randomize(z_spa, z_spa[spa_perm], self.alpha, self.spar_swap_stat_roles)
        spa = self.spa_expand(spa)

        z_spe = self.spectral_compress(x).flatten(1)
        spe = spectral_randomize(z_spe, z_spe[spe_perm])
        spe = self.spe_expand(spe[:, :, None, None])
        return torch.cat([spa, spe], dim=1)

    def forward(self, x: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        n, d, s, s2 = x.shape
        if n < 2:
            raise ValueError("the generator needs a minibatch of at least 2 patches")
        if d != self.in_bands or s != self.patch_size or s2 != s:
            raise ValueError(
                f"expected N x {self.in_bands} x {self.patch_size} x {self.patch_size}, got {tuple(x.shape)}"
            )
        # draw all randomness up front so ablations consume the same stream
        spa_perm = torch.randperm(n, generator=generator)
        spe_perm = torch.randperm(n, generator=generator)
        noise = torch.randn(n, self.morph.noise_dim, generator=generator).to(x.dtype)

        if self.use_semantic:
            sem = self.semantic(x, spa_perm, spe_perm)
        else:
            sem = x.new_zeros(n, 2 * self.d_se, s, s)
        if self.use_morph:
            mor = self.morph(x, noise)
        else:
            mor = x.new_zeros(n, 4, s, s)
        return self.decoder(torch.cat([sem, mor], dim=1))


def mix_id(
    sd: torch.Tensor,
    ed: torch.Tensor,
    generator: Optional[torch.Generator] = None,
    weights: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Intermediate domain ``w * sd + (1 - w) * ed`` with per-sample ``w ~ U(0, 1)``."""
    if sd.shape != ed.shape:
        raise ValueError(f"misaligned batches: {tuple(sd.shape)} vs {tuple(ed.shape)}")
    if weights is None:
        weights = torch.rand(sd.shape[0], generator=generator).to(sd.dtype)
    weights = torch.as_tensor(weights, dtype=sd.dtype)
    if weights.shape != (sd.shape[0],):
        raise ValueError("need one mixing weight per sample")
    w = weights.reshape(-1, *([1] * (sd.dim() - 1)))
    return w * sd + (1 - w) * ed, weights


def to_tensor(patches: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """``N x s x s x d`` array to a channels-first tensor."""
    return torch.as_tensor(np.ascontiguousarray(patches)).permute(0, 3, 1, 2).to(dtype).contiguous()


def to_patches(x: torch.Tensor) -> np.ndarray:
    return x.detach().permute(0, 2, 3, 1).cpu().numpy().astype(np.float32)


@torch.no_grad()
def generate_ed(batch: PatchBatch, model: Generator, seed: int = 0) -> PatchBatch:
    """Extended-domain counterpart of ``batch``; deterministic under ``seed``."""
    gen = torch.Generator().manual_seed(seed)
    dtype = next(model.parameters()).dtype
    ed = model(to_tensor(batch.patches, dtype), gen)
    return PatchBatch(to_patches(ed), batch.labels.copy(), batch.coords)


@dataclass
class DomainTriplet:
    """Aligned source, extended and intermediate batches plus the mixing weights."""

    sd: PatchBatch
    ed: PatchBatch
    id: PatchBatch
    mix_weights: np.ndarray

    @classmethod
    def build(cls, sd: PatchBatch, model: Generator, seed: int = 0) -> "DomainTriplet":
        ed = generate_ed(sd, model, seed)
        gen = torch.Generator().manual_seed(seed + 1)
        x_id, w = mix_id(torch.as_tensor(sd.patches), torch.as_tensor(ed.patches), gen)
        return cls(sd, ed, PatchBatch(x_id.numpy(), sd.labels.copy(), sd.coords), w.numpy())


__all__ = [
    "to_tensor",
    "to_patches",
    "generate_ed",
    "DomainTriplet",
    "EPS",
    "NOISE_DIM",
    "StyleStats",
    "channel_stats",
    "adain",
    "spatial_randomize",
    "spectral_randomize",
    "dilation2d",
    "erosion2d",
    "morph_tie_gap",
    "MorphEncoder",
    "Generator",
    "mix_id",
]
