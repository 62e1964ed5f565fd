"""Domain-invariant discriminator: shared feature extractor, classifier and projection head."""
from __future__ import annotations

import logging
from typing import Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

logger = logging.getLogger(__name__)


class Discriminator(nn.Module):
    def __init__(
        self,
        in_bands: int,
        n_classes: int,
        patch_size: int = 13,
        widths: Tuple[int, int] = (64, 128),
        feature_dim: int = 128,
        hidden_dim: int = 256,
        proj_dim: int = 64,
    ):
        super().__init__()
        self.in_bands = in_bands
        self.n_classes = n_classes
        self.patch_size = patch_size
        c1, c2 = widths
        self.conv = nn.Sequential(
            nn.Conv2d(in_bands, c1, kernel_size=3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(c1, c2, kernel_size=3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
        )
        side = patch_size // 2 // 2
        self.fc = nn.Sequential(
            nn.Linear(c2 * side * side, hidden_dim),
            nn.ReLU(),
            nn.Linear(hidden_dim, feature_dim),
        )
        self.head = nn.Linear(feature_dim, n_classes)
        self.proj = nn.Linear(feature_dim, proj_dim)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1:] != (self.in_bands, self.patch_size, self.patch_size):
            raise ValueError(
                f"expected N x {self.in_bands} x {self.patch_size} x {self.patch_size}, got {tuple(x.shape)}"
            )
        return self.fc(self.conv(x).flatten(1))

    def logits(self, features: torch.Tensor) -> torch.Tensor:
        return self.head(features)

    def classify(self, features: torch.Tensor) -> torch.Tensor:
        """Class probabilities, ``N x C``."""
        return F.softmax(self.head(features), dim=1)

    def project(self, features: torch.Tensor) -> torch.Tensor:
        """Unit-norm embeddings. All-zero projections fall back to ``e_1``."""
        return l2_normalize(self.proj(features))

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        f = self.embed(x)
        return self.classify(f), self.project(f)


def l2_normalize(v: torch.Tensor) -> torch.Tensor:
    norm = v.norm(dim=1, keepdim=True)
    zero = norm[:, 0] == 0
    if zero.any():
        logger.warning("%d zero projection(s) replaced by the first basis vector", int(zero.sum()))
        fallback = torch.zeros_like(v)
        fallback[:, 0] = 1.0
        v = torch.where(zero[:, None], fallback, v)
        norm = torch.where(zero[:, None], torch.ones_like(norm), norm)
    return v / norm


__all__ = ["Discriminator", "l2_normalize"]
