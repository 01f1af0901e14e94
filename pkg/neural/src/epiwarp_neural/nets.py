"""Network definitions: a coarse corrector and a conditional denoiser.

Both are small residual UNets (two downsamplings, GroupNorm, SiLU) kept
well under a million parameters.  The coarse net predicts the clean
(b50, adc) pair from the distorted pair plus the t2w; the denoiser
additionally takes a noised target pair and a scalar step index, which
enters every block as a FiLM scale/shift.  Output heads are
zero-initialized so both nets start out as exact pass-throughs of their
residual base.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn

__all__ = ["CoarseNet", "DenoiseNet", "param_count"]


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(4, ch), ch)


class _Block(nn.Module):
    """Two 3x3 convs with a learned shortcut; optional FiLM from temb."""

    def __init__(self, cin: int, cout: int, temb_dim: int | None = None):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = _norm(cout)
        self.act = nn.SiLU()
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()
        self.film = nn.Linear(temb_dim, 2 * cout) if temb_dim else None

    def forward(self, x: Tensor, temb: Tensor | None = None) -> Tensor:
        h = self.norm1(self.conv1(x))
        if self.film is not None:
            scale, shift = self.film(temb).chunk(2, dim=-1)
            h = h * (1 + scale[..., None, None]) + shift[..., None, None]
        h = self.act(h)
        h = self.norm2(self.conv2(h))
        return self.act(h + self.skip(x))


class _UNet(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, width: int = 16,
                 temb_dim: int | None = None):
        super().__init__()
        w = width
        self.enc1 = _Block(in_ch, w, temb_dim)
        self.down1 = nn.Conv2d(w, 2 * w, 3, stride=2, padding=1)
        self.enc2 = _Block(2 * w, 2 * w, temb_dim)
        self.down2 = nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1)
        self.mid = _Block(4 * w, 4 * w, temb_dim)
        self.up2 = nn.ConvTranspose2d(4 * w, 2 * w, 2, stride=2)
        self.dec2 = _Block(4 * w, 2 * w, temb_dim)
        self.up1 = nn.ConvTranspose2d(2 * w, w, 2, stride=2)
        self.dec1 = _Block(2 * w, w, temb_dim)
        self.head = nn.Conv2d(w, out_ch, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x: Tensor, temb: Tensor | None = None) -> Tensor:
        if x.shape[-2] % 4 or x.shape[-1] % 4:
            raise ValueError(
                f"image sides must be divisible by 4, got {tuple(x.shape[-2:])}"
            )
        e1 = self.enc1(x, temb)
        e2 = self.enc2(self.down1(e1), temb)
        m = self.mid(self.down2(e2), temb)
        d2 = self.dec2(torch.cat([self.up2(m), e2], dim=1), temb)
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1), temb)
        return self.head(d1)


class CoarseNet(nn.Module):
    """Predicts the clean (b50, adc) pair as distorted pair + correction.

    Input channels: distorted b50, distorted adc, t2w (network space).
    """

    def __init__(self, width: int = 16):
        super().__init__()
        self.unet = _UNet(3, 2, width=width)

    def forward(self, x: Tensor) -> Tensor:
        return self.unet(x) + x[:, :2]


def _sinusoidal_embedding(t: Tensor, dim: int) -> Tensor:
    # t holds 1-based step indices; low frequencies resolve the full
    # schedule, high ones the individual step.
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half
    )
    angles = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


class DenoiseNet(nn.Module):
    """Predicts the clean pair from a noised pair plus conditioning.

    Inputs are the noised target pair (2 ch), the conditioning pair
    (normally the frozen coarse prediction, 2 ch), and the t2w (1 ch);
    the prediction is anchored on the conditioning pair by a global
    residual.  ``t`` is the 1-based schedule step of the noised input.
    """

    TEMB_DIM = 64

    def __init__(self, width: int = 16):
        super().__init__()
        self.unet = _UNet(5, 2, width=width, temb_dim=self.TEMB_DIM)
        self.temb_mlp = nn.Sequential(
            nn.Linear(self.TEMB_DIM, self.TEMB_DIM),
            nn.SiLU(),
            nn.Linear(self.TEMB_DIM, self.TEMB_DIM),
        )

    def forward(self, x_t: Tensor, cond_pair: Tensor, t2w: Tensor,
                t: Tensor) -> Tensor:
        temb = self.temb_mlp(_sinusoidal_embedding(t, self.TEMB_DIM))
        h = self.unet(torch.cat([x_t, cond_pair, t2w], dim=1), temb)
        return h + cond_pair
