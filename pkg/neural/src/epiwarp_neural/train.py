"""Two-stage training: coarse corrector, then conditional denoiser."""

from __future__ import annotations

import numpy as np
import torch
from torch import Tensor

from .artifact import ModelArtifact, manifest_sha256, save_artifact
from .config import TrainConfig
from .data import SampleArrays, load_training_split
from .diffusion import NoiseSchedule
from .nets import CoarseNet, DenoiseNet

__all__ = ["train_coarse", "train_diffusion", "weighted_l1", "NET_WIDTH"]

NET_WIDTH = 16


def weighted_l1(pred: Tensor, target: Tensor, mask: Tensor,
                mask_weight: float) -> Tensor:
    """Mean absolute error with anatomy pixels upweighted.

    The weight map is 1 everywhere plus ``mask_weight`` inside the
    mask; the result is normalized by the total weight so changing
    ``mask_weight`` rebalances rather than rescales the loss.
    """
    w = 1.0 + mask_weight * mask
    num = (w * (pred - target).abs()).sum()
    den = w.expand_as(pred).sum()
    return num / den


def _to_tensors(samples: list[SampleArrays]) -> tuple[Tensor, Tensor, Tensor]:
    x = torch.from_numpy(np.stack([s.x for s in samples]))
    y = torch.from_numpy(np.stack([s.y for s in samples]))
    m = torch.from_numpy(np.stack([s.mask for s in samples]))
    return x, y, m


def _check_crop(cfg: TrainConfig, hw: tuple[int, int]) -> int:
    crop = cfg.crop
    if crop == 0:
        if hw[0] % 4 or hw[1] % 4:
            raise ValueError(f"image sides must be divisible by 4, got {hw}")
        return 0
    if crop > min(hw):
        raise ValueError(f"crop {crop} exceeds dataset image size {hw}")
    if crop % 4:
        raise ValueError(f"crop must be divisible by 4, got {crop}")
    return crop


def _crop_batch(tensors: list[Tensor], crop: int,
                gen: torch.Generator) -> list[Tensor]:
    h, w = tensors[0].shape[-2:]
    if crop == 0 or (h == crop and w == crop):
        return tensors
    top = int(torch.randint(0, h - crop + 1, (1,), generator=gen))
    left = int(torch.randint(0, w - crop + 1, (1,), generator=gen))
    return [t[..., top:top + crop, left:left + crop] for t in tensors]


def train_coarse(cfg: TrainConfig) -> ModelArtifact:
    """Train the coarse corrector and save a coarse-only artifact.

    Supervision is weighted L1 between the predicted and clean
    (b50, adc) pairs over the manifest's train split.  Fully
    deterministic for a fixed config and seed; per-epoch mean losses
    are recorded on the artifact.
    """
    samples = load_training_split(cfg.manifest_path, "train")
    hw = samples[0].x.shape[1:]
    crop = _check_crop(cfg, hw)
    x_all, y_all, m_all = _to_tensors(samples)
    n = x_all.shape[0]

    torch.manual_seed(cfg.seed)
    net = CoarseNet(width=NET_WIDTH)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed + 1)

    losses: list[float] = []
    for _ in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen)
        total, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            xb, yb, mb = _crop_batch(
                [x_all[idx], y_all[idx], m_all[idx]], crop, gen)
            loss = weighted_l1(net(xb), yb, mb, cfg.mask_weight)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            seen += len(idx)
        losses.append(total / seen)

    art = ModelArtifact(
        config=cfg,
        manifest_hash=manifest_sha256(cfg.manifest_path),
        image_hw=(int(hw[0]), int(hw[1])),
        spacing_mm=samples[0].spacing_mm,
        width=NET_WIDTH,
        coarse_state=net.state_dict(),
        coarse_losses=losses,
    )
    save_artifact(art, cfg.artifact_path)
    return art


def _coarse_predictions(art: ModelArtifact, x_all: Tensor,
                        batch: int) -> Tensor:
    net = CoarseNet(width=art.width)
    net.load_state_dict(art.coarse_state)
    net.eval()
    out = []
    with torch.no_grad():
        for start in range(0, x_all.shape[0], batch):
            out.append(net(x_all[start:start + batch]))
    return torch.cat(out, dim=0)


def train_diffusion(cfg: TrainConfig, coarse: ModelArtifact,
                    conditioning: str = "coarse") -> ModelArtifact:
    """Train the denoiser on top of a frozen coarse stage.

    Each step noises the clean pair to a uniformly drawn schedule index
    and regresses the clean pair back from (noised pair, conditioning
    pair, t2w).  The conditioning pair is the frozen coarse prediction;
    ``conditioning="clean"`` substitutes the targets themselves, a
    diagnostic upper bound on what conditioning quality can buy.

    The coarse artifact must come from the same manifest (hash match).
    Saves and returns the full artifact.
    """
    if conditioning not in ("coarse", "clean"):
        raise ValueError(f"unknown conditioning {conditioning!r}")
    mhash = manifest_sha256(cfg.manifest_path)
    if mhash != coarse.manifest_hash:
        raise ValueError(
            "coarse artifact was trained on a different manifest "
            f"({coarse.manifest_hash[:12]}... vs {mhash[:12]}...)"
        )
    samples = load_training_split(cfg.manifest_path, "train")
    hw = samples[0].x.shape[1:]
    if (int(hw[0]), int(hw[1])) != tuple(coarse.image_hw):
        raise ValueError(
            f"dataset geometry {tuple(hw)} differs from coarse stage "
            f"{tuple(coarse.image_hw)}"
        )
    crop = _check_crop(cfg, hw)
    x_all, y_all, _ = _to_tensors(samples)
    t2w_all = x_all[:, 2:3]
    cond_all = (y_all.clone() if conditioning == "clean"
                else _coarse_predictions(coarse, x_all, cfg.batch_size))
    n = x_all.shape[0]

    sched = NoiseSchedule(cfg.diffusion_steps)
    ab = sched.alpha_bars.to(torch.float32)
    torch.manual_seed(cfg.seed)
    net = DenoiseNet(width=coarse.width)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed + 2)

    losses: list[float] = []
    for _ in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen)
        total, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            yb, cb, tb = _crop_batch(
                [y_all[idx], cond_all[idx], t2w_all[idx]], crop, gen)
            t_idx = torch.randint(0, sched.steps, (len(idx),), generator=gen)
            noise = torch.empty_like(yb).normal_(generator=gen)
            ab_t = ab[t_idx].view(-1, 1, 1, 1)
            x_t = ab_t.sqrt() * yb + (1 - ab_t).sqrt() * noise
            pred = net(x_t, cb, tb, (t_idx + 1).float())
            loss = torch.mean((pred - yb) ** 2)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            seen += len(idx)
        losses.append(total / seen)

    art = ModelArtifact(
        config=cfg,
        manifest_hash=mhash,
        image_hw=coarse.image_hw,
        spacing_mm=coarse.spacing_mm,
        width=coarse.width,
        coarse_state=coarse.coarse_state,
        diffusion_state=net.state_dict(),
        coarse_losses=list(coarse.coarse_losses or []),
        diffusion_losses=losses,
    )
    save_artifact(art, cfg.artifact_path)
    return art
