"""Procedural shape images, videos and their template captions."""
from __future__ import annotations

import numpy as np
import torch

from .model import ModelConfig, image_to_latent, patchify

SHAPES = ("square", "circle", "triangle", "cross")
COLORS = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
}
POSITIONS = ("tl", "tr", "bl", "br")


def template(shape: str, color: str, pos: str) -> str:
    return f"{color} {shape} {pos}"


def _shape_mask(shape: str, n: int) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n]
    c = (n - 1) / 2
    if shape == "square":
        return np.ones((n, n), dtype=bool)
    if shape == "circle":
        return (yy - c) ** 2 + (xx - c) ** 2 <= (n / 2) ** 2
    if shape == "triangle":
        return np.abs(xx - c) <= yy / 2 + 0.5
    if shape == "cross":
        return (np.abs(xx - c) <= 1) | (np.abs(yy - c) <= 1)
    raise ValueError(f"unknown shape {shape!r}")


def render(shape: str, color: str, pos: str, size: int = 16, frames: int = 1) -> np.ndarray:
    """``[frames, size, size, 3]`` uint8 image; video frames slide the shape right."""
    half = size // 2
    oy = 0 if pos[0] == "t" else half
    ox = 0 if pos[1] == "l" else half
    n = half - 2 if frames == 1 else half - 3
    m = _shape_mask(shape, n)
    out = np.zeros((frames, size, size, 3), dtype=np.uint8)
    for f in range(frames):
        dx = 1 + (f if frames > 1 else 0)
        region = out[f, oy + 1:oy + 1 + n, ox + dx:ox + dx + n]
        region[m] = COLORS[color]
    return out


class PairDataset:
    """Image/caption pairs for understanding and generation, held as uint8 ``[N, F, H, W, 3]``."""

    def __init__(self, und_images, und_captions, gen_images, gen_captions):
        self.und_images = _as_frames(und_images)
        self.gen_images = _as_frames(gen_images)
        self._und_captions = list(und_captions)
        self._gen_captions = list(gen_captions)
        if len(self.und_images) != len(self._und_captions) or len(self.gen_images) != len(self._gen_captions):
            raise ValueError("every image needs exactly one caption")

    @property
    def und_captions(self) -> list[str]:
        return self._und_captions

    @property
    def gen_captions(self) -> list[str]:
        return self._gen_captions

    def latents(self, which: str, patch: int) -> torch.Tensor:
        imgs = self.und_images if which == "und" else self.gen_images
        return torch.stack([patchify(image_to_latent(im), patch) for im in imgs]) if len(imgs) else \
            torch.zeros(0)

    def fingerprint(self) -> bytes:
        return self.und_images.tobytes() + self.gen_images.tobytes() + \
            "|".join(self.und_captions + self.gen_captions).encode()


def _as_frames(images) -> np.ndarray:
    arr = np.asarray(images, dtype=np.uint8)
    if arr.ndim == 4:
        arr = arr[:, None]
    if arr.ndim != 5 or arr.shape[-1] != 3:
        if arr.size == 0:
            return np.zeros((0, 1, 1, 1, 3), np.uint8)
        raise ValueError(f"expected images shaped [N, H, W, 3] or [N, F, H, W, 3], got {arr.shape}")
    return arr


class SyntheticDataset(PairDataset):
    """Rendered ``(shape, color, position)`` scenes with template captions."""

    def __init__(self, seed: int, und_specs, gen_specs, size: int = 16, frames: int = 1):
        self.seed = seed
        self.und_specs = list(und_specs)
        self.gen_specs = list(gen_specs)
        self.size, self.frames = size, frames
        empty = np.zeros((0, frames, size, size, 3), np.uint8)
        und = np.stack([render(*sp, size, frames) for sp in self.und_specs]) if self.und_specs else empty
        gen = np.stack([render(*sp, size, frames) for sp in self.gen_specs]) if self.gen_specs else empty
        super().__init__(und, [template(*sp) for sp in self.und_specs],
                         gen, [template(*sp) for sp in self.gen_specs])


def _combos():
    return [(s, c, p) for s in SHAPES for c in COLORS for p in POSITIONS]


def generate_synthetic(seed: int, n_und: int, n_gen: int, config: ModelConfig | None = None) -> SyntheticDataset:
    cfg = config or ModelConfig()
    rng = np.random.default_rng(seed)
    combos = _combos()

    def draw(n):
        picks = []
        while len(picks) < n:
            perm = rng.permutation(len(combos))
            picks.extend(combos[i] for i in perm[: n - len(picks)])
        return picks

    und = draw(n_und)
    gen = draw(n_gen)
    return SyntheticDataset(seed=seed, und_specs=und, gen_specs=gen, size=cfg.image_size, frames=cfg.frames)
