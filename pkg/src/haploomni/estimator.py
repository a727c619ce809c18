"""Scikit-learn style facade over the staged training pipeline."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .checkpoint import load_checkpoint, save_checkpoint
from .data import PairDataset
from .diffusion import NoiseSchedule, sample
from .language import VOCAB, decode
from .model import ModelBundle, ModelConfig, image_to_latent, latent_to_image, patchify, unpatchify
from .training import STAGES, TeacherBundle, default_plan, run_stage


class HaploOmni(BaseEstimator):
    """Caption images (``predict``) and draw images from captions (``sample``).

    ``fit`` runs the requested stages in order on one set of image/caption
    pairs, used both as understanding pairs and generation pairs unless
    ``gen_images``/``gen_captions`` are given. ``stage_overrides`` maps a stage
    id to keyword overrides of its default plan, e.g. ``{"unified": {"steps": 50}}``.
    """

    def __init__(self, config: ModelConfig | None = None, stages=STAGES, stage_overrides=None,
                 seed: int = 0, teacher_seed: int = 1234, precision: int = 32, out_dir=None,
                 sample_steps: int = 50, max_new_tokens: int = 32):
        self.config = config
        self.stages = stages
        self.stage_overrides = stage_overrides
        self.seed = seed
        self.teacher_seed = teacher_seed
        self.precision = precision
        self.out_dir = out_dir
        self.sample_steps = sample_steps
        self.max_new_tokens = max_new_tokens

    # ------------------------------------------------------------ helpers

    def _validate_params(self):
        if self.precision not in (32, 64):
            raise ValueError(f"precision must be 32 or 64, got {self.precision}")
        unknown = [s for s in self.stages if s not in STAGES]
        if unknown:
            raise ValueError(f"unknown stages: {unknown}")
        order = [STAGES.index(s) for s in self.stages]
        if order != sorted(order):
            raise ValueError("stages must be listed in pipeline order")
        if self.sample_steps < 1:
            raise ValueError("sample_steps must be >= 1")

    def _check_images(self, images, cfg: ModelConfig) -> np.ndarray:
        arr = np.asarray(images)
        if arr.dtype != np.uint8:
            raise ValueError(f"images must be uint8, got {arr.dtype}")
        if arr.ndim == 4:
            arr = arr[:, None]
        if arr.ndim != 5 or arr.shape[2:] != (cfg.image_size, cfg.image_size, 3):
            raise ValueError(f"images must be [N, {cfg.image_size}, {cfg.image_size}, 3] "
                             f"(or with a frame axis), got {np.asarray(images).shape}")
        if arr.shape[1] != cfg.frames:
            raise ValueError(f"expected {cfg.frames} frame(s) per image, got {arr.shape[1]}")
        return arr

    def _check_fitted(self):
        if not hasattr(self, "bundle_"):
            raise NotFittedError("HaploOmni is not fitted yet; call fit or load first")

    # ------------------------------------------------------------ API

    def fit(self, images, captions, gen_images=None, gen_captions=None):
        self._validate_params()
        cfg = self.config or ModelConfig()
        und = self._check_images(images, cfg)
        if len(und) != len(captions):
            raise ValueError(f"{len(und)} images but {len(captions)} captions")
        gen = und if gen_images is None else self._check_images(gen_images, cfg)
        gcap = list(captions) if gen_captions is None else list(gen_captions)
        data = PairDataset(und, list(captions), gen, gcap)

        bundle = ModelBundle(cfg, seed=self.seed)
        if self.precision == 64:
            bundle = bundle.double()
        teachers = TeacherBundle.build(cfg, self.teacher_seed)
        overrides = self.stage_overrides or {}
        self.history_ = {}
        for stage in self.stages:
            plan = default_plan(stage, **overrides.get(stage, {}))
            res = run_stage(plan, bundle, data, teachers, seed=self.seed, out_dir=self.out_dir,
                            check_order=False)
            self.history_[stage] = res.metrics
        self.bundle_ = bundle
        return self

    def predict(self, images, prompt: str = "") -> list[str]:
        """Greedy captions for uint8 images."""
        self._check_fitted()
        cfg = self.bundle_.config
        arr = self._check_images(images, cfg)
        out = []
        for frames in arr:
            vis = patchify(image_to_latent(frames), cfg.patch_size)
            ids = decode(self.bundle_, vis, prompt.encode("utf-8"), max_new=self.max_new_tokens)
            out.append(VOCAB.decode(ids))
        return out

    def sample(self, captions, seed: int = 0) -> np.ndarray:
        """uint8 images ``[N, F, H, W, 3]`` drawn with deterministic DDIM, one per caption."""
        self._check_fitted()
        if isinstance(captions, str):
            captions = [captions]
        cfg = self.bundle_.config
        sched = NoiseSchedule(**getattr(self.bundle_, "extra_meta", {}).get("schedule", {}))
        imgs = []
        for i, cap in enumerate(captions):
            x = sample(self.bundle_, cap, self.sample_steps, torch.Generator().manual_seed(seed + i), sched)
            imgs.append(latent_to_image(unpatchify(x[0], cfg.patch_size, cfg.frames, cfg.channels,
                                                   cfg.image_size)))
        return np.stack(imgs)

    def save(self, path) -> Path:
        self._check_fitted()
        path = Path(path)
        save_checkpoint(self.bundle_, path)
        return path

    @classmethod
    def load(cls, path, **params) -> "HaploOmni":
        bundle = load_checkpoint(path)
        est = cls(config=bundle.config, seed=bundle.seed, **params)
        est.bundle_ = bundle
        return est
