"""Synthetic datasets for desk-scale fine-tuning runs.

``teacher``: regression onto a frozen teacher network.  The student starts
from the teacher's "pre-trained" weights and must learn a low-rank change of
the teacher, so fine-tuning begins from a model that already carries the
teacher's outlier structure.

``glyphs``: 8x8 bitmap characters with pixel noise, one class per glyph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor_core import OutlierProfile, inject_outliers
from .model import ModelConfig, ToyModel, init_params


@dataclass
class DataConfig:
    name: str = "teacher"
    batch: int = 64
    seed: int = 0
    # input outliers: magnified feature channels and magnified tokens
    channel_outliers: int = 2
    channel_scale: float = 20.0
    token_outliers: int = 2
    token_scale: float = 20.0
    # size of the fine-tuning shift applied to the teacher
    delta_rank: int = 4
    delta_scale: float = 0.3
    noise: float = 0.0
    # hard tokens: a few training rows per batch whose targets carry a large
    # offset, which gives the error tensors token-row outliers
    hard_tokens: int = 0
    hard_scale: float = 10.0


class Dataset:
    """Deterministic stream of ``(x, target)`` batches plus a held-out batch."""

    loss = "mse"

    def batch(self, step: int):
        raise NotImplementedError

    def eval_batch(self):
        raise NotImplementedError


class TeacherRegression(Dataset):
    loss = "mse"

    def __init__(self, model_config: ModelConfig, cfg: DataConfig):
        self.cfg = cfg
        self.model_config = model_config
        base = init_params(model_config)
        rng = np.random.default_rng([cfg.seed, 7])
        target = {k: v.copy() for k, v in base.items()}
        for k, v in base.items():
            if k.endswith(".W") and v.ndim == 2:
                n, m = v.shape
                r = min(cfg.delta_rank, n, m)
                a = rng.standard_normal((n, r))
                b = rng.standard_normal((r, m))
                delta = a @ b / np.sqrt(r)
                delta *= cfg.delta_scale * np.std(v) / np.std(delta)
                target[k] = v + delta
        self.pretrained = base
        self.teacher = ToyModel(model_config, _reference_scheme(), target)
        rng_ch = np.random.default_rng([cfg.seed, 11])
        d = model_config.d_model
        self.channels = OutlierProfile.random(d, cfg.channel_outliers, cfg.channel_scale, "columns",
                                              seed=rng_ch.integers(2**31)) if cfg.channel_outliers else None
        self._eval = self._make(10**6)

    def inputs(self, step: int) -> np.ndarray:
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, 13, step])
        x = rng.standard_normal((cfg.batch, self.model_config.d_model))
        if self.channels is not None:
            x = inject_outliers(x, self.channels).astype(np.float64)
        if cfg.token_outliers:
            tok = OutlierProfile.random(cfg.batch, cfg.token_outliers, cfg.token_scale, "rows",
                                        seed=rng.integers(2**31))
            x = inject_outliers(x, tok).astype(np.float64)
        return x

    def _make(self, step: int):
        x = self.inputs(step)
        y, _ = self.teacher.forward(x)
        if self.cfg.noise:
            y = y + self.cfg.noise * np.random.default_rng([self.cfg.seed, 17, step]).standard_normal(y.shape)
        return x, y

    def batch(self, step: int):
        x, y = self._make(step)
        cfg = self.cfg
        if cfg.hard_tokens:
            rng = np.random.default_rng([cfg.seed, 23, step])
            rows = rng.choice(cfg.batch, size=cfg.hard_tokens, replace=False)
            y = y.copy()
            y[rows] += cfg.hard_scale * rng.standard_normal((cfg.hard_tokens, y.shape[1]))
        return x, y

    def eval_batch(self):
        return self._eval


def _reference_scheme():
    from ..halo_linear import HaloScheme

    return HaloScheme.preset("halo0", "identity")


_GLYPHS = {
    "A": ["..##....", ".#..#...", "#....#..", "#....#..", "######..", "#....#..", "#....#..", "........"],
    "B": ["#####...", "#....#..", "#....#..", "#####...", "#....#..", "#....#..", "#####...", "........"],
    "C": [".####...", "#....#..", "#.......", "#.......", "#.......", "#....#..", ".####...", "........"],
    "D": ["####....", "#...#...", "#....#..", "#....#..", "#....#..", "#...#...", "####....", "........"],
    "E": ["######..", "#.......", "#.......", "####....", "#.......", "#.......", "######..", "........"],
    "F": ["######..", "#.......", "#.......", "####....", "#.......", "#.......", "#.......", "........"],
    "H": ["#....#..", "#....#..", "#....#..", "######..", "#....#..", "#....#..", "#....#..", "........"],
    "L": ["#.......", "#.......", "#.......", "#.......", "#.......", "#.......", "######..", "........"],
    "O": [".####...", "#....#..", "#....#..", "#....#..", "#....#..", "#....#..", ".####...", "........"],
    "T": ["######..", "..#.....", "..#.....", "..#.....", "..#.....", "..#.....", "..#.....", "........"],
    "X": ["#....#..", ".#..#...", "..##....", "..##....", "..##....", ".#..#...", "#....#..", "........"],
    "Z": ["######..", ".....#..", "....#...", "...#....", "..#.....", ".#......", "######..", "........"],
}


def glyph_bitmaps() -> tuple[np.ndarray, list[str]]:
    names = sorted(_GLYPHS)
    bm = np.array([[[1.0 if c == "#" else 0.0 for c in row] for row in _GLYPHS[k]] for k in names])
    return bm.reshape(len(names), 64), names


class GlyphClassification(Dataset):
    """Noisy, randomly shifted 8x8 glyphs; inputs are 64-dimensional."""

    loss = "ce"

    def __init__(self, model_config: ModelConfig, cfg: DataConfig):
        if model_config.d_model != 64:
            raise ValueError("the glyph dataset needs d_model = 64")
        self.cfg = cfg
        self.bitmaps, self.names = glyph_bitmaps()
        if model_config.d_out < len(self.names):
            raise ValueError(f"the glyph dataset needs d_out >= {len(self.names)}")
        self.pretrained = None
        self._eval = self._make(10**6)

    def _make(self, step: int):
        rng = np.random.default_rng([self.cfg.seed, 19, step])
        labels = rng.integers(len(self.names), size=self.cfg.batch)
        imgs = self.bitmaps[labels].reshape(-1, 8, 8)
        shifts = rng.integers(0, 3, size=(self.cfg.batch, 2))
        imgs = np.stack([np.roll(im, tuple(s), axis=(0, 1)) for im, s in zip(imgs, shifts)])
        x = imgs.reshape(-1, 64) * 2.0 - 1.0 + 0.3 * rng.standard_normal((self.cfg.batch, 64))
        return x, labels

    def batch(self, step: int):
        return self._make(step)

    def eval_batch(self):
        return self._eval


def make_dataset(model_config: ModelConfig, cfg: DataConfig) -> Dataset:
    if cfg.name == "teacher":
        return TeacherRegression(model_config, cfg)
    if cfg.name == "glyphs":
        return GlyphClassification(model_config, cfg)
    raise ValueError(f"unknown dataset {cfg.name!r}")
