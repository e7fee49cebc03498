"""
Синтетические изображения в оттенках серого для desk-прогонов без
внешних наборов данных: кусочно-постоянные фигуры (эллипсы, повёрнутые
прямоугольники, полосы) на плавном фоне, слегка размытые.
"""
import logging
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import GrayImage, Seed, save_image
from .exceptions import DatasetError

logger = logging.getLogger(__name__)

SYNTH_TRAIN = 1
SYNTH_VAL = 2
EDGE_BLUR = 0.7


def _rotated(yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, phi: float) -> Tuple[np.ndarray, np.ndarray]:
    c, s = np.cos(phi), np.sin(phi)
    return (xx - cx) * c + (yy - cy) * s, -(xx - cx) * s + (yy - cy) * c


def synthetic_image(h: int, w: int, seed: Seed) -> GrayImage:
    """
    Детерминированное изображение h x w: одинаковый seed даёт одинаковые
    пиксели (целые, 0-255).
    """
    if h < 24 or w < 24:
        raise DatasetError(f"Синтетическое изображение должно быть не меньше 24x24, запрошено {h}x{w}")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    scale = float(max(h, w))

    along, _ = _rotated(yy, xx, 0.0, 0.0, rng.uniform(0, np.pi))
    img = rng.uniform(60, 190) + rng.uniform(-60, 60) * along / scale

    for _ in range(int(rng.integers(6, 13))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        level = rng.uniform(0, 255)
        shape = rng.integers(3)
        if shape == 0:
            ry, rx = rng.uniform(3, h / 3), rng.uniform(3, w / 3)
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        elif shape == 1:
            a, b = _rotated(yy, xx, cy, cx, rng.uniform(0, np.pi))
            mask = (np.abs(a) <= rng.uniform(2, w / 3)) & (np.abs(b) <= rng.uniform(2, h / 3))
        else:
            a, b = _rotated(yy, xx, cy, cx, rng.uniform(0, np.pi))
            period = rng.uniform(5, 14)
            mask = (np.hypot(a, b) <= rng.uniform(6, scale / 3)) & (np.sin(2 * np.pi * a / period) > 0)
        img = np.where(mask, level, img)

    img = gaussian_filter(img, sigma=EDGE_BLUR, mode="reflect")
    return GrayImage(np.clip(np.rint(img), 0, 255))


def write_synthetic_set(out_dir: Union[str, Path], train: int, val: int, size: Tuple[int, int],
                        seed: int = 0) -> Tuple[Path, Path]:
    """
    Пишет train_NNN.pgm / val_NNN.pgm и манифесты train.txt / val.txt
    (пути относительно каталога). Возвращает пути манифестов.
    """
    if train < 1 or val < 1:
        raise DatasetError(f"Нужно хотя бы по одному изображению, запрошено train={train}, val={val}")
    out = Path(out_dir)
    h, w = size
    manifests = []
    for role, stream, count in (("train", SYNTH_TRAIN, train), ("val", SYNTH_VAL, val)):
        names: List[str] = []
        for index in range(count):
            name = f"{role}_{index:03d}.pgm"
            save_image(synthetic_image(h, w, np.random.SeedSequence([seed, stream, index])), out / name)
            names.append(name)
        manifest = out / f"{role}.txt"
        manifest.write_text("\n".join(names) + "\n", encoding="utf-8")
        manifests.append(manifest)
    logger.info("Синтетический набор: %d обучающих и %d валидационных изображений %dx%d в %s",
                train, val, w, h, out)
    return manifests[0], manifests[1]
