import logging
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Tuple

import numpy as np
import pytest

from rcnet.data import GrayImage, save_image
from rcnet.schemas import NetConfig, Precision, RCBlockSpec

FD_STEP = 1e-5


def numeric_grad(fn: Callable[[], float], x: np.ndarray,
                 indices: Optional[Iterable[Tuple[int, ...]]] = None) -> np.ndarray:
    """
    Центральные разности скалярной функции fn по массиву x (x меняется на
    месте и восстанавливается). Шаг 1e-5 * (|x| + 1). Если indices заданы,
    считаются только эти элементы, остальные остаются нулями.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    for index in (indices if indices is not None else np.ndindex(x.shape)):
        original = x[index]
        step = FD_STEP * (abs(original) + 1.0)
        x[index] = original + step
        plus = fn()
        x[index] = original - step
        minus = fn()
        x[index] = original
        grad[index] = (plus - minus) / (2 * step)
    return grad


def rel_error(numeric: np.ndarray, analytic: np.ndarray) -> float:
    numeric = np.asarray(numeric, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    scale = max(np.linalg.norm(numeric), np.linalg.norm(analytic), 1e-12)
    return float(np.linalg.norm(numeric - analytic) / scale)


def sample_indices(shape: Tuple[int, ...], count: int, rng: np.random.Generator) -> List[Tuple[int, ...]]:
    total = int(np.prod(shape))
    chosen = rng.choice(total, size=min(count, total), replace=False)
    return [np.unravel_index(int(i), shape) for i in chosen]


def tiny_net_config(**updates) -> NetConfig:
    """
    Крошечная RC-Net для проверок градиента: 1 блок ширины 4, фильтры 5/3.
    """
    values = dict(
        n_dense=4,
        k_dense=5,
        num_blocks=1,
        block=RCBlockSpec(width=4, k_large=5, k_small=3),
        desk_scale=True,
        precision=Precision.DOUBLE,
    )
    values.update(updates)
    return NetConfig(**values)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


def smooth_image(rng: np.random.Generator, h: int, w: int) -> GrayImage:
    """
    Гладкое изображение с текстурой: градиент, синусоиды и немного шума.
    """
    yy, xx = np.mgrid[0:h, 0:w]
    base = 60 + 0.3 * xx + 0.2 * yy
    waves = 40 * np.sin(xx / 5.0 + rng.uniform(0, 3)) * np.cos(yy / 7.0)
    return GrayImage(np.clip(np.rint(base + waves + rng.normal(0, 3, (h, w))), 0, 255))


@pytest.fixture
def image_dir(tmp_path: Path, rng: np.random.Generator) -> Path:
    """
    Каталог с обучающими и валидационными PGM и манифестами train.txt/val.txt.
    """
    root = tmp_path / "images"
    train_names, val_names = [], []
    for i in range(3):
        name = f"train_{i}.pgm"
        save_image(smooth_image(rng, 48, 56), root / name)
        train_names.append(name)
    for i in range(2):
        name = f"val_{i}.pgm"
        save_image(smooth_image(rng, 44, 44), root / name)
        val_names.append(name)
    (root / "train.txt").write_text("# обучающие\n" + "\n".join(train_names) + "\n")
    (root / "val.txt").write_text("\n".join(val_names) + "\n")
    return root


def write_config(path: Path, image_dir: Path, out_dir: Path, task: str = "denoise", extra: str = "") -> Path:
    corruption = {
        "denoise": "corruption.kind = gaussian_noise\ncorruption.sigma = 25\n",
        "sr": "corruption.kind = sr\ncorruption.scale = 2\n",
        "sr_blind": "corruption.kind = sr_blind\ncorruption.scales = 2,3,4\n",
    }[task]
    path.write_text(
        f"task = {task}\n"
        "seed = 3\n"
        f"out_dir = {out_dir}\n"
        "net.n_dense = 4\n"
        "net.k_dense = 5\n"
        "net.num_blocks = 1\n"
        "net.block.width = 4\n"
        "net.block.k_large = 5\n"
        "net.block.k_small = 3\n"
        "net.desk_scale = true\n"
        "optim.lr0 = 0.01\n"
        "optim.batch_size = 2\n"
        "optim.max_iters = 3\n"
        f"{corruption}"
        f"data.train_manifest = {image_dir / 'train.txt'}\n"
        f"data.val_manifest = {image_dir / 'val.txt'}\n"
        "data.patch_size = 21\n"
        "data.stride = 7\n"
        "log_every = 1\n"
        f"{extra}"
    )
    return path


@pytest.fixture(autouse=True)
def reset_logging():
    yield
    # CLI настраивает логгер пакета на поток CliRunner, который закрывается после вызова
    root = logging.getLogger("rcnet")
    for handler in list(root.handlers):
        root.removeHandler(handler)
    root.propagate = True
    root.setLevel(logging.NOTSET)
