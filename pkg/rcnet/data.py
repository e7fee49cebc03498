"""
Конвейер данных: чтение/запись изображений, нарезка патчей, аугментация,
гауссов шум для денойзинга и бикубические пары LR/HR для
суперразрешения.

Пиксели хранятся на шкале 0-255 (шумные значения могут выходить за
границы). В сеть патчи попадают делёнными на 255.
"""
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np

from .exceptions import DatasetError, ImageFormatError
from .schemas import CorruptionKind, CorruptionSpec

logger = logging.getLogger(__name__)

PATCH_SIZE = 41
PATCH_STRIDE = 14
BICUBIC_A = -0.5

# Независимые потоки случайных чисел, выводимые из одного seed запуска
STREAM_TRAIN_NOISE = 1
STREAM_VAL_NOISE = 2
STREAM_EVAL_NOISE = 3

_PGM_HEADER = re.compile(
    rb"^(P5\s(?:\s*#.*[\r\n])*"
    rb"(\d+)\s(?:\s*#.*[\r\n])*"
    rb"(\d+)\s(?:\s*#.*[\r\n])*"
    rb"(\d+)\s)"
)
_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"

Seed = Union[int, Sequence[int], np.random.SeedSequence]


@dataclass
class GrayImage:
    """
    Одноканальное изображение, пиксели float64 на шкале 0-255.
    """
    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2 or self.pixels.size == 0:
            raise ImageFormatError(f"Ожидается непустое 2-D изображение, форма {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise ImageFormatError("Изображение содержит нечисловые значения")

    @property
    def h(self) -> int:
        return self.pixels.shape[0]

    @property
    def w(self) -> int:
        return self.pixels.shape[1]

    def clamped(self) -> "GrayImage":
        return GrayImage(np.clip(self.pixels, 0.0, 255.0))


@dataclass
class ImagePair:
    """
    Чистое изображение и его искажённая версия одного размера. key -
    sigma для шума или масштаб для SR. corrupted == None означает, что
    шум генерируется заново для каждого патча.
    """
    key: float
    clean: np.ndarray
    corrupted: Optional[np.ndarray] = None
    sigma: Optional[float] = None
    positions: List[Tuple[int, int]] = field(default_factory=list)


@dataclass
class PatchSource:
    image_id: str
    pairs: List[ImagePair]


@dataclass
class Provenance:
    image_id: str
    key: float
    top: int
    left: int
    flipped: bool


@dataclass
class Batch:
    """
    Батч пар патчей формы (N, 1, P, P) на шкале 0-1.
    """
    corrupted: np.ndarray
    clean: np.ndarray
    provenance: List[Provenance]


# Ввод-вывод изображений


def _luminance(bgr: np.ndarray) -> np.ndarray:
    # ITU-R BT.601; OpenCV хранит каналы в порядке BGR
    b, g, r = (bgr[..., i].astype(np.float64) for i in range(3))
    return np.rint(0.299 * r + 0.587 * g + 0.114 * b)


def _decode_pgm(buffer: bytes, path: Path) -> np.ndarray:
    match = _PGM_HEADER.search(buffer)
    if match is None:
        raise ImageFormatError(f"Не бинарный PGM (P5): {path}")
    header, width, height, maxval = match.groups()
    width, height, maxval = int(width), int(height), int(maxval)
    if width < 1 or height < 1:
        raise ImageFormatError(f"Некорректные размеры PGM {width}x{height}: {path}")
    if maxval > 255:
        raise ImageFormatError(f"Поддерживается только 8-битный PGM (maxval {maxval}): {path}")
    count = width * height
    if len(buffer) - len(header) < count:
        raise ImageFormatError(
            f"Файл обрезан: ожидалось {count} байт данных, есть {len(buffer) - len(header)}: {path}"
        )
    data = np.frombuffer(buffer, dtype=np.uint8, count=count, offset=len(header))
    return data.reshape(height, width).astype(np.float64)


def _decode_png(buffer: bytes, path: Path) -> np.ndarray:
    decoded = cv2.imdecode(np.frombuffer(buffer, dtype=np.uint8), cv2.IMREAD_UNCHANGED)
    if decoded is None:
        raise ImageFormatError(f"Не удалось декодировать PNG (повреждён или обрезан): {path}")
    if decoded.dtype != np.uint8:
        raise ImageFormatError(f"Поддерживается только 8-битный PNG ({decoded.dtype}): {path}")
    if decoded.ndim == 2:
        return decoded.astype(np.float64)
    if decoded.shape[2] == 1:
        return decoded[..., 0].astype(np.float64)
    # BGRA: альфа-канал игнорируется
    return _luminance(decoded[..., :3])


def load_image(path: Union[str, Path]) -> GrayImage:
    path = Path(path)
    try:
        buffer = path.read_bytes()
    except OSError as e:
        raise ImageFormatError(f"Не удалось прочитать {path}: {e.strerror or e}") from None
    if buffer.startswith(b"P5"):
        return GrayImage(_decode_pgm(buffer, path))
    if buffer.startswith(_PNG_SIGNATURE):
        return GrayImage(_decode_png(buffer, path))
    raise ImageFormatError(f"Неподдерживаемый формат (нужен PGM P5 или PNG): {path}")


def save_image(img: GrayImage, path: Union[str, Path]) -> None:
    """
    Сохраняет изображение, предварительно обрезав значения до [0, 255]
    и округлив до целых.
    """
    path = Path(path)
    data = np.rint(np.clip(img.pixels, 0.0, 255.0)).astype(np.uint8)
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        payload = f"P5\n{img.w} {img.h}\n255\n".encode("ascii") + data.tobytes()
    elif suffix == ".png":
        ok, encoded = cv2.imencode(".png", data)
        if not ok:
            raise ImageFormatError(f"Не удалось закодировать PNG: {path}")
        payload = encoded.tobytes()
    else:
        raise ImageFormatError(f"Неподдерживаемое расширение {suffix!r} (нужно .pgm или .png): {path}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload)


def read_manifest(path: Union[str, Path]) -> List[Path]:
    """
    Манифест: один путь к изображению на строку, '#' начинает комментарий.
    Относительные пути считаются от каталога манифеста.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DatasetError(f"Не удалось прочитать манифест {path}: {e.strerror or e}") from None
    result = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        item = Path(line)
        result.append(item if item.is_absolute() else path.parent / item)
    if not result:
        raise DatasetError(f"Манифест пуст: {path}")
    return result


def load_manifest_images(path: Union[str, Path]) -> List[Tuple[str, GrayImage]]:
    return [(item.stem, load_image(item)) for item in read_manifest(path)]


# Патчи и аугментация


def extract_patches(img: Union[GrayImage, Tuple[int, int]], size: int = PATCH_SIZE,
                    stride: int = PATCH_STRIDE) -> List[Tuple[int, int]]:
    h, w = (img.h, img.w) if isinstance(img, GrayImage) else img
    if h < size or w < size:
        raise DatasetError(f"Изображение {h}x{w} меньше патча {size}x{size}")
    if stride < 1:
        raise ValueError(f"stride должен быть >= 1, получено {stride}")
    return [(top, left) for top in range(0, h - size + 1, stride) for left in range(0, w - size + 1, stride)]


def patch_count(h: int, w: int, size: int, stride: int) -> int:
    return ((h - size) // stride + 1) * ((w - size) // stride + 1)


def augment(patch: np.ndarray, flip: bool) -> np.ndarray:
    """
    Горизонтальное отражение (по последней оси) при flip.
    """
    return patch[..., ::-1].copy() if flip else patch


# Искажения


def _rng(seed: Seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def add_gaussian_noise(img: GrayImage, sigma: float, rng_seed: Seed) -> GrayImage:
    """
    out = in + sigma * N(0, 1), без обрезки до [0, 255].
    """
    if sigma <= 0:
        raise ValueError(f"sigma должен быть > 0, получено {sigma}")
    noise = _rng(rng_seed).standard_normal(img.pixels.shape)
    return GrayImage(img.pixels + sigma * noise)


def cubic_kernel(t: np.ndarray, a: float = BICUBIC_A) -> np.ndarray:
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def resize_matrix(in_size: int, out_size: int) -> np.ndarray:
    """
    Матрица (out, in) одномерной бикубической интерполяции с
    центрированным отображением src = (dst + 0.5) * scale - 0.5 и
    повтором краевых пикселей.
    """
    scale = in_size / out_size
    src = (np.arange(out_size) + 0.5) * scale - 0.5
    base = np.floor(src).astype(np.int64)
    matrix = np.zeros((out_size, in_size), dtype=np.float64)
    rows = np.arange(out_size)
    for offset in (-1, 0, 1, 2):
        index = base + offset
        weight = cubic_kernel(src - index)
        np.add.at(matrix, (rows, np.clip(index, 0, in_size - 1)), weight)
    return matrix


def bicubic_resize(img: GrayImage, out_h: int, out_w: int) -> GrayImage:
    if out_h < 1 or out_w < 1:
        raise ValueError(f"Размеры результата должны быть >= 1, получено {out_h}x{out_w}")
    rows = resize_matrix(img.h, out_h)
    cols = resize_matrix(img.w, out_w)
    return GrayImage(rows @ img.pixels @ cols.T)


def resize_to(img: GrayImage, h: int, w: int) -> GrayImage:
    if (img.h, img.w) == (h, w):
        return img
    return bicubic_resize(img, h, w)


def crop_to_multiple(img: GrayImage, factor: int) -> GrayImage:
    h, w = img.h - img.h % factor, img.w - img.w % factor
    if h < 1 or w < 1:
        raise DatasetError(f"Изображение {img.h}x{img.w} меньше масштаба {factor}")
    return GrayImage(img.pixels[:h, :w])


def degrade_sr(img: GrayImage, factor: int) -> Tuple[GrayImage, GrayImage]:
    """
    (HR, вход сети): HR обрезается до кратного factor, затем
    бикубически уменьшается и снова увеличивается до размера HR.
    """
    if factor not in (2, 3, 4):
        raise ValueError(f"Масштаб должен быть 2, 3 или 4, получено {factor}")
    hr = crop_to_multiple(img, factor)
    lr = bicubic_resize(hr, hr.h // factor, hr.w // factor)
    return hr, bicubic_resize(lr, hr.h, hr.w)


def make_sr_pair(img: GrayImage, factor: int) -> ImagePair:
    hr, upscaled = degrade_sr(img, factor)
    return ImagePair(key=factor, clean=hr.pixels, corrupted=upscaled.pixels)


def build_sources(images: Sequence[Tuple[str, GrayImage]], corruption: CorruptionSpec, seed: int,
                  patch_size: int = PATCH_SIZE, stride: int = PATCH_STRIDE,
                  resample_noise: Optional[bool] = None) -> List[PatchSource]:
    """
    Источники патчей для обучения. Для шума с resample_noise искажение не
    материализуется: шум генерируется для каждого патча заново.
    """
    if not images:
        raise DatasetError("Нет изображений для обучения")
    if resample_noise is None:
        resample_noise = corruption.resample_noise
    sources = []
    for index, (image_id, img) in enumerate(images):
        pairs: List[ImagePair] = []
        if corruption.kind == CorruptionKind.GAUSSIAN_NOISE:
            sigma = float(corruption.sigma)
            noisy = None
            if not resample_noise:
                seed_seq = np.random.SeedSequence([seed, STREAM_TRAIN_NOISE, index])
                noisy = add_gaussian_noise(img, sigma, seed_seq).pixels
            pairs.append(ImagePair(key=sigma, clean=img.pixels, corrupted=noisy, sigma=sigma))
        else:
            pairs.extend(make_sr_pair(img, factor) for factor in corruption.keys())
        for pair in pairs:
            pair.positions = extract_patches(pair.clean.shape, patch_size, stride)
        sources.append(PatchSource(image_id=image_id, pairs=pairs))
    return sources


def validation_pairs(images: Sequence[Tuple[str, GrayImage]], corruption: CorruptionSpec,
                     seed: int) -> List[Tuple[str, ImagePair]]:
    """
    Полноразмерные пары для валидации; шум фиксирован seed-ом запуска.
    """
    result = []
    for index, (image_id, img) in enumerate(images):
        if corruption.kind == CorruptionKind.GAUSSIAN_NOISE:
            sigma = float(corruption.sigma)
            seed_seq = np.random.SeedSequence([seed, STREAM_VAL_NOISE, index])
            noisy = add_gaussian_noise(img, sigma, seed_seq)
            result.append((image_id, ImagePair(key=sigma, clean=img.pixels, corrupted=noisy.pixels, sigma=sigma)))
        else:
            for factor in corruption.keys():
                result.append((f"{image_id}_x{factor}", make_sr_pair(img, int(factor))))
    return result


# Батчи


def sample_batch(sources: Sequence[PatchSource], batch_size: int, rng_seed: int, iteration: int,
                 patch_size: int = PATCH_SIZE) -> Batch:
    """
    Детерминированная функция (sources, seed, iteration): случайный
    источник, случайная пара (масштаб в слепом режиме), случайная позиция
    сетки и случайное отражение для каждого патча.
    """
    if not sources:
        raise DatasetError("Нет источников патчей")
    rng = _rng([rng_seed, iteration])
    corrupted = np.empty((batch_size, 1, patch_size, patch_size), dtype=np.float64)
    clean = np.empty_like(corrupted)
    provenance = []
    for i in range(batch_size):
        source = sources[int(rng.integers(len(sources)))]
        pair = source.pairs[int(rng.integers(len(source.pairs)))]
        top, left = pair.positions[int(rng.integers(len(pair.positions)))]
        flip = bool(rng.random() < 0.5)
        window = (slice(top, top + patch_size), slice(left, left + patch_size))
        clean_patch = pair.clean[window]
        if pair.corrupted is None:
            noisy_patch = clean_patch + pair.sigma * rng.standard_normal(clean_patch.shape)
        else:
            noisy_patch = pair.corrupted[window]
        clean[i, 0] = augment(clean_patch, flip)
        corrupted[i, 0] = augment(noisy_patch, flip)
        provenance.append(Provenance(source.image_id, pair.key, top, left, flip))
    return Batch(corrupted=corrupted / 255.0, clean=clean / 255.0, provenance=provenance)


class PatchDataset:
    """
    Неизменяемый набор источников патчей; sample безопасен для вызова из
    нескольких потоков.
    """

    def __init__(self, sources: Sequence[PatchSource], patch_size: int = PATCH_SIZE):
        self.sources = list(sources)
        self.patch_size = patch_size

    def __len__(self) -> int:
        return len(self.sources)

    def sample(self, batch_size: int, seed: int, iteration: int) -> Batch:
        return sample_batch(self.sources, batch_size, seed, iteration, self.patch_size)

    def patch_total(self) -> int:
        return sum(len(pair.positions) for source in self.sources for pair in source.pairs)


def to_tensor(img: Union[GrayImage, np.ndarray]) -> np.ndarray:
    pixels = img.pixels if isinstance(img, GrayImage) else img
    return (pixels / 255.0)[None, None]


def from_tensor(x: np.ndarray) -> GrayImage:
    """
    Выход сети (1, 1, H, W) на шкале 0-1 -> изображение 0-255, обрезанное
    до допустимого диапазона.
    """
    return GrayImage(np.clip(np.asarray(x, dtype=np.float64)[0, 0] * 255.0, 0.0, 255.0))
