"""
Плотный 4-D тензор (batch, channel, height, width) в row-major раскладке.

Тензор представлен массивом numpy формы (N, C, H, W); плоский индекс
элемента (n, c, h, w) равен ((n*C + c)*H + h)*W + w. Точность задаётся во
время выполнения: single (float32) для обучения и инференса, double
(float64) для проверок градиентов.
"""
from typing import Tuple, Union

import numpy as np

from .exceptions import ShapeMismatchError
from .schemas import Precision

Shape4 = Tuple[int, int, int, int]

_DTYPES = {
    Precision.SINGLE: np.float32,
    Precision.DOUBLE: np.float64,
}


def dtype_of(precision: Union[Precision, str]) -> np.dtype:
    return np.dtype(_DTYPES[Precision(precision)])


def precision_of(x: np.ndarray) -> Precision:
    if x.dtype == np.float64:
        return Precision.DOUBLE
    if x.dtype == np.float32:
        return Precision.SINGLE
    raise TypeError(f"Неподдерживаемый тип данных тензора: {x.dtype}")


def zeros(n: int, c: int, h: int, w: int, precision: Union[Precision, str] = Precision.SINGLE) -> np.ndarray:
    dims = (n, c, h, w)
    if any(int(d) < 1 for d in dims):
        raise ValueError(f"Все размеры тензора должны быть >= 1, получено {dims}")
    # MemoryError от numpy при переполнении буфера пробрасываем как есть
    return np.zeros(dims, dtype=dtype_of(precision))


def zeros_like(x: np.ndarray) -> np.ndarray:
    return np.zeros_like(x)


def check_4d(x: np.ndarray, what: str = "тензор") -> Shape4:
    if x.ndim != 4:
        raise ShapeMismatchError(x.shape, ("N", "C", "H", "W"), what)
    return x.shape  # type: ignore[return-value]


def check_same(a: np.ndarray, b: np.ndarray, what: str = "тензоры") -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(a.shape, b.shape, what)
    if a.dtype != b.dtype:
        raise ShapeMismatchError(
            a.shape + (str(a.dtype),), b.shape + (str(b.dtype),), f"{what}, точность"
        )


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Поэлементная сумма - узел сложения каждого skip-соединения.
    """
    check_same(a, b, "слагаемые")
    return a + b


def mse(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ShapeMismatchError(a.shape, b.shape, "mse")
    diff = a.astype(np.float64) - b.astype(np.float64)
    return float(np.mean(diff * diff))


def flat_index(index: Tuple[int, int, int, int], shape: Shape4) -> int:
    n, c, h, w = index
    N, C, H, W = shape
    for i, d in zip(index, shape):
        if not 0 <= i < d:
            raise IndexError(f"Индекс {index} вне формы {shape}")
    return ((n * C + c) * H + h) * W + w


def unflat_index(flat: int, shape: Shape4) -> Tuple[int, int, int, int]:
    N, C, H, W = shape
    if not 0 <= flat < N * C * H * W:
        raise IndexError(f"Плоский индекс {flat} вне формы {shape}")
    flat, w = divmod(flat, W)
    flat, h = divmod(flat, H)
    n, c = divmod(flat, C)
    return n, c, h, w
