"""
Примитивы слоёв: свёртка, транспонированная свёртка, батч-нормализация,
PReLU (и ReLU для базовой сети WIN) - прямой проход, обратный проход и
инициализация параметров.

Соглашения:
    - свёртка - кросс-корреляция без переворота ядра;
    - шаг всегда 1, нулевое "same"-дополнение шириной (k-1)/2, поэтому
      пространственный размер сохраняется;
    - веса свёртки имеют форму (out, in, k, k), веса транспонированной
      свёртки - (in, out, k, k);
    - свёртка считается через im2col: одна матрица (C*k*k, N*H*W) на
      группу примеров и одно матричное умножение; размер групп зависит
      только от форм, градиенты весов групп суммируются строго по порядку,
      так что результат не зависит от числа потоков.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .dependencies import map_ordered, ordered_sum
from .exceptions import ShapeMismatchError, StateError
from .schemas import Activation, CompositeSpec, Mode, Precision
from .tensor import check_4d, dtype_of

logger = logging.getLogger(__name__)

LayerGrads = Dict[str, np.ndarray]

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
PRELU_INIT = 0.25
# Элементов в одной матрице im2col (около 64 МБ во float32)
IM2COL_BUDGET = 1 << 24


@dataclass
class ConvParams:
    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    transposed: bool = False

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ShapeMismatchError(self.weight.shape, ("A", "B", "k", "k"), "веса свёртки")
        if self.k % 2 == 0:
            raise ValueError(f"Размер ядра должен быть нечётным, получено k={self.k}")
        if self.bias is not None and self.bias.shape != (self.out_channels,):
            raise ShapeMismatchError(self.bias.shape, (self.out_channels,), "смещение свёртки")

    @property
    def k(self) -> int:
        return self.weight.shape[2]

    @property
    def pad(self) -> int:
        return (self.k - 1) // 2

    @property
    def in_channels(self) -> int:
        return self.weight.shape[0] if self.transposed else self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[1] if self.transposed else self.weight.shape[0]

    def buffers(self) -> Dict[str, np.ndarray]:
        result = {"weight": self.weight}
        if self.bias is not None:
            result["bias"] = self.bias
        return result


@dataclass
class BNParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM
    mode: Mode = Mode.TRAIN

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError(f"eps должен быть > 0, получено {self.eps}")
        shapes = {a.shape for a in (self.gamma, self.beta, self.running_mean, self.running_var)}
        if len(shapes) != 1:
            raise ShapeMismatchError(self.gamma.shape, self.running_var.shape, "параметры BN")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def buffers(self) -> Dict[str, np.ndarray]:
        return {"gamma": self.gamma, "beta": self.beta}

    def statistics(self) -> Dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}


@dataclass
class BNCache:
    """
    Статистики батча, сохранённые прямым проходом в режиме train.
    """
    x_hat: np.ndarray
    inv_std: np.ndarray
    mean: np.ndarray
    var: np.ndarray


@dataclass
class PReLUParams:
    slope: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.slope)):
            raise ValueError("Наклоны PReLU должны быть конечными")

    @property
    def channels(self) -> int:
        return self.slope.shape[0]

    def buffers(self) -> Dict[str, np.ndarray]:
        return {"slope": self.slope}


def _check_channels(x: np.ndarray, channels: int, what: str) -> None:
    check_4d(x, what)
    if x.shape[1] != channels:
        raise ShapeMismatchError((x.shape[1],), (channels,), f"{what}: число каналов")


def _check_grad(grad_out: np.ndarray, expected: Tuple[int, ...], what: str) -> None:
    if grad_out.shape != tuple(expected):
        raise ShapeMismatchError(grad_out.shape, expected, f"{what}: градиент выхода")


def batch_chunks(n: int, row_elements: int, budget: Optional[int] = None) -> List[slice]:
    """
    Делит батч из n примеров на группы подряд идущих примеров так, чтобы
    матрица im2col группы занимала не больше budget элементов. Разбиение
    зависит только от форм, а не от числа потоков.
    """
    budget = IM2COL_BUDGET if budget is None else budget
    per_chunk = max(1, budget // max(1, row_elements))
    return [slice(start, min(start + per_chunk, n)) for start in range(0, n, per_chunk)]


def im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    """
    Окна k x k батча (N, C, H, W) с нулевым дополнением одной непрерывной
    матрицей (C*k*k, N*H*W): строки в порядке (c, i, j), столбцы в
    порядке (n, h, w). Каждый сдвиг копируется целыми строками изображения.
    """
    n, c, h, w = x.shape
    padded = np.pad(x.transpose(1, 0, 2, 3), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((c, k, k, n, h, w), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = padded[:, :, i:i + h, j:j + w]
    return cols.reshape(c * k * k, n * h * w)


def _channel_rows(x: np.ndarray) -> np.ndarray:
    """
    (N, C, H, W) -> (C, N*H*W) в том же порядке столбцов, что и у im2col.
    """
    return x.transpose(1, 0, 2, 3).reshape(x.shape[1], -1)


def _from_channel_rows(rows: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    return np.ascontiguousarray(rows.reshape(-1, n, h, w).transpose(1, 0, 2, 3))


def _correlate(x: np.ndarray, weight: np.ndarray, pad: int) -> np.ndarray:
    """
    Кросс-корреляция группы примеров (N, C, H, W) с ядром (O, C, k, k):
    одно матричное умножение на всю группу; результат (N, O, H, W).
    """
    n, _, h, w = x.shape
    out = weight.reshape(weight.shape[0], -1) @ im2col(x, weight.shape[2], pad)
    return _from_channel_rows(out, n, h, w)


def _flip(weight: np.ndarray) -> np.ndarray:
    """
    Поворот ядра на 180 градусов с обменом осей каналов.
    """
    return np.ascontiguousarray(weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))


def _correlate_batch(x: np.ndarray, weight: np.ndarray, pad: int) -> np.ndarray:
    k = weight.shape[2]
    chunks = batch_chunks(x.shape[0], x.shape[1] * x.shape[2] * x.shape[3] * k * k)
    return np.concatenate(map_ordered(lambda s: _correlate(x[s], weight, pad), chunks))


def conv_forward(x: np.ndarray, p: ConvParams) -> np.ndarray:
    _check_channels(x, p.in_channels, "conv")
    if p.transposed:
        raise ValueError("conv_forward вызван для транспонированной свёртки")
    out = _correlate_batch(x, p.weight, p.pad)
    if p.bias is not None:
        out += p.bias[None, :, None, None]
    return out


def conv_backward(x: np.ndarray, p: ConvParams, grad_out: np.ndarray) -> Tuple[np.ndarray, LayerGrads]:
    _check_channels(x, p.in_channels, "conv")
    _check_grad(grad_out, (x.shape[0], p.out_channels, x.shape[2], x.shape[3]), "conv")
    k, pad = p.k, p.pad
    # Градиент по входу - корреляция с перевёрнутым и транспонированным ядром
    flipped = _flip(p.weight)
    elements = max(x.shape[1], p.out_channels) * x.shape[2] * x.shape[3] * k * k

    def per_chunk(s: slice):
        grad_w = _channel_rows(grad_out[s]) @ im2col(x[s], k, pad).T
        return _correlate(grad_out[s], flipped, pad), grad_w.reshape(p.weight.shape)

    parts = map_ordered(per_chunk, batch_chunks(x.shape[0], elements))
    grad_x = np.concatenate([gx for gx, _ in parts])
    grads = {"weight": ordered_sum(gw for _, gw in parts)}
    if p.bias is not None:
        grads["bias"] = grad_out.sum(axis=(0, 2, 3))
    return grad_x, grads


def tconv_forward(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """
    Транспонированная свёртка с шагом 1: каждый входной пиксель
    "разбрасывается" по окрестности k x k выхода. При шаге 1 это
    корреляция с повёрнутым ядром, у которого обменены оси каналов.
    """
    _check_channels(x, p.in_channels, "deconv")
    if not p.transposed:
        raise ValueError("tconv_forward вызван для обычной свёртки")
    out = _correlate_batch(x, _flip(p.weight), p.pad)
    if p.bias is not None:
        out += p.bias[None, :, None, None]
    return out


def tconv_backward(x: np.ndarray, p: ConvParams, grad_out: np.ndarray) -> Tuple[np.ndarray, LayerGrads]:
    _check_channels(x, p.in_channels, "deconv")
    _check_grad(grad_out, (x.shape[0], p.out_channels, x.shape[2], x.shape[3]), "deconv")
    k, pad = p.k, p.pad
    n, _, h, w = x.shape
    weight = p.weight.reshape(p.in_channels, -1)

    def per_chunk(s: slice):
        cols = im2col(grad_out[s], k, pad)
        grad_x = _from_channel_rows(weight @ cols, x[s].shape[0], h, w)
        grad_w = _channel_rows(x[s]) @ cols.T
        return grad_x, grad_w.reshape(p.weight.shape)

    parts = map_ordered(per_chunk, batch_chunks(n, p.out_channels * h * w * k * k))
    grad_x = np.concatenate([gx for gx, _ in parts])
    grads = {"weight": ordered_sum(gw for _, gw in parts)}
    if p.bias is not None:
        grads["bias"] = grad_out.sum(axis=(0, 2, 3))
    return grad_x, grads


def bn_forward(x: np.ndarray, p: BNParams) -> Tuple[np.ndarray, Optional[BNCache]]:
    """
    Батч-нормализация по осям (n, h, w) для каждого канала.

    В режиме train нормирует статистиками батча, обновляет скользящие
    статистики и возвращает кэш для обратного прохода. В режиме eval
    нормирует скользящими статистиками и кэш не возвращает.
    """
    _check_channels(x, p.channels, "bn")
    if p.mode == Mode.EVAL:
        inv_std = 1.0 / np.sqrt(p.running_var + p.eps)
        scale = (p.gamma * inv_std)[None, :, None, None]
        shift = (p.beta - p.gamma * p.running_mean * inv_std)[None, :, None, None]
        return (x * scale + shift).astype(x.dtype, copy=False), None

    count = x.shape[0] * x.shape[2] * x.shape[3]
    if count == 1:
        raise StateError("BN в режиме train: n*h*w == 1, дисперсия батча не определена")
    mean = x.mean(axis=(0, 2, 3))
    centered = x - mean[None, :, None, None]
    var = (centered * centered).mean(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + p.eps)
    x_hat = centered * inv_std[None, :, None, None]
    y = p.gamma[None, :, None, None] * x_hat + p.beta[None, :, None, None]

    m = p.momentum
    p.running_mean[...] = (1 - m) * p.running_mean + m * mean
    p.running_var[...] = (1 - m) * p.running_var + m * var
    return y, BNCache(x_hat=x_hat, inv_std=inv_std, mean=mean, var=var)


def bn_backward(x: np.ndarray, p: BNParams, grad_out: np.ndarray,
                cache: Optional[BNCache]) -> Tuple[np.ndarray, LayerGrads]:
    if cache is None:
        raise StateError("bn_backward без статистик батча: прямой проход не был выполнен в режиме train")
    _check_channels(x, p.channels, "bn")
    _check_grad(grad_out, x.shape, "bn")
    count = x.shape[0] * x.shape[2] * x.shape[3]
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * cache.x_hat).sum(axis=(0, 2, 3))
    # Полный градиент с учётом зависимости среднего и дисперсии батча от x
    coeff = (p.gamma * cache.inv_std / count)[None, :, None, None]
    grad_x = coeff * (
        count * grad_out
        - grad_beta[None, :, None, None]
        - cache.x_hat * grad_gamma[None, :, None, None]
    )
    return grad_x.astype(x.dtype, copy=False), {"gamma": grad_gamma, "beta": grad_beta}


def prelu_forward(x: np.ndarray, p: PReLUParams) -> np.ndarray:
    _check_channels(x, p.channels, "prelu")
    slope = p.slope[None, :, None, None]
    return np.where(x >= 0, x, slope * x)


def prelu_backward(x: np.ndarray, p: PReLUParams, grad_out: np.ndarray) -> Tuple[np.ndarray, LayerGrads]:
    _check_channels(x, p.channels, "prelu")
    _check_grad(grad_out, x.shape, "prelu")
    slope = p.slope[None, :, None, None]
    negative = x < 0
    grad_x = np.where(negative, slope * grad_out, grad_out)
    grad_slope = np.where(negative, x * grad_out, 0).sum(axis=(0, 2, 3)).astype(x.dtype, copy=False)
    return grad_x, {"slope": grad_slope}


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    _check_grad(grad_out, x.shape, "relu")
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


# Инициализация


def he_std(in_channels: int, k: int) -> float:
    fan_in = in_channels * k * k
    if fan_in <= 0:
        raise ValueError(f"fan_in должен быть > 0, получено {fan_in}")
    return float(np.sqrt(2.0 / fan_in))


def init_conv(in_channels: int, out_channels: int, k: int, bias: bool,
              rng: np.random.Generator, precision: Precision = Precision.SINGLE,
              transposed: bool = False) -> ConvParams:
    """
    Веса ~ N(0, sqrt(2 / fan_in)), fan_in = in_channels * k^2; смещения 0.
    """
    dtype = dtype_of(precision)
    shape = (in_channels, out_channels, k, k) if transposed else (out_channels, in_channels, k, k)
    weight = rng.normal(0.0, he_std(in_channels, k), size=shape).astype(dtype)
    return ConvParams(
        weight=weight,
        bias=np.zeros(out_channels, dtype=dtype) if bias else None,
        transposed=transposed,
    )


def init_bn(channels: int, precision: Precision = Precision.SINGLE) -> BNParams:
    dtype = dtype_of(precision)
    return BNParams(
        gamma=np.ones(channels, dtype=dtype),
        beta=np.zeros(channels, dtype=dtype),
        running_mean=np.zeros(channels, dtype=dtype),
        running_var=np.ones(channels, dtype=dtype),
    )


def init_prelu(channels: int, precision: Precision = Precision.SINGLE) -> PReLUParams:
    return PReLUParams(slope=np.full(channels, PRELU_INIT, dtype=dtype_of(precision)))


@dataclass
class CompositeParams:
    conv: ConvParams
    bn: Optional[BNParams] = None
    prelu: Optional[PReLUParams] = None


def init_params(spec: CompositeSpec, rng_seed, precision: Precision = Precision.SINGLE) -> CompositeParams:
    """
    Параметры составного блока по его описанию. rng_seed - целое число
    или уже созданный numpy Generator (так построитель сети ведёт один
    поток случайных чисел через все слои).
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    # Смещение свёртки избыточно, если за ней идёт BN (beta его поглощает)
    conv = init_conv(spec.in_channels, spec.out_channels, spec.k, bias=not spec.use_bn,
                     rng=rng, precision=precision)
    bn = init_bn(spec.out_channels, precision) if spec.use_bn else None
    prelu = init_prelu(spec.out_channels, precision) if spec.activation == Activation.PRELU else None
    return CompositeParams(conv=conv, bn=bn, prelu=prelu)
