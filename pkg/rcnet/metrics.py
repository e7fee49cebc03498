"""
Метрики качества восстановления (PSNR, SSIM) и статистики стабильности
обучения, а также отчёты в CSV и Markdown.
"""
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Mapping, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import gaussian_filter

from .exceptions import ShapeMismatchError

logger = logging.getLogger(__name__)

PEAK = 255.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
REPORT_COLUMNS = ("image", "psnr_db", "ssim", "runtime_s")


def _pixels(img) -> np.ndarray:
    return np.asarray(getattr(img, "pixels", img), dtype=np.float64)


def psnr(a, b, peak: float = PEAK) -> float:
    """
    10 * log10(peak^2 / MSE) в dB. Для совпадающих изображений - inf.
    """
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(a.shape, b.shape, "psnr")
    error = float(np.mean((a - b) ** 2))
    if error == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / error)


def ssim(a, b, peak: float = PEAK) -> float:
    """
    Средний локальный SSIM с гауссовым окном 11x11 (sigma 1.5); усреднение
    только по позициям, где окно целиком внутри изображения.
    """
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(a.shape, b.shape, "ssim")
    if a.ndim != 2 or min(a.shape) < SSIM_WINDOW:
        raise ShapeMismatchError(a.shape, (SSIM_WINDOW, SSIM_WINDOW), "ssim: изображение меньше окна")
    radius = SSIM_WINDOW // 2
    truncate = radius / SSIM_SIGMA

    def smooth(x: np.ndarray) -> np.ndarray:
        return gaussian_filter(x, SSIM_SIGMA, truncate=truncate)[radius:-radius, radius:-radius]

    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mu_a, mu_b = smooth(a), smooth(b)
    mu_aa, mu_bb, mu_ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    var_a = smooth(a * a) - mu_aa
    var_b = smooth(b * b) - mu_bb
    cov = smooth(a * b) - mu_ab
    numerator = (2 * mu_ab + c1) * (2 * cov + c2)
    denominator = (mu_aa + mu_bb + c1) * (var_a + var_b + c2)
    return min(float(np.mean(numerator / denominator)), 1.0)


# Стабильность обучения


@dataclass
class StabilitySeries:
    """
    Ряд loss по итерациям и скользящее выборочное стандартное отклонение.
    iterations[i] у std - итерация конца окна.
    """
    iterations: List[int]
    values: List[float]
    window: int
    std: List[float] = field(default_factory=list)
    std_iterations: List[int] = field(default_factory=list)


def rolling_std(series: Sequence[float], window: int,
                iterations: Optional[Sequence[int]] = None) -> StabilitySeries:
    values = np.asarray(series, dtype=np.float64)
    if window < 2:
        raise ValueError(f"Окно должно быть >= 2, получено {window}")
    if values.size < window:
        raise ValueError(f"Окно {window} больше длины ряда {values.size}")
    iterations = list(iterations) if iterations is not None else list(range(1, values.size + 1))
    if len(iterations) != values.size:
        raise ShapeMismatchError((len(iterations),), (values.size,), "итерации и значения ряда")
    std = sliding_window_view(values, window).std(axis=1, ddof=1)
    return StabilitySeries(
        iterations=iterations,
        values=values.tolist(),
        window=window,
        std=std.tolist(),
        std_iterations=iterations[window - 1:],
    )


def stability_summary(series: StabilitySeries, warmup: int = 0) -> float:
    """
    Среднее скользящее std по окнам, закончившимся после warmup.
    """
    kept = [s for it, s in zip(series.std_iterations, series.std) if it > warmup]
    if not kept:
        return math.nan
    return float(np.mean(kept))


def write_rolling_csv(series: Mapping[str, StabilitySeries], path: Union[str, Path]) -> None:
    names = list(series)
    grids = {tuple(s.std_iterations) for s in series.values()}
    if len(grids) != 1:
        raise ValueError("Ряды стабильности должны иметь одинаковую сетку итераций")
    grid = grids.pop()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["iter", *names])
        for i, iteration in enumerate(grid):
            writer.writerow([iteration, *(repr(series[n].std[i]) for n in names)])


# Отчёты о качестве


@dataclass
class ImageQuality:
    image: str
    psnr_db: float
    ssim: float
    runtime_s: float
    input_psnr_db: Optional[float] = None
    input_ssim: Optional[float] = None


@dataclass
class QualityReport:
    rows: List[ImageQuality] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def has_baseline(self) -> bool:
        return any(r.input_psnr_db is not None for r in self.rows)

    def mean(self, attr: str) -> float:
        values = [getattr(r, attr) for r in self.rows if getattr(r, attr) is not None]
        return float(np.mean(values)) if values else math.nan

    @property
    def mean_psnr(self) -> float:
        return self.mean("psnr_db")

    @property
    def mean_ssim(self) -> float:
        return self.mean("ssim")

    @property
    def mean_runtime(self) -> float:
        return self.mean("runtime_s")


def evaluate_image(name: str, restored, clean, runtime_s: float, corrupted=None) -> ImageQuality:
    """
    Метрики восстановленного изображения (уже обрезанного до [0, 255]) и,
    если передан вход сети, базовой линии по этому входу.
    """
    quality = ImageQuality(image=name, psnr_db=psnr(restored, clean), ssim=ssim(restored, clean),
                           runtime_s=runtime_s)
    if corrupted is not None:
        corrupted = np.clip(_pixels(corrupted), 0.0, PEAK)
        quality.input_psnr_db = psnr(corrupted, clean)
        quality.input_ssim = ssim(corrupted, clean)
    return quality


def evaluate_pairs(rows: Sequence[ImageQuality]) -> QualityReport:
    return QualityReport(rows=list(rows))


def _number(value: Optional[float]) -> str:
    if value is None:
        return ""
    return repr(float(value))


def write_report_csv(report: QualityReport, path: Union[str, Path]) -> None:
    columns = list(REPORT_COLUMNS)
    if report.has_baseline:
        columns += ["input_psnr_db", "input_ssim"]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for r in report.rows:
            row = [r.image, _number(r.psnr_db), _number(r.ssim), _number(r.runtime_s)]
            if report.has_baseline:
                row += [_number(r.input_psnr_db), _number(r.input_ssim)]
            writer.writerow(row)


def _cell(psnr_db: float, ssim_value: float, runtime: Optional[float] = None) -> str:
    text = f"{psnr_db:.2f} / {ssim_value:.4f}"
    if runtime is not None:
        text += f" / {runtime:.3f}"
    return text


def render_markdown_table(reports: Mapping[str, QualityReport], dataset: str = "images",
                          baseline: Optional[str] = None) -> str:
    """
    Сводная таблица "PSNR (dB) / SSIM / Time (s)": строка на метод.
    baseline - подпись строки для метрик входа сети (шумный/бикубический).
    """
    lines = [f"| method | {dataset}: PSNR (dB) / SSIM / Time (s) |", "|---|---|"]
    if baseline is not None:
        first = next(iter(reports.values()), None)
        if first is not None and first.has_baseline:
            lines.append(f"| {baseline} | {_cell(first.mean('input_psnr_db'), first.mean('input_ssim'))} / - |")
    for method, report in reports.items():
        lines.append(f"| {method} | {_cell(report.mean_psnr, report.mean_ssim, report.mean_runtime)} |")
    return "\n".join(lines) + "\n"


@dataclass
class AblationRow:
    key: float
    baseline: QualityReport
    with_bn: QualityReport
    without_bn: QualityReport


def render_ablation_table(rows: Sequence[AblationRow], key_name: str = "scale",
                          baseline_name: str = "bicubic") -> str:
    """
    Таблица абляции BN: ключ | вход | с BN | без BN, ячейки PSNR / SSIM.
    """
    lines = [
        f"| {key_name} | {baseline_name} | RC-Net with BN | RC-Net without BN |",
        "|---|---|---|---|",
    ]
    for row in rows:
        label = f"x{int(row.key)}" if key_name == "scale" else f"{row.key:g}"
        lines.append(
            f"| {label} | {_cell(row.baseline.mean('input_psnr_db'), row.baseline.mean('input_ssim'))} | "
            f"{_cell(row.with_bn.mean_psnr, row.with_bn.mean_ssim)} | "
            f"{_cell(row.without_bn.mean_psnr, row.without_bn.mean_ssim)} |"
        )
    return "\n".join(lines) + "\n"
