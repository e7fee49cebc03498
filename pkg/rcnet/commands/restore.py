"""
Восстановление изображений обученной сетью и оценка качества.
"""
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import click
import numpy as np

from ..data import (
    STREAM_EVAL_NOISE,
    GrayImage,
    add_gaussian_noise,
    bicubic_resize,
    degrade_sr,
    from_tensor,
    load_image,
    read_manifest,
    resize_to,
    save_image,
    to_tensor,
)
from ..dependencies import get_network, map_ordered
from ..exceptions import ConfigError, ShapeMismatchError
from ..metrics import QualityReport, evaluate_image, evaluate_pairs, render_markdown_table, write_report_csv
from ..model import Network, restore
from ..schemas import SR_FACTORS, Task

logger = logging.getLogger(__name__)

REPORT_CSV = "report.csv"
REPORT_MD = "report.md"


@dataclass
class RestoreItem:
    """
    Вход сети и, если известен, чистый эталон того же размера.
    """
    name: str
    corrupted: GrayImage
    clean: Optional[GrayImage] = None
    suffix: str = ".png"


@dataclass
class RestoreResult:
    item: RestoreItem
    restored: GrayImage
    runtime_s: float


def restore_image(net: Network, img: GrayImage) -> Tuple[GrayImage, float]:
    """
    Прямой проход в режиме eval; результат обрезан до [0, 255] и
    округлён до целых, как при сохранении в 8-битный файл.
    """
    x0 = to_tensor(img).astype(net.dtype)
    started = time.perf_counter()
    out = restore(net, x0)
    runtime = time.perf_counter() - started
    return GrayImage(np.rint(from_tensor(out).pixels)), runtime


def restore_all(net: Network, items: Sequence[RestoreItem], threads: Optional[int] = None) -> List[RestoreResult]:
    net.eval_mode()

    def one(item: RestoreItem) -> RestoreResult:
        restored, runtime = restore_image(net, item.corrupted)
        return RestoreResult(item=item, restored=restored, runtime_s=runtime)

    # Порядок результатов совпадает с порядком входов
    return map_ordered(one, list(items), threads)


def quality_report(results: Sequence[RestoreResult]) -> QualityReport:
    rows = []
    for r in results:
        if r.item.clean is None:
            continue
        if r.item.clean.pixels.shape != r.restored.pixels.shape:
            raise ShapeMismatchError(r.item.clean.pixels.shape, r.restored.pixels.shape,
                                     f"эталон и результат {r.item.name}")
        rows.append(evaluate_image(r.item.name, r.restored, r.item.clean, r.runtime_s, r.item.corrupted))
    return evaluate_pairs(rows)


def save_results(results: Sequence[RestoreResult], out_dir: Path) -> List[Path]:
    paths = []
    for r in results:
        path = out_dir / f"{r.item.name}_restored{r.item.suffix}"
        save_image(r.restored, path)
        paths.append(path)
    return paths


def write_reports(report: QualityReport, out_dir: Path, method: str, baseline: str) -> str:
    write_report_csv(report, out_dir / REPORT_CSV)
    table = render_markdown_table({method: report}, dataset=f"{len(report)} images", baseline=baseline)
    (out_dir / REPORT_MD).write_text(table, encoding="utf-8")
    return table


def _suffix(path: Path) -> str:
    return path.suffix.lower() if path.suffix.lower() in (".pgm", ".png") else ".png"


def _references(inputs: Sequence[str], references: Sequence[str]) -> List[Optional[GrayImage]]:
    if references and len(references) != len(inputs):
        raise ConfigError(f"Число эталонов ({len(references)}) не совпадает с числом входов ({len(inputs)})")
    return [load_image(p) for p in references] if references else [None] * len(inputs)


def noisy_copy(img: GrayImage, sigma: float, seed: int, index: int) -> GrayImage:
    return add_gaussian_noise(img, sigma, np.random.SeedSequence([seed, STREAM_EVAL_NOISE, index]))


def _check_factor(factor: int) -> int:
    if factor not in SR_FACTORS:
        raise ConfigError(f"Масштаб должен быть одним из {SR_FACTORS}, получено {factor}")
    return factor


def parse_size(text: Optional[str]) -> Optional[Tuple[int, int]]:
    """
    "WxH" -> (h, w).
    """
    if text is None:
        return None
    try:
        width, height = (int(part) for part in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"Размер {text!r} должен иметь вид ШИРИНАxВЫСОТА, например 481x321") from None
    if width < 1 or height < 1:
        raise ConfigError(f"Размер {text!r} должен быть положительным")
    return height, width


def _finish(net: Network, items: List[RestoreItem], out_dir: str, method: str, baseline: str) -> None:
    out = Path(out_dir)
    results = restore_all(net, items)
    paths = save_results(results, out)
    for path in paths:
        click.echo(f"saved: {path}")
    report = quality_report(results)
    if len(report):
        click.echo(write_reports(report, out, method, baseline), nl=False)
        click.echo(f"report: {out / REPORT_CSV}")


@click.command("denoise")
@click.option("--checkpoint", required=True, help="Чекпоинт сети для денойзинга")
@click.option("--input", "inputs", multiple=True, required=True, help="Входное изображение (можно несколько)")
@click.option("--reference", "references", multiple=True, help="Чистый эталон для входа (в том же порядке)")
@click.option("--sigma", type=float, default=None,
              help="Считать входы чистыми: сначала добавить шум с этим sigma")
@click.option("--seed", type=int, default=0, help="Seed шума при --sigma")
@click.option("--out", "out_dir", required=True, help="Каталог результатов")
def denoise(checkpoint: str, inputs: Tuple[str, ...], references: Tuple[str, ...], sigma: Optional[float],
            seed: int, out_dir: str):
    """
    Подавляет шум на изображениях; с эталонами пишет отчёт PSNR/SSIM.
    """
    _, net = get_network(checkpoint, tasks=(Task.DENOISE,))
    if sigma is not None and references:
        raise ConfigError("--sigma и --reference взаимоисключающие: при --sigma эталоном служит вход")
    items = []
    refs = _references(inputs, references)
    for index, (path, ref) in enumerate(zip(inputs, refs)):
        img = load_image(path)
        if sigma is not None:
            items.append(RestoreItem(Path(path).stem, noisy_copy(img, sigma, seed, index), img, _suffix(Path(path))))
        else:
            items.append(RestoreItem(Path(path).stem, img, ref, _suffix(Path(path))))
    _finish(net, items, out_dir, "rcnet", "noisy input")


@click.command("superres")
@click.option("--checkpoint", required=True, help="Чекпоинт сети для суперразрешения")
@click.option("--input", "inputs", multiple=True, required=True, help="Входное изображение (можно несколько)")
@click.option("--reference", "references", multiple=True, help="HR-эталон для входа (в том же порядке)")
@click.option("--factor", type=int, required=True, help="Масштаб увеличения")
@click.option("--from-clean", is_flag=True,
              help="Считать входы HR-изображениями: сначала уменьшить и снова увеличить бикубически")
@click.option("--out", "out_dir", required=True, help="Каталог результатов")
def superres(checkpoint: str, inputs: Tuple[str, ...], references: Tuple[str, ...], factor: int,
             from_clean: bool, out_dir: str):
    """
    Увеличивает изображения в factor раз: бикубика, затем сеть.
    """
    ckpt, net = get_network(checkpoint, tasks=(Task.SR, Task.SR_BLIND))
    scale = _check_factor(factor)
    if ckpt.config.task == Task.SR and ckpt.config.corruption.scale != scale:
        logger.warning("Сеть обучена для x%s, запрошен x%d", ckpt.config.corruption.scale, scale)
    if from_clean and references:
        raise ConfigError("--from-clean и --reference взаимоисключающие: при --from-clean эталоном служит вход")
    items = []
    refs = _references(inputs, references)
    for path, ref in zip(inputs, refs):
        img = load_image(path)
        if from_clean:
            hr, upscaled = degrade_sr(img, scale)
            items.append(RestoreItem(Path(path).stem, upscaled, hr, _suffix(Path(path))))
        else:
            upscaled = bicubic_resize(img, img.h * scale, img.w * scale)
            items.append(RestoreItem(Path(path).stem, upscaled, ref, _suffix(Path(path))))
    _finish(net, items, out_dir, "rcnet", "bicubic")


@click.command("evaluate")
@click.option("--checkpoint", required=True, help="Чекпоинт сети")
@click.option("--manifest", required=True, help="Манифест чистых изображений")
@click.option("--sigma", type=float, default=None, help="Уровень шума (денойзинг)")
@click.option("--factor", type=int, default=None, help="Масштаб (суперразрешение)")
@click.option("--resize", default=None, help="Привести эталоны к размеру ШИРИНАxВЫСОТА, например 481x321")
@click.option("--seed", type=int, default=0, help="Seed шума")
@click.option("--out", "out_dir", required=True, help="Каталог результатов")
def evaluate(checkpoint: str, manifest: str, sigma: Optional[float], factor: Optional[int], resize: Optional[str],
             seed: int, out_dir: str):
    """
    Детерминированно искажает чистые изображения, восстанавливает их и
    сравнивает PSNR/SSIM входа и результата.
    """
    if (sigma is None) == (factor is None):
        raise ConfigError("Нужно указать ровно один из параметров --sigma или --factor")
    tasks = (Task.DENOISE,) if sigma is not None else (Task.SR, Task.SR_BLIND)
    _, net = get_network(checkpoint, tasks=tasks)
    size = parse_size(resize)

    items = []
    for index, path in enumerate(read_manifest(manifest)):
        img = load_image(path)
        if size is not None:
            img = resize_to(img, *size)
        if sigma is not None:
            items.append(RestoreItem(path.stem, noisy_copy(img, sigma, seed, index), img, _suffix(path)))
        else:
            hr, upscaled = degrade_sr(img, _check_factor(factor))
            items.append(RestoreItem(path.stem, upscaled, hr, _suffix(path)))
    _finish(net, items, out_dir, "rcnet", "noisy input" if sigma is not None else "bicubic")
