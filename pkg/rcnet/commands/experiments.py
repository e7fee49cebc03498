"""
Экспериментальные сценарии: сравнение стабильности обучения вариантов
архитектуры и абляция батч-нормализации.
"""
import csv
import logging
import shutil
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import click

from ..data import GrayImage, degrade_sr, load_manifest_images
from ..dependencies import get_config
from ..exceptions import ConfigError
from ..metrics import (
    AblationRow,
    StabilitySeries,
    render_ablation_table,
    rolling_std,
    stability_summary,
    write_rolling_csv,
)
from ..model import VARIANTS, Network, variant_config
from ..schemas import CorruptionKind, RunConfig
from .restore import RestoreItem, noisy_copy, quality_report, restore_all
from .train import LOG_FILE, load_training_data, run_training

logger = logging.getLogger(__name__)

DEFAULT_VARIANTS = ("rcnet", "win", "rcnet-no2nd")
ROLLING_CSV = "rolling_std.csv"
SUMMARY_CSV = "stability_summary.csv"
PLOT_FILE = "stability.png"


def plot_stability(series: Dict[str, StabilitySeries], path: Path) -> bool:
    """
    Кривые loss и скользящего std по вариантам. Возвращает False, если
    matplotlib недоступен.
    """
    try:
        import matplotlib as mpl
        mpl.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        logger.warning("matplotlib недоступен, график %s не построен", path)
        return False

    fig, (ax_loss, ax_std) = plt.subplots(nrows=2, ncols=1, sharex=True, figsize=(7, 6))
    for name, s in series.items():
        ax_loss.plot(s.iterations, s.values, label=name, linewidth=0.8)
        ax_std.plot(s.std_iterations, s.std, label=name, linewidth=0.8)
    ax_loss.set_yscale("log")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_std.set_yscale("log")
    ax_std.set_xlabel("iteration")
    ax_std.set_ylabel(f"rolling std (window {next(iter(series.values())).window})")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True


def run_stability(config: RunConfig, variants: Sequence[str], window: int, warmup: int,
                  metric: str = "train_loss") -> Dict[str, StabilitySeries]:
    """
    Обучает варианты на одном и том же потоке батчей и считает скользящее
    std выбранного ряда (train_loss или val_loss).
    """
    for variant in variants:
        if variant not in VARIANTS:
            raise ConfigError(f"Неизвестный вариант {variant!r}, допустимы: {', '.join(VARIANTS)}")
    if metric == "train_loss" and window > config.optim.max_iters:
        raise ConfigError(f"Окно {window} больше числа итераций {config.optim.max_iters}")

    out = Path(config.out_dir)
    dataset, validation = load_training_data(config)
    series: Dict[str, StabilitySeries] = {}
    summary_rows = []
    for variant in variants:
        run = config.model_copy(update={
            "net": variant_config(config.net, variant),
            "out_dir": str(out / variant),
        })
        logger.info("Вариант %s", variant)
        result = run_training(run, dataset=dataset, validation=validation)
        shutil.copyfile(result.out_dir / LOG_FILE, out / f"{variant}.csv")

        if metric == "val_loss":
            entries = result.log.validated()
            values = [e.val_loss for e in entries]
            iterations = [e.iteration for e in entries]
        else:
            values = result.log.train_losses()
            iterations = result.log.iterations()
        if len(values) < window:
            raise ConfigError(f"Ряд {metric} варианта {variant} короче окна {window} ({len(values)} точек)")
        series[variant] = rolling_std(values, window, iterations)
        summary_rows.append([
            variant, result.net.param_count(), repr(values[-1]),
            repr(stability_summary(series[variant], warmup)),
        ])

    write_rolling_csv(series, out / ROLLING_CSV)
    with (out / SUMMARY_CSV).open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["variant", "params", f"final_{metric}", "mean_rolling_std"])
        writer.writerows(summary_rows)
    plot_stability(series, out / PLOT_FILE)
    return series


@click.command("stability")
@click.option("--config", "config_path", required=True, help="Базовая конфигурация (desk_stability.cfg)")
@click.option("--variant", "variants", multiple=True, help=f"Вариант архитектуры: {', '.join(VARIANTS)}")
@click.option("--iters", type=int, default=None, help="Переопределить optim.max_iters")
@click.option("--seed", type=int, default=None, help="Переопределить seed")
@click.option("--out", "out_dir", default=None, help="Каталог результатов")
@click.option("--window", type=int, default=50, help="Окно скользящего std")
@click.option("--warmup", type=int, default=None, help="Итерации, исключаемые из сводки (по умолчанию 1/5 запуска)")
@click.option("--metric", type=click.Choice(["train_loss", "val_loss"]), default="train_loss")
@click.option("--set", "sets", multiple=True, metavar="KEY=VALUE", help="Переопределить поле конфигурации")
def stability(config_path: str, variants: Tuple[str, ...], iters: Optional[int], seed: Optional[int],
              out_dir: Optional[str], window: int, warmup: Optional[int], metric: str, sets: Tuple[str, ...]):
    """
    Сравнение стабильности обучения вариантов на одинаковых данных.
    """
    config = get_config(config_path, sets, seed=seed, out_dir=out_dir, optim__max_iters=iters)
    if warmup is None:
        warmup = config.optim.max_iters // 5
    series = run_stability(config, variants or DEFAULT_VARIANTS, window, warmup, metric)
    for name, s in series.items():
        click.echo(f"{name}: mean rolling std after {warmup} = {stability_summary(s, warmup):.6g}")
    click.echo(f"rolling std: {Path(config.out_dir) / ROLLING_CSV}")


# Абляция BN


def evaluation_items(images: Sequence[Tuple[str, GrayImage]], config: RunConfig, key: float) -> List[RestoreItem]:
    items = []
    for index, (name, img) in enumerate(images):
        if config.corruption.kind == CorruptionKind.GAUSSIAN_NOISE:
            items.append(RestoreItem(name, noisy_copy(img, key, config.seed, index), img))
        else:
            hr, upscaled = degrade_sr(img, int(key))
            items.append(RestoreItem(name, upscaled, hr))
    return items


def run_ablation(config: RunConfig) -> List[AblationRow]:
    """
    Обучает одну и ту же конфигурацию с BN и без BN и оценивает обе сети
    на валидационном манифесте для каждого ключа искажения.
    """
    if not config.data.val_manifest:
        raise ConfigError("Для абляции нужен data.val_manifest", field="data.val_manifest")
    out = Path(config.out_dir)
    dataset, validation = load_training_data(config)
    images = load_manifest_images(config.data.val_manifest)
    if config.data.val_max_images:
        images = images[:config.data.val_max_images]

    nets: Dict[bool, Network] = {}
    for use_bn in (True, False):
        name = "bn" if use_bn else "nobn"
        run = config.model_copy(update={
            "net": config.net.model_copy(update={"use_bn": use_bn}),
            "out_dir": str(out / name),
        })
        logger.info("Абляция: %s", name)
        nets[use_bn] = run_training(run, dataset=dataset, validation=validation).net

    rows = []
    for key in config.corruption.keys():
        items = evaluation_items(images, config, key)
        reports = {use_bn: quality_report(restore_all(net, items)) for use_bn, net in nets.items()}
        rows.append(AblationRow(key=key, baseline=reports[True], with_bn=reports[True], without_bn=reports[False]))
    return rows


def write_ablation(rows: Sequence[AblationRow], out: Path, key_name: str) -> str:
    baseline_name = "noisy" if key_name == "sigma" else "bicubic"
    table = render_ablation_table(rows, key_name=key_name, baseline_name=baseline_name)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.md").write_text(table, encoding="utf-8")
    with (out / "ablation.csv").open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow([key_name, "variant", "psnr_db", "ssim"])
        for row in rows:
            for variant, report, psnr_attr, ssim_attr in (
                (baseline_name, row.baseline, "input_psnr_db", "input_ssim"),
                ("with_bn", row.with_bn, "psnr_db", "ssim"),
                ("without_bn", row.without_bn, "psnr_db", "ssim"),
            ):
                writer.writerow([repr(row.key), variant, repr(report.mean(psnr_attr)), repr(report.mean(ssim_attr))])
    return table


@click.command("ablation")
@click.option("--config", "config_path", required=True, help="Конфигурация (desk_sr.cfg)")
@click.option("--iters", type=int, default=None, help="Переопределить optim.max_iters")
@click.option("--seed", type=int, default=None, help="Переопределить seed")
@click.option("--out", "out_dir", default=None, help="Каталог результатов")
@click.option("--set", "sets", multiple=True, metavar="KEY=VALUE", help="Переопределить поле конфигурации")
def ablation(config_path: str, iters: Optional[int], seed: Optional[int], out_dir: Optional[str],
             sets: Tuple[str, ...]):
    """
    Абляция батч-нормализации: одна конфигурация с BN и без BN.
    """
    config = get_config(config_path, sets, seed=seed, out_dir=out_dir, optim__max_iters=iters)
    rows = run_ablation(config)
    key_name = "sigma" if config.corruption.kind == CorruptionKind.GAUSSIAN_NOISE else "scale"
    click.echo(write_ablation(rows, Path(config.out_dir), key_name), nl=False)
