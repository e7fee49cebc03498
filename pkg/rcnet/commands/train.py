import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import click

from ..checkpoint import load_checkpoint, save_checkpoint
from ..config import serialize_config
from ..data import ImagePair, PatchDataset, build_sources, load_manifest_images, validation_pairs
from ..dependencies import get_config
from ..exceptions import CheckpointError
from ..model import Network, build
from ..optim import SGDState, TrainLog, train as train_network
from ..schemas import RunConfig

logger = logging.getLogger(__name__)

FINAL_CHECKPOINT = "final.rcn"
LOG_FILE = "train_log.csv"
CONFIG_FILE = "config.cfg"


@dataclass
class TrainingResult:
    net: Network
    log: TrainLog
    out_dir: Path
    checkpoint: Path


def load_training_data(config: RunConfig) -> Tuple[PatchDataset, Optional[List[Tuple[str, ImagePair]]]]:
    """
    Патчи для обучения и (если задан манифест) пары для валидации.
    """
    images = load_manifest_images(config.data.train_manifest)
    sources = build_sources(images, config.corruption, config.seed,
                            config.data.patch_size, config.data.stride)
    dataset = PatchDataset(sources, config.data.patch_size)
    logger.debug("Обучающий набор: %d изображений, %d позиций патчей", len(images), dataset.patch_total())

    validation = None
    if config.data.val_manifest:
        val_images = load_manifest_images(config.data.val_manifest)
        if config.data.val_max_images:
            val_images = val_images[:config.data.val_max_images]
        validation = validation_pairs(val_images, config.corruption, config.seed)
    return dataset, validation


def checkpoint_name(iteration: int) -> str:
    return f"checkpoint_{iteration:07d}.rcn"


def run_training(config: RunConfig, resume: Optional[str] = None, progress: bool = False,
                 dataset: Optional[PatchDataset] = None,
                 validation: Optional[Sequence[Tuple[str, ImagePair]]] = None) -> TrainingResult:
    """
    Полный запуск обучения: данные, сеть (новая или из чекпоинта),
    периодические чекпоинты, итоговый чекпоинт, журнал и копия конфигурации
    в out_dir.
    """
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if dataset is None:
        dataset, validation = load_training_data(config)

    net = build(config.net, config.seed)
    state = SGDState()
    previous = TrainLog()
    if resume is not None:
        checkpoint = load_checkpoint(resume)
        if checkpoint.config.net != config.net:
            raise CheckpointError(f"Архитектура в {resume} не совпадает с конфигурацией запуска")
        net = checkpoint.network()
        state = checkpoint.sgd_state()
        log_path = out_dir / LOG_FILE
        if log_path.exists():
            previous = TrainLog.read_csv(log_path).until(state.iteration)
        logger.info("Продолжение обучения с итерации %d (%s)", state.iteration, resume)

    (out_dir / CONFIG_FILE).write_text(serialize_config(config), encoding="utf-8")

    def on_checkpoint(current: Network, current_state: SGDState) -> None:
        path = save_checkpoint(out_dir / checkpoint_name(current_state.iteration), current, config,
                               current_state.iteration, current_state)
        logger.info("Сохранён чекпоинт %s", path)

    net, log = train_network(
        net, dataset, config.optim, config.seed,
        state=state,
        validation=validation,
        val_every=config.val_every,
        log_every=config.log_every,
        on_checkpoint=on_checkpoint,
        checkpoint_every=config.checkpoint_every,
        progress=progress,
    )
    history = TrainLog(previous.entries + log.entries)
    history.write_csv(out_dir / LOG_FILE)
    final = save_checkpoint(out_dir / FINAL_CHECKPOINT, net, config, state.iteration, state)
    return TrainingResult(net=net, log=history, out_dir=out_dir, checkpoint=final)


@click.command("train")
@click.option("--config", "config_path", required=True, help="Файл конфигурации запуска")
@click.option("--seed", type=int, default=None, help="Переопределить seed")
@click.option("--out", "out_dir", default=None, help="Каталог результатов")
@click.option("--iters", type=int, default=None, help="Переопределить optim.max_iters")
@click.option("--set", "sets", multiple=True, metavar="KEY=VALUE", help="Переопределить поле конфигурации")
@click.option("--resume", default=None, help="Продолжить с чекпоинта (со скоростями оптимизатора)")
@click.option("--progress/--no-progress", default=False, help="Показывать прогресс-бар")
def train(config_path: str, seed: Optional[int], out_dir: Optional[str], iters: Optional[int],
          sets: Tuple[str, ...], resume: Optional[str], progress: bool):
    """
    Обучает сеть по конфигурации; пишет чекпоинты, журнал и итоговую модель.
    """
    config = get_config(config_path, sets, seed=seed, out_dir=out_dir, optim__max_iters=iters)
    result = run_training(config, resume=resume, progress=progress)
    click.echo(f"checkpoint: {result.checkpoint}")
    click.echo(f"log: {result.out_dir / LOG_FILE}")
