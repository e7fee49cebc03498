from typing import Optional

import click

from ..synthetic import write_synthetic_set
from .restore import parse_size


@click.command("synth")
@click.option("--out", "out_dir", default="data", show_default=True, help="Каталог изображений и манифестов")
@click.option("--train", "train_count", type=int, default=12, show_default=True, help="Число обучающих изображений")
@click.option("--val", "val_count", type=int, default=5, show_default=True, help="Число валидационных изображений")
@click.option("--size", default="128x128", show_default=True, help="Размер ШИРИНАxВЫСОТА")
@click.option("--seed", type=int, default=0, show_default=True, help="Seed генератора")
def synth(out_dir: str, train_count: int, val_count: int, size: Optional[str], seed: int):
    """
    Генерирует синтетический набор и манифесты train.txt / val.txt,
    на которые ссылаются пресеты из configs/.
    """
    train_manifest, val_manifest = write_synthetic_set(out_dir, train_count, val_count, parse_size(size), seed)
    click.echo(f"train: {train_manifest}")
    click.echo(f"val: {val_manifest}")
