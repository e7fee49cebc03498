from typing import Optional, Tuple

import click

from ..dependencies import get_config, get_network
from ..exceptions import ArchitectureError, ConfigError
from ..model import VARIANTS, Network, build, net_param_count, render_summary, variant_config
from ..schemas import NetConfig


def inspect_network(config_path: Optional[str] = None, checkpoint: Optional[str] = None,
                    variant: str = "rcnet", sets: Tuple[str, ...] = ()) -> Network:
    """
    Сеть из чекпоинта, из конфигурации запуска или конфигурация по умолчанию
    с применённым вариантом.
    """
    if config_path and checkpoint:
        raise ConfigError("Укажите либо --config, либо --checkpoint")
    if checkpoint:
        _, net = get_network(checkpoint)
        return net
    base = get_config(config_path, sets).net if config_path else NetConfig()
    return build(variant_config(base, variant), 0)


@click.command("inspect")
@click.option("--config", "config_path", default=None, help="Файл конфигурации запуска")
@click.option("--checkpoint", default=None, help="Чекпоинт")
@click.option("--variant", default="rcnet", help=f"Вариант архитектуры: {', '.join(VARIANTS)}")
@click.option("--set", "sets", multiple=True, metavar="KEY=VALUE", help="Переопределить поле конфигурации")
def inspect(config_path: Optional[str], checkpoint: Optional[str], variant: str, sets: Tuple[str, ...]):
    """
    Печатает структуру сети по слоям и общее число параметров.
    """
    net = inspect_network(config_path, checkpoint, variant, sets)
    click.echo(render_summary(net))
    expected = net_param_count(net.config)
    if expected != net.param_count():
        raise ArchitectureError(f"Число параметров {net.param_count()} расходится с формулой {expected}")
    click.echo(f"total parameters: {net.param_count()} (~{net.param_count() / 1e6:.2f}M)")
