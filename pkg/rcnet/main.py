import logging
import sys

import click
from pydantic import ValidationError

from . import __version__
from .commands import experiments, inspect, restore, synth, train
from .exceptions import RCNetError

description = """
Движок RC-Net: обучение, восстановление изображений и эксперименты.

\b
Начало работы:
  rcnet inspect                              структура сети и число параметров
  rcnet synth                                синтетический набор в data/
  rcnet train --config configs/desk_denoise.cfg
  rcnet evaluate --checkpoint runs/desk_denoise/final.rcn --manifest data/val.txt --sigma 25
"""


def _one_line(error: BaseException) -> str:
    return " ".join(str(error).split())


class RCNetGroup(click.Group):
    """
    Группа команд, превращающая ошибки движка в одну строку
    `error: <Класс>: <сообщение>` в stderr.
    """

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        """
        Ошибки разбора аргументов click печатаются той же одной строкой,
        код выхода click сохраняется (2 для ошибок использования).
        """
        if not standalone_mode:
            return super().main(args, prog_name, complete_var, standalone_mode=False, **extra)
        try:
            code = super().main(args, prog_name, complete_var, standalone_mode=False, **extra)
        except click.ClickException as e:
            name = "UsageError" if isinstance(e, click.UsageError) else type(e).__name__
            click.echo(f"error: {name}: {_one_line(e.format_message())}", err=True)
            sys.exit(e.exit_code)
        except click.Abort:
            click.echo("error: Abort: прервано пользователем", err=True)
            sys.exit(1)
        sys.exit(code if isinstance(code, int) else 0)

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except RCNetError as e:
            click.echo(f"error: {type(e).__name__}: {_one_line(e)}", err=True)
            ctx.exit(e.exit_code)
        except ValidationError as e:
            click.echo(f"error: ConfigError: {_one_line(e)}", err=True)
            ctx.exit(1)
        except (OSError, ValueError) as e:
            click.echo(f"error: {type(e).__name__}: {_one_line(e)}", err=True)
            ctx.exit(1)


def configure_logging(verbose: bool) -> None:
    root = logging.getLogger("rcnet")
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False


@click.group(cls=RCNetGroup, help=description)
@click.version_option(__version__, prog_name="rcnet")
@click.option("-v", "--verbose", is_flag=True, help="Подробный журнал (DEBUG)")
def cli(verbose: bool):
    configure_logging(verbose)


# Подключаем команды
cli.add_command(train.train)
cli.add_command(restore.denoise)
cli.add_command(restore.superres)
cli.add_command(restore.evaluate)
cli.add_command(inspect.inspect)
cli.add_command(experiments.stability)
cli.add_command(experiments.ablation)
cli.add_command(synth.synth)


def main():
    cli(prog_name="rcnet")
