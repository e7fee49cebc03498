import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from functools import lru_cache
from typing import Callable, Iterable, Iterator, List, Optional, Sequence, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

THREADS_ENV = "RCNET_THREADS"

_worker = threading.local()


def thread_count() -> int:
    """
    Верхняя граница внутреннего параллелизма из RCNET_THREADS.
    По умолчанию 1 - ради воспроизводимости.
    """
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError:
        logger.warning("%s=%r не является целым числом, используется 1 поток", THREADS_ENV, raw)
        return 1
    return max(1, value)


def _mark_worker() -> None:
    _worker.active = True


def in_worker() -> bool:
    return getattr(_worker, "active", False)


@lru_cache(maxsize=None)
def _shared_pool(threads: int) -> ThreadPoolExecutor:
    logger.debug("Пул из %d потоков", threads)
    return ThreadPoolExecutor(max_workers=threads, thread_name_prefix="rcnet", initializer=_mark_worker)


@contextmanager
def get_executor(threads: Optional[int] = None) -> Iterator[Optional[ThreadPoolExecutor]]:
    """
    Общий пул потоков процесса (один на каждое число потоков).
    При одном потоке и внутри рабочего потока пула отдаёт None:
    вложенные задачи выполняются последовательно.
    """
    threads = thread_count() if threads is None else threads
    if threads <= 1 or in_worker():
        yield None
        return
    yield _shared_pool(threads)


def map_ordered(fn: Callable[[T], R], items: Sequence[T], threads: Optional[int] = None) -> List[R]:
    """
    Применяет fn к элементам, сохраняя порядок результатов независимо
    от числа потоков.
    """
    items = list(items)
    with get_executor(threads) as pool:
        if pool is None or len(items) <= 1:
            return [fn(item) for item in items]
        return list(pool.map(fn, items))


def ordered_sum(parts: Iterable):
    """
    Сумма частичных результатов строго в порядке их следования.
    """
    total = None
    for part in parts:
        total = part if total is None else total + part
    return total


def get_config(path: str, sets: Sequence[str] = (), **flags):
    """
    Конфигурация из файла с переопределениями: сначала --set key=value,
    затем именованные флаги (seed, out_dir, optim.max_iters и т.п.),
    значения None пропускаются.
    """
    from .config import load_config, parse_override

    overrides = [parse_override(item) for item in sets]
    overrides += [(key.replace("__", "."), str(value)) for key, value in flags.items() if value is not None]
    return load_config(path, overrides)


def get_network(checkpoint_path: str, tasks: Optional[Sequence] = None):
    """
    Загружает чекпоинт и возвращает (чекпоинт, сеть в режиме eval).
    tasks - допустимые задачи для вызывающей команды.
    """
    from .checkpoint import load_checkpoint
    from .exceptions import CheckpointError

    checkpoint = load_checkpoint(checkpoint_path)
    if tasks is not None and checkpoint.config.task not in tasks:
        allowed = ", ".join(t.value for t in tasks)
        raise CheckpointError(
            f"Чекпоинт обучен для задачи {checkpoint.config.task.value}, команда ожидает: {allowed}"
        )
    net = checkpoint.network().eval_mode()
    logger.debug("Загружена сеть %s из %s (итерация %d)",
                 checkpoint.config.net.kind.value, checkpoint_path, checkpoint.iteration)
    return checkpoint, net
