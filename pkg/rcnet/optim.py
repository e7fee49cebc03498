"""
SGD с моментом и weight decay, ступенчатое расписание learning rate и
цикл обучения.
"""
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .data import ImagePair, PatchDataset, from_tensor, to_tensor
from .dependencies import map_ordered
from .exceptions import DatasetError, ShapeMismatchError, StateError, TrainingDivergedError
from .metrics import psnr
from .model import Network, is_decay_exempt, restore, training_target
from .schemas import Mode, SGDHyper
from .tensor import mse

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "lr", "train_loss", "val_loss", "val_psnr")
MISSING = "NA"
HISTORY_TAIL = 5


@dataclass
class SGDState:
    """
    Скорости по имени параметра и число выполненных шагов.
    """
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0


@dataclass
class TrainLogEntry:
    iteration: int
    lr: float
    train_loss: float
    val_loss: Optional[float] = None
    val_psnr: Optional[float] = None


class TrainLog:
    """
    История обучения; номера итераций строго возрастают.
    """

    def __init__(self, entries: Optional[Sequence[TrainLogEntry]] = None):
        self.entries: List[TrainLogEntry] = []
        for entry in entries or ():
            self.append(entry)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def append(self, entry: TrainLogEntry) -> None:
        if self.entries and entry.iteration <= self.entries[-1].iteration:
            raise ValueError(
                f"Итерации журнала должны возрастать: {entry.iteration} после {self.entries[-1].iteration}"
            )
        self.entries.append(entry)

    def iterations(self) -> List[int]:
        return [e.iteration for e in self.entries]

    def train_losses(self) -> List[float]:
        return [e.train_loss for e in self.entries]

    def validated(self) -> List[TrainLogEntry]:
        return [e for e in self.entries if e.val_loss is not None]

    def until(self, iteration: int) -> "TrainLog":
        return TrainLog([e for e in self.entries if e.iteration <= iteration])

    def write_csv(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(LOG_COLUMNS)
            for e in self.entries:
                writer.writerow([
                    e.iteration, repr(float(e.lr)), repr(float(e.train_loss)),
                    _cell(e.val_loss), _cell(e.val_psnr),
                ])

    @classmethod
    def read_csv(cls, path: Union[str, Path]) -> "TrainLog":
        with Path(path).open(newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            if tuple(reader.fieldnames or ()) != LOG_COLUMNS:
                raise ValueError(f"Неожиданный заголовок журнала {reader.fieldnames} в {path}")
            return cls([
                TrainLogEntry(
                    iteration=int(row["iter"]),
                    lr=float(row["lr"]),
                    train_loss=float(row["train_loss"]),
                    val_loss=_parse_cell(row["val_loss"]),
                    val_psnr=_parse_cell(row["val_psnr"]),
                )
                for row in reader
            ])


def _cell(value: Optional[float]) -> str:
    return MISSING if value is None else repr(float(value))


def _parse_cell(text: str) -> Optional[float]:
    return None if text == MISSING else float(text)


def lr_at(iteration: int, hyper: SGDHyper) -> float:
    if iteration < 0:
        raise ValueError(f"Номер итерации должен быть >= 0, получено {iteration}")
    return hyper.lr0 / hyper.lr_drop_factor ** (iteration // hyper.lr_drop_every)


def sgd_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: SGDState,
             hyper: SGDHyper) -> SGDState:
    """
    Один шаг на месте:
        v <- momentum * v + grad + weight_decay * w
        w <- w - lr * v
    gamma/beta BN и наклоны PReLU не получают weight decay.
    """
    lr = lr_at(state.iteration, hyper)
    for name, weight in params.items():
        grad = grads.get(name)
        if grad is None:
            raise StateError(f"Нет градиента для параметра {name}")
        if grad.shape != weight.shape:
            raise ShapeMismatchError(grad.shape, weight.shape, f"градиент {name}")
        velocity = state.velocity.get(name)
        if velocity is None:
            velocity = np.zeros_like(weight)
            state.velocity[name] = velocity
        elif velocity.shape != weight.shape:
            raise ShapeMismatchError(velocity.shape, weight.shape, f"скорость {name}")
        velocity *= hyper.momentum
        velocity += grad
        if not is_decay_exempt(name):
            velocity += hyper.weight_decay * weight
        weight -= lr * velocity
    state.iteration += 1
    return state


def loss_and_grad(out: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Средний квадрат ошибки и его градиент по выходу сети.
    """
    loss = mse(out, target)
    return loss, (out - target) * (2.0 / out.size)


def evaluate_validation(net: Network, pairs: Sequence[Tuple[str, ImagePair]],
                        threads: Optional[int] = None) -> Tuple[float, float]:
    """
    Средние MSE (шкала 0-1) и PSNR (dB, шкала 0-255 после обрезки) на
    полноразмерных изображениях в режиме eval. Режим сети восстанавливается.
    """
    previous = net.mode
    net.eval_mode()

    def one(item: Tuple[str, ImagePair]) -> Tuple[float, float]:
        _, pair = item
        x0 = to_tensor(pair.corrupted).astype(net.dtype)
        out = restore(net, x0)
        clean = to_tensor(pair.clean).astype(net.dtype)
        return mse(out, clean), psnr(from_tensor(out).pixels, pair.clean)

    try:
        results = map_ordered(one, list(pairs), threads)
    finally:
        if previous == Mode.TRAIN:
            net.train_mode()
    losses, psnrs = zip(*results)
    return float(np.mean(losses)), float(np.mean(psnrs))


CheckpointHook = Callable[[Network, SGDState], None]


def train(net: Network, dataset: PatchDataset, hyper: SGDHyper, rng_seed: int,
          logger: Optional[logging.Logger] = None, *,
          state: Optional[SGDState] = None,
          validation: Optional[Sequence[Tuple[str, ImagePair]]] = None,
          val_every: int = 0,
          log_every: int = 100,
          on_checkpoint: Optional[CheckpointHook] = None,
          checkpoint_every: int = 0,
          progress: bool = False) -> Tuple[Network, TrainLog]:
    """
    Обучает сеть до hyper.max_iters шагов (с учётом уже выполненных в state).

    Каждый шаг: батч (seed, номер шага) -> forward -> MSE -> backward ->
    sgd_step. Журнал содержит строку на каждый шаг (номер шага с единицы),
    валидация добавляется каждые val_every шагов. Нечисловой loss
    прерывает обучение с TrainingDivergedError.
    """
    log = logger or logging.getLogger(__name__)
    if len(dataset) == 0:
        raise DatasetError("Пустой набор данных для обучения")
    state = state or SGDState()
    history = TrainLog()
    net.train_mode()
    params = net.named_buffers()

    bar = tqdm(total=hyper.max_iters, initial=state.iteration, disable=not progress,
               desc="train", unit="it", leave=False, dynamic_ncols=True)

    def emit(line: str) -> None:
        if progress:
            tqdm.write(line)
        else:
            log.info(line)

    try:
        for step in range(state.iteration, hyper.max_iters):
            batch = dataset.sample(hyper.batch_size, rng_seed, step)
            x0 = batch.corrupted.astype(net.dtype)
            target = training_target(net.config, batch.corrupted, batch.clean).astype(net.dtype)
            lr = lr_at(step, hyper)

            out = net.forward(x0)
            loss, grad_out = loss_and_grad(out, target)
            if not math.isfinite(loss):
                tail = history.train_losses()[-(HISTORY_TAIL - 1):] + [loss]
                raise TrainingDivergedError(step + 1, lr, tail)
            grads = net.backward(grad_out)
            sgd_step(params, grads.params, state, hyper)

            entry = TrainLogEntry(iteration=state.iteration, lr=lr, train_loss=loss)
            if validation and val_every and state.iteration % val_every == 0:
                entry.val_loss, entry.val_psnr = evaluate_validation(net, validation)
            history.append(entry)

            if state.iteration % log_every == 0 or state.iteration == hyper.max_iters or entry.val_loss is not None:
                line = f"iter={entry.iteration} lr={lr:g} loss={loss:.6g}"
                if entry.val_loss is not None:
                    line += f" val_loss={entry.val_loss:.6g} val_psnr={entry.val_psnr:.4f}"
                emit(line)
                bar.set_postfix(loss=f"{loss:.4g}")
            bar.update(1)

            if on_checkpoint is not None and checkpoint_every and state.iteration % checkpoint_every == 0:
                on_checkpoint(net, state)
    finally:
        bar.close()
    return net, history
