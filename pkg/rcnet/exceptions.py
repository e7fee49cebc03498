from typing import Optional, Sequence, Tuple


class RCNetError(Exception):
    """
    Базовая ошибка движка. CLI превращает её в одну строку `error: ...`.
    """
    exit_code = 1


class ShapeMismatchError(RCNetError, ValueError):
    def __init__(self, shape_a: Tuple[int, ...], shape_b: Tuple[int, ...], what: str = "тензоры"):
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        super().__init__(f"Несовпадение размеров ({what}): {self.shape_a} и {self.shape_b}")


class ConfigError(RCNetError, ValueError):
    def __init__(self, message: str, line: Optional[int] = None, field: Optional[str] = None):
        self.line = line
        self.field = field
        prefix = []
        if line is not None:
            prefix.append(f"строка {line}")
        if field is not None:
            prefix.append(f"поле {field}")
        head = f"{', '.join(prefix)}: " if prefix else ""
        super().__init__(f"{head}{message}")


class ArchitectureError(RCNetError, ValueError):
    pass


class ImageFormatError(RCNetError, ValueError):
    pass


class CheckpointError(RCNetError, ValueError):
    pass


class DatasetError(RCNetError, ValueError):
    pass


class StateError(RCNetError, RuntimeError):
    pass


class TrainingDivergedError(RCNetError, ArithmeticError):
    exit_code = 3

    def __init__(self, iteration: int, lr: float, history_tail: Sequence[float]):
        self.iteration = iteration
        self.lr = lr
        self.history_tail = list(history_tail)
        tail = ", ".join(f"{v:.6g}" for v in self.history_tail)
        super().__init__(
            f"Обучение разошлось: loss не конечен на итерации {iteration} "
            f"(lr={lr:g}); последние значения loss: [{tail}]"
        )
