from pydantic import BaseModel, Field, field_validator, model_validator, ConfigDict
from typing import Optional, List
from enum import Enum


class Precision(str, Enum):
    SINGLE = "single"
    DOUBLE = "double"


class Task(str, Enum):
    DENOISE = "denoise"
    SR = "sr"
    SR_BLIND = "sr_blind"


class NetKind(str, Enum):
    RCNET = "rcnet"
    WIN = "win"


class Activation(str, Enum):
    PRELU = "prelu"
    RELU = "relu"
    NONE = "none"


class Reconstruction(str, Enum):
    # y = x0 + Deconv(...)
    GLOBAL_SKIP = "global_skip"
    # сеть предсказывает остаток r, восстановление x0 - r
    RESIDUAL = "residual"


class Mode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


class CorruptionKind(str, Enum):
    GAUSSIAN_NOISE = "gaussian_noise"
    SR = "sr"
    SR_BLIND = "sr_blind"


SR_FACTORS = (2, 3, 4)


def _check_odd(name: str, v: int) -> int:
    if v < 1 or v % 2 == 0:
        raise ValueError(f"{name} должен быть нечётным и >= 1, получено {v}")
    return v


def _check_path(name: str, v: str) -> str:
    # Значение должно переживать запись в текстовую конфигурацию
    if not v.strip() or v != v.strip():
        raise ValueError(f"{name}: путь не может быть пустым или начинаться/заканчиваться пробелом")
    if "#" in v or "\n" in v or "\r" in v:
        raise ValueError(f"{name}: путь не может содержать '#' или перевод строки, получено {v!r}")
    return v


class CompositeSpec(BaseModel):
    """
    Описание одного составного блока Conv -> BN -> активация.
    """
    model_config = ConfigDict(frozen=True)

    in_channels: int = Field(..., ge=1)
    out_channels: int = Field(..., ge=1)
    k: int
    use_bn: bool = True
    activation: Activation = Activation.PRELU

    @field_validator("k")
    def validate_k(cls, v):
        return _check_odd("k", v)


class RCBlockSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    width: int = Field(64, ge=1)
    k_large: int = 7
    k_small: int = 3

    @field_validator("k_large", "k_small")
    def validate_odd(cls, v, info):
        return _check_odd(info.field_name, v)

    @model_validator(mode="after")
    def validate_order(self):
        if self.k_large <= self.k_small:
            raise ValueError(
                f"Большой фильтр должен быть больше малого: k_large={self.k_large}, k_small={self.k_small}"
            )
        return self


class NetConfig(BaseModel):
    """
    Декларативное описание архитектуры RC-Net / WIN и их вариантов.

    Ограничения плотного извлечения признаков (f >= 7x7, n >= 128) и
    рекомендации для RC-блока проверяет построитель сети, а не схема:
    в desk-масштабе они превращаются в предупреждения.
    """
    model_config = ConfigDict(extra="forbid")

    kind: NetKind = NetKind.RCNET
    n_dense: int = Field(128, ge=1)
    k_dense: int = 7
    num_blocks: int = Field(4, ge=1)
    block: RCBlockSpec = Field(default_factory=RCBlockSpec)
    use_bn: bool = True
    remove_second_dense: bool = False
    in_channels: int = Field(1, ge=1, le=1)
    desk_scale: bool = False
    activation: Activation = Activation.PRELU
    reconstruction: Reconstruction = Reconstruction.GLOBAL_SKIP
    precision: Precision = Precision.SINGLE

    @field_validator("k_dense")
    def validate_k_dense(cls, v):
        return _check_odd("k_dense", v)


class SGDHyper(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr0: float = Field(0.1, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(1e-4, ge=0)
    lr_drop_every: int = Field(150_000, ge=1)
    lr_drop_factor: float = Field(10.0, gt=1)
    batch_size: int = Field(64, ge=1)
    max_iters: int = Field(250_000, ge=0)


class CorruptionSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: CorruptionKind = CorruptionKind.GAUSSIAN_NOISE
    sigma: Optional[float] = None
    scale: Optional[int] = None
    scales: List[int] = Field(default_factory=lambda: list(SR_FACTORS))
    resample_noise: bool = True

    @field_validator("scales", mode="before")
    def split_scales(cls, v):
        # В конфиге список задаётся строкой "2,3,4"
        if isinstance(v, str):
            v = [item.strip() for item in v.split(",") if item.strip()]
        return v

    @model_validator(mode="after")
    def validate_kind(self):
        if self.kind == CorruptionKind.GAUSSIAN_NOISE:
            if self.sigma is None or self.sigma <= 0:
                raise ValueError("Для gaussian_noise нужен sigma > 0")
        elif self.kind == CorruptionKind.SR:
            if self.scale not in SR_FACTORS:
                raise ValueError(f"Для sr нужен scale из {SR_FACTORS}, получено {self.scale}")
        else:
            if not self.scales or any(s not in SR_FACTORS for s in self.scales):
                raise ValueError(f"Для sr_blind scales должны быть из {SR_FACTORS}, получено {self.scales}")
            if len(set(self.scales)) != len(self.scales):
                raise ValueError(f"Масштабы не должны повторяться: {self.scales}")
        return self

    def keys(self) -> List[float]:
        """
        Ключи пар изображений: sigma для шума, масштаб для SR.
        """
        if self.kind == CorruptionKind.GAUSSIAN_NOISE:
            return [float(self.sigma)]
        if self.kind == CorruptionKind.SR:
            return [int(self.scale)]
        return [int(s) for s in self.scales]


class DataSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    train_manifest: str
    val_manifest: Optional[str] = None
    patch_size: int = Field(41, ge=1)
    stride: int = Field(14, ge=1)
    val_max_images: Optional[int] = Field(None, ge=1)

    @field_validator("val_manifest", mode="before")
    def empty_val_manifest(cls, v):
        return None if v == "" else v

    @field_validator("train_manifest", "val_manifest")
    def validate_manifest(cls, v, info):
        return v if v is None else _check_path(f"data.{info.field_name}", v)


_TASK_TO_CORRUPTION = {
    Task.DENOISE: CorruptionKind.GAUSSIAN_NOISE,
    Task.SR: CorruptionKind.SR,
    Task.SR_BLIND: CorruptionKind.SR_BLIND,
}


class RunConfig(BaseModel):
    """
    Полная конфигурация запуска: архитектура, оптимизатор, искажение, данные.
    """
    model_config = ConfigDict(extra="forbid")

    task: Task
    seed: int
    out_dir: str = "runs/default"
    net: NetConfig = Field(default_factory=NetConfig)
    optim: SGDHyper = Field(default_factory=SGDHyper)
    corruption: CorruptionSpec
    data: DataSpec
    log_every: int = Field(100, ge=1)
    val_every: int = Field(0, ge=0)
    checkpoint_every: int = Field(0, ge=0)

    @field_validator("out_dir")
    def validate_out_dir(cls, v):
        return _check_path("out_dir", v)

    @model_validator(mode="after")
    def validate_task(self):
        expected = _TASK_TO_CORRUPTION[self.task]
        if self.corruption.kind != expected:
            raise ValueError(
                f"Задача {self.task.value} требует corruption.kind = {expected.value}, "
                f"получено {self.corruption.kind.value}"
            )
        return self
