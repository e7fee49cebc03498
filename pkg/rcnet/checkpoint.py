"""
Бинарный формат чекпоинта RCN1 (little-endian):

    magic "RCN1" | u32 версия | u32 длина + текст конфигурации | u64 итерация
    | u32 число буферов | буферы

Буфер: u32 длина имени, имя (utf-8), u8 ранг, u32 на каждую размерность,
u8 точность (1 - float32, 2 - float64), сырые значения. Скорости
оптимизатора хранятся как буферы с префиксом "velocity/".
"""
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from .config import parse_config, serialize_config
from .exceptions import ArchitectureError, CheckpointError, ConfigError, ShapeMismatchError
from .model import Network, build
from .optim import SGDState
from .schemas import RunConfig

logger = logging.getLogger(__name__)

MAGIC = b"RCN1"
VERSION = 1
VELOCITY_PREFIX = "velocity/"

_TAGS = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


@dataclass
class Checkpoint:
    config: RunConfig
    iteration: int
    buffers: Dict[str, np.ndarray]
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION

    def network(self) -> Network:
        return network_from_checkpoint(self)

    def sgd_state(self) -> SGDState:
        return SGDState(velocity={k: v.copy() for k, v in self.velocity.items()}, iteration=self.iteration)


def _pack_buffer(name: str, value: np.ndarray) -> bytes:
    tag = _TAGS.get(value.dtype)
    if tag is None:
        raise CheckpointError(f"Неподдерживаемый тип буфера {name}: {value.dtype}")
    encoded = name.encode("utf-8")
    parts = [struct.pack("<I", len(encoded)), encoded, struct.pack("<B", value.ndim)]
    parts.extend(struct.pack("<I", d) for d in value.shape)
    parts.append(struct.pack("<B", tag))
    parts.append(np.ascontiguousarray(value, dtype=_DTYPES[tag]).tobytes())
    return b"".join(parts)


def encode_checkpoint(net: Network, config: RunConfig, iteration: int,
                      state: Optional[SGDState] = None) -> bytes:
    if config.net != net.config:
        raise CheckpointError("Конфигурация запуска не совпадает с архитектурой сети")
    buffers: Dict[str, np.ndarray] = {**net.named_buffers(), **net.named_statistics()}
    if state is not None:
        for name, value in state.velocity.items():
            buffers[VELOCITY_PREFIX + name] = value
    text = serialize_config(config).encode("utf-8")
    parts = [
        MAGIC,
        struct.pack("<I", VERSION),
        struct.pack("<I", len(text)),
        text,
        struct.pack("<Q", iteration),
        struct.pack("<I", len(buffers)),
    ]
    parts.extend(_pack_buffer(name, value) for name, value in buffers.items())
    return b"".join(parts)


def save_checkpoint(path: Union[str, Path], net: Network, config: RunConfig, iteration: int,
                    state: Optional[SGDState] = None) -> Path:
    """
    Записывает чекпоинт атомарно (через временный файл рядом).
    """
    path = Path(path)
    payload = encode_checkpoint(net, config, iteration, state)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)
    logger.debug("Чекпоинт %s: итерация %d, %d байт", path, iteration, len(payload))
    return path


class _Reader:
    def __init__(self, payload: bytes, source: str):
        self.payload = payload
        self.offset = 0
        self.source = source

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.payload):
            raise CheckpointError(f"Чекпоинт обрезан на смещении {self.offset}: {self.source}")
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def buffer(self) -> Tuple[str, np.ndarray]:
        (name_len,) = self.unpack("<I")
        try:
            name = self.take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"Некорректное имя буфера: {self.source}") from None
        (rank,) = self.unpack("<B")
        dims = self.unpack(f"<{rank}I") if rank else ()
        (tag,) = self.unpack("<B")
        dtype = _DTYPES.get(tag)
        if dtype is None:
            raise CheckpointError(f"Неизвестная точность {tag} у буфера {name}: {self.source}")
        count = int(np.prod(dims, dtype=np.int64))
        raw = self.take(count * dtype.itemsize)
        value = np.frombuffer(raw, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
        return name, value


def decode_checkpoint(payload: bytes, source: str = "<bytes>") -> Checkpoint:
    reader = _Reader(payload, source)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"Не чекпоинт RCN1 (неверная сигнатура): {source}")
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"Неизвестная версия чекпоинта {version} (поддерживается {VERSION}): {source}")
    (text_len,) = reader.unpack("<I")
    try:
        config = parse_config(reader.take(text_len).decode("utf-8"))
    except (ConfigError, UnicodeDecodeError) as e:
        raise CheckpointError(f"Некорректная конфигурация в чекпоинте {source}: {e}") from None
    (iteration,) = reader.unpack("<Q")
    (count,) = reader.unpack("<I")
    buffers: Dict[str, np.ndarray] = {}
    velocity: Dict[str, np.ndarray] = {}
    for _ in range(count):
        name, value = reader.buffer()
        target = velocity if name.startswith(VELOCITY_PREFIX) else buffers
        key = name[len(VELOCITY_PREFIX):] if target is velocity else name
        if key in target:
            raise CheckpointError(f"Повторяющийся буфер {name}: {source}")
        target[key] = value
    if reader.offset != len(payload):
        raise CheckpointError(f"Лишние {len(payload) - reader.offset} байт в конце чекпоинта: {source}")
    return Checkpoint(config=config, iteration=iteration, buffers=buffers, velocity=velocity, version=version)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Не удалось прочитать чекпоинт {path}: {e.strerror or e}") from None
    return decode_checkpoint(payload, str(path))


def network_from_checkpoint(checkpoint: Checkpoint) -> Network:
    """
    Строит сеть по сохранённой конфигурации и загружает в неё буферы.
    """
    net = build(checkpoint.config.net, 0)
    for name, value in checkpoint.buffers.items():
        if value.dtype != net.dtype:
            raise CheckpointError(f"Буфер {name} имеет тип {value.dtype}, сеть - {net.dtype}")
    try:
        net.load_buffers(checkpoint.buffers)
    except (ArchitectureError, ShapeMismatchError) as e:
        raise CheckpointError(f"Буферы чекпоинта не подходят к его конфигурации: {e}") from None
    return net
