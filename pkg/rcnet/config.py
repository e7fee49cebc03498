"""
Плоский текстовый формат конфигурации:

    # комментарий
    task = denoise
    optim.lr0 = 0.1
    net.block.width = 64
    corruption.scales = 2,3,4

Ключи с точками задают вложенные секции RunConfig. Значения приводит
к типам pydantic-схема.
"""
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Tuple, Union

from pydantic import BaseModel, ValidationError

from .exceptions import ConfigError
from .schemas import RunConfig

logger = logging.getLogger(__name__)


def parse_pairs(text: str) -> Tuple[Dict[str, str], Dict[str, int]]:
    """
    Разбирает текст в словарь "ключ с точками" -> строковое значение
    и запоминает номер строки каждого ключа.
    """
    values: Dict[str, str] = {}
    lines: Dict[str, int] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("ожидается 'ключ = значение'", line=number)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or any(not part for part in key.split(".")):
            raise ConfigError(f"некорректный ключ {key!r}", line=number)
        if not value:
            raise ConfigError("пустое значение", line=number, field=key)
        if key in values:
            raise ConfigError(f"ключ уже задан в строке {lines[key]}", line=number, field=key)
        values[key] = value
        lines[key] = number
    return values, lines


def parse_override(item: str) -> Tuple[str, str]:
    if "=" not in item:
        raise ConfigError(f"переопределение {item!r} должно иметь вид ключ=значение")
    key, value = (part.strip() for part in item.split("=", 1))
    if not key or not value:
        raise ConfigError(f"переопределение {item!r} должно иметь вид ключ=значение")
    return key, value


def _nest(values: Mapping[str, str], lines: Mapping[str, int]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for key, value in values.items():
        parts = key.split(".")
        node = nested
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"{part} уже задан как значение, а не секция", line=lines.get(key), field=key)
            node = child
        if isinstance(node.get(parts[-1]), dict):
            raise ConfigError("ключ является секцией", line=lines.get(key), field=key)
        node[parts[-1]] = value
    return nested


def _validate(values: Dict[str, str], lines: Dict[str, int]) -> RunConfig:
    try:
        return RunConfig.model_validate(_nest(values, lines))
    except ValidationError as e:
        error = e.errors()[0]
        field = ".".join(str(part) for part in error["loc"])
        # Ошибка валидатора модели указывает на секцию - ищем первый её ключ
        line = lines.get(field)
        if line is None:
            candidates = [n for k, n in lines.items() if k.startswith(field + ".")] if field else []
            line = min(candidates) if candidates else None
        raise ConfigError(error["msg"], line=line, field=field or None) from None


def parse_config(text: str, overrides: Optional[Iterable[Tuple[str, str]]] = None) -> RunConfig:
    values, lines = parse_pairs(text)
    for key, value in overrides or ():
        # Флаг командной строки важнее значения из файла
        values[key] = value
        lines.pop(key, None)
    return _validate(values, lines)


def load_config(path: Union[str, Path], overrides: Optional[Iterable[Tuple[str, str]]] = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"не удалось прочитать {path}: {e.strerror or e}") from None
    config = parse_config(text, overrides)
    logger.debug("Конфигурация %s загружена", path)
    return config


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(_format(v) for v in value)
    return str(value)


def _flatten(data: Mapping[str, Any], prefix: str = "") -> List[Tuple[str, str]]:
    items: List[Tuple[str, str]] = []
    for key, value in data.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            items.extend(_flatten(value, name + "."))
        else:
            items.append((name, _format(value)))
    return items


def serialize_config(config: BaseModel) -> str:
    """
    Текст конфигурации в фиксированном порядке полей схемы.
    parse -> serialize -> parse - неподвижная точка.
    """
    data = config.model_dump(mode="json", exclude_none=True)
    items = _flatten(data)
    for key, value in items:
        if not value.strip() or value != value.strip() or any(c in value for c in "#\r\n"):
            raise ConfigError(f"значение {value!r} нельзя записать в текстовую конфигурацию", field=key)
    return "".join(f"{key} = {value}\n" for key, value in items)
