"""
Построитель и исполнитель архитектур RC-Net и WIN.

Сеть - упорядоченный список слоёв плюс таблица skip-соединений.
Активацией a[i] называется значение после слоя i (включая все сложения,
которые в него приходят); a[-1] - входное изображение x0. Skip(source=j,
target=i) означает a[i] = T_i(a[i-1]) + ... + a[j]; сложения в одной точке
выполняются в порядке таблицы.

Топология RC-Net:
    dense1, dense2 (может быть удалён), shrink 1x1,
    num_blocks RC-блоков (1x1 -> большой фильтр -> 1x1 -> малый фильтр),
    expand 1x1, deconv 3x3 с одним выходным каналом.
Внутри блока выход большого фильтра прибавляется к концу блока, вход
блока прибавляется к его выходу, входное изображение - к выходу deconv.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import layers as L
from .exceptions import ArchitectureError, ShapeMismatchError, StateError
from .schemas import Activation, CompositeSpec, Mode, NetConfig, NetKind, Reconstruction
from .tensor import add, check_4d, dtype_of

logger = logging.getLogger(__name__)

INPUT = -1


class LayerKind(str, Enum):
    COMPOSITE = "composite"
    CONV = "conv"
    DECONV = "deconv"


class SkipKind(str, Enum):
    IN_BLOCK = "in_block"
    BLOCK = "block"
    GLOBAL = "global"


@dataclass(frozen=True)
class Skip:
    source: int
    target: int
    kind: SkipKind


@dataclass(frozen=True)
class LayerPlan:
    name: str
    kind: LayerKind
    spec: CompositeSpec


@dataclass
class LayerCache:
    x: np.ndarray
    conv_out: Optional[np.ndarray] = None
    bn_cache: Optional[L.BNCache] = None
    act_in: Optional[np.ndarray] = None


@dataclass
class Layer:
    """
    Один слой сети: составной блок Conv -> BN -> активация, финальная
    свёртка WIN или финальная транспонированная свёртка RC-Net.
    """
    name: str
    kind: LayerKind
    spec: CompositeSpec
    conv: L.ConvParams
    bn: Optional[L.BNParams] = None
    prelu: Optional[L.PReLUParams] = None

    @property
    def activation(self) -> Activation:
        return self.spec.activation

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, LayerCache]:
        cache = LayerCache(x=x)
        if self.kind == LayerKind.DECONV:
            return L.tconv_forward(x, self.conv), cache
        y = L.conv_forward(x, self.conv)
        cache.conv_out = y
        if self.bn is not None:
            y, cache.bn_cache = L.bn_forward(y, self.bn)
        cache.act_in = y
        if self.activation == Activation.PRELU:
            y = L.prelu_forward(y, self.prelu)
        elif self.activation == Activation.RELU:
            y = L.relu_forward(y)
        return y, cache

    def backward(self, grad: np.ndarray, cache: LayerCache) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        grads: Dict[str, np.ndarray] = {}
        if self.kind == LayerKind.DECONV:
            grad_x, conv_grads = L.tconv_backward(cache.x, self.conv, grad)
            grads.update({f"conv.{k}": v for k, v in conv_grads.items()})
            return grad_x, grads
        if self.activation == Activation.PRELU:
            grad, act_grads = L.prelu_backward(cache.act_in, self.prelu, grad)
            grads.update({f"act.{k}": v for k, v in act_grads.items()})
        elif self.activation == Activation.RELU:
            grad = L.relu_backward(cache.act_in, grad)
        if self.bn is not None:
            grad, bn_grads = L.bn_backward(cache.conv_out, self.bn, grad, cache.bn_cache)
            grads.update({f"bn.{k}": v for k, v in bn_grads.items()})
        grad_x, conv_grads = L.conv_backward(cache.x, self.conv, grad)
        grads.update({f"conv.{k}": v for k, v in conv_grads.items()})
        return grad_x, grads

    def buffers(self) -> Dict[str, np.ndarray]:
        result = {f"conv.{k}": v for k, v in self.conv.buffers().items()}
        if self.bn is not None:
            result.update({f"bn.{k}": v for k, v in self.bn.buffers().items()})
        if self.prelu is not None:
            result.update({f"act.{k}": v for k, v in self.prelu.buffers().items()})
        return result

    def statistics(self) -> Dict[str, np.ndarray]:
        if self.bn is None:
            return {}
        return {f"bn.{k}": v for k, v in self.bn.statistics().items()}

    def param_count(self) -> int:
        return int(sum(v.size for v in self.buffers().values()))


@dataclass
class Gradients:
    params: Dict[str, np.ndarray]
    input: np.ndarray


@dataclass
class LayerSummary:
    index: int
    name: str
    kind: str
    k: int
    in_channels: int
    out_channels: int
    bn: bool
    activation: str
    params: int
    skips: str


class Network:
    def __init__(self, config: NetConfig, layers: List[Layer], skips: List[Skip]):
        self.config = config
        self.layers = layers
        self.skips = skips
        self.mode = Mode.TRAIN
        self._cache: Optional[Tuple[Dict[int, np.ndarray], List[LayerCache]]] = None
        self._skips_to: Dict[int, List[Skip]] = {}
        for skip in skips:
            self._skips_to.setdefault(skip.target, []).append(skip)
        self._check_skips()

    @property
    def dtype(self) -> np.dtype:
        return dtype_of(self.config.precision)

    @property
    def max_filter(self) -> int:
        return max(layer.conv.k for layer in self.layers)

    def _channels_at(self, index: int) -> int:
        if index == INPUT:
            return self.config.in_channels
        return self.layers[index].conv.out_channels

    def _check_skips(self) -> None:
        for skip in self.skips:
            if not INPUT <= skip.source < skip.target < len(self.layers):
                raise ArchitectureError(f"Некорректное skip-соединение {skip}")
            if self._channels_at(skip.source) != self._channels_at(skip.target):
                raise ArchitectureError(
                    f"Skip {skip.kind.value} соединяет тензоры с разным числом каналов: "
                    f"{self._channels_at(skip.source)} -> {self._channels_at(skip.target)}"
                )

    def train_mode(self) -> "Network":
        self.mode = Mode.TRAIN
        for layer in self.layers:
            if layer.bn is not None:
                layer.bn.mode = Mode.TRAIN
        return self

    def eval_mode(self) -> "Network":
        self.mode = Mode.EVAL
        self._cache = None
        for layer in self.layers:
            if layer.bn is not None:
                layer.bn.mode = Mode.EVAL
        return self

    def activations(self, x0: np.ndarray) -> Dict[int, np.ndarray]:
        """
        Все промежуточные активации a[i] (a[-1] - вход) одного прямого прохода.
        """
        acts, caches = self._run(x0)
        if self.mode == Mode.TRAIN:
            self._cache = (acts, caches)
        return acts

    def forward(self, x0: np.ndarray) -> np.ndarray:
        return self.activations(x0)[len(self.layers) - 1]

    def _run(self, x0: np.ndarray) -> Tuple[Dict[int, np.ndarray], List[LayerCache]]:
        check_4d(x0, "вход сети")
        if x0.shape[1] != self.config.in_channels:
            raise ShapeMismatchError((x0.shape[1],), (self.config.in_channels,), "вход сети: число каналов")
        k = self.max_filter
        if x0.shape[2] < k or x0.shape[3] < k:
            raise ShapeMismatchError(x0.shape[2:], (k, k), "вход сети меньше наибольшего фильтра")
        x0 = x0.astype(self.dtype, copy=False)

        acts: Dict[int, np.ndarray] = {INPUT: x0}
        caches: List[LayerCache] = []
        for i, layer in enumerate(self.layers):
            y, cache = layer.forward(acts[i - 1])
            for skip in self._skips_to.get(i, ()):
                y = add(y, acts[skip.source])
            acts[i] = y
            caches.append(cache)
        return acts, caches

    def backward(self, grad_out: np.ndarray) -> Gradients:
        """
        Обратный проход по последнему прямому проходу в режиме train.
        Градиент в точке сложения уходит в обе ветви без изменений.
        """
        if self._cache is None:
            raise StateError("backward без кэша прямого прохода (forward в режиме train не вызывался)")
        acts, caches = self._cache
        last = len(self.layers) - 1
        if grad_out.shape != acts[last].shape:
            raise ShapeMismatchError(grad_out.shape, acts[last].shape, "градиент выхода сети")

        grad_acts: Dict[int, Optional[np.ndarray]] = {i: None for i in range(INPUT, last + 1)}
        grad_acts[last] = grad_out.astype(self.dtype, copy=False)
        params: Dict[str, np.ndarray] = {}

        def accumulate(index: int, value: np.ndarray) -> None:
            current = grad_acts[index]
            grad_acts[index] = value if current is None else current + value

        for i in range(last, INPUT, -1):
            grad = grad_acts[i]
            if grad is None:
                grad = np.zeros_like(acts[i])
            for skip in self._skips_to.get(i, ()):
                accumulate(skip.source, grad)
            grad_x, layer_grads = self.layers[i].backward(grad, caches[i])
            accumulate(i - 1, grad_x)
            prefix = layer_name(i)
            for key, value in layer_grads.items():
                params[f"{prefix}.{key}"] = value
        return Gradients(params=params, input=grad_acts[INPUT])

    def named_buffers(self) -> Dict[str, np.ndarray]:
        """
        Обучаемые параметры в стабильном порядке: layerNN.conv.weight, ...
        """
        result: Dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.layers):
            for key, value in layer.buffers().items():
                result[f"{layer_name(i)}.{key}"] = value
        return result

    def named_statistics(self) -> Dict[str, np.ndarray]:
        result: Dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.layers):
            for key, value in layer.statistics().items():
                result[f"{layer_name(i)}.{key}"] = value
        return result

    def load_buffers(self, mapping: Dict[str, np.ndarray]) -> None:
        targets = {**self.named_buffers(), **self.named_statistics()}
        missing = sorted(set(targets) - set(mapping))
        unknown = sorted(set(mapping) - set(targets))
        if missing or unknown:
            raise ArchitectureError(f"Буферы не совпадают с архитектурой: нет {missing}, лишние {unknown}")
        for name, value in mapping.items():
            target = targets[name]
            if target.shape != value.shape:
                raise ShapeMismatchError(value.shape, target.shape, name)
            target[...] = value

    def param_count(self) -> int:
        return param_count(self)


def layer_name(index: int) -> str:
    return f"layer{index:02d}"


def is_decay_exempt(name: str) -> bool:
    """
    Параметры нормализации и наклоны PReLU не подвергаются weight decay.
    """
    return name.endswith((".bn.gamma", ".bn.beta", ".act.slope"))


# Построение


def plan_layers(config: NetConfig) -> Tuple[List[LayerPlan], List[Skip]]:
    act = config.activation
    bn = config.use_bn
    residual = config.reconstruction == Reconstruction.RESIDUAL
    plans: List[LayerPlan] = []
    skips: List[Skip] = []

    def composite(name: str, cin: int, cout: int, k: int, use_bn: bool = bn) -> int:
        plans.append(LayerPlan(name, LayerKind.COMPOSITE, CompositeSpec(
            in_channels=cin, out_channels=cout, k=k, use_bn=use_bn, activation=act)))
        return len(plans) - 1

    n, kd, cin = config.n_dense, config.k_dense, config.in_channels
    # В режиме residual BN убирается из первого и последнего составного блока
    if config.kind == NetKind.WIN:
        composite("dense1", cin, n, kd, use_bn=bn and not residual)
        composite("dense2", n, n, kd)
        composite("dense3", n, n, kd)
        composite("dense4", n, n, kd, use_bn=bn and not residual)
        final_kind = LayerKind.CONV
    else:
        width = config.block.width
        composite("dense1", cin, n, kd, use_bn=bn and not residual)
        if not config.remove_second_dense:
            composite("dense2", n, n, kd)
        previous = composite("shrink", n, width, 1)
        for b in range(1, config.num_blocks + 1):
            composite(f"block{b}.reduce", width, width, 1)
            large = composite(f"block{b}.large", width, width, config.block.k_large)
            composite(f"block{b}.mix", width, width, 1)
            small = composite(f"block{b}.small", width, width, config.block.k_small)
            skips.append(Skip(source=large, target=small, kind=SkipKind.IN_BLOCK))
            skips.append(Skip(source=previous, target=small, kind=SkipKind.BLOCK))
            previous = small
        composite("expand", width, n, 1, use_bn=bn and not residual)
        final_kind = LayerKind.DECONV

    plans.append(LayerPlan("deconv" if final_kind == LayerKind.DECONV else "output", final_kind, CompositeSpec(
        in_channels=n, out_channels=cin, k=3, use_bn=False, activation=Activation.NONE)))
    if not residual:
        skips.append(Skip(source=INPUT, target=len(plans) - 1, kind=SkipKind.GLOBAL))
    return plans, skips


def check_constraints(config: NetConfig) -> None:
    """
    Ограничения плотного извлечения признаков (f >= 7x7, n >= 128) и
    рекомендации для RC-блока (n >= n_dense / 2, f >= f_dense). Вне
    desk-масштаба нарушение - ошибка, в desk-масштабе - предупреждение.
    """
    if config.kind != NetKind.RCNET:
        return
    problems = []
    if config.k_dense < 7 or config.n_dense < 128:
        problems.append(
            f"плотные слои требуют f >= 7 и n >= 128, получено f={config.k_dense}, n={config.n_dense}"
        )
    if config.block.width < config.n_dense / 2:
        problems.append(f"ширина RC-блока {config.block.width} < n_dense/2 = {config.n_dense / 2:g}")
    if config.block.k_large < config.k_dense:
        problems.append(f"большой фильтр блока {config.block.k_large} < k_dense = {config.k_dense}")
    if not problems:
        return
    if not config.desk_scale:
        raise ArchitectureError("; ".join(problems) + " (используйте desk_scale для уменьшенных сетей)")
    for problem in problems:
        logger.warning("desk_scale: %s", problem)


def build(config: NetConfig, rng_seed) -> Network:
    check_constraints(config)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    plans, skips = plan_layers(config)
    built: List[Layer] = []
    for plan in plans:
        if plan.kind == LayerKind.COMPOSITE:
            params = L.init_params(plan.spec, rng, config.precision)
            built.append(Layer(plan.name, plan.kind, plan.spec, params.conv, params.bn, params.prelu))
        else:
            conv = L.init_conv(plan.spec.in_channels, plan.spec.out_channels, plan.spec.k, bias=True,
                               rng=rng, precision=config.precision,
                               transposed=plan.kind == LayerKind.DECONV)
            built.append(Layer(plan.name, plan.kind, plan.spec, conv))
    net = Network(config, built, skips)
    logger.debug("Построена сеть %s: %d слоёв, %d параметров", config.kind.value, len(built), net.param_count())
    return net


def forward(net: Network, x0: np.ndarray) -> np.ndarray:
    return net.forward(x0)


def backward(net: Network, x0: np.ndarray, grad_out: np.ndarray) -> Gradients:
    """
    x0 должен совпадать со входом последнего прямого прохода.
    """
    if net._cache is None:
        raise StateError("backward без кэша прямого прохода")
    if net._cache[0][INPUT].shape != x0.shape:
        raise ShapeMismatchError(x0.shape, net._cache[0][INPUT].shape, "x0 и кэш прямого прохода")
    return net.backward(grad_out)


def restore(net: Network, x0: np.ndarray) -> np.ndarray:
    """
    Восстановленное изображение независимо от режима реконструкции.
    """
    out = net.forward(x0)
    if net.config.reconstruction == Reconstruction.RESIDUAL:
        return x0.astype(out.dtype, copy=False) - out
    return out


def training_target(config: NetConfig, corrupted: np.ndarray, clean: np.ndarray) -> np.ndarray:
    if config.reconstruction == Reconstruction.RESIDUAL:
        return corrupted - clean
    return clean


# Учёт параметров


def param_count(net: Network) -> int:
    return int(sum(v.size for v in net.named_buffers().values()))


def composite_param_count(cin: int, cout: int, k: int, use_bn: bool, activation: Activation) -> int:
    count = cin * cout * k * k
    count += 2 * cout if use_bn else cout
    if activation == Activation.PRELU:
        count += cout
    return count


def block_param_count(width: int, k_large: int, k_small: int, use_bn: bool = True,
                      activation: Activation = Activation.PRELU) -> int:
    return sum(
        composite_param_count(width, width, k, use_bn, activation)
        for k in (1, k_large, 1, k_small)
    )


def net_param_count(config: NetConfig) -> int:
    """
    Замкнутая формула числа параметров, независимая от построителя.
    """
    n, kd, c = config.n_dense, config.k_dense, config.in_channels
    bn, act = config.use_bn, config.activation
    edge_bn = bn and config.reconstruction != Reconstruction.RESIDUAL
    final = n * c * 3 * 3 + c
    if config.kind == NetKind.WIN:
        return (composite_param_count(c, n, kd, edge_bn, act)
                + 2 * composite_param_count(n, n, kd, bn, act)
                + composite_param_count(n, n, kd, edge_bn, act)
                + final)
    w = config.block.width
    total = composite_param_count(c, n, kd, edge_bn, act)
    if not config.remove_second_dense:
        total += composite_param_count(n, n, kd, bn, act)
    total += composite_param_count(n, w, 1, bn, act)
    total += config.num_blocks * block_param_count(w, config.block.k_large, config.block.k_small, bn, act)
    total += composite_param_count(w, n, 1, edge_bn, act)
    return total + final


def summarize(net: Network) -> List[LayerSummary]:
    incoming: Dict[int, List[str]] = {}
    for skip in net.skips:
        source = "input" if skip.source == INPUT else layer_name(skip.source)
        incoming.setdefault(skip.target, []).append(f"+{source} ({skip.kind.value})")
    rows = []
    for i, layer in enumerate(net.layers):
        rows.append(LayerSummary(
            index=i,
            name=layer.name,
            kind=layer.kind.value,
            k=layer.conv.k,
            in_channels=layer.conv.in_channels,
            out_channels=layer.conv.out_channels,
            bn=layer.bn is not None,
            activation=layer.activation.value,
            params=layer.param_count(),
            skips=", ".join(incoming.get(i, [])),
        ))
    return rows


def render_summary(net: Network) -> str:
    """
    Таблица структуры сети в Markdown (для документации и `rcnet inspect`).
    """
    header = "| # | layer | kind | filter | channels | BN | act | params | skips in |"
    lines = [header, "|---|---|---|---|---|---|---|---|---|"]
    for row in summarize(net):
        lines.append(
            f"| {row.index + 1} | {row.name} | {row.kind} | {row.k}x{row.k} | "
            f"{row.in_channels}->{row.out_channels} | {'yes' if row.bn else 'no'} | "
            f"{row.activation} | {row.params:,} | {row.skips} |"
        )
    lines.append("")
    lines.append(f"layers: {len(net.layers)}, skips: {len(net.skips)}, parameters: {net.param_count():,}")
    return "\n".join(lines)


# Варианты архитектуры для экспериментов

VARIANTS = ("rcnet", "win", "rcnet-no2nd", "rcnet-3blocks", "rcnet-nobn")


def variant_config(base: NetConfig, variant: str) -> NetConfig:
    """
    Вариант на основе базовой конфигурации RC-Net: WIN (ReLU, те же
    плотные слои), без второго плотного слоя, три блока или без BN.
    """
    updates = {
        "rcnet": {},
        "win": {"kind": NetKind.WIN, "activation": Activation.RELU},
        "rcnet-no2nd": {"remove_second_dense": True},
        "rcnet-3blocks": {"num_blocks": 3},
        "rcnet-nobn": {"use_bn": False},
    }.get(variant)
    if updates is None:
        raise ArchitectureError(f"Неизвестный вариант {variant!r}, допустимы: {', '.join(VARIANTS)}")
    return base.model_copy(update=updates)
