"""Structure expansion to execution-time local minima and compression steering.

Expansion walks a fitted condition tree, rounding width coordinates up to
the moduli of multiple-condition nodes whenever the node's own fits say
the rounded structure runs no slower.  Whole networks are expanded layer
by layer with width conflicts between neighbours resolved by total
predicted time.  Compression couples an external loss evaluator with the
predicted network time into one objective and searches layer widths by
coordinate descent (or exhaustively, as a test oracle).

Expansion is pure given an immutable model.  Evaluator calls are assumed
expensive and side-effect-free; the search invokes the evaluator at most
``budget`` times.
"""

from __future__ import annotations

import itertools
import json
import math
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, replace as dc_replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .layers import (
    RECURRENT_KINDS,
    LayerKind,
    StructureConfig,
    config_from_dict,
    config_to_dict,
    derive_explanatory,
    derive_features,
    expandable_features,
    explanatory_names,
    feature_names,
    width_fields,
)
from .tree import FORMAT_VERSION, ConditionKind, TimeModel

__all__ = [
    "NetworkSpec",
    "NetworkFormatError",
    "EvaluationError",
    "AcceptedExpansion",
    "LayerExpansion",
    "ConflictResolution",
    "ExpansionTrace",
    "ACCEPTANCE_RULE",
    "CommandEvaluator",
    "expand_layer",
    "expand_network",
    "zero_pad_plan",
    "TensorEmbed",
    "LayerPadPlan",
    "network_time",
    "time_aware_objective",
    "greedy_compress",
    "brute_force_compress",
    "rnn_time_floor",
    "save_network",
    "load_network",
    "network_to_dict",
    "network_from_dict",
]

#: Expansions commit only when the expanded structure is predicted to run
#: no slower than the structure as it stands.
ACCEPTANCE_RULE = "accept when expanded_time <= current_time"

# width growth cap, as a multiple of the original coordinate
_EXPANSION_CAP = 2


class NetworkFormatError(ValueError):
    """A serialized network document cannot be decoded."""


class EvaluationError(RuntimeError):
    """An external loss evaluation failed."""


_DENSE_KINDS = frozenset({LayerKind.FC, LayerKind.GRU, LayerKind.LSTM})


def _coupled_kinds(a: LayerKind, b: LayerKind) -> bool:
    # consecutive layers share a width only within the same family
    if a is LayerKind.CNN and b is LayerKind.CNN:
        return True
    return a in _DENSE_KINDS and b in _DENSE_KINDS


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer configurations with consistent shared widths."""

    layers: tuple[StructureConfig, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        for i in range(len(self.layers) - 1):
            a, b = self.layers[i], self.layers[i + 1]
            if not _coupled_kinds(a.kind, b.kind):
                continue
            out_field = width_fields(a.kind)[1]
            in_field = width_fields(b.kind)[0]
            if getattr(a, out_field) != getattr(b, in_field):
                raise ValueError(
                    f"layers {i} and {i + 1} disagree on their shared width: "
                    f"{getattr(a, out_field)} vs {getattr(b, in_field)}"
                )

    def __len__(self) -> int:
        return len(self.layers)


def _model_for(model_map: Mapping[LayerKind, TimeModel], kind: LayerKind) -> TimeModel:
    model = model_map.get(kind)
    if model is None:
        raise ValueError(f"no model for layer kind {kind.value}")
    return model


@dataclass(frozen=True)
class AcceptedExpansion:
    """One committed rounding, with the two node predictions that allowed it."""

    feature: str
    tau: int
    expanded_time: float
    current_time: float


@dataclass(frozen=True)
class LayerExpansion:
    original: StructureConfig
    expanded: StructureConfig
    time_before: float
    time_after: float
    accepted: tuple[AcceptedExpansion, ...] = ()
    reverted: bool = False


@dataclass(frozen=True)
class ConflictResolution:
    """A junction where neighbouring expansions disagreed on the shared width."""

    junction: int
    upstream_width: int
    downstream_width: int
    time_with_upstream: float
    time_with_downstream: float
    kept: str


@dataclass(frozen=True)
class ExpansionTrace:
    entries: tuple[LayerExpansion, ...]
    conflicts: tuple[ConflictResolution, ...] = ()
    reverted: bool = False
    rule: str = ACCEPTANCE_RULE


def _obeys_trail(trail: list, features: np.ndarray) -> bool:
    return all(bool(cond.holds(features)) == truth for cond, truth in trail)


def _walk_once(
    model: TimeModel, config: StructureConfig, original: StructureConfig
) -> tuple[StructureConfig, list[AcceptedExpansion]]:
    names = feature_names(model.kind)
    expandable = set(expandable_features(model.kind))
    current = config
    f = derive_features(current).as_array()
    x = derive_explanatory(current).as_array()
    trail: list = []
    accepted: list[AcceptedExpansion] = []
    node = model.root
    while not node.is_leaf:
        cond = node.condition
        if cond.kind is ConditionKind.RANGE:
            truth = bool(cond.holds(f))
            trail.append((cond, truth))
            node = node.left if truth else node.right
            continue
        tau = int(cond.tau)
        value = f[cond.feature_index]
        target = tau * math.ceil(value / tau)
        if target == value:
            # already on the multiple: branch toward the cheaper sibling fit
            expanded_time = float(x @ node.left.fit.w + node.left.fit.b)
            current_time = float(x @ node.right.fit.w + node.right.fit.b)
            node = node.left if expanded_time <= current_time else node.right
            continue
        field = names[cond.feature_index]
        if field in expandable and target <= _EXPANSION_CAP * getattr(original, field):
            candidate = dc_replace(current, **{field: int(target)})
            f_hat = derive_features(candidate).as_array()
            x_hat = derive_explanatory(candidate).as_array()
            expanded_time = float(x_hat @ node.left.fit.w + node.left.fit.b)
            current_time = float(x @ node.right.fit.w + node.right.fit.b)
            if expanded_time <= current_time and _obeys_trail(trail, f_hat):
                accepted.append(
                    AcceptedExpansion(
                        feature=field,
                        tau=tau,
                        expanded_time=expanded_time,
                        current_time=current_time,
                    )
                )
                current, f, x = candidate, f_hat, x_hat
                node = node.left
                continue
        node = node.right
    return current, accepted


def expand_layer(
    model: TimeModel, config: StructureConfig
) -> tuple[StructureConfig, LayerExpansion]:
    """Round a layer's widths up to nearby execution-time local minima.

    The tree walk is iterated to a fixed point (each committed rounding
    strictly grows an integer width under a hard 2x cap, so the iteration
    terminates), and the result is kept only if the full-model prediction
    did not get worse.  Hence the returned configuration never predicts
    slower than the input, never shrinks a coordinate, and re-expanding it
    is a no-op.
    """
    if model.kind is not config.kind:
        raise ValueError(
            f"model fits {model.kind.value} layers, got {config.kind.value}"
        )
    width_total = sum(getattr(config, name) for name in expandable_features(config.kind))
    current = config
    accepted: list[AcceptedExpansion] = []
    for _ in range(_EXPANSION_CAP * width_total + 1):
        walked, walk_accepted = _walk_once(model, current, config)
        if walked == current:
            break
        accepted.extend(walk_accepted)
        current = walked
    time_before = model.predict(config)
    time_after = model.predict(current)
    reverted = time_after > time_before
    if reverted:
        current = config
        time_after = time_before
        accepted = []
    entry = LayerExpansion(
        original=config,
        expanded=current,
        time_before=time_before,
        time_after=time_after,
        accepted=tuple(accepted),
        reverted=reverted,
    )
    return current, entry


def expand_network(
    model_map: Mapping[LayerKind, TimeModel], net: NetworkSpec
) -> tuple[NetworkSpec, ExpansionTrace]:
    """Expand every layer, then reconcile neighbouring width conflicts.

    Layers are processed in order.  When an expanded output width and the
    next layer's expanded input width disagree, both consistent choices
    are priced over the whole network and the cheaper one is kept.  The
    result is adjacency-consistent and never predicts slower in total than
    the input network.
    """
    entries: list[LayerExpansion] = []
    configs: list[StructureConfig] = []
    for layer in net.layers:
        expanded, entry = expand_layer(_model_for(model_map, layer.kind), layer)
        configs.append(expanded)
        entries.append(entry)

    conflicts: list[ConflictResolution] = []
    for i in range(len(configs) - 1):
        a, b = configs[i], configs[i + 1]
        if not _coupled_kinds(a.kind, b.kind):
            continue
        out_field = width_fields(a.kind)[1]
        in_field = width_fields(b.kind)[0]
        upstream, downstream = getattr(a, out_field), getattr(b, in_field)
        if upstream == downstream:
            continue
        keep_upstream = list(configs)
        keep_upstream[i + 1] = dc_replace(b, **{in_field: upstream})
        keep_downstream = list(configs)
        keep_downstream[i] = dc_replace(a, **{out_field: downstream})
        time_upstream = _total_time(model_map, keep_upstream)
        time_downstream = _total_time(model_map, keep_downstream)
        if time_downstream < time_upstream:
            configs = keep_downstream
            kept = "downstream"
        else:
            configs = keep_upstream
            kept = "upstream"
        conflicts.append(
            ConflictResolution(
                junction=i,
                upstream_width=upstream,
                downstream_width=downstream,
                time_with_upstream=time_upstream,
                time_with_downstream=time_downstream,
                kept=kept,
            )
        )

    expanded_net = NetworkSpec(tuple(configs))
    time_before = network_time(model_map, net)
    time_after = network_time(model_map, expanded_net)
    reverted = time_after > time_before
    if reverted:
        expanded_net = net
    trace = ExpansionTrace(
        entries=tuple(entries), conflicts=tuple(conflicts), reverted=reverted
    )
    return expanded_net, trace


def _total_time(
    model_map: Mapping[LayerKind, TimeModel], configs: Sequence[StructureConfig]
) -> float:
    return sum(_model_for(model_map, c.kind).predict(c) for c in configs)


def network_time(model_map: Mapping[LayerKind, TimeModel], net: NetworkSpec) -> float:
    """Total predicted execution time of a network, in milliseconds."""
    return _total_time(model_map, net.layers)


def time_aware_objective(
    evaluator: Callable[[NetworkSpec], float],
    model_map: Mapping[LayerKind, TimeModel],
    net: NetworkSpec,
    lam: float,
) -> float:
    """Compression objective: evaluator loss plus ``lam`` times predicted time."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    return float(evaluator(net)) + lam * network_time(model_map, net)


# --- zero-padding plans ------------------------------------------------------


@dataclass(frozen=True)
class TensorEmbed:
    """Where each old weight block lands inside the expanded tensor.

    ``blocks`` pairs source ranges with destination ranges, one
    ``(start, stop)`` per axis; everything outside the destination blocks
    is zero-filled.  Weight layouts: FC ``(in, out)``; CNN
    ``(kh, kw, in_c, out_c)``; GRU/LSTM gates concatenated along the
    columns of ``(in + out, gates * out)``.
    """

    name: str
    old_shape: tuple[int, ...]
    new_shape: tuple[int, ...]
    blocks: tuple[tuple[tuple[tuple[int, int], ...], tuple[tuple[int, int], ...]], ...]


@dataclass(frozen=True)
class LayerPadPlan:
    index: int
    kind: LayerKind
    tensors: tuple[TensorEmbed, ...]


def _origin_embed(name: str, old_shape: tuple[int, ...], new_shape: tuple[int, ...]) -> TensorEmbed:
    ranges = tuple((0, extent) for extent in old_shape)
    return TensorEmbed(name=name, old_shape=old_shape, new_shape=new_shape,
                       blocks=((ranges, ranges),))


def _layer_embeds(old: StructureConfig, new: StructureConfig) -> list[TensorEmbed]:
    kind = old.kind
    if kind is LayerKind.FC:
        return [
            _origin_embed("weight", (old.in_dim, old.out_dim), (new.in_dim, new.out_dim)),
            _origin_embed("bias", (old.out_dim,), (new.out_dim,)),
        ]
    if kind is LayerKind.CNN:
        kernel = (old.kernel_height, old.kernel_width)
        return [
            _origin_embed(
                "weight", kernel + (old.in_channel, old.out_channel),
                kernel + (new.in_channel, new.out_channel),
            ),
            _origin_embed("bias", (old.out_channel,), (new.out_channel,)),
        ]
    gates = 3 if kind is LayerKind.GRU else 4
    i0, o0 = old.in_dim, old.out_dim
    i1, o1 = new.in_dim, new.out_dim
    row_blocks = [((0, i0), (0, i0)), ((i0, i0 + o0), (i1, i1 + o0))]
    col_blocks = [((g * o0, (g + 1) * o0), (g * o1, g * o1 + o0)) for g in range(gates)]
    weight_blocks = tuple(
        ((rows_src, cols_src), (rows_dst, cols_dst))
        for rows_src, rows_dst in row_blocks
        for cols_src, cols_dst in col_blocks
    )
    bias_blocks = tuple(((src,), (dst,)) for src, dst in col_blocks)
    return [
        TensorEmbed(
            name="weight",
            old_shape=(i0 + o0, gates * o0),
            new_shape=(i1 + o1, gates * o1),
            blocks=weight_blocks,
        ),
        TensorEmbed(
            name="bias", old_shape=(gates * o0,), new_shape=(gates * o1,),
            blocks=bias_blocks,
        ),
    ]


def zero_pad_plan(old: NetworkSpec, new: NetworkSpec) -> tuple[LayerPadPlan, ...]:
    """Index plan embedding each old weight block into its expanded shape.

    Purely a shape/indices artifact: applying it copies the old blocks and
    zero-fills the rest, which leaves the network function unchanged.
    Only width coordinates may differ between ``old`` and ``new``, and
    never downward.
    """
    if len(old.layers) != len(new.layers):
        raise ValueError("networks must have the same number of layers")
    plans: list[LayerPadPlan] = []
    for i, (a, b) in enumerate(zip(old.layers, new.layers)):
        if a.kind is not b.kind:
            raise ValueError(f"layer {i} changes kind: {a.kind.value} -> {b.kind.value}")
        widths = set(expandable_features(a.kind))
        for name in config_to_dict(a):
            if name == "kind" or name in widths:
                continue
            if getattr(a, name) != getattr(b, name):
                raise ValueError(f"layer {i} changes non-width field {name}")
        for name in widths:
            if getattr(b, name) < getattr(a, name):
                raise ValueError(
                    f"layer {i} shrinks {name}: {getattr(a, name)} -> {getattr(b, name)}"
                )
        if a == b:
            continue
        plans.append(LayerPadPlan(index=i, kind=a.kind, tensors=tuple(_layer_embeds(a, b))))
    return tuple(plans)


# --- compression search ------------------------------------------------------


class _BudgetExhausted(Exception):
    pass


def _net_key(net: NetworkSpec) -> tuple:
    return tuple(tuple(sorted(config_to_dict(c).items())) for c in net.layers)


class _Objective:
    """Caching, budget-limited view of the compression objective."""

    def __init__(self, evaluator, model_map, lam, budget):
        self.evaluator = evaluator
        self.model_map = model_map
        self.lam = lam
        self.budget = budget
        self.calls = 0
        self.cache: dict[tuple, float] = {}

    def __call__(self, net: NetworkSpec) -> float:
        key = _net_key(net)
        if key not in self.cache:
            if self.calls >= self.budget:
                raise _BudgetExhausted
            self.calls += 1
            loss = float(self.evaluator(net))
            if not math.isfinite(loss) or loss < 0:
                raise EvaluationError(f"evaluator returned invalid loss {loss!r}")
            self.cache[key] = loss
        return self.cache[key] + self.lam * network_time(self.model_map, net)


def _check_grid(net: NetworkSpec, width_grid: Sequence[Sequence[int]]) -> list[list[int]]:
    if len(width_grid) != len(net.layers):
        raise ValueError("width_grid must give one candidate list per layer")
    grids: list[list[int]] = []
    for i, grid in enumerate(width_grid):
        widths = sorted({int(w) for w in grid})
        if not widths:
            raise ValueError(f"empty width grid for layer {i}")
        if widths[0] < 1:
            raise ValueError(f"layer {i} grid contains a width < 1")
        grids.append(widths)
    return grids


def _apply_widths(net: NetworkSpec, widths: Sequence[int]) -> NetworkSpec:
    layers = list(net.layers)
    for i, width in enumerate(widths):
        out_field = width_fields(layers[i].kind)[1]
        layers[i] = dc_replace(layers[i], **{out_field: int(width)})
        if i + 1 < len(layers) and _coupled_kinds(layers[i].kind, layers[i + 1].kind):
            in_field = width_fields(layers[i + 1].kind)[0]
            layers[i + 1] = dc_replace(layers[i + 1], **{in_field: int(width)})
    return NetworkSpec(tuple(layers))


def _current_widths(net: NetworkSpec) -> list[int]:
    return [getattr(layer, width_fields(layer.kind)[1]) for layer in net.layers]


def greedy_compress(
    evaluator: Callable[[NetworkSpec], float],
    model_map: Mapping[LayerKind, TimeModel],
    net: NetworkSpec,
    lam: float,
    width_grid: Sequence[Sequence[int]],
    budget: int = 1000,
) -> NetworkSpec:
    """Coordinate descent over layer widths, then a final expansion pass.

    Repeatedly applies the single-layer width move (neighbouring input
    widths repaired) that most decreases the objective, stopping at a
    local optimum or when the evaluator budget runs out.  The converged
    network is expanded to nearby execution-time local minima, and the
    expansion is kept only if it does not worsen the objective, so the
    result never scores above the input network.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    grids = _check_grid(net, width_grid)
    objective = _Objective(evaluator, model_map, lam, budget)
    current = net
    try:
        best = objective(current)
        improved = True
        while improved:
            improved = False
            move: tuple[float, NetworkSpec] | None = None
            widths = _current_widths(current)
            for i, grid in enumerate(grids):
                for width in grid:
                    if width == widths[i]:
                        continue
                    candidate_widths = list(widths)
                    candidate_widths[i] = width
                    candidate = _apply_widths(current, candidate_widths)
                    value = objective(candidate)
                    if value < best and (move is None or value < move[0]):
                        move = (value, candidate)
            if move is not None:
                best, current = move
                improved = True
        expanded, _ = expand_network(model_map, current)
        if expanded != current and objective(expanded) <= best:
            current = expanded
    except _BudgetExhausted:
        pass
    return current


def brute_force_compress(
    evaluator: Callable[[NetworkSpec], float],
    model_map: Mapping[LayerKind, TimeModel],
    net: NetworkSpec,
    lam: float,
    width_grid: Sequence[Sequence[int]],
) -> NetworkSpec:
    """Exact grid minimizer of the compression objective (test oracle).

    Every width combination is expanded before scoring; ties go to the
    lexicographically smallest widths.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    grids = _check_grid(net, width_grid)
    total = 1
    for grid in grids:
        total *= len(grid)
    if total > 1_000_000:
        raise ValueError(f"search space of {total} candidates is too large")
    objective = _Objective(evaluator, model_map, lam, budget=math.inf)
    best: tuple[float, NetworkSpec] | None = None
    for widths in itertools.product(*grids):
        candidate = _apply_widths(net, widths)
        expanded, _ = expand_network(model_map, candidate)
        value = objective(expanded)
        if best is None or value < best[0]:
            best = (value, expanded)
    return net if best is None else best[1]


def rnn_time_floor(model: TimeModel, net: NetworkSpec) -> float:
    """Irreducible per-step setup time of the network's recurrent layers.

    Each matching layer is routed at its minimal structure (both dims 1)
    and contributes ``step count x leaf step coefficient``: the part of
    its time that no width compression can remove.
    """
    if model.kind not in RECURRENT_KINDS:
        raise ValueError(f"model kind {model.kind.value} is not recurrent")
    step_index = explanatory_names(model.kind).index("step")
    floor = 0.0
    for layer in net.layers:
        if layer.kind is not model.kind:
            continue
        minimal = dc_replace(layer, in_dim=1, out_dim=1)
        leaf = model.route_features(derive_features(minimal).as_array())
        floor += layer.step * float(leaf.fit.w[step_index])
    return floor


# --- network files and external evaluators -----------------------------------


def network_to_dict(net: NetworkSpec) -> dict:
    links = []
    for i in range(len(net.layers) - 1):
        a, b = net.layers[i], net.layers[i + 1]
        if not _coupled_kinds(a.kind, b.kind):
            continue
        out_field = width_fields(a.kind)[1]
        in_field = width_fields(b.kind)[0]
        links.append({"src": i, "dst": i + 1, "field": f"{out_field}->{in_field}"})
    return {
        "format_version": FORMAT_VERSION,
        "layers": [config_to_dict(layer) for layer in net.layers],
        "links": links,
    }


def network_from_dict(doc: dict) -> NetworkSpec:
    if not isinstance(doc, dict) or "layers" not in doc:
        raise NetworkFormatError("network document must be an object with 'layers'")
    try:
        layers = tuple(config_from_dict(record) for record in doc["layers"])
    except (TypeError, ValueError) as exc:
        raise NetworkFormatError(f"malformed layer record: {exc}") from exc
    try:
        net = NetworkSpec(layers)
    except ValueError as exc:
        raise NetworkFormatError(str(exc)) from exc
    for link in doc.get("links", ()):
        try:
            src, dst = int(link["src"]), int(link["dst"])
        except (KeyError, TypeError, ValueError) as exc:
            raise NetworkFormatError(f"malformed link: {link!r}") from exc
        if not (0 <= src < len(layers) and 0 <= dst < len(layers)):
            raise NetworkFormatError(f"link points outside the network: {link!r}")
    return net


def save_network(net: NetworkSpec) -> bytes:
    return json.dumps(network_to_dict(net), sort_keys=True, indent=1).encode("utf-8")


def load_network(data: bytes | str) -> NetworkSpec:
    if isinstance(data, bytes):
        data = data.decode("utf-8", errors="replace")
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise NetworkFormatError(f"not valid JSON: {exc}") from exc
    return network_from_dict(doc)


class CommandEvaluator:
    """Loss evaluator backed by an external command.

    The command is invoked with the path of a network file appended to its
    arguments and must print a single non-negative loss on stdout; a
    nonzero exit status is an evaluation failure.
    """

    def __init__(self, command: str | Sequence[str]):
        self.argv = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.argv:
            raise ValueError("evaluator command must not be empty")

    def __call__(self, net: NetworkSpec) -> float:
        with tempfile.TemporaryDirectory(prefix="layertime-eval-") as workdir:
            path = Path(workdir) / "network.json"
            path.write_bytes(save_network(net))
            proc = subprocess.run(
                [*self.argv, str(path)], capture_output=True, text=True
            )
        if proc.returncode != 0:
            raise EvaluationError(
                f"evaluator exited with status {proc.returncode}: {proc.stderr.strip()}"
            )
        tokens = proc.stdout.split()
        if not tokens:
            raise EvaluationError("evaluator printed no loss value")
        try:
            loss = float(tokens[0])
        except ValueError as exc:
            raise EvaluationError(f"evaluator printed a non-numeric loss: {tokens[0]!r}") from exc
        if not math.isfinite(loss) or loss < 0:
            raise EvaluationError(f"evaluator returned invalid loss {loss!r}")
        return loss
