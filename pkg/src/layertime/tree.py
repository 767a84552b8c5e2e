"""Tree-structured piecewise-linear regression of layer execution time.

A fitted model is a binary tree of split conditions with a non-negatively
constrained linear fit at every node.  Growth is breadth-first: a node
stops when its own fit is already accurate enough, when too little data
remains, at the depth cap, or when no candidate condition can split it.
Fitted models are immutable and safe to share between threads; fitting
mutates only node-local state, and candidate evaluations at a node are
independent of each other.
"""

from __future__ import annotations

import enum
import json
from collections import deque
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .layers import (
    LayerKind,
    StructureConfig,
    derive_explanatory,
    derive_features,
    explanatory_names,
    feature_names,
)
from .nnls import nnls

__all__ = [
    "ConditionKind",
    "Condition",
    "Dataset",
    "LinearFit",
    "FitParams",
    "Node",
    "TimeModel",
    "ModelFormatError",
    "FORMAT_VERSION",
    "nnls_fit",
    "enumerate_conditions",
    "partition",
    "impurity",
    "fit_tree",
    "save_model",
    "load_model",
    "model_to_dict",
    "model_from_dict",
    "save_models",
    "load_models",
]

FORMAT_VERSION = "1.0"


class ModelFormatError(ValueError):
    """A serialized model document cannot be decoded."""


class ConditionKind(enum.Enum):
    RANGE = "range"
    MULTIPLE = "multiple"


@dataclass(frozen=True)
class Condition:
    """Split predicate on one feature.

    ``RANGE`` keeps records with ``f[j] <= tau`` (cache and working-set
    regimes); ``MULTIPLE`` keeps records with ``f[j] % tau == 0``
    (loop-unrolling and alignment effects).
    """

    feature_index: int
    tau: float
    kind: ConditionKind

    def __post_init__(self) -> None:
        if self.feature_index < 0:
            raise ValueError("feature_index must be >= 0")
        if self.kind is ConditionKind.MULTIPLE:
            if self.tau != int(self.tau) or self.tau < 2:
                raise ValueError(f"multiple condition needs integer tau >= 2, got {self.tau}")
            object.__setattr__(self, "tau", int(self.tau))
        else:
            object.__setattr__(self, "tau", float(self.tau))
            if self.tau <= 0:
                raise ValueError(f"range condition needs tau > 0, got {self.tau}")

    def holds(self, features: np.ndarray) -> np.ndarray:
        """Evaluate the predicate on a feature row or an (n, F) matrix."""
        column = np.asarray(features, dtype=float)[..., self.feature_index]
        if self.kind is ConditionKind.RANGE:
            return column <= self.tau
        return column % self.tau == 0


@dataclass(frozen=True)
class Dataset:
    """Profiling records of one layer kind: features, explanatory vectors, times."""

    kind: LayerKind
    features: np.ndarray
    explanatory: np.ndarray
    times: np.ndarray

    def __post_init__(self) -> None:
        features = np.atleast_2d(np.asarray(self.features, dtype=float))
        explanatory = np.atleast_2d(np.asarray(self.explanatory, dtype=float))
        times = np.asarray(self.times, dtype=float).ravel()
        n = times.shape[0]
        if features.shape[0] != n or explanatory.shape[0] != n:
            raise ValueError("features, explanatory, and times must agree in length")
        if n and times.min() <= 0:
            raise ValueError("all measured times must be > 0")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "explanatory", explanatory)
        object.__setattr__(self, "times", times)

    def __len__(self) -> int:
        return self.times.shape[0]

    @classmethod
    def from_records(
        cls,
        kind: LayerKind,
        configs: Sequence[StructureConfig],
        times: Sequence[float],
    ) -> "Dataset":
        if len(configs) != len(times):
            raise ValueError("configs and times must agree in length")
        for config in configs:
            if config.kind is not kind:
                raise ValueError(
                    f"dataset of kind {kind.value} got a {config.kind.value} config"
                )
        n_features = len(feature_names(kind))
        n_vars = len(explanatory_names(kind))
        features = np.zeros((len(configs), n_features))
        explanatory = np.zeros((len(configs), n_vars))
        for i, config in enumerate(configs):
            features[i] = derive_features(config).as_array()
            explanatory[i] = derive_explanatory(config).as_array()
        return cls(kind=kind, features=features, explanatory=explanatory,
                   times=np.asarray(times, dtype=float))

    def subset(self, mask: np.ndarray) -> "Dataset":
        mask = np.asarray(mask, dtype=bool)
        return Dataset(
            kind=self.kind,
            features=self.features[mask],
            explanatory=self.explanatory[mask],
            times=self.times[mask],
        )


@dataclass(frozen=True)
class LinearFit:
    """Non-negative linear model ``y = w . x + b`` with its training errors."""

    w: np.ndarray
    b: float
    n: int
    mape: float
    mse: float

    def __post_init__(self) -> None:
        w = np.asarray(self.w, dtype=float)
        object.__setattr__(self, "w", w)
        if w.size and w.min() < 0:
            raise ValueError("weights must be non-negative")
        if self.b < 0:
            raise ValueError("intercept must be non-negative")

    def predict(self, explanatory: np.ndarray) -> np.ndarray:
        return np.asarray(explanatory, dtype=float) @ self.w + self.b


@dataclass(frozen=True)
class FitParams:
    """Stopping rules and candidate-condition generation settings."""

    mape_stop: float = 0.05
    min_leaf: int = 15
    max_depth: int = 12
    multiple_taus: tuple[int, ...] = (2, 3, 4, 6, 8, 16, 32, 64, 128)
    range_quantiles: int = 16
    noise_seed: int = 0  # reserved for randomized subroutines; fitting is deterministic

    def __post_init__(self) -> None:
        if self.mape_stop <= 0:
            raise ValueError("mape_stop must be > 0")
        if self.min_leaf < 2:
            raise ValueError("min_leaf must be >= 2")
        object.__setattr__(self, "multiple_taus", tuple(int(t) for t in self.multiple_taus))


@dataclass
class Node:
    """One tree node: a fit, and for internal nodes a condition plus children."""

    fit: LinearFit
    condition: Condition | None = None
    left: "Node | None" = None
    right: "Node | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.condition is None


@dataclass(frozen=True)
class TimeModel:
    """Immutable fitted execution-time model for one layer kind."""

    kind: LayerKind
    root: Node
    fit_params: FitParams = field(default_factory=FitParams)

    def __post_init__(self) -> None:
        for _, node in self.nodes():
            has_children = node.left is not None and node.right is not None
            no_children = node.left is None and node.right is None
            if not (has_children or no_children):
                raise ValueError("every node must have zero or two children")
            if has_children == (node.condition is None):
                raise ValueError("internal nodes carry a condition, leaves do not")

    def nodes(self) -> Iterator[tuple[int, Node]]:
        """Breadth-first (id, node) pairs; ids are the serialization ids."""
        queue: deque[Node] = deque([self.root])
        i = 0
        while queue:
            node = queue.popleft()
            yield i, node
            i += 1
            if node.left is not None:
                queue.append(node.left)
                queue.append(node.right)

    @property
    def n_nodes(self) -> int:
        return sum(1 for _ in self.nodes())

    def route_features(self, features: np.ndarray) -> Node:
        """Walk one feature row from the root to its unique leaf."""
        node = self.root
        while not node.is_leaf:
            node = node.left if bool(node.condition.holds(features)) else node.right
        return node

    def predict(self, config: StructureConfig) -> float:
        """Predicted execution time in milliseconds for one configuration."""
        if config.kind is not self.kind:
            raise ValueError(
                f"model fits {self.kind.value} layers, got {config.kind.value}"
            )
        leaf = self.route_features(derive_features(config).as_array())
        x = derive_explanatory(config).as_array()
        return float(x @ leaf.fit.w + leaf.fit.b)

    def predict_rows(self, features: np.ndarray, explanatory: np.ndarray) -> np.ndarray:
        """Vector of predictions for pre-derived feature/explanatory rows."""
        features = np.atleast_2d(features)
        explanatory = np.atleast_2d(explanatory)
        out = np.empty(features.shape[0])
        for i in range(features.shape[0]):
            leaf = self.route_features(features[i])
            out[i] = explanatory[i] @ leaf.fit.w + leaf.fit.b
        return out


def nnls_fit(dataset: Dataset) -> LinearFit:
    """Best non-negative linear fit of a dataset, with its in-sample errors."""
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot fit an empty dataset")
    design = np.hstack([dataset.explanatory, np.ones((n, 1))])
    coef = nnls(design, dataset.times)
    residual = design @ coef - dataset.times
    return LinearFit(
        w=coef[:-1],
        b=float(coef[-1]),
        n=n,
        mape=float(np.mean(np.abs(residual) / dataset.times)),
        mse=float(np.mean(residual**2)),
    )


def enumerate_conditions(dataset: Dataset, params: FitParams) -> list[Condition]:
    """Candidate split conditions for a node's data.

    Per feature: multiple conditions for each configured modulus that
    populates both residue classes, and range conditions at deduplicated
    empirical quantiles.  Candidates leaving either side with fewer than
    ``min_leaf`` records are dropped, so the list may be empty.
    """
    n = len(dataset)
    conditions: list[Condition] = []
    quantile_levels = np.linspace(0.0, 1.0, params.range_quantiles + 2)[1:-1]
    for j in range(dataset.features.shape[1]):
        column = dataset.features[:, j]
        if n == 0 or column.min() == column.max():
            continue
        for tau in params.multiple_taus:
            n_left = int((column % tau == 0).sum())
            if params.min_leaf <= n_left <= n - params.min_leaf:
                conditions.append(Condition(j, tau, ConditionKind.MULTIPLE))
        for tau in np.unique(np.quantile(column, quantile_levels)):
            if tau <= 0:
                continue
            n_left = int((column <= tau).sum())
            if params.min_leaf <= n_left <= n - params.min_leaf:
                conditions.append(Condition(j, float(tau), ConditionKind.RANGE))
    return conditions


def partition(dataset: Dataset, condition: Condition) -> tuple[Dataset, Dataset]:
    """Split records into (satisfying, complement), preserving order."""
    mask = condition.holds(dataset.features)
    return dataset.subset(mask), dataset.subset(~mask)


def _weighted_impurity(n_left: int, mse_left: float, n_right: int, mse_right: float) -> float:
    # size-weighted mean of the two side errors
    return (n_left * mse_left + n_right * mse_right) / (n_left + n_right)


def impurity(dataset: Dataset, condition: Condition) -> float:
    """Size-weighted mean squared error of the two side fits under a condition."""
    left, right = partition(dataset, condition)
    if len(left) == 0 or len(right) == 0:
        raise ValueError("condition produces a one-sided partition")
    return _weighted_impurity(
        len(left), nnls_fit(left).mse, len(right), nnls_fit(right).mse
    )


@dataclass(frozen=True)
class _Split:
    condition: Condition
    mask: np.ndarray
    left_fit: LinearFit
    right_fit: LinearFit
    impurity: float


def _tie_break_key(condition: Condition) -> tuple[int, int, float]:
    # prefer multiple over range, then lower feature index, then smaller tau
    return (
        0 if condition.kind is ConditionKind.MULTIPLE else 1,
        condition.feature_index,
        float(condition.tau),
    )


def _best_split(dataset: Dataset, params: FitParams) -> _Split | None:
    candidates = enumerate_conditions(dataset, params)
    if not candidates:
        return None
    splits: list[_Split] = []
    for condition in candidates:
        mask = condition.holds(dataset.features)
        left_fit = nnls_fit(dataset.subset(mask))
        right_fit = nnls_fit(dataset.subset(~mask))
        splits.append(
            _Split(
                condition=condition,
                mask=mask,
                left_fit=left_fit,
                right_fit=right_fit,
                impurity=_weighted_impurity(
                    left_fit.n, left_fit.mse, right_fit.n, right_fit.mse
                ),
            )
        )
    best = min(split.impurity for split in splits)
    threshold = best + 1e-12 * abs(best)
    eligible = [split for split in splits if split.impurity <= threshold]
    return min(eligible, key=lambda split: _tie_break_key(split.condition))


def fit_tree(dataset: Dataset, params: FitParams | None = None) -> TimeModel:
    """Grow the condition tree breadth-first.

    Every node records its own fit.  A dequeued node becomes a leaf when
    its in-sample MAPE is below ``mape_stop``, when it holds fewer than
    ``min_leaf`` records, at ``max_depth``, or when no candidate condition
    survives; otherwise the impurity-minimizing condition splits it and
    both children are fitted and enqueued.
    """
    if params is None:
        params = FitParams()
    if len(dataset) == 0:
        raise ValueError("cannot fit an empty dataset")
    root = Node(fit=nnls_fit(dataset))
    queue: deque[tuple[Node, Dataset, int]] = deque([(root, dataset, 0)])
    while queue:
        node, data, depth = queue.popleft()
        if node.fit.mape < params.mape_stop:
            continue
        if len(data) < params.min_leaf:
            continue
        if depth >= params.max_depth:
            continue
        split = _best_split(data, params)
        if split is None:
            continue
        node.condition = split.condition
        node.left = Node(fit=split.left_fit)
        node.right = Node(fit=split.right_fit)
        queue.append((node.left, data.subset(split.mask), depth + 1))
        queue.append((node.right, data.subset(~split.mask), depth + 1))
    return TimeModel(kind=dataset.kind, root=root, fit_params=params)


# --- serialization ---------------------------------------------------------


def model_to_dict(model: TimeModel) -> dict:
    ordered = list(model.nodes())
    ids = {id(node): i for i, node in ordered}
    nodes = []
    for i, node in ordered:
        condition = None
        if node.condition is not None:
            condition = {
                "feature": node.condition.feature_index,
                "tau": node.condition.tau,
                "kind": node.condition.kind.value,
            }
        nodes.append(
            {
                "id": i,
                "cond": condition,
                "w": [float(v) for v in node.fit.w],
                "b": float(node.fit.b),
                "n": int(node.fit.n),
                "mape": float(node.fit.mape),
                "mse": float(node.fit.mse),
                "left": ids[id(node.left)] if node.left is not None else None,
                "right": ids[id(node.right)] if node.right is not None else None,
            }
        )
    params = model.fit_params
    return {
        "format_version": FORMAT_VERSION,
        "layer_kind": model.kind.value,
        "fit_params": {
            "mape_stop": params.mape_stop,
            "min_leaf": params.min_leaf,
            "max_depth": params.max_depth,
            "multiple_taus": list(params.multiple_taus),
            "range_quantiles": params.range_quantiles,
            "noise_seed": params.noise_seed,
        },
        "nodes": nodes,
    }


def _check_version(doc: dict) -> None:
    version = doc.get("format_version")
    if not isinstance(version, str) or "." not in version:
        raise ModelFormatError(f"missing or malformed format_version: {version!r}")
    major = version.split(".", 1)[0]
    if major != FORMAT_VERSION.split(".", 1)[0]:
        raise ModelFormatError(
            f"unsupported format_version {version!r} (expected major {FORMAT_VERSION.split('.', 1)[0]})"
        )


def _fit_params_from_dict(doc: dict) -> FitParams:
    defaults = FitParams()
    return FitParams(
        mape_stop=doc.get("mape_stop", defaults.mape_stop),
        min_leaf=doc.get("min_leaf", defaults.min_leaf),
        max_depth=doc.get("max_depth", defaults.max_depth),
        multiple_taus=tuple(doc.get("multiple_taus", defaults.multiple_taus)),
        range_quantiles=doc.get("range_quantiles", defaults.range_quantiles),
        noise_seed=doc.get("noise_seed", defaults.noise_seed),
    )


def model_from_dict(doc: dict) -> TimeModel:
    if not isinstance(doc, dict):
        raise ModelFormatError("model document must be an object")
    _check_version(doc)
    try:
        kind = LayerKind(doc["layer_kind"])
        node_docs = {int(nd["id"]): nd for nd in doc["nodes"]}
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed model document: {exc}") from exc
    if not node_docs:
        raise ModelFormatError("model document has no nodes")

    def build(node_id: int, seen: set[int]) -> Node:
        if node_id in seen:
            raise ModelFormatError(f"node {node_id} appears in a cycle")
        seen = seen | {node_id}
        try:
            nd = node_docs[node_id]
        except KeyError:
            raise ModelFormatError(f"missing node id {node_id}") from None
        try:
            fit = LinearFit(
                w=np.asarray(nd["w"], dtype=float),
                b=float(nd["b"]),
                n=int(nd.get("n", 0)),
                mape=float(nd.get("mape", 0.0)),
                mse=float(nd.get("mse", 0.0)),
            )
            condition = None
            if nd.get("cond") is not None:
                cd = nd["cond"]
                condition = Condition(
                    feature_index=int(cd["feature"]),
                    tau=cd["tau"],
                    kind=ConditionKind(cd["kind"]),
                )
            left_id, right_id = nd.get("left"), nd.get("right")
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFormatError(f"malformed node {node_id}: {exc}") from exc
        if (left_id is None) != (right_id is None):
            raise ModelFormatError(f"node {node_id} has exactly one child")
        node = Node(fit=fit, condition=condition)
        if left_id is not None:
            node.left = build(int(left_id), seen)
            node.right = build(int(right_id), seen)
        return node

    root = build(0, set())
    try:
        return TimeModel(
            kind=kind, root=root, fit_params=_fit_params_from_dict(doc.get("fit_params", {}))
        )
    except ValueError as exc:
        raise ModelFormatError(str(exc)) from exc


def save_model(model: TimeModel) -> bytes:
    """Serialize a model; ``load_model`` restores it with identical predictions."""
    return json.dumps(model_to_dict(model), sort_keys=True, indent=1).encode("utf-8")


def load_model(data: bytes | str) -> TimeModel:
    if isinstance(data, bytes):
        data = data.decode("utf-8", errors="replace")
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"not valid JSON: {exc}") from exc
    return model_from_dict(doc)


def save_models(models: dict[LayerKind, TimeModel]) -> bytes:
    """Serialize a kind-keyed family of models into one document."""
    doc = {
        "format_version": FORMAT_VERSION,
        "models": [model_to_dict(models[kind]) for kind in sorted(models, key=lambda k: k.value)],
    }
    return json.dumps(doc, sort_keys=True, indent=1).encode("utf-8")


def load_models(data: bytes | str) -> dict[LayerKind, TimeModel]:
    if isinstance(data, bytes):
        data = data.decode("utf-8", errors="replace")
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ModelFormatError("model file must be a JSON object")
    if "models" not in doc:
        # single-model document
        model = model_from_dict(doc)
        return {model.kind: model}
    _check_version(doc)
    models: dict[LayerKind, TimeModel] = {}
    for entry in doc["models"]:
        model = model_from_dict(entry)
        if model.kind in models:
            raise ModelFormatError(f"duplicate model for kind {model.kind.value}")
        models[model.kind] = model
    return models
