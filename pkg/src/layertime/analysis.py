"""Statistical and analytical post-processing of fitted time models.

Covers per-variable significance of the explanatory vector, the expansion
benefit of rounding a channel count up at a multiple-condition node, the
square region in channel space where that rounding provably helps, and a
simplified predictor that snaps configurations up before routing.  All
functions are pure over immutable inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace as dc_replace
from typing import Sequence

import numpy as np
from scipy import stats

from .layers import (
    LayerKind,
    Padding,
    StructureConfig,
    conv_output_dims,
    explanatory_names,
    feature_names,
)
from .tree import Condition, ConditionKind, Dataset, LinearFit, TimeModel

__all__ = [
    "VariableSignificance",
    "SignificanceReport",
    "ConvGeometry",
    "ChannelPolynomial",
    "ExpansionRegion",
    "SimplifiedTimeModel",
    "coefficient_pvalues",
    "channel_time_polynomial",
    "expansion_benefit",
    "safe_region",
    "verify_region",
    "simplify_model",
]

# default outer edge when verifying an unbounded region: four times the
# largest channel count the profiling scope can produce
_VERIFY_CAP = 1024.0


@dataclass(frozen=True)
class VariableSignificance:
    name: str
    coefficient: float
    t_statistic: float
    p_value: float
    degenerate: bool = False


@dataclass(frozen=True)
class SignificanceReport:
    """Per-variable two-sided t-test results for one layer kind."""

    kind: LayerKind
    variables: tuple[VariableSignificance, ...]

    def __getitem__(self, name: str) -> VariableSignificance:
        for variable in self.variables:
            if variable.name == name:
                return variable
        raise KeyError(name)


def coefficient_pvalues(dataset: Dataset) -> SignificanceReport:
    """Ordinary least-squares t-test per explanatory variable.

    The tests are unconstrained on purpose: they ask whether each variable
    carries any signal at all, not whether the constrained fit uses it.
    Collinear columns are reported as degenerate with p = 1, and a fit
    with numerically zero residual pins p to 0/1 by whether the variable
    participates in the exact fit.
    """
    names = explanatory_names(dataset.kind)
    k = len(names)
    n = len(dataset)
    if n <= k + 2:
        raise ValueError(f"need more than {k + 2} records, got {n}")
    X = dataset.explanatory
    y = dataset.times
    design = np.hstack([X, np.ones((n, 1))])

    rank = np.linalg.matrix_rank(design)
    degenerate = np.zeros(k, dtype=bool)
    if rank < k + 1:
        for j in range(k):
            reduced = np.delete(design, j, axis=1)
            if np.linalg.matrix_rank(reduced) == rank:
                degenerate[j] = True

    keep = np.concatenate([~degenerate, [True]])
    kept = design[:, keep]
    beta_kept, *_ = np.linalg.lstsq(kept, y, rcond=None)
    beta = np.zeros(k + 1)
    beta[keep] = beta_kept
    residual = y - design @ beta
    dof = n - k - 1
    rss = float(residual @ residual)
    total = float(np.sum((y - y.mean()) ** 2))

    variables: list[VariableSignificance] = []
    if rss <= 1e-18 * max(total, 1.0):
        # numerically exact fit: a variable either participates or it does not
        y_scale = max(float(np.abs(y).max()), 1e-300)
        for j, name in enumerate(names):
            contribution = abs(beta[j]) * float(np.abs(X[:, j]).max(initial=0.0))
            active = contribution > 1e-9 * y_scale and not degenerate[j]
            variables.append(
                VariableSignificance(
                    name=name,
                    coefficient=float(beta[j]),
                    t_statistic=math.inf if active else 0.0,
                    p_value=0.0 if active else 1.0,
                    degenerate=bool(degenerate[j]),
                )
            )
        return SignificanceReport(kind=dataset.kind, variables=tuple(variables))

    sigma2 = rss / dof
    covariance = sigma2 * np.linalg.pinv(kept.T @ kept)
    se = np.zeros(k + 1)
    se[keep] = np.sqrt(np.maximum(np.diag(covariance), 0.0))
    for j, name in enumerate(names):
        if degenerate[j] or se[j] == 0.0:
            variables.append(
                VariableSignificance(
                    name=name,
                    coefficient=float(beta[j]),
                    t_statistic=0.0,
                    p_value=1.0,
                    degenerate=bool(degenerate[j]),
                )
            )
            continue
        t = float(beta[j] / se[j])
        p = float(2.0 * stats.t.sf(abs(t), dof))
        variables.append(
            VariableSignificance(
                name=name, coefficient=float(beta[j]), t_statistic=t, p_value=p
            )
        )
    return SignificanceReport(kind=dataset.kind, variables=tuple(variables))


# --- channel-space polynomials ----------------------------------------------


@dataclass(frozen=True)
class ConvGeometry:
    """Fixed convolution geometry; only the channel counts stay free."""

    in_height: int
    in_width: int
    kernel_height: int
    kernel_width: int
    stride: int
    padding: Padding

    def __post_init__(self) -> None:
        if isinstance(self.padding, str):
            object.__setattr__(self, "padding", Padding(self.padding))

    @classmethod
    def from_config(cls, config: StructureConfig) -> "ConvGeometry":
        if config.kind is not LayerKind.CNN:
            raise ValueError("geometry comes from a CNN config")
        return cls(
            in_height=config.in_height,
            in_width=config.in_width,
            kernel_height=config.kernel_height,
            kernel_width=config.kernel_width,
            stride=config.stride,
            padding=config.padding,
        )

    def output_dims(self) -> tuple[int, int]:
        return conv_output_dims(
            self.in_height,
            self.in_width,
            self.kernel_height,
            self.kernel_width,
            self.stride,
            self.padding,
        )


@dataclass(frozen=True)
class ChannelPolynomial:
    """``a*u*v + b*u + c*v + d`` over (in_channel u, out_channel v)."""

    a: float
    b: float
    c: float
    d: float

    def __call__(self, u: float, v: float) -> float:
        return self.a * u * v + self.b * u + self.c * v + self.d

    def diagonal(self, c: float) -> float:
        return self(c, c)


def channel_time_polynomial(fit: LinearFit, setting: ConvGeometry) -> ChannelPolynomial:
    """Expand a leaf fit into a polynomial in the two channel counts.

    Substitutes the convolutional feature formulas, with the geometry
    fixed, into ``w . x + b``.
    """
    out_h, out_w = setting.output_dims()
    kernel = setting.kernel_height * setting.kernel_width
    w = np.asarray(fit.w, dtype=float)
    if w.shape != (3,):
        raise ValueError("convolutional fits have exactly three weights")
    flops_uv = 2.0 * out_h * out_w * kernel
    mem_u = setting.in_height * setting.in_width + out_h * out_w * kernel
    mem_v = out_h * out_w
    return ChannelPolynomial(
        a=w[0] * flops_uv + w[2] * kernel,
        b=w[1] * mem_u,
        c=w[1] * mem_v,
        d=fit.b + w[2],
    )


def expansion_benefit(
    leaf_true: LinearFit,
    leaf_false: LinearFit,
    setting: ConvGeometry,
    delta: int,
    axis: str = "in_channel",
) -> ChannelPolynomial:
    """Predicted-time change of rounding one channel axis up by ``delta``.

    Returns the polynomial ``y_true(shifted) - y_false(unshifted)``, where
    the true-branch leaf prices the expanded layer and the false-branch
    leaf prices the layer as it stands.  Negative values mean the
    expansion speeds the layer up.
    """
    if delta < 0:
        raise ValueError("delta must be >= 0")
    if axis not in ("in_channel", "out_channel"):
        raise ValueError(f"axis must be in_channel or out_channel, got {axis!r}")
    pt = channel_time_polynomial(leaf_true, setting)
    pf = channel_time_polynomial(leaf_false, setting)
    if axis == "in_channel":
        return ChannelPolynomial(
            a=pt.a - pf.a,
            b=pt.b - pf.b,
            c=pt.a * delta + pt.c - pf.c,
            d=pt.d + pt.b * delta - pf.d,
        )
    return ChannelPolynomial(
        a=pt.a - pf.a,
        b=pt.a * delta + pt.b - pf.b,
        c=pt.c - pf.c,
        d=pt.d + pt.c * delta - pf.d,
    )


@dataclass(frozen=True)
class ExpansionRegion:
    """Square channel region inside which an expansion always helps.

    ``bound`` is the largest diagonal channel count with a provably
    negative benefit: 0 marks an empty region, ``inf`` an unbounded one.
    """

    contour: ChannelPolynomial
    bound: float
    condition: Condition | None = None
    setting: ConvGeometry | None = None
    delta: int | None = None
    verified: bool = False

    @property
    def is_empty(self) -> bool:
        return self.bound <= 0

    def contains(self, u: float, v: float) -> bool:
        return not self.is_empty and 1 <= u <= self.bound and 1 <= v <= self.bound


def _bisect_root(poly: ChannelPolynomial, lo: float, hi: float, tol: float = 1e-6) -> float:
    # invariant: diagonal(lo) < 0 <= diagonal(hi); returns the low end so
    # the benefit stays strictly negative at the reported bound
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if poly.diagonal(mid) < 0:
            lo = mid
        else:
            hi = mid
    return lo


def safe_region(
    benefit: ChannelPolynomial,
    condition: Condition | None = None,
    setting: ConvGeometry | None = None,
    delta: int | None = None,
) -> ExpansionRegion:
    """Largest square ``[1, bound]^2`` on which the benefit stays negative.

    The diagonal restriction ``a*c^2 + (b+c)*c + d`` has at most one
    upward zero crossing past ``c = 1``; it is located by bisection.  A
    benefit that is already non-negative at ``c = 1`` yields an empty
    region, and one that never crosses zero yields an unbounded region.
    """
    a = benefit.a
    slope = benefit.b + benefit.c

    def make(bound: float) -> ExpansionRegion:
        return ExpansionRegion(
            contour=benefit, bound=bound, condition=condition, setting=setting, delta=delta
        )

    if benefit.diagonal(1.0) >= 0:
        return make(0.0)
    if a > 0:
        hi = 2.0
        while benefit.diagonal(hi) < 0:
            hi *= 2.0
            if hi > 1e15:
                return make(math.inf)
        return make(_bisect_root(benefit, 1.0, hi))
    if a == 0:
        if slope <= 0:
            return make(math.inf)
        root = -benefit.d / slope
        if root <= 1.0:
            return make(0.0)
        return make(_bisect_root(benefit, 1.0, root + 1.0))
    vertex = -slope / (2.0 * a)
    if vertex <= 1.0 or benefit.diagonal(vertex) < 0:
        return make(math.inf)
    return make(_bisect_root(benefit, 1.0, vertex))


def verify_region(region: ExpansionRegion, grid: int = 32) -> ExpansionRegion:
    """Check the sign property on a grid inside the claimed square.

    The benefit must be strictly negative at every sampled (u, v) point;
    any failure demotes the region to empty.  Unbounded regions are
    checked out to a fixed practical edge.
    """
    if region.bound <= 1.0:
        # the square [1, bound]^2 holds no whole-channel points
        return dc_replace(region, bound=0.0, verified=False)
    edge = min(region.bound, _VERIFY_CAP)
    points = np.linspace(1.0, edge, grid, endpoint=False)
    u, v = np.meshgrid(points, points)
    values = region.contour.a * u * v + region.contour.b * u + region.contour.c * v + region.contour.d
    if not (values < 0).all():
        return dc_replace(region, bound=0.0, verified=False)
    return dc_replace(region, verified=True)


class SimplifiedTimeModel:
    """Snap-then-route wrapper around a fitted model.

    Inside the joint verified region, configurations are first rounded up
    to the regions' multiples before prediction (never predicting above
    the base model); outside it, predictions match the base model exactly.
    """

    def __init__(self, base: TimeModel, regions: Sequence[ExpansionRegion]):
        self.base = base
        self.regions = tuple(regions)

    @property
    def kind(self) -> LayerKind:
        return self.base.kind

    def _snap(self, config: StructureConfig) -> StructureConfig | None:
        names = feature_names(self.base.kind)
        updates: dict[str, int] = {}
        for region in self.regions:
            field = names[region.condition.feature_index]
            u = getattr(config, "in_channel", None)
            v = getattr(config, "out_channel", None)
            if u is None or v is None or not region.contains(u, v):
                return None
            if region.setting is not None and (
                ConvGeometry.from_config(config) != region.setting
            ):
                return None
            tau = int(region.condition.tau)
            value = getattr(config, field)
            updates[field] = tau * -(-value // tau)
        if not updates:
            return None
        return dc_replace(config, **updates)

    def predict(self, config: StructureConfig) -> float:
        baseline = self.base.predict(config)
        snapped = self._snap(config)
        if snapped is None:
            return baseline
        return min(baseline, self.base.predict(snapped))


def simplify_model(
    model: TimeModel, regions: Sequence[ExpansionRegion]
) -> SimplifiedTimeModel:
    """Build the snap-then-route predictor from verified regions.

    Regions must carry a multiple condition and pass verification; empty
    (demoted) regions are ignored.  Two regions disagreeing on the modulus
    of the same feature are contradictory.
    """
    usable: list[ExpansionRegion] = []
    by_feature: dict[int, int] = {}
    for region in regions:
        if region.is_empty:
            continue
        if not region.verified:
            raise ValueError("only verified regions may simplify a model")
        if region.condition is None or region.condition.kind is not ConditionKind.MULTIPLE:
            raise ValueError("regions must carry a multiple condition")
        tau = int(region.condition.tau)
        j = region.condition.feature_index
        if j in by_feature and by_feature[j] != tau:
            raise ValueError(
                f"contradictory regions on feature {j}: moduli {by_feature[j]} and {tau}"
            )
        by_feature[j] = tau
        usable.append(region)
    return SimplifiedTimeModel(base=model, regions=usable)
