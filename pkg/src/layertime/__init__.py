"""Interpretable execution-time models for neural-network layers.

Learns tree-structured piecewise-linear latency models from per-layer
profiles, analyzes them, and uses them to expand structures to
execution-time local minima and to steer width compression toward
minimum predicted latency.
"""

from .analysis import (
    ChannelPolynomial,
    ConvGeometry,
    ExpansionRegion,
    SignificanceReport,
    SimplifiedTimeModel,
    channel_time_polynomial,
    coefficient_pvalues,
    expansion_benefit,
    safe_region,
    simplify_model,
    verify_region,
)
from .harness import (
    ProfileSample,
    SyntheticOracle,
    default_oracle,
    generate_plan,
    ingest_profile,
    read_profile,
    synth_profile,
    synth_time,
    write_profile,
)
from .layers import (
    ExplanatoryVector,
    FeatureVector,
    LayerKind,
    Padding,
    StructureConfig,
    cnn,
    config_from_dict,
    config_to_dict,
    conv_output_dims,
    derive_explanatory,
    derive_features,
    fc,
    gru,
    lstm,
)
from .nnls import NumericError, nnls
from .steering import (
    CommandEvaluator,
    ExpansionTrace,
    NetworkSpec,
    brute_force_compress,
    expand_layer,
    expand_network,
    greedy_compress,
    load_network,
    network_time,
    rnn_time_floor,
    save_network,
    time_aware_objective,
    zero_pad_plan,
)
from .tree import (
    Condition,
    ConditionKind,
    Dataset,
    FitParams,
    LinearFit,
    TimeModel,
    enumerate_conditions,
    fit_tree,
    impurity,
    load_model,
    load_models,
    nnls_fit,
    partition,
    save_model,
    save_models,
)

__version__ = "0.1.0"
