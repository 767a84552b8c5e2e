"""Layer expansion, network expansion, padding plans, and compression search."""

import numpy as np
import pytest

from conftest import (
    B_FALSE,
    B_TRUE,
    IN_CHANNEL,
    W_FALSE,
    W_TRUE,
    leaf,
    random_config,
    random_tree_model,
    two_leaf_channel_model,
)
from layertime.layers import LayerKind, cnn, derive_explanatory, fc, gru, lstm
from layertime.steering import (
    NetworkSpec,
    brute_force_compress,
    expand_layer,
    expand_network,
    greedy_compress,
    network_time,
    rnn_time_floor,
    time_aware_objective,
    zero_pad_plan,
)
from layertime.tree import (
    Condition,
    ConditionKind,
    Dataset,
    FitParams,
    LinearFit,
    Node,
    TimeModel,
    fit_tree,
)

MULTIPLE = ConditionKind.MULTIPLE
RANGE = ConditionKind.RANGE


# --- expand_layer --------------------------------------------------------------


def test_reference_expansion_43_to_44(reference_model):
    config = cnn(24, 24, 3, 3, 43, 64)
    expanded, entry = expand_layer(reference_model, config)
    assert expanded == cnn(24, 24, 3, 3, 44, 64)
    assert entry.time_before == pytest.approx(16.0, abs=0.1)
    assert entry.time_after == pytest.approx(10.3, abs=0.1)
    assert entry.time_after < entry.time_before
    assert [a.feature for a in entry.accepted] == ["in_channel"]
    assert entry.accepted[0].tau == 4


def test_config_on_multiples_is_unchanged(reference_model):
    config = cnn(24, 24, 3, 3, 44, 64)
    expanded, entry = expand_layer(reference_model, config)
    assert expanded == config
    assert entry.accepted == ()


def test_costly_true_branch_rejects_expansion():
    root = Node(
        fit=leaf(W_FALSE, B_FALSE).fit,
        condition=Condition(IN_CHANNEL, 4, MULTIPLE),
        left=leaf(W_TRUE, 500.0),  # huge intercept on the true branch
        right=leaf(W_FALSE, B_FALSE),
    )
    model = TimeModel(kind=LayerKind.CNN, root=root)
    config = cnn(24, 24, 3, 3, 43, 64)
    expanded, entry = expand_layer(model, config)
    assert expanded == config
    assert entry.accepted == ()
    assert entry.time_after == entry.time_before


def test_expansion_respects_recorded_range_conditions():
    inner = Node(
        fit=leaf(W_FALSE, B_FALSE).fit,
        condition=Condition(IN_CHANNEL, 4, MULTIPLE),
        left=leaf(W_TRUE, B_TRUE),
        right=leaf(W_FALSE, B_FALSE),
    )
    root = Node(
        fit=leaf(W_FALSE, B_FALSE).fit,
        condition=Condition(IN_CHANNEL, 43.5, RANGE),
        left=inner,
        right=leaf(W_FALSE, 2 * B_FALSE),
    )
    model = TimeModel(kind=LayerKind.CNN, root=root)
    config = cnn(24, 24, 3, 3, 43, 64)
    expanded, entry = expand_layer(model, config)
    # rounding 43 up to 44 would cross the recorded range boundary
    assert expanded == config
    assert entry.accepted == ()


def test_expansion_capped_at_twice_the_original():
    root = Node(
        fit=leaf(W_FALSE, B_FALSE).fit,
        condition=Condition(IN_CHANNEL, 128, MULTIPLE),
        left=leaf(W_TRUE, 0.0),
        right=leaf(W_FALSE, B_FALSE),
    )
    model = TimeModel(kind=LayerKind.CNN, root=root)
    config = cnn(24, 24, 3, 3, 3, 64)  # 128 is far beyond 2 x 3
    expanded, _ = expand_layer(model, config)
    assert expanded == config


def test_non_width_features_never_expanded():
    from layertime.layers import feature_names

    mem_in = feature_names(LayerKind.CNN).index("mem_in")
    root = Node(
        fit=leaf(W_FALSE, B_FALSE).fit,
        condition=Condition(mem_in, 7, MULTIPLE),
        left=leaf(W_TRUE, 0.0),
        right=leaf(W_FALSE, B_FALSE),
    )
    model = TimeModel(kind=LayerKind.CNN, root=root)
    config = cnn(24, 24, 3, 3, 43, 64)
    expanded, entry = expand_layer(model, config)
    assert expanded == config
    assert entry.accepted == ()


def test_kind_mismatch_rejected(reference_model):
    with pytest.raises(ValueError):
        expand_layer(reference_model, fc(3, 5))


@pytest.mark.parametrize(
    "kind,seed", [(LayerKind.CNN, 11), (LayerKind.FC, 22), (LayerKind.GRU, 33)]
)
def test_expansion_properties_on_random_trees(kind, seed):
    rng = np.random.default_rng(seed)
    widths = (
        ("in_channel", "out_channel") if kind is LayerKind.CNN else ("in_dim", "out_dim")
    )
    for _ in range(40):
        model = random_tree_model(rng, kind=kind)
        config = random_config(rng, kind)
        expanded, entry = expand_layer(model, config)
        # predicted time never increases (exact comparison)
        assert model.predict(expanded) <= model.predict(config)
        # structural coordinates never shrink
        for name in widths:
            assert getattr(expanded, name) >= getattr(config, name)
            assert getattr(expanded, name) <= 2 * getattr(config, name)
        # expansion is idempotent (exact equality)
        again, _ = expand_layer(model, expanded)
        assert again == expanded


# --- expand_network --------------------------------------------------------------


def test_single_layer_network_matches_expand_layer(reference_model):
    config = cnn(24, 24, 3, 3, 43, 64)
    net = NetworkSpec((config,))
    models = {LayerKind.CNN: reference_model}
    expanded_net, trace = expand_network(models, net)
    expanded_layer, _ = expand_layer(reference_model, config)
    assert expanded_net.layers == (expanded_layer,)
    assert len(trace.entries) == 1


def test_empty_network_unchanged(reference_model):
    models = {LayerKind.CNN: reference_model}
    net = NetworkSpec(())
    expanded, trace = expand_network(models, net)
    assert expanded.layers == ()
    assert network_time(models, expanded) == 0.0


def test_conflict_resolved_by_total_time(reference_model):
    models = {LayerKind.CNN: reference_model}
    first = cnn(24, 24, 3, 3, 8, 43)
    second = cnn(24, 24, 3, 3, 43, 64)
    net = NetworkSpec((first, second))
    expanded, trace = expand_network(models, net)
    # the downstream layer rounds its input channels 43 -> 44, clashing with
    # the upstream output width that stayed at 43
    assert trace.conflicts and trace.conflicts[0].junction == 0
    conflict = trace.conflicts[0]
    assert {conflict.upstream_width, conflict.downstream_width} == {43, 44}
    chosen_time = min(conflict.time_with_upstream, conflict.time_with_downstream)
    assert network_time(models, expanded) == pytest.approx(chosen_time)
    # result is consistent and no slower than the input
    out_w = expanded.layers[0].out_channel
    assert out_w == expanded.layers[1].in_channel
    assert network_time(models, expanded) <= network_time(models, net)


def test_network_expansion_never_slower_on_random_instances():
    rng = np.random.default_rng(99)
    for _ in range(20):
        model = random_tree_model(rng, kind=LayerKind.CNN)
        width = int(rng.integers(1, 200))
        layers = []
        for i in range(3):
            nxt = int(rng.integers(1, 200))
            layers.append(cnn(24, 24, 3, 3, width, nxt))
            width = nxt
        net = NetworkSpec(tuple(layers))
        models = {LayerKind.CNN: model}
        expanded, _ = expand_network(models, net)
        NetworkSpec(expanded.layers)  # adjacency re-validated
        assert network_time(models, expanded) <= network_time(models, net)


def test_missing_model_is_an_error(reference_model):
    net = NetworkSpec((fc(3, 5),))
    with pytest.raises(ValueError, match="no model"):
        expand_network({LayerKind.CNN: reference_model}, net)


def test_network_spec_validates_adjacency():
    with pytest.raises(ValueError, match="shared width"):
        NetworkSpec((cnn(24, 24, 3, 3, 3, 8), cnn(24, 24, 3, 3, 9, 16)))
    # mixed families are not width-coupled
    NetworkSpec((cnn(24, 24, 3, 3, 3, 8), fc(100, 10)))


# --- zero_pad_plan ----------------------------------------------------------------


def materialize(embed):
    """Fill destination cells block by block; returns (copied mask, source count)."""
    dst = np.zeros(embed.new_shape, dtype=bool)
    src_cells = 0
    for src_ranges, dst_ranges in embed.blocks:
        src_extent = [stop - start for start, stop in src_ranges]
        dst_slices = tuple(slice(start, stop) for start, stop in dst_ranges)
        dst_extent = [s.stop - s.start for s in dst_slices]
        assert src_extent == dst_extent
        assert not dst[dst_slices].any()  # destination blocks are disjoint
        dst[dst_slices] = True
        src_cells += int(np.prod(src_extent))
    return dst, src_cells


def test_identical_networks_have_empty_plan():
    net = NetworkSpec((fc(3, 5), fc(5, 7)))
    assert zero_pad_plan(net, net) == ()


def test_fc_row_embedding():
    old = NetworkSpec((fc(3, 5),))
    new = NetworkSpec((fc(4, 5),))
    (plan,) = zero_pad_plan(old, new)
    weight = next(t for t in plan.tensors if t.name == "weight")
    assert weight.old_shape == (3, 5) and weight.new_shape == (4, 5)
    assert weight.blocks == ((((0, 3), (0, 5)), ((0, 3), (0, 5))),)
    mask, copied = materialize(weight)
    assert copied == 15
    assert mask[:3, :].all() and not mask[3, :].any()  # row 3 stays zero


def test_cnn_channel_embedding():
    old = NetworkSpec((cnn(24, 24, 3, 3, 43, 64),))
    new = NetworkSpec((cnn(24, 24, 3, 3, 44, 64),))
    (plan,) = zero_pad_plan(old, new)
    weight = next(t for t in plan.tensors if t.name == "weight")
    assert weight.old_shape == (3, 3, 43, 64)
    assert weight.new_shape == (3, 3, 44, 64)
    mask, copied = materialize(weight)
    assert copied == 3 * 3 * 43 * 64
    assert not mask[:, :, 43, :].any()  # the new input-channel slice stays zero


@pytest.mark.parametrize("factory,gates", [(gru, 3), (lstm, 4)])
def test_recurrent_gate_blocks(factory, gates):
    old = NetworkSpec((factory(4, 6, 10),))
    new = NetworkSpec((factory(5, 8, 10),))
    (plan,) = zero_pad_plan(old, new)
    weight = next(t for t in plan.tensors if t.name == "weight")
    assert weight.old_shape == (10, gates * 6)
    assert weight.new_shape == (13, gates * 8)
    mask, copied = materialize(weight)
    assert copied == 10 * gates * 6  # every old cell lands exactly once
    bias = next(t for t in plan.tensors if t.name == "bias")
    bias_mask, bias_copied = materialize(bias)
    assert bias_copied == gates * 6
    # each gate block starts at its new offset
    for g in range(gates):
        assert bias_mask[g * 8 : g * 8 + 6].all()
        assert not bias_mask[g * 8 + 6 : (g + 1) * 8].any()


def test_shrinking_plan_is_an_error():
    with pytest.raises(ValueError, match="shrinks"):
        zero_pad_plan(NetworkSpec((fc(4, 5),)), NetworkSpec((fc(3, 5),)))


def test_non_width_change_is_an_error():
    old = NetworkSpec((cnn(24, 24, 3, 3, 4, 4),))
    new = NetworkSpec((cnn(24, 24, 5, 5, 4, 4),))
    with pytest.raises(ValueError, match="non-width"):
        zero_pad_plan(old, new)


# --- network time and objective ----------------------------------------------------


def test_network_time_empty_and_single(reference_model):
    models = {LayerKind.CNN: reference_model}
    assert network_time(models, NetworkSpec(())) == 0.0
    config = cnn(24, 24, 3, 3, 43, 64)
    assert network_time(models, NetworkSpec((config,))) == reference_model.predict(config)


def test_network_time_is_order_free(reference_model):
    fc_model = TimeModel(kind=LayerKind.FC, root=leaf((1e-6, 0.0, 0.0), 0.5))
    models = {LayerKind.CNN: reference_model, LayerKind.FC: fc_model}
    a = cnn(24, 24, 3, 3, 43, 64)
    b = fc(100, 10)
    assert network_time(models, NetworkSpec((a, b))) == pytest.approx(
        network_time(models, NetworkSpec((b, a)))
    )


def test_time_aware_objective_reductions(reference_model):
    models = {LayerKind.CNN: reference_model}
    net = NetworkSpec((cnn(24, 24, 3, 3, 43, 64),))
    loss = lambda _: 7.5
    assert time_aware_objective(loss, models, net, 0.0) == 7.5
    zero = lambda _: 0.0
    t = network_time(models, net)
    assert time_aware_objective(zero, models, net, 2.0) == pytest.approx(2.0 * t)
    assert time_aware_objective(loss, models, net, 2.0) - time_aware_objective(
        loss, models, net, 1.0
    ) == pytest.approx(t)
    with pytest.raises(ValueError):
        time_aware_objective(loss, models, net, -1.0)


# --- compression search --------------------------------------------------------------


def width_loss(weights):
    """Deterministic loss that rewards wider layers (an accuracy stand-in)."""

    def evaluator(net):
        return sum(
            w / max(getattr(layer, "out_channel", None) or layer.out_dim, 1)
            for w, layer in zip(weights, net.layers)
        )

    return evaluator


def three_layer_instance(seed):
    rng = np.random.default_rng(seed)
    model = random_tree_model(rng, kind=LayerKind.CNN)
    widths = [int(rng.integers(4, 65)) for _ in range(4)]
    layers = tuple(
        cnn(24, 24, 3, 3, widths[i], widths[i + 1]) for i in range(3)
    )
    net = NetworkSpec(layers)
    # every grid offers "keep the original width" plus four alternatives
    grids = [
        sorted({widths[i + 1], *rng.choice(np.arange(4, 65), size=4, replace=False).tolist()})
        for i in range(3)
    ]
    evaluator = width_loss(rng.uniform(5.0, 50.0, size=3))
    return {LayerKind.CNN: model}, net, grids, evaluator


def test_single_layer_pure_time_minimization(reference_model):
    models = {LayerKind.CNN: reference_model}
    net = NetworkSpec((cnn(24, 24, 3, 3, 8, 16),))
    zero = lambda _: 0.0
    result = greedy_compress(zero, models, net, lam=1.0, width_grid=[[4, 8, 16]])
    times = {
        w: reference_model.predict(cnn(24, 24, 3, 3, 8, w)) for w in (4, 8, 16)
    }
    assert result.layers[0].out_channel == min(times, key=times.get)


def test_greedy_never_worsens_the_objective():
    for seed in range(5):
        models, net, grids, evaluator = three_layer_instance(seed)
        lam = 1.0
        before = time_aware_objective(evaluator, models, net, lam)
        compressed = greedy_compress(evaluator, models, net, lam, grids)
        after = time_aware_objective(evaluator, models, compressed, lam)
        assert after <= before + 1e-9


def test_brute_force_dominates_greedy():
    for seed in range(5):
        models, net, grids, evaluator = three_layer_instance(seed + 100)
        lam = 1.0
        greedy = greedy_compress(evaluator, models, net, lam, grids)
        brute = brute_force_compress(evaluator, models, net, lam, grids)
        greedy_obj = time_aware_objective(evaluator, models, greedy, lam)
        brute_obj = time_aware_objective(evaluator, models, brute, lam)
        assert brute_obj <= greedy_obj + 1e-9


def test_brute_force_lambda_monotonicity():
    models, net, grids, evaluator = three_layer_instance(7)
    times = []
    for lam in (0.0, 0.1, 1.0, 10.0):
        best = brute_force_compress(evaluator, models, net, lam, grids)
        times.append(network_time(models, best))
    assert all(b <= a + 1e-9 for a, b in zip(times, times[1:]))


def test_budget_limits_evaluator_calls(reference_model):
    calls = []

    def counting(net):
        calls.append(1)
        return 0.0

    models = {LayerKind.CNN: reference_model}
    net = NetworkSpec((cnn(24, 24, 3, 3, 8, 16),))
    greedy_compress(counting, models, net, lam=1.0, width_grid=[[4, 8, 16, 32]], budget=2)
    assert len(calls) <= 2


def test_empty_grid_is_an_error(reference_model):
    models = {LayerKind.CNN: reference_model}
    net = NetworkSpec((cnn(24, 24, 3, 3, 8, 16),))
    with pytest.raises(ValueError, match="empty width grid"):
        greedy_compress(lambda _: 0.0, models, net, 1.0, [[]])


def test_brute_force_guards_search_space(reference_model):
    models = {LayerKind.CNN: reference_model}
    net = NetworkSpec((cnn(24, 24, 3, 3, 8, 16),))
    with pytest.raises(ValueError, match="too large"):
        brute_force_compress(
            lambda _: 0.0, models, net, 1.0, [list(range(1, 1_000_002))]
        )


def test_single_candidate_returned_as_is(reference_model):
    models = {LayerKind.CNN: reference_model}
    net = NetworkSpec((cnn(24, 24, 3, 3, 8, 16),))
    result = brute_force_compress(lambda _: 0.0, models, net, 1.0, [[16]])
    assert result.layers[0].out_channel == 16


def test_lambda_zero_minimizes_loss_alone(reference_model):
    models = {LayerKind.CNN: reference_model}
    net = NetworkSpec((cnn(24, 24, 3, 3, 8, 16),))
    evaluator = width_loss([10.0])
    result = brute_force_compress(evaluator, models, net, 0.0, [[4, 8, 16]])
    assert result.layers[0].out_channel == 16  # widest wins when time is free


# --- recurrent floor ------------------------------------------------------------------


def step_leaf_model(kind, coefficient, intercept=1.0):
    w = [1e-8, 2e-6, 0.0, coefficient]
    return TimeModel(kind=kind, root=leaf(w, intercept))


def test_planted_step_coefficient_floor():
    model = step_leaf_model(LayerKind.GRU, 0.666)
    net = NetworkSpec((gru(64, 120, 20),))
    floor = rnn_time_floor(model, net)
    assert floor == pytest.approx(13.32, rel=1e-9)
    assert abs(floor - 14.1) / 14.1 <= 0.10


def test_floor_without_recurrent_layers():
    model = step_leaf_model(LayerKind.GRU, 0.666)
    assert rnn_time_floor(model, NetworkSpec(())) == 0.0


def test_floor_recovered_by_refit():
    planted = step_leaf_model(LayerKind.GRU, 0.5, intercept=0.7)
    rng = np.random.default_rng(4)
    configs = [random_config(rng, LayerKind.GRU) for _ in range(300)]
    times = [planted.predict(c) for c in configs]
    fitted = fit_tree(Dataset.from_records(LayerKind.GRU, configs, times), FitParams())
    floor = rnn_time_floor(fitted, NetworkSpec((gru(32, 64, 10),)))
    assert floor == pytest.approx(5.0, abs=1e-6)


def test_floor_sums_matching_layers_only():
    model = step_leaf_model(LayerKind.GRU, 0.666)
    net = NetworkSpec((gru(8, 16, 20), fc(16, 4)))
    assert rnn_time_floor(model, net) == pytest.approx(13.32, rel=1e-9)


def test_floor_rejects_non_recurrent_model(reference_model):
    with pytest.raises(ValueError):
        rnn_time_floor(reference_model, NetworkSpec(()))
