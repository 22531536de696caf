import numpy as np
import pytest

from loftlab.convstack import (ConvStackSpec, ConvStackWeights, accuracy, convstack_forward, init_weights,
                               loss_and_grad, loss_gradient, sgd_update)
from loftlab.errors import (ConfigError, CorruptionError, DimensionError, DivergenceError,
                            IncompletePartitionError)
from loftlab.partition import (SubnetworkSpec, aggregate, draw_partition, filter_partition, make_batches,
                               train_local)
from loftlab.tensor import finite_difference_gradient, relative_error


def test_desk_spec_layout(desk_spec):
    assert desk_spec.layer_ids == ["block0.conv0", "block0.conv1", "block1.conv0", "block1.conv1"]
    assert desk_spec.conv_shapes == [(8, 1, 3, 3), (16, 8, 3, 3), (16, 16, 3, 3), (32, 16, 3, 3)]
    assert desk_spec.head_shape == (4, 32)
    assert desk_spec.partitionable_blocks == [1]
    assert desk_spec.prunable_layers == ["block1.conv0"]
    assert desk_spec.num_params() == 8264


def test_spec_validation():
    with pytest.raises(ConfigError):
        ConvStackSpec.from_channels(1, 8, 8, [8, 16, 16], 4)
    with pytest.raises(ConfigError):
        ConvStackSpec.from_channels(1, 8, 8, [8, 16], 4, sensitive_blocks=(3,))
    with pytest.raises(ConfigError):
        ConvStackSpec.from_channels(1, 8, 8, [8, 16], 4, loss="hinge")
    strided = ConvStackSpec.from_channels(1, 8, 8, [8, 16, 16, 32], 4, strided_blocks=(1,))
    assert strided.partitionable_blocks == []
    with pytest.raises(ConfigError):
        convstack_forward(init_weights(strided, np.random.default_rng(0)), strided, np.zeros((1, 1, 8, 8)))


@pytest.mark.parametrize("S", [1, 2, 4, 8, 16])
def test_valid_worker_counts(desk_spec, S):
    desk_spec.validate_workers(S)


@pytest.mark.parametrize("S", [0, 3, 32])
def test_invalid_worker_counts(desk_spec, S):
    with pytest.raises(ConfigError) as info:
        desk_spec.validate_workers(S)
    assert info.value.field == "workers"


def test_indivisible_block_width():
    spec = ConvStackSpec.from_channels(1, 8, 8, [8, 16, 6, 32], 4)
    with pytest.raises(ConfigError):
        spec.validate_workers(4)


def test_weights_helpers(desk_spec, rng):
    weights = init_weights(desk_spec, rng)
    weights.check_shapes(desk_spec)
    assert weights.num_params() == desk_spec.num_params()
    assert len(weights.serialize()) == weights.nbytes() == 8 * 8264
    assert len(weights.serialize("float32")) == weights.nbytes("float32") == 4 * 8264
    assert weights.bank("block1.conv0") is weights.convs[2]
    frozen = weights.copy().freeze()
    with pytest.raises(ValueError):
        frozen.head += 1.0
    with pytest.raises(DimensionError):
        ConvStackWeights(weights.convs[:3] + [weights.convs[2]], weights.head).check_shapes(desk_spec)


@pytest.mark.parametrize("kind", ["cross_entropy", "mse"])
def test_logit_gradients(rng, kind):
    logits = rng.standard_normal((5, 3))
    labels = np.array([0, 2, 1, 1, 0])
    _, grad = loss_and_grad(logits, labels, kind)
    fd = finite_difference_gradient(lambda z: loss_and_grad(z, labels, kind)[0], logits)
    assert relative_error(grad, fd) < 1e-7


@pytest.mark.parametrize("kind", ["cross_entropy", "mse"])
def test_stack_gradients_match_finite_differences(kind):
    spec = ConvStackSpec.from_channels(1, 4, 4, [2, 4, 4, 2], 3, loss=kind)
    checked, seed = 0, 0
    while checked < 5:
        rng = np.random.default_rng(seed)
        seed += 1
        weights = init_weights(spec, rng)
        X, y = rng.standard_normal((3, 1, 4, 4)), np.array([0, 1, 2])
        _, cache = convstack_forward(weights, spec, X)
        if min(np.min(np.abs(z)) for z in cache.preactivations) < 1e-4:
            continue
        _, grads = loss_gradient(weights, spec, X, y)
        for layer in range(len(weights.convs)):
            def objective(F, layer=layer):
                convs = list(weights.convs)
                convs[layer] = F
                logits, _ = convstack_forward(ConvStackWeights(convs, weights.head), spec, X)
                return loss_and_grad(logits, y, kind)[0]
            assert relative_error(grads.convs[layer], finite_difference_gradient(objective, weights.convs[layer])) < 1e-5

        def head_objective(head):
            logits, _ = convstack_forward(ConvStackWeights(weights.convs, head), spec, X)
            return loss_and_grad(logits, y, kind)[0]
        assert relative_error(grads.head, finite_difference_gradient(head_objective, weights.head)) < 1e-5
        checked += 1


def test_accuracy_counts_argmax_hits(tiny_spec, rng):
    weights = init_weights(tiny_spec, rng)
    X = rng.standard_normal((10, 1, 4, 4))
    logits, _ = convstack_forward(weights, tiny_spec, X)
    y = np.argmax(logits, axis=1)
    assert accuracy(weights, tiny_spec, X, y, batch_size=3) == 1.0
    assert accuracy(weights, tiny_spec, X, (y + 1) % 3) == 0.0
    assert np.isnan(accuracy(weights, tiny_spec, X[:0], y[:0]))


@pytest.mark.parametrize("S", [2, 4])
def test_partition_shapes(desk_spec, rng, S):
    weights = init_weights(desk_spec, rng)
    parts = filter_partition(weights, desk_spec, S, rng)
    assert [sub.worker_id for sub, _ in parts] == list(range(S))
    for sub, w in parts:
        assert w.convs[2].shape == (16 // S, 16, 3, 3)
        assert w.convs[3].shape == (32, 16 // S, 3, 3)
        assert np.array_equal(w.convs[0], weights.convs[0])
        assert np.array_equal(w.convs[2], weights.convs[2][sub.kept[1]])
        assert np.array_equal(w.convs[3], weights.convs[3][:, sub.kept[1]])
        assert sub.shared == ("block0.conv0", "block0.conv1", "head")
        w.check_shapes(sub.stack)
    kept = np.concatenate([sub.kept[1] for sub, _ in parts])
    assert np.array_equal(np.sort(kept), np.arange(16))


@pytest.mark.parametrize("S", [2, 4])
def test_subnetwork_forward_is_masked_full_forward(desk_spec, rng, S):
    weights = init_weights(desk_spec, rng)
    X = rng.standard_normal((5, 1, 8, 8))
    for sub, w in filter_partition(weights, desk_spec, S, rng):
        masked = weights.copy()
        masked.convs[2][np.setdiff1d(np.arange(16), sub.kept[1])] = 0.0
        sub_logits, _ = convstack_forward(w, sub.stack, X)
        full_logits, _ = convstack_forward(masked, desk_spec, X)
        assert np.allclose(sub_logits, full_logits, rtol=1e-12, atol=1e-14)


def test_partition_is_uniform():
    spec = ConvStackSpec.from_channels(1, 8, 8, [8, 16, 8, 16], 4)
    rng = np.random.default_rng(2024)
    rounds, counts = 1000, np.zeros(8)
    for _ in range(rounds):
        counts[draw_partition(spec, 2, rng)[0].kept[1]] += 1
    sigma = np.sqrt(0.25 / rounds)
    assert np.all(np.abs(counts / rounds - 0.5) <= 3 * sigma)


@pytest.mark.parametrize("S", [1, 2, 4])
def test_aggregate_inverts_partition(desk_spec, rng, S):
    weights = init_weights(desk_spec, rng)
    merged = aggregate(weights, filter_partition(weights, desk_spec, S, rng))
    assert np.array_equal(merged.flat(), weights.flat())
    assert merged is not weights


def test_aggregate_averages_shared_arrays(desk_spec, rng):
    weights = init_weights(desk_spec, rng)
    parts = filter_partition(weights, desk_spec, 4, rng)
    for sub, w in parts:
        w.head += sub.worker_id
        w.convs[0] += 2 * sub.worker_id
    merged = aggregate(weights, parts)
    assert np.allclose(merged.head, weights.head + 1.5)
    assert np.allclose(merged.convs[0], weights.convs[0] + 3.0)
    assert np.array_equal(merged.convs[2], weights.convs[2])


def test_aggregate_detects_overlap_and_gaps(desk_spec, rng):
    weights = init_weights(desk_spec, rng)
    parts = filter_partition(weights, desk_spec, 2, rng)
    (sub0, w0), _ = parts
    clone = SubnetworkSpec(worker_id=1, kept=sub0.kept, stack=sub0.stack, shared=sub0.shared)
    with pytest.raises(CorruptionError):
        aggregate(weights, [(sub0, w0), (clone, w0)])
    with pytest.raises(IncompletePartitionError):
        aggregate(weights, [(sub0, w0)])
    with pytest.raises(IncompletePartitionError):
        aggregate(weights, [])


def test_reused_partition_specs(desk_spec, rng):
    weights = init_weights(desk_spec, rng)
    specs = draw_partition(desk_spec, 2, rng)
    parts = filter_partition(weights, desk_spec, 2, rng, specs=specs)
    assert [sub for sub, _ in parts] == specs
    with pytest.raises(ConfigError):
        filter_partition(weights, desk_spec, 4, rng, specs=specs)


def test_make_batches(rng):
    X, y = rng.standard_normal((10, 1, 4, 4)), np.arange(10)
    batches = make_batches(X, y, 4)
    assert [len(b[1]) for b in batches] == [4, 3, 3]
    assert np.array_equal(np.concatenate([b[1] for b in batches]), y)
    shuffled = make_batches(X, y, 4, rng)
    assert np.array_equal(np.sort(np.concatenate([b[1] for b in shuffled])), y)
    with pytest.raises(ConfigError):
        make_batches(X[:0], y[:0], 4)


def test_single_worker_local_training_is_sgd(desk_spec, rng):
    weights = init_weights(desk_spec, rng)
    X, y = rng.standard_normal((6, 1, 8, 8)), rng.integers(4, size=6)
    trained = train_local(weights, SubnetworkSpec.full(desk_spec), [(X, y)], 1, 0.1)
    _, grads = loss_gradient(weights, desk_spec, X, y)
    assert np.array_equal(trained.flat(), sgd_update(weights, grads, 0.1).flat())


def test_local_training_validates_arguments(tiny_spec, rng):
    weights = init_weights(tiny_spec, rng)
    sub = SubnetworkSpec.full(tiny_spec)
    batches = [(rng.standard_normal((2, 1, 4, 4)), np.array([0, 1]))]
    with pytest.raises(ConfigError):
        train_local(weights, sub, batches, 0, 0.1)
    with pytest.raises(ConfigError):
        train_local(weights, sub, [], 1, 0.1)
    with pytest.raises(ConfigError):
        train_local(weights, sub, batches, 1, -0.1)


def test_local_training_reports_divergence(tiny_spec, rng):
    weights = init_weights(tiny_spec, rng)
    sub = SubnetworkSpec.full(tiny_spec, worker_id=3)
    batches = [(rng.standard_normal((2, 1, 4, 4)), np.array([0, 1]))]
    with np.errstate(all="ignore"), pytest.raises(DivergenceError) as info:
        train_local(weights, sub, batches, 2, np.inf)
    assert info.value.worker_id == 3
