import numpy as np
import pytest

from architecture import make_definition
from errors import ConfigError, InfeasiblePruneError, TraceError
from network import (
    ChannelMask, ForwardTrace, PrunableChannels, backward_T, build_network, count_params, forward_T,
)
from sca import (
    GammaGradAccumulator, ImportanceAccumulator, PruneConfig, StructureAudit, accumulate_importance,
    channel_quota, compact, effective_scores, finalize_scores, global_rank, structure_step, synops,
    trace_synops,
)


def fake_mapping(*widths):
    return [PrunableChannels(f'conv{i + 1}', f'bn{i + 1}', f'sn{i + 1}', width, i)
            for i, width in enumerate(widths)]


def membrane_trace(membrane, t_steps, batch_size):
    return ForwardTrace(mode='train', t_steps=t_steps, batch_size=batch_size, membrane=membrane, complete=True)


def gamma_acc_with(mapping, values):
    acc = GammaGradAccumulator(mapping)
    for name, vec in values.items():
        acc.sums[name][:] = vec
    return acc


def randomized_net(architecture, style, seed=0, in_shape=(1, 8, 8), t_steps=3):
    net = build_network(make_definition(architecture, style, t_steps=t_steps, in_shape=in_shape), seed=seed)
    rng = np.random.default_rng(seed + 100)
    for layer in net.layers_of('bn'):
        c = layer.params.channels
        layer.params.gamma[:] = rng.uniform(0.5, 2.0, size=c)
        layer.params.beta[:] = rng.uniform(-0.2, 0.5, size=c)
        layer.params.running_mean[:] = rng.normal(0.0, 0.3, size=c)
        layer.params.running_var[:] = rng.uniform(0.5, 2.0, size=c)
    return net


def random_mask(net, rng, keep=0.6):
    bits = {}
    for entry in net.mapping:
        vec = rng.random(entry.channels) < keep
        vec[rng.integers(entry.channels)] = True
        bits[entry.conv] = vec
    return ChannelMask(bits)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

class TestPruneConfig:

    @pytest.mark.parametrize('kwargs', [
        {'p': 1.0},
        {'p': -0.1},
        {'p': 0.6, 'q': 0.4},
        {'q': -0.01},
        {'min_channels': 0},
        {'interval_epochs': 0},
        {'mode': 'magnitude'},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            PruneConfig(**kwargs)

    def test_quota_floors_with_tolerance(self):
        assert channel_quota(0.3, 10) == 3
        assert channel_quota(0.29, 100) == 29
        assert channel_quota(0.25, 10) == 2

    def test_peak_dead(self):
        assert PruneConfig(p=0.2, q=0.1).peak_dead(10) == 3
        assert PruneConfig(p=0.2, q=0.1, mode='only_prune').peak_dead(10) == 2

    def test_infeasible_floors(self):
        cfg = PruneConfig(p=0.5, q=0.0, min_channels=2)
        with pytest.raises(InfeasiblePruneError):
            cfg.check_feasible(fake_mapping(2, 2))
        cfg.check_feasible(fake_mapping(4, 4))


# ---------------------------------------------------------------------------
# Importance scores
# ---------------------------------------------------------------------------

class TestImportance:

    def test_single_channel_example(self):
        acc = ImportanceAccumulator(fake_mapping(1), t_steps=2)
        h = np.array([[1.0, -1.0], [2.0, 0.0]]).reshape(2, 1, 1, 1, 2)
        acc.accumulate(membrane_trace({'sn1': h}, 2, 1))
        np.testing.assert_allclose(finalize_scores(acc)['conv1'], [2.0])

    def test_silent_channel_scores_zero(self):
        acc = ImportanceAccumulator(fake_mapping(3), t_steps=2)
        acc.accumulate(membrane_trace({'sn1': np.zeros((2, 4, 3, 2, 2))}, 2, 4))
        assert not finalize_scores(acc)['conv1'].any()

    def test_matches_naive_loops(self, rng):
        mapping = fake_mapping(3, 2)
        acc = ImportanceAccumulator(mapping, t_steps=3)
        traces = []
        for _ in range(4):
            membrane = {'sn1': rng.normal(size=(3, 5, 3, 4, 4)), 'sn2': rng.normal(size=(3, 5, 2, 2, 2))}
            traces.append(membrane)
            acc.accumulate(membrane_trace(membrane, 3, 5))
        scores = finalize_scores(acc)
        for entry in mapping:
            for k in range(entry.channels):
                total = 0.0
                for membrane in traces:
                    h = membrane[entry.sn]
                    for n in range(h.shape[1]):
                        for t in range(h.shape[0]):
                            total += np.abs(h[t, n, k]).sum()
                assert scores[entry.conv][k] == pytest.approx(total / (20 * 3), rel=1e-9, abs=1e-12)

    def test_merge_equals_single_pass(self, rng):
        mapping = fake_mapping(4)
        a = {'sn1': rng.normal(size=(2, 3, 4, 2, 2))}
        b = {'sn1': rng.normal(size=(2, 5, 4, 2, 2))}
        single = ImportanceAccumulator(mapping, 2)
        single.accumulate(membrane_trace(a, 2, 3))
        single.accumulate(membrane_trace(b, 2, 5))
        left = ImportanceAccumulator(mapping, 2)
        left.accumulate(membrane_trace(a, 2, 3))
        right = ImportanceAccumulator(mapping, 2)
        right.accumulate(membrane_trace(b, 2, 5))
        merged = left.merge(right)
        assert merged.n_seen == single.n_seen == 8
        np.testing.assert_array_equal(merged.sums['conv1'], single.sums['conv1'])

    @pytest.mark.parametrize('seed', range(50))
    def test_merge_of_multi_batch_shards_is_exact(self, seed):
        rng = np.random.default_rng(seed)
        mapping = fake_mapping(5, 3)
        batches = []
        for _ in range(4):
            scale = 10.0 ** rng.integers(-8, 9, size=(1, 1, 1, 1, 1))
            batches.append({
                'sn1': rng.normal(size=(2, 3, 5, 2, 2)) * scale,
                'sn2': rng.normal(size=(2, 3, 3, 1, 1)) * scale,
            })
        single = ImportanceAccumulator(mapping, 2)
        for membrane in batches:
            accumulate_importance(single, membrane_trace(membrane, 2, 3))
        shards = []
        for part in (batches[:2], batches[2:]):
            shard = ImportanceAccumulator(mapping, 2)
            for membrane in part:
                accumulate_importance(shard, membrane_trace(membrane, 2, 3))
            shards.append(shard)
        merged = shards[0].merge(shards[1])
        swapped = shards[1].merge(shards[0])
        for scores in (finalize_scores(merged), finalize_scores(swapped)):
            for name, vec in finalize_scores(single).items():
                assert np.array_equal(scores[name], vec)

    def test_repeating_samples_keeps_mean(self, rng):
        membrane = {'sn1': rng.normal(size=(2, 3, 2, 2, 2))}
        once = ImportanceAccumulator(fake_mapping(2), 2)
        once.accumulate(membrane_trace(membrane, 2, 3))
        twice = ImportanceAccumulator(fake_mapping(2), 2)
        twice.accumulate(membrane_trace(membrane, 2, 3))
        twice.accumulate(membrane_trace(membrane, 2, 3))
        np.testing.assert_allclose(finalize_scores(twice)['conv1'], finalize_scores(once)['conv1'])

    def test_no_samples(self):
        with pytest.raises(TraceError):
            finalize_scores(ImportanceAccumulator(fake_mapping(2), 2))

    def test_channel_mismatch(self):
        acc = ImportanceAccumulator(fake_mapping(3), 2)
        with pytest.raises(TraceError):
            acc.accumulate(membrane_trace({'sn1': np.zeros((2, 1, 2, 1, 1))}, 2, 1))

    def test_reset(self, rng):
        acc = ImportanceAccumulator(fake_mapping(2), 1)
        acc.accumulate(membrane_trace({'sn1': rng.normal(size=(1, 2, 2, 1, 1))}, 1, 2))
        acc.reset()
        assert acc.n_seen == 0 and not acc.sums['conv1'].any()

    def test_from_real_trace(self, rng):
        net = build_network(make_definition('4C3-6C3-AP2-10FC', t_steps=2, in_shape=(1, 8, 8)), seed=0)
        acc = ImportanceAccumulator(net.mapping, 2)
        trace = forward_T(net, net.full_mask(), rng.uniform(0, 2, size=(2, 3, 1, 8, 8)))
        acc.accumulate(trace)
        expected = np.abs(trace.membrane['sn2']).sum(axis=(0, 1, 3, 4)) / 6
        np.testing.assert_allclose(finalize_scores(acc)['conv2'], expected)

    def test_effective_scores_zero_dead_channels(self):
        mask = ChannelMask({'conv1': [True, False, True]})
        scores = effective_scores({'conv1': np.array([0.5, 0.7, 0.2])}, mask)
        np.testing.assert_array_equal(scores['conv1'], [0.5, 0.0, 0.2])


class TestGammaAccumulator:

    def test_collects_absolute_gamma_gradients(self, rng):
        net = build_network(make_definition('4C3-6C3-AP2-10FC', t_steps=2, in_shape=(1, 8, 8)), seed=0)
        acc = GammaGradAccumulator(net.mapping)
        trace = forward_T(net, net.full_mask(), rng.uniform(0, 2, size=(2, 3, 1, 8, 8)))
        grads = backward_T(net, trace, rng.normal(size=trace.logits.shape), gamma_acc=acc)
        np.testing.assert_allclose(acc.sums['conv1'], np.abs(grads['bn1.gamma']))
        np.testing.assert_allclose(acc.sums['conv2'], np.abs(grads['bn2.gamma']))
        assert np.all(acc.sums['conv1'] >= 0)

    def test_missing_gradient(self):
        with pytest.raises(TraceError):
            GammaGradAccumulator(fake_mapping(2)).accumulate({})


# ---------------------------------------------------------------------------
# Ranking and the structure step
# ---------------------------------------------------------------------------

class TestGlobalRank:

    def test_tie_break(self):
        mask = ChannelMask({'conv1': [True], 'conv2': [True] * 6})
        scores = {'conv1': np.array([0.1]), 'conv2': np.array([9, 0.3, 9, 9, 9, 0.1])}
        assert global_rank(scores, mask)[:3] == [(0, 0), (1, 5), (1, 1)]

    def test_increasing_scores_identity(self):
        mask = ChannelMask({'conv1': [True] * 3, 'conv2': [True] * 2})
        scores = {'conv1': np.array([0.0, 1.0, 2.0]), 'conv2': np.array([3.0, 4.0])}
        assert global_rank(scores, mask) == [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1)]

    def test_dead_channels_excluded(self):
        mask = ChannelMask({'conv1': [True, False, True]})
        assert global_rank({'conv1': np.zeros(3)}, mask) == [(0, 0), (0, 2)]

    def test_matches_stable_sort(self, rng):
        mask = ChannelMask({'conv1': rng.random(20) < 0.8, 'conv2': rng.random(15) < 0.8})
        scores = {'conv1': rng.integers(0, 5, 20) / 4.0, 'conv2': rng.integers(0, 5, 15) / 4.0}
        flat = [(l, int(k)) for l, name in enumerate(mask.layers) for k in mask.alive(name)]
        expected = sorted(flat, key=lambda lk: scores[mask.layers[lk[0]]][lk[1]])
        assert global_rank(scores, mask) == expected


class TestStructureStep:

    def test_prune_then_regrow_example(self):
        mapping = fake_mapping(10)
        mask = ChannelMask.full(mapping)
        scores = {'conv1': np.arange(10, dtype=float)}
        gamma = gamma_acc_with(mapping, {'conv1': [0.1, 0.9, 0.3, 0, 0, 0, 0, 0, 0, 0]})
        audit = StructureAudit()
        new = structure_step(mask, scores, gamma, PruneConfig(p=0.2, q=0.1), np.random.default_rng(0), audit)
        assert audit.pruned == [(0, 0), (0, 1), (0, 2)]
        assert audit.intermediate.dead == 3
        assert audit.regrown == [(0, 1)]
        np.testing.assert_array_equal(np.flatnonzero(~new['conv1']), [0, 2])
        assert new.sparsity == pytest.approx(0.2)
        assert not gamma.sums['conv1'].any()
        assert mask.dead == 0

    def test_zero_churn_prunes_only(self):
        mapping = fake_mapping(10)
        gamma = gamma_acc_with(mapping, {'conv1': np.ones(10)})
        audit = StructureAudit()
        new = structure_step(ChannelMask.full(mapping), {'conv1': np.arange(10.0)}, gamma,
                             PruneConfig(p=0.3, q=0.0), np.random.default_rng(0), audit)
        assert new.dead == 3 and audit.regrown == []

    def test_only_prune_ignores_churn(self):
        mapping = fake_mapping(10)
        audit = StructureAudit()
        new = structure_step(ChannelMask.full(mapping), {'conv1': np.arange(10.0)}, GammaGradAccumulator(mapping),
                             PruneConfig(p=0.2, q=0.3, mode='only_prune'), np.random.default_rng(0), audit)
        np.testing.assert_array_equal(np.flatnonzero(~new['conv1']), [0, 1])
        assert audit.regrown == []

    def test_random_prune_is_seeded(self):
        mapping = fake_mapping(8, 8)
        scores = {'conv1': np.zeros(8), 'conv2': np.zeros(8)}
        cfg = PruneConfig(p=0.25, q=0.125, mode='random_prune')

        def run(seed):
            gamma = gamma_acc_with(mapping, {'conv1': np.arange(8.0), 'conv2': np.arange(8.0)})
            return structure_step(ChannelMask.full(mapping), scores, gamma, cfg, np.random.default_rng(seed))

        assert run(5) == run(5)
        assert run(5).dead == 4

    def test_floor_skips_to_next_candidate(self):
        mapping = fake_mapping(2, 4)
        scores = {'conv1': np.zeros(2), 'conv2': np.array([1.0, 2.0, 3.0, 4.0])}
        new = structure_step(ChannelMask.full(mapping), scores, GammaGradAccumulator(mapping),
                             PruneConfig(p=0.5), np.random.default_rng(0))
        np.testing.assert_array_equal(new['conv1'], [False, True])
        np.testing.assert_array_equal(new['conv2'], [False, False, True, True])

    def test_infeasible(self):
        mapping = fake_mapping(2, 2)
        with pytest.raises(InfeasiblePruneError):
            structure_step(ChannelMask.full(mapping), {'conv1': np.zeros(2), 'conv2': np.zeros(2)},
                           GammaGradAccumulator(mapping), PruneConfig(p=0.5, min_channels=2),
                           np.random.default_rng(0))

    @pytest.mark.parametrize('mode', ['prune_and_regrow', 'random_prune', 'only_prune'])
    @pytest.mark.parametrize('p,target,peak', [(0.2, 51, 64), (0.5, 128, 140), (0.8, 204, 217)])
    def test_hundred_step_audit(self, rng, mode, p, target, peak):
        mapping = fake_mapping(64, 32, 96, 64)
        cfg = PruneConfig(p=p, q=0.05, min_channels=8, mode=mode)
        total = 256
        assert channel_quota(p, total) == target
        assert cfg.peak_dead(total) == (target if mode == 'only_prune' else peak)
        mask = ChannelMask.full(mapping)
        gamma = GammaGradAccumulator(mapping)
        floor_reached = False
        for _ in range(100):
            scores = {e.conv: rng.random(e.channels) ** 2 for e in mapping}
            for e in mapping:
                gamma.sums[e.conv][:] = rng.exponential(size=e.channels)
            audit = StructureAudit()
            mask = structure_step(mask, scores, gamma, cfg, rng, audit)
            assert mask.dead == target
            assert audit.intermediate.dead == cfg.peak_dead(total)
            assert all(audit.intermediate.alive_count(e.conv) >= 8 for e in mapping)
            assert all(mask.alive_count(e.conv) >= 8 for e in mapping)
            floor_reached |= any(audit.intermediate.alive_count(e.conv) == 8 for e in mapping)
        if p == 0.8:
            assert floor_reached


# ---------------------------------------------------------------------------
# Compaction
# ---------------------------------------------------------------------------

ARCHITECTURES = [
    ('4C3-6C3-AP2-8C3-10FC', 'plain'),
    ('4C3-4R-6R-10FC', 'post_activation_residual'),
    ('4C3-4R-6R-10FC', 'pre_activation_residual'),
]

STRUCTURE_CASES = [
    ('toy_vgg5', 'plain', (1, 16, 16)),
    ('4C3-4R-6R-10FC', 'post_activation_residual', (1, 8, 8)),
    ('4C3-4R-6R-10FC', 'pre_activation_residual', (1, 8, 8)),
]


def learned_mask(net, rng, p):
    """A mask from one structure step on importance measured over a real batch."""
    in_shape = tuple(net.definition.in_shape)
    acc = ImportanceAccumulator(net.mapping, net.t_steps)
    acc.accumulate(forward_T(net, net.full_mask(), rng.uniform(0.0, 3.0, size=(net.t_steps, 16) + in_shape)))
    gamma = GammaGradAccumulator(net.mapping)
    for entry in net.mapping:
        gamma.sums[entry.conv][:] = rng.exponential(size=entry.channels)
    return structure_step(net.full_mask(), finalize_scores(acc), gamma, PruneConfig(p=p, q=0.05), rng)


class TestCompact:

    @pytest.mark.parametrize('architecture,style', ARCHITECTURES)
    def test_masked_equals_compacted(self, architecture, style):
        rng = np.random.default_rng(11)
        net = randomized_net(architecture, style)
        mask = random_mask(net, rng)
        small = compact(net, mask)
        batch = rng.uniform(0.0, 3.0, size=(3, 100, 1, 8, 8))
        masked = forward_T(net, mask, batch, mode='eval').logits
        compacted = forward_T(small, None, batch, mode='eval').logits
        assert np.max(np.abs(masked - compacted)) <= 1e-6

    @pytest.mark.parametrize('architecture,style', ARCHITECTURES)
    def test_alive_count_matches(self, architecture, style):
        rng = np.random.default_rng(12)
        net = randomized_net(architecture, style)
        mask = random_mask(net, rng)
        small = compact(net, mask)
        assert count_params(small)[0] == count_params(net, mask)[1]
        assert sum(p.size for p in small.parameters().values()) == count_params(net, mask)[1]

    @pytest.mark.parametrize('architecture,style,in_shape', STRUCTURE_CASES)
    def test_learned_half_mask(self, architecture, style, in_shape):
        rng = np.random.default_rng(21)
        net = randomized_net(architecture, style, in_shape=in_shape)
        mask = learned_mask(net, rng, p=0.5)
        assert mask.dead == channel_quota(0.5, mask.total)
        small = compact(net, mask)
        batch = rng.uniform(0.0, 3.0, size=(3, 100) + in_shape)
        masked = forward_T(net, mask, batch, mode='eval').logits
        compacted = forward_T(small, None, batch, mode='eval').logits
        assert np.max(np.abs(masked - compacted)) <= 1e-6
        assert count_params(small)[0] == count_params(net, mask)[1]

    def test_full_mask_is_identity(self, rng):
        net = randomized_net('4C3-6C3-AP2-8C3-10FC', 'plain')
        small = compact(net, net.full_mask())
        for name, value in net.parameters().items():
            assert small.parameters()[name].shape == value.shape
        batch = rng.uniform(0.0, 3.0, size=(3, 5, 1, 8, 8))
        np.testing.assert_array_equal(
            forward_T(net, net.full_mask(), batch, mode='eval').logits,
            forward_T(small, None, batch, mode='eval').logits
        )

    def test_pruned_shapes(self):
        net = randomized_net('4C3-6C3-AP2-8C3-10FC', 'plain')
        mask = net.full_mask()
        mask['conv2'][[0, 3]] = False
        small = compact(net, mask)
        assert small.layer('conv2').params.weight.shape == (4, 4, 3, 3)
        assert small.layer('conv3').params.weight.shape == (8, 4, 3, 3)
        assert small.layer('bn2').params.channels == 4

    def test_empty_layer_rejected(self):
        net = randomized_net('4C3-6C3-AP2-8C3-10FC', 'plain')
        mask = net.full_mask()
        mask['conv1'][:] = False
        with pytest.raises(InfeasiblePruneError):
            compact(net, mask)

    def test_compacted_takes_no_mask(self, rng):
        net = randomized_net('4C3-6C3-AP2-8C3-10FC', 'plain')
        small = compact(net, net.full_mask())
        with pytest.raises(TraceError):
            forward_T(small, small.full_mask(), rng.uniform(size=(3, 1, 1, 8, 8)))


class TestPrunedSilence:

    @pytest.mark.parametrize('architecture,style,in_shape', STRUCTURE_CASES)
    def test_pruned_channels_never_spike(self, architecture, style, in_shape):
        rng = np.random.default_rng(31)
        net = randomized_net(architecture, style, in_shape=in_shape)
        mask = learned_mask(net, rng, p=0.5)
        assert mask.dead > 0
        trace = forward_T(net, mask, rng.uniform(0.0, 3.0, size=(3, 100) + in_shape), mode='eval')
        for entry in net.mapping:
            assert not trace.spikes[entry.sn][:, :, ~mask[entry.conv]].any()

# ---------------------------------------------------------------------------
# SynOps
# ---------------------------------------------------------------------------

class TestSynOps:

    def test_zero_input(self):
        net = build_network(make_definition('4C3-6C3-AP2-10FC', t_steps=2, in_shape=(1, 8, 8)), seed=0)
        assert synops(net, net.full_mask(), [np.zeros((2, 4, 1, 8, 8))]) == 0

    def test_single_spike(self):
        net = build_network(make_definition('4C3-6C3-AP2-10FC', t_steps=2, in_shape=(1, 8, 8)), seed=0)
        mask = net.full_mask()
        mask['conv2'][[1, 4]] = False
        trace = ForwardTrace(mode='eval', t_steps=2, batch_size=1, active_inputs={'conv2': 1}, complete=True)
        assert trace_synops(net, mask, trace) == 36

    def test_masking_does_not_increase(self, rng):
        net = build_network(make_definition('8C3-10FC', t_steps=3, in_shape=(1, 8, 8)), seed=0)
        batches = [rng.uniform(0.0, 3.0, size=(3, 10, 1, 8, 8)) for _ in range(2)]
        dense = synops(net, net.full_mask(), batches)
        mask = net.full_mask()
        mask['conv1'][[0, 2, 5]] = False
        assert synops(net, mask, batches) <= dense

    def test_compacted_matches_masked(self, rng):
        net = randomized_net('4C3-6C3-AP2-8C3-10FC', 'plain')
        mask = random_mask(net, rng)
        batches = [rng.uniform(0.0, 3.0, size=(3, 20, 1, 8, 8))]
        assert synops(compact(net, mask), None, batches) == synops(net, mask, batches)

    def test_no_batches(self):
        net = build_network(make_definition('4C3-10FC', t_steps=2, in_shape=(1, 4, 4)), seed=0)
        assert synops(net, net.full_mask(), []) == 0
