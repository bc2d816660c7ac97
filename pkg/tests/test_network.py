import numpy as np
import pytest

import network
from architecture import make_definition
from errors import ArchitectureError, ShapeError, TraceError
from network import ChannelMask, backward_T, build_network, count_params, forward_T
from neuron import NeuronConfig
from tensor import conv2d_backward


def smooth_net(architecture='2C3-3C3-AP2-4FC', style='plain', t_steps=4, in_shape=(1, 8, 8), seed=3):
    neuron = NeuronConfig.gradient_check(kind='LIF', alpha=2.0)
    definition = make_definition(architecture, style, t_steps=t_steps, in_shape=in_shape, neuron=neuron)
    return build_network(definition, seed=seed)


def spiking_net(architecture='4C3-6C3-AP2-10FC', style='plain', t_steps=4, in_shape=(1, 8, 8), seed=0):
    definition = make_definition(architecture, style, t_steps=t_steps, in_shape=in_shape)
    return build_network(definition, seed=seed)


def random_batch(rng, net, n=3, scale=2.0):
    return rng.uniform(0.0, scale, size=(net.t_steps, n) + tuple(net.definition.in_shape))


def check_gradients(net, batch, rng, picks=6, tolerance=1e-4, step=1e-5):
    classes = net.layers[-1].weight.shape[0]
    g = rng.normal(size=(batch.shape[1], classes))

    def loss():
        return float(np.sum(forward_T(net, None, batch).logits * g))

    grads = backward_T(net, forward_T(net, None, batch), g)
    for name, param in net.parameters().items():
        flat = param.reshape(-1)
        analytic = grads[name].reshape(-1)
        scale = max(np.max(np.abs(analytic)), 1e-8)
        for i in rng.choice(flat.size, size=min(picks, flat.size), replace=False):
            saved = flat[i]
            flat[i] = saved + step
            plus = loss()
            flat[i] = saved - step
            minus = loss()
            flat[i] = saved
            numeric = (plus - minus) / (2 * step)
            assert abs(numeric - analytic[i]) <= tolerance * scale, (name, i, numeric, analytic[i])


# ---------------------------------------------------------------------------
# Building
# ---------------------------------------------------------------------------

class TestBuild:

    def test_same_seed_bit_identical(self):
        a = spiking_net(seed=7).state_dict()
        b = spiking_net(seed=7).state_dict()
        assert a.keys() == b.keys()
        for name in a:
            assert np.array_equal(a[name], b[name])

    def test_different_seed_differs(self):
        a = spiking_net(seed=1).parameters()['conv1.weight']
        b = spiking_net(seed=2).parameters()['conv1.weight']
        assert not np.array_equal(a, b)

    def test_initialization(self):
        net = spiking_net()
        weight = net.layer('conv2').params.weight
        assert weight.shape == (6, 4, 3, 3)
        assert np.max(np.abs(weight)) <= np.sqrt(6.0 / 36)
        np.testing.assert_array_equal(net.layer('bn1').params.gamma, np.ones(4))
        np.testing.assert_array_equal(net.layer('bn1').params.beta, np.zeros(4))
        assert net.layer('fc').weight.shape == (10, 6 * 16)

    def test_odd_pooling_rejected(self):
        with pytest.raises(ArchitectureError):
            spiking_net('4C3-AP2-AP2-10FC', in_shape=(1, 6, 6))

    def test_residual_shortcut_only_on_width_change(self):
        net = spiking_net('4C3-4R-8R-10FC', 'post_activation_residual')
        names = [layer.name for layer in net.iter_layers()]
        assert 'block1.shortcut_conv' not in names
        assert 'block2.shortcut_conv' in names

    def test_load_state_rejects_wrong_shape(self):
        net = spiking_net()
        state = net.state_dict()
        state['conv1.weight'] = np.zeros((1, 1, 3, 3))
        with pytest.raises(ShapeError):
            net.load_state(state)


# ---------------------------------------------------------------------------
# Forward and mask gating
# ---------------------------------------------------------------------------

class TestForward:

    def test_full_mask_matches_unmasked(self, rng):
        net = spiking_net()
        batch = random_batch(rng, net)
        masked = forward_T(net, net.full_mask(), batch, mode='eval')
        plain = forward_T(net, None, batch, mode='eval')
        np.testing.assert_array_equal(masked.logits, plain.logits)

    def test_all_zero_mask_zeroes_logits(self, rng):
        net = spiking_net()
        mask = ChannelMask({entry.conv: np.zeros(entry.channels) for entry in net.mapping})
        trace = forward_T(net, mask, random_batch(rng, net), mode='eval')
        assert not trace.logits.any()

    def test_pruned_channel_is_silent(self, rng):
        net = spiking_net()
        mask = net.full_mask()
        mask['conv1'][2] = False
        reference = None
        for _ in range(10):
            batch = random_batch(rng, net, n=10)
            trace = forward_T(net, mask, batch, mode='eval')
            assert not trace.spikes['sn1'][:, :, 2].any()
            reference = batch
        before = forward_T(net, mask, reference, mode='eval').logits
        net.layer('conv1').params.weight[2] += 5.0
        after = forward_T(net, mask, reference, mode='eval').logits
        np.testing.assert_array_equal(before, after)

    def test_sequence_input(self, rng):
        net = spiking_net()
        batch = random_batch(rng, net)
        from_list = forward_T(net, None, list(batch), mode='eval')
        from_array = forward_T(net, None, batch, mode='eval')
        np.testing.assert_array_equal(from_list.logits, from_array.logits)

    def test_trace_contents(self, rng):
        net = spiking_net()
        trace = forward_T(net, net.full_mask(), random_batch(rng, net, n=2))
        assert trace.complete
        assert trace.logits.shape == (2, 10)
        assert trace.membrane['sn2'].shape == (4, 2, 6, 8, 8)
        assert set(trace.active_inputs) == {'conv1', 'conv2', 'fc'}

    @pytest.mark.parametrize('batch_shape', [(3, 2, 1, 8, 8), (4, 2, 1, 6, 8), (4, 0, 1, 8, 8)])
    def test_bad_batch(self, batch_shape):
        with pytest.raises(ShapeError):
            forward_T(spiking_net(), None, np.zeros(batch_shape))

    def test_ragged_sequence(self):
        frames = [np.zeros((2, 1, 8, 8))] * 3 + [np.zeros((1, 1, 8, 8))]
        with pytest.raises(ShapeError):
            forward_T(spiking_net(), None, frames)

    def test_deterministic(self, rng):
        net = spiking_net()
        batch = random_batch(rng, net)
        a = forward_T(net, None, batch)
        b = forward_T(net, None, batch)
        np.testing.assert_array_equal(a.logits, b.logits)
        ga = backward_T(net, a, np.ones_like(a.logits))
        gb = backward_T(net, b, np.ones_like(b.logits))
        for name in ga:
            assert np.array_equal(ga[name], gb[name])


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------

class TestBackward:

    def test_zero_upstream(self, rng):
        net = spiking_net()
        trace = forward_T(net, net.full_mask(), random_batch(rng, net))
        grads = backward_T(net, trace, np.zeros_like(trace.logits))
        assert set(grads) == set(net.parameters())
        assert all(not grad.any() for grad in grads.values())

    def test_eval_trace_rejected(self, rng):
        net = spiking_net()
        trace = forward_T(net, None, random_batch(rng, net), mode='eval')
        with pytest.raises(TraceError):
            backward_T(net, trace, np.zeros_like(trace.logits))

    def test_incomplete_trace_rejected(self, rng):
        net = spiking_net()
        trace = forward_T(net, None, random_batch(rng, net))
        trace.complete = False
        with pytest.raises(TraceError):
            backward_T(net, trace, np.zeros_like(trace.logits))

    def test_gradient_check_plain(self, rng):
        net = smooth_net()
        check_gradients(net, random_batch(rng, net, n=2), rng)

    def test_gradient_check_single_step(self, rng):
        net = smooth_net(t_steps=1)
        check_gradients(net, random_batch(rng, net, n=2), rng)

    def test_gradient_check_post_activation(self, rng):
        net = smooth_net('2C3-2R-4R-4FC', 'post_activation_residual', t_steps=2, in_shape=(1, 4, 4))
        check_gradients(net, random_batch(rng, net, n=2), rng)

    def test_gradient_check_pre_activation(self, rng):
        net = smooth_net('2C3-2R-4R-4FC', 'pre_activation_residual', t_steps=2, in_shape=(1, 4, 4))
        check_gradients(net, random_batch(rng, net, n=2), rng)

    def test_time_additivity(self, rng, monkeypatch):
        net = spiking_net(t_steps=2)
        x = rng.uniform(0.0, 2.0, size=(3, 1, 8, 8))
        batch = np.stack([x, np.zeros_like(x)])
        calls = {}
        real = network.conv2d_backward

        def recording(inputs, params, d_out):
            calls[id(params)] = (inputs, d_out)
            return real(inputs, params, d_out)

        monkeypatch.setattr(network, 'conv2d_backward', recording)
        trace = forward_T(net, None, batch)
        grads = backward_T(net, trace, rng.normal(size=trace.logits.shape))

        for name in ('conv1', 'conv2'):
            params = net.layer(name).params
            inputs, d_out = calls[id(params)]
            n = inputs.shape[0] // 2
            per_step = [conv2d_backward(inputs[t * n:(t + 1) * n], params, d_out[t * n:(t + 1) * n])[1]
                        for t in range(2)]
            np.testing.assert_allclose(grads[name + '.weight'], per_step[0] + per_step[1], rtol=1e-12, atol=1e-14)
            if name == 'conv1':
                # the zero frame contributes nothing
                assert not per_step[1].any()

    def test_pruned_channels_still_receive_gamma_gradient(self, rng):
        net = spiking_net()
        mask = net.full_mask()
        mask['conv1'][:] = False
        mask['conv1'][0] = True
        trace = forward_T(net, mask, random_batch(rng, net, n=4, scale=3.0))
        grads = backward_T(net, trace, rng.normal(size=trace.logits.shape))
        assert np.any(grads['bn1.gamma'][1:] != 0)


# ---------------------------------------------------------------------------
# Parameter counting
# ---------------------------------------------------------------------------

class TestCountParams:

    def test_conv_example(self):
        net = spiking_net('2C3-3C3-4FC', in_shape=(1, 4, 4))
        mask = net.full_mask()
        mask['conv1'][1] = False
        mask['conv2'][2] = False
        total, alive = count_params(net, mask)
        assert net.layer('conv2').params.weight.size == 54
        # conv1 9 + bn1 2 + conv2 2*1*9 + bn2 4 + fc 4 * 2 channels * 16 positions
        assert alive == 9 + 2 + 18 + 4 + 128
        assert total == 18 + 4 + 54 + 6 + 4 * 48

    def test_full_mask_counts_everything(self):
        net = spiking_net()
        total, alive = count_params(net, net.full_mask())
        assert alive == total == sum(p.size for p in net.parameters().values())

    def test_no_mask(self):
        net = spiking_net()
        assert count_params(net) == count_params(net, net.full_mask())
