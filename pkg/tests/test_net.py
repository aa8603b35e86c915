from __future__ import annotations

import numpy as np
import pytest

from comprnn import net
from comprnn.prompts import build_episode
from comprnn.tables import TaskRef
from comprnn.trainer import acd_sigmoid_mask

from reference import fd_gradient, max_relative_error, ref_hidden, ref_loss_ce, ref_loss_mse, ref_probs


def small_config(mask=False) -> net.NetConfig:
    return net.NetConfig(lstm_units=8, sigmoid_units=5,
                         sigmoid_mask=None if not mask else np.ones((5, 8)))


def random_params(seed: int, config: net.NetConfig | None = None) -> net.NetParams:
    config = config or small_config()
    params = net.init_params(seed, config)
    rng = np.random.default_rng(seed + 1000)
    for name in net.TENSOR_ORDER:  # non-zero biases exercise all gradient paths
        tensor = getattr(params, name)
        tensor += rng.uniform(-0.3, 0.3, tensor.shape)
    if config.sigmoid_mask is not None:
        params.w_sig *= config.sigmoid_mask
    return params


def episode_for_tests(paper_set, composed=False):
    task = TaskRef(("g", "c")) if composed else TaskRef(("g",))
    return build_episode(task, paper_set, "001")


def test_init_ranges_and_determinism():
    config = net.NetConfig(lstm_units=60)
    params = net.init_params(7, config)
    for name in ("w_gates", "w_sig", "w_out"):
        assert np.abs(getattr(params, name)).max() <= 0.1
    for name in ("b_gates", "b_sig", "b_out"):
        assert (getattr(params, name) == 0.0).all()
    again = net.init_params(7, config)
    assert all(np.array_equal(getattr(params, n), getattr(again, n))
               for n in net.TENSOR_ORDER)
    other = net.init_params(8, config)
    assert not np.array_equal(params.w_gates, other.w_gates)


def test_init_respects_mask():
    mask = acd_sigmoid_mask(10)
    config = net.NetConfig(lstm_units=29, sigmoid_mask=mask)
    params = net.init_params(3, config)
    assert (params.w_sig[mask == 0.0] == 0.0).all()
    assert (params.w_sig[mask == 1.0] != 0.0).any()


def test_forward_probs_normalized_and_match_reference(paper_set):
    params = random_params(0)
    ep = episode_for_tests(paper_set, composed=True)
    result = net.forward(params, ep)
    assert np.abs(result.probs.sum(axis=1) - 1.0).max() < 1e-12
    hs = ref_hidden(params.w_gates, params.b_gates, ep.step_vectors)
    assert np.allclose(result.hidden, hs, atol=1e-12)
    probs = ref_probs(params.tensors(), hs)
    assert np.allclose(result.probs, probs, atol=1e-12)


def test_zero_weights_give_uniform_distribution(paper_set):
    params = net.init_params(0, small_config())
    for name in net.TENSOR_ORDER:
        getattr(params, name)[:] = 0.0
    result = net.forward(params, episode_for_tests(paper_set))
    assert np.allclose(result.probs, 1.0 / 3.0)


def test_gold_and_model_feedback_agree_once_episode_is_memorized(paper_set):
    # Overfit a single episode until the teacher-forced argmaxes are all
    # correct; free running must then reproduce the same emission.
    params = random_params(2)
    opt = net.OptState.adam(params.config, lr=0.01)
    ep = episode_for_tests(paper_set)
    losses = []
    for _ in range(400):
        result = net.bptt(params, ep)
        losses.append(result.loss)
        net.update(params, result.grads, opt)
        if result.all_correct:
            break
    assert result.all_correct, "failed to memorize one episode"
    # cross-entropy decreases over the first updates
    assert losses[5] < losses[0]
    gold = net.forward(params, ep, feedback="gold")
    model = net.forward(params, ep, feedback="model")
    assert gold.emitted == ep.target
    assert model.emitted == ep.target


def test_free_running_stops_at_cap(paper_set):
    params = net.init_params(0, small_config())
    for name in net.TENSOR_ORDER:
        getattr(params, name)[:] = 0.0
    params.b_out[0] = 5.0  # always emit '0', never the dot
    ep = episode_for_tests(paper_set)
    result = net.forward(params, ep, feedback="model")
    assert result.emitted == "0" * net.free_running_cap(len(ep.target))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_bptt_ce_matches_finite_differences(paper_set, seed):
    params = random_params(seed)
    ep = episode_for_tests(paper_set, composed=bool(seed % 2))
    result = net.bptt(params, ep)
    tgt = ep.target_indices()
    fd = fd_gradient(lambda a: ref_loss_ce(a, ep.step_vectors, tgt),
                     params.tensors(), net.TENSOR_ORDER)
    for name in net.TENSOR_ORDER:
        err = max_relative_error(getattr(result.grads, name), fd[name])
        assert err < 1e-4, f"{name}: {err}"


def test_bptt_mse_matches_finite_differences(paper_set):
    params = random_params(5)
    ep = episode_for_tests(paper_set)
    rng = np.random.default_rng(0)
    trace = rng.integers(0, 2, (ep.n_steps, params.config.lstm_units)).astype(float)
    result = net.bptt(params, ep, loss="mse_hidden", trace=trace)
    fd = fd_gradient(lambda a: ref_loss_mse(a, ep.step_vectors, trace),
                     params.tensors(), net.LSTM_TENSORS)
    for name in net.LSTM_TENSORS:
        err = max_relative_error(getattr(result.grads, name), fd[name])
        assert err < 1e-4, f"{name}: {err}"
    assert (result.grads.w_sig == 0.0).all()  # head untouched by the MSE loss


def test_mse_gradient_zero_at_optimum(paper_set):
    params = random_params(6)
    ep = episode_for_tests(paper_set)
    hidden = net.forward(params, ep).hidden
    result = net.bptt(params, ep, loss="mse_hidden", trace=hidden)
    assert result.loss == 0.0
    assert (result.grads.w_gates == 0.0).all()
    assert (result.grads.b_gates == 0.0).all()


def test_trace_length_mismatch_rejected(paper_set):
    params = random_params(0)
    ep = episode_for_tests(paper_set)
    with pytest.raises(net.NetError, match="trace shape"):
        net.bptt(params, ep, loss="mse_hidden",
                 trace=np.zeros((ep.n_steps + 1, params.config.lstm_units)))


def test_sgd_with_zero_lr_is_identity(paper_set):
    params = random_params(1)
    before = params.copy()
    result = net.bptt(params, episode_for_tests(paper_set))
    net.update(params, result.grads, net.OptState.sgd(lr=0.0))
    for name in net.TENSOR_ORDER:
        assert np.array_equal(getattr(params, name), getattr(before, name))


def test_masked_entries_stay_exactly_zero_after_updates(paper_set):
    mask = acd_sigmoid_mask(10)
    config = net.NetConfig(lstm_units=29, sigmoid_mask=mask)
    params = net.init_params(3, config)
    opt = net.OptState.adam(config, lr=0.01)
    ep = episode_for_tests(paper_set)
    for _ in range(5):
        result = net.bptt(params, ep)
        net.update(params, result.grads, opt)
    assert (params.w_sig[mask == 0.0] == 0.0).all()


def test_adam_first_step_size_is_bias_corrected_lr():
    config = small_config()
    params = net.init_params(0, config)
    before = params.w_gates.copy()
    grads = net.Gradients.zeros(config)
    grads.w_gates[:] = 1.0
    opt = net.OptState.adam(config, lr=1e-3)
    net.update(params, grads, opt)
    delta = params.w_gates - before
    # first bias-corrected step with unit gradient: -lr / (1 + eps)
    assert np.allclose(delta, -1e-3 / (1.0 + 1e-8), atol=1e-12)


def test_frozen_tensors_are_untouched(paper_set):
    params = random_params(4)
    before = params.w_gates.copy()
    result = net.bptt(params, episode_for_tests(paper_set))
    net.update(params, result.grads, net.OptState.adam(params.config, lr=0.01),
               frozen=net.LSTM_TENSORS)
    assert np.array_equal(params.w_gates, before)
    assert not np.array_equal(params.w_sig, random_params(4).w_sig)


def test_non_finite_gradient_raises(paper_set):
    params = random_params(0)
    grads = net.Gradients.zeros(params.config)
    grads.w_out[0, 0] = np.nan
    with pytest.raises(net.NonFiniteGradientError):
        net.update(params, grads, net.OptState.sgd(lr=0.1))


def test_bit_determinism_of_training_updates(paper_set):
    def run():
        params = net.init_params(11, small_config())
        opt = net.OptState.adam(params.config, lr=1e-3)
        for bits in ["000", "001", "010", "011"] * 10:
            ep = build_episode(TaskRef(("g",)), paper_set, bits)
            result = net.bptt(params, ep)
            net.update(params, result.grads, opt)
        return params

    a, b = run(), run()
    for name in net.TENSOR_ORDER:
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_checkpoint_roundtrip_is_byte_identical(tmp_path, paper_set):
    params = random_params(9)
    opt = net.OptState.adam(params.config, lr=1e-3)
    result = net.bptt(params, episode_for_tests(paper_set))
    net.update(params, result.grads, opt)
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    net.save_checkpoint(params, opt, {"note": "test"}, p1)
    loaded, opt2, meta = net.load_checkpoint(p1)
    assert meta == {"note": "test"}
    assert opt2.step == opt.step and opt2.kind == "adam"
    for name in net.TENSOR_ORDER:
        assert np.array_equal(getattr(loaded, name), getattr(params, name))
        assert np.array_equal(opt2.m[name], opt.m[name])
    net.save_checkpoint(loaded, opt2, meta, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_with_mask_roundtrips(tmp_path):
    mask = acd_sigmoid_mask(10)
    config = net.NetConfig(lstm_units=29, sigmoid_mask=mask)
    params = net.init_params(3, config)
    path = net.save_checkpoint(params, net.OptState.sgd(0.1), None, tmp_path / "m.ckpt")
    loaded, _, _ = net.load_checkpoint(path)
    assert np.array_equal(loaded.config.sigmoid_mask, mask)


def test_checkpoint_corruption_detected(tmp_path):
    params = random_params(0)
    path = net.save_checkpoint(params, net.OptState.sgd(0.1), {}, tmp_path / "c.ckpt")
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(net.CheckpointIntegrityError, match="checksum"):
        net.load_checkpoint(path)


def test_checkpoint_truncation_detected(tmp_path):
    params = random_params(0)
    path = net.save_checkpoint(params, net.OptState.sgd(0.1), {}, tmp_path / "t.ckpt")
    path.write_bytes(path.read_bytes()[:40])
    with pytest.raises(net.CheckpointIntegrityError):
        net.load_checkpoint(path)


def test_checkpoint_version_mismatch_detected(tmp_path):
    params = random_params(0)
    path = net.save_checkpoint(params, net.OptState.sgd(0.1), {}, tmp_path / "v.ckpt")
    raw = bytearray(path.read_bytes())
    raw[8] = 99  # format_version field follows the 8-byte magic
    import hashlib

    body = bytes(raw[:-32])
    path.write_bytes(body + hashlib.sha256(body).digest())
    with pytest.raises(net.CheckpointVersionError):
        net.load_checkpoint(path)
