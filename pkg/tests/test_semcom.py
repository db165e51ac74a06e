import numpy as np
import pytest
import torch

from semcom_sna._validation import ContractError
from semcom_sna.datasets import PLATE_ALPHABET, SyntheticSpec, make_synthetic, make_synthetic_plates
from semcom_sna.semcom import (
    ChannelConfig,
    ModelCheckpoint,
    NormalizationError,
    PipelineConfig,
    TrainingError,
    awgn_channel,
    classify_accuracy,
    init_model,
    noise_std,
    plate_accuracy,
    plate_greedy_decode,
    power_normalize,
    sample_training_snr,
    semcom_forward,
    task_loss,
    train_loop,
    train_natural,
)

# ---------------------------------------------------------------- channel


def test_power_normalize_examples(rng):
    np.testing.assert_allclose(power_normalize(np.full(4, 2.0)), np.ones(4))
    x = rng.standard_normal((50, 128))
    z = power_normalize(x)
    np.testing.assert_allclose(np.mean(z * z, axis=1), 1.0, atol=1e-5)
    np.testing.assert_allclose(power_normalize(z), z, atol=1e-12)
    zt = power_normalize(torch.from_numpy(x))
    np.testing.assert_allclose(zt.numpy(), z, atol=1e-12)
    with pytest.raises(NormalizationError):
        power_normalize(np.zeros(8))


@pytest.mark.parametrize("snr_db", [0.0, 5.0, 10.0, 20.0])
def test_awgn_empirical_snr(snr_db, rng):
    x = power_normalize(rng.standard_normal((1000, 100)))  # 1e5 symbols
    y = awgn_channel(x, snr_db, rng_seed=int(snr_db) + 1)
    measured = 10 * np.log10(np.mean(x ** 2) / np.mean((y - x) ** 2))
    assert abs(measured - snr_db) <= 0.2


def test_awgn_limits_and_determinism(rng):
    assert noise_std(0.0) == 1.0
    x = power_normalize(rng.standard_normal((4, 16)))
    assert np.max(np.abs(awgn_channel(x, 300.0, 0) - x)) < 1e-6
    np.testing.assert_array_equal(awgn_channel(x, 5.0, 9), awgn_channel(x, 5.0, 9))
    xt = torch.from_numpy(x)
    assert torch.equal(awgn_channel(xt, 5.0, 3), awgn_channel(xt, 5.0, 3))


def test_training_snr_sampling():
    rng = np.random.default_rng(0)
    assert all(sample_training_snr(ChannelConfig(7, 7), rng) == 7 for _ in range(100))
    cfg = ChannelConfig(5, 10)
    draws = np.array([sample_training_snr(cfg, rng) for _ in range(100_000)])
    assert abs(draws.mean() - 7.5) <= 0.05
    big = rng.uniform(5, 10, size=1_000_000)  # same distribution, vectorised support check
    assert big.min() >= 5 and big.max() <= 10
    assert draws.min() >= 5 and draws.max() <= 10
    with pytest.raises(ContractError):
        ChannelConfig(10, 5)


# ---------------------------------------------------------------- decoding


def _reference_collapse(path, blank=0):
    # textbook CTC best-path: group runs, then drop blanks
    groups = []
    for k in path:
        if not groups or groups[-1] != k:
            groups.append(k)
    return [k for k in groups if k != blank]


def test_greedy_decode_examples():
    alphabet = ("-", "A", "B")
    scores = np.eye(3)[[1, 1, 0, 2]]
    assert plate_greedy_decode(scores, alphabet) == "AB"
    assert plate_greedy_decode(np.eye(3)[[0, 0, 0]], alphabet) == ""
    assert plate_greedy_decode(np.eye(3)[[1, 0, 1]], alphabet) == "AA"


def test_greedy_decode_matches_reference(rng):
    for _ in range(1000):
        T, A = rng.integers(1, 20), rng.integers(2, 8)
        scores = rng.standard_normal((T, A))
        scores[rng.random(T) < 0.3, 0] += 3  # plenty of blanks
        alphabet = tuple("-abcdefg"[:A])
        ref = "".join(alphabet[k] for k in _reference_collapse(scores.argmax(1).tolist()))
        assert plate_greedy_decode(scores, alphabet) == ref


# ---------------------------------------------------------------- forward and metrics


def test_forward_bypass_vs_high_snr(trained_small, small_split):
    X = small_split.X_test
    a = semcom_forward(X, trained_small, 300.0, seed=1).argmax(1)
    b = semcom_forward(X, trained_small, None).argmax(1)
    np.testing.assert_array_equal(a, b)


def test_forward_bit_identical(trained_small, small_split):
    X = small_split.X_test[:32]
    np.testing.assert_array_equal(semcom_forward(X, trained_small, 5.0, seed=4),
                                  semcom_forward(X, trained_small, 5.0, seed=4))


def test_forward_shape_mismatch(trained_small):
    with pytest.raises(ContractError):
        semcom_forward(np.zeros((2, 3, 8, 8), np.float32), trained_small, 10.0)


def test_untrained_is_at_chance():
    split = make_synthetic(SyntheticSpec(10, 100, 16, seed=11))
    cfg = PipelineConfig(task="classification", d_s=64, d_c=32, encoder_arch="small_cnn", num_classes=10,
                         image_shape=split.image_shape, encoder_width=8)
    accs = [classify_accuracy(ModelCheckpoint(init_model(PipelineConfig(**{**cfg.to_dict(), "seed": s})),
                                              cfg), split.X_test, split.y_test, 10.0) for s in range(5)]
    assert abs(np.mean(accs) - 0.1) <= 0.05


def test_classify_accuracy_perfect_and_permuted(trained_small, small_split):
    X = small_split.X_test
    pred = semcom_forward(X, trained_small, 10.0, seed=0).argmax(1)
    assert classify_accuracy(trained_small, X, pred, 10.0, 0) == 1.0
    assert classify_accuracy(trained_small, X, (pred + 1) % 4, 10.0, 0) == 0.0
    with pytest.raises(ContractError):
        classify_accuracy(trained_small, X[:0], pred[:0], 10.0)


def test_natural_training_learns(trained_small, small_split):
    assert classify_accuracy(trained_small, small_split.X_test, small_split.y_test, 10.0) >= 0.9
    losses = [h["loss"] for h in trained_small.history]
    assert losses[-1] < losses[0]


def test_epochs_zero_is_initialisation(small_split, small_pipeline):
    ckpt = train_natural(small_split, small_pipeline, ChannelConfig(), epochs=0)
    assert ckpt.state_digest() == ModelCheckpoint(init_model(small_pipeline), small_pipeline).state_digest()


def test_training_deterministic(small_split, small_pipeline):
    a = train_natural(small_split, small_pipeline, ChannelConfig(), epochs=1, seed=5)
    b = train_natural(small_split, small_pipeline, ChannelConfig(), epochs=1, seed=5)
    assert a.state_digest() == b.state_digest()


def test_divergence_reports_epoch(small_split, small_pipeline):
    def exploding(model, x, targets, snr_db, generator):
        out = model(x, snr_db, generator)
        return task_loss(model, out, targets) * float("nan"), {"_outputs": out}

    ckpt = ModelCheckpoint(init_model(small_pipeline), small_pipeline)
    with pytest.raises(TrainingError) as info:
        train_loop(ckpt, small_split.X_train, small_split.y_train, ChannelConfig(), 2, seed=0, objective=exploding)
    assert info.value.epoch == 1  # epochs are numbered from 1


def test_checkpoint_round_trip(tmp_path, trained_small, small_split):
    path = trained_small.save(tmp_path / "m.pt")
    back = ModelCheckpoint.load(path)
    assert back.state_digest() == trained_small.state_digest()
    assert back.config == trained_small.config and back.tag == "natural"
    X = small_split.X_test[:16]
    np.testing.assert_array_equal(semcom_forward(X, back, 8.0, 2), semcom_forward(X, trained_small, 8.0, 2))


# ---------------------------------------------------------------- gradient check


def test_task_loss_gradient_matches_finite_differences():
    torch.set_default_dtype(torch.float64)
    try:
        cfg = PipelineConfig(task="classification", d_s=8, d_c=6, encoder_arch="mlp", num_classes=3,
                             image_shape=(3, 4, 4), encoder_width=10)
        net = init_model(cfg)
        gen = torch.Generator().manual_seed(0)
        x = torch.rand((5, 3, 4, 4), generator=gen)
        y = torch.tensor([0, 1, 2, 0, 1])
        params = [p for p in net.parameters()]

        def loss():
            g = torch.Generator().manual_seed(7)  # identical channel noise every evaluation
            return task_loss(net, net(x, 10.0, g), y)

        grads = torch.autograd.grad(loss(), params)
        h = 1e-6
        worst = 0.0
        for _ in range(10):
            v = [torch.randn(p.shape, generator=gen) for p in params]
            analytic = sum(float((g * d).sum()) for g, d in zip(grads, v))
            with torch.no_grad():
                for p, d in zip(params, v):
                    p.add_(h * d)
                up = float(loss())
                for p, d in zip(params, v):
                    p.sub_(2 * h * d)
                down = float(loss())
                for p, d in zip(params, v):
                    p.add_(h * d)
            numeric = (up - down) / (2 * h)
            worst = max(worst, abs(analytic - numeric) / max(abs(numeric), 1e-12))
        assert worst <= 1e-3
    finally:
        torch.set_default_dtype(torch.float32)


# ---------------------------------------------------------------- plates


def test_plate_accuracy_rules():
    cfg = PipelineConfig.for_plates(encoder_width=8)
    ckpt = ModelCheckpoint(init_model(cfg), cfg)
    split = make_synthetic_plates(8, seed=0)
    preds = [plate_greedy_decode(s, PLATE_ALPHABET) for s in semcom_forward(split.X_test, ckpt, 10.0, 0)]
    assert plate_accuracy(ckpt, split.X_test, preds, 10.0, 0) == 1.0
    wrong = [("Z" if p[:1] != "Z" else "Y") + p[1:] if p else "A" for p in preds]
    assert plate_accuracy(ckpt, split.X_test, wrong, 10.0, 0) == 0.0
    if "" in preds:
        assert plate_accuracy(ckpt, split.X_test, ["A" if p == "" else p for p in preds], 10.0, 0) < 1.0
    with pytest.raises(ContractError):
        plate_accuracy(ckpt, split.X_test[:0], [], 10.0)


def test_plate_pipeline_learns():
    split = make_synthetic_plates(400, seed=1, plate_length=4, symbols=list("0123"))
    cfg = PipelineConfig.for_plates(encoder_width=16, d_c=128, alphabet=("-",) + tuple("0123"))
    ckpt = train_natural(split, cfg, ChannelConfig(), epochs=18, seed=0, batch_size=32, lr=2e-3)
    assert ckpt.history[-1]["loss"] < 0.2 * ckpt.history[0]["loss"]
    assert plate_accuracy(ckpt, split.X_test, split.y_test, 20.0) >= 0.3
