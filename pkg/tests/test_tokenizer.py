import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eeglm import tensor as T
from eeglm.preprocess import PatchGrid
from eeglm.tensor import Tensor, finite_diff_check
from eeglm.tokenizer import (
    DomainClassifier,
    TokenizerConfig,
    TokenizerTrainConfig,
    TokenizerTrainer,
    adversarial_loss,
    dft_magnitude,
    domain_bce,
    gather_valid,
    lambda_schedule,
    make_batch,
    quantize,
    tokenize_samples,
    tokenizer_loss,
    zscore_magnitudes,
)
from oracles import naive_dft_magnitude, rel_error, reversal_error
from toys import CHANNELS, toy_batch, toy_samples, toy_tokenizer

# ------------------------------------------------------------------ spectra


def test_dft_constant_patch_has_no_energy():
    np.testing.assert_allclose(dft_magnitude(np.ones(8)), 0.0, atol=1e-12)


def test_dft_cosine_peak():
    x = np.cos(2 * np.pi * np.arange(8) / 8)
    np.testing.assert_allclose(dft_magnitude(x), [4.0, 0, 0, 0], atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), half=st.integers(1, 64))
def test_dft_matches_naive(seed, half):
    x = np.random.default_rng(seed).standard_normal(2 * half)
    assert np.max(np.abs(dft_magnitude(x) - naive_dft_magnitude(x))) < 1e-9


def test_dft_rejects_odd_length():
    with pytest.raises(ValueError):
        dft_magnitude(np.ones(7))


def test_zscore_properties():
    np.testing.assert_array_equal(zscore_magnitudes(np.full((3, 4), 2.5)), 0.0)
    f = np.random.default_rng(0).random((5, 100))
    z = zscore_magnitudes(f)
    assert abs(z.mean()) < 1e-6 and abs(z.std() - 1) < 1e-6
    np.testing.assert_allclose(zscore_magnitudes(3.0 * f + 7.0), z, atol=1e-10)


# ------------------------------------------------------------- quantisation


def test_quantize_examples():
    codes = np.eye(4)
    assert quantize(codes[3:4], codes)[0] == 3
    assert quantize(np.array([[0.9, 0.1, 0, 0]]), codes)[0] == 0
    # ties go to the lowest index
    assert quantize(np.array([[1.0, 1.0, 0, 0]]), codes)[0] == 0
    with pytest.raises(ValueError):
        quantize(np.zeros((1, 4)), codes)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.integers(1, 64), d=st.integers(2, 16))
def test_quantize_is_cosine_argmax_and_l2_argmin(seed, k, d):
    rng = np.random.default_rng(seed)
    codes, h = rng.standard_normal((k, d)), rng.standard_normal((10, d))
    z = quantize(h, codes)
    hn = h / np.linalg.norm(h, axis=1, keepdims=True)
    cn = codes / np.linalg.norm(codes, axis=1, keepdims=True)
    for i in range(10):
        cos = [float(hn[i] @ cn[j]) for j in range(k)]
        dist = [float(np.sum((hn[i] - cn[j]) ** 2)) for j in range(k)]
        assert z[i] == int(np.argmax(cos)) == int(np.argmin(dist))


def test_codebook_rows_quantize_to_themselves():
    model = toy_tokenizer()
    assert quantize(model.codebook.data, model.codebook.data).tolist() == list(range(8))


# ------------------------------------------------------------------ encoder


def test_encoder_shapes_and_decoder_shapes():
    model = toy_tokenizer()
    batch = toy_batch(1, c=2, steps=3)
    h = model.encode(batch)
    assert h.shape == (1, 6, 8)
    o_t, o_f = model.decode(np.zeros((1, 6), dtype=int), batch)
    assert o_t.shape == (1, 6, 16) and o_f.shape == (1, 6, 8)
    with pytest.raises(IndexError):
        model.decode(np.full((1, 6), 8), batch)


def test_decoder_is_deterministic():
    model = toy_tokenizer()
    batch = toy_batch(1)
    z = np.arange(6).reshape(1, 6) % 8
    a, b = model.decode(z, batch), model.decode(z, batch)
    assert a[0].data.tobytes() == b[0].data.tobytes()


def test_channel_permutation_permutes_embeddings():
    model = toy_tokenizer()
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 2, 16))
    perm = [2, 0, 1]
    names = ("C3", "C4", "CZ")
    h1 = tokenize_samples(model, [(PatchGrid(x), names)])[0].embeddings
    h2 = tokenize_samples(model, [(PatchGrid(x[perm]), tuple(names[i] for i in perm))])[0].embeddings
    np.testing.assert_allclose(h2, h1[perm], atol=1e-10)


def test_zero_input_gives_finite_output():
    model = toy_tokenizer()
    h, z = model.tokenize(make_batch([(PatchGrid(np.zeros((2, 2, 16))), ("C3", "C4"))]))
    assert np.all(np.isfinite(h)) and z.min() >= 0


def test_padding_does_not_change_valid_rows():
    model = toy_tokenizer()
    small, big = toy_samples(1, c=2, steps=2, seed=1)[0], toy_samples(1, c=3, steps=3, seed=2)[0]
    alone = tokenize_samples(model, [small])[0]
    together = tokenize_samples(model, [small, big])[0]
    np.testing.assert_allclose(together.embeddings, alone.embeddings, atol=1e-10)
    assert together.codes.tolist() == alone.codes.tolist()


def test_encoder_errors():
    model = toy_tokenizer()
    with pytest.raises(ValueError):
        model.encode(make_batch([(PatchGrid(np.zeros((1, 2, 20))), ("C3",))]))
    with pytest.raises(KeyError):
        make_batch([(PatchGrid(np.zeros((1, 2, 16))), ("NOPE",))])
    with pytest.raises(ValueError):
        TokenizerConfig(reconstruct="spatial")


def test_tokenize_samples_layout():
    model = toy_tokenizer()
    samples = toy_samples(3, c=2, steps=4)
    grids = tokenize_samples(model, samples, batch_size=2)
    for (grid, names), tg in zip(samples, grids):
        assert tg.codes.shape == (2, 4) and tg.embeddings.shape == (2, 4, 8)
        assert tg.channels == names
        h, z = model.tokenize(make_batch([(grid, names)]))
        # time-major flat order -> channel-major grid
        np.testing.assert_array_equal(tg.codes, z[0].reshape(4, 2).T)


# ------------------------------------------------------------------- losses


def test_loss_parts_match_hand_computation():
    model = toy_tokenizer()
    batch = toy_batch(1, c=1, steps=1)
    loss, info = tokenizer_loss(model, batch)
    hq = info["hq"][0, 0]
    v = model.codebook.data[info["z"][0, 0]]
    v = v / np.linalg.norm(v)
    quant = float(np.mean((hq - v) ** 2))
    temporal = float(np.mean((info["o_t"][0, 0] - batch.patches[0, 0]) ** 2))
    freq = float(np.mean((info["o_f"][0, 0] - batch.freq[0, 0]) ** 2))
    assert info["codebook"] == pytest.approx(quant, rel=1e-12)
    assert info["commitment"] == pytest.approx(quant, rel=1e-12)
    assert float(loss.data) == pytest.approx(temporal + freq + 2 * quant, rel=1e-12)


def test_stop_gradients():
    model = toy_tokenizer()
    batch = toy_batch(2)
    h = model.encode(batch)
    hq = T.l2_normalize(model.project(h))
    z = quantize(hq.data, model.codebook.data)
    vz = T.embedding_lookup(T.l2_normalize(model.codebook), z)
    # codebook term: sg(l2(h)) vs l2(v_z)
    T.backward(T.sum_((vz - Tensor(hq.data)) * (vz - Tensor(hq.data))))
    assert all(p.grad is None or not p.grad.any() for p in model.encoder_parameters())
    assert model.codebook.grad is not None and model.codebook.grad.any()
    model.zero_grad()
    h = model.encode(batch)
    hq = T.l2_normalize(model.project(h))
    T.backward(T.sum_((hq - Tensor(vz.data)) * (hq - Tensor(vz.data))))
    assert model.codebook.grad is None or not model.codebook.grad.any()
    assert any(p.grad is not None and p.grad.any() for p in model.encoder_parameters())


def test_full_tokenizer_loss_gradient():
    model = toy_tokenizer(align=False)
    batch = toy_batch(2)
    _, base = tokenizer_loss(model, batch)
    # frozen stop-gradient constants: the difference quotient then sees the
    # function whose gradient the straight-through estimator reports
    pinned = lambda: tokenizer_loss(model, batch, pinned=base)[0]
    assert finite_diff_check(pinned, model.parameters(), n_coords=150) < 1e-4


def test_straight_through_gradient_equals_pinned_gradient():
    model = toy_tokenizer(align=False)
    batch = toy_batch(2)
    loss, base = tokenizer_loss(model, batch)
    T.backward(loss)
    free = [p.grad for p in model.parameters()]
    model.zero_grad()
    T.backward(tokenizer_loss(model, batch, pinned=base)[0])
    for a, p in zip(free, model.parameters()):
        assert (a is None) == (p.grad is None)
        if a is not None:
            np.testing.assert_array_equal(a, p.grad)


@pytest.mark.parametrize("mode,silent", [("frequency", "head_t"), ("temporal", "head_f")])
def test_reconstruct_toggle_silences_the_other_head(mode, silent):
    model = toy_tokenizer(reconstruct=mode)
    loss, _ = tokenizer_loss(model, toy_batch(2))
    T.backward(loss)
    for name, p in model.named_parameters():
        if name.startswith(silent):
            assert p.grad is None or not p.grad.any(), name
    active = "head_f" if silent == "head_t" else "head_t"
    assert getattr(model, active).weight.grad.any()


# ----------------------------------------------------------------- alignment


def test_lambda_schedule():
    assert lambda_schedule(0, 100) == 0.0
    assert lambda_schedule(100, 100) == pytest.approx(2 / (1 + math.exp(-10)) - 1, abs=1e-15)
    assert lambda_schedule(100, 100) == pytest.approx(0.9999092, abs=1e-6)
    grid = [lambda_schedule(t, 999) for t in range(1000)]
    assert all(b > a for a, b in zip(grid, grid[1:]))
    with pytest.raises(ValueError):
        lambda_schedule(101, 100)
    with pytest.raises(ValueError):
        lambda_schedule(0, 0)


def test_domain_bce_reference_values():
    half = domain_bce(Tensor(np.zeros((4, 1)), dtype=np.float64), np.array([1, 0, 1, 0], dtype=bool))
    assert float(half.data) == pytest.approx(math.log(2))
    sure = domain_bce(Tensor(np.array([[40.0], [-40.0]])), np.array([True, False]))
    assert float(sure.data) < 1e-12


def test_adversarial_path_gradients():
    rng = np.random.default_rng(0)
    with T.precision(np.float64):
        clf = DomainClassifier(6, rng)
    for p in clf.parameters():
        p.data[...] = 0.5 * rng.standard_normal(p.shape)
    eeg = Tensor(rng.standard_normal((5, 6)), requires_grad=True, dtype=np.float64)
    text = rng.standard_normal((4, 6))
    lam = 0.6
    # classifier side: plain finite differences
    assert finite_diff_check(lambda: adversarial_loss(eeg, text, clf, lam), clf.parameters()) < 1e-4
    # encoder side: reversed and scaled by lambda
    assert reversal_error(lambda: adversarial_loss(eeg, text, clf, lam), [eeg], lam) < 1e-4


def test_zero_lambda_blocks_encoder_but_not_classifier():
    model = toy_tokenizer()
    batch = toy_batch(2)
    text = np.random.default_rng(0).standard_normal((6, 8))
    loss = adversarial_loss(gather_valid(model.encode(batch), batch.valid), text, model.classifier, 0.0)
    T.backward(loss)
    assert all(p.grad is None or not p.grad.any() for p in model.encoder_parameters())
    assert model.classifier.fc.weight.grad.any()


def test_adversarial_loss_needs_both_domains():
    clf = DomainClassifier(4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        adversarial_loss(Tensor(np.ones((0, 4))), np.ones((2, 4)), clf, 1.0)
    with pytest.raises(ValueError):
        adversarial_loss(Tensor(np.ones((2, 4))), np.ones((0, 4)), clf, 1.0)


# ------------------------------------------------------------------ training


def test_trainer_reports_and_utilization():
    model = toy_tokenizer()
    trainer = TokenizerTrainer(model, TokenizerTrainConfig(steps=5, warmup=1))
    rng = np.random.default_rng(0)
    text = rng.standard_normal((20, 8))
    batch = toy_batch(4)
    for _ in range(5):
        rep = trainer.step(batch, text, rng)
    assert rep["step"] == 5 and rep["codes_used"] > 1
    assert {"temporal", "frequency", "codebook", "commitment", "domain", "lam"} <= set(rep)


def test_trainer_requires_text_when_aligning():
    trainer = TokenizerTrainer(toy_tokenizer(), TokenizerTrainConfig(steps=2))
    with pytest.raises(ValueError):
        trainer.step(toy_batch(2), None, np.random.default_rng(0))
    with pytest.raises(ValueError):
        trainer.step(toy_batch(2), np.ones((5, 3)), np.random.default_rng(0))


def test_channel_subset_of_registry():
    assert set(CHANNELS) <= set(__import__("eeglm.channels", fromlist=["CHANNELS"]).CHANNELS)


def test_rel_error_helper():
    assert rel_error([1.0], [1.0]) == 0.0
