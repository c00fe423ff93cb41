import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fourier_age import tensor as T
from fourier_age.clip_align import (AgeModel, AlignmentConfig, ImageEncoder, PromptDecoder, PromptSet,
                                    PromptTruncated, TextEncoder, Tokenizer, detokenize, encode_image,
                                    encode_text, matching_loss, patchify, predict_age,
                                    similarity_matrix, tokenize_prompt, visual_context_prompting)
from fourier_age.optim import AdamW
from fourier_age.tensor import ContractError, DimensionError, Tensor, finite_diff_check

F64 = np.float64
TOK = Tokenizer()


def small_config(**kw):
    base = dict(dim=8, image_size=16, patch=4, encoder_blocks=1, decoder_depth=1, context_len=3,
                min_age=1, max_age=10)
    base.update(kw)
    return AlignmentConfig(**base)


def eq1_oracle(texts, images, tau):
    """Direct evaluation with an independent cosine routine, float64."""
    n_img, n_txt = len(images), len(texts)
    out = np.zeros((n_img, n_txt))
    for j in range(n_img):
        cos = [float(np.dot(texts[i], images[j]) / (np.linalg.norm(texts[i]) * np.linalg.norm(images[j])))
               for i in range(n_txt)]
        e = np.exp(np.array(cos) / tau)
        out[j] = e / e.sum()
    return out


def eq2_oracle(cos, tau):
    """cos[i, j] between text i and image j."""
    n = len(cos)
    logits = cos / tau
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    first = -np.mean(np.diag(logp))
    if n == 1:
        return first
    return first + logp[~np.eye(n, dtype=bool)].mean()


class TestTokenizer:
    def test_fixture(self):
        assert tokenize_prompt("A photo") == [TOK.sos, TOK.stoi["a"], TOK.stoi["photo"], TOK.eos]

    def test_deterministic(self):
        assert tokenize_prompt("a photo of a 12 year old person") == \
            tokenize_prompt("a photo of a 12 year old person")

    def test_round_trip(self):
        text = "A Photo of a 37 year old person"
        assert detokenize(tokenize_prompt(text)) == text.lower()

    def test_unknown_word(self):
        assert tokenize_prompt("zebra")[1] == TOK.stoi["[UNK]"]

    @pytest.mark.parametrize("bad", ["", "   "])
    def test_empty_rejected(self, bad):
        with pytest.raises(ContractError):
            tokenize_prompt(bad)

    def test_prompt_set(self):
        ps = PromptSet.build(small_config())
        assert np.all(ps.token_ids[:, 0] == TOK.sos) and np.all(ps.token_ids[:, -1] == TOK.eos)
        assert np.all(np.diff(ps.ages) > 0)


class TestTextEncoder:
    def setup_method(self):
        self.cfg = small_config()
        self.enc = TextEncoder.init(np.random.default_rng(0), self.cfg, len(TOK))

    def test_output_dim(self):
        assert encode_text(tokenize_prompt("a photo of a 5 year old person"), self.enc).shape == (8,)
        assert encode_text(PromptSet.build(self.cfg).token_ids, self.enc).shape == (10, 8)

    def test_distinct_ages_distinct_embeddings(self):
        a = encode_text(tokenize_prompt("a photo of a 5 year old person"), self.enc).data
        b = encode_text(tokenize_prompt("a photo of a 6 year old person"), self.enc).data
        assert np.abs(a - b).max() > 1e-3

    def test_truncation_warns(self):
        long = tokenize_prompt(" ".join(["a"] * 40))
        with pytest.warns(PromptTruncated):
            out = encode_text(long, self.enc)
        assert out.shape == (8,)

    def test_context_gradient(self):
        self.enc.astype(F64)
        ids = PromptSet.build(self.cfg).token_ids[:3]
        images = Tensor(np.random.default_rng(1).normal(size=(3, 8)), dtype=F64)
        err = finite_diff_check(lambda: matching_loss(encode_text(ids, self.enc), images, 0.5),
                                self.enc.context)
        assert err < 1e-3


class TestImageEncoder:
    def test_grid_shape(self):
        cfg = AlignmentConfig(dim=16, encoder_blocks=1)
        enc = ImageEncoder.init(np.random.default_rng(0), cfg)
        emb, grid = encode_image(np.zeros((32, 32, 3)), enc, cfg)
        assert grid.shape == (8, 8, 16) and emb.shape == (16,)

    def test_pool_is_grid_mean(self):
        cfg = small_config()
        enc = ImageEncoder.init(np.random.default_rng(0), cfg)
        x = np.random.default_rng(1).normal(size=(2, 16, 16, 3))
        emb, grid = encode_image(x, enc, cfg)
        np.testing.assert_allclose(emb.data, grid.data.mean(axis=(1, 2)), atol=1e-6)

    def test_constant_offset_changes_embedding(self):
        cfg = small_config()
        enc = ImageEncoder.init(np.random.default_rng(0), cfg)
        x = np.random.default_rng(1).normal(size=(16, 16, 3))
        a, _ = encode_image(x, enc, cfg)
        b, _ = encode_image(x + 0.5, enc, cfg)
        assert np.abs(a.data - b.data).max() > 1e-3

    def test_indivisible(self):
        with pytest.raises(DimensionError):
            patchify(np.zeros((10, 12, 3)), 4)

    def test_patchify_layout(self):
        x = np.arange(4 * 4 * 1, dtype=np.float32).reshape(4, 4, 1)
        p = patchify(x, 2)
        np.testing.assert_array_equal(p[0, 1], [2, 3, 6, 7])


class TestSimilarity:
    def test_identical_embeddings_half(self):
        e = Tensor(np.array([[1.0, 2.0], [1.0, 2.0]]))
        s = similarity_matrix(e, e, 1.0).scores.data
        np.testing.assert_allclose(s, 0.5, atol=1e-7)

    def test_orthogonal_sharp(self):
        e = Tensor(np.eye(4))
        s = similarity_matrix(e, e, 0.01).scores.data
        assert np.all(np.diag(s) > 0.999)

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(0)
        texts, images = rng.normal(size=(7, 5)), rng.normal(size=(4, 5))
        s = similarity_matrix(Tensor(texts, dtype=F64), Tensor(images, dtype=F64), 0.3).scores.data
        np.testing.assert_allclose(s, eq1_oracle(texts, images, 0.3), atol=1e-6)

    def test_zero_norm_rejected(self):
        with pytest.raises(ContractError):
            similarity_matrix(Tensor(np.zeros((2, 3))), Tensor(np.ones((2, 3))), 1.0)

    @settings(max_examples=40, deadline=None)
    @given(arrays(F64, (5, 4), elements=st.floats(0.1, 5) | st.floats(-5, -0.1)),
           arrays(F64, (3, 4), elements=st.floats(0.1, 5) | st.floats(-5, -0.1)),
           st.floats(0.01, 10), st.floats(0.1, 100))
    def test_rows_and_scale_invariance(self, texts, images, tau, scale):
        sim = similarity_matrix(Tensor(texts, dtype=F64), Tensor(images, dtype=F64), tau)
        assert sim.rows_sum_to_one(1e-5)
        scaled = similarity_matrix(Tensor(texts * scale, dtype=F64), Tensor(images, dtype=F64), tau)
        np.testing.assert_allclose(scaled.scores.data, sim.scores.data, atol=1e-6)

    def test_tau_monotone(self):
        rng = np.random.default_rng(3)
        texts, images = Tensor(rng.normal(size=(6, 4)), dtype=F64), Tensor(rng.normal(size=(5, 4)), dtype=F64)
        prev = None
        for tau in (2.0, 1.0, 0.5, 0.2, 0.1):
            top = similarity_matrix(texts, images, tau).scores.data.max(axis=1)
            if prev is not None:
                assert np.all(top > prev)
            prev = top


class TestMatchingLoss:
    def test_single_pair_zero(self):
        rng = np.random.default_rng(0)
        loss = matching_loss(Tensor(rng.normal(size=(1, 4))), Tensor(rng.normal(size=(1, 4))), 0.07)
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_equal_similarities_zero(self):
        e = Tensor(np.ones((2, 3)))
        assert matching_loss(e, e, 1.0).item() == pytest.approx(0.0, abs=1e-6)

    def test_plus_minus_one_fixture(self):
        texts = Tensor(np.array([[1.0, 0.0], [-1.0, 0.0]]), dtype=F64)
        loss = matching_loss(texts, texts, 1.0).item()
        assert loss == pytest.approx(-2.0, abs=1e-3)
        assert loss == pytest.approx(eq2_oracle(np.array([[1.0, -1.0], [-1.0, 1.0]]), 1.0), abs=1e-12)

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(1)
        texts, images = rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
        tn = texts / np.linalg.norm(texts, axis=1, keepdims=True)
        im = images / np.linalg.norm(images, axis=1, keepdims=True)
        loss = matching_loss(Tensor(texts, dtype=F64), Tensor(images, dtype=F64), 0.2).item()
        assert loss == pytest.approx(eq2_oracle(tn @ im.T, 0.2), abs=1e-9)

    def test_floor_switch(self):
        e = Tensor(np.eye(3), dtype=F64)
        raw = matching_loss(e, e, 0.01).item()
        floored = matching_loss(e, e, 0.01, floor=1e-8).item()
        assert floored > raw and floored >= np.log(1e-8) - 1e-6

    def test_unpaired_rejected(self):
        with pytest.raises(DimensionError):
            matching_loss(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))), 1.0)

    def test_training_sanity(self):
        """200 AdamW steps on 64 matched pairs through learnable projections."""
        rng = np.random.default_rng(0)
        feats = rng.normal(size=(64, 16))
        text_feats = feats + 0.3 * rng.normal(size=feats.shape)
        wi = Tensor(rng.normal(0, 0.25, (16, 16)), requires_grad=True, dtype=F64)
        wt = Tensor(rng.normal(0, 0.25, (16, 16)), requires_grad=True, dtype=F64)
        mix = rng.normal(size=(16, 16))
        img_in = Tensor(feats @ mix, dtype=F64)
        txt_in = Tensor(text_feats, dtype=F64)
        opt = AdamW([wi, wt], lr=1e-2, weight_decay=0.0)

        def loss():
            return matching_loss(T.matmul(txt_in, wt), T.matmul(img_in, wi), 0.1)

        start = loss().item()
        for _ in range(200):
            opt.zero_grad()
            lv = loss()
            lv.backward()
            opt.step()
        end = loss().item()
        assert start - end >= 0.5 * abs(start)
        sim = similarity_matrix(T.matmul(txt_in, wt), T.matmul(img_in, wi), 0.1).scores.data
        assert np.mean(np.argmax(sim, axis=1) == np.arange(64)) >= 0.9


class TestPrompting:
    def setup_method(self):
        self.cfg = small_config()
        rng = np.random.default_rng(0)
        self.dec = PromptDecoder.init(rng, self.cfg)
        self.states = Tensor(rng.normal(size=(10, 8)))
        self.grid = Tensor(rng.normal(size=(4, 4, 8)))

    def test_zero_projection_identity(self):
        out = visual_context_prompting(self.states, self.grid, self.dec, self.cfg)
        np.testing.assert_array_equal(out.data, self.states.data)

    def test_manual_composition(self):
        rng = np.random.default_rng(1)
        self.dec.proj.weight.data = rng.normal(size=(8, 8)).astype(np.float32)
        self.dec.proj.bias.data = rng.normal(size=8).astype(np.float32)
        out = visual_context_prompting(self.states, self.grid, self.dec, self.cfg)
        pooled = T.mean(self.dec.blocks(self.grid, self.cfg.fpe(1)), axis=(0, 1))
        ref = self.states + self.dec.proj(pooled)
        assert out.shape == self.states.shape
        np.testing.assert_array_equal(out.data, ref.data)

    def test_batched_grid(self):
        grid = Tensor(np.random.default_rng(2).normal(size=(3, 4, 4, 8)))
        assert visual_context_prompting(self.states, grid, self.dec, self.cfg).shape == (3, 10, 8)

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            visual_context_prompting(self.states, Tensor(np.zeros((4, 4, 6))), self.dec)


class TestPredictAge:
    def test_midpoint(self):
        assert predict_age(np.array([0.5, 0.5]), [10, 20]) == pytest.approx(15.0)

    def test_one_hot(self):
        assert predict_age(np.array([0.0, 1.0, 0.0]), [20, 30, 40]) == pytest.approx(30.0)

    def test_argmax_flag(self):
        assert predict_age(np.array([0.2, 0.5, 0.3]), [20, 30, 40], argmax=True) == 30

    def test_unnormalised_rejected(self):
        with pytest.raises(ContractError):
            predict_age(np.array([0.5, 0.6]), [10, 20])

    def test_random_rows_match_dot_product(self):
        rng = np.random.default_rng(0)
        s = rng.dirichlet(np.ones(80), size=50)
        ages = np.arange(1, 81, dtype=F64)
        out = predict_age(s, ages)
        np.testing.assert_allclose(out, [sum(a * p for a, p in zip(ages, row)) for row in s], atol=1e-6)
        assert np.all((out >= 1) & (out <= 80))


class TestAgeModel:
    def test_forward_shapes_and_range(self):
        cfg = small_config()
        model = AgeModel.init(cfg, seed=0)
        out = model.forward(np.random.default_rng(0).normal(size=(3, 16, 16, 3)).astype(np.float32))
        assert out["scores"].shape == (3, 10)
        assert out["text_states"].shape == (3, 10, 8)
        assert np.all((out["age"].data >= 1) & (out["age"].data <= 10))

    def test_deterministic_init(self):
        a, b = AgeModel.init(small_config(), seed=3), AgeModel.init(small_config(), seed=3)
        for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert ka == kb
            np.testing.assert_array_equal(va, vb)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AlignmentConfig(tau=0.0)
        with pytest.raises(ValueError):
            AlignmentConfig(image_size=30, patch=4)

    def test_no_warnings_on_default_prompts(self):
        model = AgeModel.init(small_config(), seed=0)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            model.forward(np.zeros((1, 16, 16, 3), np.float32))
