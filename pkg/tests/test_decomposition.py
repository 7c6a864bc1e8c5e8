from dataclasses import replace

import numpy as np
import pytest
from oracles import naive_instrumented_forward
from test_model import zero_blocks

from clipdecomp.decomposition import (
    AblationSpec,
    ClassBank,
    DecomposedRepresentation,
    ablate_terms,
    apply_ablation,
    build_mean_bank,
    decompose_image,
    head_contribution,
    reconstruct,
    token_contribution,
    zero_shot_classify,
)
from clipdecomp.model import random_image, random_model, reference_forward


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def final_ln_share(model, d):
    mu, sd = d.ln_stats.astype(float)
    a = model.ln_final_weight.astype(float) / np.sqrt(sd**2 + model.config.ln_eps)
    b = model.ln_final_bias.astype(float) - mu * a
    return model.proj.astype(float) @ b / (d.num_tokens * d.num_layers * d.num_heads)


def forced_cls_attention_model(rng):
    """Every head attends only to the class token, in every layer.

    Feature 0 is huge and positive on the class token and huge and negative on
    patch tokens; no block writes to it. Each head's query is a constant
    vector and its key reads feature 0, so the class-token score dominates.
    """
    model = random_model(rng, num_layers=2, num_heads=2, width=8, output_dim=4)
    d, H, dh = 8, 2, 4
    pw = model.patch_weight.copy()
    pw[0] = 0
    pb = model.patch_bias.copy()
    pb[0] = -100.0
    cls = model.cls_token.copy()
    cls[0] = 100.0
    pos = model.pos_embed.copy()
    pos[:, 0] = 0
    layers = []
    for layer in model.layers:
        qkv_w = layer.qkv_weight.copy()
        qkv_b = layer.qkv_bias.copy()
        qkv_w[: 2 * d] = 0
        qkv_b[: 2 * d] = 0
        for h in range(H):
            qkv_b[h * dh : (h + 1) * dh] = 1e3  # constant queries
            qkv_w[d + h * dh, 0] = 1.0  # key reads feature 0
        ln1_w = layer.ln1_weight.copy()
        ln1_b = layer.ln1_bias.copy()
        ln1_w[0], ln1_b[0] = 1.0, 0.0
        out_w, out_b = layer.attn_out_weight.copy(), layer.attn_out_bias.copy()
        out_w[0], out_b[0] = 0, 0
        down_w, down_b = layer.mlp_down_weight.copy(), layer.mlp_down_bias.copy()
        down_w[0], down_b[0] = 0, 0
        layers.append(
            replace(
                layer,
                qkv_weight=qkv_w, qkv_bias=qkv_b, ln1_weight=ln1_w, ln1_bias=ln1_b,
                attn_out_weight=out_w, attn_out_bias=out_b,
                mlp_down_weight=down_w, mlp_down_bias=down_b,
            )
        )
    return replace(model, patch_weight=pw, patch_bias=pb, cls_token=cls, pos_embed=pos, layers=tuple(layers))


class TestDecompose:
    def test_exact_on_random_models(self, rng):
        for k in range(20):
            model = random_model(rng, num_layers=2 + k % 3, num_heads=2, width=8, output_dim=4, ln_pre=k % 2 == 1)
            image = random_image(rng, model.config)
            assert rel_err(reconstruct(decompose_image(model, image)), reference_forward(model, image)) <= 1e-4

    def test_shapes(self, toy):
        model, image = toy
        d = decompose_image(model, image)
        assert d.msa_terms.shape == (5, 2, 2, 4)
        assert d.mlp_terms.shape == (2, 4)
        assert d.init_term.shape == (4,)
        assert d.grid == (2, 2) and d.image_id == "img0"
        assert d.msa_terms.dtype == np.float32
        assert np.all(np.isfinite(d.msa_terms))

    def test_forced_class_attention(self, rng):
        model = forced_cls_attention_model(rng)
        image = random_image(rng, model.config)
        d = decompose_image(model, image)
        share = final_ln_share(model, d)
        for i in range(1, d.num_tokens):
            np.testing.assert_allclose(d.msa_terms[i], np.broadcast_to(share, d.msa_terms[i].shape), atol=1e-6)
        assert rel_err(reconstruct(d), reference_forward(model, image)) <= 1e-4

    def test_zero_blocks(self, toy):
        model, image = toy
        m = zero_blocks(model)
        d = decompose_image(m, image)
        share = final_ln_share(m, d)
        np.testing.assert_array_equal(d.mlp_terms, 0)
        np.testing.assert_allclose(d.msa_terms, np.broadcast_to(share, d.msa_terms.shape), atol=1e-7)
        np.testing.assert_allclose(reconstruct(d), reference_forward(m, image), rtol=1e-5, atol=1e-6)
        assert np.linalg.norm(d.init_term) > np.linalg.norm(d.msa_terms.sum(axis=(0, 1, 2)))

    def test_matches_naive_instrumented_forward(self, rng):
        model = random_model(rng, num_layers=2, num_heads=2, width=8, output_dim=4, ln_pre=True)
        image = random_image(rng, model.config)
        heads, tokens, out = naive_instrumented_forward(model, image.pixels)
        d = decompose_image(model, image)
        for l in range(2):
            for h in range(2):
                np.testing.assert_allclose(head_contribution(d, l, h), heads[l, h], atol=1e-5)
        for i in range(d.num_tokens):
            np.testing.assert_allclose(token_contribution(d, i), tokens[i], atol=1e-5)
        np.testing.assert_allclose(reference_forward(model, image), out, atol=1e-5)


class TestContractions:
    def test_regrouping(self, toy_corpus):
        _, _, decomps = toy_corpus
        for d in decomps:
            total = d.msa_terms.astype(float).sum(axis=(0, 1, 2))
            by_head = sum(head_contribution(d, l, h).astype(float) for l in range(d.num_layers) for h in range(d.num_heads))
            by_token = sum(token_contribution(d, i).astype(float) for i in range(d.num_tokens))
            np.testing.assert_allclose(by_head, total, atol=1e-6)
            np.testing.assert_allclose(by_token, total, atol=1e-6)

    def test_single_head_single_layer(self, rng):
        model = random_model(rng, num_layers=1, num_heads=1, width=8, output_dim=4)
        d = decompose_image(model, random_image(rng, model.config))
        np.testing.assert_allclose(head_contribution(d, 0, 0), d.msa_terms.astype(float).sum(axis=(0, 1, 2)), atol=1e-6)

    def test_token_triple_loop(self, toy_corpus):
        _, _, decomps = toy_corpus
        d = decomps[0]
        for i in range(d.num_tokens):
            ref = np.zeros(d.output_dim)
            for l in range(d.num_layers):
                for h in range(d.num_heads):
                    ref += d.msa_terms[i, l, h].astype(float)
            np.testing.assert_allclose(token_contribution(d, i), ref, atol=1e-6)

    def test_cls_token_row(self, toy):
        d = decompose_image(*toy)
        np.testing.assert_allclose(token_contribution(d, 0), d.msa_terms[0].astype(float).sum(axis=(0, 1)), atol=1e-7)

    def test_index_errors(self, toy):
        d = decompose_image(*toy)
        with pytest.raises(IndexError):
            head_contribution(d, 2, 0)
        with pytest.raises(IndexError):
            head_contribution(d, 0, -1)
        with pytest.raises(IndexError):
            token_contribution(d, 5)

    def test_reconstruct_order_invariant(self, toy):
        d = decompose_image(*toy)
        parts = [d.init_term.astype(float)] + list(d.mlp_terms.astype(float)) + list(d.msa_terms.reshape(-1, 4).astype(float))
        rev = np.zeros(4)
        for p in reversed(parts):
            rev += p
        np.testing.assert_allclose(reconstruct(d), rev, atol=1e-6)


class TestMeanBank:
    def test_single(self, toy):
        d = decompose_image(*toy)
        bank = build_mean_bank([d])
        assert bank.count == 1
        np.testing.assert_array_equal(bank.msa_terms, d.msa_terms)
        np.testing.assert_array_equal(bank.mlp_terms, d.mlp_terms)
        np.testing.assert_array_equal(bank.init_term, d.init_term)

    def test_midpoint(self, toy_corpus):
        _, _, decomps = toy_corpus
        bank = build_mean_bank(decomps[:2])
        mid = (decomps[0].msa_terms.astype(float) + decomps[1].msa_terms.astype(float)) / 2
        np.testing.assert_allclose(bank.msa_terms, mid, atol=1e-7)

    def test_two_pass_oracle(self, rng):
        decomps = []
        for k in range(100):
            decomps.append(
                DecomposedRepresentation(
                    init_term=rng.standard_normal(3).astype(np.float32),
                    mlp_terms=rng.standard_normal((2, 3)).astype(np.float32),
                    msa_terms=rng.standard_normal((2, 2, 1, 3)).astype(np.float32),
                    ln_stats=np.zeros(2, dtype=np.float32),
                    grid=(1, 1),
                )
            )
        bank = build_mean_bank(iter(decomps))
        ref = np.zeros((2, 2, 1, 3))
        for d in decomps:
            ref += d.msa_terms.astype(float)
        ref /= 100
        np.testing.assert_allclose(bank.msa_terms.astype(float), ref, rtol=1e-6, atol=1e-7)
        # exact float64 agreement before the float32 storage cast
        acc = np.zeros((2, 2, 1, 3))
        for d in decomps:
            acc += d.msa_terms
        assert np.max(np.abs(acc / 100 - ref)) <= 1e-10

    def test_empty(self):
        with pytest.raises(ValueError):
            build_mean_bank([])

    def test_shape_mismatch(self, rng, toy):
        d1 = decompose_image(*toy)
        model = random_model(rng, num_layers=3)
        d2 = decompose_image(model, random_image(rng, model.config))
        with pytest.raises(ValueError):
            build_mean_bank([d1, d2])


class TestAblation:
    def test_empty_spec_noop(self, toy_corpus):
        _, _, decomps = toy_corpus
        bank = build_mean_bank(decomps)
        for d in decomps:
            np.testing.assert_array_equal(apply_ablation(d, AblationSpec(), bank), reconstruct(d))

    def test_self_mean_noop(self, toy_corpus):
        _, _, decomps = toy_corpus
        d = decomps[0]
        bank = build_mean_bank([d])
        spec = AblationSpec(mlps=True, msa_prefix=2, heads=frozenset({(2, 1)}), cls_token=True, init=True)
        np.testing.assert_allclose(apply_ablation(d, spec, bank), reconstruct(d), atol=1e-6)

    def test_mlp_delta(self, toy_corpus):
        _, _, decomps = toy_corpus
        bank = build_mean_bank(decomps)
        d = decomps[3]
        delta = (bank.mlp_terms.astype(float) - d.mlp_terms.astype(float)).sum(axis=0)
        out = apply_ablation(d, AblationSpec(mlps=True), bank).astype(float)
        np.testing.assert_allclose(out - reconstruct(d), delta, atol=1e-6)

    def test_cls_token_delta_only(self, toy_corpus):
        _, _, decomps = toy_corpus
        bank = build_mean_bank(decomps)
        d = decomps[5]
        ablated = ablate_terms(d, AblationSpec(cls_token=True), bank)
        np.testing.assert_array_equal(ablated.msa_terms[1:], d.msa_terms[1:])
        np.testing.assert_array_equal(ablated.mlp_terms, d.mlp_terms)
        delta = (bank.msa_terms[0].astype(float) - d.msa_terms[0].astype(float)).sum(axis=(0, 1))
        np.testing.assert_allclose(reconstruct(ablated).astype(float) - reconstruct(d), delta, atol=1e-6)

    def test_prefix_and_heads(self, toy_corpus):
        _, _, decomps = toy_corpus
        bank = build_mean_bank(decomps)
        d = decomps[0]
        a = ablate_terms(d, AblationSpec(msa_prefix=2, heads=frozenset({(2, 3)})), bank)
        np.testing.assert_array_equal(a.msa_terms[:, :2], bank.msa_terms[:, :2])
        np.testing.assert_array_equal(a.msa_terms[:, 2, 3], bank.msa_terms[:, 2, 3])
        np.testing.assert_array_equal(a.msa_terms[:, 2, :3], d.msa_terms[:, 2, :3])

    def test_zero_mode(self, toy_corpus):
        _, _, decomps = toy_corpus
        d = decomps[0]
        out = apply_ablation(d, AblationSpec(mlps=True, mode="zero"), None)
        expected = reconstruct(d).astype(float) - d.mlp_terms.astype(float).sum(axis=0)
        np.testing.assert_allclose(out, expected, atol=1e-6)

    def test_union_equals_sequential(self, toy_corpus):
        _, _, decomps = toy_corpus
        bank = build_mean_bank(decomps)
        d = decomps[2]
        s1 = AblationSpec(mlps=True, heads=frozenset({(1, 1)}))
        s2 = AblationSpec(msa_prefix=1, cls_token=True)
        both = ablate_terms(d, s1.union(s2), bank)
        seq12 = ablate_terms(ablate_terms(d, s1, bank), s2, bank)
        seq21 = ablate_terms(ablate_terms(d, s2, bank), s1, bank)
        for other in (seq12, seq21):
            np.testing.assert_array_equal(both.msa_terms, other.msa_terms)
            np.testing.assert_array_equal(both.mlp_terms, other.mlp_terms)
        again = ablate_terms(both, s1.union(s2), bank)
        np.testing.assert_array_equal(again.msa_terms, both.msa_terms)

    def test_bank_mismatch(self, rng, toy):
        d = decompose_image(*toy)
        model = random_model(rng, num_layers=3)
        bank = build_mean_bank([decompose_image(model, random_image(rng, model.config))])
        with pytest.raises(ValueError, match="do not match"):
            apply_ablation(d, AblationSpec(mlps=True), bank)

    def test_out_of_bounds_spec(self, toy):
        d = decompose_image(*toy)
        bank = build_mean_bank([d])
        with pytest.raises(IndexError):
            apply_ablation(d, AblationSpec(heads=frozenset({(5, 0)})), bank)
        with pytest.raises(IndexError):
            apply_ablation(d, AblationSpec(msa_prefix=3), bank)

    def test_spec_dict_round_trip(self):
        spec = AblationSpec(mlps=True, msa_prefix=2, heads=frozenset({(1, 0), (0, 3)}), mode="zero")
        assert AblationSpec.from_dict(spec.to_dict()) == spec


class TestZeroShot:
    def test_hand(self):
        bank = ClassBank(["a", "b"], np.eye(2, dtype=np.float32))
        assert zero_shot_classify(np.array([0.9, 0.1]), bank) == 0

    def test_self_similarity(self, rng):
        emb = rng.standard_normal((6, 5)).astype(np.float32)
        bank = ClassBank([str(i) for i in range(6)], emb)
        for i in range(6):
            assert zero_shot_classify(emb[i] * 3.0, bank) == i

    def test_tie_lowest_index(self):
        bank = ClassBank(["a", "b"], np.array([[1.0, 0.0], [2.0, 0.0]], dtype=np.float32))
        assert zero_shot_classify(np.array([1.0, 0.0]), bank) == 0

    def test_naive_oracle(self, rng):
        emb = rng.standard_normal((10, 6))
        bank = ClassBank([str(i) for i in range(10)], emb.astype(np.float32))
        for _ in range(50):
            rep = rng.standard_normal(6)
            sims = []
            for row in bank.embeddings.astype(float):
                sims.append(sum(a * b for a, b in zip(rep, row)) / (np.sqrt(sum(a * a for a in rep)) * np.sqrt(sum(b * b for b in row))))
            assert zero_shot_classify(rep, bank) == int(np.argmax(sims))

    def test_zero_rep(self):
        bank = ClassBank(["a"], np.ones((1, 2), dtype=np.float32))
        with pytest.raises(ValueError):
            zero_shot_classify(np.zeros(2), bank)

    def test_zero_norm_class_rejected(self):
        with pytest.raises(ValueError):
            ClassBank(["a", "b"], np.array([[1.0, 0.0], [0.0, 0.0]], dtype=np.float32))
