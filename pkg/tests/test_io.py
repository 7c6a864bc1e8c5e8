import json

import numpy as np
import pytest

from clipdecomp.applications import Heatmap
from clipdecomp.archive import FormatError, save_archive
from clipdecomp.decomposition import ClassBank, build_mean_bank, decompose_image
from clipdecomp.io import (
    CLIP_MEAN,
    CLIP_STD,
    decode_ppm,
    dump_json,
    encode_ppm,
    heatmap_to_pgm,
    load_class_bank,
    load_decompositions,
    load_head_basis,
    load_heatmap_json,
    load_images,
    load_mean_bank,
    load_text_bank,
    read_ppm,
    save_class_bank,
    save_decompositions,
    save_head_basis,
    save_heatmap_json,
    save_mean_bank,
    save_text_bank,
)
from clipdecomp.textspan import TextEmbeddingBank, textspan


class TestPPM:
    def test_white_image_normalization(self, tmp_path):
        path = tmp_path / "white.ppm"
        path.write_bytes(encode_ppm(np.full((3, 4, 4), 255, dtype=np.uint8)))
        img = read_ppm(path, (4, 4))
        for c in range(3):
            np.testing.assert_allclose(img.pixels[c], (1 - CLIP_MEAN[c]) / CLIP_STD[c], rtol=1e-6)
        assert img.image_id == "white"

    def test_wrong_dims(self, tmp_path):
        path = tmp_path / "small.ppm"
        path.write_bytes(encode_ppm(np.zeros((3, 2, 4), dtype=np.uint8)))
        with pytest.raises(FormatError, match="2x4"):
            read_ppm(path, (4, 4))

    def test_scripted_header_with_comment(self):
        body = bytes(range(12))
        buf = b"P6 # made by hand\n2 2\n# max\n255\n" + body
        px = decode_ppm(buf)
        assert px.shape == (3, 2, 2)
        # first pixel (row 0, col 0) is bytes 0,1,2; second pixel is 3,4,5
        np.testing.assert_array_equal(px[:, 0, 0], [0, 1, 2])
        np.testing.assert_array_equal(px[:, 0, 1], [3, 4, 5])
        np.testing.assert_array_equal(px[:, 1, 1], [9, 10, 11])

    def test_round_trip(self, rng):
        px = rng.integers(0, 256, (3, 5, 7), dtype=np.uint8)
        np.testing.assert_array_equal(decode_ppm(encode_ppm(px)), px)

    def test_truncated(self):
        with pytest.raises(FormatError, match="truncated"):
            decode_ppm(b"P6\n2 2\n255\n" + bytes(5))

    def test_not_ppm(self):
        with pytest.raises(FormatError, match="magic"):
            decode_ppm(b"P5\n1 1\n255\n\0")


class TestImages:
    def test_batch_ids(self, tmp_path, rng):
        save_archive({"images": rng.standard_normal((3, 3, 4, 4)).astype(np.float32)}, tmp_path / "b.nta")
        imgs = load_images(tmp_path / "b.nta", (4, 4))
        assert [im.image_id for im in imgs] == ["b:0", "b:1", "b:2"]

    def test_single_image(self, tmp_path, rng):
        save_archive({"image": rng.standard_normal((3, 4, 4)).astype(np.float32)}, tmp_path / "one.nta")
        assert [im.image_id for im in load_images(tmp_path / "one.nta")] == ["one"]

    def test_missing_tensor(self, tmp_path):
        save_archive({"pixels": np.zeros((3, 2, 2), dtype=np.float32)}, tmp_path / "x.nta")
        with pytest.raises(FormatError, match="'image'"):
            load_images(tmp_path / "x.nta")


class TestBanks:
    def test_text_bank_round_trip(self, tmp_path, rng):
        bank = TextEmbeddingBank(["a photo of a dog", "red", "text with \"quotes\""], rng.standard_normal((3, 4)).astype(np.float32), "common-words")
        save_text_bank(bank, tmp_path / "bank.jsonl")
        back = load_text_bank(tmp_path / "bank.jsonl")
        assert back.descriptions == bank.descriptions
        assert back.provenance == "common-words"
        assert back.embeddings.tobytes() == bank.embeddings.tobytes()
        first = json.loads((tmp_path / "bank.jsonl").read_text().splitlines()[0])
        assert first == {"index": 0, "description": "a photo of a dog", "provenance": "common-words"}

    def test_mixed_provenance(self, tmp_path):
        lines = [{"index": 0, "description": "a", "provenance": "general-pool"}, {"index": 1, "description": "b", "provenance": "common-words"}]
        (tmp_path / "b.jsonl").write_text("\n".join(json.dumps(x) for x in lines))
        save_archive({"embeddings": np.eye(2, dtype=np.float32)}, tmp_path / "b.jsonl.nta")
        with pytest.raises(FormatError, match="mixed"):
            load_text_bank(tmp_path / "b.jsonl")

    def test_index_gap(self, tmp_path):
        (tmp_path / "b.jsonl").write_text(json.dumps({"index": 1, "description": "a"}) + "\n")
        save_archive({"embeddings": np.eye(1, dtype=np.float32)}, tmp_path / "b.jsonl.nta")
        with pytest.raises(FormatError, match="index"):
            load_class_bank(tmp_path / "b.jsonl")

    def test_class_bank_round_trip(self, tmp_path, rng):
        bank = ClassBank(["cat", "dog"], rng.standard_normal((2, 4)).astype(np.float32))
        save_class_bank(bank, tmp_path / "classes.jsonl")
        back = load_class_bank(tmp_path / "classes.jsonl")
        assert back.names == ["cat", "dog"]
        np.testing.assert_array_equal(back.embeddings, bank.embeddings)


class TestLedgerFiles:
    def test_decompositions_bitwise(self, tmp_path, toy_corpus):
        _, _, decomps = toy_corpus
        save_decompositions(decomps[:3], tmp_path / "d.nta", "abc")
        back = load_decompositions(tmp_path / "d.nta")
        assert [d.image_id for d in back] == ["img0", "img1", "img2"]
        for a, b in zip(decomps, back):
            assert a.msa_terms.tobytes() == b.msa_terms.tobytes()
            assert a.init_term.tobytes() == b.init_term.tobytes()
            assert b.grid == (3, 3)
        meta = json.loads((tmp_path / "d.json").read_text())
        assert meta["kind"] == "decomposition" and meta["model_hash"] == "abc"

    def test_wrong_manifest_kind(self, tmp_path, toy_corpus):
        _, _, decomps = toy_corpus
        save_mean_bank(build_mean_bank(decomps), tmp_path / "m.nta")
        with pytest.raises(FormatError, match="decomposition"):
            load_decompositions(tmp_path / "m.nta")

    def test_mean_bank_round_trip(self, tmp_path, toy_corpus):
        _, _, decomps = toy_corpus
        bank = build_mean_bank(decomps, "train")
        save_mean_bank(bank, tmp_path / "m.nta")
        back = load_mean_bank(tmp_path / "m.nta")
        assert back.count == 12 and back.source == "train"
        assert back.msa_terms.tobytes() == bank.msa_terms.tobytes()

    def test_head_basis_round_trip(self, tmp_path, rng):
        bank = TextEmbeddingBank([f"t{i}" for i in range(6)], rng.standard_normal((6, 4)).astype(np.float32))
        basis = textspan(rng.standard_normal((10, 4)), bank, 3, layer=1, head=0)
        save_head_basis(basis, tmp_path / "L1H0")
        back = load_head_basis(tmp_path / "L1H0")
        assert back.indices == basis.indices and back.layer == 1
        assert back.components.tobytes() == basis.components.tobytes()
        assert back.step_variances == basis.step_variances

    def test_model_hash_is_stable(self, toy):
        model, image = toy
        d1 = decompose_image(model, image)
        d2 = decompose_image(model, image)
        assert d1.msa_terms.tobytes() == d2.msa_terms.tobytes()
        assert model.digest == model.digest and len(model.digest) == 64


class TestHeatmapFiles:
    def test_json_round_trip(self, tmp_path):
        h = Heatmap(np.array([[0.25, -1.0], [3.0, 0.0]]), {"image_id": "x"})
        save_heatmap_json(h, tmp_path / "h.json")
        back = load_heatmap_json(tmp_path / "h.json")
        np.testing.assert_array_equal(back.grid, h.grid)
        assert back.meta == {"image_id": "x"}

    def test_pgm(self):
        data = heatmap_to_pgm(Heatmap(np.array([[0.0, 1.0], [0.5, 1.0]])), scale=2)
        header, body = data[:11], data[11:]
        assert header == b"P5\n4 4\n255\n"
        img = np.frombuffer(body, dtype=np.uint8).reshape(4, 4)
        assert img[0, 0] == 0 and img[0, 3] == 255 and img[3, 0] == 128

    def test_constant_pgm_black(self):
        data = heatmap_to_pgm(Heatmap(np.full((2, 2), 7.0)))
        assert set(data[11:]) == {0}

    def test_dump_json_canonical(self):
        assert dump_json({"b": 1, "a": [1.5]}) == '{\n  "a": [\n    1.5\n  ],\n  "b": 1\n}\n'
        with pytest.raises(ValueError):
            dump_json({"x": float("nan")})
