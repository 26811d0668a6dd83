import numpy as np
import pytest

from attrseg import tensor as T
from attrseg.labels import LabelSpace, build_combo_table
from attrseg.model import (ModelConfig, build_vocab, combine_scores,
                           combo_matrix, embed_prompt, encode, forward, infer,
                           init_params, load_checkpoint, read_predictions,
                           save_checkpoint, write_predictions, CheckpointError)
from attrseg.tensor import Tensor

SPACE = LabelSpace()
TABLE = build_combo_table(SPACE)
SMALL = ModelConfig(embed_dim=16, backbone_stages=3, fusion_layers=1,
                    decoder_layers=1, num_queries=5, num_heads=2, ffn_dim=24)


def rand_image(h=32, w=32, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (h, w))


class TestConfig:
    def test_stride(self):
        assert ModelConfig().stride == 8
        assert ModelConfig(backbone_stages=2).stride == 4

    def test_json_roundtrip(self):
        cfg = ModelConfig(embed_dim=32, num_queries=7, use_prompt=False)
        assert ModelConfig.from_json(cfg.to_json()) == cfg

    def test_head_divisibility(self):
        with pytest.raises(ValueError):
            ModelConfig(embed_dim=30, num_heads=4)

    def test_label_count_fixed(self):
        with pytest.raises(ValueError):
            ModelConfig(num_labels=14)


class TestVocabulary:
    def test_covers_all_label_words(self):
        vocab = set(build_vocab(SPACE))
        for name in SPACE.label_names():
            for word in name.split():
                assert word in vocab

    def test_prompt_shape_and_normalization(self):
        params = init_params(SMALL, seed=0)
        rows = embed_prompt(SPACE, params)
        assert rows.shape == (15, SMALL.embed_dim)
        means = rows.data.mean(axis=1)
        assert np.max(np.abs(means)) < 1e-9


class TestComboAlgebra:
    def test_matrix_rows_average(self):
        m = combo_matrix(TABLE, SPACE)
        assert m.shape == (36, 15)
        assert np.allclose(m.sum(axis=1), 1.0, atol=1e-12)

    def test_exact_averages_all_combos(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(15,))
        combos = combine_scores(Tensor(logits.reshape(1, 15)), TABLE).data[0]
        for combo in TABLE.combos:
            members = TABLE.member_label_indices(combo.combo_id, SPACE)
            want = logits[members].mean()
            assert abs(combos[combo.combo_id] - want) <= 1e-12

    def test_uniform_shift_linearity(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(3, 15))
        base = combine_scores(Tensor(logits), TABLE).data
        shifted = combine_scores(Tensor(logits + 2.5), TABLE).data
        assert np.max(np.abs(shifted - (base + 2.5))) <= 1e-12
        assert (np.argmax(shifted, axis=1) == np.argmax(base, axis=1)).all()


class TestForward:
    def test_output_shapes(self):
        params = init_params(SMALL, seed=0)
        out = forward(rand_image(), params, SMALL)
        nq = SMALL.num_queries
        assert out.mask_logits.shape == (nq, 4, 4)
        assert out.boxes.shape == (nq, 4)
        assert out.label_logits.shape == (nq, 15)
        assert out.combo_logits.shape == (nq, 36)
        assert out.grid == (4, 4)

    def test_boxes_in_unit_interval(self):
        params = init_params(SMALL, seed=1)
        out = forward(rand_image(seed=1), params, SMALL)
        assert (out.boxes.data > 0).all() and (out.boxes.data < 1).all()

    def test_combo_logits_match_combine_scores(self):
        params = init_params(SMALL, seed=2)
        out = forward(rand_image(seed=2), params, SMALL)
        want = combine_scores(out.label_logits, TABLE).data
        assert np.array_equal(out.combo_logits.data, want)

    def test_indivisible_image_rejected(self):
        params = init_params(SMALL, seed=0)
        with pytest.raises(T.ShapeError):
            forward(rand_image(h=30, w=32), params, SMALL)

    def test_deterministic(self):
        params = init_params(SMALL, seed=3)
        a = forward(rand_image(seed=3), params, SMALL)
        b = forward(rand_image(seed=3), params, SMALL)
        assert np.array_equal(a.combo_logits.data, b.combo_logits.data)
        assert np.array_equal(a.mask_logits.data, b.mask_logits.data)

    def test_zero_gates_match_raw_backbone(self):
        # all fusion gates start at zero, so the fused visual stream must be
        # bit-identical to the unfused one
        params = init_params(SMALL, seed=4)
        img = Tensor(rand_image(seed=4))
        prompt = embed_prompt(SPACE, params)
        vis_fused, _, _ = encode(img, prompt, params, SMALL)
        cfg_off = ModelConfig(**{**SMALL.__dict__, "use_prompt": False})
        vis_raw, _, _ = encode(img, prompt, params, cfg_off)
        assert np.array_equal(vis_fused.data, vis_raw.data)

    def test_prompt_off_changes_label_path_only_at_init(self):
        params = init_params(SMALL, seed=5)
        cfg_off = ModelConfig(**{**SMALL.__dict__, "use_prompt": False})
        on = forward(rand_image(seed=5), params, SMALL)
        off = forward(rand_image(seed=5), params, cfg_off)
        # gates are zero at init, so masks and boxes agree bit-exactly
        assert np.array_equal(on.mask_logits.data, off.mask_logits.data)
        assert np.array_equal(on.boxes.data, off.boxes.data)


class TestInfer:
    def test_threshold_one_empty(self):
        params = init_params(SMALL, seed=6)
        assert infer(rand_image(seed=6), params, SMALL, score_threshold=1.0) == []

    def test_threshold_zero_all_queries(self):
        params = init_params(SMALL, seed=6)
        preds = infer(rand_image(seed=6), params, SMALL,
                      score_threshold=0.0, max_detections=SMALL.num_queries)
        assert len(preds) == SMALL.num_queries

    def test_scores_sorted_descending(self):
        params = init_params(SMALL, seed=7)
        preds = infer(rand_image(seed=7), params, SMALL, score_threshold=0.0)
        scores = [p.score for p in preds]
        assert scores == sorted(scores, reverse=True)

    def test_prediction_fields_consistent(self):
        params = init_params(SMALL, seed=8)
        for p in infer(rand_image(seed=8), params, SMALL, score_threshold=0.0):
            combo = TABLE.by_id(p.combo_id)
            assert (p.category_id, p.state, p.position) == (
                combo.category_id, combo.state, combo.position)
            assert 0 < p.score < 1
            assert p.mask.height == 32 and p.mask.width == 32

    def test_max_detections_cap(self):
        params = init_params(SMALL, seed=9)
        preds = infer(rand_image(seed=9), params, SMALL,
                      score_threshold=0.0, max_detections=2)
        assert len(preds) == 2


class TestCheckpoint:
    def test_roundtrip_params(self, tmp_path):
        params = init_params(SMALL, seed=10)
        p = tmp_path / "ckpt.bin"
        save_checkpoint(p, SMALL, params)
        cfg2, params2, train_state = load_checkpoint(p)
        assert cfg2 == SMALL and train_state is None
        assert list(params2) == list(params)
        for name in params:
            assert np.array_equal(params2[name].data, params[name].data)

    def test_roundtrip_train_state(self, tmp_path):
        params = init_params(SMALL, seed=11)
        mom = {k: Tensor(np.zeros_like(v.data)) for k, v in params.items()}
        p = tmp_path / "ckpt.bin"
        save_checkpoint(p, SMALL, params,
                        train_state={"momentum": mom, "step": 7, "rng": {"seed": 3}})
        _, _, ts = load_checkpoint(p)
        assert ts["step"] == 7 and ts["rng"] == {"seed": 3}
        assert set(ts["momentum"]) == set(params)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "ckpt.bin"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CheckpointError):
            load_checkpoint(p)

    def test_bad_version(self, tmp_path):
        params = init_params(SMALL, seed=12)
        p = tmp_path / "ckpt.bin"
        save_checkpoint(p, SMALL, params)
        raw = bytearray(p.read_bytes())
        raw[4] = 99
        p.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            load_checkpoint(p)


class TestPredictionFile:
    def test_roundtrip(self, tmp_path):
        params = init_params(SMALL, seed=13)
        preds = {0: infer(rand_image(seed=13), params, SMALL, score_threshold=0.0),
                 3: []}
        p = tmp_path / "preds.json"
        write_predictions(p, preds)
        back = read_predictions(p)
        assert set(back) == {0, 3}
        for a, b in zip(preds[0], back[0]):
            assert a.combo_id == b.combo_id and a.score == b.score
            assert a.box == b.box and a.mask == b.mask
            assert a.state == b.state and a.position == b.position
