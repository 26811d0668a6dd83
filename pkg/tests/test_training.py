import numpy as np
import pytest

from attrseg import tensor as T
from attrseg.labels import LabelSpace, build_combo_table
from attrseg.matching import MatchResult, hungarian_match
from attrseg.model import ModelConfig, forward, init_params, load_checkpoint
from attrseg.synthetic import SyntheticConfig, generate_synthetic
from attrseg.tensor import Tape, Tensor, backward
from attrseg.training import (DivergenceError, TargetInstance, TrainConfig,
                              build_cost, compute_loss,
                              targets_from_annotations, train)

SPACE = LabelSpace()
TABLE = build_combo_table(SPACE)
SMALL = ModelConfig(embed_dim=16, backbone_stages=3, fusion_layers=1,
                    decoder_layers=1, num_queries=6, num_heads=2, ffn_dim=24)


def small_dataset(num_images=4, seed=3):
    cfg = SyntheticConfig(num_images=num_images, height=32, width=32,
                          min_instances=1, max_instances=2, seed=seed)
    return generate_synthetic(cfg)


def make_outputs(cfg=SMALL, seed=0, image=None):
    params = init_params(cfg, seed=seed)
    if image is None:
        image = np.random.default_rng(seed).uniform(0, 1, (32, 32))
    return params, forward(image, params, cfg)


def random_targets(rng, n, grid=(4, 4)):
    out = []
    for _ in range(n):
        cx, cy = rng.uniform(0.3, 0.7, 2)
        w, h = rng.uniform(0.1, 0.25, 2)
        out.append(TargetInstance(
            combo_id=int(rng.integers(0, 36)),
            box=np.array([cx, cy, w, h]),
            mask_feat=rng.uniform(0, 1, grid)))
    return out


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.learning_rate == 0.02
        assert cfg.momentum == 0.9
        assert cfg.epochs == 48
        assert cfg.loss_weights == {"cls": 2.0, "l1": 5.0, "giou": 2.0,
                                    "mask": 5.0, "dice": 5.0}

    def test_invalid(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=-1.0)
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)


class TestTargets:
    def test_fractional_coverage(self):
        aset, _ = small_dataset()
        for im in aset.images:
            for t in targets_from_annotations(aset, im.id, 8, TABLE):
                assert t.mask_feat.shape == (4, 4)
                assert t.mask_feat.min() >= 0.0 and t.mask_feat.max() <= 1.0
                assert 0 < t.box[2] <= 1 and 0 < t.box[3] <= 1

    def test_coverage_sums_to_area(self):
        aset, _ = small_dataset()
        for im in aset.images:
            anns = aset.annotations_for(im.id)
            tgts = targets_from_annotations(aset, im.id, 8, TABLE)
            for a, t in zip(anns, tgts):
                assert t.mask_feat.sum() * 64 == pytest.approx(a.area)


class TestBuildCost:
    def test_exact_query_wins_row(self):
        rng = np.random.default_rng(30)
        params, out = make_outputs(seed=30)
        # target that exactly copies query 2's heads
        q = 2
        tgt = TargetInstance(
            combo_id=int(np.argmax(out.combo_logits.data[q])),
            box=out.boxes.data[q].copy(),
            mask_feat=(out.mask_logits.data[q] > 0).astype(np.float64))
        cost = build_cost(out, [tgt], TrainConfig().cost_weights)
        # not strictly guaranteed for the cls term, but box and mask terms are
        # globally minimized at the copying query
        assert np.argmin(cost[:, 0]) == q

    def test_zero_weights_zero_matrix(self):
        params, out = make_outputs(seed=31)
        rng = np.random.default_rng(31)
        w = {"cls": 0.0, "l1": 0.0, "giou": 0.0, "mask": 0.0, "dice": 0.0}
        cost = build_cost(out, random_targets(rng, 3), w)
        assert np.array_equal(cost, np.zeros((SMALL.num_queries, 3)))
        assert hungarian_match(cost).pairs == [(0, 0), (1, 1), (2, 2)]

    def test_empty_targets_rejected(self):
        params, out = make_outputs(seed=32)
        with pytest.raises(ValueError):
            build_cost(out, [], TrainConfig().cost_weights)

    def test_perturbing_box_is_row_local(self):
        params, out = make_outputs(seed=33)
        rng = np.random.default_rng(33)
        tgts = random_targets(rng, 2)
        base = build_cost(out, tgts, TrainConfig().cost_weights)
        boxes = out.boxes.data.copy()
        boxes[4] = np.clip(boxes[4] + 0.1, 0.01, 0.99)
        out.boxes = Tensor(boxes)
        bumped = build_cost(out, tgts, TrainConfig().cost_weights)
        delta = np.abs(bumped - base).max(axis=1)
        assert delta[4] > 0
        assert np.all(delta[np.arange(len(delta)) != 4] == 0)


class TestComputeLoss:
    def test_saturated_correct_prediction(self):
        rng = np.random.default_rng(34)
        tgts = random_targets(rng, 2)
        nq = SMALL.num_queries
        combo = np.full((nq, 36), -20.0)
        combo[0, tgts[0].combo_id] = 20.0
        combo[1, tgts[1].combo_id] = 20.0
        boxes = np.full((nq, 4), 0.5)
        boxes[0], boxes[1] = tgts[0].box, tgts[1].box
        masks = np.full((nq, 4, 4), -30.0)
        tgts[0].mask_feat = (tgts[0].mask_feat > 0.5).astype(np.float64)
        tgts[1].mask_feat = (tgts[1].mask_feat > 0.5).astype(np.float64)
        masks[0] = np.where(tgts[0].mask_feat > 0, 30.0, -30.0)
        masks[1] = np.where(tgts[1].mask_feat > 0, 30.0, -30.0)
        from attrseg.model import QueryOutputs
        out = QueryOutputs(Tensor(masks), Tensor(boxes), None,
                           Tensor(combo), (4, 4))
        match = MatchResult(pairs=[(0, 0), (1, 1)],
                            unmatched_queries=list(range(2, nq)))
        total, bd = compute_loss(out, tgts, match, TrainConfig())
        assert bd.cls <= 1e-8
        assert bd.box_l1 == pytest.approx(0.0, abs=1e-12)
        assert bd.box_giou == pytest.approx(0.0, abs=1e-9)
        assert bd.mask_bce <= 1e-8
        # dice smoothing keeps a tiny floor even on exact masks
        assert bd.mask_dice <= 0.05

    def test_no_targets_only_background_cls(self):
        params, out = make_outputs(seed=35)
        match = MatchResult(pairs=[], unmatched_queries=list(range(SMALL.num_queries)))
        total, bd = compute_loss(out, [], match, TrainConfig())
        assert bd.box_l1 == 0.0 and bd.box_giou == 0.0
        assert bd.mask_bce == 0.0 and bd.mask_dice == 0.0
        assert bd.cls > 0.0

    def test_total_is_weighted_sum(self):
        rng = np.random.default_rng(36)
        params, out = make_outputs(seed=36)
        tgts = random_targets(rng, 3)
        cfg = TrainConfig()
        match = hungarian_match(build_cost(out, tgts, cfg.cost_weights))
        _, bd = compute_loss(out, tgts, match, cfg)
        w = cfg.loss_weights
        want = (w["cls"] * bd.cls + w["l1"] * bd.box_l1 + w["giou"] * bd.box_giou
                + w["mask"] * bd.mask_bce + w["dice"] * bd.mask_dice)
        assert bd.total == pytest.approx(want, abs=1e-12)

    def test_components_nonnegative(self):
        rng = np.random.default_rng(37)
        for seed in range(5):
            params, out = make_outputs(seed=seed)
            tgts = random_targets(rng, int(rng.integers(1, 4)))
            cfg = TrainConfig()
            match = hungarian_match(build_cost(out, tgts, cfg.cost_weights))
            _, bd = compute_loss(out, tgts, match, cfg)
            for v in (bd.cls, bd.box_l1, bd.box_giou, bd.mask_bce, bd.mask_dice):
                assert v >= 0.0

    def test_target_permutation_invariance(self):
        rng = np.random.default_rng(38)
        params, out = make_outputs(seed=38)
        tgts = random_targets(rng, 3)
        cfg = TrainConfig()
        m1 = hungarian_match(build_cost(out, tgts, cfg.cost_weights))
        _, bd1 = compute_loss(out, tgts, m1, cfg)
        perm = [tgts[2], tgts[0], tgts[1]]
        m2 = hungarian_match(build_cost(out, perm, cfg.cost_weights))
        _, bd2 = compute_loss(out, perm, m2, cfg)
        assert bd1.total == pytest.approx(bd2.total, abs=1e-9)

    def test_invalid_combo_rejected(self):
        rng = np.random.default_rng(39)
        params, out = make_outputs(seed=39)
        tgts = random_targets(rng, 1)
        tgts[0].combo_id = 99
        match = MatchResult(pairs=[(0, 0)],
                            unmatched_queries=list(range(1, SMALL.num_queries)))
        with pytest.raises(ValueError):
            compute_loss(out, tgts, match, TrainConfig())

    def test_gradient_matches_finite_differences(self):
        # sampled parameters of the full forward+loss composition
        rng = np.random.default_rng(40)
        aset, imgs = small_dataset()
        params = init_params(SMALL, seed=40)
        cfg = TrainConfig()
        image = imgs[0]
        tgts = targets_from_annotations(aset, 0, SMALL.stride, TABLE)

        def loss_at():
            with Tape() as tape:
                out = forward(image, params, SMALL)
                if tgts:
                    match = hungarian_match(build_cost(out, tgts, cfg.cost_weights))
                else:
                    match = MatchResult([], list(range(SMALL.num_queries)))
                total, _ = compute_loss(out, tgts, match, cfg)
                return total, tape

        total, tape = loss_at()
        grads = backward(total, tape, params=list(params.values()))
        eps = 1e-5
        checked = 0
        for name in ("backbone.0.w", "query_embed", "head.box.w",
                     "head.label.bias", "token_embed", "decoder.0.ffn.w1"):
            p = params[name]
            flat_idx = [0, p.data.size // 2, p.data.size - 1]
            for fi in flat_idx:
                idx = np.unravel_index(fi, p.data.shape)
                orig = p.data[idx]
                p.data[idx] = orig + eps
                hi = loss_at()[0].item()
                p.data[idx] = orig - eps
                lo = loss_at()[0].item()
                p.data[idx] = orig
                fd = (hi - lo) / (2 * eps)
                an = grads[p.tid].data[idx]
                rel = abs(an - fd) / max(1.0, abs(an), abs(fd))
                assert rel <= 1e-4, f"{name}[{idx}]: {an} vs {fd}"
                checked += 1
        assert checked == 18


class TestTrainLoop:
    def test_overfit_smoke(self):
        aset, imgs = small_dataset()
        cfg = TrainConfig(learning_rate=0.002, max_steps=200, batch_size=4,
                          seed=0)
        res = train(aset, imgs, cfg, SMALL)
        assert res.metrics[-1].total <= 0.5 * res.metrics[0].total

    def test_zero_lr_is_noop(self):
        aset, imgs = small_dataset()
        before = init_params(SMALL, seed=0, space=aset.space)
        snapshot = {k: v.data.copy() for k, v in before.items()}
        cfg = TrainConfig(learning_rate=0.0, max_steps=3, batch_size=2, seed=0)
        res = train(aset, imgs, cfg, SMALL)
        for name, p in res.params.items():
            assert np.array_equal(p.data, snapshot[name])

    def test_same_seed_identical_traces(self):
        aset, imgs = small_dataset()
        cfg = TrainConfig(learning_rate=0.002, max_steps=5, batch_size=2, seed=1)
        r1 = train(aset, imgs, cfg, SMALL)
        r2 = train(aset, imgs, cfg, SMALL)
        assert [m.total for m in r1.metrics] == [m.total for m in r2.metrics]

    def test_empty_dataset_rejected(self):
        from attrseg.annotations import AnnotationSet
        with pytest.raises(ValueError):
            train(AnnotationSet(images=[], annotations=[]), {},
                  TrainConfig(max_steps=1), SMALL)

    def test_metrics_log_written(self, tmp_path):
        aset, imgs = small_dataset()
        cfg = TrainConfig(learning_rate=0.002, max_steps=4, batch_size=2, seed=0)
        path = tmp_path / "metrics.jsonl"
        train(aset, imgs, cfg, SMALL, metrics_path=path)
        import json
        lines = [json.loads(l) for l in path.read_text().splitlines()]
        assert [l["step"] for l in lines] == [1, 2, 3, 4]
        assert all("total" in l and "cls" in l for l in lines)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_names_step(self):
        aset, imgs = small_dataset()
        cfg = TrainConfig(learning_rate=1e9, max_steps=50, batch_size=4,
                          seed=0, grad_clip=None)
        with pytest.raises(DivergenceError, match=r"step \d+"):
            train(aset, imgs, cfg, SMALL)


class TestCheckpointResume:
    def test_resume_bit_identical(self, tmp_path):
        aset, imgs = small_dataset()
        ckpt = tmp_path / "ckpt.bin"

        # uninterrupted 8 steps
        cfg8 = TrainConfig(learning_rate=0.002, max_steps=8, batch_size=2, seed=2)
        full = train(aset, imgs, cfg8, SMALL)

        # 5 steps, checkpoint, resume for 3 more
        cfg5 = TrainConfig(learning_rate=0.002, max_steps=5, batch_size=2, seed=2)
        train(aset, imgs, cfg5, SMALL, checkpoint_path=ckpt)
        resumed = train(aset, imgs, cfg8, SMALL, resume_from=ckpt)

        assert resumed.step == full.step
        for name in full.params:
            assert np.array_equal(resumed.params[name].data,
                                  full.params[name].data), name

    def test_resume_requires_train_state(self, tmp_path):
        from attrseg.model import save_checkpoint
        params = init_params(SMALL, seed=0)
        p = tmp_path / "bare.bin"
        save_checkpoint(p, SMALL, params)
        aset, imgs = small_dataset()
        with pytest.raises(ValueError):
            train(aset, imgs, TrainConfig(max_steps=1), SMALL, resume_from=p)
