import numpy as np
import pytest

from maskloop.annotator import Click
from maskloop.campaign import AnswerRecord, InstanceState
from maskloop.masks import Box, boundary_mask, rle_encode
from maskloop.ranker import (
    FEATURE_NAMES,
    Forest,
    ForestParams,
    RankFeatures,
    _Tree,
    extract_features,
    permutation_importance,
    ranking_curve,
    train,
)


def feats(f1=2, f2=1, f3=0.9, f4=4.0, f5=2.0):
    return RankFeatures(f1, f2, f3, f4, f5)


def random_features(rng, n):
    out = []
    for _ in range(n):
        f5 = float(rng.uniform(0, 20))
        out.append(
            RankFeatures(
                last_round_clicks=int(rng.integers(0, 5)),
                round_number=int(rng.integers(1, 4)),
                mask_stability=float(rng.uniform(0, 1)),
                max_click_boundary_dist=f5 + float(rng.uniform(0, 10)),
                mean_click_boundary_dist=f5,
            )
        )
    return out


class TestExtractFeatures:
    def _state(self, masks, answers):
        return InstanceState(
            instance_id="i",
            class_label="c",
            image_ref="img",
            width=32,
            height=32,
            box=Box(4, 4, 20, 20),
            masks={r: rle_encode(m) for r, m in masks.items()},
            answers=answers,
        )

    def test_click_counts_and_round(self):
        m = np.zeros((32, 32), bool)
        m[8:20, 8:20] = True
        clicks = [Click(x=10.0 + i, y=10.0, polarity="negative", round=1) for i in range(4)]
        state = self._state(
            {0: m, 1: m}, {1: AnswerRecord(kind="clicks", clicks=clicks)}
        )
        f = extract_features(state, 1)
        assert f.last_round_clicks == 4
        assert f.round_number == 1

    def test_identical_masks_full_stability(self):
        m = np.zeros((32, 32), bool)
        m[8:20, 8:20] = True
        state = self._state(
            {0: m, 1: m},
            {1: AnswerRecord(kind="clicks", clicks=[Click(9.5, 9.5, "negative", 1)])},
        )
        assert extract_features(state, 1).mask_stability == 1.0

    def test_click_on_boundary_pixel_zero_distance(self):
        m = np.zeros((32, 32), bool)
        m[8:20, 8:20] = True
        by, bx = np.nonzero(boundary_mask(m))
        x, y = bx[0] + 0.5, by[0] + 0.5  # click exactly at a boundary pixel center
        state = self._state(
            {0: m, 1: m},
            {1: AnswerRecord(kind="clicks", clicks=[Click(float(x), float(y), "negative", 1)])},
        )
        f = extract_features(state, 1)
        assert f.max_click_boundary_dist == 0.0
        assert f.mean_click_boundary_dist == 0.0

    def test_known_distance(self):
        m = np.zeros((32, 32), bool)
        m[8:20, 8:20] = True
        # square spans pixel centers 8.5..19.5; the click at 14.5 sits 5.0 px
        # from the nearest boundary pixel center (column 19, at 19.5)
        state = self._state(
            {0: m, 1: m},
            {1: AnswerRecord(kind="clicks", clicks=[Click(14.5, 14.5, "negative", 1)])},
        )
        f = extract_features(state, 1)
        assert f.max_click_boundary_dist == pytest.approx(5.0)

    def test_zero_click_round_convention(self):
        m = np.zeros((32, 32), bool)
        m[8:20, 8:20] = True
        state = self._state({0: m}, {1: AnswerRecord(kind="zero_clicks")})
        f = extract_features(state, 1)
        assert f.last_round_clicks == 0
        assert f.max_click_boundary_dist == 0.0
        assert f.mask_stability == 1.0

    def test_unrecorded_round_rejected(self):
        m = np.zeros((32, 32), bool)
        state = self._state({0: m}, {})
        with pytest.raises(ValueError):
            extract_features(state, 1)


class TestForest:
    def test_constant_targets(self):
        rng = np.random.default_rng(0)
        samples = [(f, 0.37) for f in random_features(rng, 40)]
        forest = train(samples, ForestParams(n_trees=10), seed=1)
        pred = forest.predict([f for f, _ in samples])
        assert np.allclose(pred, 0.37)

    def test_learns_single_feature_target(self):
        rng = np.random.default_rng(1)
        features = random_features(rng, 400)
        samples = [(f, f.mask_stability) for f in features]
        forest = train(samples, ForestParams(n_trees=50, max_depth=8), seed=2)
        pred = forest.predict(features)
        rmse = float(np.sqrt(np.mean((pred - np.array([f.mask_stability for f in features])) ** 2)))
        assert rmse <= 0.05

    def test_predictions_within_target_range(self):
        rng = np.random.default_rng(2)
        features = random_features(rng, 100)
        targets = rng.uniform(0.3, 0.6, size=100)
        forest = train(list(zip(features, targets)), ForestParams(n_trees=20), seed=3)
        pred = forest.predict(features)
        assert pred.min() >= 0.3 - 1e-9
        assert pred.max() <= 0.6 + 1e-9

    def test_single_tree_leaf_value(self):
        tree = _Tree()
        root = tree._add_node()
        tree.feature[root] = 0
        tree.threshold[root] = 2.5
        left = tree._add_node()
        right = tree._add_node()
        tree.left[root], tree.right[root] = left, right
        tree.value[left], tree.value[right] = 0.8, 0.2
        forest = Forest(trees=[tree], params=ForestParams(n_trees=1), seed=0)
        assert forest.predict_one(feats(f1=1)) == pytest.approx(0.8)
        assert forest.predict_one(feats(f1=4)) == pytest.approx(0.2)

    def test_tree_order_invariance(self):
        rng = np.random.default_rng(3)
        features = random_features(rng, 60)
        targets = rng.uniform(0, 1, size=60)
        forest = train(list(zip(features, targets)), ForestParams(n_trees=12), seed=4)
        swapped = Forest(trees=list(reversed(forest.trees)), params=forest.params, seed=4)
        assert np.allclose(forest.predict(features), swapped.predict(features))

    def test_deterministic_for_seed(self):
        rng = np.random.default_rng(4)
        features = random_features(rng, 80)
        targets = rng.uniform(0, 1, size=80)
        a = train(list(zip(features, targets)), ForestParams(n_trees=8), seed=9)
        b = train(list(zip(features, targets)), ForestParams(n_trees=8), seed=9)
        assert np.array_equal(a.predict(features), b.predict(features))

    def test_empty_samples_rejected(self):
        with pytest.raises(ValueError):
            train([])

    def test_json_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        features = random_features(rng, 50)
        targets = rng.uniform(0, 1, size=50)
        forest = train(list(zip(features, targets)), ForestParams(n_trees=6), seed=7)
        path = tmp_path / "forest.json"
        forest.save(path)
        again = Forest.load(path)
        assert np.array_equal(forest.predict(features), again.predict(features))


class TestRankingCurve:
    def test_perfect_predictor_non_increasing(self):
        rng = np.random.default_rng(0)
        true = rng.uniform(0, 1, size=200)
        points = ranking_curve(true, true)
        values = [v for _, v in points]
        assert all(a >= b - 1e-12 for a, b in zip(values, values[1:]))
        assert points[-1][1] == pytest.approx(float(true.mean()))

    def test_constant_predictor_flat(self):
        rng = np.random.default_rng(1)
        true = rng.uniform(0, 1, size=100)
        points = ranking_curve(np.zeros(100), true)
        # stable tie-break keeps input order; every prefix is an input prefix
        for pct, v in points:
            k = max(1, int(np.ceil(100 * pct / 100)))
            assert v == pytest.approx(float(true[:k].mean()))

    def test_random_predictor_near_global_mean(self):
        rng = np.random.default_rng(2)
        true = rng.uniform(0.4, 0.9, size=1000)
        pred = rng.uniform(0, 1, size=1000)
        points = ranking_curve(pred, true)
        for pct, v in points:
            if pct >= 20:  # tiny prefixes are noisy
                assert v == pytest.approx(float(true.mean()), abs=0.02)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            ranking_curve([], [])


class TestPermutationImportance:
    def test_informative_feature_ranks_first(self):
        rng = np.random.default_rng(6)
        features = random_features(rng, 300)
        targets = np.array([f.mask_stability for f in features])
        forest = train(list(zip(features, targets)), ForestParams(n_trees=30), seed=1)
        ranking = permutation_importance(forest, features, targets)
        assert ranking[0][0] == "mask_stability"
        names = [n for n, _ in ranking]
        assert set(names) == set(FEATURE_NAMES)
