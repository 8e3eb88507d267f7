"""Mask-quality ranking from indirect annotation signals.

A small bagged regression forest maps five per-round features to the
expected IoU of the produced mask. The features come from the annotation
process only (no image content, no class labels): how many clicks the last
round needed, which round it was, how much the mask changed, and how far
the clicks were from the previous mask's boundary.
"""

import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .campaign import InstanceState
from .geometry import unwarp_mask
from .masks import boundary_mask, iou, rle_decode

FEATURE_NAMES = (
    "last_round_clicks",
    "round_number",
    "mask_stability",
    "max_click_boundary_dist",
    "mean_click_boundary_dist",
)


@dataclass(frozen=True)
class RankFeatures:
    """Per-round ranking inputs.

    mask_stability is the IoU between the previous and the current round's
    masks (1.0 = no change). The distances are Euclidean, from each of the
    round's clicks to the nearest boundary pixel of the previous mask; both
    are 0 by convention for zero-click rounds.
    """

    last_round_clicks: int
    round_number: int
    mask_stability: float
    max_click_boundary_dist: float
    mean_click_boundary_dist: float

    def __post_init__(self):
        if self.last_round_clicks < 0 or self.round_number < 1:
            raise ValueError("bad feature values")
        if not 0.0 <= self.mask_stability <= 1.0:
            raise ValueError("mask_stability must be in [0, 1]")
        if self.max_click_boundary_dist < self.mean_click_boundary_dist:
            raise ValueError("max distance below mean distance")

    def as_array(self) -> np.ndarray:
        return np.array(
            [
                self.last_round_clicks,
                self.round_number,
                self.mask_stability,
                self.max_click_boundary_dist,
                self.mean_click_boundary_dist,
            ],
            dtype=np.float64,
        )


def extract_features(state: InstanceState, round_index: int) -> RankFeatures:
    """Features for one recorded round of an instance.

    The "previous mask" of round 1 is the round-0 (zero-click) mask. For an
    accepted round the current mask is the frozen previous mask.
    """
    if round_index < 1 or round_index not in state.answers:
        raise ValueError(f"round {round_index} not recorded for {state.instance_id}")
    if round_index - 1 not in state.masks:
        raise ValueError(f"no previous mask for round {round_index}")
    prev = rle_decode(state.masks[round_index - 1])
    cur = rle_decode(state.masks[round_index]) if round_index in state.masks else prev
    answer = state.answers[round_index]
    clicks = answer.clicks if answer.kind == "clicks" else []

    if clicks:
        by, bx = np.nonzero(boundary_mask(prev))
        if len(bx) == 0:
            dists = np.zeros(len(clicks))
        else:
            cx = np.array([c.x for c in clicks])
            cy = np.array([c.y for c in clicks])
            d = np.hypot(
                cx[:, None] - (bx[None, :] + 0.5), cy[:, None] - (by[None, :] + 0.5)
            )
            dists = d.min(axis=1)
        f4 = float(dists.max())
        f5 = float(dists.mean())
    else:
        f4 = f5 = 0.0
    return RankFeatures(
        last_round_clicks=len(clicks),
        round_number=round_index,
        mask_stability=iou(prev, cur),
        max_click_boundary_dist=f4,
        mean_click_boundary_dist=f5,
    )


def dataset_from_states(instances, inner: int, outer: int):
    """(features, true IoU, instance id, round) for every answered round.

    Targets are image-space IoU against the instance's ground truth; skip
    answers are excluded (no mask exists for them).
    """
    samples = []
    for iid in sorted(instances):
        state = instances[iid]
        if state.gt is None or not state.masks:
            continue
        gt_image = rle_decode(state.gt)
        t = state.transform(inner, outer)
        for r in sorted(state.answers):
            if state.answers[r].kind == "skip" or r - 1 not in state.masks:
                continue
            features = extract_features(state, r)
            mask_rle = state.masks.get(r, state.masks[r - 1])
            target = iou(unwarp_mask(rle_decode(mask_rle), t), gt_image)
            samples.append((features, target, iid, r))
    return samples


# ---------------------------------------------------------------------------
# regression forest (bagged CART, variance-reduction splits)


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: int = 8
    min_leaf: int = 5
    features_per_split: int = 2

    def to_json(self) -> dict:
        return {
            "n_trees": self.n_trees,
            "max_depth": self.max_depth,
            "min_leaf": self.min_leaf,
            "features_per_split": self.features_per_split,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ForestParams":
        return cls(**obj)


class _Tree:
    """CART regression tree over parallel node arrays."""

    __slots__ = ("feature", "threshold", "left", "right", "value")

    def __init__(self):
        self.feature: List[int] = []
        self.threshold: List[float] = []
        self.left: List[int] = []
        self.right: List[int] = []
        self.value: List[float] = []

    def _add_node(self) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(0.0)
        return len(self.value) - 1

    def fit(self, X: np.ndarray, y: np.ndarray, params: ForestParams, rng: np.random.Generator):
        self._grow(X, y, params, rng, depth=0)
        return self

    def _grow(self, X, y, params, rng, depth) -> int:
        node = self._add_node()
        self.value[node] = float(y.mean())
        if depth >= params.max_depth or len(y) < 2 * params.min_leaf or np.ptp(y) == 0.0:
            return node
        n_features = X.shape[1]
        candidates = rng.choice(
            n_features, size=min(params.features_per_split, n_features), replace=False
        )
        best = None  # (sse, feature, threshold)
        for f in candidates:
            order = np.argsort(X[:, f], kind="stable")
            xs, ys = X[order, f], y[order]
            csum = np.cumsum(ys)
            csq = np.cumsum(ys**2)
            total, total_sq = csum[-1], csq[-1]
            n = len(ys)
            for i in range(params.min_leaf, n - params.min_leaf + 1):
                if i < n and xs[i - 1] == xs[i]:
                    continue  # not a real boundary between distinct values
                ls, lq = csum[i - 1], csq[i - 1]
                rs, rq = total - ls, total_sq - lq
                sse = (lq - ls * ls / i) + (rq - rs * rs / (n - i))
                if best is None or sse < best[0] - 1e-12:
                    thr = (xs[i - 1] + xs[i]) / 2.0 if i < n else xs[i - 1]
                    best = (sse, int(f), float(thr))
        if best is None:
            return node
        _, f, thr = best
        go_left = X[:, f] <= thr
        if not go_left.any() or go_left.all():
            return node
        self.feature[node] = f
        self.threshold[node] = thr
        self.left[node] = self._grow(X[go_left], y[go_left], params, rng, depth + 1)
        self.right[node] = self._grow(X[~go_left], y[~go_left], params, rng, depth + 1)
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        feature = np.asarray(self.feature)
        threshold = np.asarray(self.threshold)
        left = np.asarray(self.left)
        right = np.asarray(self.right)
        value = np.asarray(self.value)
        node = np.zeros(len(X), dtype=np.int64)
        while True:
            internal = feature[node] >= 0
            if not internal.any():
                break
            f = feature[node[internal]]
            go_left = X[internal, f] <= threshold[node[internal]]
            nxt = np.where(go_left, left[node[internal]], right[node[internal]])
            node[internal] = nxt
        return value[node]

    def to_json(self) -> dict:
        def pack(i: int) -> dict:
            if self.feature[i] < 0:
                return {"value": self.value[i]}
            return {
                "feature": self.feature[i],
                "threshold": self.threshold[i],
                "value": self.value[i],
                "left": pack(self.left[i]),
                "right": pack(self.right[i]),
            }

        return pack(0)

    @classmethod
    def from_json(cls, obj: dict) -> "_Tree":
        tree = cls()

        def unpack(node: dict) -> int:
            i = tree._add_node()
            tree.value[i] = float(node["value"])
            if "feature" in node:
                tree.feature[i] = int(node["feature"])
                tree.threshold[i] = float(node["threshold"])
                tree.left[i] = unpack(node["left"])
                tree.right[i] = unpack(node["right"])
            return i

        unpack(obj)
        return tree


@dataclass
class Forest:
    trees: List[_Tree]
    params: ForestParams
    seed: int

    def predict(self, features) -> np.ndarray:
        X = _as_matrix(features)
        out = np.zeros(len(X))
        for tree in self.trees:
            out += tree.predict(X)
        out /= len(self.trees)
        return np.clip(out, 0.0, 1.0)

    def predict_one(self, features: RankFeatures) -> float:
        return float(self.predict([features])[0])

    def to_json(self) -> dict:
        return {
            "format": "maskloop-forest",
            "version": 1,
            "params": self.params.to_json(),
            "seed": self.seed,
            "feature_names": list(FEATURE_NAMES),
            "trees": [t.to_json() for t in self.trees],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Forest":
        if obj.get("format") != "maskloop-forest" or obj.get("version") != 1:
            raise ValueError("unsupported forest document")
        return cls(
            trees=[_Tree.from_json(t) for t in obj["trees"]],
            params=ForestParams.from_json(obj["params"]),
            seed=int(obj.get("seed", 0)),
        )

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f)

    @classmethod
    def load(cls, path) -> "Forest":
        with open(path) as f:
            return cls.from_json(json.load(f))


def _as_matrix(features) -> np.ndarray:
    if isinstance(features, np.ndarray):
        return np.atleast_2d(features).astype(np.float64)
    return np.stack([f.as_array() for f in features])


def train(samples: Sequence[Tuple[RankFeatures, float]], params: ForestParams = ForestParams(), seed: int = 0) -> Forest:
    """Fit a bagged forest regressing features -> true IoU in [0, 1]."""
    if not samples:
        raise ValueError("no training samples")
    X = np.stack([f.as_array() for f, _ in samples])
    y = np.array([t for _, t in samples], dtype=np.float64)
    if ((y < 0) | (y > 1)).any():
        raise ValueError("targets must lie in [0, 1]")
    root = np.random.SeedSequence(seed)
    trees = []
    for child in root.spawn(params.n_trees):
        rng = np.random.default_rng(child)
        pick = rng.integers(0, len(y), size=len(y))
        trees.append(_Tree().fit(X[pick], y[pick], params, rng))
    return Forest(trees=trees, params=params, seed=seed)


def ranking_curve(predictions: Sequence[float], true_ious: Sequence[float]) -> List[Tuple[int, float]]:
    """Mean true IoU of the top-N% highest-predicted masks, N = 5, 10 .. 100.

    Ties in prediction break by stable input order.
    """
    predictions = np.asarray(predictions, dtype=np.float64)
    true_ious = np.asarray(true_ious, dtype=np.float64)
    if len(predictions) != len(true_ious):
        raise ValueError("prediction/target lengths differ")
    if len(predictions) == 0:
        raise ValueError("empty ranking input")
    order = np.argsort(-predictions, kind="stable")
    sorted_true = true_ious[order]
    points = []
    n = len(sorted_true)
    for pct in range(5, 101, 5):
        k = max(1, int(np.ceil(n * pct / 100)))
        points.append((pct, float(sorted_true[:k].mean())))
    return points


def permutation_importance(
    forest: Forest,
    features: Sequence[RankFeatures],
    targets: Sequence[float],
    rng: Optional[np.random.Generator] = None,
) -> List[Tuple[str, float]]:
    """RMSE increase when one feature column is shuffled; sorted descending."""
    rng = rng or np.random.default_rng(0)
    X = _as_matrix(features)
    y = np.asarray(targets, dtype=np.float64)
    base = float(np.sqrt(np.mean((forest.predict(X) - y) ** 2)))
    out = []
    for j, name in enumerate(FEATURE_NAMES):
        Xp = X.copy()
        Xp[:, j] = rng.permutation(Xp[:, j])
        rmse = float(np.sqrt(np.mean((forest.predict(Xp) - y) ** 2)))
        out.append((name, rmse - base))
    out.sort(key=lambda kv: -kv[1])
    return out


def spearman(a: Sequence[float], b: Sequence[float]) -> float:
    """Spearman rank correlation (average ranks for ties)."""
    from scipy import stats

    rho = stats.spearmanr(a, b).statistic
    return float(rho)
