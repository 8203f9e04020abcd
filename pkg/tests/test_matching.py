"""GIoU, cost matrices, the assignment solver, and the matched set loss."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdetr import tensor as T
from sdetr import matching as M
from sdetr.tensor import ContractError, Tensor

from conftest import check_gradients


def brute_force_min_cost(cost: np.ndarray) -> float:
    n, m = cost.shape
    best = np.inf
    for perm in itertools.permutations(range(n), m):
        best = min(best, sum(cost[perm[j], j] for j in range(m)))
    return best


class TestGiou:
    def test_identical_boxes_give_one(self):
        b = [0.4, 0.4, 0.2, 0.3]
        assert abs(M.giou(b, b) - 1.0) < 1e-12

    def test_far_apart_boxes_approach_minus_one(self):
        a = [0.001, 0.001, 0.002, 0.002]
        b = [0.999, 0.999, 0.002, 0.002]
        assert M.giou(a, b) < -0.99

    def test_hand_geometry_case(self):
        # disjoint quarter boxes, hull = unit square, union = 0.5 -> giou = -0.5
        a = (0.25, 0.25, 0.5, 0.5)
        b = (0.75, 0.75, 0.5, 0.5)
        assert abs(M.giou(a, b) - (-0.5)) < 1e-12

    def test_zero_area_rejected(self):
        with pytest.raises(ContractError, match="zero-area"):
            M.giou([0.5, 0.5, 0.0, 0.1], [0.5, 0.5, 0.1, 0.1])

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_symmetry(self, seed):
        r = np.random.default_rng(seed)
        a = np.concatenate([r.uniform(0.2, 0.8, 2), r.uniform(0.05, 0.4, 2)])
        b = np.concatenate([r.uniform(0.2, 0.8, 2), r.uniform(0.05, 0.4, 2)])
        assert abs(M.giou(a, b) - M.giou(b, a)) < 1e-9

    def test_tensor_route_matches_numpy_route(self, rng):
        pred = np.concatenate([rng.uniform(0.3, 0.7, (6, 2)), rng.uniform(0.1, 0.3, (6, 2))], axis=1)
        gt = np.concatenate([rng.uniform(0.3, 0.7, (6, 2)), rng.uniform(0.1, 0.3, (6, 2))], axis=1)
        got = M.giou_pairs(Tensor(pred, requires_grad=True), gt).data
        want = [M.giou(pred[i], gt[i]) for i in range(6)]
        np.testing.assert_allclose(got, want, atol=1e-9)


class TestCostMatrix:
    def test_perfect_prediction_cost(self):
        scores = np.array([[1.0, 0.0]])
        boxes = np.array([[0.5, 0.5, 0.2, 0.2]])
        preds = M.DetectionSet(scores, boxes)
        cost = M.build_cost_matrix(preds, np.array([0]), boxes.copy())
        assert abs(cost[0, 0] - (-4.0)) < 1e-9  # -2*1 - 5*0 - 2*1

    def test_zero_weights_give_zero_matrix_and_deterministic_assignment(self, rng):
        preds = M.DetectionSet(rng.uniform(0, 1, (3, 2)),
                               np.concatenate([rng.uniform(0.3, 0.7, (3, 2)),
                                               rng.uniform(0.1, 0.3, (3, 2))], axis=1))
        gt_boxes = np.array([[0.5, 0.5, 0.2, 0.2], [0.3, 0.3, 0.1, 0.1]])
        cost = M.build_cost_matrix(preds, np.array([0, 1]), gt_boxes, weights=(0, 0, 0))
        assert np.array_equal(cost, np.zeros((3, 2)))
        assert M.hungarian(cost) == [(0, 0), (1, 1)]

    def test_random_instance_matches_exhaustive_search(self, rng):
        preds = M.DetectionSet(rng.uniform(0, 1, (3, 3)),
                               np.concatenate([rng.uniform(0.3, 0.7, (3, 2)),
                                               rng.uniform(0.1, 0.3, (3, 2))], axis=1))
        gt_boxes = np.concatenate([rng.uniform(0.3, 0.7, (2, 2)),
                                   rng.uniform(0.1, 0.3, (2, 2))], axis=1)
        cost = M.build_cost_matrix(preds, np.array([2, 0]), gt_boxes)
        got = sum(cost[i, j] for i, j in M.hungarian(cost))
        assert abs(got - brute_force_min_cost(cost)) < 1e-9


class TestHungarian:
    def test_two_by_two(self):
        pairs = M.hungarian(np.array([[1.0, 2.0], [2.0, 1.0]]))
        assert pairs == [(0, 0), (1, 1)]

    def test_diagonal_dominant_identity(self):
        cost = np.full((5, 5), 10.0)
        np.fill_diagonal(cost, 0.0)
        assert M.hungarian(cost) == [(i, i) for i in range(5)]

    def test_all_equal_costs_pick_lowest_indices(self):
        assert M.hungarian(np.ones((4, 3))) == [(0, 0), (1, 1), (2, 2)]

    def test_more_gts_than_preds_rejected(self):
        with pytest.raises(ContractError, match="more ground truths"):
            M.hungarian(np.ones((2, 3)))

    def test_non_finite_rejected(self):
        with pytest.raises(ContractError, match="finite"):
            M.hungarian(np.array([[1.0, np.inf], [0.0, 1.0]]))

    @given(st.integers(0, 2**31 - 1), st.integers(1, 5), st.integers(1, 5))
    @settings(max_examples=60, deadline=None)
    def test_matches_brute_force(self, seed, n, m):
        if m > n:
            n, m = m, n
        r = np.random.default_rng(seed)
        cost = r.standard_normal((n, m))
        pairs = M.hungarian(cost)
        assert len(pairs) == m
        assert len({i for i, _ in pairs}) == m  # injective rows
        assert sorted(j for _, j in pairs) == list(range(m))  # all gts covered
        got = sum(cost[i, j] for i, j in pairs)
        assert abs(got - brute_force_min_cost(cost)) < 1e-9

    def test_constant_shift_leaves_assignment_unchanged(self, rng):
        cost = rng.standard_normal((6, 4))
        assert M.hungarian(cost) == M.hungarian(cost + 3.7)


class TestHungarianLoss:
    def test_zero_ground_truths(self, rng):
        logits = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        boxes = Tensor(rng.uniform(0.2, 0.8, (4, 4)), requires_grad=True)
        cls, box, gio = M.hungarian_loss(logits, boxes, np.zeros(0, np.int64),
                                         np.zeros((0, 4)), [])
        assert box.item() == 0.0 and gio.item() == 0.0
        assert cls.item() > 0  # confident positives are still penalized

    def test_saturated_correct_predictions_have_tiny_loss(self):
        gt_boxes = np.array([[0.5, 0.5, 0.2, 0.2], [0.3, 0.6, 0.1, 0.15]])
        gt_labels = np.array([1, 0])
        logits = np.full((2, 3), -30.0)
        logits[0, 1] = 30.0
        logits[1, 0] = 30.0
        cls, box, gio = M.hungarian_loss(
            Tensor(logits.astype(np.float64), requires_grad=True),
            Tensor(gt_boxes.copy(), requires_grad=True),
            gt_labels, gt_boxes, [(0, 0), (1, 1)])
        total = 2 * cls.item() + 5 * box.item() + 2 * gio.item()
        assert total < 1e-3

    def test_gradients_match_finite_differences(self, rng):
        logits = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
        boxes = Tensor(np.concatenate([rng.uniform(0.3, 0.7, (5, 2)),
                                       rng.uniform(0.1, 0.3, (5, 2))], axis=1),
                       requires_grad=True)
        gt_boxes = np.concatenate([rng.uniform(0.3, 0.7, (2, 2)),
                                   rng.uniform(0.1, 0.3, (2, 2))], axis=1)
        gt_labels = np.array([0, 2])
        assignment = [(1, 0), (3, 1)]

        def loss():
            cls, box, gio = M.hungarian_loss(logits, boxes, gt_labels, gt_boxes, assignment)
            return T.add(T.add(T.mul_scalar(cls, 2.0), T.mul_scalar(box, 5.0)),
                         T.mul_scalar(gio, 2.0))

        check_gradients(loss, [logits, boxes], rng, n_coords=8, tol=1e-4)

    def test_focal_loss_balanced_uniform(self):
        # logits 0 -> p = 0.5; focal term = 0.25*(0.5)^2*ln2 each for pos and so on
        logits = Tensor(np.zeros((2, 2)), requires_grad=True, dtype=np.float64)
        targets = np.array([[1.0, 0.0], [0.0, 1.0]])
        got = M.sigmoid_focal_loss(logits, targets).item()
        per_pos = 0.25 * 0.25 * np.log(2.0)
        per_neg = 0.75 * 0.25 * np.log(2.0)
        assert abs(got - (2 * per_pos + 2 * per_neg)) < 1e-12
