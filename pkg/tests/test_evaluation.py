import math
from collections import Counter
from datetime import datetime, timedelta
from itertools import combinations

import numpy as np
import pytest
from scipy.stats import kendalltau

from engine.evaluation import (
    NbcPredictor,
    PopularityPredictor,
    RandomPredictor,
    accuracy_at_k,
    active_users,
    covisit,
    covisit_truth,
    learning_curve,
    learning_curve_rows,
    location_distance,
    location_distances,
    location_truth,
    mrr,
    mrr_curve,
    nbc_fit,
    nbc_predict,
    rank_positions,
    split_chrono,
    stays_by_user,
    truncate_train,
    visit_counts,
)
from engine.ingest import filter_users, time_index
from engine.predict import rank
from engine.sampling import make_rng
from models import CheckIn, CovisitMatrix, Dataset, Query, RankedList, Split, Stay, ValidationError, VenueProfile

START = datetime(2016, 9, 5, 8, 0)
H_10 = 2.9289683


def _venues(n):
    return {f"b{i}": VenueProfile(f"b{i}", "Academic", ("Classrooms",)) for i in range(n)}


def _dataset(records, n_pois=5, users=None):
    data = filter_users(records, 1, _venues(n_pois))
    if users is not None:
        return Dataset(data.checkins, data.venues, frozenset(users))
    return data


def _visits(user, pois, start=START, step=timedelta(hours=1)):
    return [CheckIn(user, start + k * step, f"b{b}") for k, b in enumerate(pois)]


def test_split_ten_records():
    data = _dataset(_visits("u0", range(5)) + _visits("u0", range(5), start=START + timedelta(days=1)))
    split = split_chrono(data, 0.8)
    assert len(split.train) == 8 and len(split.test) == 2
    assert max(c.timestamp for c in split.train.checkins) < min(c.timestamp for c in split.test.checkins)


def test_split_uses_ceiling():
    split = split_chrono(_dataset(_visits("u0", range(5))), 0.8)
    assert (len(split.train), len(split.test)) == (4, 1)


def test_split_single_record_user_goes_to_train():
    data = _dataset(_visits("u0", [0]) + _visits("u1", range(5)))
    split = split_chrono(data)
    assert [c.user_id for c in split.test.checkins] == ["u1"]
    assert sum(c.user_id == "u0" for c in split.train.checkins) == 1


def test_split_is_stable_for_equal_timestamps():
    records = [CheckIn("u0", START, f"b{b}") for b in (3, 1, 2, 0, 4)]
    split = split_chrono(Dataset(tuple(records), _venues(5), frozenset({"u0"})), 0.8)
    assert [c.poi_id for c in split.test.checkins] == ["b4"]


def test_split_rejects_bad_fraction():
    with pytest.raises(ValidationError):
        split_chrono(_dataset(_visits("u0", range(3))), 1.0)


def test_truncate_train_keeps_prefix():
    data = _dataset(_visits("u0", range(5)))
    assert [c.poi_id for c in truncate_train(data, 0.5).checkins] == ["b0", "b1", "b2"]


def _fixed(indices):
    ranked = RankedList(np.array(indices), np.zeros(len(indices)))
    return lambda query, k: ranked.prefix(k)


def test_accuracy_buckets_and_ratio():
    train = _dataset(_visits("u0", [0]))
    test = _dataset(_visits("u0", [0, 1, 2], start=START + timedelta(days=1)))
    report = accuracy_at_k(_fixed([0, 1, 3, 4, 2]), Split(train, test), ks=(1, 3))
    assert report.accuracy("total", 3) == pytest.approx(2 / 3)
    assert report.accuracy("visited", 3) == 1.0
    assert report.accuracy("unvisited", 3) == 0.5
    assert report.accuracy("total", 1) == pytest.approx(1 / 3)
    for k in report.ks:
        assert report.hits["visited"][k] + report.hits["unvisited"][k] == report.hits["total"][k]
    assert report.n["visited"] + report.n["unvisited"] == report.n["total"]


def test_accuracy_perfect_oracle():
    train = _dataset(_visits("u0", [0, 1]))
    test = _dataset(_visits("u0", [2, 3, 1], start=START + timedelta(days=1)))
    truth = {c.timestamp: test.poi_index[c.poi_id] for c in test.checkins}

    def oracle(query, k):
        first = truth[query.timestamp]
        return RankedList(np.array([first] + [b for b in range(5) if b != first]), np.zeros(5)).prefix(k)

    report = accuracy_at_k(oracle, Split(train, test))
    assert all(row["accuracy"] == 1.0 for row in report.rows() if row["n"])


def test_accuracy_random_predictor_matches_expectation():
    n_pois, n_test = 221, 20_000
    rng = make_rng(0)
    train = _dataset(_visits("u0", [0]), n_pois)
    test = Dataset(
        tuple(CheckIn("u0", START + timedelta(minutes=i), f"b{b}") for i, b in enumerate(rng.integers(0, n_pois, n_test))),
        train.venues,
        train.users,
    )
    report = accuracy_at_k(RandomPredictor(n_pois, seed=1), Split(train, test), ks=(1,))
    p = 1 / n_pois
    assert abs(report.accuracy("total", 1) - p) < 3 * math.sqrt(p * (1 - p) / n_test)


def test_accuracy_rejects_bad_ks():
    data = _dataset(_visits("u0", [0]))
    with pytest.raises(ValidationError):
        accuracy_at_k(_fixed([0]), Split(data, data), ks=(0,))


def test_nbc_top1():
    records = [CheckIn("u1", START + timedelta(minutes=m), "b1") for m in range(3)]
    records.append(CheckIn("u1", START + timedelta(minutes=5), "b2"))
    model = nbc_fit(_dataset(records, 3))
    assert nbc_predict(model, 0, 0, 1).indices.tolist() == [1]
    assert model.count(0, 0, 1) == 3


def test_nbc_unseen_user_falls_back_to_popularity():
    records = _visits("u0", [2, 2, 2, 0, 0, 1])
    model = nbc_fit(_dataset(records, 4))
    ranked = nbc_predict(model, 7, 0, 4)
    assert ranked.indices.tolist() == [2, 0, 1, 3]
    assert not ranked.scores.any()


def _nbc_oracle(records, data, u, t):
    joint, popularity = Counter(), Counter()
    for c in records:
        b = data.poi_index[c.poi_id]
        popularity[b] += 1
        joint[(data.user_index[c.user_id], time_index(c.timestamp).id, b)] += 1
    total = len(records)
    scored = [(joint[(u, t, b)] / total, popularity[b], b) for b in range(len(data.poi_ids))]
    scored.sort(key=lambda x: (-x[0], -x[1], x[2]))
    return [b for _, _, b in scored], [s for s, _, _ in scored]


@pytest.mark.parametrize("seed", range(50))
def test_nbc_matches_brute_force_counts(seed):
    rng = make_rng(seed)
    n_pois = int(rng.integers(2, 8))
    records = [
        CheckIn(f"u{rng.integers(0, 3)}", START + timedelta(hours=int(rng.integers(0, 168))), f"b{rng.integers(0, n_pois)}")
        for _ in range(int(rng.integers(5, 40)))
    ]
    data = _dataset(records, n_pois)
    model = nbc_fit(data)
    for u in range(len(data.user_ids)):
        for t in (0, int(rng.integers(0, 28))):
            expected_order, expected_scores = _nbc_oracle(data.checkins, data, u, t)
            ranked = nbc_predict(model, u, t, n_pois)
            assert ranked.indices.tolist() == expected_order
            assert ranked.scores.tolist() == expected_scores


def test_nbc_predictor_uses_time_slot():
    records = _visits("u0", [1], start=datetime(2016, 9, 5, 8, 0)) + _visits("u0", [2], start=datetime(2016, 9, 5, 20, 0))
    data = _dataset(records, 3)
    predictor = NbcPredictor(nbc_fit(data))
    assert predictor(Query(0, datetime(2016, 9, 12, 7, 0)), 1).indices.tolist() == [1]
    assert predictor(Query(0, datetime(2016, 9, 12, 21, 0)), 1).indices.tolist() == [2]


def test_popularity_predictor():
    data = _dataset(_visits("u0", [3, 3, 1]), 4)
    assert PopularityPredictor(data)(Query(0, START), 2).indices.tolist() == [3, 1]


def _at(hour, minute=0):
    return datetime(2016, 9, 5, hour, minute)


def test_covisit_overlap_minutes():
    stays = {0: [Stay("lib", _at(17), _at(18))], 1: [Stay("lib", _at(17, 30), _at(19))]}
    matrix = covisit(stays)
    assert matrix.get(0, 1) == 30
    assert matrix.get(1, 0) == 30


def test_covisit_disjoint():
    stays = {0: [Stay("lib", _at(9), _at(10))], 1: [Stay("lib", _at(10, 30), _at(11))], 2: [Stay("gym", _at(9), _at(10))]}
    matrix = covisit(stays)
    assert len(matrix) == 0
    assert matrix.get(0, 2) == 0


def test_covisit_matches_minute_simulation():
    stays = {
        0: [Stay("lib", _at(8), _at(12)), Stay("gym", _at(13), _at(14))],
        1: [Stay("lib", _at(9), _at(10)), Stay("lib", _at(11, 15), _at(11, 45))],
        2: [Stay("lib", _at(9, 30), _at(11, 30)), Stay("gym", _at(13, 40), _at(15))],
    }
    matrix = covisit(stays)

    expected = Counter()
    for minute in range(24 * 60):
        now = datetime(2016, 9, 5) + timedelta(minutes=minute)
        present = [(u, s.poi_id) for u, user_stays in stays.items() for s in user_stays if s.start <= now < s.end]
        for (u, a), (v, b) in combinations(present, 2):
            if a == b and u != v:
                expected[tuple(sorted((u, v)))] += 1
    assert matrix.minutes == dict(expected)


def test_covisit_from_records():
    records = [
        CheckIn("u0", _at(17), "b0"), CheckIn("u0", _at(17, 8), "b0"),
        CheckIn("u1", _at(17, 4), "b0"), CheckIn("u1", _at(17, 10), "b0"),
    ]
    data = _dataset(records)
    assert covisit(stays_by_user(data, 10)).get(0, 1) == 4


def test_location_distance_identical_and_reversed():
    data = _dataset(_visits("u0", [0, 0, 1]) + _visits("u1", [0, 0, 1]), 3)
    assert location_distance(data, 0, 1) == 0.0
    data = _dataset(
        _visits("u0", [0, 0, 0, 0, 1, 1, 1, 2, 2, 3]) + _visits("u1", [3, 3, 3, 3, 2, 2, 2, 1, 1, 0]), 4
    )
    assert location_distance(data, 0, 1) == 1.0


@pytest.mark.parametrize("seed", range(10))
def test_location_distance_matches_pair_count(seed):
    rng = make_rng(seed)
    n = 4 if seed < 5 else 9
    counts = rng.integers(0, 5, size=(2, n))
    counts[:, 0] += 1
    positions = rank_positions(counts)
    discordant = sum(
        1 for a, b in combinations(range(n), 2)
        if (positions[0, a] - positions[0, b]) * (positions[1, a] - positions[1, b]) < 0
    )
    distance = location_distances(positions, 0, [1])[0]
    assert distance == pytest.approx(discordant / math.comb(n, 2), abs=1e-12)
    tau = kendalltau(positions[0], positions[1]).statistic
    assert distance == pytest.approx((1 - tau) / 2, abs=1e-12)


def test_rank_positions_ties_by_index():
    assert rank_positions(np.array([[2, 5, 2, 0]])).tolist() == [[1, 0, 2, 3]]


def test_location_distance_needs_history():
    data = _dataset(_visits("u0", [0]), 3, users={"u0", "u1"})
    with pytest.raises(ValidationError):
        location_distance(data, 0, 1)


def test_mrr_harmonic_case():
    suggestions = {0: rank(np.arange(12, 0, -1.0), exclude=0)}
    truth = {0: set(range(1, 11))}
    assert mrr(suggestions, truth, [0]) == pytest.approx(H_10, abs=1e-7)


def test_mrr_two_users_by_hand():
    suggestions = {
        0: RankedList(np.array([1, 2, 3]), np.zeros(3)),
        1: RankedList(np.array([3, 0, 2]), np.zeros(3)),
    }
    truth = {0: {1, 3}, 1: {2}}
    expected = ((1 + 1 / 3) + 1 / 3) / 2
    assert mrr(suggestions, truth, [0, 1], size=None) == pytest.approx(expected, abs=1e-12)
    assert mrr_curve(suggestions, truth, [0, 1], [1, 2], size=None) == [(1, pytest.approx(4 / 3)), (2, pytest.approx(expected))]


def test_mrr_missing_truth_member():
    suggestions = {0: RankedList(np.array([1]), np.zeros(1))}
    with pytest.raises(ValidationError):
        mrr(suggestions, {0: {2}}, [0], size=1)
    with pytest.raises(ValidationError):
        mrr(suggestions, {0: {1}}, [])


def test_active_users_and_truth_sets():
    records = _visits("u0", [0, 1]) + _visits("u1", [0, 1, 2, 2]) + _visits("u2", [2])
    data = _dataset(records, 3)
    assert active_users(data, 2) == [1, 0]

    matrix = CovisitMatrix()
    matrix.add(0, 1, 30)
    matrix.add(0, 2, 50)
    assert covisit_truth(matrix, [0], size=2) == {0: {1, 2}}
    assert covisit_truth(matrix, [1], size=1) == {1: {0}}

    truth = location_truth(rank_positions(visit_counts(data)), [0], size=1)
    assert truth == {0: {1}}


def test_learning_curve_single_fraction_equals_plain_run():
    records = []
    for u in range(3):
        records += _visits(f"u{u}", [u, u, (u + 1) % 4, u, 3, u, u, 2, u, u])
    split = split_chrono(_dataset(records, 4), 0.8)

    def evaluate(predictor, test_split):
        return accuracy_at_k(predictor, test_split, (1, 3))

    def train(train_data):
        return NbcPredictor(nbc_fit(train_data))

    curve = learning_curve(split, [1.0], train, evaluate)
    assert curve[0][1].rows() == evaluate(train(split.train), split).rows()

    curve = learning_curve(split, [0.3, 0.6, 1.0], train, evaluate)
    assert [f for f, _ in curve] == [0.3, 0.6, 1.0]
    rows = learning_curve_rows(curve)
    assert set(rows[0]) == {"fraction", "bucket", "k", "accuracy"}
    assert len(rows) == 3 * 3 * 2


@pytest.mark.parametrize("fractions", [[0.5, 0.2], [0.0, 1.0], [1.5]])
def test_learning_curve_rejects_fractions(fractions):
    data = _dataset(_visits("u0", range(4)))
    with pytest.raises(ValidationError):
        learning_curve(split_chrono(data), fractions, None, None)


def test_covisit_truth_skips_thin_users():
    matrix = CovisitMatrix()
    matrix.add(0, 1, 30)
    matrix.add(0, 2, 50)
    matrix.add(0, 3, 10)
    matrix.add(1, 2, 0)
    truth = covisit_truth(matrix, [0, 1, 4], size=2)
    assert truth == {0: {1, 2}}
    assert all(matrix.get(u, v) > 0 for u, members in truth.items() for v in members)


def test_covisit_truth_ties_by_partner_id():
    matrix = CovisitMatrix()
    for v in (8, 6, 7):
        matrix.add(5, v, 20)
    assert covisit_truth(matrix, [5], size=2) == {5: {6, 7}}


def test_mrr_rejects_short_or_absent_truth():
    suggestions = {0: rank(np.arange(4, 0, -1.0), exclude=0)}
    with pytest.raises(ValidationError, match="expected 3"):
        mrr(suggestions, {0: {1, 2}}, [0], size=3)
    with pytest.raises(ValidationError, match="no truth set"):
        mrr(suggestions, {}, [0], size=None)


def test_mrr_ignores_user_and_member_order():
    rng = make_rng(3)
    suggestions = {u: rank(rng.random(6), exclude=u) for u in range(4)}
    truth = {u: [v for v in range(6) if v != u][:2] for u in range(4)}
    reordered = {u: set(reversed(members)) for u, members in truth.items()}
    forward = mrr(suggestions, {u: set(m) for u, m in truth.items()}, [0, 1, 2, 3], size=2)
    assert mrr(suggestions, reordered, [3, 1, 0, 2], size=2) == pytest.approx(forward, abs=1e-12)


def _random_split(seed, n_pois=6):
    rng = make_rng(seed)
    records = [
        CheckIn(f"u{rng.integers(0, 4)}", START + timedelta(hours=int(rng.integers(0, 336))), f"b{rng.integers(0, n_pois)}")
        for _ in range(80)
    ]
    return split_chrono(_dataset(records, n_pois))


@pytest.mark.parametrize("seed", range(5))
def test_accuracy_grows_with_k(seed):
    split = _random_split(seed)
    ks = (1, 2, 3, 6)
    for predictor in (PopularityPredictor(split.train), NbcPredictor(nbc_fit(split.train))):
        report = accuracy_at_k(predictor, split, ks)
        for bucket in ("visited", "unvisited", "total"):
            values = [report.accuracy(bucket, k) for k in ks]
            assert values == sorted(values)
        assert report.accuracy("total", 6) == 1.0


@pytest.mark.parametrize("seed", range(5))
def test_nbc_ignores_record_order(seed):
    data = _random_split(seed).train
    rng = make_rng(seed + 100)
    shuffled = Dataset(tuple(data.checkins[i] for i in rng.permutation(len(data))), data.venues, data.users)
    model, other = nbc_fit(data), nbc_fit(shuffled)
    for u in range(len(data.user_ids)):
        for t in range(28):
            a, b = nbc_predict(model, u, t, 6), nbc_predict(other, u, t, 6)
            assert a.indices.tolist() == b.indices.tolist()
            assert a.scores.tolist() == b.scores.tolist()
