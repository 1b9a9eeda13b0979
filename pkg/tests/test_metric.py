import pytest
from hypothesis import given, strategies as st

from conftest import make_catalog, make_session
from oracles import naive_metric_score
from qslate.errors import DataError, FitError
from qslate.ingest import SyntheticConfig, generate_synthetic, sessions_to_transitions
from qslate.metric import (
    GridCellResult,
    MetricConfig,
    ScoreReport,
    expand_grid,
    holdout_split,
    score,
    select_best,
    tune,
)
from qslate.pipeline import PipelineParams


class TestScore:
    def test_direct_substitution_example(self):
        # One session: purchases worth 5 at step 1 and 4 at step 2 among our
        # recommendations, nothing at step 3 -> (1*5 + 2*4) / 1 = 13.
        catalog = make_catalog(prices={1: 5.0, 2: 1.0, 3: 1.0, 4: 4.0, 5: 1.0,
                                       6: 1.0, 7: 2.0, 8: 2.0, 9: 2.0})
        session = make_session([1, 0, 0, 1, 0, 0, 0, 0, 0])
        rec = [1, 2, 3, 4, 5, 6, 7, 8, 9]
        # exclude the step-3 purchased region: labels above purchase nothing at 3
        report = score([rec], [session], catalog, MetricConfig((1.0, 2.0, 3.0)))
        assert report.score == 13.0
        assert report.per_step_value == (5.0, 4.0, 0.0)
        assert report.n_sessions == 1

    def test_disjoint_recommendations_score_zero(self, catalog9):
        session = make_session([1] * 9, slate=(1, 2, 3, 4, 5, 6, 7, 8, 9))
        rec = [3, 2, 1, 6, 5, 4, 9, 8, 7]  # same items, so instead use none purchased
        session_none = make_session([0] * 9)
        assert score([rec], [session_none], catalog9).score == 0.0

    def test_misplaced_location_scores_zero(self, catalog9):
        session = make_session([1] * 9)
        # item 1 (location 1) claimed at step 2: must contribute nothing there
        rec = ((2, 3), (1, 4), (7, 8, 9))
        report = score([rec], [session], catalog9, MetricConfig((1.0, 1.0, 1.0)))
        assert report.per_step_value[1] == 4.0  # item 1 ignored, item 4 counted

    def test_identity_matching_ignores_position_within_row(self, catalog9):
        session = make_session([1, 0, 0, 0, 0, 0, 0, 0, 0])
        rec = [3, 2, 1, 4, 5, 6, 7, 8, 9]  # purchased item 1 in a different slot
        assert score([rec], [session], catalog9, MetricConfig((1.0, 0.1, 0.1))).score == 1.0

    def test_duplicate_recommended_items_count_once(self, catalog9):
        session = make_session([1] * 9)
        rec = ((1, 1, 1), (), ())
        report = score([rec], [session], catalog9, MetricConfig((1.0, 1.0, 1.0)))
        assert report.per_step_value[0] == 1.0

    def test_matches_naive_oracle_exactly_on_synthetic_corpus(self):
        corpus = generate_synthetic(
            SyntheticConfig(num_items=30, num_users=120, num_sessions=1000, seed=61,
                            preference_scale=2.0, base_appeal=0.4)
        )
        rng_rec = [s.exposed_slate for s in corpus.sessions[::-1]]  # arbitrary policy
        weights = (1.0, 2.0, 3.0)
        report = score(rng_rec, corpus.sessions, corpus.catalog, MetricConfig(weights))
        oracle_total, oracle_steps = naive_metric_score(
            rng_rec, corpus.sessions, corpus.catalog, weights
        )
        assert report.score == oracle_total
        assert report.per_step_value == oracle_steps

    def test_logged_policy_equals_weighted_transition_revenue(self):
        corpus = generate_synthetic(
            SyntheticConfig(num_items=30, num_users=120, num_sessions=1000, seed=62,
                            preference_scale=2.0, base_appeal=0.4)
        )
        weights = (1.0, 2.0, 3.0)
        logged = [s.exposed_slate for s in corpus.sessions]
        report = score(logged, corpus.sessions, corpus.catalog, MetricConfig(weights))
        transitions = sessions_to_transitions(corpus.sessions, corpus.catalog)
        expected = sum(weights[t.step - 1] * t.reward for t in transitions) / len(corpus.sessions)
        assert report.score == expected

    def test_breakdown_sums_to_score(self, catalog9):
        sessions = [make_session([1] * 9), make_session([0] * 9)]
        recs = [s.exposed_slate for s in sessions]
        report = score(recs, sessions, catalog9, keep_breakdown=True)
        assert len(report.per_session) == 2
        assert sum(report.per_session) / 2 == report.score

    def test_errors(self, catalog9):
        session = make_session([1] * 9)
        with pytest.raises(DataError, match="zero sessions"):
            score([], [], catalog9)
        with pytest.raises(DataError, match="recommendations"):
            score([], [session], catalog9)
        with pytest.raises(DataError, match="missing recommendation"):
            score([None], [session], catalog9)
        with pytest.raises(DataError, match="9 items"):
            score([[1, 2, 3]], [session], catalog9)
        with pytest.raises(DataError):
            score([session.exposed_slate], [session], catalog9, MetricConfig((1.0, 1.0)))
        with pytest.raises(DataError):
            score([session.exposed_slate], [session], catalog9, MetricConfig((0.0, 0.0, 0.0)))

    @given(c=st.sampled_from([0.25, 0.5, 2.0, 4.0, 8.0]))
    def test_scale_linearity(self, c):
        catalog = make_catalog()
        sessions = [make_session([1, 0, 1, 1, 1, 1, 0, 1, 1]), make_session([1] * 9)]
        recs = [s.exposed_slate for s in sessions]
        base = score(recs, sessions, catalog, MetricConfig((1.0, 2.0, 3.0)))
        scaled = score(recs, sessions, catalog, MetricConfig((c, 2.0 * c, 3.0 * c)))
        assert scaled.score == c * base.score  # dyadic scale: exact

    @given(
        labels=st.tuples(*[st.booleans()] * 9),
        extra=st.integers(min_value=1, max_value=9),
    )
    def test_adding_purchased_valid_item_never_decreases(self, labels, extra):
        catalog = make_catalog()
        session = make_session(labels)
        base_rec = ((1, 2), (4, 6), (8,))
        loc = catalog.location(extra)
        enlarged = tuple(
            tuple(part) + ((extra,) if loc == st_i else ())
            for st_i, part in enumerate(base_rec, 1)
        )
        cfg = MetricConfig((1.0, 2.0, 3.0))
        before = score([base_rec], [session], catalog, cfg).score
        after = score([enlarged], [session], catalog, cfg).score
        assert after >= before


class TestHoldoutSplit:
    def test_sizes(self):
        sessions = [make_session([0] * 9, user_id=u) for u in range(10)]
        train, val = holdout_split(sessions, 0.8, seed=0)
        assert len(train) == 8 and len(val) == 2

    def test_deterministic_and_seed_sensitive(self):
        sessions = [make_session([0] * 9, user_id=u) for u in range(40)]
        a1 = holdout_split(sessions, 0.8, seed=3)
        a2 = holdout_split(sessions, 0.8, seed=3)
        b = holdout_split(sessions, 0.8, seed=4)
        assert a1 == a2
        assert [s.user_id for s in a1[0]] != [s.user_id for s in b[0]]
        assert len(b[0]) == len(a1[0])

    @given(n=st.integers(min_value=2, max_value=60), seed=st.integers(0, 100))
    def test_union_is_the_input_multiset(self, n, seed):
        sessions = [make_session([0] * 9, user_id=u % 7) for u in range(n)]
        train, val = holdout_split(sessions, 0.8, seed=seed)
        assert len(train) + len(val) == n
        assert len(train) >= 1 and len(val) >= 1
        assert sorted(id(s) for s in train + val) == sorted(id(s) for s in sessions)

    def test_too_few_sessions(self):
        with pytest.raises(DataError, match="2 sessions"):
            holdout_split([make_session([0] * 9)], 0.5, seed=0)

    def test_bad_fraction(self):
        sessions = [make_session([0] * 9) for _ in range(4)]
        for frac in (0.0, 1.0, -0.2, 1.4):
            with pytest.raises(DataError):
                holdout_split(sessions, frac, seed=0)


class TestGrid:
    def test_expand_cartesian_in_key_order(self):
        grid = {"k_features": [4, 8], "alpha": [0.1, 0.5]}
        cells = expand_grid(grid)
        assert cells == [
            {"k_features": 4, "alpha": 0.1},
            {"k_features": 4, "alpha": 0.5},
            {"k_features": 8, "alpha": 0.1},
            {"k_features": 8, "alpha": 0.5},
        ]

    def test_rejects_unknown_key_and_empty(self):
        with pytest.raises(DataError, match="unknown grid key"):
            expand_grid({"learning_rate": [0.1]})
        with pytest.raises(DataError, match="empty"):
            expand_grid({})
        with pytest.raises(DataError, match="nonempty list"):
            expand_grid({"alpha": []})

    def test_select_best_tie_breaks(self):
        def cell(i, sc, k_features, n_clusters):
            return GridCellResult(
                index=i,
                params={"k_features": k_features},
                report=ScoreReport(score=sc, per_step_value=(0, 0, 0), n_sessions=1),
                n_clusters=n_clusters,
            )

        cells = [
            cell(0, 10.0, 16, 4),
            cell(1, 10.0, 8, 6),   # same score, fewer features -> wins
            cell(2, 10.0, 8, 3),   # same score + features, fewer clusters -> wins
            GridCellResult(index=3, params={"k_features": 2}, error="collapsed"),
        ]
        assert select_best(cells) == 2

    def test_select_best_all_failed(self):
        cells = [GridCellResult(index=0, params={}, error="boom")]
        with pytest.raises(FitError, match="every grid cell failed"):
            select_best(cells)


@pytest.fixture(scope="module")
def small_corpus():
    return generate_synthetic(
        SyntheticConfig(num_items=18, num_users=150, num_sessions=1200, seed=71,
                        preference_scale=3.0, price_range=(3, 5), base_appeal=0.5)
    )


class TestTune:
    def base(self, seed=0):
        return PipelineParams(
            k_features=6, l1_penalty=0.1, cluster={"method": "kmeans", "k": 4},
            min_cluster_support=50, epochs=5, min_visits=10, gamma=0.95,
            seed=seed, deterministic=True,
        )

    def test_singleton_grid_returns_that_cell(self, small_corpus):
        result = tune(
            {"alpha": [0.2]}, small_corpus.sessions, small_corpus.catalog,
            base_params=self.base(),
        )
        assert result.best_index == 0
        assert result.best.params == {"alpha": 0.2}
        assert result.best.report is not None
        assert result.best.report.score >= 0.0
        assert result.train_size + result.validation_size == 1200

    def test_collapsing_cell_reported_failed_not_selected(self, small_corpus):
        result = tune(
            {"l1_penalty": [0.1, 1.0]}, small_corpus.sessions, small_corpus.catalog,
            base_params=self.base(),
        )
        good, bad = result.cells
        assert bad.error is not None and "too large" in bad.error
        assert bad.report is None
        assert result.best_index == good.index == 0

    def test_planted_group_count_selected(self):
        # 4 planted groups; the winning cluster count must be 4 in >= 8 of 10
        # seeded repetitions of the generate -> tune experiment.
        grid = {
            "cluster": [
                {"method": "kmeans", "k": 2},
                {"method": "kmeans", "k": 4},
                {"method": "kmeans", "k": 8},
            ]
        }
        wins = 0
        for rep in range(10):
            corpus = generate_synthetic(
                SyntheticConfig(num_items=30, num_users=400, num_sessions=3000,
                                seed=100 + rep, preference_scale=3.0,
                                price_range=(3, 5), base_appeal=0.4, num_groups=4)
            )
            base = PipelineParams(
                k_features=8, l1_penalty=0.1, min_cluster_support=500,
                epochs=10, min_visits=20, gamma=0.95, seed=rep, deterministic=True,
            )
            result = tune(grid, corpus.sessions, corpus.catalog,
                          train_fraction=0.7, seed=rep, base_params=base)
            wins += result.best.params["cluster"]["k"] == 4
        assert wins >= 8
