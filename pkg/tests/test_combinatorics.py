import math
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from routeflow.combinatorics import (
    DestructionSequence,
    count_closed,
    count_recurrence,
    enumerate_destructions,
    format_verification_table,
    synthetic_decomposition,
    verify_statements,
)
from routeflow.errors import CapacityError, ParameterError


class TestCounts:
    def test_base_case(self):
        assert count_recurrence(0, 0) == 1
        assert count_closed(0, 0) == 1

    def test_singles_only_factorial(self):
        for j in range(7):
            assert count_recurrence(0, j) == math.factorial(j)

    def test_multis_only(self):
        for a in range(7):
            assert count_recurrence(a, 0) == (2 ** a) * math.factorial(a)

    def test_one_step_from_bases(self):
        assert count_recurrence(1, 1) == 4

    def test_closed_form_anchor(self):
        assert count_closed(2, 1) == 24

    @given(st.integers(0, 6), st.integers(0, 6))
    @settings(max_examples=49)
    def test_recurrence_equals_closed_form(self, a, j):
        assert count_recurrence(a, j) == count_closed(a, j)

    @given(st.integers(0, 6), st.integers(0, 6))
    @settings(max_examples=49)
    def test_normalized_count_is_binomial(self, a, j):
        b = count_recurrence(a, j)
        assert b % ((2 ** a) * math.factorial(a) * math.factorial(j)) == 0
        assert b // ((2 ** a) * math.factorial(a) * math.factorial(j)) == math.comb(a + j, a)

    def test_negative_rejected(self):
        with pytest.raises(ParameterError):
            count_closed(-1, 0)


class TestEnumeration:
    def test_one_multi_one_single(self):
        seqs = enumerate_destructions(synthetic_decomposition(1, 1))
        assert len(seqs) == 4 == count_closed(1, 1)
        probs = sorted(s.probability for s in seqs)
        assert probs == [Fraction(1, 6), Fraction(1, 6), Fraction(1, 3), Fraction(1, 3)]
        assert sum(probs) == 1

    def test_two_singles(self):
        seqs = enumerate_destructions(synthetic_decomposition(0, 2))
        assert len(seqs) == 2
        assert all(s.probability == Fraction(1, 2) for s in seqs)

    def test_empty_decomposition(self):
        seqs = enumerate_destructions(synthetic_decomposition(0, 0))
        assert len(seqs) == 1
        assert seqs[0].steps == ()
        assert seqs[0].probability == 1

    def test_single_node_segments_destroy_forward_only(self):
        for seq in enumerate_destructions(synthetic_decomposition(1, 2)):
            decomp = synthetic_decomposition(1, 2)
            for seg, direction in seq.steps:
                if len(decomp.segments[seg]) == 1:
                    assert direction == "forward"

    def test_each_segment_destroyed_exactly_once(self):
        for seq in enumerate_destructions(synthetic_decomposition(2, 1)):
            assert sorted(seg for seg, _ in seq.steps) == [0, 1, 2]

    @given(st.integers(0, 3), st.integers(0, 3))
    @settings(max_examples=16, deadline=None)
    def test_enumeration_matches_counts_and_normalizes(self, a, j):
        seqs = enumerate_destructions(synthetic_decomposition(a, j))
        assert len(seqs) == count_closed(a, j)
        assert sum((s.probability for s in seqs), Fraction(0)) == 1

    def test_size_guard(self):
        with pytest.raises(CapacityError):
            enumerate_destructions(synthetic_decomposition(4, 4))


class TestVerifyStatements:
    def test_range_3_3_all_agree(self):
        rows = verify_statements(3, 3)
        assert len(rows) == 16
        assert all(r.counts_agree for r in rows)
        assert all(r.prob_sum_is_one for r in rows)

    def test_discrepancy_flagged_for_1_1(self):
        rows = {(r.a, r.j): r for r in verify_statements(1, 1)}
        row = rows[(1, 1)]
        assert row.min_prob == Fraction(1, 6)
        assert row.uniform_prob == Fraction(1, 4)
        assert not row.stepwise_matches_uniform

    def test_degenerate_rows_match_uniform(self):
        rows = {(r.a, r.j): r for r in verify_statements(1, 1)}
        assert rows[(0, 0)].stepwise_matches_uniform
        assert rows[(0, 1)].stepwise_matches_uniform
        assert rows[(1, 0)].stepwise_matches_uniform

    def test_guard(self):
        with pytest.raises(CapacityError):
            verify_statements(4, 4)

    def test_table_formatting(self):
        text = format_verification_table(verify_statements(1, 1))
        assert "prob_sum" in text.splitlines()[0]
        assert len(text.splitlines()) == 2 + 4
