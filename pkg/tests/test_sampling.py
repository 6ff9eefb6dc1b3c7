from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fuselab.config import SLOTS, Slot
from fuselab.sampling import (Combination, CombinationError, combination_from_id, enumerate_combinations,
                              mask_modalities, sample_combination)

FULL = combination_from_id(31)


class TestEnumerate:
    def test_five_slots(self):
        combos = enumerate_combinations(SLOTS)
        assert len(combos) == 31
        assert [c.id for c in combos] == list(range(1, 32))

    def test_one_slot(self):
        assert len(enumerate_combinations(SLOTS[:1])) == 1

    def test_powerset_oracle(self):
        avail = SLOTS[:3]
        ours = {frozenset(c.members) for c in enumerate_combinations(avail)}
        ref = {frozenset(s) for r in range(1, 4) for s in itertools.combinations(avail, r)}
        assert ours == ref

    def test_bitmask_ids(self):
        c = combination_from_id(0b10101)
        assert c.members == (Slot("image", 1), Slot("depth", 1), Slot("radar", 1))
        assert c.label == "img1+dep1+radar"

    @pytest.mark.parametrize("cid", [0, 32, -1])
    def test_out_of_range(self, cid):
        with pytest.raises(CombinationError):
            combination_from_id(cid)

    def test_empty_and_duplicate_members(self):
        with pytest.raises(CombinationError):
            Combination((), 0)
        with pytest.raises(CombinationError):
            Combination((SLOTS[0], SLOTS[0]), 1)

    def test_duplicate_available_slots(self):
        with pytest.raises(CombinationError):
            enumerate_combinations([SLOTS[0], SLOTS[0]])

    def test_select_keeps_input_order(self, sample):
        picked = combination_from_id(0b10010).select(sample.inputs)
        assert [(i.kind, i.view) for i in picked] == [("image", 2), ("radar", 1)]


class TestSample:
    def test_single_combo(self, rng):
        c = combination_from_id(5)
        assert all(sample_combination(rng, [c]) is c for _ in range(20))

    def test_uniform_frequencies(self):
        combos = enumerate_combinations()
        rng = np.random.default_rng(0)
        counts = np.zeros(32, int)
        for _ in range(31000):
            counts[sample_combination(rng, combos).id] += 1
        assert np.all(np.abs(counts[1:] - 1000) <= 150)

    def test_deterministic(self):
        combos = enumerate_combinations()

        def draws():
            g = np.random.default_rng(9)
            return [sample_combination(g, combos).id for _ in range(50)]
        assert draws() == draws()
        assert len(set(draws())) > 1

    def test_empty(self, rng):
        with pytest.raises(CombinationError):
            sample_combination(rng, [])


class TestMask:
    def test_zero_proportion(self, rng):
        assert mask_modalities(FULL, 0.0, rng) is FULL

    @pytest.mark.parametrize("cid", [1, 2, 4, 8, 16])
    def test_single_member_exempt(self, cid):
        c = combination_from_id(cid)
        rng = np.random.default_rng(0)
        assert all(mask_modalities(c, 0.9, rng) is c for _ in range(50))

    def test_drop_rate(self):
        rng, twin = np.random.default_rng(0), np.random.default_rng(0)
        dropped = np.zeros(5)
        trials = 0
        for _ in range(100_000):
            out = mask_modalities(FULL, 0.3, rng)
            # the twin replays the Bernoulli draws to single out total drops, which return FULL
            if (twin.random(5) < 0.3).all():
                assert out is FULL
                continue
            trials += 1
            dropped += [s not in out for s in FULL.members]
        np.testing.assert_allclose(dropped / trials, 0.3, atol=0.01)

    @given(st.integers(1, 31), st.floats(0.0, 0.99), st.integers(0, 10_000))
    @settings(max_examples=200, deadline=None)
    def test_never_empty_and_subset(self, cid, p, seed):
        c = combination_from_id(cid)
        out = mask_modalities(c, p, np.random.default_rng(seed))
        assert 1 <= len(out) <= len(c)
        assert set(out.members) <= set(c.members)
        assert out.id & ~c.id == 0

    @pytest.mark.parametrize("p", [-0.1, 1.0, 1.5])
    def test_bad_proportion(self, p, rng):
        with pytest.raises(CombinationError):
            mask_modalities(FULL, p, rng)
