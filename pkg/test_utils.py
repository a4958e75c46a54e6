#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Tests des utilitaires : sous-flux aléatoires, graines, tableaux de rapport
"""
import sys
import io

# Fix encoding for Windows console
if sys.platform == 'win32':
    sys.stdout = io.TextIOWrapper(sys.stdout.buffer, encoding='utf-8', errors='replace')

import pytest

from app.utils import (
    SEED_MAX, STREAM_CATCHUP, STREAM_LATENCY, check_seed, derive_rng, format_heights, records_to_frame,
)


def test_derived_streams_are_reproducible_and_independent():
    assert derive_rng(7, 3).integers(0, 2 ** 32, 5).tolist() == derive_rng(7, 3).integers(0, 2 ** 32, 5).tolist()
    assert derive_rng(7, 3).integers(0, 2 ** 32, 5).tolist() != derive_rng(7, 4).integers(0, 2 ** 32, 5).tolist()
    assert derive_rng(7, 3).random() != derive_rng(7, 3, 1).random()
    # Les flux réservés ne croisent jamais un identifiant de mineur
    assert min(STREAM_LATENCY, STREAM_CATCHUP) >= 2 ** 32


@pytest.mark.parametrize('seed', [-1, SEED_MAX + 1])
def test_check_seed_rejects_out_of_range(seed):
    with pytest.raises(ValueError):
        check_seed(seed)


def test_check_seed_accepts_bounds():
    assert check_seed(0) == 0
    assert check_seed(SEED_MAX) == SEED_MAX


def test_records_to_frame_keeps_columns():
    empty = records_to_frame([], ['a', 'b'])
    assert list(empty.columns) == ['a', 'b']
    assert len(empty) == 0

    frame = records_to_frame([{'b': 2, 'a': 1, 'c': 3}], ['a', 'b'])
    assert list(frame.columns) == ['a', 'b']
    assert frame.iloc[0].tolist() == [1, 2]


def test_format_heights():
    assert format_heights([3, 0]) == '[0]=3 [1]=0'
    assert format_heights([]) == ''


if __name__ == '__main__':
    sys.exit(pytest.main([__file__, '-v']))
