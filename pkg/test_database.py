#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Tests de l'historique SQLite des simulations
"""
import sys
import io

# Fix encoding for Windows console
if sys.platform == 'win32':
    sys.stdout = io.TextIOWrapper(sys.stdout.buffer, encoding='utf-8', errors='replace')

import pytest

from app import database
from app.core import make_params
from app.miner import MinerConfig
from app.netsim import SimConfig, run


@pytest.fixture
def db(tmp_path, monkeypatch):
    monkeypatch.setattr(database, 'DB_PATH', tmp_path / 'history' / 'runs.db')
    return database


def _trace(seed: int, duration: int = 3000):
    miners = [MinerConfig(0, 0.01), MinerConfig(1, 0.01)]
    return run(SimConfig(params=make_params(1, 0), miners=miners, duration=duration, seed=seed,
                         payload_size=8, record_arrivals=False))


def test_save_and_read_run(db):
    trace = _trace(1)
    assert db.save_run('run-a', trace)

    runs = db.get_runs()
    assert len(runs) == 1
    assert runs[0]['run_id'] == 'run-a'
    assert runs[0]['strand_count'] == 2
    assert runs[0]['best_path_blocks'] == sum(trace.final_heights)
    assert runs[0]['seed'] == '1'

    details = db.get_run_details('run-a')
    assert details['config'] == trace.config
    assert details['summary']['final_heights'] == trace.final_heights
    assert [s['height'] for s in details['strands']] == trace.final_heights
    assert db.get_run_details('missing') is None


def test_compare_runs(db):
    db.save_run('short', _trace(1, duration=2000))
    db.save_run('long', _trace(1, duration=6000))

    comparison = db.compare_runs('long', 'short')
    assert comparison['same_strand_count']
    delta = comparison['global_delta']['best_path_blocks']
    assert delta['delta'] == delta['current'] - delta['previous']
    assert delta['current'] > delta['previous']
    assert len(comparison['strand_changes']) == 2

    assert 'error' in db.compare_runs('long', 'nope')


def test_cleanup_keeps_latest_runs(db, monkeypatch):
    monkeypatch.setattr(database, 'MAX_RUNS', 2)
    trace = _trace(2)
    for name in ('first', 'second', 'third'):
        assert db.save_run(name, trace)

    ids = [r['run_id'] for r in db.get_runs()]
    assert len(ids) == 2
    assert 'first' not in ids


def test_percent_change():
    assert database.calc_percent_change(0, 0) == 0.0
    assert database.calc_percent_change(0, 5) == 100.0
    assert database.calc_percent_change(10, 15) == 50.0


if __name__ == '__main__':
    sys.exit(pytest.main([__file__, '-v']))
