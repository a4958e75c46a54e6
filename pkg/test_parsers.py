#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Tests des parsers : configuration YAML et traces JSON
"""
import sys
import io

# Fix encoding for Windows console
if sys.platform == 'win32':
    sys.stdout = io.TextIOWrapper(sys.stdout.buffer, encoding='utf-8', errors='replace')

import json
import textwrap

import pytest

from app.core import make_params
from app.miner import MinerConfig, PolicyKind
from app.netsim import SimConfig, run, trace_lines, write_trace
from app.parsers import (
    ConfigError, SimConfigParser, TraceFormatError, TraceParser, build_policy, parse_trace_lines,
)

CONFIG_YAML = """
params:
  strand_exponent_p: 2
  difficulty_bits: 3
miners:
  - hash_rate: 0.01
    count: 3
  - miner_id: 10
    hash_rate: 0.02
    policy: {kind: targeted, target: 1}
  - hash_rate: 0.01
    policy: equivocator
latency_model: {kind: uniform, lo: 1, hi: 4}
duration: 5000
seed: 42
"""


def _write(tmp_path, text, name='sim.yaml'):
    path = tmp_path / name
    path.write_text(textwrap.dedent(text), encoding='utf-8')
    return path


@pytest.fixture(scope='module')
def trace():
    miners = [MinerConfig(0, 0.01), MinerConfig(1, 0.01)]
    return run(SimConfig(params=make_params(1, 0), miners=miners, duration=3000, payload_size=8))


def test_parse_sim_config(tmp_path):
    config = SimConfigParser(_write(tmp_path, CONFIG_YAML)).parse()
    assert config.params.strand_count_n == 4
    assert config.params.difficulty_bits == 3
    assert [m.miner_id for m in config.miners] == [0, 1, 2, 10, 11]
    assert config.miners[3].policy.kind == PolicyKind.TARGETED
    assert config.miners[3].policy.target == 1
    assert config.miners[4].policy.kind == PolicyKind.EQUIVOCATOR
    assert config.miners[4].policy.copies == 2
    assert config.latency_model.max_delay == 4
    assert config.seed == 42
    # Valeurs par défaut
    assert config.mode == 'analytic'
    assert config.payload_size == 64


def test_defaults_fill_missing_sections(tmp_path):
    parser = SimConfigParser(_write(tmp_path, "miners:\n  - hash_rate: 1\n"))
    config = parser.parse()
    assert config.params == make_params(1, 8)
    assert config.latency_model.kind == 'zero'
    assert config.duration == 1_000_000
    assert SimConfigParser(_write(tmp_path, "", 'empty.yaml')).get_params() == make_params(1, 8)


@pytest.mark.parametrize('text', [
    "miners:\n  - hash_rate: 1\nlatency: 5\n",
    "params: {strand_exponent_p: 1, difficulty: 3}\nminers:\n  - hash_rate: 1\n",
    "miners:\n  - hash_rate: 1\n    policy: {kind: targeted, copies: 3}\n",
    "miners:\n  - hash_rate: 1\n    policy: selfish\n",
    "miners: []\n",
    "duration: 10\n",
    "miners:\n  - hash_rate: 0\n",
    "miners:\n  - hash_rate: 1\n    count: 0\n",
    "miners: [unclosed\n",
    "- just\n- a list\n",
    "params: {strand_exponent_p: 1, difficulty_bits: 3, hash_algo_id: md5}\nminers:\n  - hash_rate: 1\n",
])
def test_invalid_configs(tmp_path, text):
    with pytest.raises(ConfigError):
        SimConfigParser(_write(tmp_path, text)).parse()


def test_missing_config_file(tmp_path):
    with pytest.raises(OSError):
        SimConfigParser(tmp_path / 'absent.yaml').parse()


def test_build_policy_forms():
    assert build_policy(None).kind == PolicyKind.HONEST
    assert build_policy('hoarder').kind == PolicyKind.HOARDER
    policy = build_policy({'kind': 'private_forker', 'target': 2, 'withhold_depth': 3})
    assert (policy.target, policy.withhold_depth) == (2, 3)


def test_trace_round_trip(tmp_path, trace):
    path = write_trace(trace, tmp_path / 'trace.jsonl')
    parsed = TraceParser(path).parse()
    assert parsed.final_heights == trace.final_heights
    assert parsed.stored_counts == trace.stored_counts
    assert parsed.config == trace.config
    assert len(parsed.events) == len(trace.events)
    assert list(trace_lines(parsed)) == list(trace_lines(trace))

    frame = TraceParser(path).get_frame()
    assert len(frame) == len(trace.events)
    assert {'time', 'kind', 'strand', 'ticket_hash'} <= set(frame.columns)


def test_malformed_traces(trace):
    lines = list(trace_lines(trace))

    with pytest.raises(TraceFormatError):
        parse_trace_lines([])
    with pytest.raises(TraceFormatError):
        parse_trace_lines(lines[:-1] + ['{not json'])
    with pytest.raises(TraceFormatError):
        parse_trace_lines(lines[:-1])

    unknown = json.loads(lines[0])
    unknown['kind'] = 'gossip'
    with pytest.raises(TraceFormatError):
        parse_trace_lines([json.dumps(unknown)] + lines[1:])

    missing = json.loads(lines[0])
    del missing['strand']
    with pytest.raises(TraceFormatError):
        parse_trace_lines([json.dumps(missing)] + lines[1:])

    summary = json.loads(lines[-1])
    del summary['final_heights']
    with pytest.raises(TraceFormatError):
        parse_trace_lines(lines[:-1] + [json.dumps(summary)])


def test_unsorted_trace(trace):
    lines = list(trace_lines(trace))
    events = lines[:-1]
    assert json.loads(events[0])['time'] < json.loads(events[-1])['time']
    with pytest.raises(TraceFormatError):
        parse_trace_lines([events[-1]] + events[:-1] + [lines[-1]])


def _first_line_of(lines, kind):
    return next(i for i, line in enumerate(lines) if json.loads(line)['kind'] == kind)


@pytest.mark.parametrize('kind, strand', [
    ('ticket_found', 7),
    ('ticket_found', -1),
    ('ticket_found', '0'),
    ('ticket_found', None),
    ('block_published', 2),
])
def test_strand_out_of_range(trace, kind, strand):
    lines = list(trace_lines(trace))
    index = _first_line_of(lines, kind)
    record = json.loads(lines[index])
    record['strand'] = strand
    lines[index] = json.dumps(record)
    with pytest.raises(TraceFormatError):
        parse_trace_lines(lines)


@pytest.mark.parametrize('mutate', [
    lambda s: s['config'].pop('duration'),
    lambda s: s['config'].pop('miners'),
    lambda s: s['config'].update(miners=[{'miner_id': 0}]),
    lambda s: s['config'].update(duration='long'),
    lambda s: s['config']['params'].pop('strand_exponent_p'),
    lambda s: s.update(final_heights=[1]),
    lambda s: s.update(stored_counts=[0, -1]),
])
def test_incomplete_summary(trace, mutate):
    lines = list(trace_lines(trace))
    summary = json.loads(lines[-1])
    mutate(summary)
    with pytest.raises(TraceFormatError):
        parse_trace_lines(lines[:-1] + [json.dumps(summary)])


if __name__ == '__main__':
    sys.exit(pytest.main([__file__, '-v']))
