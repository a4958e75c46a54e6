#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Tests de l'interface en ligne de commande (codes de sortie et fichiers produits)
"""
import sys
import io

# Fix encoding for Windows console
if sys.platform == 'win32':
    sys.stdout = io.TextIOWrapper(sys.stdout.buffer, encoding='utf-8', errors='replace')

import json
from dataclasses import replace

import pytest

from app import database
from app.cli import main
from app.core import Hash256, keygen, serialize_block
from app.ledger import import_ledger
from app.miner import PayloadSource, RealHashTickets, build_block, honest_step
from app.pow import TicketScanner, judge_ticket
from app.utils import derive_rng

SIM_YAML = """\
params: {strand_exponent_p: 1, difficulty_bits: 0}
miners:
  - hash_rate: 0.01
    count: 2
duration: 3000
payload_size: 8
seed: 1
"""

BASELINE_YAML = """\
params: {strand_exponent_p: 0, difficulty_bits: 1}
miners:
  - hash_rate: 0.01
    count: 2
duration: 3000
payload_size: 8
"""


@pytest.fixture
def sim_config(tmp_path):
    path = tmp_path / 'sim.yaml'
    path.write_text(SIM_YAML, encoding='utf-8')
    return path


@pytest.fixture
def trace_file(tmp_path, sim_config):
    out = tmp_path / 'trace.jsonl'
    assert main(['simulate', '--config', str(sim_config), '--out', str(out)]) == 0
    return out


@pytest.fixture
def demo_ledger(tmp_path):
    out = tmp_path / 'ledger.bin'
    assert main(['mine-demo', '--count', '2', '--out', str(out)]) == 0
    return out


def test_mine_demo(capsys, demo_ledger):
    output = capsys.readouterr().out
    assert 'ticket 2:' in output
    assert import_ledger(demo_ledger.read_bytes()).heights() in ([2, 0], [1, 1], [0, 2])


@pytest.mark.parametrize('text, code', [
    ("params: {difficulty_bits: 21}\n", 2),
    ("params: [unclosed\n", 2),
    ("params: {hash_algo_id: md5}\n", 2),
])
def test_mine_demo_config_errors(tmp_path, capsys, text, code):
    path = tmp_path / 'demo.yaml'
    path.write_text(text, encoding='utf-8')
    assert main(['mine-demo', '--config', str(path)]) == code
    assert 'Erreur (mine-demo)' in capsys.readouterr().err


def test_mine_demo_missing_file(tmp_path):
    assert main(['mine-demo', '--config', str(tmp_path / 'absent.yaml')]) == 3


def test_simulate_is_deterministic(tmp_path, sim_config, trace_file):
    again = tmp_path / 'again.jsonl'
    other = tmp_path / 'other.jsonl'
    assert main(['simulate', '--config', str(sim_config), '--out', str(again)]) == 0
    assert main(['simulate', '--config', str(sim_config), '--out', str(other), '--seed', '5']) == 0
    assert again.read_bytes() == trace_file.read_bytes()
    assert other.read_bytes() != trace_file.read_bytes()
    assert main(['replay', '--trace', str(trace_file)]) == 0


def test_simulate_rejects_bad_config(tmp_path):
    path = tmp_path / 'bad.yaml'
    path.write_text("miners: []\n", encoding='utf-8')
    assert main(['simulate', '--config', str(path), '--out', str(tmp_path / 'x.jsonl')]) == 2


def test_analyze_reports(tmp_path, capsys, trace_file):
    baseline_yaml = tmp_path / 'baseline.yaml'
    baseline_yaml.write_text(BASELINE_YAML, encoding='utf-8')
    baseline = tmp_path / 'baseline.jsonl'
    assert main(['simulate', '--config', str(baseline_yaml), '--out', str(baseline)]) == 0
    capsys.readouterr()

    assert main(['analyze', '--trace', str(trace_file), '--baseline', str(baseline),
                 '--report', 'throughput']) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == 'strand,rate,total_rate,baseline_rate,scaling_factor'
    assert len(lines) == 3

    report = tmp_path / 'summary.jsonl'
    assert main(['analyze', '--trace', str(trace_file), '--format', 'jsonl', '--out', str(report)]) == 0
    assert '"metric":"scaling_factor"' in report.read_text(encoding='utf-8')

    for name in ('orphans', 'targeting'):
        assert main(['analyze', '--trace', str(trace_file), '--report', name]) == 0
    # Pas de --trace pour un rapport qui en a besoin
    assert main(['analyze', '--report', 'orphans']) == 2


def test_analyze_catchup(capsys):
    assert main(['analyze', '--report', 'catchup', '--q', '0.3', '--z', '1', '2', '--trials', '100']) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == 'q,z,trials,successes,success_rate,oracle,nakamoto'
    assert len(lines) == 3
    assert main(['analyze', '--report', 'catchup', '--trials', '10']) == 2


def test_analyze_malformed_trace(tmp_path, trace_file):
    lines = trace_file.read_text(encoding='utf-8').splitlines()
    broken = tmp_path / 'broken.jsonl'
    broken.write_text('\n'.join(lines[:-1]) + '\n', encoding='utf-8')
    assert main(['analyze', '--trace', str(broken)]) == 4
    assert main(['replay', '--trace', str(broken)]) == 4
    assert main(['analyze', '--trace', str(tmp_path / 'absent.jsonl')]) == 3


def test_analyze_rejects_out_of_range_strand(tmp_path, capsys, trace_file):
    lines = trace_file.read_text(encoding='utf-8').splitlines()
    index = next(i for i, line in enumerate(lines) if json.loads(line)['kind'] == 'ticket_found')
    record = json.loads(lines[index])
    record['strand'] = 7
    lines[index] = json.dumps(record)
    broken = tmp_path / 'strand.jsonl'
    broken.write_text('\n'.join(lines) + '\n', encoding='utf-8')

    assert main(['analyze', '--trace', str(broken), '--report', 'uniformity']) == 4
    assert 'Erreur (analyze)' in capsys.readouterr().err


def _demo_block(ledger_path):
    ledger = import_ledger(ledger_path.read_bytes())
    product = honest_step(ledger, ledger.params, derive_rng(21, 0), PayloadSource(),
                          ticket_source=RealHashTickets(ledger.params, budget=1 << 20))
    return ledger, product.blocks[0]


def test_validate_honest_block(tmp_path, capsys, demo_ledger):
    _, block = _demo_block(demo_ledger)
    path = tmp_path / 'block.bin'
    path.write_bytes(serialize_block(block))
    assert main(['validate', '--block', str(path), '--ledger', str(demo_ledger)]) == 0
    assert 'Verdict: valide' in capsys.readouterr().out


def test_validate_tampered_signature(tmp_path, capsys, demo_ledger):
    _, block = _demo_block(demo_ledger)
    sig = bytearray(block.signature)
    sig[-1] ^= 0xff
    path = tmp_path / 'block.bin'
    path.write_bytes(serialize_block(replace(block, signature=bytes(sig))))

    assert main(['validate', '--block', str(path), '--ledger', str(demo_ledger)]) == 1
    output = capsys.readouterr().out
    assert 'V1: OK' in output and 'V2: OK' in output and 'V3: OK' in output
    assert 'V4: ECHEC' in output


def test_validate_stale_ticket(tmp_path, capsys, demo_ledger):
    ledger = import_ledger(demo_ledger.read_bytes())
    params = ledger.params
    keypair = keygen(b'\x31' * 32)
    tips = list(ledger.tips())
    tips[0] = Hash256(b'\x77' * 32)
    scanner = TicketScanner(tips, keypair.pubkey, params)
    nonce = 0
    while True:
        nonce = scanner.scan(nonce, 1 << 20)
        if judge_ticket(scanner.ticket(nonce), params).chain_index == 0:
            break
        nonce += 1
    block = build_block(scanner.ticket(nonce), 0, ledger.tips()[0], b'late', keypair, params)
    path = tmp_path / 'stale.bin'
    path.write_bytes(serialize_block(block))

    assert main(['validate', '--block', str(path), '--ledger', str(demo_ledger)]) == 1
    output = capsys.readouterr().out
    assert 'V2: ECHEC' in output
    assert 'V1: OK' in output and 'V3: OK' in output and 'V4: OK' in output


def test_validate_garbage(tmp_path, demo_ledger):
    garbage = tmp_path / 'garbage.bin'
    garbage.write_bytes(b'\x00\x01\x02')
    assert main(['validate', '--block', str(garbage), '--ledger', str(demo_ledger)]) == 5
    assert main(['validate', '--block', str(demo_ledger), '--ledger', str(garbage)]) == 5


def test_export_ledger_and_block(tmp_path, trace_file):
    ledger_out = tmp_path / 'replayed.bin'
    assert main(['export', '--trace', str(trace_file), '--out', str(ledger_out)]) == 0
    ledger = import_ledger(ledger_out.read_bytes())

    bid = ledger.tips()[0].hex()
    block_out = tmp_path / 'tip.bin'
    assert main(['export', '--trace', str(trace_file), '--block-id', bid, '--block-out', str(block_out)]) == 0
    assert main(['validate', '--block', str(block_out), '--ledger', str(ledger_out)]) == 0

    assert main(['export', '--trace', str(trace_file), '--block-id', '00' * 32,
                 '--block-out', str(block_out)]) == 4
    assert main(['export', '--trace', str(trace_file)]) == 2


def test_history_report(tmp_path, monkeypatch, capsys, sim_config):
    monkeypatch.setattr(database, 'DB_PATH', tmp_path / 'runs.db')
    assert main(['simulate', '--config', str(sim_config), '--out', str(tmp_path / 't.jsonl'), '--record']) == 0
    capsys.readouterr()
    assert main(['analyze', '--report', 'history']) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith('run_id,created_at,mode')
    assert len(lines) == 2


def test_history_run_details_and_comparison(tmp_path, monkeypatch, capsys, sim_config):
    monkeypatch.setattr(database, 'DB_PATH', tmp_path / 'runs.db')
    assert main(['simulate', '--config', str(sim_config), '--out', str(tmp_path / 'a.jsonl'), '--record']) == 0
    assert main(['simulate', '--config', str(sim_config), '--out', str(tmp_path / 'b.jsonl'),
                 '--seed', '5', '--record']) == 0
    current, previous = [r['run_id'] for r in database.get_runs()]
    capsys.readouterr()

    assert main(['analyze', '--report', 'history', '--run', current]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == 'strand,height,stored_blocks,rate'
    assert len(lines) == 3

    assert main(['analyze', '--report', 'history', '--compare', current, previous]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == 'metric,strand,current,previous,delta,percent'
    # 4 métriques globales + (hauteur, débit) pour chacune des 2 chaînes
    assert len(lines) == 9
    assert lines[1].startswith('best_path_blocks,')

    assert main(['analyze', '--report', 'history', '--run', 'absent']) == 2
    assert main(['analyze', '--report', 'history', '--compare', current, 'absent']) == 2


if __name__ == '__main__':
    sys.exit(pytest.main([__file__, '-v']))
