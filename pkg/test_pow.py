#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Tests de la preuve de travail sur les tickets
"""
import sys
import io

# Fix encoding for Windows console
if sys.platform == 'win32':
    sys.stdout = io.TextIOWrapper(sys.stdout.buffer, encoding='utf-8', errors='replace')

import hashlib

import pytest
from hypothesis import given, strategies as st
from scipy import stats

from app.analyzer import uniformity
from app.core import Hash256, make_params, serialize_ticket, Ticket, SerializationError
from app.pow import (
    CancelToken, TicketScanner, chain_index_of, judge_ticket, leading_zero_bits, mine_ticket,
    mine_ticket_parallel, ticket_hash,
)

PUBKEY = b'\x2a' * 32


def _tips(n: int):
    return [Hash256(hashlib.sha256(bytes([i])).digest()) for i in range(n)]


def _oracle_zero_bits(h: bytes) -> int:
    bits = ''.join(f"{byte:08b}" for byte in h)
    return len(bits) - len(bits.lstrip('0'))


@given(st.binary(min_size=32, max_size=32))
def test_leading_zero_bits_matches_bit_string(h):
    assert leading_zero_bits(h) == _oracle_zero_bits(h)


def test_leading_zero_bits_edges():
    assert leading_zero_bits(b'\x00' * 32) == 256
    assert leading_zero_bits(b'\x80' + b'\x00' * 31) == 0
    assert leading_zero_bits(b'\x00\x01' + b'\x00' * 30) == 15


@given(st.binary(min_size=32, max_size=32), st.integers(min_value=0, max_value=16))
def test_chain_index_is_hash_suffix(h, p):
    assert chain_index_of(h, p) == int.from_bytes(h, 'big') % (2 ** p)


def test_chain_index_bounds():
    assert chain_index_of(b'\xff' * 32, 0) == 0
    with pytest.raises(ValueError):
        chain_index_of(b'\x00' * 32, 257)


def test_difficulty_zero_accepts_first_nonce():
    params = make_params(1, 0)
    found = mine_ticket(_tips(2), PUBKEY, params, nonce_start=5)
    assert found is not None
    ticket, judgement = found
    assert ticket.nonce == 5
    assert judgement.meets_difficulty


def test_mine_ticket_returns_smallest_valid_nonce():
    """Comparaison avec un balayage naïf sur hashlib"""
    params = make_params(1, 6)
    tips = _tips(2)
    found = mine_ticket(tips, PUBKEY, params)
    assert found is not None
    ticket, judgement = found

    expected = None
    for nonce in range(ticket.nonce + 1):
        digest = hashlib.sha256(serialize_ticket(Ticket(tuple(tips), PUBKEY, nonce))).digest()
        if _oracle_zero_bits(digest) >= 6:
            expected = nonce
            break
    assert ticket.nonce == expected
    assert judgement.ticket_hash == ticket_hash(ticket, params)
    assert judgement.chain_index == judgement.ticket_hash[-1] & 1
    assert judge_ticket(ticket, params).meets_difficulty


def test_mine_ticket_exhaustion_and_cancellation():
    params = make_params(1, 40)
    assert mine_ticket(_tips(2), PUBKEY, params, max_attempts=200) is None

    token = CancelToken()
    token.cancel()
    assert mine_ticket(_tips(2), PUBKEY, make_params(1, 0), cancel=token) is None


def test_mine_ticket_rejects_wrong_tip_count():
    with pytest.raises(SerializationError):
        mine_ticket(_tips(3), PUBKEY, make_params(1, 0))


def test_scanner_digest_matches_ticket_hash():
    params = make_params(2, 0, hash_algo_id='sha3-256')
    scanner = TicketScanner(_tips(4), PUBKEY, params)
    for nonce in (0, 1, 2 ** 40):
        assert scanner.digest(nonce) == ticket_hash(scanner.ticket(nonce), params)


def test_parallel_matches_single_worker():
    """Même nonce minimal quel que soit le découpage"""
    params = make_params(2, 10)
    tips = _tips(4)
    single = mine_ticket(tips, PUBKEY, params, max_attempts=200_000)
    parallel = mine_ticket_parallel(tips, PUBKEY, params, max_attempts=200_000, workers=4, chunk_size=128)
    assert single is not None
    assert parallel is not None
    assert parallel[0] == single[0]

    token = CancelToken()
    token.cancel()
    assert mine_ticket_parallel(tips, PUBKEY, params, cancel=token, workers=3) is None


def test_chain_index_uniformity_real_tickets():
    """20 000 tickets réellement minés sur 16 chaînes passent le khi-deux à 0,001"""
    params = make_params(4, 4)
    tips = _tips(16)
    scanner = TicketScanner(tips, PUBKEY, params)
    indices = []
    nonce = 0
    for _ in range(20_000):
        nonce = scanner.scan(nonce, 1 << 20)
        indices.append(judge_ticket(scanner.ticket(nonce), params).chain_index)
        nonce += 1

    result = uniformity(indices, n=16)
    assert result.passed
    assert result.samples == 20_000
    statistic, _ = stats.chisquare(result.counts)
    assert result.statistic == pytest.approx(statistic)
    assert statistic < stats.chi2.ppf(1 - 0.001, 15)


if __name__ == '__main__':
    sys.exit(pytest.main([__file__, '-v']))
