"""
Preuve de travail sur les tickets : hash du ticket, les deux conditions de
validité (bits à zéro en tête, p derniers bits = index de chaîne) et la boucle
de recherche de nonce.
"""
import logging
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

from app.core import (
    Hash256, Params, Ticket, NONCE_MAX, hash_factory, serialize_ticket, hash_bytes, tips_tuple,
    SerializationError,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TicketJudgement:
    ticket_hash: Hash256
    zero_bits: int
    chain_index: int
    meets_difficulty: bool


class CancelToken:
    """Jeton d'annulation coopératif partagé entre les workers"""

    def __init__(self, parent: Optional['CancelToken'] = None):
        self._event = threading.Event()
        self._parent = parent

    def cancel(self):
        self._event.set()

    @property
    def cancelled(self) -> bool:
        return self._event.is_set() or (self._parent is not None and self._parent.cancelled)


def ticket_hash(t: Ticket, params: Params) -> Hash256:
    """hash_bytes(serialize_ticket(t)) avec vérification de n"""
    return hash_bytes(serialize_ticket(t, params.strand_count_n), params.hash_algo_id)


def leading_zero_bits(h: bytes) -> int:
    """Nombre de bits à zéro consécutifs depuis le bit de poids fort de l'octet 0"""
    value = int.from_bytes(h, 'big')
    return len(h) * 8 - value.bit_length()


def chain_index_of(h: bytes, p: int) -> int:
    """Les p derniers bits du hash, lu comme entier big-endian"""
    if not 0 <= p <= 256:
        raise ValueError(f"p hors de [0, 256]: {p}")
    return int.from_bytes(h, 'big') & ((1 << p) - 1)


def judge_digest(digest: bytes, params: Params) -> TicketJudgement:
    zero_bits = leading_zero_bits(digest)
    return TicketJudgement(
        ticket_hash=Hash256(digest),
        zero_bits=zero_bits,
        chain_index=chain_index_of(digest, params.strand_exponent_p),
        meets_difficulty=zero_bits >= params.difficulty_bits,
    )


def judge_ticket(t: Ticket, params: Params) -> TicketJudgement:
    """Évalue les conditions (1) et (2) pour un ticket"""
    return judge_digest(ticket_hash(t, params), params)


class TicketScanner:
    """
    Balaye les nonces d'un ticket dont les têtes et la pubkey sont fixées.

    L'état du hash de tips ‖ pubkey est calculé une seule fois ; chaque essai
    ne hashe que les 8 octets du nonce (même condensat que ticket_hash).
    """

    def __init__(self, tips: Sequence[bytes], pubkey: bytes, params: Params):
        if len(tips) != params.strand_count_n:
            raise SerializationError(f"{len(tips)} têtes fournies, {params.strand_count_n} attendues")
        self.params = params
        self.tips = tips_tuple(tips)
        self.pubkey = bytes(pubkey)
        # Valide la mise en forme une fois pour toutes
        serialize_ticket(Ticket(self.tips, self.pubkey, 0), params.strand_count_n)
        self._prefix_state = hash_factory(params.hash_algo_id)(b''.join(self.tips) + self.pubkey)
        # Entier maximal (exclusif) d'un hash ayant assez de zéros en tête
        self._limit = 1 << (256 - params.difficulty_bits)

    def digest(self, nonce: int) -> bytes:
        state = self._prefix_state.copy()
        state.update(struct.pack('>Q', nonce))
        return state.digest()

    def scan(self, nonce_start: int, max_attempts: int,
             cancel: Optional[CancelToken] = None, check_every: int = 4096) -> Optional[int]:
        """
        Retourne le plus petit nonce >= nonce_start qui satisfait la difficulté, ou None

        Args:
            nonce_start: Premier nonce essayé
            max_attempts: Nombre maximum d'essais
            cancel: Jeton d'annulation consulté toutes les `check_every` tentatives
        """
        limit = self._limit
        pack = struct.Struct('>Q').pack
        prefix = self._prefix_state
        end = min(nonce_start + max(max_attempts, 0), NONCE_MAX + 1)

        for nonce in range(nonce_start, end):
            if cancel is not None and (nonce - nonce_start) % check_every == 0 and cancel.cancelled:
                return None
            state = prefix.copy()
            state.update(pack(nonce))
            if int.from_bytes(state.digest(), 'big') < limit:
                return nonce
        return None

    def ticket(self, nonce: int) -> Ticket:
        return Ticket(tip_hashes=self.tips, pubkey=self.pubkey, nonce=nonce)


def mine_ticket(tips: Sequence[bytes], pubkey: bytes, params: Params, nonce_start: int = 0,
                max_attempts: int = 1_000_000,
                cancel: Optional[CancelToken] = None) -> Optional[Tuple[Ticket, TicketJudgement]]:
    """
    Cherche un ticket en balayant les nonces par ordre croissant

    Args:
        tips: Les n hash de têtes connus
        pubkey: Clé publique du ticket
        params: Paramètres du protocole
        nonce_start: Premier nonce
        max_attempts: Borne sur le nombre d'essais
        cancel: Jeton d'annulation (optionnel)

    Returns:
        (ticket, jugement) ou None si rien trouvé / annulé. L'index de chaîne est une sortie.
    """
    scanner = TicketScanner(tips, pubkey, params)
    nonce = scanner.scan(nonce_start, max_attempts, cancel)
    if nonce is None:
        return None
    ticket = scanner.ticket(nonce)
    return ticket, judge_digest(scanner.digest(nonce), params)


def mine_ticket_parallel(tips: Sequence[bytes], pubkey: bytes, params: Params, nonce_start: int = 0,
                         max_attempts: int = 1_000_000, cancel: Optional[CancelToken] = None,
                         workers: int = 4, chunk_size: int = 65_536) -> Optional[Tuple[Ticket, TicketJudgement]]:
    """
    Même contrat que mine_ticket, l'espace des nonces étant découpé en tranches
    consécutives réparties sur un pool de threads.

    Le résultat est identique à celui d'un seul worker : le plus petit nonce
    valide l'emporte, les tranches suivantes sont annulées.
    """
    if workers <= 1:
        return mine_ticket(tips, pubkey, params, nonce_start, max_attempts, cancel)

    scanner = TicketScanner(tips, pubkey, params)
    end = min(nonce_start + max(max_attempts, 0), NONCE_MAX + 1)
    token = cancel or CancelToken()
    round_token = CancelToken(parent=token)

    def worker(start: int, stop: int) -> Optional[int]:
        if token.cancelled:
            return None
        return scanner.scan(start, stop - start, round_token)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        start = nonce_start
        while start < end:
            if token.cancelled:
                return None
            bounds = []
            for _ in range(workers):
                if start >= end:
                    break
                stop = min(start + chunk_size, end)
                bounds.append((start, stop))
                start = stop
            futures = [pool.submit(worker, lo, hi) for lo, hi in bounds]
            # Les tranches sont ordonnées : la première qui trouve donne le minimum
            for future in futures:
                found = future.result()
                if token.cancelled:
                    return None
                if found is not None:
                    round_token.cancel()
                    for other in futures:
                        other.cancel()
                    return scanner.ticket(found), judge_digest(scanner.digest(found), params)
            if token.cancelled:
                return None
    return None
