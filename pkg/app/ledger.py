"""
Registre distribué à n chaînes : blocs genèse, validation en quatre points,
stockage des blocs en arbres par chaîne, règle de la plus longue chaîne
(premier vu en cas d'égalité) et détection des réorganisations.
"""
import logging
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, MutableMapping, Optional, Tuple

from app.core import (
    Block, Hash256, Params, SerializationError, ParamsError, block_id, check_chain_index, hash_bytes,
    make_params, serialize_block, deserialize_block, verify,
)
from app.pow import ticket_hash, leading_zero_bits, chain_index_of

logger = logging.getLogger(__name__)

GENESIS_TAG = b'MULTISTRAND-GENESIS'
EXPORT_MAGIC = b'MSL1'
FLAG_WORK_ABSTRACTED = 0x01

CHECKS = ('V1', 'V2', 'V3', 'V4')


class ApplyStatus(str, Enum):
    EXTENDED_BEST_TIP = 'extended_best_tip'
    STORED_SIDE_BRANCH = 'stored_side_branch'
    CAUSED_REORG = 'caused_reorg'
    REJECTED = 'rejected'
    # Réplique d'un mineur : parent pas encore reçu, bloc mis en attente
    PARKED = 'parked'


@dataclass(frozen=True)
class ValidationVerdict:
    """Résultat de la validation : premier contrôle en échec + détail des quatre contrôles"""
    ok: bool
    failed_check: Optional[str] = None
    reason: Optional[str] = None
    checks: Dict[str, bool] = field(default_factory=dict)


@dataclass(frozen=True)
class ApplyOutcome:
    status: ApplyStatus
    strand: int = 0
    depth: int = 0
    reason: Optional[str] = None
    block_id: Optional[Hash256] = None
    height: int = 0

    @property
    def accepted(self) -> bool:
        return self.status not in (ApplyStatus.REJECTED, ApplyStatus.PARKED)


@dataclass
class StoredBlock:
    block_id: Hash256
    block: Optional[Block]      # None pour le bloc genèse
    height: int
    parent: Optional[Hash256]


class BlockTree:
    """Arbre des blocs d'une chaîne, indexé par identifiant"""

    def __init__(self, genesis: Hash256):
        self.genesis_id = genesis
        self.blocks: Dict[Hash256, StoredBlock] = {
            genesis: StoredBlock(block_id=genesis, block=None, height=0, parent=None)
        }
        self.best_tip = genesis

    @property
    def best_height(self) -> int:
        return self.blocks[self.best_tip].height

    def __contains__(self, bid: bytes) -> bool:
        return bid in self.blocks

    def __len__(self) -> int:
        return len(self.blocks)

    def ancestor_at(self, bid: Hash256, height: int) -> Hash256:
        node = self.blocks[bid]
        while node.height > height:
            node = self.blocks[node.parent]
        return node.block_id

    def common_ancestor(self, a: Hash256, b: Hash256) -> StoredBlock:
        height = min(self.blocks[a].height, self.blocks[b].height)
        a = self.ancestor_at(a, height)
        b = self.ancestor_at(b, height)
        while a != b:
            a = self.blocks[a].parent
            b = self.blocks[b].parent
        return self.blocks[a]

    def path_to(self, bid: Hash256) -> List[Hash256]:
        """Chemin genèse -> bid"""
        path = []
        node = self.blocks[bid]
        while node is not None:
            path.append(node.block_id)
            node = self.blocks[node.parent] if node.parent is not None else None
        path.reverse()
        return path


def genesis_id_for(index: int, params: Params) -> Hash256:
    """hash("MULTISTRAND-GENESIS" ‖ index (4 BE) ‖ p (1) ‖ difficulty_bits (2 BE))"""
    if params.strand_exponent_p > 255:
        raise ParamsError("p doit tenir sur un octet pour le bloc genèse")
    preimage = (GENESIS_TAG + struct.pack('>I', index)
                + struct.pack('>B', params.strand_exponent_p)
                + struct.pack('>H', params.difficulty_bits))
    return hash_bytes(preimage, params.hash_algo_id)


class Ledger:
    """
    Machine à états modifiée uniquement par apply_block (un seul écrivain à la fois).

    Args:
        params: Paramètres du protocole
        verify_work: Si False, V1 et V3 sont considérés satisfaits (tickets du mode
            analytique, dont l'index de chaîne est tiré au sort)
        verdict_cache: Cache partagé des contrôles sans état (V1, V3, V4) par (identifiant, signature)
    """

    def __init__(self, params: Params, verify_work: bool = True,
                 verdict_cache: Optional[MutableMapping[Tuple[Hash256, bytes], Tuple[bool, bool, bool]]] = None):
        self.params = params
        self.verify_work = verify_work
        self.verdict_cache = verdict_cache
        self.strands: List[BlockTree] = [
            BlockTree(genesis_id_for(i, params)) for i in range(params.strand_count_n)
        ]

    @property
    def tip_cache(self) -> Tuple[Hash256, ...]:
        return tuple(tree.best_tip for tree in self.strands)

    def tips(self) -> Tuple[Hash256, ...]:
        return self.tip_cache

    def strand_height(self, i: int) -> int:
        check_chain_index(i, self.params)
        return self.strands[i].best_height

    def heights(self) -> List[int]:
        return [tree.best_height for tree in self.strands]

    def stored_counts(self) -> List[int]:
        """Blocs stockés par chaîne, genèse exclue"""
        return [len(tree) - 1 for tree in self.strands]

    def block_id(self, b: Block) -> Hash256:
        return block_id(b, self.params.hash_algo_id)

    def get(self, bid: bytes) -> Optional[StoredBlock]:
        for tree in self.strands:
            if bid in tree.blocks:
                return tree.blocks[bid]
        return None

    def best_path(self, i: int) -> List[Hash256]:
        check_chain_index(i, self.params)
        tree = self.strands[i]
        return tree.path_to(tree.best_tip)

    def is_on_best_path(self, bid: bytes) -> bool:
        for tree in self.strands:
            node = tree.blocks.get(bid)
            if node is not None:
                return tree.ancestor_at(tree.best_tip, node.height) == bid if node.height <= tree.best_height else False
        return False

    # ------------------------------------------------------------------
    # Validation
    # ------------------------------------------------------------------

    def _stateless_checks(self, b: Block, bid: Hash256) -> Tuple[bool, bool, bool]:
        # L'identifiant exclut la signature : elle fait partie de la clé
        key = (bid, bytes(b.signature))
        if self.verdict_cache is not None:
            cached = self.verdict_cache.get(key)
            if cached is not None:
                return cached

        if self.verify_work:
            digest = ticket_hash(b.ticket, self.params)
            v1 = chain_index_of(digest, self.params.strand_exponent_p) == b.chain_index
            v3 = leading_zero_bits(digest) >= self.params.difficulty_bits
        else:
            v1 = v3 = True
        v4 = verify(bid, b.signature, b.ticket.pubkey)

        result = (v1, v3, v4)
        if self.verdict_cache is not None:
            self.verdict_cache[key] = result
        return result

    def validate_block(self, b: Block, bid: Optional[Hash256] = None) -> ValidationVerdict:
        """
        Les quatre contrôles sont évalués indépendamment ; le verdict porte le
        premier en échec dans l'ordre V1, V2, V3, V4.
        """
        n = self.params.strand_count_n
        if len(b.ticket.tip_hashes) != n or len(b.ticket.pubkey) != 32 or not 0 <= b.ticket.nonce < 2 ** 64:
            return ValidationVerdict(ok=False, failed_check='V1', reason='malformed_ticket',
                                     checks={c: False for c in CHECKS})
        if not 0 <= b.chain_index < n:
            return ValidationVerdict(ok=False, failed_check='V1', reason='chain_index_out_of_range',
                                     checks={'V1': False, 'V2': False, 'V3': False, 'V4': False})

        if bid is None:
            bid = self.block_id(b)
        v1, v3, v4 = self._stateless_checks(b, bid)

        # V2 : la tête inscrite dans le ticket pour SA chaîne = prev_hash, et ce parent existe
        tip_matches = b.ticket.tip_hashes[b.chain_index] == b.prev_hash
        parent_known = b.prev_hash in self.strands[b.chain_index]
        v2 = tip_matches and parent_known

        checks = {'V1': v1, 'V2': v2, 'V3': v3, 'V4': v4}
        reasons = {
            'V1': 'chain_index_mismatch',
            'V2': 'tip_mismatch' if not tip_matches else 'unknown_parent',
            'V3': 'insufficient_work',
            'V4': 'bad_signature',
        }
        for check in CHECKS:
            if not checks[check]:
                return ValidationVerdict(ok=False, failed_check=check, reason=reasons[check], checks=checks)
        return ValidationVerdict(ok=True, checks=checks)

    # ------------------------------------------------------------------
    # Mutation
    # ------------------------------------------------------------------

    def apply_block(self, b: Block) -> ApplyOutcome:
        """Valide puis stocke le bloc ; met à jour la tête si la hauteur dépasse strictement"""
        strand = b.chain_index
        try:
            bid = self.block_id(b)
        except (SerializationError, struct.error) as e:
            logger.debug(f"Bloc malformé rejeté: {e}")
            return ApplyOutcome(ApplyStatus.REJECTED, strand=strand, reason='malformed_ticket')

        if 0 <= strand < self.params.strand_count_n and bid in self.strands[strand]:
            return ApplyOutcome(ApplyStatus.REJECTED, strand=strand, reason='duplicate', block_id=bid)

        verdict = self.validate_block(b, bid)
        if not verdict.ok:
            logger.debug(f"Bloc {bid.short()} rejeté ({verdict.failed_check}: {verdict.reason})")
            return ApplyOutcome(ApplyStatus.REJECTED, strand=strand, reason=verdict.reason, block_id=bid)

        tree = self.strands[strand]
        parent = tree.blocks[b.prev_hash]
        height = parent.height + 1
        tree.blocks[bid] = StoredBlock(block_id=bid, block=b, height=height, parent=parent.block_id)

        old_tip = tree.best_tip
        old_height = tree.best_height
        if height <= old_height:
            return ApplyOutcome(ApplyStatus.STORED_SIDE_BRANCH, strand=strand, block_id=bid, height=height)

        tree.best_tip = bid
        if b.prev_hash == old_tip:
            return ApplyOutcome(ApplyStatus.EXTENDED_BEST_TIP, strand=strand, block_id=bid, height=height)

        fork = tree.common_ancestor(old_tip, bid)
        depth = old_height - fork.height
        logger.debug(f"Réorganisation chaîne {strand}: {depth} bloc(s) abandonné(s)")
        return ApplyOutcome(ApplyStatus.CAUSED_REORG, strand=strand, depth=depth, block_id=bid, height=height)


# ---------------------------------------------------------------------------
# API fonctionnelle
# ---------------------------------------------------------------------------

def genesis_ledger(params: Params, verify_work: bool = True, verdict_cache=None) -> Ledger:
    """Registre avec un bloc genèse par chaîne"""
    return Ledger(params, verify_work=verify_work, verdict_cache=verdict_cache)


def validate_block(b: Block, ledger: Ledger) -> ValidationVerdict:
    return ledger.validate_block(b)


def apply_block(b: Block, ledger: Ledger) -> ApplyOutcome:
    return ledger.apply_block(b)


def tips(ledger: Ledger) -> Tuple[Hash256, ...]:
    return ledger.tips()


def strand_height(ledger: Ledger, i: int) -> int:
    return ledger.strand_height(i)


def best_path(ledger: Ledger, i: int) -> List[Hash256]:
    return ledger.best_path(i)


def is_on_best_path(ledger: Ledger, bid: bytes) -> bool:
    return ledger.is_on_best_path(bid)


# ---------------------------------------------------------------------------
# Export / import
# ---------------------------------------------------------------------------

def _pack_label(label: str) -> bytes:
    raw = label.encode('ascii')
    return struct.pack('>B', len(raw)) + raw


def export_ledger(ledger: Ledger) -> bytes:
    """
    En-tête (magic, p, difficulté, algorithmes, drapeaux, nombre de blocs) puis
    les blocs, chaîne par chaîne, dans l'ordre d'insertion (topologique).
    """
    params = ledger.params
    blocks = [node.block for tree in ledger.strands for node in tree.blocks.values() if node.block is not None]
    flags = 0 if ledger.verify_work else FLAG_WORK_ABSTRACTED

    header = (EXPORT_MAGIC
              + struct.pack('>B', params.strand_exponent_p)
              + struct.pack('>H', params.difficulty_bits)
              + _pack_label(params.hash_algo_id)
              + _pack_label(params.sig_algo_id)
              + struct.pack('>B', flags)
              + struct.pack('>I', len(blocks)))
    return header + b''.join(serialize_block(b) for b in blocks)


def read_export_header(data: bytes) -> Tuple[Params, bool, int, int]:
    """
    Lit l'en-tête d'un fichier de registre

    Returns:
        Tuple (params, verify_work, nombre de blocs, position du premier bloc)
    """
    if data[:4] != EXPORT_MAGIC:
        raise SerializationError("Fichier de registre invalide (magic absent)")
    try:
        pos = 4
        p = data[pos]
        (difficulty,) = struct.unpack('>H', data[pos + 1:pos + 3])
        pos += 3
        labels = []
        for _ in range(2):
            size = data[pos]
            labels.append(data[pos + 1:pos + 1 + size].decode('ascii'))
            pos += 1 + size
        flags = data[pos]
        (count,) = struct.unpack('>I', data[pos + 1:pos + 5])
        pos += 5
    except (IndexError, struct.error, UnicodeDecodeError) as e:
        raise SerializationError(f"En-tête de registre tronqué: {e}") from e

    params = make_params(p, difficulty, labels[0], labels[1])
    return params, not (flags & FLAG_WORK_ABSTRACTED), count, pos


def import_ledger(data: bytes) -> Ledger:
    """Reconstruit un registre en ré-appliquant les blocs exportés"""
    params, verify_work, count, pos = read_export_header(data)
    ledger = Ledger(params, verify_work=verify_work)

    for index in range(count):
        block, consumed = deserialize_block(data, params, pos)
        pos += consumed
        outcome = ledger.apply_block(block)
        if not outcome.accepted:
            raise SerializationError(f"Bloc {index} rejeté à l'import: {outcome.reason}")

    if pos != len(data):
        raise SerializationError(f"{len(data) - pos} octets en trop après le dernier bloc")
    logger.info(f"Registre importé: {count} blocs, hauteurs {ledger.heights()}")
    return ledger
