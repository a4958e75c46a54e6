"""
Politiques de minage : la procédure honnête (paire de clés, ticket, bloc signé)
et les stratégies d'attaque (chaîne ciblée, accumulation de tickets,
équivocation, fork privé).
"""
import logging
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core import (
    Block, Hash256, Keypair, Params, Ticket, hash_bytes, keygen, sign_block, tips_tuple, NONCE_MAX,
)
from app.ledger import ApplyOutcome, ApplyStatus, Ledger
from app.pow import TicketScanner, judge_digest

logger = logging.getLogger(__name__)


class PolicyKind(str, Enum):
    HONEST = 'honest'
    TARGETED = 'targeted'
    HOARDER = 'hoarder'
    EQUIVOCATOR = 'equivocator'
    PRIVATE_FORKER = 'private_forker'


@dataclass(frozen=True)
class Policy:
    kind: PolicyKind = PolicyKind.HONEST
    target: int = 0
    hold_duration: int = 0
    copies: int = 2
    withhold_depth: int = 6

    def to_dict(self) -> Dict:
        data = {'kind': self.kind.value}
        if self.kind in (PolicyKind.TARGETED, PolicyKind.PRIVATE_FORKER):
            data['target'] = self.target
        if self.kind == PolicyKind.HOARDER:
            data['hold_duration'] = self.hold_duration
        if self.kind == PolicyKind.EQUIVOCATOR:
            data['copies'] = self.copies
        if self.kind == PolicyKind.PRIVATE_FORKER:
            data['withhold_depth'] = self.withhold_depth
        return data


@dataclass(frozen=True)
class MinerConfig:
    miner_id: int
    hash_rate: float
    policy: Policy = field(default_factory=Policy)

    def __post_init__(self):
        if not self.hash_rate > 0:
            raise ValueError(f"Mineur {self.miner_id}: hash_rate doit être > 0 (reçu {self.hash_rate})")
        if self.policy.kind == PolicyKind.EQUIVOCATOR and self.policy.copies < 2:
            raise ValueError(f"Mineur {self.miner_id}: un équivocateur émet au moins 2 copies")
        if self.policy.kind == PolicyKind.HOARDER and self.policy.hold_duration < 0:
            raise ValueError(f"Mineur {self.miner_id}: hold_duration négatif")
        if self.policy.kind == PolicyKind.PRIVATE_FORKER and self.policy.withhold_depth < 0:
            raise ValueError(f"Mineur {self.miner_id}: withhold_depth négatif")

    def check_target(self, params: Params):
        if self.policy.kind in (PolicyKind.TARGETED, PolicyKind.PRIVATE_FORKER):
            if not 0 <= self.policy.target < params.strand_count_n:
                raise ValueError(f"Mineur {self.miner_id}: chaîne cible {self.policy.target} hors de [0, {params.strand_count_n})")

    def to_dict(self) -> Dict:
        return {'miner_id': self.miner_id, 'hash_rate': self.hash_rate, 'policy': self.policy.to_dict()}


@dataclass
class MinedProduct:
    """Blocs produits par une étape de minage et tickets trouvés au passage"""
    blocks: List[Block] = field(default_factory=list)
    discarded_tickets: int = 0
    tickets: List[Tuple[Ticket, int]] = field(default_factory=list)


class PayloadSource:
    """
    Transactions opaques déterministes, indexées par (mineur, chaîne, hauteur, copie).
    La chaîne est connue au moment de construire le bloc.
    """

    def __init__(self, payload_size: int = 64, algo: str = 'sha256'):
        self.payload_size = payload_size
        self.algo = algo

    def __call__(self, miner_id: int, strand: int, height: int, copy: int = 0) -> bytes:
        seed = b'payload' + struct.pack('>IIQI', miner_id, strand, height, copy)
        out = b''
        counter = 0
        while len(out) < self.payload_size:
            out += hash_bytes(seed + struct.pack('>I', counter), self.algo)
            counter += 1
        return out[:self.payload_size]


# ---------------------------------------------------------------------------
# Sources de tickets
# ---------------------------------------------------------------------------

class RealHashTickets:
    """
    Vrai minage avec un budget d'essais. Le budget restant est conservé après
    un succès : le nombre moyen de tickets par étape vaut budget × 2^-difficulté.
    """

    def __init__(self, params: Params, budget: int, nonce_start: int = 0):
        self.params = params
        self.remaining = int(budget)
        self.nonce_start = nonce_start
        self.attempts = 0

    def draw(self, tips: Sequence[bytes], pubkey: bytes) -> Optional[Tuple[Ticket, int]]:
        if self.remaining <= 0:
            return None
        scanner = TicketScanner(tips, pubkey, self.params)
        budget = min(self.remaining, NONCE_MAX + 1 - self.nonce_start)
        nonce = scanner.scan(self.nonce_start, budget)
        if nonce is None:
            self.attempts += budget
            self.remaining = 0
            return None
        used = nonce - self.nonce_start + 1
        self.attempts += used
        self.remaining -= used
        judgement = judge_digest(scanner.digest(nonce), self.params)
        return scanner.ticket(nonce), judgement.chain_index


class AnalyticTickets:
    """
    Un ticket par événement, sans hachage : l'index de chaîne est tiré
    uniformément dans [0, n). Les registres doivent alors abstraire le travail.
    """

    def __init__(self, params: Params, rng: np.random.Generator, count: int = 1):
        self.params = params
        self.rng = rng
        self.remaining = count
        self.attempts = 0

    def draw(self, tips: Sequence[bytes], pubkey: bytes) -> Optional[Tuple[Ticket, int]]:
        if self.remaining <= 0:
            return None
        self.remaining -= 1
        nonce = int(self.rng.integers(0, 2 ** 63))
        index = int(self.rng.integers(0, self.params.strand_count_n))
        return Ticket(tip_hashes=tips_tuple(tips), pubkey=pubkey, nonce=nonce), index


def fresh_keypair(rng: np.random.Generator) -> Keypair:
    """Une nouvelle paire de clés par ticket"""
    return keygen(rng.bytes(32))


def build_block(ticket: Ticket, chain_index: int, prev_hash: bytes, payload: bytes,
                keypair: Keypair, params: Params) -> Block:
    block = Block(chain_index=chain_index, prev_hash=Hash256(prev_hash), payload=payload, ticket=ticket)
    return sign_block(block, keypair, params.hash_algo_id)


def _default_source(params: Params, source) -> object:
    return source if source is not None else RealHashTickets(params, budget=1 << 22)


def _next_height(view: Ledger, strand: int, prev_hash: bytes) -> int:
    node = view.strands[strand].blocks.get(prev_hash)
    return (node.height if node is not None else view.strand_height(strand)) + 1


# ---------------------------------------------------------------------------
# Étapes de minage
# ---------------------------------------------------------------------------

def honest_step(ledger_view: Ledger, params: Params, rng: np.random.Generator,
                payload_source: PayloadSource, miner_id: int = 0,
                ticket_source=None) -> Optional[MinedProduct]:
    """
    Procédure honnête : paire de clés fraîche, ticket sur les têtes courantes,
    un bloc sur la chaîne désignée par le ticket, signé avec la clé du ticket.

    Returns:
        MinedProduct avec un bloc, ou None si aucun ticket trouvé
    """
    source = _default_source(params, ticket_source)
    tips = ledger_view.tips()
    keypair = fresh_keypair(rng)
    found = source.draw(tips, keypair.pubkey)
    if found is None:
        return None

    ticket, index = found
    prev = tips[index]
    payload = payload_source(miner_id, index, _next_height(ledger_view, index, prev))
    block = build_block(ticket, index, prev, payload, keypair, params)
    return MinedProduct(blocks=[block], tickets=[(ticket, index)])


def targeted_step(ledger_view: Ledger, params: Params, rng: np.random.Generator,
                  payload_source: PayloadSource, target: int, miner_id: int = 0,
                  ticket_source=None) -> Optional[MinedProduct]:
    """Comme honest_step mais jette tout ticket dont l'index n'est pas la cible"""
    source = _default_source(params, ticket_source)
    tips = ledger_view.tips()
    keypair = fresh_keypair(rng)
    found = source.draw(tips, keypair.pubkey)
    if found is None:
        return None

    ticket, index = found
    if index != target:
        return MinedProduct(discarded_tickets=1, tickets=[(ticket, index)])
    prev = tips[index]
    payload = payload_source(miner_id, index, _next_height(ledger_view, index, prev))
    block = build_block(ticket, index, prev, payload, keypair, params)
    return MinedProduct(blocks=[block], tickets=[(ticket, index)])


def equivocate_step(ledger_view: Ledger, params: Params, rng: np.random.Generator,
                    payload_source: PayloadSource, copies: int = 2, miner_id: int = 0,
                    ticket_source=None) -> Optional[MinedProduct]:
    """Un ticket, `copies` blocs signés différents, sans refaire la preuve de travail"""
    if copies < 2:
        raise ValueError("copies doit valoir au moins 2")
    source = _default_source(params, ticket_source)
    tips = ledger_view.tips()
    keypair = fresh_keypair(rng)
    found = source.draw(tips, keypair.pubkey)
    if found is None:
        return None

    ticket, index = found
    prev = tips[index]
    height = _next_height(ledger_view, index, prev)
    blocks = [
        build_block(ticket, index, prev, payload_source(miner_id, index, height, copy), keypair, params)
        for copy in range(copies)
    ]
    return MinedProduct(blocks=blocks, tickets=[(ticket, index)])


@dataclass
class HoardedTicket:
    ticket: Ticket
    chain_index: int
    keypair: Keypair
    release_time: int = 0


def hoard_ticket(ledger_view: Ledger, params: Params, rng: np.random.Generator,
                 release_time: int = 0, ticket_source=None) -> Optional[HoardedTicket]:
    """Mine un ticket et le garde (avec sa paire de clés) au lieu de publier"""
    source = _default_source(params, ticket_source)
    keypair = fresh_keypair(rng)
    found = source.draw(ledger_view.tips(), keypair.pubkey)
    if found is None:
        return None
    ticket, index = found
    return HoardedTicket(ticket=ticket, chain_index=index, keypair=keypair, release_time=release_time)


def spend_hoarded(hoarded: HoardedTicket, ledger_view: Ledger, params: Params,
                  payload_source: PayloadSource, miner_id: int = 0) -> MinedProduct:
    """
    Construit le bloc d'un ticket accumulé sur la tête COURANTE de sa chaîne.
    Si la chaîne a avancé pendant l'attente, le bloc échoue en V2.
    """
    index = hoarded.chain_index
    prev = ledger_view.tips()[index]
    payload = payload_source(miner_id, index, _next_height(ledger_view, index, prev))
    block = build_block(hoarded.ticket, index, prev, payload, hoarded.keypair, params)
    return MinedProduct(blocks=[block], tickets=[(hoarded.ticket, index)])


def hoard_then_spend(hold: int, ledger_view: Ledger, params: Params, rng: np.random.Generator,
                     payload_source: PayloadSource, miner_id: int = 0, ticket_source=None,
                     advance: Optional[Callable[[int], None]] = None) -> Optional[MinedProduct]:
    """
    Mine un ticket, le garde `hold` unités de temps puis construit le bloc.

    Args:
        hold: Durée de conservation
        advance: Rappel qui fait évoluer ledger_view pendant `hold` unités (simulateur, tests)
    """
    if hold < 0:
        raise ValueError("hold doit être positif ou nul")
    hoarded = hoard_ticket(ledger_view, params, rng, release_time=hold, ticket_source=ticket_source)
    if hoarded is None:
        return None
    if hold > 0 and advance is not None:
        advance(hold)
    return spend_hoarded(hoarded, ledger_view, params, payload_source, miner_id)


@dataclass
class PrivateFork:
    """État de l'attaquant : base du fork sur la chaîne cible et blocs retenus"""
    target: int
    withhold_depth: int
    fork_base: Optional[Hash256] = None
    base_height: int = 0
    private_blocks: List[Block] = field(default_factory=list)
    private_tip: Optional[Hash256] = None
    abandoned: int = 0
    published: int = 0

    @property
    def private_height(self) -> int:
        return self.base_height + len(self.private_blocks)

    def reset(self, ledger_view: Ledger):
        tree = ledger_view.strands[self.target]
        self.fork_base = tree.best_tip
        self.base_height = tree.best_height
        self.private_blocks = []
        self.private_tip = self.fork_base

    def start_from(self, base: Hash256, base_height: int):
        self.fork_base = base
        self.base_height = base_height
        self.private_blocks = []
        self.private_tip = base

    def deficit(self, ledger_view: Ledger) -> int:
        return ledger_view.strand_height(self.target) - self.private_height


def private_fork_step(state: PrivateFork, ledger_view: Ledger, params: Params, rng: np.random.Generator,
                      payload_source: PayloadSource, miner_id: int = 0,
                      ticket_source=None) -> Optional[MinedProduct]:
    """
    Prolonge le fork privé de la chaîne cible. Les tickets portent la tête
    privée pour la cible (l'index n'est connu qu'une fois le ticket trouvé) ;
    les tickets d'autres chaînes sont jetés. Le fork est publié dès qu'il est
    strictement plus long que la chaîne publique.

    Returns:
        MinedProduct dont `blocks` contient le fork publié (vide sinon), ou None
    """
    source = _default_source(params, ticket_source)
    if state.fork_base is None:
        state.reset(ledger_view)
    elif state.deficit(ledger_view) > state.withhold_depth:
        state.abandoned += 1
        logger.debug(f"Fork privé abandonné (déficit {state.deficit(ledger_view)})")
        state.reset(ledger_view)

    tips = list(ledger_view.tips())
    tips[state.target] = state.private_tip
    keypair = fresh_keypair(rng)
    found = source.draw(tips, keypair.pubkey)
    if found is None:
        return None

    ticket, index = found
    if index != state.target:
        return MinedProduct(discarded_tickets=1, tickets=[(ticket, index)])

    payload = payload_source(miner_id, index, state.private_height + 1)
    block = build_block(ticket, index, state.private_tip, payload, keypair, params)
    state.private_blocks.append(block)
    state.private_tip = ledger_view.block_id(block)

    if state.private_height > ledger_view.strand_height(state.target):
        published = list(state.private_blocks)
        state.published += len(published)
        state.fork_base = None
        state.private_blocks = []
        return MinedProduct(blocks=published, tickets=[(ticket, index)])
    return MinedProduct(tickets=[(ticket, index)])


# ---------------------------------------------------------------------------
# Mineur complet (utilisé par le simulateur)
# ---------------------------------------------------------------------------

@dataclass
class MinerStats:
    """Compteurs d'un mineur ; acceptés / orphelins / rejetés sont établis par l'observateur"""
    tickets_found: int = 0
    tickets_discarded: int = 0
    blocks_published: int = 0
    blocks_accepted: int = 0
    blocks_orphaned: int = 0
    blocks_rejected: int = 0

    def to_dict(self) -> Dict:
        return dict(self.__dict__)


class Miner:
    """
    Machine à états d'un mineur : sa réplique du registre, son générateur
    aléatoire, ses compteurs, ses tickets accumulés et son fork privé.
    """

    def __init__(self, config: MinerConfig, params: Params, replica: Ledger,
                 rng: np.random.Generator, payload_source: PayloadSource):
        config.check_target(params)
        self.config = config
        self.miner_id = config.miner_id
        self.params = params
        self.replica = replica
        self.rng = rng
        self.payload_source = payload_source
        self.stats = MinerStats()
        self.hoard: List[HoardedTicket] = []
        self.fork = None
        self.orphans: Dict[Hash256, Dict[Hash256, Block]] = {}
        if config.policy.kind == PolicyKind.PRIVATE_FORKER:
            self.fork = PrivateFork(target=config.policy.target, withhold_depth=config.policy.withhold_depth)

    @property
    def policy(self) -> Policy:
        return self.config.policy

    def adopt(self, block: Block) -> ApplyOutcome:
        """
        Applique un bloc à la réplique locale.

        Un bloc arrivé avant son parent attend dans le pool d'orphelins (indexé
        par prev_hash) ; il est appliqué dès que le parent est stocké, ainsi
        que ses propres descendants en attente.

        Returns:
            ApplyOutcome du bloc reçu (statut PARKED s'il attend son parent)
        """
        outcome = self.replica.apply_block(block)
        if outcome.status == ApplyStatus.REJECTED and outcome.reason == 'unknown_parent':
            self.orphans.setdefault(block.prev_hash, {})[outcome.block_id] = block
            return replace(outcome, status=ApplyStatus.PARKED)
        if outcome.accepted and self.orphans:
            self._adopt_orphans(outcome.block_id)
        return outcome

    def _adopt_orphans(self, parent_id: Hash256):
        pending = [parent_id]
        while pending:
            waiting = self.orphans.pop(pending.pop(), {})
            for child in waiting.values():
                outcome = self.replica.apply_block(child)
                if outcome.accepted:
                    pending.append(outcome.block_id)
                else:
                    logger.debug(f"Mineur {self.miner_id}: orphelin refusé ({outcome.reason})")

    @property
    def parked_count(self) -> int:
        return sum(len(waiting) for waiting in self.orphans.values())

    def _one(self, source, now: int) -> Optional[MinedProduct]:
        kind = self.policy.kind
        if kind == PolicyKind.HONEST:
            return honest_step(self.replica, self.params, self.rng, self.payload_source, self.miner_id, source)
        if kind == PolicyKind.TARGETED:
            return targeted_step(self.replica, self.params, self.rng, self.payload_source,
                                 self.policy.target, self.miner_id, source)
        if kind == PolicyKind.EQUIVOCATOR:
            return equivocate_step(self.replica, self.params, self.rng, self.payload_source,
                                   self.policy.copies, self.miner_id, source)
        if kind == PolicyKind.PRIVATE_FORKER:
            return private_fork_step(self.fork, self.replica, self.params, self.rng,
                                     self.payload_source, self.miner_id, source)
        if kind == PolicyKind.HOARDER:
            hoarded = hoard_ticket(self.replica, self.params, self.rng,
                                   release_time=now + self.policy.hold_duration, ticket_source=source)
            if hoarded is None:
                return None
            if self.policy.hold_duration == 0:
                return spend_hoarded(hoarded, self.replica, self.params, self.payload_source, self.miner_id)
            self.hoard.append(hoarded)
            return MinedProduct(tickets=[(hoarded.ticket, hoarded.chain_index)])
        raise ValueError(f"Politique inconnue: {kind}")

    def mine(self, source, now: int) -> List[MinedProduct]:
        """
        Consomme la source de tickets (budget d'essais ou ticket analytique).
        Les blocs produits sont appliqués à la réplique locale avant l'essai suivant.
        """
        products = []
        while source.remaining > 0:
            product = self._one(source, now)
            if product is None:
                break
            self._account(product)
            products.append(product)
        return products

    def release_hoard(self, now: int) -> List[MinedProduct]:
        """Dépense les tickets accumulés dont l'attente est écoulée"""
        due = [h for h in self.hoard if h.release_time <= now]
        self.hoard = [h for h in self.hoard if h.release_time > now]
        products = []
        for hoarded in due:
            product = spend_hoarded(hoarded, self.replica, self.params, self.payload_source, self.miner_id)
            product.tickets = []  # déjà comptés à la découverte
            self._account(product)
            products.append(product)
        return products

    def _account(self, product: MinedProduct):
        self.stats.tickets_found += len(product.tickets)
        self.stats.tickets_discarded += product.discarded_tickets
        for block in product.blocks:
            self.stats.blocks_published += 1
            outcome = self.adopt(block)
            if outcome.status == ApplyStatus.REJECTED:
                logger.debug(f"Mineur {self.miner_id}: bloc refusé par sa propre réplique ({outcome.reason})")
