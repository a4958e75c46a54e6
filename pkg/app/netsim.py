"""
Simulateur à événements discrets : mineurs, latence de propagation et boucle
d'événements produisant des traces reproductibles (modes real_hash et analytic).
"""
import heapq
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from app.core import (
    Block, Hash256, MultiStrandError, Params, Ticket, deserialize_block, make_params,
    serialize_block, serialize_ticket, ticket_digest, SerializationError,
)
from app.ledger import ApplyStatus, Ledger
from app.miner import AnalyticTickets, Miner, MinerConfig, PayloadSource, RealHashTickets
from app.utils import STREAM_LATENCY, check_seed, derive_rng, format_heights

logger = logging.getLogger(__name__)

MODES = ('analytic', 'real_hash')
LATENCY_KINDS = ('zero', 'fixed', 'uniform')

# Types d'événements de la trace
TICKET_FOUND = 'ticket_found'
BLOCK_PUBLISHED = 'block_published'
BLOCK_ARRIVAL = 'block_arrival'
FORK_RESOLVED = 'fork_resolved'
SUMMARY = 'summary'
EVENT_KINDS = (TICKET_FOUND, BLOCK_PUBLISHED, BLOCK_ARRIVAL, FORK_RESOLVED)

# Ordre de traitement à temps égal : réceptions, puis tickets accumulés, puis minage
ORDER_ARRIVAL = 0
ORDER_RELEASE = 1
ORDER_MINING = 2


class IntegrityError(MultiStrandError):
    """La trace rejouée ne reproduit pas l'état final enregistré"""


@dataclass(frozen=True)
class LatencyModel:
    kind: str = 'zero'
    delay: int = 0
    lo: int = 0
    hi: int = 0

    def __post_init__(self):
        if self.kind not in LATENCY_KINDS:
            raise ValueError(f"Modèle de latence inconnu: {self.kind}")
        if self.delay < 0:
            raise ValueError("La latence fixe doit être positive ou nulle")
        if self.kind == 'uniform' and not 0 <= self.lo <= self.hi:
            raise ValueError(f"Latence uniforme invalide: lo={self.lo}, hi={self.hi}")

    def sample(self, rng: np.random.Generator) -> int:
        if self.kind == 'fixed':
            return self.delay
        if self.kind == 'uniform':
            return int(rng.integers(self.lo, self.hi + 1))
        return 0

    @property
    def max_delay(self) -> int:
        return {'zero': 0, 'fixed': self.delay, 'uniform': self.hi}[self.kind]

    def to_dict(self) -> Dict:
        if self.kind == 'fixed':
            return {'kind': 'fixed', 'delay': self.delay}
        if self.kind == 'uniform':
            return {'kind': 'uniform', 'lo': self.lo, 'hi': self.hi}
        return {'kind': 'zero'}


@dataclass(frozen=True)
class SimConfig:
    """
    Configuration d'une simulation.

    hash_rate est un nombre d'essais par unité de temps en mode analytic et un
    nombre d'essais par étape de minage (tous les step_interval) en mode real_hash.
    """
    params: Params
    miners: Tuple[MinerConfig, ...]
    latency_model: LatencyModel = field(default_factory=LatencyModel)
    mode: str = 'analytic'
    duration: int = 1_000_000
    seed: int = 0
    step_interval: int = 1_000
    payload_size: int = 64
    record_arrivals: bool = True

    def __post_init__(self):
        object.__setattr__(self, 'miners', tuple(self.miners))
        if not self.miners:
            raise ValueError("Au moins un mineur est requis")
        ids = [m.miner_id for m in self.miners]
        if len(set(ids)) != len(ids):
            raise ValueError("Identifiants de mineurs en double")
        if any(not 0 <= i < 2 ** 32 for i in ids):
            raise ValueError("Les identifiants de mineurs doivent tenir sur 32 bits")
        if self.mode not in MODES:
            raise ValueError(f"Mode inconnu: {self.mode} (attendu: {', '.join(MODES)})")
        if self.duration <= 0:
            raise ValueError("La durée doit être > 0")
        if self.step_interval <= 0:
            raise ValueError("step_interval doit être > 0")
        if self.payload_size < 0:
            raise ValueError("payload_size doit être positif ou nul")
        check_seed(self.seed)
        for miner in self.miners:
            miner.check_target(self.params)
            if self.mode == 'real_hash' and miner.hash_rate < 1:
                raise ValueError(f"Mineur {miner.miner_id}: en mode real_hash, hash_rate compte des essais par étape (>= 1)")

    @property
    def total_hash_rate(self) -> float:
        return float(sum(m.hash_rate for m in self.miners))

    def ticket_rate(self, miner: MinerConfig) -> float:
        """Tickets attendus par unité de temps pour ce mineur"""
        attempts = miner.hash_rate if self.mode == 'analytic' else miner.hash_rate / self.step_interval
        return attempts * 2.0 ** -self.params.difficulty_bits

    def attempts_per_time(self) -> float:
        """Puissance de calcul totale, en essais par unité de temps"""
        if self.mode == 'analytic':
            return self.total_hash_rate
        return self.total_hash_rate / self.step_interval

    def with_overrides(self, seed: Optional[int] = None, mode: Optional[str] = None) -> 'SimConfig':
        changes = {}
        if seed is not None:
            changes['seed'] = seed
        if mode is not None:
            changes['mode'] = mode
        return replace(self, **changes) if changes else self

    def to_dict(self) -> Dict:
        return {
            'params': self.params.to_dict(),
            'miners': [m.to_dict() for m in self.miners],
            'latency_model': self.latency_model.to_dict(),
            'mode': self.mode,
            'duration': self.duration,
            'seed': self.seed,
            'step_interval': self.step_interval,
            'payload_size': self.payload_size,
            'record_arrivals': self.record_arrivals,
        }


@dataclass
class SimEvent:
    time: int
    kind: str
    miner: Optional[int] = None
    strand: Optional[int] = None
    block_id: Optional[str] = None
    depth: Optional[int] = None
    extra: Dict = field(default_factory=dict)

    def to_record(self) -> Dict:
        record = {
            'time': self.time,
            'kind': self.kind,
            'miner': self.miner,
            'strand': self.strand,
            'block_id': self.block_id,
            'depth': self.depth,
        }
        record.update(self.extra)
        return record


@dataclass
class SimTrace:
    """Journal d'une simulation : écho de la configuration, événements ordonnés, bilan final"""
    config: Dict
    events: List[SimEvent]
    final_heights: List[int]
    stored_counts: List[int]
    miner_stats: List[Dict] = field(default_factory=list)

    @property
    def params(self) -> Params:
        p = self.config['params']
        return make_params(p['strand_exponent_p'], p['difficulty_bits'], p.get('hash_algo_id', 'sha256'),
                           p.get('sig_algo_id', 'ed25519'))

    @property
    def mode(self) -> str:
        return self.config.get('mode', 'analytic')

    @property
    def duration(self) -> int:
        return int(self.config['duration'])

    def events_of(self, kind: str) -> Iterator[SimEvent]:
        return (e for e in self.events if e.kind == kind)

    def summary_record(self) -> Dict:
        return {
            'time': self.duration,
            'kind': SUMMARY,
            'config': self.config,
            'final_heights': list(self.final_heights),
            'stored_counts': list(self.stored_counts),
            'miner_stats': self.miner_stats,
            'event_count': len(self.events),
        }


# ---------------------------------------------------------------------------
# File d'événements
# ---------------------------------------------------------------------------

class EventQueue:
    """Tas ordonné par (temps, ordre du type, mineur, numéro d'insertion)"""

    def __init__(self):
        self._heap = []
        self._seq = 0

    def push(self, time: int, order: int, miner_id: int, action: str, payload=None):
        heapq.heappush(self._heap, (int(time), order, miner_id, self._seq, action, payload))
        self._seq += 1

    def pop(self):
        time, order, miner_id, _, action, payload = heapq.heappop(self._heap)
        return time, order, miner_id, action, payload

    def __len__(self) -> int:
        return len(self._heap)

    def pending(self, action: str) -> int:
        """Nombre d'événements encore planifiés pour cette action"""
        return sum(1 for entry in self._heap if entry[4] == action)


@dataclass(frozen=True)
class Publication:
    time: int
    miner_id: int
    block: Block
    block_id: Hash256


@dataclass(frozen=True)
class ScheduledArrival:
    time: int
    recipient: int
    block_id: Hash256


def deliver(queue: EventQueue, latency_model: LatencyModel, rng: np.random.Generator,
            publication: Publication, recipients: Sequence[int]) -> List[ScheduledArrival]:
    """
    Planifie la réception d'un bloc publié par chaque autre mineur

    Returns:
        Les arrivées planifiées (temps = publication + latence tirée)
    """
    arrivals = []
    for recipient in recipients:
        if recipient == publication.miner_id:
            continue
        at = publication.time + latency_model.sample(rng)
        queue.push(at, ORDER_ARRIVAL, recipient, 'arrival', publication)
        arrivals.append(ScheduledArrival(time=at, recipient=recipient, block_id=publication.block_id))
    return arrivals


# ---------------------------------------------------------------------------
# Simulateur
# ---------------------------------------------------------------------------

class NetworkSimulator:
    """
    Fait tourner une simulation complète.

    Chaque mineur détient une réplique complète du registre ; un registre
    observateur applique chaque bloc au moment de sa publication et fournit
    l'état final de la trace.

    Args:
        config: Configuration de la simulation
        on_event: Rappel appelé après chaque événement traité (tests de cohérence)
    """

    def __init__(self, config: SimConfig, on_event: Optional[Callable[['NetworkSimulator'], None]] = None):
        self.config = config
        self.params = config.params
        self.on_event = on_event

        self.queue = EventQueue()
        self.events: List[SimEvent] = []
        self.verdict_cache: Dict = {}
        self.miners: Dict[int, Miner] = {}
        self.observer: Optional[Ledger] = None
        self.latency_rng = derive_rng(config.seed, STREAM_LATENCY)
        self.payload_source = PayloadSource(config.payload_size, self.params.hash_algo_id)

        self._miner_ids: List[int] = []
        self._clocks: Dict[int, float] = {}
        self._timing_rngs: Dict[int, np.random.Generator] = {}
        self._published: List[Tuple[Hash256, int, bool]] = []  # (bloc, mineur, accepté par l'observateur)
        self.processed = 0
        self.now = 0

    def run(self) -> SimTrace:
        logger.info("=" * 60)
        logger.info("SIMULATION - DEBUT")
        logger.info("=" * 60)

        # Étape 1: Mineurs et répliques
        self._initialize()

        # Étape 2: Premiers événements de minage
        self._schedule_initial()

        # Étape 3: Boucle d'événements
        self._event_loop()

        # Étape 4: Bilan
        trace = self._build_trace()

        logger.info("=" * 60)
        logger.info("SIMULATION - FIN")
        logger.info("=" * 60)
        return trace

    def _initialize(self):
        logger.info("\n1. INITIALISATION DES MINEURS")
        logger.info("-" * 60)

        cfg = self.config
        verify_work = cfg.mode == 'real_hash'
        self.observer = Ledger(self.params, verify_work=verify_work, verdict_cache=self.verdict_cache)

        for miner_config in sorted(cfg.miners, key=lambda m: m.miner_id):
            mid = miner_config.miner_id
            replica = Ledger(self.params, verify_work=verify_work, verdict_cache=self.verdict_cache)
            self.miners[mid] = Miner(miner_config, self.params, replica, derive_rng(cfg.seed, mid), self.payload_source)
            self._timing_rngs[mid] = derive_rng(cfg.seed, mid, 1)
            self._clocks[mid] = 0.0
        self._miner_ids = sorted(self.miners)

        policies = {}
        for miner_config in cfg.miners:
            policies[miner_config.policy.kind.value] = policies.get(miner_config.policy.kind.value, 0) + 1
        logger.info(f"Mode: {cfg.mode}, n={self.params.strand_count_n}, difficulté={self.params.difficulty_bits} bits")
        logger.info(f"Mineurs: {len(self.miners)} ({', '.join(f'{k}={v}' for k, v in sorted(policies.items()))})")
        logger.info(f"Latence: {cfg.latency_model.to_dict()}, durée: {cfg.duration}, graine: {cfg.seed}")

    def _schedule_initial(self):
        logger.info("\n2. PLANIFICATION")
        logger.info("-" * 60)
        for mid in self._miner_ids:
            if self.config.mode == 'analytic':
                self._schedule_next_ticket(mid)
            else:
                self._schedule_step(mid, self.config.step_interval)
        logger.info(f"Événements initiaux: {len(self.queue)}")

    def _schedule_next_ticket(self, mid: int):
        rate = self.config.ticket_rate(self.miners[mid].config)
        self._clocks[mid] += float(self._timing_rngs[mid].exponential(1.0 / rate))
        at = int(self._clocks[mid])
        if at <= self.config.duration:
            self.queue.push(at, ORDER_MINING, mid, 'ticket')

    def _schedule_step(self, mid: int, at: int):
        if at <= self.config.duration:
            self.queue.push(at, ORDER_MINING, mid, 'step')

    def _event_loop(self):
        logger.info("\n3. BOUCLE D'EVENEMENTS")
        logger.info("-" * 60)

        cfg = self.config
        while self.queue:
            time, _, mid, action, payload = self.queue.pop()
            if time > cfg.duration:
                break
            self.now = time

            if action == 'arrival':
                self._on_arrival(time, mid, payload)
            elif action == 'release':
                self._on_release(time, mid)
            elif action == 'ticket':
                miner = self.miners[mid]
                self._on_mining(time, mid, AnalyticTickets(self.params, miner.rng))
                self._schedule_next_ticket(mid)
            elif action == 'step':
                self._on_mining(time, mid, RealHashTickets(self.params, budget=int(self.miners[mid].config.hash_rate)))
                self._schedule_step(mid, time + cfg.step_interval)

            self.processed += 1
            if self.on_event is not None:
                self.on_event(self)

        logger.info(f"Événements traités: {self.processed}, enregistrés: {len(self.events)}")

    def _on_mining(self, time: int, mid: int, source):
        miner = self.miners[mid]
        hoarded_before = len(miner.hoard)
        for product in miner.mine(source, time):
            for ticket, index in product.tickets:
                self._record_ticket(time, mid, ticket, index)
            for block in product.blocks:
                self._publish(time, mid, block)

        for hoarded in miner.hoard[hoarded_before:]:
            if hoarded.release_time <= self.config.duration:
                self.queue.push(hoarded.release_time, ORDER_RELEASE, mid, 'release')

    def _on_release(self, time: int, mid: int):
        for product in self.miners[mid].release_hoard(time):
            for block in product.blocks:
                self._publish(time, mid, block)

    def _on_arrival(self, time: int, mid: int, publication: Publication):
        outcome = self.miners[mid].adopt(publication.block)
        if self.config.record_arrivals:
            self.events.append(SimEvent(
                time=time, kind=BLOCK_ARRIVAL, miner=mid, strand=publication.block.chain_index,
                block_id=publication.block_id.hex(),
                depth=outcome.depth if outcome.status == ApplyStatus.CAUSED_REORG else None,
                extra={'status': outcome.status.value},
            ))

    def _record_ticket(self, time: int, mid: int, ticket: Ticket, index: int):
        self.events.append(SimEvent(
            time=time, kind=TICKET_FOUND, miner=mid, strand=index,
            extra={
                'ticket_hash': ticket_digest(ticket, self.params.hash_algo_id).hex(),
                'ticket': serialize_ticket(ticket).hex(),
            },
        ))

    def _publish(self, time: int, mid: int, block: Block):
        bid = self.observer.block_id(block)
        self.events.append(SimEvent(
            time=time, kind=BLOCK_PUBLISHED, miner=mid, strand=block.chain_index, block_id=bid.hex(),
            extra={
                'ticket_hash': ticket_digest(block.ticket, self.params.hash_algo_id).hex(),
                'block': serialize_block(block).hex(),
            },
        ))

        outcome = self.observer.apply_block(block)
        self._published.append((bid, mid, outcome.accepted))
        if outcome.status == ApplyStatus.CAUSED_REORG:
            self.events.append(SimEvent(
                time=time, kind=FORK_RESOLVED, miner=mid, strand=block.chain_index,
                block_id=bid.hex(), depth=outcome.depth,
            ))
            logger.debug(f"t={time}: réorganisation de profondeur {outcome.depth} sur la chaîne {block.chain_index}")

        deliver(self.queue, self.config.latency_model, self.latency_rng,
                Publication(time=time, miner_id=mid, block=block, block_id=bid), self._miner_ids)

    def _build_trace(self) -> SimTrace:
        logger.info("\n4. BILAN")
        logger.info("-" * 60)

        best = set()
        for i in range(self.params.strand_count_n):
            best.update(self.observer.best_path(i))

        for bid, mid, accepted in self._published:
            stats = self.miners[mid].stats
            if not accepted:
                stats.blocks_rejected += 1
            elif bid in best:
                stats.blocks_accepted += 1
            else:
                stats.blocks_orphaned += 1

        miner_stats = [{'miner_id': mid, **self.miners[mid].stats.to_dict()} for mid in self._miner_ids]
        heights = self.observer.heights()
        logger.info(f"Hauteurs finales: {format_heights(heights)}")
        logger.info(f"Blocs publiés: {len(self._published)}, sur les meilleurs chemins: {sum(heights)}")

        return SimTrace(
            config=self.config.to_dict(),
            events=self.events,
            final_heights=heights,
            stored_counts=self.observer.stored_counts(),
            miner_stats=miner_stats,
        )


def run(config: SimConfig, on_event: Optional[Callable[[NetworkSimulator], None]] = None) -> SimTrace:
    """Trace déterministe, fonction pure de la configuration (graine comprise)"""
    return NetworkSimulator(config, on_event=on_event).run()


# ---------------------------------------------------------------------------
# Rejeu et écriture
# ---------------------------------------------------------------------------

def replay(trace: SimTrace) -> Ledger:
    """
    Ré-applique les blocs publiés, dans l'ordre, à un registre neuf

    Raises:
        IntegrityError: si les hauteurs finales ou le nombre de blocs stockés diffèrent
    """
    params = trace.params
    ledger = Ledger(params, verify_work=trace.mode == 'real_hash')

    for event in trace.events:
        if event.kind != BLOCK_PUBLISHED:
            continue
        try:
            block, _ = deserialize_block(bytes.fromhex(event.extra['block']), params)
        except (KeyError, ValueError, SerializationError) as e:
            raise IntegrityError(f"Bloc illisible dans la trace (t={event.time}): {e}") from e
        ledger.apply_block(block)

    heights = ledger.heights()
    if list(trace.final_heights) != heights:
        raise IntegrityError(f"Hauteurs rejouées {heights} != hauteurs enregistrées {list(trace.final_heights)}")
    if trace.stored_counts is not None and list(trace.stored_counts) != ledger.stored_counts():
        raise IntegrityError(
            f"Blocs stockés rejoués {ledger.stored_counts()} != enregistrés {list(trace.stored_counts)}"
        )
    return ledger


def _dump(record: Dict) -> str:
    return json.dumps(record, separators=(',', ':'), ensure_ascii=True)


def trace_lines(trace: SimTrace) -> Iterator[str]:
    """Une ligne JSON par événement, puis la ligne de bilan"""
    for event in trace.events:
        yield _dump(event.to_record())
    yield _dump(trace.summary_record())


def write_trace(trace: SimTrace, path) -> Path:
    path = Path(path)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for line in trace_lines(trace):
            f.write(line)
            f.write('\n')
    logger.info(f"Trace écrite: {path} ({len(trace.events)} événements)")
    return path
