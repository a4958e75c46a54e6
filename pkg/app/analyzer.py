"""
Analyse des traces de simulation : débit et facteur de parallélisme, uniformité
des index de chaîne, taux d'orphelins, coût du ciblage, équivocation et
courbes de rattrapage d'un attaquant
"""
import logging
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Union

import numpy as np
import pandas as pd
from scipy import stats

import config as app_config
from app.core import MultiStrandError, Params, Ticket, make_params, tips_tuple
from app.ledger import Ledger
from app.miner import PayloadSource, PrivateFork, honest_step, private_fork_step
from app.netsim import BLOCK_PUBLISHED, LatencyModel, SimTrace, replay
from app.parsers import ticket_counts
from app.utils import STREAM_CATCHUP, derive_rng, records_to_frame

logger = logging.getLogger(__name__)

THROUGHPUT_COLUMNS = ['strand', 'rate', 'total_rate', 'baseline_rate', 'scaling_factor']
UNIFORMITY_COLUMNS = ['strand', 'observed', 'expected', 'statistic', 'critical_value', 'p_value', 'passed']
ORPHAN_COLUMNS = ['orphan_rate', 'accepted_blocks', 'best_path_blocks', 'orphaned_blocks']
CATCHUP_COLUMNS = ['q', 'z', 'trials', 'successes', 'success_rate', 'oracle', 'nakamoto']
TARGETING_COLUMNS = ['miner_id', 'policy', 'tickets_found', 'tickets_discarded', 'discard_fraction',
                     'blocks_accepted', 'accepted_per_ticket']
SUMMARY_COLUMNS = ['metric', 'value']

MIN_SAMPLES_PER_STRAND = 50
MIN_CATCHUP_TRIALS = 100


class InsufficientSamplesError(MultiStrandError, ValueError):
    """Pas assez d'échantillons pour le test statistique"""


@dataclass
class ThroughputReport:
    per_strand_rate: List[float]
    total_rate: float
    baseline_rate: Optional[float] = None
    scaling_factor: Optional[float] = None
    best_path_blocks: int = 0
    duration: int = 0


@dataclass
class UniformityResult:
    counts: List[int]
    statistic: float
    critical_value: float
    p_value: float
    passed: bool
    significance: float = app_config.SIGNIFICANCE_LEVEL

    @property
    def samples(self) -> int:
        return int(sum(self.counts))


@dataclass
class CatchupPoint:
    z: int
    success_rate: float
    trials: int
    successes: int = 0
    oracle: float = 0.0
    nakamoto: float = 0.0

    @property
    def std_error(self) -> float:
        """Écart-type binomial sous la probabilité de l'oracle"""
        return float(np.sqrt(self.oracle * (1 - self.oracle) / self.trials))


@dataclass
class CatchupCurve:
    q: float
    points: List[CatchupPoint] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Débit
# ---------------------------------------------------------------------------

def attempts_per_time(config: Dict) -> float:
    """Puissance totale (essais par unité de temps) à partir de l'écho de configuration"""
    total = float(sum(m['hash_rate'] for m in config['miners']))
    if config.get('mode', 'analytic') == 'real_hash':
        return total / float(config.get('step_interval', app_config.DEFAULT_SIMULATION['step_interval']))
    return total


def throughput(trace: SimTrace, baseline: Optional[SimTrace] = None) -> ThroughputReport:
    """
    Blocs des meilleurs chemins par unité de temps, par chaîne et au total

    La référence doit avoir p = 0, la même puissance totale et le même travail
    par bloc sur une chaîne (difficulty_bits + p) ; un écart est signalé.

    Args:
        trace: Trace analysée
        baseline: Trace de référence à une seule chaîne (optionnelle)

    Returns:
        ThroughputReport
    """
    if trace.duration <= 0:
        raise ValueError("Trace de durée nulle")

    duration = trace.duration
    per_strand = [h / duration for h in trace.final_heights]
    total = float(sum(trace.final_heights)) / duration
    report = ThroughputReport(per_strand_rate=per_strand, total_rate=total,
                              best_path_blocks=int(sum(trace.final_heights)), duration=duration)

    if baseline is not None:
        if baseline.duration <= 0:
            raise ValueError("Trace de référence de durée nulle")
        base_params = baseline.params
        if base_params.strand_exponent_p != 0:
            raise ValueError(f"La référence doit avoir p = 0 (reçu p = {base_params.strand_exponent_p})")
        if base_params.strand_work_bits != trace.params.strand_work_bits:
            logger.warning(
                f"Travail par bloc différent: référence {base_params.strand_work_bits} bits, "
                f"trace {trace.params.strand_work_bits} bits"
            )
        ours, theirs = attempts_per_time(trace.config), attempts_per_time(baseline.config)
        if not np.isclose(ours, theirs, rtol=1e-9):
            logger.warning(f"Puissance totale différente: trace {ours}, référence {theirs}")

        report.baseline_rate = float(sum(baseline.final_heights)) / baseline.duration
        if report.baseline_rate > 0:
            report.scaling_factor = total / report.baseline_rate
    return report


# ---------------------------------------------------------------------------
# Uniformité
# ---------------------------------------------------------------------------

def uniformity_from_counts(counts: Sequence[int], significance: float = app_config.SIGNIFICANCE_LEVEL,
                           min_per_strand: int = MIN_SAMPLES_PER_STRAND) -> UniformityResult:
    """
    Test du khi-deux de Pearson contre la loi uniforme sur n cases

    Raises:
        InsufficientSamplesError: moins de 50n échantillons
    """
    counts = [int(c) for c in counts]
    n = len(counts)
    if n == 0:
        raise ValueError("Aucune case")
    total = sum(counts)
    if total < min_per_strand * n:
        raise InsufficientSamplesError(f"{total} échantillons, au moins {min_per_strand * n} requis pour n={n}")

    if n == 1:
        # Une seule case : aucun degré de liberté, l'uniformité est triviale
        return UniformityResult(counts=counts, statistic=0.0, critical_value=float('inf'),
                                p_value=1.0, passed=True, significance=significance)

    statistic, p_value = stats.chisquare(counts)
    critical = float(stats.chi2.ppf(1 - significance, n - 1))
    return UniformityResult(counts=counts, statistic=float(statistic), critical_value=critical,
                            p_value=float(p_value), passed=bool(statistic < critical), significance=significance)


def uniformity(sample: Union[SimTrace, Iterable[int]], n: Optional[int] = None,
               significance: float = app_config.SIGNIFICANCE_LEVEL) -> UniformityResult:
    """
    Uniformité des index de chaîne : tickets trouvés d'une trace, ou liste d'index

    Args:
        sample: SimTrace ou index de chaîne
        n: Nombre de chaînes (obligatoire pour une liste d'index)
    """
    if isinstance(sample, SimTrace):
        return uniformity_from_counts(ticket_counts(sample), significance)
    if n is None:
        raise ValueError("n est requis pour une liste d'index")
    counts = np.bincount(np.asarray(list(sample), dtype=np.int64), minlength=n)
    if len(counts) > n:
        raise ValueError(f"Index hors de [0, {n})")
    return uniformity_from_counts(counts.tolist(), significance)


# ---------------------------------------------------------------------------
# Orphelins, ciblage, équivocation
# ---------------------------------------------------------------------------

def orphan_rate(trace: SimTrace) -> float:
    """Part des blocs acceptés à un moment donné qui ne sont sur aucun meilleur chemin final"""
    accepted = int(sum(trace.stored_counts))
    if accepted == 0:
        return 0.0
    return (accepted - int(sum(trace.final_heights))) / accepted


def best_path_ids(trace: SimTrace, ledger: Optional[Ledger] = None) -> Set[str]:
    """Identifiants (hex) des blocs sur les meilleurs chemins finaux"""
    ledger = ledger or replay(trace)
    ids = set()
    for i in range(ledger.params.strand_count_n):
        ids.update(bid.hex() for bid in ledger.best_path(i))
    return ids


def targeting_waste(trace: SimTrace) -> List[Dict]:
    """Par mineur : tickets trouvés, jetés, part jetée, blocs acceptés, blocs acceptés par ticket"""
    policies = {m['miner_id']: m['policy']['kind'] for m in trace.config.get('miners', [])}
    rows = []
    for entry in trace.miner_stats:
        found = entry.get('tickets_found', 0)
        discarded = entry.get('tickets_discarded', 0)
        accepted = entry.get('blocks_accepted', 0)
        rows.append({
            'miner_id': entry['miner_id'],
            'policy': policies.get(entry['miner_id'], 'honest'),
            'tickets_found': found,
            'tickets_discarded': discarded,
            'discard_fraction': discarded / found if found else 0.0,
            'blocks_accepted': accepted,
            'accepted_per_ticket': accepted / found if found else 0.0,
        })
    return rows


def parallel_acceptances(trace: SimTrace, window: Optional[int] = None,
                         best_ids: Optional[Set[str]] = None) -> int:
    """
    Paires de blocs publiés à moins de `window` unités d'intervalle, sur des
    chaînes différentes, et tous deux sur les meilleurs chemins finaux

    Args:
        window: Fenêtre de temps (par défaut la latence maximale de la simulation)
    """
    if window is None:
        latency = trace.config.get('latency_model', {'kind': 'zero'})
        window = LatencyModel(**latency).max_delay
    best_ids = best_ids if best_ids is not None else best_path_ids(trace)

    published = [e for e in trace.events if e.kind == BLOCK_PUBLISHED and e.block_id in best_ids]
    pairs = 0
    recent = deque()
    per_strand = Counter()
    for event in published:
        while recent and event.time - recent[0].time > window:
            per_strand[recent.popleft().strand] -= 1
        pairs += len(recent) - per_strand[event.strand]
        recent.append(event)
        per_strand[event.strand] += 1
    return pairs


def height_spread(trace: SimTrace) -> int:
    heights = list(trace.final_heights)
    return max(heights) - min(heights) if heights else 0


def equivocation_survivors(trace: SimTrace, best_ids: Optional[Set[str]] = None) -> int:
    """Nombre maximal de blocs d'un même ticket présents sur les meilleurs chemins"""
    best_ids = best_ids if best_ids is not None else best_path_ids(trace)
    per_ticket = Counter(
        e.extra.get('ticket_hash') for e in trace.events
        if e.kind == BLOCK_PUBLISHED and e.block_id in best_ids
    )
    return max(per_ticket.values()) if per_ticket else 0


# ---------------------------------------------------------------------------
# Rattrapage
# ---------------------------------------------------------------------------

def _check_q(q: float):
    if not 0 < q < 1:
        raise ValueError(f"q doit être dans ]0, 1[ (reçu {q})")


def race_probability(q: float, z: int) -> float:
    """
    Ruine du joueur : un attaquant à z blocs de retard, avec une part q des
    tickets de la chaîne, devient un jour strictement plus long
    """
    _check_q(q)
    if z < 0:
        raise ValueError("z doit être positif ou nul")
    if q >= 0.5:
        return 1.0
    return float((q / (1 - q)) ** (z + 1))


def nakamoto_probability(q: float, z: int) -> float:
    """Formule de double dépense à la Nakamoto (progrès de l'attaquant poissonnien)"""
    _check_q(q)
    if q >= 0.5:
        return 1.0
    p = 1 - q
    lam = z * q / p
    k = np.arange(z + 1)
    terms = stats.poisson.pmf(k, lam) * (1 - (q / p) ** (z - k))
    return float(1 - terms.sum())


class _StrandTickets:
    """Un ticket analytique dont l'index est imposé (course sur une seule chaîne)"""

    def __init__(self, rng: np.random.Generator, strand: int):
        self.rng = rng
        self.strand = strand
        self.remaining = 1

    def draw(self, tips, pubkey):
        if self.remaining <= 0:
            return None
        self.remaining -= 1
        return Ticket(tip_hashes=tips_tuple(tips), pubkey=pubkey, nonce=int(self.rng.integers(0, 2 ** 63))), self.strand


def run_race(params: Params, q: float, z: int, rng: np.random.Generator,
             margin: int = app_config.CATCHUP_MARGIN, max_events: int = app_config.CATCHUP_MAX_EVENTS,
             payload_source: Optional[PayloadSource] = None, target: int = 0) -> bool:
    """
    Une course : la chaîne cible publique a z blocs d'avance sur le fork privé
    partant de la genèse ; chaque ticket de la chaîne cible revient à l'attaquant
    avec la probabilité q.

    Returns:
        True si le fork publié devient la meilleure chaîne
    """
    payload_source = payload_source or PayloadSource(payload_size=16, algo=params.hash_algo_id)
    ledger = Ledger(params, verify_work=False)

    def honest_block():
        product = honest_step(ledger, params, rng, payload_source, miner_id=0,
                              ticket_source=_StrandTickets(rng, target))
        ledger.apply_block(product.blocks[0])

    for _ in range(z):
        honest_block()

    state = PrivateFork(target=target, withhold_depth=z + margin)
    state.start_from(ledger.strands[target].genesis_id, 0)

    for _ in range(max_events):
        if rng.random() < q:
            product = private_fork_step(state, ledger, params, rng, payload_source, miner_id=1,
                                        ticket_source=_StrandTickets(rng, target))
            if product is not None and product.blocks:
                for block in product.blocks:
                    ledger.apply_block(block)
                return ledger.strands[target].best_tip == ledger.block_id(product.blocks[-1])
        else:
            honest_block()
            if state.deficit(ledger) > state.withhold_depth:
                return False
    return False


def catchup(template: Optional[Params], q: float, z_values: Sequence[int], trials: int,
            seed: int = 0, margin: int = app_config.CATCHUP_MARGIN) -> CatchupCurve:
    """
    Courbe de rattrapage : taux de succès estimé pour chaque z, avec l'oracle de
    ruine du joueur et la formule de Nakamoto en colonnes de référence

    Args:
        template: Paramètres du registre de course (p=1, difficulté 0 par défaut)
        q: Part de l'attaquant
        z_values: Retards de départ
        trials: Courses par valeur de z (>= 100)
        seed: Graine ; chaque course a sa sous-graine (seed, z, essai)
    """
    _check_q(q)
    if trials < MIN_CATCHUP_TRIALS:
        raise ValueError(f"Au moins {MIN_CATCHUP_TRIALS} courses par point (reçu {trials})")
    params = template or make_params(1, 0)

    logger.info("=" * 60)
    logger.info(f"COURSES DE RATTRAPAGE - q={q}, z={list(z_values)}, {trials} essais")
    logger.info("=" * 60)

    curve = CatchupCurve(q=q)
    for z in z_values:
        successes = sum(
            run_race(params, q, int(z), derive_rng(seed, STREAM_CATCHUP, int(z), trial), margin=margin)
            for trial in range(trials)
        )
        point = CatchupPoint(z=int(z), success_rate=successes / trials, trials=trials, successes=successes,
                             oracle=race_probability(q, int(z)), nakamoto=nakamoto_probability(q, int(z)))
        logger.info(f"z={z}: {successes}/{trials} succès ({point.success_rate:.4f}, oracle {point.oracle:.4f})")
        curve.points.append(point)
    return curve


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------

def throughput_frame(report: ThroughputReport) -> pd.DataFrame:
    rows = [{
        'strand': i,
        'rate': rate,
        'total_rate': report.total_rate,
        'baseline_rate': report.baseline_rate,
        'scaling_factor': report.scaling_factor,
    } for i, rate in enumerate(report.per_strand_rate)]
    return records_to_frame(rows, THROUGHPUT_COLUMNS)


def uniformity_frame(result: UniformityResult) -> pd.DataFrame:
    expected = result.samples / len(result.counts)
    rows = [{
        'strand': i,
        'observed': count,
        'expected': expected,
        'statistic': result.statistic,
        'critical_value': result.critical_value,
        'p_value': result.p_value,
        'passed': result.passed,
    } for i, count in enumerate(result.counts)]
    return records_to_frame(rows, UNIFORMITY_COLUMNS)


def orphans_frame(trace: SimTrace) -> pd.DataFrame:
    accepted = int(sum(trace.stored_counts))
    best = int(sum(trace.final_heights))
    return records_to_frame([{
        'orphan_rate': orphan_rate(trace),
        'accepted_blocks': accepted,
        'best_path_blocks': best,
        'orphaned_blocks': accepted - best,
    }], ORPHAN_COLUMNS)


def catchup_frame(curve: CatchupCurve) -> pd.DataFrame:
    rows = [{
        'q': curve.q,
        'z': point.z,
        'trials': point.trials,
        'successes': point.successes,
        'success_rate': point.success_rate,
        'oracle': point.oracle,
        'nakamoto': point.nakamoto,
    } for point in curve.points]
    return records_to_frame(rows, CATCHUP_COLUMNS)


def targeting_frame(trace: SimTrace) -> pd.DataFrame:
    return records_to_frame(targeting_waste(trace), TARGETING_COLUMNS)


def write_report(frame: pd.DataFrame, path, fmt: str = 'csv'):
    """CSV avec en-tête fixe, ou une ligne JSON par enregistrement"""
    if fmt == 'csv':
        frame.to_csv(path, index=False)
    elif fmt == 'jsonl':
        frame.to_json(path, orient='records', lines=True)
    else:
        raise ValueError(f"Format de rapport inconnu: {fmt}")


class TraceAnalyzer:
    """
    Rapport complet sur une trace : débit, uniformité, orphelins, ciblage,
    équivocation et parallélisme
    """

    def __init__(self, config: Dict = None):
        """
        Initialize l'analyseur

        Args:
            config: Configuration (significance, window)
        """
        self.config = config or {}
        self.significance = self.config.get('significance', app_config.SIGNIFICANCE_LEVEL)
        self.window = self.config.get('window')

        self.trace = None
        self.ledger = None
        self.best_ids = set()
        self.results = {}

    def analyze(self, trace: SimTrace, baseline: Optional[SimTrace] = None) -> Dict:
        """
        Lance l'analyse complète

        Args:
            trace: Trace analysée
            baseline: Trace de référence à une seule chaîne (optionnelle)

        Returns:
            Dictionnaire avec tous les résultats
        """
        logger.info("=" * 60)
        logger.info("ANALYSE DE LA TRACE - DEBUT")
        logger.info("=" * 60)

        self.trace = trace
        self.results = {}

        # Étape 1: Rejeu et meilleurs chemins
        self._replay()

        # Étape 2: Débit
        self._throughput(baseline)

        # Étape 3: Uniformité des index
        self._uniformity()

        # Étape 4: Orphelins, équivocation, parallélisme
        self._forks()

        # Étape 5: Ciblage
        self._targeting()

        logger.info("=" * 60)
        logger.info("ANALYSE DE LA TRACE - FIN")
        logger.info("=" * 60)
        return self.results

    def _replay(self):
        logger.info("\n1. REJEU DE LA TRACE")
        logger.info("-" * 60)
        self.ledger = replay(self.trace)
        self.best_ids = best_path_ids(self.trace, self.ledger)
        logger.info(f"Hauteurs finales vérifiées: {self.ledger.heights()}")

    def _throughput(self, baseline: Optional[SimTrace]):
        logger.info("\n2. DEBIT")
        logger.info("-" * 60)
        report = throughput(self.trace, baseline)
        self.results['throughput'] = report
        logger.info(f"Débit total: {report.total_rate:.6f} blocs/unité")
        if report.scaling_factor is not None:
            logger.info(f"Facteur par rapport à la référence: {report.scaling_factor:.3f}")

    def _uniformity(self):
        logger.info("\n3. UNIFORMITE DES INDEX DE CHAINE")
        logger.info("-" * 60)
        try:
            result = uniformity_from_counts(ticket_counts(self.trace), self.significance)
        except InsufficientSamplesError as e:
            logger.warning(f"Uniformité non testée: {e}")
            result = None
        self.results['uniformity'] = result
        if result is not None:
            logger.info(f"Khi-deux: {result.statistic:.3f} (seuil {result.critical_value:.3f}), "
                        f"{'OK' if result.passed else 'ECHEC'}")

    def _forks(self):
        logger.info("\n4. ORPHELINS ET EQUIVOCATION")
        logger.info("-" * 60)
        self.results['orphan_rate'] = orphan_rate(self.trace)
        self.results['equivocation_survivors'] = equivocation_survivors(self.trace, self.best_ids)
        self.results['parallel_acceptances'] = parallel_acceptances(self.trace, self.window, self.best_ids)
        self.results['height_spread'] = height_spread(self.trace)
        logger.info(f"Taux d'orphelins: {self.results['orphan_rate']:.4f}")
        logger.info(f"Blocs max par ticket sur les meilleurs chemins: {self.results['equivocation_survivors']}")

    def _targeting(self):
        logger.info("\n5. COUT DU CIBLAGE")
        logger.info("-" * 60)
        self.results['targeting'] = targeting_waste(self.trace)
        for row in self.results['targeting']:
            if row['tickets_discarded']:
                logger.info(f"Mineur {row['miner_id']}: {row['discard_fraction']:.3f} des tickets jetés")

    def summary_frame(self) -> pd.DataFrame:
        report = self.results.get('throughput')
        uniform = self.results.get('uniformity')
        rows = [
            {'metric': 'duration', 'value': self.trace.duration},
            {'metric': 'strand_count', 'value': self.trace.params.strand_count_n},
            {'metric': 'best_path_blocks', 'value': report.best_path_blocks if report else None},
            {'metric': 'total_rate', 'value': report.total_rate if report else None},
            {'metric': 'scaling_factor', 'value': report.scaling_factor if report else None},
            {'metric': 'orphan_rate', 'value': self.results.get('orphan_rate')},
            {'metric': 'height_spread', 'value': self.results.get('height_spread')},
            {'metric': 'parallel_acceptances', 'value': self.results.get('parallel_acceptances')},
            {'metric': 'equivocation_survivors', 'value': self.results.get('equivocation_survivors')},
            {'metric': 'chi_square', 'value': uniform.statistic if uniform else None},
            {'metric': 'uniformity_passed', 'value': uniform.passed if uniform else None},
        ]
        return records_to_frame(rows, SUMMARY_COLUMNS)
