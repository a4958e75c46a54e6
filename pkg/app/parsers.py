"""
Modules de parsing : fichiers de configuration de simulation (YAML) et traces
(une ligne JSON par événement, ligne de bilan en dernier)
"""
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd
import yaml

import config as app_config
from app.core import MultiStrandError, Params, make_params
from app.miner import MinerConfig, Policy, PolicyKind
from app.netsim import (
    BLOCK_PUBLISHED, EVENT_KINDS, SUMMARY, TICKET_FOUND, LatencyModel, SimConfig, SimEvent, SimTrace,
)

logger = logging.getLogger(__name__)

TOP_LEVEL_KEYS = {'params', 'miners', 'latency_model', 'mode', 'duration', 'seed',
                  'step_interval', 'payload_size', 'record_arrivals'}
PARAM_KEYS = {'strand_exponent_p', 'difficulty_bits', 'hash_algo_id', 'sig_algo_id'}
MINER_KEYS = {'miner_id', 'hash_rate', 'policy', 'count'}
POLICY_KEYS = {
    PolicyKind.HONEST: set(),
    PolicyKind.TARGETED: {'target'},
    PolicyKind.HOARDER: {'hold_duration'},
    PolicyKind.EQUIVOCATOR: {'copies'},
    PolicyKind.PRIVATE_FORKER: {'target', 'withhold_depth'},
}
EVENT_FIELDS = ['time', 'kind', 'miner', 'strand', 'block_id', 'depth']


class ConfigError(MultiStrandError):
    """Fichier de configuration illisible ou incohérent"""


class TraceFormatError(MultiStrandError):
    """Trace mal formée"""


def _check_keys(section: Dict, allowed: set, where: str):
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"Clés inconnues dans {where}: {unknown}")


def build_params(section: Optional[Dict]) -> Params:
    """Params à partir de la section `params`, complétée par config.DEFAULT_PARAMS"""
    section = section or {}
    if not isinstance(section, dict):
        raise ConfigError("La section params doit être un dictionnaire")
    _check_keys(section, PARAM_KEYS, 'params')
    merged = {**app_config.DEFAULT_PARAMS, **section}
    try:
        return make_params(
            int(merged['strand_exponent_p']),
            int(merged['difficulty_bits']),
            str(merged['hash_algo_id']),
            str(merged['sig_algo_id']),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Paramètres invalides: {e}") from e


def build_policy(section) -> Policy:
    if section is None:
        return Policy()
    if isinstance(section, str):
        section = {'kind': section}
    if not isinstance(section, dict) or 'kind' not in section:
        raise ConfigError(f"Politique invalide: {section!r}")
    try:
        kind = PolicyKind(section['kind'])
    except ValueError:
        raise ConfigError(f"Politique inconnue: {section['kind']}") from None
    _check_keys(section, POLICY_KEYS[kind] | {'kind'}, f"policy {kind.value}")
    options = {k: int(v) for k, v in section.items() if k != 'kind'}
    return Policy(kind=kind, **options)


def build_miners(entries) -> List[MinerConfig]:
    """
    Développe la liste des mineurs ; `count` crée des identifiants consécutifs

    Args:
        entries: Liste de dictionnaires {miner_id, hash_rate, policy, count}

    Returns:
        Liste de MinerConfig
    """
    if not isinstance(entries, list) or not entries:
        raise ConfigError("La section miners doit être une liste non vide")

    miners = []
    next_id = 0
    for position, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise ConfigError(f"Mineur #{position}: un dictionnaire est attendu")
        _check_keys(entry, MINER_KEYS, f"miners[{position}]")
        if 'hash_rate' not in entry:
            raise ConfigError(f"Mineur #{position}: hash_rate manquant")
        try:
            first_id = int(entry.get('miner_id', next_id))
            count = int(entry.get('count', 1))
            if count < 1:
                raise ConfigError(f"Mineur #{position}: count doit être >= 1")
            policy = build_policy(entry.get('policy'))
            for offset in range(count):
                miners.append(MinerConfig(miner_id=first_id + offset, hash_rate=float(entry['hash_rate']), policy=policy))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Mineur #{position}: {e}") from e
        next_id = first_id + count
    return miners


def build_latency(section) -> LatencyModel:
    if section is None:
        return LatencyModel()
    if isinstance(section, str):
        section = {'kind': section}
    if not isinstance(section, dict):
        raise ConfigError(f"latency_model invalide: {section!r}")
    _check_keys(section, {'kind', 'delay', 'lo', 'hi'}, 'latency_model')
    try:
        return LatencyModel(
            kind=str(section.get('kind', 'zero')),
            delay=int(section.get('delay', 0)),
            lo=int(section.get('lo', 0)),
            hi=int(section.get('hi', 0)),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"latency_model invalide: {e}") from e


def build_sim_config(data: Dict) -> SimConfig:
    """SimConfig à partir d'un dictionnaire aux noms de champs identiques"""
    if not isinstance(data, dict):
        raise ConfigError("Le fichier de configuration doit contenir un dictionnaire")
    _check_keys(data, TOP_LEVEL_KEYS, 'la configuration')
    if 'miners' not in data:
        raise ConfigError("Section miners manquante")

    defaults = app_config.DEFAULT_SIMULATION
    merged = {**defaults, **{k: v for k, v in data.items() if k not in ('params', 'miners')}}
    params = build_params(data.get('params'))
    miners = build_miners(data['miners'])
    try:
        return SimConfig(
            params=params,
            miners=miners,
            latency_model=build_latency(merged.get('latency_model')),
            mode=str(merged['mode']),
            duration=int(merged['duration']),
            seed=int(merged['seed']),
            step_interval=int(merged['step_interval']),
            payload_size=int(merged['payload_size']),
            record_arrivals=bool(merged['record_arrivals']),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Configuration invalide: {e}") from e


class SimConfigParser:
    """Parser pour les fichiers de configuration de simulation (YAML)"""

    def __init__(self, file_path: str):
        """
        Initialize le parser

        Args:
            file_path: Chemin vers le fichier YAML
        """
        self.file_path = Path(file_path)
        self.data = None
        self.config = None

    def load(self) -> Dict:
        """Lit le YAML brut ; les erreurs d'accès au fichier (OSError) sont propagées"""
        text = self.file_path.read_text(encoding='utf-8')
        try:
            self.data = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"YAML invalide dans {self.file_path}: {e}") from e
        if self.data is None:
            self.data = {}
        if not isinstance(self.data, dict):
            raise ConfigError(f"{self.file_path}: un dictionnaire est attendu à la racine")
        return self.data

    def parse(self) -> SimConfig:
        """
        Parse le fichier complet

        Returns:
            SimConfig validée
        """
        logger.info(f"Parsing configuration: {self.file_path}")
        if self.data is None:
            self.load()
        self.config = build_sim_config(self.data)
        logger.info(f"Mineurs: {len(self.config.miners)}, mode: {self.config.mode}, durée: {self.config.duration}")
        return self.config

    def get_params(self) -> Params:
        """Seulement la section params (suffisant pour mine-demo)"""
        if self.data is None:
            self.load()
        return build_params(self.data.get('params'))


class TraceParser:
    """Parser pour les fichiers de trace (une ligne JSON par événement)"""

    def __init__(self, file_path: str):
        self.file_path = Path(file_path)
        self.trace = None
        self.df = None

    def parse(self) -> SimTrace:
        """
        Parse la trace et vérifie sa structure

        Returns:
            SimTrace

        Raises:
            TraceFormatError: ligne illisible, champ manquant, ordre temporel violé, bilan absent
        """
        logger.info(f"Parsing trace: {self.file_path}")
        with open(self.file_path, 'r', encoding='utf-8') as f:
            lines = [line for line in f.read().splitlines() if line.strip()]
        self.trace = parse_trace_lines(lines, source=str(self.file_path))
        logger.info(f"Événements lus: {len(self.trace.events)}")
        return self.trace

    def get_frame(self) -> pd.DataFrame:
        if self.trace is None:
            self.parse()
        if self.df is None:
            self.df = events_frame(self.trace)
        return self.df


def _is_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _check_summary(summary: Dict, source: str) -> Params:
    """Bilan : configuration exploitable par les rapports, une hauteur par chaîne"""
    config = summary['config']
    if not isinstance(config, dict):
        raise TraceFormatError(f"{source}: la configuration du bilan doit être un objet")
    try:
        params = make_params(config['params']['strand_exponent_p'], config['params']['difficulty_bits'],
                             config['params'].get('hash_algo_id', 'sha256'),
                             config['params'].get('sig_algo_id', 'ed25519'))
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise TraceFormatError(f"{source}: paramètres absents ou invalides dans le bilan ({e})") from e

    if not _is_int(config.get('duration')) or config['duration'] <= 0:
        raise TraceFormatError(f"{source}: durée absente ou invalide dans le bilan")
    miners = config.get('miners')
    if not isinstance(miners, list) or not miners:
        raise TraceFormatError(f"{source}: liste des mineurs absente du bilan")
    for miner in miners:
        if (not isinstance(miner, dict) or not _is_int(miner.get('miner_id'))
                or not isinstance(miner.get('hash_rate'), (int, float))
                or not isinstance(miner.get('policy'), dict) or 'kind' not in miner['policy']):
            raise TraceFormatError(f"{source}: mineur mal décrit dans le bilan: {miner!r}")

    n = params.strand_count_n
    for key in ('final_heights', 'stored_counts'):
        values = summary[key]
        if not isinstance(values, list) or len(values) != n or not all(_is_int(v) and v >= 0 for v in values):
            raise TraceFormatError(f"{source}: {key} doit contenir {n} entiers positifs")
    return params


def parse_trace_lines(lines: List[str], source: str = '<trace>') -> SimTrace:
    if not lines:
        raise TraceFormatError(f"{source}: trace vide")

    records = []
    for number, line in enumerate(lines, start=1):
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise TraceFormatError(f"{source}:{number}: JSON invalide ({e})") from e
        if not isinstance(record, dict):
            raise TraceFormatError(f"{source}:{number}: un objet JSON est attendu")
        records.append(record)

    summary = records[-1]
    if summary.get('kind') != SUMMARY:
        raise TraceFormatError(f"{source}: la dernière ligne doit être le bilan (kind={SUMMARY})")
    for key in ('config', 'final_heights', 'stored_counts'):
        if key not in summary:
            raise TraceFormatError(f"{source}: champ {key} absent du bilan")
    n = _check_summary(summary, source).strand_count_n

    events = []
    last_time = None
    for number, record in enumerate(records[:-1], start=1):
        missing = [name for name in EVENT_FIELDS if name not in record]
        if missing:
            raise TraceFormatError(f"{source}:{number}: champs manquants {missing}")
        if record['kind'] not in EVENT_KINDS:
            raise TraceFormatError(f"{source}:{number}: type d'événement inconnu {record['kind']!r}")
        if not _is_int(record['time']):
            raise TraceFormatError(f"{source}:{number}: temps non entier")
        if last_time is not None and record['time'] < last_time:
            raise TraceFormatError(f"{source}:{number}: événements non triés par temps")
        strand = record['strand']
        if strand is None and record['kind'] in (TICKET_FOUND, BLOCK_PUBLISHED):
            raise TraceFormatError(f"{source}:{number}: index de chaîne absent")
        if strand is not None and not (_is_int(strand) and 0 <= strand < n):
            raise TraceFormatError(f"{source}:{number}: index de chaîne {strand!r} hors de [0, {n})")
        if record['kind'] == BLOCK_PUBLISHED and 'block' not in record:
            raise TraceFormatError(f"{source}:{number}: bloc publié sans contenu")
        last_time = record['time']
        events.append(SimEvent(
            time=record['time'], kind=record['kind'], miner=record['miner'], strand=strand,
            block_id=record['block_id'], depth=record['depth'],
            extra={k: v for k, v in record.items() if k not in EVENT_FIELDS},
        ))

    return SimTrace(
        config=summary['config'],
        events=events,
        final_heights=list(summary['final_heights']),
        stored_counts=list(summary['stored_counts']),
        miner_stats=list(summary.get('miner_stats', [])),
    )


def events_frame(trace: SimTrace) -> pd.DataFrame:
    """Événements sous forme de table (colonnes fixes + ticket_hash)"""
    rows = [
        {**{name: getattr(e, name) for name in EVENT_FIELDS}, 'ticket_hash': e.extra.get('ticket_hash')}
        for e in trace.events
    ]
    frame = pd.DataFrame.from_records(rows, columns=EVENT_FIELDS + ['ticket_hash'])
    for name in ('miner', 'strand', 'depth'):
        frame[name] = frame[name].astype('Int64')
    frame['time'] = frame['time'].astype('int64')
    return frame


def ticket_counts(trace: SimTrace) -> List[int]:
    """Nombre de tickets trouvés par index de chaîne"""
    counts = [0] * trace.params.strand_count_n
    for event in trace.events:
        if event.kind == TICKET_FOUND:
            counts[event.strand] += 1
    return counts
