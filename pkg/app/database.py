"""
Module de gestion de la base de données SQLite pour l'historique des simulations.
Permet de sauvegarder, récupérer et comparer les résultats de simulation.
"""
import json
import logging
import sqlite3
from contextlib import contextmanager
from datetime import datetime
from typing import Dict, List, Optional

import config as app_config
from app.analyzer import height_spread, orphan_rate, throughput
from app.netsim import SimTrace

logger = logging.getLogger(__name__)

# Chemin de la base de données (modifiable par les tests)
DB_PATH = app_config.DB_PATH
MAX_RUNS = app_config.MAX_RUNS


@contextmanager
def get_db_connection():
    """Context manager pour les connexions à la base de données."""
    conn = sqlite3.connect(str(DB_PATH))
    conn.row_factory = sqlite3.Row
    conn.execute('PRAGMA foreign_keys = ON')
    try:
        yield conn
    finally:
        conn.close()


def init_db():
    """Initialise la base de données et crée les tables si nécessaire."""
    DB_PATH.parent.mkdir(parents=True, exist_ok=True)

    with get_db_connection() as conn:
        cursor = conn.cursor()

        # Table des simulations
        cursor.execute('''
            CREATE TABLE IF NOT EXISTS runs (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id TEXT UNIQUE NOT NULL,
                created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP,
                mode TEXT NOT NULL,
                strand_count INTEGER,
                difficulty_bits INTEGER,
                duration INTEGER,
                seed TEXT,
                miners INTEGER,
                best_path_blocks INTEGER,
                total_rate REAL,
                orphan_rate REAL,
                height_spread INTEGER,
                config_json TEXT,
                summary_json TEXT
            )
        ''')

        # Hauteurs par chaîne (pour la comparaison détaillée)
        cursor.execute('''
            CREATE TABLE IF NOT EXISTS strand_metrics (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id TEXT NOT NULL,
                strand INTEGER NOT NULL,
                height INTEGER,
                stored_blocks INTEGER,
                rate REAL,
                FOREIGN KEY (run_id) REFERENCES runs(run_id) ON DELETE CASCADE
            )
        ''')

        cursor.execute('CREATE INDEX IF NOT EXISTS idx_runs_created ON runs(created_at)')
        cursor.execute('CREATE INDEX IF NOT EXISTS idx_strand_metrics_run ON strand_metrics(run_id)')

        conn.commit()
        logger.info("Base de données initialisée avec succès")


def save_run(run_id: str, trace: SimTrace) -> bool:
    """
    Sauvegarde le bilan d'une simulation.

    Args:
        run_id: Identifiant unique de la simulation
        trace: Trace complète

    Returns:
        True si la sauvegarde a réussi, False sinon
    """
    try:
        init_db()
        report = throughput(trace)
        summary = {
            'final_heights': list(trace.final_heights),
            'stored_counts': list(trace.stored_counts),
            'miner_stats': trace.miner_stats,
        }
        params = trace.params

        with get_db_connection() as conn:
            cursor = conn.cursor()
            cursor.execute('''
                INSERT OR REPLACE INTO runs
                (run_id, created_at, mode, strand_count, difficulty_bits, duration, seed, miners,
                 best_path_blocks, total_rate, orphan_rate, height_spread, config_json, summary_json)
                VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
            ''', (
                run_id,
                datetime.now().isoformat(),
                trace.mode,
                params.strand_count_n,
                params.difficulty_bits,
                trace.duration,
                str(trace.config.get('seed', 0)),  # 64 bits non signés : hors des entiers SQLite
                len(trace.config.get('miners', [])),
                report.best_path_blocks,
                report.total_rate,
                orphan_rate(trace),
                height_spread(trace),
                json.dumps(trace.config),
                json.dumps(summary),
            ))

            # Supprimer les anciennes métriques pour cette simulation (au cas où)
            cursor.execute('DELETE FROM strand_metrics WHERE run_id = ?', (run_id,))
            for strand, (height, stored) in enumerate(zip(trace.final_heights, trace.stored_counts)):
                cursor.execute('''
                    INSERT INTO strand_metrics (run_id, strand, height, stored_blocks, rate)
                    VALUES (?, ?, ?, ?, ?)
                ''', (run_id, strand, height, stored, report.per_strand_rate[strand]))

            conn.commit()

        cleanup_old_runs()
        logger.info(f"Simulation {run_id} sauvegardée")
        return True

    except Exception as e:
        logger.error(f"Erreur lors de la sauvegarde de la simulation: {e}", exc_info=True)
        return False


def cleanup_old_runs():
    """Supprime les simulations les plus anciennes au-delà de MAX_RUNS."""
    try:
        with get_db_connection() as conn:
            cursor = conn.cursor()
            cursor.execute('SELECT COUNT(*) FROM runs')
            count = cursor.fetchone()[0]

            if count > MAX_RUNS:
                to_delete = count - MAX_RUNS
                cursor.execute('''
                    DELETE FROM runs
                    WHERE id IN (
                        SELECT id FROM runs
                        ORDER BY created_at ASC, id ASC
                        LIMIT ?
                    )
                ''', (to_delete,))
                conn.commit()
                logger.info(f"Nettoyage: {to_delete} anciennes simulations supprimées")

    except Exception as e:
        logger.error(f"Erreur lors du nettoyage: {e}")


def get_runs(limit: int = 50) -> List[Dict]:
    """Liste des simulations, de la plus récente à la plus ancienne."""
    try:
        init_db()
        with get_db_connection() as conn:
            cursor = conn.cursor()
            cursor.execute('''
                SELECT run_id, created_at, mode, strand_count, difficulty_bits, duration, seed,
                       miners, best_path_blocks, total_rate, orphan_rate, height_spread
                FROM runs
                ORDER BY created_at DESC, id DESC
                LIMIT ?
            ''', (limit,))
            return [dict(row) for row in cursor.fetchall()]

    except Exception as e:
        logger.error(f"Erreur lors de la récupération des simulations: {e}")
        return []


def get_run_details(run_id: str) -> Optional[Dict]:
    """Récupère les détails complets d'une simulation."""
    try:
        init_db()
        with get_db_connection() as conn:
            cursor = conn.cursor()
            cursor.execute('SELECT * FROM runs WHERE run_id = ?', (run_id,))
            row = cursor.fetchone()
            if not row:
                return None

            run = dict(row)
            run['summary'] = json.loads(run.get('summary_json') or '{}')
            run['config'] = json.loads(run.get('config_json') or '{}')

            cursor.execute('SELECT * FROM strand_metrics WHERE run_id = ? ORDER BY strand', (run_id,))
            run['strands'] = [dict(r) for r in cursor.fetchall()]
            return run

    except Exception as e:
        logger.error(f"Erreur lors de la récupération des détails: {e}")
        return None


def calc_percent_change(old_val, new_val) -> float:
    """Calcule le pourcentage de changement."""
    if not old_val:
        return 100.0 if new_val else 0.0
    return round(((new_val - old_val) / old_val) * 100, 1)


def compare_runs(current_id: str, previous_id: str) -> Dict:
    """
    Compare deux simulations.

    Args:
        current_id: ID de la simulation actuelle
        previous_id: ID de la simulation précédente

    Returns:
        Dictionnaire avec les deltas globaux et par chaîne
    """
    current = get_run_details(current_id)
    previous = get_run_details(previous_id)
    if not current or not previous:
        return {'error': 'Une ou plusieurs simulations introuvables'}

    global_delta = {}
    for metric in ('best_path_blocks', 'total_rate', 'orphan_rate', 'height_spread'):
        cur, prev = current[metric] or 0, previous[metric] or 0
        global_delta[metric] = {
            'current': cur,
            'previous': prev,
            'delta': cur - prev,
            'percent': calc_percent_change(prev, cur),
        }

    previous_strands = {s['strand']: s for s in previous['strands']}
    strand_changes = []
    for strand in current['strands']:
        prev = previous_strands.get(strand['strand'])
        if prev is None:
            continue
        strand_changes.append({
            'strand': strand['strand'],
            'height': {'current': strand['height'], 'previous': prev['height'],
                       'delta': strand['height'] - prev['height']},
            'rate': {'current': strand['rate'], 'previous': prev['rate'],
                     'delta': strand['rate'] - prev['rate']},
        })

    return {
        'current': {'run_id': current_id, 'created_at': current['created_at'], 'mode': current['mode']},
        'previous': {'run_id': previous_id, 'created_at': previous['created_at'], 'mode': previous['mode']},
        'global_delta': global_delta,
        'strand_changes': strand_changes,
        'same_strand_count': current['strand_count'] == previous['strand_count'],
    }
