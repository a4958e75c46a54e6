"""
Utilitaires pour l'application
"""
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd

# Graines de 64 bits non signées
SEED_MAX = 2 ** 64 - 1

# Sous-flux réservés (les identifiants de mineurs sont < 2^32)
STREAM_LATENCY = 2 ** 32
STREAM_CATCHUP = 2 ** 32 + 1


def check_seed(seed: int) -> int:
    """Vérifie qu'une graine tient sur 64 bits non signés"""
    seed = int(seed)
    if not 0 <= seed <= SEED_MAX:
        raise ValueError(f"La graine doit être un entier 64 bits non signé (reçu {seed})")
    return seed


def derive_seed_sequence(seed: int, *keys: int) -> np.random.SeedSequence:
    """
    Sous-graine déterministe pour (graine globale, clés...)

    Args:
        seed: Graine globale de la simulation
        keys: Identifiants du sous-flux (mineur, z, essai...)

    Returns:
        SeedSequence indépendante des autres sous-flux
    """
    return np.random.SeedSequence([check_seed(seed), *[int(k) for k in keys]])


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Générateur numpy du sous-flux (graine, clés...)"""
    return np.random.default_rng(derive_seed_sequence(seed, *keys))


def format_heights(heights: Sequence[int]) -> str:
    return ' '.join(f"[{i}]={h}" for i, h in enumerate(heights))


def records_to_frame(records: List[Dict], columns: Sequence[str]) -> pd.DataFrame:
    """
    Tableau à colonnes fixes, même vide

    Args:
        records: Lignes sous forme de dictionnaires
        columns: En-tête imposé (ordre des colonnes du CSV)

    Returns:
        DataFrame avec exactement ces colonnes
    """
    frame = pd.DataFrame.from_records(records, columns=list(columns))
    return frame.reindex(columns=list(columns))
