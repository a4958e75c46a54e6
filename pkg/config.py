import os
from pathlib import Path
from dotenv import load_dotenv

# Charger les variables d'environnement
load_dotenv()

# Chemins de base
BASE_DIR = Path(__file__).parent
DATA_FOLDER = BASE_DIR / 'data'
DB_PATH = Path(os.environ.get('MULTISTRAND_DB_PATH') or DATA_FOLDER / 'runs.db')
MAX_RUNS = 50  # Nombre maximum de simulations conservées dans l'historique

# Niveau de log par défaut (la CLI passe en INFO avec --verbose)
LOG_LEVEL = os.environ.get('MULTISTRAND_LOG_LEVEL', 'WARNING').upper()

# Algorithmes supportés
SUPPORTED_HASH_ALGOS = ('sha256', 'sha3-256', 'blake2b-256')
SUPPORTED_SIG_ALGOS = ('ed25519',)

# Paramètres du protocole
DEFAULT_PARAMS = {
    'strand_exponent_p': 1,        # n = 2^p chaînes
    'difficulty_bits': 8,          # bits à zéro exigés en tête du hash du ticket
    'hash_algo_id': 'sha256',
    'sig_algo_id': 'ed25519',
}

# Configuration de la simulation
DEFAULT_SIMULATION = {
    'mode': 'analytic',                 # analytic ou real_hash
    'duration': 1_000_000,              # unités de temps simulé
    'seed': 0,
    'latency_model': {'kind': 'zero'},
    'step_interval': 1_000,             # mode real_hash : durée d'une étape de minage
    'payload_size': 64,                 # octets de transactions opaques par bloc
    'record_arrivals': True,
}

# Mode démonstration : au-delà, le minage interactif devient trop long
DEMO_MAX_DIFFICULTY = 20

# Seuil des tests statistiques
SIGNIFICANCE_LEVEL = 0.001

# Course de rattrapage : déficit supplémentaire au-delà duquel l'attaquant abandonne
CATCHUP_MARGIN = 12
CATCHUP_MAX_EVENTS = 20_000

# Codes de sortie de la CLI
EXIT_CODES = {
    'ok': 0,
    'invalid': 1,
    'config': 2,
    'io': 3,
    'trace': 4,
    'decode': 5,
}
