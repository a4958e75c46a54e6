"""
Types du domaine, sérialisation canonique et primitives cryptographiques
(hash, paire de clés, signature) utilisés par tous les autres modules.

Tous les entiers de taille fixe sont encodés en big-endian.
"""
import hashlib
import logging
import struct
from dataclasses import dataclass, replace
from typing import Callable, Dict, Optional, Sequence, Tuple

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

logger = logging.getLogger(__name__)

HASH_SIZE = 32
PUBKEY_SIZE = 32
SEED_SIZE = 32
NONCE_MAX = 2 ** 64 - 1


class MultiStrandError(Exception):
    """Erreur de base du projet"""


class ParamsError(MultiStrandError, ValueError):
    """Paramètres du protocole invalides"""


class UnsupportedAlgorithmError(MultiStrandError, ValueError):
    """Identifiant d'algorithme inconnu"""


class SerializationError(MultiStrandError, ValueError):
    """Données binaires de mauvaise taille ou tronquées"""


class KeyMaterialError(MultiStrandError, ValueError):
    """Graine ou clé privée malformée"""


# Fonctions de hash 256 bits disponibles
_HASH_FACTORIES: Dict[str, Callable] = {
    'sha256': hashlib.sha256,
    'sha3-256': hashlib.sha3_256,
    'blake2b-256': lambda data=b'': hashlib.blake2b(data, digest_size=HASH_SIZE),
}

_SIG_ALGOS = ('ed25519',)


class Hash256(bytes):
    """Condensat de 32 octets"""

    def __new__(cls, value: bytes):
        if isinstance(value, Hash256):
            return value
        if len(value) != HASH_SIZE:
            raise SerializationError(f"Un hash doit faire {HASH_SIZE} octets (reçu {len(value)})")
        return super().__new__(cls, value)

    @classmethod
    def fromhex(cls, text: str) -> 'Hash256':
        return cls(bytes.fromhex(text))

    def short(self) -> str:
        return self.hex()[:12]

    def __repr__(self) -> str:
        return f"Hash256({self.hex()})"


ZERO_HASH = Hash256(bytes(HASH_SIZE))


@dataclass(frozen=True)
class Params:
    """Constantes du protocole"""
    strand_exponent_p: int
    strand_count_n: int
    difficulty_bits: int
    hash_algo_id: str = 'sha256'
    sig_algo_id: str = 'ed25519'

    def __post_init__(self):
        if self.strand_exponent_p < 0:
            raise ParamsError(f"p doit être positif ou nul (reçu {self.strand_exponent_p})")
        if self.strand_count_n != 2 ** self.strand_exponent_p:
            raise ParamsError(f"n doit valoir 2^p = {2 ** self.strand_exponent_p} (reçu {self.strand_count_n})")
        if self.difficulty_bits < 0 or self.difficulty_bits > 256:
            raise ParamsError(f"difficulty_bits hors de [0, 256] (reçu {self.difficulty_bits})")
        if self.difficulty_bits + self.strand_exponent_p > 256:
            raise ParamsError("Le préfixe de zéros et les p bits de fin se chevauchent dans un hash de 256 bits")
        if self.hash_algo_id not in _HASH_FACTORIES:
            raise UnsupportedAlgorithmError(f"Algorithme de hash non supporté: {self.hash_algo_id}")
        if self.sig_algo_id not in _SIG_ALGOS:
            raise UnsupportedAlgorithmError(f"Algorithme de signature non supporté: {self.sig_algo_id}")

    @property
    def strand_work_bits(self) -> int:
        """Bits contraints pour obtenir un bloc sur UNE chaîne donnée (2^x essais en moyenne)"""
        return self.difficulty_bits + self.strand_exponent_p

    def to_dict(self) -> Dict:
        return {
            'strand_exponent_p': self.strand_exponent_p,
            'difficulty_bits': self.difficulty_bits,
            'hash_algo_id': self.hash_algo_id,
            'sig_algo_id': self.sig_algo_id,
        }


def make_params(strand_exponent_p: int = 0, difficulty_bits: int = 0,
                hash_algo_id: str = 'sha256', sig_algo_id: str = 'ed25519') -> Params:
    """Construit des Params en dérivant n = 2^p"""
    if strand_exponent_p < 0:
        raise ParamsError(f"p doit être positif ou nul (reçu {strand_exponent_p})")
    return Params(
        strand_exponent_p=strand_exponent_p,
        strand_count_n=2 ** strand_exponent_p,
        difficulty_bits=difficulty_bits,
        hash_algo_id=hash_algo_id,
        sig_algo_id=sig_algo_id,
    )


def check_chain_index(index: int, params: Params) -> int:
    """Vérifie 0 <= index < n"""
    if not 0 <= index < params.strand_count_n:
        raise ParamsError(f"Index de chaîne {index} hors de [0, {params.strand_count_n})")
    return index


@dataclass(frozen=True)
class Keypair:
    signing_key: bytes
    pubkey: bytes


@dataclass(frozen=True)
class Ticket:
    """Ticket de loterie : n hash de têtes + pubkey + nonce"""
    tip_hashes: Tuple[Hash256, ...]
    pubkey: bytes
    nonce: int

    def with_nonce(self, nonce: int) -> 'Ticket':
        return replace(self, nonce=nonce)


@dataclass(frozen=True)
class Block:
    chain_index: int
    prev_hash: Hash256
    payload: bytes
    ticket: Ticket
    signature: bytes = b''


# ---------------------------------------------------------------------------
# Hash
# ---------------------------------------------------------------------------

def hash_factory(algo: str = 'sha256') -> Callable:
    """Retourne le constructeur hashlib correspondant à l'identifiant"""
    try:
        return _HASH_FACTORIES[algo]
    except KeyError:
        raise UnsupportedAlgorithmError(f"Algorithme de hash non supporté: {algo}") from None


def hash_bytes(data: bytes, algo: str = 'sha256') -> Hash256:
    """
    Condensat déterministe de 32 octets

    Args:
        data: Octets à hasher
        algo: Identifiant de l'algorithme (sha256 par défaut)

    Returns:
        Hash256
    """
    return Hash256(hash_factory(algo)(data).digest())


# ---------------------------------------------------------------------------
# Sérialisation
# ---------------------------------------------------------------------------

def ticket_size(n: int) -> int:
    return HASH_SIZE * n + PUBKEY_SIZE + 8


def serialize_ticket(t: Ticket, n: Optional[int] = None) -> bytes:
    """
    Sérialisation canonique : tip_hashes[0..n-1] ‖ pubkey ‖ nonce (8 octets BE)

    Args:
        t: Ticket
        n: Nombre de chaînes attendu (vérifié si fourni)

    Returns:
        32n + 40 octets
    """
    if n is not None and len(t.tip_hashes) != n:
        raise SerializationError(f"Le ticket contient {len(t.tip_hashes)} hash de têtes, {n} attendus")
    if len(t.pubkey) != PUBKEY_SIZE:
        raise SerializationError(f"La pubkey doit faire {PUBKEY_SIZE} octets (reçu {len(t.pubkey)})")
    if not 0 <= t.nonce <= NONCE_MAX:
        raise SerializationError(f"Nonce hors de l'intervalle 64 bits: {t.nonce}")
    for tip in t.tip_hashes:
        if len(tip) != HASH_SIZE:
            raise SerializationError("Hash de tête de mauvaise taille dans le ticket")
    return b''.join(t.tip_hashes) + bytes(t.pubkey) + struct.pack('>Q', t.nonce)


def deserialize_ticket(data: bytes, n: int) -> Ticket:
    """Inverse de serialize_ticket pour n chaînes"""
    expected = ticket_size(n)
    if len(data) != expected:
        raise SerializationError(f"Ticket de {len(data)} octets, {expected} attendus pour n={n}")
    tips = tuple(Hash256(data[i * HASH_SIZE:(i + 1) * HASH_SIZE]) for i in range(n))
    offset = n * HASH_SIZE
    pubkey = bytes(data[offset:offset + PUBKEY_SIZE])
    (nonce,) = struct.unpack('>Q', data[offset + PUBKEY_SIZE:])
    return Ticket(tip_hashes=tips, pubkey=pubkey, nonce=nonce)


def ticket_digest(t: Ticket, algo: str = 'sha256') -> Hash256:
    return hash_bytes(serialize_ticket(t), algo)


def block_header(b: Block, algo: str = 'sha256') -> bytes:
    """chain_index (4 BE) ‖ prev_hash ‖ H(payload) ‖ H(ticket) ; la signature est exclue"""
    return (struct.pack('>I', b.chain_index)
            + bytes(b.prev_hash)
            + hash_bytes(b.payload, algo)
            + ticket_digest(b.ticket, algo))


def block_id(b: Block, algo: str = 'sha256') -> Hash256:
    """Identifiant du bloc : hash de l'en-tête canonique (sans la signature)"""
    return hash_bytes(block_header(b, algo), algo)


def serialize_block(b: Block) -> bytes:
    """
    Format fil : chain_index (4) ‖ prev_hash (32) ‖ longueur payload (4) ‖ payload
    ‖ ticket (32n+40) ‖ longueur signature (2) ‖ signature
    """
    if len(b.signature) > 0xFFFF:
        raise SerializationError("Signature trop longue")
    return (struct.pack('>I', b.chain_index)
            + bytes(b.prev_hash)
            + struct.pack('>I', len(b.payload)) + bytes(b.payload)
            + serialize_ticket(b.ticket)
            + struct.pack('>H', len(b.signature)) + bytes(b.signature))


def deserialize_block(data: bytes, params: Params, offset: int = 0) -> Tuple[Block, int]:
    """
    Décode un bloc à partir de `offset`

    Returns:
        Tuple (bloc, nombre d'octets consommés)
    """
    view = memoryview(data)
    pos = offset

    def take(size: int) -> bytes:
        nonlocal pos
        if pos + size > len(view):
            raise SerializationError(f"Bloc tronqué à l'octet {pos} ({size} octets attendus)")
        chunk = bytes(view[pos:pos + size])
        pos += size
        return chunk

    (chain_index,) = struct.unpack('>I', take(4))
    prev_hash = Hash256(take(HASH_SIZE))
    (payload_len,) = struct.unpack('>I', take(4))
    payload = take(payload_len)
    ticket = deserialize_ticket(take(ticket_size(params.strand_count_n)), params.strand_count_n)
    (sig_len,) = struct.unpack('>H', take(2))
    signature = take(sig_len)

    block = Block(chain_index=chain_index, prev_hash=prev_hash, payload=payload,
                  ticket=ticket, signature=signature)
    return block, pos - offset


# ---------------------------------------------------------------------------
# Clés et signatures
# ---------------------------------------------------------------------------

def keygen(seed: bytes) -> Keypair:
    """
    Paire de clés Ed25519 déterministe à partir d'une graine de 32 octets

    Args:
        seed: Graine (32 octets)

    Returns:
        Keypair (signing_key = graine brute, pubkey = 32 octets)
    """
    if len(seed) != SEED_SIZE:
        raise KeyMaterialError(f"La graine doit faire {SEED_SIZE} octets (reçu {len(seed)})")
    private_key = Ed25519PrivateKey.from_private_bytes(bytes(seed))
    pubkey = private_key.public_key().public_bytes(
        serialization.Encoding.Raw,
        serialization.PublicFormat.Raw
    )
    return Keypair(signing_key=bytes(seed), pubkey=pubkey)


def sign(message: bytes, key: bytes) -> bytes:
    """Signe un message avec une clé privée Ed25519 brute"""
    try:
        private_key = Ed25519PrivateKey.from_private_bytes(bytes(key))
    except (ValueError, TypeError) as e:
        raise KeyMaterialError(f"Clé privée malformée: {e}") from e
    return private_key.sign(bytes(message))


def verify(message: bytes, sig: bytes, pubkey: bytes) -> bool:
    """Vrai ssi sig est une signature valide de message sous pubkey (jamais d'exception)"""
    try:
        public_key = Ed25519PublicKey.from_public_bytes(bytes(pubkey))
        public_key.verify(bytes(sig), bytes(message))
        return True
    except (InvalidSignature, ValueError, TypeError):
        return False


def sign_block(block: Block, keypair: Keypair, algo: str = 'sha256') -> Block:
    """Retourne le bloc accompagné de la signature de son identifiant"""
    unsigned = replace(block, signature=b'')
    return replace(unsigned, signature=sign(block_id(unsigned, algo), keypair.signing_key))


def tips_tuple(tips: Sequence[bytes]) -> Tuple[Hash256, ...]:
    return tuple(Hash256(t) for t in tips)
