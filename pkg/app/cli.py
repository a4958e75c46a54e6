"""
Interface en ligne de commande : minage de démonstration, simulation, analyse,
validation de blocs, export et rejeu de traces
"""
import argparse
import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import List, Optional

import pandas as pd

import config as app_config
from app import __version__, configure_logging, database
from app.analyzer import (
    TraceAnalyzer, catchup, catchup_frame, orphans_frame, targeting_frame, throughput, throughput_frame,
    uniformity, uniformity_frame, write_report,
)
from app.core import (
    MultiStrandError, ParamsError, SerializationError, UnsupportedAlgorithmError, deserialize_block, make_params,
)
from app.ledger import CHECKS, Ledger, export_ledger, import_ledger
from app.miner import PayloadSource, RealHashTickets, honest_step
from app.netsim import BLOCK_PUBLISHED, IntegrityError, replay, run, write_trace
from app.parsers import ConfigError, SimConfigParser, TraceFormatError, TraceParser
from app.pow import judge_ticket
from app.utils import derive_rng, format_heights, records_to_frame

logger = logging.getLogger(__name__)

EXIT = app_config.EXIT_CODES
REPORTS = ('throughput', 'uniformity', 'orphans', 'catchup', 'targeting', 'summary', 'history')
HISTORY_COLUMNS = ['run_id', 'created_at', 'mode', 'strand_count', 'difficulty_bits', 'duration', 'seed',
                   'miners', 'best_path_blocks', 'total_rate', 'orphan_rate', 'height_spread']
STRAND_COLUMNS = ['strand', 'height', 'stored_blocks', 'rate']
COMPARISON_COLUMNS = ['metric', 'strand', 'current', 'previous', 'delta', 'percent']


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='multistrand',
        description="Blockchain proof-of-work multi-chaînes à tickets : démonstration, simulation, analyse",
    )
    parser.add_argument('--version', action='version', version=f"%(prog)s {__version__}")
    parser.add_argument('--verbose', '-v', action='store_true', help="Journal détaillé (INFO) sur stderr")
    sub = parser.add_subparsers(dest='command', required=True)

    demo = sub.add_parser('mine-demo', help="Mine quelques tickets sur un registre neuf")
    demo.add_argument('--config', help="Fichier YAML (seule la section params est lue)")
    demo.add_argument('--count', type=int, default=1, help="Nombre de tickets à miner")
    demo.add_argument('--seed', type=int, default=0)
    demo.add_argument('--out', help="Export du registre obtenu")

    simulate = sub.add_parser('simulate', help="Lance une simulation et écrit sa trace")
    simulate.add_argument('--config', required=True)
    simulate.add_argument('--out', required=True)
    simulate.add_argument('--seed', type=int, help="Remplace la graine du fichier")
    simulate.add_argument('--mode', choices=('real_hash', 'analytic'), help="Remplace le mode du fichier")
    simulate.add_argument('--record', action='store_true', help="Enregistre le bilan dans l'historique")

    analyze = sub.add_parser('analyze', help="Rapports statistiques sur une trace")
    analyze.add_argument('--trace', help="Trace à analyser")
    analyze.add_argument('--baseline', help="Trace de référence à une seule chaîne (débit)")
    analyze.add_argument('--report', choices=REPORTS, default='summary')
    analyze.add_argument('--out', help="Fichier de rapport (stdout par défaut)")
    analyze.add_argument('--format', choices=('csv', 'jsonl'), default='csv')
    analyze.add_argument('--config', help="Paramètres du registre de course (catchup)")
    analyze.add_argument('--q', type=float, default=0.3, help="Part de l'attaquant (catchup)")
    analyze.add_argument('--z', type=int, nargs='+', default=[1, 2, 4, 6], help="Retards de départ (catchup)")
    analyze.add_argument('--trials', type=int, default=1000, help="Courses par retard (catchup)")
    analyze.add_argument('--seed', type=int, default=0, help="Graine des courses (catchup)")
    analyze.add_argument('--window', type=int, help="Fenêtre des acceptations parallèles")
    analyze.add_argument('--run', help="Détail par chaîne d'une simulation enregistrée (history)")
    analyze.add_argument('--compare', nargs=2, metavar=('ACTUELLE', 'PRECEDENTE'),
                         help="Écarts entre deux simulations enregistrées (history)")

    validate = sub.add_parser('validate', help="Contrôles V1 à V4 d'un bloc contre un registre exporté")
    validate.add_argument('--block', required=True)
    validate.add_argument('--ledger', required=True)

    export = sub.add_parser('export', help="Exporte le registre rejoué d'une trace, ou un bloc")
    export.add_argument('--trace', required=True)
    export.add_argument('--out', help="Export du registre")
    export.add_argument('--block-id', help="Identifiant (hex) d'un bloc publié à extraire")
    export.add_argument('--block-out', help="Fichier du bloc extrait")

    replay_cmd = sub.add_parser('replay', help="Rejoue une trace et vérifie les hauteurs finales")
    replay_cmd.add_argument('--trace', required=True)
    return parser


# ---------------------------------------------------------------------------
# Sous-commandes
# ---------------------------------------------------------------------------

def cmd_mine_demo(args) -> int:
    params = SimConfigParser(args.config).get_params() if args.config else make_params(
        app_config.DEFAULT_PARAMS['strand_exponent_p'], app_config.DEFAULT_PARAMS['difficulty_bits'])
    if params.difficulty_bits > app_config.DEMO_MAX_DIFFICULTY:
        raise ConfigError(f"Difficulté {params.difficulty_bits} trop élevée pour la démonstration "
                          f"(max {app_config.DEMO_MAX_DIFFICULTY} bits)")
    if args.count < 1:
        raise ConfigError("--count doit être >= 1")

    ledger = Ledger(params)
    rng = derive_rng(args.seed, 0)
    payloads = PayloadSource(algo=params.hash_algo_id)

    print("=" * 60)
    print(f"MINAGE DE DEMONSTRATION - n={params.strand_count_n}, difficulté={params.difficulty_bits} bits")
    print("=" * 60)
    mined = 0
    while mined < args.count:
        product = honest_step(ledger, params, rng, payloads, miner_id=0,
                              ticket_source=RealHashTickets(params, budget=1 << 26))
        if product is None:
            continue
        block = product.blocks[0]
        judgement = judge_ticket(block.ticket, params)
        outcome = ledger.apply_block(block)
        mined += 1
        print(f"ticket {mined}: hash={judgement.ticket_hash.hex()} zéros={judgement.zero_bits} "
              f"chaîne={judgement.chain_index} bloc={outcome.block_id.hex()} ({outcome.status.value})")

    print(f"\nHauteurs: {format_heights(ledger.heights())}")
    if args.out:
        Path(args.out).write_bytes(export_ledger(ledger))
        print(f"Registre exporté: {args.out}")
    return EXIT['ok']


def cmd_simulate(args) -> int:
    config = SimConfigParser(args.config).parse().with_overrides(seed=args.seed, mode=args.mode)
    trace = run(config)
    write_trace(trace, args.out)
    print(f"Trace: {args.out} ({len(trace.events)} événements), hauteurs {format_heights(trace.final_heights)}")

    if args.record:
        run_id = f"{Path(args.out).stem}-{datetime.now():%Y%m%d-%H%M%S}-{config.seed}"
        if database.save_run(run_id, trace):
            print(f"Simulation enregistrée: {run_id}")
    return EXIT['ok']


def _read_trace(path: Optional[str], what: str = '--trace'):
    if not path:
        raise ConfigError(f"{what} est requis pour ce rapport")
    return TraceParser(path).parse()


def history_frame(args) -> pd.DataFrame:
    """Liste des simulations, détail par chaîne d'une simulation (--run) ou écart entre deux (--compare)"""
    if args.compare:
        comparison = database.compare_runs(*args.compare)
        if 'error' in comparison:
            raise ConfigError(f"{comparison['error']}: {' '.join(args.compare)}")
        rows = [{'metric': metric, 'strand': None, **delta}
                for metric, delta in comparison['global_delta'].items()]
        for change in comparison['strand_changes']:
            for metric in ('height', 'rate'):
                delta = change[metric]
                rows.append({'metric': metric, 'strand': change['strand'],
                             'percent': database.calc_percent_change(delta['previous'], delta['current']),
                             **delta})
        if not comparison['same_strand_count']:
            logger.warning("Nombres de chaînes différents : seules les chaînes communes sont comparées")
        return records_to_frame(rows, COMPARISON_COLUMNS)
    if args.run:
        details = database.get_run_details(args.run)
        if details is None:
            raise ConfigError(f"Simulation inconnue: {args.run}")
        return records_to_frame(details['strands'], STRAND_COLUMNS)
    return records_to_frame(database.get_runs(), HISTORY_COLUMNS)


def cmd_analyze(args) -> int:
    report = args.report
    if report == 'catchup':
        template = SimConfigParser(args.config).get_params() if args.config else None
        frame = catchup_frame(catchup(template, args.q, args.z, args.trials, seed=args.seed))
    elif report == 'history':
        frame = history_frame(args)
    else:
        trace = _read_trace(args.trace)
        if report == 'throughput':
            baseline = _read_trace(args.baseline, '--baseline') if args.baseline else None
            frame = throughput_frame(throughput(trace, baseline))
        elif report == 'uniformity':
            frame = uniformity_frame(uniformity(trace))
        elif report == 'orphans':
            frame = orphans_frame(trace)
        elif report == 'targeting':
            frame = targeting_frame(trace)
        else:
            baseline = _read_trace(args.baseline, '--baseline') if args.baseline else None
            analyzer = TraceAnalyzer({'window': args.window})
            analyzer.analyze(trace, baseline)
            frame = analyzer.summary_frame()

    if args.out:
        write_report(frame, args.out, args.format)
        print(f"Rapport {report}: {args.out}")
    elif args.format == 'csv':
        sys.stdout.write(frame.to_csv(index=False))
    else:
        sys.stdout.write(frame.to_json(orient='records', lines=True) + '\n')
    return EXIT['ok']


def cmd_validate(args) -> int:
    ledger = import_ledger(Path(args.ledger).read_bytes())
    data = Path(args.block).read_bytes()
    block, consumed = deserialize_block(data, ledger.params)
    if consumed != len(data):
        raise SerializationError(f"{len(data) - consumed} octets en trop après le bloc")

    verdict = ledger.validate_block(block)
    print(f"Bloc {ledger.block_id(block).hex()} (chaîne {block.chain_index})")
    for check in CHECKS:
        print(f"  {check}: {'OK' if verdict.checks.get(check) else 'ECHEC'}")
    if verdict.ok:
        print("Verdict: valide")
        return EXIT['ok']
    print(f"Verdict: invalide ({verdict.failed_check}: {verdict.reason})")
    return EXIT['invalid']


def cmd_export(args) -> int:
    trace = TraceParser(args.trace).parse()
    if not args.out and not args.block_id:
        raise ConfigError("--out ou --block-id est requis")

    if args.out:
        ledger = replay(trace)
        Path(args.out).write_bytes(export_ledger(ledger))
        print(f"Registre exporté: {args.out} (hauteurs {format_heights(ledger.heights())})")

    if args.block_id:
        if not args.block_out:
            raise ConfigError("--block-out est requis avec --block-id")
        wanted = args.block_id.lower()
        for event in trace.events:
            if event.kind == BLOCK_PUBLISHED and event.block_id == wanted:
                Path(args.block_out).write_bytes(bytes.fromhex(event.extra['block']))
                print(f"Bloc {wanted[:12]} écrit dans {args.block_out}")
                break
        else:
            raise TraceFormatError(f"Bloc {wanted} absent de la trace")
    return EXIT['ok']


def cmd_replay(args) -> int:
    trace = TraceParser(args.trace).parse()
    ledger = replay(trace)
    print(f"Rejeu conforme: hauteurs {format_heights(ledger.heights())}")
    return EXIT['ok']


COMMANDS = {
    'mine-demo': cmd_mine_demo,
    'simulate': cmd_simulate,
    'analyze': cmd_analyze,
    'validate': cmd_validate,
    'export': cmd_export,
    'replay': cmd_replay,
}


def exit_code_for(error: Exception) -> int:
    """Codes de sortie stables : 2 configuration, 3 E/S, 4 trace, 5 décodage"""
    if isinstance(error, (TraceFormatError, IntegrityError)):
        return EXIT['trace']
    if isinstance(error, SerializationError):
        return EXIT['decode']
    if isinstance(error, (ConfigError, ParamsError, UnsupportedAlgorithmError)):
        return EXIT['config']
    if isinstance(error, OSError):
        return EXIT['io']
    if isinstance(error, ValueError):
        return EXIT['config']
    return EXIT['invalid']


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_arg_parser()
    args = parser.parse_args(argv)
    configure_logging('INFO' if args.verbose else None)

    try:
        return COMMANDS[args.command](args)
    except (MultiStrandError, OSError, ValueError) as e:
        code = exit_code_for(e)
        logger.debug("Détail de l'erreur", exc_info=True)
        print(f"Erreur ({args.command}): {e}", file=sys.stderr)
        return code
