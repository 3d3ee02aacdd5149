"""Command line entry point: ``microgrid run|equilibrium|verify``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ModelError, NumericalError, VerificationError
from .report import emit_text, key_value_text
from .runner import equilibrium_command, run, verify_command
from .scenario import load_config, shipped_config

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_VERIFICATION = 0, 2, 3, 4

log = logging.getLogger("microgrid")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="microgrid",
                                 description="Optimal frequency control of lossy microgrids.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, text in (("run", "solve, simulate and verify a scenario"),
                       ("equilibrium", "solve and check the base-load steady state"),
                       ("verify", "check the port-Hamiltonian structure")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", type=Path, default=None,
                       help="scenario file (default: the shipped 18-node scenario)")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        p.add_argument("--dt", type=float, default=None, help="override the solver step [s]")
        p.add_argument("--seed", type=int, default=0,
                       help="seed for randomized structure checks (default 0)")
        p.add_argument("-q", "--quiet", action="store_true", help="only report errors")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config) if args.config else shipped_config()
        if args.dt is not None:
            cfg = cfg.with_dt(args.dt)
        if args.command == "run":
            bundle = run(cfg, args.out, raise_on_fail=False)
            sys.stdout.write(key_value_text(bundle.summary_items()))
            if not bundle.passed:
                log.error("steady-state checks failed; see %s", bundle.paths["verification"])
                return EXIT_VERIFICATION
        elif args.command == "equilibrium":
            _, rep, items = equilibrium_command(cfg, args.out, raise_on_fail=False)
            sys.stdout.write(key_value_text(items))
            if not rep.passed:
                return EXIT_VERIFICATION
        else:
            rep = verify_command(cfg, seed=args.seed)
            emit_text(rep.items(), args.out / "structure.txt")
            sys.stdout.write(key_value_text(rep.items()))
            if not rep.passed:
                return EXIT_VERIFICATION
    except (ModelError, OSError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_VALIDATION
    except NumericalError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_NUMERICAL
    except VerificationError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_VERIFICATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
