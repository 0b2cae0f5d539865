#!/usr/bin/env python3
import argparse
import asyncio
import logging
import logging.config
import sys

LOGO = r"""
     _                  _
  __| |__   __ _ __ __ _| |_ ___
 / _` |\ \ / /| '__/ _` | __/ _ \
| (_| | \ V / | | | (_| | ||  __/
 \__,_|  \_/  |_|  \__,_|\__\___|
          {}
"""


def init_sentry(dsn: str) -> None:
    # 只有配置了 dsn 才上报
    if not dsn:
        return
    import sentry_sdk
    from sentry_sdk.integrations.logging import LoggingIntegration

    sentry_sdk.init(
        dsn=dsn,
        integrations=[
            LoggingIntegration(
                level=logging.WARNING,
                event_level=logging.ERROR,
            ),
        ],
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dvrate")
    parser.add_argument(
        "command",
        choices=["rate", "prob", "verify", "trend", "battery"],
        help="subcommand",
    )
    parser.add_argument(
        "--instance",
        dest="instance",
        help="instance file path",
    )
    parser.add_argument(
        "--out",
        dest="out",
        help="output file (.csv for verification rows)",
    )
    parser.add_argument(
        "--mode",
        dest="mode",
        help="rate: compact|constrained; prob: exact|mc|witness; battery: theorem|corollary",
    )
    parser.add_argument(
        "--mu",
        dest="mu",
        help='"stationary" or comma separated probabilities',
    )
    parser.add_argument(
        "--seed-override",
        dest="seed_override",
        type=int,
        help="replace the instance seed",
    )
    parser.add_argument(
        "--jobs",
        dest="jobs",
        type=int,
        help="worker threads, default 1",
    )
    parser.add_argument(
        "--count",
        dest="count",
        type=int,
        default=10,
        help="battery instances",
    )
    parser.add_argument(
        "--seed",
        dest="seed",
        type=int,
        default=0,
        help="first battery seed",
    )
    parser.add_argument(
        "--verbose",
        dest="verbose",
        action="store_true",
        default=None,
        help="show debug logs",
    )
    parser.add_argument(
        "--config",
        dest="config",
        help="config file path",
    )
    parser.add_argument(
        "--enable_config_example",
        dest="enable_config_example",
        help="是否输出示例配置文件",
        action="store_true",
    )
    return parser


def logging_config(version: str, log_file: str, verbose: bool) -> dict:
    level = "DEBUG" if verbose else "INFO"
    handlers = {
        "default": {
            "formatter": "default",
            "class": "logging.StreamHandler",
            "stream": "ext://sys.stderr",
        },
    }
    if log_file:
        handlers["file"] = {
            "level": "INFO",
            "class": "logging.handlers.RotatingFileHandler",
            "formatter": "default",
            "filename": log_file,
            "maxBytes": 10 * 1024 * 1024,
            "backupCount": 1,
        }
    return {
        "version": 1,
        "disable_existing_loggers": False,
        "formatters": {
            "default": {
                "format": f"%(asctime)s [{version}] [%(levelname)s] %(message)s",
                "datefmt": "[%X]",
            },
        },
        "handlers": handlers,
        "loggers": {
            "dvrate": {
                "handlers": list(handlers),
                "level": level,
                "propagate": False,
            },
        },
    }


def run(options: argparse.Namespace) -> int:
    from dvrate import __version__
    from dvrate.config import Config
    from dvrate.const import (
        EXIT_OK,
        EXIT_ROW_FAILED,
        MODE_CONSTRAINED,
        PROB_MODE_EXACT,
    )
    from dvrate.dvrate import DvRate
    from dvrate.errors import DvRateError, ParseError
    from dvrate.exact import PROB_COLUMNS
    from dvrate.verify import MODE_THEOREM

    try:
        config = Config.from_options(options)
    except (OSError, ValueError, TypeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return ParseError.exit_code

    logging.config.dictConfig(logging_config(__version__, config.log_file, bool(config.verbose)))
    init_sentry(config.sentry_dsn)
    log = logging.getLogger("dvrate")

    dv = None
    try:
        dv = DvRate(config)
        if options.command == "battery":
            rows = asyncio.run(dv.run_battery(options.mode or MODE_THEOREM, options.count, options.seed))
            dicts = [r.to_dict() for r in rows]
            print(dv.emit(dicts, dicts))
            return EXIT_OK if all(r.holds for r in rows) else EXIT_ROW_FAILED

        if not options.instance:
            raise ParseError(f"{options.command} needs --instance")
        instance = dv.load_instance(options.instance, options.seed_override)
        if options.command == "rate":
            print(dv.emit(dv.cmd_rate(instance, options.mode or MODE_CONSTRAINED, options.mu)))
        elif options.command == "prob":
            data, csv_rows = dv.cmd_prob(instance, options.mode or PROB_MODE_EXACT)
            print(dv.emit(data, csv_rows, PROB_COLUMNS))
        elif options.command == "verify":
            rows = dv.cmd_verify(instance)
            dicts = [r.to_dict() for r in rows]
            print(dv.emit(dicts, dicts))
            if not all(r.holds for r in rows):
                return EXIT_ROW_FAILED
        elif options.command == "trend":
            report = dv.cmd_trend(instance)
            print(dv.emit(report))
            if not report["holds"]:
                return EXIT_ROW_FAILED
    except DvRateError as e:
        log.error(f"{type(e).__name__}: {e}")
        violations = getattr(e, "violations", None)
        if violations and dv is not None:
            print(dv.emit({"error": str(e), "violations": violations}))
        return e.exit_code
    except ValueError as e:
        log.error(f"invalid input: {e}")
        return ParseError.exit_code
    return EXIT_OK


def main():
    from dvrate import __version__

    print(LOGO.format(f"dvrate v{__version__}"), file=sys.stderr)
    options = build_parser().parse_args()
    sys.exit(run(options))


if __name__ == "__main__":
    main()
