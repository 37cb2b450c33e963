"""Command-line front end: ``advrestore <command> [flags]``.

Failures print one line ``error code=<name> exit=<n> msg=<text>`` to stderr and
exit with a code specific to the failure class.
"""
import argparse
import logging
import sys

from . import pipeline
from .attack import VARIANTS
from .config import ConfigError, ExperimentConfig, apply_overrides, load_config
from .dataio import CheckpointError

EXIT_OK = 0
EXIT_USAGE = 2  # argparse's own code
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_CHECKPOINT = 5
EXIT_LOCKED = 6
EXIT_STAGE = 7

COMMANDS = ("gen-data", "train-autoencoder", "train-rldm", "train-fr", "attack", "evaluate", "reproduce-report")


def _parser():
    p = argparse.ArgumentParser(prog="advrestore", description="Adversarial restoration attack experiments at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        c = sub.add_parser(name)
        c.add_argument("--config", help="JSON experiment config; flags override its keys")
        c.add_argument("--seed", type=int)
        c.add_argument("--out", required=True, help="work directory")
        c.add_argument("--rho", type=float, help="L-inf budget on the [0, 1] pixel scale")
        c.add_argument("--beta", type=float, help="sign-step size")
        c.add_argument("--n-max", type=int, dest="n_max")
        c.add_argument("--ddim-steps", type=int, dest="ddim_steps")
        c.add_argument("--variant", choices=VARIANTS)
        c.add_argument("--surrogate", help="surrogate checkpoint (default: <out>/models/fr-surrogate.ckpt)")
        c.add_argument("--victims", help="comma-separated victim checkpoints (default: all trained victims)")
        c.add_argument("--dump-config", action="store_true", help="write the resolved config to <out>/config.json")
    return p


def resolve_config(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return apply_overrides(
        cfg, seed=args.seed, rho=args.rho, beta=args.beta, n_max=args.n_max, variant=args.variant, ddim_steps=args.ddim_steps
    )


def run(args):
    cfg = resolve_config(args)
    wd = pipeline.WorkDir(args.out)
    with pipeline.Lock(wd.root):
        if args.dump_config:
            pipeline.dump_config(cfg, wd.root / "config.json")
        cmd = args.command
        if cmd == "gen-data":
            pipeline.gen_data(cfg, wd)
        elif cmd == "train-autoencoder":
            pipeline.train_autoencoder_stage(cfg, wd)
        elif cmd == "train-rldm":
            pipeline.train_rldm_stage(cfg, wd)
        elif cmd == "train-fr":
            pipeline.train_fr_stage(cfg, wd)
        elif cmd == "attack":
            pipeline.attack_stage(cfg, wd, cfg.attack.variant, args.surrogate, args.ddim_steps)
        elif cmd == "evaluate":
            victims = args.victims.split(",") if args.victims else None
            text, _ = pipeline.evaluate_stage(cfg, wd, victims, args.surrogate)
            sys.stdout.write(text)
        elif cmd == "reproduce-report":
            text, _ = pipeline.reproduce_report(cfg, wd)
            sys.stdout.write(text)


def _fail(code, exit_code, msg):
    msg = " ".join(str(msg).split())
    sys.stderr.write(f"error code={code} exit={exit_code} msg={msg}\n")
    return exit_code


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        run(args)
    except ConfigError as exc:
        return _fail("config", EXIT_CONFIG, exc)
    except pipeline.MissingArtifact as exc:
        return _fail(exc.code, EXIT_MISSING, exc)
    except CheckpointError as exc:
        return _fail("checkpoint", EXIT_CHECKPOINT, exc)
    except pipeline.LockHeld as exc:
        return _fail(exc.code, EXIT_LOCKED, exc)
    except (ValueError, FloatingPointError, RuntimeError, OSError) as exc:
        return _fail("stage_failed", EXIT_STAGE, f"{args.command}: {exc}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
