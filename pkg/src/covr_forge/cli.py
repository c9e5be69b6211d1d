"""covr-forge command line: run pipeline stages, generate toy data, serve.

Exit codes: 0 success, 2 configuration error, 3 missing upstream artifact,
4 generation-service failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .pipeline import (
    EXIT_CONFIG,
    EXIT_MISSING_ARTIFACT,
    EXIT_OK,
    EXIT_SERVICE,
    ConfigError,
    MissingArtifactError,
    STAGES,
    StrictHashError,
    load_config,
    run_all,
    run_stage,
)
from .textgen import MtgTransportError

logger = logging.getLogger("covr_forge")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="covr-forge",
        description="Synthesize composed-video-retrieval triplets, train and evaluate a fusion model.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    stage_names = list(STAGES) + ["all"]
    for name in stage_names:
        p = sub.add_parser(name, help=f"run the {name} stage" if name != "all" else "run the full pipeline")
        p.add_argument("--config", required=True, help="pipeline config YAML")
        p.add_argument("--force", action="store_true", help="re-run even if manifests are up to date")
        p.add_argument("--strict", action="store_true", help="fail on input-hash mismatch instead of re-running")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out-dir", help="override the output directory")
        p.add_argument("--workers", type=int, help="worker processes for mining")
        p.add_argument("--mtg-url", help="generation service base URL")
        p.add_argument("--mtg-mode", choices=["rule", "rule-paraphrase", "llm"], help="text generation mode")
        p.add_argument("--candidates", type=int, help="generations per caption pair")
        p.add_argument("--select", choices=["first", "longest"], help="candidate selection strategy")
        if name == "serve-annotate":
            p.add_argument("--port", type=int, help="HTTP port")
            p.add_argument("--lease-seconds", type=float, help="candidate lease duration")
            p.add_argument("--pool", help="candidate pool JSONL (defaults to the make-eval-set artifact)")
            p.add_argument("--log", help="decision log JSONL path")

    toy = sub.add_parser("make-toy-data", help="generate the bundled synthetic corpus and config")
    toy.add_argument("--out", required=True, help="directory for the generated data + config.yaml")
    toy.add_argument("--seed", type=int, default=0)

    stub = sub.add_parser("serve-mtg-stub", help="run the deterministic generation stub service")
    stub.add_argument("--port", type=int, default=8099)
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    overrides = {}
    for key, attr in (
        ("seed", "seed"),
        ("out_dir", "out_dir"),
        ("workers", "workers"),
        ("mtg_url", "mtg_url"),
        ("mtg_mode", "mtg_mode"),
        ("n_candidates", "candidates"),
        ("select", "select"),
    ):
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    return overrides


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )

    if args.command == "make-toy-data":
        from . import toyworld

        out = Path(args.out)
        world = toyworld.build_world(seed=args.seed)
        paths = toyworld.write_world(world, out)
        config_path = toyworld.write_config(paths, out / "config.yaml", seed=args.seed)
        print(f"toy world written to {out} (config: {config_path})")
        return EXIT_OK

    if args.command == "serve-mtg-stub":
        from . import mtg_stub

        return mtg_stub.main(["--port", str(args.port)])

    try:
        cfg = load_config(args.config, overrides=_overrides(args))
        if args.command == "serve-annotate":
            if getattr(args, "port", None) is not None:
                cfg.annotate_port = args.port
            if getattr(args, "lease_seconds", None) is not None:
                cfg.annotate_lease_seconds = args.lease_seconds
            return _serve_annotate(cfg, args)
        if args.command == "all":
            results = run_all(cfg, force=args.force, strict=args.strict)
            for name, manifest in results.items():
                status = "skipped" if manifest.get("skipped") else "ran"
                print(f"{name}: {status} {manifest['counts']}")
        else:
            manifest = run_stage(args.command, cfg, force=args.force, strict=args.strict)
            status = "skipped" if manifest.get("skipped") else "ran"
            print(f"{args.command}: {status} {manifest['counts']}")
        return EXIT_OK
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except (MissingArtifactError, StrictHashError) as exc:
        logger.error("%s", exc)
        return EXIT_MISSING_ARTIFACT
    except MtgTransportError as exc:
        logger.error("generation service failure: %s", exc)
        return EXIT_SERVICE


def _serve_annotate(cfg, args) -> int:
    from . import annotate

    pool = Path(args.pool) if getattr(args, "pool", None) else cfg.artifact("annotate_pool.jsonl")
    log = Path(args.log) if getattr(args, "log", None) else cfg.artifact("decision_log.jsonl")
    if not pool.exists():
        raise MissingArtifactError(f"candidate pool not found: {pool}")
    queue = annotate.AnnotationQueue.from_files(pool, log, lease_seconds=cfg.annotate_lease_seconds)
    app = annotate.create_app(queue, frames_dir=cfg.annotate_frames_dir)
    import uvicorn

    print(f"annotation service on http://127.0.0.1:{cfg.annotate_port} (pool: {pool}, log: {log})")
    uvicorn.run(app, host="127.0.0.1", port=cfg.annotate_port, log_level="warning")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
