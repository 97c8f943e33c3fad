"""Command-line client for the benchmark service.

Every subcommand is a thin HTTP client: with ``--server`` it talks to a
running instance, otherwise it mounts the service in-process and calls the
same endpoints, so artifacts land on the local filesystem either way.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import yaml


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    doc = yaml.safe_load(Path(path).read_text())
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ValueError(f"config file {path} must be a mapping")
    unknown = set(doc) - {"solver", "agent"}
    if unknown:
        raise ValueError(f"config file {path}: unknown sections {sorted(unknown)}")
    return doc


class ServiceClient:
    """httpx against a remote server, or an in-process ASGI mount."""

    def __init__(self, server: str | None):
        if server is None:
            import warnings

            with warnings.catch_warnings():
                # starlette's test client import warns about httpx pinning;
                # irrelevant noise for the in-process transport
                warnings.simplefilter("ignore")
                from fastapi.testclient import TestClient

            from .service import create_app

            self._client = TestClient(create_app(), raise_server_exceptions=False)
        else:
            import httpx

            self._client = httpx.Client(base_url=server, timeout=None)

    def request(self, method: str, path: str, payload: dict | None = None) -> dict:
        resp = self._client.request(method, path, json=payload)
        try:
            body = resp.json()
        except ValueError:
            body = {"error": resp.text.strip() or f"HTTP {resp.status_code}"}
        if resp.status_code >= 400:
            if isinstance(body, dict) and "error" in body:
                raise RuntimeError(body["error"])
            if isinstance(body, dict) and "detail" in body:
                raise RuntimeError(json.dumps(body["detail"]))
            raise RuntimeError(f"HTTP {resp.status_code}")
        return body


def _spec_payload(args) -> dict:
    return {
        "feeder": args.feeder,
        "out_dir": args.out,
        "state_option": args.state_option,
        "reward_option": args.reward_option,
        "algorithm": args.algorithm,
        "seeds": args.seeds,
        "steps": args.steps,
        "horizon": args.horizon,
        "customers_per_load": args.customers_per_load,
        "data_seed": args.data_seed,
        "meter_group_size": args.meter_group_size,
    }


def _add_spec_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--feeder", required=True, help="bundled feeder name or path to a feeder file")
    p.add_argument("--out", required=True, help="run directory for artifacts")
    p.add_argument("--state-option", type=int, default=2, choices=(1, 2, 3), dest="state_option")
    p.add_argument("--reward-option", type=int, default=1, choices=(1, 2, 3, 4), dest="reward_option")
    p.add_argument("--algorithm", default="dqn")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--steps", type=int, default=3000, help="agent-environment interaction steps")
    p.add_argument("--horizon", type=int, default=4032, help="load series length (half-hour steps)")
    p.add_argument("--customers-per-load", type=int, default=None, dest="customers_per_load",
                   help="default: 5, or 1 for the synthetic large feeder")
    p.add_argument("--data-seed", type=int, default=0, dest="data_seed")
    p.add_argument("--meter-group-size", type=int, default=1, dest="meter_group_size")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voltvar",
        description="Volt-VAR control benchmark client",
    )
    parser.add_argument("--server", default=None, help="service URL (default: run in-process)")
    parser.add_argument("--config", default=None, help="YAML file overriding solver/agent defaults")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write load series and the offline transition log")
    _add_spec_args(p)

    p = sub.add_parser("train", help="train the DQN baseline per seed on a generated run")
    _add_spec_args(p)

    p = sub.add_parser("evaluate", help="greedy rollout of a trained checkpoint")
    _add_spec_args(p)
    p.add_argument("--seed", type=int, default=None, help="checkpoint seed (default: first of --seeds)")
    p.add_argument("--eval-steps", type=int, default=500, dest="eval_steps")

    p = sub.add_parser("report", help="aggregate a run directory into report files")
    p.add_argument("--out", required=True, help="run directory to report on")

    p = sub.add_parser("feeders", help="list bundled feeders")

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8421)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "serve":
            import uvicorn

            from .service import create_app

            uvicorn.run(create_app(), host=args.host, port=args.port)
            return 0

        config = _load_config(args.config)
        client = ServiceClient(args.server)

        if args.command == "feeders":
            result = client.request("GET", "/feeders")
        elif args.command == "generate-data":
            result = client.request(
                "POST",
                "/datasets/generate",
                {"spec": _spec_payload(args), "solver": config.get("solver"), "agent": config.get("agent")},
            )
        elif args.command == "train":
            result = client.request(
                "POST",
                "/runs/train",
                {"spec": _spec_payload(args), "solver": config.get("solver"), "agent": config.get("agent")},
            )
        elif args.command == "evaluate":
            seed = args.seed if args.seed is not None else args.seeds[0]
            result = client.request(
                "POST",
                "/runs/evaluate",
                {
                    "spec": _spec_payload(args),
                    "seed": seed,
                    "steps": args.eval_steps,
                    "solver": config.get("solver"),
                },
            )
        elif args.command == "report":
            result = client.request("POST", "/runs/report", {"run_dir": args.out})
        else:  # pragma: no cover - argparse enforces choices
            raise RuntimeError(f"unknown command {args.command}")
    except Exception as exc:  # one-line machine-parsable failure
        print(f"error: {exc}", file=sys.stderr)
        return 1

    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
