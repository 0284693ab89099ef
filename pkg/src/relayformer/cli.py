"""Command-line client for the service.

Subcommands: ``gen-data``, ``train``, ``eval``, ``gradcheck``,
``export-attention`` and ``serve``. By default each command talks to an
in-process instance of the service over the ASGI interface (single
process, same filesystem, fully deterministic); ``--server URL`` targets a
running instance instead.

Exit codes: 0 success, 1 usage error (bad flags or bad inputs), 2 runtime
failure (divergence, non-finite values, transport errors).
"""

from __future__ import annotations

import argparse
import asyncio
import json
import sys
from pathlib import Path
from typing import Any

import httpx

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse variant that reports usage problems as exit code 1."""

    def error(self, message: str):
        raise UsageError(message)


class ServiceClient:
    """Thin JSON-over-HTTP client; in-process ASGI unless a URL is given."""

    def __init__(self, server: str | None = None):
        self.server = server

    def post(self, path: str, payload: dict) -> dict:
        return asyncio.run(self._request("POST", path, payload))

    def get(self, path: str) -> dict:
        return asyncio.run(self._request("GET", path, None))

    async def _request(self, method: str, path: str, payload: dict | None) -> dict:
        if self.server is None:
            from .service.app import app

            transport = httpx.ASGITransport(app=app)
            base_url = "http://service.local"
        else:
            transport = None
            base_url = self.server
        async with httpx.AsyncClient(
            transport=transport, base_url=base_url, timeout=None
        ) as client:
            response = await client.request(method, path, json=payload)
        if response.status_code >= 500:
            raise RuntimeError(_detail(response))
        if response.status_code >= 400:
            raise UsageError(_detail(response))
        return response.json()


def _detail(response: httpx.Response) -> str:
    try:
        body = response.json()
    except ValueError:
        return response.text
    detail = body.get("detail", body)
    if isinstance(detail, str):
        return detail
    return json.dumps(detail)


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    config_path = Path(path)
    if not config_path.exists():
        raise UsageError(f"config file {path} does not exist")
    try:
        data = json.loads(config_path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return data


def _merged(section: dict, overrides: dict) -> dict | None:
    """File-provided settings with non-None command-line overrides on top."""
    merged = dict(section)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged or None


def build_parser() -> _Parser:
    parser = _Parser(prog="relayformer",
                     description="Skeleton action recognition runs, backed by "
                                 "the bundled service.")
    parser.add_argument("--server", default=None,
                        help="URL of a running service (default: in-process)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: _Parser) -> None:
        p.add_argument("--config", default=None,
                       help="JSON file with model/train/paths sections")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("gen-data", help="write a synthetic dataset container")
    common(p)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--per-class", type=int, default=None)
    p.add_argument("--joints", type=int, default=None)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--noise", type=float, default=None)

    p = sub.add_parser("train", help="train a model on a dataset container")
    common(p)
    p.add_argument("--data", default=None, help="dataset directory")
    p.add_argument("--preset", default=None, choices=["ntu60", "ntu120", "uav"])
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--modality", default=None, choices=["joint", "bone"])

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--split", default=None, choices=["train", "val", "test"])
    p.add_argument("--modality", default=None, choices=["joint", "bone"])

    p = sub.add_parser("gradcheck",
                       help="compare autodiff and finite-difference gradients")
    common(p)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--profile", default=None, choices=["tiny", "micro"],
                   help="verification model size (default tiny)")

    p = sub.add_parser("export-attention",
                       help="dump attention weights of one sample as JSON")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--sample", type=int, default=None)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    return parser


def _require(value: Any, flag: str, config_key: str) -> Any:
    if value is None:
        raise UsageError(f"missing {flag} (or {config_key} in the config file)")
    return value


def _paths(config: dict) -> dict:
    return config.get("paths", {})


def cmd_gen_data(args, client: ServiceClient) -> int:
    config = _load_config_file(args.config)
    options = config.get("options", {})
    payload = {
        "out_dir": _require(args.out or _paths(config).get("out"), "--out", "paths.out"),
    }
    for key, value in [("classes", args.classes), ("per_class", args.per_class),
                       ("joints", args.joints), ("frames", args.frames),
                       ("seed", args.seed), ("noise", args.noise)]:
        merged = value if value is not None else options.get(key)
        if merged is not None:
            payload[key] = merged
    result = client.post("/datasets/generate", payload)
    print(f"wrote {result['num_samples']} samples "
          f"({', '.join(result['classes'])}) to {result['out_dir']}")
    print(f"splits: {result['split_sizes']}")
    return EXIT_OK


def cmd_train(args, client: ServiceClient) -> int:
    config = _load_config_file(args.config)
    options = config.get("options", {})
    payload: dict[str, Any] = {
        "dataset_dir": _require(args.data or _paths(config).get("dataset"),
                                "--data", "paths.dataset"),
        "out_dir": _require(args.out or _paths(config).get("out"), "--out", "paths.out"),
    }
    preset = args.preset if args.preset is not None else options.get("preset")
    if preset is not None:
        payload["preset"] = preset
    modality = args.modality if args.modality is not None else options.get("modality")
    if modality is not None:
        payload["modality"] = modality
    if args.seed is not None:
        payload["seed"] = args.seed
    model_section = config.get("model", {})
    if model_section:
        payload["model"] = model_section
    train_section = _merged(config.get("train", {}),
                            {"epochs": args.epochs, "batch_size": args.batch_size})
    if train_section:
        payload["train"] = train_section
    result = client.post("/runs/train", payload)
    if result["final_train_acc"] is None:
        print(f"trained {result['epochs_run']} epochs (parameters unchanged)")
    else:
        print(f"trained {result['epochs_run']} epochs; "
              f"final train acc {result['final_train_acc']:.3f}, "
              f"val acc {result['final_val_acc']:.3f}")
    print(f"checkpoint: {result['checkpoint_dir']}")
    print(f"history:    {result['history_csv']}")
    print(f"config:     {result['config_json']}")
    return EXIT_OK


def cmd_eval(args, client: ServiceClient) -> int:
    config = _load_config_file(args.config)
    options = config.get("options", {})
    payload = {
        "checkpoint_dir": _require(args.checkpoint or _paths(config).get("checkpoint"),
                                   "--checkpoint", "paths.checkpoint"),
        "dataset_dir": _require(args.data or _paths(config).get("dataset"),
                                "--data", "paths.dataset"),
        "out_dir": _require(args.out or _paths(config).get("out"), "--out", "paths.out"),
    }
    split = args.split if args.split is not None else options.get("split")
    if split is not None:
        payload["split"] = split
    modality = args.modality if args.modality is not None else options.get("modality")
    if modality is not None:
        payload["modality"] = modality
    result = client.post("/runs/evaluate", payload)
    print(f"accuracy {result['accuracy']:.4f} over {result['num_samples']} samples")
    print(f"metrics:   {result['metrics_json']}")
    print(f"confusion: {result['confusion_csv']}")
    return EXIT_OK


def cmd_gradcheck(args, client: ServiceClient) -> int:
    config = _load_config_file(args.config)
    options = config.get("options", {})
    payload: dict[str, Any] = {}
    for key, value in [("eps", args.eps), ("threshold", args.threshold),
                       ("seed", args.seed), ("profile", args.profile)]:
        merged = value if value is not None else options.get(key)
        if merged is not None:
            payload[key] = merged
    out = args.out or _paths(config).get("out")
    if out is not None:
        payload["out_dir"] = out
    result = client.post("/runs/gradcheck", payload)
    for entry in result["entries"]:
        print(f"{entry['name']:55s} {entry['max_rel_error']:.3e}")
    print(f"max relative error {result['max_rel_error']:.3e} "
          f"(threshold {result['threshold']:.1e})")
    if not result["passed"]:
        offenders = [e["name"] for e in result["entries"]
                     if e["max_rel_error"] > result["threshold"]]
        print(f"FAILED parameters: {', '.join(offenders)}")
        return EXIT_RUNTIME
    print("PASSED")
    return EXIT_OK


def cmd_export_attention(args, client: ServiceClient) -> int:
    config = _load_config_file(args.config)
    options = config.get("options", {})
    payload = {
        "checkpoint_dir": _require(args.checkpoint or _paths(config).get("checkpoint"),
                                   "--checkpoint", "paths.checkpoint"),
        "dataset_dir": _require(args.data or _paths(config).get("dataset"),
                                "--data", "paths.dataset"),
        "out_dir": _require(args.out or _paths(config).get("out"), "--out", "paths.out"),
    }
    sample = args.sample if args.sample is not None else options.get("sample_index")
    if sample is not None:
        payload["sample_index"] = sample
    result = client.post("/runs/export-attention", payload)
    print(f"wrote {result['num_records']} attention records to {result['out_path']}")
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service.app import app

    uvicorn.run(app, host=args.host, port=args.port)
    return EXIT_OK


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "export-attention": cmd_export_attention,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "serve":
            return cmd_serve(args)
        client = ServiceClient(args.server)
        return _HANDLERS[args.command](args, client)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RuntimeError, httpx.HTTPError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
