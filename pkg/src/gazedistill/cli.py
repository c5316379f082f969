"""Command-line client for the service.

Every subcommand is a thin HTTP call. By default the service app is mounted
in-process (no network, same filesystem); pass --server to talk to a running
instance instead. Errors print one machine-parsable line to stderr.

Exit codes: 0 success, 2 usage error, 3 config/validation error, 1 anything else.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import sys

import httpx

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3

# error kinds that signal a bad config or invalid input rather than a runtime failure
_CONFIG_KINDS = {
    "config",
    "bad_request",
    "ablate",
    "gaze_format",
    "DatasetError",
    "ReportParseError",
    "ReportSchemaError",
    "ReportVocabularyError",
    "ReportRangeError",
}


def _call(server: str | None, method: str, path: str, payload: dict | None) -> tuple[int, dict]:
    async def go():
        if server:
            transport = None
            base_url = server
        else:
            from .service.app import app

            transport = httpx.ASGITransport(app=app)
            base_url = "http://gazedistill.internal"
        async with httpx.AsyncClient(transport=transport, base_url=base_url, timeout=None) as client:
            response = await client.request(method, path, json=payload)
            try:
                body = response.json()
            except ValueError:
                body = {"kind": "protocol", "detail": response.text}
            return response.status_code, body

    return asyncio.run(go())


def _overrides(args: argparse.Namespace) -> dict:
    out: dict[str, str] = {}
    for pair in args.set or []:
        if "=" not in pair:
            print(f"error: {json.dumps({'kind': 'usage', 'detail': f'--set expects key=value, got {pair!r}'})}", file=sys.stderr)
            raise SystemExit(EXIT_USAGE)
        key, _, value = pair.partition("=")
        out[key.strip()] = value.strip()
    if args.seed is not None:
        for key in ("train.seed", "scene.seed", "text.seed"):
            out.setdefault(key, str(args.seed))
    return out


def _carrier(args: argparse.Namespace) -> dict:
    return {"config_path": args.config, "overrides": _overrides(args)}


def _finish(status: int, body: dict) -> int:
    if 200 <= status < 300:
        print(json.dumps(body, sort_keys=True))
        return EXIT_OK
    line = json.dumps(body, sort_keys=True)
    print(f"error: {line}", file=sys.stderr)
    if body.get("kind") in _CONFIG_KINDS:
        return EXIT_CONFIG
    return EXIT_FAILURE


def _cmd_synth(args) -> int:
    payload = {**_carrier(args), "out_dir": args.out}
    return _finish(*_call(args.server, "POST", "/synth", payload))


def _cmd_masks(args) -> int:
    payload = {**_carrier(args), "dataset_dir": args.dataset, "out_dir": args.out}
    return _finish(*_call(args.server, "POST", "/masks", payload))


def _cmd_report(args) -> int:
    if bool(args.validate) == bool(args.image):
        print(
            f"error: {json.dumps({'kind': 'usage', 'detail': 'pass exactly one of --validate or --image'})}",
            file=sys.stderr,
        )
        return EXIT_USAGE
    if args.validate:
        try:
            raw = open(args.validate, encoding="utf-8").read()
        except OSError as exc:
            return _finish(400, {"kind": "bad_request", "detail": str(exc)})
        return _finish(*_call(args.server, "POST", "/report/validate", {"raw_text": raw}))
    payload = {**_carrier(args), "image_path": args.image}
    return _finish(*_call(args.server, "POST", "/report/fetch", payload))


def _cmd_train_teacher(args) -> int:
    payload = {**_carrier(args), "dataset_dir": args.dataset, "run_dir": args.run_dir}
    return _finish(*_call(args.server, "POST", "/train/teacher", payload))


def _cmd_train_student(args) -> int:
    payload = {
        **_carrier(args),
        "dataset_dir": args.dataset,
        "teacher_checkpoint": args.teacher,
        "run_dir": args.run_dir,
    }
    return _finish(*_call(args.server, "POST", "/train/student", payload))


def _cmd_eval(args) -> int:
    payload = {
        **_carrier(args),
        "dataset_dir": args.dataset,
        "checkpoint": args.checkpoint,
        "split": args.split,
        "out_path": args.out,
    }
    return _finish(*_call(args.server, "POST", "/eval", payload))


def _cmd_ablate(args) -> int:
    payload = {
        **_carrier(args),
        "dataset_dir": args.dataset,
        "axis": args.axis,
        "run_dir": args.run_dir,
    }
    return _finish(*_call(args.server, "POST", "/ablate", payload))


def _cmd_serve(args) -> int:
    import uvicorn

    from .service.app import app

    uvicorn.run(app, host=args.host, port=args.port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gazedistill", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
        p.add_argument("--seed", type=int, default=None, help="global seed override")
        p.add_argument("--server", default=None, help="service URL (default: in-process)")

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    common(p)
    p.add_argument("--out", default=None, help="dataset output directory")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("masks", help="build pseudo-mask PNGs from gaze logs")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_masks)

    p = sub.add_parser("report", help="fetch or validate a lesion report")
    common(p)
    p.add_argument("--image", default=None, help="image path to fetch a report for")
    p.add_argument("--validate", default=None, help="file holding raw provider output")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("train-teacher", help="stage one: fused teacher")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--run-dir", default=None)
    p.set_defaults(func=_cmd_train_teacher)

    p = sub.add_parser("train-student", help="stage two: distill into the student")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--teacher", required=True, help="teacher checkpoint directory")
    p.add_argument("--run-dir", default=None)
    p.set_defaults(func=_cmd_train_student)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", default=None, help="write the JSON report here")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation axis")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--axis", required=True)
    p.add_argument("--run-dir", default=None)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=_cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
