"""Command-line entry point.

Exit codes: 0 success, 2 protocol error, 3 I/O error, 4 config error.
"""

from __future__ import annotations

import argparse
import collections
import json
import logging
import sys
from pathlib import Path

from . import crypto
from .config import default_config_data, load_config
from .errors import BindError, ConfigError, LengthError, ProtocolError
from .harness import build_backend, run_e2e, run_generic_session
from .keybox import generate_keybox, load_keybox_file, save_keybox_file, validate_keybox
from .trace import read_trace
from .transport import FrameServer, parse_endpoint

log = logging.getLogger("wvsim")

EXIT_OK = 0
EXIT_PROTOCOL = 2
EXIT_IO = 3
EXIT_CONFIG = 4


def cmd_gen_keybox(args) -> int:
    rng = crypto.seeded_random(args.seed) if args.seed is not None else crypto.system_random
    kb = generate_keybox(rng)
    out = Path(args.out)
    save_keybox_file(kb, out)
    print(f"wrote {out} device_id={kb.device_id.hex()}")
    if args.config:
        cfg_path = Path(args.config)
        if cfg_path.exists():
            data = json.loads(cfg_path.read_text())
        else:
            data = default_config_data()
        base = cfg_path.resolve().parent
        try:
            rel = str(out.resolve().relative_to(base))
        except ValueError:
            rel = str(out.resolve())
        if rel not in data.setdefault("known_keyboxes", []):
            data["known_keyboxes"].append(rel)
        if not cfg_path.exists() or "keybox" not in data:
            data["keybox"] = rel
        cfg_path.write_text(json.dumps(data, indent=2) + "\n")
        print(f"registered device in {cfg_path}")
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        kb = load_keybox_file(args.keybox)
    except LengthError as exc:
        print(f"{args.keybox}: BadLength ({exc})")
        return EXIT_PROTOCOL
    status = validate_keybox(kb)
    print(f"{args.keybox}: {status.value}")
    return EXIT_OK if status.value == "OK" else EXIT_PROTOCOL


def cmd_e2e(args) -> int:
    cfg = load_config(args.config)
    output = Path(args.output)
    result = run_e2e(cfg, Path(args.input), output,
                     Path(args.package) if args.package else None)
    print(f"provisioned={'yes' if result.provisioned else 'no'} keys_loaded={result.keys_loaded} "
          f"decrypted={result.bytes_decrypted}B -> {output}")
    if args.verify:
        if output.read_bytes() != Path(args.input).read_bytes():
            print("decrypted output differs from input", file=sys.stderr)
            return EXIT_PROTOCOL
        print("output matches input")
    return EXIT_OK


def cmd_generic_session(args) -> int:
    cfg = load_config(args.config)
    payload = Path(args.payload).read_bytes() if args.payload else args.message.encode()
    result = run_generic_session(cfg, payload)
    print(f"generic encrypt/decrypt round trip: {'ok' if result.roundtrip_ok else 'FAILED'}")
    print(f"generic sign tag={result.tag.hex()} verify={result.verified} "
          f"tampered_rejected={result.tamper_rejected}")
    ok = result.roundtrip_ok and result.verified and result.tamper_rejected
    return EXIT_OK if ok else EXIT_PROTOCOL


def cmd_serve(args) -> int:
    cfg = load_config(args.config)
    host, port = args.host, args.port
    if args.listen:
        host, port = parse_endpoint(args.listen)
    server = FrameServer(build_backend(cfg), host, port)
    bound_host, bound_port = server.address
    print(f"listening on {bound_host}:{bound_port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def cmd_trace_dump(args) -> int:
    with open(args.trace) as fh:
        records = read_trace(fh)
    if args.session:
        records = [r for r in records if r.session == args.session.lower().rjust(8, "0")]
    if args.symbol:
        wanted = {s if s.startswith("oecc") else f"oecc{int(s):02d}" for s in args.symbol}
        records = [r for r in records if r.symbol in wanted]
    if args.summary:
        counts = collections.Counter((r.symbol, r.name) for r in records)
        errors = collections.Counter((r.symbol, r.name) for r in records if not r.ok)
        for (sym, name), n in sorted(counts.items()):
            print(f"{sym} {name:<26} calls={n} errors={errors[(sym, name)]}")
        return EXIT_OK
    by_session = collections.defaultdict(list)
    for r in records:
        by_session[r.session].append(r)
    for session, recs in by_session.items():
        print(f"session {session}")
        for r in recs:
            print(f"  {r.symbol} {r.name:<26} {r.status:<22} in={r.inp[:32]} out={r.out[:32]}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wvsim", description="Widevine-style key ladder simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-keybox", help="write a fresh synthetic 128-byte keybox")
    p.add_argument("out")
    p.add_argument("--config", help="register the device in this config (created if missing)")
    p.add_argument("--seed", type=int, help="deterministic keybox for fixtures")
    p.set_defaults(func=cmd_gen_keybox)

    p = sub.add_parser("validate", help="check a keybox file's magic and CRC")
    p.add_argument("keybox")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("e2e", help="provision, license and decrypt a file")
    p.add_argument("--config", required=True)
    p.add_argument("--input", required=True, help="plaintext media file")
    p.add_argument("--output", required=True, help="where the decrypted bytes go")
    p.add_argument("--package", help="encrypted file path (sidecar gets .json)")
    p.add_argument("--verify", action="store_true", help="compare output with input")
    p.set_defaults(func=cmd_e2e)

    p = sub.add_parser("generic-session", help="license session + generic crypto session demo")
    p.add_argument("--config", required=True)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--payload", help="file to protect")
    group.add_argument("--message", default="hello from the generic crypto session")
    p.set_defaults(func=cmd_generic_session)

    p = sub.add_parser("serve", help="serve provisioning and license requests on loopback")
    p.add_argument("--config", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--listen", help="host:port, overrides --host/--port")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("trace-dump", help="pretty-print a trace file")
    p.add_argument("trace")
    p.add_argument("--session", help="only this session (hex)")
    p.add_argument("--symbol", action="append", help="only these oecc symbols (repeatable)")
    p.add_argument("--summary", action="store_true", help="per-symbol call and error counts")
    p.set_defaults(func=cmd_trace_dump)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ProtocolError as exc:
        phase = getattr(exc, "phase", "protocol")
        print(f"{phase} error [{exc.kind}]: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (BindError, OSError, EOFError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (json.JSONDecodeError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
