"""Command-line client for the pipeline service.

By default commands run against an in-process service instance; pass
--server to talk to a remote one instead.  Exit codes: 0 success, 1 usage
error (bad flags, bad config, missing inputs), 2 runtime failure.

Keep module-level imports free of numpy and heavy friends: --threads must
cap the BLAS pools before numpy is first imported.
"""

import argparse
import os
import sys

_THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _apply_thread_cap(argv) -> None:
    """Honor --threads before anything imports numpy."""
    value = None
    for i, token in enumerate(argv):
        if token == "--threads" and i + 1 < len(argv):
            value = argv[i + 1]
        elif token.startswith("--threads="):
            value = token.split("=", 1)[1]
    if value is None:
        return
    try:
        n = int(value)
    except ValueError:
        return
    if n >= 1:
        for name in _THREAD_ENV_VARS:
            os.environ[name] = str(n)


class _Parser(argparse.ArgumentParser):
    # usage problems exit 1; code 2 is reserved for runtime failures
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common_flags(parser) -> None:
    parser.add_argument("--config", metavar="PATH",
                        help="run-config file (key = value lines)")
    parser.add_argument("--set", metavar="KEY=VALUE", action="append",
                        default=[], dest="overrides",
                        help="override one config key (repeatable)")
    parser.add_argument("--seed", type=int, default=0,
                        help="run seed; every stream derives from it")
    parser.add_argument("--server", metavar="URL",
                        help="service URL (default: run in-process)")
    parser.add_argument("--threads", type=int, metavar="N",
                        help="cap BLAS/OpenMP thread pools")
    parser.add_argument("--force", action="store_true",
                        help="reuse a non-empty output directory")


def build_parser():
    from .runconfig import describe_defaults

    parser = _Parser(
        prog="auxpose",
        description="camera pose regression with a colorization side task",
        epilog=describe_defaults(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic dataset",
                       epilog=describe_defaults(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _common_flags(p)
    p.add_argument("--out", required=True, metavar="DIR",
                   help="dataset directory to create")

    p = sub.add_parser("train", help="train a model on a dataset",
                       epilog=describe_defaults(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _common_flags(p)
    p.add_argument("--dataset", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="DIR",
                   help="run directory for checkpoints and logs")
    p.add_argument("--resume", action="store_true",
                   help="continue from the newest checkpoint in --out")
    p.add_argument("--no-aux", action="store_true",
                   help="drop the colorization branch")
    p.add_argument("--no-attention", action="store_true",
                   help="drop the attention re-weighting")

    p = sub.add_parser("eval", help="evaluate a trained run",
                       epilog=describe_defaults(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _common_flags(p)
    p.add_argument("--dataset", required=True, metavar="DIR")
    p.add_argument("--run", required=True, metavar="DIR",
                   help="training run directory")
    p.add_argument("--checkpoint", metavar="PATH",
                   help="specific checkpoint (default: newest in --run)")
    p.add_argument("--out", metavar="DIR",
                   help="where to write reports (default: --run)")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--export-masks", action="store_true",
                   help="write attention masks next to the inputs")

    p = sub.add_parser("colorize", help="predict chroma for one image",
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _common_flags(p)
    p.add_argument("--run", required=True, metavar="DIR")
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--image", required=True, metavar="PATH",
                   help="P6 color or P5 grayscale input")
    p.add_argument("--out", required=True, metavar="PATH",
                   help="output PPM path")

    p = sub.add_parser("ablate", help="run the three-configuration study",
                       epilog=describe_defaults(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _common_flags(p)
    p.add_argument("--dataset", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--seeds", metavar="S1,S2,...",
                   help="override ablate.seeds")

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--threads", type=int, metavar="N")

    return parser


def _config_pairs(args) -> dict:
    from .runconfig import parse_kv_text

    pairs = {}
    if args.config:
        if not os.path.isfile(args.config):
            print(f"error: config file not found: {args.config}",
                  file=sys.stderr)
            raise SystemExit(1)
        with open(args.config, "r", encoding="utf-8") as f:
            pairs = parse_kv_text(f.read())
    for item in args.overrides:
        if "=" not in item:
            print(f"error: --set needs KEY=VALUE, got {item!r}",
                  file=sys.stderr)
            raise SystemExit(1)
        key, value = item.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def _make_client(server):
    if server:
        import httpx

        return httpx.Client(base_url=server, timeout=None)
    import warnings

    with warnings.catch_warnings():
        # this starlette release deprecates its httpx-backed test client
        # in favor of a package that is not published yet
        warnings.simplefilter("ignore")
        from fastapi.testclient import TestClient

    from .service.app import create_app

    return TestClient(create_app(), raise_server_exceptions=False)


def _post(client, path, payload):
    """(exit_code, body); non-2xx prints the service's message."""
    try:
        resp = client.post(path, json=payload)
    except Exception as err:
        print(f"error: {err}", file=sys.stderr)
        return 2, None
    if resp.status_code == 200:
        return 0, resp.json()
    try:
        detail = resp.json().get("detail", resp.text)
    except ValueError:
        detail = resp.text
    print(f"error: {detail}", file=sys.stderr)
    return (1 if resp.status_code < 500 else 2), None


def _cmd_gen_data(client, args):
    code, body = _post(client, "/gen-data", {
        "out_dir": args.out, "seed": args.seed, "force": args.force,
        "config": _config_pairs(args)})
    if code == 0:
        m = body["manifest"]
        print(f"dataset at {body['out_dir']}: {body['n_train']} train + "
              f"{body['n_test']} test images of "
              f"{m['image_width']}x{m['image_height']}, "
              f"{m['object_count']} objects, extent {m['extent']}, "
              f"seed {m['seed']}")
    return code


def _cmd_train(client, args):
    pairs = _config_pairs(args)
    if args.no_aux:
        pairs["model.use_auxiliary"] = "false"
    if args.no_attention:
        pairs["model.use_attention"] = "false"
    code, body = _post(client, "/train", {
        "dataset_dir": args.dataset, "out_dir": args.out, "seed": args.seed,
        "resume": args.resume, "force": args.force, "config": pairs})
    if code == 0:
        final = body["final"]
        if final is None:
            print(f"nothing to do: run already at {body['checkpoint']}")
        else:
            print(f"trained {body['epochs_run']} epochs; "
                  f"loss {final['loss_joint']:.4f}, "
                  f"probe medians {final['median_t_err']:.4f} / "
                  f"{final['median_r_err_deg']:.2f} deg")
            print(f"checkpoint: {body['checkpoint']}")
    return code


def _cmd_eval(client, args):
    code, body = _post(client, "/eval", {
        "dataset_dir": args.dataset, "run_dir": args.run,
        "checkpoint": args.checkpoint, "out_dir": args.out,
        "export_masks": args.export_masks, "split": args.split,
        "config": _config_pairs(args)})
    if code == 0:
        report = body["report"]
        line = (f"median_t_err={report['median_t_err']:.6g} "
                f"median_r_err_deg={report['median_r_err_deg']:.6g}")
        for tau, frac in sorted(report["colorization_acc"].items(),
                                key=lambda kv: float(kv[0])):
            line += f" acc@{tau}={frac:.4f}"
        print(line)
        print(f"report: {body['report_path']}")
        if body["mask_dir"]:
            print(f"masks: {body['mask_dir']}")
    return code


def _cmd_colorize(client, args):
    code, body = _post(client, "/colorize", {
        "run_dir": args.run, "checkpoint": args.checkpoint,
        "image_path": args.image, "out_path": args.out})
    if code == 0:
        print(f"wrote {body['out_path']} ({body['width']}x{body['height']})")
    return code


def _cmd_ablate(client, args):
    pairs = _config_pairs(args)
    if args.seeds:
        pairs["ablate.seeds"] = args.seeds
    code, body = _post(client, "/ablate", {
        "dataset_dir": args.dataset, "out_dir": args.out,
        "force": args.force, "config": pairs})
    if code == 0:
        print(f"table: {body['csv_path']} "
              f"(threshold {body['threshold']:.4g})")
        for name in ("baseline", "+aux", "+aux+attn"):
            entry = body["summary"].get(name)
            if entry is None:
                print(f"{name:>10}: no finished runs")
            else:
                print(f"{name:>10}: median_t {entry['median_t']:.4f}  "
                      f"median_r {entry['median_r_deg']:.2f} deg")
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _apply_thread_cap(argv)
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command == "serve":
        import uvicorn

        from .service.app import create_app

        uvicorn.run(create_app(), host=args.host, port=args.port)
        return 0

    handler = {
        "gen-data": _cmd_gen_data,
        "train": _cmd_train,
        "eval": _cmd_eval,
        "colorize": _cmd_colorize,
        "ablate": _cmd_ablate,
    }[args.command]
    client = _make_client(args.server)
    try:
        return handler(client, args)
    finally:
        client.close()


if __name__ == "__main__":
    sys.exit(main())
