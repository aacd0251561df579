"""``dhnet`` command line.

Exit status: 0 success, 1 runtime failure, 2 usage error.
"""
import argparse
import logging
import os
import sys

import numpy as np
import torch

from . import volterra
from .errors import DHNetError
from .harness import config as cfgmod
from .harness.checkpoint import load_checkpoint, write_atomic
from .harness.dataset import Manifest, generate_dataset, read_image, write_image
from .harness.train import build_net, evaluate, infer_image, train
from .network import count_params_macs

log = logging.getLogger("dhnet")


def _common(parser):
    parser.add_argument("--config", metavar="PATH", help="INI config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. network.width=16 (repeatable)")
    parser.add_argument("--out", metavar="DIR", help="output directory")
    parser.add_argument("--seed", type=int, help="random seed")
    parser.add_argument("--workers", type=int, default=1, help="CPU threads")
    parser.add_argument("--precision", choices=("single", "double"))


def build_parser():
    parser = argparse.ArgumentParser(prog="dhnet", description="DHNet deblurring toolkit")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="generate a synthetic region-blur dataset")
    _common(p)

    p = sub.add_parser("train", help="train a network")
    _common(p)
    p.add_argument("--data", metavar="DIR", help="dataset directory (uses DIR/train.manifest)")
    p.add_argument("--manifest", metavar="PATH", help="training manifest")

    p = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint on a manifest")
    _common(p)
    p.add_argument("--checkpoint", metavar="PATH", help="required unless --baseline")
    p.add_argument("--manifest", required=True, metavar="PATH")
    p.add_argument("--baseline", action="store_true", help="score the blurred inputs instead")

    p = sub.add_parser("infer", help="restore images")
    _common(p)
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("inputs", nargs="+", help="PNG files or directories")

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    _common(p)
    p.add_argument("--skip-network", action="store_true")
    p.add_argument("--entries", type=int, default=3, help="probed elements per network tensor")

    p = sub.add_parser("complexity", help="parameter and MAC counts")
    _common(p)
    p.add_argument("--resolution", default="256x256", metavar="HxW")

    p = sub.add_parser("fit-activation", help="polynomial fit of an activation function")
    _common(p)
    p.add_argument("--activation", default="sigmoid", choices=sorted(volterra.ACTIVATIONS))
    p.add_argument("--order", type=int, default=3)
    p.add_argument("--lo", type=float, default=-1.0)
    p.add_argument("--hi", type=float, default=1.0)
    p.add_argument("--samples", type=int, default=None)
    return parser


def load_config(args):
    cfg = cfgmod.load(args.config) if args.config else cfgmod.RunConfig()
    cfg = cfgmod.apply_overrides(cfg, args.overrides)
    if args.precision:
        cfg = cfgmod.apply(cfg, "network", "precision", args.precision)
    return cfg


def _out_dir(args, default="."):
    out = args.out or default
    os.makedirs(out, exist_ok=True)
    return out


def cmd_gen_data(args, cfg):
    if args.seed is not None:
        cfg = cfgmod.apply(cfg, "data", "seed", str(args.seed))
    manifests = generate_dataset(_out_dir(args, "data"), cfg.data)
    for split, path in manifests.items():
        print(f"{split}: {path}")


def cmd_train(args, cfg):
    if args.seed is not None:
        cfg = cfgmod.apply(cfg, "train", "seed", str(args.seed))
    path = args.manifest or (os.path.join(args.data, "train.manifest") if args.data else None)
    if path is None:
        raise DHNetError("train needs --data DIR or --manifest PATH")
    out = _out_dir(args, "run")
    write_atomic(os.path.join(out, "config.cfg"), cfgmod.to_text(cfg).encode())
    ckpt_path = os.path.join(out, "model.ckpt")
    ckpt = train(cfg.train, Manifest.load(path), cfg.network, ckpt_path, workers=args.workers)
    print(f"checkpoint: {ckpt_path} (final loss {ckpt.losses[-1]:.6f})")


def cmd_eval(args, cfg):
    if not (args.baseline or args.checkpoint):
        raise DHNetError("eval needs --checkpoint PATH or --baseline")
    torch.set_num_threads(max(1, args.workers))
    manifest = Manifest.load(args.manifest, check=False)
    report = evaluate(None if args.baseline else load_checkpoint(args.checkpoint), manifest,
                      baseline=args.baseline)
    text = report.to_text()
    if args.out:
        out = _out_dir(args)
        write_atomic(os.path.join(out, "metrics.txt"), text.encode())
        write_atomic(os.path.join(out, "metrics.json"), report.to_json().encode())
    sys.stdout.write(text)
    if report.skipped:
        for name, reason in report.skipped:
            print(f"skipped {name}: {reason}", file=sys.stderr)


def cmd_infer(args, cfg):
    torch.set_num_threads(max(1, args.workers))
    net = build_net(load_checkpoint(args.checkpoint))
    out = _out_dir(args, "restored")
    files = []
    for item in args.inputs:
        if os.path.isdir(item):
            files += [os.path.join(item, f) for f in sorted(os.listdir(item)) if f.lower().endswith(".png")]
        else:
            files.append(item)
    for path in files:
        dest = os.path.join(out, os.path.basename(path))
        write_image(dest, infer_image(net, read_image(path)))
        print(dest)


def cmd_gradcheck(args, cfg):
    from .verify import gradient_suite
    seed = 0 if args.seed is None else args.seed
    ok = True
    for name, (report, tol) in gradient_suite(seed, network=not args.skip_network,
                                              max_entries=args.entries).items():
        print(f"== {name}")
        print(report.table())
        ok &= report.passed
    return 0 if ok else 1


def _resolution(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise DHNetError(f"resolution must look like 256x256, got {text!r}") from None
    return h, w


def cmd_complexity(args, cfg):
    print(count_params_macs(cfg.network, _resolution(args.resolution)).format())


def cmd_fit_activation(args, cfg):
    f = volterra.ACTIVATIONS[args.activation]
    poly, err = volterra.fit_memoryless_polynomial(f, args.lo, args.hi, args.order, args.samples)
    print(f"activation {args.activation} on [{args.lo:g}, {args.hi:g}], order {args.order}")
    print("fitted   " + " ".join(f"{c:+.10f}" for c in poly.coefficients))
    print(f"fit max residual {err:.6e}")
    ref = volterra.taylor_polynomial(args.activation, args.order, (args.lo + args.hi) / 2)
    if ref is None:
        print("taylor   (no expansion for this activation)")
        return
    ref_err = volterra.max_residual(f, ref, args.lo, args.hi, args.samples)
    print("taylor   " + " ".join(f"{c:+.10f}" for c in ref.coefficients))
    print(f"taylor max residual {ref_err:.6e}")
    print(f"fit beats taylor: {'yes' if err <= ref_err else 'no'}")


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
    "gradcheck": cmd_gradcheck, "complexity": cmd_complexity, "fit-activation": cmd_fit_activation,
}


def main(argv=None):
    level = os.environ.get("DHNET_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args)
    except (DHNetError, OSError) as e:
        parser.error(str(e))
    try:
        if args.seed is not None:
            torch.manual_seed(args.seed)
            np.random.seed(args.seed)
        return COMMANDS[args.command](args, cfg) or 0
    except (DHNetError, OSError, KeyError) as e:
        print(f"dhnet {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
