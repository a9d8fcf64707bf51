"""Command-line entry point: train / attack / verify / eval.

Every command writes into ``--out DIR`` and leaves a ``manifest.txt`` of
``key=value`` lines there.  ``--manifest FILE`` reloads a previous run's flags
(explicit flags still win), which reproduces weights and verdicts exactly.

Exit codes: 0 success, 2 training diverged, 64 usage error, 74 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .attack import AttackConfig, attack_success_rate
from .data_io import (MNIST_MEAN, MNIST_STD, Dataset, IdxFormatError, from_csv, load_idx,
                      normalize, synth_blobs, synth_moons)
from .model import ModelFormatError, Network, load, save
from .train import TrainConfig, TrainingDiverged, robust_losses, train
from .verify import RobustnessSpec, metrics

EXIT_OK = 0
EXIT_DIVERGED = 2
EXIT_USAGE = 64
EXIT_IO = 74

SCHEME_FLAGS = {"regular": "regular", "adv": "adversarial", "adversarial": "adversarial",
                "verifiable": "verifiable", "mixtrain": "mixtrain"}

log = logging.getLogger("verirobust")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- data specs -------------------------------------------------------------------

def _kv(text: str) -> dict:
    out = {}
    for part in filter(None, text.split(",")):
        if "=" not in part:
            raise UsageError(f"expected key=value, got {part!r}")
        k, v = part.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_data(spec: str, normalize_with: str | None = None, limit: int | None = None) -> Dataset:
    """Parse a dataset spec.

    ``moons:n=600,noise=0.1,seed=0``, ``blobs:n=300,k=3,spread=0.05,seed=0``,
    ``idx:IMAGES,LABELS``, ``mnist:DIR/PREFIX`` (PREFIX-images-idx3-ubyte[.gz]
    and PREFIX-labels-idx1-ubyte[.gz]), ``csv:PATH``.
    """
    kind, _, rest = spec.partition(":")
    try:
        if kind == "moons":
            a = _kv(rest)
            ds = synth_moons(int(a.get("n", 600)), float(a.get("noise", 0.1)), int(a.get("seed", 0)))
        elif kind == "blobs":
            a = _kv(rest)
            ds = synth_blobs(int(a.get("n", 300)), int(a.get("k", 3)),
                             float(a.get("spread", 0.05)), int(a.get("seed", 0)))
        elif kind == "idx":
            parts = rest.split(",")
            if len(parts) != 2:
                raise UsageError("idx spec needs IMAGES,LABELS")
            ds = load_idx(*parts)
        elif kind == "mnist":
            ds = load_idx(*_mnist_paths(rest))
            if normalize_with is None:
                normalize_with = f"{MNIST_MEAN},{MNIST_STD}"
        elif kind == "csv":
            ds = from_csv(rest)
        else:
            raise UsageError(f"unknown data spec {spec!r}")
    except IdxFormatError:
        raise
    except (KeyError, ValueError) as exc:
        raise UsageError(f"bad data spec {spec!r}: {exc}") from exc
    if limit is not None:
        ds = ds.subset(np.arange(min(limit, len(ds))))
    if normalize_with:
        mean, std = (float(v) for v in normalize_with.split(","))
        ds = normalize(ds, mean, std)
    return ds


def _mnist_paths(prefix: str):
    out = []
    for what, nd in (("images", 3), ("labels", 1)):
        base = f"{prefix}-{what}-idx{nd}-ubyte"
        out.append(base if Path(base).exists() else base + ".gz")
    return out


# -- manifest ---------------------------------------------------------------------------

_NOT_RECORDED = {"manifest", "out", "func", "verbose"}


def write_manifest(path: Path, args, extra: dict, started: float) -> None:
    lines = ["tool=verirobust", f"version={__version__}", f"command={args.command}"]
    for k, v in sorted(vars(args).items()):
        if k in _NOT_RECORDED or k == "command":
            continue
        lines.append(f"arg.{k}={'' if v is None else v}")
    for k, v in extra.items():
        lines.append(f"{k}={v}")
    lines.append("started=" + datetime.fromtimestamp(started, timezone.utc).isoformat())
    lines.append("finished=" + datetime.now(timezone.utc).isoformat())
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k] = v
    return out


def _manifest_defaults(sub: argparse.ArgumentParser, manifest: dict) -> dict:
    defaults = {}
    for action in sub._actions:
        key = f"arg.{action.dest}"
        if key not in manifest:
            continue
        raw = manifest[key]
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[action.dest] = raw == "True"
        elif raw == "":
            defaults[action.dest] = None
        else:
            defaults[action.dest] = action.type(raw) if action.type else raw
    return defaults


# -- commands -------------------------------------------------------------------------------

def _hidden(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v]


def cmd_train(args) -> int:
    scheme = SCHEME_FLAGS[args.scheme]
    if scheme != "mixtrain":
        for flag in ("k", "alpha0", "acc_target"):
            if getattr(args, flag) is not None:
                raise UsageError(f"--{flag.replace('_', '-')} only applies to --scheme mixtrain")
    data = load_data(args.data, args.normalize, args.limit)
    attack = AttackConfig(kind="pgd", epsilon=args.epsilon, pgd_steps=args.pgd_steps,
                          pgd_step=args.pgd_step)
    kw = dict(scheme=scheme, epochs=args.epochs, batch_size=args.batch_size,
              optimizer=args.optimizer, lr=args.lr, lr_decay=args.lr_decay,
              decay_every=args.decay_every, momentum=args.momentum, epsilon=args.epsilon,
              eps_start=args.eps_start, warmup_epochs=args.warmup_epochs, k=args.k,
              seed=args.seed, attack=attack)
    if args.alpha0 is not None:
        kw["alpha0"] = args.alpha0
    if args.acc_target is not None:
        kw["acc_target"] = args.acc_target
    try:
        cfg = TrainConfig(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.batch_size > len(data):
        raise UsageError(f"--batch-size {args.batch_size} exceeds dataset size {len(data)}")
    sizes = [data.dim] + _hidden(args.hidden) + [data.num_classes]
    net = Network.init(sizes, seed=args.seed)
    out = _outdir(args)
    started = time.time()
    extra = {"dataset": data.provenance, "n": len(data), "sizes": ",".join(map(str, sizes))}
    if scheme == "mixtrain":
        extra["k_prime"] = cfg.per_batch_samples(len(data))
    try:
        result = train(net, data, cfg)
    except TrainingDiverged as exc:
        extra["status"] = f"diverged: {exc}"
        write_manifest(out / "manifest.txt", args, extra, started)
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    save(result.network, out / "model.vrnn")
    with open(out / "epochs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(result.history[0].CSV_FIELDS if result.history else
                   ["epoch", "epsilon", "alpha", "lr", "regular_loss", "robust_loss",
                    "sampled_acc", "batch_time"])
        for rep in result.history:
            w.writerow(["" if v is None else v for v in rep.row()])
    acc = float(np.mean(result.network.predict(data.X) == data.y))
    extra["train_acc"] = f"{acc:.6f}"
    extra["status"] = "ok"
    write_manifest(out / "manifest.txt", args, extra, started)
    print(f"model={out / 'model.vrnn'} train_acc={acc:.4f}"
          + (f" k_prime={extra['k_prime']}" if "k_prime" in extra else ""))
    return EXIT_OK


def _attack_cfg(args, kind: str) -> AttackConfig:
    try:
        return AttackConfig(kind=kind, epsilon=args.epsilon, pgd_steps=args.pgd_steps,
                            pgd_step=args.pgd_step, restarts=args.restarts,
                            ia_iters=args.ia_iters, ia_step=args.ia_step, ia_eps0=args.ia_eps0,
                            ia_p=args.ia_p, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_attack(args) -> int:
    net = load(args.model)
    data = load_data(args.data, args.normalize, args.limit)
    cfg = _attack_cfg(args, args.attack)
    out = _outdir(args)
    started = time.time()
    rate, outcomes = attack_success_rate(net, data.X, data.y, cfg, data.domain)
    with open(out / "attack.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "success", "loss", "iters"])
        for i, o in enumerate(outcomes):
            w.writerow([i, int(o.success), repr(float(o.loss)), o.iterations])
    write_manifest(out / "manifest.txt", args, {"dataset": data.provenance,
                                                "rate": f"{rate:.6f}"}, started)
    print(f"attack={cfg.kind} eps={cfg.epsilon} rate={rate:.4f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    net = load(args.model)
    data = load_data(args.data, args.normalize, args.limit)
    timeout = None if args.timeout_ms == 0 else args.timeout_ms / 1000.0
    try:
        spec = RobustnessSpec(args.epsilon, data.domain, max_depth=args.max_depth,
                              timeout=timeout, workers=args.threads, max_nodes=args.max_nodes)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    cfg = _attack_cfg(args, "pgd")
    out = _outdir(args)
    started = time.time()
    report = metrics(net, data, args.epsilon, cfg, spec, era=not args.no_era)
    report.write_verdicts(out / "verdicts.csv")
    report.write_timings(out / "timings.csv")
    line = report.summary_line()
    (out / "summary.txt").write_text(line + "\n")
    counts = report.counts()
    write_manifest(out / "manifest.txt", args,
                   {"dataset": data.provenance, "summary": line,
                    **{f"count.{k}": v for k, v in counts.items()}}, started)
    print(line)
    return EXIT_OK


def cmd_eval(args) -> int:
    net = load(args.model)
    data = load_data(args.data, args.normalize, args.limit)
    out = _outdir(args)
    started = time.time()
    acc = float(np.mean(net.predict(data.X) == data.y))
    rob = robust_losses(net, data, args.epsilon)
    line = f"ACC={100 * acc:.2f},robust_loss={float(np.mean(rob)):.6f}"
    write_manifest(out / "manifest.txt", args, {"dataset": data.provenance, "summary": line},
                   started)
    print(line)
    return EXIT_OK


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- parser -------------------------------------------------------------------------------

def _common(p, model=True):
    if model:
        p.add_argument("--model", required=True, help="model file (VRNN format)")
    p.add_argument("--data", required=True, help="dataset spec, e.g. moons:n=600,seed=1")
    p.add_argument("--normalize", default=None, help="MEAN,STD applied to raw [0,1] inputs")
    p.add_argument("--limit", type=int, default=None, help="use only the first N samples")
    p.add_argument("--epsilon", type=float, default=0.1, help="L-inf budget, raw pixel scale")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--manifest", default=None, help="rerun with flags from this manifest")
    p.add_argument("-v", "--verbose", action="store_true")


def _attack_flags(p):
    p.add_argument("--pgd-steps", type=int, default=40)
    p.add_argument("--pgd-step", type=float, default=0.01)
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--ia-iters", type=int, default=20)
    p.add_argument("--ia-step", type=float, default=None)
    p.add_argument("--ia-eps0", type=float, default=None)
    p.add_argument("--ia-p", type=float, default=2.0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="verirobust", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subs = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = subs.add_parser("train", help="train a classifier")
    _common(p, model=False)
    p.add_argument("--scheme", choices=sorted(SCHEME_FLAGS), default="mixtrain")
    p.add_argument("--hidden", default="64,64", help="comma-separated hidden widths")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=50)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lr-decay", type=float, default=0.6)
    p.add_argument("--decay-every", type=int, default=5)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--eps-start", type=float, default=0.01)
    p.add_argument("--warmup-epochs", type=int, default=10)
    p.add_argument("--k", type=int, default=None, help="robust samples per epoch (mixtrain)")
    p.add_argument("--alpha0", type=float, default=None)
    p.add_argument("--acc-target", type=float, default=None)
    p.add_argument("--pgd-steps", type=int, default=40, help="adversarial training attack")
    p.add_argument("--pgd-step", type=float, default=0.01)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("attack", help="attack every sample of a dataset")
    _common(p)
    p.add_argument("--attack", choices=["fgsm", "pgd", "interval"], default="pgd")
    _attack_flags(p)
    p.set_defaults(func=cmd_attack)

    p = subs.add_parser("verify", help="certify robustness and report ACC/ERA/VRA")
    _common(p)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--max-depth", type=int, default=20)
    p.add_argument("--timeout-ms", type=int, default=10000, help="per input; 0 disables")
    p.add_argument("--max-nodes", type=int, default=None)
    p.add_argument("--no-era", action="store_true", help="skip the PGD pass")
    _attack_flags(p)
    p.set_defaults(func=cmd_verify)

    p = subs.add_parser("eval", help="clean accuracy and mean verifiable robust loss")
    _common(p)
    p.set_defaults(func=cmd_eval)
    return parser


def parse_args(argv):
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--manifest", default=None)
    known, _ = pre.parse_known_args(argv)
    if known.manifest:
        manifest = read_manifest(known.manifest)
        command = manifest.get("command")
        subs = parser._subparsers._group_actions[0].choices
        if command not in subs or command not in argv:
            parser.error(f"manifest was written by {command!r}; pass that subcommand")
        sub = subs[command]
        defaults = _manifest_defaults(sub, manifest)
        for action in sub._actions:
            if action.dest in defaults:
                action.required = False
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except OSError as exc:
        print(f"verirobust: {exc}", file=sys.stderr)
        return EXIT_IO
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"verirobust {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, IdxFormatError, ModelFormatError) as exc:
        print(f"verirobust {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
