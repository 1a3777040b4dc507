"""``python -m seqmix <subcommand>``: run checks and experiments, emit CSV.

CSV goes to ``--out`` (or stdout when absent). Human verdict lines and a
final ``summary,...`` row always go to stdout. Exit status is 0 exactly when
every asserted tolerance holds; usage errors exit with 2.

A ``--config FILE`` of ``key=value`` lines supplies defaults using the flag
names (``seqlen=64``); explicit flags win. ``SEQMIX_SEED`` overrides the
default seed.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import checks
from .backward import KERNEL_GRADS
from .config import PRESETS
from .errors import DivergenceError, SeqmixError
from .memmodel import crossover, memcurve
from .tensorops import PRECISIONS

SUBCOMMANDS = ("gradcheck", "equivalence", "memcurve", "train", "bench", "identitycheck")
STATEFUL_PRESETS = ("twomamba", "mamba2s", "mamba2", "linear", "softmax", "twomamba_e")
F32_EQUIV_TOL = 1e-4


def default_seed() -> int:
    raw = os.environ.get("SEQMIX_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise SystemExit(f"usage error: SEQMIX_SEED must be an integer, got {raw!r}")


@dataclass
class RunConfig:
    """Everything needed to replay a run."""

    subcommand: str
    preset: Optional[str] = None
    heads: int = 2
    seqlen: int = 64
    dhead: int = 16
    d_model: Optional[int] = None
    seed: int = 0
    precision: str = "f64"
    out: Optional[str] = None
    block: Optional[int] = None
    extra: dict = field(default_factory=dict)

    def to_text(self) -> str:
        d = asdict(self)
        extra = d.pop("extra")
        d.update(extra)
        return "".join(f"{k}={'' if v is None else v}\n" for k, v in sorted(d.items()))


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


class Emitter:
    def __init__(self, out: Optional[str]):
        self.path = out
        self.buf = io.StringIO()
        self.writer = csv.writer(self.buf, lineterminator="\n")

    def header(self, cols):
        self.writer.writerow(cols)

    def row(self, values):
        self.writer.writerow([_fmt(v) for v in values])

    def flush(self):
        text = self.buf.getvalue()
        if self.path:
            Path(self.path).parent.mkdir(parents=True, exist_ok=True)
            Path(self.path).write_text(text)
        else:
            sys.stdout.write(text)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6e}"
    return v


def _summary(ok: bool, **fields) -> None:
    parts = ["summary", f"status={'PASS' if ok else 'FAIL'}"]
    parts += [f"{k}={_fmt(v)}" for k, v in fields.items()]
    print(",".join(str(p) for p in parts))


def _write_runconfig(rc: RunConfig) -> None:
    if rc.out:
        Path(rc.out).parent.mkdir(parents=True, exist_ok=True)
        Path(str(rc.out) + ".runconfig").write_text(rc.to_text())


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    kernels = list(KERNEL_GRADS) if args.kernel == "all" else [args.kernel]
    em = Emitter(args.out)
    em.header(["kernel", "seed", "H", "N", "d", "rel_Q", "rel_K", "rel_V", "rel_a", "max_rel", "pass"])
    verdicts = []
    for k in kernels:
        rows = [checks.gradcheck_kernel(k, args.seed + i, args.heads, args.seqlen, args.dhead)
                for i in range(args.instances)]
        for r in rows:
            em.row([r[c] for c in ("kernel", "seed", "H", "N", "d", "rel_Q", "rel_K", "rel_V",
                                   "rel_a", "max_rel", "pass")])
        worst = max(r["max_rel"] for r in rows)
        verdicts.append((k, worst < checks.GRAD_TOL, worst))
    em.flush()
    for k, ok, worst in verdicts:
        print(f"kernel,{k},{'PASS' if ok else 'FAIL'},max_rel={worst:.3e},tol={checks.GRAD_TOL:g}")
    ok = all(v[1] for v in verdicts)
    _summary(ok, kernels=len(kernels), instances=args.instances,
             worst=max(v[2] for v in verdicts))
    return 0 if ok else 1


def cmd_equivalence(args) -> int:
    names = list(STATEFUL_PRESETS) if args.preset == "all" else [args.preset]
    dtype = PRECISIONS[args.precision]
    tol = checks.EQUIV_TOL if dtype == np.float64 else F32_EQUIV_TOL
    em = Emitter(args.out)
    em.header(["preset", "seed", "token", "max_rel_dev", "persisted_scalars"])
    verdicts = []
    for name in names:
        worst = 0.0
        for s in range(args.seeds):
            r = checks.equivalence(name, args.seqlen, args.dhead, args.heads, args.seed + s,
                                   block=args.block, precision=dtype)
            totals = r["trace"].totals()
            for t, dev in enumerate(r["per_token"]):
                em.row([name, args.seed + s, t, dev, totals[t]])
            worst = max(worst, r["max"])
        verdicts.append((name, worst < tol, worst))
    em.flush()
    for name, ok, worst in verdicts:
        print(f"preset,{name},{'PASS' if ok else 'FAIL'},max_rel={worst:.3e},tol={tol:g}")
    ok = all(v[1] for v in verdicts)
    _summary(ok, presets=len(names), seeds=args.seeds, worst=max(v[2] for v in verdicts))
    return 0 if ok else 1


def cmd_memcurve(args) -> int:
    rep = memcurve(args.d, args.nmax, measure=not args.no_measure, seed=args.seed)
    width = np.dtype(PRECISIONS[args.precision]).itemsize if args.bytes else 1
    em = Emitter(args.out)
    cols = ["N", "kv_elems", "state2_elems", "measured_kv", "measured_state", "match", "twomamba_e_elems"]
    em.header(cols)
    scaled = {"kv_elems", "state2_elems", "measured_kv", "measured_state", "twomamba_e_elems"}
    for row in rep.rows:
        em.row([row[c] * width if c in scaled and row[c] != "" else row[c] for c in cols])
    em.flush()
    first = rep.first_exceedance()
    ok = first == rep.crossover_n or (first is None and args.nmax < rep.crossover_n)
    if rep.measured:
        ok = ok and all(r["match"] == 1 for r in rep.rows)
    print(f"crossover,d={args.d},closed_form={rep.crossover_n},first_exceedance={first}")
    _summary(ok, d=args.d, crossover=crossover(args.d), first_exceedance=first,
             measured=int(rep.measured), unit="bytes" if args.bytes else "elems")
    return 0 if ok else 1


def cmd_train(args) -> int:
    from .harness import LR_GRID, SyntheticTask, TinyModelConfig, lr_sweep, train

    d_model = args.d_model or args.heads * args.dhead
    cfg = TinyModelConfig(d_model=d_model, n_heads=args.heads, d_head=d_model // args.heads,
                          n_layers=args.layers, vocab=args.vocab, seq_len=args.seqlen,
                          variant=args.preset, lr=args.lr, total_steps=args.steps,
                          batch_size=args.batch, eval_every=args.eval_every, seed=args.seed,
                          optimizer=args.optimizer)
    task = SyntheticTask(args.task, vocab=args.vocab, seq_len=args.seqlen, n_pairs=args.pairs,
                         seed=args.seed)
    out_dir = Path(args.out) if args.out else None
    if args.lr_sweep:
        best, records = lr_sweep(cfg, task, LR_GRID, out_dir=out_dir, log=None if args.quiet else print,
                                 target_acc=args.stop_at)
        for lr, rec in records.items():
            print(f"lr,{lr:g},steps={rec.steps_done},final_eval_loss={_fmt(rec.final_eval_loss)},"
                  f"final_eval_acc={_fmt(rec.final_eval_acc)},diverged={int(rec.diverged)}")
        rec = records[best]
        ok = args.target_acc is None or rec.final_eval_acc > args.target_acc
        _summary(ok, best_lr=f"{best:g}", final_eval_acc=rec.final_eval_acc)
        return 0 if ok else 1
    try:
        rec = train(cfg, task, out_dir=out_dir, log=None if args.quiet else print,
                    target_acc=args.stop_at)
    except DivergenceError as exc:
        print(f"diverged: {exc}")
        _summary(False, steps=exc.record.steps_done if exc.record else 0, diverged=1)
        return 1
    ok = args.target_acc is None or rec.final_eval_acc > args.target_acc
    _summary(ok, steps=rec.steps_done, final_eval_loss=rec.final_eval_loss,
             final_eval_acc=rec.final_eval_acc, seconds=rec.seconds)
    return 0 if ok else 1


def cmd_bench(args) -> int:
    from .backward import block_backward
    from .config import init_block_weights, preset
    from .forward import block_forward
    from .recurrence import run_stateful

    names = list(STATEFUL_PRESETS) if args.preset == "all" else [args.preset]
    dtype = PRECISIONS[args.precision]
    em = Emitter(args.out)
    em.header(["preset", "precision", "N", "d_head", "heads", "forward_s", "backward_s", "stateful_s"])
    for name in names:
        cfg = preset(name)
        rng = np.random.default_rng(args.seed)
        d_model = args.heads * args.dhead
        w = init_block_weights(cfg, d_model, args.heads, args.dhead, rng, dtype=dtype)
        h = rng.standard_normal((args.seqlen, d_model)).astype(dtype)
        t0 = time.perf_counter()
        out, cache = block_forward(h, cfg, w)
        t1 = time.perf_counter()
        block_backward(np.ones_like(out), cache, w)
        t2 = time.perf_counter()
        run_stateful(h, cfg, w, block=args.block)
        t3 = time.perf_counter()
        em.row([name, args.precision, args.seqlen, args.dhead, args.heads, t1 - t0, t2 - t1, t3 - t2])
    em.flush()
    _summary(True, presets=len(names))
    return 0


def cmd_identitycheck(args) -> int:
    grid = checks.identity_grid(args.lo, args.hi, args.step)
    dev = checks.logsigmoid_softplus_identity_check(grid)
    em = Emitter(args.out)
    em.header(["lo", "hi", "step", "points", "max_dev", "tol"])
    em.row([args.lo, args.hi, args.step, grid.size, dev, checks.IDENTITY_TOL])
    em.flush()
    ok = dev < checks.IDENTITY_TOL
    _summary(ok, max_dev=dev)
    return 0 if ok else 1


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "equivalence": cmd_equivalence,
    "memcurve": cmd_memcurve,
    "train": cmd_train,
    "bench": cmd_bench,
    "identitycheck": cmd_identitycheck,
}


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def _positive(v):
    n = int(v)
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return n


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=default_seed())
    common.add_argument("--out", default=None, help="CSV file (train: run directory)")
    common.add_argument("--precision", choices=("f64", "f32"), default="f64")
    common.add_argument("--config", default=None, help="key=value defaults file")

    def dims(heads=2, seqlen=64, dhead=16):
        # a fresh parent per subcommand: argparse parents share their action objects
        d = argparse.ArgumentParser(add_help=False)
        d.add_argument("--heads", type=_positive, default=heads)
        d.add_argument("--seqlen", type=_positive, default=seqlen)
        d.add_argument("--dhead", type=_positive, default=dhead)
        d.add_argument("--block", type=_positive, default=None, help="online-max scan block")
        return d

    p = argparse.ArgumentParser(prog="seqmix", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="subcommand", required=True)
    presets = list(PRESETS)

    g = sub.add_parser("gradcheck", parents=[common, dims(seqlen=8, dhead=4)], help="analytic vs finite-difference kernel gradients")
    g.add_argument("--kernel", choices=list(KERNEL_GRADS) + ["all"], default="all")
    g.add_argument("--instances", type=_positive, default=20)

    e = sub.add_parser("equivalence", parents=[common, dims()], help="stateful vs quadratic outputs")
    e.add_argument("--preset", choices=list(STATEFUL_PRESETS) + ["all"], default="all")
    e.add_argument("--seeds", type=_positive, default=1)

    m = sub.add_parser("memcurve", parents=[common], help="per-head memory table")
    m.add_argument("--d", type=_positive, default=64)
    m.add_argument("--nmax", type=_positive, default=2048)
    m.add_argument("--no-measure", action="store_true", help="skip the stateful runs")
    m.add_argument("--bytes", action="store_true", help="multiply counts by the precision width")

    t = sub.add_parser("train", parents=[common, dims(heads=4)], help="train the tiny model on a synthetic task")
    t.add_argument("--preset", choices=presets, default="twomamba")
    t.add_argument("--task", choices=("assoc_recall", "copy"), default="assoc_recall")
    t.add_argument("--steps", type=_positive, default=2000)
    t.add_argument("--lr", type=float, default=3e-3)
    t.add_argument("--batch", type=_positive, default=32)
    t.add_argument("--layers", type=_positive, default=2)
    t.add_argument("--vocab", type=_positive, default=32)
    t.add_argument("--pairs", type=_positive, default=8)
    t.add_argument("--d-model", dest="d_model", type=_positive, default=None)
    t.add_argument("--eval-every", dest="eval_every", type=_positive, default=100)
    t.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    t.add_argument("--stop-at", dest="stop_at", type=float, default=None,
                   help="stop at the first eval whose accuracy exceeds this")
    t.add_argument("--target-acc", dest="target_acc", type=float, default=None,
                   help="exit 1 unless final eval accuracy exceeds this")
    t.add_argument("--lr-sweep", dest="lr_sweep", action="store_true",
                   help="train once per learning rate in 3e-4, 1e-4, 3e-5 and report the best")
    t.add_argument("--quiet", action="store_true")

    b = sub.add_parser("bench", parents=[common, dims()], help="time forward, backward and stateful paths")
    b.add_argument("--preset", choices=list(STATEFUL_PRESETS) + ["all"], default="all")

    i = sub.add_parser("identitycheck", parents=[common], help="log-sigmoid vs -softplus(-x) on a grid")
    i.add_argument("--lo", type=float, default=-30.0)
    i.add_argument("--hi", type=float, default=30.0)
    i.add_argument("--step", type=float, default=0.01)
    return p


def read_config_file(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def parse(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.subcommand]
        known = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
        try:
            values = read_config_file(args.config)
        except (OSError, ValueError) as exc:
            parser.error(str(exc))
        defaults = {}
        for k, v in values.items():
            if k == "subcommand":
                continue
            if k not in known:
                parser.error(f"unknown config key {k!r}; valid keys: {', '.join(sorted(known))}")
            action = known[k]
            if isinstance(action, argparse._StoreTrueAction):
                defaults[k] = v.lower() in ("1", "true", "yes")
            elif v == "":
                defaults[k] = None
            else:
                conv = action.type or str
                defaults[k] = conv(v)
                if action.choices and defaults[k] not in action.choices:
                    parser.error(f"config {k}={v!r} not in {list(action.choices)}")
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def runconfig_from_args(args) -> RunConfig:
    base = {f: getattr(args, f, None) for f in ("preset", "heads", "seqlen", "dhead", "d_model",
                                                "seed", "precision", "out", "block")}
    base = {k: v for k, v in base.items() if v is not None}
    skip = set(base) | {"subcommand", "config"}
    extra = {k: v for k, v in vars(args).items() if k not in skip}
    return RunConfig(subcommand=args.subcommand, extra=extra, **base)


def dispatch(argv=None) -> int:
    args = parse(sys.argv[1:] if argv is None else argv)
    rc = runconfig_from_args(args)
    try:
        status = COMMANDS[args.subcommand](args)
    except SeqmixError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        _summary(False, error=type(exc).__name__)
        return 1
    if args.subcommand != "train":
        _write_runconfig(rc)
    return status


def main() -> None:
    sys.exit(dispatch())
