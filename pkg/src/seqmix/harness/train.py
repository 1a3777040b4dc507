"""Training loop, optimizer and run-directory output."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import DivergenceError, NonFiniteError
from .model import TinyModel, TinyModelConfig, cross_entropy, loss_and_grads, masked_accuracy
from .tasks import SyntheticTask, generate_batch

# eval batches are drawn from seeds far away from the training stream
EVAL_SEED_OFFSET = 1_000_003

LOSS_HEADER = ("step", "train_loss", "eval_loss", "eval_acc")
LR_GRID = (3e-4, 1e-4, 3e-5)


@dataclass
class RunRecord:
    config: dict
    task: dict
    rows: list = field(default_factory=list)  # (step, train_loss, eval_loss, eval_acc)
    final_eval_loss: float = float("nan")
    final_eval_acc: float = float("nan")
    steps_done: int = 0
    seconds: float = 0.0
    diverged: bool = False
    message: str = ""

    def summary(self) -> dict:
        return {"steps": self.steps_done, "final_eval_loss": self.final_eval_loss,
                "final_eval_acc": self.final_eval_acc, "seconds": round(self.seconds, 3),
                "diverged": self.diverged, "message": self.message}


class Optimizer:
    """AdamW with decoupled weight decay on matrices, or plain SGD."""

    def __init__(self, cfg: TinyModelConfig, params: dict):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def lr_at(self, step: int) -> float:
        """Linear warmup to ``lr`` over ``warmup_steps``, constant afterwards."""
        w = self.cfg.warmup_steps
        return self.cfg.lr * min(1.0, (step + 1) / w)

    def step(self, params: dict, grads: dict, step: int) -> None:
        cfg = self.cfg
        lr = self.lr_at(step)
        self.t += 1
        b1, b2 = cfg.betas
        for k, p in params.items():
            g = grads[k]
            if cfg.optimizer == "sgd":
                p -= lr * g
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            if p.ndim >= 2 and cfg.weight_decay:
                p -= lr * cfg.weight_decay * p
            p -= lr * mhat / (np.sqrt(vhat) + 1e-8)


def evaluate(model: TinyModel, task: SyntheticTask, n_batches: int, batch: int, seed: int):
    losses, accs = [], []
    for i in range(n_batches):
        tok, tgt, mask = generate_batch(task, batch, rng=seed + EVAL_SEED_OFFSET + i)
        logits, _ = model.forward(tok)
        losses.append(cross_entropy(logits, tgt, mask)[0])
        accs.append(masked_accuracy(logits, tgt, mask))
    return float(np.mean(losses)), float(np.mean(accs))


def train(cfg: TinyModelConfig, task: SyntheticTask, out_dir: Optional[Path] = None,
          model: Optional[TinyModel] = None, log=None, target_acc: Optional[float] = None) -> RunRecord:
    """Train ``cfg`` on ``task``; optionally write the run directory.

    With ``target_acc`` set, training stops at the first evaluation whose
    accuracy exceeds it. A non-finite loss or activation raises
    :class:`DivergenceError` carrying the partial record.
    """
    if task.seq_len != cfg.seq_len or task.vocab != cfg.vocab:
        raise ValueError("task seq_len/vocab must match the model config")
    model = TinyModel.init(cfg) if model is None else model
    opt = Optimizer(cfg, model.params)
    data_rng = np.random.default_rng(cfg.seed)
    record = RunRecord(config=cfg.to_dict(), task=task.to_dict())
    t0 = time.perf_counter()
    step = -1
    try:
        for step in range(cfg.total_steps):
            tok, tgt, mask = generate_batch(task, cfg.batch_size, rng=data_rng)
            loss, grads, _ = loss_and_grads(model, tok, tgt, mask)
            if not np.isfinite(loss):
                raise NonFiniteError(f"training loss is {loss}")
            opt.step(model.params, grads, step)
            row = [step, loss, "", ""]
            last = step == cfg.total_steps - 1
            if (step + 1) % cfg.eval_every == 0 or last:
                el, ea = evaluate(model, task, cfg.eval_batches, cfg.batch_size, cfg.seed)
                row[2:] = [el, ea]
                record.final_eval_loss, record.final_eval_acc = el, ea
                if log:
                    log(f"step {step + 1:5d}  train {loss:.4f}  eval {el:.4f}  acc {ea:.3f}")
            record.rows.append(tuple(row))
            record.steps_done = step + 1
            if target_acc is not None and row[3] != "" and row[3] > target_acc:
                break
    except NonFiniteError as exc:
        record.diverged = True
        record.message = f"diverged at step {step}: {exc}"
        record.seconds = time.perf_counter() - t0
        if out_dir is not None:
            write_run(out_dir, record, model)
        raise DivergenceError(record.message, record=record) from exc
    record.seconds = time.perf_counter() - t0
    if out_dir is not None:
        write_run(out_dir, record, model)
    return record


def lr_sweep(cfg: TinyModelConfig, task: SyntheticTask, lrs=LR_GRID, out_dir: Optional[Path] = None,
             log=None, target_acc: Optional[float] = None):
    """Train one fresh model per learning rate and pick the best.

    Returns ``(best_lr, {lr: RunRecord})``. Runs are ranked by final eval
    accuracy, then by lower eval loss; a diverged run ranks last. With
    ``out_dir`` each run lands in ``out_dir/lr=<value>``.
    """
    records = {}
    for lr in lrs:
        run_cfg = replace(cfg, lr=lr)
        sub = None if out_dir is None else Path(out_dir) / f"lr={lr:g}"
        try:
            records[lr] = train(run_cfg, task, out_dir=sub, log=log, target_acc=target_acc)
        except DivergenceError as exc:
            records[lr] = exc.record
    def rank(lr):
        r = records[lr]
        if r.diverged:
            return (1, 0.0, 0.0)
        return (0, -r.final_eval_acc, r.final_eval_loss)
    return min(records, key=rank), records


def write_run(out_dir, record: RunRecord, model: TinyModel) -> None:
    """Write ``config.json``, ``loss.csv``, ``weights.bin`` and ``weights.json``.

    ``weights.bin`` is every parameter flattened to little-endian float64 and
    concatenated in the order listed in ``weights.json``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(
        {"model": record.config, "task": record.task, "summary": record.summary()}, indent=2, sort_keys=True))
    with open(out / "loss.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(LOSS_HEADER)
        for step, tl, el, ea in record.rows:
            wr.writerow([step, repr(float(tl)), "" if el == "" else repr(float(el)),
                         "" if ea == "" else repr(float(ea))])
    index, offset = [], 0
    with open(out / "weights.bin", "wb") as fh:
        for name, arr in model.params.items():
            flat = np.ascontiguousarray(arr, dtype="<f8").reshape(-1)
            fh.write(flat.tobytes())
            index.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += flat.size
    (out / "weights.json").write_text(json.dumps(index, indent=1))


def load_weights(run_dir) -> dict[str, np.ndarray]:
    run_dir = Path(run_dir)
    index = json.loads((run_dir / "weights.json").read_text())
    flat = np.fromfile(run_dir / "weights.bin", dtype="<f8")
    out = {}
    for entry in index:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        out[entry["name"]] = flat[entry["offset"]:entry["offset"] + n].reshape(entry["shape"])
    return out
