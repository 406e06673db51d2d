"""Continual-learning train/test procedures, joint objective and run driver."""
from __future__ import annotations

import json
import logging
import math
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint
from . import tensor_core as tc
from .backbone import Backbone, ContractError
from .data import DataError, Split, Task, TaskSequence
from .metrics import ScoreMatrix, avg_accuracy, forgetting, matching_accuracy
from .optim import Adam, adam_step  # noqa: F401  (re-exported)
from .prompting import (AttachConfig, EPromptSet, GPrompt, attach, export_prompt_vectors,
                        match_loss, select_expert)
from .tensor_core import Tensor

log = logging.getLogger(__name__)

DUALPROMPT = "dualprompt"
FT_SEQ = "ft_seq"
G_ONLY = "g_only"
E_ONLY = "e_only"
PERFECT_MATCH = "perfect_match"
BASELINE = "baseline"
MODES = (DUALPROMPT, FT_SEQ, G_ONLY, E_ONLY, PERFECT_MATCH, BASELINE)


class RehearsalViolation(RuntimeError):
    """Training of task t touched training data of another task."""


@dataclass
class TrainConfig:
    lr: float = 0.005
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 128
    epochs: int = 5
    match_weight: float = 1.0
    seed: int = 0
    mode: str = DUALPROMPT
    train_mask: bool = False
    train_old_heads: bool = False
    eval_batch_size: int = 256

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.match_weight < 0:
            raise ValueError("match_weight (lambda) must be >= 0")
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ValueError("batch_size >= 1, epochs >= 0 and lr > 0 required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def effective_attach(cfg: AttachConfig, mode: str) -> AttachConfig:
    """Drop the prompt kinds a mode does not use."""
    g = cfg.g_range if mode in (DUALPROMPT, PERFECT_MATCH, G_ONLY) else None
    e = cfg.e_range if mode in (DUALPROMPT, PERFECT_MATCH, E_ONLY) else None
    return AttachConfig(g, e, cfg.variant, cfg.g_length, cfg.e_length)


# ---------------------------------------------------------------- head

@dataclass
class Head:
    """Expanding linear classifier; one weight block per task, fresh rows per new class."""
    dim: int
    weights: list[Tensor] = field(default_factory=list)   # [D, C_t]
    biases: list[Tensor] = field(default_factory=list)    # [C_t]
    classes: list[int] = field(default_factory=list)
    first_seen: list[int] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def weight(self) -> np.ndarray:
        return np.concatenate([w.data.T for w in self.weights]) if self.weights else np.zeros((0, self.dim))

    @property
    def bias(self) -> np.ndarray:
        return np.concatenate([b.data for b in self.biases]) if self.biases else np.zeros(0)

    def expand(self, classes, task: int, rng: np.random.Generator) -> None:
        clash = set(classes) & set(self.classes)
        if clash:
            raise DataError(f"classes {sorted(clash)} already have head rows")
        bound = 1.0 / math.sqrt(self.dim)
        n = len(classes)
        self.weights.append(Tensor(rng.uniform(-bound, bound, size=(self.dim, n)), True, name=f"head.{task}.w"))
        self.biases.append(Tensor(rng.uniform(-bound, bound, size=n), True, name=f"head.{task}.b"))
        self.classes.extend(int(c) for c in classes)
        self.first_seen.extend([task] * n)

    def rows_for(self, labels) -> np.ndarray:
        index = {c: i for i, c in enumerate(self.classes)}
        try:
            return np.array([index[int(y)] for y in labels], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"label {exc.args[0]} is not a seen class") from None

    def logits(self, feat: Tensor) -> Tensor:
        parts = [tc.add_bias(tc.matmul(feat, w), b) for w, b in zip(self.weights, self.biases)]
        return parts[0] if len(parts) == 1 else tc.concat_last(parts)

    def params(self) -> dict[str, Tensor]:
        out = {}
        for t, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"head.{t}.w"] = w
            out[f"head.{t}.b"] = b
        return out


# ---------------------------------------------------------------- run state

@dataclass
class RunState:
    backbone: Backbone
    attach_cfg: AttachConfig
    mode: str
    head: Head
    g: Optional[GPrompt]
    experts: Optional[EPromptSet]
    optimizer: Adam
    rng: np.random.Generator
    tasks_done: int = 0
    g_snapshots: list[dict[int, np.ndarray]] = field(default_factory=list)

    @property
    def uses_experts(self) -> bool:
        return self.experts is not None

    def prompt_params(self) -> dict[str, Tensor]:
        out = {}
        if self.g is not None:
            out.update(self.g.params())
        if self.experts is not None:
            out.update(self.experts.params())
        return out

    def additional_parameters(self) -> int:
        """Count of prompt and key scalars (head and backbone excluded)."""
        return sum(p.size for p in self.prompt_params().values())

    def forward(self, task: Optional[int]):
        e_t = self.experts.prompts[task] if (self.experts is not None and task is not None) else None
        return attach(self.backbone, self.g, e_t, self.attach_cfg)


def new_state(backbone: Backbone, attach_cfg: AttachConfig, cfg: TrainConfig) -> RunState:
    eff = effective_attach(attach_cfg, cfg.mode)
    eff.validate(backbone.config.num_layers)
    rng = np.random.default_rng(cfg.seed)
    g = GPrompt.init(eff, backbone.config.embed_dim, rng) if eff.g_range is not None else None
    experts = EPromptSet() if eff.e_range is not None else None
    if cfg.mode == FT_SEQ:
        backbone = backbone.copy()
        backbone.unfreeze()
    elif not backbone.frozen:
        raise ContractError(f"mode {cfg.mode!r} needs a frozen backbone")
    return RunState(backbone, eff, cfg.mode, Head(backbone.config.embed_dim), g, experts,
                    Adam(lr=cfg.lr, betas=cfg.betas), rng)


class DataAudit:
    """Counts split reads per task and refuses cross-task training reads."""

    def __init__(self, seq: TaskSequence):
        self.seq = seq
        self.reads: Counter = Counter()
        self.training: Optional[int] = None

    def read(self, task: int, split: str) -> Split:
        if self.training is not None and split in ("train", "val") and task != self.training:
            raise RehearsalViolation(f"read of task {task} {split} data while training task {self.training}")
        self.reads[(task, split, self.training)] += 1
        return getattr(self.seq.tasks[task], split)


# ---------------------------------------------------------------- objective

def loss(logits: Tensor, y_rows, qx=None, k_t: Optional[Tensor] = None, lam: float = 1.0,
         mask=None) -> tuple[Tensor, Tensor, Optional[Tensor]]:
    """Cross-entropy over seen classes plus ``lam`` times the mean matching loss.

    Returns ``(total, ce, match)``; ``match`` is ``None`` when no key term applies.
    """
    ce = tc.cross_entropy_logits(logits, y_rows, mask)
    if k_t is None or qx is None or lam == 0:
        return ce, ce, None
    m = tc.mean(match_loss(qx, k_t))
    return tc.add(ce, tc.scale(m, lam)), ce, m


def _trainable(state: RunState, task: int, current_head_only: bool = False) -> dict[str, Tensor]:
    params = dict(state.head.params())
    if current_head_only:
        # also keeps stale Adam momentum from moving blocks that get no gradient
        params = {k: v for k, v in params.items() if k.startswith(f"head.{task}.")}
    if state.g is not None:
        params.update(state.g.params())
    if state.experts is not None:
        params.update(state.experts.task_params(task))
    if state.mode == FT_SEQ:
        params.update({f"backbone.{k}": p for k, p in state.backbone.params.items()})
    return params


def _fixed_features(state: RunState, x) -> Optional[np.ndarray]:
    """Features of a prompt-free frozen backbone never change, so compute them once."""
    if state.g is not None or state.experts is not None or not state.backbone.frozen:
        return None
    return state.backbone.query_feature(x)


def train_task(state: RunState, task: Task, cfg: TrainConfig, audit: Optional[DataAudit] = None,
               on_epoch=None) -> list[dict]:
    """Train one task end-to-end (prompts, key, head); returns per-epoch records."""
    if state.mode != FT_SEQ and not state.backbone.frozen:
        raise ContractError("train_task needs a frozen backbone")
    t = state.tasks_done
    clash = set(task.classes) & set(state.head.classes)
    if clash:
        raise DataError(f"task {t} classes {sorted(clash)} were seen in earlier tasks")
    rng = state.rng
    state.head.expand(task.classes, t, rng)
    if state.experts is not None:
        state.experts.add_task(state.attach_cfg, state.backbone.config.embed_dim, rng)
        state.experts.set_trainable(t)
    if audit is not None:
        audit.training = t
        train = audit.read(t, "train")
        audit.training = None
    else:
        train = task.train
    if len(train) == 0:
        raise DataError(f"task {t} has no training samples")
    y_rows = state.head.rows_for(train.y)
    use_keys = state.experts is not None and cfg.match_weight > 0
    q = state.backbone.query_feature(train.x) if use_keys else None
    mask = None
    if cfg.train_mask:
        mask = np.array([fs == t for fs in state.head.first_seen])
    params = _trainable(state, t, cfg.train_mask or not cfg.train_old_heads)
    fwd = state.forward(t if state.experts is not None else None)
    k_t = state.experts.keys[t] if use_keys else None
    cached = _fixed_features(state, train.x)

    records = []
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        order = rng.permutation(len(train))
        ce_sum = match_sum = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            with tc.Tape() as tape:
                feat = Tensor._wrap(cached[idx], False) if cached is not None else fwd(train.x[idx])
                logits = state.head.logits(feat)
                total, ce, m = loss(logits, y_rows[idx], None if q is None else q[idx], k_t,
                                    cfg.match_weight, mask)
                tape.backward(total)
            state.optimizer.step(params)
            Adam.zero_grad(params)
            ce_sum += ce.item() * len(idx)
            if m is not None:
                match_sum += m.item() * len(idx)
        rec = {"task": t, "epoch": epoch + 1, "ce": ce_sum / len(order),
               "match": match_sum / len(order) if use_keys else None,
               "wall_time": time.perf_counter() - start}
        records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        log.debug("task %d epoch %d ce %.4f", t, epoch + 1, rec["ce"])
    if state.experts is not None:
        state.experts.set_trainable(None)
    if state.g is not None:
        state.g_snapshots.append({l: p.data.copy() for l, p in state.g.layers.items()})
    state.tasks_done += 1
    return records


# ---------------------------------------------------------------- inference

def predict(state: RunState, x, mode: Optional[str] = None, true_task=None,
            batch_size: int = 256) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Class-incremental prediction over all seen classes.

    Returns ``(labels, selected_tasks)``; ``selected_tasks`` is ``None`` when the
    mode has no expert prompts.  ``mode="perfect_match"`` uses ``true_task``
    (scalar or per-sample) instead of key matching.
    """
    if state.tasks_done == 0:
        raise ContractError("predict called before any task was trained")
    mode = mode or state.mode
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    rows = np.empty(n, dtype=np.int64)
    selected = None
    with tc.no_grad():
        if state.experts is None:
            groups = {None: np.arange(n)}
        else:
            if mode == PERFECT_MATCH:
                if true_task is None:
                    raise ValueError("perfect_match prediction needs the true task index")
                selected = np.broadcast_to(np.asarray(true_task, dtype=np.int64), (n,)).copy()
            else:
                selected = np.asarray(select_expert(state.backbone.query_feature(x), state.experts), dtype=np.int64)
            groups = {int(t): np.flatnonzero(selected == t) for t in np.unique(selected)}
        for t, idx in groups.items():
            fwd = state.forward(t)
            for lo in range(0, len(idx), batch_size):
                part = idx[lo:lo + batch_size]
                rows[part] = state.head.logits(fwd(x[part])).data.argmax(axis=1)
    labels = np.array(state.head.classes, dtype=np.int64)[rows]
    return labels, selected


def evaluate(state: RunState, split: Split, task_index: int, mode: Optional[str] = None,
             batch_size: int = 256) -> tuple[float, Optional[np.ndarray]]:
    labels, selected = predict(state, split.x, mode, task_index, batch_size)
    return 100.0 * float((labels == split.y).mean()), selected


# ---------------------------------------------------------------- state persistence

def state_arrays(state: RunState) -> tuple[dict[str, np.ndarray], dict]:
    arrays = {k: p.data for k, p in state.prompt_params().items()}
    arrays.update({k: p.data for k, p in state.head.params().items()})
    if state.mode == FT_SEQ:
        arrays.update({f"backbone.{k}": v for k, v in state.backbone.state_arrays().items()})
    for name, mom in state.optimizer.moments.items():
        arrays[f"opt.m.{name}"] = mom.m
        arrays[f"opt.v.{name}"] = mom.v
    for i, snap in enumerate(state.g_snapshots):
        arrays.update({f"gsnap.{i}.{l}": v for l, v in snap.items()})
    meta = {
        "mode": state.mode,
        "attach": state.attach_cfg.to_dict(),
        "tasks_done": state.tasks_done,
        "head_classes": state.head.classes,
        "head_first_seen": state.head.first_seen,
        "opt_steps": {k: m.step for k, m in state.optimizer.moments.items()},
        "opt": {"lr": state.optimizer.lr, "betas": list(state.optimizer.betas), "eps": state.optimizer.eps},
        "rng": state.rng.bit_generator.state,
        "backbone_checksum": state.backbone.checksum(),
    }
    return arrays, meta


def save_state(state: RunState, path) -> str:
    arrays, meta = state_arrays(state)
    return checkpoint.save(path, arrays, meta)


def load_state(path, backbone: Backbone) -> RunState:
    """Rebuild a :class:`RunState` on top of ``backbone`` (the frozen one for prompt modes)."""
    from .optim import Moments

    arrays, meta = checkpoint.load(path)
    mode = meta["mode"]
    cfg = AttachConfig(**meta["attach"])
    if mode == FT_SEQ:
        backbone = backbone.copy()
        for k, p in backbone.params.items():
            p.data[...] = arrays[f"backbone.{k}"]
        backbone.unfreeze()
    elif backbone.checksum() != meta["backbone_checksum"]:
        raise checkpoint.CheckpointError("run state was produced on a different backbone")
    t_done = meta["tasks_done"]
    g = None
    if cfg.g_range is not None:
        g = GPrompt({l: Tensor(arrays[f"g.{l}"], True, name=f"g.{l}") for l in cfg.g_layers()})
    experts = None
    if cfg.e_range is not None:
        experts = EPromptSet()
        for t in range(t_done):
            experts.prompts.append({l: Tensor(arrays[f"e.{t}.{l}"], False, name=f"e.{t}.{l}") for l in cfg.e_layers()})
            experts.keys.append(Tensor(arrays[f"k.{t}"], False, name=f"k.{t}"))
    head = Head(backbone.config.embed_dim)
    for t in range(t_done):
        head.weights.append(Tensor(arrays[f"head.{t}.w"], True, name=f"head.{t}.w"))
        head.biases.append(Tensor(arrays[f"head.{t}.b"], True, name=f"head.{t}.b"))
    head.classes = list(meta["head_classes"])
    head.first_seen = list(meta["head_first_seen"])
    opt = Adam(lr=meta["opt"]["lr"], betas=tuple(meta["opt"]["betas"]), eps=meta["opt"]["eps"])
    for name, step in meta["opt_steps"].items():
        opt.moments[name] = Moments(arrays[f"opt.m.{name}"].copy(), arrays[f"opt.v.{name}"].copy(), step)
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    snaps = []
    for i in range(t_done if g is not None else 0):
        snaps.append({l: arrays[f"gsnap.{i}.{l}"] for l in cfg.g_layers()})
    return RunState(backbone, cfg, mode, head, g, experts, opt, rng, t_done, snaps)


# ---------------------------------------------------------------- sequence driver

@dataclass
class RunResult:
    scores: ScoreMatrix
    logs: list[dict]
    matching_accuracy: Optional[float]
    state: RunState
    oracle_scores: Optional[ScoreMatrix] = None
    backbone_checksums: list[str] = field(default_factory=list)
    audit: Optional[DataAudit] = None

    @property
    def final_avg_accuracy(self) -> float:
        return avg_accuracy(self.scores, self.scores.num_tasks)

    @property
    def final_forgetting(self) -> Optional[float]:
        return forgetting(self.scores, self.scores.num_tasks)

    def metrics(self) -> dict:
        T = self.scores.num_tasks
        out = {
            "mode": self.scores.mode,
            "seed": self.scores.seed,
            "num_tasks": T,
            "avg_accuracy": self.final_avg_accuracy,
            "forgetting": self.final_forgetting,
            "matching_accuracy": self.matching_accuracy,
            "additional_parameters": self.state.additional_parameters(),
            "avg_accuracy_per_task": [avg_accuracy(self.scores, t) for t in range(1, T + 1)],
            "forgetting_per_task": [forgetting(self.scores, t) for t in range(1, T + 1)],
        }
        if self.oracle_scores is not None:
            out["oracle_avg_accuracy"] = avg_accuracy(self.oracle_scores, T)
            out["oracle_forgetting"] = forgetting(self.oracle_scores, T)
        return out


def run_sequence(seq: TaskSequence, backbone: Backbone, attach_cfg: AttachConfig, cfg: TrainConfig,
                 run_dir: Optional[Path] = None, with_oracle: bool = False,
                 eval_split: str = "test") -> RunResult:
    """Train tasks in order; after task t score every task seen so far.

    ``with_oracle`` additionally scores each task with its ground-truth expert
    (only meaningful for modes with E-prompts).  ``eval_split`` selects the
    split used for scoring; sweeps pass ``"val"``.
    """
    seq.check()
    if len(seq) == 0:
        raise DataError("empty task sequence")
    state = new_state(backbone, attach_cfg, cfg)
    audit = DataAudit(seq)
    T = len(seq)
    scores = ScoreMatrix(T, seed=cfg.seed, mode=cfg.mode)
    oracle = ScoreMatrix(T, seed=cfg.seed, mode=PERFECT_MATCH) if (with_oracle and state.uses_experts) else None
    logs: list[dict] = []
    sums = [state.backbone.checksum()]
    log_fh = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_fh = open(run_dir / "log.jsonl", "a")

    def on_epoch(rec):
        logs.append(rec)
        if log_fh is not None:
            log_fh.write(json.dumps(rec) + "\n")
            log_fh.flush()

    final_selected, final_truth = [], []
    try:
        for t, task in enumerate(seq.tasks):
            train_task(state, task, cfg, audit, on_epoch)
            if cfg.mode != FT_SEQ:
                sums.append(state.backbone.checksum())
                if sums[-1] != sums[0]:
                    raise ContractError(f"backbone changed while training task {t}")
            for tau in range(t + 1):
                split = audit.read(tau, eval_split)
                acc, sel = evaluate(state, split, tau, cfg.mode, cfg.eval_batch_size)
                scores.set(t + 1, tau + 1, acc)
                if oracle is not None:
                    oracle.set(t + 1, tau + 1, evaluate(state, split, tau, PERFECT_MATCH, cfg.eval_batch_size)[0])
                if t == T - 1 and sel is not None:
                    final_selected.extend(sel.tolist())
                    final_truth.extend([tau] * len(split))
            if run_dir is not None:
                save_state(state, run_dir / "checkpoints" / f"task_{t + 1}.ckpt")
    finally:
        if log_fh is not None:
            log_fh.close()

    match_acc = matching_accuracy(final_selected, final_truth) if final_selected else None
    result = RunResult(scores, logs, match_acc, state, oracle, sums, audit)
    if run_dir is not None:
        write_run_artifacts(result, run_dir)
    return result


def write_run_artifacts(result: RunResult, run_dir: Path) -> None:
    run_dir = Path(run_dir)
    result.scores.save(run_dir / "scores.txt")
    with open(run_dir / "scores.csv", "w") as fh:
        T = result.scores.num_tasks
        fh.write("after_task," + ",".join(f"task_{i}" for i in range(1, T + 1)) + "\n")
        for t, row in enumerate(result.scores.rows, start=1):
            cells = [format(v, ".4f") for v in row] + [""] * (T - len(row))
            fh.write(f"{t}," + ",".join(cells) + "\n")
    if result.oracle_scores is not None:
        result.oracle_scores.save(run_dir / "oracle_scores.txt")
    (run_dir / "metrics.json").write_text(json.dumps(result.metrics(), indent=2, sort_keys=True) + "\n")
    st = result.state
    if st.g is not None or st.experts is not None:
        export_prompt_vectors(st.g_snapshots, st.experts or EPromptSet(), run_dir / "prompts.csv")
