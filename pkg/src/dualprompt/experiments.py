"""Experiment configuration and the command implementations behind the CLI.

Every command takes an :class:`ExperimentConfig`, writes its artifacts under an
output directory and returns a plain dictionary summary.  Result tables are
written twice: ``<name>.txt`` for people and ``<name>.csv`` for machines.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from .backbone import Backbone, BackboneConfig, pretrain
from .data import (DataError, LabeledDataset, Split, SyntheticSpec, TaskSequence, load_raw_tensor_dataset,
                   make_synthetic_sequence, split_by_class)
from .engine import (BASELINE, DUALPROMPT, E_ONLY, FT_SEQ, G_ONLY, MODES, PERFECT_MATCH, TrainConfig,
                     effective_attach, run_sequence)
from .metrics import ScoreMatrix, avg_accuracy, fmt_pm, forgetting, mean_std
from .prompting import PRE_T, PRO_T, AttachConfig, ConfigError

log = logging.getLogger(__name__)

SCHEMA = "dualprompt-experiment"
SCHEMA_VERSION = 1


# ---------------------------------------------------------------- configuration

@dataclass
class PretrainConfig:
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0


@dataclass
class DataConfig:
    """Either the synthetic benchmark or a raw-tensor manifest split by class."""
    kind: str = "synthetic"
    seed: int = 0
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    manifest: Optional[str] = None
    num_tasks: int = 5
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.kind not in ("synthetic", "raw"):
            raise ConfigError(f"data.kind must be 'synthetic' or 'raw', got {self.kind!r}")
        if self.kind == "raw" and not self.manifest:
            raise ConfigError("data.kind 'raw' needs data.manifest")


@dataclass
class ExperimentConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    attach: AttachConfig = field(default_factory=AttachConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs"
    checkpoint: Optional[str] = None
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.output_dir) / "backbone.ckpt"

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "version": SCHEMA_VERSION,
            "backbone": self.backbone.to_dict(),
            "pretrain": dataclasses.asdict(self.pretrain),
            "attach": self.attach.to_dict(),
            "train": self.train.to_dict(),
            "data": {**dataclasses.asdict(self.data), "synthetic": self.data.synthetic.to_dict()},
            "output_dir": self.output_dir,
            "checkpoint": self.checkpoint,
            "seeds": list(self.seeds),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        schema, version = raw.pop("schema", SCHEMA), raw.pop("version", SCHEMA_VERSION)
        if schema != SCHEMA:
            raise ConfigError(f"config schema {schema!r} is not {SCHEMA!r}")
        if version != SCHEMA_VERSION:
            raise ConfigError(f"config schema version {version} is not supported (expected {SCHEMA_VERSION})")
        _reject_unknown("config", raw, {f.name for f in dataclasses.fields(cls)})
        kw: dict[str, Any] = {}
        if "backbone" in raw:
            kw["backbone"] = _build(BackboneConfig, raw["backbone"], "backbone")
        if "pretrain" in raw:
            kw["pretrain"] = _build(PretrainConfig, raw["pretrain"], "pretrain")
        if "attach" in raw:
            kw["attach"] = _build(AttachConfig, raw["attach"], "attach")
        if "train" in raw:
            train = dict(raw["train"])
            if "betas" in train:
                train["betas"] = tuple(train["betas"])
            kw["train"] = _build(TrainConfig, train, "train")
        if "data" in raw:
            data = dict(raw["data"])
            if "synthetic" in data:
                data["synthetic"] = _build(SyntheticSpec, data["synthetic"], "data.synthetic")
            kw["data"] = _build(DataConfig, data, "data")
        for key in ("output_dir", "checkpoint"):
            if key in raw:
                kw[key] = raw[key]
        if "seeds" in raw:
            seeds = raw["seeds"]
            if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
                raise ConfigError("seeds must be a non-empty list of integers")
            kw["seeds"] = seeds
        return cls(**kw)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{p}: top level must be an object")
        return cls.from_dict(raw)

    def replace(self, **sections) -> "ExperimentConfig":
        return dataclasses.replace(self, **sections)


def _reject_unknown(where: str, raw: dict, allowed: set[str]) -> None:
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be an object")
    _reject_unknown(where, raw, {f.name for f in dataclasses.fields(cls)})
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, (ConfigError, DataError)):
            raise
        raise ConfigError(f"{where}: {exc}") from None


# ---------------------------------------------------------------- inputs

def load_sequence(cfg: ExperimentConfig) -> TaskSequence:
    d = cfg.data
    if d.kind == "synthetic":
        seq = make_synthetic_sequence(d.synthetic, d.seed)
    else:
        ds = load_raw_tensor_dataset(d.manifest)
        seq = split_by_class(ds, d.num_tasks, d.seed, d.val_fraction)
    shape = tuple(seq.tasks[0].train.x.shape[1:])
    if shape != tuple(cfg.backbone.image_shape):
        raise ConfigError(f"data samples are {shape} but backbone.image_shape is {tuple(cfg.backbone.image_shape)}")
    return seq


def load_backbone(cfg: ExperimentConfig) -> Backbone:
    path = cfg.checkpoint_path
    if not path.exists():
        raise FileNotFoundError(f"backbone checkpoint not found: {path} (run 'pretrain' first)")
    bb = Backbone.load(path)
    if bb.config.to_dict() != cfg.backbone.to_dict():
        raise ConfigError(f"checkpoint {path} was built for a different backbone config")
    bb.freeze()
    return bb


# ---------------------------------------------------------------- tables

def write_table(rows: list[dict], columns: Sequence[str], out_dir: Path, name: str,
                title: str = "") -> str:
    """Write ``rows`` as ``name.csv`` and an aligned ``name.txt``; returns the text."""
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"{name}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_csv_cell(r.get(c)) for c in columns])
    text = render_table(rows, columns, title)
    (out_dir / f"{name}.txt").write_text(text)
    return text


def _csv_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".6f")
    return str(v)


def _txt_cell(v) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, float):
        return f"{v:.2f}"
    return str(v)


def render_table(rows: list[dict], columns: Sequence[str], title: str = "") -> str:
    cells = [[_txt_cell(r.get(c)) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
    buf = io.StringIO()
    if title:
        buf.write(title + "\n")
    buf.write("  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip() + "\n")
    buf.write("  ".join("-" * w for w in widths) + "\n")
    for row in cells:
        buf.write("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() + "\n")
    return buf.getvalue()


# ---------------------------------------------------------------- parameter counting

def additional_parameters(attach: AttachConfig, dim: int, tasks: int, mode: str = DUALPROMPT) -> int:
    """Closed-form prompt + key count: ``D * (Lg * nG + (Le * nE + 1) * T)``."""
    eff = effective_attach(attach, mode)
    n_g, n_e = len(eff.g_layers()), len(eff.e_layers())
    total = attach.g_length * n_g
    if n_e:
        total += (attach.e_length * n_e + 1) * tasks
    return dim * total


# ---------------------------------------------------------------- commands

def cmd_pretrain(cfg: ExperimentConfig, out: Optional[Path] = None) -> dict:
    seq = load_sequence(cfg)
    if seq.upstream is None or len(seq.upstream) == 0:
        raise DataError("the dataset has no upstream split to pretrain on")
    n_up = len(np.unique(seq.upstream.y))
    if n_up != cfg.backbone.num_pretrain_classes:
        raise ConfigError(f"upstream data has {n_up} classes but backbone.num_pretrain_classes is "
                          f"{cfg.backbone.num_pretrain_classes}")
    bb = Backbone.init(cfg.backbone, cfg.pretrain.seed)
    start = time.perf_counter()
    rep = pretrain(bb, seq.upstream.x, seq.upstream.y, cfg.pretrain.epochs, cfg.pretrain.lr,
                   cfg.pretrain.batch_size, cfg.pretrain.seed)
    bb.freeze()
    path = Path(out) if out else cfg.checkpoint_path
    path.parent.mkdir(parents=True, exist_ok=True)
    digest = bb.save(path, {"pretrain": dataclasses.asdict(cfg.pretrain)})
    summary = {
        "checkpoint": str(path), "sha256": digest, "backbone_checksum": bb.checksum(),
        "upstream_accuracy": rep.train_accuracy, "epoch_losses": rep.epoch_losses,
        "upstream_samples": len(seq.upstream), "wall_time": time.perf_counter() - start,
    }
    path.with_suffix(".json").write_text(json.dumps(summary, indent=2) + "\n")
    log.info("pretrained backbone: upstream accuracy %.2f%%", rep.train_accuracy)
    return summary


def _seed_runs(cfg: ExperimentConfig, seq: TaskSequence, bb: Backbone, mode: str, attach: AttachConfig,
               out_dir: Optional[Path], eval_split: str = "test", with_oracle: bool = False,
               seeds: Optional[Iterable[int]] = None) -> list[dict]:
    results = []
    for seed in (cfg.seeds if seeds is None else seeds):
        train = dataclasses.replace(cfg.train, seed=int(seed), mode=mode)
        run_dir = None
        if out_dir is not None:
            run_dir = Path(out_dir) / f"seed_{seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
            snap = cfg.replace(attach=attach, train=train, seeds=[int(seed)])
            snap.save(run_dir / "config.json")
        res = run_sequence(seq, bb, attach, train, run_dir, with_oracle=with_oracle, eval_split=eval_split)
        m = res.metrics()
        m["backbone_checksums"] = sorted(set(res.backbone_checksums))
        results.append(m)
    return results


def summarize(label: str, metrics: list[dict]) -> dict:
    """Mean and population std over seeds for the headline metrics."""
    row: dict[str, Any] = {"label": label, "mode": metrics[0]["mode"], "seeds": len(metrics),
                           "num_tasks": metrics[0]["num_tasks"],
                           "additional_parameters": metrics[0]["additional_parameters"]}
    for key in ("avg_accuracy", "forgetting", "matching_accuracy", "oracle_avg_accuracy"):
        vals = [m.get(key) for m in metrics]
        if all(v is None for v in vals):
            row[key] = row[key + "_std"] = None
            row[key + "_pm"] = "n/a"
            continue
        row[key], row[key + "_std"] = mean_std(vals)
        row[key + "_pm"] = fmt_pm(vals)
    return row


SUMMARY_COLUMNS = ["label", "mode", "seeds", "avg_accuracy", "avg_accuracy_std", "forgetting", "forgetting_std",
                   "matching_accuracy", "matching_accuracy_std", "additional_parameters"]
DISPLAY_COLUMNS = ["label", "mode", "seeds", "avg_accuracy_pm", "forgetting_pm", "matching_accuracy_pm",
                   "additional_parameters"]


def _write_summary(rows: list[dict], out: Path, name: str, title: str) -> str:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"{name}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in rows:
            w.writerow([_csv_cell(r.get(c)) for c in SUMMARY_COLUMNS])
    text = render_table(rows, DISPLAY_COLUMNS, title)
    (out / f"{name}.txt").write_text(text)
    (out / f"{name}.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    return text


def cmd_run(cfg: ExperimentConfig, mode: Optional[str] = None, out: Optional[Path] = None,
            with_oracle: bool = True) -> dict:
    """Full continual run per seed plus a mean ± std summary.

    For modes with E-prompts, ``with_oracle`` also scores every task with its
    ground-truth expert, which is the perfect-match evaluation of the same model.
    """
    mode = mode or cfg.train.mode
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    seq, bb = load_sequence(cfg), load_backbone(cfg)
    out = Path(out) if out else Path(cfg.output_dir) / mode
    out.mkdir(parents=True, exist_ok=True)
    cfg.replace(train=dataclasses.replace(cfg.train, mode=mode)).save(out / "config.json")
    per_seed = _seed_runs(cfg, seq, bb, mode, cfg.attach, out, with_oracle=with_oracle)
    row = summarize(mode, per_seed)
    text = _write_summary([row], out, "summary", f"{mode}: {len(per_seed)} seed(s), {row['num_tasks']} tasks")
    return {"out": str(out), "per_seed": per_seed, "summary": row, "text": text}


# ---------------------------------------------------------------- sweeps

def contiguous_ranges(num_layers: int) -> list[tuple[int, int]]:
    return [(s, e) for s in range(1, num_layers + 1) for e in range(s, num_layers + 1)]


def parse_ranges(text: str) -> list[tuple[int, int]]:
    """``"1-2,5,3-4"`` -> ``[(1, 2), (5, 5), (3, 4)]``."""
    out = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        try:
            if "-" in part:
                a, b = part.split("-", 1)
                out.append((int(a), int(b)))
            else:
                out.append((int(part), int(part)))
        except ValueError:
            raise ConfigError(f"bad layer range {part!r}; use START-END or a single layer") from None
    if not out:
        raise ConfigError("empty range set")
    return out


def _val_score(cfg, seq, bb, mode, attach) -> tuple[float, float, Optional[float]]:
    ms = _seed_runs(cfg, seq, bb, mode, attach, None, eval_split="val")
    a, a_sd = mean_std([m["avg_accuracy"] for m in ms])
    f, _ = mean_std([m["forgetting"] for m in ms])
    return a, a_sd, (None if np.isnan(f) else f)


def _rank(rows: list[dict]) -> list[dict]:
    order = sorted(range(len(rows)), key=lambda i: (-rows[i]["val_avg_accuracy"], i))
    ranked = [rows[i] for i in order]
    for r, row in enumerate(ranked, start=1):
        row["rank"] = r
    return ranked


POSITION_COLUMNS = ["rank", "stage", "mode", "g_range", "e_range", "val_avg_accuracy", "val_avg_accuracy_std",
                    "val_forgetting"]


def _fmt_range(r) -> str:
    return "-" if r is None else f"{r[0]}-{r[1]}"


def cmd_sweep_positions(cfg: ExperimentConfig, strategy: str = "heuristic", kind: str = "e",
                        ranges: Optional[list[tuple[int, int]]] = None, out: Optional[Path] = None) -> dict:
    """Rank attachment positions by validation Average Accuracy.

    ``heuristic``: E at each single layer (E only), E ranges around the best
    layer, then G at each free single layer next to the chosen E range, then G
    ranges around the best G layer.  ``exhaustive``: every contiguous range for
    prompt ``kind`` with the other prompt held at its configured range.
    ``explicit``: the given ``ranges`` for ``kind``.
    """
    seq, bb = load_sequence(cfg), load_backbone(cfg)
    n = bb.config.num_layers
    a = cfg.attach
    seen: dict[tuple, dict] = {}

    def evaluate(stage, mode, g_range, e_range):
        key = (mode, g_range, e_range)
        if key in seen:
            return seen[key]
        att = AttachConfig(g_range, e_range, a.variant, a.g_length, a.e_length)
        att.validate(n)
        acc, sd, fg = _val_score(cfg, seq, bb, mode, att)
        row = {"stage": stage, "mode": mode, "g_range": _fmt_range(g_range), "e_range": _fmt_range(e_range),
               "val_avg_accuracy": acc, "val_avg_accuracy_std": sd, "val_forgetting": fg,
               "_g": g_range, "_e": e_range}
        seen[key] = row
        log.info("%s g=%s e=%s val A=%.2f", stage, row["g_range"], row["e_range"], acc)
        return row

    def best(rows):
        return max(rows, key=lambda r: r["val_avg_accuracy"])

    if strategy == "heuristic":
        e1 = [evaluate("e-single", E_ONLY, None, (l, l)) for l in range(1, n + 1)]
        le = best(e1)["_e"][0]
        multi = [(s, e) for s, e in contiguous_ranges(n) if s <= le <= e and 1 < e - s + 1 <= 3]
        e_best = best(e1 + [evaluate("e-multi", E_ONLY, None, r) for r in multi])["_e"]
        free = [l for l in range(1, n + 1) if not e_best[0] <= l <= e_best[1]]
        g1 = [evaluate("g-single", DUALPROMPT, (l, l), e_best) for l in free]
        if g1:
            lg = best(g1)["_g"][0]
            gm = [(s, e) for s, e in contiguous_ranges(n)
                  if s <= lg <= e and 1 < e - s + 1 <= 3 and all(l in free for l in range(s, e + 1))]
            for r in gm:
                evaluate("g-multi", DUALPROMPT, r, e_best)
    elif strategy in ("exhaustive", "explicit"):
        if kind not in ("g", "e"):
            raise ConfigError(f"kind must be 'g' or 'e', got {kind!r}")
        cands = contiguous_ranges(n) if strategy == "exhaustive" else list(ranges or [])
        if not cands:
            raise ConfigError("empty range set")
        for r in cands:
            if kind == "e":
                mode = DUALPROMPT if a.g_range is not None else E_ONLY
                evaluate(strategy, mode, a.g_range, tuple(r))
            else:
                mode = DUALPROMPT if a.e_range is not None else G_ONLY
                evaluate(strategy, mode, tuple(r), a.e_range)
    else:
        raise ConfigError(f"unknown strategy {strategy!r}; expected heuristic, exhaustive or explicit")

    rows = _rank(list(seen.values()))
    out = Path(out) if out else Path(cfg.output_dir) / "sweep_positions"
    text = write_table(rows, POSITION_COLUMNS, out, "positions",
                       f"position sweep ({strategy}), validation Average Accuracy, {len(cfg.seeds)} seed(s)")
    top = rows[0]
    result = {"rows": [{k: v for k, v in r.items() if not k.startswith("_")} for r in rows],
              "best": {"g_range": top["_g"], "e_range": top["_e"], "mode": top["mode"]}, "text": text}
    (out / "best.json").write_text(json.dumps(result["best"]) + "\n")
    return result


DEFAULT_LENGTH_GRID = (5, 10, 20, 40)
LENGTH_COLUMNS = ["rank", "g_length", "e_length", "val_avg_accuracy", "val_avg_accuracy_std", "val_forgetting"]


def default_length_grid(variant: str) -> tuple[int, ...]:
    """Pro-T uses the grid as is; Pre-T counts key and value rows, so every length doubles."""
    return DEFAULT_LENGTH_GRID if variant == PRO_T else tuple(2 * v for v in DEFAULT_LENGTH_GRID)


def cmd_sweep_lengths(cfg: ExperimentConfig, g_grid: Optional[Sequence[int]] = None,
                      e_grid: Optional[Sequence[int]] = None, out: Optional[Path] = None) -> dict:
    a = cfg.attach
    g_grid = tuple(g_grid or default_length_grid(a.variant))
    e_grid = tuple(e_grid or default_length_grid(a.variant))
    if a.variant == PRE_T:
        odd = sorted({v for v in g_grid + e_grid if v % 2})
        if odd:
            raise ConfigError(f"Pre-T needs even prompt lengths; grid contains {odd}")
    if a.g_range is None or a.e_range is None:
        raise ConfigError("the length sweep needs both g_range and e_range set")
    seq, bb = load_sequence(cfg), load_backbone(cfg)
    rows = []
    for lg in g_grid:
        for le in e_grid:
            att = AttachConfig(a.g_range, a.e_range, a.variant, lg, le)
            acc, sd, fg = _val_score(cfg, seq, bb, DUALPROMPT, att)
            rows.append({"g_length": lg, "e_length": le, "val_avg_accuracy": acc, "val_avg_accuracy_std": sd,
                         "val_forgetting": fg})
    rows = _rank(rows)
    out = Path(out) if out else Path(cfg.output_dir) / "sweep_lengths"
    text = write_table(rows, LENGTH_COLUMNS, out, "lengths",
                       f"length sweep ({a.variant}), validation Average Accuracy, {len(cfg.seeds)} seed(s)")
    best = {"g_length": rows[0]["g_length"], "e_length": rows[0]["e_length"]}
    (out / "best.json").write_text(json.dumps(best) + "\n")
    return {"rows": rows, "best": best, "text": text}


# ---------------------------------------------------------------- ablation and variants

SINGLE_LAYER = {"g": (2, 2), "e": (5, 5)}
MULTI_LAYER = {"g": (1, 2), "e": (3, 5)}
ABLATION_COLUMNS = ["G-P", "E-P", "ML", "mode", "avg_accuracy_pm", "forgetting_pm", "additional_parameters"]


def ablation_plan(num_layers: int = 6) -> list[tuple[bool, bool, bool]]:
    """(G, E, multi-layer) rows in the order of the usual ablation table."""
    return [(False, False, False), (True, False, False), (False, True, False), (True, True, False),
            (True, False, True), (False, True, True), (True, True, True)]


def cmd_ablate(cfg: ExperimentConfig, out: Optional[Path] = None, single=None, multi=None) -> dict:
    single, multi = single or SINGLE_LAYER, multi or MULTI_LAYER
    seq, bb = load_sequence(cfg), load_backbone(cfg)
    out = Path(out) if out else Path(cfg.output_dir) / "ablate"
    a = cfg.attach
    rows = []
    for use_g, use_e, ml in ablation_plan():
        ranges = multi if ml else single
        mode = {(False, False): BASELINE, (True, False): G_ONLY, (False, True): E_ONLY,
                (True, True): DUALPROMPT}[(use_g, use_e)]
        att = AttachConfig(ranges["g"] if use_g else None, ranges["e"] if use_e else None,
                           a.variant, a.g_length, a.e_length)
        label = f"{'G' if use_g else ''}{'E' if use_e else ''}{'-ML' if ml else ''}" or "baseline"
        per_seed = _seed_runs(cfg, seq, bb, mode, att, out / label)
        row = summarize(label, per_seed)
        row.update({"G-P": "x" if use_g else "", "E-P": "x" if use_e else "", "ML": "x" if ml else ""})
        rows.append(row)
    text = write_table(rows, ABLATION_COLUMNS, out, "ablation",
                       f"ablation over prompt types and depth, {len(cfg.seeds)} seed(s), test split")
    _write_summary(rows, out, "ablation_metrics", "ablation metrics")
    return {"rows": rows, "text": text}


def cmd_compare_variants(cfg: ExperimentConfig, out: Optional[Path] = None,
                         lengths: Optional[dict[str, tuple[int, int]]] = None) -> dict:
    """DualPrompt under both prompting functions on the same seeds.

    ``lengths`` maps variant -> (Lg, Le); by default Pro-T uses the configured
    lengths halved when they came from a Pre-T config, so both variants see the
    same number of rows per key/value stream.
    """
    seq, bb = load_sequence(cfg), load_backbone(cfg)
    out = Path(out) if out else Path(cfg.output_dir) / "variants"
    a = cfg.attach
    if lengths is None:
        if a.variant == PRE_T:
            lengths = {PRE_T: (a.g_length, a.e_length), PRO_T: (a.g_length // 2, a.e_length // 2)}
        else:
            lengths = {PRO_T: (a.g_length, a.e_length), PRE_T: (2 * a.g_length, 2 * a.e_length)}
    rows = []
    for variant in (PRO_T, PRE_T):
        lg, le = lengths[variant]
        att = AttachConfig(a.g_range, a.e_range, variant, lg, le)
        per_seed = _seed_runs(cfg, seq, bb, DUALPROMPT, att, out / variant)
        row = summarize(variant, per_seed)
        row.update({"variant": variant, "g_length": lg, "e_length": le})
        rows.append(row)
    pro, pre = rows
    observed = pre["avg_accuracy"] > pro["avg_accuracy"]
    note = ("Pre-T ahead of Pro-T on Average Accuracy: " + ("observed" if observed else "not observed"))
    text = write_table(rows, ["variant", "g_length", "e_length", "avg_accuracy_pm", "forgetting_pm",
                              "matching_accuracy_pm", "additional_parameters"], out, "variants",
                       f"prompting-function comparison, {len(cfg.seeds)} seed(s)")
    text += note + "\n"
    (out / "variants.txt").write_text(text)
    _write_summary(rows, out, "variants_metrics", "variant metrics")
    return {"rows": rows, "pre_t_better": observed, "text": text}


# ---------------------------------------------------------------- report

class ReportError(ValueError):
    """Run directories cannot be merged into one report."""


def _collect_runs(path: Path) -> list[Path]:
    path = Path(path)
    if (path / "metrics.json").exists():
        return [path]
    found = sorted(p.parent for p in path.glob("seed_*/metrics.json"))
    if not found:
        raise FileNotFoundError(f"no run artifacts (metrics.json) under {path}")
    return found


def cmd_report(run_dirs: Sequence[str | Path], out: Optional[Path] = None) -> dict:
    """Merge run directories into one comparison table, recomputing metrics from scores."""
    if not run_dirs:
        raise ReportError("no run directories given")
    groups: dict[str, list[dict]] = {}
    num_tasks = None
    for rd in run_dirs:
        for run in _collect_runs(Path(rd)):
            scores = ScoreMatrix.load(run / "scores.txt")
            stored = json.loads((run / "metrics.json").read_text())
            if num_tasks is None:
                num_tasks = scores.num_tasks
            elif scores.num_tasks != num_tasks:
                raise ReportError(f"{run} has T={scores.num_tasks} but earlier runs have T={num_tasks}")
            T = scores.num_tasks
            m = {
                "mode": scores.mode, "seed": scores.seed, "num_tasks": T,
                "avg_accuracy": avg_accuracy(scores, T), "forgetting": forgetting(scores, T),
                "matching_accuracy": stored.get("matching_accuracy"),
                "additional_parameters": stored.get("additional_parameters"),
            }
            if (run / "oracle_scores.txt").exists():
                m["oracle_avg_accuracy"] = avg_accuracy(ScoreMatrix.load(run / "oracle_scores.txt"), T)
            # a seed directory reports under its parent; a group directory under its own name
            label = run.parent.name if run == Path(rd) else Path(rd).name
            groups.setdefault(label, []).append(m)
    rows = [summarize(label, ms) for label, ms in groups.items()]
    cols = DISPLAY_COLUMNS + ["oracle_avg_accuracy_pm"]
    text = render_table(rows, cols, f"report over {sum(len(v) for v in groups.values())} run(s), T={num_tasks}")
    if out is not None:
        _write_summary(rows, Path(out), "report", text.splitlines()[0])
        (Path(out) / "report.txt").write_text(text)
    return {"rows": rows, "text": text}
