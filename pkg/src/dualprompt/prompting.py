"""G-/E-prompt parameters, the two prompting functions and layer-range attachment."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor_core as tc
from .backbone import Backbone
from .tensor_core import Tensor

PRO_T = "prot"
PRE_T = "pret"
VARIANTS = (PRO_T, PRE_T)
INIT_RANGE = 0.03


class ConfigError(ValueError):
    """Invalid attachment or prompt configuration."""


@dataclass
class AttachConfig:
    """Where (1-based, inclusive layer ranges) and how prompts attach.

    A range of ``None`` means that prompt type is absent.
    """
    g_range: Optional[tuple[int, int]] = (1, 2)
    e_range: Optional[tuple[int, int]] = (3, 5)
    variant: str = PRE_T
    g_length: int = 4
    e_length: int = 8

    def __post_init__(self):
        self.g_range = None if self.g_range is None else tuple(self.g_range)
        self.e_range = None if self.e_range is None else tuple(self.e_range)
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown prompting variant {self.variant!r}; expected one of {VARIANTS}")
        for kind, rng, length in (("g", self.g_range, self.g_length), ("e", self.e_range, self.e_length)):
            if rng is None:
                continue
            if len(rng) != 2 or not 1 <= rng[0] <= rng[1]:
                raise ConfigError(f"{kind}_range {rng} must satisfy 1 <= start <= end")
            if length < 1:
                raise ConfigError(f"{kind}_length must be positive, got {length}")
            if self.variant == PRE_T and length % 2:
                raise ConfigError(f"Pre-T needs an even {kind}_length, got {length}")

    def validate(self, num_layers: int) -> None:
        for kind, rng in (("g", self.g_range), ("e", self.e_range)):
            if rng is not None and rng[1] > num_layers:
                raise ConfigError(f"{kind}_range {rng} exceeds backbone depth {num_layers}")

    def g_layers(self) -> list[int]:
        return [] if self.g_range is None else list(range(self.g_range[0], self.g_range[1] + 1))

    def e_layers(self) -> list[int]:
        return [] if self.e_range is None else list(range(self.e_range[0], self.e_range[1] + 1))

    def layer_map(self, num_layers: int) -> dict[int, tuple[str, ...]]:
        """Layer -> injected prompt kinds, in injection order (G before E)."""
        self.validate(num_layers)
        g, e = set(self.g_layers()), set(self.e_layers())
        return {l: tuple(k for k, s in (("G", g), ("E", e)) if l in s) for l in range(1, num_layers + 1)}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["g_range"] = None if self.g_range is None else list(self.g_range)
        d["e_range"] = None if self.e_range is None else list(self.e_range)
        return d


def _init_prompt(rng: np.random.Generator, length: int, dim: int, name: str) -> Tensor:
    return Tensor(rng.uniform(-INIT_RANGE, INIT_RANGE, size=(length, dim)), True, name=name)


@dataclass
class GPrompt:
    """Shared prompts ``g^(l)`` for each layer in the G range."""
    layers: dict[int, Tensor]

    @classmethod
    def init(cls, cfg: AttachConfig, dim: int, rng: np.random.Generator) -> "GPrompt":
        return cls({l: _init_prompt(rng, cfg.g_length, dim, f"g.{l}") for l in cfg.g_layers()})

    def params(self) -> dict[str, Tensor]:
        return {f"g.{l}": p for l, p in self.layers.items()}


@dataclass
class EPromptSet:
    """Per-task prompts ``e_t^(l)`` and task keys ``k_t``; task ids are 0-based."""
    prompts: list[dict[int, Tensor]] = field(default_factory=list)
    keys: list[Tensor] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.keys)

    def add_task(self, cfg: AttachConfig, dim: int, rng: np.random.Generator) -> int:
        t = len(self.keys)
        self.prompts.append({l: _init_prompt(rng, cfg.e_length, dim, f"e.{t}.{l}") for l in cfg.e_layers()})
        k = rng.normal(size=dim)
        self.keys.append(Tensor(k / np.linalg.norm(k), True, name=f"k.{t}"))
        return t

    def task_params(self, t: int) -> dict[str, Tensor]:
        out = {f"e.{t}.{l}": p for l, p in self.prompts[t].items()}
        out[f"k.{t}"] = self.keys[t]
        return out

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for t in range(len(self)):
            out.update(self.task_params(t))
        return out

    def set_trainable(self, task: Optional[int]) -> None:
        """Only ``task``'s prompts and key may receive gradient (``None`` freezes all)."""
        for t in range(len(self)):
            for p in self.task_params(t).values():
                p.requires_grad = t == task
                p.grad = None

    def key_matrix(self) -> np.ndarray:
        return np.stack([k.data for k in self.keys])


# ---------------------------------------------------------------- prompting functions

def _batched(p: Tensor, like: Tensor) -> Tensor:
    if like.ndim == p.ndim:
        return p
    if like.ndim == p.ndim + 1:
        return tc.expand_batch(p, like.shape[0])
    raise tc.ShapeError(f"prompt {p.shape} cannot be attached to {like.shape}")


def prompt_pro_t(backbone: Backbone, p: Tensor, h: Tensor, layer: int) -> Tensor:
    """Prompt tuning: ``MSA([p; h], [p; h], [p; h])`` with output length ``Lp + L``."""
    if p.shape[-1] != h.shape[-1]:
        raise tc.ShapeError(f"prompt width {p.shape[-1]} != token width {h.shape[-1]}")
    x = tc.concat_seq(_batched(p, h), h)
    return backbone.msa(x, x, x, layer)


def prefix_msa(backbone: Backbone, p_k: Tensor, p_v: Tensor, h: Tensor, layer: int) -> Tensor:
    """``MSA(h, [p_k; h], [p_v; h])``; prefixes join before the K/V projections."""
    if p_k.shape != p_v.shape:
        raise tc.ShapeError(f"key prefix {p_k.shape} and value prefix {p_v.shape} differ")
    if p_k.shape[-1] != h.shape[-1]:
        raise tc.ShapeError(f"prefix width {p_k.shape[-1]} != token width {h.shape[-1]}")
    keys = tc.concat_seq(_batched(p_k, h), h)
    values = tc.concat_seq(_batched(p_v, h), h)
    return backbone.msa(h, keys, values, layer)


def prompt_pre_t(backbone: Backbone, p: Tensor, h: Tensor, layer: int) -> Tensor:
    """Prefix tuning: first half of ``p`` prefixes the keys, second half the values."""
    lp = p.shape[0]
    if lp % 2:
        raise ConfigError(f"Pre-T needs an even prompt length, got {lp}")
    half = lp // 2
    return prefix_msa(backbone, tc.slice_seq(p, 0, half), tc.slice_seq(p, half, lp), h, layer)


def _keep_class_first(x: Tensor, lp: int) -> Tensor:
    # [p; cls; rest] -> [cls; p; rest]. Attention and the MLP are permutation
    # equivariant, so this only relabels rows and keeps the class token at 0.
    cls = tc.slice_seq(x, lp, lp + 1)
    head = tc.concat_seq(cls, tc.slice_seq(x, 0, lp))
    return tc.concat_seq(head, tc.slice_seq(x, lp + 1, x.shape[-2]))


class ProTInjection:
    def __init__(self, prompts: list[Tensor]):
        self.prompts = prompts

    @property
    def length(self) -> int:
        return sum(p.shape[0] for p in self.prompts)

    def combined(self) -> Tensor:
        p = self.prompts[0]
        for q in self.prompts[1:]:
            p = tc.concat_seq(p, q)
        return p

    def __call__(self, backbone: Backbone, h: Tensor, u: Tensor, layer: int):
        p = self.combined()
        lp = p.shape[0]
        a = prompt_pro_t(backbone, p, u, layer)
        res = tc.concat_seq(_batched(p, h), h)
        return _keep_class_first(res, lp), _keep_class_first(a, lp)


class PreTInjection:
    def __init__(self, prompts: list[Tensor]):
        self.prompts = prompts

    def __call__(self, backbone: Backbone, h: Tensor, u: Tensor, layer: int):
        if len(self.prompts) == 1:
            return h, prompt_pre_t(backbone, self.prompts[0], u, layer)
        ks, vs = [], []
        for p in self.prompts:
            half = p.shape[0] // 2
            ks.append(tc.slice_seq(p, 0, half))
            vs.append(tc.slice_seq(p, half, p.shape[0]))
        pk, pv = ks[0], vs[0]
        for k, v in zip(ks[1:], vs[1:]):
            pk, pv = tc.concat_seq(pk, k), tc.concat_seq(pv, v)
        return h, prefix_msa(backbone, pk, pv, u, layer)


@dataclass
class PromptedForward:
    """The prompted architecture ``f_{g, e_t}`` for one choice of expert."""
    backbone: Backbone
    injections: dict[int, object]
    kinds: dict[int, tuple[str, ...]]

    def encode(self, x) -> Tensor:
        return self.backbone.encode(x, self.injections)

    def __call__(self, x) -> Tensor:
        return self.backbone.features(x, self.injections)


def attach(backbone: Backbone, g: Optional[GPrompt], e_t: Optional[dict[int, Tensor]],
           cfg: AttachConfig) -> PromptedForward:
    """Map each layer to the prompts it receives and build the injections."""
    layer_map = cfg.layer_map(backbone.config.num_layers)
    injections: dict[int, object] = {}
    kinds: dict[int, tuple[str, ...]] = {}
    cls = ProTInjection if cfg.variant == PRO_T else PreTInjection
    for layer, want in layer_map.items():
        prompts, used = [], []
        if "G" in want and g is not None:
            prompts.append(g.layers[layer])
            used.append("G")
        if "E" in want and e_t is not None:
            prompts.append(e_t[layer])
            used.append("E")
        if prompts:
            injections[layer] = cls(prompts)
        kinds[layer] = tuple(used)
    return PromptedForward(backbone, injections, kinds)


# ---------------------------------------------------------------- matching

def match_loss(qx, k_t: Tensor) -> Tensor:
    """Cosine distance ``1 - cos(q(x), k_t)``; one value per query row."""
    q = qx if isinstance(qx, Tensor) else Tensor._wrap(np.asarray(qx, dtype=np.float64), False)
    k = _batched(k_t, q) if q.ndim == 2 else k_t
    return tc.cosine_distance(q, k)


def cosine_distances(qx: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """``[B, D] x [T, D] -> [B, T]`` cosine distances, norms clamped at 1e-12."""
    q = np.atleast_2d(np.asarray(qx, dtype=np.float64))
    k = np.atleast_2d(np.asarray(keys, dtype=np.float64))
    q = q / np.maximum(np.sqrt((q * q).sum(axis=1)), 1e-12)[:, None]
    k = k / np.maximum(np.sqrt((k * k).sum(axis=1)), 1e-12)[:, None]
    # elementwise product + row sum instead of a BLAS matmul: identical keys then
    # give bit-identical distances, so ties really resolve to the lowest index
    return 1.0 - (q[:, None, :] * k[None, :, :]).sum(axis=2)


def select_expert(qx, keys) -> np.ndarray | int:
    """Index of the key with the smallest cosine distance; ties go to the lowest index."""
    keys = keys.key_matrix() if isinstance(keys, EPromptSet) else np.asarray(keys, dtype=np.float64)
    if keys.size == 0:
        raise ValueError("select_expert: no task keys")
    single = np.ndim(qx) == 1
    idx = np.argmin(cosine_distances(qx, keys), axis=1)
    return int(idx[0]) if single else idx


# ---------------------------------------------------------------- export

EXPORT_HEADER = ["kind", "task", "snapshot", "layer", "row"]


def prompt_records(g_snapshots: list[dict[int, np.ndarray]], e_prompts: EPromptSet):
    """Yield one record per prompt row: G rows per task snapshot, then E rows."""
    for snap, layers in enumerate(g_snapshots):
        for layer in sorted(layers):
            for row, vec in enumerate(layers[layer]):
                yield ("G", "", snap, layer, row, vec)
    for t, layers in enumerate(e_prompts.prompts):
        for layer in sorted(layers):
            for row, vec in enumerate(layers[layer].data):
                yield ("E", t, "", layer, row, vec)


def export_prompt_vectors(g_snapshots: list[dict[int, np.ndarray]], e_prompts: EPromptSet,
                          path: str | Path) -> int:
    """Write every prompt row as a CSV record; returns the number of records.

    Columns: ``kind,task,snapshot,layer,row,v0..v{D-1}``.  ``task`` is blank for
    G rows and ``snapshot`` (task index after which G was captured) is blank for
    E rows.  Values use 17 significant digits, so they round-trip exactly.
    """
    n = 0
    dim = None
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for rec in prompt_records(g_snapshots, e_prompts):
            vec = rec[-1]
            if dim is None:
                dim = len(vec)
                w.writerow(EXPORT_HEADER + [f"v{i}" for i in range(dim)])
            w.writerow(list(rec[:-1]) + [format(float(v), ".17g") for v in vec])
            n += 1
        if dim is None:
            w.writerow(EXPORT_HEADER)
    return n


def read_prompt_vectors(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        out = []
        for row in r:
            out.append({
                "kind": row[0],
                "task": int(row[1]) if row[1] else None,
                "snapshot": int(row[2]) if row[2] else None,
                "layer": int(row[3]),
                "row": int(row[4]),
                "vector": np.array([float(v) for v in row[5:]]),
            })
    return out
