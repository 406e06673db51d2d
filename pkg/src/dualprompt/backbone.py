"""A miniature pre-norm ViT encoder built on :mod:`dualprompt.tensor_core`.

Layer indices are 1-based throughout to match the prompt attachment ranges.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import checkpoint
from . import tensor_core as tc
from .optim import Adam
from .tensor_core import Tensor

log = logging.getLogger(__name__)

LN_EPS = 1e-6

# injection(backbone, h, h_normed, layer) -> (residual stream, msa output)
Injection = Callable[["Backbone", Tensor, Tensor, int], tuple[Tensor, Tensor]]


class ContractError(RuntimeError):
    """An operation was called in a state its contract forbids."""


@dataclass
class BackboneConfig:
    num_layers: int = 6
    embed_dim: int = 64
    num_heads: int = 4
    mlp_ratio: float = 4.0
    image_shape: tuple[int, int] = (8, 8)
    patch_shape: tuple[int, int] = (2, 2)
    num_pretrain_classes: int = 40

    def __post_init__(self):
        self.image_shape = tuple(self.image_shape)
        self.patch_shape = tuple(self.patch_shape)
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        (h, w), (ph, pw) = self.image_shape, self.patch_shape
        if h % ph or w % pw:
            raise ValueError(f"patch {self.patch_shape} does not tile image {self.image_shape}")

    @property
    def num_tokens(self) -> int:
        (h, w), (ph, pw) = self.image_shape, self.patch_shape
        return (h // ph) * (w // pw)

    @property
    def patch_dim(self) -> int:
        return self.patch_shape[0] * self.patch_shape[1]

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        d["patch_shape"] = list(self.patch_shape)
        return d


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class Backbone:
    config: BackboneConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def init(cls, config: BackboneConfig, seed: int = 0) -> "Backbone":
        rng = np.random.default_rng(seed)
        d, p = config.embed_dim, config.patch_dim
        raw: dict[str, np.ndarray] = {
            "embed.w": _xavier(rng, p, d),
            "embed.b": np.zeros(d),
            "cls": rng.normal(0.0, 0.02, size=d),
            "pos": rng.normal(0.0, 0.02, size=(config.num_tokens + 1, d)),
            "norm.g": np.ones(d),
            "norm.b": np.zeros(d),
        }
        for i in range(1, config.num_layers + 1):
            pre = f"blocks.{i}."
            raw.update({
                pre + "ln1.g": np.ones(d), pre + "ln1.b": np.zeros(d),
                pre + "qkv.w": _xavier(rng, d, 3 * d), pre + "qkv.b": np.zeros(3 * d),
                pre + "proj.w": _xavier(rng, d, d), pre + "proj.b": np.zeros(d),
                pre + "ln2.g": np.ones(d), pre + "ln2.b": np.zeros(d),
                pre + "fc1.w": _xavier(rng, d, config.mlp_dim), pre + "fc1.b": np.zeros(config.mlp_dim),
                pre + "fc2.w": _xavier(rng, config.mlp_dim, d), pre + "fc2.b": np.zeros(d),
            })
        params = {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}
        return cls(config, params)

    # ---------------------------------------------------------------- state

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.params.values())

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None

    def unfreeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = True

    def num_trainable(self) -> int:
        return sum(p.size for p in self.params.values() if p.requires_grad)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def checksum(self) -> str:
        return checkpoint.checksum(self.state_arrays(), {"backbone": self.config.to_dict()})

    def copy(self) -> "Backbone":
        params = {k: Tensor(p.data, p.requires_grad, name=k) for k, p in self.params.items()}
        return Backbone(self.config, params)

    def save(self, path, extra: Optional[dict] = None) -> str:
        cfg = {"backbone": self.config.to_dict(), **(extra or {})}
        return checkpoint.save(path, self.state_arrays(), cfg)

    @classmethod
    def load(cls, path) -> "Backbone":
        arrays, cfg = checkpoint.load(path)
        config = BackboneConfig(**cfg["backbone"])
        expected = set(cls.init(config).params)
        if set(arrays) != expected:
            missing = sorted(expected - set(arrays))
            extra = sorted(set(arrays) - expected)
            raise checkpoint.CheckpointError(f"parameter set mismatch: missing={missing} unexpected={extra}")
        return cls(config, {k: Tensor(v, name=k) for k, v in arrays.items()})

    def head_weights(self, layer: int, head: int) -> dict[str, np.ndarray]:
        """Per-head view of the fused projections: W^Q_i, W^K_i, W^V_i (each D x d_head)."""
        self._check_layer(layer)
        d, dh = self.config.embed_dim, self.config.head_dim
        w = self.params[f"blocks.{layer}.qkv.w"].data
        cols = slice(head * dh, (head + 1) * dh)
        return {"q": w[:, :d][:, cols], "k": w[:, d:2 * d][:, cols], "v": w[:, 2 * d:][:, cols]}

    def _check_layer(self, layer: int) -> None:
        if not 1 <= layer <= self.config.num_layers:
            raise IndexError(f"layer {layer} outside 1..{self.config.num_layers}")

    # ---------------------------------------------------------------- forward pieces

    def patchify(self, x) -> np.ndarray:
        """``[B, H, W]`` (or ``[H, W]``) images to ``[B, L_in, ph*pw]`` patch rows."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[1:] != self.config.image_shape:
            raise ValueError(f"input shape {x.shape} does not match image shape {self.config.image_shape}")
        (h, w), (ph, pw) = self.config.image_shape, self.config.patch_shape
        b = x.shape[0]
        x = x.reshape(b, h // ph, ph, w // pw, pw).transpose(0, 1, 3, 2, 4)
        return x.reshape(b, (h // ph) * (w // pw), ph * pw)

    def embed(self, x) -> Tensor:
        """Class token at index 0 followed by the patch tokens, plus position embedding."""
        patches = Tensor._wrap(self.patchify(x), False)
        b = patches.shape[0]
        tok = tc.add_bias(tc.matmul(patches, self.params["embed.w"]), self.params["embed.b"])
        cls = tc.expand_batch(tc.reshape(self.params["cls"], (1, self.config.embed_dim)), b)
        h = tc.concat_seq(cls, tok)
        return tc.add(h, tc.expand_batch(self.params["pos"], b))

    def msa(self, h_q: Tensor, h_k: Tensor, h_v: Tensor, layer: int,
            return_weights: bool = False):
        """Multi-head attention with this layer's projections.

        ``h_k``/``h_v`` may be longer than ``h_q`` (prefix case); the output always
        has the query length.
        """
        self._check_layer(layer)
        cfg = self.config
        d, m, dh = cfg.embed_dim, cfg.num_heads, cfg.head_dim
        for name, t in (("h_q", h_q), ("h_k", h_k), ("h_v", h_v)):
            if t.shape[-1] != d:
                raise tc.ShapeError(f"msa: {name} has width {t.shape[-1]}, expected {d}")
        if h_k.shape[-2] != h_v.shape[-2]:
            raise tc.ShapeError(f"msa: key length {h_k.shape[-2]} != value length {h_v.shape[-2]}")
        pre = f"blocks.{layer}."
        w, bias = self.params[pre + "qkv.w"], self.params[pre + "qkv.b"]
        lead = h_q.shape[:-2]

        def project(x: Tensor, part: int) -> Tensor:
            y = tc.add_bias(tc.matmul(x, tc.slice_last(w, part * d, (part + 1) * d)),
                            tc.slice_last(bias, part * d, (part + 1) * d))
            n = x.shape[-2]
            y = tc.reshape(y, lead + (n, m, dh))
            k = len(lead)
            return tc.transpose(y, tuple(range(k)) + (k + 1, k, k + 2))

        q, k_, v = project(h_q, 0), project(h_k, 1), project(h_v, 2)
        k = len(lead)
        kt = tc.transpose(k_, tuple(range(k + 1)) + (k + 2, k + 1))
        scores = tc.scale(tc.matmul(q, kt), 1.0 / math.sqrt(dh))
        attn = tc.softmax(scores, axis=-1)
        heads = tc.matmul(attn, v)
        merged = tc.reshape(tc.transpose(heads, tuple(range(k)) + (k + 1, k, k + 2)),
                            lead + (h_q.shape[-2], d))
        out = tc.add_bias(tc.matmul(merged, self.params[pre + "proj.w"]), self.params[pre + "proj.b"])
        return (out, attn) if return_weights else out

    def mlp(self, x: Tensor, layer: int) -> Tensor:
        pre = f"blocks.{layer}."
        hid = tc.gelu(tc.add_bias(tc.matmul(x, self.params[pre + "fc1.w"]), self.params[pre + "fc1.b"]))
        return tc.add_bias(tc.matmul(hid, self.params[pre + "fc2.w"]), self.params[pre + "fc2.b"])

    def norm(self, x: Tensor, which: str) -> Tensor:
        return tc.layernorm(x, self.params[which + ".g"], self.params[which + ".b"], LN_EPS)

    def forward_block(self, h: Tensor, layer: int, injection: Optional[Injection] = None,
                      cls_only: bool = False) -> Tensor:
        """One pre-norm block: ``x = h + MSA(LN(h)); x + MLP(LN(x))``.

        ``injection`` replaces the plain self-attention with a prompted one and
        may lengthen the residual stream.  ``cls_only`` computes just the class
        token row of the output (exact, used for the final block).
        """
        self._check_layer(layer)
        pre = f"blocks.{layer}."
        u = self.norm(h, pre + "ln1")
        if injection is None:
            if cls_only:
                res, a = tc.slice_seq(h, 0, 1), self.msa(tc.slice_seq(u, 0, 1), u, u, layer)
            else:
                res, a = h, self.msa(u, u, u, layer)
        else:
            res, a = injection(self, h, u, layer)
            if cls_only:
                res, a = tc.slice_seq(res, 0, 1), tc.slice_seq(a, 0, 1)
        x = tc.add(res, a)
        return tc.add(x, self.mlp(self.norm(x, pre + "ln2"), layer))

    def encode(self, x, injections: Optional[dict[int, Injection]] = None) -> Tensor:
        """Full forward pass; returns the final normed sequence ``[B, L', D]``."""
        h = self.embed(x)
        injections = injections or {}
        for layer in range(1, self.config.num_layers + 1):
            h = self.forward_block(h, layer, injections.get(layer))
        return self.norm(h, "norm")

    def features(self, x, injections: Optional[dict[int, Injection]] = None) -> Tensor:
        """Class-token feature ``[B, D]`` of a (possibly prompted) forward pass."""
        h = self.embed(x)
        injections = injections or {}
        n = self.config.num_layers
        for layer in range(1, n + 1):
            h = self.forward_block(h, layer, injections.get(layer), cls_only=layer == n)
        return self.norm(tc.select_token(h, 0), "norm")

    def query_feature(self, x) -> np.ndarray:
        """Prompt-free class-token feature of the frozen backbone.

        Accepts one image (returns ``[D]``) or a batch (returns ``[B, D]``).
        """
        if not self.frozen:
            raise ContractError("query_feature needs a frozen backbone")
        single = np.ndim(x) == 2
        with tc.no_grad():
            f = self.features(x).data
        return f[0].copy() if single else f


# ---------------------------------------------------------------- pretraining

@dataclass
class PretrainReport:
    epoch_losses: list[float]
    train_accuracy: float
    epochs: int


def pretrain(backbone: Backbone, x: np.ndarray, y: np.ndarray, epochs: int = 20,
             lr: float = 1e-3, batch_size: int = 64, seed: int = 0) -> PretrainReport:
    """Supervised training on an upstream class set; the temporary head is discarded."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if len(x) == 0:
        raise ValueError("pretrain: empty upstream dataset")
    if backbone.frozen:
        raise ContractError("pretrain needs an unfrozen backbone")
    classes = np.unique(y)
    index = {int(c): i for i, c in enumerate(classes)}
    yi = np.array([index[int(c)] for c in y])
    rng = np.random.default_rng(seed)
    d = backbone.config.embed_dim
    bound = 1.0 / math.sqrt(d)
    head = {
        "head.w": Tensor(rng.uniform(-bound, bound, size=(d, len(classes))), True),
        "head.b": Tensor(np.zeros(len(classes)), True),
    }
    params = {**backbone.params, **head}
    opt = Adam(lr=lr)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), batch_size):
            idx = order[start:start + batch_size]
            with tc.Tape() as tape:
                f = backbone.features(x[idx])
                logits = tc.add_bias(tc.matmul(f, head["head.w"]), head["head.b"])
                loss = tc.cross_entropy_logits(logits, yi[idx])
                tape.backward(loss)
            opt.step(params)
            opt.zero_grad(params)
            total += loss.item() * len(idx)
        losses.append(total / len(x))
        log.info("pretrain epoch %d loss %.4f", epoch + 1, losses[-1])
    correct = 0
    with tc.no_grad():
        for start in range(0, len(x), 256):
            f = backbone.features(x[start:start + 256])
            logits = f.data @ head["head.w"].data + head["head.b"].data
            correct += int((logits.argmax(axis=1) == yi[start:start + 256]).sum())
    return PretrainReport(losses, 100.0 * correct / len(x), epochs)
