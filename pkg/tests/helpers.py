"""Small shared builders for the test-suite."""
import numpy as np

from dualprompt.backbone import Backbone, BackboneConfig

TINY = BackboneConfig(num_layers=2, embed_dim=8, num_heads=2, mlp_ratio=2.0, image_shape=(4, 4),
                      patch_shape=(2, 2), num_pretrain_classes=3)


def tiny_backbone(seed=0, layers=2, frozen=True) -> Backbone:
    cfg = BackboneConfig(**{**TINY.to_dict(), "num_layers": layers})
    bb = Backbone.init(cfg, seed)
    # perturb the near-trivial init so layernorm affine terms and biases matter
    rng = np.random.default_rng(seed + 99)
    for p in bb.params.values():
        p.data += 0.1 * rng.normal(size=p.shape)
    if frozen:
        bb.freeze()
    return bb


def images(n, cfg=TINY, seed=0):
    return np.random.default_rng(seed).normal(size=(n,) + tuple(cfg.image_shape))
