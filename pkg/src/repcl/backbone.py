"""Small pre-norm vision transformer with per-layer hook points.

Hooks expose exactly two injection sites per block: a keep/skip gate around
the whole block (layer dropping) and a post-attention token rewrite (token
merging), plus a per-key attention bias (proportional attention for merged
token sizes). With inert hooks the forward is identical to having no hook
machinery at all.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .tensor import (Parameter, ShapeError, Tensor, concat, gelu, layer_norm,
                     matmul, no_grad, permute, reshape, rng_stream, softmax,
                     take_rows)


@dataclass(frozen=True)
class ViTConfig:
    image_side: int = 32
    patch_side: int = 8
    depth: int = 6
    width: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    n_classes: int = 10

    def __post_init__(self):
        if self.image_side % self.patch_side != 0:
            raise ShapeError("image_side must be divisible by patch_side")
        if self.width % self.heads != 0:
            raise ShapeError("width must be divisible by heads")

    @property
    def grid_side(self) -> int:
        return self.image_side // self.patch_side

    @property
    def n_patches(self) -> int:
        return self.grid_side ** 2

    @property
    def base_tokens(self) -> int:
        # patches plus CLS, before any prompt is attached
        return self.n_patches + 1

    def to_dict(self) -> dict:
        return {"image_side": self.image_side, "patch_side": self.patch_side,
                "depth": self.depth, "width": self.width, "heads": self.heads,
                "mlp_ratio": self.mlp_ratio, "n_classes": self.n_classes}

    @staticmethod
    def from_dict(d: dict) -> "ViTConfig":
        return ViTConfig(**d)


@dataclass
class AttentionRecord:
    layer: int
    head: int
    weights: np.ndarray  # (T, T) probabilities, rows sum to 1


@dataclass
class TokenBatch:
    x: Tensor  # (B, T, D)
    prompt_len: int = 0

    @property
    def n_tokens(self) -> int:
        return self.x.shape[1]

    @property
    def protected_len(self) -> int:
        # CLS plus any prompts; never merged, never distance-scored
        return 1 + self.prompt_len


class ForwardHooks:
    """Inert defaults; subclasses wire in layer dropping / token merging."""

    def gate(self, layer: int) -> bool:
        return True

    def on_skip(self, layer: int, n_tokens: int, protected: int) -> None:
        pass

    def attn_bias(self, layer: int, n_tokens: int):
        """Optional (B, T) additive pre-softmax bias per key token."""
        return None

    def post_attention(self, layer: int, x: Tensor, keys_mean: np.ndarray,
                       protected: int) -> Tensor:
        return x


INERT_HOOKS = ForwardHooks()


class Block:
    def __init__(self, layer: int, cfg: ViTConfig, rng: np.random.Generator):
        D = cfg.width
        hidden = cfg.mlp_ratio * D

        def p(name, arr):
            return Parameter(Tensor(arr, requires_grad=True), name=f"block{layer}.{name}")

        self.ln1_g = p("ln1_g", np.ones(D))
        self.ln1_b = p("ln1_b", np.zeros(D))
        self.w_qkv = p("w_qkv", rng.normal(0.0, D ** -0.5, size=(D, 3 * D)))
        self.b_qkv = p("b_qkv", np.zeros(3 * D))
        self.w_proj = p("w_proj", rng.normal(0.0, D ** -0.5, size=(D, D)))
        self.b_proj = p("b_proj", np.zeros(D))
        self.ln2_g = p("ln2_g", np.ones(D))
        self.ln2_b = p("ln2_b", np.zeros(D))
        self.w_mlp1 = p("w_mlp1", rng.normal(0.0, D ** -0.5, size=(D, hidden)))
        self.b_mlp1 = p("b_mlp1", np.zeros(hidden))
        self.w_mlp2 = p("w_mlp2", rng.normal(0.0, hidden ** -0.5, size=(hidden, D)))
        self.b_mlp2 = p("b_mlp2", np.zeros(D))
        self.cfg = cfg

    def parameters(self) -> list[Parameter]:
        return [self.ln1_g, self.ln1_b, self.w_qkv, self.b_qkv, self.w_proj,
                self.b_proj, self.ln2_g, self.ln2_b, self.w_mlp1, self.b_mlp1,
                self.w_mlp2, self.b_mlp2]

    def attention(self, x: Tensor, bias: np.ndarray | None):
        """Returns (attn output pre-residual, head-mean keys, attn probs)."""
        B, T, D = x.shape
        H = self.cfg.heads
        dh = D // H
        h = layer_norm(x, self.ln1_g.tensor, self.ln1_b.tensor)
        qkv = matmul(h, self.w_qkv.tensor) + self.b_qkv.tensor
        qkv = reshape(qkv, (B, T, 3, H, dh))
        qkv = permute(qkv, (2, 0, 3, 1, 4))  # (3, B, H, T, dh)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = matmul(q, permute(k, (0, 1, 3, 2))) * (dh ** -0.5)
        if bias is not None:
            scores = scores + Tensor(bias[:, None, None, :])
        attn = softmax(scores, axis=-1)
        out = matmul(attn, v)  # (B, H, T, dh)
        out = reshape(permute(out, (0, 2, 1, 3)), (B, T, D))
        out = matmul(out, self.w_proj.tensor) + self.b_proj.tensor
        keys_mean = k.data.mean(axis=1)  # (B, T, dh), detached
        return out, keys_mean, attn.data

    def mlp(self, x: Tensor) -> Tensor:
        h = layer_norm(x, self.ln2_g.tensor, self.ln2_b.tensor)
        h = gelu(matmul(h, self.w_mlp1.tensor) + self.b_mlp1.tensor)
        return matmul(h, self.w_mlp2.tensor) + self.b_mlp2.tensor


class ViT:
    def __init__(self, cfg: ViTConfig, seed: int = 0, init_stream: str = "init"):
        self.cfg = cfg
        rng = rng_stream(seed, init_stream)
        D = cfg.width
        P2 = cfg.patch_side ** 2

        def p(name, arr):
            return Parameter(Tensor(arr, requires_grad=True), name=name)

        self.w_patch = p("w_patch", rng.normal(0.0, P2 ** -0.5, size=(P2, D)))
        self.b_patch = p("b_patch", np.zeros(D))
        self.cls = p("cls", rng.normal(0.0, 0.02, size=(1, D)))
        self.pos = p("pos", rng.normal(0.0, 0.02, size=(cfg.base_tokens, D)))
        self.blocks = [Block(i, cfg, rng) for i in range(cfg.depth)]
        self.lnf_g = p("lnf_g", np.ones(D))
        self.lnf_b = p("lnf_b", np.zeros(D))
        self.w_head = p("w_head", np.zeros((D, cfg.n_classes)))
        self.b_head = p("b_head", np.zeros(cfg.n_classes))

    def parameters(self) -> list[Parameter]:
        out = [self.w_patch, self.b_patch, self.cls, self.pos]
        for b in self.blocks:
            out.extend(b.parameters())
        out.extend([self.lnf_g, self.lnf_b, self.w_head, self.b_head])
        return out

    def backbone_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.name not in ("w_head", "b_head")]

    def freeze_backbone(self) -> None:
        for p in self.backbone_parameters():
            p.freeze()

    def params_hash(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def params_hash_backbone(self) -> str:
        h = hashlib.sha256()
        for p in self.backbone_parameters():
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    # -- forward -------------------------------------------------------------

    def patchify(self, images: np.ndarray) -> np.ndarray:
        B = images.shape[0]
        g, P = self.cfg.grid_side, self.cfg.patch_side
        x = images.reshape(B, g, P, g, P).transpose(0, 1, 3, 2, 4)
        return x.reshape(B, g * g, P * P)

    def embed(self, images: np.ndarray) -> TokenBatch:
        """Images (B, S, S) in [0, 1] -> [CLS | patches] tokens with positions."""
        B = images.shape[0]
        patches = Tensor(self.patchify(np.asarray(images, dtype=np.float64)))
        tok = matmul(patches, self.w_patch.tensor) + self.b_patch.tensor
        cls = reshape(take_rows(self.cls.tensor, np.zeros(B, dtype=np.int64)), (B, 1, -1))
        x = concat([cls, tok], axis=1) + self.pos.tensor
        return TokenBatch(x=x, prompt_len=0)

    def forward_tokens(self, tokens: TokenBatch, hooks: ForwardHooks = INERT_HOOKS,
                       record_attention: bool = False, head: bool = True):
        """Run the blocks, head included.

        Returns (logits, attention records, cls feature). The hook contract:
        gate() decides block execution, post_attention() may rewrite tokens
        (reducing their count), attn_bias() feeds proportional attention.
        """
        x = tokens.x
        protected = tokens.protected_len
        records: list[AttentionRecord] = []
        for layer, block in enumerate(self.blocks):
            if not hooks.gate(layer):
                hooks.on_skip(layer, x.shape[1], protected)
                continue
            bias = hooks.attn_bias(layer, x.shape[1])
            attn_out, keys_mean, probs = block.attention(x, bias)
            x = x + attn_out
            if record_attention:
                for head in range(self.cfg.heads):
                    records.append(AttentionRecord(layer, head, probs[:, head]))
            n_before = x.shape[1]
            x = hooks.post_attention(layer, x, keys_mean, protected)
            if x.shape[1] > n_before or x.shape[2] != tokens.x.shape[2]:
                raise RuntimeError("post_attention hook returned inconsistent tokens")
            x = x + block.mlp(x)
        feat = layer_norm(x[:, 0, :], self.lnf_g.tensor, self.lnf_b.tensor)
        if not head:
            return None, records, feat
        logits = matmul(feat, self.w_head.tensor) + self.b_head.tensor
        return logits, records, feat

    def query_feature(self, images: np.ndarray) -> np.ndarray:
        """Clean, promptless, gradient-free CLS feature (the query vector).

        The classifier head is not evaluated: queries are features, not
        predictions, and this keeps the query cost independent of however
        many classes the head happens to have."""
        with no_grad():
            _, _, feat = self.forward_tokens(self.embed(images), head=False)
        return feat.data
