"""Full recommender: compositional embedding -> twin encoder -> FFN -> ranking.

The readout takes the last valid position of the encoder output, maps it
through a point-wise feed-forward network and a ``(D, |V|)`` output layer,
and produces a probability distribution over the whole item set. Variants
swap individual components for ablation:

  full        the complete model
  full_emb    a single uncompressed base table (N=1, m1=|V|)
  wo_dynamic  base embeddings summed without attention weights
  plain_attn  convolution heads replaced by extra attention heads
"""

from __future__ import annotations

import io
import json
import math
import zlib
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff
from .autodiff import Tensor, concat
from . import embedding as emb
from .encoder import AttnHead, ConvHead, PositionTable, twin_forward
from .embedding import EmbeddingParams, PAD_ITEM

VARIANTS = ("full", "full_emb", "wo_dynamic", "plain_attn")

CHECKPOINT_MAGIC = "TWINREC-CKPT-1"


@dataclass
class ModelConfig:
    vocab_size: int
    n_contexts: int
    dim: int = 128
    kernel_size: int = 5
    n_heads: int = 2
    n_layers: int = 1
    max_len: int = 50
    n_tables: int = 2
    m1: int = 2
    variant: str = "full"

    def table_sizes(self):
        """Base table sizes: N-1 tables of m1 rows, the last sized to cover |V|."""
        if self.variant == "full_emb":
            return [self.vocab_size]
        if self.n_tables == 1:
            return [self.vocab_size]
        head = [self.m1] * (self.n_tables - 1)
        rest = math.ceil(self.vocab_size / math.prod(head))
        return head + [rest]


def _init_matrix(rng, shape, dim):
    bound = 1.0 / math.sqrt(dim)
    return rng.uniform(-bound, bound, size=shape)


class SequentialRecommender:
    """Trainable next-item model; parameters live in a stable, named dict."""

    def __init__(self, config, seed=0):
        if config.variant not in VARIANTS:
            raise ValueError(f"unknown variant {config.variant!r}")
        if config.kernel_size % 2 == 0:
            raise ValueError("kernel size must be odd")
        self.config = config
        self.seed = seed
        self.params = {}
        d = config.dim
        sizes = config.table_sizes()
        emb.check_capacity(config.vocab_size, sizes)

        def new_param(name, shape, zero=False):
            # Each tensor draws from its own name-keyed stream so variants
            # sharing a parameter name initialise identically.
            if zero:
                data = np.zeros(shape)
            else:
                rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
                data = _init_matrix(rng, shape, d)
            t = Tensor(data, requires_grad=True)
            self.params[name] = t
            return t

        tables = [new_param(f"emb.table{n}", (m, d)) for n, m in enumerate(sizes)]
        context_table = new_param("emb.context", (config.n_contexts, d))
        dynamic = config.variant != "wo_dynamic"
        w_att = new_param("fusion.w_att", (d, d)) if dynamic else None
        w_mix = new_param("fusion.w_mix", (2 * d, d))
        b_mix = new_param("fusion.b_mix", (d,), zero=True)
        self.embedding = EmbeddingParams(tables, sizes, config.vocab_size,
                                         context_table, w_att, w_mix, b_mix)
        self.dynamic_fusion = dynamic

        n_conv = 0 if config.variant == "plain_attn" else config.n_heads
        n_attn = 2 * config.n_heads - n_conv
        width = (n_conv + n_attn) * d
        self.layers = []
        for l in range(config.n_layers):
            conv_heads = [ConvHead(new_param(f"enc{l}.conv{h}.kernel", (config.kernel_size, d)))
                          for h in range(n_conv)]
            attn_heads = [AttnHead(new_param(f"enc{l}.attn{h}.wq", (d, d)),
                                   new_param(f"enc{l}.attn{h}.wk", (d, d)),
                                   new_param(f"enc{l}.attn{h}.wv", (d, d)))
                          for h in range(n_attn)]
            positions = PositionTable(new_param(f"enc{l}.pos", (config.max_len, d)))
            ffn = (new_param(f"enc{l}.ffn.w1", (width, width)),
                   new_param(f"enc{l}.ffn.b1", (width,), zero=True),
                   new_param(f"enc{l}.ffn.w2", (width, d)),
                   new_param(f"enc{l}.ffn.b2", (d,), zero=True))
            self.layers.append((conv_heads, attn_heads, positions, ffn))

        new_param("out.w", (d, config.vocab_size))
        new_param("out.b", (config.vocab_size,), zero=True)

    # -- forward --------------------------------------------------------

    def forward(self, items, ctx_indices):
        """Run the full pipeline for one sequence.

        Returns a dict with the final-position logits (1, |V|), the encoder
        hidden states and the per-layer, per-head attention weights.
        """
        items = np.asarray(items, dtype=np.int64)
        if items.size == 0:
            raise ValueError("empty sequence")
        if items.size > self.config.max_len:
            raise ValueError(f"sequence length {items.size} exceeds max_len {self.config.max_len}")
        valid = items != PAD_ITEM
        if not valid.any():
            raise ValueError("sequence contains only padding")
        h, alphas = emb.embed_sequence(items, ctx_indices, self.embedding,
                                       dynamic=self.dynamic_fusion)
        mask = None if valid.all() else valid
        attention = []
        for conv_heads, attn_heads, positions, (w1, b1, w2, b2) in self.layers:
            twin, weights = twin_forward(h, conv_heads, attn_heads, positions, mask)
            h = (twin @ w1 + b1).gelu() @ w2 + b2
            attention.append(weights)
        last = int(np.max(np.nonzero(valid)[0]))
        z = h[last:last + 1]
        logits = z @ self.params["out.w"] + self.params["out.b"]
        return {"logits": logits, "hidden": h, "attention": attention, "alphas": alphas}

    def forward_scores(self, items, ctx_indices):
        """Probability distribution over all items for the next step."""
        return self.forward(items, ctx_indices)["logits"].softmax(axis=1)

    def log_scores(self, items, ctx_indices):
        return self.forward(items, ctx_indices)["logits"].log_softmax(axis=1)

    def predict_topk(self, items, ctx_indices, k):
        """Top-k item indices by score, ties broken by ascending index."""
        v = self.config.vocab_size
        if not 1 <= k <= v:
            raise ValueError(f"k={k} outside 1..{v}")
        scores = self.forward_scores(items, ctx_indices).data[0]
        order = np.lexsort((np.arange(v), -scores))
        return order[:k].tolist()

    # -- loss -----------------------------------------------------------

    def training_loss(self, batch, lam):
        """Mean cross-entropy over the batch plus lam * sum of squared parameters."""
        terms = []
        for items, ctx_indices, target in batch:
            if not 0 <= target < self.config.vocab_size:
                raise ValueError(f"target {target} outside item range")
            lp = self.log_scores(items, ctx_indices)
            terms.append(lp[:, target:target + 1])
        loss = concat(terms, axis=1).sum() * (-1.0 / len(terms))
        if lam:
            loss = loss + lam * l2_penalty(self.params)
        return loss

    # -- accounting -----------------------------------------------------

    def count_parameters(self):
        """Exact per-component value counts from the parameter registry."""
        buckets = {"embedding": 0, "context": 0, "fusion": 0, "encoder": 0,
                   "positional": 0, "ffn": 0, "output": 0}
        for name, p in self.params.items():
            if name.startswith("emb.table"):
                key = "embedding"
            elif name == "emb.context":
                key = "context"
            elif name.startswith("fusion."):
                key = "fusion"
            elif ".conv" in name or ".attn" in name:
                key = "encoder"
            elif name.endswith(".pos"):
                key = "positional"
            elif ".ffn." in name:
                key = "ffn"
            else:
                key = "output"
            buckets[key] += p.data.size
        buckets["total"] = sum(buckets.values())
        full_table = self.config.dim * self.config.vocab_size
        buckets["embedding_compression_ratio"] = buckets["embedding"] / full_table
        return buckets

    # -- persistence ----------------------------------------------------

    def save(self, path):
        """Write config + manifest + raw little-endian payload."""
        manifest = []
        payload = io.BytesIO()
        for name, p in self.params.items():
            raw = np.ascontiguousarray(p.data, dtype="<f8" if p.data.dtype == np.float64 else "<f4")
            manifest.append({"name": name,
                             "dtype": str(raw.dtype),
                             "shape": list(raw.shape),
                             "offset": payload.tell()})
            payload.write(raw.tobytes())
        header = {"magic": CHECKPOINT_MAGIC,
                  "config": asdict(self.config),
                  "seed": self.seed,
                  "tensors": manifest}
        with open(path, "wb") as f:
            f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
            f.write(b"\n")
            f.write(payload.getvalue())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            header = json.loads(f.readline().decode("utf-8"))
            if header.get("magic") != CHECKPOINT_MAGIC:
                raise ValueError(f"{path}: not a checkpoint file")
            payload = f.read()
        model = cls(ModelConfig(**header["config"]), seed=header["seed"])
        for entry in header["tensors"]:
            dtype = np.dtype(entry["dtype"])
            count = math.prod(entry["shape"]) if entry["shape"] else 1
            arr = np.frombuffer(payload, dtype=dtype, count=count,
                                offset=entry["offset"]).reshape(entry["shape"])
            model.params[entry["name"]].data = arr.astype(autodiff.current_dtype())
        return model

    def state_snapshot(self):
        return {name: np.array(p.data, copy=True) for name, p in self.params.items()}

    def load_snapshot(self, snapshot):
        for name, p in self.params.items():
            p.data = np.array(snapshot[name], copy=True)


def l2_penalty(params):
    """Sum of squared values over every trainable tensor."""
    total = None
    for p in params.values():
        term = (p * p).sum()
        total = term if total is None else total + term
    return total


def build_variant(kind, config, seed=0):
    """Construct a model variant; embedding/encoder init is shared by name."""
    if kind not in VARIANTS:
        raise ValueError(f"unknown variant {kind!r}; expected one of {VARIANTS}")
    cfg_args = asdict(config)
    cfg_args["variant"] = kind
    return SequentialRecommender(ModelConfig(**cfg_args), seed=seed)
