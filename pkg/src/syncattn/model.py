"""OSN and baseline pre-norm Transformer blocks."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator

import numpy as np

from . import engine as E
from . import ssa
from .engine import SeededRng, Tensor

INIT_STD = 0.02
ALPHA_INIT = 0.1
K_INIT = 5.0


class BlockKind(str, Enum):
    OSN = "osn"
    TRANSFORMER = "transformer"


@dataclass(frozen=True)
class BlockConfig:
    D: int = 512
    H: int = 8
    ffn_mult: int = 4
    dropout_p: float = 0.1
    block_kind: BlockKind = BlockKind.OSN
    sparsity_k: int | None = None
    causal: bool = False
    positional_encoding: bool = False  # baseline only; parameter-free

    def __post_init__(self):
        object.__setattr__(self, "block_kind", BlockKind(self.block_kind))
        ssa.check_heads(self.D, self.H)
        if not 0.0 <= self.dropout_p < 1.0:
            raise ssa.ConfigError("dropout_p must lie in [0, 1)")
        if self.ffn_mult < 1:
            raise ssa.ConfigError("ffn_mult must be >= 1")
        if self.sparsity_k is not None and self.sparsity_k < 1:
            raise ssa.ConfigError("sparsity_k must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.D // self.H

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_kind"] = self.block_kind.value
        return d


def param_shapes(config: BlockConfig) -> dict[str, tuple[int, ...]]:
    D, F = config.D, config.ffn_mult * config.D
    proj = ("omega", "theta", "V", "O") if config.block_kind is BlockKind.OSN else ("Q", "K", "V", "O")
    shapes: dict[str, tuple[int, ...]] = {}
    for name in proj:
        shapes[f"attn.W_{name}"] = (D, D)
        shapes[f"attn.b_{name}"] = (D,)
    if config.block_kind is BlockKind.OSN:
        shapes["attn.alpha_hat"] = (config.H,)
        shapes["attn.k_hat"] = ()
    shapes.update({
        "ln1.scale": (D,), "ln1.shift": (D,),
        "ffn.W1": (D, F), "ffn.b1": (F,),
        "ffn.W2": (F, D), "ffn.b2": (D,),
        "ln2.scale": (D,), "ln2.shift": (D,),
    })
    return shapes


@dataclass
class BlockParams:
    config: BlockConfig
    tensors: dict[str, Tensor]
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def group(self, prefix: str) -> dict[str, Tensor]:
        pre = prefix + "."
        return {k[len(pre):]: v for k, v in self.tensors.items() if k.startswith(pre)}

    def replace(self, **updates: Tensor) -> "BlockParams":
        t = dict(self.tensors)
        t.update(updates)
        return BlockParams(self.config, t, self.seed, dict(self.meta))

    def with_tensors(self, tensors: dict[str, Tensor]) -> "BlockParams":
        return BlockParams(self.config, dict(tensors), self.seed, dict(self.meta))


def init_params(config: BlockConfig, rng: SeededRng | int) -> BlockParams:
    """Weights ~ N(0, 0.02^2), biases 0, LayerNorm (1, 0).

    The bandwidth and coupling pre-activations start at softplus^-1 of 0.1
    and 5.0. Draw order follows ``param_shapes`` so a seed fixes everything.
    """
    if isinstance(rng, int):
        rng = SeededRng(rng)
    seed = rng.seed
    tensors: dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        leaf = name.split(".")[1]
        if leaf.startswith("W"):
            arr = rng.normal(int(np.prod(shape)), 0.0, INIT_STD).reshape(shape)
        elif leaf == "scale":
            arr = np.ones(shape)
        elif leaf == "alpha_hat":
            arr = np.full(shape, E.inverse_softplus(ALPHA_INIT))
        elif leaf == "k_hat":
            arr = np.array(E.inverse_softplus(K_INIT))
        else:
            arr = np.zeros(shape)
        tensors[name] = Tensor(arr, label="param")
    return BlockParams(config, tensors, seed, {"init_std": INIT_STD, "rng": rng.algorithm})


def base_param_count(D: int, ffn_mult: int = 4) -> int:
    F = ffn_mult * D
    return 4 * (D * D + D) + (D * F + F) + (F * D + D) + 2 * 2 * D


def count_params(params: BlockParams | BlockConfig) -> int:
    if isinstance(params, BlockConfig):
        return sum(int(np.prod(s)) for s in param_shapes(params).values())
    return sum(t.size for t in params.tensors.values())


# ---------------------------------------------------------------------------
# sublayers

def layer_norm(x, scale, shift) -> Tensor:
    return E.layer_norm(x, scale, shift, eps=E.ops.LN_EPS)


def ffn(x, p: dict[str, Tensor]) -> Tensor:
    """linear -> exact GELU -> linear."""
    return E.linear_apply(E.gelu(E.linear_apply(x, p["W1"], p["b1"])), p["W2"], p["b2"])


def sinusoidal_encoding(n: int, dim: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def multi_head_attention(x, p: dict[str, Tensor], heads: int, causal: bool = False
                         ) -> tuple[Tensor, Tensor]:
    """softmax(Q K^T / sqrt(d)) V per head; returns (output, attention weights)."""
    d = ssa.check_heads(x.shape[-1], heads)
    q = ssa._split_heads(E.linear_apply(x, p["W_Q"], p["b_Q"]), heads)
    k = ssa._split_heads(E.linear_apply(x, p["W_K"], p["b_K"]), heads)
    v = ssa._split_heads(E.linear_apply(x, p["W_V"], p["b_V"]), heads)
    nd = k.ndim
    kt = E.transpose(k, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    scores = E.tag(E.mul(E.matmul(q, kt), 1.0 / math.sqrt(d)), "scores")
    if causal:
        n = scores.shape[-1]
        scores = E.where(np.tril(np.ones((n, n), dtype=bool)), scores, -1e30)
    attn = E.tag(E.softmax(scores), "attn")
    y = ssa._merge_heads(E.matmul(attn, v))
    return E.linear_apply(y, p["W_O"], p["b_O"]), attn


def _dropout(x, config: BlockConfig, training: bool, seed: int, call_index: int, site: int):
    if not training or config.dropout_p == 0.0:
        return x
    rng = SeededRng(E.derive_seed(seed, call_index, site))
    return E.dropout(x, config.dropout_p, rng, training=True)


def _check_mode(mode: str) -> bool:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == "train"


def osn_block_forward(x, params: BlockParams, mode: str = "eval", *, seed: int = 0,
                      call_index: int = 0, return_artifacts: bool = False):
    """z = x + Dropout(MFSH(LN(x))); y = z + Dropout(FFN(LN(z)))."""
    training = _check_mode(mode)
    cfg = params.config
    x = E.as_tensor(x)
    h = layer_norm(x, params["ln1.scale"], params["ln1.shift"])
    a, art = ssa.mfsh_forward(h, params.group("attn"), cfg.H, k=cfg.sparsity_k, causal=cfg.causal)
    del h
    z = E.add(x, _dropout(a, cfg, training, seed, call_index, 1))
    del a
    f = ffn(layer_norm(z, params["ln2.scale"], params["ln2.shift"]), params.group("ffn"))
    y = E.add(z, _dropout(f, cfg, training, seed, call_index, 2))
    return (y, art) if return_artifacts else y


def transformer_block_forward(x, params: BlockParams, mode: str = "eval", *, seed: int = 0,
                              call_index: int = 0, return_attention: bool = False):
    """Baseline pre-norm block with softmax attention; optional sinusoidal PE at input."""
    training = _check_mode(mode)
    cfg = params.config
    x = E.as_tensor(x)
    if cfg.positional_encoding:
        x = E.add(x, E.constant(sinusoidal_encoding(x.shape[-2], x.shape[-1]), "pos_enc"))
    h = layer_norm(x, params["ln1.scale"], params["ln1.shift"])
    a, attn = multi_head_attention(h, params.group("attn"), cfg.H, cfg.causal)
    del h
    z = E.add(x, _dropout(a, cfg, training, seed, call_index, 1))
    del a
    f = ffn(layer_norm(z, params["ln2.scale"], params["ln2.shift"]), params.group("ffn"))
    y = E.add(z, _dropout(f, cfg, training, seed, call_index, 2))
    return (y, attn) if return_attention else y


def block_forward(x, params: BlockParams, mode: str = "eval", **kw) -> Tensor:
    if params.config.block_kind is BlockKind.OSN:
        return osn_block_forward(x, params, mode, **kw)
    return transformer_block_forward(x, params, mode, **kw)


# ---------------------------------------------------------------------------
# checkpoint: <stem>.bin holds float64 little-endian values back to back in
# manifest order; <stem>.json maps name -> {"shape", "data_offset"} with the
# offset counted in elements, plus the block config.

def save_params(params: BlockParams | dict[str, Tensor], stem: str | Path,
                config: BlockConfig | None = None) -> tuple[Path, Path]:
    stem = Path(stem)
    tensors = params.tensors if isinstance(params, BlockParams) else params
    if isinstance(params, BlockParams):
        config = params.config
    manifest: dict = {"format": "float64-le", "tensors": {}}
    if config is not None:
        manifest["config"] = config.to_dict()
    offset = 0
    chunks = []
    for name, t in tensors.items():
        manifest["tensors"][name] = {"shape": list(t.shape), "data_offset": offset}
        offset += t.size
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").reshape(-1))
    bin_path, json_path = stem.with_suffix(".bin"), stem.with_suffix(".json")
    np.concatenate(chunks).tofile(bin_path) if chunks else bin_path.write_bytes(b"")
    json_path.write_text(json.dumps(manifest, indent=2))
    return bin_path, json_path


def load_params(stem: str | Path) -> tuple[dict[str, Tensor], BlockConfig | None]:
    stem = Path(stem)
    manifest = json.loads(stem.with_suffix(".json").read_text())
    flat = np.fromfile(stem.with_suffix(".bin"), dtype="<f8")
    tensors = {}
    for name, entry in manifest["tensors"].items():
        shape = tuple(entry["shape"])
        n = int(np.prod(shape))
        off = entry["data_offset"]
        tensors[name] = Tensor(flat[off:off + n].reshape(shape))
    cfg = BlockConfig(**manifest["config"]) if "config" in manifest else None
    return tensors, cfg
