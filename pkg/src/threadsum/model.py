"""Hierarchical summarization model over conversation trees.

Three pre-LN transformer stacks share one token embedding table:

* a token encoder run over every utterance (padded into one batch),
* an utterance encoder whose self-attention scores carry learned
  thread-relation embeddings (same-path depth deltas or an off-path
  bucket), and
* a decoder whose cross-attention memory is the token-level encoder
  output plus its utterance's thread-aware vector broadcast over the
  utterance's tokens, so token detail and thread context both reach
  generation.

The output projection is the transpose of the embedding table (weight
tying).  All forwards are pure functions of (parameters, inputs, rng).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import truncnorm

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .conversation import ConversationTree, num_relation_buckets, relation_index
from .corpus import TrainingInstance
from .tokenizer import Tokenizer, tokenize_utterance

__all__ = [
    "ModelConfig",
    "paper_config",
    "toy_config",
    "Model",
    "ModelInput",
    "ForwardResult",
    "sinusoidal_pe",
    "count_parameters",
    "encode_instance",
]


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 6
    num_heads: int = 12
    d_hidden: int = 768
    d_ff: int = 3072
    vocab_size: int = 50265
    clip_k: int = 9
    dropout: float = 0.1
    max_utterances: int = 124
    max_utterance_tokens: int = 200
    max_summary_tokens: int = 256
    # behavior flags (see module docs)
    decoder_memory: str = "token_residual"  # or "utterance"
    thread_pred_source: str = "token_bos"  # or "utterance_enc"
    thread_pred_reduction: str = "sum"  # or "mean"
    lambda_thread_pred: float = 1.0
    per_layer_thread_embeddings: bool = False

    def __post_init__(self):
        if self.d_hidden % self.num_heads != 0:
            raise ValueError(f"d_hidden {self.d_hidden} not divisible by num_heads {self.num_heads}")
        if self.decoder_memory not in ("token_residual", "utterance"):
            raise ValueError(f"unknown decoder_memory mode {self.decoder_memory!r}")
        if self.thread_pred_source not in ("token_bos", "utterance_enc"):
            raise ValueError(f"unknown thread_pred_source {self.thread_pred_source!r}")
        if self.thread_pred_reduction not in ("sum", "mean"):
            raise ValueError(f"unknown thread_pred_reduction {self.thread_pred_reduction!r}")

    @property
    def d_head(self) -> int:
        return self.d_hidden // self.num_heads

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def paper_config() -> ModelConfig:
    return ModelConfig()


def toy_config(**overrides) -> ModelConfig:
    base = dict(num_layers=2, num_heads=2, d_hidden=16, d_ff=32, vocab_size=50,
                clip_k=3, dropout=0.0, max_utterances=16,
                max_utterance_tokens=16, max_summary_tokens=16)
    base.update(overrides)
    return ModelConfig(**base)


def thread_attention_scores(q: Tensor, k: Tensor, rel_table, rel_buckets: np.ndarray,
                            d_head: int) -> Tensor:
    """Attention scores with thread-relation terms, pre-softmax.

    Implements ((q_i + r_ij)(k_j + r_ij)^T - r_ij r_ij^T) / sqrt(d_head)
    through its expansion (q_i k_j + q_i r_ij + k_j r_ij) / sqrt(d_head):
    both relation dot-product terms are table projections gathered per pair,
    so the cost stays O(n^2 d + n B d) instead of materializing r_ij.
    """
    scores = ad.matmul(q, ad.transpose(k))
    proj_q = ad.matmul(q, ad.transpose(rel_table))  # [..., n, buckets]
    proj_k = ad.matmul(k, ad.transpose(rel_table))
    term_q = ad.take_per_row(proj_q, rel_buckets)
    term_k = ad.transpose(ad.take_per_row(proj_k, rel_buckets.T))
    return ad.scale(ad.add(ad.add(scores, term_q), term_k), 1.0 / math.sqrt(d_head))


_PE_CACHE: Dict[Tuple[int, int], np.ndarray] = {}


def sinusoidal_pe(length: int, d_hidden: int) -> np.ndarray:
    """Fixed sine/cosine position table [length, d_hidden] (cached)."""
    if length < 1:
        raise ValueError("length must be >= 1")
    key = (length, d_hidden)
    cached = _PE_CACHE.get(key)
    if cached is not None:
        return cached
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(0, d_hidden, 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, i / d_hidden)
    pe = np.zeros((length, d_hidden), dtype=np.float64)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles[:, : d_hidden // 2])
    _PE_CACHE[key] = pe
    return pe


# ---------------------------------------------------------------------------
# parameters


def _layer_names(prefix: str, attn_blocks: Sequence[str]) -> List[Tuple[str, str]]:
    names = []
    ln = 1
    for blk in attn_blocks:
        names.append((f"{prefix}ln{ln}.g", "ln_g"))
        names.append((f"{prefix}ln{ln}.b", "ln_b"))
        ln += 1
        for wn in ("wq", "wk", "wv", "wo"):
            names.append((f"{prefix}{blk}.{wn}", "square"))
            names.append((f"{prefix}{blk}.b{wn[1]}", "bias_d"))
    names.append((f"{prefix}ln{ln}.g", "ln_g"))
    names.append((f"{prefix}ln{ln}.b", "ln_b"))
    names.append((f"{prefix}ff.w1", "ff1"))
    names.append((f"{prefix}ff.b1", "bias_ff"))
    names.append((f"{prefix}ff.w2", "ff2"))
    names.append((f"{prefix}ff.b2", "bias_d"))
    return names


def _stack_names(stack: str, n_layers: int, attn_blocks: Sequence[str]) -> List[Tuple[str, str]]:
    names = []
    for layer in range(n_layers):
        names.extend(_layer_names(f"{stack}.{layer}.", attn_blocks))
    names.append((f"{stack}.final_ln.g", "ln_g"))
    names.append((f"{stack}.final_ln.b", "ln_b"))
    return names


def _parameter_spec(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...], str]]:
    """Every parameter's (name, shape, init kind), in a fixed order."""
    d, ff, v = config.d_hidden, config.d_ff, config.vocab_size
    shapes = {
        "square": (d, d), "bias_d": (d,), "ln_g": (d,), "ln_b": (d,),
        "ff1": (d, ff), "bias_ff": (ff,), "ff2": (ff, d),
    }
    spec: List[Tuple[str, Tuple[int, ...], str]] = [("embed.tokens", (v, d), "normal")]
    buckets = num_relation_buckets(config.clip_k)
    if config.per_layer_thread_embeddings:
        for layer in range(config.num_layers):
            spec.append((f"utt.{layer}.attn.rel", (buckets, config.d_head), "normal"))
    else:
        spec.append(("thread.rel", (buckets, config.d_head), "normal"))
    for name, kind in _stack_names("tok", config.num_layers, ("attn",)):
        spec.append((name, shapes[kind], kind))
    for name, kind in _stack_names("utt", config.num_layers, ("attn",)):
        spec.append((name, shapes[kind], kind))
    for name, kind in _stack_names("dec", config.num_layers, ("self", "cross")):
        spec.append((name, shapes[kind], kind))
    spec.append(("tp.wa", (d, d), "normal"))
    spec.append(("tp.wb", (d, d), "normal"))
    return spec


def count_parameters(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in _parameter_spec(config))


def init_parameters(config: ModelConfig, seed: int) -> Dict[str, Parameter]:
    """Truncated-normal (sigma 0.02, cut at 2 sigma) weights, unit/zero norms."""
    rng = np.random.default_rng(seed)
    params: Dict[str, Parameter] = {}
    for name, shape, kind in _parameter_spec(config):
        if kind == "ln_g":
            data = np.ones(shape)
            decay = False
        elif kind in ("ln_b", "bias_d", "bias_ff"):
            data = np.zeros(shape)
            decay = False
        else:
            data = truncnorm.rvs(-2.0, 2.0, scale=0.02, size=shape, random_state=rng)
            decay = True
        params[name] = Parameter(name, data, decay=decay)
    return params


# ---------------------------------------------------------------------------
# inputs


@dataclass
class ModelInput:
    token_ids: List[List[int]]  # per utterance, bos-prefixed
    relation_buckets: np.ndarray  # [n, n] bucket index per utterance pair
    ancestors: np.ndarray  # [n, n] bool; [i, j] = j is a strict ancestor of i
    summary_input: np.ndarray  # decoder input ids, starts with bos
    summary_target: np.ndarray  # next-token targets, ends with eos
    meta: dict = field(default_factory=dict)

    @property
    def num_utterances(self) -> int:
        return len(self.token_ids)


@dataclass
class ForwardResult:
    logits: Tensor  # [S, V]
    token_bos: Tensor  # [n, d] token-encoder output at each utterance's bos
    utterance_states: Tensor  # [n, d] thread-aware encoder output
    memory: Tensor  # decoder cross-attention memory


def encode_instance(config: ModelConfig, tok: Tokenizer, instance: TrainingInstance) -> ModelInput:
    """Tokenize a training instance and precompute its discrete structure."""
    tree = instance.tree
    token_ids = [tokenize_utterance(tok, u.text, config.max_utterance_tokens) for u in tree]
    content = tok.encode(instance.pseudo_summary)[: config.max_summary_tokens - 2]
    full = [tok.bos_id] + content + [tok.eos_id]
    return ModelInput(
        token_ids=token_ids,
        relation_buckets=relation_index(tree, config.clip_k),
        ancestors=tree.ancestor_matrix(),
        summary_input=np.asarray(full[:-1], dtype=np.int64),
        summary_target=np.asarray(full[1:], dtype=np.int64),
        meta=dict(instance.source_meta),
    )


# ---------------------------------------------------------------------------
# model


class Model:
    def __init__(self, config: ModelConfig, params: Dict[str, Parameter]):
        expected = {name for name, _, _ in _parameter_spec(config)}
        if set(params) != expected:
            missing = expected - set(params)
            extra = set(params) - expected
            raise ValueError(f"parameter set mismatch (missing {sorted(missing)}, extra {sorted(extra)})")
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "Model":
        return cls(config, init_parameters(config, seed))

    def parameters(self) -> List[Parameter]:
        return [self.params[name] for name, _, _ in _parameter_spec(self.config)]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # -- shared blocks ------------------------------------------------------

    def _split_heads(self, x: Tensor, lead: Tuple[int, ...]) -> Tensor:
        h, dz = self.config.num_heads, self.config.d_head
        x = ad.reshape(x, lead + (-1, h, dz))
        axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return ad.permute(x, axes)  # [..., h, T, dz]

    def _merge_heads(self, x: Tensor, lead: Tuple[int, ...]) -> Tensor:
        n = len(lead)
        axes = tuple(range(n)) + (n + 1, n, n + 2)
        x = ad.permute(x, axes)  # [..., T, h, dz]
        return ad.reshape(x, lead + (x.shape[-3], self.config.d_hidden))

    def _proj(self, x: Tensor, prefix: str, which: str) -> Tensor:
        p = self.params
        return ad.linear(x, p[f"{prefix}.w{which}"], p[f"{prefix}.b{which}"])

    def _attention(self, prefix: str, x_q: Tensor, x_kv: Tensor,
                   mask_add: Optional[np.ndarray], rel_buckets: Optional[np.ndarray],
                   rel_table: Optional[Parameter], rng, training: bool) -> Tensor:
        """Multi-head attention; optional additive mask and thread relations."""
        cfg = self.config
        lead = x_q.shape[:-2]
        q = self._split_heads(self._proj(x_q, prefix, "q"), lead)
        k = self._split_heads(self._proj(x_kv, prefix, "k"), lead)
        v = self._split_heads(self._proj(x_kv, prefix, "v"), lead)
        if rel_buckets is not None:
            scores = thread_attention_scores(q, k, rel_table, rel_buckets, cfg.d_head)
        else:
            scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(cfg.d_head))
        if mask_add is not None:
            scores = ad.add(scores, Tensor(mask_add))
        att = ad.softmax(scores, axis=-1)
        att = ad.dropout(att, cfg.dropout, rng, training)
        ctx = self._merge_heads(ad.matmul(att, v), lead)
        return self._proj(ctx, prefix, "o")

    def _layer_norm(self, x: Tensor, name: str) -> Tensor:
        return ad.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _feed_forward(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        hidden = ad.gelu(ad.linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
        return ad.linear(hidden, p[f"{prefix}.w2"], p[f"{prefix}.b2"])

    def _sublayer(self, x: Tensor, out: Tensor, rng, training: bool) -> Tensor:
        return ad.add(x, ad.dropout(out, self.config.dropout, rng, training))

    # -- encoder stacks -----------------------------------------------------

    def token_encode(self, token_ids: List[List[int]], rng=None, training: bool = False) -> Tuple[Tensor, np.ndarray]:
        """Run the token encoder over all utterances as one padded batch.

        Returns ([n, T_max, d] states, lengths).  Padded positions produce
        values but are masked out of attention and never read downstream.
        """
        cfg = self.config
        lengths = np.array([len(ids) for ids in token_ids], dtype=np.int64)
        if lengths.min() < 1 or lengths.max() > cfg.max_utterance_tokens:
            raise ValueError("utterance token sequences must have 1..max_utterance_tokens ids")
        n, t_max = len(token_ids), int(lengths.max())
        ids = np.zeros((n, t_max), dtype=np.int64)
        for i, seq in enumerate(token_ids):
            if max(seq) >= cfg.vocab_size:
                raise IndexError(f"token id out of vocabulary of size {cfg.vocab_size}")
            ids[i, : len(seq)] = seq
        pad = np.arange(t_max)[None, :] >= lengths[:, None]
        mask_add = np.where(pad, -1e9, 0.0)[:, None, None, :]  # [n,1,1,T]

        x = ad.take_rows(self.params["embed.tokens"], ids)
        x = ad.add(x, Tensor(sinusoidal_pe(t_max, cfg.d_hidden)))
        x = ad.dropout(x, cfg.dropout, rng, training)
        for layer in range(cfg.num_layers):
            pre = f"tok.{layer}"
            normed = self._layer_norm(x, f"{pre}.ln1")
            a = self._attention(f"{pre}.attn", normed, normed, mask_add, None, None, rng, training)
            x = self._sublayer(x, a, rng, training)
            f = self._feed_forward(self._layer_norm(x, f"{pre}.ln2"), f"{pre}.ff")
            x = self._sublayer(x, f, rng, training)
        return self._layer_norm(x, "tok.final_ln"), lengths

    def utterance_representations(self, token_states: Tensor) -> Tensor:
        """Per-utterance vectors: bos output + position-in-conversation PE."""
        n = token_states.shape[0]
        bos = token_states[:, 0, :]
        return ad.add(bos, Tensor(sinusoidal_pe(n, self.config.d_hidden)))

    def utterance_encode(self, utt_repr: Tensor, relation_buckets: np.ndarray,
                         rng=None, training: bool = False) -> Tensor:
        cfg = self.config
        x = utt_repr
        for layer in range(cfg.num_layers):
            pre = f"utt.{layer}"
            rel_name = f"{pre}.attn.rel" if cfg.per_layer_thread_embeddings else "thread.rel"
            normed = self._layer_norm(x, f"{pre}.ln1")
            a = self._attention(f"{pre}.attn", normed, normed, None,
                                relation_buckets, self.params[rel_name], rng, training)
            x = self._sublayer(x, a, rng, training)
            f = self._feed_forward(self._layer_norm(x, f"{pre}.ln2"), f"{pre}.ff")
            x = self._sublayer(x, f, rng, training)
        return self._layer_norm(x, "utt.final_ln")

    def build_decoder_memory(self, token_states: Tensor, lengths: np.ndarray,
                             utt_states: Tensor, utt_repr: Tensor) -> Tensor:
        """Cross-attention memory; see module docstring for the residual."""
        if self.config.decoder_memory == "utterance":
            return ad.add(utt_states, utt_repr)
        n, t_max = token_states.shape[0], token_states.shape[1]
        combined = ad.add(token_states, ad.reshape(utt_states, (n, 1, self.config.d_hidden)))
        flat = ad.reshape(combined, (n * t_max, self.config.d_hidden))
        valid = np.concatenate([i * t_max + np.arange(l) for i, l in enumerate(lengths)])
        return ad.take_rows(flat, valid)

    def decoder_forward(self, summary_input: np.ndarray, memory: Tensor,
                        rng=None, training: bool = False) -> Tensor:
        cfg = self.config
        s = len(summary_input)
        if s > cfg.max_summary_tokens:
            raise ValueError(f"summary length {s} exceeds max {cfg.max_summary_tokens}")
        if summary_input.max() >= cfg.vocab_size:
            raise IndexError(f"token id out of vocabulary of size {cfg.vocab_size}")
        causal = np.triu(np.full((s, s), -1e9), k=1)

        x = ad.take_rows(self.params["embed.tokens"], summary_input)
        x = ad.add(x, Tensor(sinusoidal_pe(s, cfg.d_hidden)))
        x = ad.dropout(x, cfg.dropout, rng, training)
        for layer in range(cfg.num_layers):
            pre = f"dec.{layer}"
            normed = self._layer_norm(x, f"{pre}.ln1")
            a = self._attention(f"{pre}.self", normed, normed, causal, None, None, rng, training)
            x = self._sublayer(x, a, rng, training)
            c = self._attention(f"{pre}.cross", self._layer_norm(x, f"{pre}.ln2"),
                                memory, None, None, None, rng, training)
            x = self._sublayer(x, c, rng, training)
            f = self._feed_forward(self._layer_norm(x, f"{pre}.ln3"), f"{pre}.ff")
            x = self._sublayer(x, f, rng, training)
        x = self._layer_norm(x, "dec.final_ln")
        return ad.matmul(x, ad.transpose(self.params["embed.tokens"]))

    # -- full passes ----------------------------------------------------------

    def encode_conversation(self, mi: ModelInput, rng=None, training: bool = False):
        token_states, lengths = self.token_encode(mi.token_ids, rng, training)
        utt_repr = self.utterance_representations(token_states)
        utt_states = self.utterance_encode(utt_repr, mi.relation_buckets, rng, training)
        memory = self.build_decoder_memory(token_states, lengths, utt_states, utt_repr)
        token_bos = token_states[:, 0, :]
        return token_bos, utt_states, memory

    def forward(self, mi: ModelInput, rng=None, training: bool = False) -> ForwardResult:
        token_bos, utt_states, memory = self.encode_conversation(mi, rng, training)
        logits = self.decoder_forward(mi.summary_input, memory, rng, training)
        return ForwardResult(logits=logits, token_bos=token_bos,
                             utterance_states=utt_states, memory=memory)
