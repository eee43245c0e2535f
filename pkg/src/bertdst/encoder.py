"""Functional post-LN Transformer encoder over an explicit parameter dict.

Parameters live in :class:`ModelParams` (config + ordered name->tensor map),
which keeps checkpointing, counting and gradient checks straightforward.
Gradients come from torch autograd.
"""

from __future__ import annotations

import hashlib
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple, Sequence

import torch
import torch.nn.functional as F

from .errors import IdOutOfRange, InputTooLong, InvalidConfig, NonFiniteInput, NonFiniteLoss, ShapeMismatch
from .tokenizer import PackedInput

INIT_STD = 0.02
LN_EPS = 1e-12
MASK_NEG = -1e9
N_SEGMENTS = 2


@dataclass(frozen=True)
class EncoderConfig:
    N: int
    d1: int
    d2: int
    h: int
    V: int
    P: int = 512
    dropout_rate: float = 0.1

    def __post_init__(self):
        for name in ("d1", "d2", "h", "V", "P"):
            if getattr(self, name) <= 0:
                raise InvalidConfig(f"{name} must be positive")
        if self.N < 0:
            raise InvalidConfig("N must be non-negative")
        if self.d1 % self.h:
            raise InvalidConfig(f"d1={self.d1} is not divisible by h={self.h}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidConfig("dropout_rate must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        try:
            return cls(**{k: d[k] for k in ("N", "d1", "d2", "h", "V")},
                       P=d.get("P", 512), dropout_rate=d.get("dropout_rate", 0.1))
        except KeyError as e:
            raise InvalidConfig(f"config missing field {e}") from e
        except TypeError as e:
            raise InvalidConfig(str(e)) from e


# Table 1 shapes; V and P are the BERT-base uncased values.
TEACHER_TABLE1 = EncoderConfig(N=12, d1=768, d2=3072, h=12, V=30522, P=512)
STUDENT_TABLE1 = EncoderConfig(N=8, d1=256, d2=1024, h=8, V=30522, P=512)

# Named shapes for the CLI. V=0 means "take V from the vocabulary".
PRESETS = {
    "table1-teacher": TEACHER_TABLE1.to_dict(),
    "table1-student": STUDENT_TABLE1.to_dict(),
    "desk-teacher": {"N": 4, "d1": 128, "d2": 512, "h": 4, "V": 0, "P": 128, "dropout_rate": 0.0},
    "desk-student": {"N": 2, "d1": 64, "d2": 256, "h": 4, "V": 0, "P": 128, "dropout_rate": 0.0},
    # Table 1 shapes with widths divided by four, for latency comparisons
    "bench-teacher": {"N": 12, "d1": 192, "d2": 768, "h": 12, "V": 0, "P": 128, "dropout_rate": 0.0},
    "bench-student": {"N": 8, "d1": 64, "d2": 256, "h": 8, "V": 0, "P": 128, "dropout_rate": 0.0},
}


def param_shapes(config: EncoderConfig, mlm_head: bool = True, scorer_head: bool = True) -> "OrderedDict[str, tuple]":
    """Canonical tensor order; checkpoints serialize in exactly this order."""
    d1, d2 = config.d1, config.d2
    shapes = OrderedDict()
    shapes["emb.token"] = (config.V, d1)
    shapes["emb.segment"] = (N_SEGMENTS, d1)
    shapes["emb.position"] = (config.P, d1)
    shapes["emb.ln_gain"] = (d1,)
    shapes["emb.ln_bias"] = (d1,)
    for i in range(config.N):
        p = f"layer{i}."
        for proj in ("q", "k", "v", "o"):
            shapes[p + proj + "_w"] = (d1, d1)
            shapes[p + proj + "_b"] = (d1,)
        shapes[p + "ln1_gain"] = (d1,)
        shapes[p + "ln1_bias"] = (d1,)
        shapes[p + "ff1_w"] = (d1, d2)
        shapes[p + "ff1_b"] = (d2,)
        shapes[p + "ff2_w"] = (d2, d1)
        shapes[p + "ff2_b"] = (d1,)
        shapes[p + "ln2_gain"] = (d1,)
        shapes[p + "ln2_bias"] = (d1,)
    if mlm_head:
        shapes["mlm.w"] = (d1, config.V)
        shapes["mlm.b"] = (config.V,)
    if scorer_head:
        shapes["scorer.w"] = (d1,)
        shapes["scorer.b"] = (1,)
    return shapes


def _is_body(name: str) -> bool:
    return not name.startswith(("mlm.", "scorer."))


def count_params(config: EncoderConfig) -> int:
    """Trainable parameters of the encoder body (heads excluded)."""
    return sum(math.prod(s) for name, s in param_shapes(config).items() if _is_body(name))


def head_param_counts(config: EncoderConfig) -> dict:
    return {"mlm": config.d1 * config.V + config.V, "scorer": config.d1 + 1}


@dataclass
class ModelParams:
    config: EncoderConfig
    tensors: "OrderedDict[str, torch.Tensor]" = field(repr=False)

    def __getitem__(self, name):
        return self.tensors[name]

    @property
    def has_mlm_head(self) -> bool:
        return "mlm.w" in self.tensors

    @property
    def has_scorer_head(self) -> bool:
        return "scorer.w" in self.tensors

    def clone(self) -> "ModelParams":
        return ModelParams(self.config, OrderedDict((k, v.detach().clone()) for k, v in self.tensors.items()))

    def to(self, dtype) -> "ModelParams":
        return ModelParams(self.config, OrderedDict((k, v.detach().to(dtype)) for k, v in self.tensors.items()))

    def with_tensors(self, tensors) -> "ModelParams":
        return ModelParams(self.config, OrderedDict(tensors))

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, t in self.tensors.items():
            digest.update(name.encode())
            digest.update(t.detach().contiguous().numpy().tobytes())
        return digest.hexdigest()

    def numel(self) -> int:
        return sum(t.numel() for t in self.tensors.values())


def init_params(config: EncoderConfig, seed: int = 0, mlm_head: bool = True, scorer_head: bool = True) -> ModelParams:
    gen = torch.Generator().manual_seed(seed)
    tensors = OrderedDict()
    for name, shape in param_shapes(config, mlm_head, scorer_head).items():
        if name.endswith("_gain"):
            t = torch.ones(shape)
        elif len(shape) == 2 or name == "scorer.w":
            t = torch.empty(shape)
            torch.nn.init.trunc_normal_(t, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD, generator=gen)
        else:
            t = torch.zeros(shape)
        tensors[name] = t
    return ModelParams(config, tensors)


class Batch(NamedTuple):
    ids: torch.Tensor
    segment_ids: torch.Tensor
    attention_mask: torch.Tensor


def collate(packed: Sequence[PackedInput], trim: bool = True) -> Batch:
    """Stack packed inputs; with ``trim`` drop columns that are padding everywhere."""
    ids = torch.tensor([p.ids for p in packed], dtype=torch.long)
    seg = torch.tensor([p.segment_ids for p in packed], dtype=torch.long)
    mask = torch.tensor([p.attention_mask for p in packed], dtype=torch.long)
    if trim and len(packed):
        m = max(int(mask.sum(1).max()), 1)
        ids, seg, mask = ids[:, :m], seg[:, :m], mask[:, :m]
    return Batch(ids, seg, mask)


def _as_batch(inputs) -> tuple[Batch, bool]:
    if isinstance(inputs, PackedInput):
        return collate([inputs], trim=False), True
    if isinstance(inputs, Batch):
        return inputs, False
    return collate(list(inputs), trim=False), False


def layer_norm(x, gain, bias):
    mean = x.mean(-1, keepdim=True)
    var = ((x - mean) ** 2).mean(-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + LN_EPS) * gain + bias


def _dropout(x, rate, train_mode, generator):
    if not train_mode or rate == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= rate
    return x * keep / (1.0 - rate)


def forward(params: ModelParams, inputs, train_mode: bool = False, generator: torch.Generator | None = None,
            return_attention: bool = False):
    """Encode ``inputs`` (a PackedInput, a list of them, or a Batch).

    Returns hidden states ``(B, M, d1)``, or ``(M, d1)`` for a single
    PackedInput. With ``return_attention`` also returns the per-layer
    attention probabilities ``(B, h, M, M)``.
    """
    cfg = params.config
    batch, single = _as_batch(inputs)
    ids, seg, mask = batch
    B, M = ids.shape
    if M > cfg.P:
        raise InputTooLong(f"input length {M} exceeds max positions {cfg.P}")
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= cfg.V):
        raise IdOutOfRange(f"token ids must lie in [0, {cfg.V})")
    p = params.tensors
    rate = cfg.dropout_rate

    x = p["emb.token"][ids] + p["emb.segment"][seg] + p["emb.position"][:M].unsqueeze(0)
    x = layer_norm(x, p["emb.ln_gain"], p["emb.ln_bias"])
    x = _dropout(x, rate, train_mode, generator)

    dh = cfg.d1 // cfg.h
    additive = (1.0 - mask.to(x.dtype))[:, None, None, :] * MASK_NEG
    attentions = []
    for i in range(cfg.N):
        pre = f"layer{i}."

        def heads(t):
            return t.view(B, M, cfg.h, dh).transpose(1, 2)

        q = heads(x @ p[pre + "q_w"] + p[pre + "q_b"])
        k = heads(x @ p[pre + "k_w"] + p[pre + "k_b"])
        v = heads(x @ p[pre + "v_w"] + p[pre + "v_b"])
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh) + additive
        probs = torch.softmax(scores, dim=-1)
        if return_attention:
            attentions.append(probs)
        ctx = (probs @ v).transpose(1, 2).reshape(B, M, cfg.d1)
        attn_out = _dropout(ctx @ p[pre + "o_w"] + p[pre + "o_b"], rate, train_mode, generator)
        x = layer_norm(x + attn_out, p[pre + "ln1_gain"], p[pre + "ln1_bias"])
        ff = F.gelu(x @ p[pre + "ff1_w"] + p[pre + "ff1_b"])
        ff = _dropout(ff @ p[pre + "ff2_w"] + p[pre + "ff2_b"], rate, train_mode, generator)
        x = layer_norm(x + ff, p[pre + "ln2_gain"], p[pre + "ln2_bias"])

    if single:
        x = x[0]
    return (x, attentions) if return_attention else x


def mlm_logits(params: ModelParams, hidden: torch.Tensor) -> torch.Tensor:
    return hidden @ params["mlm.w"] + params["mlm.b"]


def scorer_logit(params: ModelParams, hidden: torch.Tensor) -> torch.Tensor:
    """Pre-sigmoid relevance score from the [CLS] (first) output vector."""
    return hidden[..., 0, :] @ params["scorer.w"] + params["scorer.b"][0]


def stable_softmax(logits, temperature: float = 1.0) -> torch.Tensor:
    """Softmax of ``logits / temperature`` along the last axis, max-subtracted.

    Non-tensor input is promoted to a float64 tensor.
    """
    if not isinstance(logits, torch.Tensor):
        logits = torch.as_tensor(logits, dtype=torch.float64)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if not torch.isfinite(logits).all():
        raise NonFiniteInput("logits contain NaN or Inf")
    z = logits / temperature
    z = z - z.max(dim=-1, keepdim=True).values
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def stable_log_softmax(logits: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    z = logits / temperature
    z = z - z.max(dim=-1, keepdim=True).values.detach()
    return z - torch.log(torch.exp(z).sum(dim=-1, keepdim=True))


LossFn = Callable[[ModelParams, object], torch.Tensor]


def compute_gradients(params: ModelParams, loss_fn: LossFn, batch) -> tuple[float, "OrderedDict[str, torch.Tensor]"]:
    """Loss value and reverse-mode gradients of ``loss_fn(params, batch)``."""
    leaves = OrderedDict((k, v.detach().requires_grad_(True)) for k, v in params.tensors.items())
    loss = loss_fn(params.with_tensors(leaves), batch)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"loss is {float(loss.detach())}")
    if loss.requires_grad:
        found = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
    else:
        found = [None] * len(leaves)
    grads = OrderedDict()
    for (name, leaf), g in zip(leaves.items(), found):
        grads[name] = torch.zeros_like(leaf) if g is None else g.detach()
    return float(loss.detach()), grads


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 1.0


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def global_norm(grads) -> float:
    return math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))


def clip_gradients(grads, clip_norm):
    if clip_norm is None:
        return grads
    norm = global_norm(grads)
    if norm <= clip_norm:
        return grads
    scale = clip_norm / norm
    return OrderedDict((k, g * scale) for k, g in grads.items())


def optimizer_step(params: ModelParams, grads, state: AdamState, hyper: AdamHyper,
                   lr: float | None = None) -> tuple[ModelParams, AdamState]:
    """One Adam update with global-norm clipping. Updates tensors in place."""
    if set(grads) != set(params.tensors):
        raise ShapeMismatch("gradient names differ from parameter names")
    for name, g in grads.items():
        if g.shape != params.tensors[name].shape:
            raise ShapeMismatch(f"{name}: grad {tuple(g.shape)} vs param {tuple(params.tensors[name].shape)}")
    grads = clip_gradients(grads, hyper.clip_norm)
    lr = hyper.lr if lr is None else lr
    state.step += 1
    c1 = 1.0 - hyper.beta1 ** state.step
    c2 = 1.0 - hyper.beta2 ** state.step
    with torch.no_grad():
        for name, g in grads.items():
            w = params.tensors[name]
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(w)
                state.v[name] = torch.zeros_like(w)
            v = state.v[name]
            m.mul_(hyper.beta1).add_(g, alpha=1.0 - hyper.beta1)
            v.mul_(hyper.beta2).addcmul_(g, g, value=1.0 - hyper.beta2)
            w.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + hyper.eps))
    return params, state


def linear_warmup_decay(step: int, total: int, base_lr: float, warmup_frac: float = 0.1) -> float:
    warm = max(1, int(total * warmup_frac))
    if step < warm:
        return base_lr * (step + 1) / warm
    return base_lr * max(0.0, (total - step) / max(1, total - warm))
