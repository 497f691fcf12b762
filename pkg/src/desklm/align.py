"""Alignment losses: masked supervised fine-tuning and direct preference
optimization.

SFT scores only the response span; the prompt conditions the context but
contributes no loss terms. DPO compares policy and frozen-reference
sequence log-probabilities of a chosen/rejected pair through a logistic
margin at temperature beta.
"""

import json
from dataclasses import dataclass

from . import ndops
from .errors import LengthError
from .model import ModelConfig, ModelParams, model_forward
from .ndops import Tape, Tensor, backward


@dataclass(frozen=True)
class SftExample:
    prompt_tokens: tuple
    response_tokens: tuple

    def __post_init__(self):
        object.__setattr__(self, "prompt_tokens", tuple(self.prompt_tokens))
        object.__setattr__(self, "response_tokens", tuple(self.response_tokens))
        if not self.response_tokens:
            raise ValueError("response must be non-empty")


@dataclass(frozen=True)
class PreferencePair:
    prompt_tokens: tuple
    chosen_tokens: tuple
    rejected_tokens: tuple

    def __post_init__(self):
        object.__setattr__(self, "prompt_tokens", tuple(self.prompt_tokens))
        object.__setattr__(self, "chosen_tokens", tuple(self.chosen_tokens))
        object.__setattr__(self, "rejected_tokens", tuple(self.rejected_tokens))
        if not self.chosen_tokens or not self.rejected_tokens:
            raise ValueError("chosen and rejected must both be non-empty")
        if self.chosen_tokens == self.rejected_tokens:
            raise ValueError("chosen and rejected must differ")


@dataclass
class DpoConfig:
    reference_params: ModelParams
    beta: float = 0.1

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError(f"beta must be positive, got {self.beta}")


def _response_ce(params: ModelParams, cfg: ModelConfig, prompt, response,
                 reduction: str) -> Tensor:
    """Cross-entropy over the response span of prompt+response."""
    ids = list(prompt) + list(response)
    if len(ids) > cfg.max_seq_len:
        raise LengthError(f"sequence length {len(ids)} exceeds maximum {cfg.max_seq_len}")
    # token i is predicted from logits row i-1; the first token of the whole
    # sequence has no context and is never scored
    start = max(len(prompt), 1)
    logits = model_forward(params, cfg, ids[:-1])
    span = ndops.slice_rows(logits, start - 1, len(ids) - 1)
    return ndops.cross_entropy(span, ids[start:], reduction=reduction)


def sft_loss(example: SftExample, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Mean next-token cross-entropy over response positions only."""
    return _response_ce(params, cfg, example.prompt_tokens,
                        example.response_tokens, reduction="mean")


def sequence_logprob(params: ModelParams, cfg: ModelConfig, prompt, response) -> Tensor:
    """Sum of per-token log-probabilities of the response given the prompt."""
    return ndops.mul(_response_ce(params, cfg, prompt, response, reduction="sum"), -1.0)


def dpo_from_logps(lp_chosen: Tensor, lp_rejected: Tensor, ref_chosen: Tensor,
                   ref_rejected: Tensor, beta: float) -> Tensor:
    """-log sigmoid(beta * ((lp_c - ref_c) - (lp_r - ref_r)))."""
    margin = ndops.add(ndops.add(lp_chosen, ndops.mul(ref_chosen, -1.0)),
                       ndops.mul(ndops.add(lp_rejected, ndops.mul(ref_rejected, -1.0)), -1.0))
    return ndops.mul(ndops.logsigmoid(ndops.mul(margin, beta)), -1.0)


def dpo_loss(pair: PreferencePair, params: ModelParams, dpo: DpoConfig,
             cfg: ModelConfig) -> Tensor:
    """Preference loss; gradients reach the policy only, never the reference."""
    lp_c = sequence_logprob(params, cfg, pair.prompt_tokens, pair.chosen_tokens)
    lp_r = sequence_logprob(params, cfg, pair.prompt_tokens, pair.rejected_tokens)
    with ndops.notrace():
        ref_c = sequence_logprob(dpo.reference_params, cfg, pair.prompt_tokens,
                                 pair.chosen_tokens)
        ref_r = sequence_logprob(dpo.reference_params, cfg, pair.prompt_tokens,
                                 pair.rejected_tokens)
    # reference values re-enter the trace as constants
    ref_c = Tensor(ref_c.data, dtype=ref_c.dtype)
    ref_r = Tensor(ref_r.data, dtype=ref_r.dtype)
    return dpo_from_logps(lp_c, lp_r, ref_c, ref_r, dpo.beta)


# --- JSONL corpora ------------------------------------------------------------

def _load_jsonl(path, fields: tuple) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
            if not isinstance(rec, dict):
                raise ValueError(f"{path}:{lineno}: expected an object")
            for k in fields:
                if k not in rec or not isinstance(rec[k], str):
                    raise ValueError(f"{path}:{lineno}: missing string field {k!r}")
            out.append({k: rec[k] for k in fields})
    return out


def load_sft_records(path) -> list[dict]:
    """JSONL rows with string fields: prompt, response."""
    return _load_jsonl(path, ("prompt", "response"))


def load_preference_records(path) -> list[dict]:
    """JSONL rows with string fields: prompt, chosen, rejected."""
    return _load_jsonl(path, ("prompt", "chosen", "rejected"))


# --- small fine-tuning drivers -------------------------------------------------

def sft_finetune(state, cfg: ModelConfig, opt, examples: list[SftExample],
                 steps: int) -> list[tuple[int, float]]:
    """Cycle through examples with AdamW; returns (step, loss) pairs."""
    from .train import adamw_step, cosine_lr

    if not examples:
        raise ValueError("no SFT examples")
    curve = []
    for i in range(steps):
        ex = examples[i % len(examples)]
        with Tape() as tape:
            loss = sft_loss(ex, state.params, cfg)
        grads = backward(tape, loss)
        lr = cosine_lr(state.step, opt)
        adamw_step(state, grads, lr, opt)
        curve.append((state.step, loss.item()))
    return curve


def dpo_finetune(state, cfg: ModelConfig, opt, dpo: DpoConfig,
                 pairs: list[PreferencePair], steps: int) -> list[tuple[int, float]]:
    """Cycle through preference pairs with AdamW; returns (step, loss) pairs."""
    from .train import adamw_step, cosine_lr

    if not pairs:
        raise ValueError("no preference pairs")
    curve = []
    for i in range(steps):
        pair = pairs[i % len(pairs)]
        with Tape() as tape:
            loss = dpo_loss(pair, state.params, dpo, cfg)
        grads = backward(tape, loss)
        lr = cosine_lr(state.step, opt)
        adamw_step(state, grads, lr, opt)
        curve.append((state.step, loss.item()))
    return curve
