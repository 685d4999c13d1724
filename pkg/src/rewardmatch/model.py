"""The conditional autoregressive sequence model p(x | y).

Tokens are embedded and concatenated with the conditioning vector at
every time step, fed through a stacked LSTM, and projected to vocabulary
logits.  The start token is input only; the stop token is predicted.
Scoring, sampling, and greedy decoding all share the same forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import neural
from .neural import ParameterSet, lstm_step, lstm_step_backward, softmax

__all__ = ["ModelConfig", "ConditionalLSTM", "pad_batch"]


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 64
    cond_dim: int = 1
    hidden_dim: int = 128
    num_layers: int = 2
    max_len: int = 32

    def __post_init__(self):
        for field_name, value in asdict(self).items():
            if value <= 0:
                raise ValueError(f"{field_name} must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def pad_batch(token_seqs, pad_id):
    """Right-pad a list of token arrays; returns (padded, lengths)."""
    lengths = np.array([len(t) for t in token_seqs], dtype=np.int64)
    padded = np.full((len(token_seqs), lengths.max()), pad_id, dtype=np.int64)
    for i, t in enumerate(token_seqs):
        padded[i, :len(t)] = t
    return padded, lengths


class ConditionalLSTM:
    """Stacked LSTM over (token embedding ++ conditioning vector) inputs."""

    def __init__(self, config, params=None, rng=None, start_id=1, stop_id=2):
        self.config = config
        self.start_id = start_id
        self.stop_id = stop_id
        if params is not None:
            self.params = params
        else:
            if rng is None:
                rng = np.random.default_rng(0)
            self.params = self._init_params(config, rng)

    @staticmethod
    def _init_params(cfg, rng):
        params = ParameterSet()
        params.add("embed", neural.uniform_init(
            (cfg.vocab_size, cfg.embed_dim), cfg.embed_dim, rng))
        h = cfg.hidden_dim
        for layer in range(cfg.num_layers):
            n_in = (cfg.embed_dim + cfg.cond_dim) if layer == 0 else h
            W = neural.uniform_init((n_in + h, 4 * h), n_in + h, rng)
            b = np.zeros(4 * h)
            b[h:2 * h] = 1.0        # forget gate bias starts open
            params.add(f"lstm{layer}_W", W)
            params.add(f"lstm{layer}_b", b)
        params.add("out_W", neural.uniform_init((h, cfg.vocab_size), h, rng))
        params.add("out_b", np.zeros(cfg.vocab_size))
        return params

    @classmethod
    def from_checkpoint(cls, path, start_id=1, stop_id=2):
        params, meta = neural.load_checkpoint(path)
        cfg = ModelConfig.from_dict(meta["model_config"])
        return cls(cfg, params=params, start_id=start_id, stop_id=stop_id), meta

    def save_checkpoint(self, path, extra_meta=None, include_optimizer=False):
        meta = {"model_config": self.config.to_dict()}
        if extra_meta:
            meta.update(extra_meta)
        neural.save_checkpoint(path, self.params, meta,
                               include_optimizer=include_optimizer)

    def zero_state(self, batch):
        h = self.config.hidden_dim
        return [(np.zeros((batch, h)), np.zeros((batch, h)))
                for _ in range(self.config.num_layers)]

    # -- forward/backward over forced token inputs ---------------------------

    def step_logits(self, tokens, cond, state, tape=None):
        """Advance one step for a batch of current tokens; returns logits.

        ``tokens`` is (B,) input token ids, ``state`` the per-layer (h, c)
        list which is updated in place.  When taping, the cache entry is
        (per-layer lstm caches, top hidden state, input tokens).
        """
        x = np.concatenate([self.params["embed"][tokens], cond], axis=1)
        return self.step_logits_input(x, state, tape=tape, tokens=tokens)

    def step_logits_input(self, x, state, tape=None, tokens=None):
        """As step_logits but from an already-embedded (B, embed+cond) input."""
        params = self.params
        layer_caches = [] if tape is not None else None
        for layer in range(self.config.num_layers):
            x, state[layer] = lstm_step(params, layer, x, state[layer],
                                        tape=layer_caches)
        logits = x @ params["out_W"] + params["out_b"]
        if tape is not None:
            tape.append((layer_caches, x, tokens))
        return logits

    def forward_tokens(self, tokens_in, conds, tape=None):
        """Logits for each input position; tokens_in is (B, T)."""
        B, T = tokens_in.shape
        state = self.zero_state(B)
        logits = np.empty((B, T, self.config.vocab_size))
        for t in range(T):
            logits[:, t, :] = self.step_logits(tokens_in[:, t], conds, state,
                                               tape=tape)
        return logits

    def backward_tokens(self, tape, dlogits):
        """Backpropagate through a taped forward_tokens/unroll pass.

        ``dlogits`` is (B, T, D) aligned with the tape entries; gradients
        accumulate into ``self.params.grads``.
        """
        params = self.params
        cfg = self.config
        B = dlogits.shape[0]
        h = cfg.hidden_dim
        dh_next = [np.zeros((B, h)) for _ in range(cfg.num_layers)]
        dc_next = [np.zeros((B, h)) for _ in range(cfg.num_layers)]
        d_embed = params.grads["embed"]
        for t in range(len(tape) - 1, -1, -1):
            layer_caches, top_h, tokens = tape[t]
            dl = dlogits[:, t, :]
            params.grads["out_W"] += top_h.T @ dl
            params.grads["out_b"] += dl.sum(axis=0)
            dx = dl @ params["out_W"].T
            for layer in range(cfg.num_layers - 1, -1, -1):
                dh = dx + dh_next[layer]
                dx, dh_prev, dc_prev = lstm_step_backward(
                    params, layer_caches[layer], dh, dc_next[layer])
                dh_next[layer] = dh_prev
                dc_next[layer] = dc_prev
            np.add.at(d_embed, tokens, dx[:, :cfg.embed_dim])

    # -- scoring ---------------------------------------------------------------

    def sequence_nll(self, padded, lengths, conds, tape=None):
        """Per-sequence NLL over forced sequences; also returns step probs.

        ``padded`` rows are [start, tokens..., stop, pad...]; position t
        predicts padded[:, t+1] for t < length-1.
        """
        B, T = padded.shape
        if T > self.config.max_len:
            raise ValueError(f"sequence length {T} exceeds max_len "
                             f"{self.config.max_len}")
        logits = self.forward_tokens(padded[:, :-1], conds, tape=tape)
        flat = logits.reshape(-1, self.config.vocab_size)
        targets = padded[:, 1:].reshape(-1)
        losses, probs = neural.softmax_nll_batch(flat, targets)
        losses = losses.reshape(B, T - 1)
        mask = np.arange(T - 1)[None, :] < (lengths - 1)[:, None]
        seq_nll = (losses * mask).sum(axis=1)
        return seq_nll, probs.reshape(B, T - 1, -1), mask

    def log_prob(self, tokens, y_cond):
        """Log-probability of one well-formed [start, ..., stop] sequence."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens[0] != self.start_id or tokens[-1] != self.stop_id:
            raise ValueError("sequence must be delimited by start/stop tokens")
        cond = np.asarray(y_cond, dtype=np.float64).reshape(1, -1)
        if cond.shape[1] != self.config.cond_dim:
            raise ValueError("conditioning dimension mismatch")
        nll, _, _ = self.sequence_nll(tokens[None, :],
                                      np.array([len(tokens)]), cond)
        return -float(nll[0])

    def log_prob_batch(self, token_seqs, conds, pad_id=0):
        padded, lengths = pad_batch(token_seqs, pad_id)
        nll, _, _ = self.sequence_nll(padded, lengths, np.asarray(conds))
        return -nll

    def mean_token_nll(self, token_seqs, conds, pad_id=0, batch_size=512):
        """Mean per-token NLL (stop prediction included) over a set."""
        total, count = 0.0, 0
        conds = np.asarray(conds)
        for lo in range(0, len(token_seqs), batch_size):
            chunk = token_seqs[lo:lo + batch_size]
            padded, lengths = pad_batch(chunk, pad_id)
            nll, _, _ = self.sequence_nll(padded, lengths, conds[lo:lo + len(chunk)])
            total += float(nll.sum())
            count += int((lengths - 1).sum())
        return total / count

    def training_step(self, padded, lengths, conds, weights=None):
        """Accumulate gradients of the weighted sequence-NLL batch loss.

        Loss is sum_s w_s * NLL_s with w_s defaulting to 1/B; returns the
        scalar loss.
        """
        B = padded.shape[0]
        if weights is None:
            weights = np.full(B, 1.0 / B)
        tape = []
        seq_nll, probs, mask = self.sequence_nll(padded, lengths, conds, tape=tape)
        loss = float(seq_nll @ weights)
        targets = padded[:, 1:]
        dlogits = probs.copy()
        rows = np.arange(B)[:, None]
        cols = np.arange(padded.shape[1] - 1)[None, :]
        dlogits[rows, cols, targets] -= 1.0
        dlogits *= (weights[:, None] * mask)[:, :, None]
        self.backward_tokens(tape, dlogits)
        return loss

    # -- generation -------------------------------------------------------------

    def step_distribution(self, prefix_tokens, y_cond):
        """Next-token probabilities after a [start, ...] prefix."""
        prefix = np.asarray(prefix_tokens, dtype=np.int64)
        if len(prefix) == 0 or prefix[0] != self.start_id:
            raise ValueError("prefix must begin with the start token")
        if len(prefix) >= self.config.max_len:
            raise ValueError("prefix too long")
        cond = np.asarray(y_cond, dtype=np.float64).reshape(1, -1)
        state = self.zero_state(1)
        logits = None
        for t in range(len(prefix)):
            logits = self.step_logits(prefix[t:t + 1], cond, state)
        return softmax(logits[0])

    def sample_batch(self, conds, rng, max_len=None):
        """Ancestral sampling; returns a list of token arrays.

        Sequences include the start token and, when generation halted
        before the length cap, the stop token.  Sequences that never
        emitted stop are truncated (callers treat them as invalid).
        """
        return self._generate(np.asarray(conds, dtype=np.float64), rng, max_len)

    def sample(self, y_cond, rng, max_len=None):
        return self.sample_batch(np.asarray(y_cond).reshape(1, -1), rng, max_len)[0]

    def greedy_decode_batch(self, conds, max_len=None):
        """Argmax decoding; ties resolve to the lowest token index."""
        return self._generate(np.asarray(conds, dtype=np.float64), None, max_len)

    def greedy_decode(self, y_cond, max_len=None):
        return self.greedy_decode_batch(np.asarray(y_cond).reshape(1, -1), max_len)[0]

    def _generate(self, conds, rng, max_len):
        if max_len is None:
            max_len = self.config.max_len
        if max_len > self.config.max_len:
            raise ValueError("max_len exceeds the model's configured maximum")
        B = conds.shape[0]
        state = self.zero_state(B)
        current = np.full(B, self.start_id, dtype=np.int64)
        emitted = np.empty((B, max_len - 1), dtype=np.int64)
        stopped_at = np.full(B, -1, dtype=np.int64)
        for t in range(max_len - 1):
            logits = self.step_logits(current, conds, state)
            if rng is None:
                nxt = np.argmax(logits, axis=1)
            else:
                probs = softmax(logits)
                u = rng.random(B)
                nxt = (probs.cumsum(axis=1) < u[:, None]).sum(axis=1)
                np.clip(nxt, 0, self.config.vocab_size - 1, out=nxt)
            emitted[:, t] = nxt
            newly = (nxt == self.stop_id) & (stopped_at < 0)
            stopped_at[newly] = t
            current = nxt
            if np.all(stopped_at >= 0):
                emitted = emitted[:, :t + 1]
                break
        out = []
        for b in range(B):
            end = stopped_at[b]
            body = emitted[b, :end + 1] if end >= 0 else emitted[b]
            out.append(np.concatenate([[self.start_id], body]))
        return out
