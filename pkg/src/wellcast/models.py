"""Forecasting architectures: vanilla RNN, LSTM, GRU and an encoder-decoder transformer.

All models map a batch of windows ``X[B, N, M]`` to one scalar per window. The
recurrent cells are stateless: hidden (and cell) state starts at zero on every
forward pass and only the last hidden state reaches the linear output head.
The transformer embeds every row, adds a fixed sinusoidal position table, runs
an encoder stack, then decodes a single token built from the last input row.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Mapping, Optional

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .tensor import (
    Tensor,
    concat,
    dropout,
    layer_norm,
    no_grad,
    relu,
    reshape,
    sigmoid,
    softmax_rows,
    tanh,
    transpose,
)

ARCHITECTURES = ("rnn", "lstm", "gru", "transformer")
RECURRENT = ("rnn", "lstm", "gru")
LN_EPS = 1e-6


@dataclass
class ModelConfig:
    architecture: str
    input_size: int
    window: int = 14
    hidden_size: int = 32
    lstm_variant: str = "standard"
    d_model: int = 32
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 1
    d_ff: int = 64
    dropout: float = 0.1
    # 0 keeps the single linear output layer; >0 is the two-layer head used after fine-tuning
    head_hidden: int = 0
    seed: int = 0

    def validate(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}; expected one of {ARCHITECTURES}")
        if self.lstm_variant not in ("ungated", "standard"):
            raise ConfigError(f"lstm_variant must be 'ungated' or 'standard', got {self.lstm_variant!r}")
        for name in ("input_size", "window", "hidden_size", "d_model", "n_heads", "n_enc_layers", "n_dec_layers", "d_ff"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.head_hidden < 0:
            raise ConfigError("head_hidden must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.architecture == "transformer":
            if self.d_model % self.n_heads:
                raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
            if self.d_model % 2:
                raise ConfigError("d_model must be even for the sinusoidal position table")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model settings: {sorted(unknown)}")
        return cls(**data)


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

def _uniform(rng: np.random.Generator, shape, fan_in: int, name: str) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def _linear(params: Dict[str, Tensor], rng, name: str, n_out: int, n_in: int) -> None:
    params[f"{name}W"] = _uniform(rng, (n_out, n_in), n_in, f"{name}W")
    params[f"{name}b"] = _uniform(rng, (n_out,), n_in, f"{name}b")


def _norm(params: Dict[str, Tensor], name: str, width: int) -> None:
    params[f"{name}.gamma"] = Tensor(np.ones(width), requires_grad=True, name=f"{name}.gamma")
    params[f"{name}.beta"] = Tensor(np.zeros(width), requires_grad=True, name=f"{name}.beta")


class _View(Mapping):
    """Read-only prefix view so sub-layers can use short parameter names."""

    def __init__(self, params: Mapping[str, Tensor], prefix: str):
        self._params, self._prefix = params, prefix

    def __getitem__(self, key):
        return self._params[self._prefix + key]

    def __iter__(self):
        n = len(self._prefix)
        return (k[n:] for k in self._params if k.startswith(self._prefix))

    def __len__(self):
        return sum(1 for _ in self)


def _affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    return x @ transpose(W) + b


def _rows(x: Tensor) -> tuple:
    """Promote a single vector to a one-row batch; report whether we did."""
    if x.ndim == 1:
        return reshape(x, (1, x.shape[0])), True
    return x, False


def _check_width(t: Tensor, width: int, what: str) -> None:
    if t.shape[-1] != width:
        raise ShapeError(f"{what} has width {t.shape[-1]}, expected {width}")


# ---------------------------------------------------------------------------
# recurrent cells
# ---------------------------------------------------------------------------

def rnn_step(x: Tensor, h: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """``h' = sigmoid(W_x x + W_h h + b_h)`` for rows of ``x`` and ``h``."""
    (x, single), (h, _) = _rows(x), _rows(h)
    _check_width(x, p["W_x"].shape[1], "input")
    _check_width(h, p["W_h"].shape[1], "hidden state")
    out = sigmoid(x @ transpose(p["W_x"]) + h @ transpose(p["W_h"]) + p["b_h"])
    return reshape(out, (out.shape[1],)) if single else out


def lstm_step(x: Tensor, h: Tensor, c: Tensor, p: Mapping[str, Tensor], variant: str = "standard"):
    """One LSTM step on the concatenation ``[h, x]``.

    ``variant="ungated"`` emits ``h' = c_hat * tanh(c')`` (no output gate);
    ``variant="standard"`` uses ``h' = o * tanh(c')``.
    """
    (x, single), (h, _), (c, _) = _rows(x), _rows(h), _rows(c)
    hx = concat([h, x], axis=-1)
    _check_width(hx, p["W_f"].shape[1], "[h, x]")
    f = sigmoid(_affine(hx, p["W_f"], p["b_f"]))
    i = sigmoid(_affine(hx, p["W_i"], p["b_i"]))
    c_hat = tanh(_affine(hx, p["W_c"], p["b_c"]))
    c_new = f * c + i * c_hat
    if variant == "ungated":
        h_new = c_hat * tanh(c_new)
    elif variant == "standard":
        o = sigmoid(_affine(hx, p["W_o"], p["b_o"]))
        h_new = o * tanh(c_new)
    else:
        raise ContractError(f"unknown lstm variant {variant!r}")
    if single:
        H = h_new.shape[1]
        return reshape(h_new, (H,)), reshape(c_new, (H,))
    return h_new, c_new


def gru_step(x: Tensor, h: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """One GRU step; the candidate sees ``[r * h, x]``."""
    (x, single), (h, _) = _rows(x), _rows(h)
    hx = concat([h, x], axis=-1)
    _check_width(hx, p["W_z"].shape[1], "[h, x]")
    z = sigmoid(_affine(hx, p["W_z"], p["b_z"]))
    r = sigmoid(_affine(hx, p["W_r"], p["b_r"]))
    h_hat = tanh(_affine(concat([r * h, x], axis=-1), p["W_h"], p["b_h"]))
    out = (1.0 - z) * h + z * h_hat
    return reshape(out, (out.shape[1],)) if single else out


def recurrent_forward(
    X: Tensor,
    p: Mapping[str, Tensor],
    kind: str,
    variant: str = "standard",
    states: Optional[List[np.ndarray]] = None,
) -> Tensor:
    """Run a many-to-one recurrent network over ``X[N, M]`` or ``X[B, N, M]``.

    Returns ``W_y h_N + b_y`` with shape ``[B]`` (``[1]`` for unbatched input).
    When ``states`` is a list, each hidden state is appended to it.
    """
    if X.ndim == 2:
        X = reshape(X, (1,) + X.shape)
    if X.ndim != 3:
        raise ShapeError(f"expected [N, M] or [B, N, M] input, got {X.shape}")
    B, N, _ = X.shape
    H = p["W_y"].shape[1]
    h = Tensor(np.zeros((B, H)))
    c = Tensor(np.zeros((B, H)))
    for t in range(N):
        x = X[:, t, :]
        if kind == "rnn":
            h = rnn_step(x, h, p)
        elif kind == "lstm":
            h, c = lstm_step(x, h, c, p, variant)
        elif kind == "gru":
            h = gru_step(x, h, p)
        else:
            raise ContractError(f"unknown recurrent kind {kind!r}")
        if states is not None:
            states.append(h.data.copy())
    y = _affine(h, p["W_y"], p["b_y"])
    return reshape(y, (B,))


# ---------------------------------------------------------------------------
# transformer pieces
# ---------------------------------------------------------------------------

def positional_encoding(length: int, d_model: int) -> np.ndarray:
    """Fixed sinusoidal table: sin on even columns, cos on odd columns."""
    if d_model % 2:
        raise ContractError(f"positional encoding needs an even width, got {d_model}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    rate = np.power(10000.0, np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    table = np.empty((length, d_model))
    table[:, 0::2] = np.sin(pos / rate)
    table[:, 1::2] = np.cos(pos / rate)
    return table


def _split_heads(t: Tensor, n_heads: int) -> Tensor:
    B, L, d = t.shape
    return transpose(reshape(t, (B, L, n_heads, d // n_heads)), (0, 2, 1, 3))


def multi_head_attention(
    query: Tensor,
    key: Tensor,
    value: Tensor,
    p: Mapping[str, Tensor],
    n_heads: int,
    weights_out: Optional[list] = None,
) -> Tensor:
    """Scaled dot-product attention over ``n_heads`` heads, no masking.

    Inputs are ``[B, L, d_model]``; the output keeps the query length.
    Attention weights ``[B, heads, Lq, Lk]`` are appended to ``weights_out``.
    The key projection has no bias: softmax is invariant to the per-row
    constant it would add, so it could never receive a gradient.
    """
    d = query.shape[-1]
    if d % n_heads:
        raise ShapeError(f"d_model={d} is not divisible by {n_heads} heads")
    if key.shape[-1] != d or value.shape[-1] != d:
        raise ShapeError(f"attention widths differ: {query.shape}, {key.shape}, {value.shape}")
    if key.shape[:-1] != value.shape[:-1]:
        raise ShapeError(f"key {key.shape} and value {value.shape} lengths differ")
    B, Lq, _ = query.shape
    d_k = d // n_heads
    q = _split_heads(_affine(query, p["Wq"], p["bq"]), n_heads)
    k = _split_heads(key @ transpose(p["Wk"]), n_heads)
    v = _split_heads(_affine(value, p["Wv"], p["bv"]), n_heads)
    weights = softmax_rows((q @ transpose(k)) * (1.0 / math.sqrt(d_k)))
    if weights_out is not None:
        weights_out.append(weights.data.copy())
    heads = transpose(weights @ v, (0, 2, 1, 3))
    return _affine(reshape(heads, (B, Lq, d)), p["Wo"], p["bo"])


def single_token_attention(
    y: Tensor, p: Mapping[str, Tensor], n_heads: int, weights_out: Optional[list] = None
) -> Tensor:
    """Self-attention over a length-1 sequence.

    Softmax over one key is identically 1, so each head returns its value
    row; query/key projections would be dead weights and are not allocated.
    """
    B, L, d = y.shape
    if L != 1:
        raise ShapeError(f"single-token attention got a sequence of length {L}")
    v = _split_heads(_affine(y, p["Wv"], p["bv"]), n_heads)
    weights = softmax_rows(Tensor(np.zeros((B, n_heads, 1, 1))))
    if weights_out is not None:
        weights_out.append(weights.data.copy())
    heads = transpose(weights @ v, (0, 2, 1, 3))
    return _affine(reshape(heads, (B, 1, d)), p["Wo"], p["bo"])


def _feed_forward(x: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    return _affine(relu(_affine(x, p["ff1.W"], p["ff1.b"])), p["ff2.W"], p["ff2.b"])


def _ln(x: Tensor, p: Mapping[str, Tensor], name: str) -> Tensor:
    return layer_norm(x, p[f"{name}.gamma"], p[f"{name}.beta"], LN_EPS)


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

class Model:
    """Common container behaviour: named parameters, snapshots, inference."""

    config: ModelConfig
    params: Dict[str, Tensor]

    def forward(self, X, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def n_params(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = set(self.params) ^ set(state)
            raise ContractError(f"parameter names differ: {sorted(missing)}")
        for k, t in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ShapeError(f"{k}: stored shape {arr.shape} != model shape {t.shape}")
            t.data = arr.copy()

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def predict(self, X: np.ndarray, batch_size: int = 512) -> np.ndarray:
        """Evaluation-mode predictions for ``X[B, N, M]`` without recording a tape."""
        X = np.asarray(X, dtype=np.float64)
        out = []
        with no_grad():
            for start in range(0, len(X), batch_size):
                out.append(self.forward(X[start:start + batch_size]).data)
        return np.concatenate(out) if out else np.zeros(0)


class RecurrentModel(Model):
    def __init__(self, config: ModelConfig):
        config.validate()
        if config.architecture not in RECURRENT:
            raise ContractError(f"{config.architecture} is not a recurrent architecture")
        self.config = config
        rng = np.random.default_rng(config.seed)
        H, M = config.hidden_size, config.input_size
        p: Dict[str, Tensor] = {}
        kind = config.architecture
        if kind == "rnn":
            p["W_x"] = _uniform(rng, (H, M), M, "W_x")
            p["W_h"] = _uniform(rng, (H, H), H, "W_h")
            p["b_h"] = _uniform(rng, (H,), H, "b_h")
        else:
            gates = ("f", "i", "c") if kind == "lstm" else ("z", "r", "h")
            if kind == "lstm" and config.lstm_variant == "standard":
                gates += ("o",)
            for g in gates:
                p[f"W_{g}"] = _uniform(rng, (H, H + M), H + M, f"W_{g}")
                p[f"b_{g}"] = _uniform(rng, (H,), H + M, f"b_{g}")
        p["W_y"] = _uniform(rng, (1, H), H, "W_y")
        p["b_y"] = _uniform(rng, (1,), H, "b_y")
        self.params = p

    def forward(self, X, training: bool = False, rng=None, states: Optional[list] = None) -> Tensor:
        X = X if isinstance(X, Tensor) else Tensor(X)
        _check_width(X, self.config.input_size, "input window")
        return recurrent_forward(X, self.params, self.config.architecture, self.config.lstm_variant, states)


class TransformerModel(Model):
    """Encoder-decoder transformer with a single-token decoder and scalar head."""

    def __init__(self, config: ModelConfig):
        config.validate()
        if config.architecture != "transformer":
            raise ContractError(f"{config.architecture} is not a transformer")
        self.config = config
        rng = np.random.default_rng(config.seed)
        d, f = config.d_model, config.d_ff
        p: Dict[str, Tensor] = {}
        _linear(p, rng, "embed.", d, config.input_size)
        for i in range(config.n_enc_layers):
            pre = f"enc{i}."
            self._attention_params(p, rng, pre + "attn.", d)
            _norm(p, pre + "ln1", d)
            _linear(p, rng, pre + "ff1.", f, d)
            _linear(p, rng, pre + "ff2.", d, f)
            _norm(p, pre + "ln2", d)
        for i in range(config.n_dec_layers):
            pre = f"dec{i}."
            self._attention_params(p, rng, pre + "self.", d, "vo")
            _norm(p, pre + "ln1", d)
            self._attention_params(p, rng, pre + "cross.", d)
            _norm(p, pre + "ln2", d)
            _linear(p, rng, pre + "ff1.", f, d)
            _linear(p, rng, pre + "ff2.", d, f)
            _norm(p, pre + "ln3", d)
        self.params = p
        if config.head_hidden:
            self._two_layer_head(config.head_hidden, rng)
        else:
            _linear(p, rng, "head.", 1, d)
        self._pe = positional_encoding(config.window, d)

    @staticmethod
    def _attention_params(p, rng, prefix: str, d: int, projections: str = "qkvo") -> None:
        for proj in projections:
            p[f"{prefix}W{proj}"] = _uniform(rng, (d, d), d, f"{prefix}W{proj}")
            if proj != "k":
                p[f"{prefix}b{proj}"] = _uniform(rng, (d,), d, f"{prefix}b{proj}")

    def _two_layer_head(self, hidden: int, rng) -> None:
        d = self.config.d_model
        _linear(self.params, rng, "head1.", hidden, d)
        _linear(self.params, rng, "head2.", 1, hidden)

    def replace_head(self, hidden: int, seed: int) -> None:
        """Swap the linear output layer for linear -> ReLU -> linear, freshly initialised."""
        if hidden < 1:
            raise ContractError("replacement head needs a positive hidden width")
        for name in [k for k in self.params if k.startswith("head")]:
            del self.params[name]
        self._two_layer_head(hidden, np.random.default_rng(seed))
        self.config.head_hidden = hidden

    def forward(
        self,
        X,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
        attention: Optional[list] = None,
    ) -> Tensor:
        cfg, p = self.config, self.params
        X = X if isinstance(X, Tensor) else Tensor(X)
        if X.ndim == 2:
            X = reshape(X, (1,) + X.shape)
        if X.ndim != 3:
            raise ShapeError(f"expected [N, M] or [B, N, M] input, got {X.shape}")
        B, N, M = X.shape
        if N != cfg.window:
            raise ContractError(f"window has {N} rows but the model is configured for {cfg.window}")
        _check_width(X, cfg.input_size, "input window")
        rate = cfg.dropout if training else 0.0
        if rate and rng is None:
            raise ContractError("training with dropout needs a random generator")

        def drop(t: Tensor) -> Tensor:
            return dropout(t, rate, rng) if rate else t

        emb = _affine(X, p["embed.W"], p["embed.b"])
        z = emb + Tensor(self._pe)
        for i in range(cfg.n_enc_layers):
            lp = _View(p, f"enc{i}.")
            a = multi_head_attention(z, z, z, _View(p, f"enc{i}.attn."), cfg.n_heads, attention)
            z = _ln(z + drop(a), lp, "ln1")
            z = _ln(z + drop(_feed_forward(z, lp)), lp, "ln2")
        memory = z

        y = emb[:, N - 1:N, :] + Tensor(self._pe[N - 1:N])
        for i in range(cfg.n_dec_layers):
            lp = _View(p, f"dec{i}.")
            s = single_token_attention(y, _View(p, f"dec{i}.self."), cfg.n_heads, attention)
            y = _ln(y + drop(s), lp, "ln1")
            c = multi_head_attention(y, memory, memory, _View(p, f"dec{i}.cross."), cfg.n_heads, attention)
            y = _ln(y + drop(c), lp, "ln2")
            y = _ln(y + drop(_feed_forward(y, lp)), lp, "ln3")
        y = reshape(y, (B, cfg.d_model))
        if cfg.head_hidden:
            out = _affine(relu(_affine(y, p["head1.W"], p["head1.b"])), p["head2.W"], p["head2.b"])
        else:
            out = _affine(y, p["head.W"], p["head.b"])
        return reshape(out, (B,))


def transformer_forward(X, model: TransformerModel) -> Tensor:
    """Evaluation-mode forward pass; kept as a free function for symmetry with the cells."""
    return model.forward(X)


def build_model(config: ModelConfig) -> Model:
    config.validate()
    if config.architecture == "transformer":
        return TransformerModel(config)
    return RecurrentModel(config)
