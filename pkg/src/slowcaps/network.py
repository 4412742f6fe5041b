"""Capsule network with a temporal head for RUL regression.

Forward path per frame (window x channels, treated as a one-channel
image): valid convolution with tanh, a second convolution whose output
channels split into capsule vectors, squashing, then dynamic routing by
agreement onto a small set of advanced capsules.  A sequence of frames
feeds an LSTM whose final hidden state drives a small fully connected
regression stack ending in one linear output.

Routing coefficients are recomputed from zero logits on every forward
pass and are treated as constants by the backward pass: gradients flow
through the prediction vectors and the final weighted sum, not through
the softmax that produced the coupling.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor, accumulate_grad, make_op

__all__ = [
    "ModelConfig",
    "RoutingState",
    "ForwardState",
    "init_parameters",
    "parameter_count",
    "squash",
    "capsule_transform",
    "capsule_weighted_sum",
    "routing_coefficients",
    "conv_features",
    "build_basic_capsules",
    "dynamic_routing",
    "lstm_forward",
    "regression_head",
    "model_forward",
    "predict",
]

SQUASH_EPS = 1e-12


def _pair(v, name: str) -> tuple[int, int]:
    try:
        a, b = int(v[0]), int(v[1])
    except (TypeError, IndexError, ValueError) as exc:
        raise ValueError(f"{name} must be a pair of ints, got {v!r}") from exc
    return a, b


@dataclass
class ModelConfig:
    """Architecture description; derived extents are filled in validate().

    ``caps_channels`` defaults to conv_filters // caps_dim and
    ``caps_kernel`` defaults to a full-width kernel over the convolution
    output, so by default the capsule stage collapses the channel axis to
    a single spatial column.
    """

    window_length: int
    in_channels: int
    conv_filters: int = 64
    conv_kernel: tuple[int, int] = (1, 2)
    conv_stride: tuple[int, int] = (1, 2)
    caps_dim: int = 8
    caps_channels: int | None = None
    caps_kernel: tuple[int, int] | None = None
    caps_stride: tuple[int, int] = (1, 1)
    num_advanced: int = 2
    advanced_dim: int = 16
    routing_iterations: int = 3
    lstm_units: int = 16
    sequence_length: int = 5
    use_lstm: bool = True
    fnn_widths: tuple[int, ...] = (200, 100, 1)
    dropout: float = 0.2

    def __post_init__(self):
        self.conv_kernel = _pair(self.conv_kernel, "conv_kernel")
        self.conv_stride = _pair(self.conv_stride, "conv_stride")
        self.caps_stride = _pair(self.caps_stride, "caps_stride")
        if self.caps_channels is None:
            self.caps_channels = max(1, self.conv_filters // self.caps_dim)
        if self.caps_kernel is None:
            self.caps_kernel = (1, self.conv_out_hw[1])
        else:
            self.caps_kernel = _pair(self.caps_kernel, "caps_kernel")
        self.fnn_widths = tuple(int(w) for w in self.fnn_widths)
        problems = self.problems()
        if problems:
            raise ValueError("invalid model config: " + "; ".join(problems))

    def problems(self) -> list[str]:
        """All constraint violations, for exhaustive reporting."""
        out = []
        if self.window_length < 1:
            out.append(f"window_length must be >= 1, got {self.window_length}")
        if self.in_channels < 1:
            out.append(f"in_channels must be >= 1, got {self.in_channels}")
        if self.conv_filters < 1:
            out.append("conv_filters must be >= 1")
        if self.caps_dim < 1:
            out.append("caps_dim must be >= 1")
        elif self.conv_filters % self.caps_dim != 0:
            out.append(
                f"conv_filters ({self.conv_filters}) must be divisible by "
                f"caps_dim ({self.caps_dim})"
            )
        for name, pair_ in (("conv_kernel", self.conv_kernel),
                            ("conv_stride", self.conv_stride),
                            ("caps_kernel", self.caps_kernel),
                            ("caps_stride", self.caps_stride)):
            if min(pair_) < 1:
                out.append(f"{name} entries must be >= 1, got {pair_}")
        if self.routing_iterations < 1:
            out.append("routing_iterations must be >= 1")
        if self.num_advanced < 1:
            out.append("num_advanced must be >= 1")
        if self.advanced_dim < 1:
            out.append("advanced_dim must be >= 1")
        if self.sequence_length < 1:
            out.append("sequence_length must be >= 1")
        if not self.use_lstm and self.sequence_length != 1:
            out.append("sequence_length must be 1 when the LSTM head is disabled")
        if self.use_lstm and self.lstm_units < 1:
            out.append("lstm_units must be >= 1")
        if not self.fnn_widths or self.fnn_widths[-1] != 1:
            out.append(f"fnn_widths must end in 1, got {self.fnn_widths}")
        if any(w < 1 for w in self.fnn_widths):
            out.append("fnn_widths entries must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            out.append(f"dropout must be in [0, 1), got {self.dropout}")
        if not out:
            # geometric feasibility, only meaningful once basics hold
            h, w = self.conv_out_hw
            if h < 1 or w < 1:
                out.append(
                    f"conv kernel {self.conv_kernel} / stride {self.conv_stride} "
                    f"does not fit a {self.window_length}x{self.in_channels} frame"
                )
            else:
                ch, cw = self.caps_out_hw
                if ch < 1 or cw < 1:
                    out.append(
                        f"capsule kernel {self.caps_kernel} / stride "
                        f"{self.caps_stride} does not fit the {h}x{w} feature maps"
                    )
        return out

    @property
    def conv_out_hw(self) -> tuple[int, int]:
        kh, kw = self.conv_kernel
        sh, sw = self.conv_stride
        return ((self.window_length - kh) // sh + 1,
                (self.in_channels - kw) // sw + 1)

    @property
    def caps_out_hw(self) -> tuple[int, int]:
        h, w = self.conv_out_hw
        kh, kw = self.caps_kernel
        sh, sw = self.caps_stride
        return ((h - kh) // sh + 1, (w - kw) // sw + 1)

    @property
    def num_basic_capsules(self) -> int:
        h, w = self.caps_out_hw
        return h * w * self.caps_channels

    @property
    def advanced_flat_size(self) -> int:
        return self.num_advanced * self.advanced_dim

    @property
    def head_input_size(self) -> int:
        return self.lstm_units if self.use_lstm else self.advanced_flat_size


@dataclass
class RoutingState:
    """Final routing logits and coupling coefficients for one forward pass."""

    logits: np.ndarray
    coupling: np.ndarray


@dataclass
class ForwardState:
    routing: RoutingState


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_parameters(config: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Seeded initialization; draw order is fixed by construction order.

    Convolution and fully connected weights use the symmetric uniform
    fan-based scheme, routing transforms are normal with sigma 0.05, and
    the LSTM forget-gate bias starts at 1 so memory is initially kept.
    """
    kh, kw = config.conv_kernel
    m = config.conv_filters
    params: dict[str, Tensor] = {}

    def put(name, arr):
        params[name] = Tensor(arr, requires_grad=True)

    put("conv.kernel", _glorot(rng, (kh, kw, 1, m), kh * kw, kh * kw * m))
    put("conv.bias", np.zeros(m))
    ckh, ckw = config.caps_kernel
    cm = config.caps_channels * config.caps_dim
    put("caps.kernel", _glorot(rng, (ckh, ckw, m, cm), ckh * ckw * m, ckh * ckw * cm))
    put("caps.bias", np.zeros(cm))
    put(
        "route.transform",
        rng.normal(
            0.0,
            0.05,
            size=(config.num_basic_capsules, config.num_advanced,
                  config.advanced_dim, config.caps_dim),
        ),
    )
    if config.use_lstm:
        f = config.advanced_flat_size
        u = config.lstm_units
        for gate in ("i", "f", "g", "o"):
            put(f"lstm.w_x{gate}", _glorot(rng, (f, u), f, u))
            put(f"lstm.w_h{gate}", _glorot(rng, (u, u), u, u))
            put(f"lstm.b_{gate}", np.ones(u) if gate == "f" else np.zeros(u))
    prev = config.head_input_size
    for li, width in enumerate(config.fnn_widths):
        put(f"fnn.{li}.weight", _glorot(rng, (prev, width), prev, width))
        put(f"fnn.{li}.bias", np.zeros(width))
        prev = width
    return params


def parameter_count(params: Mapping[str, Tensor]) -> int:
    return int(sum(t.data.size for t in params.values()))


def squash(s: Tensor, eps: float = SQUASH_EPS) -> Tensor:
    """Nonlinear length normalization of capsule vectors (last axis).

    v = (|s|^2 / (1 + |s|^2)) * s / |s|; short vectors shrink toward
    zero, long vectors approach unit length, direction is preserved.
    The eps guard keeps the zero vector mapped exactly to zero.
    """
    n2 = T.reduce_sum(T.mul(s, s), axis=-1, keepdims=True)
    denom = T.mul(T.add(n2, 1.0), T.sqrt(T.add(n2, eps)))
    return T.mul(s, T.div(n2, denom))


def _squash_np(s: np.ndarray, eps: float = SQUASH_EPS) -> np.ndarray:
    n2 = (s * s).sum(axis=-1, keepdims=True)
    return s * (n2 / ((1.0 + n2) * np.sqrt(n2 + eps)))


def _softmax_np(b: np.ndarray, axis: int) -> np.ndarray:
    z = b - b.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def capsule_transform(u: Tensor, w: Tensor) -> Tensor:
    """Per-pair linear votes: u (N,I,D) and w (I,J,A,D) give (N,I,J,A)."""
    if u.ndim != 3 or w.ndim != 4:
        raise ValueError(f"bad ranks for capsule transform: {u.shape}, {w.shape}")
    if u.shape[1] != w.shape[0] or u.shape[2] != w.shape[3]:
        raise ValueError(f"capsule transform mismatch: u {u.shape} vs w {w.shape}")
    out = np.einsum("ijad,nid->nija", w.data, u.data, optimize=True)

    def bw(g):
        if w.requires_grad:
            accumulate_grad(w, np.einsum("nija,nid->ijad", g, u.data, optimize=True))
        if u.requires_grad:
            accumulate_grad(u, np.einsum("nija,ijad->nid", g, w.data, optimize=True))

    return make_op(out, (u, w), bw)


def capsule_weighted_sum(u_hat: Tensor, coupling: np.ndarray) -> Tensor:
    """Coupling-weighted vote aggregation; coupling is a constant here.

    u_hat (N,I,J,A) with coupling (N,I,J) gives (N,J,A).  Because the
    coupling enters as a plain array, no gradient flows into the routing
    softmax, implementing the stop-gradient convention.
    """
    c = np.asarray(coupling, dtype=np.float64)
    if c.shape != u_hat.shape[:3]:
        raise ValueError(f"coupling shape {c.shape} does not match votes {u_hat.shape}")
    out = np.einsum("nij,nija->nja", c, u_hat.data, optimize=True)

    def bw(g):
        if u_hat.requires_grad:
            accumulate_grad(u_hat, np.einsum("nja,nij->nija", g, c, optimize=True))

    return make_op(out, (u_hat,), bw)


def routing_coefficients(
    u_hat_values: np.ndarray, iterations: int, trace: bool = False
):
    """Run routing-by-agreement on plain vote arrays.

    Logits start at zero.  Each iteration takes the softmax over the
    advanced-capsule axis, forms the weighted sums, squashes them, and
    adds each vote's agreement (dot product with the squashed output) to
    its logit.  Returns (coupling, logits) from the final iteration,
    where ``coupling`` is the softmax the final outputs were built from
    and ``logits`` includes the final agreement update.  With
    ``trace=True`` a per-iteration list of (coupling, logits) is
    returned as a third element.
    """
    uh = np.asarray(u_hat_values, dtype=np.float64)
    if iterations < 1:
        raise ValueError("routing needs at least one iteration")
    b = np.zeros(uh.shape[:3])
    c = None
    steps = []
    for _ in range(iterations):
        c = _softmax_np(b, axis=2)
        s = np.einsum("nij,nija->nja", c, uh, optimize=True)
        v = _squash_np(s)
        b = b + np.einsum("nija,nja->nij", uh, v, optimize=True)
        if trace:
            steps.append((c.copy(), b.copy()))
    if trace:
        return c, b, steps
    return c, b


def conv_features(frames: Tensor, params: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    """First stage: valid convolution over (N, window, channels, 1) + tanh."""
    return T.tanh(T.conv2d(frames, params["conv.kernel"], params["conv.bias"],
                           config.conv_stride))


def build_basic_capsules(maps: Tensor, params: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    """Second convolution, regrouped into squashed capsule vectors.

    The output channel axis holds caps_channels blocks of caps_dim; each
    spatial position of each block is one basic capsule, flattened to
    (N, num_basic, caps_dim) with the capsule dimension kept intact.
    """
    z = T.conv2d(maps, params["caps.kernel"], params["caps.bias"], config.caps_stride)
    n = z.shape[0]
    caps = T.reshape(z, (n, config.num_basic_capsules, config.caps_dim))
    return squash(caps)


def dynamic_routing(
    u: Tensor,
    params: Mapping[str, Tensor],
    config: ModelConfig,
    coupling_override: np.ndarray | None = None,
) -> tuple[Tensor, ForwardState]:
    """Route basic capsules to advanced capsules.

    The iterative agreement loop runs on detached vote values; only the
    final coupling-weighted sum and squash are recorded for gradients.
    ``coupling_override`` substitutes a fixed coupling array (used to
    hold the routing constant while probing the loss surface).
    """
    u_hat = capsule_transform(u, params["route.transform"])
    if coupling_override is not None:
        c = np.asarray(coupling_override, dtype=np.float64)
        b = np.zeros_like(c)
    else:
        c, b = routing_coefficients(u_hat.data, config.routing_iterations)
    s = capsule_weighted_sum(u_hat, c)
    v = squash(s)
    return v, ForwardState(routing=RoutingState(logits=b, coupling=c))


def lstm_forward(v_seq: Tensor, params: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    """Many-to-one LSTM over (B, S, F); returns the final hidden state (B, U)."""
    if v_seq.ndim != 3:
        raise ValueError(f"lstm input must be rank 3, got shape {v_seq.shape}")
    batch, steps, _ = v_seq.shape
    if steps < 1:
        raise ValueError("empty sequence")
    h = Tensor(np.zeros((batch, config.lstm_units)))
    c = Tensor(np.zeros((batch, config.lstm_units)))
    for t in range(steps):
        x = T.select_step(v_seq, t)
        gi = T.sigmoid(T.add(T.add(T.matmul(x, params["lstm.w_xi"]),
                                   T.matmul(h, params["lstm.w_hi"])), params["lstm.b_i"]))
        gf = T.sigmoid(T.add(T.add(T.matmul(x, params["lstm.w_xf"]),
                                   T.matmul(h, params["lstm.w_hf"])), params["lstm.b_f"]))
        gg = T.tanh(T.add(T.add(T.matmul(x, params["lstm.w_xg"]),
                                T.matmul(h, params["lstm.w_hg"])), params["lstm.b_g"]))
        go = T.sigmoid(T.add(T.add(T.matmul(x, params["lstm.w_xo"]),
                                   T.matmul(h, params["lstm.w_ho"])), params["lstm.b_o"]))
        c = T.add(T.mul(gf, c), T.mul(gi, gg))
        h = T.mul(go, T.tanh(c))
    return h


def regression_head(
    h: Tensor,
    params: Mapping[str, Tensor],
    config: ModelConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Fully connected stack ending in a single linear output per sample.

    Hidden layers use relu followed, in training mode, by inverted
    dropout; the final layer is affine with no activation.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train" and config.dropout > 0.0 and rng is None:
        raise ValueError("training mode with dropout needs an rng")
    z = h
    last = len(config.fnn_widths) - 1
    for li in range(len(config.fnn_widths)):
        z = T.add(T.matmul(z, params[f"fnn.{li}.weight"]), params[f"fnn.{li}.bias"])
        if li < last:
            z = T.relu(z)
            if mode == "train" and config.dropout > 0.0:
                z = T.dropout(z, config.dropout, rng)
    return T.reshape(z, (z.shape[0],))


def model_forward(
    frames,
    params: Mapping[str, Tensor],
    config: ModelConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    coupling_override: np.ndarray | None = None,
) -> tuple[Tensor, ForwardState]:
    """Full forward pass on a batch of frame sequences.

    ``frames`` has shape (B, S, window, channels); a single sequence
    (S, window, channels) is promoted to a batch of one.  Returns the
    per-sample scalar outputs (B,) and the routing state of the flat
    (B*S) frame batch.
    """
    x = frames if isinstance(frames, Tensor) else Tensor(frames)
    if x.ndim == 3:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 4:
        raise ValueError(f"frames must be rank 3 or 4, got shape {x.shape}")
    batch, steps, window, channels = x.shape
    if window != config.window_length or channels != config.in_channels:
        raise ValueError(
            f"frame geometry {window}x{channels} does not match config "
            f"{config.window_length}x{config.in_channels}"
        )
    if not config.use_lstm and steps != 1:
        raise ValueError("sequence length must be 1 when the LSTM head is disabled")
    flat = T.reshape(x, (batch * steps, window, channels, 1))
    maps = conv_features(flat, params, config)
    u = build_basic_capsules(maps, params, config)
    v, state = dynamic_routing(u, params, config, coupling_override)
    flat_v = T.reshape(v, (batch * steps, config.advanced_flat_size))
    if config.use_lstm:
        seq = T.reshape(flat_v, (batch, steps, config.advanced_flat_size))
        head_in = lstm_forward(seq, params, config)
    else:
        head_in = flat_v
    y = regression_head(head_in, params, config, mode, rng)
    return y, state


def predict(
    frames,
    params: Mapping[str, Tensor],
    config: ModelConfig,
    label_scale: float = 1.0,
) -> np.ndarray:
    """Inference-mode forward pass returning plain RUL estimates."""
    with T.no_grad():
        y, _ = model_forward(frames, params, config, mode="eval")
    return y.data * float(label_scale)
