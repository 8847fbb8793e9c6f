"""TDNN x-vector network: spliced frame layers, statistics pooling, segment layers.

Every affine layer stores an augmented ``(in_dim + 1, out_dim)`` weight
matrix whose last row is the bias. Layers listed in
``NetworkConfig.variational_layers`` hold a :class:`GaussianPosterior`
instead of fixed weights and draw their weights per forward pass.

Forward passes return a :class:`ForwardTape` which :func:`network_backward`
consumes to produce exact gradients of the cross-entropy loss with respect
to the weights that were actually used.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from bxv.errors import DataError, ShapeError
from bxv.varbayes import GaussianPosterior, GaussianPrior, sample_weights

FRAME_LAYERS = ("frame1", "frame2", "frame3", "frame4", "frame5")
SEGMENT_LAYERS = ("segment6", "segment7", "softmax")
LAYER_NAMES = FRAME_LAYERS + SEGMENT_LAYERS

FRAME_CONTEXTS = ((-2, -1, 0, 1, 2), (-2, 0, 2), (-3, 0, 3), (0,), (0,))
VAR_FLOOR = 1e-10


@dataclass(frozen=True)
class TdnnLayerSpec:
    name: str
    context: tuple
    dim_below: int
    out_dim: int
    variational: bool = False

    def __post_init__(self):
        ctx = tuple(int(c) for c in self.context)
        if not ctx or any(b <= a for a, b in zip(ctx, ctx[1:])):
            raise ValueError(f"{self.name}: context offsets must be strictly increasing, got {ctx}")
        object.__setattr__(self, "context", ctx)

    @property
    def in_dim(self):
        return self.dim_below * len(self.context)

    @property
    def span(self):
        return self.context[-1] - self.context[0]


@dataclass(frozen=True)
class NetworkConfig:
    """Layer sizes and contexts. Defaults are a desk-scale version of the
    standard x-vector topology; :meth:`full_size` gives the full-size one."""

    feature_dim: int = 10
    num_speakers: int = 8
    frame_dims: tuple = (32, 32, 32, 32, 64)
    frame_contexts: tuple = FRAME_CONTEXTS
    embed_dim: int = 16
    segment7_dim: int = 16
    variational_layers: tuple = ("frame1",)
    variational_bias: bool = True
    sigma_init: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "frame_dims", tuple(int(d) for d in self.frame_dims))
        object.__setattr__(self, "frame_contexts", tuple(tuple(int(o) for o in c) for c in self.frame_contexts))
        object.__setattr__(self, "variational_layers", tuple(self.variational_layers))
        if len(self.frame_dims) != 5 or len(self.frame_contexts) != 5:
            raise ValueError("exactly five frame layers are expected")
        unknown = set(self.variational_layers) - set(LAYER_NAMES)
        if unknown:
            raise ValueError(f"unknown variational layers: {sorted(unknown)}")
        if self.num_speakers < 1:
            raise ValueError("num_speakers must be >= 1")

    @classmethod
    def full_size(cls, num_speakers, feature_dim=24, **kw):
        return cls(feature_dim=feature_dim, num_speakers=num_speakers,
                   frame_dims=(512, 512, 512, 512, 1500), embed_dim=512, segment7_dim=512, **kw)

    def deterministic(self):
        return replace(self, variational_layers=())

    @property
    def stats_dim(self):
        return 2 * self.frame_dims[-1]

    @property
    def receptive_field(self):
        return 1 + sum(c[-1] - c[0] for c in self.frame_contexts)

    def layers(self):
        specs = []
        below = self.feature_dim
        for name, ctx, out in zip(FRAME_LAYERS, self.frame_contexts, self.frame_dims):
            specs.append(TdnnLayerSpec(name, ctx, below, out, name in self.variational_layers))
            below = out
        below = self.stats_dim
        for name, out in zip(SEGMENT_LAYERS, (self.embed_dim, self.segment7_dim, self.num_speakers)):
            specs.append(TdnnLayerSpec(name, (0,), below, out, name in self.variational_layers))
            below = out
        return specs

    def layer(self, name):
        for spec in self.layers():
            if spec.name == name:
                return spec
        raise KeyError(f"unknown layer {name!r}")


@dataclass
class NetworkState:
    """Parameters of one network.

    ``params[name]`` is the augmented weight matrix of a deterministic layer.
    For a variational layer ``posteriors[name]`` covers the augmented matrix,
    or only the weight rows when the config keeps biases deterministic, in
    which case ``params[name]`` holds the ``(1, out_dim)`` bias row.
    """

    config: NetworkConfig
    params: dict = field(default_factory=dict)
    posteriors: dict = field(default_factory=dict)
    priors: dict = field(default_factory=dict)

    def copy(self):
        return NetworkState(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.posteriors.items()},
            dict(self.priors),
        )

    def tensors(self):
        """Flat ``name -> array`` view of every trainable tensor (shared, not copied)."""
        out = {}
        for name in LAYER_NAMES:
            if name in self.posteriors:
                out[f"{name}.mu"] = self.posteriors[name].mu
                out[f"{name}.rho"] = self.posteriors[name].rho
                if name in self.params:
                    out[f"{name}.bias"] = self.params[name]
            else:
                out[f"{name}.weight"] = self.params[name]
        return out

    def mean_weights(self, name):
        """Augmented weight matrix with variational layers at their posterior mean."""
        if name not in self.posteriors:
            return self.params[name]
        mu = self.posteriors[name].mu
        return np.vstack([mu, self.params[name]]) if name in self.params else mu

    def as_deterministic(self):
        """Deterministic network whose weights are the posterior means."""
        cfg = self.config.deterministic()
        return NetworkState(cfg, {n: self.mean_weights(n).copy() for n in LAYER_NAMES})


def glorot_uniform(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
    return np.vstack([w, np.zeros((1, fan_out))])


def init_state(config: NetworkConfig, rng, sigma_p: float = 0.1) -> NetworkState:
    """Glorot-uniform weights, zero biases; variational layers start at
    ``sigma_init`` with a prior centred on their initial mean."""
    state = NetworkState(config)
    for spec in config.layers():
        weights = glorot_uniform(rng, spec.in_dim, spec.out_dim)
        if spec.variational:
            mu = weights if config.variational_bias else weights[:-1]
            if not config.variational_bias:
                state.params[spec.name] = weights[-1:].copy()
            state.posteriors[spec.name] = GaussianPosterior.from_sigma(mu, config.sigma_init)
            state.priors[spec.name] = GaussianPrior(mu, sigma_p)
        else:
            state.params[spec.name] = weights
    return state


def splice(x, context):
    """Rows ``t + offset`` for every offset, concatenated; no padding."""
    span = context[-1] - context[0]
    t_out = x.shape[0] - span
    if t_out < 1:
        raise DataError(f"context {context} needs at least {span + 1} frames, got {x.shape[0]}")
    base = -context[0]
    return np.hstack([x[base + o: base + o + t_out] for o in context])


def relu(x):
    return np.maximum(x, 0.0)


def tdnn_forward(spec: TdnnLayerSpec, weights, x):
    """Splice, affine map, ReLU. Output has ``T - span`` frames."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.dim_below:
        raise ShapeError(f"{spec.name}: expected frames x {spec.dim_below} input, got {x.shape}")
    if weights.shape != (spec.in_dim + 1, spec.out_dim):
        raise ShapeError(f"{spec.name}: weights {weights.shape} do not match {(spec.in_dim + 1, spec.out_dim)}")
    spliced = splice(x, spec.context)
    return relu(spliced @ weights[:-1] + weights[-1])


def stats_pool(x, var_floor=VAR_FLOOR):
    """Per-dimension mean and population std, concatenated into a ``(1, 2d)`` row."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"stats pooling needs a non-empty frames x dim matrix, got {x.shape}")
    mean = x.mean(axis=0)
    var = (x**2).mean(axis=0) - mean**2
    std = np.sqrt(np.maximum(var, var_floor))
    return np.concatenate([mean, std])[None, :]


def cross_entropy(logits, label):
    """``-log softmax(logits)[label]`` and its gradient ``softmax - onehot``."""
    logits = np.asarray(logits, dtype=np.float64)
    flat = logits.reshape(-1)
    if not 0 <= label < flat.size:
        raise ValueError(f"label {label} out of range for {flat.size} classes")
    m = flat.max()
    logz = m + np.log(np.sum(np.exp(flat - m)))
    loss = float(logz - flat[label])
    p = np.exp(flat - logz)
    p[label] -= 1.0
    return loss, p.reshape(logits.shape)


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ForwardTape:
    config: NetworkConfig
    weights: dict
    samples: dict
    inputs: dict
    preacts: dict
    pooled_input: np.ndarray
    pooled: np.ndarray


def draw_weights(state: NetworkState, mode="mean", rng=None):
    """Concrete augmented weights for every layer, plus the draws that made them."""
    if mode not in ("mean", "sample"):
        raise ValueError(f"mode must be 'mean' or 'sample', got {mode!r}")
    weights, samples = {}, {}
    for name in LAYER_NAMES:
        if name in state.posteriors:
            post = state.posteriors[name]
            if mode == "sample":
                sample = sample_weights(post, rng)
                samples[name] = sample
                w = sample.w
            else:
                w = post.mu
            weights[name] = np.vstack([w, state.params[name]]) if name in state.params else w
        else:
            weights[name] = state.params[name]
    return weights, samples


def forward_with_weights(config: NetworkConfig, weights, features, samples=None):
    x = features.values if hasattr(features, "values") else np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != config.feature_dim:
        raise ShapeError(f"expected frames x {config.feature_dim} features, got {np.shape(x)}")
    if x.shape[0] < config.receptive_field:
        raise DataError(f"utterance has {x.shape[0]} frames; the network needs at least {config.receptive_field}")
    inputs, preacts = {}, {}
    h = x
    for spec in config.layers()[:5]:
        w = weights[spec.name]
        spliced = splice(h, spec.context)
        pre = spliced @ w[:-1] + w[-1]
        inputs[spec.name] = spliced
        preacts[spec.name] = pre
        h = relu(pre)
    pooled_input = h
    h = stats_pool(h)
    pooled = h
    for name in SEGMENT_LAYERS:
        w = weights[name]
        inputs[name] = h
        pre = h @ w[:-1] + w[-1]
        preacts[name] = pre
        h = relu(pre)
    logits = preacts["softmax"][0]
    tape = ForwardTape(config, weights, samples or {}, inputs, preacts, pooled_input, pooled)
    return logits, tape


def network_forward(state: NetworkState, features, mode="mean", rng=None):
    """Logits ``(N,)`` and a tape for :func:`network_backward`."""
    weights, samples = draw_weights(state, mode, rng)
    return forward_with_weights(state.config, weights, features, samples)


def _affine_grads(inp, dpre):
    return np.vstack([inp.T @ dpre, dpre.sum(axis=0, keepdims=True)])


def network_backward(state: NetworkState, tape: ForwardTape, dlogits):
    """Gradients of the data loss w.r.t. every augmented weight matrix used.

    For variational layers the entry is the per-sample buffer ``G`` (the
    gradient w.r.t. the sampled weights), to be combined by
    :func:`bxv.varbayes.grad_mu` / :func:`bxv.varbayes.grad_rho`.
    """
    if tape.config != state.config:
        raise ShapeError("tape was recorded with a different network configuration")
    dlogits = np.asarray(dlogits, dtype=np.float64).reshape(1, -1)
    if dlogits.shape[1] != state.config.num_speakers:
        raise ShapeError(f"dlogits has {dlogits.shape[1]} entries, expected {state.config.num_speakers}")
    grads = {}
    dpre = dlogits
    for name in reversed(SEGMENT_LAYERS):
        w = tape.weights[name]
        grads[name] = _affine_grads(tape.inputs[name], dpre)
        dh = dpre @ w[:-1].T
        below = SEGMENT_LAYERS.index(name) - 1
        if below >= 0:
            dpre = dh * (tape.preacts[SEGMENT_LAYERS[below]] > 0)
    # dh is now the gradient w.r.t. the pooled [mean; std] row
    x = tape.pooled_input
    t_len, d = x.shape
    mean = x.mean(axis=0)
    var = (x**2).mean(axis=0) - mean**2
    std = np.sqrt(np.maximum(var, VAR_FLOOR))
    dmean = dh[0, :d]
    dstd = dh[0, d:] * (var > VAR_FLOOR)
    dx = dmean / t_len + (x - mean) * (dstd / (t_len * std))
    specs = state.config.layers()[:5]
    for i in reversed(range(5)):
        spec = specs[i]
        w = tape.weights[spec.name]
        dpre = dx * (tape.preacts[spec.name] > 0)
        grads[spec.name] = _affine_grads(tape.inputs[spec.name], dpre)
        if i == 0:
            break
        dspliced = dpre @ w[:-1].T
        t_in = tape.preacts[specs[i - 1].name].shape[0]
        dx = np.zeros((t_in, spec.dim_below))
        t_out = dpre.shape[0]
        base = -spec.context[0]
        for k, o in enumerate(spec.context):
            dx[base + o: base + o + t_out] += dspliced[:, k * spec.dim_below:(k + 1) * spec.dim_below]
    return grads


def extract_embedding(state: NetworkState, features, mode="mean", rng=None, j_samples=1):
    """segment6 pre-activation; in sample mode, averaged over ``j_samples`` draws."""
    if mode == "mean":
        _, tape = network_forward(state, features, "mean")
        return tape.preacts["segment6"][0].copy()
    acc = None
    for _ in range(j_samples):
        _, tape = network_forward(state, features, "sample", rng)
        emb = tape.preacts["segment6"][0]
        acc = emb.copy() if acc is None else acc + emb
    return acc / j_samples
