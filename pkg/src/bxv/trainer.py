"""SGD training of baseline and Bayesian x-vector extractors."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from bxv.errors import DataError, NumericalError, ShapeError
from bxv.numkernel import RngStream
from bxv.varbayes import (
    GaussianPosterior,
    GaussianPrior,
    LossBreakdown,
    grad_mu,
    grad_rho,
    kl_closed_form,
    variational_loss,
)
from bxv.xvector import (
    LAYER_NAMES,
    NetworkConfig,
    NetworkState,
    cross_entropy,
    draw_weights,
    forward_with_weights,
    init_state,
    network_backward,
    network_forward,
    softmax,
)

log = logging.getLogger(__name__)

# RngStream.split keys; fixed so that baseline and Bayesian runs with the
# same seed share initial weights and chunk schedules.
INIT_STREAM, CHUNK_STREAM, NOISE_STREAM = 0, 1, 2


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    momentum: float = 0.9
    epochs: int = 50
    minibatch_size: int = 16
    chunk_min: int = 50
    chunk_max: int = 150
    mc_samples: int = 1
    kl_weight: float | None = None  # None -> 1 / minibatches per epoch
    sigma_p: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.chunk_min <= self.chunk_max:
            raise ValueError(f"need 0 < chunk_min <= chunk_max, got {self.chunk_min}, {self.chunk_max}")
        if self.minibatch_size < 1:
            raise ValueError("minibatch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.sigma_p <= 0:
            raise ValueError("sigma_p must be positive")


@dataclass
class Utterance:
    utt_id: str
    features: np.ndarray
    speaker: int

    @property
    def frames(self):
        return self.features.shape[0]


@dataclass
class Corpus:
    utterances: list
    speakers: list

    def __post_init__(self):
        n = len(self.speakers)
        for u in self.utterances:
            if not 0 <= u.speaker < n:
                raise DataError(f"utterance {u.utt_id} has speaker index {u.speaker}, outside 0..{n - 1}")

    @property
    def num_speakers(self):
        return len(self.speakers)

    @property
    def feature_dim(self):
        return self.utterances[0].features.shape[1]

    def __len__(self):
        return len(self.utterances)

    def by_id(self):
        return {u.utt_id: u for u in self.utterances}


@dataclass
class EpochRecord:
    epoch: int
    kl_term: float
    nll_term: float
    total: float
    accuracy: float


@dataclass
class TrainResult:
    state: NetworkState
    trace: list = field(default_factory=list)
    steps: list = field(default_factory=list)  # per-minibatch LossBreakdown


def check_corpus(corpus: Corpus, net_cfg: NetworkConfig, train_cfg: TrainConfig):
    if len(corpus) == 0:
        raise DataError("corpus is empty")
    if net_cfg.num_speakers != corpus.num_speakers:
        raise DataError(f"network has {net_cfg.num_speakers} outputs, corpus has {corpus.num_speakers} speakers")
    if corpus.feature_dim != net_cfg.feature_dim:
        raise DataError(f"corpus features are {corpus.feature_dim}-dim, network expects {net_cfg.feature_dim}")
    if train_cfg.chunk_min < net_cfg.receptive_field:
        raise DataError(f"chunk_min {train_cfg.chunk_min} is below the receptive field {net_cfg.receptive_field}")
    need = net_cfg.receptive_field + train_cfg.chunk_min
    for u in corpus.utterances:
        if u.frames < need:
            raise DataError(f"utterance {u.utt_id} has {u.frames} frames, fewer than {need}")


def chunk_sampler(corpus: Corpus, cfg: TrainConfig, rng):
    """One epoch of minibatches; each is a list of ``(chunk, speaker)`` pairs.

    Every utterance is visited once in shuffled order and contributes one
    chunk with uniform length in ``[chunk_min, chunk_max]`` (clamped to the
    utterance) at a uniform start offset. The last batch may be short.
    """
    if len(corpus) == 0:
        raise DataError("corpus is empty")
    batch = []
    for idx in rng.permutation(len(corpus)):
        utt = corpus.utterances[idx]
        length = min(int(rng.integers(cfg.chunk_min, cfg.chunk_max)), utt.frames)
        start = int(rng.integers(0, utt.frames - length))
        batch.append((utt.features[start:start + length], utt.speaker))
        if len(batch) == cfg.minibatch_size:
            yield batch
            batch = []
    if batch:
        yield batch


def num_minibatches(corpus: Corpus, cfg: TrainConfig):
    return -(-len(corpus) // cfg.minibatch_size)


def sgd_step(params: dict, grads: dict, cfg: TrainConfig, velocity: dict):
    """Momentum SGD, in place: ``v = momentum * v + g``, ``p -= lr * v``."""
    updates = {}
    for name, g in grads.items():
        if name not in params:
            raise ShapeError(f"gradient for unknown tensor {name!r}")
        p = params[name]
        if np.shape(g) != p.shape:
            raise ShapeError(f"gradient for {name} has shape {np.shape(g)}, parameter has {p.shape}")
        v = velocity.get(name)
        v = g if v is None or cfg.momentum == 0 else cfg.momentum * v + g
        new = p - cfg.lr * v
        if not np.all(np.isfinite(new)):
            raise NumericalError(f"non-finite update for tensor {name}")
        updates[name] = (new, v)
    for name, (new, v) in updates.items():
        params[name][...] = new
        velocity[name] = v


def minibatch_gradients(state: NetworkState, batch, kl_weight, noise_rng, mc_samples=1):
    """Loss breakdown, tensor gradients and correct-prediction count for one minibatch.

    The data term is the summed cross-entropy of the batch, averaged over
    ``mc_samples`` weight draws (each draw shared by the whole batch).
    """
    cfg = state.config
    bayes = bool(state.posteriors)
    mode = "sample" if bayes else "mean"
    layer_sums = {name: None for name in LAYER_NAMES}
    per_draw = {name: [] for name in state.posteriors}
    eps_used = {name: [] for name in state.posteriors}
    nll = 0.0
    correct = 0
    for _ in range(mc_samples):
        weights, samples = draw_weights(state, mode, noise_rng)
        draw_sum = {}
        draw_nll = 0.0
        for chunk, label in batch:
            logits, tape = forward_with_weights(cfg, weights, chunk, samples)
            loss, dlogits = cross_entropy(logits, label)
            draw_nll += loss
            correct += int(np.argmax(logits) == label)
            for name, g in network_backward(state, tape, dlogits).items():
                draw_sum[name] = g if name not in draw_sum else draw_sum[name] + g
        nll += draw_nll
        for name in LAYER_NAMES:
            g = draw_sum[name]
            if name in state.posteriors:
                post = state.posteriors[name]
                per_draw[name].append(g[: post.shape[0]])
                eps_used[name].append(samples[name].eps)
                g = g[post.shape[0]:]  # deterministic bias row, if any
                if g.size == 0:
                    continue
            layer_sums[name] = g if layer_sums[name] is None else layer_sums[name] + g
    nll /= mc_samples
    correct /= mc_samples

    grads = {}
    kl = 0.0
    for name in LAYER_NAMES:
        if name in state.posteriors:
            post, prior = state.posteriors[name], state.priors[name]
            kl += kl_closed_form(post, prior)
            grads[f"{name}.mu"] = grad_mu(post, prior, per_draw[name], kl_weight)
            grads[f"{name}.rho"] = grad_rho(post, prior, per_draw[name], eps_used[name], kl_weight)
            if name in state.params:
                grads[f"{name}.bias"] = layer_sums[name] / mc_samples
        else:
            grads[f"{name}.weight"] = layer_sums[name] / mc_samples
    loss = variational_loss(kl, nll, kl_weight, mc_samples) if bayes else LossBreakdown(0.0, nll, nll, 1, 0.0)
    return loss, grads, correct


def _run(state, corpus, train_cfg, kl_weight, noise_rng, label):
    check_corpus(corpus, state.config, train_cfg)
    chunk_rng = RngStream(train_cfg.seed).split(CHUNK_STREAM)
    result = TrainResult(state)
    velocity = {}
    params = state.tensors()
    for epoch in range(1, train_cfg.epochs + 1):
        sums = np.zeros(3)
        batches = 0
        correct = 0.0
        seen = 0
        for batch in chunk_sampler(corpus, train_cfg, chunk_rng):
            loss, grads, hits = minibatch_gradients(state, batch, kl_weight, noise_rng, train_cfg.mc_samples)
            if not np.isfinite(loss.total):
                raise NumericalError(f"{label} training diverged in epoch {epoch}")
            try:
                sgd_step(params, grads, train_cfg, velocity)
            except NumericalError as exc:
                raise NumericalError(f"{label} training diverged in epoch {epoch}: {exc}") from exc
            result.steps.append(loss)
            sums += (loss.kl_term, loss.nll_term, loss.total)
            batches += 1
            correct += hits
            seen += len(batch)
        means = sums / batches
        rec = EpochRecord(epoch, float(means[0]), float(means[1]), float(means[2]), correct / seen)
        result.trace.append(rec)
        log.info("%s epoch %d: total=%.4f acc=%.3f", label, epoch, rec.total, rec.accuracy)
    return result


def resolve_kl_weight(corpus, train_cfg):
    if train_cfg.kl_weight is not None:
        return float(train_cfg.kl_weight)
    return 1.0 / num_minibatches(corpus, train_cfg)


def train_baseline(corpus: Corpus, net_cfg: NetworkConfig, train_cfg: TrainConfig, init=None) -> TrainResult:
    """Cross-entropy training of a fully deterministic network.

    Variational flags in ``net_cfg`` are ignored. ``init`` optionally gives
    the starting state (copied).
    """
    net_cfg = net_cfg.deterministic()
    if init is not None:
        state = init.copy()
        if state.posteriors:
            raise ValueError("baseline initial state must be deterministic")
    else:
        state = init_state(net_cfg, RngStream(train_cfg.seed).split(INIT_STREAM))
    return _run(state, corpus, train_cfg, 0.0, None, "baseline")


def make_prior_from_baseline(baseline: NetworkState, layer: str, sigma_p: float, variational_bias=True):
    """Prior centred on a trained baseline layer with constant scale ``sigma_p``."""
    if layer not in baseline.params:
        raise KeyError(f"baseline has no deterministic layer {layer!r}")
    if sigma_p <= 0:
        raise ValueError("sigma_p must be positive")
    w = baseline.params[layer]
    mu = w if variational_bias else w[:-1]
    return GaussianPrior(mu.copy(), sigma_p)


def bayesian_state_from_baseline(net_cfg: NetworkConfig, baseline: NetworkState, sigma_p, rng):
    """Fresh network whose variational layers start at, and are pulled towards, the baseline."""
    state = init_state(net_cfg, rng, sigma_p)
    for name in net_cfg.variational_layers:
        prior = make_prior_from_baseline(baseline, name, sigma_p, net_cfg.variational_bias)
        state.priors[name] = prior
        state.posteriors[name] = GaussianPosterior.from_sigma(prior.mu, net_cfg.sigma_init)
        if not net_cfg.variational_bias:
            state.params[name] = baseline.params[name][-1:].copy()
    return state


def train_bayesian(corpus: Corpus, net_cfg: NetworkConfig, train_cfg: TrainConfig,
                   baseline: NetworkState | None = None, init=None, noise=None) -> TrainResult:
    """Minimise ``kl_weight * KL + summed minibatch cross-entropy``.

    Without a baseline the prior is centred on the initial weights. ``noise``
    overrides the weight-noise stream (pass ``ConstantNoise(0.0)`` to pin the
    weights to their means).
    """
    if not net_cfg.variational_layers:
        raise ValueError("network config has no variational layers")
    root = RngStream(train_cfg.seed)
    if init is not None:
        state = init.copy()
    elif baseline is not None:
        state = bayesian_state_from_baseline(net_cfg, baseline, train_cfg.sigma_p, root.split(INIT_STREAM))
    else:
        state = init_state(net_cfg, root.split(INIT_STREAM), train_cfg.sigma_p)
    if set(state.posteriors) != set(net_cfg.variational_layers):
        raise ValueError("initial state does not match the configured variational layers")
    kl_weight = resolve_kl_weight(corpus, train_cfg)
    noise_rng = noise if noise is not None else root.split(NOISE_STREAM)
    return _run(state, corpus, train_cfg, kl_weight, noise_rng, "bayesian")


def predictive_inference(state: NetworkState, features, j_samples=8, rng=None):
    """Class posterior averaged over ``j_samples`` weight draws."""
    if j_samples < 1:
        raise ValueError("j_samples must be >= 1")
    if not state.posteriors:
        logits, _ = network_forward(state, features)
        return softmax(logits)
    acc = np.zeros(state.config.num_speakers)
    for _ in range(j_samples):
        logits, _ = network_forward(state, features, "sample", rng)
        acc += softmax(logits)
    return acc / j_samples


def chunk_accuracy(state: NetworkState, corpus: Corpus, cfg: TrainConfig, seed=0, mode="mean"):
    """Accuracy on one freshly drawn chunk per utterance."""
    rng = RngStream(seed)
    hits = total = 0
    for batch in chunk_sampler(corpus, cfg, rng):
        for chunk, label in batch:
            logits, _ = network_forward(state, chunk, mode, rng.split(total))
            hits += int(np.argmax(logits) == label)
            total += 1
    return hits / total
