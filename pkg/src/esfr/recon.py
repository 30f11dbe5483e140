"""Reconstruction network: fully connected ReLU net, input dropout, cosine
reconstruction loss with output centering/normalization, analytic gradients,
and Adam.

The loss for a batch of preprocessed targets z and network outputs y is

    mean_i [ 1 - zhat_i . u_i ],   u_i = (y_i - ybar) / ||y_i - ybar||

where ybar is the batch mean of the outputs, i.e. the network output goes
through the same centering + l2-normalization as its input before the cosine
comparison. Gradients are exact, including the batch-mean and normalization
terms. All math is float64.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import EPS_NORM, DegenerateVectorWarning

_as_batch = lambda b: np.asarray(getattr(b, "vectors", b), dtype=np.float64)  # noqa: E731


class NumericOverflowError(Exception):
    """A forward pass produced non-finite activations."""


@dataclass(frozen=True)
class ArchSpec:
    """Layer widths of the reconstruction net.

    layer_dims holds every layer's output width in order; the final width
    must equal the input (embedding) dimension so the net reconstructs its
    input space. ReLU on every layer except the last (identity).
    """

    input_dim: int
    layer_dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if self.input_dim < 1 or any(d < 1 for d in dims):
            raise ValueError("all layer widths must be positive")
        if len(dims) < 2:
            raise ValueError("need at least 2 layers so a second-to-last hidden layer exists")
        if dims[-1] != self.input_dim:
            raise ValueError("last layer width must equal the embedding dim")

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims)

    def fan_pairs(self) -> list[tuple[int, int]]:
        ins = (self.input_dim,) + self.layer_dims[:-1]
        return list(zip(ins, self.layer_dims))


def default_arch(dim: int) -> ArchSpec:
    """Four equal-width layers, each as wide as the embedding."""
    return ArchSpec(dim, (dim,) * 4)


def bottleneck_arch(dim: int, hidden: tuple[int, ...]) -> ArchSpec:
    """Arbitrary hidden widths with the output pinned to the embedding dim."""
    return ArchSpec(dim, tuple(hidden) + (dim,))


@dataclass
class ReconModule:
    """Weights and biases of the reconstruction net. Mutated by training."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    arch: ArchSpec
    rng_seed: int

    def parameters(self) -> list[np.ndarray]:
        params = []
        for w, b in zip(self.weights, self.biases):
            params.append(w)
            params.append(b)
        return params

    def copy(self) -> "ReconModule":
        return ReconModule(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.arch,
            self.rng_seed,
        )


@dataclass(frozen=True)
class DropoutMask:
    """Inverted-dropout multiplier: entries are 0 or 1/(1-rate)."""

    mask: np.ndarray
    rate: float

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")


def draw_dropout_mask(rng: np.random.Generator, shape: tuple[int, ...], rate: float) -> DropoutMask:
    """One mask draw per coordinate; kept entries scaled so the mask has unit mean."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    keep = rng.random(shape) >= rate
    return DropoutMask(keep / (1.0 - rate), rate)


@dataclass
class ForwardTape:
    """Per-layer pre-activations and activations for one batch.

    activations[0] is the (masked) input; activations[-1] the output;
    activations[-2] the second-to-last layer's representation used for LID.
    """

    activations: list[np.ndarray]
    preactivations: list[np.ndarray]

    @property
    def output(self) -> np.ndarray:
        return self.activations[-1]

    @property
    def penultimate(self) -> np.ndarray:
        return self.activations[-2]

    def middle_hidden(self) -> np.ndarray:
        # middle of the ReLU layers, e.g. the 400-wide layer of 800-400-800-D
        n_hidden = len(self.preactivations) - 1
        return self.activations[(n_hidden - 1) // 2 + 1]


@dataclass
class Gradients:
    """Per-layer loss gradients matching a module's weights/biases."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def parameters(self) -> list[np.ndarray]:
        params = []
        for w, b in zip(self.weights, self.biases):
            params.append(w)
            params.append(b)
        return params


@dataclass
class ClassifierHead:
    """Affine map from reconstructed embedding to class logits."""

    w: np.ndarray  # (n_classes, dim)
    b: np.ndarray  # (n_classes,)

    def parameters(self) -> list[np.ndarray]:
        return [self.w, self.b]

    def logits(self, outputs: np.ndarray) -> np.ndarray:
        return outputs @ self.w.T + self.b


def init_glorot(arch: ArchSpec, seed: int) -> ReconModule:
    """Glorot-uniform weights (bound sqrt(6/(fan_in+fan_out))), zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in arch.fan_pairs():
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ReconModule(weights, biases, arch, int(seed))


def init_head(dim: int, n_classes: int, seed: int) -> ClassifierHead:
    """Glorot-uniform classifier weights, zero bias."""
    rng = np.random.default_rng(seed)
    limit = np.sqrt(6.0 / (dim + n_classes))
    return ClassifierHead(rng.uniform(-limit, limit, size=(n_classes, dim)), np.zeros(n_classes))


def forward(module: ReconModule, batch, mask: DropoutMask | None = None) -> ForwardTape:
    """Run the net on a batch; with mask=None the pass is deterministic."""
    x = _as_batch(batch)
    if x.shape[1] != module.arch.input_dim:
        raise ValueError(f"batch dim {x.shape[1]} != arch input dim {module.arch.input_dim}")
    if mask is not None:
        if mask.mask.shape != x.shape:
            raise ValueError("dropout mask shape must match the batch")
        x = x * mask.mask
    activations = [x]
    preacts = []
    last = module.arch.n_layers - 1
    for k, (w, b) in enumerate(zip(module.weights, module.biases)):
        z = activations[-1] @ w + b
        preacts.append(z)
        activations.append(z if k == last else np.maximum(z, 0.0))
    if not np.isfinite(activations[-1]).all():
        raise NumericOverflowError("non-finite activations in forward pass")
    return ForwardTape(activations, preacts)


def _centered_unit_outputs(outputs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Center outputs on their batch mean and l2-normalize rows."""
    v = outputs - outputs.mean(axis=0)
    norms = np.linalg.norm(v, axis=1)
    if (norms < EPS_NORM).any():
        warnings.warn("degenerate output norms clamped in reconstruction loss", DegenerateVectorWarning, stacklevel=3)
    clamped = np.maximum(norms, EPS_NORM)
    return v, clamped, v / clamped[:, None]


def _unit_targets(targets: np.ndarray) -> np.ndarray:
    norms = np.maximum(np.linalg.norm(targets, axis=1), EPS_NORM)
    return targets / norms[:, None]


def reconstruction_loss(tape: ForwardTape, targets) -> float:
    """Mean cosine distance between targets and center+normalized outputs."""
    t = _as_batch(targets)
    y = tape.output
    if y.shape != t.shape:
        raise ValueError("output/target shape mismatch")
    _, _, u = _centered_unit_outputs(y)
    cos = np.einsum("ij,ij->i", _unit_targets(t), u)
    return float(np.mean(1.0 - cos))


def _loss_output_grad(tape: ForwardTape, t: np.ndarray) -> np.ndarray:
    """d(reconstruction_loss)/d(raw outputs), exact through center+normalize."""
    y = tape.output
    n = y.shape[0]
    _, vnorm, u = _centered_unit_outputs(y)
    that = _unit_targets(t)
    proj = np.einsum("ij,ij->i", that, u)
    g = -(that - proj[:, None] * u) / (n * vnorm[:, None])
    return g - g.mean(axis=0)


def _backprop(module: ReconModule, tape: ForwardTape, delta: np.ndarray) -> Gradients:
    """Propagate an output gradient back through the tape."""
    gw = [None] * module.arch.n_layers
    gb = [None] * module.arch.n_layers
    for k in range(module.arch.n_layers - 1, -1, -1):
        if k < module.arch.n_layers - 1:
            delta = delta * (tape.preactivations[k] > 0.0)
        gw[k] = tape.activations[k].T @ delta
        gb[k] = delta.sum(axis=0)
        if k > 0:
            delta = delta @ module.weights[k].T
    return Gradients(gw, gb)


def backward(module: ReconModule, tape: ForwardTape, targets) -> Gradients:
    """Exact gradient of reconstruction_loss w.r.t. every module parameter."""
    t = _as_batch(targets)
    if tape.output.shape != t.shape:
        raise ValueError("output/target shape mismatch")
    return _backprop(module, tape, _loss_output_grad(tape, t))


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log softmax probability of the true labels."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def semi_loss(tape: ForwardTape, targets, support_labels: np.ndarray, head: ClassifierHead, lam: float) -> float:
    """Reconstruction loss plus lam * support cross-entropy.

    The batch must carry the support samples in its first rows; the head
    consumes the raw (un-preprocessed) network outputs.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    loss = reconstruction_loss(tape, targets)
    if lam > 0:
        n_s = len(support_labels)
        loss += lam * cross_entropy(head.logits(tape.output[:n_s]), support_labels)
    return loss


def semi_backward(
    module: ReconModule,
    tape: ForwardTape,
    targets,
    support_labels: np.ndarray,
    head: ClassifierHead,
    lam: float,
) -> tuple[Gradients, Gradients]:
    """Joint gradients of the semi loss for the module and the head.

    At lam == 0 the cross-entropy term is skipped entirely, so the module
    gradients are bit-identical to backward().
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    t = _as_batch(targets)
    delta = _loss_output_grad(tape, t)
    head_grads = Gradients([np.zeros_like(head.w)], [np.zeros_like(head.b)])
    if lam > 0:
        n_s = len(support_labels)
        y_s = tape.output[:n_s]
        r = _softmax(head.logits(y_s))
        r[np.arange(n_s), support_labels] -= 1.0
        r /= n_s
        delta = delta.copy()
        delta[:n_s] += lam * (r @ head.w)
        head_grads = Gradients([lam * (r.T @ y_s)], [lam * r.sum(axis=0)])
    return _backprop(module, tape, delta), head_grads


@dataclass
class AdamState:
    """Bias-corrected Adam moments for a fixed list of parameters."""

    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float = 1e-3) -> "AdamState":
        return cls(
            [np.zeros_like(p) for p in params],
            [np.zeros_like(p) for p in params],
            lr=lr,
        )


def adam_update(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> None:
    """One in-place Adam step over a flat parameter list."""
    if len(params) != len(state.first_moment) or len(params) != len(grads):
        raise ValueError("parameter/gradient/state length mismatch")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape:
            raise ValueError("parameter/gradient shape mismatch")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def adam_step(module: ReconModule, grads: Gradients, state: AdamState) -> tuple[ReconModule, AdamState]:
    """Adam over a module's own parameters; updates in place and returns both."""
    adam_update(module.parameters(), grads.parameters(), state)
    return module, state
