"""Adaptation pipeline: per-member reconstruction training with LID-based
early stopping, ensemble averaging of adapted embeddings, the
semi-supervised variant, lambda tuning, and training-dynamics tracing.

Each ensemble member trains on the full support-plus-query batch (episodes
are small, so full-batch removes ordering nondeterminism). The LID used for
stopping is the summed per-point estimate over the second-to-last layer's
representations, recomputed after every optimizer step; training stops the
first time it rises above the previous iteration's value. Trace rows record
the deterministic (dropout-free) reconstruction loss at each iterate.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import classifiers
from .core import EmbeddingSet, FewShotTask, l2_normalize_rows, preprocess_task
from .lid import LidConfig, LidError, lid_summary
from .recon import (
    AdamState,
    ArchSpec,
    ClassifierHead,
    DropoutMask,
    ForwardTape,
    Gradients,
    NumericOverflowError,
    ReconModule,
    adam_update,
    backward,
    default_arch,
    draw_dropout_mask,
    forward,
    init_glorot,
    init_head,
    reconstruction_loss,
    semi_backward,
)

LAMBDA_GRID = (0.0, 0.1, 0.2, 0.4, 0.8, 1.6)

MODE_ESFR = "esfr"
MODE_SEMI = "esfr-semi"
STOP_POST = "post-increase"
STOP_PRE = "pre-increase"
TAP_OUTPUT = "output"
TAP_MIDDLE = "middle-hidden"

STOP_LID = "lid-increase"
STOP_MAX = "max-iterations"


class EsfrError(Exception):
    """Base class for adaptation failures."""


class MemberAbortError(EsfrError):
    """One ensemble member could not finish training."""


class OutOfGridLambdaWarning(UserWarning):
    """A lambda outside the standard tuning grid was accepted."""


@dataclass(frozen=True)
class EsfrConfig:
    """Hyperparameters of the adaptation scheme."""

    ensemble_size: int = 5
    max_iterations: int = 200
    dropout_rate: float = 0.5
    lid_m: int = 20
    lr: float = 1e-3
    mode: str = MODE_ESFR
    lambda_: float = 0.0
    stop_weights: str = STOP_POST
    arch: ArchSpec | None = None
    embedding_tap: str = TAP_OUTPUT
    use_shift: bool = False
    mask_samples: int = 1
    lid_dropout: bool = False
    normalize_members: bool = True
    zero_distance_policy: str = "drop-duplicates"

    def __post_init__(self):
        if self.ensemble_size < 1:
            raise ValueError("ensemble_size must be >= 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.lambda_ < 0:
            raise ValueError("lambda must be >= 0")
        if self.mode not in (MODE_ESFR, MODE_SEMI):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.stop_weights not in (STOP_POST, STOP_PRE):
            raise ValueError(f"unknown stop_weights {self.stop_weights!r}")
        if self.embedding_tap not in (TAP_OUTPUT, TAP_MIDDLE):
            raise ValueError(f"unknown embedding_tap {self.embedding_tap!r}")
        if self.mask_samples < 1:
            raise ValueError("mask_samples must be >= 1")

    def lid_config(self) -> LidConfig:
        return LidConfig(self.lid_m, self.zero_distance_policy)

    def resolve_arch(self, dim: int) -> ArchSpec:
        if self.arch is None:
            return default_arch(dim)
        if self.arch.input_dim != dim:
            raise ValueError(f"arch input dim {self.arch.input_dim} != task dim {dim}")
        return self.arch


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    recon_loss: float
    lid_sum: float
    lid_mean: float
    probe_acc: float | None = None


@dataclass
class TrainingTrace:
    """Per-iteration loss/LID records for one member, plus the stop outcome."""

    rows: list[TraceRow] = field(default_factory=list)
    stop_iteration: int = 0
    stop_reason: str = STOP_MAX


@dataclass
class MemberResult:
    module: ReconModule
    trace: TrainingTrace
    head: ClassifierHead | None = None


@dataclass
class AdaptedTask:
    """Ensemble-averaged adapted embeddings plus the per-member traces."""

    support: EmbeddingSet
    query: EmbeddingSet
    source_config: EsfrConfig
    traces: list[TrainingTrace]
    member_failures: int = 0

    def as_task(self, original: FewShotTask) -> FewShotTask:
        """Reattach the original episode metadata to the adapted vectors."""
        return FewShotTask(
            support=self.support,
            query=self.query,
            query_labels=original.query_labels,
            n_way=original.n_way,
            k_shot=original.k_shot,
            query_counts=original.query_counts,
        )


def member_streams(seed: int) -> tuple[np.random.SeedSequence, np.random.SeedSequence, np.random.SeedSequence]:
    """Independent init/mask/head randomness for one member.

    Keeping the streams separate is what makes the semi variant with
    lambda=0 bit-identical to the plain one: the head draws never touch the
    mask stream.
    """
    init_ss, mask_ss, head_ss = np.random.SeedSequence(seed).spawn(3)
    return init_ss, mask_ss, head_ss


def derive_member_seed(master_seed: int, member_index: int) -> int:
    """Deterministic per-member seed from the master seed."""
    return int(np.random.SeedSequence([master_seed, member_index]).generate_state(1)[0])


def _tap_vectors(tape: ForwardTape, tap: str) -> np.ndarray:
    return tape.output if tap == TAP_OUTPUT else tape.middle_hidden()


def _train_grads(module, tape, targets, n_support, labels, head, lam):
    if lam > 0:
        grads, head_grads = semi_backward(module, tape, targets, labels, head, lam)
        return grads, head_grads
    return backward(module, tape, targets), None


def _run_member(
    task: FewShotTask,
    cfg: EsfrConfig,
    seed: int,
    early_stop: bool = True,
    probe_fn=None,
    probe_every: int = 1,
) -> MemberResult:
    """Train one reconstruction module on a preprocessed task.

    With early_stop, training halts at the first LID increase (weights per
    cfg.stop_weights); otherwise it runs to max_iterations recording probe
    accuracy every probe_every iterations via probe_fn(tape).
    """
    batch = np.vstack([task.support.vectors, task.query.vectors])
    targets = batch
    n_support = len(task.support)
    arch = cfg.resolve_arch(task.dim)
    lid_cfg = cfg.lid_config()

    init_ss, mask_ss, head_ss = member_streams(seed)
    module = init_glorot(arch, int(init_ss.generate_state(1)[0]))
    mask_rng = np.random.default_rng(mask_ss)
    use_ce = cfg.mode == MODE_SEMI and cfg.lambda_ > 0
    head = None
    if cfg.mode == MODE_SEMI:
        head = init_head(arch.layer_dims[-1], task.n_way, int(head_ss.generate_state(1)[0]))
    lam = cfg.lambda_ if use_ce else 0.0

    params = module.parameters() + (head.parameters() if use_ce else [])
    state = AdamState.for_params(params, lr=cfg.lr)

    def measure(iteration: int) -> tuple[ForwardTape, float]:
        mask = None
        if cfg.lid_dropout and cfg.dropout_rate > 0:
            mask = draw_dropout_mask(mask_rng, batch.shape, cfg.dropout_rate)
        try:
            tape = forward(module, batch, mask)
            stats = lid_summary(tape.penultimate, lid_cfg)
        except (NumericOverflowError, LidError) as exc:
            raise MemberAbortError(f"iteration {iteration}: {exc}") from exc
        return tape, stats

    trace = TrainingTrace()

    def record(iteration: int, tape: ForwardTape, stats) -> None:
        probe = None
        if probe_fn is not None and iteration % probe_every == 0:
            probe = probe_fn(tape)
        trace.rows.append(
            TraceRow(iteration, reconstruction_loss(tape, targets), stats.lid_sum, stats.lid_mean, probe)
        )

    tape0, stats0 = measure(0)
    record(0, tape0, stats0)
    prev_lid = stats0.lid_sum
    snapshot = None

    for j in range(cfg.max_iterations):
        if early_stop and cfg.stop_weights == STOP_PRE:
            snapshot = module.copy()
        try:
            if cfg.mask_samples == 1:
                mask = draw_dropout_mask(mask_rng, batch.shape, cfg.dropout_rate) if cfg.dropout_rate > 0 else None
                tape = forward(module, batch, mask)
                grads, head_grads = _train_grads(module, tape, targets, n_support, task.support.labels, head, lam)
            else:
                acc = None
                for _ in range(cfg.mask_samples):
                    mask = draw_dropout_mask(mask_rng, batch.shape, cfg.dropout_rate) if cfg.dropout_rate > 0 else None
                    tape = forward(module, batch, mask)
                    g, hg = _train_grads(module, tape, targets, n_support, task.support.labels, head, lam)
                    gs = g.parameters() + (hg.parameters() if hg is not None else [])
                    acc = gs if acc is None else [a + b for a, b in zip(acc, gs)]
                scale = 1.0 / cfg.mask_samples
                flat = [a * scale for a in acc]
                nmod = len(module.parameters())
                grads = Gradients(flat[0:nmod:2], flat[1:nmod:2])
                head_grads = Gradients([flat[nmod]], [flat[nmod + 1]]) if use_ce else None
        except NumericOverflowError as exc:
            raise MemberAbortError(f"iteration {j}: {exc}") from exc

        flat_grads = grads.parameters() + (head_grads.parameters() if head_grads is not None else [])
        adam_update(params, flat_grads, state)

        it = j + 1
        tape_eval, stats = measure(it)
        record(it, tape_eval, stats)
        if early_stop and stats.lid_sum > prev_lid:
            trace.stop_iteration = it
            trace.stop_reason = STOP_LID
            if cfg.stop_weights == STOP_PRE:
                module = snapshot
            return MemberResult(module, trace, head)
        prev_lid = stats.lid_sum

    trace.stop_iteration = cfg.max_iterations
    trace.stop_reason = STOP_MAX
    return MemberResult(module, trace, head)


def train_member(task: FewShotTask, cfg: EsfrConfig, seed: int) -> tuple[ReconModule, TrainingTrace]:
    """Train one member with early stopping on a preprocessed task."""
    result = _run_member(task, cfg, seed, early_stop=True)
    return result.module, result.trace


def adapt(task: FewShotTask, cfg: EsfrConfig, master_seed: int = 0) -> AdaptedTask:
    """Run the full adaptation scheme on a raw task.

    Preprocessing (optional shift, centering, l2-normalization) happens
    internally; ensemble members train independently from seeds derived
    from the master seed; each member's tap vectors are l2-normalized,
    averaged in member-index order, and the mean is l2-normalized again
    for downstream classification.
    """
    pre = preprocess_task(task, use_shift=cfg.use_shift)
    batch = np.vstack([pre.support.vectors, pre.query.vectors])
    outputs = []
    traces = []
    failures = 0
    for i in range(cfg.ensemble_size):
        seed = derive_member_seed(master_seed, i)
        try:
            result = _run_member(pre, cfg, seed, early_stop=True)
        except MemberAbortError as exc:
            warnings.warn(f"ensemble member {i} aborted: {exc}", stacklevel=2)
            failures += 1
            continue
        traces.append(result.trace)
        vecs = _tap_vectors(forward(result.module, batch), cfg.embedding_tap)
        outputs.append(l2_normalize_rows(vecs) if cfg.normalize_members else vecs)
    if not outputs:
        raise EsfrError("all ensemble members aborted")
    mean = np.stack(outputs).mean(axis=0)
    final = l2_normalize_rows(mean)
    n_s = len(pre.support)
    return AdaptedTask(
        support=EmbeddingSet(final[:n_s], pre.support.labels, task.n_way),
        query=EmbeddingSet(final[n_s:], None, task.n_way),
        source_config=cfg,
        traces=traces,
        member_failures=failures,
    )


def adapt_semi(task: FewShotTask, cfg: EsfrConfig, master_seed: int = 0) -> AdaptedTask:
    """Adaptation with the joint support-classification loss.

    Per-member affine heads are trained jointly with the module and
    discarded afterwards; only embeddings are exported. With lambda=0 the
    result is bit-identical to adapt() under the same seeds.
    """
    if cfg.mode != MODE_SEMI:
        cfg = replace(cfg, mode=MODE_SEMI)
    if cfg.lambda_ not in LAMBDA_GRID:
        warnings.warn(
            f"lambda={cfg.lambda_} is outside the standard grid {LAMBDA_GRID}",
            OutOfGridLambdaWarning,
            stacklevel=2,
        )
    return adapt(task, cfg, master_seed)


def tune_lambda(
    validation_tasks: list[FewShotTask],
    cfg: EsfrConfig,
    classifier=None,
    master_seed: int = 0,
    grid: tuple[float, ...] = LAMBDA_GRID,
) -> float:
    """Pick the grid lambda with the best mean validation accuracy.

    Ties break toward the smaller lambda. The classifier defaults to the
    nearest-prototype baseline.
    """
    if not validation_tasks:
        raise ValueError("validation task list must not be empty")
    classify = classifier if classifier is not None else classifiers.nn_classify
    best_lam, best_acc = None, -np.inf
    for lam in sorted(grid):
        accs = []
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", OutOfGridLambdaWarning)
            for t_index, vt in enumerate(validation_tasks):
                adapted = adapt_semi(vt, replace(cfg, lambda_=lam), master_seed=derive_member_seed(master_seed, t_index))
                pred = classify(adapted.as_task(vt))
                accs.append(float(np.mean(pred.labels == vt.query_labels)))
        acc = float(np.mean(accs))
        if acc > best_acc:
            best_lam, best_acc = lam, acc
    return best_lam


def trace_probe(
    task: FewShotTask,
    cfg: EsfrConfig,
    classifier=None,
    probe_every: int = 1,
    master_seed: int = 0,
) -> TrainingTrace:
    """Full-length training trace with periodic probe accuracies.

    Runs one member to max_iterations without early stopping; at every
    probe_every-th iteration the configured tap's representations are
    l2-normalized and scored with the probe classifier (default: nearest
    prototype) against the held-back query labels. Diagnostics only.
    """
    if probe_every < 1:
        raise ValueError("probe_every must be >= 1")
    classify = classifier if classifier is not None else classifiers.nn_classify
    pre = preprocess_task(task, use_shift=cfg.use_shift)
    n_s = len(pre.support)

    def probe(tape: ForwardTape) -> float:
        vecs = l2_normalize_rows(_tap_vectors(tape, cfg.embedding_tap))
        probe_task = FewShotTask(
            support=EmbeddingSet(vecs[:n_s], pre.support.labels, task.n_way),
            query=EmbeddingSet(vecs[n_s:], None, task.n_way),
            query_labels=task.query_labels,
            n_way=task.n_way,
            k_shot=task.k_shot,
            query_counts=task.query_counts,
        )
        pred = classify(probe_task)
        return float(np.mean(pred.labels == task.query_labels))

    result = _run_member(pre, cfg, derive_member_seed(master_seed, 0), early_stop=False, probe_fn=probe, probe_every=probe_every)
    return result.trace
