"""Side-by-side comparison of training strategies on one benchmark.

Five strategies share the same train/test splits and seed:

  zero-shot-fixed    frozen random descriptors, no training at all
  linear-probe       linear softmax head on frozen pooled features
  full-finetune      adapter and head trained jointly, no text branch
  learnable-context  shared trainable context tokens, frozen per-class
                     name token, contrastive cross-entropy
  metd               the full two-stage descriptor method

The benchmark builders live here too: the default benchmark places two
anti-correlated subcluster means (>= 120 degrees apart) per class, which
is the geometry a single descriptor per class cannot cover; the
distorted variant pushes every feature through a fixed well-conditioned
linear map.
"""

import math
import time
from dataclasses import dataclass, replace

import numpy as np

from . import losses, numerics
from .data import (
    EmbeddingDataset,
    apply_linear_map,
    dataset_from_means,
    oversample_balance,
)
from .errors import ContractViolation
from .inference import evaluate, report_from_labels, temporal_mean_pool
from .model import (
    STREAM_HARNESS,
    Model,
    build_adapter,
    build_model,
    build_text_encoder,
    encode_image,
    encode_text,
    encode_text_token_gradient,
)
from .training import (
    ADAPTIVE,
    EpochStats,
    StageConfig,
    init_optimizer_state,
    optimizer_step,
    run_stage1,
    run_stage2,
)

ZERO_SHOT = "zero-shot-fixed"
LINEAR_PROBE = "linear-probe"
FULL_FINETUNE = "full-finetune"
LEARNABLE_CONTEXT = "learnable-context"
METD = "metd"
STRATEGY_KINDS = (ZERO_SHOT, LINEAR_PROBE, FULL_FINETUNE, LEARNABLE_CONTEXT, METD)

# Sub-stream tags under STREAM_HARNESS.
_SUB_PROBE = 1
_SUB_CONTEXT = 2
_SUB_DISTORT = 3
_SUB_BENCH = 4


@dataclass(frozen=True)
class Strategy:
    """A strategy kind plus optional K/M overrides for the metd variant."""

    kind: str
    n_subclasses: int | None = None
    n_tokens: int | None = None

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ContractViolation(
                f"unknown strategy {self.kind!r}, expected one of {STRATEGY_KINDS}"
            )
        for name in ("n_subclasses", "n_tokens"):
            value = getattr(self, name)
            if value is not None and (int(value) != value or value < 1):
                raise ContractViolation(f"{name} must be a positive integer or None")


@dataclass(frozen=True)
class HarnessSettings:
    """Shared hyperparameters for every strategy in one comparison.

    The temperature is softer than the library-wide default of 0.01:
    with unit-norm synthetic features the per-sample losses saturate at
    0.01 within an epoch, which freezes the descriptors before they can
    split across subclusters.  0.055 keeps the gradients live at this
    scale.  Stage epochs are desk-scale (30/30); the stage-2 learning
    rate is the library default.
    """

    token_dim: int = 16
    embed_dim: int = 16
    context_length: int = 4
    n_subclasses: int = 2
    n_tokens: int = 4
    encoder_kind: str = "identity-mean"
    residual: bool = True
    temperature: float = 0.055
    stage1: StageConfig = None
    stage2: StageConfig = None
    probe_epochs: int = 40
    probe_lr: float = 0.05
    oversample: bool = False

    def __post_init__(self):
        if self.stage1 is None:
            object.__setattr__(
                self, "stage1", StageConfig.stage_one(epochs=30, batch_size=32)
            )
        if self.stage2 is None:
            object.__setattr__(
                self, "stage2", StageConfig.stage_two(epochs=30, batch_size=32)
            )
        if self.stage1.stage != 1 or self.stage2.stage != 2:
            raise ContractViolation("stage configs assigned to the wrong slots")
        if int(self.probe_epochs) != self.probe_epochs or self.probe_epochs < 1:
            raise ContractViolation("probe_epochs must be a positive integer")
        if not (self.probe_lr > 0 and math.isfinite(self.probe_lr)):
            raise ContractViolation("probe_lr must be > 0")


@dataclass(frozen=True)
class StrategyResult:
    kind: str
    war: float
    uar: float
    wall_time: float
    echo: dict


@dataclass(frozen=True)
class ComparisonReport:
    rows: list[StrategyResult]


BENCHMARK_SIGMA = 0.13
BENCHMARK_INTRA_DEG = 135.0  # angle between a class's two subcluster means
BENCHMARK_STEAL_DEG = 55.0  # minority mean to next class's majority mean
BENCHMARK_COUNTS = (200, 50)  # majority/minority samples per subcluster


def default_benchmark(seed: int = 7) -> tuple[EmbeddingDataset, EmbeddingDataset]:
    """3 classes x 2 anti-correlated subclusters, 200 train / 50 test per class.

    Each class holds a majority subcluster (80% of its samples) and a
    minority one, with the two means 135 degrees apart, so the class
    centroid is a poor summary of either.  The geometry is fixed up to a
    seeded random rotation and cyclically symmetric: majority means form
    a 120-degree ring, and each class's minority mean sits only 55
    degrees from the NEXT class's majority mean (every other cross-class
    pair is at least 82 degrees apart).  A single direction per class
    therefore has to trade its own minority off against a neighbor's
    encroaching majority, and with 4:1 sample imbalance plain averaging
    settles that trade in the majority's favor: the minority mode ends
    up owned by whichever direction happens to sit closest.  One
    direction per subcluster resolves it cleanly, and the count-aware
    loss weighting is what keeps the minority direction trained despite
    seeing a quarter of the samples.
    """
    rng = np.random.default_rng([STREAM_HARNESS, _SUB_BENCH, seed])
    frame, _ = np.linalg.qr(rng.normal(size=(16, 5)))
    e1, e2 = frame.T[0], frame.T[1]
    lifts = frame.T[2:]
    majors = [
        math.cos(2.0 * math.pi * i / 3.0) * e1
        + math.sin(2.0 * math.pi * i / 3.0) * e2
        for i in range(3)
    ]
    cos_intra = math.cos(math.radians(BENCHMARK_INTRA_DEG))
    cos_steal = math.cos(math.radians(BENCHMARK_STEAL_DEG))
    # minority_i = a*major_i + b*major_{i+1} + c*lift_i, solved so that
    # <minority_i, major_i> = cos_intra and <minority_i, major_{i+1}> = cos_steal
    # given the majors' pairwise cosine of -1/2.
    b = (cos_steal + 0.5 * cos_intra) / 0.75
    a = cos_intra + 0.5 * b
    c = math.sqrt(1.0 - (a * a + b * b - a * b))
    means = np.stack(
        [
            np.stack(
                [
                    majors[i],
                    a * majors[i] + b * majors[(i + 1) % 3] + c * lifts[i],
                ]
            )
            for i in range(3)
        ]
    )
    return dataset_from_means(means, BENCHMARK_COUNTS, BENCHMARK_SIGMA, rng)


def distortion_matrix(
    dim: int, seed: int = 101, min_scale: float = 0.8, max_scale: float = 1.25
) -> np.ndarray:
    """A fixed invertible map: random rotations around a log-spaced scaling.

    Condition number is exactly max_scale/min_scale, so the distortion
    bends the feature geometry without collapsing any direction.
    """
    if dim < 1:
        raise ContractViolation(f"dim must be >= 1, got {dim}")
    if not (0 < min_scale <= max_scale):
        raise ContractViolation("need 0 < min_scale <= max_scale")
    rng = np.random.default_rng([STREAM_HARNESS, _SUB_DISTORT, seed])
    q1, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    q2, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    scales = np.exp(np.linspace(math.log(min_scale), math.log(max_scale), dim))
    return q1 @ np.diag(scales) @ q2.T


def distorted_benchmark(
    seed: int = 7, distortion_seed: int = 101
) -> tuple[EmbeddingDataset, EmbeddingDataset]:
    """The default benchmark with every feature pushed through a fixed map."""
    train, test = default_benchmark(seed)
    matrix = distortion_matrix(train.feature_dim, distortion_seed)
    return apply_linear_map(train, matrix), apply_linear_map(test, matrix)


def _pooled_features(units) -> np.ndarray:
    return np.vstack([temporal_mean_pool(unit.frames) for unit in units])


def _shuffled_batches(rng, n_units, batch_size):
    order = rng.permutation(n_units)
    for start in range(0, n_units, batch_size):
        yield order[start : start + batch_size]


def _train_head(
    train: EmbeddingDataset,
    settings: HarnessSettings,
    seed: int,
    train_adapter: bool,
):
    """Linear softmax-cross-entropy head, optionally with a joint adapter."""
    units = train.units()
    n_classes = train.n_classes
    dim = train.feature_dim
    adapter = build_adapter(dim, dim, residual=True)
    head_weight = np.zeros((n_classes, dim))
    head_bias = np.zeros(n_classes)
    params = {"head.weight": head_weight, "head.bias": head_bias}
    if train_adapter:
        params["adapter.weight"] = adapter.weight
        params["adapter.bias"] = adapter.bias
    state = init_optimizer_state(params, ADAPTIVE)
    batch_size = settings.stage1.batch_size
    for epoch in range(1, settings.probe_epochs + 1):
        rng = np.random.default_rng([STREAM_HARNESS, _SUB_PROBE, seed, epoch])
        for batch in _shuffled_batches(rng, len(units), batch_size):
            grads = {name: np.zeros_like(arr) for name, arr in params.items()}
            for index in batch:
                unit = units[int(index)]
                pooled = temporal_mean_pool(unit.frames)
                v = encode_image(adapter, pooled) if train_adapter else pooled
                logits = head_weight @ v + head_bias
                probs = numerics.stable_softmax(logits)
                dz = probs.copy()
                dz[unit.label] -= 1.0
                grads["head.weight"] += np.outer(dz, v)
                grads["head.bias"] += dz
                if train_adapter:
                    dv = head_weight.T @ dz
                    grads["adapter.weight"] += np.outer(dv, pooled)
                    grads["adapter.bias"] += dv
            for name in grads:
                grads[name] /= len(batch)
            optimizer_step(params, grads, state, settings.probe_lr, 0.0)
    return adapter, head_weight, head_bias


def _head_report(test, adapter, head_weight, head_bias, use_adapter):
    truths, preds = [], []
    for unit in test.units():
        pooled = temporal_mean_pool(unit.frames)
        v = encode_image(adapter, pooled) if use_adapter else pooled
        logits = head_weight @ v + head_bias
        truths.append(unit.label)
        preds.append(int(np.argmax(logits)))
    return report_from_labels(truths, preds, test.n_classes)


def _train_learnable_context(
    train: EmbeddingDataset, settings: HarnessSettings, seed: int
):
    """Shared trainable context + frozen per-class name token, contrastive CE.

    Mirrors the prompt-learning baseline: one context block of M tokens
    is shared by all classes and is the only trainable state; each class
    keeps a fixed random identity token.
    """
    if settings.token_dim != train.feature_dim and settings.encoder_kind == "identity-mean":
        raise ContractViolation(
            "identity-mean context baseline needs token_dim == feature_dim"
        )
    n_classes = train.n_classes
    rng = np.random.default_rng([STREAM_HARNESS, _SUB_CONTEXT, seed])
    context = rng.normal(0.0, 0.02, size=(settings.n_tokens, settings.token_dim))
    names = rng.normal(0.0, 0.02, size=(n_classes, settings.token_dim))
    encoder = build_text_encoder(
        settings.encoder_kind, settings.token_dim, settings.embed_dim, seed
    )
    length = settings.n_tokens + 1
    units = train.units()
    params = {"context": context}
    state = init_optimizer_state(params, settings.stage1.optimizer)
    config = settings.stage1
    tau = settings.temperature
    for epoch in range(1, config.epochs + 1):
        rng_epoch = np.random.default_rng(
            [STREAM_HARNESS, _SUB_CONTEXT, seed, epoch]
        )
        for batch in _shuffled_batches(rng_epoch, len(units), config.batch_size):
            embeddings = np.vstack(
                [
                    encode_text(encoder, context, names[i][None, :])
                    for i in range(n_classes)
                ]
            )
            grad_context = np.zeros_like(context)
            for index in batch:
                unit = units[int(index)]
                v = temporal_mean_pool(unit.frames)
                sims = np.array(
                    [
                        numerics.cosine_similarity(v, embeddings[i])
                        for i in range(n_classes)
                    ]
                )
                probs = numerics.stable_softmax(sims / tau)
                coeff = probs.copy()
                coeff[unit.label] -= 1.0
                coeff /= tau
                for i in range(n_classes):
                    _, grad_t = losses._cosine_gradients(v, embeddings[i], sims[i])
                    pulled = encode_text_token_gradient(
                        encoder, coeff[i] * grad_t, length
                    )
                    grad_context += pulled
            grad_context /= len(batch)
            optimizer_step(
                params,
                {"context": grad_context},
                state,
                config.learning_rate,
                config.weight_decay,
            )
    return encoder, context, names


def _context_report(test, encoder, context, names):
    embeddings = np.vstack(
        [
            encode_text(encoder, context, names[i][None, :])
            for i in range(names.shape[0])
        ]
    )
    truths, preds = [], []
    for unit in test.units():
        v = temporal_mean_pool(unit.frames)
        sims = [
            numerics.cosine_similarity(v, embeddings[i])
            for i in range(names.shape[0])
        ]
        truths.append(unit.label)
        preds.append(int(np.argmax(sims)))
    return report_from_labels(truths, preds, test.n_classes)


def build_strategy_model(
    train: EmbeddingDataset,
    settings: HarnessSettings,
    seed: int,
    n_subclasses: int,
    n_tokens: int,
) -> Model:
    return build_model(
        n_classes=train.n_classes,
        n_subclasses=n_subclasses,
        n_tokens=n_tokens,
        token_dim=settings.token_dim,
        embed_dim=settings.embed_dim,
        feature_dim=train.feature_dim,
        context_length=settings.context_length,
        encoder_kind=settings.encoder_kind,
        residual=settings.residual,
        temperature=settings.temperature,
        seed=seed,
    )


def train_metd(
    train: EmbeddingDataset,
    settings: HarnessSettings,
    seed: int,
    n_subclasses: int | None = None,
    n_tokens: int | None = None,
) -> tuple[Model, list[EpochStats], list[EpochStats]]:
    """Run the full two-stage pipeline; returns the trained model and traces."""
    k = n_subclasses if n_subclasses is not None else settings.n_subclasses
    m = n_tokens if n_tokens is not None else settings.n_tokens
    fitted = oversample_balance(train, seed) if settings.oversample else train
    model = build_strategy_model(train, settings, seed, k, m)
    _, trace1 = run_stage1(model, fitted, replace(settings.stage1, seed=seed))
    _, trace2 = run_stage2(model, fitted, replace(settings.stage2, seed=seed))
    return model, trace1, trace2


def run_strategy(
    strategy: Strategy,
    splits: tuple[EmbeddingDataset, EmbeddingDataset],
    seed: int,
    settings: HarnessSettings | None = None,
) -> StrategyResult:
    """Train and evaluate one strategy on a (train, test) split pair."""
    if settings is None:
        settings = HarnessSettings()
    train, test = splits
    if train.n_classes != test.n_classes or train.feature_dim != test.feature_dim:
        raise ContractViolation("train/test splits disagree on classes or dims")
    started = time.perf_counter()
    echo = {"seed": str(seed)}
    if strategy.kind == ZERO_SHOT:
        model = build_strategy_model(train, settings, seed, 1, settings.n_tokens)
        report = evaluate(test, model)
        echo["K"] = "1"
        echo["M"] = str(settings.n_tokens)
    elif strategy.kind == LINEAR_PROBE:
        adapter, w, b = _train_head(train, settings, seed, train_adapter=False)
        report = _head_report(test, adapter, w, b, use_adapter=False)
        echo["epochs"] = str(settings.probe_epochs)
        echo["lr"] = format(settings.probe_lr, "g")
    elif strategy.kind == FULL_FINETUNE:
        adapter, w, b = _train_head(train, settings, seed, train_adapter=True)
        report = _head_report(test, adapter, w, b, use_adapter=True)
        echo["epochs"] = str(settings.probe_epochs)
        echo["lr"] = format(settings.probe_lr, "g")
    elif strategy.kind == LEARNABLE_CONTEXT:
        encoder, context, names = _train_learnable_context(train, settings, seed)
        report = _context_report(test, encoder, context, names)
        echo["M"] = str(settings.n_tokens)
        echo["epochs"] = str(settings.stage1.epochs)
    else:
        k = strategy.n_subclasses or settings.n_subclasses
        m = strategy.n_tokens or settings.n_tokens
        model, _, _ = train_metd(train, settings, seed, k, m)
        report = evaluate(test, model)
        echo["K"] = str(k)
        echo["M"] = str(m)
        echo["epochs"] = f"{settings.stage1.epochs}+{settings.stage2.epochs}"
    wall = time.perf_counter() - started
    return StrategyResult(
        kind=strategy.kind,
        war=report.war,
        uar=report.uar,
        wall_time=wall,
        echo=echo,
    )


def compare_all(
    splits: tuple[EmbeddingDataset, EmbeddingDataset],
    strategies: list[Strategy],
    seed: int,
    settings: HarnessSettings | None = None,
) -> ComparisonReport:
    """Run every strategy on identical splits with the identical seed."""
    if not strategies:
        raise ContractViolation("strategy list is empty")
    rows = [run_strategy(s, splits, seed, settings) for s in strategies]
    return ComparisonReport(rows=rows)


def format_comparison(report: ComparisonReport) -> str:
    """Aligned table, then one key=value line per strategy.

    Wall times are measurements, not deterministic outputs; they appear
    only in the key=value block.
    """
    width = max(len(r.kind) for r in report.rows) + 2
    lines = [f"{'strategy':<{width}}war     uar"]
    for row in report.rows:
        lines.append(f"{row.kind:<{width}}{row.war:<8.4f}{row.uar:.4f}")
    lines.append("")
    for row in report.rows:
        extras = " ".join(f"{k}={v}" for k, v in sorted(row.echo.items()))
        lines.append(
            f"strategy={row.kind} war={row.war:.6f} uar={row.uar:.6f} "
            f"wall_time={row.wall_time:.3f} {extras}"
        )
    return "\n".join(lines)
