"""Model state: descriptor token bank, frozen text encoder, image adapter.

The classifier is a bank of learnable descriptor token grids (one grid of
``n_tokens`` tokens per class/subclass pair) sharing one frozen context
block, a frozen mean-pooling text encoder that turns a token sequence
into an embedding, and a trainable affine adapter that maps image
features into the same embedding space.  Training never touches the
context block or the encoder; stage 1 updates only the descriptor
tokens, stage 2 only the adapter.

Checkpoint file format: a header line, then one ``key<TAB>value`` line
per tensor in a fixed order.  Vector values are comma-separated decimals
with 17 significant digits (lossless for float64); matrices join their
rows with ``;``.  Token vectors are keyed ``bank.tokens[i][k][m]`` and
context vectors ``bank.context[c]``.
"""

import re
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, ParseError

TOKEN_INIT_STD = 0.02

IDENTITY_MEAN = "identity-mean"
PROJECTED_MEAN = "projected-mean"
ENCODER_KINDS = (IDENTITY_MEAN, PROJECTED_MEAN)

# Seed-stream tags: every consumer of randomness seeds its generator with
# default_rng([tag, seed, ...]) so distinct concerns never share a stream.
STREAM_BANK = 1
STREAM_PROJECTION = 2
STREAM_SYNTH = 3
STREAM_SHUFFLE = 4
STREAM_OVERSAMPLE = 5
STREAM_HARNESS = 6
STREAM_FDCHECK = 7


def _require_positive(**named_values):
    for name, value in named_values.items():
        if int(value) != value or value < 1:
            raise ContractViolation(f"{name} must be a positive integer, got {value!r}")


@dataclass
class DescriptorBank:
    """Learnable descriptor tokens plus the shared frozen context block.

    ``tokens`` has shape (n_classes, n_subclasses, n_tokens, token_dim)
    and is the only trainable array here.  ``context`` has shape
    (context_length, token_dim) and stays fixed after initialization.
    """

    tokens: np.ndarray
    context: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        self.context = np.asarray(self.context, dtype=np.float64)
        if self.tokens.ndim != 4:
            raise ContractViolation(
                f"tokens must be 4-D (classes, subclasses, tokens, dim), "
                f"got shape {self.tokens.shape}"
            )
        if self.context.ndim != 2:
            raise ContractViolation(
                f"context must be 2-D (length, dim), got shape {self.context.shape}"
            )
        if self.context.shape[1] != self.tokens.shape[3]:
            raise ContractViolation(
                f"context dim {self.context.shape[1]} != token dim {self.tokens.shape[3]}"
            )
        if not (np.all(np.isfinite(self.tokens)) and np.all(np.isfinite(self.context))):
            raise ContractViolation("bank contains non-finite entries")

    @property
    def n_classes(self) -> int:
        return self.tokens.shape[0]

    @property
    def n_subclasses(self) -> int:
        return self.tokens.shape[1]

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[2]

    @property
    def token_dim(self) -> int:
        return self.tokens.shape[3]

    @property
    def context_length(self) -> int:
        return self.context.shape[0]


def build_bank(
    n_classes: int,
    n_subclasses: int,
    n_tokens: int,
    token_dim: int,
    context_length: int,
    seed: int,
) -> DescriptorBank:
    """Initialize a bank with N(0, 0.02^2) tokens and context.

    Deterministic in ``seed``: the same arguments always produce
    bit-identical arrays.
    """
    _require_positive(
        n_classes=n_classes,
        n_subclasses=n_subclasses,
        n_tokens=n_tokens,
        token_dim=token_dim,
        context_length=context_length,
    )
    rng = np.random.default_rng([STREAM_BANK, seed])
    tokens = rng.normal(
        0.0, TOKEN_INIT_STD, size=(n_classes, n_subclasses, n_tokens, token_dim)
    )
    context = rng.normal(0.0, TOKEN_INIT_STD, size=(context_length, token_dim))
    return DescriptorBank(tokens=tokens, context=context)


@dataclass
class TextEncoder:
    """Frozen encoder: mean over the token sequence, optionally projected.

    kind "identity-mean" returns the mean token directly (token_dim must
    equal embed_dim); "projected-mean" applies a fixed random projection
    after the mean.  The projection, when present, is never trained.
    """

    kind: str
    token_dim: int
    embed_dim: int
    projection: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ContractViolation(
                f"unknown encoder kind {self.kind!r}, expected one of {ENCODER_KINDS}"
            )
        if self.kind == IDENTITY_MEAN:
            if self.token_dim != self.embed_dim:
                raise ContractViolation(
                    f"identity-mean requires token_dim == embed_dim, "
                    f"got {self.token_dim} vs {self.embed_dim}"
                )
            if self.projection is not None:
                raise ContractViolation("identity-mean takes no projection")
        else:
            if self.projection is None:
                raise ContractViolation("projected-mean requires a projection matrix")
            self.projection = np.asarray(self.projection, dtype=np.float64)
            if self.projection.shape != (self.embed_dim, self.token_dim):
                raise ContractViolation(
                    f"projection shape {self.projection.shape} != "
                    f"({self.embed_dim}, {self.token_dim})"
                )


def build_text_encoder(kind: str, token_dim: int, embed_dim: int, seed: int) -> TextEncoder:
    _require_positive(token_dim=token_dim, embed_dim=embed_dim)
    if kind == IDENTITY_MEAN:
        return TextEncoder(kind=kind, token_dim=token_dim, embed_dim=embed_dim)
    if kind == PROJECTED_MEAN:
        rng = np.random.default_rng([STREAM_PROJECTION, seed])
        # 1/sqrt(token_dim) scaling keeps output norms comparable to inputs.
        projection = rng.normal(
            0.0, 1.0 / np.sqrt(token_dim), size=(embed_dim, token_dim)
        )
        return TextEncoder(
            kind=kind, token_dim=token_dim, embed_dim=embed_dim, projection=projection
        )
    raise ContractViolation(
        f"unknown encoder kind {kind!r}, expected one of {ENCODER_KINDS}"
    )


def encode_text(encoder: TextEncoder, context: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    """Embed one descriptor: mean over [context ++ tokens], then project.

    ``context`` may be empty (shape (0, d)); the combined sequence must
    not be.  Linear in every token, which is what makes the exact
    gradient in :func:`encode_text_token_gradient` a constant map.
    """
    context = np.asarray(context, dtype=np.float64)
    tokens = np.asarray(tokens, dtype=np.float64)
    if context.ndim != 2 or tokens.ndim != 2:
        raise ContractViolation("context and tokens must be 2-D (length, dim)")
    length = context.shape[0] + tokens.shape[0]
    if length == 0:
        raise ContractViolation("token sequence is empty")
    width = tokens.shape[1] if tokens.shape[0] else context.shape[1]
    if (context.shape[0] and context.shape[1] != width) or (
        tokens.shape[0] and tokens.shape[1] != width
    ):
        raise ContractViolation("context and tokens disagree on dim")
    if width != encoder.token_dim:
        raise ContractViolation(
            f"token dim {width} != encoder token_dim {encoder.token_dim}"
        )
    mean = (context.sum(axis=0) + tokens.sum(axis=0)) / length
    if encoder.kind == PROJECTED_MEAN:
        return encoder.projection @ mean
    return mean


def encode_text_token_gradient(
    encoder: TextEncoder, grad_output: np.ndarray, sequence_length: int
) -> np.ndarray:
    """Pull an embedding-space gradient back to one input token.

    encode_text is linear, so d(embedding)/d(token_j) = P / L for every
    position j (P = identity for identity-mean), and the pullback of a
    gradient g is P^T g / L.
    """
    if sequence_length < 1:
        raise ContractViolation("sequence_length must be >= 1")
    grad_output = np.asarray(grad_output, dtype=np.float64)
    if grad_output.shape != (encoder.embed_dim,):
        raise ContractViolation(
            f"grad_output shape {grad_output.shape} != ({encoder.embed_dim},)"
        )
    if encoder.kind == PROJECTED_MEAN:
        return (encoder.projection.T @ grad_output) / sequence_length
    return grad_output / sequence_length


@dataclass
class ImageAdapter:
    """Trainable affine map from feature space into embedding space.

    With ``residual`` set (requires matching dims) the output is
    ``W x + b + x``, so the zero initialization is an exact identity and
    stage 2 starts from the untouched feature geometry.
    """

    weight: np.ndarray
    bias: np.ndarray
    residual: bool = True

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ContractViolation(f"weight must be 2-D, got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ContractViolation(
                f"bias shape {self.bias.shape} != ({self.weight.shape[0]},)"
            )
        if self.residual and self.weight.shape[0] != self.weight.shape[1]:
            raise ContractViolation(
                "residual adapter requires feature_dim == embed_dim, "
                f"got weight shape {self.weight.shape}"
            )

    @property
    def embed_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weight.shape[1]


def build_adapter(feature_dim: int, embed_dim: int, residual: bool = True) -> ImageAdapter:
    _require_positive(feature_dim=feature_dim, embed_dim=embed_dim)
    weight = np.zeros((embed_dim, feature_dim))
    bias = np.zeros(embed_dim)
    return ImageAdapter(weight=weight, bias=bias, residual=residual)


def encode_image(adapter: ImageAdapter, features) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.shape != (adapter.feature_dim,):
        raise ContractViolation(
            f"features shape {features.shape} != ({adapter.feature_dim},)"
        )
    if not np.all(np.isfinite(features)):
        raise ContractViolation("features contain non-finite entries")
    out = adapter.weight @ features + adapter.bias
    if adapter.residual:
        out = out + features
    return out


def adapter_gradients(
    adapter: ImageAdapter, features: np.ndarray, grad_output: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """(dL/dW, dL/db) given dL/d(output); the residual path adds nothing."""
    features = np.asarray(features, dtype=np.float64)
    grad_output = np.asarray(grad_output, dtype=np.float64)
    if features.shape != (adapter.feature_dim,):
        raise ContractViolation(
            f"features shape {features.shape} != ({adapter.feature_dim},)"
        )
    if grad_output.shape != (adapter.embed_dim,):
        raise ContractViolation(
            f"grad_output shape {grad_output.shape} != ({adapter.embed_dim},)"
        )
    return np.outer(grad_output, features), grad_output.copy()


@dataclass
class Model:
    """Bank + encoder + adapter + the similarity temperature, as one unit."""

    bank: DescriptorBank
    encoder: TextEncoder
    adapter: ImageAdapter
    temperature: float
    seed: int

    def __post_init__(self):
        if not (self.temperature > 0.0 and np.isfinite(self.temperature)):
            raise ContractViolation(f"temperature must be > 0, got {self.temperature}")
        if self.bank.token_dim != self.encoder.token_dim:
            raise ContractViolation(
                f"bank token dim {self.bank.token_dim} != "
                f"encoder token dim {self.encoder.token_dim}"
            )
        if self.adapter.embed_dim != self.encoder.embed_dim:
            raise ContractViolation(
                f"adapter embed dim {self.adapter.embed_dim} != "
                f"encoder embed dim {self.encoder.embed_dim}"
            )

    @property
    def n_classes(self) -> int:
        return self.bank.n_classes

    @property
    def n_subclasses(self) -> int:
        return self.bank.n_subclasses


def build_model(
    n_classes: int,
    n_subclasses: int,
    n_tokens: int,
    token_dim: int,
    embed_dim: int,
    feature_dim: int,
    context_length: int,
    encoder_kind: str = IDENTITY_MEAN,
    residual: bool = True,
    temperature: float = 0.01,
    seed: int = 0,
) -> Model:
    bank = build_bank(n_classes, n_subclasses, n_tokens, token_dim, context_length, seed)
    encoder = build_text_encoder(encoder_kind, token_dim, embed_dim, seed)
    adapter = build_adapter(feature_dim, embed_dim, residual)
    return Model(
        bank=bank, encoder=encoder, adapter=adapter, temperature=temperature, seed=seed
    )


def bank_embeddings(bank: DescriptorBank, encoder: TextEncoder) -> np.ndarray:
    """Embed every descriptor; element (i, k) is encode_text of grid (i, k)."""
    out = np.empty((bank.n_classes, bank.n_subclasses, encoder.embed_dim))
    for i in range(bank.n_classes):
        for k in range(bank.n_subclasses):
            out[i, k] = encode_text(encoder, bank.context, bank.tokens[i, k])
    return out


@dataclass(frozen=True)
class ParameterPartition:
    """Names of trainable vs frozen parameter groups for one stage."""

    trainable: frozenset[str]
    frozen: frozenset[str]


def parameter_partition(model: Model, stage: int) -> ParameterPartition:
    """Stage 1 trains only bank.tokens; stage 2 only the adapter.

    Every parameter group of the model appears in exactly one of the two
    sets, so the partition doubles as an inventory.
    """
    groups = {"bank.tokens", "bank.context", "adapter.weight", "adapter.bias"}
    if model.encoder.projection is not None:
        groups.add("encoder.projection")
    if stage == 1:
        trainable = {"bank.tokens"}
    elif stage == 2:
        trainable = {"adapter.weight", "adapter.bias"}
    else:
        raise ContractViolation(f"stage must be 1 or 2, got {stage}")
    return ParameterPartition(
        trainable=frozenset(trainable), frozen=frozenset(groups - trainable)
    )


_CHECKPOINT_VERSION = 1
_CHECKPOINT_HEADER = re.compile(
    r"^metd-checkpoint v(\d+) n_classes=(\d+) n_subclasses=(\d+) n_tokens=(\d+) "
    r"token_dim=(\d+) embed_dim=(\d+) feature_dim=(\d+) context_length=(\d+) "
    r"encoder=(\S+) residual=(true|false) temperature=(\S+) seed=(-?\d+)$"
)
_TOKEN_KEY = re.compile(r"^bank\.tokens\[(\d+)\]\[(\d+)\]\[(\d+)\]$")
_CONTEXT_KEY = re.compile(r"^bank\.context\[(\d+)\]$")


def _fmt_vector(values: np.ndarray) -> str:
    return ",".join(format(float(x), ".17g") for x in values)


def _fmt_matrix(values: np.ndarray) -> str:
    return ";".join(_fmt_vector(row) for row in values)


def _parse_vector(text: str, dim: int, line_no: int) -> np.ndarray:
    parts = text.split(",")
    if len(parts) != dim:
        raise ParseError(f"expected {dim} values, got {len(parts)}", line=line_no)
    try:
        values = np.array([float(p) for p in parts])
    except ValueError:
        raise ParseError("bad float value", line=line_no) from None
    if not np.all(np.isfinite(values)):
        raise ParseError("non-finite value", line=line_no)
    return values


def _parse_matrix(text: str, rows: int, cols: int, line_no: int) -> np.ndarray:
    parts = text.split(";")
    if len(parts) != rows:
        raise ParseError(f"expected {rows} rows, got {len(parts)}", line=line_no)
    return np.vstack([_parse_vector(p, cols, line_no) for p in parts])


def save_checkpoint(model: Model, path: str):
    """Serialize a model losslessly; same model in, byte-identical file out."""
    bank = model.bank
    header = (
        f"metd-checkpoint v{_CHECKPOINT_VERSION} "
        f"n_classes={bank.n_classes} n_subclasses={bank.n_subclasses} "
        f"n_tokens={bank.n_tokens} token_dim={bank.token_dim} "
        f"embed_dim={model.encoder.embed_dim} "
        f"feature_dim={model.adapter.feature_dim} "
        f"context_length={bank.context_length} "
        f"encoder={model.encoder.kind} "
        f"residual={'true' if model.adapter.residual else 'false'} "
        f"temperature={format(model.temperature, '.17g')} "
        f"seed={model.seed}"
    )
    lines = [header]
    for i in range(bank.n_classes):
        for k in range(bank.n_subclasses):
            for m in range(bank.n_tokens):
                lines.append(
                    f"bank.tokens[{i}][{k}][{m}]\t{_fmt_vector(bank.tokens[i, k, m])}"
                )
    for c in range(bank.context_length):
        lines.append(f"bank.context[{c}]\t{_fmt_vector(bank.context[c])}")
    lines.append(f"adapter.weight\t{_fmt_matrix(model.adapter.weight)}")
    lines.append(f"adapter.bias\t{_fmt_vector(model.adapter.bias)}")
    if model.encoder.projection is not None:
        lines.append(f"encoder.projection\t{_fmt_matrix(model.encoder.projection)}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path: str) -> Model:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty file, missing header", line=1)
    match = _CHECKPOINT_HEADER.match(lines[0])
    if not match:
        raise ParseError("bad checkpoint header", line=1)
    if int(match.group(1)) != _CHECKPOINT_VERSION:
        raise ParseError(f"unsupported format version v{match.group(1)}", line=1)
    n, k, m = int(match.group(2)), int(match.group(3)), int(match.group(4))
    token_dim, embed_dim = int(match.group(5)), int(match.group(6))
    feature_dim, context_length = int(match.group(7)), int(match.group(8))
    kind = match.group(9)
    residual = match.group(10) == "true"
    try:
        temperature = float(match.group(11))
    except ValueError:
        raise ParseError("bad temperature", line=1) from None
    seed = int(match.group(12))
    if kind not in ENCODER_KINDS:
        raise ParseError(f"unknown encoder kind {kind!r}", line=1)

    tokens = np.full((n, k, m, token_dim), np.nan)
    context = np.full((context_length, token_dim), np.nan)
    weight = None
    bias = None
    projection = None
    seen = set()
    for line_no, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if len(fields) != 2:
            raise ParseError("expected key<TAB>value", line=line_no)
        key, value = fields
        if key in seen:
            raise ParseError(f"duplicate key {key!r}", line=line_no)
        seen.add(key)
        token_match = _TOKEN_KEY.match(key)
        context_match = _CONTEXT_KEY.match(key)
        if token_match:
            i, kk, mm = (int(g) for g in token_match.groups())
            if not (i < n and kk < k and mm < m):
                raise ParseError(f"token index out of range in {key!r}", line=line_no)
            tokens[i, kk, mm] = _parse_vector(value, token_dim, line_no)
        elif context_match:
            c = int(context_match.group(1))
            if c >= context_length:
                raise ParseError(f"context index out of range in {key!r}", line=line_no)
            context[c] = _parse_vector(value, token_dim, line_no)
        elif key == "adapter.weight":
            weight = _parse_matrix(value, embed_dim, feature_dim, line_no)
        elif key == "adapter.bias":
            bias = _parse_vector(value, embed_dim, line_no)
        elif key == "encoder.projection":
            projection = _parse_matrix(value, embed_dim, token_dim, line_no)
        else:
            raise ParseError(f"unknown key {key!r}", line=line_no)
    if np.any(np.isnan(tokens)) or np.any(np.isnan(context)):
        raise ParseError("missing token or context entries")
    if weight is None or bias is None:
        raise ParseError("missing adapter entries")
    if kind == PROJECTED_MEAN and projection is None:
        raise ParseError("missing encoder.projection")
    if kind == IDENTITY_MEAN and projection is not None:
        raise ParseError("identity-mean checkpoint carries a projection")
    try:
        bank = DescriptorBank(tokens=tokens, context=context)
        encoder = TextEncoder(
            kind=kind, token_dim=token_dim, embed_dim=embed_dim, projection=projection
        )
        adapter = ImageAdapter(weight=weight, bias=bias, residual=residual)
        return Model(
            bank=bank,
            encoder=encoder,
            adapter=adapter,
            temperature=temperature,
            seed=seed,
        )
    except ContractViolation as exc:
        raise ParseError(str(exc)) from exc
