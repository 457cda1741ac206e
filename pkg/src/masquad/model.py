"""The team transformer: token embedding, mask-gated encoder blocks, and the
pairwise action head.

Every unit at every window step is one token. The encoder is a stack of
pre-norm blocks whose self-attention is gated by an externally supplied
boolean mask, so the same parameters serve full-information execution, the
randomly thinned training regime, and visibility-restricted execution.

Actions split into intrinsic (no-op / stop / moves, a fixed-width head) and
interactive (one scalar logit per executor-receiver pair, computed as an
affine map of the two output embeddings concatenated). The interactive vector
has one slot per unit, so the action space grows and shrinks with the unit
count without any weight change.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import numeric
from .arena import D_STATE, K_INTR
from .numeric import (
    Tensor,
    bmm,
    concat,
    cross_entropy,
    gelu,
    layer_norm,
    masked_softmax,
    matmul,
    mean,
    permute,
    reshape,
    take_rows,
)


class ModelError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_blocks: int = 2
    d_hidden: int = 64
    n_heads: int = 4
    context_len: int = 5
    d_state: int = D_STATE
    k_intr: int = K_INTR

    def validate(self) -> None:
        if self.d_hidden % self.n_heads != 0:
            raise ModelError(f"d_hidden {self.d_hidden} not divisible by n_heads {self.n_heads}")
        if min(self.n_blocks, self.d_hidden, self.n_heads, self.context_len) < 1:
            raise ModelError("all model dimensions must be >= 1")


def desk_preset(**overrides) -> ModelConfig:
    cfg = ModelConfig(n_blocks=2, d_hidden=64, n_heads=4, context_len=5)
    return ModelConfig(**{**asdict(cfg), **overrides})


def paper_preset(**overrides) -> ModelConfig:
    cfg = ModelConfig(n_blocks=6, d_hidden=128, n_heads=8, context_len=10)
    return ModelConfig(**{**asdict(cfg), **overrides})


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Fresh parameters; dict order is the canonical checkpoint field order."""
    cfg.validate()
    d, k = cfg.d_hidden, cfg.k_intr

    def normal(*shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)

    p = {
        "embed.w": normal(cfg.d_state, d),
        "embed.b": zeros(d),
        "pos.table": normal(cfg.context_len, d),
    }
    for b in range(cfg.n_blocks):
        p[f"block{b}.ln1.gain"] = ones(d)
        p[f"block{b}.ln1.bias"] = zeros(d)
        for name in ("wq", "wk", "wv", "wo"):
            p[f"block{b}.attn.{name}"] = normal(d, d)
        for name in ("bq", "bk", "bv", "bo"):
            p[f"block{b}.attn.{name}"] = zeros(d)
        p[f"block{b}.ln2.gain"] = ones(d)
        p[f"block{b}.ln2.bias"] = zeros(d)
        p[f"block{b}.ff.w1"] = normal(d, 4 * d)
        p[f"block{b}.ff.b1"] = zeros(4 * d)
        p[f"block{b}.ff.w2"] = normal(4 * d, d)
        p[f"block{b}.ff.b2"] = zeros(d)
    p["head.w_intr"] = normal(d, k)
    p["head.b_intr"] = zeros(k)
    # the pair weight [2d, 1] of the concatenated embedding, stored split:
    # logit(i, j) = h_i @ w_exec + h_j @ w_recv + b_pair
    p["head.w_exec"] = normal(d, 1)
    p["head.w_recv"] = normal(d, 1)
    p["head.b_pair"] = zeros(1)
    return p


def embed_tokens(params: dict, token_states: np.ndarray,
                 token_positions: np.ndarray) -> Tensor:
    """Linear state embedding plus a learned window-position embedding.

    No per-unit identity channel: two units with identical states at the same
    window position embed identically, which is what lets one parameter set
    serve any unit count.
    """
    states = np.asarray(token_states, dtype=np.float64)
    if states.ndim != 2 or states.shape[1] != params["embed.w"].data.shape[0]:
        raise ModelError(f"token states must be [T, {params['embed.w'].data.shape[0]}], "
                         f"got {states.shape}")
    x = matmul(Tensor(states), params["embed.w"]) + params["embed.b"]
    return x + take_rows(params["pos.table"], np.asarray(token_positions, dtype=np.intp))


def encode(params: dict, cfg: ModelConfig, tokens: Tensor, allow: np.ndarray) -> Tensor:
    """Pre-norm encoder stack; the same mask gates every block and head."""
    T = tokens.data.shape[0]
    if allow.shape != (T, T):
        raise ModelError(f"mask shape {allow.shape} does not match {T} tokens")
    d = cfg.d_hidden
    nh = cfg.n_heads
    dh = d // nh
    scale = 1.0 / np.sqrt(dh)
    allow_h = np.broadcast_to(allow, (nh, T, T))
    h = tokens
    for b in range(cfg.n_blocks):
        x = layer_norm(h, params[f"block{b}.ln1.gain"], params[f"block{b}.ln1.bias"])
        q = matmul(x, params[f"block{b}.attn.wq"]) + params[f"block{b}.attn.bq"]
        k = matmul(x, params[f"block{b}.attn.wk"]) + params[f"block{b}.attn.bk"]
        v = matmul(x, params[f"block{b}.attn.wv"]) + params[f"block{b}.attn.bv"]
        q3 = permute(reshape(q, (T, nh, dh)), (1, 0, 2))
        k3 = permute(reshape(k, (T, nh, dh)), (1, 2, 0))
        v3 = permute(reshape(v, (T, nh, dh)), (1, 0, 2))
        attn = masked_softmax(bmm(q3, k3) * scale, allow_h)
        ctx = reshape(permute(bmm(attn, v3), (1, 0, 2)), (T, d))
        h = h + (matmul(ctx, params[f"block{b}.attn.wo"]) + params[f"block{b}.attn.bo"])
        x2 = layer_norm(h, params[f"block{b}.ln2.gain"], params[f"block{b}.ln2.bias"])
        ff = matmul(gelu(matmul(x2, params[f"block{b}.ff.w1"]) + params[f"block{b}.ff.b1"]),
                    params[f"block{b}.ff.w2"]) + params[f"block{b}.ff.b2"]
        h = h + ff
    return h


def forward_tokens(params: dict, cfg: ModelConfig, token_states: np.ndarray,
                   token_positions: np.ndarray, allow: np.ndarray) -> Tensor:
    return encode(params, cfg, embed_tokens(params, token_states, token_positions), allow)


def combined_logits(params: dict, h: Tensor, exec_tokens: np.ndarray,
                    recv_grids: np.ndarray) -> Tensor:
    """Per-executor action logits [n, k_intr + R].

    exec_tokens[n] are flat token indices of the acting agents; recv_grids[n, R]
    are the flat token indices of each executor's R candidate receivers.
    """
    exec_tokens = np.asarray(exec_tokens, dtype=np.intp)
    recv_grids = np.asarray(recv_grids, dtype=np.intp)
    h_exec = take_rows(h, exec_tokens)                              # [n, d]
    intr = matmul(h_exec, params["head.w_intr"]) + params["head.b_intr"]
    a_exec = matmul(h_exec, params["head.w_exec"])                  # [n, 1]
    b_all = matmul(h, params["head.w_recv"])                        # [T, 1]
    b_recv = reshape(take_rows(b_all, recv_grids), recv_grids.shape)  # [n, R]
    inter = a_exec + b_recv + params["head.b_pair"]
    return concat([intr, inter], axis=-1)


@dataclass
class GarLogits:
    """Evaluation-facing action scores for one agent: fixed intrinsic slots
    followed by one interactive slot per unit."""
    intrinsic: np.ndarray        # [k_intr]
    interactive: np.ndarray      # [N]
    availability: np.ndarray     # [k_intr + N] bool

    def combined(self) -> np.ndarray:
        return np.concatenate([self.intrinsic, self.interactive])


def select_action(logits: GarLogits, mode: str = "argmax",
                  rng: np.random.Generator | None = None) -> int:
    """Argmax (ties to the lowest index) or a softmax sample over available slots."""
    avail = np.asarray(logits.availability, dtype=bool)
    if not avail.any():
        raise ModelError("no available action to select")
    z = np.where(avail, logits.combined(), -np.inf)
    if mode == "argmax":
        return int(np.argmax(z))
    if mode == "sample":
        if rng is None:
            raise ModelError("sample mode needs an rng")
        zmax = z.max()
        p = np.where(avail, np.exp(np.where(avail, z - zmax, 0.0)), 0.0)
        p /= p.sum()
        return int(rng.choice(len(p), p=p))
    raise ModelError(f"unknown selection mode {mode!r}")


def imitation_loss(params: dict, cfg: ModelConfig, states: np.ndarray,
                   allow: np.ndarray, targets: np.ndarray, include: np.ndarray,
                   positions: np.ndarray):
    """Mean cross-entropy over the included (timestep, agent) slots of one window.

    states [L, N, d_state]; allow [(L*N), (L*N)]; targets [L, N] action ids;
    include [L, N] marks living controllable agents at real (non-pad) steps.
    Excluded slots contribute nothing; the mean divides by the included count.
    Returns (loss Tensor, per-slot argmax correctness [n] ndarray).
    """
    states = np.asarray(states, dtype=np.float64)
    L, N, _ = states.shape
    include = np.asarray(include, dtype=bool)
    if not include.any():
        raise ModelError("imitation loss needs at least one included agent slot")
    h = forward_tokens(params, cfg, states.reshape(L * N, -1),
                       np.repeat(np.asarray(positions, dtype=np.intp), N), allow)
    t_idx, u_idx = np.nonzero(include)
    exec_tokens = t_idx * N + u_idx
    recv_grids = t_idx[:, None] * N + np.arange(N)[None, :]
    logits = combined_logits(params, h, exec_tokens, recv_grids)
    tgt = np.asarray(targets, dtype=np.intp)[t_idx, u_idx]
    loss = mean(cross_entropy(logits, tgt))
    correct = logits.data.argmax(axis=-1) == tgt
    return loss, correct


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"MQCK"
CHECKPOINT_VERSION = 1
# Layout: magic, <u32 version, <u32 header length, header JSON (utf-8), then
# the raw parameter payload: each array as little-endian float64, row-major,
# concatenated in the header's "params" order. The header carries the config,
# arbitrary extra metadata, every parameter's name and shape, and the sha256
# of the payload.


def save_checkpoint(path, params: dict, config: dict, extra: dict | None = None) -> None:
    payload = b"".join(p.data.astype("<f8").tobytes(order="C") for p in params.values())
    header = {
        "config": config,
        "extra": extra or {},
        "params": [{"name": k, "shape": list(p.data.shape)} for k, p in params.items()],
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        f.write(payload)


def load_checkpoint(path):
    """Returns (params dict of Tensors, config dict, extra dict)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointChecksumError(f"{path}: payload checksum mismatch")
    params = {}
    offset = 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=size, offset=offset)
        offset += size * 8
        params[entry["name"]] = Tensor(arr.reshape(shape).astype(np.float64),
                                       requires_grad=True)
    if offset != len(payload):
        raise CheckpointChecksumError(f"{path}: payload size mismatch")
    return params, header["config"], header["extra"]


def model_config_from_dict(d: dict) -> ModelConfig:
    cfg = ModelConfig(**{k: v for k, v in d.items() if k != "kind"})
    cfg.validate()
    return cfg


def params_numpy(params: dict) -> dict[str, np.ndarray]:
    """Detached copies for worker processes."""
    return {k: p.data.copy() for k, p in params.items()}


def params_from_numpy(arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in arrays.items()}


def count_parameters(params: dict) -> int:
    return int(sum(p.data.size for p in params.values()))


__all__ = [
    "GarLogits", "ModelConfig", "ModelError",
    "CheckpointError", "CheckpointVersionError", "CheckpointChecksumError",
    "combined_logits", "desk_preset", "embed_tokens", "encode", "forward_tokens",
    "imitation_loss", "init_params", "load_checkpoint", "model_config_from_dict",
    "paper_preset", "params_from_numpy", "params_numpy", "save_checkpoint",
    "select_action", "count_parameters",
]
