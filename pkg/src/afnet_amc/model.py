"""AFNet: a conv stem, a stack of adaptive-fusion (AF) units and a GAP head.

Parameters live in a flat ``dict[str, ndarray]`` whose insertion order is the
canonical block order (also the checkpoint order)::

    conv1.w  (2, 5, 1, C)        conv1.b  (C,)
    unit{i}.small      (1, 3, C/g, C)    dilation (1, 1)
    unit{i}.large      (1, 3, C/g, C)    dilation (1, 2), receptive field 5
    unit{i}.fuse{j}.w1 (C, d)            shared squeeze, d = C / r
    unit{i}.fuse{j}.w2 (d, C)            logits for the first input
    unit{i}.fuse{j}.w3 (d, C)            logits for the second input
    head.w   (C, M)              head.b   (M,)

for ``i = 1..units`` and ``j = 1, 2``. ``fuse1`` merges the two branches with
lambda = 1; ``fuse2`` merges the unit input with the branch mix with lambda = 2.
"""

from __future__ import annotations

import hashlib
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import core
from .core import ShapeError

CHECKPOINT_MAGIC = b"AFN1"
CHECKPOINT_VERSION = 1
CONV1_KERNEL = (2, 5)
BRANCH_WIDTH = 3
LARGE_DILATION = (1, 2)
FUSION_LAMBDAS = (1.0, 2.0)
PROB_FLOOR = 1e-12


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 48
    compression: int = 16
    units: int = 9
    pool_after: tuple[int, ...] = (3, 6)
    groups: int = 2
    num_classes: int = 11
    frame_length: int = 128

    def __post_init__(self):
        object.__setattr__(self, "pool_after", tuple(int(p) for p in self.pool_after))
        if self.channels < 1 or self.compression < 1 or self.channels % self.compression:
            raise ValueError(
                f"compression {self.compression} must divide channel count {self.channels}"
            )
        if self.groups < 1 or self.channels % self.groups:
            raise ValueError(f"groups {self.groups} must divide channel count {self.channels}")
        if self.units < 1:
            raise ValueError("need at least one AF unit")
        if list(self.pool_after) != sorted(set(self.pool_after)) or any(
            not 1 <= p <= self.units for p in self.pool_after
        ):
            raise ValueError(f"pool positions {self.pool_after} must be increasing, within 1..{self.units}")
        if self.frame_length % (2 ** len(self.pool_after)):
            raise ValueError(
                f"frame length {self.frame_length} must be divisible by "
                f"{2 ** len(self.pool_after)} for {len(self.pool_after)} pooling layers"
            )
        if self.num_classes < 2:
            raise ValueError("need at least two classes")

    @property
    def squeeze(self) -> int:
        return self.channels // self.compression

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pool_after"] = list(self.pool_after)
        return d


def count_fusion_params(channels: int, compression: int) -> int:
    """Trainable values in one fusion module: three bias-free C x d maps."""
    if compression < 1 or channels % compression:
        raise ValueError(f"compression {compression} must divide channel count {channels}")
    return 3 * channels * channels // compression


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    c, d, g = cfg.channels, cfg.squeeze, cfg.groups
    shapes: dict[str, tuple[int, ...]] = {
        "conv1.w": (*CONV1_KERNEL, 1, c),
        "conv1.b": (c,),
    }
    for i in range(1, cfg.units + 1):
        shapes[f"unit{i}.small"] = (1, BRANCH_WIDTH, c // g, c)
        shapes[f"unit{i}.large"] = (1, BRANCH_WIDTH, c // g, c)
        for j in (1, 2):
            shapes[f"unit{i}.fuse{j}.w1"] = (c, d)
            shapes[f"unit{i}.fuse{j}.w2"] = (d, c)
            shapes[f"unit{i}.fuse{j}.w3"] = (d, c)
    shapes["head.w"] = (c, cfg.num_classes)
    shapes["head.b"] = (cfg.num_classes,)
    return shapes


def fan_in(name: str, shape: tuple[int, ...]) -> int:
    if len(shape) == 4:
        return shape[0] * shape[1] * shape[2]
    return shape[0]


def init_params(cfg: ModelConfig, seed: int, head_init: str = "zero") -> dict[str, np.ndarray]:
    """He-uniform weights (bound sqrt(6 / fan_in)) and zero biases.

    The head weights start at zero by default: the lambda = 2 fusions add the
    unit input back at full strength, so without normalisation the pooled
    features grow roughly 2.5x per unit and a He-initialised head would start
    training from saturated logits. ``head_init="he"`` restores the plain rule.
    """
    if head_init not in ("zero", "he"):
        raise ValueError(f"head_init must be 'zero' or 'he', got {head_init!r}")
    rng = np.random.default_rng(seed)
    dtype = core.get_dtype()
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            bound = np.sqrt(6.0 / fan_in(name, shape))
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    if head_init == "zero":
        params["head.w"][:] = 0
    return params


def count_params(params) -> int:
    return int(sum(p.size for p in params.values()))


# --------------------------------------------------------------------------
# fusion
# --------------------------------------------------------------------------


def lambda_softmax(a, b, lam: float):
    """Two-way channel-wise softmax scaled so that alpha + beta == lam."""
    m = np.maximum(a, b)
    ea = np.exp(a - m)
    eb = np.exp(b - m)
    total = ea + eb
    return lam * ea / total, lam * eb / total


def fusion_forward(A, B, w1, w2, w3, lam: float, relu_inputs: list | None = None):
    """V_c = alpha_c * A_c + beta_c * B_c with attention from GAP(A + B)."""
    if A.shape != B.shape:
        raise ShapeError(f"fusion inputs differ in shape: {A.shape} vs {B.shape}")
    s, gap_cache = core.global_avg_pool_forward(A + B)
    h = s @ w1
    z = np.maximum(h, 0)
    a = z @ w2
    b = z @ w3
    alpha, beta = lambda_softmax(a, b, lam)
    expand = (slice(None), None, None, slice(None)) if A.ndim == 4 else (None, None, slice(None))
    V = alpha[expand] * A + beta[expand] * B
    if relu_inputs is not None:
        relu_inputs.append(h)
    return V, (A, B, s, h, z, alpha, beta, lam, w1, w2, w3, gap_cache, expand)


def fusion_backward(dV, cache):
    """Returns ``(dA, dB, dw1, dw2, dw3)``."""
    A, B, s, h, z, alpha, beta, lam, w1, w2, w3, gap_cache, expand = cache
    spatial = (1, 2) if A.ndim == 4 else (0, 1)
    dA = alpha[expand] * dV
    dB = beta[expand] * dV
    dalpha = (dV * A).sum(axis=spatial)
    dbeta = (dV * B).sum(axis=spatial)
    # alpha = lam * sigmoid(a - b), beta = lam - alpha
    da = (dalpha - dbeta) * alpha * beta / lam
    db = -da
    z2 = z.reshape(-1, z.shape[-1])
    dw2 = z2.T @ da.reshape(-1, da.shape[-1])
    dw3 = z2.T @ db.reshape(-1, db.shape[-1])
    dz = da @ w2.T + db @ w3.T
    dh = dz * (h > 0)
    dw1 = s.reshape(-1, s.shape[-1]).T @ dh.reshape(-1, dh.shape[-1])
    ds = dh @ w1.T
    dsum = core.global_avg_pool_backward(ds, gap_cache)
    return dA + dsum, dB + dsum, dw1, dw2, dw3


# --------------------------------------------------------------------------
# AF unit
# --------------------------------------------------------------------------


def _fuse_keys(prefix, j):
    return (f"{prefix}.fuse{j}.w1", f"{prefix}.fuse{j}.w2", f"{prefix}.fuse{j}.w3")


def af_unit_forward(X, params, prefix: str, groups: int, relu_inputs: list | None = None):
    """Dual-branch conv + two fusions. Output shape equals input shape."""
    if X.shape[-1] != params[f"{prefix}.small"].shape[-1]:
        raise ShapeError(
            f"{prefix} expects {params[f'{prefix}.small'].shape[-1]} channels, got {X.shape[-1]}"
        )
    ps, cs = core.conv2d_forward(X, params[f"{prefix}.small"], groups, (1, 1), "same")
    pl, cl = core.conv2d_forward(X, params[f"{prefix}.large"], groups, LARGE_DILATION, "same")
    if relu_inputs is not None:
        relu_inputs.extend([ps, pl])
    P = np.maximum(ps, 0)
    Q = np.maximum(pl, 0)
    w = [params[k] for k in _fuse_keys(prefix, 1)]
    U, cf1 = fusion_forward(P, Q, *w, FUSION_LAMBDAS[0], relu_inputs)
    w = [params[k] for k in _fuse_keys(prefix, 2)]
    Y, cf2 = fusion_forward(X, U, *w, FUSION_LAMBDAS[1], relu_inputs)
    return Y, (prefix, ps, pl, cs, cl, cf1, cf2)


def af_unit_backward(dY, cache, grads: dict):
    """Accumulates parameter gradients into ``grads``; returns dX."""
    prefix, ps, pl, cs, cl, cf1, cf2 = cache
    dX, dU, *dw = fusion_backward(dY, cf2)
    for key, g in zip(_fuse_keys(prefix, 2), dw):
        grads[key] = g
    dP, dQ, *dw = fusion_backward(dU, cf1)
    for key, g in zip(_fuse_keys(prefix, 1), dw):
        grads[key] = g
    dxs, grads[f"{prefix}.small"] = core.conv2d_backward(core.relu_backward(dP, ps), cs)
    dxl, grads[f"{prefix}.large"] = core.conv2d_backward(core.relu_backward(dQ, pl), cl)
    return dX + dxs + dxl


# --------------------------------------------------------------------------
# full network
# --------------------------------------------------------------------------


def _as_input(frames, cfg: ModelConfig):
    frames = np.asarray(frames)
    if frames.ndim == 2:
        frames = frames[None]
    if frames.ndim != 3 or frames.shape[1] != 2:
        raise ShapeError(f"expected (2, N) frames or a (B, 2, N) batch, got {frames.shape}")
    if frames.shape[2] != cfg.frame_length:
        raise ShapeError(
            f"frame length {frames.shape[2]} does not match model frame length {cfg.frame_length}"
        )
    return frames[..., None]


def logits_forward(params, cfg: ModelConfig, frames, relu_inputs: list | None = None):
    """Forward pass to pre-softmax logits for a (B, 2, N) batch."""
    x = _as_input(frames, cfg).astype(params["conv1.w"].dtype, copy=False)
    z0, c0 = core.conv2d_forward(x, params["conv1.w"], 1, (1, 1), ("valid", "same"))
    z0 = z0 + params["conv1.b"]
    if relu_inputs is not None:
        relu_inputs.append(z0)
    h = np.maximum(z0, 0)
    caches = []
    for i in range(1, cfg.units + 1):
        h, cu = af_unit_forward(h, params, f"unit{i}", cfg.groups, relu_inputs)
        caches.append(("unit", cu))
        if i in cfg.pool_after:
            h, cp = core.maxpool2d_forward(h)
            caches.append(("pool", cp))
    g, cg = core.global_avg_pool_forward(h)
    logits, cd = core.dense_forward(g, params["head.w"], params["head.b"])
    return logits, (c0, z0, caches, cg, cd)


def logits_backward(dlogits, cache, params):
    c0, z0, caches, cg, cd = cache
    grads: dict[str, np.ndarray] = {}
    dg, grads["head.w"], grads["head.b"] = core.dense_backward(dlogits, cd)
    dh = core.global_avg_pool_backward(dg, cg)
    for kind, c in reversed(caches):
        if kind == "pool":
            dh = core.maxpool2d_backward(dh, c)
        else:
            dh = af_unit_backward(dh, c, grads)
    dz0 = core.relu_backward(dh, z0)
    grads["conv1.b"] = dz0.sum(axis=(0, 1, 2))
    _, grads["conv1.w"] = core.conv2d_backward(dz0, c0)
    return {name: grads[name] for name in params}


def afnet_forward(frames, params, cfg: ModelConfig, chunk_size: int = 256):
    """Posterior probabilities, shape (M,) for one frame or (B, M) for a batch."""
    single = np.asarray(frames).ndim == 2
    frames = np.asarray(frames)
    if single:
        frames = frames[None]
    out = [
        core.softmax(logits_forward(params, cfg, frames[s : s + chunk_size])[0])
        for s in range(0, len(frames), chunk_size)
    ]
    probs = np.concatenate(out) if out else np.zeros((0, cfg.num_classes))
    return probs[0] if single else probs


def predict(frames, params, cfg: ModelConfig) -> np.ndarray:
    """Maximum a posteriori class index per frame."""
    return np.argmax(afnet_forward(frames, params, cfg), axis=-1)


def _chunk_loss_grad(params, cfg, frames, labels, weights):
    logits, cache = logits_forward(params, cfg, frames)
    probs = core.softmax(logits)
    n = len(labels)
    p_true = probs[np.arange(n), labels]
    losses = -np.log(np.maximum(p_true, PROB_FLOOR))
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1
    if weights is not None:
        losses = weights * losses
        dlogits *= weights[:, None]
    grads = logits_backward(dlogits.astype(logits.dtype, copy=False), cache, params)
    return float(losses.astype(np.float64).sum()), grads, probs


def loss_and_grad(params, cfg: ModelConfig, frames, labels, weights=None, chunk_size=128, threads=1):
    """Mean (optionally confidence-weighted) cross entropy and its gradient.

    The batch is split into fixed ``chunk_size`` slices regardless of
    ``threads``; chunk gradients are summed in chunk order, so the result does
    not depend on the thread count.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= cfg.num_classes:
        raise ValueError(f"labels must lie in 0..{cfg.num_classes - 1}")
    n = len(labels)
    if weights is not None:
        weights = np.asarray(weights, dtype=params["conv1.w"].dtype)
    starts = list(range(0, n, chunk_size))

    def work(s):
        w = None if weights is None else weights[s : s + chunk_size]
        return _chunk_loss_grad(params, cfg, frames[s : s + chunk_size], labels[s : s + chunk_size], w)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, starts))
    else:
        results = [work(s) for s in starts]

    total = 0.0
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    for loss_sum, g, _ in results:
        total += loss_sum
        for k in grads:
            grads[k] += g[k]
    scale = 1.0 / n
    grads = {k: (g * scale).astype(params[k].dtype, copy=False) for k, g in grads.items()}
    probs = np.concatenate([r[2] for r in results])
    return total / n, grads, probs


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def checkpoint_bytes(params, cfg: ModelConfig) -> bytes:
    shapes = param_shapes(cfg)
    if list(params) != list(shapes):
        raise CheckpointError("parameter blocks do not match the model configuration")
    head = CHECKPOINT_MAGIC + struct.pack(
        "<HIIIIIII",
        CHECKPOINT_VERSION,
        cfg.channels,
        cfg.compression,
        cfg.units,
        cfg.groups,
        cfg.num_classes,
        cfg.frame_length,
        len(cfg.pool_after),
    )
    head += struct.pack(f"<{len(cfg.pool_after)}I", *cfg.pool_after)
    blocks = []
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise CheckpointError(f"block {name} has shape {params[name].shape}, expected {shape}")
        blocks.append(np.ascontiguousarray(params[name], dtype="<f4").tobytes())
    return head + b"".join(blocks)


def checkpoint_hash(params, cfg: ModelConfig) -> str:
    return hashlib.sha256(checkpoint_bytes(params, cfg)).hexdigest()


def save_checkpoint(path, params, cfg: ModelConfig) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, cfg))


def parse_checkpoint(data: bytes):
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    fixed = struct.calcsize("<HIIIIIII")
    if len(data) < 4 + fixed:
        raise CheckpointError("truncated checkpoint header")
    version, c, r, units, groups, m, n, npool = struct.unpack_from("<HIIIIIII", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 4 + fixed
    pools = struct.unpack_from(f"<{npool}I", data, off)
    off += 4 * npool
    cfg = ModelConfig(c, r, units, pools, groups, m, n)
    params = {}
    for name, shape in param_shapes(cfg).items():
        size = int(np.prod(shape))
        if off + 4 * size > len(data):
            raise CheckpointError(f"truncated checkpoint at block {name}")
        params[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
        off += 4 * size
    if off != len(data):
        raise CheckpointError(f"{len(data) - off} trailing bytes after the last block")
    return params, cfg


def load_checkpoint(path):
    return parse_checkpoint(Path(path).read_bytes())
